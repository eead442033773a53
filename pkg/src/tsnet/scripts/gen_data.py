# Copyright 2024 The tsnet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""CLI script to build train/test/val patch-pair caches from aligned images.

Synthesizes images unless `data.source_dir` names a directory of `<pair-id>/{a,b}.png`.
"""

from typing import Any, Dict, Mapping, Optional

import sacred

from tsnet import config, datasets, serialize
from tsnet.scripts import script_utils

gen_data_ex = sacred.Experiment("gen_data")
script_utils.add_experiment_config(gen_data_ex)
script_utils.add_logging_config(gen_data_ex, "gen_data")


@gen_data_ex.main
def gen_data(
    model: Mapping[str, Any],
    loss: Mapping[str, Any],
    train: Mapping[str, Any],
    data: Mapping[str, Any],
    out_dir: Optional[str],
    runs: int,
    config_path: Optional[str],
    log_dir: str,
) -> Dict[str, Dict[str, int]]:
    """Writes `{train,test,val}.tspm` and `splits.tsv` to `log_dir`; prints split counts."""
    cfg = script_utils.experiment_config(model, loss, train, data, out_dir, runs, config_path)
    splits = datasets.generate(cfg.data)
    serialize.write_splits(log_dir, splits)
    config.save(f"{log_dir}/config.txt", cfg)

    table = datasets.split_table(splits)
    print(table.to_string())
    return {column: {k: int(v) for k, v in table[column].items()} for column in table.columns}


if __name__ == "__main__":
    script_utils.experiment_main(gen_data_ex, "gen_data")

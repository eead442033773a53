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

"""Binary pair caches, split manifests and model checkpoints.

Pair cache (`.tspm`): magic `TSPM`, u16 version, then fixed-size records of a u8 label
and 2×64×64 float32 patches, all little-endian.

Checkpoint (`.tsck`): magic `TSCK`, u16 version, u32 length of a JSON metadata block,
the metadata, raw little-endian arrays at the offsets the metadata lists, and a
trailing CRC32 of every preceding byte.
"""

import dataclasses
import json
import logging
import os
import struct
import zlib
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd

from tsnet import datasets, models

PAIR_MAGIC = b"TSPM"
PAIR_VERSION = 1
CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sH")
_JSON_LENGTH = struct.Struct("<I")
_CRC = struct.Struct("<I")

PAIR_RECORD = np.dtype(
    [
        ("label", "u1"),
        ("patches", "<f4", (2, datasets.PATCH_SIZE, datasets.PATCH_SIZE)),
    ]
)


class IntegrityError(ValueError):
    """A cache or checkpoint file is truncated, corrupt, or of an unknown version."""


def get_output_dir():
    """Get default output directory to use as parent for relative paths."""
    default = os.path.join(os.getenv("HOME"), "output")
    return os.getenv("TSNET_OUTPUT_ROOT", default)


def _check_header(blob: bytes, magic: bytes, version: int, path: str) -> None:
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header at byte offset {len(blob)}")
    found_magic, found_version = _HEADER.unpack_from(blob)
    if found_magic != magic:
        raise IntegrityError(f"{path}: bad magic {found_magic!r} at byte offset 0")
    if found_version != version:
        raise IntegrityError(f"{path}: unknown version {found_version} at byte offset 4")


# *** Pair caches and split manifests ***


def write_pair_cache(path: str, dataset: datasets.PatchDataset) -> None:
    records = np.zeros(len(dataset), dtype=PAIR_RECORD)
    records["label"] = dataset.labels
    records["patches"] = dataset.patches
    with open(path, "wb") as f:
        f.write(_HEADER.pack(PAIR_MAGIC, PAIR_VERSION))
        f.write(records.tobytes())


def read_pair_cache(path: str) -> datasets.PatchDataset:
    """Reads a `.tspm` file.

    Raises:
        IntegrityError: on a bad header, a partial trailing record or an invalid label.
    """
    with open(path, "rb") as f:
        blob = f.read()
    _check_header(blob, PAIR_MAGIC, PAIR_VERSION, path)
    body = len(blob) - _HEADER.size
    n, remainder = divmod(body, PAIR_RECORD.itemsize)
    if remainder:
        offset = _HEADER.size + n * PAIR_RECORD.itemsize
        raise IntegrityError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(blob, dtype=PAIR_RECORD, offset=_HEADER.size, count=n)
    bad = np.flatnonzero(records["label"] > 1)
    if bad.size:
        offset = _HEADER.size + int(bad[0]) * PAIR_RECORD.itemsize
        raise IntegrityError(f"{path}: label {records['label'][bad[0]]} at byte offset {offset}")
    return datasets.PatchDataset(
        patches=records["patches"].astype(np.float32),
        labels=records["label"].astype(np.uint8),
    )


def cache_path(cache_dir: str, split: str) -> str:
    return os.path.join(cache_dir, f"{split}.tspm")


def write_splits(cache_dir: str, splits: datasets.SplitPairs) -> None:
    """Writes one pair cache per split plus `splits.tsv` mapping source images to splits."""
    os.makedirs(cache_dir, exist_ok=True)
    for split, dataset in splits.datasets().items():
        write_pair_cache(cache_path(cache_dir, split), dataset)
    manifest = pd.DataFrame(sorted(splits.assignment.items()), columns=["pair_id", "split"])
    manifest.to_csv(os.path.join(cache_dir, "splits.tsv"), sep="\t", index=False)
    logging.info(f"Wrote pair caches and split manifest to {cache_dir}")


def read_split_manifest(cache_dir: str) -> Dict[str, str]:
    manifest = pd.read_csv(os.path.join(cache_dir, "splits.tsv"), sep="\t", dtype=str)
    return dict(zip(manifest["pair_id"], manifest["split"]))


def read_split(cache_dir: str, split: str) -> datasets.PatchDataset:
    if split not in datasets.SPLITS:
        raise ValueError(f"unknown split '{split}', expected one of {datasets.SPLITS}")
    return read_pair_cache(cache_path(cache_dir, split))


# *** Checkpoints ***


@dataclasses.dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue training it.

    Attributes:
        spec: `ModelSpec.to_dict()` of the model.
        config: Flat experiment configuration the model was trained with.
        params: Parameter arrays keyed by their name in `named_parameters`.
        velocities: Optimizer momentum buffers, keyed like `params`.
        rng_state: `bit_generator.state` of the shuffling generator.
        epoch: Number of completed epochs.
        stats: Normalization statistics of the training split.
        best_val_err: Lowest validation 95% error rate seen so far.
        best_epoch: Epoch at which `best_val_err` was reached.
        history: Metrics rows of every completed epoch.
    """

    spec: Dict[str, Any]
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    velocities: Dict[str, np.ndarray]
    rng_state: Dict[str, Any]
    epoch: int
    stats: Dict[str, float]
    best_val_err: Optional[float] = None
    best_epoch: Optional[int] = None
    history: List[Dict[str, Any]] = dataclasses.field(default_factory=list)

    def model_spec(self) -> models.ModelSpec:
        return models.ModelSpec(**self.spec)

    def modality_stats(self) -> datasets.ModalityStats:
        return datasets.ModalityStats(**self.stats)


def _array_index(groups: Mapping[str, Mapping[str, np.ndarray]]):
    index = []
    chunks = []
    offset = 0
    for group, arrays in groups.items():
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=np.dtype(array.dtype).newbyteorder("<"))
            index.append(
                {
                    "group": group,
                    "name": name,
                    "dtype": data.dtype.str,
                    "shape": list(data.shape),
                    "offset": offset,
                    "nbytes": data.nbytes,
                }
            )
            chunks.append(data.tobytes())
            offset += data.nbytes
    return index, b"".join(chunks)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Writes `ckpt` atomically: to a temporary file, then renamed over `path`."""
    index, arrays = _array_index({"params": ckpt.params, "velocities": ckpt.velocities})
    meta = {
        field.name: getattr(ckpt, field.name)
        for field in dataclasses.fields(ckpt)
        if field.name not in ("params", "velocities")
    }
    meta["arrays"] = index
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = (
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        + _JSON_LENGTH.pack(len(meta_bytes))
        + meta_bytes
        + arrays
    )
    blob += _CRC.pack(zlib.crc32(blob))
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(blob)
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Reads a checkpoint written by `save_checkpoint`.

    Raises:
        IntegrityError: on a bad header, unknown version, truncation or checksum mismatch.
            Nothing is returned from a partially valid file.
    """
    with open(path, "rb") as f:
        blob = f.read()
    _check_header(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)
    start = _HEADER.size + _JSON_LENGTH.size
    if len(blob) < start + _CRC.size:
        raise IntegrityError(f"{path}: truncated at byte offset {len(blob)}")
    (meta_length,) = _JSON_LENGTH.unpack_from(blob, _HEADER.size)
    arrays_start = start + meta_length
    if arrays_start + _CRC.size > len(blob):
        raise IntegrityError(
            f"{path}: metadata of {meta_length} bytes overruns the file at byte offset {start}"
        )
    body = blob[: -_CRC.size]
    (crc,) = _CRC.unpack_from(blob, len(body))
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{path}: checksum mismatch at byte offset {len(body)}")
    try:
        meta = json.loads(blob[start:arrays_start].decode("utf-8"))
    except ValueError as e:
        raise IntegrityError(f"{path}: malformed metadata at byte offset {start}") from e

    groups = {"params": {}, "velocities": {}}
    for entry in meta.pop("arrays"):
        offset = arrays_start + entry["offset"]
        if offset + entry["nbytes"] > len(body):
            raise IntegrityError(f"{path}: array '{entry['name']}' at byte offset {offset}")
        array = np.frombuffer(
            body, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])), offset=offset
        )
        groups[entry["group"]][entry["name"]] = array.reshape(entry["shape"]).copy()
    return Checkpoint(params=groups["params"], velocities=groups["velocities"], **meta)


def restore_model(ckpt: Checkpoint) -> models.PatchMatcher:
    """Builds the checkpointed variant and loads its parameters.

    Raises:
        IntegrityError: if the stored parameters do not match the variant's.
    """
    model = models.build_model(ckpt.model_spec(), np.random.default_rng(0))
    params = model.named_parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise IntegrityError(f"checkpoint does not match variant {ckpt.spec}: {missing[:5]}")
    for name, param in params.items():
        stored = ckpt.params[name]
        if stored.shape != param.shape:
            raise IntegrityError(
                f"parameter '{name}' has shape {stored.shape}, variant expects {param.shape}"
            )
        param.data = np.ascontiguousarray(stored, dtype=param.dtype)
    return model

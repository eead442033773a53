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

"""Unit tests for tsnet.datasets."""

import os

import numpy as np
import PIL.Image
import pytest

from tsnet import datasets, tensor
from tests import conftest


def _image_pair(pair_id, rng, shape=(128, 128)):
    return datasets.AlignedImagePair(pair_id, rng.random(shape), rng.random(shape))


@pytest.mark.parametrize("shape,expected", [((128, 128), 4), ((64, 64), 1), ((130, 190), 4)])
def test_grid_patches(shape, expected, rng):
    img = rng.random(shape)
    cells = datasets.grid_patches(img)
    assert len(cells) == expected
    (cell, patch), *_ = cells
    assert cell == (0, 0)
    np.testing.assert_array_equal(patch, img[:64, :64])


def test_grid_patches_small_image(caplog):
    assert datasets.grid_patches(np.zeros((50, 100))) == []
    assert "smaller than one" in caplog.text


def test_make_pairs(rng):
    images = [_image_pair("a", rng), _image_pair("b", rng)]
    pairs = datasets.make_pairs(images, rng)
    assert len(pairs) == 16
    positives = [pair for pair in pairs if pair.label == 1]
    negatives = [pair for pair in pairs if pair.label == 0]
    assert len(positives) == len(negatives) == 8
    by_id = {img.id: img for img in images}
    for pair in positives:
        prov = pair.provenance
        assert prov.image_a == prov.image_b and prov.cell_a == prov.cell_b
        row, col = (64 * i for i in prov.cell_b)
        expected = by_id[prov.image_b].image_b[row : row + 64, col : col + 64]
        np.testing.assert_array_equal(pair.patch_b, expected)
    for pair in negatives:
        assert pair.provenance.image_a != pair.provenance.image_b


def test_make_pairs_needs_two_images(rng):
    with pytest.raises(tensor.ContractError):
        datasets.make_pairs([_image_pair("only", rng)], rng)


def test_make_pairs_is_deterministic():
    rng = np.random.default_rng(0)
    images = [_image_pair(str(i), rng) for i in range(3)]
    first = datasets.make_pairs(images, np.random.default_rng(1))
    second = datasets.make_pairs(images, np.random.default_rng(1))
    assert [p.provenance for p in first] == [p.provenance for p in second]


def test_identity_warp_reproduces_patch(rng):
    patch = rng.random((64, 64))
    warped = datasets.warp_patch(datasets.AffineParams(), patch)
    np.testing.assert_allclose(warped, patch, atol=1e-6)


def test_translation_reads_parent_neighborhood(rng):
    parent = rng.random((192, 192))
    params = datasets.AffineParams(tx=3.0, enabled=(False, True, False))
    warped = datasets.warp_patch(params, parent[64:128, 64:128], parent, (1, 1))
    np.testing.assert_allclose(warped, parent[64:128, 61:125], atol=1e-6)


def test_disabled_transforms_are_ignored():
    params = datasets.AffineParams(rotation_deg=10.0, tx=2.0, ty=-1.0, scale=0.9)
    assert params.effective() == (0.0, 0.0, 0.0, 1.0)


def test_sampled_params_in_range():
    rng = np.random.default_rng(0)
    samples = [datasets.AffineParams.sample(rng) for _ in range(10_000)]
    assert all(any(p.enabled) for p in samples)
    rotations = np.array([p.rotation_deg for p in samples])
    shifts = np.array([(p.tx, p.ty) for p in samples])
    scales = np.array([p.scale for p in samples])
    assert np.all((rotations >= -12.0) & (rotations <= 12.0))
    assert np.all((shifts >= -5.0) & (shifts <= 5.0))
    assert np.all((scales >= 0.8) & (scales <= 0.99))


def test_augment(rng):
    images = [_image_pair("a", rng), _image_pair("b", rng)]
    pair = datasets.make_pairs(images, rng)[0]
    group = datasets.augment(pair, rng, {img.id: img for img in images})
    assert len(group) == 4
    assert group[0] is pair
    for member in group[1:]:
        assert member.label == pair.label
        np.testing.assert_array_equal(member.patch_a, pair.patch_a)
        assert member.provenance.affine is not None
        assert member.patch_b.shape == (64, 64)


def test_augment_pairs_independent_of_other_pairs(rng):
    images = [_image_pair("a", rng), _image_pair("b", rng)]
    by_id = {img.id: img for img in images}
    pairs = datasets.make_pairs(images, rng)[:5]
    every = datasets.augment_pairs(pairs, np.random.default_rng(11), by_id)
    prefix = datasets.augment_pairs(pairs[:2], np.random.default_rng(11), by_id)
    assert len(every) == 5
    for full, short in zip(every, prefix):
        assert [m.provenance.affine for m in full] == [m.provenance.affine for m in short]
        for a, b in zip(full, short):
            np.testing.assert_array_equal(a.patch_b, b.patch_b)
    assert every[0][1].provenance.affine != every[1][1].provenance.affine


def test_finalize_eval_split(rng):
    groups = [[object()] * 4 for _ in range(5)]
    assert len(datasets.finalize_eval_split(groups, rng)) == 5
    assert len(datasets.finalize_eval_split(groups, rng, keep_all=True)) == 20
    with pytest.raises(tensor.ContractError):
        datasets.finalize_eval_split([[object()] * 3], rng)


def test_normalize(normalized_splits):
    splits, stats = normalized_splits
    train = splits["train"].patches.astype(np.float64)
    for modality in (0, 1):
        assert abs(train[:, modality].mean()) < 1e-4
        assert abs(train[:, modality].std() - 1.0) < 1e-3
    assert stats.std_a > 0 and stats.std_b > 0


def test_normalize_constant_modality():
    dataset = datasets.PatchDataset(
        patches=np.full((3, 2, 64, 64), 0.5, dtype=np.float32),
        labels=np.array([1, 0, 1], dtype=np.uint8),
    )
    normalized = datasets.normalize(dataset, datasets.compute_stats(dataset))
    np.testing.assert_array_equal(normalized.patches, 0.0)


@pytest.mark.parametrize("transform", datasets.TRANSFORMS)
def test_synth_dataset(transform):
    images = datasets.synth_dataset(3, 96, transform, np.random.default_rng(0))
    assert [img.id for img in images] == ["synth-0000", "synth-0001", "synth-0002"]
    for img in images:
        assert img.image_a.shape == img.image_b.shape == (96, 96)
        for channel in (img.image_a, img.image_b):
            assert channel.min() >= 0.0 and channel.max() <= 1.0


def test_invert_transform_is_complement(rng):
    img = rng.random((8, 8))
    np.testing.assert_allclose(img + datasets.modality_transform(img, "invert"), 1.0)


def test_synth_seeds_differ():
    first = datasets.synth_dataset(1, 64, "edge", np.random.default_rng(0))[0]
    second = datasets.synth_dataset(1, 64, "edge", np.random.default_rng(1))[0]
    assert not np.allclose(first.image_a, second.image_a)


def test_synth_errors():
    with pytest.raises(ValueError):
        datasets.synth_dataset(2, 32, "edge", np.random.default_rng(0))
    with pytest.raises(ValueError):
        datasets.synth_dataset(2, 64, "solarize", np.random.default_rng(0))
    with pytest.raises(ValueError):
        datasets.DataConfig(transform="solarize")


def test_assign_splits():
    ids = [f"img{i}" for i in range(20)]
    assignment = datasets.assign_splits(ids, np.random.default_rng(0))
    counts = {split: list(assignment.values()).count(split) for split in datasets.SPLITS}
    assert counts == {"train": 14, "test": 4, "val": 2}
    assert assignment == datasets.assign_splits(ids, np.random.default_rng(0))
    with pytest.raises(ValueError):
        datasets.assign_splits(ids[:10], np.random.default_rng(0))


def test_generated_splits(small_splits):
    sizes = {split: len(pairs) for split, pairs in small_splits.pairs.items()}
    assert sizes == {"train": 448, "test": 32, "val": 16}
    assert small_splits.base_counts == {"train": 112, "test": 32, "val": 16}
    for split, pairs in small_splits.pairs.items():
        labels = np.array([pair.label for pair in pairs])
        assert labels.sum() * 2 == len(labels)
        # No source image contributes to two splits.
        for pair in pairs:
            assert small_splits.assignment[pair.provenance.image_a] == split
            assert small_splits.assignment[pair.provenance.image_b] == split


def test_desk_scale_counts():
    splits = datasets.generate(datasets.DataConfig(n_images=40, image_size=256, transform="invert"))
    images = {split: list(splits.assignment.values()).count(split) for split in datasets.SPLITS}
    assert images == {"train": 28, "test": 8, "val": 4}
    # 16 cells per image, one positive and one negative pair per cell.
    assert splits.base_counts == {"train": 896, "test": 256, "val": 128}
    sizes = {split: len(pairs) for split, pairs in splits.pairs.items()}
    assert sizes == {"train": 4 * 896, "test": 256, "val": 128}
    train = splits.pairs["train"]
    for start in range(0, len(train), 4):
        group = train[start : start + 4]
        assert group[0].provenance.affine is None
        assert all(pair.provenance.affine is not None for pair in group[1:])
        assert len({pair.provenance.cell_a for pair in group}) == 1
    for split, pairs in splits.pairs.items():
        labels = np.array([pair.label for pair in pairs])
        assert labels.sum() * 2 == len(labels)
        used = {pair.provenance.image_a for pair in pairs}
        used |= {pair.provenance.image_b for pair in pairs}
        assert {splits.assignment[image] for image in used} == {split}


def test_generate_is_deterministic(small_splits):
    again = datasets.generate(conftest.SMALL_DATA)
    assert again.assignment == small_splits.assignment
    for split, dataset in small_splits.datasets().items():
        other = again.datasets()[split]
        np.testing.assert_array_equal(dataset.patches, other.patches)
        np.testing.assert_array_equal(dataset.labels, other.labels)


def test_split_table(small_splits):
    table = datasets.split_table(small_splits)
    assert list(table.columns) == ["Train (70%)", "Test (20%)", "Validation (10%)"]
    assert table.loc["images"].tolist() == [14, 4, 2]
    assert table.loc["pairs"].tolist() == [448, 32, 16]
    assert table.loc["positive"].tolist() == [224, 16, 8]


def test_dataset_inputs(small_splits):
    dataset = small_splits.datasets()["val"]
    x1, x2 = dataset.inputs(slice(0, 3))
    assert x1.shape == x2.shape == (3, 1, 64, 64)
    assert len(dataset.subset(np.array([0, 2]))) == 2
    with pytest.raises(ValueError):
        datasets.PatchDataset(np.zeros((2, 1, 64, 64)), np.zeros(2))


def _write(path, array):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    PIL.Image.fromarray(array).save(path)


def test_load_aligned_pairs(tmp_path, rng):
    gray = (rng.random((64, 96)) * 255).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    _write(str(tmp_path / "p1" / "a.png"), gray)
    _write(str(tmp_path / "p1" / "b.png"), rgb)
    _write(str(tmp_path / "p0" / "a.png"), gray)
    _write(str(tmp_path / "p0" / "b.png"), gray)
    images = datasets.load_aligned_pairs(str(tmp_path))
    assert [img.id for img in images] == ["p0", "p1"]
    np.testing.assert_allclose(images[1].image_a, gray / 255.0)
    # Luminance weights sum to one, so a gray RGB image keeps its values.
    np.testing.assert_allclose(images[1].image_b, gray / 255.0, atol=1e-9)


def test_ingestion_errors(tmp_path, rng):
    with pytest.raises(datasets.IngestionError, match="not found"):
        datasets.load_aligned_pairs(str(tmp_path / "missing"))

    gray = (rng.random((64, 64)) * 255).astype(np.uint8)
    _write(str(tmp_path / "p0" / "a.png"), gray)
    with pytest.raises(datasets.IngestionError, match="b.png"):
        datasets.load_aligned_pairs(str(tmp_path))

    with open(tmp_path / "p0" / "b.png", "wb") as f:
        f.write(b"not an image")
    with pytest.raises(datasets.IngestionError, match="b.png"):
        datasets.load_aligned_pairs(str(tmp_path))

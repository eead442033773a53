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

"""Patch-pair datasets built from aligned two-modality images.

Source images are assigned to train/test/val before any pair is built, so no image
contributes patches to two splits. Within a split, every 64×64 grid cell yields one
positive pair (same cell in both modalities) and one negative pair (the cell's modality A
patch against a random modality B patch of another image). Each pair is then expanded
into a group of four: itself plus three copies whose modality B patch is resampled under a
random affine transform. Training keeps every group member; test and validation keep one.
"""

import dataclasses
import logging
import math
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import PIL.Image
import scipy.ndimage

from tsnet import layers, tensor

PATCH_SIZE = layers.PATCH_SIZE
ROTATION_RANGE = (-12.0, 12.0)
TRANSLATION_RANGE = (-5.0, 5.0)
SCALE_RANGE = (0.8, 0.99)
NOISE_STDDEV = 0.05
STD_FLOOR = 1e-6
LUMINANCE = np.array([0.299, 0.587, 0.114])

SPLITS = ("train", "test", "val")
SPLIT_FRACTIONS = {"train": 0.7, "test": 0.2, "val": 0.1}
SPLIT_HEADERS = {"train": "Train (70%)", "test": "Test (20%)", "val": "Validation (10%)"}
TRANSFORMS = ("invert", "edge", "blur+gamma")
IMAGE_SUFFIXES = (".png", ".pgm")

Cell = Tuple[int, int]


class IngestionError(ValueError):
    """A source image is missing or cannot be decoded."""


@dataclasses.dataclass(frozen=True)
class AlignedImagePair:
    """Two pixel-aligned single-channel images in [0, 1], one per modality."""

    id: str
    image_a: np.ndarray
    image_b: np.ndarray

    def __post_init__(self):
        if self.image_a.ndim != 2 or self.image_a.shape != self.image_b.shape:
            raise ValueError(
                f"'{self.id}': modalities must be equal-sized matrices, "
                f"got {self.image_a.shape} and {self.image_b.shape}"
            )


@dataclasses.dataclass(frozen=True)
class AffineParams:
    """An affine perturbation; only transforms flagged in `enabled` take effect.

    `enabled` flags (rotation, translation, scale) in that order.
    """

    rotation_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    enabled: Tuple[bool, bool, bool] = (False, False, False)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AffineParams":
        """Draws a random non-empty combination of rotation, translation and scale."""
        enabled = np.zeros(3, dtype=bool)
        while not enabled.any():
            enabled = rng.random(3) < 0.5
        return cls(
            rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
            tx=float(rng.uniform(*TRANSLATION_RANGE)),
            ty=float(rng.uniform(*TRANSLATION_RANGE)),
            scale=float(rng.uniform(*SCALE_RANGE)),
            enabled=tuple(bool(flag) for flag in enabled),
        )

    def effective(self) -> Tuple[float, float, float, float]:
        """(rotation_deg, tx, ty, scale) with disabled transforms at their identity value."""
        rotate, translate, scale = self.enabled
        return (
            self.rotation_deg if rotate else 0.0,
            self.tx if translate else 0.0,
            self.ty if translate else 0.0,
            self.scale if scale else 1.0,
        )

    def inverse_map(self) -> Tuple[np.ndarray, np.ndarray]:
        """Matrix and offset mapping output patch (row, col) to source patch coordinates.

        The forward transform rotates and scales about the patch center, then translates.
        """
        rotation_deg, tx, ty, scale = self.effective()
        theta = math.radians(rotation_deg)
        cos, sin = math.cos(theta), math.sin(theta)
        matrix = np.array([[cos, sin], [-sin, cos]]) / scale
        center = np.full(2, (PATCH_SIZE - 1) / 2)
        offset = center - matrix @ (center + np.array([ty, tx]))
        return matrix, offset


@dataclasses.dataclass(frozen=True)
class Provenance:
    image_a: str
    image_b: str
    cell_a: Cell
    cell_b: Cell
    affine: Optional[AffineParams] = None


@dataclasses.dataclass(frozen=True)
class PatchPair:
    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int
    provenance: Provenance


@dataclasses.dataclass(frozen=True)
class ModalityStats:
    """Per-modality mean and standard deviation, from the training split."""

    mean_a: float
    std_a: float
    mean_b: float
    std_b: float

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class PatchDataset:
    """Pairs stacked into arrays: `patches` is N×2×64×64 float32, `labels` N uint8."""

    patches: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.patches.ndim != 4 or self.patches.shape[1:] != (2, PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patches must be N×2×64×64, got {self.patches.shape}")
        if self.labels.shape != (len(self.patches),):
            raise ValueError(f"{len(self.patches)} patches but labels of {self.labels.shape}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "PatchDataset":
        patches = np.zeros((len(pairs), 2, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
        for i, pair in enumerate(pairs):
            patches[i, 0] = pair.patch_a
            patches[i, 1] = pair.patch_b
        labels = np.array([pair.label for pair in pairs], dtype=np.uint8)
        return cls(patches=patches, labels=labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "PatchDataset":
        return PatchDataset(patches=self.patches[index], labels=self.labels[index])

    def inputs(self, index=slice(None)) -> Tuple[np.ndarray, np.ndarray]:
        """Modality A and B patches as N×1×64×64 arrays."""
        patches = self.patches[index]
        return patches[:, 0:1], patches[:, 1:2]


# *** Patch and pair generation ***


def grid_patches(img: np.ndarray) -> List[Tuple[Cell, np.ndarray]]:
    """Cuts `img` into non-overlapping 64×64 cells, discarding partial border cells."""
    rows, cols = img.shape[0] // PATCH_SIZE, img.shape[1] // PATCH_SIZE
    if rows == 0 or cols == 0:
        logging.warning(f"image of shape {img.shape} is smaller than one {PATCH_SIZE}² cell")
        return []
    return [
        ((i, j), img[i * PATCH_SIZE : (i + 1) * PATCH_SIZE, j * PATCH_SIZE : (j + 1) * PATCH_SIZE])
        for i in range(rows)
        for j in range(cols)
    ]


def make_pairs(pairs: Sequence[AlignedImagePair], rng: np.random.Generator) -> List[PatchPair]:
    """Builds one positive and one negative pair per grid cell of every image.

    Each image gets its own generator spawned from `rng`, so the result does not depend
    on the order images are processed in.

    Raises:
        ContractError: if fewer than two images have at least one cell.
    """
    grids = [
        (dict(grid_patches(img.image_a)), dict(grid_patches(img.image_b))) for img in pairs
    ]
    with_cells = [i for i, (cells_a, _) in enumerate(grids) if cells_a]
    if len(with_cells) < 2:
        raise tensor.ContractError(
            f"negative pairs need >= 2 images with cells, got {len(with_cells)}"
        )

    result = []
    for i, image_rng in enumerate(rng.spawn(len(pairs))):
        cells_a, cells_b = grids[i]
        donors = [j for j in with_cells if j != i]
        for cell, patch_a in cells_a.items():
            result.append(
                PatchPair(
                    patch_a=patch_a,
                    patch_b=cells_b[cell],
                    label=1,
                    provenance=Provenance(pairs[i].id, pairs[i].id, cell, cell),
                )
            )
            donor = donors[image_rng.integers(len(donors))]
            donor_cells = list(grids[donor][1])
            donor_cell = donor_cells[image_rng.integers(len(donor_cells))]
            result.append(
                PatchPair(
                    patch_a=patch_a,
                    patch_b=grids[donor][1][donor_cell],
                    label=0,
                    provenance=Provenance(pairs[i].id, pairs[donor].id, cell, donor_cell),
                )
            )
    return result


def warp_patch(
    params: AffineParams, patch: np.ndarray, parent: Optional[np.ndarray] = None, cell=None
) -> np.ndarray:
    """Resamples a patch under `params` with bilinear interpolation.

    With a `parent` image, pixels are read around `cell` in the parent so rotated and
    translated content comes from the real neighborhood; beyond the parent's border
    (or without a parent, beyond the patch) the source is reflected.
    """
    matrix, offset = params.inverse_map()
    source = patch
    if parent is not None:
        source = parent
        offset = offset + np.array(cell) * PATCH_SIZE
    warped = scipy.ndimage.affine_transform(
        np.asarray(source, dtype=np.float64),
        matrix,
        offset=offset,
        output_shape=(PATCH_SIZE, PATCH_SIZE),
        order=1,
        mode="reflect",
    )
    return warped.astype(np.float32)


def augment(
    pair: PatchPair,
    rng: np.random.Generator,
    images: Optional[Mapping[str, AlignedImagePair]] = None,
) -> List[PatchPair]:
    """Returns `pair` followed by three copies with an affine-perturbed modality B patch.

    The label is unchanged. `images` maps ids to source images for border-aware resampling.
    """
    prov = pair.provenance
    parent = images[prov.image_b].image_b if images and prov.image_b in images else None
    group = [pair]
    for _ in range(3):
        params = AffineParams.sample(rng)
        patch_b = warp_patch(params, pair.patch_b, parent, prov.cell_b)
        group.append(
            dataclasses.replace(
                pair, patch_b=patch_b, provenance=dataclasses.replace(prov, affine=params)
            )
        )
    return group


def augment_pairs(
    pairs: Sequence[PatchPair],
    rng: np.random.Generator,
    images: Optional[Mapping[str, AlignedImagePair]] = None,
) -> List[List[PatchPair]]:
    """Augments every pair with its own child generator of `rng`.

    The i-th group depends only on `rng` and i, not on the draws made for other pairs.
    """
    return [augment(pair, child, images) for pair, child in zip(pairs, rng.spawn(len(pairs)))]


def finalize_eval_split(
    groups: Sequence[Sequence[PatchPair]], rng: np.random.Generator, keep_all: bool = False
) -> List[PatchPair]:
    """Flattens augmentation groups: all four members when `keep_all`, else one at random.

    Raises:
        ContractError: if a group does not have exactly four members.
    """
    result = []
    for group in groups:
        if len(group) != 4:
            raise tensor.ContractError(
                f"augmentation groups must have 4 pairs, got {len(group)}"
            )
        if keep_all:
            result.extend(group)
        else:
            result.append(group[rng.integers(4)])
    return result


# *** Normalization ***


def compute_stats(dataset: PatchDataset) -> ModalityStats:
    """Mean and standard deviation of each modality, accumulated in float64."""
    values_a = dataset.patches[:, 0].astype(np.float64)
    values_b = dataset.patches[:, 1].astype(np.float64)
    return ModalityStats(
        mean_a=float(values_a.mean()),
        std_a=float(values_a.std()),
        mean_b=float(values_b.mean()),
        std_b=float(values_b.std()),
    )


def normalize(dataset: PatchDataset, stats: ModalityStats) -> PatchDataset:
    """(x − μ)/σ per modality, σ floored at 1e-6."""
    patches = dataset.patches.astype(np.float64)
    patches[:, 0] = (patches[:, 0] - stats.mean_a) / max(stats.std_a, STD_FLOOR)
    patches[:, 1] = (patches[:, 1] - stats.mean_b) / max(stats.std_b, STD_FLOOR)
    return PatchDataset(patches=patches.astype(np.float32), labels=dataset.labels.copy())


# *** Sources ***


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """A mixture of Gaussian blobs over a linear gradient, rescaled to [0, 1]."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    img = rng.uniform(-1, 1) * rows / size + rng.uniform(-1, 1) * cols / size
    n_blobs = max(8, size * size // 512)
    centers = rng.uniform(0, size, size=(n_blobs, 2))
    widths = rng.uniform(2.0, size / 8, size=n_blobs)
    amplitudes = rng.uniform(-1, 1, size=n_blobs)
    for (cy, cx), width, amplitude in zip(centers, widths, amplitudes):
        img += amplitude * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * width**2))
    span = img.max() - img.min()
    return (img - img.min()) / span if span > 0 else np.zeros_like(img)


def modality_transform(img: np.ndarray, transform: str) -> np.ndarray:
    """Maps a modality A image in [0, 1] to the noiseless modality B image."""
    if transform == "invert":
        return 1.0 - img
    if transform == "edge":
        magnitude = np.hypot(scipy.ndimage.sobel(img, axis=0), scipy.ndimage.sobel(img, axis=1))
        peak = magnitude.max()
        return magnitude / peak if peak > 0 else magnitude
    if transform == "blur+gamma":
        return np.clip(scipy.ndimage.gaussian_filter(img, sigma=1.5), 0.0, 1.0) ** 0.5
    raise ValueError(f"unknown modality transform '{transform}', expected one of {TRANSFORMS}")


def synth_dataset(
    n_images: int, size: int, transform: str, rng: np.random.Generator
) -> List[AlignedImagePair]:
    """Procedural two-modality images: B = transform(A) + N(0, 0.05²), clipped to [0, 1].

    Raises:
        ValueError: if `size` < 64 or `transform` is unknown.
    """
    if size < PATCH_SIZE:
        raise ValueError(f"synthetic images need size >= {PATCH_SIZE}, got {size}")
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown modality transform '{transform}', expected one of {TRANSFORMS}")
    images = []
    for i, image_rng in enumerate(rng.spawn(n_images)):
        image_a = _texture(size, image_rng)
        noise = image_rng.normal(0.0, NOISE_STDDEV, size=image_a.shape)
        image_b = np.clip(modality_transform(image_a, transform) + noise, 0.0, 1.0)
        images.append(AlignedImagePair(f"synth-{i:04d}", image_a, image_b))
    return images


def load_image(path: str) -> np.ndarray:
    """Reads an 8-bit grayscale or RGB image as luminance in [0, 1].

    Raises:
        IngestionError: if the file is missing or cannot be decoded.
    """
    try:
        with PIL.Image.open(path) as img:
            img.load()
            if img.mode in ("L", "P", "LA"):
                pixels = np.asarray(img.convert("L"), dtype=np.float64)
            elif img.mode in ("RGB", "RGBA"):
                pixels = np.asarray(img.convert("RGB"), dtype=np.float64) @ LUMINANCE
            else:
                raise IngestionError(f"{path}: unsupported image mode '{img.mode}'")
    except (OSError, PIL.UnidentifiedImageError) as e:
        raise IngestionError(f"{path}: cannot read image ({e})") from e
    return pixels / 255.0


def _find_modality(pair_dir: str, stem: str) -> str:
    for suffix in IMAGE_SUFFIXES:
        path = os.path.join(pair_dir, stem + suffix)
        if os.path.isfile(path):
            return path
    raise IngestionError(f"{os.path.join(pair_dir, stem)}.png: missing modality image")


def load_aligned_pairs(root: str) -> List[AlignedImagePair]:
    """Loads `<root>/<pair-id>/{a,b}.png` (or `.pgm`), sorted by pair id.

    Raises:
        IngestionError: if `root` is not a directory or an image is missing or malformed.
    """
    if not os.path.isdir(root):
        raise IngestionError(f"{root}: dataset directory not found")
    images = []
    for pair_id in sorted(os.listdir(root)):
        pair_dir = os.path.join(root, pair_id)
        if not os.path.isdir(pair_dir):
            continue
        path_a = _find_modality(pair_dir, "a")
        image_a = load_image(path_a)
        image_b = load_image(_find_modality(pair_dir, "b"))
        if image_a.shape != image_b.shape:
            raise IngestionError(
                f"{path_a}: modalities differ in size, {image_a.shape} vs {image_b.shape}"
            )
        images.append(AlignedImagePair(pair_id, image_a, image_b))
    logging.info(f"Loaded {len(images)} aligned image pairs from {root}")
    return images


# *** Pipeline ***


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Where source images come from and the seed of the pair pipeline.

    Images are read from `source_dir` when set, else synthesized.
    """

    n_images: int = 40
    image_size: int = 256
    transform: str = "edge"
    source_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.source_dir is None:
            if self.transform not in TRANSFORMS:
                raise ValueError(f"unknown modality transform '{self.transform}'")
            if self.image_size < PATCH_SIZE or self.n_images < 1:
                raise ValueError("synthetic data needs n_images >= 1 and image_size >= 64")

    @property
    def synthetic(self) -> bool:
        return self.source_dir is None


def load_images(cfg: DataConfig, rng: np.random.Generator) -> List[AlignedImagePair]:
    if cfg.synthetic:
        return synth_dataset(cfg.n_images, cfg.image_size, cfg.transform, rng)
    return load_aligned_pairs(cfg.source_dir)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def assign_splits(ids: Sequence[str], rng: np.random.Generator) -> Dict[str, str]:
    """Randomly assigns source images to splits in 70/20/10 proportion.

    Raises:
        ValueError: if any split would receive fewer than two images.
    """
    n = len(ids)
    n_train = _round_half_up(SPLIT_FRACTIONS["train"] * n)
    n_test = _round_half_up(SPLIT_FRACTIONS["test"] * n)
    counts = {"train": n_train, "test": n_test, "val": n - n_train - n_test}
    if min(counts.values()) < 2:
        raise ValueError(f"{n} source images cannot give every split >= 2 images: {counts}")
    order = rng.permutation(n)
    assignment = {}
    start = 0
    for split in SPLITS:
        for i in order[start : start + counts[split]]:
            assignment[ids[i]] = split
        start += counts[split]
    return assignment


@dataclasses.dataclass
class SplitPairs:
    """Pairs per split and the split of every source image."""

    assignment: Dict[str, str]
    pairs: Dict[str, List[PatchPair]]
    base_counts: Dict[str, int]

    def datasets(self) -> Dict[str, PatchDataset]:
        return {split: PatchDataset.from_pairs(pairs) for split, pairs in self.pairs.items()}


def build_splits(images: Sequence[AlignedImagePair], rng: np.random.Generator) -> SplitPairs:
    """Runs split assignment, pairing, augmentation and keep-one-of-four selection."""
    assignment = assign_splits([img.id for img in images], rng)
    by_id = {img.id: img for img in images}
    pairs = {}
    base_counts = {}
    for split, split_rng in zip(SPLITS, rng.spawn(len(SPLITS))):
        pair_rng, augment_rng, keep_rng = split_rng.spawn(3)
        members = [img for img in images if assignment[img.id] == split]
        base = make_pairs(members, pair_rng)
        groups = augment_pairs(base, augment_rng, by_id)
        pairs[split] = finalize_eval_split(groups, keep_rng, keep_all=split == "train")
        base_counts[split] = len(base)
        logging.info(f"{split}: {len(members)} images, {len(base)} pairs before augmentation")
    return SplitPairs(assignment=assignment, pairs=pairs, base_counts=base_counts)


def generate(cfg: DataConfig) -> SplitPairs:
    """Loads or synthesizes the source images of `cfg` and builds its split pairs."""
    image_seq, split_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    images = load_images(cfg, np.random.default_rng(image_seq))
    return build_splits(images, np.random.default_rng(split_seq))


def split_table(splits: SplitPairs) -> pd.DataFrame:
    """Source image and pair counts per split, one column per split."""
    columns = {}
    for split in SPLITS:
        labels = np.array([pair.label for pair in splits.pairs[split]], dtype=int)
        columns[SPLIT_HEADERS[split]] = {
            "images": sum(1 for s in splits.assignment.values() if s == split),
            "pairs": len(labels),
            "positive": int(labels.sum()),
            "negative": int(len(labels) - labels.sum()),
        }
    return pd.DataFrame(columns)

"""Dataset plumbing: pairing, normalization, patch sampling, splits.

A SamplePair holds one source image with its ground-truth saliency. Patch
datasets are built by extracting the same random frustum from both
rasters, so image and target stay aligned by construction.  The split is
by source id so patches of one image never straddle train/test.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import EmptyDataset, ShapeMismatch, TooFewSources
from .formats import read_image, read_saliency


@dataclass(frozen=True)
class SamplePair:
    """One source image with its ground-truth saliency map."""

    id: str
    image: np.ndarray  # (h, w, 3) in [0, 255]
    saliency_gt: np.ndarray  # (h, w), >= 0

    def __post_init__(self):
        if self.image.shape[:2] != self.saliency_gt.shape:
            raise ShapeMismatch(
                f"{self.id}: image {self.image.shape[:2]} vs "
                f"saliency {self.saliency_gt.shape}"
            )
        if np.any(self.saliency_gt < 0):
            raise ValueError(f"{self.id}: negative ground-truth saliency")


@dataclass(frozen=True)
class Stage1Example:
    """Normalized 2D training pair for the base stack."""

    image: np.ndarray  # (3, h, w), normalized
    target: np.ndarray  # (1, h, w), max-normalized to [0, 1]
    source_id: str


@dataclass(frozen=True)
class PatchSample:
    """Normalized frustum patch with coordinates and target."""

    image: np.ndarray  # (3, ph, pw), normalized
    coords: np.ndarray  # (2, ph, pw), scaled to [-1, 1]
    saliency_gt: np.ndarray  # (1, ph, pw), max-normalized to [0, 1]
    source_id: str
    frustum: geometry.ViewFrustum

    def __post_init__(self):
        if not (
            self.image.shape[1:] == self.coords.shape[1:] == self.saliency_gt.shape[1:]
        ):
            raise ShapeMismatch("patch image/coords/target dims differ")


def normalize(raster: np.ndarray, mean: float = 127.5) -> np.ndarray:
    """v' = (v - mean) / 127.5; with mean 127.5 maps [0,255] to [-1,1]."""
    return (np.asarray(raster, dtype=np.float64) - mean) / 127.5


def denormalize(raster: np.ndarray, mean: float = 127.5) -> np.ndarray:
    return np.asarray(raster, dtype=np.float64) * 127.5 + mean


def _normalize_target(gt: np.ndarray) -> np.ndarray:
    peak = gt.max()
    return gt / peak if peak > 0 else np.zeros_like(gt)


def stage1_dataset(pairs, mean: float = 127.5):
    """Whole images as (image, target) examples for base-stack training."""
    if not pairs:
        raise EmptyDataset("no sample pairs")
    out = []
    for pair in pairs:
        img = normalize(pair.image, mean).transpose(2, 0, 1)
        tgt = _normalize_target(np.asarray(pair.saliency_gt, dtype=np.float64))[None]
        out.append(Stage1Example(img, tgt, pair.id))
    return out


def build_patch_dataset(
    pairs,
    n_per_odi: int,
    fov: float,
    out_w: int,
    out_h: int,
    seed: int = 0,
    mean: float = 127.5,
    frustums=None,
):
    """n_per_odi random-frustum patches per source, image and target aligned.

    Passing ``frustums`` substitutes a fixed view list (the same views for
    every source) for the random ones; that is how the six-view inference
    patch set is reproduced as a dataset.
    """
    if not pairs:
        raise EmptyDataset("no sample pairs")
    if frustums is None:
        all_frustums = geometry.random_frustums(
            n_per_odi * len(pairs), fov, out_w, out_h, seed
        )
    else:
        all_frustums = list(frustums) * len(pairs)
        n_per_odi = len(frustums)
    samples = []
    for i, pair in enumerate(pairs):
        img = np.asarray(pair.image, dtype=np.float64)
        gt = np.asarray(pair.saliency_gt, dtype=np.float64)
        for f in all_frustums[i * n_per_odi : (i + 1) * n_per_odi]:
            patch = geometry.extract_patch(img, f)
            gt_patch = geometry.extract_patch(gt, f)
            samples.append(
                PatchSample(
                    image=normalize(patch.image, mean).transpose(2, 0, 1),
                    coords=geometry.coord_channels(patch.coords),
                    saliency_gt=_normalize_target(gt_patch.image)[None],
                    source_id=pair.id,
                    frustum=f,
                )
            )
    return samples


def _source_of(item) -> str:
    return getattr(item, "source_id", None) or item.id


def split(dataset, test_fraction: float, seed: int = 0):
    """Deterministic source-level split into (train, test).

    Whole sources go to one side, so n_test counts sources:
    min(n_sources - 1, max(1, round(test_fraction * n_sources))).
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    sources = sorted({_source_of(item) for item in dataset})
    if len(sources) < 2:
        raise TooFewSources(f"need at least 2 distinct sources, got {len(sources)}")
    n_test = min(len(sources) - 1, max(1, round(test_fraction * len(sources))))
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(sources))
    test_sources = set(shuffled[:n_test])
    train = [s for s in dataset if _source_of(s) not in test_sources]
    test = [s for s in dataset if _source_of(s) in test_sources]
    return train, test


def synth_corpus(n: int, width: int, height: int, seed: int = 0):
    """Procedural equirectangular pairs with known saliency.

    Each image is a gradient or checker background with one dominant and
    up to two secondary angular-Gaussian highlights; the ground truth is
    the blob-intensity map over a broad baseline, max-normalized.  The
    maps mimic heavily blurred fixation densities: smooth, wide-support
    blobs (sigma 0.3..0.6 rad) on an everywhere-positive floor.  Blobs
    are defined by angular distance on the sphere, so their peaks survive
    any reprojection, and the dominant peak stays the global argmax.
    """
    rng = np.random.default_rng(seed)
    floor = 0.4  # baseline saliency level under the blobs
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    theta = 2.0 * np.pi * xs - np.pi / 2.0
    phi = np.pi * (1.0 - ys) - np.pi / 2.0
    dirs = geometry.spherical_to_dirs(
        np.broadcast_to(theta, (height, width)),
        np.broadcast_to(phi[:, None], (height, width)),
    )

    pairs = []
    for i in range(n):
        kind = i % 3
        gx = np.broadcast_to(xs, (height, width))
        gy = np.broadcast_to(ys[:, None], (height, width))
        if kind == 0:
            base = 40.0 + 80.0 * gx
        elif kind == 1:
            base = 40.0 + 80.0 * gy
        else:
            base = 40.0 + 80.0 * (
                (np.floor(gx * 8) + np.floor(gy * 4)) % 2
            )
        img = np.repeat(base[:, :, None], 3, axis=2)
        img += rng.uniform(-5.0, 5.0, size=(height, width, 3))

        n_blobs = int(rng.integers(1, 4))
        field = np.zeros((height, width))
        for b in range(n_blobs):
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            pitch = float(np.arcsin(rng.uniform(-1.0, 1.0)))
            center = geometry.spherical_to_dirs(
                np.array(geometry.wrap_theta(np.pi / 2 + yaw)), np.array(pitch)
            )
            sigma = rng.uniform(0.3, 0.6)
            psi = np.arccos(np.clip(dirs @ center, -1.0, 1.0))
            g = np.exp(-0.5 * (psi / sigma) ** 2)
            # secondaries stay below 0.5 so the dominant center keeps the argmax
            weight = 1.0 if b == 0 else rng.uniform(0.2, 0.5)
            field = np.maximum(field, weight * g)
            color = rng.uniform(150.0, 255.0, size=3)
            img = img * (1.0 - g[:, :, None]) + color * g[:, :, None]

        gt = floor + (1.0 - floor) * field
        img = np.clip(img, 0.0, 255.0)
        pairs.append(SamplePair(f"synth{i:03d}", img, gt / gt.max()))
    return pairs


def load_manifest(path: str):
    """Dataset manifest: lines of "id, image_path, saliency_path".

    Relative paths resolve against the manifest's directory; images load
    as (h, w, 3), grayscale sources are replicated to 3 channels.
    """
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(f"bad manifest line: {line!r}")
            sid, img_path, sal_path = parts
            if not os.path.isabs(img_path):
                img_path = os.path.join(base, img_path)
            if not os.path.isabs(sal_path):
                sal_path = os.path.join(base, sal_path)
            img = read_image(img_path)
            if img.ndim == 2:
                img = np.repeat(img[:, :, None], 3, axis=2)
            sal = read_saliency(sal_path)
            pairs.append(SamplePair(sid, img, sal))
    if not pairs:
        raise EmptyDataset(f"manifest {path} lists no samples")
    return pairs

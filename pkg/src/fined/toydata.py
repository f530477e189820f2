"""Synthetic shape corpus for the tests, quickstart and benchmark rehearsal.

Each toy image is a flat background with one or two flat high-contrast
shapes. The ground truth marks the visible region boundaries one pixel wide:
a pixel is a boundary pixel when its region label differs from the label of
its right or lower neighbor, so each edge is tagged on exactly one side.
Shapes keep a margin from the border, giving every image a fully countable
ground truth (edge pixels and exact-zero background, nothing ignored).
"""

from __future__ import annotations

import os

import numpy as np

from .imageio import write_image
from .trainer import Sample
from .util import atomic_write


def _boundary_from_labels(labels: np.ndarray) -> np.ndarray:
    gt = np.zeros(labels.shape, dtype=np.float32)
    gt[:, :-1][labels[:, :-1] != labels[:, 1:]] = 1.0
    gt[:-1, :][labels[:-1, :] != labels[1:, :]] = 1.0
    return gt


def _grids(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys / (size - 1), xs / (size - 1)


def _shape_masks(index: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One or two boolean masks for toy image ``index``; later masks overlay."""
    y, x = _grids(size)
    j = lambda: rng.uniform(-0.04, 0.04)

    def rect(r0, c0, r1, c1):
        return (y >= r0) & (y <= r1) & (x >= c0) & (x <= c1)

    def circle(cy, cx, rad):
        return (y - cy) ** 2 + (x - cx) ** 2 <= rad ** 2

    def diamond(cy, cx, rad):
        return np.abs(y - cy) + np.abs(x - cx) <= rad

    kind = index % 5
    if kind == 0:
        return [rect(0.22 + j(), 0.28 + j(), 0.68 + j(), 0.78 + j())]
    if kind == 1:
        return [circle(0.48 + j(), 0.50 + j(), 0.27)]
    if kind == 2:
        return [rect(0.15 + j(), 0.15 + j(), 0.55 + j(), 0.60 + j()),
                rect(0.42 + j(), 0.45 + j(), 0.82 + j(), 0.85 + j())]
    if kind == 3:
        return [diamond(0.50 + j(), 0.50 + j(), 0.30)]
    return [circle(0.36 + j(), 0.36 + j(), 0.20),
            rect(0.55 + j(), 0.52 + j(), 0.85 + j(), 0.86 + j())]


def make_shapes(count: int = 5, size: int = 64, seed: int = 7) -> list[Sample]:
    """Deterministic toy dataset of ``count`` images, ``size`` x ``size``."""
    if size < 16:
        raise ValueError("toy images need size >= 16")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(count):
        masks = _shape_masks(idx, size, rng)
        labels = np.zeros((size, size), dtype=np.int32)
        for k, m in enumerate(masks, start=1):
            labels[m] = k
        bg = rng.uniform(0.05, 0.30, size=3)
        fills = [rng.uniform(0.65, 0.98, size=3), rng.uniform(0.38, 0.58, size=3)]
        image = np.empty((3, size, size), dtype=np.float32)
        for c in range(3):
            image[c] = bg[c]
            for k in range(1, len(masks) + 1):
                image[c][labels == k] = fills[k - 1][c]
        samples.append(Sample(image=image, gt=_boundary_from_labels(labels),
                              id=f"shape{idx}"))
    return samples


def write_toy_dataset(directory: str, count: int = 5, size: int = 64,
                      seed: int = 7) -> str:
    """Materialize the toy corpus on disk; returns the manifest path.

    Layout: images/<id>.png (8-bit RGB), gt/<id>.png (8-bit binary gray),
    and manifest.txt with one image<TAB>gt line per sample.
    """
    samples = make_shapes(count=count, size=size, seed=seed)
    img_dir = os.path.join(directory, "images")
    gt_dir = os.path.join(directory, "gt")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    lines = []
    for s in samples:
        img_path = os.path.join(img_dir, f"{s.id}.png")
        gt_path = os.path.join(gt_dir, f"{s.id}.png")
        write_image(img_path, s.image, bit_depth=8)
        write_image(gt_path, s.gt, bit_depth=8)
        lines.append(f"images/{s.id}.png\tgt/{s.id}.png")
    manifest = os.path.join(directory, "manifest.txt")
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest

"""Turning a network into edge maps: prediction, multiscale fusion, thinning.

predict runs one forward pass and squashes the last side logit through a
sigmoid. predict_multiscale repeats that over rescaled copies of the input
and averages the maps after resizing them back, mirroring the reference
test-time protocol. nms_thin is Canny-style oriented suppression: gradient
orientation comes from Sobel filters over a Gaussian-smoothed copy, each
pixel is compared against two bilinearly interpolated neighbours one pixel
away along that orientation, and non-maxima drop to zero. Where the
gradient vanishes (ridge crests are exactly such points) the orientation
falls back to the Hessian's principal-curvature direction.
"""

from __future__ import annotations

import numpy as np

from .network import Network, ParamStore
from .tensor import Tensor, _sigmoid, bilinear_resize

MIN_SCALED_SIDE = 8


def _as_batch(image) -> Tensor:
    """Accept a (c,h,w) array or a 4-d single-image Tensor."""
    if isinstance(image, Tensor):
        if image.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch {image.shape[0]}")
        return image
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"image must be (channels, h, w), got shape {arr.shape}")
    return Tensor(arr[None].astype(np.float32, copy=False))


def predict(network: Network, store: ParamStore, image) -> np.ndarray:
    """Edge probability map (h, w) in [0, 1] from the last side output.

    Works on both graph modes: inference graphs only have that head, and
    train graphs use it as their finest prediction.
    """
    x = _as_batch(image)
    outputs = network.forward(store, x)
    logits = outputs.side_logits[-1].data[0, 0]
    return _sigmoid(logits).astype(np.float32)


def predict_multiscale(network: Network, store: ParamStore, image,
                       scales=(0.5, 1.0, 1.5)) -> np.ndarray:
    """Mean of per-scale predictions, each resized back to the input dims."""
    if len(scales) == 0:
        raise ValueError("scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive, got {tuple(scales)}")
    x = _as_batch(image)
    h, w = x.shape[2], x.shape[3]
    total = np.zeros((h, w), dtype=np.float64)
    for s in scales:
        sh, sw = int(round(h * s)), int(round(w * s))
        if sh < MIN_SCALED_SIDE or sw < MIN_SCALED_SIDE:
            raise ValueError(
                f"scale {s} yields {sh}x{sw}, below the "
                f"{MIN_SCALED_SIDE}x{MIN_SCALED_SIDE} minimum")
        scaled = x if (sh, sw) == (h, w) else bilinear_resize(x, sh, sw)
        edge = predict(network, store, scaled)
        if (sh, sw) != (h, w):
            back = bilinear_resize(Tensor(edge[None, None]), h, w)
            edge = back.data[0, 0]
        total += edge
    return (total / len(scales)).astype(np.float32)


def _gaussian_smooth(values: np.ndarray) -> np.ndarray:
    """Separable 5-tap Gaussian (sigma 1) with edge-replicated borders."""
    taps = np.exp(-0.5 * np.arange(-2.0, 3.0) ** 2)
    taps /= taps.sum()
    h, w = values.shape
    padded = np.pad(values, ((0, 0), (2, 2)), mode="edge")
    rows = sum(taps[i] * padded[:, i:i + w] for i in range(5))
    padded = np.pad(rows, ((2, 2), (0, 0)), mode="edge")
    return sum(taps[i] * padded[i:i + h, :] for i in range(5))


def _sobel(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient estimates along x (columns) and y (rows)."""
    p = np.pad(values, 1, mode="edge")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2.0 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2.0 * p[:-2, 1:-1] - p[:-2, 2:])
    return gx, gy


def _principal_direction(smooth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit eigenvector of the Hessian's dominant-curvature eigenvalue.

    Perfectly symmetric ridge crests have zero gradient, so orientation
    there must come from second derivatives: the direction of strongest
    curvature runs across the ridge. Degenerate pixels (flat plains where
    the Hessian also vanishes) fall back to (1, 0).
    """
    p = np.pad(smooth, 1, mode="edge")
    sxx = p[1:-1, 2:] - 2.0 * smooth + p[1:-1, :-2]
    syy = p[2:, 1:-1] - 2.0 * smooth + p[:-2, 1:-1]
    sxy = 0.25 * (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2])
    mean = 0.5 * (sxx + syy)
    disc = np.sqrt(0.25 * (sxx - syy) ** 2 + sxy ** 2)
    lam_hi = mean + disc
    lam_lo = mean - disc
    lam = np.where(np.abs(lam_hi) >= np.abs(lam_lo), lam_hi, lam_lo)
    off_diag = np.abs(sxy) > 1e-12
    axis_x = np.abs(sxx) >= np.abs(syy)
    vx = np.where(off_diag, sxy, np.where(axis_x, 1.0, 0.0))
    vy = np.where(off_diag, lam - sxx, np.where(axis_x, 0.0, 1.0))
    norm = np.hypot(vx, vy)
    flat = norm < 1e-12
    norm = np.where(flat, 1.0, norm)
    return (np.where(flat, 1.0, vx / norm), np.where(flat, 0.0, vy / norm))


def _sample_bilinear(values: np.ndarray, ys: np.ndarray,
                     xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional coordinates, clamped to the border."""
    h, w = values.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = values[y0, x0] + fx * (values[y0, x1] - values[y0, x0])
    bottom = values[y1, x0] + fx * (values[y1, x1] - values[y1, x0])
    return top + fy * (bottom - top)


def nms_thin(edge_map: np.ndarray) -> np.ndarray:
    """Suppress pixels that are not local maxima across the edge direction.

    Directions are canonicalized by the sign of their dominant component so
    that the two pixels of a flat-topped ridge compare against the same
    side regardless of rounding noise in the orientation estimate; with a
    strict test forward and a non-strict test backward, such a plateau then
    keeps exactly one pixel instead of losing both. Surviving pixels keep
    their original value.
    """
    values = np.asarray(edge_map, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"edge map must be 2-d, got shape {values.shape}")
    if values.size == 0:
        raise ValueError("edge map is empty")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("edge map values must lie in [0, 1]")

    smooth = _gaussian_smooth(values)
    gx, gy = _sobel(smooth)
    hx, hy = _principal_direction(smooth)
    norm = np.hypot(gx, gy)
    flat = norm < 1e-12
    norm = np.where(flat, 1.0, norm)
    ux = np.where(flat, hx, gx / norm)
    uy = np.where(flat, hy, gy / norm)
    flip = np.where(np.abs(ux) >= np.abs(uy), ux < 0, uy < 0)
    ux = np.where(flip, -ux, ux)
    uy = np.where(flip, -uy, uy)

    h, w = values.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    forward = _sample_bilinear(values, ys + uy, xs + ux)
    backward = _sample_bilinear(values, ys - uy, xs - ux)
    keep = (values > forward) & (values >= backward)
    out = np.where(keep, values, 0.0)
    return out.astype(np.asarray(edge_map).dtype, copy=False)

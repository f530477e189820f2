"""SGD training loop with the step-decay schedule, plus data augmentation.

The recipe is deliberately boring: plain SGD (optional momentum, default
off), learning rate lr0 * decay^(epoch // 10) starting at 0.01, batches of 3
same-sized images, at most 60 epochs, everything driven by one seeded
generator so a rerun with the same seed reproduces the weight trajectory
bit for bit.

The objective is the sum of stage losses plus the fused-head loss over the
batch (each image with its own class weights). The per-epoch log records the
mean total loss per image, which keeps the number comparable across batch
groupings.

Augmentation expands each sample 24-fold: horizontal flip (2) x rotations of
0/90/180/270 degrees (4) x rescales of 0.5/1.0/1.5 (3), applied in that
order. Ground truth is transformed identically; rescaled ground truth is
bilinearly resampled and clamped back to [0, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .loss import class_weights, total_loss
from .network import Network, ParamStore
from .tensor import Tape, Tensor, backward, bilinear_resize
from .util import atomic_write


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 10
    batch_size: int = 3
    epochs: int = 60
    momentum: float = 0.0
    seed: int = 0
    gamma: float = 1.1
    th: float = 0.25

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Closed-form schedule; epoch indexes from 0."""
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


@dataclass
class Sample:
    """One training pair: 3-channel image in [0, 1] plus its consensus map."""

    image: np.ndarray
    gt: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.gt = np.asarray(self.gt, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample {self.id!r}: image must be (3, h, w), "
                             f"got {self.image.shape}")
        if self.gt.shape != self.image.shape[1:]:
            raise ValueError(f"sample {self.id!r}: gt shape {self.gt.shape} does not "
                             f"match image {self.image.shape[1:]}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.gt.shape


def _rescale(sample: Sample, scale: float, suffix: str) -> Sample:
    if scale == 1.0:
        return Sample(sample.image, sample.gt, sample.id + suffix)
    h, w = sample.dims
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    img = bilinear_resize(Tensor(sample.image[None]), nh, nw).data[0]
    gt = bilinear_resize(Tensor(sample.gt[None, None]), nh, nw).data[0, 0]
    return Sample(img, np.clip(gt, 0.0, 1.0), sample.id + suffix)


def augment(samples: Sequence[Sample],
            scales: Sequence[float] = (0.5, 1.0, 1.5)) -> list[Sample]:
    """Deterministic 2 x 4 x len(scales) expansion of the given samples."""
    out: list[Sample] = []
    for s in samples:
        for flip in (0, 1):
            img = s.image[:, :, ::-1] if flip else s.image
            gt = s.gt[:, ::-1] if flip else s.gt
            for k in (0, 1, 2, 3):
                rot_img = np.ascontiguousarray(np.rot90(img, k, axes=(1, 2)))
                rot_gt = np.ascontiguousarray(np.rot90(gt, k))
                base = Sample(rot_img, rot_gt, s.id)
                for scale in scales:
                    out.append(_rescale(base, scale, f"~f{flip}r{90 * k}s{scale:g}"))
    return out


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float,
             momentum: float, velocity: dict[str, np.ndarray]):
    """v <- momentum*v + g; w <- w - lr*v. Mutates params and velocity."""
    names = set(params.names())
    missing = names - set(grads)
    if missing:
        raise ValueError(f"missing gradient for {sorted(missing)[:3]}")
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                             f"expected {tensor.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        v = momentum * v + g.astype(tensor.dtype, copy=False)
        velocity[name] = v
        tensor.data -= lr * v
    return params, velocity


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_total_loss: float


def write_loss_log(path: str, entries: Sequence[EpochLog]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf)
    writer.writerow(["epoch", "lr", "mean_total_loss"])
    for e in entries:
        writer.writerow([e.epoch, f"{e.lr:.10g}", f"{e.mean_total_loss:.10g}"])
    atomic_write(path, buf.getvalue().encode())


def _batches(samples: Sequence[Sample], order: np.ndarray,
             batch_size: int) -> list[list[int]]:
    """Group the shuffled indices into same-resolution batches.

    Buckets keyed by (h, w) in order of first appearance preserve the
    shuffle's determinism while never mixing image sizes in one batch.
    """
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx in order:
        buckets.setdefault(samples[idx].dims, []).append(int(idx))
    out = []
    for indices in buckets.values():
        for i in range(0, len(indices), batch_size):
            out.append(indices[i:i + batch_size])
    return out


def evaluate_mean_loss(network: Network, store: ParamStore,
                       samples: Sequence[Sample], config: TrainConfig) -> float:
    """Mean per-image total loss at the current weights, no updates."""
    total = 0.0
    for s in samples:
        x = Tensor(s.image[None])
        outs = network.forward(store, x)
        w = class_weights(s.gt, config.gamma, config.th)
        total += total_loss(outs, s.gt[None, None], [w]).item()
    return total / len(samples)


def fit(network: Network, store: ParamStore, samples: Sequence[Sample],
        config: TrainConfig, log_path: str | None = None,
        progress: Callable[[EpochLog], None] | None = None):
    """Train in place; returns (store, per-epoch log)."""
    if network.spec.mode != "train":
        raise ValueError("fit needs a train-mode network")
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    velocity: dict[str, np.ndarray] = {}
    weight_cache: dict[int, object] = {}
    log: list[EpochLog] = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        for batch in _batches(samples, order, config.batch_size):
            tape = Tape()
            x = Tensor(np.stack([samples[i].image for i in batch]))
            gts = np.stack([samples[i].gt for i in batch])[:, None]
            weights = []
            for i in batch:
                w = weight_cache.get(i)
                if w is None:
                    w = class_weights(samples[i].gt, config.gamma, config.th)
                    weight_cache[i] = w
                weights.append(w)
            outs = network.forward(store, x, tape)
            loss = total_loss(outs, gts, weights, tape)
            grad_map = backward(tape, loss.id)
            grads = {name: grad_map.get(t.id, np.zeros_like(t.data))
                     for name, t in store.items()}
            sgd_step(store, grads, lr, config.momentum, velocity)
            loss_sum += loss.item()
        entry = EpochLog(epoch=epoch, lr=lr, mean_total_loss=loss_sum / len(samples))
        log.append(entry)
        if progress is not None:
            progress(entry)
    if log_path is not None:
        write_loss_log(log_path, log)
    return store, log

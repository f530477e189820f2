"""Model graphs for the FINED family: building, parameters, pruning, weights.

Three variants share one wiring recipe and differ only in stage widths:

  fined2       2 stages, widths [16, 64]
  fined3       3 stages, widths [16, 64, 256]
  fined3-vgg   3 stages, widths [64, 128, 256]

Per stage the backbone applies two 3x3 convs, relu after each. Each backbone
conv feeds its own DRR block; the two DRR outputs are summed pixel-wise,
refined by chained residual pooling, then a 1x1 side conv produces the stage
logit, upsampled bilinearly to the input resolution. Stages are separated by
2x2 max pooling. Train mode adds a fused head (1x1 conv over the concatenated
upsampled stage logits) and keeps every stage's side head; inference mode
keeps only the last stage's DRR/ResPool/side path on top of the full
backbone, which is what pruning produces.

A DRR is a 3x3 head conv to 32 channels plus relu, four chained residual
units, and a 1x1 tail conv down to 8 channels. Each residual unit runs two
3x3 dilated convs (both at that unit's dilation, relu after each) and adds
the result back: x <- x + relu(conv_b(relu(conv_a(x)))). Unit dilations are
5, 7, 9, 11 in order. Two convs per unit is a deliberate wiring choice; it
is what lands the parameter counts on the published model sizes.

Parameter names are part of the contract (pruning works by name):

  conv{s}_{i}.w/.b                    backbone conv i of stage s
  drr{s}_{i}.head.w/.b                DRR head
  drr{s}_{i}.unit{u}.a.w/.b, .b.w/.b  residual unit convs
  drr{s}_{i}.tail.w/.b                DRR tail
  respool{s}.block{k}.w/.b            residual pooling convs
  side{s}.w/.b                        stage logit head
  fuse.w/.b                           fused head (train mode only)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    ConvSpec,
    Tape,
    Tensor,
    add,
    avg_pool,
    bilinear_resize,
    concat_channels,
    conv2d,
    max_pool_2x2,
    relu,
)
from .util import atomic_write

TRAIN = "train"
INFERENCE = "inference"

VARIANTS = {
    "fined2": (16, 64),
    "fined3": (16, 64, 256),
    "fined3-vgg": (64, 128, 256),
}

# Reference model sizes in millions of parameters, train and inference builds.
REFERENCE_COUNTS_M = {
    ("fined2", INFERENCE): 0.23,
    ("fined2", TRAIN): 0.39,
    ("fined3", INFERENCE): 1.08,
    ("fined3", TRAIN): 1.43,
    ("fined3-vgg", INFERENCE): 1.44,
    ("fined3-vgg", TRAIN): 1.86,
}

WEIGHT_MAGIC = b"FINEDWT1"


@dataclass(frozen=True)
class NetworkSpec:
    """Static description of one model variant in one mode."""

    stages: int
    stage_channels: tuple[int, ...]
    mode: str = TRAIN
    in_channels: int = 3
    drr_channels: int = 32
    drr_reduce_channels: int = 8
    dilations: tuple[int, ...] = (5, 7, 9, 11)
    respool_blocks: int = 2
    respool_window: int = 5

    def __post_init__(self):
        if self.stages not in (2, 3):
            raise ValueError(f"stages must be 2 or 3, got {self.stages}")
        if len(self.stage_channels) != self.stages:
            raise ValueError(
                f"stage_channels has {len(self.stage_channels)} entries for {self.stages} stages")
        if self.mode not in (TRAIN, INFERENCE):
            raise ValueError(f"mode must be {TRAIN!r} or {INFERENCE!r}, got {self.mode!r}")
        if any(d % 2 == 0 for d in self.dilations):
            raise ValueError(f"dilations must be odd, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError(f"dilations must be strictly increasing, got {self.dilations}")

    @classmethod
    def variant(cls, name: str, mode: str = TRAIN, **overrides) -> "NetworkSpec":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        widths = VARIANTS[name]
        return cls(stages=len(widths), stage_channels=widths, mode=mode, **overrides)

    @property
    def head_count(self) -> int:
        return self.stages + 1 if self.mode == TRAIN else 1


def conv_layout(spec: NetworkSpec) -> list[tuple[str, ConvSpec]]:
    """Every conv in the graph, canonical order, as (base name, ConvSpec)."""
    k3 = lambda oc, ic, dil=1: ConvSpec(kernel=(oc, ic, 3, 3), dilation=dil)
    k1 = lambda oc, ic: ConvSpec(kernel=(oc, ic, 1, 1))
    d, r = spec.drr_channels, spec.drr_reduce_channels
    layout: list[tuple[str, ConvSpec]] = []
    for s in range(1, spec.stages + 1):
        width = spec.stage_channels[s - 1]
        prev = spec.in_channels if s == 1 else spec.stage_channels[s - 2]
        layout.append((f"conv{s}_1", k3(width, prev)))
        layout.append((f"conv{s}_2", k3(width, width)))
        if spec.mode == TRAIN or s == spec.stages:
            for i in (1, 2):
                layout.append((f"drr{s}_{i}.head", k3(d, width)))
                for u, dil in enumerate(spec.dilations, start=1):
                    layout.append((f"drr{s}_{i}.unit{u}.a", k3(d, d, dil)))
                    layout.append((f"drr{s}_{i}.unit{u}.b", k3(d, d, dil)))
                layout.append((f"drr{s}_{i}.tail", k1(r, d)))
            for k in range(1, spec.respool_blocks + 1):
                layout.append((f"respool{s}.block{k}", k3(r, r)))
            layout.append((f"side{s}", k1(1, r)))
    if spec.mode == TRAIN:
        layout.append(("fuse", k1(1, spec.stages)))
    return layout


def param_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Flat (name, shape) list: each conv contributes name.w and name.b."""
    shapes = []
    for base, cs in conv_layout(spec):
        oc = cs.kernel[0]
        shapes.append((f"{base}.w", cs.kernel))
        shapes.append((f"{base}.b", (1, oc, 1, 1)))
    return shapes


class ParamStore:
    """Ordered name -> Tensor map with optional access tracking."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}
        self._touched: set[str] | None = None

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        if self._touched is not None:
            self._touched.add(name)
        try:
            return self._items[name]
        except KeyError:
            raise ValueError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._items.items())

    def start_tracking(self) -> None:
        self._touched = set()

    def stop_tracking(self) -> set[str]:
        touched, self._touched = self._touched or set(), None
        return touched


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32,
                std: float = 0.01) -> ParamStore:
    """Gaussian(0, std^2) weights from a seeded generator, zero biases.

    The default std of 0.01 matches the reference recipe, which assumes a
    pretrained backbone underneath. Training from scratch at desk scale
    needs activations of healthy magnitude, so callers doing that pass a
    larger std (0.1 works well) as a stand-in for pretrained weights.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for base, cs in conv_layout(spec):
        oc = cs.kernel[0]
        w = rng.normal(0.0, std, size=cs.kernel).astype(dtype)
        store.add(f"{base}.w", Tensor(w))
        store.add(f"{base}.b", Tensor(np.zeros((1, oc, 1, 1), dtype=dtype)))
    return store


def warm_init(spec: NetworkSpec, seed: int, dtype=np.float32,
              scale: float = 1.0) -> ParamStore:
    """Stand-in for a pretrained backbone when training from scratch.

    Inner convolutions draw from Gaussian(0, scale^2 * 2/fan_in) so feature
    magnitudes survive depth, while the side and fuse projections start at
    exactly zero. Logits therefore begin flat and the first schedule phase
    fits those projections on fixed random features before gradient starts
    flowing back into the stack, which keeps early steps inside the stable
    region of the reference learning rate.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for base, cs in conv_layout(spec):
        oc, ic, kh, kw = cs.kernel
        head = base == "fuse" or base.startswith("side")
        if head:
            w = np.zeros(cs.kernel, dtype=dtype)
        else:
            std = scale * math.sqrt(2.0 / (ic * kh * kw))
            w = rng.normal(0.0, std, size=cs.kernel).astype(dtype)
        store.add(f"{base}.w", Tensor(w))
        store.add(f"{base}.b", Tensor(np.zeros((1, oc, 1, 1), dtype=dtype)))
    return store


def count_params(store: ParamStore) -> int:
    return sum(t.size for _, t in store.items())


@dataclass
class ForwardOutputs:
    """Side logits (one per built head) and the fused logit when present."""

    side_logits: list[Tensor]
    fused_logits: Tensor | None = None

    @property
    def heads(self) -> list[Tensor]:
        out = list(self.side_logits)
        if self.fused_logits is not None:
            out.append(self.fused_logits)
        return out


class Network:
    """Executable graph for one NetworkSpec; parameters live in a ParamStore.

    ``conv_hook``, when set, is called as ``hook(name, x, out)`` after every
    convolution with the layer's input and pre-activation output. It exists
    for introspection (feature visualization, shape assertions in tests) and
    must not mutate either tensor.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self._convs = dict(conv_layout(spec))
        self.conv_hook: Callable[[str, Tensor, Tensor], None] | None = None

    def conv_names(self) -> tuple[str, ...]:
        """Layer names in execution order, as seen by ``conv_hook``."""
        return tuple(self._convs)

    def _conv(self, store: ParamStore, base: str, x: Tensor, tape: Tape | None) -> Tensor:
        cs = self._convs[base]
        out = conv2d(x, cs, store[f"{base}.w"], store[f"{base}.b"], tape=tape)
        if self.conv_hook is not None:
            self.conv_hook(base, x, out)
        return out

    def _drr(self, store: ParamStore, prefix: str, x: Tensor, tape: Tape | None) -> Tensor:
        h = relu(self._conv(store, f"{prefix}.head", x, tape), tape)
        for u in range(1, len(self.spec.dilations) + 1):
            branch = relu(self._conv(store, f"{prefix}.unit{u}.a", h, tape), tape)
            branch = relu(self._conv(store, f"{prefix}.unit{u}.b", branch, tape), tape)
            h = add(h, branch, tape)
        return self._conv(store, f"{prefix}.tail", h, tape)

    def _respool(self, store: ParamStore, prefix: str, y: Tensor, tape: Tape | None) -> Tensor:
        for k in range(1, self.spec.respool_blocks + 1):
            pooled = avg_pool(y, self.spec.respool_window, stride=1, padding="same", tape=tape)
            y = add(y, self._conv(store, f"{prefix}.block{k}", pooled, tape), tape)
        return y

    def forward(self, store: ParamStore, x: Tensor, tape: Tape | None = None) -> ForwardOutputs:
        spec = self.spec
        if x.shape[1] != spec.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, expected {spec.in_channels}")
        full_h, full_w = x.shape[2], x.shape[3]
        side_logits: list[Tensor] = []
        cur = x
        for s in range(1, spec.stages + 1):
            a = relu(self._conv(store, f"conv{s}_1", cur, tape), tape)
            b = relu(self._conv(store, f"conv{s}_2", a, tape), tape)
            if spec.mode == TRAIN or s == spec.stages:
                d1 = self._drr(store, f"drr{s}_1", a, tape)
                d2 = self._drr(store, f"drr{s}_2", b, tape)
                refined = self._respool(store, f"respool{s}", add(d1, d2, tape), tape)
                logit = self._conv(store, f"side{s}", refined, tape)
                side_logits.append(bilinear_resize(logit, full_h, full_w, tape))
            if s < spec.stages:
                cur = max_pool_2x2(b, tape)
        fused = None
        if spec.mode == TRAIN:
            cat = concat_channels(side_logits, tape)
            fused = self._conv(store, "fuse", cat, tape)
        return ForwardOutputs(side_logits=side_logits, fused_logits=fused)


def build_network(spec: NetworkSpec) -> Network:
    return Network(spec)


def bind_store(store: ParamStore, spec: NetworkSpec, lenient: bool = False) -> ParamStore:
    """Filter and order ``store`` to exactly the parameters ``spec`` needs.

    Missing names or wrong shapes always fail. Extra names fail unless
    ``lenient`` is set, which silently drops them (how a train checkpoint is
    loaded into an inference graph).
    """
    required = param_shapes(spec)
    out = ParamStore()
    for name, shape in required:
        if name not in store:
            raise ValueError(f"store is missing parameter {name!r}")
        t = store[name]
        if t.shape != shape:
            raise ValueError(f"parameter {name!r} has shape {t.shape}, expected {shape}")
        out.add(name, t)
    if not lenient:
        extras = set(store.names()) - {n for n, _ in required}
        if extras:
            raise ValueError(f"unknown tensor names in store: {sorted(extras)}")
    return out


def prune_helpers(train_store: ParamStore, spec: NetworkSpec) -> ParamStore:
    """Drop training-helper parameters, keeping the last-stage inference path.

    The kept set is exactly what the inference-mode graph reads: every
    backbone conv, the final stage's DRR pair, ResPool and side head. Values
    are shared, not copied. Running this on an already-pruned store is a
    no-op, so pruning is idempotent.
    """
    return bind_store(train_store, replace(spec, mode=INFERENCE), lenient=True)


# ---------------------------------------------------------------------------
# weight files


def save_params(store: ParamStore, path: str) -> None:
    """Write the store: magic, u32 count, then length-prefixed named tensors.

    Each tensor is u16 name length, UTF-8 name, u8 rank, rank u32 dims, then
    raw little-endian float32 data in row-major order. No padding anywhere.
    """
    buf = bytearray(WEIGHT_MAGIC)
    buf += struct.pack("<I", len(store))
    for name, t in store.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]!r}...")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    atomic_write(path, bytes(buf))


def load_params(path: str, spec: NetworkSpec | None = None,
                lenient: bool = False) -> ParamStore:
    """Read a weight file; with ``spec`` given, also bind/validate against it."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}, expected {WEIGHT_MAGIC!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated weight file at byte {pos}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n_elem), dtype="<f4").reshape(dims)
        store.add(name, Tensor(data.astype(np.float32)))
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after last tensor")
    if spec is not None:
        store = bind_store(store, spec, lenient=lenient)
    return store

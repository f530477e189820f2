"""The ``fined`` command line: train, infer, prune, eval, params, gradcheck, viz.

Each subcommand wraps one library entry point and exchanges data through
ordinary files, so every pipeline stage can also be driven from Python. The
report-producing commands (train, eval) put a rendered figure next to each
delimited output. Exit codes: 0 on success, 2 for usage problems (argparse
errors and unknown layer names), 1 for runtime failures such as missing or
malformed files.

Batch inference fans out across worker threads, one image per task, with the
log lines kept in input order. The FINED_THREADS environment variable caps
the worker count.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .evaluation import EvalConfig, evaluate_dataset, pr_curve, write_summary
from .imageio import load_gt, parse_manifest, read_image, write_image
from .inference import nms_thin, predict_multiscale
from .loss import class_weights, total_loss
from .network import (
    INFERENCE,
    REFERENCE_COUNTS_M,
    TRAIN,
    VARIANTS,
    NetworkSpec,
    build_network,
    count_params,
    init_params,
    load_params,
    param_shapes,
    prune_helpers,
    save_params,
)
from .tensor import Tensor, grad_check
from .trainer import Sample, TrainConfig, augment, fit

MODES = {"train": TRAIN, "inf": INFERENCE}
IMAGE_EXTS = (".png", ".pgm", ".ppm", ".pnm")
MULTISCALE = (0.5, 1.0, 1.5)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


def _scale_list(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a,b,c")
    return tuple(float(p) for p in parts)


def _thread_cap(n_items: int) -> int:
    raw = os.environ.get("FINED_THREADS", "").strip()
    limit = os.cpu_count() or 1
    if raw:
        try:
            limit = int(raw)
        except ValueError:
            raise ValueError(f"FINED_THREADS must be a positive integer, got {raw!r}")
        if limit < 1:
            raise ValueError(f"FINED_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(limit, n_items))


def _load_samples(manifest: str) -> list[Sample]:
    from .evaluation import fuse_annotations

    samples = []
    for entry in parse_manifest(manifest):
        image = read_image(entry.image)
        gt = load_gt(entry.gts, fuse_annotations)
        samples.append(Sample(image=image, gt=gt, id=entry.id))
    return samples


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    samples = _load_samples(args.manifest)
    if args.augment:
        samples = augment(samples)
    spec = NetworkSpec.variant(args.spec, TRAIN)
    network = build_network(spec)
    store = init_params(spec, seed=args.seed)
    config = TrainConfig(lr0=args.lr, epochs=args.epochs, batch_size=args.batch,
                         momentum=args.momentum, seed=args.seed)
    stem = os.path.splitext(args.out)[0]
    log_path = stem + "_loss.csv"

    def progress(entry):
        print(f"epoch {entry.epoch:3d}  lr {entry.lr:.6g}  "
              f"mean_total_loss {entry.mean_total_loss:.6g}")

    store, log = fit(network, store, samples, config,
                     log_path=log_path, progress=progress)
    save_params(store, args.out)

    from .plots import render_loss_curve

    curve_path = stem + "_loss.svg"
    render_loss_curve(log, curve_path)
    print(f"weights -> {args.out}")
    print(f"loss log -> {log_path}")
    print(f"loss curve -> {curve_path}")
    return 0


def cmd_infer(args) -> int:
    spec = NetworkSpec.variant(args.spec, INFERENCE)
    store = load_params(args.weights, spec, lenient=True)
    network = build_network(spec)
    if args.scales is not None:
        scales = args.scales
    else:
        scales = MULTISCALE if args.multiscale else (1.0,)

    if os.path.isdir(args.input):
        names = sorted(os.listdir(args.input))
        files = [os.path.join(args.input, n) for n in names
                 if os.path.splitext(n)[1].lower() in IMAGE_EXTS]
        if not files:
            raise ValueError(f"{args.input}: no {'/'.join(IMAGE_EXTS)} images found")
    else:
        files = [args.input]
    os.makedirs(args.out, exist_ok=True)

    def process(path: str) -> str:
        image = read_image(path)
        prob = predict_multiscale(network, store, image, scales=scales)
        if args.nms:
            prob = nms_thin(prob)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{stem}_edge.png")
        write_image(out_path, prob, bit_depth=16)
        return out_path

    with ThreadPoolExecutor(max_workers=_thread_cap(len(files))) as pool:
        for path, out_path in zip(files, pool.map(process, files)):
            print(f"{path} -> {out_path}")
    return 0


def cmd_prune(args) -> int:
    store = load_params(args.weights)
    spec = NetworkSpec.variant(args.spec, TRAIN)
    pruned = prune_helpers(store, spec)
    save_params(pruned, args.out)
    before, after = count_params(store), count_params(pruned)
    drop = 100.0 * (before - after) / before if before else 0.0
    print(f"parameters {before:,} -> {after:,} ({drop:.1f}% removed)")
    print(f"weights -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    preds, gts_per_image = [], []
    for entry in parse_manifest(args.manifest):
        pred = read_image(entry.image)
        if pred.shape[0] != 1:
            raise ValueError(f"{entry.image}: prediction map must be single-channel")
        preds.append(pred[0])
        gts = []
        for path in entry.gts:
            gt = read_image(path)
            if gt.shape[0] != 1:
                raise ValueError(f"{path}: ground truth must be single-channel")
            gts.append(gt[0])
        gts_per_image.append(gts)
    n = args.thresholds
    cfg = EvalConfig(tolerance=args.tolerance,
                     thresholds=tuple((k + 1) / (n + 1) for k in range(n)),
                     thin_before_eval=args.nms)
    report = evaluate_dataset(preds, gts_per_image, cfg)
    os.makedirs(args.out, exist_ok=True)
    summary_path = os.path.join(args.out, "summary.json")
    curve_path = os.path.join(args.out, "pr_curve.csv")
    write_summary(report, summary_path)
    pr_curve(report, curve_path)
    print(f"images {len(preds)}  thresholds {n}  tolerance {args.tolerance:g}")
    print(f"ODS F {report.ods_f:.4f} at threshold {report.ods_threshold:.4g}")
    print(f"OIS F {report.ois_f:.4f}")
    print(f"summary -> {summary_path}")
    print(f"pr curve -> {curve_path} and {os.path.splitext(curve_path)[0] + '.svg'}")
    return 0


def _group_of(name: str) -> str:
    base = name.split(".", 1)[0]
    for prefix, group in (("conv", "backbone"), ("drr", "drr"),
                          ("respool", "respool"), ("side", "side")):
        if base.startswith(prefix):
            return group
    return "fuse"


def _identify(shapes: list[tuple[str, tuple]]) -> tuple[str, str] | None:
    """Match a (name, shape) set against every known variant layout."""
    actual = {name: tuple(shape) for name, shape in shapes}
    for variant in VARIANTS:
        for mode in (INFERENCE, TRAIN):
            layout = param_shapes(NetworkSpec.variant(variant, mode))
            wanted = {name: tuple(shape) for name, shape in layout}
            if actual == wanted:
                return variant, mode
    return None


def cmd_params(args) -> int:
    if args.weights is not None:
        store = load_params(args.weights)
        shapes = [(name, t.shape) for name, t in store.items()]
        identity = _identify(shapes)
    elif args.spec is not None:
        identity = (args.spec, MODES[args.mode])
        shapes = param_shapes(NetworkSpec.variant(*identity))
    else:
        raise ValueError("params needs a weights file or --spec")

    counts: dict[str, int] = {}
    for name, shape in shapes:
        group = _group_of(name)
        counts[group] = counts.get(group, 0) + int(np.prod(shape))
    total = sum(counts.values())

    if identity is not None:
        variant, mode = identity
        print(f"{variant} ({mode})")
    else:
        print("unrecognized layout (no reference entry)")
    for group in ("backbone", "drr", "respool", "side", "fuse"):
        if group in counts:
            print(f"  {group:<10} {counts[group]:>12,}")
    print(f"  {'total':<10} {total:>12,}")
    if identity is not None:
        reference = REFERENCE_COUNTS_M[identity]
        deviation = 100.0 * (total / 1e6 - reference) / reference
        print(f"reference {reference:.2f} M; deviation {deviation:+.1f}%")
    return 0


def cmd_gradcheck(args) -> int:
    spec = NetworkSpec.variant(args.spec, TRAIN)
    network = build_network(spec)
    store = init_params(spec, seed=args.seed, dtype=np.float64)
    # Central differences need a locally smooth objective. Setting every bias
    # to +0.5 puts all relu inputs well inside the open regime and separates
    # pool-window maxima, so no kink sits within the probe step of any
    # sampled parameter; correctness of the gate logic itself is covered by
    # the per-op unit tests.
    for name, tensor in store.items():
        if name.endswith(".b"):
            tensor.data[:] = 0.5
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.standard_normal((1, 3, args.size, args.size)))
    gt = (rng.random((args.size, args.size)) < 0.15).astype(np.float64)
    gt[args.size // 2, :] = 1.0
    weights = [class_weights(gt)]
    gt_batch = gt[None, None]

    def loss_fn(tape):
        outputs = network.forward(store, x, tape)
        return total_loss(outputs, gt_batch, weights, tape)

    per_param = max(1, -(-args.samples // len(store)))
    report = grad_check(loss_fn, store.items(), eps=args.eps,
                        max_entries_per_param=per_param,
                        rng=np.random.default_rng(args.seed + 1))
    checked = sum(entry.checked for entry in report.entries)
    print(f"checked {checked} entries across {len(report.entries)} parameters")
    print(f"max relative error {report.max_rel_err:.3e} (tolerance {args.tol:g})")
    if report.max_rel_err < args.tol:
        print("PASS")
        return 0
    print("FAIL")
    return 1


def _tile_gray(maps: np.ndarray, pad: int = 2) -> np.ndarray:
    """Tile (n, h, w) maps, each min-max normalized, on a white canvas."""
    n, h, w = maps.shape
    cols = int(math.ceil(math.sqrt(n)))
    rows = -(-n // cols)
    canvas = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad),
                     dtype=np.float32)
    for i in range(n):
        m = maps[i].astype(np.float64)
        lo, hi = float(m.min()), float(m.max())
        norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        r, c = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y0:y0 + h, x0:x0 + w] = norm
    return canvas


def _tile_filters(kernels: np.ndarray, zoom: int = 16, pad: int = 4) -> np.ndarray:
    """Tile (n, 3, kh, kw) filters as zoomed RGB patches on a white canvas."""
    n, _, kh, kw = kernels.shape
    h, w = kh * zoom, kw * zoom
    cols = int(math.ceil(math.sqrt(n)))
    rows = -(-n // cols)
    canvas = np.ones((3, rows * (h + pad) + pad, cols * (w + pad) + pad),
                     dtype=np.float32)
    block = np.ones((zoom, zoom))
    for i in range(n):
        k = kernels[i].astype(np.float64)
        lo, hi = float(k.min()), float(k.max())
        norm = (k - lo) / (hi - lo) if hi > lo else np.zeros_like(k)
        r, c = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
        for ch in range(3):
            canvas[ch, y0:y0 + h, x0:x0 + w] = np.kron(norm[ch], block)
    return canvas


def cmd_viz(args) -> int:
    spec = NetworkSpec.variant(args.spec, MODES[args.mode])
    store = load_params(args.weights, spec, lenient=True)
    network = build_network(spec)
    names = network.conv_names()
    if args.layer not in names:
        print(f"unknown layer {args.layer!r}; valid layers: {', '.join(names)}",
              file=sys.stderr)
        return 2

    image = read_image(args.image)
    captured: dict[str, np.ndarray] = {}

    def hook(name, x, out):
        if name == args.layer:
            captured[name] = out.data[0]

    network.conv_hook = hook
    network.forward(store, Tensor(image[None]))
    maps = captured[args.layer]
    if args.channels > 0:
        maps = maps[:args.channels]
    os.makedirs(args.out, exist_ok=True)
    maps_path = os.path.join(args.out, f"{args.layer.replace('.', '_')}_maps.png")
    write_image(maps_path, _tile_gray(maps), bit_depth=8)
    print(f"{maps.shape[0]} feature maps -> {maps_path}")

    first = names[0]
    kernels = store[f"{first}.w"].data
    if kernels.shape[1] == 3:
        filters_path = os.path.join(args.out, f"{first}_filters.png")
        write_image(filters_path, _tile_filters(kernels), bit_depth=8)
        print(f"{kernels.shape[0]} filters -> {filters_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fined",
        description="Lightweight multi-stage edge detection: train, prune, "
                    "run and benchmark the FINED model family.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_spec(p):
        p.add_argument("--spec", choices=sorted(VARIANTS), default="fined2",
                       help="model variant (default: %(default)s)")

    p = sub.add_parser("train", help="fit a model on a manifest of images + ground truths")
    p.add_argument("manifest", help="TAB-separated lines: image<TAB>gt[<TAB>gt...]")
    add_spec(p)
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    p.add_argument("--epochs", type=_positive_int, default=60,
                   help="training epochs (default: %(default)s)")
    p.add_argument("--lr", type=float, default=0.01,
                   help="initial learning rate (default: %(default)s)")
    p.add_argument("--batch", type=_positive_int, default=3,
                   help="images per batch (default: %(default)s)")
    p.add_argument("--momentum", type=float, default=0.0,
                   help="SGD momentum (default: %(default)s)")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="24x flip/rotation/rescale expansion")
    p.add_argument("--out", required=True,
                   help="weights file; the loss CSV and curve land beside it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a model over an image or a directory of images")
    p.add_argument("weights", help="weight file (train checkpoints are pruned on load)")
    p.add_argument("input", help="image file or directory")
    add_spec(p)
    p.add_argument("--multiscale", action=argparse.BooleanOptionalAction, default=False,
                   help="average predictions over scales 0.5/1.0/1.5")
    p.add_argument("--scales", type=_scale_list, default=None, metavar="A,B,C",
                   help="explicit scale list; overrides --multiscale")
    p.add_argument("--nms", action=argparse.BooleanOptionalAction, default=False,
                   help="thin the probability map before writing")
    p.add_argument("--out", required=True, help="output directory for 16-bit PNG maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("prune", help="strip training helpers from a checkpoint")
    p.add_argument("weights", help="train-mode weight file")
    add_spec(p)
    p.add_argument("--out", required=True, help="pruned weight file")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="score prediction maps against ground truth")
    p.add_argument("manifest",
                   help="TAB-separated lines: prediction<TAB>gt[<TAB>gt...]")
    p.add_argument("--tolerance", type=float, default=0.0075,
                   help="match radius as a fraction of the image diagonal "
                        "(default: %(default)s)")
    p.add_argument("--thresholds", type=_positive_int, default=99,
                   help="number of evenly spaced thresholds (default: %(default)s)")
    p.add_argument("--nms", action=argparse.BooleanOptionalAction, default=True,
                   help="thin predictions before matching")
    p.add_argument("--out", required=True,
                   help="report directory (summary.json, pr_curve.csv, pr_curve.svg)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter counts against the reference sizes")
    p.add_argument("weights", nargs="?", default=None,
                   help="weight file to count (layout auto-detected)")
    p.add_argument("--spec", choices=sorted(VARIANTS), default=None,
                   help="count a fresh layout instead of a file")
    p.add_argument("--mode", choices=sorted(MODES), default="inf",
                   help="build mode for --spec (default: %(default)s)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck",
                       help="compare autodiff gradients with finite differences")
    add_spec(p)
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    p.add_argument("--size", type=_positive_int, default=16,
                   help="square input size (default: %(default)s)")
    p.add_argument("--samples", type=_positive_int, default=200,
                   help="total parameter entries to probe (default: %(default)s)")
    p.add_argument("--eps", type=float, default=1e-5,
                   help="central-difference step (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="max relative error to pass (default: %(default)s)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", help="render feature maps (and first-layer filters)")
    p.add_argument("weights")
    p.add_argument("image")
    add_spec(p)
    p.add_argument("--mode", choices=sorted(MODES), default="inf",
                   help="graph to run (default: %(default)s)")
    p.add_argument("--layer", required=True, help="conv layer name, e.g. conv1_1")
    p.add_argument("--channels", type=int, default=0,
                   help="show only the first N channels (0 = all)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

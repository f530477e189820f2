"""Acceptance gate: nine verifiable claims about the finished package.

Each test prints one summary line of the form

    criterion N: PASS|FAIL - measured values vs the pinned tolerance

through capsys.disabled(), so the lines show up in an ordinary pytest run.
The assertions follow the printed line; a failing criterion still reports
its measured numbers first. Oracles are recomputed locally so this file
stands on its own.

Criterion 5 is known-red: with this architecture trained from a cold start,
no initialization we found survives the 0.01 learning-rate phase of the
schedule while also learning fast enough to cut the loss 5x in 60 epochs.
The README's "Known limitation" section documents the probe campaign behind
that conclusion. The test states the target honestly and measures what the
pinned recipe achieves instead of weakening the check.
"""

import time

import numpy as np
import pytest

from fined.evaluation import EvalConfig, evaluate_dataset, match_edges, sweep_image
from fined.inference import nms_thin, predict, predict_multiscale
from fined.loss import ClassWeights, class_weights, pixel_loss, stage_loss, total_loss
from fined.network import (
    INFERENCE,
    TRAIN,
    NetworkSpec,
    build_network,
    count_params,
    init_params,
    load_params,
    prune_helpers,
    save_params,
)
from fined.tensor import Tape, Tensor, bilinear_resize, grad_check
from fined.toydata import make_shapes
from fined.trainer import Sample, TrainConfig, evaluate_mean_loss, fit


def report(capsys, line):
    with capsys.disabled():
        print(line, flush=True)


def test_criterion_1_gradient_fidelity(capsys):
    """Analytic gradients match h=1e-5 central differences in float64."""
    start = time.monotonic()
    spec = NetworkSpec.variant("fined2", TRAIN)
    network = build_network(spec)
    store = init_params(spec, seed=0, dtype=np.float64)
    # Finite differences need a locally smooth loss: biases at +0.5 hold
    # every relu input far inside the open regime and keep pool-window
    # maxima separated, so no kink falls within the probe step. The gate
    # branches themselves are covered by the per-op tests.
    for name, tensor in store.items():
        if name.endswith(".b"):
            tensor.data[:] = 0.5
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    gt = (rng.random((32, 32)) < 0.15).astype(np.float64)
    gt[16, :] = 1.0
    weights = [class_weights(gt)]
    gt_batch = gt[None, None]

    def loss_fn(tape):
        return total_loss(network.forward(store, x, tape), gt_batch, weights, tape)

    result = grad_check(loss_fn, store.items(), eps=1e-5,
                        max_entries_per_param=4,
                        rng=np.random.default_rng(1))
    checked = sum(entry.checked for entry in result.entries)
    elapsed = time.monotonic() - start
    ok = checked >= 200 and result.max_rel_err < 1e-4 and elapsed < 300
    report(capsys, f"criterion 1: {'PASS' if ok else 'FAIL'} - "
                   f"max rel err {result.max_rel_err:.2e} (< 1e-4) over "
                   f"{checked} entries (>= 200), {elapsed:.0f}s (< 300s)")
    assert checked >= 200
    assert result.max_rel_err < 1e-4
    assert elapsed < 300


def test_criterion_2_pruning_equivalence(capsys):
    """Pruned inference output is bit-identical to the last train side head."""
    rng = np.random.default_rng(7)
    worst = 0
    for variant in ("fined2", "fined3"):
        train_spec = NetworkSpec.variant(variant, TRAIN)
        inf_spec = NetworkSpec.variant(variant, INFERENCE)
        train_net = build_network(train_spec)
        inf_net = build_network(inf_spec)
        store = init_params(train_spec, seed=rng.integers(1 << 30), std=0.05)
        pruned = prune_helpers(store, train_spec)
        for i in range(10):
            size = 16 if i % 2 == 0 else 24
            x = Tensor(rng.standard_normal((1, 3, size, size),
                                           dtype=np.float32) * 0.5)
            train_side = train_net.forward(store, x).side_logits[-1].data
            inf_side = inf_net.forward(pruned, x).side_logits[-1].data
            if train_side.tobytes() != inf_side.tobytes():
                worst += 1
    ok = worst == 0
    report(capsys, f"criterion 2: {'PASS' if ok else 'FAIL'} - "
                   f"{worst} of 20 input/variant pairs differ "
                   f"(bit-identical required, fined2 + fined3, 10 inputs each)")
    assert worst == 0


def test_criterion_3_parameter_counts(capsys):
    """Counts sit within +/-25% of the published sizes; pruning drops >= 20%."""
    targets = {
        ("fined2", INFERENCE): 0.23,
        ("fined2", TRAIN): 0.39,
        ("fined3", INFERENCE): 1.08,
        ("fined3", TRAIN): 1.43,
    }
    measured = {}
    details = []
    ok = True
    for (variant, mode), ref in targets.items():
        n = count_params(init_params(NetworkSpec.variant(variant, mode), seed=0))
        measured[(variant, mode)] = n
        dev = 100.0 * (n / 1e6 - ref) / ref
        ok &= abs(dev) <= 25.0
        details.append(f"{variant}-{'inf' if mode == INFERENCE else 'train'} "
                       f"{n:,} ({dev:+.1f}% of {ref}M)")
    drop = 100.0 * (1.0 - measured[("fined3", INFERENCE)]
                    / measured[("fined3", TRAIN)])
    ok &= drop >= 20.0
    details.append(f"fined3 prune drop {drop:.1f}% (>= 20%)")
    report(capsys, f"criterion 3: {'PASS' if ok else 'FAIL'} - " + ", ".join(details))
    for (variant, mode), ref in targets.items():
        dev = abs(measured[(variant, mode)] / 1e6 - ref) / ref
        assert dev <= 0.25, (variant, mode)
    assert drop >= 20.0


def test_criterion_4_loss_correctness(capsys):
    """Class weights, the softplus pixel loss, and the ignore band."""
    gt = np.array([1.0, 1.0, 0, 0, 0, 0, 0, 0, 0, 0])
    w = class_weights(gt, gamma=1.1, th=0.25)
    alpha_ok = w.alpha == 1.1 * 2 / 10 and abs(w.alpha - 0.22) < 1e-15
    beta_ok = w.beta == 0.8

    half = ClassWeights(alpha=0.55, beta=0.45, th=0.25)
    loss0 = pixel_loss(0.0, 0.0, half)
    pl_ok = abs(loss0 - 0.55 * np.log(2.0)) < 1e-12

    band = ClassWeights(alpha=1.0, beta=1.0, th=0.25)
    band_ok = all(pixel_loss(p, y, band) == 0.0
                  for p in (-3.0, 0.0, 2.5)
                  for y in (0.01, 0.1, 0.2499))
    ignore_map = np.full((1, 1, 4, 4), 0.1)
    logits = Tensor(np.linspace(-2, 2, 16).reshape(1, 1, 4, 4))
    band_ok &= stage_loss(logits, ignore_map, [band]).item() == 0.0

    ok = alpha_ok and beta_ok and pl_ok and band_ok
    report(capsys, f"criterion 4: {'PASS' if ok else 'FAIL'} - "
                   f"alpha {w.alpha!r} (= 1.1*2/10, |d(0.22)| < 1e-15), "
                   f"beta {w.beta!r} (= 0.8), pixel_loss(0,0) d "
                   f"{abs(loss0 - 0.55 * np.log(2.0)):.1e} (< 1e-12), "
                   f"ignore band exactly 0: {band_ok}")
    assert alpha_ok and beta_ok and pl_ok and band_ok


def test_criterion_5_toy_training(capsys):
    """Overfit five 64x64 shapes in <= 60 epochs of the pinned schedule.

    Known-red. The 0.01 starting rate is supercritical for this objective
    from every cold start we probed (the README documents the campaign),
    so the pinned recipe uses the best surviving configuration found:
    std-0.024 Gaussian init, no augmentation. The numbers below are what
    it honestly achieves.
    """
    start = time.monotonic()
    samples = make_shapes(count=5, size=64, seed=7)
    spec = NetworkSpec.variant("fined2", TRAIN)
    network = build_network(spec)
    store = init_params(spec, seed=0, std=0.024)
    config = TrainConfig()  # lr 0.01 decaying 10x every 10 epochs, batch 3
    initial = evaluate_mean_loss(network, store, samples, config)
    with np.errstate(over="ignore", invalid="ignore"):
        fit(network, store, samples, config)
        final = evaluate_mean_loss(network, store, samples, config)
        ratio = final / initial

        inf_spec = NetworkSpec.variant("fined2", INFERENCE)
        inf_net = build_network(inf_spec)
        pruned = prune_helpers(store, spec)
        preds = [predict_multiscale(inf_net, pruned, s.image,
                                    scales=(0.5, 1.0, 1.5)) for s in samples]
    gts = [[s.gt.astype(np.uint8)] for s in samples]
    cfg = EvalConfig(tolerance=0.0225)
    ods = evaluate_dataset(preds, gts, cfg).ods_f
    elapsed = time.monotonic() - start
    ok = ratio < 0.2 and ods > 0.90 and elapsed < 1800
    report(capsys, f"criterion 5: {'PASS' if ok else 'FAIL'} - "
                   f"loss {initial:.1f} -> {final:.1f}, ratio {ratio:.3f} "
                   f"(< 0.2 required), ODS {ods:.3f} (> 0.90 required), "
                   f"{elapsed:.0f}s (< 1800s)")
    assert elapsed < 1800
    assert ratio < 0.2, f"loss ratio {ratio:.3f} did not reach < 0.2"
    assert ods > 0.90, f"pipeline ODS {ods:.3f} did not reach > 0.90"


def test_criterion_6_multiscale(capsys):
    """Single-scale identity and manual three-call composition, both 1e-6."""
    samples = make_shapes(count=3, size=32, seed=2)
    spec = NetworkSpec.variant("fined2", TRAIN)
    network = build_network(spec)
    store = init_params(spec, seed=3, std=0.08)
    fit(network, store, samples,
        TrainConfig(lr0=5e-4, epochs=4, batch_size=3, seed=3))
    inf_spec = NetworkSpec.variant("fined2", INFERENCE)
    inf_net = build_network(inf_spec)
    pruned = prune_helpers(store, spec)
    image = samples[0].image
    h, w = image.shape[1:]

    single = predict(inf_net, pruned, image)
    via_multi = predict_multiscale(inf_net, pruned, image, scales=[1.0])
    d_single = float(np.abs(via_multi - single).max())

    multi = predict_multiscale(inf_net, pruned, image, scales=[0.5, 1.0, 1.5])
    acc = np.zeros((h, w), dtype=np.float64)
    x = Tensor(image[None])
    for s in (0.5, 1.0, 1.5):
        sh, sw = int(round(h * s)), int(round(w * s))
        scaled = x if s == 1.0 else bilinear_resize(x, sh, sw)
        edge = predict(inf_net, pruned, scaled)
        if s != 1.0:
            edge = bilinear_resize(Tensor(edge[None, None]), h, w).data[0, 0]
        acc += edge
    d_manual = float(np.abs(multi - acc / 3.0).max())

    ok = d_single < 1e-6 and d_manual < 1e-6
    report(capsys, f"criterion 6: {'PASS' if ok else 'FAIL'} - "
                   f"[1.0] vs predict max diff {d_single:.1e} (< 1e-6), "
                   f"manual 3-scale composition max diff {d_manual:.1e} (< 1e-6)")
    assert d_single < 1e-6
    assert d_manual < 1e-6


def _optimal_cardinality(pred_px, gt_px, radius):
    """Exhaustive maximum matching for tiny instances."""
    adj = []
    for py, px in pred_px:
        adj.append([k for k, (gy, gx) in enumerate(gt_px)
                    if (py - gy) ** 2 + (px - gx) ** 2 <= radius ** 2])
    best = 0

    def rec(i, used, count):
        nonlocal best
        if count + (len(adj) - i) <= best:
            return
        if i == len(adj):
            best = max(best, count)
            return
        for g in adj[i]:
            if g not in used:
                used.add(g)
                rec(i + 1, used, count + 1)
                used.remove(g)
        rec(i + 1, used, count)

    rec(0, set(), 0)
    return best


def test_criterion_7_evaluation_oracle(capsys):
    """Matching is optimal; ODS/OIS equal a brute-force sweep; OIS >= ODS."""
    rng = np.random.default_rng(17)
    mismatches = 0
    trials = 200
    for _ in range(trials):
        h, w = rng.integers(4, 9, size=2)
        pred = np.zeros((h, w), dtype=np.uint8)
        gt = np.zeros((h, w), dtype=np.uint8)
        for mask in (pred, gt):
            n = rng.integers(0, 9)
            idx = rng.choice(h * w, size=min(n, h * w), replace=False)
            mask.reshape(-1)[idx] = 1
        radius = rng.choice([1.0, 1.5, 2.0, 3.0])
        got = match_edges(pred, gt, radius).matched_pred
        want = _optimal_cardinality(list(zip(*np.nonzero(pred))),
                                    list(zip(*np.nonzero(gt))), radius)
        mismatches += got != want

    # two hand-built images, aggregated by hand across the threshold sweep
    pred1 = np.zeros((8, 8))
    pred1[2, 1:7] = [0.2, 0.4, 0.6, 0.8, 0.9, 0.3]
    gt1 = np.zeros((8, 8), dtype=np.uint8)
    gt1[2, 2:6] = 1
    pred2 = np.zeros((8, 8))
    pred2[5, 1:5] = [0.7, 0.5, 0.35, 0.15]
    pred2[1, 6] = 0.45
    gt2 = np.zeros((8, 8), dtype=np.uint8)
    gt2[5, 1:4] = 1
    preds, gts = [pred1, pred2], [[gt1], [gt2]]
    cfg = EvalConfig(tolerance=0.1, thin_before_eval=False)
    report_obj = evaluate_dataset(preds, gts, cfg)

    max_px = cfg.max_dist_px((8, 8))
    per_image = []
    for pred, (gt,) in zip(preds, gts):
        rows = []
        for t in cfg.thresholds:
            m = match_edges((pred >= t).astype(np.uint8), gt, max_px)
            rows.append((m.matched_pred, int((pred >= t).sum()),
                         m.matched_gt, int(gt.sum())))
        per_image.append(rows)

    def f_of(tp_p, n_p, tp_g, n_g):
        p = tp_p / n_p if n_p else 0.0
        r = tp_g / n_g if n_g else 0.0
        return 2 * p * r / (p + r) if p + r else 0.0

    pooled = [f_of(*[sum(rows[k][j] for rows in per_image) for j in range(4)])
              for k in range(len(cfg.thresholds))]
    brute_ods = max(pooled)
    brute_ois = sum(max(f_of(*row) for row in rows)
                    for rows in per_image) / len(per_image)
    sweep_ok = report_obj.ods_f == brute_ods and report_obj.ois_f == brute_ois

    # OIS >= ODS across suite-generated detector-like datasets
    inversions = 0
    gen = np.random.default_rng(29)
    cfg_r = EvalConfig(tolerance=0.1, thin_before_eval=False,
                       thresholds=tuple(k / 10 for k in range(1, 10)))
    for _ in range(6):
        r_preds, r_gts = [], []
        for _ in range(3):
            gt = np.zeros((12, 12), dtype=np.uint8)
            r0, c0 = gen.integers(1, 5, size=2)
            r1, c1 = gen.integers(7, 11, size=2)
            gt[r0, c0:c1] = gt[r1, c0:c1] = 1
            gt[r0:r1, c0] = gt[r0:r1, c1] = 1
            smear = gt.astype(float)
            for axis in (0, 1):
                for shift in (1, -1):
                    smear += 0.4 * np.roll(gt, shift, axis=axis)
            noisy = (gen.uniform(0.55, 0.95) * np.clip(smear, 0, 1)
                     + 0.12 * gen.random(gt.shape))
            r_preds.append(np.clip(noisy, 0.0, 1.0))
            r_gts.append([gt])
        rep = evaluate_dataset(r_preds, r_gts, cfg_r)
        inversions += rep.ois_f < rep.ods_f - 1e-12

    ok = mismatches == 0 and sweep_ok and inversions == 0
    report(capsys, f"criterion 7: {'PASS' if ok else 'FAIL'} - "
                   f"{trials - mismatches}/{trials} matchings optimal, "
                   f"ODS {report_obj.ods_f:.6f} and OIS {report_obj.ois_f:.6f} "
                   f"equal brute force exactly: {sweep_ok}, "
                   f"OIS >= ODS on 6/6 generated datasets: {inversions == 0}")
    assert mismatches == 0
    assert sweep_ok
    assert inversions == 0


def test_criterion_8_nms_thinning(capsys):
    """A 3-px ridge thins to <= 2-px cross-sections at 8 orientations."""
    worst_width = 0
    increased = False
    for angle in np.arange(0.0, 180.0, 22.5):
        theta = np.deg2rad(angle)
        ny, nx = np.cos(theta), -np.sin(theta)
        size = 48
        c = (size - 1) / 2.0
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        d = np.abs((ys - c) * ny + (xs - c) * nx)
        values = np.zeros((size, size))
        values[d <= 1.5] = 0.5
        values[d <= 0.5] = 1.0
        thinned = nms_thin(values)
        increased |= bool((thinned > values).any())

        dy, dx = np.sin(theta), np.cos(theta)
        t = (np.nonzero(thinned)[0] - c) * dy + (np.nonzero(thinned)[1] - c) * dx
        lo, hi = t.min() + 4, t.max() - 4
        counts = {}
        for ti in t:
            if lo <= ti <= hi:
                counts[int(np.floor(ti))] = counts.get(int(np.floor(ti)), 0) + 1
        worst_width = max(worst_width, max(counts.values()))
    ok = worst_width <= 2 and not increased
    report(capsys, f"criterion 8: {'PASS' if ok else 'FAIL'} - "
                   f"max cross-section {worst_width}px (<= 2) over 8 "
                   f"orientations, no value increased: {not increased}")
    assert worst_width <= 2
    assert not increased


def test_criterion_9_determinism_and_serialization(capsys, tmp_path):
    """Seeded reruns, save/load round-trips, and pruning are all exact."""
    samples = make_shapes(count=2, size=32, seed=11)
    blobs = []
    for run in range(2):
        spec = NetworkSpec.variant("fined2", TRAIN)
        network = build_network(spec)
        store = init_params(spec, seed=4)
        fit(network, store, samples,
            TrainConfig(lr0=1e-3, epochs=2, batch_size=2, seed=4))
        path = tmp_path / f"run{run}.fnd"
        save_params(store, str(path))
        blobs.append(path.read_bytes())
    reruns_ok = blobs[0] == blobs[1]

    spec = NetworkSpec.variant("fined3", TRAIN)
    store = init_params(spec, seed=9, std=0.07)
    save_params(store, str(tmp_path / "w.fnd"))
    loaded = load_params(str(tmp_path / "w.fnd"))
    round_trip_ok = (loaded.names() == store.names()
                     and all(a.data.tobytes() == b.data.tobytes()
                             for (_, a), (_, b) in zip(store.items(),
                                                       loaded.items())))

    once = prune_helpers(store, spec)
    twice = prune_helpers(once, spec)
    save_params(once, str(tmp_path / "p1.fnd"))
    save_params(twice, str(tmp_path / "p2.fnd"))
    prune_ok = ((tmp_path / "p1.fnd").read_bytes()
                == (tmp_path / "p2.fnd").read_bytes())

    ok = reruns_ok and round_trip_ok and prune_ok
    report(capsys, f"criterion 9: {'PASS' if ok else 'FAIL'} - "
                   f"seeded reruns byte-identical: {reruns_ok}, save/load "
                   f"bit-exact: {round_trip_ok}, pruning idempotent: {prune_ok}")
    assert reruns_ok
    assert round_trip_ok
    assert prune_ok

"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line (printed in the terminal summary)
before asserting, so a run shows the status of all ten criteria.
"""

import math
import random
import time

import pytest
import torch

from goelan.config import full_config, overfit_config, toy_config
from goelan.loss import assign_batch, box_loss, dfl_loss, focal_class_loss, objectness_loss, smooth_labels, total_loss
from goelan.metrics import average_precision, f1_score, match_detections
from goelan.network import build_model, count_parameters, estimate_flops, forward_infer, strip_auxiliary
from goelan.postprocess import activate_boxes, iou, nms
from goelan.structures import BBox, GroundTruthObject
from goelan.train import Trainer, evaluate_model, read_csv
from gradutil import TOL, coordinate_errors, directional_errors
from test_metrics import AP_FIXTURES, brute_force_counts
from test_metrics import random_scene as matcher_scene
from test_postprocess import random_scene as nms_scene
from test_postprocess import reference_nms

RESULTS: dict[int, str] = {}
D = torch.float64


def record(number, title, ok, detail):
    RESULTS[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, RESULTS[number]


def test_criterion_01_parameter_budget():
    t0 = time.perf_counter()
    with torch.device("meta"):
        model = build_model(full_config())
    n = count_parameters(model)
    elapsed = time.perf_counter() - t0
    rel = abs(n - 50.9e6) / 50.9e6
    record(1, "parameter budget", rel <= 0.15 and elapsed < 10,
           f"{n / 1e6:.2f}M vs 50.9M ({rel:.1%} off, limit 15%), build {elapsed:.1f}s")


def test_criterion_02_flop_budget():
    t0 = time.perf_counter()
    with torch.device("meta"):
        model = build_model(full_config())
    flops = estimate_flops(model, 640)
    elapsed = time.perf_counter() - t0
    rel = abs(flops - 237e9) / 237e9
    record(2, "FLOP budget", rel <= 0.25 and elapsed < 10,
           f"{flops / 1e9:.1f} GFLOPs vs 237 ({rel:.1%} off, limit 25%), {elapsed:.1f}s")


def _gradient_instances():
    for seed in range(6):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(3, 4, generator=g, dtype=D)
        targets = torch.stack([smooth_labels(int(k), 4, 0.1) for k in torch.randint(0, 4, (3,), generator=g)])
        yield "focal", coordinate_errors(lambda xs: focal_class_loss(xs[0], targets, 0.25, 2.0)[0], logits)

        raw = torch.randn(3, 4, generator=g, dtype=D)
        box_t = torch.rand(3, 4, generator=g, dtype=D) * 0.8 + 0.1
        yield "box", coordinate_errors(
            lambda xs: box_loss(activate_boxes(xs[0][:, :, None, None])[:, :, 0, 0], box_t, 5.0), raw)

        obj = torch.randn(2, 3, 3, generator=g, dtype=D)
        indicator = (torch.rand(2, 3, 3, generator=g) > 0.7).to(D)
        yield "obj", coordinate_errors(lambda xs: objectness_loss(xs[0], indicator, 0.5), obj)

        bins = torch.randn(2, 4, 16, generator=g, dtype=D)
        values = torch.rand(2, 4, generator=g, dtype=D)
        yield "dfl", coordinate_errors(lambda xs: dfl_loss(xs[0], values), bins)

    # the composed objective over three head scales, DFL enabled
    cfg = toy_config(class_count=3, dfl_enabled=True)
    scales = [(8, 8, 8), (16, 4, 4), (32, 2, 2)]
    gts = [[GroundTruthObject(0, 0.3, 0.3, 0.1, 0.1), GroundTruthObject(2, 0.6, 0.7, 0.3, 0.2)],
           [GroundTruthObject(1, 0.5, 0.5, 0.6, 0.5)]]
    targets = assign_batch(gts, scales, 3, 0.1, D)
    ch = 8 + 4 * cfg.dfl_bins
    for seed in range(2):
        g = torch.Generator().manual_seed(100 + seed)
        raw = [torch.randn(2, ch, s, s, generator=g, dtype=D) for _, s, _ in scales]
        aux = [torch.randn(2, ch, s, s, generator=g, dtype=D) for _, s, _ in scales]
        yield "total", directional_errors(lambda xs: total_loss(xs[:3], xs[3:], targets, cfg).total, raw + aux,
                                          n_dirs=4, seed=seed)


def test_criterion_03_gradient_correctness():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    kinds = set()
    for kind, errors in _gradient_instances():
        worst = max(worst, max(errors))
        count += 1
        kinds.add(kind)
    elapsed = time.perf_counter() - t0
    ok = worst <= TOL and count >= 20 and {"focal", "box", "obj", "dfl"} <= kinds and elapsed < 120
    record(3, "gradient correctness", ok,
           f"{count} instances ({', '.join(sorted(kinds))}), max rel error {worst:.2e} (limit {TOL:g}), {elapsed:.1f}s")


def test_criterion_04_strip_equivalence():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = build_model(toy_config(class_count=3))
    # a few training steps' worth of batch-norm statistics so eval mode is not trivial
    model.train()
    with torch.no_grad():
        for _ in range(3):
            model(torch.rand(4, 3, 64, 64))
    stripped = strip_auxiliary(model)
    worst = 0.0
    for _ in range(10):
        x = torch.rand(2, 3, 64, 64)
        a, b = forward_infer(model, x), forward_infer(stripped, x)
        worst = max(worst, max(float((p - q).abs().max()) for p, q in zip(a, b)))
    elapsed = time.perf_counter() - t0
    record(4, "auxiliary strip equivalence", worst <= 1e-6 and elapsed < 60,
           f"max |diff| {worst:.2e} over 10 inputs (limit 1e-6), {elapsed:.1f}s")


def test_criterion_05_oracle_equivalence():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    nms_bad = 0
    for i in range(500):
        dets = nms_scene(rng, rng.randrange(0, 40), grid=16 if i % 2 else None)
        thresh = rng.choice([0.3, 0.45, 0.5, 0.7])
        nms_bad += nms(dets, thresh) != reference_nms(dets, thresh)
    match_bad = 0
    for _ in range(200):
        dets, gts = matcher_scene(rng, rng.randrange(0, 5), rng.randrange(0, 6))
        thresh = rng.choice([0.3, 0.5, 0.75])
        r = match_detections(dets, gts, thresh, 100)
        match_bad += (r.tp, r.fp, r.fn) != brute_force_counts(dets, gts, thresh, 100)
    ap_worst = 0.0
    for flags, n_gt, expected in AP_FIXTURES:
        scores = [1.0 - 0.1 * i for i in range(len(flags))]
        ap_worst = max(ap_worst, abs(average_precision(scores, flags, n_gt) - expected))
    elapsed = time.perf_counter() - t0
    ok = nms_bad == 0 and match_bad == 0 and ap_worst <= 1e-9 and len(AP_FIXTURES) == 5 and elapsed < 120
    record(5, "oracle equivalence", ok,
           f"NMS mismatches {nms_bad}/500, matcher mismatches {match_bad}/200, "
           f"AP max error {ap_worst:.1e} on {len(AP_FIXTURES)} staircases, {elapsed:.1f}s")


def test_criterion_06_metric_fixtures():
    f1 = f1_score(0.859, 0.598)
    v = iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3))
    ok = abs(f1 - 0.705) <= 5e-4 and abs(v - 1 / 7) <= 1e-12
    record(6, "metric fixtures", ok, f"F1(0.859, 0.598) = {f1:.5f} (0.705 +- 5e-4), IoU = {v!r} (1/7 +- 1e-12)")


def test_criterion_07_overfit(tmp_path, manifest):
    t0 = time.perf_counter()
    cfg = overfit_config(class_count=manifest.class_count)
    trainer = Trainer(cfg, manifest, tmp_path, eval_every=10**6)
    assert trainer.steps_per_epoch * cfg.epochs <= 500
    result = trainer.fit()
    report, _ = evaluate_model(trainer.model, manifest, "train", cfg)
    elapsed = time.perf_counter() - t0
    steps = result.state.step
    ok = report.map50 >= 0.9 and steps <= 500 and elapsed < 600
    record(7, "overfit smoke test", ok,
           f"train mAP@0.5 {report.map50:.4f} (>= 0.9) after {steps} steps on 8 images, {elapsed:.0f}s")


def test_criterion_08_label_smoothing():
    t = smooth_labels(0, 10, 0.1).to(D)
    expected = torch.tensor([0.91] + [0.01] * 9, dtype=D)
    dev = float((t - expected).abs().max())
    total = float(t.sum())
    ok = dev <= 1e-12 and abs(total - 1.0) <= 1e-12
    record(8, "label smoothing", ok, f"max |t - (0.91, 0.01 x 9)| {dev:.1e}, sum - 1 = {total - 1:.1e}")


def test_criterion_09_determinism(tmp_path, manifest):
    cfg = toy_config(class_count=3, batch_size=4, epochs=3)
    for name in ("a", "b"):
        torch.manual_seed(12345 if name == "a" else 999)  # global state must not leak in
        Trainer(cfg, manifest, tmp_path / name).fit()
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = len(a.splitlines()) - 1
    record(9, "determinism", a == b and rows == 3, f"metrics.csv identical: {a == b} ({rows} epochs, seed {cfg.seed})")


def test_criterion_10_schedule(tmp_path, manifest):
    cfg = toy_config(class_count=3, batch_size=4, epochs=5)
    full = full_config()
    assert (cfg.lr0, cfg.momentum, cfg.warmup_epochs, cfg.warmup_momentum) == \
        (full.lr0, full.momentum, full.warmup_epochs, full.warmup_momentum)
    trainer = Trainer(cfg, manifest, tmp_path)
    trainer.fit()
    rows = read_csv(tmp_path / "schedule.csv")
    lr = [float(r["lr"]) for r in rows]
    mom = [float(r["momentum"]) for r in rows]
    spe = trainer.steps_per_epoch
    end = round(3.0 * spe)
    first_full = next(i for i, v in enumerate(lr) if v >= 0.01)
    linear = all(math.isclose(lr[i], 0.01 * i / end, abs_tol=1e-15) and
                 math.isclose(mom[i], 0.8 + (0.937 - 0.8) * i / end, abs_tol=1e-15) for i in range(end + 1))
    ok = (lr[0] == 0.0 and mom[0] == 0.8 and lr[end] == pytest.approx(0.01, abs=1e-15)
          and mom[end] == pytest.approx(0.937, abs=1e-15) and first_full == end and linear
          and all(v == lr[end] for v in lr[end:]))
    record(10, "warmup schedule", ok,
           f"step 0: lr {lr[0]:g} momentum {mom[0]:g}; step {end} (epoch {end / spe:g}): lr {lr[end]:g} "
           f"momentum {mom[end]:g}; {len(rows)} logged steps")

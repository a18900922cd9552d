"""One test per acceptance criterion; the terminal summary prints a PASS/FAIL line for each.

Tolerances and runtime budgets are pinned as module constants.
"""
import json
import math
import time

import numpy as np
import pytest

from gradcheck import check_gradients
from spheregan.cli import main
from spheregan.data import SynthConfig, make_pairs, synth_generate
from spheregan.evaluation import evaluate_feedback, feedback_schedule, run_ablation
from spheregan.geometry import build_conv_grid, spherical_weights
from spheregan.losses import cc_loss, g_bce_loss, generator_loss, kl_loss, noisy_labels, smse_loss
from spheregan.metrics import metric_auc_judd, metric_cc, metric_kl, metric_nss
from spheregan.model import Generator, GeneratorConfig
from spheregan.ops import conv2d, sphere_conv2d
from spheregan.training import TrainConfig, load_checkpoint, train
from test_losses import LOSS_CASES
from test_metrics import brute_force_auc, random_fixations
from test_ops import GRAD_CASES, sphere_conv_ref

# criterion 1
LATTICE_TOL_PX = 1e-4
LONGITUDE_TOL_PX = 1e-12
BUDGET_1_S = 1.0
# criterion 2
EQUATOR_BAND = 4
PLANAR_TOL = 1e-3
BRUTE_TOL = 1e-4
BUDGET_2_S = 10.0
# criterion 3
EQUIVARIANCE_TOL = 1e-4
BUDGET_3_S = 30.0
# criterion 4 (the tolerances live in check_gradients: rtol 1e-2, atol 1e-4, h 1e-3, 200 coords)
BUDGET_4_S = 120.0
# criterion 5
KL_HAND, KL_TOL = 0.1308, 1e-3
NSS_HAND, NSS_TOL = 1.732, 1e-3
AUC_BRUTE_TOL = 1e-6
BUDGET_5_S = 30.0
# criterion 6
SUM_TOL = 1e-6
LABEL_DRAWS = 10_000
BUDGET_6_S = 60.0
# criterion 7
OVERFIT_STEPS = 500
OVERFIT_CC = 0.8
BUDGET_7_S = 15 * 60.0
# criterion 8
FEEDBACK_TRAIN_STEPS = 400
FEEDBACK_HEIGHT = 32
BUDGET_8_S = 10 * 60.0
# criterion 9
DETERMINISM_STEPS = 100
RESUME_FROM = 50
BUDGET_9_S = 5 * 60.0


def lattice_offsets():
    return np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)], dtype=float)


def test_criterion_1_geometry_oracle():
    start = time.perf_counter()
    h, w = 64, 128
    grid = build_conv_grid(h, w)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centre_exact = np.array_equal(grid.coords[:, :, 4, 0], rows) and np.array_equal(grid.coords[:, :, 4, 1], cols)
    off = grid.tap_offsets()
    longitude = float(np.abs(off - off[:, :1]).max())
    # the equator falls between rows 31 and 32 of a 64-row image
    equator_err = float(max(np.abs(off[r] - lattice_offsets()).max() for r in (h // 2 - 1, h // 2)))
    elapsed = time.perf_counter() - start
    print(f"centre exact={centre_exact} longitude spread={longitude:.2e} equator lattice error={equator_err:.2e}px "
          f"time={elapsed:.3f}s")
    assert centre_exact
    assert longitude <= LONGITUDE_TOL_PX
    assert elapsed < BUDGET_1_S
    assert equator_err <= LATTICE_TOL_PX, f"equator taps are {equator_err:.2e} px off the lattice"


def test_criterion_2_kernel_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    # brute-force summation on random small instances
    brute = 0.0
    for cin, cout, h in ((2, 3, 8), (1, 2, 4), (3, 1, 6)):
        x = rng.standard_normal((cin, h, 2 * h))
        wt, b = rng.standard_normal((cout, cin, 9)), rng.standard_normal(cout)
        grid = build_conv_grid(h, 2 * h)
        brute = max(brute, float(np.abs(sphere_conv2d(x, wt, b, grid).data - sphere_conv_ref(x, wt, b, grid)).max()))
    # equator band against a planar 3x3 convolution with the same weights; the outermost
    # columns are skipped because the planar conv zero-pads where the sphere wraps
    h, w = 64, 128
    x = rng.uniform(size=(3, h, w))
    wt = rng.standard_normal((4, 3, 9)) * math.sqrt(2 / 27)
    b = rng.standard_normal(4)
    sph = sphere_conv2d(x, wt, b, build_conv_grid(h, w)).data
    flat = conv2d(x, wt.reshape(4, 3, 3, 3), b).data
    band = slice(h // 2 - EQUATOR_BAND, h // 2 + EQUATOR_BAND)
    planar = float(np.abs(sph[:, band, 1:-1] - flat[:, band, 1:-1]).max())
    elapsed = time.perf_counter() - start
    print(f"brute-force max diff={brute:.2e} equator band max diff={planar:.2e} time={elapsed:.2f}s")
    assert brute <= BRUTE_TOL
    assert elapsed < BUDGET_2_S
    assert planar <= PLANAR_TOL, f"equator-band output differs from planar conv by {planar:.2e}"


def test_criterion_3_equivariance():
    start = time.perf_counter()
    gen = Generator(GeneratorConfig(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    frame = rng.uniform(size=(3, 64, 128)).astype(np.float32)
    sal = rng.uniform(size=(1, 64, 128)).astype(np.float32)
    base = gen(frame, sal, train=False).data
    worst = 0.0
    # three 2x pools: shifts must keep the coarsest grid aligned (multiples of 8 columns)
    for s in (8, 24, 64, 120):
        out = gen(np.roll(frame, s, axis=-1), np.roll(sal, s, axis=-1), train=False).data
        worst = max(worst, float(np.abs(out - np.roll(base, s, axis=-1)).max()))
    elapsed = time.perf_counter() - start
    print(f"max equivariance error={worst:.2e} time={elapsed:.2f}s")
    assert worst <= EQUIVARIANCE_TOL
    assert elapsed < BUDGET_3_S


def test_criterion_4_gradient_suite():
    start = time.perf_counter()
    failures = {}
    for name, (fn, inputs) in {**GRAD_CASES, **{f"loss:{k}": v for k, v in LOSS_CASES.items()}}.items():
        bad = check_gradients(fn, inputs)
        if bad:
            failures[name] = bad[:3]
    elapsed = time.perf_counter() - start
    print(f"checked {len(GRAD_CASES)} ops and {len(LOSS_CASES)} losses in {elapsed:.2f}s")
    assert not failures, failures
    assert elapsed < BUDGET_4_S


def test_criterion_5_metric_oracles():
    start = time.perf_counter()
    kl = metric_kl(np.array([0.5, 0.5]), np.array([0.75, 0.25]))
    nss = metric_nss(np.array([[1.0, 0.0], [0.0, 0.0]]), [(0, 0)])
    auc_const = metric_auc_judd(np.full((16, 32), 0.4), [(3, 4), (10, 20)])
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(16, 32))
    cc_ok = abs(metric_cc(a, a) - 1) < 1e-12 and abs(metric_cc(a, -a) + 1) < 1e-12
    auc_err = 0.0
    for seed in range(10):
        r = np.random.default_rng(100 + seed)
        pred = r.uniform(size=(16, 32))
        fix = random_fixations(r, 16, 32, 20)
        auc_err = max(auc_err, abs(metric_auc_judd(pred, fix) - brute_force_auc(pred, fix)))
    elapsed = time.perf_counter() - start
    print(f"kl={kl:.5f} nss={nss:.5f} auc(constant)={auc_const} auc brute diff={auc_err:.2e} time={elapsed:.2f}s")
    assert abs(kl - KL_HAND) <= KL_TOL
    assert abs(nss - NSS_HAND) <= NSS_TOL
    assert auc_const == 0.5
    assert cc_ok
    assert auc_err <= AUC_BRUTE_TOL
    assert elapsed < BUDGET_5_S


def test_criterion_6_loss_composition(tmp_path):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 1, 16, 32)), rng.uniform(size=(2, 1, 16, 32))
    d = rng.uniform(0.1, 0.9, 2)
    wmap = spherical_weights(16, 32)
    total, parts = generator_loss(x, y, d, wmap)
    independent = sum(float(f.data) for f in (cc_loss(x, y), kl_loss(x, y), smse_loss(x, y, wmap), g_bce_loss(d)))
    real, fake = noisy_labels(LABEL_DRAWS, np.random.default_rng(1))
    core = time.perf_counter() - start
    # toy-scale smoke run of the five-row ablation harness
    seqs = synth_generate(SynthConfig(num_videos=1, frames_per_video=7, height=32, seed=0))
    base = TrainConfig(height=32, width=64, gen_channels=(4, 4, 4, 4), disc_channels=(4, 4, 4, 4),
                       max_steps=1, batch_size=2)
    results, table = run_ablation(base, seqs, seqs, out_dir=tmp_path)
    print(f"total={float(total.data):.6f} independent sum={independent:.6f} core time={core:.2f}s")
    print(table)
    assert abs(float(total.data) - independent) <= SUM_TOL
    assert abs(parts.total - (parts.cc_loss + parts.kl_loss + parts.smse_loss + parts.g_bce_loss)) <= SUM_TOL
    assert real.min() >= 0.9 and real.max() <= 1.0
    assert fake.min() >= 0.0 and fake.max() <= 0.1
    assert len(results) == 5 and len(table.splitlines()) == 2 + 5
    assert core < BUDGET_6_S


def test_criterion_7_learning_sanity():
    start = time.perf_counter()
    seqs = synth_generate(SynthConfig(num_videos=1, frames_per_video=20, height=64, seed=7))
    state = train(TrainConfig(epochs=10**6, max_steps=OVERFIT_STEPS, seed=0), seqs)
    gen = state.generator
    ccs = [metric_cc(gen(p.frame, p.sal_prev, train=False).data, p.sal_target) for p in make_pairs(seqs[0], 5)]
    train_cc = float(np.mean(ccs))
    first, last = state.history[0]["total"], state.history[-1]["total"]
    elapsed = time.perf_counter() - start
    print(f"training CC={train_cc:.4f} L_G first={first:.4f} last={last:.4f} steps={state.step} time={elapsed:.1f}s")
    assert state.step == OVERFIT_STEPS
    assert train_cc >= OVERFIT_CC
    assert last < first
    assert elapsed <= BUDGET_7_S


def test_criterion_8_feedback_protocol(tmp_path, capsys):
    start = time.perf_counter()
    h = FEEDBACK_HEIGHT
    train_dir, test_dir = tmp_path / "train", tmp_path / "test"
    synth_generate(SynthConfig(num_videos=4, frames_per_video=20, height=h, seed=1), train_dir)
    test_seqs = synth_generate(SynthConfig(num_videos=2, frames_per_video=20, height=h, seed=2), test_dir)
    run = tmp_path / "run"
    assert main(["train", "--override", f"model.height={h}", "--override", f"model.width={2 * h}",
                 "--override", "train.epochs=1000000", "--override", f"train.max_steps={FEEDBACK_TRAIN_STEPS}",
                 "--data", str(train_dir), "--out", str(run)]) == 0
    ck = run / "checkpoints" / "last"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(test_dir), "--out", str(tmp_path / "e")]) == 0
    assert main(["eval-feedback", "--checkpoint", str(ck), "--data", str(test_dir), "--n", "1",
                 "--out", str(tmp_path / "f")]) == 0
    bit_equal = (tmp_path / "e" / "report.json").read_bytes() == (tmp_path / "f" / "report.json").read_bytes()

    gen = load_checkpoint(ck).generator
    counts_ok = True
    for n in range(1, 11):
        sched = feedback_schedule(20, n, 5)
        counts_ok &= sum(src == "gt" for _, (src, _) in sched) == math.ceil(15 / n)
    ccs = {}
    for n in (1, 5, 10):
        report = evaluate_feedback(gen, test_seqs, n)
        counts_ok &= n == 1 or report.meta["gt_reads"] == 2 * math.ceil(15 / n)
        ccs[n] = report.mean["cc"]
    assert json.loads((tmp_path / "e" / "report.json").read_text())["mean"]["cc"] == pytest.approx(ccs[1], abs=0)
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    print(f"n=1 bit-equal={bit_equal} gt counts ok={counts_ok} CC by N={ccs} time={elapsed:.1f}s")
    assert bit_equal
    assert counts_ok
    assert ccs[1] >= ccs[5] >= ccs[10]
    assert elapsed <= BUDGET_8_S


def test_criterion_9_determinism(tmp_path):
    start = time.perf_counter()
    seqs = synth_generate(SynthConfig(num_videos=2, frames_per_video=12, height=32, seed=5))
    cfg = TrainConfig(height=32, width=64, epochs=10**6, max_steps=DETERMINISM_STEPS, seed=11,
                      checkpoint_every=RESUME_FROM)
    a = train(cfg, seqs, out_dir=tmp_path / "a")
    b = train(cfg, seqs)
    same_step_100 = a.history[DETERMINISM_STEPS - 1] == b.history[DETERMINISM_STEPS - 1]
    resumed = load_checkpoint(tmp_path / "a" / "checkpoints" / f"step_{RESUME_FROM:06d}")
    resumed = train(cfg, seqs, state=resumed)
    logs_equal = resumed.history == a.history[RESUME_FROM:]
    params_equal = all(np.array_equal(a.generator.params[k].data, resumed.generator.params[k].data)
                       for k in a.generator.params)
    params_equal &= all(np.array_equal(a.discriminator.params[k].data, resumed.discriminator.params[k].data)
                        for k in a.discriminator.params)
    elapsed = time.perf_counter() - start
    print(f"step-{DETERMINISM_STEPS} record equal={same_step_100} resume logs equal={logs_equal} "
          f"params equal={params_equal} time={elapsed:.1f}s")
    assert a.history[DETERMINISM_STEPS - 1]["step"] == DETERMINISM_STEPS
    assert same_step_100
    assert logs_equal and params_equal
    assert elapsed <= BUDGET_9_S

"""Acceptance criteria, each checked at its stated tolerance and runtime bound.

Every test prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
terminal summary. Criteria 7 to 10 train desk models and carry the ``slow`` marker
(deselect with ``-m "not slow"``).
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch

from robust_reid.attacks import AttackSpec, attack
from robust_reid.balancing import (AugmentationGenerator, BalanceConfig, balance_inter_id,
                                   diversify_intra_id)
from robust_reid.cli import main
from robust_reid.dataset import SyntheticSpec, identity_stats, make_synthetic, split_query_gallery
from robust_reid.evaluation import FeatureBatch, average_precision, compute_map_cmc, evaluate, robust_eval
from robust_reid.fnes import FNESConfig, apply_fnes, soften_label
from robust_reid.losses import discriminator_loss, encoder_confusion_loss, triplet_hard
from robust_reid.meta import TrainConfig, fit, prepare_training_data, self_meta_objective
from robust_reid.model import ArchSpec, init_models

from conftest import ACCEPTANCE_LINES
from oracles import brute_map_cmc
from test_meta import meta_grad, meta_value, perceptron_problem


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------------


def test_c01_budget_invariant():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    models = [init_models(ArchSpec(num_classes=4), seed=s) for s in range(8)]
    worst_excess, out_of_range = -1.0, 0
    kinds, budgets = ("fna", "sma", "mifgsm"), (5, 8, 10)
    for i in range(1000):
        spec = AttackSpec(kinds[i % 3], budgets[(i // 3) % 3] / 255, int(rng.integers(1, 5)),
                          random_init=bool(rng.integers(2)))
        n = int(rng.integers(2, 5))
        x = torch.as_tensor(rng.random((n, 3, 32, 16)) ** float(rng.uniform(0.3, 3)),
                            dtype=torch.float32)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        x_adv, _ = attack(models[i % len(models)], x, labels, spec, rng)
        worst_excess = max(worst_excess, float((x_adv - x).abs().max()) - spec.epsilon)
        out_of_range += int(x_adv.min() < 0 or x_adv.max() > 1)
    dt = time.time() - t0
    ok = worst_excess <= 1e-6 and out_of_range == 0 and dt < 120
    report(1, "budget invariant", ok,
           f"1000 attacks, max(|x_adv-x| - eps) = {worst_excess:.2e}, "
           f"out of [0,1]: {out_of_range}, {dt:.1f}s")


# -- 2 ---------------------------------------------------------------------------


def test_c02_fnes_label_algebra():
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst_sum, worst_true, negative = 0.0, 0.0, 0
    for _ in range(10_000):
        k = int(rng.integers(2, 100))
        omega, lam1, lam2 = rng.uniform(0.01, 0.99, 3)
        ups = rng.uniform(1e-4, lam2 * 0.999)
        true = int(rng.integers(k))
        far = int((true + rng.integers(1, k)) % k)
        y = soften_label(true, far, k, omega, FNESConfig(lambda1=lam1, lambda2=lam2, upsilon=ups))
        worst_sum = max(worst_sum, abs(y.sum() - 1))
        worst_true = max(worst_true, abs(y[true] - (omega * lam1 + (1 - omega) * (lam2 - ups))))
        negative += int((y < 0).any())
    _, y4, _ = apply_fnes(np.zeros(2), np.zeros(2), 0, 3, 4, FNESConfig(), omega=0.5)
    worked = np.allclose(y4, [0.92, 0.025, 0.025, 0.03], atol=1e-12)
    dt = time.time() - t0
    ok = worst_sum <= 1e-9 and worst_true <= 1e-12 and negative == 0 and worked and dt < 10
    report(2, "FNES label algebra", ok,
           f"10000 draws, max|sum-1| = {worst_sum:.1e}, max true-mass error = {worst_true:.1e}, "
           f"negatives: {negative}, k=4 case {np.round(y4, 6).tolist()}, {dt:.1f}s")


# -- 3 ---------------------------------------------------------------------------


def test_c03_second_order_meta_gradient():
    t0 = time.time()
    params, tr, te = perceptron_problem()
    n_params = sum(v.numel() for v in params.values())
    alpha = 0.5
    g = meta_grad(params, tr, te, alpha, False)
    flat = torch.cat([v.reshape(-1) for v in params.values()])
    shapes = [(k, v.shape, v.numel()) for k, v in params.items()]

    def unflat(vec):
        out, i = {}, 0
        for k, s, n in shapes:
            out[k] = vec[i:i + n].reshape(s)
            i += n
        return out

    h = 1e-5
    fd = torch.stack([
        torch.tensor((meta_value(unflat(flat + h * e), tr, te, alpha)
                      - meta_value(unflat(flat - h * e), tr, te, alpha)) / (2 * h), dtype=flat.dtype)
        for e in torch.eye(len(flat), dtype=flat.dtype)])
    rel_fd = float((g - fd).abs().max() / fd.abs().max())
    fo = meta_grad(params, tr, te, alpha, True)
    rel_fo = float((g - fo).norm() / g.norm())

    th = {"w": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
    sq = lambda p: p["w"] ** 2  # noqa: E731
    toy = []
    for first in (False, True):
        obj, _, _ = self_meta_objective(th, sq, sq, 0.1, first)
        toy.append(float(torch.autograd.grad(obj, [th["w"]])[0]))
    dt = time.time() - t0
    ok = (n_params <= 200 and rel_fd < 1e-5 and rel_fo > 1e-3 and abs(toy[0] - 3.28) < 1e-12
          and abs(toy[1] - 3.6) < 1e-12 and dt < 60)
    report(3, "second-order meta gradient", ok,
           f"{n_params}-parameter perceptron, FD rel err {rel_fd:.1e}, first-order gap {rel_fo:.1e}, "
           f"toy {toy[0]:.4f} vs {toy[1]:.4f}, {dt:.1f}s")


# -- 4 ---------------------------------------------------------------------------


def test_c04_map_cmc_oracle():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst, done = 0.0, 0
    while done < 100:
        nq, ng, d = int(rng.integers(1, 21)), int(rng.integers(2, 51)), int(rng.integers(1, 5))
        n_ids = int(rng.integers(1, 8))
        qf, gf = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
        if rng.random() < 0.5:  # coarse grid: exercises distance ties
            qf, gf = np.round(qf), np.round(gf)
        qid, gid = rng.integers(0, n_ids, nq), rng.integers(-1, n_ids, ng)
        qc, gc = rng.integers(1, 4, nq), rng.integers(1, 4, ng)
        try:
            m, cmc = brute_map_cmc(qf.tolist(), qid.tolist(), qc.tolist(), gf.tolist(),
                                   gid.tolist(), gc.tolist())
        except ZeroDivisionError:
            continue
        r = compute_map_cmc(FeatureBatch(qf, qid, qc), FeatureBatch(gf, gid, gc))
        worst = max(worst, abs(r.map - m), float(np.abs(np.array(r.cmc) - cmc).max()))
        done += 1
    hand = average_precision([1, 0, 1, 0])
    dt = time.time() - t0
    ok = worst <= 1e-9 and abs(hand - 5 / 6) <= 1e-12 and dt < 30
    report(4, "mAP/CMC oracle", ok,
           f"100 instances, max deviation {worst:.1e}, rank-(1,3) AP = {hand:.6f}, {dt:.1f}s")


# -- 5 ---------------------------------------------------------------------------


def test_c05_balancing_postconditions():
    t0 = time.time()
    spec = SyntheticSpec(num_ids=20, imbalance={"kind": "long_tail", "max": 40, "min": 2},
                         camera_skew=0.7)
    ds = make_synthetic(spec, 0)
    cfg = BalanceConfig.default_for(ds, 0.5)
    gen = AugmentationGenerator(ds)
    rng = np.random.default_rng(0)
    inter = balance_inter_id(ds, cfg, gen, rng)
    min_count = min(identity_stats(inter).per_id_count.values())
    out = diversify_intra_id(inter, cfg, AugmentationGenerator(inter), rng)
    treated = out.meta["camera_treated"]
    mid, after = identity_stats(inter).dominant_camera, identity_stats(out).dominant_camera
    decreased = all(after[i][1] < mid[i][1] for i in treated)
    real_same = (np.array_equal(out.images(range(len(ds))), ds.images())
                 and all(a == b for a, b in zip(out.samples[:len(ds)], ds.samples))
                 and not out.pseudo_mask()[:len(ds)].any() and out.pseudo_mask()[len(ds):].all())
    dt = time.time() - t0
    ok = min_count == cfg.delta1 and len(treated) > 0 and decreased and real_same and dt < 30
    report(5, "balancing post-conditions", ok,
           f"delta1 = {cfg.delta1}, min count after inter-ID = {min_count}, "
           f"{len(treated)} camera-treated ids all decreased: {decreased}, "
           f"real samples unmodified: {real_same}, {dt:.1f}s")


# -- 6 ---------------------------------------------------------------------------


def test_c06_loss_identities():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        pc = torch.as_tensor(rng.uniform(1e-6, 1 - 1e-6, n))
        pa = torch.as_tensor(rng.uniform(1e-6, 1 - 1e-6, n))
        worst = max(worst, abs(float(encoder_confusion_loss(pc, pa) + discriminator_loss(pc, pa))))
    half = torch.full((4,), 0.5, dtype=torch.float64)
    ld, le = float(discriminator_loss(half, half)), float(encoder_confusion_loss(half, half))
    f = torch.tensor([[0.0], [1.0], [2.0], [1.5], [3.0]], dtype=torch.float64)
    c1 = float(triplet_hard(f, [0, 0, 0, 1, 1], 0.3, "none")[0])
    c2 = float(triplet_hard(torch.tensor([[0.0], [1.0], [2.0]], dtype=torch.float64), [0, 0, 1], 0.3,
                            "none")[0])
    c3 = float(triplet_hard(torch.zeros(4, 2, dtype=torch.float64), [0, 0, 1, 1], 0.3))
    dt = time.time() - t0
    ok = (worst <= 1e-12 and abs(ld - 2 * math.log(2)) < 1e-12 and abs(le + 2 * math.log(2)) < 1e-12
          and abs(c1 - 0.8) <= 1e-9 and abs(c2) <= 1e-9 and abs(c3 - 0.3) <= 1e-9 and dt < 10)
    report(6, "loss identities", ok,
           f"max|L_E + L_D| = {worst:.1e}, D=0.5: {ld:.5f} / {le:.5f}, "
           f"triplet cases ({c1:.9f}, {c2:.9f}, {c3:.9f}), {dt:.1f}s")


# -- 7 to 9: desk training runs ------------------------------------------------

DESK_SPEC = SyntheticSpec(num_ids=20, count=16, height=32, width=16, cameras=4)
EVAL_ATTACK = AttackSpec("fna", 8 / 255, 16)
SEEDS = (0, 1, 2)
# shared by every mode; see the README for why this differs from the full-scale schedule
DESK = dict(epochs=30, lr=1e-3, milestones=[21])


@pytest.fixture(scope="module")
def desk_split():
    train = make_synthetic(DESK_SPEC, 0)
    test = make_synthetic(SyntheticSpec(num_ids=20, count=16, id_offset=100, split="gallery"), 1)
    q, g = split_query_gallery(test, np.random.default_rng(0), 4)
    return train, q, g


_RUNS: dict = {}


def desk_run(desk_split, mode: str, seed: int, **over):
    key = (mode, seed, tuple(sorted(over.items())))
    if key not in _RUNS:
        train, q, g = desk_split
        cfg = TrainConfig(mode=mode, seed=seed, **{**DESK, **over})
        t0 = time.time()
        res = fit(prepare_training_data(train, cfg), cfg)
        clean, robust = evaluate(res.bundle, q, g), robust_eval(res.bundle, q, g, EVAL_ATTACK)
        _RUNS[key] = {"clean": clean.map, "robust": robust.map, "log": res.log,
                      "seconds": time.time() - t0}
    return _RUNS[key]


@pytest.mark.slow
def test_c07_attack_collapses_vanilla(desk_split):
    t0 = time.time()
    runs = [desk_run(desk_split, "vanilla", s) for s in SEEDS]
    clean = float(np.mean([r["clean"] for r in runs]))
    robust = float(np.mean([r["robust"] for r in runs]))
    first = np.mean([r["cls"] for r in runs[0]["log"] if r["epoch"] == 0])
    last = np.mean([r["cls"] for r in runs[0]["log"] if r["epoch"] == DESK["epochs"] - 1])
    dt = time.time() - t0
    ok = robust <= 0.5 * clean and last <= 0.5 * first and dt < 15 * 60
    report(7, "FNA collapses a vanilla model", ok,
           f"clean mAP {100 * clean:.2f}, FNA 8/255-16 mAP {100 * robust:.2f} "
           f"({100 * robust / clean:.1f}% of clean, threshold 50%), cls loss {first:.3f} -> {last:.3f}, "
           f"mean of seeds {SEEDS}, {dt:.0f}s")


@pytest.mark.slow
def test_c08_defense_improves_robustness(desk_split):
    t0 = time.time()
    res = {m: [desk_run(desk_split, m, s) for s in SEEDS] for m in ("vanilla", "metric-at", "full")}
    mean = {m: {k: float(np.mean([r[k] for r in rs])) for k in ("clean", "robust")}
            for m, rs in res.items()}
    v, a, f = mean["vanilla"], mean["metric-at"], mean["full"]
    gain, vs_at, clean_gap = f["robust"] - v["robust"], f["robust"] - a["robust"], v["clean"] - f["clean"]
    dt = time.time() - t0
    ok = gain >= 0.15 and vs_at >= -0.02 and clean_gap <= 0.15 and dt < 45 * 60
    report(8, "defense improves robustness", ok,
           f"robust mAP vanilla {100 * v['robust']:.2f} / metric-AT {100 * a['robust']:.2f} / "
           f"full {100 * f['robust']:.2f} (full - vanilla {100 * gain:+.2f}, need >= +15; "
           f"full - metric-AT {100 * vs_at:+.2f}, need >= -2); clean vanilla {100 * v['clean']:.2f}, "
           f"full {100 * f['clean']:.2f} (need within 15), {dt:.0f}s")


# camera-skewed, bimodal training identities; bias is probed on fresh images of the
# same identities (closed set), since per-identity bias concerns identities seen in training
BIAS_TRAIN = SyntheticSpec(num_ids=20, imbalance={"kind": "bimodal", "low": 4, "high": 24},
                           camera_skew=0.8)
BIAS_PROBE = SyntheticSpec(num_ids=20, count=8, split="gallery")


@pytest.mark.slow
def test_c09_bias_reduction():
    t0 = time.time()
    train = make_synthetic(BIAS_TRAIN, 0)
    q, g = split_query_gallery(make_synthetic(BIAS_PROBE, 7), np.random.default_rng(0), 3)
    std = {}
    for bal in (False, True):
        vals = []
        for s in SEEDS:
            cfg = TrainConfig(mode="full", seed=s, **{**DESK, "use_balance": bal})
            model = fit(prepare_training_data(train, cfg), cfg).bundle
            vals.append(evaluate(model, q, g).per_id_std)
        std[bal] = float(np.mean(vals))
    dt = time.time() - t0
    ok = std[True] <= std[False] and dt < 45 * 60
    report(9, "bias reduction", ok,
           f"per-ID AP std with balancing {100 * std[True]:.2f} vs without {100 * std[False]:.2f} "
           f"(mean of seeds {SEEDS}), {dt:.0f}s")


# -- 10 --------------------------------------------------------------------------


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.slow
def test_c10_determinism(tmp_path):
    t0 = time.time()
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_ids": 20, "count": 16}))
    assert main(["synth", str(spec), str(tmp_path / "data"), "--seed", "0"]) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"mode": "full", "epochs": 3, "seed": 4, "lr": 1e-3,
                               "batches_per_epoch": 3, "train_dir": str(tmp_path / "data")}))
    codes = [main(["train", str(cfg), "--out", str(tmp_path / n)]) for n in ("a", "b")]
    # replay from the resolved copy, interrupted after epoch 1 and resumed
    resolved = tmp_path / "a" / "resolved_config.json"
    codes.append(main(["train", str(resolved), "--out", str(tmp_path / "c"), "--epochs", "1"]))
    codes.append(main(["train", str(resolved), "--out", str(tmp_path / "c"),
                       "--resume", str(tmp_path / "c" / "last.ckpt")]))
    a, b, c = (_sha(tmp_path / n / "last.ckpt") for n in ("a", "b", "c"))
    logs_equal = (tmp_path / "a" / "train_log.csv").read_bytes() == \
        (tmp_path / "c" / "train_log.csv").read_bytes()
    dt = time.time() - t0
    ok = codes == [0, 0, 0, 0] and a == b == c and logs_equal and dt < 600
    report(10, "determinism", ok,
           f"two runs {'identical' if a == b else 'differ'} (sha256 {a[:12]}), "
           f"resume at epoch 1 {'identical' if a == c else 'differs'}, logs equal: {logs_equal}, "
           f"{dt:.0f}s")

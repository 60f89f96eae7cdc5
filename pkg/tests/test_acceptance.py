"""Acceptance checks, one test per numbered criterion.

Every test collects its sub-checks into a failure list, prints exactly
one "criterion N: PASS/FAIL" line on the real terminal (bypassing
pytest capture), and then asserts. Targets, tolerances and runtime
budgets are stated inline next to each check. Criterion 6 trains two
models for 25 epochs and dominates the suite's wall clock.
"""

from __future__ import annotations

import filecmp
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import scipy.stats

import fabricnet.checkpoint as C
import fabricnet.data as D
import fabricnet.ensembles as E
import fabricnet.gradcheck as G
import fabricnet.metrics as M
import fabricnet.model as model
import fabricnet.training as R
from fabricnet.errors import CheckpointCrcError

CLI = [sys.executable, "-m", "fabricnet.cli"]


def run_cli(*args):
    return subprocess.run(CLI + [str(a) for a in args], capture_output=True, text=True)


def expect(failures, cond, msg):
    if not cond:
        failures.append(msg)


def verdict(capsys, number, summary, failures):
    ok = not failures
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {summary}")
    assert ok, f"criterion {number}: " + "; ".join(failures)


# ------------------------------------------------------------------ 1


def test_criterion_1_parameter_reproduction(capsys):
    failures = []
    t0 = time.perf_counter()
    proc = run_cli("flops")
    elapsed = time.perf_counter() - t0
    expect(failures, proc.returncode == 0, f"flops exited {proc.returncode}: {proc.stderr}")
    report = json.loads(proc.stdout) if proc.returncode == 0 else {}
    trainable = report.get("trainable", 0)
    per_sub = report.get("submodel_trainable", 0)
    expect(failures, abs(trainable - 4.8e6) <= 0.10 * 4.8e6,
           f"trainable {trainable} outside 4.8M +-10%")
    expect(failures, abs(per_sub - 9e3) <= 0.15 * 9e3,
           f"per-submodel {per_sub} outside 9k +-15%")
    expect(failures, elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s")
    verdict(capsys, 1,
            f"default build reports {trainable} trainable params "
            f"(target 4.8M +-10%), {per_sub} per submodel (target 9k +-15%), "
            f"{elapsed:.2f}s", failures)


# ------------------------------------------------------------------ 2


def test_criterion_2_flop_reproduction(capsys):
    failures = []
    t0 = time.perf_counter()
    proc = run_cli("flops")
    elapsed = time.perf_counter() - t0
    expect(failures, proc.returncode == 0, f"flops exited {proc.returncode}: {proc.stderr}")
    report = json.loads(proc.stdout) if proc.returncode == 0 else {}
    flops = report.get("flops", 0)
    expect(failures, abs(flops - 640e6) <= 0.15 * 640e6,
           f"flops {flops} outside 640M +-15%")
    expect(failures, elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s")
    verdict(capsys, 2,
            f"default build reports {flops} forward FLOPs "
            f"(target 640M +-15%), {elapsed:.2f}s", failures)


# ------------------------------------------------------------------ 3


def test_criterion_3_head_reduction(capsys):
    failures = []
    t0 = time.perf_counter()
    acct = model.fabricnet_accounting(model.assemble_fabricnet(50))
    reference = model.count_params(model.assemble_xception_reference(1000))["trainable"]
    elapsed = time.perf_counter() - t0
    ratio = acct["head_trainable"] / reference
    expect(failures, ratio <= 0.20,
           f"head/{reference} reference ratio {ratio:.4f} exceeds 0.20")
    expect(failures, elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s")
    verdict(capsys, 3,
            f"head {acct['head_trainable']} params is {100 * ratio:.1f}% of the "
            f"{reference}-param full reference (limit 20%), {elapsed:.2f}s", failures)


# ------------------------------------------------------------------ 4


def test_criterion_4_gradient_suite(capsys):
    failures = []
    bounds = {"64": 1e-6, "32": 1e-3}
    worst = {}
    t0 = time.perf_counter()
    for dtype, bound in bounds.items():
        reports = G.run_all(dtype=dtype, seed=0)
        names = {r["name"] for r in reports}
        expect(failures, "model_end_to_end" in names, f"{dtype}-bit run skipped the model check")
        expect(failures, len(reports) >= 20, f"{dtype}-bit run covered only {len(reports)} checks")
        bad = [r["name"] for r in reports if not r["ok"] or r["max_rel_err"] > bound]
        expect(failures, not bad, f"{dtype}-bit failures above {bound}: {bad}")
        worst[dtype] = max(r["max_rel_err"] for r in reports)
    elapsed = time.perf_counter() - t0
    expect(failures, elapsed < 120.0, f"took {elapsed:.1f}s, budget 120s")
    verdict(capsys, 4,
            f"all ops plus end to end model: max rel err {worst.get('64', 1):.1e} "
            f"(64-bit, bound 1e-6) and {worst.get('32', 1):.1e} (32-bit, bound 1e-3), "
            f"{elapsed:.1f}s", failures)


# ------------------------------------------------------------------ 5


def test_criterion_5_metric_oracles(capsys):
    failures = []
    t0 = time.perf_counter()

    worst_gap = 0.0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        targets = rng.integers(0, 2, size=1000).astype(np.uint8)
        if targets.min() == targets.max():
            targets[0] ^= 1
        lift = rng.uniform(0.05, 0.6)
        scores = np.clip(rng.uniform(0.0, 1.0, size=1000) + lift * targets, 0.0, 1.0)
        approx = M.auc_200(scores, targets)
        ranks = scipy.stats.rankdata(scores)
        npos = int(targets.sum())
        nneg = targets.size - npos
        exact = (ranks[targets == 1].sum() - npos * (npos + 1) / 2) / (npos * nneg)
        worst_gap = max(worst_gap, abs(approx - exact))
    expect(failures, worst_gap <= 0.01,
           f"200-threshold AUC drifts {worst_gap:.4f} from the rank oracle")

    for i in range(25):
        rng = np.random.default_rng(2000 + i)
        pred = rng.integers(0, 2, size=(17, 9)).astype(np.uint8)
        targ = rng.integers(0, 2, size=(17, 9)).astype(np.uint8)
        tp = int(((pred == 1) & (targ == 1)).sum())
        fp = int(((pred == 1) & (targ == 0)).sum())
        fn = int(((pred == 0) & (targ == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        got = M.micro_precision_recall_f1(pred, targ)
        expect(failures, got["precision"] == precision, f"precision mismatch on instance {i}")
        expect(failures, got["recall"] == recall, f"recall mismatch on instance {i}")
        expect(failures, got["f1"] == f1, f"f1 mismatch on instance {i}")

        rows = sum(bool((pred[r] == targ[r]).all()) for r in range(pred.shape[0]))
        expect(failures, M.exact_match_accuracy(pred, targ) == rows / pred.shape[0],
               f"exact-match mismatch on instance {i}")

    elapsed = time.perf_counter() - t0
    expect(failures, elapsed < 30.0, f"took {elapsed:.1f}s, budget 30s")
    verdict(capsys, 5,
            f"AUC within {worst_gap:.4f} of the rank oracle over 50x1000 pairs "
            f"(limit 0.01); micro P/R/F1 and exact-match equal their formula "
            f"oracles on 25 instances, {elapsed:.1f}s", failures)


# ------------------------------------------------------------------ 6


def test_criterion_6_learnability_advantage(capsys):
    failures = []
    t0 = time.perf_counter()
    x, y = D.gen_synthetic(10, 1000, max_labels_per_sample=3, seed=42, size=64, noise=0.05)
    fold = R.kfold_split(1000, k=4, seed=42)[0]
    xtr, ytr = x[fold["train"]], y[fold["train"]]
    xval, yval = x[fold["val"]], y[fold["val"]]
    cfg = R.TrainConfig(batch_size=32, max_epochs=25, lr=1e-3, seed=42, augment=False)

    fab = model.assemble_fabricnet(10, middle_count=1, input_shape=(64, 64, 3))
    model.init_params(fab, 42)
    fab_out = R.train(fab, ((xtr, ytr), (xval, yval)), cfg)
    fab_report = R.evaluate(fab, xval, yval)

    mono = model.assemble_monolithic(10, middle_count=1, input_shape=(64, 64, 3))
    model.init_params(mono, 42)
    mono_out = R.train(mono, ((xtr, ytr), (xval, yval)), cfg)

    elapsed = time.perf_counter() - t0
    expect(failures, fab_out["best_epoch"] <= 50,
           f"best epoch {fab_out['best_epoch']} beyond the 50-epoch budget")
    expect(failures, fab_out["best_val_f1"] >= 0.90,
           f"ensemble val F1 {fab_out['best_val_f1']:.4f} below 0.90")
    expect(failures, fab_report["accuracy"] >= 0.75,
           f"ensemble exact-match {fab_report['accuracy']:.4f} below 0.75")
    expect(failures, mono_out["best_val_f1"] < fab_out["best_val_f1"],
           f"monolithic F1 {mono_out['best_val_f1']:.4f} not below "
           f"ensemble F1 {fab_out['best_val_f1']:.4f}")
    expect(failures, elapsed <= 1800.0, f"took {elapsed / 60:.1f} min, budget 30 min")
    verdict(capsys, 6,
            f"per-class ensemble val F1 {fab_out['best_val_f1']:.4f} (floor 0.90), "
            f"exact-match {fab_report['accuracy']:.4f} (floor 0.75), monolithic "
            f"F1 {mono_out['best_val_f1']:.4f} strictly lower, "
            f"{elapsed / 60:.1f} min", failures)


# ------------------------------------------------------------------ 7


def test_criterion_7_ensemble_equivalence(capsys):
    failures = []
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)

    for i in range(100):
        d = int(rng.integers(2, 6))
        widths = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 5)))]
        mats = [rng.uniform(-1, 1, size=(d, m)) for m in widths]
        subs = [lambda x, w=w: np.asarray(x) @ w for w in mats]
        head_vec = rng.uniform(-1, 1, size=sum(widths))
        final = lambda z: np.asarray(z) @ head_vec
        x = rng.uniform(-1, 1, size=d)
        got = E.stacked_ensemble(subs, final)(x)
        manual = final(np.concatenate([s(x) for s in subs], axis=-1))
        expect(failures, np.array_equal(got, manual), f"stacked mismatch on instance {i}")

    for i in range(100):
        k = int(rng.integers(1, 6))
        c = int(rng.integers(2, 7))
        mats = [rng.uniform(-1, 1, size=(3, c)) for _ in range(k)]
        subs = [lambda x, w=w: np.tanh(np.asarray(x) @ w) for w in mats]
        weights = rng.uniform(0.1, 2.0, size=k)
        x = rng.uniform(-1, 1, size=3)
        got = E.weight_average_ensemble(subs, weights)(x)
        manual = int(np.argmax(weights @ np.stack([s(x) for s in subs])))
        expect(failures, got == manual, f"weight-average mismatch on instance {i}")

    monotone_ok = True
    for i in range(100):
        c = int(rng.integers(2, 9))
        scores = rng.uniform(-2, 2, size=c)
        subs = [lambda x, s=s: s for s in scores]
        got = E.class_based_ensemble(subs)(None)
        manual = int(np.argmax(scores))
        expect(failures, got == manual, f"class-based mismatch on instance {i}")
        shifted = [lambda x, s=s: 3.0 * s + 1.0 for s in scores]
        if E.class_based_ensemble(shifted)(None) != got:
            monotone_ok = False
    expect(failures, monotone_ok, "argmax not invariant under a monotone score transform")

    for i in range(100):
        d = int(rng.integers(2, 5))
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 5))
        hmat = rng.uniform(-1, 1, size=(d, d))
        head = lambda x: np.tanh(np.asarray(x) @ hmat)
        vecs = [rng.uniform(-1, 1, size=d) for _ in range(c)]
        subs = [lambda f, v=v: (1.0 / (1.0 + np.exp(-(np.asarray(f) @ v))))[..., None]
                for v in vecs]
        x = rng.uniform(-1, 1, size=(n, d))
        binary, scores = E.fabricnet_predict(head, subs, x, threshold=0.5)
        feats = head(x)
        manual = np.stack([s(feats)[..., 0] for s in subs], axis=-1)
        expect(failures, np.array_equal(scores, manual), f"shared-head scores differ on {i}")
        expect(failures, np.array_equal(binary, (manual >= 0.5).astype(np.uint8)),
               f"shared-head thresholding differs on {i}")
        got_cls = E.fabricnet_classify(head, subs, x)
        expect(failures, np.array_equal(got_cls, np.argmax(manual, axis=-1)),
               f"shared-head argmax differs on {i}")

    elapsed = time.perf_counter() - t0
    expect(failures, elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s")
    verdict(capsys, 7,
            f"stacked, weight-average, class-based and shared-head rules match "
            f"brute-force compositions on 100 instances each; argmax survives "
            f"monotone transforms, {elapsed:.1f}s", failures)


# ------------------------------------------------------------------ 8


def test_criterion_8_protocol_fidelity(capsys, tmp_path):
    failures = []
    t0 = time.perf_counter()

    n = 100
    rounds = R.kfold_split(n, k=4, seed=3)
    expect(failures, len(rounds) == 4, f"expected 4 rounds, got {len(rounds)}")
    for r, parts in enumerate(rounds):
        sizes = (len(parts["train"]), len(parts["val"]), len(parts["test"]))
        expect(failures, sizes == (50, 25, 25), f"round {r} split {sizes} is not 50/25/25")
        pooled = np.concatenate([parts["train"], parts["val"], parts["test"]])
        expect(failures, np.array_equal(np.sort(pooled), np.arange(n)),
               f"round {r} partitions overlap or drop indices")

    synth = run_cli("synth", "--classes", 3, "--samples", 24, "--seed", 0,
                    "--size", 32, "--out", tmp_path / "data")
    expect(failures, synth.returncode == 0, f"synth exited {synth.returncode}: {synth.stderr}")
    manifest = tmp_path / "data" / "manifest.csv"
    for out in ("one", "two"):
        proc = run_cli(
            "train", "--data", manifest, "--classes", 3, "--middle", 0,
            "--epochs", 2, "--batch", 8, "--lr", "1e-3", "--folds", 4,
            "--runs", 1, "--seed", 0, "--image-size", 32, "--no-augment",
            "--out", tmp_path / out,
        )
        expect(failures, proc.returncode == 0, f"train exited {proc.returncode}: {proc.stderr}")
    repeated = ["model.fabnet", "model_run0.fabnet", "history_run0.csv"]
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "one", tmp_path / "two", repeated, shallow=False)
    expect(failures, mismatch == [] and errors == [],
           f"repeat run differs: mismatch {mismatch}, unreadable {errors}")

    elapsed = time.perf_counter() - t0
    expect(failures, elapsed < 300.0, f"took {elapsed:.1f}s, budget 300s")
    verdict(capsys, 8,
            f"4-fold rounds are disjoint 50/25/25 covers; two seeded runs agree "
            f"byte for byte on history and checkpoints, {elapsed:.1f}s", failures)


# ------------------------------------------------------------------ 9


def test_criterion_9_persistence(capsys, tmp_path):
    failures = []
    t0 = time.perf_counter()
    net = model.assemble_fabricnet(2, middle_count=0, input_shape=(32, 32, 3))
    model.init_params(net, 11)
    batch = np.random.default_rng(5).uniform(0, 1, size=(4, 32, 32, 3)).astype(np.float32)
    before = net.predict(batch)

    path = tmp_path / "model.fabnet"
    C.save_checkpoint(path, net, meta={"tag": "acceptance"})
    loaded = C.load_checkpoint(path)
    state = net.state_dict()
    expect(failures, set(loaded.state) == set(state), "round trip changed the key set")
    stale = [k for k in state
             if not (np.array_equal(state[k], loaded.state[k], equal_nan=True)
                     and state[k].dtype == loaded.state[k].dtype)]
    expect(failures, not stale, f"arrays not bitwise identical after round trip: {stale[:3]}")

    twin = model.assemble_fabricnet(2, middle_count=0, input_shape=(32, 32, 3))
    twin.load_state(loaded.state)
    after = twin.predict(batch)
    expect(failures, np.array_equal(before, after),
           "reloaded model drifts from pre-save outputs")

    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    corrupt = tmp_path / "corrupt.fabnet"
    corrupt.write_bytes(bytes(blob))
    try:
        C.load_checkpoint(corrupt)
        expect(failures, False, "corrupted payload loaded without a CRC failure")
    except CheckpointCrcError:
        pass

    elapsed = time.perf_counter() - t0
    expect(failures, elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s")
    verdict(capsys, 9,
            f"checkpoint round-trips bitwise, reloaded outputs match exactly, "
            f"flipped payload byte raises a CRC error, {elapsed:.1f}s", failures)

"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the pytest terminal summary and
on stdout with ``-s``) before asserting. Desk-scale training runs go through
the harness commands, the same path the CLI uses.
"""

import csv
import json
import time

import numpy as np
import pytest

from iclgd import analysis as An
from iclgd import baselines as B
from iclgd import training as T
from iclgd.attention import (AttentionWeights, KernelSpec, ModelKind, build_token_matrix,
                             construct_kernel_gd_weights, construct_linear_gd_weights,
                             construct_softmax_weights, forward_predict)
from iclgd.harness import commands
from iclgd.harness.config import parse_config
from iclgd.numerics import make_rng
from iclgd.taskgen import TaskConfig, generate_batch, generate_dataset

from conftest import finite_difference_check, record_criterion


def read_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_criterion_01_construction_equivalence():
    t0 = time.perf_counter()
    rng = make_rng(101)
    worst = {"linear": 0.0, "rbf": 0.0, "softmax": 0.0}
    for d in (2, 3, 5):
        for n in (10, 100):
            batch = generate_batch(TaskConfig(d, 5, n), make_rng(d, n), 1000)
            X = build_token_matrix(batch)
            eta = rng.uniform(0.5, 200.0)
            sigma2 = 10 ** rng.uniform(-1.5, 1.0)
            c_sigma, c_eta = rng.uniform(0.5, 60.0), rng.uniform(0.5, 20.0)
            p = forward_predict(ModelKind.linear(), construct_linear_gd_weights(eta, n, d, 5), X, 5)
            worst["linear"] = max(worst["linear"], np.max(np.abs(p - B.gd_step_predict(batch, eta))))
            k = KernelSpec.rbf(sigma2)
            p = forward_predict(ModelKind.with_kernel(k), construct_kernel_gd_weights(eta, n, d, 5), X, 5)
            worst["rbf"] = max(worst["rbf"], np.max(np.abs(p - B.kernel_gd_predict(batch, eta, k))))
            p = forward_predict(ModelKind.softmax(), construct_softmax_weights(c_sigma, c_eta, d, 5), X, 5)
            q = B.adaptive_predict(batch, c_eta, c_sigma, include_self=True)
            worst["softmax"] = max(worst["softmax"], np.max(np.abs(p - q)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-12 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert record_criterion(1, "construction = closed form", ok, detail), detail


def test_criterion_02_adaptive_chain():
    t0 = time.perf_counter()
    batch = generate_dataset(TaskConfig(3, 5, 100), 202, 10_000)
    worst = 0.0
    for c_eta, c_sigma in ((0.5, 0.3), (3.0, 8.0), (7.15, 31.07), (20.0, 100.0)):
        s2 = B.sigma2_from_c_sigma(c_sigma, 3, 5)
        eta = B.adaptive_lr(batch, c_eta, s2)
        a = B.adaptive_predict(batch, c_eta, c_sigma, include_self=False)
        b = B.kernel_gd_predict(batch, eta, KernelSpec.rbf(s2))
        worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    detail = f"max deviation {worst:.1e} over 10^4 contexts, {elapsed:.1f}s"
    assert record_criterion(2, "adaptive = kernel GD with eta(X)", ok, detail), detail


def test_criterion_03_gradients():
    t0 = time.perf_counter()
    kinds = [("linear", ModelKind.linear(), False), ("rbf", ModelKind.with_kernel(KernelSpec.rbf(0.7)), False),
             ("dot", ModelKind.with_kernel(KernelSpec.dot()), False), ("softmax", ModelKind.softmax(), False),
             ("frozen", ModelKind.softmax_frozen(1.5), False), ("softmax+mlp", ModelKind.softmax(), True)]
    worst = {}
    for name, kind, mlp in kinds:
        worst[name] = -np.inf
        for i in range(20):
            rng = make_rng(303, i)
            d, C = int(rng.integers(2, 4)), int(rng.integers(2, 4))
            batch = generate_batch(TaskConfig(d, C, 2 * C), rng, 3)
            params = T.init_weights(kind, d, C, 0.5, rng, with_mlp=mlp)
            if mlp:
                params["b1"] = rng.standard_normal(params["b1"].shape) * 0.5
                params["b2"] = rng.standard_normal(params["b2"].shape) * 0.5
            names = T.trainable_names(kind, params)
            worst[name] = max(worst[name], finite_difference_check(kind, params, batch, names))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 0 for v in worst.values()) and elapsed < 60
    detail = f"20 instances x {len(kinds)} kinds within rtol 1e-4, {elapsed:.1f}s" if ok else str(worst)
    assert record_criterion(3, "analytic = finite-difference gradients", ok, detail), detail


def test_criterion_04_extraction_round_trip():
    t0 = time.perf_counter()
    rng = make_rng(404)
    exact = True
    shift_err = 0.0
    for c_sigma, c_eta in [(7.0, 3.0), (31.07, 7.15), (-4.0, -2.5), (0.3, 12.0)]:
        for d, C in ((2, 5), (3, 5), (10, 3)):
            w = construct_softmax_weights(c_sigma, c_eta, d, C)
            ex = An.extract_constants(w, d, C)
            exact &= (ex.c_sigma_eff, ex.c_eta_eff, ex.residual) == (c_sigma, c_eta, 0.0)
            # shift every label-block column by its own constant
            WO = w.W_O.copy()
            WO[d:, d:] += rng.uniform(-50, 50, size=C)[None, :]
            shifted = An.extract_constants(AttentionWeights(w.W_Q, w.W_K, w.W_V, WO), d, C)
            shift_err = max(shift_err, abs(shifted.c_eta_eff - c_eta))
    elapsed = time.perf_counter() - t0
    ok = exact and shift_err <= 1e-12 and elapsed < 1
    detail = f"exact={exact}, shift deviation {shift_err:.1e}, {elapsed:.2f}s"
    assert record_criterion(4, "extraction round trip", ok, detail), detail


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def test_criterion_05_linear_matches_gd_step(workdir):
    t0 = time.perf_counter()
    cfg = parse_config({
        "seed": 5, "task": {"d": 3, "C": 5, "n": 100}, "model": {"tag": "linear"},
        "train": {"learning_rate": 1e-3, "batch_size": 256, "iterations": 20_000, "eval_every": 2_000},
        "eval": {"n_eval": 512, "n_align": 100, "n_scatter": 512, "n_fit": 2000},
        "baseline": {"variant": "gd_step"},
    })
    commands.cmd_train(cfg, workdir / "linear")
    summary = commands.cmd_align(cfg, workdir / "linear_align", str(workdir / "linear"))
    scatter = read_rows(workdir / "linear_align" / "scatter_loss.csv")
    a = np.array([float(r["metric_a"]) for r in scatter])
    b = np.array([float(r["metric_b"]) for r in scatter])
    corr = float(np.corrcoef(a, b)[0, 1])
    final = summary["final"]
    elapsed = time.perf_counter() - t0
    ok = (final["cos_sim"] >= 0.95 and final["preds_diff"] <= 0.1 and corr >= 0.95
          and elapsed < 30 * 60)
    detail = (f"cos_sim {final['cos_sim']:.4f}, preds_diff {final['preds_diff']:.4f}, "
              f"loss corr {corr:.4f}, eta {summary['baseline']['eta']:.1f}, {elapsed / 60:.1f} min")
    assert record_criterion(5, "linear SA vs gd_step", ok, detail), detail


def test_criterion_06_softmax_matches_adaptive(workdir):
    t0 = time.perf_counter()
    cfg = parse_config({
        "seed": 6, "task": {"d": 3, "C": 5, "n": 100}, "model": {"tag": "softmax"},
        "train": {"learning_rate": 3e-3, "batch_size": 256, "iterations": 30_000, "eval_every": 3_000},
        "eval": {"n_eval": 512, "n_align": 100, "n_scatter": 512, "n_fit": 2000},
        "baseline": {"variant": "adaptive"},
    })
    commands.cmd_train(cfg, workdir / "softmax")
    summary = commands.cmd_align(cfg, workdir / "softmax_align", str(workdir / "softmax"))
    ex = commands.cmd_extract(cfg, workdir / "softmax_extract", str(workdir / "softmax"))
    model_loss = float(read_rows(workdir / "softmax" / "trace.csv")[-1]["eval_loss"])
    ev = commands.eval_contexts(cfg, cfg.eval.n_eval)
    include_self = summary["baseline"]["include_self"]
    p = B.adaptive_predict(ev, ex["c_eta_eff"], ex["c_sigma_eff"], include_self)
    extracted_loss = float(np.mean(T.ce_loss(p, ev.y_query)))
    rel = abs(extracted_loss - model_loss) / model_loss
    preds_diff = summary["final"]["preds_diff"]
    elapsed = time.perf_counter() - t0
    ok = preds_diff <= 0.15 and rel <= 0.10 and elapsed < 4 * 3600
    detail = (f"preds_diff {preds_diff:.4f}, extracted (c_sigma {ex['c_sigma_eff']:.2f}, "
              f"c_eta {ex['c_eta_eff']:.2f}) loss {extracted_loss:.4f} vs model {model_loss:.4f} "
              f"(rel {rel:.3f}), {elapsed / 60:.1f} min")
    assert record_criterion(6, "softmax SA vs adaptive kernel GD", ok, detail), detail


def test_criterion_07_model_ordering(workdir):
    t0 = time.perf_counter()
    cfg = parse_config({"seed": 7, "task": {"d": 2, "C": 5, "n": 100},
                        "compare": {"models": ["kernel_gd"], "lengths": [100],
                                    "n_eval": 1000, "n_fit": 1000}})
    rows = commands.cmd_compare(cfg, workdir / "compare")["rows"]
    by = {r["model"]: r for r in rows}
    elapsed = time.perf_counter() - t0
    ok = (by["adaptive"]["loss"] <= by["kernel_gd"]["loss"] <= by["gd_step"]["loss"]
          and by["kernel_gd"]["accuracy"] >= by["gd_step"]["accuracy"] and elapsed < 600)
    detail = ", ".join(f"{m} loss {by[m]['loss']:.4f} acc {by[m]['accuracy']:.3f}"
                       for m in ("adaptive", "kernel_gd", "gd_step")) + f", {elapsed:.0f}s"
    assert record_criterion(7, "adaptive <= kernel GD <= GD", ok, detail), detail


def test_criterion_08_dense_sparse(workdir):
    t0 = time.perf_counter()
    cfg = parse_config({"seed": 8, "task": {"d": 2, "C": 5, "n": 100},
                        "gridsearch": {"variant": "dense_sparse", "n_contexts": 10_000}})
    s = commands.cmd_gridsearch(cfg, workdir / "dense_sparse")
    elapsed = time.perf_counter() - t0
    ok = (s["eta_dense"] < s["eta_sparse"] and s["mean_eta_dense"] < s["mean_eta_sparse"]
          and s["loss_sparse"] < s["loss_dense"] and elapsed < 600)
    detail = (f"eta* {s['eta_dense']:.1f} < {s['eta_sparse']:.1f}, mean eta(X) "
              f"{s['mean_eta_dense']:.1f} < {s['mean_eta_sparse']:.1f}, loss sparse "
              f"{s['loss_sparse']:.3f} < dense {s['loss_dense']:.3f}, {s['n_kept']} contexts, {elapsed:.0f}s")
    assert record_criterion(8, "dense/sparse adaptive rate", ok, detail), detail


def test_criterion_09_variability(workdir):
    t0 = time.perf_counter()
    ratios = {}
    for d in (2, 10):
        cfg = parse_config({"seed": 9, "task": {"d": d, "C": 5, "n": 100},
                            "gridsearch": {"variant": "variability", "n_contexts": 100,
                                           "sigma2_grid": {"min": 1e-3, "max": 1e3, "count": 25}}})
        commands.cmd_gridsearch(cfg, workdir / f"variability_{d}")
        rows = read_rows(workdir / f"variability_{d}" / "variability.csv")
        ratios[d] = np.array([float(r["ratio"]) for r in rows])
    elapsed = time.perf_counter() - t0
    ok = all(np.all(np.diff(r) < 0) and r[-1] < 1e-3 for r in ratios.values()) and elapsed < 60
    detail = ", ".join(f"d={d}: {r[0]:.3g} -> {r[-1]:.2g}" for d, r in ratios.items()) + f", {elapsed:.1f}s"
    assert record_criterion(9, "variability decreases with width", ok, detail), detail


def test_criterion_10_transience_smoke(workdir):
    t0 = time.perf_counter()
    cfg = parse_config({"seed": 10, "task": {"d": 3, "C": 5, "n": 30}, "model": {"tag": "softmax"},
                        "train": {"iterations": 1500, "eval_every": 250, "batch_size": 64,
                                  "learning_rate": 3e-3},
                        "transience": {"m": 2, "n_eval": 512}})
    a = commands.cmd_transience(cfg, workdir / "transience_a")
    commands.cmd_transience(cfg, workdir / "transience_b")
    same = all((workdir / "transience_a" / f).read_bytes() == (workdir / "transience_b" / f).read_bytes()
               for f in ("transience_icl.csv", "transience_icl_iwl.csv", "checkpoint.json"))
    elapsed = time.perf_counter() - t0
    ok = a["icl_iwl_accuracy"] > a["icl_accuracy"] and same and elapsed < 15 * 60
    detail = (f"ICL+IWL acc {a['icl_iwl_accuracy']:.3f} > ICL acc {a['icl_accuracy']:.3f}, "
              f"deterministic={same}, {elapsed:.0f}s")
    assert record_criterion(10, "transience smoke", ok, detail), detail


def test_criterion_11_chance_anchors():
    t0 = time.perf_counter()
    task = TaskConfig(3, 5, 100)
    ev = generate_dataset(task, 1111, 512)
    sd = np.sqrt(0.2 * 0.8 / 512)
    kinds = [("linear", ModelKind.linear(), False), ("rbf", ModelKind.with_kernel(KernelSpec.rbf(1.0)), False),
             ("softmax", ModelKind.softmax(), False), ("frozen", ModelKind.softmax_frozen(np.sqrt(8)), False),
             ("softmax+mlp", ModelKind.softmax(), True)]
    worst_loss, worst_acc, ok = 0.0, 0.0, True
    for name, kind, mlp in kinds:
        state = T.new_state(kind, task, T.TrainConfig(seed=11), with_mlp=mlp)
        loss, acc = T.evaluate(kind, state.params, ev)
        worst_loss = max(worst_loss, abs(loss - np.log(5)))
        worst_acc = max(worst_acc, abs(acc - 0.2) / sd)
        ok &= abs(loss - np.log(5)) <= 0.02 and abs(acc - 0.2) <= 3 * sd
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5
    detail = f"max |loss - ln 5| {worst_loss:.1e}, max |acc - 1/5| {worst_acc:.2f} sd, {elapsed:.2f}s"
    assert record_criterion(11, "untrained models at chance", ok, detail), detail

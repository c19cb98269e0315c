"""Experiment commands. Each takes a parsed ExperimentConfig and an output
directory, stages its artifacts on a Run and finalizes it, and returns a
small summary dict.
"""

import glob
import os
from dataclasses import asdict, replace

import numpy as np

from .. import __version__, analysis, taskgen
from ..attention import AttentionWeights, MlpWeights, checkpoint_to_dict, load_checkpoint
from ..baselines import BaselinePredictor
from ..numerics import make_rng
from ..training import TrainingDiverged, new_state, train
from .config import ConfigError, default_axes, parse_axes
from .io import Run, atomic_write
from .plot import render_csv

# dataset stream ids, kept apart from the training streams (seed, 0) / (seed, 1)
GEN, EVAL, FIT, PAIRS, FIXED_SETS, IWL_EVAL = 100, 101, 102, 104, 105, 106

TRACE_COLUMNS = ["step", "eval_loss", "eval_accuracy"]
EXTRACT_COLUMNS = ["c_sigma_eff", "c_eta_eff"]


def eval_contexts(cfg, count, task=None):
    return taskgen.generate_dataset(task or cfg.task, cfg.seed, count, stream=EVAL)


def fit_contexts(cfg, count, task=None):
    return taskgen.generate_dataset(task or cfg.task, cfg.seed, count, stream=FIT)


# -- gen -----------------------------------------------------------------------------

def cmd_gen(cfg, out, count=None):
    count = cfg.gen.count if count is None else count
    if count < 1:
        raise ConfigError("gen: count must be >= 1")
    run = Run(out, "gen", cfg, __version__)
    batch = taskgen.generate_dataset(cfg.task, cfg.seed, count, stream=GEN)
    run.add_text("dataset.json", taskgen.dumps_dataset(cfg.task, cfg.seed, batch) + "\n")
    run.finalize()
    return {"d": cfg.task.d, "C": cfg.task.C, "n": cfg.task.n, "count": count, "seed": cfg.seed}


# -- train ---------------------------------------------------------------------------

def _ckpt_name(step):
    return f"checkpoints/step_{step:08d}.json"


def _stage_checkpoint(run, rel, kind, params, task, step, seed):
    w = AttentionWeights.from_params(params)
    mlp = MlpWeights.from_params(params) if "W1" in params else None
    run.add_json(rel, checkpoint_to_dict(kind, w, task.d, task.C, step, seed, mlp))


def _params_from_checkpoint(ck):
    params = ck["weights"].params()
    if ck["mlp"] is not None:
        params.update(ck["mlp"].params())
    return {k: np.array(v, dtype=float) for k, v in params.items()}


def _run_training(cfg, run, kind, eval_sets, sampler=None, with_mlp=False, init=None):
    """Train, staging trace rows and checkpoints; on divergence the partial
    trace and last good weights are still written before re-raising."""
    rows = []
    state = new_state(kind, cfg.task, cfg.train, with_mlp)
    if init is not None:
        ck = load_checkpoint(init)
        if ck["kind"] != kind or (ck["d"], ck["C"]) != (cfg.task.d, cfg.task.C):
            raise ConfigError(f"{init}: checkpoint does not match the configured model/task")
        params = _params_from_checkpoint(ck)
        if set(params) != set(state.params):
            raise ConfigError(f"{init}: checkpoint parameters do not match the model")
        state.params = params
        state.step = int(ck["step"])

    def on_eval(st, row):
        rows.append(dict(row))
        _stage_checkpoint(run, _ckpt_name(st.step), kind, st.params, cfg.task, st.step, cfg.seed)

    try:
        result = train(kind, cfg.task, cfg.train, eval_sets, sampler=sampler, with_mlp=with_mlp,
                       on_eval=on_eval, state=state)
    except TrainingDiverged as err:
        if err.last_good is not None:
            _stage_checkpoint(run, "last_good.json", kind, err.last_good, cfg.task,
                              err.step - 1, cfg.seed)
        _stage_trace(run, rows, eval_sets, kind)
        run.finalize()
        raise
    _stage_checkpoint(run, "checkpoint.json", kind, result.state.params, cfg.task,
                      result.state.step, cfg.seed)
    _stage_trace(run, rows, eval_sets, kind)
    return result, rows


def _stage_trace(run, rows, eval_sets, kind):
    names = list(eval_sets) if isinstance(eval_sets, dict) else ["eval"]
    if len(names) == 1:
        cols = ["step", f"{names[0]}_loss", f"{names[0]}_accuracy"]
        if kind.is_softmax:
            cols += EXTRACT_COLUMNS
        run.add_csv("trace.csv", rows, cols)
    else:
        for name in names:
            run.add_csv(f"transience_{name}.csv",
                        [{"step": r["step"], "loss": r[f"{name}_loss"],
                          "accuracy": r[f"{name}_accuracy"]} for r in rows],
                        ["step", "loss", "accuracy"])
    # wall-clock time is kept apart so the trace bytes stay reproducible
    run.add_csv("timing.csv", rows, ["step", "wall_ms"])


def cmd_train(cfg, out, init=None):
    run = Run(out, "train", cfg, __version__)
    ev = eval_contexts(cfg, cfg.eval.n_eval)
    result, rows = _run_training(cfg, run, cfg.model, ev, init=init)
    run.add_json("config.json", cfg.raw)
    run.finalize()
    last = rows[-1] if rows else {}
    return {"kind": cfg.model.tag, "steps": result.state.step,
            "final_loss": last.get("eval_loss"), "final_accuracy": last.get("eval_accuracy")}


# -- checkpoint discovery --------------------------------------------------------------

def checkpoint_paths(path):
    """Sorted checkpoint files for a run directory, or the single file given."""
    if path is None:
        raise ConfigError("a checkpoint path or run directory is required")
    if os.path.isdir(path):
        found = sorted(glob.glob(os.path.join(path, "checkpoints", "step_*.json")))
        if not found:
            final = os.path.join(path, "checkpoint.json")
            if not os.path.exists(final):
                raise FileNotFoundError(f"no checkpoints found in {path}")
            found = [final]
        return found
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return [path]


def _check_task(cfg, ck, path):
    if (ck["d"], ck["C"]) != (cfg.task.d, cfg.task.C):
        raise ConfigError(f"{path}: checkpoint has d={ck['d']}, C={ck['C']} but the task has "
                          f"d={cfg.task.d}, C={cfg.task.C}")


# -- align -----------------------------------------------------------------------------

def fit_configured_baseline(cfg, comparand_kind=None, task=None):
    """Baseline from config: fixed params if given, otherwise grid-fitted."""
    b = cfg.baseline
    include_self = b.include_self
    if include_self is None:
        include_self = bool(comparand_kind is not None and comparand_kind.is_softmax)
    extra = {"include_self": include_self} if b.variant == "adaptive" else {}
    if b.params is not None:
        try:
            return BaselinePredictor(b.variant, **b.params, **extra), None
        except (TypeError, ValueError) as err:
            raise ConfigError(f"baseline.params: {err}") from err
    task = task or cfg.task
    axes = b.axes(task.d)
    return analysis.fit_baseline(b.variant, axes, fit_contexts(cfg, cfg.eval.n_fit, task),
                                 include_self)


def cmd_align(cfg, out, checkpoint):
    paths = checkpoint_paths(checkpoint)
    cks = [(p, load_checkpoint(p)) for p in paths]
    for p, ck in cks:
        _check_task(cfg, ck, p)
    kind = cks[-1][1]["kind"]
    run = Run(out, "align", cfg, __version__)
    baseline, fit = fit_configured_baseline(cfg, kind)
    ev = eval_contexts(cfg, max(cfg.eval.n_align, cfg.eval.n_scatter))
    rows = []
    for p, ck in cks:
        pm = analysis.model_predictor(ck["kind"], ck["weights"], ck["mlp"])
        rep = analysis.alignment(pm, baseline, ev[:cfg.eval.n_align])
        rows.append({"step": ck["step"], **rep.as_row()})
    run.add_csv("alignment.csv", rows, ["step", "preds_diff", "cos_sim", "model_diff"])

    final = cks[-1][1]
    pm = analysis.model_predictor(final["kind"], final["weights"], final["mlp"])
    scatter = ev[:cfg.eval.n_scatter]
    ma, mb = analysis.per_context(pm, scatter), analysis.per_context(baseline, scatter)
    for metric in ("loss", "entropy", "p_correct"):
        a, b = getattr(ma, metric), getattr(mb, metric)
        run.add_csv(f"scatter_{metric}.csv",
                    [{"metric_a": float(x), "metric_b": float(y)} for x, y in zip(a, b)],
                    ["metric_a", "metric_b"])
    summary = {"baseline": baseline.to_dict(), "final": rows[-1],
               "fit_loss": None if fit is None else fit.best_loss,
               "loss_correlation": float(np.corrcoef(ma.loss, mb.loss)[0, 1])}
    run.add_json("align.json", summary)
    run.finalize()
    return summary


# -- gridsearch --------------------------------------------------------------------------

def cmd_gridsearch(cfg, out):
    g = cfg.gridsearch
    run = Run(out, "gridsearch", cfg, __version__)
    if g.variant == "dense_sparse":
        summary = _dense_sparse(cfg, run)
    elif g.variant == "variability":
        summary = _variability(cfg, run)
    else:
        axes = parse_axes(g.grid, "gridsearch.grid") if g.grid else default_axes(g.variant, cfg.task.d)
        res = analysis.grid_search(g.variant, axes, fit_contexts(cfg, g.n_contexts), g.include_self)
        run.add_csv("surface.csv", res.rows(), list(res.names) + ["loss"])
        summary = {"variant": g.variant, "best": res.best, "best_loss": res.best_loss}
        run.add_json("best.json", summary)
    run.finalize()
    return summary


def _best_sigma2(cfg, contexts):
    res = analysis.grid_search("kernel_gd", default_axes("kernel_gd", cfg.task.d), contexts)
    return res.best["sigma2"]


def _dense_sparse(cfg, run):
    g = cfg.gridsearch
    dense, sparse = taskgen.generate_dense_sparse_pair(
        cfg.task, make_rng(cfg.seed, PAIRS), g.n_contexts, g.mean_threshold, g.K, g.near_threshold)
    sigma2 = g.sigma2 if g.sigma2 is not None else _best_sigma2(cfg, fit_contexts(cfg, g.n_contexts))
    fit = analysis.dense_sparse_eta_fit(dense, sparse, sigma2)
    run.add_csv("dense_sparse.csv",
                [{"eta": float(e), "loss_dense": float(a), "loss_sparse": float(b),
                  "loss_joint": float(c)}
                 for e, a, b, c in zip(fit.eta_values, fit.curve_dense, fit.curve_sparse,
                                       fit.curve_joint)],
                ["eta", "loss_dense", "loss_sparse", "loss_joint"])
    summary = {k: v for k, v in asdict(fit).items() if not isinstance(v, np.ndarray)}
    summary["n_kept"] = len(dense)
    run.add_json("dense_sparse.json", summary)
    return summary


def _variability(cfg, run):
    g = cfg.gridsearch
    grid = g.sigma2_grid or {"min": 1e-2, "max": 1e2, "count": 41}
    axis = parse_axes({"sigma2": grid}, "gridsearch")["sigma2"]
    table = analysis.adaptive_variability(eval_contexts(cfg, g.n_contexts), axis.values())
    rows = [{"sigma2": float(s), "ratio": float(r)} for s, r in table]
    run.add_csv("variability.csv", rows, ["sigma2", "ratio"])
    return {"d": cfg.task.d, "rows": len(rows), "ratio_first": rows[0]["ratio"],
            "ratio_last": rows[-1]["ratio"]}


# -- extract -----------------------------------------------------------------------------

def cmd_extract(cfg, out, checkpoint):
    paths = checkpoint_paths(checkpoint)
    run = Run(out, "extract", cfg, __version__)
    rows = []
    for p in paths:
        ck = load_checkpoint(p)
        ex = analysis.extract_constants(ck["weights"], ck["d"], ck["C"])
        rows.append({"step": ck["step"], "c_sigma_eff": ex.c_sigma_eff, "c_eta_eff": ex.c_eta_eff,
                     "residual": ex.residual,
                     "strategy": analysis.classify_strategy(ck["weights"], ck["d"], ck["C"])})
    run.add_csv("extract.csv", rows, ["step", "c_sigma_eff", "c_eta_eff", "residual", "strategy"])
    run.add_json("extract.json", rows[-1])
    run.finalize()
    return rows[-1]


# -- compare -----------------------------------------------------------------------------

def _accuracy(p, y):
    return float(np.mean(np.argmax(p, axis=1) == y))


def _mean_loss(p, y):
    return float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))


def cmd_compare(cfg, out):
    c = cfg.compare
    trained = {}
    for name in c.models:
        if name == "kernel_gd":
            continue
        path = c.checkpoints.get(name)
        if path is None:
            raise FileNotFoundError(f"compare: no checkpoint configured for model {name!r}")
        if not os.path.exists(path):
            raise FileNotFoundError(f"compare: checkpoint for {name!r} not found: {path}")
        ck = load_checkpoint(path)
        _check_task(cfg, ck, path)
        trained[name] = ck
    run = Run(out, "compare", cfg, __version__)
    rows, fits = [], []
    for n in sorted(int(v) for v in c.lengths):
        task = replace(cfg.task, n=n)
        ev = eval_contexts(cfg, c.n_eval, task)
        fit = fit_contexts(cfg, c.n_fit, task)
        y = np.asarray(ev.y_query)
        preds = {}
        for name in c.models:
            if name == "kernel_gd":
                pred, res = analysis.fit_baseline("kernel_gd", default_axes("kernel_gd", task.d), fit)
                fits.append({"n": n, "model": name, **res.best})
                preds[name] = pred(ev)
            else:
                ck = trained[name]
                preds[name] = analysis.model_predictor(ck["kind"], ck["weights"], ck["mlp"])(ev)
        for variant in ("gd_step", "adaptive"):
            pred, res = analysis.fit_baseline(variant, default_axes(variant, task.d), fit)
            fits.append({"n": n, "model": variant, **res.best})
            preds[variant] = pred(ev)
        for name, p in preds.items():
            rows.append({"model": name, "n": n, "loss": _mean_loss(p, y), "accuracy": _accuracy(p, y)})
    run.add_csv("compare.csv", rows, ["model", "n", "loss", "accuracy"])
    run.add_json("fits.json", fits)
    run.finalize()
    return {"rows": rows}


# -- transience --------------------------------------------------------------------------

def cmd_transience(cfg, out):
    t = cfg.transience
    if cfg.train.batch_size % t.m:
        raise ConfigError(f"transience: batch_size {cfg.train.batch_size} not divisible by m={t.m}")
    sets = taskgen.sample_class_vector_sets(cfg.task, make_rng(cfg.seed, FIXED_SETS), t.m)
    n_iwl = max(t.m, t.n_eval - t.n_eval % t.m)
    eval_sets = {
        "icl": eval_contexts(cfg, t.n_eval),
        "icl_iwl": taskgen.generate_transience_batch(cfg.task, sets, make_rng(cfg.seed, IWL_EVAL),
                                                     n_iwl),
    }

    def sampler(rng, size):
        return taskgen.generate_transience_batch(cfg.task, sets, rng, size)

    run = Run(out, "transience", cfg, __version__)
    run.add_json("class_vector_sets.json", sets.tolist())
    result, rows = _run_training(cfg, run, cfg.model, eval_sets, sampler=sampler, with_mlp=True)
    run.finalize()
    last = rows[-1] if rows else {}
    return {"m": t.m, "steps": result.state.step,
            "icl_accuracy": last.get("icl_accuracy"), "icl_iwl_accuracy": last.get("icl_iwl_accuracy")}


# -- plot ----------------------------------------------------------------------------------

def cmd_plot(paths, out, kind="auto"):
    """Render each CSV to ``<out>/<stem>.svg``; plots are written directly
    (atomically) and carry no manifest."""
    if not paths:
        raise ConfigError("plot: no CSV files given")
    svgs = [(p, render_csv(p, kind)) for p in paths]
    written = []
    for p, svg in svgs:
        target = os.path.join(out, os.path.splitext(os.path.basename(p))[0] + ".svg")
        atomic_write(target, svg)
        written.append(target)
    return {"written": written}

"""Comparing trained attention against closed-form predictors.

A *predictor* here is any callable mapping a ContextBatch to a (B, C) array
of class probabilities: fitted ``BaselinePredictor`` objects and
``model_predictor`` closures both qualify.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import build_token_matrix, forward_predict
from .baselines import (BaselinePredictor, adaptive_lr, adaptive_weights, c_sigma_from_sigma2, class_sums,
                        query_dots)
from .numerics import NumericalError
from .taskgen import ContextBatch, as_batch


class AnalysisError(ValueError):
    pass


def model_predictor(kind, w, mlp=None):
    def predict(batch):
        return forward_predict(kind, w, build_token_matrix(batch), batch.C, mlp)
    return predict


def _batched(predictor, batch):
    return np.asarray(predictor(batch), dtype=float)


def _guarded(predictor, batch):
    """Predictions with NaN rows for contexts whose evaluation fails numerically."""
    with np.errstate(all="ignore"):
        try:
            return _batched(predictor, batch)
        except (FloatingPointError, NumericalError):
            pass
        out = np.full((len(batch), batch.C), np.nan)
        for i in range(len(batch)):
            try:
                out[i] = _batched(predictor, batch[i:i + 1])[0]
            except (FloatingPointError, NumericalError):
                pass
        return out


# -- sensitivities and alignment ------------------------------------------------

def sensitivity(predictor, context, j=None, h=1e-4):
    """Central-difference gradient of predicted probabilities w.r.t. x_query.

    Returns (B, C, d) for a batch, or (C, d) for one context; with ``j`` only
    class ``j`` is returned. The query is perturbed off the sphere (no
    renormalization).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    batch, single = as_batch(context)
    B, d = batch.x_query.shape
    out = np.empty((B, batch.C, d))
    for k in range(d):
        step = np.zeros(d)
        step[k] = h
        plus = ContextBatch(batch.class_vectors, batch.xs, batch.labels,
                            batch.x_query + step, batch.y_query)
        minus = ContextBatch(batch.class_vectors, batch.xs, batch.labels,
                             batch.x_query - step, batch.y_query)
        out[:, :, k] = (_guarded(predictor, plus) - _guarded(predictor, minus)) / (2 * h)
    if j is not None:
        out = out[:, j]
    return out[0] if single else out


def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.sum(a * b, axis=-1) / (na * nb)
    cos = np.clip(cos, -1.0, 1.0)
    cos = np.where((na == 0) | (nb == 0), 0.0, cos)
    # identical vectors (including both zero) are perfectly aligned
    return np.where(np.all(a == b, axis=-1), 1.0, cos)


@dataclass
class AlignmentReport:
    preds_diff: float
    cos_sim: float
    model_diff: float
    n_contexts: int
    n_excluded: int = 0

    def as_row(self):
        return {"preds_diff": self.preds_diff, "cos_sim": self.cos_sim,
                "model_diff": self.model_diff}


def alignment(predictor_a, predictor_b, contexts, h=1e-4):
    """Prediction difference, sensitivity cosine and sensitivity difference.

    Contexts whose sensitivities are non-finite (saturated attention) are
    excluded from the sensitivity statistics and counted in ``n_excluded``.
    """
    batch, _ = as_batch(contexts)
    if len(batch) == 0:
        raise AnalysisError("alignment needs at least one context")
    pa = _guarded(predictor_a, batch)
    pb = _guarded(predictor_b, batch)
    sa = sensitivity(predictor_a, batch, h=h)
    sb = sensitivity(predictor_b, batch, h=h)
    ok = (np.all(np.isfinite(sa), axis=(1, 2)) & np.all(np.isfinite(sb), axis=(1, 2))
          & np.all(np.isfinite(pa), axis=1) & np.all(np.isfinite(pb), axis=1))
    if not np.any(ok):
        raise AnalysisError("all contexts excluded as numerically unstable")
    preds_diff = float(np.mean(np.linalg.norm(pa[ok] - pb[ok], axis=1)))
    cos_sim = float(np.mean(_cosine(sa[ok], sb[ok])))
    model_diff = float(np.mean(np.linalg.norm(sa[ok] - sb[ok], axis=2).mean(axis=1)))
    return AlignmentReport(preds_diff, cos_sim, model_diff, int(ok.sum()), int((~ok).sum()))


@dataclass
class PerContextMetrics:
    """Column arrays, one entry per context."""

    loss: np.ndarray
    entropy: np.ndarray
    p_correct: np.ndarray

    def __len__(self):
        return len(self.loss)

    def __getitem__(self, i):
        return PerContextMetrics(self.loss[i], self.entropy[i], self.p_correct[i])


def per_context(predictor, contexts):
    batch, _ = as_batch(contexts)
    p = _batched(predictor, batch)
    pc = p[np.arange(len(batch)), batch.y_query]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = np.clip(-plogp.sum(axis=1), 0.0, None)
    loss = -np.log(np.maximum(pc, 1e-300))
    return PerContextMetrics(loss, entropy, pc)


# -- grid search ---------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    min: float
    max: float
    count: int
    log: bool = True

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError("grid axis needs min < max")
        if self.count < 2:
            raise ValueError("grid axis needs count >= 2")
        if self.log and self.min <= 0:
            raise ValueError("log axis needs positive bounds")

    def values(self):
        if self.log:
            return np.logspace(np.log10(self.min), np.log10(self.max), self.count)
        return np.linspace(self.min, self.max, self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: dict  # parameter name -> Axis, in surface order
    n_contexts: int = 10_000


VARIANT_PARAMS = {
    "gd_step": ("eta",),
    "kernel_gd": ("eta", "sigma2"),
    "adaptive": ("c_eta", "c_sigma"),
}

# search ranges used for the full-scale fits
REFERENCE_GRIDS = {
    "gd_step": {"eta": Axis(1.0, 10 ** 2.5, 100)},
    "kernel_gd": {"eta": Axis(1.0, 1e3, 100), "sigma2": Axis(1e-3, 1e2, 100)},
}
REFERENCE_ADAPTIVE_RANGES = {
    2: {"c_eta": Axis(0.1, 1e2, 100), "c_sigma": Axis(1.0, 10 ** 3.5, 100)},
    3: {"c_eta": Axis(0.1, 1e2, 100), "c_sigma": Axis(0.1, 1e2, 100)},
    5: {"c_eta": Axis(0.1, 1e2, 100), "c_sigma": Axis(0.1, 1e2, 100)},
    10: {"c_eta": Axis(10.0, 1e4, 100), "c_sigma": Axis(1e-3, 10.0, 100)},
}


def _mean_ce(scale, S, y):
    """Mean CE of softmax(scale * S) for every scale: (E,) from (E,), (B, C), (B,)."""
    logits = scale[:, None, None] * S[None]
    m = logits.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=2))
    picked = logits[:, np.arange(len(y)), y]
    return np.mean(lse - picked, axis=1)


def loss_surface(variant, axes, contexts, include_self=False):
    """Mean CE loss at every grid point, shaped by the axis order.

    Query dot products are computed once per context and reused.
    """
    batch, _ = as_batch(contexts)
    names = VARIANT_PARAMS[variant]
    if set(axes) != set(names):
        raise ValueError(f"{variant} grid needs axes {names}")
    vals = {k: np.asarray(axes[k].values() if hasattr(axes[k], "values") else axes[k], dtype=float)
            for k in names}
    y = np.asarray(batch.y_query)
    n = batch.n
    dots = query_dots(batch)
    if variant == "gd_step":
        return _mean_ce(vals["eta"], class_sums(batch, dots) / n, y)
    if variant == "kernel_gd":
        surf = np.empty((len(vals["eta"]), len(vals["sigma2"])))
        for j, s2 in enumerate(vals["sigma2"]):
            S = class_sums(batch, np.exp((dots - 1.0) / s2)) / n
            surf[:, j] = _mean_ce(vals["eta"], S, y)
        return surf
    surf = np.empty((len(vals["c_eta"]), len(vals["c_sigma"])))
    for j, cs in enumerate(vals["c_sigma"]):
        S = class_sums(batch, adaptive_weights(batch, cs, include_self))
        surf[:, j] = _mean_ce(vals["c_eta"], S, y)
    return surf


@dataclass
class GridResult:
    variant: str
    best: dict
    best_loss: float
    names: tuple
    values: dict
    surface: np.ndarray

    def rows(self):
        grids = np.meshgrid(*(self.values[k] for k in self.names), indexing="ij")
        cols = [g.ravel() for g in grids] + [self.surface.ravel()]
        return [dict(zip(self.names + ("loss",), map(float, r))) for r in zip(*cols)]


def grid_search(variant, spec, contexts, include_self=False):
    """Exhaustive grid search minimizing mean CE; ties go to the smallest
    parameter values (lexicographic in axis order)."""
    axes = spec.axes if isinstance(spec, GridSpec) else spec
    names = VARIANT_PARAMS[variant]
    surf = loss_surface(variant, axes, contexts, include_self)
    values = {k: np.asarray(axes[k].values() if hasattr(axes[k], "values") else axes[k], dtype=float)
              for k in names}
    idx = np.unravel_index(int(np.nanargmin(surf)), surf.shape)
    best = {k: float(values[k][i]) for k, i in zip(names, idx)}
    return GridResult(variant, best, float(surf[idx]), names, values, surf)


# -- effective constants -----------------------------------------------------------

@dataclass
class ExtractedConstants:
    c_sigma_eff: float
    c_eta_eff: float
    residual: float


def label_block(w, d):
    """Label-to-label block of W_O W_V (transpose of the forward map's block).

    Adding a constant to any column of this block leaves predictions unchanged.
    """
    return w.vo()[d:, d:].T


def _exact_mean(v):
    # constant vectors return their value exactly, not a rounded sum / len
    return float(v[0]) if np.all(v == v[0]) else float(np.mean(v))


def extract_constants(w, d, C):
    """Read (c_sigma, c_eta) off attention weights shaped like the softmax
    construction.

    c_sigma is the mean diagonal of the input block of W_Q^T W_K. For c_eta,
    each column of the label block is shifted so its off-diagonal entries
    average to zero, and the shifted diagonal is averaged.
    """
    if w.dim != d + C:
        raise ValueError("weights do not match d + C")
    qk = w.qk()
    vo = w.vo()
    c_sigma = _exact_mean(np.diag(qk)[:d])
    Y = label_block(w, d)
    off = (Y.sum(axis=0) - np.diag(Y)) / (C - 1)
    c_eta = _exact_mean(np.diag(Y) - off)
    outside = (np.sum(qk ** 2) - np.sum(qk[:d, :d] ** 2)
               + np.sum(vo ** 2) - np.sum(vo[d:, d:] ** 2))
    return ExtractedConstants(c_sigma, c_eta, float(np.sqrt(max(outside, 0.0))))


def classify_strategy(w, d, C):
    ex = extract_constants(w, d, C)
    if ex.c_sigma_eff > 0 and ex.c_eta_eff > 0:
        return "selection"
    if ex.c_sigma_eff < 0 and ex.c_eta_eff < 0:
        return "elimination"
    return "indeterminate"


# -- adaptive learning rate diagnostics --------------------------------------------

def neighbor_mass(contexts, sigma2):
    """sum_i e^{x_i.x_q / s2} / e^{1/s2} per context."""
    batch, _ = as_batch(contexts)
    return np.sum(np.exp((query_dots(batch) - 1.0) / sigma2), axis=1)


def adaptive_variability(contexts, sigma2_grid):
    """(s2, std/mean of neighbor mass over contexts) rows."""
    out = []
    for s2 in np.asarray(sigma2_grid, dtype=float):
        S = neighbor_mass(contexts, s2)
        out.append((float(s2), float(np.std(S) / np.mean(S))))
    return np.array(out)


@dataclass
class DenseSparseFit:
    sigma2: float
    eta_dense: float
    eta_sparse: float
    eta_joint: float
    c_eta_joint: float
    mean_eta_dense: float
    mean_eta_sparse: float
    loss_dense: float
    loss_sparse: float
    eta_values: np.ndarray = field(repr=False, default=None)
    curve_dense: np.ndarray = field(repr=False, default=None)
    curve_sparse: np.ndarray = field(repr=False, default=None)
    curve_joint: np.ndarray = field(repr=False, default=None)


def dense_sparse_eta_fit(dense, sparse, sigma2, eta_axis=None, c_eta_axis=None):
    """Fit kernel-GD step sizes on dense / sparse / joint datasets at fixed
    width, and the adaptive c_eta on the joint set."""
    eta_axis = eta_axis or Axis(1.0, 1e3, 100)
    c_eta_axis = c_eta_axis or Axis(0.1, 1e3, 100)
    joint = ContextBatch.concat([dense, sparse])
    s2 = {"sigma2": np.array([sigma2])}
    curves = {}
    for name, data in (("dense", dense), ("sparse", sparse), ("joint", joint)):
        curves[name] = loss_surface("kernel_gd", {"eta": eta_axis, **s2}, data)[:, 0]
    etas = eta_axis.values()
    best = {k: int(np.argmin(v)) for k, v in curves.items()}
    c_sigma = c_sigma_from_sigma2(sigma2, dense.d, dense.C)
    fit = grid_search("adaptive", {"c_eta": c_eta_axis,
                                   "c_sigma": _Fixed(c_sigma)}, joint)
    c_eta = fit.best["c_eta"]
    return DenseSparseFit(
        sigma2=float(sigma2),
        eta_dense=float(etas[best["dense"]]),
        eta_sparse=float(etas[best["sparse"]]),
        eta_joint=float(etas[best["joint"]]),
        c_eta_joint=c_eta,
        mean_eta_dense=float(np.mean(adaptive_lr(dense, c_eta, sigma2))),
        mean_eta_sparse=float(np.mean(adaptive_lr(sparse, c_eta, sigma2))),
        loss_dense=float(curves["dense"][best["dense"]]),
        loss_sparse=float(curves["sparse"][best["sparse"]]),
        eta_values=etas, curve_dense=curves["dense"], curve_sparse=curves["sparse"],
        curve_joint=curves["joint"],
    )


@dataclass(frozen=True)
class _Fixed:
    """Single-value axis."""

    value: float

    def values(self):
        return np.array([self.value])


def fit_baseline(variant, axes, contexts, include_self=False):
    """Grid-search a baseline and return it as a BaselinePredictor."""
    res = grid_search(variant, axes, contexts, include_self)
    extra = {"include_self": include_self} if variant == "adaptive" else {}
    return BaselinePredictor(variant, **res.best, **extra), res

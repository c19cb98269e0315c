"""Closed-form one-step predictors that start from the zero classifier.

* ``gd_step``: softmax((eta/n) sum_i y_i x_i.x_q)
* ``kernel_gd``: softmax((eta/n) sum_i y_i k(x_i, x_q))
* ``adaptive``: softmax(c_eta sum_i y_i w_i), w = normalized exp(c_sigma x_i.x_q / sqrt(d+C))

All functions accept a Context (returning a C-vector) or a ContextBatch
(returning a (B, C) array).
"""

from dataclasses import dataclass

import numpy as np

from .attention import KernelSpec
from .numerics import stable_softmax
from .taskgen import as_batch


def query_dots(batch):
    """x_i . x_query for every context point, (B, n)."""
    return np.einsum("bnd,bd->bn", batch.xs, batch.x_query)


def class_sums(batch, weights):
    """sum_i y_i weights_i per class, (B, C)."""
    return np.einsum("bn,bnc->bc", weights, batch.onehot())


def _rate(eta):
    # per-context step sizes (B,) broadcast against (B, C) logits
    eta = np.asarray(eta, dtype=float)
    return eta[:, None] if eta.ndim == 1 else eta


def _finish(logits, single):
    p = stable_softmax(logits, axis=-1)
    return p[0] if single else p


def gd_step_predict(context, eta):
    batch, single = as_batch(context)
    return _finish(_rate(eta) / batch.n * class_sums(batch, query_dots(batch)), single)


def kernel_gd_predict(context, eta, kernel):
    batch, single = as_batch(context)
    k = kernel(batch.xs, batch.x_query[:, None, :])
    return _finish(_rate(eta) / batch.n * class_sums(batch, k), single)


def sigma2_from_c_sigma(c_sigma, d, C):
    return np.sqrt(d + C) / c_sigma


def c_sigma_from_sigma2(sigma2, d, C):
    return np.sqrt(d + C) / sigma2


def adaptive_lr(context, c_eta, sigma2, include_self=False):
    """Context-adaptive step size c_eta e^{1/s2} n / sum_i e^{x_i.x_q / s2}."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    batch, single = as_batch(context)
    # factor e^{1/s2} into the denominator to stay finite for tiny sigma2
    denom = np.sum(np.exp((query_dots(batch) - 1.0) / sigma2), axis=1)
    if include_self:
        denom = denom + 1.0
    eta = c_eta * batch.n / denom
    return float(eta[0]) if single else eta


def adaptive_weights(batch, c_sigma, include_self=False):
    """Normalized attention of the query over context points, (B, n).

    With ``include_self`` the query's own token joins the normalizer (its
    score is c_sigma * |x_q|^2 / sqrt(D)).
    """
    D = batch.d + batch.C
    s = c_sigma * query_dots(batch) / np.sqrt(D)
    if include_self:
        self_s = c_sigma * np.sum(batch.x_query ** 2, axis=1) / np.sqrt(D)
        top = np.maximum(s.max(axis=1), self_s)
        e = np.exp(s - top[:, None])
        return e / (e.sum(axis=1) + np.exp(self_s - top))[:, None]
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def adaptive_predict(context, c_eta, c_sigma, include_self=False):
    batch, single = as_batch(context)
    return _finish(c_eta * class_sums(batch, adaptive_weights(batch, c_sigma, include_self)), single)


@dataclass(frozen=True)
class BaselinePredictor:
    """A fitted closed-form predictor; call it on a Context or ContextBatch."""

    variant: str
    eta: float = None
    sigma2: float = None
    c_eta: float = None
    c_sigma: float = None
    include_self: bool = False

    def __post_init__(self):
        if self.variant == "gd_step":
            ok = self.eta is not None
        elif self.variant == "kernel_gd":
            ok = self.eta is not None and self.sigma2 is not None and self.sigma2 > 0
        elif self.variant == "adaptive":
            ok = self.c_eta is not None and self.c_sigma is not None
        else:
            raise ValueError(f"unknown baseline variant {self.variant!r}")
        if not ok:
            raise ValueError(f"missing or invalid hyperparameters for {self.variant}")

    def __call__(self, context):
        if self.variant == "gd_step":
            return gd_step_predict(context, self.eta)
        if self.variant == "kernel_gd":
            return kernel_gd_predict(context, self.eta, KernelSpec.rbf(self.sigma2))
        return adaptive_predict(context, self.c_eta, self.c_sigma, self.include_self)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

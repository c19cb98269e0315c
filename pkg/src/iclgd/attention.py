"""Single-layer, single-head self-attention over input-label tokens.

Tokens are rows ``[x_i, onehot(y_i)]`` of width ``D = d + C``; the query token
carries a zero label block. The layer computes

    SA(X) = X + f(X W_Q^T W_K X^T) X W_V^T W_O^T

and the prediction is the softmax of the label block of the updated query row.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, block_diag, stable_softmax
from .taskgen import as_batch


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used by kernel-activated attention.

    ``variant`` is ``"dot"``, ``"rbf"`` (needs ``sigma2``) or ``"custom"``
    (``fn(a, b)`` evaluated row-wise over the trailing axis).
    """

    variant: str = "rbf"
    sigma2: float = 1.0
    fn: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.variant not in ("dot", "rbf", "custom"):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "rbf" and not self.sigma2 > 0:
            raise ValueError("rbf kernel needs sigma2 > 0")
        if self.variant == "custom" and not callable(self.fn):
            raise ValueError("custom kernel needs a callable fn")

    @classmethod
    def dot(cls):
        return cls("dot")

    @classmethod
    def rbf(cls, sigma2):
        return cls("rbf", float(sigma2))

    def __call__(self, a, b):
        a = np.asarray(a, dtype=DTYPE)
        b = np.asarray(b, dtype=DTYPE)
        if self.variant == "dot":
            return np.sum(a * b, axis=-1)
        if self.variant == "rbf":
            diff = a - b
            return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.sigma2))
        return np.asarray(self.fn(a, b), dtype=DTYPE)

    def to_dict(self):
        if self.variant == "custom":
            raise ValueError("custom kernels are not serializable")
        return {"variant": self.variant, "sigma2": self.sigma2}


@dataclass(frozen=True)
class ModelKind:
    tag: str
    kernel: KernelSpec = None
    c_sigma: float = None

    TAGS = ("linear", "kernel", "softmax", "softmax_frozen")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown model kind {self.tag!r}")
        if self.tag == "kernel" and self.kernel is None:
            raise ValueError("kernel kind needs a KernelSpec")
        if self.tag == "softmax_frozen" and self.c_sigma is None:
            raise ValueError("frozen softmax kind needs c_sigma")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def with_kernel(cls, kernel):
        return cls("kernel", kernel=kernel)

    @classmethod
    def softmax(cls):
        return cls("softmax")

    @classmethod
    def softmax_frozen(cls, c_sigma):
        return cls("softmax_frozen", c_sigma=float(c_sigma))

    @property
    def is_softmax(self):
        return self.tag in ("softmax", "softmax_frozen")

    @property
    def trainable(self):
        if self.tag == "softmax_frozen":
            return ("W_V", "W_O")
        return ("W_Q", "W_K", "W_V", "W_O")

    def to_dict(self):
        out = {"tag": self.tag}
        if self.kernel is not None:
            out["kernel"] = self.kernel.to_dict()
        if self.c_sigma is not None:
            out["c_sigma"] = self.c_sigma
        return out

    @classmethod
    def from_dict(cls, obj):
        if isinstance(obj, str):
            return cls(obj)
        kernel = obj.get("kernel")
        return cls(obj["tag"], KernelSpec(**kernel) if kernel else None, obj.get("c_sigma"))


@dataclass(frozen=True)
class AttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    NAMES = ("W_Q", "W_K", "W_V", "W_O")

    def __post_init__(self):
        shapes = {np.shape(getattr(self, k)) for k in self.NAMES}
        if len(shapes) != 1:
            raise ShapeError("W_Q, W_K, W_V, W_O must share one shape")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeError("attention weights must be square")
        for k in self.NAMES:
            if not np.all(np.isfinite(getattr(self, k))):
                raise ValueError(f"{k} has non-finite entries")

    @property
    def dim(self):
        return self.W_Q.shape[0]

    def qk(self):
        """W_Q^T W_K, the bilinear form scoring query against key tokens."""
        return self.W_Q.T @ self.W_K

    def vo(self):
        """W_V^T W_O^T, the token-to-update map."""
        return self.W_V.T @ self.W_O.T

    def params(self):
        return {k: getattr(self, k) for k in self.NAMES}

    @classmethod
    def from_params(cls, p):
        return cls(*(np.asarray(p[k], dtype=DTYPE) for k in cls.NAMES))

    @classmethod
    def zeros(cls, D):
        return cls(*(np.zeros((D, D)) for _ in range(4)))


@dataclass(frozen=True)
class MlpWeights:
    """Two-layer ReLU MLP with hidden width ``2 * D``, applied with a residual."""

    W1: np.ndarray  # (D, h)
    b1: np.ndarray
    W2: np.ndarray  # (h, D)
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    def __post_init__(self):
        D, h = np.shape(self.W1)
        if h != 2 * D:
            raise ShapeError("MLP hidden width must be 2 * (d + C)")
        if np.shape(self.b1) != (h,) or np.shape(self.W2) != (h, D) or np.shape(self.b2) != (D,):
            raise ShapeError("inconsistent MLP shapes")

    def params(self):
        return {k: getattr(self, k) for k in self.NAMES}

    @classmethod
    def from_params(cls, p):
        return cls(*(np.asarray(p[k], dtype=DTYPE) for k in cls.NAMES))

    @classmethod
    def zeros(cls, D):
        return cls(np.zeros((D, 2 * D)), np.zeros(2 * D), np.zeros((2 * D, D)), np.zeros(D))


def build_token_matrix(context):
    """(n+1, D) tokens for a Context, (B, n+1, D) for a ContextBatch."""
    batch, single = as_batch(context)
    B, n, d = batch.xs.shape
    C = batch.C
    X = np.zeros((B, n + 1, d + C))
    X[:, :n, :d] = batch.xs
    X[:, :n, d:] = batch.onehot()
    X[:, n, :d] = batch.x_query
    return X[0] if single else X


def attention_scores(kind, w, X):
    """Activated attention of the query (last) row over all tokens, (B, T)."""
    q = X[:, -1, :]
    if kind.tag == "kernel":
        return kind.kernel((q @ w.W_Q.T)[:, None, :], X @ w.W_K.T)
    s = np.einsum("bd,bte,de->bt", q, X, w.qk())
    if kind.tag == "linear":
        return s
    return stable_softmax(s / np.sqrt(X.shape[-1]), axis=-1)


def _check(w, X):
    if X.ndim not in (2, 3):
        raise ShapeError("token matrix must be 2-D or batched 3-D")
    if X.shape[-1] != w.dim:
        raise ShapeError(f"token width {X.shape[-1]} does not match weights {w.dim}")


def mlp_forward(mlp, h):
    if mlp.W1.shape[0] != h.shape[-1]:
        raise ShapeError(f"MLP width {mlp.W1.shape[0]} does not match tokens {h.shape[-1]}")
    return h + np.maximum(h @ mlp.W1 + mlp.b1, 0.0) @ mlp.W2 + mlp.b2


def query_update(kind, w, X, mlp=None):
    """Updated query token (residual included, MLP applied when given)."""
    a = attention_scores(kind, w, X)
    h = X[:, -1, :] + np.einsum("bt,bte->be", a, X) @ w.vo()
    return h if mlp is None else mlp_forward(mlp, h)


def forward_logits(kind, w, X, C, mlp=None):
    X = np.asarray(X, dtype=DTYPE)
    _check(w, X)
    single = X.ndim == 2
    Xb = X[None] if single else X
    logits = query_update(kind, w, Xb, mlp)[:, -C:]
    return logits[0] if single else logits


def forward_predict(kind, w, X, C, mlp=None):
    """Class probabilities for the query token(s); ``C`` is the label width."""
    return stable_softmax(forward_logits(kind, w, X, C, mlp), axis=-1)


def forward_full(kind, w, X):
    """Full SA(X) for every token (debug view; predictions use the query row only)."""
    X = np.asarray(X, dtype=DTYPE)
    _check(w, X)
    single = X.ndim == 2
    Xb = X[None] if single else X
    D = Xb.shape[-1]
    if kind.tag == "kernel":
        A = kind.kernel((Xb @ w.W_Q.T)[:, :, None, :], (Xb @ w.W_K.T)[:, None, :, :])
    else:
        S = Xb @ w.qk() @ np.swapaxes(Xb, 1, 2)
        A = S if kind.tag == "linear" else stable_softmax(S / np.sqrt(D), axis=-1)
    out = Xb + A @ Xb @ w.vo()
    return out[0] if single else out


def forward_transience(w, mlp, X, C):
    return forward_predict(ModelKind.softmax(), w, X, C, mlp=mlp)


# -- weight constructions -----------------------------------------------------

def _x_selector(d, C, scale=1.0):
    return block_diag(scale * np.eye(d), np.zeros((C, C)))


def _y_selector(d, C, scale=1.0):
    return block_diag(np.zeros((d, d)), scale * np.eye(C))


def construct_linear_gd_weights(eta, n, d, C):
    """Linear attention weights computing one GD step from zero with rate ``eta``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return AttentionWeights(_x_selector(d, C), _x_selector(d, C), _y_selector(d, C),
                            _y_selector(d, C, eta / n))


def construct_kernel_gd_weights(eta, n, d, C):
    """Kernel attention weights computing one kernel-GD step; same blocks as linear."""
    return construct_linear_gd_weights(eta, n, d, C)


def construct_softmax_weights(c_sigma, c_eta, d, C):
    """Softmax attention weights computing one context-adaptive kernel-GD step.

    W_Q^T W_K = diag(c_sigma I_d, 0) and W_V^T W_O^T = diag(0, c_eta I_C).
    """
    if not (np.isfinite(c_sigma) and np.isfinite(c_eta)):
        raise ValueError("constants must be finite")
    return AttentionWeights(_x_selector(d, C), _x_selector(d, C, c_sigma), _y_selector(d, C),
                            _y_selector(d, C, c_eta))


# -- checkpoints -----------------------------------------------------------------

def checkpoint_to_dict(kind, w, d, C, step, seed, mlp=None):
    out = {"kind": kind.to_dict(), "d": d, "C": C, "step": int(step), "seed": seed}
    out.update({k: v.tolist() for k, v in w.params().items()})
    if mlp is not None:
        out["mlp"] = {k: v.tolist() for k, v in mlp.params().items()}
    return out


def checkpoint_from_dict(obj):
    kind = ModelKind.from_dict(obj["kind"])
    w = AttentionWeights.from_params(obj)
    D = obj["d"] + obj["C"]
    if w.dim != D:
        raise ShapeError("checkpoint weights do not match d + C")
    mlp = MlpWeights.from_params(obj["mlp"]) if obj.get("mlp") else None
    return {"kind": kind, "weights": w, "mlp": mlp, "d": obj["d"], "C": obj["C"],
            "step": obj["step"], "seed": obj.get("seed")}


def dumps_checkpoint(*args, **kwargs):
    return json.dumps(checkpoint_to_dict(*args, **kwargs))


def load_checkpoint(path):
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))

"""Cross-entropy training of the attention models with hand-written backprop.

Parameters live in a flat dict of float64 arrays (``W_Q``, ``W_K``, ``W_V``,
``W_O`` and, for the attention+MLP model, ``W1``, ``b1``, ``W2``, ``b2``).
Batch gradients are plain sums in context order, so results are bit-identical
for a fixed seed.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import taskgen
from .analysis import extract_constants
from .attention import (AttentionWeights, MlpWeights, ModelKind, build_token_matrix,
                        construct_softmax_weights, forward_logits)
from .numerics import log_softmax, make_rng


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, step=None, last_good=None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    iterations: int = 1000
    eval_every: int = 100
    init_scale: float = 0.002
    clip: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    rng: object = None

    def attention(self):
        return AttentionWeights.from_params(self.params)

    def mlp(self):
        if "W1" not in self.params:
            return None
        return MlpWeights.from_params(self.params)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class TrainResult:
    state: TrainState
    trace: list
    snapshots: list = field(default_factory=list)  # (step, params) at each eval


def ce_loss(pred, y):
    """-log pred[y] with pred floored at 1e-300."""
    pred = np.asarray(pred, dtype=float)
    if pred.ndim == 1:
        return float(-np.log(max(pred[int(y)], 1e-300)))
    p = pred[np.arange(len(pred)), np.asarray(y)]
    return -np.log(np.maximum(p, 1e-300))


def init_weights(kind, d, C, init_scale, rng, with_mlp=False):
    """Standard-normal entries times ``init_scale``; MLP biases start at zero.

    The frozen-QK kind gets the fixed query/key construction at its c_sigma.
    """
    D = d + C
    params = {k: rng.standard_normal((D, D)) * init_scale for k in AttentionWeights.NAMES}
    if kind.tag == "softmax_frozen":
        fixed = construct_softmax_weights(kind.c_sigma, 0.0, d, C)
        params["W_Q"], params["W_K"] = fixed.W_Q.copy(), fixed.W_K.copy()
    if with_mlp:
        h = 2 * D
        params["W1"] = rng.standard_normal((D, h)) * init_scale
        params["b1"] = np.zeros(h)
        params["W2"] = rng.standard_normal((h, D)) * init_scale
        params["b2"] = np.zeros(D)
    return params


def trainable_names(kind, params):
    return [k for k in params if k not in AttentionWeights.NAMES or k in kind.trainable]


def _params_of(obj):
    return obj.params if isinstance(obj, TrainState) else obj


def loss_and_grad(kind, params, batch):
    """Mean query cross-entropy over ``batch`` and its exact gradient.

    Gradients are returned for every parameter; non-trainable ones (frozen
    W_Q, W_K) are zero. Overflow surfaces as TrainingDiverged.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_grad(kind, _params_of(params), batch)


def _loss_and_grad(kind, params, batch):
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = build_token_matrix(batch)
    B, T, D = X.shape
    C = batch.C
    y = np.asarray(batch.y_query)
    WQ, WK, WV, WO = (params[k] for k in AttentionWeights.NAMES)
    q = X[:, -1, :]
    Xf = X.reshape(B * T, D)

    rbf = kind.tag == "kernel" and kind.kernel.variant == "rbf"
    if kind.tag == "kernel" and kind.kernel.variant == "custom":
        raise NotImplementedError("no analytic gradient for custom kernels")
    if rbf:
        Qv = q @ WQ.T
        K = (Xf @ WK.T).reshape(B, T, D)
        diff = Qv[:, None, :] - K
        a = np.exp(-np.sum(diff * diff, axis=2) / (2.0 * kind.kernel.sigma2))
    else:
        # scores s_t = q^T (W_Q^T W_K) x_t
        r = q @ (WQ.T @ WK)
        s = (X @ r[:, :, None])[..., 0]
        if kind.is_softmax:
            z = s / np.sqrt(D)
            z -= z.max(axis=1, keepdims=True)
            a = np.exp(z)
            a /= a.sum(axis=1, keepdims=True)
        else:
            a = s
    M = WV.T @ WO.T
    ax = (a[:, None, :] @ X)[:, 0]
    h = q + ax @ M

    mlp = "W1" in params
    if mlp:
        z1 = h @ params["W1"] + params["b1"]
        r1 = np.maximum(z1, 0.0)
        out = h + r1 @ params["W2"] + params["b2"]
    else:
        out = h
    logits = out[:, D - C:]
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged("training diverged: non-finite logits")
    logp = log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(B), y]))

    g_logits = np.exp(logp)
    g_logits[np.arange(B), y] -= 1.0
    g_logits /= B
    g_out = np.zeros((B, D))
    g_out[:, D - C:] = g_logits
    grads = {}
    if mlp:
        grads["W2"] = r1.T @ g_out
        grads["b2"] = g_out.sum(axis=0)
        g_z1 = (g_out @ params["W2"].T) * (z1 > 0)
        grads["W1"] = h.T @ g_z1
        grads["b1"] = g_z1.sum(axis=0)
        g_h = g_out + g_z1 @ params["W1"].T
    else:
        g_h = g_out

    # M = W_V^T W_O^T
    g_M = ax.T @ g_h
    grads["W_V"] = WO.T @ g_M.T
    grads["W_O"] = g_M.T @ WV.T
    g_a = (X @ (g_h @ M.T)[:, :, None])[..., 0]

    if rbf:
        c = g_a * a / kind.kernel.sigma2
        g_Qv = -(c[:, None, :] @ diff)[:, 0]
        g_K = c[:, :, None] * diff
        grads["W_Q"] = g_Qv.T @ q
        grads["W_K"] = g_K.reshape(B * T, D).T @ Xf
    else:
        if kind.is_softmax:
            g_s = a * (g_a - np.sum(a * g_a, axis=1, keepdims=True)) / np.sqrt(D)
        else:
            g_s = g_a
        # A = W_Q^T W_K with r = q A
        g_A = q.T @ (g_s[:, None, :] @ X)[:, 0]
        grads["W_Q"] = WK @ g_A.T
        grads["W_K"] = WQ @ g_A
    if kind.tag == "softmax_frozen":
        grads["W_Q"] = np.zeros_like(WQ)
        grads["W_K"] = np.zeros_like(WK)

    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged("training diverged: non-finite loss or gradient")
    return loss, {k: grads[k] for k in params}


def clip_gradients(grads, names, clip):
    """Scale ``grads[names]`` so their joint l2 norm is at most ``clip``."""
    norm = np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    if clip is None or norm <= clip:
        return grads, norm
    scale = clip / norm
    return {k: (g * scale if k in names else g) for k, g in grads.items()}, norm


def adam_update(state, grads, names, cfg):
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k in names:
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        state.params[k] = state.params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def evaluate(kind, params, batch):
    """(mean CE loss, accuracy) of the model on ``batch``."""
    params = _params_of(params)
    w = AttentionWeights.from_params(params)
    mlp = MlpWeights.from_params(params) if "W1" in params else None
    logits = forward_logits(kind, w, build_token_matrix(batch), batch.C, mlp)
    logp = log_softmax(logits)
    y = np.asarray(batch.y_query)
    loss = float(-np.mean(logp[np.arange(len(y)), y]))
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def random_sampler(task_cfg):
    def sample(rng, size):
        return taskgen.generate_batch(task_cfg, rng, size)
    return sample


def new_state(kind, task_cfg, train_cfg, with_mlp=False):
    init_rng = make_rng(train_cfg.seed, 0)
    params = init_weights(kind, task_cfg.d, task_cfg.C, train_cfg.init_scale, init_rng, with_mlp)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(params, zeros, {k: v.copy() for k, v in zeros.items()}, 0,
                      make_rng(train_cfg.seed, 1))


def train(kind, task_cfg, train_cfg, eval_set, sampler=None, with_mlp=False,
          on_eval=None, state=None):
    """Run Adam on fresh batches; evaluate every ``eval_every`` steps.

    ``eval_set`` is a ContextBatch (columns ``eval_loss``, ``eval_accuracy``)
    or a dict of named batches (columns ``<name>_loss``, ``<name>_accuracy``).
    ``on_eval(state, row)`` runs after each evaluation. Returns a TrainResult;
    on divergence raises TrainingDiverged carrying the last good parameters.
    """
    sampler = sampler or random_sampler(task_cfg)
    state = state or new_state(kind, task_cfg, train_cfg, with_mlp)
    names = trainable_names(kind, state.params)
    eval_sets = eval_set if isinstance(eval_set, dict) else {"eval": eval_set}
    trace, snapshots = [], []
    t0 = time.perf_counter()
    while state.step < train_cfg.iterations:
        batch = sampler(state.rng, train_cfg.batch_size)
        try:
            _, grads = loss_and_grad(kind, state.params, batch)
        except TrainingDiverged as err:
            raise TrainingDiverged("training diverged", state.step + 1, state.snapshot()) from err
        grads, _ = clip_gradients(grads, names, train_cfg.clip)
        adam_update(state, grads, names, train_cfg)
        if state.step % train_cfg.eval_every == 0:
            row = {"step": state.step}
            for name, ev in eval_sets.items():
                loss, acc = evaluate(kind, state.params, ev)
                row[f"{name}_loss"] = loss
                row[f"{name}_accuracy"] = acc
            if kind.is_softmax:
                ex = extract_constants(state.attention(), task_cfg.d, task_cfg.C)
                row["c_sigma_eff"] = ex.c_sigma_eff
                row["c_eta_eff"] = ex.c_eta_eff
            row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            trace.append(row)
            snapshots.append((state.step, state.snapshot()))
            if on_eval is not None:
                on_eval(state, row)
    return TrainResult(state, trace, snapshots)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})

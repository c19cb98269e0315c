"""Synthetic in-context classification tasks on the unit sphere.

A context draws ``C`` class vectors uniformly on S^{d-1}; every point on the
sphere belongs to the class of its nearest class vector. Each context holds
``n / C`` points per class plus a query whose class is drawn uniformly first
and whose position is then drawn uniformly within that class region.
"""

import json
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .numerics import make_rng


class TaskError(ValueError):
    pass


class RejectionCapExceeded(TaskError):
    def __init__(self, class_index):
        super().__init__(f"rejection cap exceeded for class {class_index}")
        self.class_index = class_index


@dataclass(frozen=True)
class TaskConfig:
    d: int
    C: int
    n: int
    max_reject: int = 100_000

    def __post_init__(self):
        for name in ("d", "C", "n", "max_reject"):
            if getattr(self, name) < 1:
                raise TaskError(f"{name} must be positive")
        if self.d < 2:
            raise TaskError("d must be >= 2")
        if self.C < 2:
            raise TaskError("C must be >= 2")
        if self.n < self.C:
            raise TaskError("n must be >= C")
        if self.n % self.C:
            raise TaskError("n not divisible by C")

    @property
    def model_dim(self):
        return self.d + self.C


@dataclass(frozen=True)
class TransienceConfig:
    base: TaskConfig
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise TaskError("m must be >= 1")


@dataclass
class Context:
    class_vectors: np.ndarray  # (C, d)
    xs: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    x_query: np.ndarray  # (d,)
    y_query: int

    @property
    def n(self):
        return self.xs.shape[0]

    @property
    def d(self):
        return self.xs.shape[1]

    @property
    def C(self):
        return self.class_vectors.shape[0]

    def as_batch(self):
        return ContextBatch(
            self.class_vectors[None], self.xs[None], self.labels[None],
            self.x_query[None], np.array([self.y_query]),
        )


@dataclass
class ContextBatch:
    """Contexts stacked along a leading batch axis."""

    class_vectors: np.ndarray  # (B, C, d)
    xs: np.ndarray  # (B, n, d)
    labels: np.ndarray  # (B, n)
    x_query: np.ndarray  # (B, d)
    y_query: np.ndarray  # (B,)

    def __len__(self):
        return self.xs.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Context(self.class_vectors[i], self.xs[i], self.labels[i],
                           self.x_query[i], int(self.y_query[i]))
        return ContextBatch(self.class_vectors[i], self.xs[i], self.labels[i],
                            self.x_query[i], self.y_query[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n(self):
        return self.xs.shape[1]

    @property
    def d(self):
        return self.xs.shape[2]

    @property
    def C(self):
        return self.class_vectors.shape[1]

    @classmethod
    def from_contexts(cls, contexts):
        contexts = list(contexts)
        if not contexts:
            raise TaskError("no contexts")
        return cls(
            np.stack([c.class_vectors for c in contexts]),
            np.stack([c.xs for c in contexts]),
            np.stack([np.asarray(c.labels) for c in contexts]),
            np.stack([c.x_query for c in contexts]),
            np.array([c.y_query for c in contexts]),
        )

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("class_vectors", "xs", "labels", "x_query", "y_query")))

    def with_query(self, x_query):
        """Copy with the query moved; y_query is recomputed from class vectors."""
        x_query = np.asarray(x_query, dtype=float)
        return ContextBatch(self.class_vectors, self.xs, self.labels, x_query,
                            assign_class(x_query, self.class_vectors))

    def onehot(self):
        return np.eye(self.C)[self.labels]


def as_batch(ctx):
    """Return ``(batch, was_single)`` for a Context or ContextBatch."""
    if isinstance(ctx, Context):
        return ctx.as_batch(), True
    return ctx, False


def sample_unit_sphere(rng, d, size=()):
    """Uniform draws on S^{d-1}: normalized Gaussian vectors, shape size + (d,)."""
    if d < 1:
        raise TaskError("d must be >= 1")
    shape = tuple(np.atleast_1d(size).astype(int)) if size != () else ()
    v = rng.standard_normal(shape + (d,))
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = norms[..., 0] == 0
    while np.any(bad):
        v[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        bad = norms[..., 0] == 0
    return v / norms


def assign_class(x, class_vectors):
    """Index of the nearest class vector (largest dot product, ties -> lowest).

    Broadcasts: ``x`` (..., d) against ``class_vectors`` (..., C, d).
    """
    x = np.asarray(x)
    z = np.asarray(class_vectors)
    if z.ndim == 2 and x.ndim >= 2:
        dots = x @ z.T
    elif z.ndim == 2:
        dots = z @ x
    elif x.ndim == z.ndim - 1:
        dots = np.einsum("...d,...cd->...c", x, z)
    else:
        # x (B, M, d) against per-context class vectors (B, C, d)
        dots = np.matmul(x, np.swapaxes(z, 1, 2))
    return np.argmax(dots, axis=-1)


@numba.njit(cache=True)
def _sample_points(rng, Z, per, max_reject, xs, labels, xq, yq):
    """Rejection-sample every context in place; returns -1 or a starving class.

    Per context: uniform sphere draws are kept while their class still has
    room, then the query class is drawn uniformly and its position is
    rejection-sampled within that class region.
    """
    B, C, d = Z.shape
    n = per * C
    v = np.empty(d)
    counts = np.empty(C, dtype=np.int64)
    for b in range(B):
        counts[:] = 0
        filled = 0
        attempts = 0
        while filled < n:
            attempts += 1
            if attempts > max_reject * n:
                for c in range(C):
                    if counts[c] < per:
                        return c
            c = _draw_and_assign(rng, Z[b], v)
            if c < 0 or counts[c] >= per:
                continue
            xs[b, filled] = v
            labels[b, filled] = c
            counts[c] += 1
            filled += 1
        y = rng.integers(0, C)
        yq[b] = y
        attempts = 0
        while True:
            attempts += 1
            if attempts > max_reject:
                return y
            if _draw_and_assign(rng, Z[b], v) == y:
                xq[b] = v
                break
    return -1


@numba.njit(cache=True)
def _draw_and_assign(rng, Zb, v):
    # fills v with a uniform unit vector; returns its class, -1 on a zero draw
    d = v.shape[0]
    sq = 0.0
    for k in range(d):
        v[k] = rng.standard_normal()
        sq += v[k] * v[k]
    if sq == 0.0:
        return -1
    r = np.sqrt(sq)
    for k in range(d):
        v[k] /= r
    best = 0
    best_dot = -np.inf
    for c in range(Zb.shape[0]):
        dot = 0.0
        for k in range(d):
            dot += Zb[c, k] * v[k]
        if dot > best_dot:
            best_dot = dot
            best = c
    return best


def generate_batch(cfg, rng, batch, class_vectors=None):
    """Sample ``batch`` contexts from one Generator stream.

    ``class_vectors`` (batch, C, d) overrides the per-context class vectors.
    """
    if class_vectors is None:
        Z = sample_unit_sphere(rng, cfg.d, (batch, cfg.C))
    else:
        Z = np.ascontiguousarray(class_vectors, dtype=float)
        if Z.shape != (batch, cfg.C, cfg.d):
            raise TaskError("class_vectors shape mismatch")
    per = cfg.n // cfg.C
    xs = np.empty((batch, cfg.n, cfg.d))
    labels = np.empty((batch, cfg.n), dtype=np.int64)
    xq = np.empty((batch, cfg.d))
    yq = np.empty(batch, dtype=np.int64)
    starving = _sample_points(rng, Z, per, cfg.max_reject, xs, labels, xq, yq)
    if starving >= 0:
        raise RejectionCapExceeded(int(starving))
    return ContextBatch(Z, xs, labels, xq, yq)


def generate_context(cfg, rng):
    return generate_batch(cfg, rng, 1)[0]


def generate_dataset(cfg, seed, count, stream=None):
    """``count`` contexts, context ``i`` drawn from its own stream ``(seed, i)``
    (or ``(seed, stream, i)`` when ``stream`` separates several datasets).

    Output does not depend on generation order.
    """
    key = () if stream is None else (stream,)
    return ContextBatch.from_contexts(
        generate_context(cfg, make_rng(seed, *key, i)) for i in range(count))


def regular_polygon(K):
    angles = 2 * np.pi * np.arange(K) / K
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def neighbor_counts(xs, candidates, near_threshold):
    """Count of context points with dot > threshold, per candidate query. (B, K)"""
    return np.sum(np.einsum("bnd,kd->bkn", xs, candidates) > near_threshold, axis=2)


def place_queries(batch, K=50, near_threshold=0.3):
    """Return (dense, sparse) copies of ``batch`` with the query at the K-gon
    vertex having the most / fewest close context points."""
    if batch.d != 2:
        raise TaskError("dense/sparse placement needs d == 2")
    verts = regular_polygon(K)
    counts = neighbor_counts(batch.xs, verts, near_threshold)
    dense = batch.with_query(verts[np.argmax(counts, axis=1)])
    sparse = batch.with_query(verts[np.argmin(counts, axis=1)])
    return dense, sparse


def generate_dense_sparse_pair(cfg, rng, count, mean_threshold=0.3, K=50, near_threshold=0.3):
    if cfg.d != 2:
        raise TaskError("dense/sparse datasets need d == 2")
    batch = generate_batch(cfg, rng, count)
    keep = np.linalg.norm(batch.xs.mean(axis=1), axis=1) >= mean_threshold
    if not np.any(keep):
        raise TaskError("no dense/sparse contexts")
    return place_queries(batch[np.nonzero(keep)[0]], K, near_threshold)


def sample_class_vector_sets(cfg, rng, m):
    return sample_unit_sphere(rng, cfg.d, (m, cfg.C))


def generate_transience_batch(cfg, fixed_sets, rng, batch):
    """``batch / m`` contexts labeled by each of the ``m`` fixed class-vector sets."""
    base = cfg.base if isinstance(cfg, TransienceConfig) else cfg
    fixed_sets = np.asarray(fixed_sets, dtype=float)
    m = fixed_sets.shape[0]
    if isinstance(cfg, TransienceConfig) and m != cfg.m:
        raise TaskError(f"expected {cfg.m} class-vector sets, got {m}")
    if batch % m:
        raise TaskError(f"batch {batch} not divisible by m={m}")
    Z = np.repeat(fixed_sets, batch // m, axis=0)
    return generate_batch(base, rng, batch, class_vectors=Z)


# -- dataset files -----------------------------------------------------------

def dataset_to_dict(cfg, seed, batch):
    return {
        "config": asdict(cfg),
        "seed": seed,
        "contexts": [
            {
                "class_vectors": c.class_vectors.tolist(),
                "xs": c.xs.tolist(),
                "labels": [int(v) for v in c.labels],
                "x_query": c.x_query.tolist(),
                "y_query": int(c.y_query),
            }
            for c in batch
        ],
    }


def dataset_from_dict(obj):
    cfg = TaskConfig(**obj["config"])
    batch = ContextBatch.from_contexts(
        Context(np.array(c["class_vectors"], dtype=float), np.array(c["xs"], dtype=float),
                np.array(c["labels"], dtype=np.int64), np.array(c["x_query"], dtype=float),
                int(c["y_query"]))
        for c in obj["contexts"]
    )
    return cfg, obj.get("seed"), batch


def dumps_dataset(cfg, seed, batch):
    return json.dumps(dataset_to_dict(cfg, seed, batch))


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_dict(json.load(fh))

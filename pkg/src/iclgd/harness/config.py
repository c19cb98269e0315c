"""Versioned JSON experiment configuration.

Every section is optional and falls back to desk-scale defaults; unknown keys
anywhere are rejected so typos fail loudly. Full-scale settings are reached
by overriding fields explicitly (see ``FULL_SCALE``).
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..analysis import Axis, REFERENCE_ADAPTIVE_RANGES, REFERENCE_GRIDS
from ..attention import ModelKind
from ..taskgen import TaskConfig
from ..training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _strict(cls, obj, where):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass(frozen=True)
class EvalSection:
    n_eval: int = 512
    n_align: int = 100
    n_scatter: int = 512
    n_fit: int = 2000


@dataclass(frozen=True)
class BaselineSection:
    variant: str = "gd_step"
    include_self: bool = None
    grid: dict = None  # name -> {min, max, count, log}
    params: dict = None  # fixed hyperparameters; skips fitting when given

    def axes(self, d):
        if self.grid is not None:
            return parse_axes(self.grid, f"baseline.grid")
        return default_axes(self.variant, d)


@dataclass(frozen=True)
class GenSection:
    count: int = 10


COMPARE_MODELS = ("linear", "softmax_frozen", "kernel_gd", "softmax")


@dataclass(frozen=True)
class CompareSection:
    lengths: list = field(default_factory=lambda: [10, 20, 50, 100])
    models: list = field(default_factory=lambda: list(COMPARE_MODELS))
    checkpoints: dict = field(default_factory=dict)  # model name -> path
    n_eval: int = 1000
    n_fit: int = 1000


@dataclass(frozen=True)
class TransienceSection:
    m: int = 2
    n_eval: int = 512


@dataclass(frozen=True)
class GridSection:
    variant: str = "kernel_gd"
    grid: dict = None
    include_self: bool = False
    n_contexts: int = 2000
    # dense_sparse / variability experiments
    sigma2: float = None
    sigma2_grid: dict = None
    mean_threshold: float = 0.3
    K: int = 50
    near_threshold: float = 0.3


TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=lambda: TaskConfig(3, 5, 100))
    model: ModelKind = field(default_factory=ModelKind.linear)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    gen: GenSection = field(default_factory=GenSection)
    compare: CompareSection = field(default_factory=CompareSection)
    transience: TransienceSection = field(default_factory=TransienceSection)
    gridsearch: GridSection = field(default_factory=GridSection)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


SECTIONS = {"version", "seed", "task", "model", "train", "eval", "baseline", "gen", "compare",
            "transience", "gridsearch"}


def parse_axes(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object of axes")
    return {name: _strict(Axis, spec, f"{where}.{name}") for name, spec in obj.items()}


def default_axes(variant, d):
    if variant in REFERENCE_GRIDS:
        return dict(REFERENCE_GRIDS[variant])
    if variant == "adaptive":
        key = min(REFERENCE_ADAPTIVE_RANGES, key=lambda k: abs(k - d))
        return dict(REFERENCE_ADAPTIVE_RANGES[key])
    raise ConfigError(f"no default grid for variant {variant!r}")


def parse_config(obj, seed=None):
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - SECTIONS)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    version = obj.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    raw = dict(obj)
    if seed is not None:
        raw["seed"] = int(seed)
    seed = int(raw.get("seed", 0))
    task = _strict(TaskConfig, obj.get("task", {"d": 3, "C": 5, "n": 100}), "task")

    model_obj = obj.get("model", {"tag": "linear"})
    if isinstance(model_obj, dict):
        unknown = sorted(set(model_obj) - {"tag", "kernel", "c_sigma"})
        if unknown:
            raise ConfigError(f"model: unknown key(s) {', '.join(unknown)}")
    if isinstance(model_obj, dict) and model_obj.get("tag") == "softmax_frozen" \
            and model_obj.get("c_sigma") is None:
        # sigma^2 = 1 by default
        model_obj = {**model_obj, "c_sigma": float(task.model_dim) ** 0.5}
    try:
        model = ModelKind.from_dict(model_obj)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"model: {err}") from err

    train_obj = obj.get("train", {})
    unknown = sorted(set(train_obj) - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"train: unknown key(s) {', '.join(unknown)}")
    train = _strict(TrainConfig, {**train_obj, "seed": seed}, "train")

    cfg = ExperimentConfig(
        seed=seed, task=task, model=model, train=train,
        eval=_strict(EvalSection, obj.get("eval"), "eval"),
        baseline=_strict(BaselineSection, obj.get("baseline"), "baseline"),
        gen=_strict(GenSection, obj.get("gen"), "gen"),
        compare=_strict(CompareSection, obj.get("compare"), "compare"),
        transience=_strict(TransienceSection, obj.get("transience"), "transience"),
        gridsearch=_strict(GridSection, obj.get("gridsearch"), "gridsearch"),
        raw=raw,
    )
    if cfg.baseline.variant not in ("gd_step", "kernel_gd", "adaptive"):
        raise ConfigError(f"baseline: unknown variant {cfg.baseline.variant!r}")
    bad = sorted(set(cfg.compare.models) - set(COMPARE_MODELS))
    if bad:
        raise ConfigError(f"compare: unknown model(s) {', '.join(bad)}")
    if not cfg.compare.lengths or any(int(n) < 1 for n in cfg.compare.lengths):
        raise ConfigError("compare: lengths must be positive integers")
    if cfg.gridsearch.variant not in ("gd_step", "kernel_gd", "adaptive", "dense_sparse",
                                      "variability"):
        raise ConfigError(f"gridsearch: unknown variant {cfg.gridsearch.variant!r}")
    if cfg.transience.m < 1:
        raise ConfigError("transience: m must be >= 1")
    return cfg


def load_config(path, seed=None):
    if path is None:
        return parse_config({}, seed)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return parse_config(obj, seed)


def config_to_dict(cfg):
    out = {"version": CONFIG_VERSION, "seed": cfg.seed, "task": asdict(cfg.task),
           "model": cfg.model.to_dict()}
    train = asdict(cfg.train)
    train.pop("seed")
    out["train"] = train
    for name in ("eval", "baseline", "gen", "compare", "transience", "gridsearch"):
        out[name] = asdict(getattr(cfg, name))
    return out


# Full-scale training settings, selectable with --full-scale.
FULL_SCALE = {
    "linear": {"learning_rate": 5e-5, "batch_size": 2048, "iterations": 200_000,
               "eval_every": 100, "clip": 1e-3},
    "softmax": {"batch_size": 2048, "iterations": 2_000_000, "eval_every": 100, "clip": 1.0},
    "softmax_frozen": {"learning_rate": 3e-4, "batch_size": 2048, "iterations": 200_000,
                       "eval_every": 100, "clip": 1.0},
}
FULL_SCALE_SOFTMAX_LR = {2: 6e-4, 3: 3e-5, 5: 1e-4, 10: 5e-4}

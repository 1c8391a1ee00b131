"""Run configuration: TOML parsing, defaults, validation and serialisation.

A config file only has to name the model, the data and the strategy; every
other field falls back to the experimental defaults (s=64, eta_l=0.01,
eta_g=K*eta_l, kappa=0.6, lambda=T/5, gamma=1/K).
"""

from __future__ import annotations

import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import tomli_w

from .model import ModelSpec
from .strategies import NAMES, PARAMS, Strategy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_OVERHEAD = {
    "fedavg": 0.0,
    "foolsgold": 0.0,
    "taco": 0.02,
    "scaffold": 0.05,
    "fedprox": 0.235,
    "fedacg": 0.24,
    "stem": 0.0,
}


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(field)
        if line:
            where.append(f"line {line}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "softmax"
    hidden_dim: int = 0


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "iid"
    phi: float = 0.5
    groups: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class DataConfig:
    source: str = "gaussian_mixture"
    dim: int = 20
    num_classes: int = 10
    n_per_class: int = 200
    sep: float = 3.0
    images: str = ""
    labels: str = ""
    test_fraction: float = 0.2
    partition: PartitionConfig = field(default_factory=PartitionConfig)


@dataclass(frozen=True)
class DetectionConfig:
    enabled: bool = True
    kappa: float = 0.6
    lam: int = 1


@dataclass(frozen=True)
class CostConfig:
    grad_eval_cost: float = 1.0
    overhead: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    data: DataConfig
    strategy: Strategy
    seed: int = 0
    clients: int = 10
    rounds: int = 100
    local_steps: int = 10
    eta_l: float = 0.01
    eta_g: float = 0.1
    batch_size: int = 64
    full_batch: bool = False
    freeloaders: tuple[int, ...] = ()
    analysis_mode: bool = False
    target_acc: float = 0.0
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    cost: CostConfig = field(default_factory=CostConfig)

    @property
    def K(self) -> int:
        return self.local_steps

    @property
    def T(self) -> int:
        return self.rounds

    @property
    def N(self) -> int:
        return self.clients

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(self.model.kind, input_dim, num_classes, self.model.hidden_dim)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


_TOP_KEYS = {"seed", "clients", "rounds", "local_steps", "eta_l", "eta_g", "batch_size",
             "full_batch", "freeloaders", "analysis_mode", "target_acc",
             "model", "data", "strategy", "detection", "cost"}
_SECTION_KEYS = {
    "model": {"kind", "hidden_dim"},
    "data": {"source", "dim", "num_classes", "n_per_class", "sep", "images", "labels",
             "test_fraction", "partition"},
    "data.partition": {"scheme", "phi", "groups"},
    "detection": {"enabled", "kappa", "lambda"},
    "cost": {"grad_eval_cost", "overhead"},
}
ANALYSIS_STRATEGIES = ("taco", "fedavg", "foolsgold")


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    *parents, leaf = key.split(".")
    start = 0
    if parents:
        header = re.compile(rf"^\s*\[{re.escape('.'.join(parents))}\]\s*$", re.M).search(text)
        if header:
            start = header.end()
    for pat in (rf"^\s*\[{re.escape(key)}\]", rf"^\s*{re.escape(leaf)}\s*="):
        m = re.compile(pat, re.M).search(text, start)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return None


def _check_keys(d: dict, allowed: set[str], prefix: str, text: str | None) -> None:
    for key in d:
        if key not in allowed:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigError("unknown key", path, _line_of(text, path))


def _get(d: dict, key: str, kind, default, path: str, text: str | None):
    if key not in d:
        return default
    v = d[key]
    ok = isinstance(v, kind) and not (kind in (int, float, (int, float)) and isinstance(v, bool))
    if not ok:
        raise ConfigError(f"wrong type {type(v).__name__}", path, _line_of(text, path))
    return float(v) if kind == (int, float) else v


def from_dict(raw: dict, text: str | None = None) -> RunConfig:
    _check_keys(raw, _TOP_KEYS, "", text)
    for sect in ("model", "data", "strategy"):
        if sect not in raw:
            raise ConfigError("missing required section", sect)
    num = (int, float)

    def sub(name):
        d = raw.get(name, {}) if "." not in name else raw.get("data", {}).get("partition", {})
        if not isinstance(d, dict):
            raise ConfigError("expected a table", name, _line_of(text, name))
        _check_keys(d, _SECTION_KEYS[name], name, text)
        return d

    m = sub("model")
    model = ModelConfig(kind=_get(m, "kind", str, "softmax", "model.kind", text),
                        hidden_dim=_get(m, "hidden_dim", int, 0, "model.hidden_dim", text))

    p = sub("data.partition")
    groups_raw = _get(p, "groups", list, [], "data.partition.groups", text)
    try:
        groups = tuple((int(g[0]), float(g[1])) for g in groups_raw)
    except (TypeError, IndexError, ValueError):
        raise ConfigError("groups must be a list of [size, label_fraction] pairs",
                          "data.partition.groups", _line_of(text, "data.partition.groups"))
    part = PartitionConfig(scheme=_get(p, "scheme", str, "iid", "data.partition.scheme", text),
                           phi=_get(p, "phi", num, 0.5, "data.partition.phi", text),
                           groups=groups)
    d = sub("data")
    data = DataConfig(
        source=_get(d, "source", str, "gaussian_mixture", "data.source", text),
        dim=_get(d, "dim", int, 20, "data.dim", text),
        num_classes=_get(d, "num_classes", int, 10, "data.num_classes", text),
        n_per_class=_get(d, "n_per_class", int, 200, "data.n_per_class", text),
        sep=_get(d, "sep", num, 3.0, "data.sep", text),
        images=_get(d, "images", str, "", "data.images", text),
        labels=_get(d, "labels", str, "", "data.labels", text),
        test_fraction=_get(d, "test_fraction", num, 0.2, "data.test_fraction", text),
        partition=part,
    )

    K = _get(raw, "local_steps", int, 10, "local_steps", text)
    T = _get(raw, "rounds", int, 100, "rounds", text)
    eta_l = _get(raw, "eta_l", num, 0.01, "eta_l", text)

    s = raw["strategy"]
    if not isinstance(s, dict):
        raise ConfigError("expected a table", "strategy", _line_of(text, "strategy"))
    name = _get(s, "name", str, None, "strategy.name", text)
    if name not in NAMES:
        raise ConfigError(f"must be one of {', '.join(NAMES)}", "strategy.name",
                          _line_of(text, "strategy.name"))
    _check_keys(s, {"name"} | set(PARAMS[name]), "strategy", text)
    kwargs = {}
    for key, default in PARAMS[name].items():
        path = f"strategy.{key}"
        if isinstance(default, bool):
            kwargs[key] = _get(s, key, bool, default, path, text)
        elif key in s:
            kwargs[key] = _get(s, key, num, None, path, text)
        elif key == "gamma":
            kwargs[key] = 1.0 / K if K > 0 else 1.0
        elif default is not None:
            kwargs[key] = default
    try:
        strategy = Strategy(name=name, **kwargs)
    except ValueError as e:
        key = str(e).split()[0] if str(e).startswith("strategy.") else "strategy"
        raise ConfigError(str(e), key, _line_of(text, key)) from None

    det = sub("detection")
    detection = DetectionConfig(
        enabled=_get(det, "enabled", bool, name == "taco", "detection.enabled", text),
        kappa=_get(det, "kappa", num, 0.6, "detection.kappa", text),
        lam=_get(det, "lambda", int, max(1, T // 5), "detection.lambda", text),
    )
    c = sub("cost")
    cost = CostConfig(
        grad_eval_cost=_get(c, "grad_eval_cost", num, 1.0, "cost.grad_eval_cost", text),
        overhead=_get(c, "overhead", num, DEFAULT_OVERHEAD[name], "cost.overhead", text),
    )

    cfg = RunConfig(
        model=model, data=data, strategy=strategy,
        seed=_get(raw, "seed", int, 0, "seed", text),
        clients=_get(raw, "clients", int, 10, "clients", text),
        rounds=T, local_steps=K, eta_l=eta_l,
        eta_g=_get(raw, "eta_g", num, K * eta_l, "eta_g", text),
        batch_size=_get(raw, "batch_size", int, 64, "batch_size", text),
        full_batch=_get(raw, "full_batch", bool, False, "full_batch", text),
        freeloaders=tuple(sorted(_get(raw, "freeloaders", list, [], "freeloaders", text))),
        analysis_mode=_get(raw, "analysis_mode", bool, False, "analysis_mode", text),
        target_acc=_get(raw, "target_acc", num, 0.0, "target_acc", text),
        detection=detection, cost=cost,
    )
    validate(cfg, text)
    return cfg


def validate(cfg: RunConfig, text: str | None = None) -> None:
    def fail(msg, path):
        raise ConfigError(msg, path, _line_of(text, path))

    if cfg.model.kind not in ("softmax", "mlp1"):
        fail("must be 'softmax' or 'mlp1'", "model.kind")
    if cfg.model.kind == "mlp1" and cfg.model.hidden_dim < 1:
        fail("must be >= 1 for mlp1", "model.hidden_dim")
    d = cfg.data
    if d.source not in ("gaussian_mixture", "idx"):
        fail("must be 'gaussian_mixture' or 'idx'", "data.source")
    if d.source == "gaussian_mixture":
        if d.dim < 2:
            fail("must be >= 2", "data.dim")
        if d.num_classes < 2:
            fail("must be >= 2", "data.num_classes")
        if d.n_per_class < 1:
            fail("must be >= 1", "data.n_per_class")
        if d.sep < 0:
            fail("must be >= 0", "data.sep")
    elif not (d.images and d.labels):
        fail("idx source needs both images and labels paths", "data.images")
    if not 0 <= d.test_fraction < 1:
        fail("must be in [0, 1)", "data.test_fraction")
    p = d.partition
    if p.scheme not in ("iid", "dirichlet", "label_groups"):
        fail("must be iid, dirichlet or label_groups", "data.partition.scheme")
    if p.scheme == "dirichlet" and not p.phi > 0:
        fail("must be > 0", "data.partition.phi")
    if p.scheme == "label_groups":
        if sum(g[0] for g in p.groups) != cfg.clients:
            fail("group sizes must sum to clients", "data.partition.groups")
        if any(not 0 < g[1] <= 1 for g in p.groups):
            fail("label fractions must be in (0, 1]", "data.partition.groups")
    if cfg.clients < 1:
        fail("must be >= 1", "clients")
    if cfg.rounds < 0:
        fail("must be >= 0", "rounds")
    if cfg.local_steps < 1:
        fail("must be >= 1", "local_steps")
    if not cfg.eta_l > 0:
        fail("must be > 0", "eta_l")
    if cfg.eta_g < 0:
        fail("must be >= 0", "eta_g")
    if cfg.batch_size < 1:
        fail("must be >= 1", "batch_size")
    if any(not isinstance(i, int) or not 0 <= i < cfg.clients for i in cfg.freeloaders):
        fail("freeloader ids must be client indices", "freeloaders")
    if len(set(cfg.freeloaders)) >= cfg.clients:
        fail("at least one client must be honest", "freeloaders")
    if not 0 <= cfg.target_acc <= 1:
        fail("must be in [0, 1]", "target_acc")
    if not 0 < cfg.detection.kappa <= 1:
        fail("must be in (0, 1]", "detection.kappa")
    if cfg.detection.lam < 1 or (cfg.rounds > 0 and cfg.detection.lam > cfg.rounds):
        fail("must be in [1, rounds]", "detection.lambda")
    if cfg.cost.grad_eval_cost < 0:
        fail("must be >= 0", "cost.grad_eval_cost")
    if cfg.cost.overhead < 0:
        fail("must be >= 0", "cost.overhead")
    if cfg.analysis_mode:
        if cfg.strategy.name not in ANALYSIS_STRATEGIES:
            fail(f"analysis mode supports {', '.join(ANALYSIS_STRATEGIES)} only", "analysis_mode")
        if cfg.freeloaders:
            fail("analysis mode requires all clients to be honest", "analysis_mode")


def parse_config(path) -> RunConfig:
    text = Path(path).read_text()
    return parse_text(text)


def parse_text(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"parse error: {e}", None, int(m.group(1)) if m else None) from None
    return from_dict(raw, text)


def to_dict(cfg: RunConfig) -> dict:
    part = asdict(cfg.data.partition)
    part["groups"] = [list(g) for g in cfg.data.partition.groups]
    data = asdict(cfg.data)
    data["partition"] = part
    strategy = {"name": cfg.strategy.name}
    strategy.update({k: v for k, v in cfg.strategy.params().items() if v is not None})
    return {
        "seed": cfg.seed,
        "clients": cfg.clients,
        "rounds": cfg.rounds,
        "local_steps": cfg.local_steps,
        "eta_l": cfg.eta_l,
        "eta_g": cfg.eta_g,
        "batch_size": cfg.batch_size,
        "full_batch": cfg.full_batch,
        "freeloaders": list(cfg.freeloaders),
        "analysis_mode": cfg.analysis_mode,
        "target_acc": cfg.target_acc,
        "model": asdict(cfg.model),
        "data": data,
        "strategy": strategy,
        "detection": {"enabled": cfg.detection.enabled, "kappa": cfg.detection.kappa,
                      "lambda": cfg.detection.lam},
        "cost": asdict(cfg.cost),
    }


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Re-validated copy of ``cfg`` with dotted-path overrides, e.g. ``{"strategy.gamma": 0.5}``."""
    raw = to_dict(cfg)
    new_name = changes.get("strategy.name")
    if new_name is not None and new_name != cfg.strategy.name:
        raw["strategy"] = {"name": new_name}
        # strategy-dependent defaults follow the new strategy unless pinned
        if cfg.cost.overhead == DEFAULT_OVERHEAD[cfg.strategy.name]:
            del raw["cost"]["overhead"]
        if cfg.detection.enabled == (cfg.strategy.name == "taco"):
            del raw["detection"]["enabled"]
    # values that still equal their derived default follow K, eta_l and T
    if {"local_steps", "eta_l"} & changes.keys() and "eta_g" not in changes:
        if cfg.eta_g == cfg.local_steps * cfg.eta_l:
            del raw["eta_g"]
    if "local_steps" in changes and "strategy.gamma" not in changes:
        if cfg.strategy.name == "taco" and cfg.strategy.gamma == 1.0 / cfg.local_steps:
            raw["strategy"].pop("gamma", None)
    if "rounds" in changes and "detection.lambda" not in changes:
        if cfg.detection.lam == max(1, cfg.rounds // 5):
            del raw["detection"]["lambda"]
    for path, value in changes.items():
        node = raw
        *parents, leaf = path.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return from_dict(raw)


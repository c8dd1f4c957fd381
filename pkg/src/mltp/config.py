"""Experiment configuration: a nested JSON document with strict keys.

Resolution order is built-in defaults, then the named ``profile``, then the
user's document. Unknown keys anywhere are an error. The resolved config
round-trips: dumping it and loading the dump yields the same config.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidInputError
from .meta import VARIANTS, ObjectiveConfig
from .nn import LayerSpec, NetworkSpec, cnet
from .optim import OptimizerSpec


@dataclass
class NetworkConfig:
    name: str = "net"
    preset: str | None = None
    width: float = 1.0
    activation: str = "relu"
    input_shape: list = field(default_factory=lambda: [2])
    num_classes: int = 2
    loss: str = "xent"
    layers: list = field(default_factory=lambda: [
        {"kind": "fc", "units": 32}, {"kind": "fc", "units": 32}, {"kind": "softmax", "units": 2}])


@dataclass
class AugmentConfig:
    pad: int = 0
    flip: bool = False
    crop: list | None = None


@dataclass
class DataConfig:
    source: str = "synth"
    kind: str = "spirals"
    classes: int = 2
    noise: float = 0.2
    n_train_per_class: int = 1000
    n_test_per_class: int = 500
    seed: int = 0
    num_features: int = 2
    train_path: str | None = None
    test_path: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    standardize: str = "none"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sampler: str = "split"


@dataclass
class ObjectiveSection:
    variant: str = "standard"
    eta: float = 1.0
    beta: float = 0.0
    mask: object = None


@dataclass
class AlphaConfig:
    mean: float = 0.001
    std: float = 0.001
    mode: str = "learnable"


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    schedule: list = field(default_factory=lambda: [[50, 0.1], [100, 0.1]])


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    profile: str = "adam150"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    alpha: AlphaConfig = field(default_factory=AlphaConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init: object = "xavier"
    epochs: int = 150
    batch_size: int = 128
    eval_batch_size: int = 1000
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    precision: int = 32
    deterministic: bool = False
    out_dir: str = "runs/experiment"

    def network_spec(self):
        return build_network(self.network)

    def objective_config(self):
        o = self.objective
        return ObjectiveConfig(o.variant, float(o.eta), float(o.beta), o.mask)

    def optimizer_spec(self):
        o = self.optimizer
        return OptimizerSpec(o.kind, float(o.lr), float(o.momentum), tuple(o.betas), float(o.eps),
                             tuple(tuple(s) for s in o.schedule))

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# The first profile mirrors the CIFAR protocol (Adam, /10 at 50 and 100,
# 150 epochs); the second the Tiny ImageNet one (momentum SGD, /10 at 30 and
# 60, 90 epochs, weight decay 1e-5).
PROFILES = {
    "adam150": {},
    "momentum90": {
        "init": "kaiming",
        "epochs": 90,
        "optimizer": {"kind": "momentum", "lr": 0.05, "momentum": 0.9,
                      "schedule": [[30, 0.1], [60, 0.1]]},
        "alpha": {"mean": 0.01, "std": 0.01},
        "objective": {"eta": 0.5, "beta": 1e-5},
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory \
            is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_LAYER_KEYS = {f.name for f in dataclasses.fields(LayerSpec)}


def build_network(net):
    """NetworkSpec from a network section (preset or explicit layer list)."""
    try:
        if net.preset:
            spec = cnet(net.preset, net.width, tuple(net.input_shape), net.num_classes,
                        net.activation)
            return dataclasses.replace(spec, name=net.name)
        layers = []
        for i, entry in enumerate(net.layers):
            if not isinstance(entry, dict):
                raise ConfigError(f"network.layers[{i}] must be an object")
            unknown = sorted(set(entry) - _LAYER_KEYS)
            if unknown:
                raise ConfigError(f"unknown key(s) in network.layers[{i}]: {', '.join(unknown)}")
            layers.append(LayerSpec(**entry))
        return NetworkSpec(tuple(layers), tuple(net.input_shape), net.num_classes, net.loss,
                           net.name)
    except InvalidInputError as exc:
        raise ConfigError(f"network: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"network: {exc}") from None


def validate(cfg):
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}; expected one of {sorted(PROFILES)}")
    cfg.network_spec()
    try:
        cfg.objective_config()
        cfg.optimizer_spec()
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None
    checks = [
        (cfg.precision in (32, 64), "precision must be 32 or 64"),
        (cfg.epochs >= 0, "epochs must be non-negative"),
        (cfg.batch_size >= 1, "batch_size must be positive"),
        (cfg.objective.variant == "standard" or cfg.batch_size >= 2,
         "MLTP variants need batch_size >= 2"),
        (cfg.eval_batch_size >= 1, "eval_batch_size must be positive"),
        (isinstance(cfg.seeds, list) and len(cfg.seeds) > 0, "seeds must be a non-empty list"),
        (cfg.alpha.mode in ("learnable", "fixed"), "alpha.mode must be learnable or fixed"),
        (cfg.data.source in ("synth", "csv", "idx"), "data.source must be synth, csv or idx"),
        (cfg.data.standardize in ("none", "per-image", "global"),
         "data.standardize must be none, per-image or global"),
        (cfg.data.sampler in ("split", "two-batches"), "data.sampler must be split or two-batches"),
        (cfg.objective.variant in VARIANTS, f"objective.variant must be one of {VARIANTS}"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return cfg


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    profile = data.get("profile", "adam150")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = dataclasses.asdict(ExperimentConfig())
    merged = _merge(_merge(base, PROFILES[profile]), data)
    # the validation pass rejects unknown keys in the user document itself
    _build(ExperimentConfig, data, "")
    return validate(_build(ExperimentConfig, merged, ""))


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(data)


def load(path):
    try:
        with open(path) as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def apply_overrides(cfg, seed=None, out=None, deterministic=None, precision=None):
    data = cfg.to_dict()
    if seed is not None:
        data["seeds"] = [int(seed)]
    if out is not None:
        data["out_dir"] = str(out)
    if deterministic:
        data["deterministic"] = True
    if precision is not None:
        data["precision"] = int(precision)
    return from_dict(data)

"""Plain-text run configuration: ``key=value`` lines with ``#`` comments.

Unknown keys are rejected; missing keys take the defaults listed in
:data:`SCHEMA`.
"""

import math
from dataclasses import dataclass, field, fields

from .fusion import ConstraintThresholds
from .model import FcnConfig
from .pso import SwarmConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text):
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t

    return parse


# key -> (parser, default)
SCHEMA = {
    # network and training
    "num_classes": (int, 4),
    "base_filters": (int, 16),
    "depth": (int, 2),
    "learning_rate": (_float, 0.05),
    "batch_size": (int, 8),
    "epochs": (int, 10),
    "l2": (_float, 0.0),
    "l1": (_float, 0.0),
    "seed": (int, 0),
    "augment": (_bool, True),
    # data selection
    "modality": (_choice("fused", "lidar", "sar", "optical"), "fused"),
    "denoise": (_bool, False),
    "train_frac": (_float, 0.70),
    "val_frac": (_float, 0.15),
    "eval_split": (_choice("all", "train", "val", "test"), "all"),
    "dataset": (str, ""),
    # budgets
    "budget_seconds": (_float, math.inf),
    "budget_macs": (_float, math.inf),
    # swarm
    "swarm_particles": (int, 10),
    "swarm_iters": (int, 15),
    "swarm_seed": (int, 0),
    "c1": (_float, 1.5),
    "c2": (_float, 1.5),
    "w_max": (_float, 0.9),
    "w_min": (_float, 0.4),
    "pso_eps": (_float, 1e-6),
    "patience": (int, 10),
    "v_clamp_frac": (_float, 0.2),
    "cost_penalty": (_float, 0.0),
    "tune_epochs": (int, 3),
    "tune_train_tiles": (int, 48),
    "tune_val_tiles": (int, 16),
    # audit thresholds
    "completeness": (_float, 0.0),
    "consistency": (_float, 0.0),
    "noise": (_float, 1.0),
    "pso_convergence": (_float, 1.0),
    "grad_bound": (_float, 1.0),
    "min_accuracy": (_float, 0.85),
    "max_test_error": (_float, 0.5),
    "regularization": (_float, math.inf),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    explicit: set = field(default_factory=set)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def with_values(self, **changes):
        vals = dict(self.values)
        for k, v in changes.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = v
        return RunConfig(vals, self.explicit | set(changes))

    def fcn_config(self, in_channels):
        return FcnConfig(
            in_channels=in_channels,
            num_classes=self.num_classes,
            base_filters=self.base_filters,
            depth=self.depth,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            l2=self.l2,
            l1=self.l1,
            seed=self.seed,
        )

    def swarm_config(self):
        return SwarmConfig(
            n_particles=self.swarm_particles,
            max_iters=self.swarm_iters,
            c1=self.c1,
            c2=self.c2,
            w_max=self.w_max,
            w_min=self.w_min,
            eps=self.pso_eps,
            patience=self.patience,
            v_clamp_frac=self.v_clamp_frac,
            seed=self.swarm_seed,
            cost_penalty=self.cost_penalty,
        )

    def thresholds(self):
        return ConstraintThresholds(**{f.name: self.values[f.name] for f in fields(ConstraintThresholds)})

    def to_text(self):
        return "".join(f"{k}={format_config_value(self.values[k])}\n" for k in SCHEMA)

    def as_dict(self):
        return {k: self.values[k] for k in SCHEMA}

    def validate(self):
        """Build every derived object once so bad values surface early."""
        try:
            self.fcn_config(1)
            self.swarm_config()
            self.thresholds()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.train_frac <= 1 or not 0 <= self.val_frac <= 1 or self.train_frac + self.val_frac > 1:
            raise ConfigError(f"invalid split fractions train_frac={self.train_frac} val_frac={self.val_frac}")
        for k in ("tune_epochs", "tune_train_tiles", "tune_val_tiles"):
            if self.values[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        return self


def format_config_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text, source="<config>"):
    values = {k: d for k, (_, d) in SCHEMA.items()}
    explicit = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in explicit:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        explicit.add(key)
    return RunConfig(values, explicit).validate()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), path)

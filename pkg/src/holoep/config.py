"""Run configuration: a flat dotted key=value text format.

One run is fully described by a small set of typed keys (model shape,
estimator protocol, optimizer, solver, data source, output directory).
The format is deliberately minimal for reproducibility: `key = value` lines,
`#` comments, no sections, no environment overrides except OUTPUT_DIR
(which, when set, replaces `output_dir` at load time).  Unknown keys are
rejected by name, and a config round-trips losslessly through text.
"""

import os
from dataclasses import dataclass, field

from .estimators import NudgeProtocol
from .fixedpoint import SolverSettings
from .models import ModelKind, Network
from .training import TrainConfig

__all__ = ["RunConfig", "ConfigError", "SCHEMA"]


class ConfigError(ValueError):
    """Unknown key, bad value, or unparseable config line."""


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    parts = [p for p in s.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


# key -> (parser, default). The parser receives the raw value string.
SCHEMA = {
    "model.kind": (str, "reciprocal"),
    "model.in_dim": (int, 784),
    "model.layer_dims": (_parse_ints, (256, 256, 10)),
    "model.n_classes": (int, 10),
    "model.alpha": (float, 0.0),
    "model.pcn_dt": (float, 0.5),
    "model.seed": (int, 0),
    "protocol.mode": (str, "npoint"),
    "protocol.amplitude": (float, 0.1),
    "protocol.n_points": (int, 4),
    "protocol.periods": (int, 1),
    "protocol.steps_per_point": (int, 60),
    "protocol.path_average": (_parse_bool, False),
    "train.batch_size": (int, 50),
    "train.lr": (float, 1e-2),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0),
    "train.epochs": (int, 50),
    "train.lambda_homeo": (float, 0.0),
    "train.seed": (int, 0),
    "train.hutchinson_samples": (int, 5),
    "train.probe_size": (int, 8),
    "train.checkpoint_interval": (int, 0),
    # accepted and recorded; batch estimation is vectorized across the batch
    # dimension, so the desk-scale runner stays single-process
    "train.workers": (int, 1),
    "solver.tolerance": (float, 1e-8),
    "solver.max_steps_free": (int, 150),
    "solver.max_steps_nudge": (int, 20),
    "solver.damping": (float, 0.0),
    "data.source": (str, "synth"),  # synth | fashion
    "data.dir": (str, ""),
    "data.n": (int, 4000),
    "data.d": (int, 784),
    "data.classes": (int, 10),
    "data.seed": (int, 0),
    "data.val_n": (int, 1000),
    "data.limit": (int, 0),  # 0 = no truncation (fashion source)
    "output_dir": (str, "runs/default"),
}


@dataclass
class RunConfig:
    """Typed view over the flat key space; values default from SCHEMA."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        # sequences normalize to tuples so direct construction and parse()
        # produce equal values
        merged.update({k: tuple(v) if isinstance(v, list) else v
                       for k, v in self.values.items()})
        self.values = merged

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    # -- text format --------------------------------------------------------

    @classmethod
    def parse(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value,"
                                  f" got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown config key"
                                  f" {key!r}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(val)
            except ValueError as err:
                raise ConfigError(f"line {lineno}: bad value for {key}:"
                                  f" {err}") from err
        return cls(values)

    @classmethod
    def load(cls, path):
        """Parse a config file; the OUTPUT_DIR environment variable, when
        set, overrides the output_dir key (the only env override)."""
        with open(path) as fh:
            cfg = cls.parse(fh.read())
        env_out = os.environ.get("OUTPUT_DIR")
        if env_out:
            cfg.values["output_dir"] = env_out
        return cfg

    def to_text(self):
        lines = [f"{key} = {_fmt(self.values[key])}" for key in SCHEMA]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    # -- typed builders ------------------------------------------------------

    def network(self):
        return Network(kind=ModelKind(self["model.kind"]),
                       in_dim=self["model.in_dim"],
                       layer_dims=tuple(self["model.layer_dims"]),
                       n_classes=self["model.n_classes"],
                       pcn_dt=self["model.pcn_dt"])

    def params(self, net=None):
        net = net or self.network()
        return net.init_params(self["model.seed"], alpha=self["model.alpha"])

    def protocol(self):
        return NudgeProtocol(amplitude=self["protocol.amplitude"],
                             mode=self["protocol.mode"],
                             n_points=self["protocol.n_points"],
                             periods=self["protocol.periods"],
                             steps_per_point=self["protocol.steps_per_point"],
                             path_average=self["protocol.path_average"])

    def solver(self):
        return SolverSettings(tolerance=self["solver.tolerance"],
                              max_steps_free=self["solver.max_steps_free"],
                              max_steps_nudge=self["solver.max_steps_nudge"],
                              damping=self["solver.damping"])

    def train_config(self):
        return TrainConfig(batch_size=self["train.batch_size"],
                           lr=self["train.lr"],
                           momentum=self["train.momentum"],
                           weight_decay=self["train.weight_decay"],
                           epochs=self["train.epochs"],
                           lambda_homeo=self["train.lambda_homeo"],
                           protocol=self.protocol(),
                           seed=self["train.seed"],
                           solver=self.solver(),
                           hutchinson_samples=self["train.hutchinson_samples"],
                           probe_size=self["train.probe_size"],
                           checkpoint_interval=self["train.checkpoint_interval"])

    def datasets(self):
        """(train, val) datasets per the data.* keys."""
        from .data import load_fashion_mnist, synth_teacher

        source = self["data.source"]
        if source == "synth":
            n, v = self["data.n"], self["data.val_n"]
            full = synth_teacher(n + v, self["data.d"],
                                 self["data.classes"], self["data.seed"])
            return full.subset(n), full.subset(v, start=n)
        if source == "fashion":
            directory = self["data.dir"]
            limit = self["data.limit"] or None
            train = load_fashion_mnist(directory, "train", limit=limit)
            val_limit = self["data.val_n"] or None
            val = load_fashion_mnist(directory, "test", limit=val_limit)
            return train, val
        raise ConfigError(f"data.source must be synth or fashion,"
                          f" got {source!r}")

"""JSON run configuration with dotted ``key=value`` overrides."""
import copy
import json
from dataclasses import asdict
from pathlib import Path

from .data import FeatureSpec
from .decision import DecisionConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .training import TrainConfig

DEFAULTS = {
    "output_dir": "run",
    "data": {
        # a manifest lists candle CSVs; without one the single `candles` file is used
        "manifest": None,
        "candles": "candles.csv",
        "dataset": "dataset.npz",
        "stride": 1,
    },
    "synth": {
        "seed": 0,
        "n_bars": 20000,
        "regime": "mean_reverting",
        "frequency_minutes": 15,
        "asset_id": "SYN",
        "volatility": 0.005,
        "price0": 100.0,
    },
    "split": {"val_date": None, "test_date": None, "val_fraction": 0.15, "test_fraction": 0.15},
    "features": asdict(FeatureSpec()),
    "encoder": asdict(EncoderConfig()),
    # min_rate stays null so it follows the horizon (1 / N**2)
    "decision": {k: v for k, v in asdict(DecisionConfig()).items() if k != "horizon"} | {"min_rate": None},
    "train": asdict(TrainConfig()),
    "paths": {
        "checkpoint": "model.npz",
        "train_log": "train_log.csv",
        "train_report": "train_report.json",
        "evaluation": "evaluation.npz",
        "reports": "reports",
    },
    "eval": {"eps_complete": 1e-6, "batch_size": 1024},
    "gradcheck": {
        "lookback": 2,
        "horizon": 4,
        "num_features": 3,
        "hidden_size": 4,
        "num_heads": 2,
        "batch_size": 2,
        "tolerance": 1e-4,
        "fraction": 0.01,
        "step": 1e-6,
        "seed": 0,
    },
}


class ConfigError(ValueError):
    pass


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(raw)


def merge(base, update, prefix=""):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix + key!r} must be an object")
            merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


class RunConfig:
    """Resolved configuration; relative paths are taken from ``output_dir``."""

    def __init__(self, raw, base_dir=Path(".")):
        self.raw = raw
        self.base_dir = Path(base_dir)
        out = Path(raw["output_dir"])
        self.output_dir = out if out.is_absolute() else Path(base_dir) / out
        try:
            self.features = FeatureSpec(**raw["features"])
            self.encoder = EncoderConfig(**raw["encoder"])
            self.decision = DecisionConfig(horizon=self.features.horizon_steps, **raw["decision"])
            self.train = TrainConfig(**raw["train"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        raw = copy.deepcopy(DEFAULTS)
        base_dir = Path(".")
        if path is not None:
            path = Path(path)
            try:
                merge(raw, json.loads(path.read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            base_dir = path.parent
        for assignment in overrides:
            apply_override(raw, assignment)
        if seed is not None:
            for section in ("synth", "train", "gradcheck"):
                raw[section]["seed"] = seed
        return cls(raw, base_dir)

    def path(self, name):
        p = Path(self.raw["paths"][name]) if name in self.raw["paths"] else Path(self.raw["data"][name])
        return p if p.is_absolute() else self.output_dir / p

    def model_config(self):
        return ModelConfig(self.features.lookback_steps, self.features.num_features, self.encoder, self.decision)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.raw, indent=2, sort_keys=True))

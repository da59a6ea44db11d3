"""Experiment configuration: flat INI-style files with full validation.

One master seed drives every random component through fixed, named
substreams (dataset, partition, participation, per-client minibatches,
model init), so adding or reordering components never perturbs the others
and ablation runs stay paired.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError

DATASET_KINDS = ("synthetic", "csv-labeled", "idx-pair")
PARTITION_SCHEMES = ("quantity", "dirichlet")
PARTICIPATION_MODES = ("fixed-fraction", "bernoulli")
LOSS_CHOICES = ("auto", "plain", "adjusted")
EVAL_RULES = ("plain", "balanced")
VARIANT_NAMES = ("scala", "ca_sfl", "lla_sfl", "splitfed_v1", "fedavg")

# named substreams of the master seed
_STREAM_CODES = {
    "dataset": 0,
    "eval_dataset": 1,
    "partition": 2,
    "init": 3,
    "participation": 4,
    "minibatch": 5,
}


def component_seed(master_seed: int, component: str, index: int | None = None) -> int:
    code = _STREAM_CODES[component]
    key = (code,) if index is None else (code, index)
    seq = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(seq.generate_state(1)[0])


def component_rng(
    master_seed: int, component: str, index: int | None = None
) -> np.random.Generator:
    code = _STREAM_CODES[component]
    key = (code,) if index is None else (code, index)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


@dataclass
class TrainingConfig:
    # dataset
    dataset_kind: str = "synthetic"
    classes: int = 10
    dim: int = 20
    per_class: int = 500
    separation: float = 3.0
    path: str = ""
    labels_path: str = ""
    # partition
    scheme: str = "quantity"
    alpha: int = 2
    beta: float = 0.3
    # model
    hidden: tuple[int, ...] = (32, 32)
    cut_index: int = 2
    # protocol
    variants: tuple[str, ...] = ("scala",)
    clients: int = 100
    rho: float = 0.1
    participation: str = "fixed-fraction"
    batch_size: int = 320
    local_iters: int = 20
    rounds: int = 100
    eta: float = 0.01
    server_loss: str = "auto"
    client_loss: str = "auto"
    bytes_per_scalar: int = 8
    # run
    seed: int = 0
    eval_period: int = 10
    eval_per_class: int = 100
    eval_rule: str = "plain"
    out_dir: str = "runs"

    @property
    def num_layers(self) -> int:
        n_dense = len(self.hidden) + 1
        return 2 * n_dense - 1

    def model_widths(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden, self.classes]


def _parse_int(value: str) -> int:
    return int(value)


def _parse_float(value: str) -> float:
    return float(value)


def _parse_str(value: str) -> str:
    return value.strip()


def _parse_int_tuple(value: str) -> tuple[int, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _parse_str_tuple(value: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in value.split(",") if p.strip())


# section -> key -> (config field, converter)
_SCHEMA = {
    "dataset": {
        "kind": ("dataset_kind", _parse_str),
        "classes": ("classes", _parse_int),
        "dim": ("dim", _parse_int),
        "per_class": ("per_class", _parse_int),
        "separation": ("separation", _parse_float),
        "path": ("path", _parse_str),
        "labels_path": ("labels_path", _parse_str),
    },
    "partition": {
        "scheme": ("scheme", _parse_str),
        "alpha": ("alpha", _parse_int),
        "beta": ("beta", _parse_float),
    },
    "model": {
        "hidden": ("hidden", _parse_int_tuple),
        "cut_index": ("cut_index", _parse_int),
    },
    "protocol": {
        "variants": ("variants", _parse_str_tuple),
        "clients": ("clients", _parse_int),
        "rho": ("rho", _parse_float),
        "participation": ("participation", _parse_str),
        "batch_size": ("batch_size", _parse_int),
        "local_iters": ("local_iters", _parse_int),
        "rounds": ("rounds", _parse_int),
        "eta": ("eta", _parse_float),
        "server_loss": ("server_loss", _parse_str),
        "client_loss": ("client_loss", _parse_str),
        "bytes_per_scalar": ("bytes_per_scalar", _parse_int),
    },
    "run": {
        "seed": ("seed", _parse_int),
        "eval_period": ("eval_period", _parse_int),
        "eval_per_class": ("eval_per_class", _parse_int),
        "eval_rule": ("eval_rule", _parse_str),
        "out_dir": ("out_dir", _parse_str),
    },
}


def parse_config(path: str | None = None, overrides: dict | None = None) -> TrainingConfig:
    """Read an INI file (missing keys fall back to defaults) and validate.

    overrides maps config field names to already-typed values and is
    applied after the file (used for CLI flags).
    """
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                field_name, converter = _SCHEMA[section][key]
                try:
                    values[field_name] = converter(raw)
                except ValueError:
                    raise ConfigError(
                        f"invalid value for {section}.{key}: {raw!r}"
                    ) from None
    if overrides:
        valid = {f.name for f in fields(TrainingConfig)}
        for name, value in overrides.items():
            if name not in valid:
                raise ConfigError(f"unknown config field {name}")
            if value is not None:
                values[name] = value
    cfg = TrainingConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: TrainingConfig) -> None:
    def require(condition: bool, message: str) -> None:
        if not condition:
            raise ConfigError(message)

    require(cfg.dataset_kind in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}")
    require(cfg.classes >= 2, "dataset.classes must be at least 2")
    require(cfg.dim >= 1, "dataset.dim must be positive")
    require(cfg.per_class >= 1, "dataset.per_class must be positive")
    if cfg.dataset_kind != "synthetic":
        require(bool(cfg.path), "dataset.path is required for file datasets")
    if cfg.dataset_kind == "idx-pair":
        require(bool(cfg.labels_path), "dataset.labels_path is required for idx-pair")

    require(cfg.scheme in PARTITION_SCHEMES, f"partition.scheme must be one of {PARTITION_SCHEMES}")
    if cfg.scheme == "quantity":
        require(1 <= cfg.alpha <= cfg.classes, "partition.alpha must lie in [1, classes]")
    if cfg.scheme == "dirichlet":
        require(cfg.beta > 0, "partition.beta must be positive")

    require(len(cfg.hidden) >= 1 and all(h >= 1 for h in cfg.hidden), "model.hidden must be positive widths")
    require(1 <= cfg.cut_index < cfg.num_layers, f"model.cut_index must lie in [1, {cfg.num_layers})")

    require(len(cfg.variants) >= 1, "protocol.variants must not be empty")
    for v in cfg.variants:
        require(v in VARIANT_NAMES, f"unknown protocol variant {v!r}")
    require(len(set(cfg.variants)) == len(cfg.variants), "protocol.variants has duplicates")
    require(cfg.clients >= 1, "protocol.clients must be positive")
    require(0 < cfg.rho <= 1, "protocol.rho must lie in (0, 1]")
    require(
        cfg.participation in PARTICIPATION_MODES,
        f"protocol.participation must be one of {PARTICIPATION_MODES}",
    )
    require(cfg.batch_size >= 1, "protocol.batch_size must be positive")
    expected_participants = max(1, round(cfg.rho * cfg.clients))
    require(
        cfg.batch_size >= expected_participants,
        f"protocol.batch_size must cover the {expected_participants} expected participants",
    )
    require(cfg.local_iters >= 0, "protocol.local_iters must be nonnegative")
    require(cfg.rounds >= 0, "protocol.rounds must be nonnegative")
    require(cfg.eta > 0, "protocol.eta must be positive")
    require(cfg.server_loss in LOSS_CHOICES, f"protocol.server_loss must be one of {LOSS_CHOICES}")
    require(cfg.client_loss in LOSS_CHOICES, f"protocol.client_loss must be one of {LOSS_CHOICES}")
    require(cfg.bytes_per_scalar >= 1, "protocol.bytes_per_scalar must be positive")

    require(cfg.eval_period >= 1, "run.eval_period must be positive")
    require(cfg.eval_per_class >= 1, "run.eval_per_class must be positive")
    require(cfg.eval_rule in EVAL_RULES, f"run.eval_rule must be one of {EVAL_RULES}")
    require(bool(cfg.out_dir), "run.out_dir must not be empty")

    if cfg.dataset_kind == "synthetic":
        total = cfg.classes * cfg.per_class
        require(
            cfg.batch_size <= total,
            f"protocol.batch_size {cfg.batch_size} exceeds the {total} training samples",
        )


def serialize_config(cfg: TrainingConfig) -> str:
    """Emit the INI form; parse_config(serialize_config(c)) == c."""
    parser = configparser.ConfigParser()
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, (field_name, _) in keys.items():
            value = getattr(cfg, field_name)
            if isinstance(value, tuple):
                parser[section][key] = ",".join(str(v) for v in value)
            else:
                parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

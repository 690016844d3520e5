"""Run configuration: strict JSON schemas for every CLI command.

Validation is exhaustive on purpose. Unknown keys are rejected with their
full dotted path (no silent typo absorption), missing required fields name
the path that is absent, and every resolved config is echoed next to the
run's outputs so an artifact can always be traced back to the exact settings
that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig, TrainConfig
from .decode import (DecodeConfig, SemiAR, Strategy, TokenMode, TokenSchedule)
from .errors import ConfigError
from .planner import PlannerTrainConfig
from .tasks import TASK_KINDS, TaskConfig

_REQUIRED = object()


@dataclass(frozen=True)
class Field:
    kind: str  # "int" | "float" | "str" | "bool" | "list"
    default: object = _REQUIRED
    choices: tuple = ()


@dataclass(frozen=True)
class Section:
    schema: dict
    optional: bool = False


def _check_scalar(value, field: Field, path: str):
    kind = field.kind
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    # bool subclasses int in Python; reject it explicitly for the numeric kinds
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected {kind}, got bool")
    if kind == "int":
        if not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        out = value
    elif kind == "float":
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        out = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        out = value
    elif kind == "list":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected a non-empty list")
        for i, item in enumerate(value):
            if isinstance(item, bool) or not isinstance(item, (int, str)):
                raise ConfigError(f"{path}[{i}]: expected int or string entries")
        out = value
    else:  # pragma: no cover - schema author error
        raise AssertionError(f"unknown field kind {kind!r}")
    if field.choices and out not in field.choices:
        raise ConfigError(
            f"{path}: {out!r} is not one of {sorted(field.choices)}")
    return out


def _resolve(data: dict, schema: dict, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for key in data:
        if key not in schema:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {dotted!r}")
    resolved = {}
    for key, spec in schema.items():
        dotted = f"{path}.{key}" if path else key
        if isinstance(spec, Section):
            sub = data.get(key)
            if sub is None:
                if spec.optional:
                    resolved[key] = None
                    continue
                sub = {}
            resolved[key] = _resolve(sub, spec.schema, dotted)
        else:
            if key in data:
                value = data[key]
                resolved[key] = None if value is None and spec.default is None \
                    else _check_scalar(value, spec, dotted)
            elif spec.default is _REQUIRED:
                raise ConfigError(f"missing required field {dotted!r}")
            else:
                resolved[key] = spec.default
    return resolved


# ---------------------------------------------------------------------------
# per-command schemas


def _path_section(optional: bool = False) -> Section:
    # Optional sha256 pin: when present the file on disk must still hash to
    # it, which is what protects a run against silently stale upstream
    # artifacts.
    return Section({"path": Field("str"), "sha256": Field("str", None)}, optional)


_TASK = Section({
    "kind": Field("str", choices=tuple(sorted(TASK_KINDS))),
    "count": Field("int"),
    "gen_len": Field("int"),
    "value_range": Field("int", 9),
    "payload_min": Field("int", 4),
    "payload_max": Field("int", 8),
    "chain_min": Field("int", 3),
    "chain_max": Field("int", 6),
    "modulus": Field("int", 8),
    "operand_max": Field("int", 9),
    "blanks_min": Field("int", 4),
    "blanks_max": Field("int", 8),
})

_MODEL = Section({
    "embed_dim": Field("int", 64),
    "n_layers": Field("int", 2),
    "n_heads": Field("int", 4),
    "hidden_dim": Field("int", 128),
    "time_conditioning": Field("bool", False),
    "head_init_scale": Field("float", 0.1),
})

_TRAIN = Section({
    "steps": Field("int"),
    "batch_size": Field("int", 32),
    "lr": Field("float", 3e-4),
    "beta1": Field("float", 0.9),
    "beta2": Field("float", 0.999),
    "weight_decay": Field("float", 0.01),
    "eval_every": Field("int", 250),
    "heldout_rounds": Field("int", 4),
    "divergence_factor": Field("float", 10.0),
    "log_every": Field("int", 25),
})

_DECODE = Section({
    "T": Field("int"),
    "L": Field("int"),
    "schedule": Section({
        "kind": Field("str", "linear", choices=("linear", "progressive")),
        "w": Field("int", 3),
        "v": Field("float", 1.0),
    }),
    "strategy": Section({
        "kind": Field("str", "top1_confidence",
                      choices=("top1_confidence", "probability_margin",
                               "ancestral", "random_initial", "delayed_random",
                               "planner_guided")),
        "d0": Field("int", None),
        "pool_size": Field("int", 32),
    }),
    "token_mode": Section({
        "kind": Field("str", "greedy", choices=("greedy", "temperature")),
        "tau": Field("float", 0.9),
    }),
    "eos_lambda_init": Field("float", None),
    "semi_ar": Section({
        "block_length": Field("int"),
        "steps_per_block": Field("int"),
    }, optional=True),
})

_SELECT = Section({
    "split": Field("str", "test", choices=("train", "test")),
    "limit": Field("int", None),
})

_PLANNER_MODEL = Section({
    "d_model": Field("int", 128),
    "n_layers": Field("int", 2),
    "n_heads": Field("int", 4),
    "ffn_dim": Field("int", 512),
    "pos_dim": Field("int", 16),
    "dropout": Field("float", 0.3),
})

_PLANNER_TRAIN = Section({
    "epochs": Field("int", 5),
    "batch_size": Field("int", 256),
    "lr": Field("float", 1e-4),
    "weight_decay": Field("float", 0.01),
    "val_fraction_mod": Field("int", 5),
})

COMMAND_SCHEMAS: dict[str, dict] = {
    "gen-tasks": {
        "seed": Field("int"),
        "task": _TASK,
    },
    "train-backbone": {
        "seed": Field("int"),
        "tasks": _path_section(),
        "model": _MODEL,
        "train": _TRAIN,
    },
    "gen-planner-data": {
        "seed": Field("int"),
        "tasks": _path_section(),
        "backbone": _path_section(),
        "decode": _DECODE,
        "planner_data": Section({
            "split": Field("str", "train", choices=("train", "test")),
            "n_prompts": Field("int"),
            "sets_per_prompt": Field("int"),
        }),
    },
    "train-planner": {
        "seed": Field("int"),
        "dataset": _path_section(),
        "backbone": _path_section(optional=True),
        "planner": _PLANNER_MODEL,
        "train": _PLANNER_TRAIN,
    },
    "decode": {
        "seed": Field("int"),
        "tasks": _path_section(),
        "backbone": _path_section(),
        "planner": _path_section(optional=True),
        "decode": _DECODE,
        "select": _SELECT,
    },
    "eval": {
        "seed": Field("int"),
        "tasks": _path_section(),
        "trajectories": Section({"dir": Field("str")}),
    },
    "analyze": {
        "seed": Field("int"),
        "backbone": _path_section(),
        "trajectories": Section({"dir": Field("str")}),
    },
    "ablate": {
        "seed": Field("int"),
        "tasks": _path_section(),
        "backbone": _path_section(),
        "planner": _path_section(),
        "decode": _DECODE,
        "select": _SELECT,
        "sweep": Section({
            "axis": Field("str", choices=("P", "T", "strategy")),
            "values": Field("list"),
            "n_samples": Field("int", 1),
        }),
    },
}


def resolve_config(command: str, raw: dict) -> dict:
    if command not in COMMAND_SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    return _resolve(raw, COMMAND_SCHEMAS[command], "")


# ---------------------------------------------------------------------------
# builders from resolved sections to module dataclasses


def build_task_config(d: dict) -> TaskConfig:
    return TaskConfig(**d)


def build_backbone_config(d: dict, vocab_size: int, max_len: int) -> BackboneConfig:
    return BackboneConfig(vocab_size=vocab_size, max_len=max_len, **d)


def build_train_config(d: dict) -> TrainConfig:
    if d["steps"] < 0:
        raise ConfigError("train.steps must be >= 0")
    return TrainConfig(
        steps=d["steps"], batch_size=d["batch_size"], lr=d["lr"],
        betas=(d["beta1"], d["beta2"]), weight_decay=d["weight_decay"],
        eval_every=d["eval_every"], heldout_rounds=d["heldout_rounds"],
        divergence_factor=d["divergence_factor"], log_every=d["log_every"],
    )


def build_decode_config(d: dict) -> tuple[DecodeConfig, SemiAR | None]:
    cfg = DecodeConfig(
        T=d["T"], L=d["L"],
        schedule=TokenSchedule(kind=d["schedule"]["kind"], w=d["schedule"]["w"],
                               v=d["schedule"]["v"]),
        strategy=Strategy(kind=d["strategy"]["kind"], d0=d["strategy"]["d0"],
                          pool_size=d["strategy"]["pool_size"]),
        token_mode=TokenMode(kind=d["token_mode"]["kind"],
                             tau=d["token_mode"]["tau"]),
        eos_lambda_init=d["eos_lambda_init"],
    )
    semi = None
    if d["semi_ar"] is not None:
        semi = SemiAR(block_length=d["semi_ar"]["block_length"],
                      steps_per_block=d["semi_ar"]["steps_per_block"])
    return cfg, semi


def build_planner_train_config(d: dict) -> PlannerTrainConfig:
    return PlannerTrainConfig(**d)


# ---------------------------------------------------------------------------
# digests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return raw

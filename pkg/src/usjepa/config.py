"""Run configuration: a nested key/value tree with typed defaults, loaded from TOML."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import tomli

from .masking import BlockConstraints, MaskSampler, PatchGrid
from .model import EncoderConfig, PredictorConfig, TeacherMode
from .numerics.optim import OptimizerConfig
from .objective import LossConfig
from .evaluation import ProbeConfig


class ConfigError(ValueError):
    pass


# Defaults describe the full-size recipe; the desk preset overrides sizes.
DEFAULTS: dict = {
    "run": {"seed": 0, "workers": 1},
    "data": {
        "manifest": "",  # empty: generate a synthetic corpus in memory
        "count": 2000,
        "classes": 3,
        "size": 224,
        "seed": 0,
        "n_t": 50000,
        "holdout": 0.05,
    },
    "encoder": {"patch_size": 16, "embed_dim": 768, "depth": 12, "heads": 12, "mlp_ratio": 4.0},
    "predictor": {"embed_dim": 384, "depth": 12, "heads": 12, "mlp_ratio": 4.0},
    "teacher": {"mode": "static", "source": "random", "momentum": [0.996, 1.0]},
    "masking": {
        "usrc": True,
        "target_scale": [0.075, 0.125],
        "target_aspect": [0.75, 1.5],
        "target_count": 4,
        "context_scale": [0.85, 1.0],
        "context_aspect": [0.75, 1.5],
        "tau": 10,
        "max_attempts": 20,
    },
    "optim": {
        "epochs": 100,
        "warmup_epochs": 10,
        "batch_size": 128,
        "base_lr": 5e-5,
        "start_lr": 5e-6,
        "final_lr": 5e-7,
        "wd_start": 0.04,
        "wd_final": 0.4,
        "betas": [0.9, 0.999],
        "epsilon": 1e-8,
    },
    "loss": {"kind": "smooth_l1", "beta": 1.0},
    "probe": {"lr": 1e-3, "weight_decay": 1e-4, "batch_size": 32, "max_epochs": 150, "patience": 15, "seeds": 5,
              "fractions": [0.01, 0.05, 0.10, 0.50, 1.0]},
}


def _check(tree: dict, ref: dict, where: str) -> None:
    for k, v in tree.items():
        path = f"{where}.{k}" if where else k
        if k not in ref:
            raise ConfigError(f"unknown key {path!r}")
        want = ref[k]
        if isinstance(want, dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be a table")
            _check(v, want, path)
        elif isinstance(want, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{path!r} must be a boolean")
        elif isinstance(want, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path!r} must be a number")
            if isinstance(want, int) and not isinstance(want, bool) and not isinstance(v, int):
                raise ConfigError(f"{path!r} must be an integer")
        elif isinstance(want, list):
            if not isinstance(v, list) or len(v) != len(want) and k != "fractions":
                raise ConfigError(f"{path!r} must be a list of {len(want)} numbers")
        elif isinstance(want, str) and not isinstance(v, str):
            raise ConfigError(f"{path!r} must be a string")


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides``; validated and built once."""
    tree: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                tree = tomli.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    _check(tree, DEFAULTS, "")
    cfg = merge(DEFAULTS, tree)
    if overrides:
        _check(overrides, DEFAULTS, "")
        cfg = merge(cfg, overrides)
    try:
        build(cfg)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def dump(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------


def encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(img_size=cfg["data"]["size"], patch_size=e["patch_size"], embed_dim=e["embed_dim"],
                         depth=e["depth"], heads=e["heads"], mlp_ratio=e["mlp_ratio"])


def predictor_config(cfg: dict) -> PredictorConfig:
    p = cfg["predictor"]
    return PredictorConfig(embed_dim=p["embed_dim"], depth=p["depth"], heads=p["heads"],
                           target_dim=cfg["encoder"]["embed_dim"], mlp_ratio=p["mlp_ratio"])


def teacher_mode(cfg: dict) -> TeacherMode:
    t = cfg["teacher"]
    return TeacherMode(kind=t["mode"], source=t["source"], momentum=tuple(t["momentum"]))


def mask_sampler(cfg: dict) -> MaskSampler:
    m = cfg["masking"]
    grid = PatchGrid(cfg["data"]["size"], cfg["data"]["size"], cfg["encoder"]["patch_size"])
    target = BlockConstraints(tuple(m["target_scale"]), tuple(m["target_aspect"]), m["target_count"], m["tau"])
    context = BlockConstraints(tuple(m["context_scale"]), tuple(m["context_aspect"]), 1, m["tau"])
    return MaskSampler(grid, target, context, usrc=m["usrc"], max_attempts=m["max_attempts"])


def optimizer_config(cfg: dict) -> OptimizerConfig:
    o = cfg["optim"]
    return OptimizerConfig(base_lr=o["base_lr"], start_lr=o["start_lr"], final_lr=o["final_lr"],
                           warmup_epochs=o["warmup_epochs"], total_epochs=o["epochs"], wd_start=o["wd_start"],
                           wd_final=o["wd_final"], betas=tuple(o["betas"]), epsilon=o["epsilon"])


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(kind=cfg["loss"]["kind"], beta=cfg["loss"]["beta"])


def probe_config(cfg: dict) -> ProbeConfig:
    p = cfg["probe"]
    return ProbeConfig(lr=p["lr"], weight_decay=p["weight_decay"], batch_size=p["batch_size"],
                       max_epochs=p["max_epochs"], patience=p["patience"])


def build(cfg: dict) -> None:
    """Construct every typed view so invalid values fail before any work starts."""
    enc = encoder_config(cfg)
    predictor_config(cfg)
    teacher_mode(cfg)
    mask_sampler(cfg)
    optimizer_config(cfg)
    loss_config(cfg)
    probe_config(cfg)
    if enc.embed_dim % enc.heads or cfg["predictor"]["embed_dim"] % cfg["predictor"]["heads"]:
        raise ConfigError("embedding dims must be divisible by head counts")
    d = cfg["data"]
    if not 0 < d["holdout"] < 1:
        raise ConfigError("data.holdout must be in (0, 1)")
    if d["count"] < 1 or d["classes"] < 1 or cfg["run"]["workers"] < 1 or cfg["probe"]["seeds"] < 1:
        raise ConfigError("counts must be positive")
    if cfg["optim"]["batch_size"] < 1 or cfg["optim"]["epochs"] < 1:
        raise ConfigError("optim.batch_size and optim.epochs must be positive")
    if not all(0 < f <= 1 for f in cfg["probe"]["fractions"]):
        raise ConfigError("probe.fractions must lie in (0, 1]")


def resolve_path(cfg_path, value: str) -> str:
    """Relative paths inside a config file are taken relative to that file."""
    if not value or cfg_path is None or Path(value).is_absolute():
        return value
    return str((Path(cfg_path).parent / value).resolve())

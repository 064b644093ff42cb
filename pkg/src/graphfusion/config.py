"""Layered key-value configuration.

Config files hold ``key = value`` lines with dotted keys (``#`` comments and
blank lines allowed). Effective settings are defaults, overlaid by the file,
overlaid by ``--set key=value`` flags. Values stay strings until a consumer
asks for a typed view.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, str] = {
    # synthetic data generation
    "generate.seed": "0",
    "generate.n_patients": "20",
    "generate.samples_per_patient": "1",
    "generate.height": "48",
    "generate.width": "48",
    "generate.endpoint": "fibrosis",
    "generate.w_a": "0.3",
    "generate.w_b": "0.3",
    "generate.w_ab": "0.4",
    "generate.rater_ids": "rater1,rater2,rater3",
    "generate.rater_biases": "0.8,-0.8,0.0",
    "generate.rater_noise": "0.1",
    "generate.class_profile": "uniform",
    # heatmap -> graph construction
    "graph.n_pixels": "10000",
    "graph.target_k": "5000",
    "graph.knn_k": "5",
    "graph.birch_threshold": "0.25",
    "graph.birch_branching": "50",
    "graph.logit_weight": "1.0",
    "graph.seed": "0",
    "graph.extra_feature_blocks": "",
    # patient-based splitting
    "split.train": "0.6",
    "split.val": "0.2",
    "split.test": "0.2",
    "split.seed": "0",
    # training
    "train.endpoint": "fibrosis",
    "train.strategy": "late_concat",
    "train.max_iterations": "7000",
    "train.lr": "1e-4",
    "train.batch_size": "16",
    "train.val_every": "100",
    "train.patience": "10",
    "train.seed": "0",
    "train.d_h": "128",
    "train.n_conv_layers": "2",
    "train.sagpool_ratio": "0.5",
    "train.fusion_dim": "128",
    "train.readout": "mean",
    "train.head_hidden": "",
    "train.head_dropout": "",
    "train.symmetric_edges": "false",
    "train.clamp_normalizer": "false",
    "train.kron_bilinear_gate": "false",
    # evaluation
    "eval.n_resamples": "400",
    "eval.seed": "0",
    "eval.consensus_leave_one_out": "true",
    "eval.baseline": "true",
    "eval.svg": "true",
}


def load_config_file(path) -> dict[str, str]:
    """Parse a config file into a flat key -> raw-string mapping."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def apply_overrides(cfg: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def effective_config(
    path=None, overrides: list[str] | None = None, seed: int | None = None
) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(load_config_file(path))
    if seed is not None:
        for key in ("generate.seed", "graph.seed", "split.seed", "train.seed", "eval.seed"):
            cfg[key] = str(seed)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def format_config(cfg: dict[str, str]) -> str:
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"


# Typed accessors; every failure names the offending field.

def _fail(key: str, value: str, kind: str):
    raise ConfigError(f"config field '{key}': cannot parse '{value}' as {kind}")


def get_int(cfg: dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except KeyError:
        raise ConfigError(f"missing config field '{key}'") from None
    except ValueError:
        _fail(key, cfg[key], "int")


def get_float(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except KeyError:
        raise ConfigError(f"missing config field '{key}'") from None
    except ValueError:
        _fail(key, cfg[key], "float")


def get_bool(cfg: dict[str, str], key: str) -> bool:
    value = cfg.get(key)
    if value is None:
        raise ConfigError(f"missing config field '{key}'")
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    _fail(key, value, "bool")


def get_str(cfg: dict[str, str], key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"missing config field '{key}'")
    return cfg[key]


def get_float_list(cfg: dict[str, str], key: str) -> list[float]:
    raw = get_str(cfg, key).strip()
    if not raw:
        return []
    try:
        return [float(p) for p in raw.split(",")]
    except ValueError:
        _fail(key, raw, "comma-separated floats")


def get_int_list(cfg: dict[str, str], key: str) -> list[int]:
    raw = get_str(cfg, key).strip()
    if not raw:
        return []
    try:
        return [int(p) for p in raw.split(",")]
    except ValueError:
        _fail(key, raw, "comma-separated ints")


def get_str_list(cfg: dict[str, str], key: str) -> list[str]:
    raw = get_str(cfg, key).strip()
    return [p.strip() for p in raw.split(",") if p.strip()] if raw else []

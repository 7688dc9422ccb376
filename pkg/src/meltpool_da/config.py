"""Flat key=value run configuration.

CLI flags override file values; the merged result is written next to each
command's outputs as `resolved_config.txt`, and a run is reproducible
from that snapshot alone.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

# every known key with its default (type is inferred from the default)
DEFAULTS = {
    # phase / training
    "seed": 0,
    "epochs": 24,
    "batch_size": 64,
    "lr_encoder": 1e-3,
    "lr_task": 3e-6,
    "lr_domain": 1e-5,
    "lambda": 1.0,
    "disc_metric": "symmetric-bce",
    "domain_head": "deep",
    "conv_tol": 0.0,            # 0 disables the convergence rule
    "conv_window": 3,
    "deterministic": True,
    "strict": False,
    # augmentation
    "pixel_size_source": 8.0,
    "pixel_size_target": 25.0,
    "zoom_factor": 0.0625,
    "zoom_lo": 0.3,             # override range; set both to 0 to use zoom_factor
    "zoom_hi": 0.35,
    "blur_prob": 0.5,
    "blur_sigma_lo": 0.5,
    "blur_sigma_hi": 1.5,
    "dihedral": True,
    "copies": 10,
    "include_originals": False,
    # preparation
    "denoise_source": "none",
    "denoise_target": "median3",
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then CLI overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(), source=str(p)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def snapshot_text(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def write_snapshot(cfg: dict, out_dir) -> str:
    """Write resolved_config.txt and return its digest."""
    text = snapshot_text(cfg)
    Path(out_dir, "resolved_config.txt").write_text(text)
    return config_digest(cfg)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(snapshot_text(cfg).encode()).hexdigest()

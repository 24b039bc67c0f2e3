"""Flat key=value run configuration (UTF-8, ``#`` comments)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "parse_config"]


class ConfigError(ValueError):
    """One or more invalid configuration entries; message lists all of them."""


@dataclass
class RunConfig:
    data_path: str = ""
    data_num_types: int | None = None
    data_max_len: int | None = None
    vae_d_latent: int = 32
    vae_beta_min: float = 1e-5
    vae_beta_max: float = 1e-2
    vae_steps: int = 2000
    dm_schedule: str = "async"
    dm_layers: int = 4
    dm_heads: int = 4
    dm_d_model: int = 128
    dm_steps: int = 20_000
    dm_batch: int = 64
    solver_kind: str = "euler"
    solver_substeps: int = 8
    seed: int = 0
    dtype: str = "f32"


_KEY_TO_FIELD = {
    "data.path": ("data_path", str),
    "data.num_types": ("data_num_types", int),
    "data.max_len": ("data_max_len", int),
    "vae.d_latent": ("vae_d_latent", int),
    "vae.beta_min": ("vae_beta_min", float),
    "vae.beta_max": ("vae_beta_max", float),
    "vae.steps": ("vae_steps", int),
    "dm.schedule": ("dm_schedule", str),
    "dm.layers": ("dm_layers", int),
    "dm.heads": ("dm_heads", int),
    "dm.d_model": ("dm_d_model", int),
    "dm.steps": ("dm_steps", int),
    "dm.batch": ("dm_batch", int),
    "solver.kind": ("solver_kind", str),
    "solver.substeps": ("solver_substeps", int),
    "seed": ("seed", int),
    "dtype": ("dtype", str),
}

_ENUMS = {
    "dm.schedule": ("async", "disjoint", "sync"),
    "solver.kind": ("euler", "rk4"),
    "dtype": ("f32", "f64"),
}


def parse_config(path: str | Path) -> RunConfig:
    """Parse and validate; every offending key is listed in one error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    errors: list[str] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key=value, got {line!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        field_name, caster = _KEY_TO_FIELD[key]
        try:
            parsed = caster(value)
        except ValueError:
            errors.append(f"line {lineno}: key {key!r} expects {caster.__name__}, "
                          f"got {value!r}")
            continue
        if key in _ENUMS and parsed not in _ENUMS[key]:
            errors.append(f"line {lineno}: key {key!r} must be one of "
                          f"{', '.join(_ENUMS[key])}")
            continue
        setattr(cfg, field_name, parsed)

    if not cfg.data_path:
        errors.append("missing required key 'data.path'")
    elif not Path(cfg.data_path).exists():
        errors.append(f"key 'data.path': file does not exist: {cfg.data_path}")
    for name, lo in (("vae_d_latent", 1), ("vae_steps", 1), ("dm_layers", 1),
                     ("dm_heads", 1), ("dm_d_model", 1), ("dm_steps", 1),
                     ("dm_batch", 1), ("solver_substeps", 1)):
        if getattr(cfg, name) < lo:
            key = next(k for k, (f, _) in _KEY_TO_FIELD.items() if f == name)
            errors.append(f"key {key!r} must be >= {lo}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg

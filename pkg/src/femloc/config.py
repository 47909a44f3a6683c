"""Flat key=value config files; CLI flags override file values.

World keys: world_seed, bounds (six comma-separated numbers), descriptor_dim,
length_scale, n_boxes, noise_sigma, fx, fy, cx, cy, width, height. Run keys
mirror the RunConfig fields (voxel_size, particles, sigma_l_c, bandwidth,
ransac_iters, ...). Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

from .errors import ParseError
from .harness import RunConfig
from .world import WorldSpec

_WORLD_KEYS = {
    "world_seed": "seed",
    "bounds": "bounds",
    "descriptor_dim": "descriptor_dim",
    "length_scale": "length_scale",
    "n_boxes": "n_boxes",
    "noise_sigma": "noise_sigma",
    "fx": "fx",
    "fy": "fy",
    "cx": "cx",
    "cy": "cy",
    "width": "width",
    "height": "height",
}


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ParseError("expected key=value", lineno)
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, typ):
    if typ is float:
        return float(value)
    if typ is int:
        return int(value)
    if typ is str:
        return value
    raise ParseError(f"unsupported config value type {typ}", 0)


def split_config(items: dict[str, str]) -> tuple[WorldSpec, RunConfig]:
    """Build (WorldSpec, RunConfig) from a flat mapping, rejecting unknown keys."""
    run_fields = {f.name: f.type for f in fields(RunConfig)}
    world_kwargs = {}
    run_kwargs = {}
    for key, value in items.items():
        if key in _WORLD_KEYS:
            target = _WORLD_KEYS[key]
            if target == "bounds":
                parts = [float(p) for p in value.replace(",", " ").split()]
                if len(parts) != 6:
                    raise ParseError(f"bounds needs 6 numbers, got {len(parts)}", 0)
                world_kwargs["bounds"] = tuple(parts)
            elif target in ("seed", "descriptor_dim", "n_boxes", "width", "height"):
                world_kwargs[target] = int(value)
            else:
                world_kwargs[target] = float(value)
        elif key in run_fields:
            typ = RunConfig.__dataclass_fields__[key].type
            pytype = {"float": float, "int": int, "str": str}.get(typ, typ)
            run_kwargs[key] = _coerce(value, pytype)
        else:
            raise ParseError(f"unknown config key {key!r}", 0)
    return WorldSpec(**world_kwargs), RunConfig(**run_kwargs)


def load_config(path: Optional[str], overrides: dict[str, str]) -> tuple[WorldSpec, RunConfig]:
    items = parse_config_file(path) if path else {}
    items.update({k: v for k, v in overrides.items() if v is not None})
    return split_config(items)

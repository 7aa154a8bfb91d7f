"""Flat key=value run configuration files.

Unknown keys are rejected; missing keys fall back to the documented
defaults.  Lines may be blank or start with '#'.
"""

from __future__ import annotations

from .errors import DataError, UsageError
from .pipeline import MEMORY_POLICIES, ExtractorConfig, PipelineConfig
from .refinement import RefineConfig, Scorer

_INT_KEYS = ("budget", "radius", "stride", "patch", "d_k", "d_v", "seed", "absorb_interval")
_FLOAT_KEYS = ("epsilon_h", "lambda_p", "epsilon_l", "lambda_u", "u_threshold", "tau_d")
_STR_KEYS = ("memory_policy",)

DEFAULTS = {
    "epsilon_h": 0.95,
    "lambda_p": 0.9,
    "epsilon_l": 1e-4,
    "lambda_u": 0.5,
    "budget": 1024,
    "radius": 10,
    "u_threshold": 0.7,
    "stride": 4,
    "patch": 8,
    "d_k": 32,
    "d_v": 32,
    "tau_d": 3.0,
    "seed": 0,
    "memory_policy": "afb",
    "absorb_interval": 1,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = dict(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in DEFAULTS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise DataError(f"{source}:{lineno}: bad value {val!r} for {key}")
    if values["memory_policy"] not in MEMORY_POLICIES:
        raise UsageError(f"{source}: memory_policy must be one of {MEMORY_POLICIES}")
    return values


def load_config(path=None) -> dict:
    if path is None:
        return dict(DEFAULTS)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}")
    return parse_config_text(text, source=str(path))


def build_pipeline_config(values: dict, scorer: Scorer | None = None, threads: int = 1,
                          memory_policy: str | None = None, u_threshold: float | None = None) -> PipelineConfig:
    """Materialize a PipelineConfig, with optional CLI-level overrides."""
    from .pipeline import DEFAULT_SCORER

    refine = RefineConfig(
        radius=values["radius"],
        u_threshold=values["u_threshold"] if u_threshold is None else u_threshold,
        scorer=scorer if scorer is not None else DEFAULT_SCORER,
    )
    extractor = ExtractorConfig(
        stride=values["stride"],
        patch=values["patch"],
        d_k=values["d_k"],
        d_v=values["d_v"],
        proj_seed=values["seed"],
    )
    return PipelineConfig(
        extractor=extractor,
        refine=refine,
        epsilon_h=values["epsilon_h"],
        lambda_p=values["lambda_p"],
        epsilon_l=values["epsilon_l"],
        budget=values["budget"],
        lambda_u=values["lambda_u"],
        tau_d=values["tau_d"],
        memory_policy=memory_policy if memory_policy is not None else values["memory_policy"],
        absorb_interval=values["absorb_interval"],
        threads=threads,
    )

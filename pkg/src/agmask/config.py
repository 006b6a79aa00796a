"""TOML configuration: shipped defaults, user file, CLI overrides.

Flat [pipeline]/[prompting]/[segmenter] tables; unknown tables or keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .pipeline import PipelineConfig
from .prompting import PromptConfig
from .segmenter import SegmenterConfig

_TABLES = {
    "pipeline": ("checkpoint", "similarity_gate", "prompt_mode", "workers", "seed"),
    "prompting": ("activation_fraction", "connectivity", "sample_count",
                  "sample_radius", "seed"),
    "segmenter": ("backend", "color_tolerance", "timeout", "external_command"),
}


def default_config_text() -> str:
    return resources.files("agmask").joinpath("default.toml").read_text("utf-8")


def _parse(text: str, origin: str) -> dict:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: invalid TOML: {exc}") from exc
    for table, values in data.items():
        if table not in _TABLES:
            raise ConfigError(f"{origin}: unknown table [{table}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{table}] must be a table")
        for key in values:
            if key not in _TABLES[table]:
                raise ConfigError(f"{origin}: unknown key {table}.{key}")
    return data


def _merge(base: dict, overlay: dict) -> dict:
    out = {table: dict(values) for table, values in base.items()}
    for table, values in overlay.items():
        out.setdefault(table, {}).update(values)
    return out


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> PipelineConfig:
    """Build the pipeline config: defaults <- user file <- overrides.

    ``overrides`` uses the same table/key structure as the TOML file with
    None values meaning "not set".
    """
    data = _parse(default_config_text(), "defaults")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = _merge(data, _parse(path.read_text("utf-8"), str(path)))
    if overrides:
        cleaned = {
            table: {k: v for k, v in values.items() if v is not None}
            for table, values in overrides.items()}
        for table, values in cleaned.items():
            if table not in _TABLES:
                raise ConfigError(f"override: unknown table [{table}]")
            for key in values:
                if key not in _TABLES[table]:
                    raise ConfigError(f"override: unknown key {table}.{key}")
        data = _merge(data, cleaned)

    pipe = data.get("pipeline", {})
    prompt = data.get("prompting", {})
    seg = data.get("segmenter", {})
    try:
        return PipelineConfig(
            checkpoint=str(pipe.get("checkpoint", "")),
            similarity_gate=float(pipe.get("similarity_gate", 0.489)),
            prompt_mode=str(pipe.get("prompt_mode", "multi")),
            workers=int(pipe.get("workers", 1)),
            seed=int(pipe.get("seed", 0)),
            prompting=PromptConfig(
                activation_fraction=float(prompt.get("activation_fraction", 0.8)),
                connectivity=int(prompt.get("connectivity", 8)),
                sample_count=int(prompt.get("sample_count", 3)),
                sample_radius=(None if prompt.get("sample_radius") is None
                               else int(prompt["sample_radius"])),
                seed=int(prompt.get("seed", 0)),
            ),
            segmenter=SegmenterConfig(
                backend=str(seg.get("backend", "reference")),
                color_tolerance=float(seg.get("color_tolerance", 30.0)),
                timeout=float(seg.get("timeout", 10.0)),
                external_command=[str(c) for c in seg.get("external_command", [])],
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc

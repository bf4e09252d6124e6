"""Versioned run configuration files (JSON), parsed strictly and echoed with every default filled in."""

import json
import os
from typing import Literal, Optional

from pydantic import ValidationError

from .search import PipelineConfig

RUN_SCHEMA = "dms.run/1"


class ConfigError(ValueError):
    pass


class RunConfig(PipelineConfig):
    """A :class:`PipelineConfig` plus where to write the run, under a schema tag."""

    schema_version: Literal["dms.run/1"] = RUN_SCHEMA
    out_dir: Optional[str] = None

    def pipeline_config(self):
        return PipelineConfig.model_validate(self.model_dump(exclude={"schema_version", "out_dir"}))


def _loc(loc):
    return ".".join(str(p) for p in loc) or "<root>"


def format_errors(err):
    """One ``key.path: message`` line per validation error."""
    return "\n".join(f"{_loc(e['loc'])}: {e['msg']}" for e in err.errors())


def _resolve(path, base):
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base, path))


def parse_config(path):
    """Read, validate and complete a run configuration.

    Unknown keys, wrong types and bad enum values are errors reported with
    their key path.  Relative file paths inside the config resolve against
    the config file's directory.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    tag = raw.get("schema_version", RUN_SCHEMA)
    if tag != RUN_SCHEMA:
        raise ConfigError(f"{path}: schema_version {tag!r} is not supported (expected {RUN_SCHEMA!r})")
    try:
        cfg = RunConfig.model_validate_json(json.dumps(raw), strict=True)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid configuration\n{format_errors(exc)}") from None
    base = os.path.dirname(os.path.abspath(path))
    updates = {
        "checkpoint": _resolve(cfg.checkpoint, base),
        "out_dir": _resolve(cfg.out_dir, base),
        "resource": cfg.resource.model_copy(update={
            "latency_table": _resolve(cfg.resource.latency_table, base),
            "latency_fit": _resolve(cfg.resource.latency_fit, base)}),
        "task": cfg.task.model_copy(update={"path": _resolve(cfg.task.path, base)}),
    }
    return cfg.model_copy(update=updates)


def dumps_config(cfg):
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def echo_config(cfg, out_dir):
    """Write the completed configuration to ``out_dir/config.json``; returns the path."""
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))
    return path

"""Experiment configuration: JSON files validated against a versioned schema.

All defaults live in ``configs/schema.json``. A loaded config is the schema
defaults, overlaid with the file, overlaid with ``MNMTLAB_*`` environment
variables (``MNMTLAB_SEED=3``, ``MNMTLAB_SEARCH__T_MAX=200``; values are
parsed as JSON when possible).
"""

from __future__ import annotations

import copy
import json
import os
from importlib import resources

import jsonschema

from .errors import ConfigError

ENV_PREFIX = "MNMTLAB_"


def schema():
    return json.loads(resources.files("mnmtlab").joinpath("configs/schema.json").read_text(encoding="utf-8"))


def defaults():
    out = {}
    for key, prop in schema()["properties"].items():
        if "default" in prop:
            out[key] = prop["default"]
        elif prop.get("type") == "object" and "properties" in prop and key != "corpus":
            out[key] = {k: v["default"] for k, v in prop["properties"].items() if "default" in v}
    return out


def builtin(name):
    """Text of a bundled config (``toy``)."""
    path = resources.files("mnmtlab").joinpath(f"configs/{name}.json")
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return path.read_text(encoding="utf-8")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "corpus":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    return cfg


def resolve(raw, environ=None, overrides=None):
    """Defaults + ``raw`` + environment + explicit ``overrides``, validated."""
    cfg = _merge(defaults(), raw)
    cfg = _merge(cfg, env_overrides(environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def load(path, environ=None, overrides=None):
    """Load a config file (or a bundled name such as ``toy``)."""
    if path in ("toy",) and not os.path.exists(path):
        text, where = builtin(path), f"<bundled {path}>"
    else:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        where = str(path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where}:{e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    return resolve(raw, environ, overrides)

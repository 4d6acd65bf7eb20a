"""Flat ``key = value`` experiment configs.

A config file is plain text, one setting per line, ``#`` or ``;`` comments
allowed. Keys are the field names of :class:`~avspeaker.data.SynthConfig`
and :class:`~avspeaker.trainer.TrainConfig`; values are parsed with the type
of the matching field. Example::

    # desk-scale run
    n_speakers = 50
    label_coverage = 0.8
    lr_init = 0.001
    aux_enabled = true

Command-line flags are applied on top of whatever the file sets.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Dict, Iterable

_SECTION = "config"
_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


class ConfigError(ValueError):
    pass


def read_flat_config(path) -> Dict[str, str]:
    """Raw string values of a flat config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message.splitlines()[0]}") from exc
    return dict(parser[_SECTION])


def _convert(name: str, raw: str, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            return _BOOL[raw.strip().lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def split_for(values: Dict[str, str], *targets) -> list:
    """Build one dataclass per target from ``values``, each taking the keys
    it declares. Keys no target declares are an error."""
    known = set()
    out = []
    for target in targets:
        fields = {f.name: f.type for f in dataclasses.fields(target)}
        known.update(fields)
        kwargs = {k: _convert(k, v, fields[k]) for k, v in values.items() if k in fields}
        out.append(dataclasses.replace(target, **kwargs))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return out


def dump(objs: Iterable) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"

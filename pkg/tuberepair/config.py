"""Flat ``key = value`` configuration files for the command line.

Keys are flag names without the leading dashes, with ``-`` or ``_``. Values given in a file become argparse
defaults, so a flag on the command line always wins::

    # train.cfg
    variant = two
    base-width = 16
    data = runs/airway runs/vessel
"""
from __future__ import annotations

import argparse
import logging
import shlex
from typing import Dict, Iterable, List

from tuberepair.errors import StorageError, UsageError
from tuberepair.util import PathLike

logger = logging.getLogger(__name__)

TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    """Key -> raw value. Blank lines and lines starting with ``#`` are skipped; a repeated key keeps the last value.

    Raises
    ------
    UsageError
        A line without ``=`` or with an empty key

    Example
    -------
    >>> parse_config("# run\\nbase-width = 8\\nseed=3\\n")
    {'base_width': '8', 'seed': '3'}
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not normalize_key(key):
            raise UsageError(f"{source}:{number}: expected key = value, got {stripped!r}")
        values[normalize_key(key)] = value.strip()
    return values


def read_config(path: PathLike) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def _parse_bool(key: str, value: str) -> bool:
    if value.lower() in TRUE_WORDS:
        return True
    if value.lower() in FALSE_WORDS:
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {value!r}")


def _convert(action: argparse.Action, key: str, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return _parse_bool(key, value)
    convert = action.type or str
    try:
        if action.nargs in ("+", "*"):
            return [convert(item) for item in shlex.split(value)]
        return convert(value)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"config key {key}: {exc}") from exc


def apply_config(parsers: Iterable[argparse.ArgumentParser], values: Dict[str, str]) -> List[str]:
    """Installs config values as defaults of every parser that has the option.

    Options supplied by the file are no longer required on the command line.

    Returns
    -------
    applied: List[str]
        Keys that matched at least one parser

    Raises
    ------
    UsageError
        A key matches no option of any parser, or a value does not convert
    """
    applied = set()
    for parser in parsers:
        actions = {}
        for action in parser._actions:
            if not action.option_strings:
                continue
            for name in [action.dest] + [normalize_key(option) for option in action.option_strings]:
                actions[name] = action
        for key, value in values.items():
            action = actions.get(key)
            if action is None:
                continue
            action.default = _convert(action, key, value)
            action.required = False
            applied.add(key)
    unknown = sorted(set(values) - applied)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    logger.debug("config defaults: %s", sorted(applied))
    return sorted(applied)

"""Versioned prompt templates.

Each template lives in ``<name>.v<N>.txt`` next to this file and uses
``string.Template`` placeholders. :func:`render` returns the text together
with the ``name@vN`` id that run traces record.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from string import Template

_FILE_RE = re.compile(r"^(?P<name>[a-z_]+)\.v(?P<version>\d+)\.txt$")


@lru_cache(maxsize=None)
def _catalog() -> dict[str, tuple[int, str]]:
    latest: dict[str, tuple[int, str]] = {}
    for entry in resources.files(__name__).iterdir():
        m = _FILE_RE.match(entry.name)
        if not m:
            continue
        version = int(m.group("version"))
        if m.group("name") not in latest or latest[m.group("name")][0] < version:
            latest[m.group("name")] = (version, entry.read_text(encoding="utf-8"))
    return latest


def template_id(name: str) -> str:
    return f"{name}@v{_catalog()[name][0]}"


def available() -> list[str]:
    return sorted(template_id(n) for n in _catalog())


def render(name: str, **values: object) -> tuple[str, str]:
    try:
        version, text = _catalog()[name]
    except KeyError:
        raise KeyError(f"no prompt template named {name!r}") from None
    return Template(text).substitute({k: str(v) for k, v in values.items()}).strip(), f"{name}@v{version}"

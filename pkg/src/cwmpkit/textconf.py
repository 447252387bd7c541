"""Line-oriented config reader shared by profiles, policies, registries and plans.

The on-disk format is deliberately plain so files can be diffed and edited by
hand:

    # comment
    [section]
    key: value
    a-raw-line<TAB>with<TAB>fields

Sections hold two kinds of content: ``key: value`` pairs (single-token key,
colon before any tab) and raw body lines (everything else).  Body lines keep
their exact text so tab-separated tables and command lines containing URLs
survive untouched.  Section names may repeat; each occurrence becomes its own
Section in file order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised for unparseable config text; message carries the line number."""


@dataclass
class Section:
    name: str
    pairs: dict[str, str] = field(default_factory=dict)
    lines: list[str] = field(default_factory=list)
    lineno: int = 0

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.pairs.get(key, default)

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.pairs.get(key)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"section [{self.name}]: {key!r} is not a boolean: {raw!r}")

    def get_int(self, key: str, default: int = 0) -> int:
        raw = self.pairs.get(key)
        if raw is None:
            return default
        try:
            return int(raw.strip())
        except ValueError:
            raise ConfigError(f"section [{self.name}]: {key!r} is not an integer: {raw!r}") from None


def parse_sections(text: str) -> list[Section]:
    sections: list[Section] = []
    current: Section | None = None
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.rstrip("\n").rstrip("\r")
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = Section(name=stripped[1:-1].strip(), lineno=lineno)
            sections.append(current)
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: content before any [section] header")
        # A key:value pair only when the colon appears before any tab and
        # the key is a single bare token; anything else is raw body text,
        # so table rows and command lines with URLs survive untouched.
        colon = line.find(":")
        tab = line.find("\t")
        if colon > 0 and (tab < 0 or colon < tab):
            key = line[:colon].strip()
            if key and " " not in key:
                current.pairs[key] = line[colon + 1 :].strip()
                continue
        current.lines.append(line)
    return sections


def load_sections(path: str) -> list[Section]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_sections(fh.read())


def first_section(sections: list[Section], name: str) -> Section | None:
    for sec in sections:
        if sec.name == name:
            return sec
    return None


def sections_named(sections: list[Section], prefix: str) -> list[Section]:
    """All sections whose name is ``prefix`` or starts with ``prefix:``."""
    out = []
    for sec in sections:
        if sec.name == prefix or sec.name.startswith(prefix + ":"):
            out.append(sec)
    return out

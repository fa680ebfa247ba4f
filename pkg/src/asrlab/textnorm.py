"""Deterministic Unicode text cleanup applied before scoring.

Punctuation and symbol filtering are driven by Unicode general categories
(P* and S*), which keeps the behaviour script-agnostic: Tamil or Latin
letters and digits pass through untouched while ",", "?" or currency signs
are dropped. Removed code points are deleted outright, not replaced by a
space; turning on whitespace collapsing repairs any doubled spaces that
deletion leaves behind.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

import regex

__all__ = [
    "NormalizationConfig",
    "IDENTITY",
    "PUNCTUATION_FILTER",
    "normalize",
    "tokenize_words",
    "graphemes",
]

_WHITESPACE_RUN = re.compile(r"\s+")
_GRAPHEME_CLUSTER = regex.compile(r"\X")

# Canonical flag names used by to_string/from_string, in canonical order.
_FLAG_FIELDS = (
    ("punctuation", "remove_punctuation"),
    ("symbols", "remove_symbols"),
    ("whitespace", "collapse_whitespace"),
    ("trim", "trim"),
)


@dataclass(frozen=True)
class NormalizationConfig:
    """Switches for the text cleanup applied before metric computation.

    With every switch off, :func:`normalize` is the identity. The textual
    form joins the enabled flag names with "+" ("none" when all are off) and
    is what reports and the CLI use to name a configuration.
    """

    remove_punctuation: bool = False
    remove_symbols: bool = False
    collapse_whitespace: bool = False
    trim: bool = False

    def to_string(self) -> str:
        parts = [flag for flag, attr in _FLAG_FIELDS if getattr(self, attr)]
        return "+".join(parts) if parts else "none"

    @classmethod
    def from_string(cls, text: str) -> "NormalizationConfig":
        text = text.strip()
        if text in ("", "none"):
            return cls()
        known = dict(_FLAG_FIELDS)
        values = {}
        for flag in text.split("+"):
            flag = flag.strip()
            if flag not in known:
                raise ValueError(f"unknown normalization flag: {flag!r}")
            values[known[flag]] = True
        return cls(**values)


IDENTITY = NormalizationConfig()

# The scoring filter discussed alongside the WER results: strip punctuation
# and symbols, then tidy whitespace so deletions cannot leave double spaces.
PUNCTUATION_FILTER = NormalizationConfig(
    remove_punctuation=True,
    remove_symbols=True,
    collapse_whitespace=True,
    trim=True,
)


def normalize(text: str, config: NormalizationConfig = IDENTITY) -> str:
    """Apply the configured cleanup steps. Idempotent for any config."""
    if config.remove_punctuation:
        text = "".join(c for c in text if not unicodedata.category(c).startswith("P"))
    if config.remove_symbols:
        text = "".join(c for c in text if not unicodedata.category(c).startswith("S"))
    if config.collapse_whitespace:
        text = _WHITESPACE_RUN.sub(" ", text)
    if config.trim:
        text = text.strip()
    return text


def tokenize_words(text: str) -> list[str]:
    """Split on whitespace runs; leading/trailing whitespace yields no tokens."""
    return text.split()


def graphemes(text: str, mode: str = "grapheme") -> list[str]:
    """Segment text into extended grapheme clusters (or raw code points).

    "grapheme" keeps a base character together with its combining marks, so
    e.g. a consonant plus a dependent vowel sign counts as one unit.
    "codepoint" is the documented fallback that simply lists code points.
    """
    if mode == "grapheme":
        return _GRAPHEME_CLUSTER.findall(text)
    if mode == "codepoint":
        return list(text)
    raise ValueError(f"unknown segmentation mode: {mode!r}")

"""
Text processing utilities for run parameters and metadata files.

This module contains functions for parsing scale strings ("1/8"), building
folder slugs from scales and reading/writing the "key = value" metadata
format used next to sequences and results.
"""

import re
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Tuple, Union

_SCALE_PATTERN = re.compile(r'^\s*(\d+)\s*(?:/\s*(\d+))?\s*$')


def parse_scale(text: Union[str, int, float, Fraction]) -> Fraction:
    """
    Parse a scale such as "1/8", "0.25" or "1" into a Fraction.

    Args:
        text: Scale as text or number

    Returns:
        Fraction equal to 1/2**k

    Raises:
        ValueError: if the text is not a reciprocal power of two in (0, 1]
    """
    if isinstance(text, Fraction):
        scale = text
    elif isinstance(text, (int, float)):
        scale = Fraction(text).limit_denominator(1 << 16)
    else:
        match = _SCALE_PATTERN.match(text)
        if match:
            numerator = int(match.group(1))
            denominator = int(match.group(2)) if match.group(2) else 1
            if denominator == 0:
                raise ValueError(f"Scale has zero denominator: {text!r}")
            scale = Fraction(numerator, denominator)
        else:
            try:
                scale = Fraction(float(text)).limit_denominator(1 << 16)
            except ValueError:
                raise ValueError(f"Unrecognized scale: {text!r}")

    if scale <= 0 or scale > 1 or scale.numerator != 1 or scale.denominator & (scale.denominator - 1):
        raise ValueError(f"Scale must be 1/2**k within (0, 1], got {text!r}")
    return scale


def parse_scale_list(text: str) -> List[Fraction]:
    """Parse a comma-separated list like "1/8,1/4,1/2,1"."""
    return [parse_scale(part) for part in text.split(',') if part.strip()]


def format_scale(scale: Fraction) -> str:
    """Inverse of parse_scale: "1" or "1/8"."""
    scale = Fraction(scale)
    return str(scale.numerator) if scale.denominator == 1 else f"{scale.numerator}/{scale.denominator}"


def scale_slug(scale: Fraction) -> str:
    """File-system friendly form of a scale, e.g. "1-8" for 1/8 and "1-1" for 1."""
    scale = Fraction(scale)
    return f"{scale.numerator}-{scale.denominator}"


class KeyValueSyntaxError(ValueError):
    """A malformed "key = value" line; ``line`` is its 1-based number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def parse_key_value_lines(text: str) -> Dict[str, str]:
    """
    Parse "key = value" lines; blank lines and lines starting with '#' are skipped.

    Raises:
        KeyValueSyntaxError: naming the 1-based line number of a malformed line
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        try:
            pair = split_key_value(line)
        except ValueError as e:
            raise KeyValueSyntaxError(number, str(e))
        if pair is not None:
            values[pair[0]] = pair[1]
    return values


def split_key_value(line: str) -> Optional[Tuple[str, str]]:
    """
    Split one "key = value" line; returns None for blank and comment lines.

    Raises:
        ValueError: if the line has no '=' or an empty key
    """
    stripped = line.strip()
    if not stripped or stripped.startswith('#'):
        return None
    if '=' not in stripped:
        raise ValueError(f"expected 'key = value', got {stripped!r}")
    key, value = stripped.split('=', 1)
    key = key.strip()
    if not key:
        raise ValueError("empty key")
    return key, value.strip()


def format_key_value_lines(items: Iterable[Tuple[str, object]]) -> str:
    """Render pairs as "key = value" lines, preserving order."""
    return ''.join(f"{key} = {value}\n" for key, value in items)

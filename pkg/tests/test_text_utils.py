"""
Tests for scale parsing and the key-value line format.
"""

from fractions import Fraction

import pytest

from utils.text_utils import (
    KeyValueSyntaxError, format_key_value_lines, format_scale, parse_key_value_lines, parse_scale, parse_scale_list,
    scale_slug, split_key_value,
)


class TestScales:

    @pytest.mark.parametrize("text, expected", [
        ("1/8", Fraction(1, 8)), (" 1 / 2 ", Fraction(1, 2)), ("1", Fraction(1)),
        ("0.25", Fraction(1, 4)), (0.5, Fraction(1, 2)), (1, Fraction(1)), (Fraction(1, 16), Fraction(1, 16)),
    ])
    def test_parse(self, text, expected):
        assert parse_scale(text) == expected

    @pytest.mark.parametrize("text", ["1/3", "2", "0", "3/8", "1/0", "half", "-1/2"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_scale(text)

    def test_list(self):
        assert parse_scale_list("1/8,1/4, 1/2,1,") == [Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1)]

    def test_format_and_slug(self):
        assert format_scale(Fraction(1, 8)) == "1/8"
        assert format_scale(Fraction(1)) == "1"
        assert scale_slug(Fraction(1, 8)) == "1-8"
        assert scale_slug(Fraction(1)) == "1-1"


class TestKeyValueLines:

    def test_split(self):
        assert split_key_value("  kind = lamb_oseen ") == ("kind", "lamb_oseen")
        assert split_key_value("expr = a=b") == ("expr", "a=b")
        assert split_key_value("# comment") is None
        assert split_key_value("   ") is None

    def test_split_errors(self):
        with pytest.raises(ValueError):
            split_key_value("no separator")
        with pytest.raises(ValueError):
            split_key_value(" = value")

    def test_parse_reports_line_number(self):
        with pytest.raises(ValueError, match="line 3"):
            parse_key_value_lines("a = 1\n\nbroken\n")

    def test_syntax_error_carries_line(self):
        with pytest.raises(KeyValueSyntaxError) as info:
            parse_key_value_lines("# c\na = 1\nb\n")
        assert info.value.line == 3
        assert "key = value" in info.value.reason

    def test_format_then_parse(self):
        text = format_key_value_lines([("b", 2), ("a", "x y")])
        assert text == "b = 2\na = x y\n"
        assert parse_key_value_lines(text) == {"b": "2", "a": "x y"}

# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

import math

import pytest
from attrs import field, frozen

from adabin.interface import Profile
from adabin.validator import between, enum, nonnegative, positive, string


@frozen
class _Sample:
    count: int = field(default=1, validator=positive)
    offset: float = field(default=0.0, validator=nonnegative)
    ratio: float = field(default=0.5, validator=between(0.0, 1.0))
    name: str = field(default="x", validator=string)
    profile: Profile = field(default=Profile.PAPER, validator=enum(Profile))


class TestValidators:
    """
    Unit tests for the attrs validators.
    """

    def test_valid(self):
        _Sample(count=3, offset=0.0, ratio=1.0, name="run", profile=Profile.DESK)

    @pytest.mark.parametrize("value", [0, -1, math.nan, math.inf, None, True])
    def test_positive(self, value):
        with pytest.raises(ValueError, match=r"'count' must be positive"):
            _Sample(count=value)

    @pytest.mark.parametrize("value", [-0.5, math.nan, None])
    def test_nonnegative(self, value):
        with pytest.raises(ValueError, match=r"'offset' must not be negative"):
            _Sample(offset=value)

    @pytest.mark.parametrize("value", [-0.01, 1.01])
    def test_between(self, value):
        with pytest.raises(ValueError, match=r"'ratio' must be in \[0.0, 1.0\]"):
            _Sample(ratio=value)

    @pytest.mark.parametrize("value", ["", None, "None", 5])
    def test_string(self, value):
        with pytest.raises(ValueError, match=r"'name' must be a non-empty string"):
            _Sample(name=value)

    @pytest.mark.parametrize("value", ["desk", None, 3])
    def test_enum(self, value):
        with pytest.raises(ValueError, match=r"'profile' must be one of \[desk, paper\]"):
            _Sample(profile=value)

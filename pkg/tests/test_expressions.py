from __future__ import annotations

import numpy as np
import pytest

from mfglab.expressions import ExpressionError, parse
from mfglab.grid import build_grid


def test_parse_and_sample_1d():
    g = build_grid([1.0], [5], 1.0, 3)
    vals = parse("x*t + 1").sample(g)
    assert vals.shape == g.field_shape
    assert np.allclose(vals, g.axes[0][None] * g.times[:, None] + 1)


def test_sample_2d_uses_ij_layout():
    g = build_grid([1.0, 2.0], [3, 5], 1.0, 3)
    vals = parse("x + 10*y").sample(g)
    assert vals[0, 2, 4] == pytest.approx(1.0 + 20.0)


def test_symbolic_derivative():
    e = parse("sin(pi*x)*exp(-t)")
    g = build_grid([1.0], [9], 1.0, 3)
    assert np.allclose(e.diff("x", 2).sample(g), -np.pi**2 * e.sample(g))
    assert np.allclose(e.diff("t").sample(g), -e.sample(g))


def test_numbers_and_arithmetic():
    g = build_grid([1.0], [3], 1.0, 3)
    assert parse(2).is_zero is False
    assert parse(0).is_zero
    assert np.allclose((parse("x") * 3 - "x").sample(g), 2 * g.coords[0][None])


@pytest.mark.parametrize("text", ["foo(x)", "x + z", "import os", "__import__('os')", "abs(x)", "x +* 2"])
def test_rejects_unknown_or_malformed(text):
    with pytest.raises(ExpressionError):
        parse(text)


def test_nonfinite_sample_rejected():
    g = build_grid([1.0], [3], 1.0, 3)
    with pytest.raises(ExpressionError):
        parse("1/x").sample(g)

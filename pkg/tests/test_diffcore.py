import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mbmd import diffcore as dc
from mbmd.errors import NumericError, ShapeError


def _leaf(values):
    return torch.tensor(values, dtype=torch.float64, requires_grad=True)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_simplex_and_shift(values, shift):
    x = torch.tensor(values, dtype=torch.float64)
    s = dc.softmax(x)
    assert torch.all(s >= 0)
    assert abs(float(s.sum()) - 1.0) < 1e-12
    torch.testing.assert_close(dc.softmax(x + shift), s, atol=1e-12, rtol=0)


def test_softmax_extremes():
    s = dc.softmax(torch.tensor([1000.0, 0.0], dtype=torch.float64))
    assert torch.isfinite(s).all() and float(s[0]) == 1.0


def test_layer_norm_constant_row():
    out = dc.layer_norm(torch.full((5,), 3.0, dtype=torch.float64), torch.ones(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64))
    assert torch.all(out.abs() < 1e-6)


def test_matmul_oracle_and_shape_error():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[5.0], [6.0]])
    assert dc.matmul(a, b).tolist() == [[17.0], [39.0]]
    with pytest.raises(ShapeError):
        dc.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ShapeError):
        dc.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(ShapeError):
        dc.split(torch.zeros(5), [2, 2])


def test_gradient_of_square():
    x = _leaf(3.0)
    (g,) = dc.gradients(x * x, [x])
    assert float(g) == 6.0


def test_gradient_of_mean():
    x = _leaf([1.0, 2.0, 3.0, 4.0])
    (g,) = dc.gradients(dc.mean(x), [x])
    assert g.tolist() == [0.25] * 4


def test_unused_leaf_gets_zero_gradient():
    x, y = _leaf([1.0, 2.0]), _leaf([5.0])
    gx, gy = dc.gradients(x.sum(), [x, y])
    assert gy.tolist() == [0.0]


def test_non_scalar_output_rejected():
    x = _leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        dc.gradients(x * 2, [x])


def test_relative_error_floor():
    assert dc.max_relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert dc.max_relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


@pytest.mark.parametrize("name", dc.op_set())
def test_each_op_gradcheck(name):
    assert dc.finite_diff_check(name) < 1e-4


def test_unknown_op():
    with pytest.raises(KeyError, match="conv"):
        dc.finite_diff_check("conv2d")


def test_attention_rows_sum_to_one():
    q = torch.randn(3, 4, dtype=torch.float64)
    v = torch.eye(3, dtype=torch.float64)
    out = dc.attention(q, q, v)
    torch.testing.assert_close(out.sum(-1), torch.ones(3, dtype=torch.float64))


def test_dropout_mask_scaling():
    x = torch.ones(10000, dtype=torch.float64)
    y = dc.dropout_mask(x, 0.25, torch.Generator().manual_seed(0))
    kept = y[y != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))
    assert abs(float(y.mean()) - 1.0) < 0.05


def test_check_finite():
    with pytest.raises(NumericError):
        dc.check_finite(torch.tensor([1.0, math.nan]), "x")


def test_verify_mode_dtype(monkeypatch):
    monkeypatch.setenv("MBMD_VERIFY", "1")
    assert dc.default_dtype() == torch.float64
    monkeypatch.delenv("MBMD_VERIFY")
    assert dc.default_dtype() == torch.float32


def test_precision_context_restores():
    before = torch.get_default_dtype()
    with dc.precision(torch.float64):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before


def test_gradcheck_csv(tmp_path):
    rows = dc.gradcheck_suite(include_model=False)
    dc.write_gradcheck_csv(rows, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "op,shape,max_rel_err,pass"
    assert len(lines) == 1 + len(dc.op_set())
    assert all(r.passed for r in rows)

"""Tests for gradcheck module."""

import numpy as np
import pytest

from mbfcn_cli.gradcheck import (
    OPERATION_CASES,
    GradcheckResult,
    check_full_loss,
    numeric_gradient,
    relative_error,
    run_gradcheck,
)
from mbfcn_cli.tensor import Tensor


class TestHelpers:
    """Tests for the finite-difference helpers."""

    def test_relative_error(self):
        """max |a - n| over the largest magnitude, floored at 1e-6."""
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.1])) == pytest.approx(0.1 / 2.1)
        assert relative_error(np.zeros(3), np.full(3, 1e-9)) == pytest.approx(1e-3)

    def test_numeric_gradient_of_square(self):
        """Central differences of sum(x^2) give 2x and restore the input."""
        tensor = Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
        grad = numeric_gradient(lambda: float((tensor.data ** 2).sum()), tensor)
        np.testing.assert_allclose(grad, 2 * tensor.data, atol=1e-6)
        np.testing.assert_array_equal(tensor.data.ravel(), [0, 1, 2, 3])

    def test_result_pass_flag(self):
        """A result passes strictly below the tolerance."""
        assert GradcheckResult("x", 1, 5e-5, 1e-4).passed
        assert not GradcheckResult("x", 1, 1e-4, 1e-4).passed


class TestSuite:
    """Tests for the full suite."""

    def test_full_loss_gradient(self):
        """The multi-branch loss of a tiny model differentiates correctly."""
        assert check_full_loss(seed=0) < 1e-4

    def test_run_gradcheck_reports_every_operation(self):
        """One result per operation plus the full loss, all passing."""
        results = run_gradcheck(instances=3, seed=1)
        assert [r.name for r in results[:-1]] == [name for name, _ in OPERATION_CASES]
        assert results[-1].name == "multibranch loss (tiny model)"
        assert all(r.passed for r in results), [(r.name, r.max_error) for r in results]

    def test_tolerances(self):
        """Single operations must agree to 1e-5, the full loss to 1e-4."""
        results = run_gradcheck(instances=2, seed=2)
        assert {r.tolerance for r in results[:-1]} == {1e-5}
        assert results[-1].tolerance == 1e-4

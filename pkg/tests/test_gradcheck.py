import pytest
import torch

from protomtl.exceptions import GradientCheckError
from protomtl.gradcheck import (
    GradCheckResult,
    assert_gradients,
    finite_difference_check,
    numerical_gradient,
    relative_error,
    run_gradient_suite,
)


class _WrongSquare(torch.autograd.Function):
    """x**2 with a backward that is off by a factor of two."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**2

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * x


@pytest.fixture(scope="module")
def suite():
    """Results of the full gradient suite."""
    return run_gradient_suite(seed=0)


class TestGradientSuite:
    """Tests for the built-in gradient checks."""

    def test_all_checks_pass(self, suite):
        """Test every analytic gradient matches central differences."""
        for result in suite:
            assert result.passed, f"{result.name}: {result.rel_error:.2e}"
        assert_gradients(suite)

    def test_coverage(self, suite):
        """Test the suite covers every loss and layer group."""
        names = {r.name for r in suite}
        assert names == {
            "tae_loss",
            "tke_loss",
            "tc_loss[literal_sign=False]",
            "tc_loss[literal_sign=True]",
            "affinity_feature",
            "retrieval_block",
            "network",
        }

    def test_tolerance_is_carried(self):
        """Test results keep the requested tolerance."""
        x = torch.randn(4, dtype=torch.float64, requires_grad=True)
        result = finite_difference_check("square", lambda: (x**2).sum(), [x], tolerance=1e-3)
        assert result.tolerance == 1e-3
        assert result.passed


class TestFiniteDifferences:
    """Tests for the finite-difference machinery."""

    def test_numerical_gradient_of_quadratic(self):
        """Test central differences of a sum of squares give 2x."""
        x = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
        (grad,) = numerical_gradient(lambda: (x**2).sum(), [x])
        assert torch.allclose(grad, 2 * x, atol=1e-8)
        assert torch.equal(x, torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64))

    def test_wrong_backward_is_detected(self):
        """Test a custom backward with the wrong factor fails the check."""
        x = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64, requires_grad=True)
        result = finite_difference_check("wrong", lambda: _WrongSquare.apply(x).sum(), [x])
        assert not result.passed
        assert result.rel_error == pytest.approx(1 / 3, rel=1e-6)

    def test_unused_input_has_zero_gradient(self):
        """Test inputs the function ignores compare as zero."""
        x = torch.randn(3, dtype=torch.float64, requires_grad=True)
        y = torch.randn(3, dtype=torch.float64, requires_grad=True)
        assert finite_difference_check("unused", lambda: x.sum(), [x, y]).rel_error < 1e-8

    def test_relative_error_of_zeros(self):
        """Test two zero gradients have zero error."""
        assert relative_error(torch.zeros(3), torch.zeros(3)) == 0.0

    def test_assert_gradients_raises(self):
        """Test a failed result raises GradientCheckError."""
        results = [
            GradCheckResult(name="ok", rel_error=1e-9, tolerance=1e-4),
            GradCheckResult(name="bad", rel_error=0.5, tolerance=1e-4),
        ]
        with pytest.raises(GradientCheckError) as exc_info:
            assert_gradients(results)
        assert exc_info.value.name == "bad"
        assert exc_info.value.rel_error == 0.5

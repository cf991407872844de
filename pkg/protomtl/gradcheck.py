"""Central finite-difference checks of the analytic gradients.

Every check runs in float64 and compares autograd against
``(f(x + eps) - f(x - eps)) / (2 eps)`` for each input element. The error of
one check is the largest normwise relative error over its inputs.
"""

import logging
import time
from typing import Callable, List, Sequence

import msgspec
import torch

from .exceptions import GradientCheckError
from .models import TaskSpec
from .network import Encoder, TaskDecoder, TaskHead
from .prototype import task_affinity, task_similarity, tc_loss, tke_loss
from .retrieval import RetrievalBlock, affinity_feature
from .vq import tae_loss

logger = logging.getLogger("protomtl.gradcheck")

DEFAULT_TOLERANCE = 1e-4


class GradCheckResult(msgspec.Struct, kw_only=True, frozen=True):
    """Outcome of one gradient check.

    Attributes
    ----------
    name : str
        Check name
    rel_error : float
        Largest relative error over the checked inputs
    tolerance : float
        Acceptance threshold
    """

    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """``||a - n|| / max(||a|| + ||n||, tiny)``; 0 when both are zero."""
    scale = float(analytic.norm() + numeric.norm())
    if scale == 0.0:
        return 0.0
    return float((analytic - numeric).norm()) / max(scale, 1e-300)


def numerical_gradient(
    fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-6
) -> List[torch.Tensor]:
    """Central differences of a scalar function w.r.t. each input in place."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            grad = torch.zeros_like(x)
            flat, flat_grad = x.view(-1), grad.view(-1)
            for j in range(flat.numel()):
                original = float(flat[j])
                flat[j] = original + eps
                plus = float(fn())
                flat[j] = original - eps
                minus = float(fn())
                flat[j] = original
                flat_grad[j] = (plus - minus) / (2.0 * eps)
            grads.append(grad)
    return grads


def analytic_gradient(
    fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor]
) -> List[torch.Tensor]:
    grads = torch.autograd.grad(fn(), list(inputs), allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]


def finite_difference_check(
    name: str,
    fn: Callable[[], torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradCheckResult:
    """Compare autograd with central differences for a scalar ``fn()``.

    Parameters
    ----------
    name : str
        Check name for the result
    fn : callable
        Zero-argument function returning a scalar; reads ``inputs``
    inputs : sequence of torch.Tensor
        Contiguous float64 leaf tensors with ``requires_grad``
    eps : float = 1e-6
        Finite-difference step
    tolerance : float = 1e-4
        Acceptance threshold

    Returns
    -------
    GradCheckResult
        Largest relative error over the inputs
    """
    analytic = analytic_gradient(fn, inputs)
    numeric = numerical_gradient(fn, inputs, eps)
    error = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    return GradCheckResult(name=name, rel_error=error, tolerance=tolerance)


def _leaf(generator: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    x = torch.randn(*shape, generator=generator, dtype=torch.float64) * scale
    return x.requires_grad_(True)


def _away_from_kink(generator: torch.Generator, *shape: int) -> torch.Tensor:
    """Residuals with magnitude in [0.1, 0.8] or [1.2, 2.0]."""
    magnitude = torch.rand(*shape, generator=generator, dtype=torch.float64)
    far = torch.rand(*shape, generator=generator) < 0.5
    magnitude = torch.where(far, 1.2 + 0.8 * magnitude, 0.1 + 0.7 * magnitude)
    sign = torch.where(torch.rand(*shape, generator=generator) < 0.5, -1.0, 1.0)
    return magnitude * sign.double()


def run_gradient_suite(
    seed: int = 0, tolerance: float = DEFAULT_TOLERANCE
) -> List[GradCheckResult]:
    """Check every differentiable loss and layer at small float64 sizes.

    Sizes: batch 2, 16 tokens (9 for the retrieval block), width 8, 3 tasks,
    2 attention heads.
    """
    g = torch.Generator().manual_seed(seed)
    batch, tokens, dim, n_tasks = 2, 16, 8, 3
    results = []

    def check(name, fn, inputs):
        started = time.perf_counter()
        result = finite_difference_check(name, fn, inputs, tolerance=tolerance)
        logger.info(
            f"{name}: rel. error {result.rel_error:.2e} "
            f"({time.perf_counter() - started:.2f}s)"
        )
        results.append(result)

    image = torch.rand(batch, 3, 4, 4, generator=g, dtype=torch.float64)
    reconstruction = (image + _away_from_kink(g, *image.shape)).requires_grad_(True)
    check("tae_loss", lambda: tae_loss(reconstruction, image), [reconstruction])

    x = _leaf(g, batch, tokens, dim)
    slots = _leaf(g, n_tasks, dim)
    mask = torch.tensor([True, True])
    check(
        "tke_loss",
        lambda: tke_loss(task_affinity(task_similarity(x, slots)), 1, mask).value,
        [x, slots],
    )

    per_task = [_leaf(g, batch, tokens, dim) for _ in range(n_tasks)]
    for literal in (False, True):
        check(
            f"tc_loss[literal_sign={literal}]",
            lambda literal=literal: tc_loss(per_task, 0.2, literal),
            per_task,
        )

    affinity = torch.softmax(_leaf(g, batch, tokens, n_tasks).detach(), -1)
    affinity.requires_grad_(True)
    weights = torch.randn(batch, tokens, dim, generator=g, dtype=torch.float64)
    check(
        "affinity_feature",
        lambda: (affinity_feature(affinity, slots) * weights).sum(),
        [affinity, slots],
    )

    block = RetrievalBlock(dim, 2).double()
    query = _leaf(g, batch, 9, dim)
    context = _leaf(g, batch, 9, dim)
    block_weights = torch.randn(batch, 9, dim, generator=g, dtype=torch.float64)
    check(
        "retrieval_block",
        lambda: (block(query, context) * block_weights).sum(),
        [query, context, *block.parameters()],
    )

    check(*_network_check(g))
    failed = [r.name for r in results if not r.passed]
    logger.info(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return results


def _network_check(g: torch.Generator):
    """A tiny encoder -> decoder -> head chain; every parameter gets checked."""
    task = TaskSpec(id=0, name="depth", kind="regression", channels=1, metric="abs_err")
    encoder = Encoder(channels=4, downsample=2).double().eval()
    decoder = TaskDecoder(4).double()
    head = TaskHead(4, task, (8, 8)).double()
    images = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    target = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)

    def fn():
        return ((head(decoder(encoder(images))) - target) ** 2).mean()

    params = [*encoder.parameters(), *decoder.parameters(), *head.parameters()]
    return "network", fn, params


def assert_gradients(results: Sequence[GradCheckResult]) -> None:
    """Raise :class:`GradientCheckError` for the first failed check."""
    for result in results:
        if not result.passed:
            raise GradientCheckError(result.name, result.rel_error, result.tolerance)

import math

import pytest
import torch

from protomtl.exceptions import ValidationError
from protomtl.prototype import (
    TaskPrototype,
    TokenProjector,
    akg_loss,
    batch_tke_loss,
    margin_hinge,
    task_affinity,
    task_similarity,
    tc_loss,
    tke_loss,
)


def _tc_oracle(tokens, margin, literal_sign=False):
    """Loop reference for the task consistency loss."""
    flat = [x.reshape(x.shape[0], -1).double() for x in tokens]
    n_tasks, batch = len(flat), flat[0].shape[0]
    terms = []
    for t in range(n_tasks):
        anchor = flat[t].mean(0)
        for i in range(batch):
            pos = float(torch.cosine_similarity(anchor, flat[t][i], dim=0))
            for tau in range(n_tasks):
                if tau == t:
                    continue
                neg = float(torch.cosine_similarity(anchor, flat[tau][i], dim=0))
                gap = pos - neg + margin if literal_sign else neg - pos + margin
                terms.append(max(gap, 0.0))
    assert len(terms) == n_tasks * batch * (n_tasks - 1)
    return sum(terms) / len(terms)


class TestTaskPrototype:
    """Tests for the prototype bank."""

    def test_shape_and_init_scale(self):
        """Test T x d slots with a small Gaussian init."""
        torch.manual_seed(0)
        prototype = TaskPrototype(3, 64)
        assert prototype.slots.shape == (3, 64)
        assert prototype.slots.std().item() < 0.05

    def test_freeze_blocks_updates(self):
        """Test an optimizer step leaves a frozen prototype untouched."""
        prototype = TaskPrototype(3, 8)
        optimizer = torch.optim.Adam(prototype.parameters(), lr=0.1)
        before = prototype.slots.detach().clone()
        prototype.freeze()
        assert prototype.frozen
        tokens = torch.randn(2, 4, 8)
        loss = task_similarity(tokens, prototype.slots).sum()
        assert not loss.requires_grad
        optimizer.step()
        assert torch.equal(prototype.slots, before)
        prototype.unfreeze()
        assert not prototype.frozen


class TestSimilarityAndAffinity:
    """Tests for task similarity and affinity."""

    def test_similarity_of_a_slot_with_itself(self):
        """Test a token equal to slot t has similarity 1 with it."""
        slots = torch.randn(3, 8)
        similarity = task_similarity(slots[None], slots)
        assert torch.allclose(torch.diagonal(similarity[0]), torch.ones(3), atol=1e-6)
        assert similarity.abs().max() <= 1.0 + 1e-6

    def test_zero_token_is_safe(self):
        """Test a zero token gives finite zero similarity."""
        similarity = task_similarity(torch.zeros(1, 1, 8), torch.randn(3, 8))
        assert torch.equal(similarity, torch.zeros(1, 1, 3))

    def test_simplex(self):
        """Test 10 000 affinity rows are nonnegative and sum to 1."""
        g = torch.Generator().manual_seed(0)
        similarity = torch.rand(10_000, 3, generator=g) * 2 - 1
        affinity = task_affinity(similarity)
        assert torch.all(affinity >= 0)
        assert torch.all((affinity.sum(-1) - 1).abs() < 1e-6)

    def test_temperature(self):
        """Test a lower temperature sharpens the affinity."""
        similarity = torch.tensor([[0.9, 0.1, -0.2]])
        assert task_affinity(similarity, 0.1)[0, 0] > task_affinity(similarity, 1.0)[0, 0]

    def test_similarity_is_scale_invariant(self):
        """Test rescaling tokens or slots leaves the similarity unchanged."""
        g = torch.Generator().manual_seed(2)
        tokens = torch.randn(2, 5, 8, generator=g, dtype=torch.float64)
        slots = torch.randn(3, 8, generator=g, dtype=torch.float64)
        base = task_similarity(tokens, slots)
        assert torch.allclose(task_similarity(3.5 * tokens, slots), base, atol=1e-12)
        assert torch.allclose(task_similarity(tokens, 0.01 * slots), base, atol=1e-12)

    def test_known_cosine(self):
        """Test a token at 45 degrees to a slot has similarity 1/sqrt(2)."""
        tokens = torch.tensor([[[1.0, 1.0, 0.0]]], dtype=torch.float64)
        slots = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
        similarity = task_similarity(tokens, slots)
        assert similarity[0, 0, 0].item() == pytest.approx(0.70710678, abs=1e-8)
        assert similarity[0, 0, 1].item() == 0.0

    def test_known_softmax(self):
        """Test similarities (1, 0) give affinities (0.73106, 0.26894)."""
        affinity = task_affinity(torch.tensor([[1.0, 0.0]], dtype=torch.float64))
        assert affinity[0, 0].item() == pytest.approx(0.73106, abs=1e-5)
        assert affinity[0, 1].item() == pytest.approx(0.26894, abs=1e-5)

    def test_invalid_temperature(self):
        """Test non-positive temperatures are rejected."""
        with pytest.raises(ValidationError):
            task_affinity(torch.zeros(1, 3), 0.0)

    def test_dimension_mismatch(self):
        """Test token and slot widths must agree."""
        with pytest.raises(ValidationError):
            task_similarity(torch.randn(1, 2, 8), torch.randn(3, 4))

    def test_projector_flattens_row_major(self):
        """Test tokens follow the (row, column) order of the feature map."""
        projector = TokenProjector(4, 6)
        features = torch.randn(2, 3, 5, 4)
        tokens = projector(features)
        assert tokens.shape == (2, 15, 6)
        expected = projector.proj.weight[:, :, 0, 0] @ features[1, 2, 3] + projector.proj.bias
        assert torch.allclose(tokens[1, 2 * 5 + 3], expected, atol=1e-6)


class TestTkeLoss:
    """Tests for the task knowledge embedding loss."""

    def test_uniform_affinity(self):
        """Test equal similarities give log T."""
        affinity = task_affinity(torch.zeros(2, 4, 3))
        term = tke_loss(affinity, 1, torch.tensor([True, True]))
        assert term.value.item() == pytest.approx(math.log(3))
        assert not term.skipped

    def test_confident_affinity(self):
        """Test affinity concentrated on the target approaches zero loss."""
        affinity = torch.tensor([[[1e-9, 1.0 - 2e-9, 1e-9]]])
        assert tke_loss(affinity, 1, torch.tensor([True])).value.item() < 1e-6

    def test_only_labeled_samples_count(self):
        """Test unlabeled samples are ignored."""
        affinity = torch.tensor([[[0.5, 0.5]], [[0.1, 0.9]]])
        value = tke_loss(affinity, 0, torch.tensor([True, False])).value
        assert value.item() == pytest.approx(math.log(2))

    def test_mask_with_task_columns(self):
        """Test a [B, T] mask uses the target task column."""
        affinity = torch.tensor([[[0.5, 0.5]], [[0.1, 0.9]]])
        mask = torch.tensor([[False, True], [True, False]])
        value = tke_loss(affinity, 1, mask).value
        assert value.item() == pytest.approx(math.log(2))

    def test_no_labels_is_skipped(self):
        """Test a task without labels gives a skipped zero term."""
        term = tke_loss(task_affinity(torch.randn(2, 4, 3)), 0, torch.tensor([False, False]))
        assert term.skipped
        assert term.value.item() == 0.0

    def test_target_out_of_range(self):
        """Test the target task must exist."""
        with pytest.raises(ValidationError):
            tke_loss(torch.ones(1, 1, 3) / 3, 3, torch.tensor([True]))

    def test_batch_mean_over_contributing_pairs(self):
        """Test the batch loss averages over labeled pairs and positions."""
        affinities = [
            torch.tensor([[[0.5, 0.5]], [[0.25, 0.75]]]),
            torch.tensor([[[0.5, 0.5]], [[0.5, 0.5]]]),
        ]
        mask = torch.tensor([[True, False], [False, True]])
        term = batch_tke_loss(affinities, mask)
        assert term.value.item() == pytest.approx(math.log(2))
        skipped = batch_tke_loss(affinities, torch.zeros(2, 2, dtype=torch.bool))
        assert skipped.skipped

    def test_target_task_steers_the_update(self):
        """Test one TKE step toward task 0 or task 1 moves the slots differently."""
        g = torch.Generator().manual_seed(4)
        tokens = torch.randn(2, 6, 8, generator=g)
        init = torch.randn(3, 8, generator=g)
        mask = torch.tensor([True, True])
        updated = []
        for target in (0, 1):
            prototype = TaskPrototype(3, 8)
            with torch.no_grad():
                prototype.slots.copy_(init)
            optimizer = torch.optim.SGD(prototype.parameters(), lr=0.5)
            affinity = task_affinity(task_similarity(tokens, prototype.slots))
            tke_loss(affinity, target, mask).value.backward()
            optimizer.step()
            assert not torch.equal(prototype.slots, init)
            updated.append(prototype.slots.detach().clone())
        assert not torch.allclose(updated[0], updated[1])


class TestTcLoss:
    """Tests for the task consistency loss."""

    def test_matches_loop_oracle(self):
        """Test the vectorized loss equals a per-triple loop."""
        g = torch.Generator().manual_seed(1)
        tokens = [torch.randn(4, 6, 5, generator=g, dtype=torch.float64) for _ in range(3)]
        for literal in (False, True):
            value = tc_loss(tokens, 0.2, literal).item()
            assert value == pytest.approx(_tc_oracle(tokens, 0.2, literal), abs=1e-12)

    def test_separated_tasks(self):
        """Test orthogonal per-task tokens satisfy the margin."""
        tokens = [torch.eye(3)[t].expand(2, 1, 3).clone() for t in range(3)]
        assert tc_loss(tokens, 0.2).item() == 0.0
        assert tc_loss(tokens, 0.2, literal_sign=True).item() == pytest.approx(1.2)

    def test_identical_tasks_cost_the_margin(self):
        """Test indistinguishable tasks pay exactly the margin."""
        shared = torch.randn(2, 4, 3)
        assert tc_loss([shared, shared.clone()], 0.2).item() == pytest.approx(0.2)

    def test_single_task_is_zero(self):
        """Test there are no triples with one task."""
        assert tc_loss([torch.randn(2, 4, 3)]).item() == 0.0

    def test_empty_batch(self):
        """Test an empty batch is rejected."""
        with pytest.raises(ValidationError):
            tc_loss([torch.zeros(0, 4, 3), torch.zeros(0, 4, 3)])

    def test_hinge_signs(self):
        """Test both hinge variants."""
        pos, neg = torch.tensor(0.9), torch.tensor(0.1)
        assert margin_hinge(pos, neg, 0.2).item() == 0.0
        assert margin_hinge(pos, neg, 0.2, literal_sign=True).item() == pytest.approx(1.0)

    def test_hinge_inside_the_margin(self):
        """Test a negative within the margin of the positive costs the gap."""
        value = margin_hinge(torch.tensor(0.5), torch.tensor(0.35), 0.2)
        assert value.item() == pytest.approx(0.05, abs=1e-6)

    def test_akg_is_sum(self):
        """Test the prototype loss adds its two terms."""
        assert akg_loss(torch.tensor(0.3), torch.tensor(0.4)).item() == pytest.approx(0.7)


class TestPrototypeSeparation:
    """Tests that TKE alone separates the prototype slots."""

    def test_clusters_select_their_slots(self):
        """Test three token clusters reach 95% argmax accuracy within 500 steps."""
        torch.manual_seed(0)
        g = torch.Generator().manual_seed(0)
        centers = torch.eye(8)[:3] * 3.0
        tokens = [
            (centers[t] + 0.1 * torch.randn(4, 16, 8, generator=g)) for t in range(3)
        ]
        mask = torch.ones(4, 3, dtype=torch.bool)
        prototype = TaskPrototype(3, 8)
        optimizer = torch.optim.Adam(prototype.parameters(), lr=0.05)
        for _ in range(500):
            affinities = [task_affinity(task_similarity(x, prototype.slots)) for x in tokens]
            loss = batch_tke_loss(affinities, mask).value
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        with torch.no_grad():
            correct = sum(
                int((task_similarity(x, prototype.slots).argmax(-1) == t).sum())
                for t, x in enumerate(tokens)
            )
        assert correct / (3 * 4 * 16) >= 0.95

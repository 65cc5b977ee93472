import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from marsseg.losses import (
    ContrastiveConfig,
    DegenerateBatchError,
    EmbeddingBatch,
    SegLossConfig,
    cosine_sim,
    loss_surface_sample,
    masked_cross_entropy,
    nt_xent,
    nt_xent_loss,
    write_loss_surface_csv,
)

from oracles import central_difference, masked_ce_loops, nt_xent_bruteforce, relative_error

# frozen from oracles.nt_xent_bruteforce; equals ln(2 + e^-2) by hand
TWO_PAIR_EXAMPLE = 0.7586236756795135


def _pairs(n):
    return torch.cat([torch.arange(n, 2 * n), torch.arange(n)])


class TestCosine:
    @pytest.mark.parametrize("a,b,expected", [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((2, 0), (1, 0), 1.0),
                                              ((1, 1), (-1, -1), -1.0)])
    def test_values(self, a, b, expected):
        assert cosine_sim(a, b) == pytest.approx(expected)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_sim((0, 0), (1, 0))


class TestNTXent:
    def test_single_pair_is_zero(self):
        z = torch.tensor([[0.6, 0.8], [0.6, 0.8]])
        assert float(nt_xent_loss(z, _pairs(1), 1.0)) == pytest.approx(0.0, abs=1e-7)

    def test_two_pair_example(self):
        z = torch.tensor([[1.0, 0], [-1, 0], [0, 1], [0, -1]], dtype=torch.float64)
        # rows: img1 view a, img2 view a, img1 view b, img2 view b
        assert float(nt_xent_loss(z, _pairs(2), 0.5)) == pytest.approx(TWO_PAIR_EXAMPLE, abs=1e-12)
        assert nt_xent_bruteforce(z.numpy(), _pairs(2).numpy(), 0.5) == pytest.approx(TWO_PAIR_EXAMPLE, abs=1e-12)

    @pytest.mark.parametrize("n", [2, 4, 8])
    @pytest.mark.parametrize("d", [2, 16])
    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_matches_oracle(self, n, d, tau):
        g = torch.Generator().manual_seed(n * 100 + d + int(tau * 10))
        z = torch.randn(2 * n, d, generator=g, dtype=torch.float64)
        got = float(nt_xent_loss(z, _pairs(n), tau))
        assert got == pytest.approx(nt_xent_bruteforce(z.numpy(), _pairs(n).numpy(), tau), abs=1e-6)

    def test_embedding_batch_api(self):
        zi, zj = torch.randn(3, 5), torch.randn(3, 5)
        batch = EmbeddingBatch.from_views(zi, zj)
        assert batch.n == 3
        ref = nt_xent_bruteforce(torch.cat([zi, zj]).numpy(), batch.partner.numpy(), 0.1)
        assert float(nt_xent(batch, ContrastiveConfig(0.1))) == pytest.approx(ref, abs=1e-5)

    def test_embedding_batch_rejects_bad_pairing(self):
        z = torch.nn.functional.normalize(torch.randn(4, 3), dim=1)
        with pytest.raises(ValueError):
            EmbeddingBatch(z, torch.tensor([0, 1, 2, 3]))
        with pytest.raises(ValueError):
            EmbeddingBatch(z, torch.tensor([1, 2, 3, 0]))
        with pytest.raises(ValueError):
            EmbeddingBatch(z * 2, torch.tensor([2, 3, 0, 1]))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError):
            nt_xent_loss(torch.randn(4, 3), _pairs(2), tau)
        with pytest.raises(ValueError):
            ContrastiveConfig(tau)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            nt_xent_loss(torch.randn(0, 3), torch.zeros(0, dtype=torch.long), 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_permutation_invariance(self, n, seed):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(2 * n, 4, generator=g, dtype=torch.float64)
        perm = torch.randperm(n, generator=g)
        zp = torch.cat([z[:n][perm], z[n:][perm]])
        a = float(nt_xent_loss(z, _pairs(n), 0.3))
        b = float(nt_xent_loss(zp, _pairs(n), 0.3))
        assert abs(a - b) < 1e-9

    def test_positive_similarity_lowers_loss(self):
        g = torch.Generator().manual_seed(1)
        z = torch.randn(8, 6, generator=g, dtype=torch.float64)
        base = float(nt_xent_loss(z, _pairs(4), 0.5))
        moved = z.clone()
        moved[4] = 0.5 * moved[4] + 0.5 * moved[0]  # pull anchor 0's partner toward it
        assert float(nt_xent_loss(moved, _pairs(4), 0.5)) < base

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_large_temperature_limit(self, n):
        z = torch.randn(2 * n, 8, dtype=torch.float64)
        assert float(nt_xent_loss(z, _pairs(n), 1e6)) == pytest.approx(math.log(2 * n - 1), abs=1e-3)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_finite_differences(self, seed):
        g = torch.Generator().manual_seed(seed)
        n = 2 + seed % 3
        z = torch.randn(2 * n, 5, generator=g, dtype=torch.float64, requires_grad=True)
        partner = _pairs(n)
        nt_xent_loss(z, partner, 0.5).backward()
        zd = z.detach().clone()
        for idx in [(i, j) for i in range(2 * n) for j in range(5)][::3]:
            num = central_difference(lambda: nt_xent_loss(zd, partner, 0.5), zd, idx, 1e-6)
            assert relative_error(float(z.grad[idx]), num) < 1e-3


class TestMaskedCE:
    def test_uniform_logits(self):
        labels = torch.randint(0, 6, (2, 5, 5))
        assert float(masked_cross_entropy(torch.zeros(2, 5, 5, 6), labels)) == pytest.approx(math.log(6), abs=1e-6)

    def test_saturated(self):
        labels = torch.randint(0, 6, (2, 4, 4))
        logits = 25.0 * torch.nn.functional.one_hot(labels, 6).double()
        assert float(masked_cross_entropy(logits, labels)) < 1e-8

    def test_ignored_pixels_exact(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(2, 6, 6, 6, generator=g)
        labels = torch.randint(0, 6, (2, 6, 6), generator=g)
        labels[:, :3] = 255
        base = masked_cross_entropy(logits, labels)
        perturbed = logits.clone()
        perturbed[:, :3] += 100 * torch.randn(2, 3, 6, 6, generator=g)
        assert float(masked_cross_entropy(perturbed, labels)) == float(base)

    def test_gradient_zero_at_ignored(self):
        logits = torch.randn(1, 4, 4, 6, requires_grad=True)
        labels = torch.randint(0, 6, (1, 4, 4))
        labels[0, 0] = 255
        masked_cross_entropy(logits, labels).backward()
        assert torch.all(logits.grad[0, 0] == 0)
        assert torch.any(logits.grad[0, 1] != 0)

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(2, 3, 4, 6, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 6, (2, 3, 4), generator=g)
        labels[0, 1, :2] = 255
        got = float(masked_cross_entropy(logits, labels))
        assert got == pytest.approx(masked_ce_loops(logits.numpy(), labels.numpy()), abs=1e-12)

    def test_all_labeled_equals_unmasked(self):
        logits = torch.randn(2, 3, 3, 6, dtype=torch.float64)
        labels = torch.randint(0, 6, (2, 3, 3))
        ref = torch.nn.functional.cross_entropy(logits.permute(0, 3, 1, 2), labels)
        assert float(masked_cross_entropy(logits, labels)) == pytest.approx(float(ref), abs=1e-12)

    def test_no_labeled_pixels(self):
        with pytest.raises(DegenerateBatchError):
            masked_cross_entropy(torch.zeros(1, 2, 2, 6), torch.full((1, 2, 2), 255))

    def test_bad_label(self):
        with pytest.raises(ValueError):
            masked_cross_entropy(torch.zeros(1, 2, 2, 6), torch.full((1, 2, 2), 7))

    def test_config_guard(self):
        with pytest.raises(ValueError):
            SegLossConfig(ignore_label=3)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_finite_differences(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(1, 3, 3, 6, generator=g, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(0, 6, (1, 3, 3), generator=g)
        labels[0, seed % 3, seed % 2] = 255
        masked_cross_entropy(logits, labels).backward()
        ld = logits.detach().clone()
        for flat in range(0, 54, 2):
            idx = np.unravel_index(flat, ld.shape)
            num = central_difference(lambda: masked_cross_entropy(ld, labels), ld, idx, 1e-6)
            assert relative_error(float(logits.grad[idx]), num) < 1e-3


class TestLossSurface:
    def test_no_negatives(self):
        assert np.all(loss_surface_sample([0.5, 3.0], [0.0, 0.0]) == 0.0)

    def test_equal_terms(self):
        assert loss_surface_sample(2.0, 2.0) == pytest.approx(math.log(2))

    def test_monotonicity(self):
        axis = np.linspace(0.1, 10, 50)
        sp, sn = np.meshgrid(axis, axis, indexing="ij")
        grid = loss_surface_sample(sp, sn)
        assert np.all(np.diff(grid, axis=0) < 0)
        assert np.all(np.diff(grid, axis=1) > 0)

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            loss_surface_sample(0.0, 1.0)

    def test_csv(self, tmp_path):
        write_loss_surface_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "s_pos,s_neg_sum,loss"
        assert len(lines) == 1 + 50 * 50

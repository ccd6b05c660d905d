import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avscodec import quantizer as q


def make_codebook(heads, entries, dim, seed=0, dtype=None):
    cb = q.Codebook(heads, entries, dim, generator=q.make_generator(seed))
    if dtype is not None:
        cb = cb.to(dtype)
    return cb


class TestGumbelSample:
    def test_single_entry_always_selected(self):
        logits = torch.randn(6, 2, 1, generator=q.make_generator(0))
        soft, idx = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(1))
        assert torch.all(idx == 0)
        assert torch.allclose(soft, torch.ones_like(soft))

    def test_noiseless_low_temperature_matches_argmax(self):
        gen = q.make_generator(42)
        cfg = q.GumbelConfig(temperature=1e-6)
        for _ in range(100):
            logits = torch.randn(5, 3, 8, generator=gen)
            soft, idx = q.gumbel_sample(logits, cfg, rng=None)
            assert torch.equal(idx, logits.argmax(dim=-1))

    def test_rows_sum_to_one(self):
        logits = torch.randn(7, 4, 16, generator=q.make_generator(3))
        soft, _ = q.gumbel_sample(logits, q.GumbelConfig(temperature=0.7),
                                  rng=q.make_generator(4))
        assert torch.allclose(soft.sum(dim=-1), torch.ones(7, 4), atol=1e-6)

    def test_uniform_logits_sample_uniformly(self):
        k = 16
        draws = 100_000
        logits = torch.zeros(draws, 1, k)
        _, idx = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(5))
        counts = torch.bincount(idx.flatten(), minlength=k).double()
        p = 1.0 / k
        sigma = (draws * p * (1 - p)) ** 0.5
        assert torch.all((counts - draws * p).abs() < 3 * sigma)

    def test_fixed_seed_is_bit_deterministic(self):
        logits = torch.randn(9, 2, 12, generator=q.make_generator(6))
        s1, i1 = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(7))
        s2, i2 = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(7))
        assert torch.equal(s1, s2) and torch.equal(i1, i2)

    def test_nonfinite_logits_rejected(self):
        bad = torch.tensor([[[0.0, float("inf")]]])
        with pytest.raises(ValueError, match="finite"):
            q.gumbel_sample(bad, q.GumbelConfig(), rng=None)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            q.GumbelConfig(temperature=0.0)


class TestLookup:
    def test_tiny_example(self):
        cb = make_codebook(1, 2, 1)
        with torch.no_grad():
            cb.vectors[0, 0, 0] = 3.0
            cb.vectors[0, 1, 0] = -2.0
        out = q.lookup(cb, torch.tensor([[0], [1], [0]]))
        assert torch.equal(out, torch.tensor([[3.0], [-2.0], [3.0]]))

    def test_matches_scalar_triple_loop(self):
        cb = make_codebook(3, 5, 4, seed=1)
        idx = torch.randint(0, 5, (6, 3), generator=q.make_generator(2))
        out = q.lookup(cb, idx)
        expected = torch.empty(6, 3 * 4)
        for t in range(6):
            for h in range(3):
                for n in range(4):
                    expected[t, h * 4 + n] = cb.vectors[h, idx[t, h], n]
        assert torch.allclose(out, expected)

    def test_one_hot_quantize_consistent_with_lookup(self):
        cb = make_codebook(2, 4, 3, seed=3)
        idx = torch.randint(0, 4, (5, 2), generator=q.make_generator(4))
        one_hot = torch.nn.functional.one_hot(idx, 4).float() * 50.0
        soft, sampled = q.gumbel_sample(one_hot, q.GumbelConfig(temperature=0.1), rng=None)
        assert torch.equal(sampled, idx)
        assert torch.allclose(q.straight_through(soft, cb), q.lookup(cb, idx), atol=1e-5)

    def test_out_of_range_rejected(self):
        cb = make_codebook(1, 4, 2)
        with pytest.raises(ValueError, match="range"):
            q.lookup(cb, torch.tensor([[4]]))


class TestStraightThrough:
    def test_forward_is_exact_codebook_row(self):
        cb = make_codebook(2, 6, 3, seed=5)
        logits = torch.randn(4, 2, 6, generator=q.make_generator(6))
        soft, idx = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(7))
        out = q.straight_through(soft, cb)
        assert torch.equal(out.detach(), q.lookup(cb, idx))

    def test_gradient_matches_finite_differences(self):
        # 2 frames, H=2, K=3: autograd on the straight-through path vs central
        # differences on the soft path
        torch.manual_seed(0)
        cb = make_codebook(2, 3, 2, seed=8, dtype=torch.float64)
        logits = torch.randn(2, 2, 3, dtype=torch.float64, requires_grad=True)
        weight = torch.randn(2, cb.frame_dim, dtype=torch.float64)

        def soft_loss(lg):
            soft = torch.softmax(lg, dim=-1)
            return (q.soft_lookup(soft, cb) * weight).sum()

        soft, _ = q.gumbel_sample(logits, q.GumbelConfig(), rng=None)
        loss = (q.straight_through(soft, cb) * weight).sum()
        loss.backward()
        grad = logits.grad.clone()

        eps = 1e-6
        fd = torch.zeros_like(logits)
        with torch.no_grad():
            flat = logits.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(soft_loss(logits))
                flat[i] = orig - eps
                down = float(soft_loss(logits))
                flat[i] = orig
                fd.view(-1)[i] = (up - down) / (2 * eps)
        rel = (grad - fd).norm() / fd.norm()
        assert rel < 1e-3

    def test_low_temperature_soft_approaches_hard(self):
        cb = make_codebook(2, 5, 3, seed=9)
        logits = torch.randn(6, 2, 5, generator=q.make_generator(10))
        soft, idx = q.gumbel_sample(logits, q.GumbelConfig(temperature=1e-6), rng=None)
        assert torch.allclose(q.soft_lookup(soft, cb), q.lookup(cb, idx), atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(
        frames=st.integers(1, 6),
        heads=st.integers(1, 3),
        entries=st.integers(2, 8),
        dim=st.integers(1, 5),
        seed=st.integers(0, 2**16),
    )
    def test_contract_over_random_shapes(self, frames, heads, entries, dim, seed):
        cb = make_codebook(heads, entries, dim, seed=seed)
        logits = torch.randn(frames, heads, entries, generator=q.make_generator(seed + 1))
        soft, idx = q.gumbel_sample(logits, q.GumbelConfig(), rng=q.make_generator(seed + 2))
        out = q.straight_through(soft, cb)
        assert out.shape == (frames, heads * dim)
        assert torch.equal(out.detach(), q.lookup(cb, idx))


class TestVocabulary:
    @pytest.mark.parametrize("heads,entries", [(1, 2), (1, 3), (2, 2), (2, 3)])
    def test_exhaustive_enumeration_matches_formula(self, heads, entries):
        cb = make_codebook(heads, entries, 4, seed=11)
        frames = []
        for combo in itertools.product(range(entries), repeat=heads):
            vec = q.lookup(cb, torch.tensor([combo]))
            frames.append(tuple(vec[0].tolist()))
        assert len(set(frames)) == entries**heads == cb.vocabulary_size()

    def test_formula_for_paper_configuration(self):
        cb = make_codebook(4, 256, 1, seed=12)
        assert cb.vocabulary_size() == 4_294_967_296

    def test_frames_reconstructible_from_indices_alone(self):
        cb = make_codebook(3, 7, 2, seed=13)
        idx = torch.randint(0, 7, (10, 3), generator=q.make_generator(14))
        v1 = q.lookup(cb, idx)
        v2 = q.lookup(cb, idx.clone())
        assert torch.equal(v1, v2)


class TestCodebookStats:
    def test_repeated_index_has_perplexity_one(self):
        idx = torch.zeros(50, 2, dtype=torch.long)
        stats = q.codebook_stats(idx, entries_per_head=8)
        assert torch.allclose(stats.perplexity, torch.ones(2, dtype=torch.float64))
        assert stats.histogram.sum() == 100

    def test_uniform_usage_has_full_perplexity(self):
        idx = torch.arange(256).repeat(4).reshape(-1, 1)
        stats = q.codebook_stats(idx, entries_per_head=256)
        assert abs(float(stats.perplexity[0]) - 256.0) < 1e-9

    def test_matches_direct_entropy(self):
        gen = q.make_generator(15)
        idx = torch.randint(0, 10, (200, 2), generator=gen)
        stats = q.codebook_stats(idx, entries_per_head=10)
        for h in range(2):
            counts = np.bincount(idx[:, h].numpy(), minlength=10)
            p = counts / counts.sum()
            entropy = -(p[p > 0] * np.log(p[p > 0])).sum()
            assert abs(float(stats.perplexity[h]) - np.exp(entropy)) < 1e-9

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            q.codebook_stats(torch.zeros(0, 2, dtype=torch.long), 4)


class TestTemperatureSchedule:
    def test_anneals_then_holds(self):
        assert q.anneal_temperature(0, 100) == pytest.approx(2.0)
        assert q.anneal_temperature(25, 100) == pytest.approx(1.25)
        assert q.anneal_temperature(50, 100) == pytest.approx(0.5)
        assert q.anneal_temperature(99, 100) == pytest.approx(0.5)

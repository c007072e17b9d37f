import math

from hypothesis import given, settings
import hypothesis.strategies as st
import pytest
import torch

from builders import layer_from_tensors, random_cache
import oracles
from stlite.cache import Modality, TokenMeta
from stlite.config import BudgetConfig
from stlite.scoring import (
    AttentionWindow,
    TokenScores,
    base_attention_prior,
    cosine_matrix,
    integrate_scores,
    local_uniformity_and_saliency,
    pool_prior,
    redundancy_threshold,
    spatial_saliency,
    strict_gate,
    temporal_gate,
    trajectory_redundancy,
    trajectory_stats,
    window_attention,
)
from stlite.simulator import Component, StreamScenario, generate_stream


def one_hot(d: int, k: int) -> torch.Tensor:
    e = torch.zeros(d, dtype=torch.float64)
    e[k] = 1.0
    return e


class TestAttentionWindow:
    def test_default_scale(self):
        window = AttentionWindow(torch.zeros(3, 16))
        assert window.queries.shape == (1, 3, 16)
        assert window.scale == 0.25

    def test_needs_a_query(self):
        with pytest.raises(ValueError, match="at least one query"):
            AttentionWindow(torch.zeros(0, 4))

    def test_delta_beyond_sequence(self):
        cache = random_cache(0)
        with pytest.raises(ValueError, match="exceeds L=34"):
            AttentionWindow.for_cache(cache, 35)

    def test_delta_beyond_stored_queries(self):
        cache = random_cache(0, window=4)
        with pytest.raises(ValueError, match="4 stored window queries"):
            AttentionWindow.for_cache(cache, 5)

    def test_keys_stand_in_for_missing_queries(self):
        cache = random_cache(0)
        window = AttentionWindow.for_cache(cache, 3)
        assert torch.equal(window.queries, cache.stacked_keys()[:, -3:, :])

    def test_stored_queries_are_the_tail(self):
        cache = random_cache(0, window=6)
        window = AttentionWindow.for_cache(cache, 2)
        stored = torch.stack([q.data for q in cache.queries]).double()
        assert torch.equal(window.queries, stored[:, -2:, :])


class TestAttentionPrior:
    @settings(max_examples=50, deadline=None)
    @given(
        heads=st.integers(min_value=1, max_value=4),
        seq_len=st.integers(min_value=1, max_value=64),
        delta=st.integers(min_value=1, max_value=8),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_sums_to_window_size(self, heads, seq_len, delta, seed):
        gen = torch.Generator().manual_seed(seed)
        keys = 3 * torch.randn(heads, seq_len, 8, generator=gen)
        window = AttentionWindow(torch.randn(heads, delta, 8, generator=gen))
        a_base = base_attention_prior(keys, window)
        assert a_base.shape == (seq_len,)
        assert bool((a_base >= 0).all())
        assert float(a_base.sum()) == pytest.approx(delta, abs=1e-9)

    def test_rows_sum_to_one(self):
        window = AttentionWindow(torch.randn(2, 5, 4))
        attn = window_attention(torch.randn(2, 20, 4), window)
        assert attn.shape == (5, 20)
        assert torch.allclose(attn.sum(dim=1), torch.ones(5, dtype=torch.float64))

    def test_equal_keys_share_attention(self):
        window = AttentionWindow(torch.randn(3, 4))
        a_base = base_attention_prior(torch.ones(10, 4), window)
        assert torch.allclose(a_base, torch.full((10,), 0.3, dtype=torch.float64))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loops(self, seed):
        cache = random_cache(seed, window=4)
        window = AttentionWindow.for_cache(cache, 4)
        a_base = base_attention_prior(cache.stacked_keys(), window)
        expected = oracles.attention_prior(cache, 4)
        assert a_base.tolist() == pytest.approx(expected, abs=1e-9)

    def test_dimension_mismatch(self):
        window = AttentionWindow(torch.randn(2, 4))
        with pytest.raises(ValueError, match="dimension mismatch"):
            base_attention_prior(torch.randn(5, 3), window)

    def test_pooling(self):
        a_base = torch.tensor([0.0, 0.0, 3.0, 0.0, 0.0], dtype=torch.float64)
        assert pool_prior(a_base, "maxpool", 3).tolist() == [0.0, 3.0, 3.0, 3.0, 0.0]
        assert pool_prior(a_base, "avgpool", 3).tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]
        with pytest.raises(ValueError, match="not supported"):
            pool_prior(a_base, "medianpool", 3)


class TestCosine:
    def test_identical_vectors_are_exactly_one(self):
        v = torch.tensor([[0.1, 0.7, -0.3]], dtype=torch.float64)
        assert float(cosine_matrix(v, v)[0, 0]) == 1.0

    def test_zero_vector(self):
        a = torch.zeros(1, 3)
        b = torch.ones(1, 3)
        assert float(cosine_matrix(a, b)[0, 0]) == 0.0
        assert float(cosine_matrix(a, a)[0, 0]) == 0.0

    def test_orthogonal_and_opposite(self):
        a = torch.eye(2, dtype=torch.float64)
        cos = cosine_matrix(a, torch.cat([a, -a]))
        assert cos.tolist() == [[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]]

    def test_static_screen_at_scale(self):
        # nine 32x32 history frames of one flat colour against the same current frame
        history = torch.full((9 * 1024, 128), 0.3)
        current = torch.full((1024, 128), 0.3)
        cos = cosine_matrix(history, current)
        assert cos.shape == (9 * 1024, 1024)
        assert bool((cos == 1.0).all())
        rho = trajectory_redundancy(history, current)
        assert bool((rho == 1.0).all())

    def test_duplicates_among_distinct_rows(self):
        gen = torch.Generator().manual_seed(3)
        current = torch.randn(50, 16, generator=gen)
        history = torch.cat([current[[4, 4, 17]], torch.zeros(1, 16), current[:2] * 2])
        cos = cosine_matrix(history, current)
        assert cos[0, 4] == 1.0 and cos[1, 4] == 1.0 and cos[2, 17] == 1.0
        assert bool((cos[3] == 0.0).all())
        assert cos[4, 0] == pytest.approx(1.0)
        assert cos[0, :4].lt(1.0).all()


class TestSpatialSaliency:
    def test_uniform_grid_is_not_salient(self):
        grid = torch.tensor([0.3, -1.2, 0.5]).expand(6, 5, 3)
        uniformity, phi = local_uniformity_and_saliency(grid)
        assert bool((uniformity == 1.0).all())
        assert bool((phi == 0.0).all())

    def test_single_cell_grid(self):
        uniformity, phi = local_uniformity_and_saliency(torch.ones(1, 1, 4))
        assert uniformity.tolist() == [[1.0]]
        assert phi.tolist() == [[0.0]]

    def test_lone_cell_in_background(self):
        grid = one_hot(2, 0).expand(3, 3, 2).clone()
        grid[1, 1] = one_hot(2, 1)
        _, phi = local_uniformity_and_saliency(grid)
        # centre: eight orthogonal neighbours; corners: one of three; edges: one of five
        assert float(phi[1, 1]) == 1.0
        assert float(phi[0, 0]) == pytest.approx(1 / 3)
        assert float(phi[0, 1]) == pytest.approx(1 / 5)
        assert float(phi[2, 2]) == pytest.approx(1 / 3)

    def test_absent_cells_are_not_neighbours(self):
        grid = one_hot(2, 0).expand(3, 3, 2).clone()
        grid[1, 1] = one_hot(2, 1)
        present = torch.ones(3, 3, dtype=torch.bool)
        present[1, 1] = False
        uniformity, phi = local_uniformity_and_saliency(grid, present)
        assert bool((phi == 0.0).all())
        assert float(uniformity[1, 1]) == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loops(self, seed):
        cache = random_cache(seed, num_frames=3, grid_rows=4, grid_cols=5)
        vectors = cache.token_vectors()
        phi = spatial_saliency(cache, vectors)
        expected = oracles.spatial_saliency(cache, vectors.tolist())
        assert phi.tolist() == pytest.approx(expected, abs=1e-9)

    def test_compressed_frames_drop_neighbours(self):
        cache = random_cache(3, num_frames=2, grid_rows=3, grid_cols=3)
        small = cache.select([i for i in range(cache.seq_len) if i % 3])
        vectors = small.token_vectors()
        phi = spatial_saliency(small, vectors)
        expected = oracles.spatial_saliency(small, vectors.tolist())
        assert phi.tolist() == pytest.approx(expected, abs=1e-9)

    def test_boundary_outranks_background(self):
        scenario = StreamScenario(
            num_frames=1,
            noise_sigma=0.0,
            components=(Component(0, 0, (2, 2, 5, 6)),),
            text_tokens=8,
            window_queries=8,
        )
        cache, truth = generate_stream(scenario)
        phi = spatial_saliency(cache, cache.token_vectors())
        component = truth.component_token_indices
        near = {
            i + du * 8 + dv
            for i in component
            for du in (-1, 0, 1)
            for dv in (-1, 0, 1)
        }
        deep = [i for i in range(64) if i not in near]
        assert deep
        lowest_boundary = min(float(phi[i]) for i in truth.boundary_token_indices)
        assert lowest_boundary > max(float(phi[i]) for i in deep)
        assert max(float(phi[i]) for i in deep) == 0.0

    def test_scale_invariance(self):
        cache = random_cache(4, num_frames=2, grid_rows=3, grid_cols=4)
        keys = 2 * cache.stacked_keys().float()
        doubled = layer_from_tensors(keys, cache.meta, cache.layouts)
        phi = spatial_saliency(cache, cache.token_vectors())
        phi2 = spatial_saliency(doubled, doubled.token_vectors())
        assert phi2.tolist() == pytest.approx(phi.tolist(), abs=1e-12)

    def test_text_scores_zero(self):
        cache = random_cache(5)
        phi = spatial_saliency(cache, cache.token_vectors())
        for i, m in enumerate(cache.meta):
            if not m.is_visual:
                assert phi[i] == 0.0


class TestTrajectory:
    def test_exact_copy_is_fully_redundant(self):
        current = torch.randn(4, 3, dtype=torch.float64)
        historical = torch.cat([current[2:3], torch.zeros(1, 3, dtype=torch.float64)])
        rho = trajectory_redundancy(historical, current)
        assert rho.tolist() == [1.0, 0.0]

    def test_empty_current_frame(self):
        with pytest.raises(ValueError, match="empty current frame"):
            trajectory_redundancy(torch.randn(2, 3), torch.zeros(0, 3))

    def test_no_history(self):
        assert trajectory_redundancy(torch.zeros(0, 3), torch.ones(2, 3)).numel() == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loops(self, seed):
        cache = random_cache(seed, num_frames=4, duplicate_last=seed % 2 == 0)
        vectors = cache.token_vectors()
        stats = trajectory_stats(cache, vectors)
        expected = oracles.trajectory_redundancy(cache, vectors.tolist())
        assert stats.historical_rows == sorted(expected)
        for i, r in expected.items():
            assert float(stats.rho[i]) == pytest.approx(r, abs=1e-9)
        undefined = set(range(cache.seq_len)) - set(expected)
        assert all(math.isnan(float(stats.rho[i])) for i in undefined)

    def test_duplicated_frame(self):
        cache = random_cache(1, num_frames=2, duplicate_last=True)
        stats = trajectory_stats(cache, cache.token_vectors())
        assert [float(stats.rho[i]) for i in stats.historical_rows] == [1.0] * 9

    def test_single_frame_has_no_history(self):
        cache = random_cache(1, num_frames=1)
        stats = trajectory_stats(cache, cache.token_vectors())
        assert stats.historical_rows == []
        assert len(stats.current_rows) == 9


class TestThreshold:
    @settings(max_examples=1000)
    @given(
        rho=st.lists(
            st.floats(min_value=-1.0, max_value=1.0), min_size=1, max_size=50
        ),
        budget_b=st.integers(min_value=1, max_value=80),
    )
    def test_rank_semantics(self, rho, budget_b):
        tau = redundancy_threshold(rho, budget_b)
        assert tau == sorted(rho)[min(budget_b, len(rho)) - 1]
        assert sum(r <= tau for r in rho) >= min(budget_b, len(rho))

    def test_invalid(self):
        with pytest.raises(ValueError, match="empty pool"):
            redundancy_threshold([], 3)
        with pytest.raises(ValueError, match="at least 1"):
            redundancy_threshold([0.5], 0)

    def test_gate(self):
        rho = [0.2, 0.9, 0.5, 1.0]
        assert temporal_gate(rho, 0.5).tolist() == [True, False, True, False]
        assert temporal_gate(rho, None).tolist() == [True] * 4
        assert temporal_gate(rho, 1.0, 1.0).tolist() == [True, True, True, False]
        assert temporal_gate(rho, 1.0, 1.5).tolist() == [True] * 4

    def test_ties_at_threshold_all_pass(self):
        rho = [0.5, 0.5, 0.5, 0.9]
        tau = redundancy_threshold(rho, 2)
        assert tau == 0.5
        assert temporal_gate(rho, tau).tolist() == [True, True, True, False]
        assert strict_gate(rho, 2).tolist() == [True, True, False, False]


class TestIntegration:
    @pytest.fixture
    def meta(self):
        return [
            TokenMeta(Modality.TEXT, 0),
            TokenMeta(Modality.VISUAL, 0, (0, 0)),
            TokenMeta(Modality.VISUAL, 0, (0, 1)),
            TokenMeta(Modality.TEXT, 0),
        ]

    def test_modality_aware(self, meta):
        s = integrate_scores(
            [0.1, 0.2, 0.3, 0.4],
            [0.5, 0.5, 0.25, 0.5],
            [True, True, False, False],
            meta,
            BudgetConfig(beta=0.5),
        )
        assert s.tolist() == pytest.approx([0.1, 0.7, 0.0, 0.4])

    def test_switches(self, meta):
        args = ([0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.25, 0.5], [True, True, False, True])
        no_css = integrate_scores(
            *args, meta, BudgetConfig(beta=0.5, enable_css=False)
        )
        assert no_css.tolist() == pytest.approx([0.1, 0.2, 0.0, 0.4])
        no_tsg = integrate_scores(
            *args, meta, BudgetConfig(beta=0.5, enable_tsg=False)
        )
        assert no_tsg.tolist() == pytest.approx([0.1, 0.7, 0.55, 0.4])

    def test_normalized_terms(self, meta):
        s = integrate_scores(
            [0.1, 0.2, 0.3, 0.4],
            [0.0, 0.5, 0.25, 0.0],
            [True, True, True, True],
            meta,
            BudgetConfig(beta=0.5, normalize_terms=True),
        )
        assert s.tolist() == pytest.approx([0.1, 1.0, 1.0, 0.4])

    def test_length_mismatch(self, meta):
        with pytest.raises(ValueError, match="differ in length"):
            integrate_scores([0.1], [0.0], [True], meta, BudgetConfig(beta=0.5))


class TestTokenScores:
    def make(self, **overrides):
        columns = dict(
            a_base=torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64),
            phi_space=torch.tensor([0.0, 0.5, 0.0], dtype=torch.float64),
            rho=torch.tensor([math.nan, 0.3, 1.0], dtype=torch.float64),
            m_time=torch.tensor([True, True, False]),
            s_final=torch.tensor([0.5, 0.75, 0.0], dtype=torch.float64),
        )
        columns.update(overrides)
        return TokenScores(**columns)

    def test_to_json(self):
        ledger = self.make().to_json()
        assert ledger["rho"] == [None, 0.3, 1.0]
        assert ledger["m_time"] == [1, 1, 0]
        assert ledger["s_final"] == [0.5, 0.75, 0.0]

    def test_quartiles_skip_undefined(self):
        quartiles = self.make().quartiles()
        assert quartiles["rho"] == pytest.approx([0.3, 0.475, 0.65, 0.825, 1.0])
        assert quartiles["s_final"][0] == 0.0
        assert quartiles["s_final"][-1] == 0.75

    def test_gated_tokens_score_zero(self):
        with pytest.raises(ValueError, match="gated tokens must score 0"):
            self.make(s_final=torch.tensor([0.5, 0.75, 0.1], dtype=torch.float64))

    def test_saliency_range(self):
        with pytest.raises(ValueError, match="spatial saliency"):
            self.make(phi_space=torch.tensor([0.0, 2.5, 0.0], dtype=torch.float64))

    def test_column_lengths(self):
        with pytest.raises(ValueError, match="differ in length"):
            self.make(a_base=torch.tensor([0.5], dtype=torch.float64))


class TestWorkedExamples:
    def test_identical_keys(self):
        keys = torch.full((4, 3), 0.5)
        one = AttentionWindow(torch.randn(1, 3))
        assert base_attention_prior(keys, one).tolist() == pytest.approx([0.25] * 4)
        query = torch.randn(1, 3)
        two = AttentionWindow(torch.cat([query, query]))
        assert base_attention_prior(keys, two).tolist() == pytest.approx([0.5] * 4)

    def test_single_query_softmax(self):
        keys = torch.eye(3, dtype=torch.float64)
        window = AttentionWindow(math.sqrt(3) * keys[:1])
        a_base = base_attention_prior(keys, window)
        assert a_base.tolist() == pytest.approx([0.57612, 0.21194, 0.21194], abs=1e-5)

    def test_two_by_two_grid(self):
        e1, e2 = one_hot(2, 0), one_hot(2, 1)
        grid = torch.stack([torch.stack([e1, e1]), torch.stack([e1, e2])])
        uniformity, phi = local_uniformity_and_saliency(grid)
        assert float(uniformity[1, 1]) == 0.0
        assert float(phi[1, 1]) == 1.0
        assert float(uniformity[0, 0]) == pytest.approx(2 / 3)
        assert float(phi[0, 0]) == pytest.approx(1 / 3)

    def test_partial_match(self):
        e1, e2 = one_hot(2, 0), one_hot(2, 1)
        current = torch.stack([(e1 + e2) / math.sqrt(2), e2])
        rho = trajectory_redundancy(e1[None], current)
        assert float(rho[0]) == pytest.approx(0.70711, abs=1e-5)

    def test_threshold_and_gate(self):
        rho = [0.1, 0.9, 0.5]
        assert redundancy_threshold(rho, 2) == 0.5
        assert redundancy_threshold(rho, 1) == 0.1
        assert redundancy_threshold(rho, 5) == 0.9
        assert temporal_gate(rho, 0.5).tolist() == [True, False, True]
        assert temporal_gate([0.4, 0.4], 0.4).tolist() == [True, True]
        assert temporal_gate(rho, 0.9).tolist() == [True, True, True]


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(
        rows=st.integers(min_value=1, max_value=6),
        cols=st.integers(min_value=1, max_value=6),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_transpose_covariance(self, rows, cols, seed):
        gen = torch.Generator().manual_seed(seed)
        grid = torch.randn(rows, cols, 3, generator=gen)
        uniformity, phi = local_uniformity_and_saliency(grid)
        uniformity_t, phi_t = local_uniformity_and_saliency(grid.transpose(0, 1))
        assert torch.allclose(uniformity_t, uniformity.T, atol=1e-12)
        assert torch.allclose(phi_t, phi.T, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=2**16),
        extra=st.integers(min_value=1, max_value=5),
    )
    def test_more_current_tokens_never_lower_redundancy(self, seed, extra):
        gen = torch.Generator().manual_seed(seed)
        historical = torch.randn(6, 4, generator=gen)
        current = torch.randn(3, 4, generator=gen)
        more = torch.cat([current, torch.randn(extra, 4, generator=gen)])
        before = trajectory_redundancy(historical, current)
        after = trajectory_redundancy(historical, more)
        assert bool((after >= before - 1e-12).all())

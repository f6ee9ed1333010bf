import numpy as np
import pytest

from medi.rank_pooling import (
    arp_coefficients,
    exact_rank_pool,
    ranking_score,
    running_feature_means,
    weighted_sum_image,
)

from conftest import make_clip, smooth_texture


def monotone_clip(seed, t=5, size=8):
    """Frames whose running-mean intensity strictly increases over time."""
    rng = np.random.default_rng(seed)
    base = rng.random((size, size, 3)).astype(np.float32) * 0.2
    direction = smooth_texture(size, size, seed=seed + 1)[:, :, None].repeat(3, axis=2) - 0.5
    frames = np.stack([base + (i / (t - 1)) * direction for i in range(t)])
    return make_clip(frames, apex=t // 2)


class TestArpCoefficients:
    @pytest.mark.parametrize(
        "t,expected",
        [
            (5, [-4, -2, 0, 2, 4]),
            (2, [-1, 1]),
            (6, [-5, -3, -1, 1, 3, 5]),
        ],
    )
    def test_known_values(self, t, expected):
        coeffs = arp_coefficients(t)
        assert coeffs.values.tolist() == expected

    def test_zero_sum_exact_up_to_1000(self):
        for t in range(2, 1001):
            values = arp_coefficients(t).values
            assert values.sum() == 0.0
            assert values[0] == -(t - 1) and values[-1] == t - 1

    def test_rejects_short(self):
        with pytest.raises(ValueError, match="at least two frames"):
            arp_coefficients(1)


class TestWeightedSumImage:
    def test_identical_frames_cancel(self):
        frame = np.full((4, 4, 3), 0.7, dtype=np.float32)
        clip = make_clip(np.stack([frame, frame]))
        out = weighted_sum_image(clip, arp_coefficients(2))
        assert np.abs(out.tensor).max() == 0.0

    def test_hand_sum(self):
        ones = np.ones((4, 4, 3), dtype=np.float32)
        clip = make_clip(np.stack([ones, 2 * ones, 3 * ones]))
        out = weighted_sum_image(clip, arp_coefficients(3))
        np.testing.assert_allclose(out.tensor, 4.0 * np.ones((4, 4, 3)), atol=0)

    def test_zero_weights(self, rng):
        clip = make_clip(rng.random((3, 4, 4, 3)))
        coeffs = arp_coefficients(3)
        coeffs.values = np.zeros(3)
        assert np.abs(weighted_sum_image(clip, coeffs).tensor).max() == 0.0

    def test_length_mismatch(self, rng):
        clip = make_clip(rng.random((3, 4, 4, 3)))
        with pytest.raises(ValueError, match="coefficient length"):
            weighted_sum_image(clip, arp_coefficients(4))

    def test_bias_invariance(self, rng):
        # Zero-sum coefficients cancel any constant added to every pixel;
        # stated in double precision so the shift itself is exact.
        stack = rng.random((5, 6, 6, 3))
        coeffs = arp_coefficients(5)
        a = weighted_sum_image(make_clip(stack, dtype=np.float64), coeffs).tensor
        b = weighted_sum_image(make_clip(stack + 0.37, dtype=np.float64), coeffs).tensor
        assert np.abs(a - b).max() < 1e-9

    def test_linearity(self, rng):
        stack = rng.random((4, 5, 5, 3))
        clip = make_clip(stack)
        w1 = arp_coefficients(4)
        w2 = arp_coefficients(4)
        w2.values = rng.standard_normal(4)
        combo = arp_coefficients(4)
        combo.values = 2.0 * w1.values + 3.0 * w2.values
        lhs = weighted_sum_image(clip, combo).tensor
        rhs = 2.0 * weighted_sum_image(clip, w1).tensor + 3.0 * weighted_sum_image(clip, w2).tensor
        assert np.abs(lhs - rhs).max() < 1e-9

    def test_provenance(self, rng):
        clip = make_clip(rng.random((3, 4, 4, 3)), clip_id="clipX")
        out = weighted_sum_image(clip, arp_coefficients(3))
        assert out.provenance == "DI"
        assert out.source_clip_id == "clipX"


def pair_order_fraction(rank, clip):
    scores = running_feature_means(clip) @ rank.d
    t = len(scores)
    good = total = 0
    for i in range(t):
        for j in range(i + 1, t):
            total += 1
            good += scores[j] > scores[i]
    return good / total


class TestExactRankPool:
    def test_monotone_clip_orders_pairs(self):
        clip = monotone_clip(seed=0)
        rank = exact_rank_pool(clip, lambda_reg=1.0, iterations=500, step_size=1e-3)
        assert pair_order_fraction(rank, clip) >= 0.95
        assert rank.final_objective <= rank.objective_trace[0]

    def test_identical_two_frames_converges_to_hinge_one(self):
        frame = np.full((8, 8, 3), 0.5, dtype=np.float32)
        clip = make_clip(np.stack([frame, frame]))
        rank = exact_rank_pool(clip, lambda_reg=1.0, iterations=2000, step_size=1e-2)
        # Equal features: no margin can be satisfied, d decays to zero and
        # the objective settles at the bare hinge value 1.
        assert np.abs(rank.d).max() < 1e-6
        assert abs(rank.final_objective - 1.0) < 1e-6

    def test_zero_iterations_rejected(self):
        clip = monotone_clip(seed=1)
        with pytest.raises(ValueError, match="iterations"):
            exact_rank_pool(clip, iterations=0)

    def test_objective_nonincreasing_overall(self):
        clip = monotone_clip(seed=2)
        rank = exact_rank_pool(clip, iterations=300)
        assert rank.objective_trace[-1] <= rank.objective_trace[0]


class TestRankingScore:
    def test_zero_vector_scores_zero(self):
        clip = monotone_clip(seed=3)
        rank = exact_rank_pool(clip, iterations=1)
        rank.d[:] = 0.0
        for t in range(1, clip.T + 1):
            assert ranking_score(rank, clip, t) == 0.0

    def test_constant_clip_score_is_norm_squared(self):
        frame = np.full((4, 4, 3), 0.25, dtype=np.float32)
        clip = make_clip(np.stack([frame] * 3))
        v_last = running_feature_means(clip)[-1]
        rank = exact_rank_pool(clip, iterations=1)
        rank.d = v_last.copy()
        expected = float(v_last @ v_last)
        for t in range(1, 4):
            assert abs(ranking_score(rank, clip, t) - expected) < 1e-12

    def test_out_of_range(self):
        clip = monotone_clip(seed=4)
        rank = exact_rank_pool(clip, iterations=1)
        with pytest.raises(ValueError, match="out of range"):
            ranking_score(rank, clip, 0)
        with pytest.raises(ValueError, match="out of range"):
            ranking_score(rank, clip, clip.T + 1)

    def test_monotone_scores_increase_adjacent(self):
        clip = monotone_clip(seed=5)
        rank = exact_rank_pool(clip, iterations=500)
        scores = [ranking_score(rank, clip, t) for t in range(1, clip.T + 1)]
        increases = sum(b > a for a, b in zip(scores, scores[1:]))
        assert increases / (clip.T - 1) >= 0.95


class TestOracleAgainstClosedForm:
    def test_dominant_sign_pattern_agreement(self, capsys):
        """The optimized ranking direction should mostly share the sign
        pattern of the closed-form pooled image on its dominant entries."""
        trials = 20
        agree = 0
        for seed in range(trials):
            clip = monotone_clip(seed=100 + seed)
            rank = exact_rank_pool(clip, iterations=500)
            pooled = weighted_sum_image(clip, arp_coefficients(clip.T)).tensor.ravel()
            cos = float(
                pooled @ rank.d / (np.linalg.norm(pooled) * np.linalg.norm(rank.d) + 1e-30)
            )
            k = max(1, int(0.1 * pooled.size))
            dominant = np.argsort(-np.abs(pooled))[:k]
            match = np.mean(np.sign(pooled[dominant]) == np.sign(rank.d[dominant]))
            print(f"trial {seed}: cosine={cos:.3f} sign-match={match:.2f}")
            agree += match >= 0.9
        assert agree / trials >= 0.8

"""Permutation-invariant loss tests against a nested-loop brute-force
oracle, plus finite-difference checks of the analytic backward pass."""

import numpy as np
import pytest

from stereoseld.errors import InputError
from stereoseld.loss import (
    TRACK_PERMUTATIONS,
    pit_loss,
    pit_loss_backward,
)


def brute_force_pit(pred, target, lambda_dist=1.0):
    """Independent oracle: explicit loops over frames, classes, perms."""
    n_f, n_t, n_c, _ = pred.shape
    scale = (1.0, 1.0, lambda_dist)
    per_frame = np.zeros(n_f)
    chosen = np.zeros((n_f, n_c), dtype=np.intp)
    for f in range(n_f):
        for c in range(n_c):
            best = None
            for p, perm in enumerate(TRACK_PERMUTATIONS):
                s = 0.0
                for t in range(n_t):
                    for k in range(3):
                        d = (pred[f, perm[t], c, k] - target[f, t, c, k]) * scale[k]
                        s += d * d
                s /= 9.0
                if best is None or s < best:
                    best, chosen[f, c] = s, p
            per_frame[f] += best / n_c
    return float(per_frame.mean()), per_frame, chosen


class TestPitLoss:
    def test_perfect_prediction_is_zero(self, rng):
        target = rng.standard_normal((5, 3, 4, 3))
        out = pit_loss(target.copy(), target)
        assert out.total == 0.0
        assert np.all(out.chosen_permutation == 0)  # identity wins ties

    def test_permuted_tracks_cost_nothing(self, rng):
        target = rng.standard_normal((1, 3, 1, 3))
        pred = target[:, [2, 0, 1]]  # pred[1,2,0] recovers target order
        out = pit_loss(pred, target)
        assert out.total == pytest.approx(0.0, abs=1e-30)
        assert TRACK_PERMUTATIONS[out.chosen_permutation[0, 0]] == (1, 2, 0)

    def test_single_cell_hand_value(self):
        pred = np.zeros((1, 3, 1, 3))
        target = np.zeros((1, 3, 1, 3))
        target[0, 0, 0] = (0.6, 0.0, 3.0)
        # best permutation matches any zero pred track to the event; the
        # mean over 9 components is (0.36 + 9) / 9
        out = pit_loss(pred, target)
        assert out.total == pytest.approx((0.36 + 9.0) / 9.0, rel=1e-12)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(25):
            pred = rng.standard_normal((4, 3, 5, 3))
            target = rng.standard_normal((4, 3, 5, 3))
            lam = float(rng.uniform(0.25, 2.0))
            out = pit_loss(pred, target, lambda_dist=lam)
            total, per_frame, chosen = brute_force_pit(pred, target, lam)
            assert out.total == pytest.approx(total, rel=1e-12)
            np.testing.assert_allclose(out.per_frame, per_frame, rtol=1e-12)
            np.testing.assert_array_equal(out.chosen_permutation, chosen)

    def test_full_shape_matches_oracle(self, rng):
        pred = rng.standard_normal((50, 3, 13, 3))
        target = rng.standard_normal((50, 3, 13, 3))
        out = pit_loss(pred, target)
        total, per_frame, _ = brute_force_pit(pred, target)
        assert out.total == pytest.approx(total, rel=1e-12)
        np.testing.assert_allclose(out.per_frame, per_frame, rtol=1e-12)

    def test_distance_weight(self, rng):
        target = rng.standard_normal((2, 3, 2, 3))
        pred = target.copy()
        pred[..., 2] += 1.0  # distance-only error, identity stays optimal
        assert pit_loss(pred, target, lambda_dist=0.0).total == 0.0
        base = pit_loss(pred, target, lambda_dist=1.0).total
        assert pit_loss(pred, target, lambda_dist=2.0).total == pytest.approx(
            4.0 * base, rel=1e-12
        )
        assert base == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_per_frame_mean_equals_total(self, rng):
        out = pit_loss(rng.standard_normal((7, 3, 4, 3)),
                       rng.standard_normal((7, 3, 4, 3)))
        assert out.total == pytest.approx(float(out.per_frame.mean()), rel=1e-15)

    def test_rejects_bad_shapes(self, rng):
        good = rng.standard_normal((4, 3, 5, 3))
        with pytest.raises(InputError):
            pit_loss(good, good[:3])
        with pytest.raises(InputError):
            pit_loss(good[:, :2], good[:, :2])
        with pytest.raises(InputError):
            pit_loss(good[..., :2], good[..., :2])


class TestPitLossBackward:
    def test_matches_finite_differences(self, rng):
        pred = rng.standard_normal((3, 3, 2, 3))
        target = rng.standard_normal((3, 3, 2, 3))
        lam = 0.7
        out = pit_loss(pred, target, lambda_dist=lam)
        grad = pit_loss_backward(pred, target, out.chosen_permutation,
                                 lambda_dist=lam)
        eps = 1e-6
        it = np.nditer(pred, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus, minus = pred.copy(), pred.copy()
            plus[idx] += eps
            minus[idx] -= eps
            fd = (pit_loss(plus, target, lam).total
                  - pit_loss(minus, target, lam).total) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_zero_at_optimum(self, rng):
        target = rng.standard_normal((2, 3, 2, 3))
        out = pit_loss(target, target)
        grad = pit_loss_backward(target, target, out.chosen_permutation)
        np.testing.assert_array_equal(grad, 0.0)

    def test_grad_scale_is_linear(self, rng):
        pred = rng.standard_normal((2, 3, 2, 3))
        target = rng.standard_normal((2, 3, 2, 3))
        out = pit_loss(pred, target)
        g1 = pit_loss_backward(pred, target, out.chosen_permutation)
        g3 = pit_loss_backward(pred, target, out.chosen_permutation,
                               grad_scale=3.0)
        np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-15)

    def test_tie_subgradient_follows_chosen_permutation(self):
        # all tracks identical: every permutation ties; argmin picks index 0
        pred = np.ones((1, 3, 1, 3)) * 0.5
        target = np.zeros((1, 3, 1, 3))
        out = pit_loss(pred, target)
        assert np.all(out.chosen_permutation == 0)
        grad = pit_loss_backward(pred, target, out.chosen_permutation)
        expected = 2.0 * 0.5 / 9.0  # identity-permutation analytic value
        np.testing.assert_allclose(grad, expected, rtol=1e-15)

    def test_preserves_dtype(self, rng):
        pred = rng.standard_normal((2, 3, 2, 3)).astype(np.float32)
        target = rng.standard_normal((2, 3, 2, 3)).astype(np.float32)
        out = pit_loss(pred, target)
        grad = pit_loss_backward(pred, target, out.chosen_permutation)
        assert grad.dtype == np.float32

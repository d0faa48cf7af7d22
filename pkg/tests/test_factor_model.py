"""Factor-pair numerics: SGD steps, ALS sweeps, guards and diagnostics.

The hand-checked constants below were derived by evaluating the update rules
on paper for one-cell problems; they freeze the exact arithmetic.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lowrankq.factor_model import (
    NORM_FLOOR,
    OVERFLOW_GUARD,
    FactorPair,
    NumericalDivergenceError,
    als_sweep,
    build_target_matrix,
    frobenius_sq_error,
    init_factors,
    materialize,
    predict_cell,
    predict_cells,
    sgd_update,
    svd_energy,
)


def pair(left, right):
    return FactorPair(np.array(left, dtype=float), np.array(right, dtype=float))


# ---------------------------------------------------------------------------
# construction and prediction


def test_init_factors_deterministic_per_seed():
    a = init_factors(2, 2, 1, 1.0, rng=7)
    b = init_factors(2, 2, 1, 1.0, rng=7)
    assert np.array_equal(a.left, b.left)
    assert np.array_equal(a.right, b.right)


def test_init_factors_positive_uniform_band():
    fp = init_factors(40, 30, 3, scale=0.2, rng=11)
    for m in (fp.left, fp.right):
        assert m.min() >= 0.1
        assert m.max() < 0.3


def test_init_factors_rank_and_scale_validation():
    with pytest.raises(ValueError):
        init_factors(2, 3, 3, rng=0)
    with pytest.raises(ValueError):
        init_factors(2, 3, 0, rng=0)
    with pytest.raises(ValueError):
        init_factors(2, 3, 1, scale=0.0, rng=0)


def test_predict_cell_is_row_column_dot():
    fp = init_factors(5, 4, 3, rng=3)
    for r in range(5):
        for c in range(4):
            assert_allclose(predict_cell(fp, r, c), fp.left[r] @ fp.right[:, c], rtol=1e-15)


def test_predict_cells_matches_scalar():
    fp = init_factors(6, 6, 2, rng=4)
    cells = [(0, 0), (5, 5), (2, 3)]
    got = predict_cells(fp, cells)
    assert_allclose(got, [predict_cell(fp, r, c) for r, c in cells], rtol=0)


def test_materialize_equals_matmul():
    fp = init_factors(7, 5, 2, rng=9)
    assert_allclose(materialize(fp), fp.left @ fp.right, rtol=1e-15)


# ---------------------------------------------------------------------------
# SGD step, hand-frozen one-cell arithmetic


def test_sgd_step_plain_hand_values():
    # l=1, r=2, target 3: prediction 2, error 1.
    # l' = 1 + 0.1*(1*2) = 1.2 ; r' = 2 + 0.1*(1*1) = 2.1
    fp = sgd_update(pair([[1.0]], [[2.0]]), (0, 0), 3.0, alpha=0.1)
    assert_allclose(fp.left[0, 0], 1.2, rtol=0, atol=1e-15)
    assert_allclose(fp.right[0, 0], 2.1, rtol=0, atol=1e-15)


def test_sgd_step_regularized_hand_values():
    # same cell with eta=0.05 shrinkage:
    # l' = 1 + 0.1*(1*2 - 2*0.05*1) = 1.19 ; r' = 2 + 0.1*(1*1 - 2*0.05*2) = 2.08
    fp = sgd_update(pair([[1.0]], [[2.0]]), (0, 0), 3.0, alpha=0.1, eta=0.05)
    assert_allclose(fp.left[0, 0], 1.19, rtol=0, atol=1e-15)
    assert_allclose(fp.right[0, 0], 2.08, rtol=0, atol=1e-15)


def test_sgd_step_normalized_hand_values():
    # raw direction (delta*r, delta*l) = (2, 1), norm sqrt(5); the step moves
    # exactly alpha along the unit direction.
    fp = sgd_update(pair([[1.0]], [[2.0]]), (0, 0), 3.0, alpha=0.1, normalize=True)
    s5 = math.sqrt(5.0)
    assert_allclose(fp.left[0, 0], 1.0 + 0.1 * 2.0 / s5, rtol=1e-15)
    assert_allclose(fp.right[0, 0], 2.0 + 0.1 * 1.0 / s5, rtol=1e-15)


def test_sgd_update_uses_pre_update_values_both_sides():
    # simultaneous update: the right factor step must see the old left row.
    rng = np.random.default_rng(5)
    fp = init_factors(4, 4, 2, rng=rng)
    old_l = fp.left.copy()
    old_r = fp.right.copy()
    target = 0.7
    out = sgd_update(fp, (1, 2), target, alpha=0.05)
    delta = target - old_l[1] @ old_r[:, 2]
    assert_allclose(out.left[1], old_l[1] + 0.05 * delta * old_r[:, 2], rtol=1e-14)
    assert_allclose(out.right[:, 2], old_r[:, 2] + 0.05 * delta * old_l[1], rtol=1e-14)


def test_sgd_update_locality():
    fp = init_factors(6, 5, 2, rng=8)
    before_l = fp.left.copy()
    before_r = fp.right.copy()
    out = sgd_update(fp, (3, 1), 9.0, alpha=0.2)
    untouched_rows = [i for i in range(6) if i != 3]
    untouched_cols = [j for j in range(5) if j != 1]
    assert np.array_equal(out.left[untouched_rows], before_l[untouched_rows])
    assert np.array_equal(out.right[:, untouched_cols], before_r[:, untouched_cols])
    assert not np.array_equal(out.left[3], before_l[3])
    assert not np.array_equal(out.right[:, 1], before_r[:, 1])


def test_sgd_gradient_matches_finite_differences():
    """Step direction equals -alpha * grad of 0.5*(target - [LR]_cell)^2.

    Central finite differences on the touched row and column, relative error
    below 1e-5.
    """
    rng = np.random.default_rng(123)
    for _ in range(20):
        n, m, k = rng.integers(2, 7, 3)
        fp = init_factors(int(n), int(m), int(min(k, n, m)), scale=0.5, rng=rng)
        r, c = int(rng.integers(n)), int(rng.integers(m))
        target = float(rng.normal())
        alpha = 0.01
        out = sgd_update(fp.copy(), (r, c), target, alpha=alpha)
        step_l = (out.left[r] - fp.left[r]) / alpha
        step_r = (out.right[:, c] - fp.right[:, c]) / alpha

        def loss(left, right):
            return 0.5 * (target - left[r] @ right[:, c]) ** 2

        h = 1e-6
        for i in range(fp.rank):
            lp, lm = fp.left.copy(), fp.left.copy()
            lp[r, i] += h
            lm[r, i] -= h
            g = (loss(lp, fp.right) - loss(lm, fp.right)) / (2 * h)
            assert abs(step_l[i] - (-g)) <= 1e-5 * max(1.0, abs(g))
            rp, rm = fp.right.copy(), fp.right.copy()
            rp[i, c] += h
            rm[i, c] -= h
            g = (loss(fp.left, rp) - loss(fp.left, rm)) / (2 * h)
            assert abs(step_r[i] - (-g)) <= 1e-5 * max(1.0, abs(g))


def test_eta_zero_reduces_to_plain_update():
    fp = init_factors(5, 5, 2, rng=21)
    a = sgd_update(fp.copy(), (2, 2), 1.5, alpha=0.1, eta=0.0)
    b = sgd_update(fp.copy(), (2, 2), 1.5, alpha=0.1)
    assert np.array_equal(a.left, b.left)
    assert np.array_equal(a.right, b.right)


def test_normalized_direction_cosine():
    # the normalized step must be exactly parallel to the raw gradient step
    rng = np.random.default_rng(77)
    for _ in range(50):
        fp = init_factors(4, 4, 2, scale=1.0, rng=rng)
        cell = (int(rng.integers(4)), int(rng.integers(4)))
        target = float(rng.normal(scale=3.0))
        plain = sgd_update(fp.copy(), cell, target, alpha=1.0)
        normed = sgd_update(fp.copy(), cell, target, alpha=1.0, normalize=True)
        g = np.concatenate(
            [plain.left[cell[0]] - fp.left[cell[0]], plain.right[:, cell[1]] - fp.right[:, cell[1]]]
        )
        u = np.concatenate(
            [normed.left[cell[0]] - fp.left[cell[0]], normed.right[:, cell[1]] - fp.right[:, cell[1]]]
        )
        denom = np.linalg.norm(g) * np.linalg.norm(u)
        if denom == 0.0:
            continue
        cosine = float(g @ u) / denom
        assert cosine > 1.0 - 1e-10
        assert_allclose(np.linalg.norm(u), 1.0, rtol=1e-12)


def test_normalization_floor_falls_back_to_raw_step():
    # below the norm floor the raw (unnormalized) step applies
    fp = pair([[1e-12]], [[1e-12]])
    out = sgd_update(fp, (0, 0), 1e-20, alpha=0.5, normalize=True)
    raw = sgd_update(pair([[1e-12]], [[1e-12]]), (0, 0), 1e-20, alpha=0.5)
    assert np.array_equal(out.left, raw.left)
    assert np.array_equal(out.right, raw.right)
    assert NORM_FLOOR == 1e-8


def test_sgd_update_cell_bounds_and_alpha():
    fp = init_factors(3, 3, 1, rng=0)
    with pytest.raises(IndexError):
        sgd_update(fp, (3, 0), 1.0, alpha=0.1)
    with pytest.raises(ValueError):
        sgd_update(fp, (0, 0), 1.0, alpha=0.0)


def test_divergence_guard_raises_with_cell():
    fp = pair([[1.0]], [[1.0]])
    with pytest.raises(NumericalDivergenceError) as exc:
        sgd_update(fp, (0, 0), 1e30, alpha=1.0)
    assert exc.value.cell == (0, 0)
    assert OVERFLOW_GUARD == 1e12


def test_divergence_guard_catches_nan():
    fp = pair([[np.nan]], [[1.0]])
    with pytest.raises(NumericalDivergenceError):
        sgd_update(fp, (0, 0), 1.0, alpha=0.1)


def test_non_finite_target_rejected():
    fp = init_factors(2, 2, 1, rng=0)
    with pytest.raises(NumericalDivergenceError):
        sgd_update(fp, (0, 0), float("inf"), alpha=0.1)


# ---------------------------------------------------------------------------
# ALS


def test_build_target_matrix_overrides_single_cell():
    fp = init_factors(2, 2, 1, rng=1)
    q = build_target_matrix(fp, (0, 0), 9.0)
    full = materialize(fp)
    assert q[0, 0] == 9.0
    mask = np.ones_like(q, dtype=bool)
    mask[0, 0] = False
    assert np.array_equal(q[mask], full[mask])


def test_als_sweep_hand_values_rank_one_exact():
    # target [[2,4],[1,2]] is rank one; starting from R = [1,1]:
    #   L = Q R^T (R R^T)^-1 = [3, 1.5]^T
    #   R = (L^T L)^-1 L^T Q = [2/3, 4/3]
    # after which L R reproduces the target exactly.
    target = np.array([[2.0, 4.0], [1.0, 2.0]])
    fp = pair([[0.0], [0.0]], [[1.0, 1.0]])
    out = als_sweep(fp, target, k_iters=1)
    assert_allclose(out.factors.left[:, 0], [3.0, 1.5], rtol=1e-12)
    assert_allclose(out.factors.right[0], [2.0 / 3.0, 4.0 / 3.0], rtol=1e-12)
    assert_allclose(materialize(out.factors), target, rtol=1e-12)
    assert out.ridge_events == 0


def test_als_monotone_fit_error():
    """Each sweep of exact least-squares solves never increases the fit error."""
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n, m = rng.integers(3, 9, 2)
        k = int(rng.integers(1, min(n, m) + 1))
        target = rng.normal(size=(int(n), int(m)))
        fp = init_factors(int(n), int(m), k, scale=1.0, rng=rng)
        prev = frobenius_sq_error(materialize(fp), target)
        for _ in range(4):
            fp = als_sweep(fp, target, k_iters=1).factors
            err = frobenius_sq_error(materialize(fp), target)
            assert err <= prev + 1e-9 * max(1.0, prev)
            prev = err


def test_als_recovers_random_low_rank_matrices():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n, m, k = 8, 6, int(rng.integers(1, 4))
        truth = rng.normal(size=(n, k)) @ rng.normal(size=(k, m))
        fp = init_factors(n, m, k, scale=1.0, rng=rng)
        fp = als_sweep(fp, truth, k_iters=30).factors
        assert frobenius_sq_error(materialize(fp), truth) <= 1e-8


def test_als_singular_start_survives_via_ridge():
    # an all-zero right factor makes the first Gram singular; the sweep must
    # not crash and must report the fallback
    target = np.array([[1.0, 2.0], [3.0, 4.0]])
    fp = pair([[1.0], [1.0]], [[0.0, 0.0]])
    out = als_sweep(fp, target, k_iters=2)
    assert np.all(np.isfinite(out.factors.left))
    assert np.all(np.isfinite(out.factors.right))
    assert out.ridge_events >= 1


def test_als_shape_mismatch():
    fp = init_factors(3, 3, 1, rng=0)
    with pytest.raises(ValueError):
        als_sweep(fp, np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# error metric and SVD diagnostic


def test_frobenius_sq_error_known_value():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 2.0], [3.0, 2.0]])
    assert frobenius_sq_error(a, b) == 5.0


def test_svd_energy_diagonal_matrix():
    q = np.diag([3.0, 2.0, 1.0])
    total = 9.0 + 4.0 + 1.0
    s = svd_energy(q, 1)
    assert_allclose(s.energy, 9.0 / total, rtol=1e-14)
    assert_allclose(svd_energy(q, 2).energy, 13.0 / total, rtol=1e-14)
    assert svd_energy(q, 3).energy == 1.0
    assert_allclose(s.singular_values, [3.0, 2.0, 1.0], rtol=1e-14)


def test_svd_energy_zero_matrix():
    s = svd_energy(np.zeros((3, 3)), 1)
    assert s.is_zero
    with pytest.raises(ValueError):
        _ = s.energy


def test_svd_energy_k_bounds():
    with pytest.raises(ValueError):
        svd_energy(np.eye(3), 0)
    with pytest.raises(ValueError):
        svd_energy(np.eye(3), 4)

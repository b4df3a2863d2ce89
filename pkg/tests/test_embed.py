import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnn import embed
from qnn.embed import (SolverConfig, alternate, distance_preservation_check, mask_loss_grad, objective,
                       projection_loss_grad, random_orthonormal, solve_B)
from qnn.errors import NumericError, ShapeError

from embedcases import TOY, toy_features
from oracles import numeric_grad, rel_error


def test_solve_b_identity_projection():
    np.testing.assert_array_equal(solve_B(np.array([[2.0, -3.0]]), np.eye(2)), [[1, -1]])


def test_solve_b_zero_is_plus_one():
    np.testing.assert_array_equal(solve_B(np.array([[1.0, 1.0]]), np.array([[1.0, -1.0]])), [[1]])


def test_solve_b_is_exhaustive_argmin():
    rng = np.random.default_rng(0)
    for m in (1, 3, 8):
        Y, P = rng.standard_normal((8, 4)), rng.standard_normal((m, 4))
        M = rng.uniform(0, 1, m)
        B = solve_B(Y, P)
        Z = Y @ P.T
        codes = np.array(list(itertools.product([-1.0, 1.0], repeat=m)))
        for i in range(8):
            errs = (((Z[i] - codes * M) ** 2)).sum(axis=1)
            assert ((Z[i] - B[i] * M) ** 2).sum() <= errs.min() + 1e-12


def test_no_single_flip_improves_objective():
    rng = np.random.default_rng(1)
    for _ in range(5):
        Y, P, M = rng.standard_normal((6, 3)), rng.standard_normal((5, 3)), rng.uniform(0, 1, 5)
        B = solve_B(Y, P)
        base = objective(Y, P, B, M, 0.7, 0.1)
        for i, j in itertools.product(range(6), range(5)):
            F = B.copy()
            F[i, j] = -F[i, j]
            assert objective(Y, P, F, M, 0.7, 0.1) >= base - 1e-12


def test_solve_b_shape_error():
    with pytest.raises(ShapeError):
        solve_B(np.zeros((3, 4)), np.zeros((5, 3)))


def test_mask_loss_reduces_to_binarisation():
    rng = np.random.default_rng(2)
    Y, P = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
    B = solve_B(Y, P)
    loss, _ = mask_loss_grad(Y, P, B, np.ones(5), 0.0)
    assert loss == pytest.approx(0.5 * np.sum((Y @ P.T - B) ** 2), abs=1e-12)


def test_useless_column_is_dropped():
    rng = np.random.default_rng(3)
    Y = rng.standard_normal((6, 3))
    P = rng.standard_normal((4, 3))
    P[2] = 0.0  # column 2 of Y P^T is identically zero
    B = solve_B(Y, P)
    M = np.full(4, 0.9)
    _, g = mask_loss_grad(Y, P, B, M, 0.05)
    assert g[2] > 0
    for _ in range(200):
        _, g = mask_loss_grad(Y, P, B, M, 0.05)
        M = np.clip(M - 0.05 * g, 0, 1)
    assert M[2] == 0.0


def test_mask_gradient_finite_differences():
    rng = np.random.default_rng(4)
    for seed in range(5):
        Y, P = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
        B = solve_B(Y, P)
        M = rng.uniform(0.1, 0.9, 5)
        _, g = mask_loss_grad(Y, P, B, M, 0.3, 0.25)
        (num,) = numeric_grad(lambda m: mask_loss_grad(Y, P, B, m, 0.3, 0.25)[0], [M.copy()])
        assert rel_error(g, num) <= 1e-6


def test_projection_gradient_finite_differences():
    rng = np.random.default_rng(5)
    for seed in range(5):
        Y, P = rng.standard_normal((6, 5)), rng.standard_normal((7, 5))
        B, M = solve_B(Y, P), rng.uniform(0, 1, 7)
        _, g = projection_loss_grad(Y, B, M, P, 0.8, 0.5)
        (num,) = numeric_grad(lambda p: projection_loss_grad(Y, B, M, p, 0.8, 0.5)[0], [P.copy()])
        assert rel_error(g, num) <= 1e-6


def test_orthonormal_projection_has_no_penalty():
    rng = np.random.default_rng(6)
    Y, P = rng.standard_normal((6, 5)), random_orthonormal(9, 5, rng)
    B, M = solve_B(Y, P), np.ones(9)
    loss, _ = projection_loss_grad(Y, B, M, P, 3.0)
    assert loss == pytest.approx(0.5 * np.sum((Y @ P.T - B) ** 2), abs=1e-10)


def test_large_gamma_orthogonalises_square_projection():
    rng = np.random.default_rng(7)
    Y = rng.standard_normal((30, 6))
    P = 0.8 * np.eye(6) + 0.2 * rng.standard_normal((6, 6))
    B, M = solve_B(Y, P), np.ones(6)
    for _ in range(3000):
        _, g = projection_loss_grad(Y, B, M, P, 100.0, 1.0 / (30 * 6))
        P -= 0.002 * g
    assert np.linalg.norm(P.T @ P - np.eye(6)) < 1e-3


def test_random_orthonormal():
    rng = np.random.default_rng(8)
    P = random_orthonormal(12, 5, rng)
    np.testing.assert_allclose(P.T @ P, np.eye(5), atol=1e-12)
    Q = random_orthonormal(3, 5, rng)
    np.testing.assert_allclose(Q @ Q.T, np.eye(3), atol=1e-12)


def test_sign_features_converge_immediately():
    rng = np.random.default_rng(9)
    Y = rng.choice([-1.0, 1.0], size=(40, 6))
    state = alternate(Y, m=6, gamma=1.0, beta=0.0, rounds=3, P0=np.eye(6))
    assert state.trace[0]["after_b"] == 0.0
    assert all(t["objective"] == 0.0 for t in state.trace)
    assert state.kept == 6


def test_b_step_never_increases_objective():
    for seed in range(3):
        Y = toy_features(seed, samples=60, n=6)
        for beta in (0.0, 1e-2, 1e-1):
            state = alternate(Y, m=24, gamma=1.0, beta=beta, rounds=6, config=SolverConfig(lr_m=5.0, seed=seed))
            for t in state.trace:
                assert t["after_b"] <= t["before_b"] + 1e-8


def test_zero_beta_orthonormal_keeps_all_columns():
    rng = np.random.default_rng(10)
    Y = rng.standard_normal((50, 5))
    state = alternate(Y, m=5, gamma=1.0, beta=0.0, rounds=5, P0=random_orthonormal(5, 5, rng))
    assert state.kept == 5


def test_objective_invariant_under_column_permutation():
    rng = np.random.default_rng(11)
    Y, P, M = rng.standard_normal((7, 3)), rng.standard_normal((6, 3)), rng.uniform(0, 1, 6)
    B = solve_B(Y, P)
    perm = rng.permutation(6)
    a = objective(Y, P, B, M, 0.5, 0.2)
    b = objective(Y, P[perm], B[:, perm], M[perm], 0.5, 0.2)
    assert a == pytest.approx(b, rel=1e-13)


def test_default_width_is_eight_times_features():
    Y = np.random.default_rng(12).standard_normal((20, 3))
    assert alternate(Y, rounds=1).m == 24


def test_divergence_is_reported():
    Y = toy_features(0, samples=60, n=6)
    with pytest.raises(NumericError, match="diverged"):
        alternate(Y, m=24, rounds=10, config=SolverConfig(lr_p=50.0))


def test_kept_non_increasing_in_beta():
    Y = toy_features(0)
    kept = [alternate(Y, m=64, gamma=1.0, beta=b, rounds=20, config=TOY).kept for b in (1e-3, 1e-2, 1e-1)]
    assert kept[0] >= kept[1] >= kept[2]
    assert kept[0] > kept[2]


def test_exact_orthonormal_preserves_distances():
    rng = np.random.default_rng(13)
    Y = rng.standard_normal((100, 32))
    assert distance_preservation_check(Y, random_orthonormal(64, 32, rng)) <= 1e-10


def test_scaled_projection_is_detected():
    rng = np.random.default_rng(14)
    Y = rng.standard_normal((30, 8))
    err = distance_preservation_check(Y, 2 * random_orthonormal(16, 8, rng))
    assert err == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8), st.integers(0, 8))
def test_distance_identity_any_orthonormal(seed, n, extra):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((10, n))
    assert distance_preservation_check(Y, random_orthonormal(n + extra, n, rng)) <= 1e-10


def test_solver_projection_nearly_preserves_distances():
    Y = toy_features(0)
    state = alternate(Y, m=64, gamma=1.0, beta=1e-3, rounds=20, config=TOY)
    assert distance_preservation_check(Y, state.P) <= 0.05


def test_rescaling_sets_mean_power():
    Y = toy_features(1, samples=50, n=4)
    state = alternate(Y, m=32, rounds=1)
    assert np.mean(np.sum(state.Y ** 2, axis=1)) == pytest.approx(32, rel=1e-12)
    np.testing.assert_allclose(state.Y, Y * state.feature_scale)


def test_state_arrays():
    state = alternate(toy_features(2, samples=30, n=3), m=12, rounds=2)
    arrs = state.to_arrays()
    assert arrs["P"].shape == (12, 3) and arrs["B"].shape == (30, 12)
    assert set(np.unique(arrs["B"])) <= {-1.0, 1.0}
    assert set(np.unique(arrs["mask"])) <= {0, 1} and state.kept == arrs["mask"].sum()
    assert np.all((state.M >= 0) & (state.M <= 1))
    assert len(state.trace) == 2 and state.objective() == pytest.approx(state.trace[-1]["objective"])

import numpy as np
import pytest

from entroprune import SparsifyConfig
from entroprune.dumps import ConvGeometry
from entroprune.errors import SingularSystemError, ValidationError
from entroprune.solver import (
    build_w_quadratic,
    evaluate_loss,
    lambda_step,
    project_simplex,
    solve,
    w_step,
)
from helpers import lifted_geometry, make_dataset, planted_dataset, random_dataset
from oracles import (
    grid_search_simplex3,
    loss_loops,
    ridge_1feature_by_hand,
    ridge_normal_equations,
    w_objective,
)

E1 = SparsifyConfig(eps_w=-0.01, eps_l2=0.01)


def _scalar_dataset():
    # one feature (D=1, k=1), exact line y = 2x through the origin
    features = np.array([[1.0, 2.0, 3.0]])
    responses = np.array([[2.0, 4.0, 6.0]])
    return make_dataset(features, responses, lifted_geometry(1, 1, 1))


# --- evaluate_loss -----------------------------------------------------------

def test_loss_at_zero_coeffs_is_entropy_plus_mean_square():
    rng = np.random.default_rng(0)
    data = random_dataset(rng, channels=4, k=3, out_channels=2, n=50, structured=False)
    w = np.full(4, 0.25)
    coeffs = np.zeros((2, 9 * 4 + 1))
    expected = -E1.eps_w * np.log(4) + float((data.responses**2).mean())
    assert evaluate_loss(w, coeffs, data, E1) == pytest.approx(expected, rel=1e-12)


def test_loss_zero_at_perfect_fit_without_regularization():
    rng = np.random.default_rng(1)
    data, support, rows, bias = planted_dataset(rng, channels=5, k=3, out_channels=2,
                                                n=60, support_size=5, noise=0.0)
    # recover the generating coefficients for uniform w (w_d = 1/5 each)
    w = np.full(5, 0.2)
    coeffs = np.concatenate([bias[:, None], rows / 0.2], axis=1)
    cfg = SparsifyConfig(eps_w=-1e-300, eps_l2=0.0)
    assert evaluate_loss(w, coeffs, data, cfg) == pytest.approx(0.0, abs=1e-18)


def test_loss_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        ch, k, m, n = 3, 3, 2, 20
        data = random_dataset(rng, channels=ch, k=k, out_channels=m, n=n, structured=False)
        w = rng.random(ch)
        w /= w.sum()
        coeffs = rng.standard_normal((m, k * k * ch + 1))
        got = evaluate_loss(w, coeffs, data, E1)
        want = (
            E1.eps_w * sum(x * np.log(x) for x in w if x > 0)
            + (
                E1.eps_l2 * float((coeffs**2).sum())
                + loss_loops(w, coeffs, data.features, data.responses, 0.0, 0.0, k)
                * (n * m)
            )
            / (n * m)
        )
        assert got == pytest.approx(want, rel=1e-12)


def test_loss_rejects_nan():
    data = _scalar_dataset()
    with pytest.raises(ValidationError):
        evaluate_loss(np.array([np.nan]), np.zeros((1, 2)), data, E1)


# --- lambda_step -------------------------------------------------------------

def test_lambda_step_exact_line_fit():
    data = _scalar_dataset()
    coeffs = lambda_step(np.array([1.0]), data, eps_l2=0.0)
    assert coeffs[0] == pytest.approx([0.0, 2.0], abs=1e-12)


def test_lambda_step_matches_hand_rolled_2x2_ridge():
    data = _scalar_dataset()
    coeffs = lambda_step(np.array([1.0]), data, eps_l2=1.0)
    intercept, slope = ridge_1feature_by_hand(data.features[0], data.responses[0], 1.0)
    assert coeffs[0] == pytest.approx([intercept, slope], rel=1e-14)


def test_lambda_step_matches_normal_equations_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ch = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        m = int(rng.integers(1, 4))
        n = int(rng.integers(k * k * ch + 2, 80))
        data = random_dataset(rng, channels=ch, k=k, out_channels=m, n=n)
        w = rng.random(ch)
        w /= w.sum()
        eps = float(rng.choice([1e-4, 1e-2, 1.0]))
        got = lambda_step(w, data, eps)
        want = ridge_normal_equations(w, data.features, data.responses, k, eps)
        assert np.allclose(got, want, rtol=1e-8, atol=1e-10)


def test_lambda_step_minimizes_loss_against_perturbations():
    rng = np.random.default_rng(4)
    data = random_dataset(rng, channels=3, k=3, out_channels=2, n=50)
    w = np.full(3, 1 / 3)
    coeffs = lambda_step(w, data, E1.eps_l2)
    base = evaluate_loss(w, coeffs, data, E1)
    for _ in range(100):
        other = coeffs + rng.standard_normal(coeffs.shape) * rng.choice([1e-3, 1e-1, 1.0])
        assert evaluate_loss(w, other, data, E1) >= base - 1e-12


def test_lambda_step_singular_without_ridge():
    # duplicated feature rows make the normal equations singular at eps=0
    features = np.ones((4, 10))
    responses = np.ones((1, 10))
    data = make_dataset(features, responses, lifted_geometry(4, 1, 1))
    with pytest.raises(SingularSystemError):
        lambda_step(np.full(4, 0.25), data, eps_l2=0.0)


# --- build_w_quadratic -------------------------------------------------------

def test_quadratic_zero_coeffs():
    rng = np.random.default_rng(5)
    data = random_dataset(rng, channels=3, k=3, out_channels=2, n=30, structured=False)
    quad, lin, const = build_w_quadratic(np.zeros((2, 28)), data)
    assert np.allclose(quad, 0) and np.allclose(lin, 0)
    assert const == pytest.approx(float((data.responses**2).mean()), rel=1e-12)


def test_quadratic_single_channel_identity():
    rng = np.random.default_rng(6)
    data = random_dataset(rng, channels=1, k=3, out_channels=2, n=40)
    coeffs = rng.standard_normal((2, 10))
    quad, lin, const = build_w_quadratic(coeffs, data)
    w = np.array([1.0])
    mse = evaluate_loss(w, coeffs, data, E1) - E1.eps_w * 0.0 - E1.eps_l2 * float(
        (coeffs**2).sum()
    ) / (data.num_points * 2)
    assert quad.shape == (1, 1)
    assert float(w @ quad @ w - lin @ w + const) == pytest.approx(mse, rel=1e-10)


def test_quadratic_matches_loss_on_simplex_points():
    rng = np.random.default_rng(7)
    data = random_dataset(rng, channels=4, k=3, out_channels=3, n=60)
    coeffs = rng.standard_normal((3, 37))
    quad, lin, const = build_w_quadratic(coeffs, data)
    denom = data.num_points * 3
    for _ in range(20):
        w = rng.random(4)
        w /= w.sum()
        mse = evaluate_loss(w, coeffs, data, E1) - E1.eps_w * float(
            np.sum(w[w > 0] * np.log(w[w > 0]))
        ) - E1.eps_l2 * float((coeffs**2).sum()) / denom
        assert float(w @ quad @ w - lin @ w + const) == pytest.approx(mse, abs=1e-10)


def test_quadratic_is_psd():
    rng = np.random.default_rng(8)
    data = random_dataset(rng, channels=5, k=1, out_channels=2, n=30)
    quad, _, _ = build_w_quadratic(rng.standard_normal((2, 6)), data)
    assert np.min(np.linalg.eigvalsh(quad)) > -1e-10


# --- project_simplex / w_step ------------------------------------------------

def test_project_simplex_basics():
    assert np.allclose(project_simplex(np.array([0.2, 0.3, 0.5])), [0.2, 0.3, 0.5])
    assert np.allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    rng = np.random.default_rng(9)
    for _ in range(50):
        v = rng.standard_normal(int(rng.integers(1, 10))) * 3
        p = project_simplex(v)
        assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-9)
        # projection is the closest simplex point: check against random feasible w
        for _ in range(10):
            q = rng.random(v.size)
            q /= q.sum()
            assert np.linalg.norm(v - p) <= np.linalg.norm(v - q) + 1e-12


def test_w_step_identity_quadratic_gives_uniform():
    w = w_step(np.eye(4), np.zeros(4), 0.0, np.array([0.7, 0.1, 0.1, 0.1]))
    assert np.allclose(w, 0.25, atol=1e-8)


def test_w_step_linear_objective_picks_vertex():
    w = w_step(np.zeros((2, 2)), np.array([1.0, 0.0]), 0.0, np.full(2, 0.5))
    assert np.allclose(w, [1.0, 0.0], atol=1e-12)


def test_w_step_matches_grid_search():
    rng = np.random.default_rng(10)
    for _ in range(20):
        a = rng.standard_normal((3, 3))
        quad = a.T @ a
        lin = rng.standard_normal(3)
        w = w_step(quad, lin, -0.01, np.full(3, 1 / 3))
        f_grid, _ = grid_search_simplex3(quad, lin, -0.01)
        assert w_objective(w, quad, lin, -0.01) == pytest.approx(f_grid, abs=1e-4)


def test_w_step_never_increases_objective():
    rng = np.random.default_rng(11)
    for _ in range(30):
        d = int(rng.integers(2, 8))
        a = rng.standard_normal((d, d))
        quad = a.T @ a
        lin = rng.standard_normal(d)
        w0 = rng.random(d)
        w0 /= w0.sum()
        eps_w = float(rng.choice([-0.0001, -0.01, -0.1]))
        w = w_step(quad, lin, eps_w, w0)
        assert w_objective(w, quad, lin, eps_w) <= w_objective(w0, quad, lin, eps_w) + 1e-12
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-9)


# --- solve -------------------------------------------------------------------

def test_solve_recovers_planted_support():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(3000 + seed)
        data, support, _, _ = planted_dataset(rng)
        res = solve(data, E1)
        hits += res.support == support
    assert hits >= 9


def test_solve_noiseless_unregularized_reaches_interpolation():
    rng = np.random.default_rng(12)
    data, _, _, _ = planted_dataset(rng, channels=6, k=3, out_channels=3, n=400,
                                    support_size=3, noise=0.0)
    cfg = SparsifyConfig(eps_w=-1e-12, eps_l2=0.0)
    res = solve(data, cfg)
    assert res.final_mse <= 1e-8


def test_solve_k1_matches_conv_path():
    # the same numbers presented as a 1x1 conv and as a flat feature set
    rng = np.random.default_rng(13)
    features = rng.standard_normal((5, 200))
    rows = rng.standard_normal((2, 5))
    responses = rows @ features + 0.01 * rng.standard_normal((2, 200))
    conv_view = make_dataset(features, responses, ConvGeometry(
        kernel=1, in_channels=5, out_channels=2))
    flat_view = make_dataset(features.copy(), responses.copy(), ConvGeometry(
        kernel=1, in_channels=5, out_channels=2))
    r1, r2 = solve(conv_view, E1), solve(flat_view, E1)
    assert np.allclose(r1.w, r2.w, atol=1e-12)
    assert r1.support == r2.support


def test_solve_trace_monotone_and_simplex_preserved():
    for seed in range(20):
        rng = np.random.default_rng(6000 + seed)
        data = random_dataset(
            rng,
            channels=int(rng.integers(2, 9)),
            k=int(rng.choice([1, 3])),
            out_channels=int(rng.integers(1, 5)),
            n=int(rng.integers(20, 301)),
            structured=seed % 2 == 0,
        )
        res = solve(data, E1)
        diffs = np.diff(res.loss_trace)
        assert diffs.size == 0 or diffs.max() <= 1e-10
        assert np.all(res.w >= 0)
        assert res.w.sum() == pytest.approx(1.0, abs=1e-9)
        assert len(res.support) >= 1


def test_solve_zero_channel_never_kept():
    rng = np.random.default_rng(14)
    data, support, _, _ = planted_dataset(rng, channels=6, k=3, out_channels=2,
                                          n=400, support_size=3)
    k2 = 9
    dead = [d for d in range(6) if d not in support][0]
    data.features[dead * k2:(dead + 1) * k2] = 0.0
    data._stats = None
    for eps_w in (-1e-4, -1e-2, -5e-2):
        res = solve(data, SparsifyConfig(eps_w=eps_w, eps_l2=0.01))
        assert dead not in res.support


def test_solve_qhat_zero_outside_support():
    rng = np.random.default_rng(15)
    data, _, _, _ = planted_dataset(rng, channels=8, k=3, out_channels=2, n=600,
                                    support_size=3)
    res = solve(data, E1)
    k2 = 9
    for d in range(8):
        block = res.qhat[:, d * k2:(d + 1) * k2]
        if d in res.support:
            assert np.any(block != 0)
        else:
            assert np.all(block == 0)


def test_solve_deterministic():
    rng = np.random.default_rng(16)
    data, _, _, _ = planted_dataset(rng, channels=6, k=3, out_channels=2, n=300)
    r1 = solve(data, E1)
    r2 = solve(data, E1)
    assert np.array_equal(r1.w, r2.w)
    assert r1.loss_trace == r2.loss_trace


def test_result_serialization_round_trip(tmp_path):
    from entroprune.solver import load_result, save_result

    rng = np.random.default_rng(17)
    data, _, _, _ = planted_dataset(rng, channels=4, k=3, out_channels=2, n=200)
    res = solve(data, E1)
    save_result(res, tmp_path, layer_id="conv9")
    back = load_result(tmp_path)
    assert back["layer_id"] == "conv9"
    assert back["support"] == res.support
    assert np.allclose(back["coeffs"], res.coeffs)
    assert np.allclose(back["qhat"], res.qhat)
    assert back["loss_trace"] == [float(x) for x in res.loss_trace]


def test_solve_empty_support_falls_back_to_argmax(caplog):
    import logging

    rng = np.random.default_rng(18)
    data, support, _, _ = planted_dataset(rng, channels=4, k=1, out_channels=2,
                                          n=300, support_size=4, noise=0.01)
    # with a threshold no channel can reach, the argmax channel is kept
    cfg = SparsifyConfig(eps_w=-0.0001, eps_l2=0.01, prune_threshold=0.999)
    with caplog.at_level(logging.WARNING, logger="entroprune.solver"):
        res = solve(data, cfg)
    assert len(res.support) == 1
    assert res.support[0] == int(np.argmax(res.w))
    assert any("argmax" in rec.message for rec in caplog.records)

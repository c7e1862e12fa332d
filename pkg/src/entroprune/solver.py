"""Entropy-regularized sparse regression over input channels.

One layer's sparsification minimizes, over a channel probability vector w
and a coefficient matrix (intercept in column 0),

    eps_w * sum_d w_d log w_d                                (entropy, eps_w < 0)
  + (eps_l2 * sum of squared coefficients                    (ridge, intercept included)
     + sum of squared residuals) / (points * outputs)        (fit)

by alternating two steps: a closed-form ridge solve in the coefficients
with w fixed, and projected gradient descent over the probability simplex
in w with the coefficients fixed. The ridge penalty shares the residual
normalization so that the closed-form step is the exact loss minimizer
for fixed w; only then is the loss trace guaranteed monotone. (Penalizing
eps_l2 * ||coeffs||^2 outside the normalization looks equivalent but makes
the closed form minimize a different objective, and the trace can then
tick upward by ~1e-6 on ordinary instances.)

With eps_w < 0 the entropy term is concave, so the w subproblem is only
guaranteed a descent to a stationary point, never global optimality.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .config import SparsifyConfig
from .errors import DataError, SingularSystemError, SolverViolationError, ValidationError
from .lift import RegressionDataset, expand_channel_weights
from .measures import check_distribution
from .tdf import read_tdf_f64, write_tdf

log = logging.getLogger(__name__)

#: half-steps may raise the loss by at most this much before solve() aborts
DIVERGENCE_TOL = 1e-8
#: floor applied inside log() when evaluating the entropy gradient
_LOG_CLAMP = 1e-15
#: Armijo sufficient-decrease constant
_ARMIJO_C1 = 1e-4


@dataclass
class SolveResult:
    """Converged state of one layer sparsification.

    coeffs has the intercept in column 0; qhat = coeffs[:, 1:] * D(w) with
    the columns of pruned channels (w below threshold) set exactly to zero.
    support holds the surviving channel indices, sorted, never empty.
    """

    w: np.ndarray
    coeffs: np.ndarray
    loss_trace: list
    support: list
    qhat: np.ndarray
    final_mse: float
    config: SparsifyConfig


def _check_dims(w, coeffs, data: RegressionDataset):
    k2d = data.features.shape[0]
    channels = data.geometry.in_channels
    if w.shape != (channels,):
        raise ValidationError(f"w has shape {w.shape}, expected ({channels},)")
    if coeffs.shape != (data.geometry.out_channels, k2d + 1):
        raise ValidationError(
            f"coefficient matrix has shape {coeffs.shape}, expected "
            f"({data.geometry.out_channels}, {k2d + 1})"
        )


def _predictions(w, coeffs, data: RegressionDataset) -> np.ndarray:
    scale = expand_channel_weights(w, data.geometry.kernel**2)
    return coeffs[:, :1] + (coeffs[:, 1:] * scale) @ data.features


def mse_term(w, coeffs, data: RegressionDataset) -> float:
    """Mean squared residual over all (point, output channel) pairs."""
    resid = data.responses - _predictions(w, coeffs, data)
    return float((resid * resid).sum() / resid.size)


def evaluate_loss(w, coeffs, data: RegressionDataset, cfg: SparsifyConfig) -> float:
    """Full objective: entropy + normalized (ridge penalty + squared residuals)."""
    w = np.asarray(w, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    _check_dims(w, coeffs, data)
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(coeffs))):
        raise ValidationError("non-finite values in solver state")
    nz = w[w > 0]
    entropy_term = float((nz * np.log(nz)).sum())
    ridge_term = float((coeffs * coeffs).sum())
    denom = data.num_points * data.geometry.out_channels
    return (
        cfg.eps_w * entropy_term
        + cfg.eps_l2 * ridge_term / denom
        + mse_term(w, coeffs, data)
    )


def lambda_step(w, data: RegressionDataset, eps_l2: float) -> np.ndarray:
    """Closed-form ridge update of the coefficients for fixed w.

    Builds the weighted design (ones column, then the channel-scaled
    features) and solves (A^T A + eps_l2 I) coeffs_m = A^T y_m for every
    output row through one Cholesky factorization. The intercept column is
    penalized like every other coefficient.
    """
    w = np.asarray(w, dtype=np.float64)
    if eps_l2 < 0:
        raise ValidationError("eps_l2 must be nonnegative")
    stats = data.stats()
    dw = expand_channel_weights(w, data.geometry.kernel**2)
    n = data.num_points
    k2d = dw.size

    # zero-weight channels have identically zero design rows; their
    # coefficients are irrelevant to the fit and are pinned to 0 so the
    # active system stays nonsingular even at eps_l2 = 0
    active = np.nonzero(dw != 0.0)[0]
    dw_a = dw[active]

    gram = np.empty((active.size + 1, active.size + 1))
    gram[0, 0] = n
    row_sums = dw_a * stats["feat_sums"][active]
    gram[0, 1:] = row_sums
    gram[1:, 0] = row_sums
    gram[1:, 1:] = stats["feat_gram"][np.ix_(active, active)] * np.outer(dw_a, dw_a)
    gram[np.diag_indices_from(gram)] += eps_l2

    rhs = np.empty((active.size + 1, data.responses.shape[0]))
    rhs[0] = stats["resp_sums"]
    rhs[1:] = dw_a[:, None] * stats["cross"][active]
    try:
        chol = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"normal equations are singular with eps_l2={eps_l2}"
        ) from exc
    solved = scipy.linalg.cho_solve(chol, rhs, check_finite=False).T
    coeffs = np.zeros((data.responses.shape[0], k2d + 1))
    coeffs[:, 0] = solved[:, 0]
    coeffs[:, 1 + active] = solved[:, 1:]
    return coeffs


def build_w_quadratic(coeffs, data: RegressionDataset):
    """Reduce the fit term to a quadratic in w.

    Returns (quad, lin, const) with

        mse(w) == w @ quad @ w - lin @ w + const   for every w,

    where quad[d, e] pairs the per-channel partial predictions and lin
    couples them with the intercept-corrected responses. quad is symmetric
    positive semidefinite by construction.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    k2 = data.geometry.kernel**2
    channels = data.geometry.in_channels
    n = data.num_points
    m = data.geometry.out_channels
    denom = n * m

    stats = data.stats()
    body = coeffs[:, 1:]
    # quad[d,e] = sum_{m,t} u[m,d,t] u[m,e,t] / (n m) via the feature Gram:
    # u[m,d,t] = sum_l body[m, d*k2+l] features[d*k2+l, t]
    coef_gram = body.T @ body
    prod = (stats["feat_gram"] * coef_gram).reshape(channels, k2, channels, k2)
    quad = prod.sum(axis=(1, 3)) / denom
    quad = 0.5 * (quad + quad.T)

    intercepts = coeffs[:, 0]
    # cross term with intercept-corrected responses, assembled from cached sums
    cross = stats["cross"] - np.outer(stats["feat_sums"], intercepts)  # (k^2 D, M)
    lin = 2.0 * (cross.T * body).sum(axis=0).reshape(channels, k2).sum(axis=1) / denom
    const = float(
        stats["resp_energy"]
        - 2.0 * float(stats["resp_sums"] @ intercepts)
        + n * float(intercepts @ intercepts)
    ) / denom
    return quad, lin, const


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and shift)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u * idx > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _entropy_objective(w, quad, lin, eps_w):
    nz = w[w > 0]
    return float(w @ quad @ w - lin @ w + eps_w * (nz * np.log(nz)).sum())


def _entropy_gradient(w, quad, lin, eps_w):
    return 2.0 * (quad @ w) - lin + eps_w * (np.log(np.maximum(w, _LOG_CLAMP)) + 1.0)


#: extra descent starts (uniform + vertices) are tried up to this dimension
_MULTISTART_MAX_DIM = 8


def _descend(quad, lin, eps_w, w0, tol, max_iters, base_step):
    """One projected-gradient descent run with Armijo backtracking.

    The first line search starts at `base_step` (1 / (2 ||quad||_2 + 1));
    later ones are warm-started with the safeguarded Barzilai-Borwein
    step. The spectral warm start matters: channels the fit ignores feel
    only the (nearly linear) entropy pull, so a step sized for the
    stiffest channel moves them microscopically and they never reach the
    boundary.
    """
    w = project_simplex(np.asarray(w0, dtype=np.float64))
    step = base_step
    grad = _entropy_gradient(w, quad, lin, eps_w)
    for _ in range(max_iters):
        if np.linalg.norm(w - project_simplex(w - grad)) < tol:
            break
        f_cur = _entropy_objective(w, quad, lin, eps_w)
        moved = False
        while step > 1e-20:
            trial = project_simplex(w - step * grad)
            delta = trial - w
            if not delta.any():
                break
            if _entropy_objective(trial, quad, lin, eps_w) <= f_cur + _ARMIJO_C1 * float(
                grad @ delta
            ):
                grad_new = _entropy_gradient(trial, quad, lin, eps_w)
                curve = float(delta @ (grad_new - grad))
                gain = float(delta @ delta)
                if curve > 0:
                    step = min(max(gain / curve, base_step), 1e12 * base_step)
                else:
                    step = min(step * 2.0, 1e12 * base_step)
                w, grad = trial, grad_new
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return w


def w_step(quad, lin, eps_w: float, w_init, tol: float = 1e-9,
           max_iters: int = 500, multistart: bool = True) -> np.ndarray:
    """Descend w^T quad w - lin^T w + eps_w * sum w log w over the simplex.

    Projected gradient descent with Armijo backtracking and spectral
    (Barzilai-Borwein) step warm starts; see _descend. With eps_w < 0 the
    entropy term is concave and the problem can hold several face-local
    minima, so with `multistart` on small problems (dimension <= 8) the
    descent is repeated from the uniform point and every vertex and zeroed
    coordinates are probed for reintroduction; the alternating solver
    turns this off because it re-enters with a fresh quadratic every
    iteration anyway. Stops each run when the unit-step projected gradient
    norm falls below `tol` or after `max_iters` iterations. The returned
    point never has a higher objective than `w_init`.
    """
    quad = np.asarray(quad, dtype=np.float64)
    lin = np.asarray(lin, dtype=np.float64)
    if not (np.all(np.isfinite(quad)) and np.all(np.isfinite(lin))):
        raise ValidationError("non-finite quadratic model in w step")
    spectral = np.linalg.norm(quad, 2) if quad.size else 0.0
    base_step = 1.0 / (2.0 * spectral + 1.0)
    dim = lin.size
    multistart = multistart and dim <= _MULTISTART_MAX_DIM

    starts = [np.asarray(w_init, dtype=np.float64)]
    if multistart:
        starts.append(np.full(dim, 1.0 / dim))
        starts.extend(np.eye(dim))

    best = None
    best_val = np.inf
    for w0 in starts:
        w = _descend(quad, lin, eps_w, w0, tol, max_iters, base_step)
        val = _entropy_objective(w, quad, lin, eps_w)
        if val < best_val:
            best, best_val = w, val

    if multistart:
        # the entropy term has unbounded slope at the boundary, so a zeroed
        # coordinate may hide a better minimum behind a small notch that no
        # descent direction can cross; probe each with a log-spaced blend
        blends = np.geomspace(1e-7, 0.5, 25)
        for _ in range(dim):
            improved = False
            for d in np.nonzero(best < 1e-12)[0]:
                vertex = np.zeros(dim)
                vertex[d] = 1.0
                cands = [(1.0 - t) * best + t * vertex for t in blends]
                vals = [_entropy_objective(c, quad, lin, eps_w) for c in cands]
                j = int(np.argmin(vals))
                if vals[j] < best_val:
                    w = _descend(quad, lin, eps_w, cands[j], tol, max_iters, base_step)
                    val = _entropy_objective(w, quad, lin, eps_w)
                    if val < best_val:
                        best, best_val = w, val
                        improved = True
            if not improved:
                break
    return best


def _channel_energies(w, coeffs, data: RegressionDataset) -> np.ndarray:
    """Energy each channel contributes to the prediction: ||w_d u_d||^2 with
    u the channel's partial prediction, summed over outputs and points."""
    k2 = data.geometry.kernel**2
    channels = data.geometry.in_channels
    gram = data.stats()["feat_gram"]
    body = coeffs[:, 1:]
    energies = np.empty(channels)
    for d in range(channels):
        block = gram[d * k2:(d + 1) * k2, d * k2:(d + 1) * k2]
        rows = body[:, d * k2:(d + 1) * k2]
        energies[d] = w[d] ** 2 * float(np.einsum("ml,lk,mk->", rows, block, rows))
    return energies


def _drop_candidates(w, coeffs, data, cfg, loss):
    """Greedy channel removal: zero the weakest-contributing channel,
    renormalize, refit exactly, keep only on strict loss decrease.

    The alternation needs this escape hatch: because the ridge step
    rescales coefficients against w, the fit barely constrains how mass is
    distributed over channels it does not use, and the minimum-entropy pull
    can then park large mass on a useless channel. That state is a local
    minimum of the two-step dynamics; removing the channel outright and
    letting the ridge refit is the cheap exact test that escapes it.
    """
    w = w.copy()
    changed = False
    while np.count_nonzero(w) > 1:
        support = np.nonzero(w)[0]
        energies = _channel_energies(w, coeffs, data)
        d = support[int(np.argmin(energies[support]))]
        w_try = w.copy()
        w_try[d] = 0.0
        w_try /= w_try.sum()
        coeffs_try = lambda_step(w_try, data, cfg.eps_l2)
        loss_try = evaluate_loss(w_try, coeffs_try, data, cfg)
        if loss_try >= loss:
            break
        w, coeffs, loss = w_try, coeffs_try, loss_try
        changed = True
    return w, coeffs, loss, changed


def solve(data: RegressionDataset, cfg: SparsifyConfig) -> SolveResult:
    """Alternate ridge and simplex steps from the uniform w until the loss
    settles, then threshold w into the surviving channel set.

    Between iterations, channels contributing the least prediction energy
    are proposed for outright removal and kept out only if the exactly
    refit loss strictly decreases (see _drop_candidates). The loss is
    recorded after every half-step; any increase beyond DIVERGENCE_TOL
    raises SolverViolationError (a bug, never swallowed). Stops when
    consecutive full iterations differ by less than
    outer_tol * max(1, |loss|) or after max_outer_iters.
    """
    if data.num_points == 0:
        raise DataError("empty regression dataset")
    channels = data.geometry.in_channels
    w = np.full(channels, 1.0 / channels)
    coeffs = None
    trace: list[float] = []
    prev_iter_loss = None

    def record(value: float):
        if trace and value > trace[-1] + DIVERGENCE_TOL:
            raise SolverViolationError(
                f"loss increased from {trace[-1]!r} to {value!r} at half-step {len(trace)}"
            )
        trace.append(value)

    for _ in range(cfg.max_outer_iters):
        coeffs = lambda_step(w, data, cfg.eps_l2)
        record(evaluate_loss(w, coeffs, data, cfg))

        quad, lin, _ = build_w_quadratic(coeffs, data)
        w = w_step(quad, lin, cfg.eps_w, w, tol=cfg.w_step_tol,
                   max_iters=cfg.max_w_iters, multistart=False)
        # evaluate through the same path as the lambda half-step so a
        # converged plateau compares bit-identical quantities
        loss = evaluate_loss(w, coeffs, data, cfg)
        record(loss)

        w, coeffs, loss, dropped = _drop_candidates(w, coeffs, data, cfg, loss)
        if dropped:
            record(loss)

        if prev_iter_loss is not None and abs(prev_iter_loss - loss) < cfg.outer_tol * max(
            1.0, abs(prev_iter_loss)
        ):
            prev_iter_loss = loss
            break
        prev_iter_loss = loss

    w = check_distribution(w)
    support = sorted(int(d) for d in np.nonzero(w >= cfg.prune_threshold)[0])
    if not support:
        keep = int(np.argmax(w))
        log.warning(
            "thresholding removed every channel; keeping argmax channel %d (w=%g)",
            keep, w[keep],
        )
        support = [keep]

    qhat = coeffs[:, 1:] * expand_channel_weights(w, data.geometry.kernel**2)
    k2 = data.geometry.kernel**2
    mask = np.zeros(channels, dtype=bool)
    mask[support] = True
    qhat[:, np.repeat(~mask, k2)] = 0.0

    return SolveResult(
        w=w,
        coeffs=coeffs,
        loss_trace=trace,
        support=support,
        qhat=qhat,
        final_mse=mse_term(w, coeffs, data),
        config=cfg,
    )


def save_result(result: SolveResult, directory, layer_id: str | None = None) -> None:
    """Write result.json + lambda.tdf + qhat.tdf into `directory`."""
    os.makedirs(directory, exist_ok=True)
    doc = {
        "w": [float(x) for x in result.w],
        "support": list(result.support),
        "loss_trace": [float(x) for x in result.loss_trace],
        "final_mse": float(result.final_mse),
        "config": result.config.to_dict(),
    }
    if layer_id is not None:
        doc["layer_id"] = layer_id
    with open(os.path.join(directory, "result.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_tdf(os.path.join(directory, "lambda.tdf"), result.coeffs)
    write_tdf(os.path.join(directory, "qhat.tdf"), result.qhat)


def load_result(directory) -> dict:
    """Read back the serialized artifacts; arrays under 'coeffs' and 'qhat'."""
    path = os.path.join(directory, "result.json")
    if not os.path.isfile(path):
        raise DataError(f"missing result file: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    doc["coeffs"] = read_tdf_f64(os.path.join(directory, "lambda.tdf"))
    doc["qhat"] = read_tdf_f64(os.path.join(directory, "qhat.tdf"))
    return doc

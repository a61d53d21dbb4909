"""Numerical checks of the key-error formula and the quality bounds.

``check_prop1`` compares the closed-form key error obtained from a quadratic
expansion of the estimation objective with the error found by actually
minimizing that objective.  ``check_prop2`` Monte-Carlo estimates the mean
and trace gaps between clean and fingerprinted output distributions and
evaluates their upper bounds.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .latent_model import Generator
from .spectral import FingerprintBasis, latent_rng, mean_gram_at, sample_seeds


class SingularFingerprintSubspace(ValueError):
    """``V^T H V`` cannot be inverted."""


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, tuple):
        return [_to_jsonable(x) for x in obj]
    return obj


class _Report:
    def to_dict(self) -> dict:
        return {f.name: _to_jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Prop1Report(_Report):
    sigma: float
    injected_alpha_error: np.ndarray
    predicted_phi_error: np.ndarray
    # same formula with the cross-term sigma dropped
    uncorrected_phi_error: np.ndarray
    measured_phi_error: np.ndarray
    relative_gap: float
    uncorrected_relative_gap: float
    phi: np.ndarray
    n_alpha_samples: int

    @property
    def predicted_norm(self) -> float:
        return float(np.linalg.norm(self.predicted_phi_error))

    @property
    def measured_norm(self) -> float:
        return float(np.linalg.norm(self.measured_phi_error))


def _rel_gap(measured, predicted) -> float:
    denom = np.linalg.norm(predicted)
    diff = np.linalg.norm(measured - predicted)
    return float(diff / denom) if denom > 0 else float(diff)


def key_error_formula(H: np.ndarray, U: np.ndarray, V: np.ndarray, sigma: float, eps_alpha) -> tuple:
    """Minimizer of the quadratic model of the key-estimation objective.

    Expanding ``|J (U e_a + sigma V e_phi)|^2`` gives
    ``sigma^2 e_phi' V'HV e_phi + 2 sigma e_phi' V'HU e_a + const``, whose
    minimizer is ``-(sigma^2 V'HV)^-1 sigma V'HU e_a``.  Returns that value and
    the variant without the cross-term ``sigma``.
    """
    M = V.T @ H @ V
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
        raise SingularFingerprintSubspace(f"V^T H V is singular (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    rhs = V.T @ H @ U @ np.asarray(eps_alpha, dtype=float)
    bare = -np.linalg.solve(sigma**2 * M, rhs)
    return sigma * bare, bare


def _draw_alpha(handle: Generator, basis: FingerprintBasis, n: int, rng_seed: int) -> np.ndarray:
    W = handle.map_latent_batch(sample_seeds(handle.spec.d_z, n, rng_seed))
    return (W - basis.mean) @ basis.U


def _random_key(d_phi: int, rng_seed: int) -> np.ndarray:
    return latent_rng(rng_seed, 10**6).integers(0, 2, size=d_phi).astype(float)


def measure_key_error(handle: Generator, basis: FingerprintBasis, sigma: float, eps_alpha, alpha: np.ndarray,
                      phi: np.ndarray) -> np.ndarray:
    """Minimize the sample-average objective over the key with ``alpha + eps_alpha`` held fixed."""
    mu, U, V = basis.mean, basis.U, basis.V
    targets = handle.evaluate_batch(mu + alpha @ U.T + sigma * (V @ phi))
    base = mu + (alpha + eps_alpha) @ U.T
    scale = 1.0 / np.sqrt(len(alpha))

    def resid(p):
        return (handle.evaluate_batch(base + sigma * (V @ p)) - targets).ravel() * scale

    def jac(p):
        J = handle.jacobian_batch(base + sigma * (V @ p))
        return (sigma * J @ V).reshape(-1, V.shape[1]) * scale

    if _is_affine(handle):
        sol = np.linalg.lstsq(jac(phi), -resid(phi), rcond=None)[0]
        return sol
    fit = least_squares(resid, phi.copy(), jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=200)
    return fit.x - phi


def check_prop1(handle: Generator, basis: FingerprintBasis, sigma: float, epsilon_alpha,
                n_alpha_samples: int = 200, rng_seed: int = 0, phi=None) -> Prop1Report:
    """Predicted versus measured key error for a fixed injected ``alpha`` error."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    eps_alpha = np.asarray(epsilon_alpha, dtype=float)
    if eps_alpha.shape != (basis.U.shape[1],) or not np.all(np.isfinite(eps_alpha)):
        raise ValueError("epsilon_alpha must be a finite vector of length d_w - d_phi")
    phi = _random_key(basis.d_phi, rng_seed) if phi is None else np.asarray(phi, dtype=float)
    alpha = _draw_alpha(handle, basis, n_alpha_samples, rng_seed)
    W_phi = basis.mean + alpha @ basis.U.T + sigma * (basis.V @ phi)
    H = mean_gram_at(handle, W_phi)
    predicted, bare = key_error_formula(H, basis.U, basis.V, sigma, eps_alpha)
    measured = measure_key_error(handle, basis, sigma, eps_alpha, alpha, phi)
    return Prop1Report(
        sigma=float(sigma), injected_alpha_error=eps_alpha, predicted_phi_error=predicted,
        uncorrected_phi_error=bare, measured_phi_error=measured,
        relative_gap=_rel_gap(measured, predicted), uncorrected_relative_gap=_rel_gap(measured, bare),
        phi=phi, n_alpha_samples=int(n_alpha_samples),
    )


@dataclass
class ScalingReport(_Report):
    major: Prop1Report
    minor: Prop1Report

    @property
    def major_error(self) -> float:
        return self.major.measured_norm

    @property
    def minor_error(self) -> float:
        return self.minor.measured_norm

    def to_dict(self) -> dict:
        return {"major": self.major.to_dict(), "minor": self.minor.to_dict(),
                "major_error": self.major_error, "minor_error": self.minor_error}


def check_prop1_scaling(handle: Generator, basis_major: FingerprintBasis, basis_minor: FingerprintBasis,
                        sigma: float, epsilon_alpha, n_alpha_samples: int = 200, rng_seed: int = 0,
                        phi=None) -> ScalingReport:
    if basis_major.source_stats is not basis_minor.source_stats:
        raise ValueError("bases must come from the same latent statistics")
    if basis_major.d_phi != basis_minor.d_phi:
        raise ValueError("bases must have the same key length")
    phi = _random_key(basis_major.d_phi, rng_seed) if phi is None else phi
    return ScalingReport(
        check_prop1(handle, basis_major, sigma, epsilon_alpha, n_alpha_samples, rng_seed, phi),
        check_prop1(handle, basis_minor, sigma, epsilon_alpha, n_alpha_samples, rng_seed, phi),
    )


@dataclass
class Prop2Report(_Report):
    sigma: float
    lambda_V_max: float
    d_phi: int
    gamma_U_max: float
    mean_gap_lhs: float
    mean_gap_bound: float
    trace_gap_lhs: float
    trace_gap_bound: float
    nu: float
    tau_mean: float
    tau_trace: float
    eta: float
    holds: tuple
    mean_gap_se: float = 0.0
    trace_gap_se: float = 0.0
    n_mc: int = 0
    exact: bool = False


def _is_affine(handle: Generator) -> bool:
    return len(handle.layers) == 1 and not handle.squash


def _batch_se(stat_fn, n: int, n_batches: int) -> float:
    """Standard error of a statistic from its spread over disjoint batches."""
    edges = np.linspace(0, n, n_batches + 1).astype(int)
    vals = np.array([stat_fn(slice(a, b)) for a, b in zip(edges[:-1], edges[1:])])
    # a batch of size n/B has B times the variance of the full-sample statistic
    return float(np.std(vals, ddof=1) / np.sqrt(n_batches))


def check_prop2(handle: Generator, basis: FingerprintBasis, sigma: float, n_mc: int = 2000,
                eta: float = 0.05, tau: Optional[float] = None, rng_seed: int = 0,
                lambda_v_scale: float = 1.0, phi=None, n_gram: int = 300, tau_se_multiplier: float = 3.0,
                n_batches: int = 10) -> Prop2Report:
    """Mean and trace gaps between ``w0 = mu + U a + V b`` and ``w1 = mu + U a + sigma V phi``.

    ``a ~ N(0, diag(lambda_U))`` and ``b ~ N(0, diag(lambda_V))`` with the
    eigenvalues of the basis' source statistics (``lambda_V`` scaled by
    ``lambda_v_scale``).  Both populations share the same ``a`` draws.  With
    ``tau=None`` each bound gets ``tau_se_multiplier`` Monte Carlo standard
    errors of its left-hand side as slack.  Affine generators use exact
    population moments and ``tau`` defaults to 0.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    d_phi = basis.d_phi
    exact = _is_affine(handle)
    if not exact and n_mc < max(2 * n_batches, 20):
        raise ValueError("n_mc too small for covariance estimation")
    lam_u = basis.lambda_u()
    lam_v = basis.lambda_v() * lambda_v_scale
    phi = _random_key(d_phi, rng_seed) if phi is None else np.asarray(phi, dtype=float)
    mu, U, V = basis.mean, basis.U, basis.V
    lam_v_max = float(lam_v.max()) if lam_v.size else 0.0

    if exact:
        A = handle.layers[0][0]
        H = A.T @ A
        gamma = float(np.linalg.eigvalsh(H)[-1])
        AV = A @ V
        mean_lhs = float(sigma**2 * np.sum((AV @ phi) ** 2))
        trace_lhs = float(abs(np.sum(AV**2 * lam_v)))
        nu = 0.0
        tau_m = tau_t = 0.0 if tau is None else float(tau)
        se_m = se_t = 0.0
    else:
        rng = latent_rng(rng_seed, 2)
        a = rng.standard_normal((n_mc, U.shape[1])) * np.sqrt(lam_u)
        b = rng.standard_normal((n_mc, d_phi)) * np.sqrt(lam_v)
        base = mu + a @ U.T
        G0 = handle.evaluate_batch(base + b @ V.T)
        G1 = handle.evaluate_batch(base + sigma * (V @ phi))

        def mean_gap(sl):
            d = G0[sl].mean(0) - G1[sl].mean(0)
            return float(d @ d)

        def trace_gap(sl):
            return float(abs(G0[sl].var(0, ddof=1).sum() - G1[sl].var(0, ddof=1).sum()))

        full = slice(0, n_mc)
        mean_lhs, trace_lhs = mean_gap(full), trace_gap(full)
        se_m = _batch_se(mean_gap, n_mc, n_batches)
        se_t = _batch_se(trace_gap, n_mc, n_batches)
        tau_m = tau_se_multiplier * se_m if tau is None else float(tau)
        tau_t = tau_se_multiplier * se_t if tau is None else float(tau)

        base_g = base[:n_gram]
        J = handle.jacobian_batch(base_g)
        Jf = J.reshape(-1, J.shape[-1])
        H = Jf.T @ Jf / len(base_g)
        gamma = float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1])
        # per-pixel spread of clean outputs and largest eigenvalue of each Jacobian row's covariance
        sd_u = handle.evaluate_batch(base_g).std(0, ddof=1)
        Jc = J - J.mean(0)
        Jp = np.ascontiguousarray(Jc.transpose(1, 0, 2))
        row_cov = np.matmul(Jp.transpose(0, 2, 1), Jp) / (len(base_g) - 1)
        sd_rows = np.sqrt(np.clip(np.linalg.eigvalsh(row_cov)[:, -1], 0.0, None))
        nu = float(np.sum(sd_u * sd_rows))

    mean_bound = sigma**2 * gamma * d_phi + tau_m
    trace_bound = lam_v_max * gamma * d_phi + 2.0 * nu * sigma * np.sqrt(d_phi) + tau_t
    return Prop2Report(
        sigma=float(sigma), lambda_V_max=lam_v_max, d_phi=d_phi, gamma_U_max=gamma,
        mean_gap_lhs=mean_lhs, mean_gap_bound=float(mean_bound),
        trace_gap_lhs=trace_lhs, trace_gap_bound=float(trace_bound),
        nu=nu, tau_mean=float(tau_m), tau_trace=float(tau_t), eta=float(eta),
        holds=(bool(mean_lhs <= mean_bound), bool(trace_lhs <= trace_bound)),
        mean_gap_se=float(se_m), trace_gap_se=float(se_t), n_mc=int(n_mc), exact=exact,
    )

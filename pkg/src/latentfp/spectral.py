"""Latent statistics, principal-component fingerprint bases and mean Gram matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .latent_model import Generator

SYM_TOL = 1e-10
ORTHO_TOL = 1e-8


def latent_rng(rng_seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(stream)]))


def sample_seeds(d_z: int, n: int, rng_seed: int) -> np.ndarray:
    """``n`` standard-normal latent seeds; row ``k`` depends only on ``(rng_seed, k)``."""
    return np.stack([latent_rng(rng_seed, k).standard_normal(d_z) for k in range(n)]) if n else np.zeros((0, d_z))


def sorted_eigh(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, descending, with a deterministic sign.

    Each eigenvector is flipped so that its largest-magnitude entry is positive.
    Eigenvalues within ``-SYM_TOL`` of zero are clamped to zero.
    """
    S = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals.size and vals[-1] < -SYM_TOL * max(1.0, abs(vals[0])):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals[-1]:.3g})")
    vals = np.clip(vals, 0.0, None)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


@dataclass
class LatentStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    # extent of the centered sample along each principal component
    pc_min: np.ndarray
    pc_max: np.ndarray
    rng_seed: Optional[int] = None

    @property
    def d_w(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_samples(cls, W: np.ndarray, rng_seed=None) -> "LatentStats":
        W = np.asarray(W, dtype=float)
        n, d = W.shape
        if n < d + 1:
            raise ValueError(f"need at least d_w + 1 = {d + 1} samples, got {n}")
        if not np.all(np.isfinite(W)):
            raise ValueError("non-finite latent samples")
        mean = W.mean(axis=0)
        X = W - mean
        cov = X.T @ X / (n - 1)
        cov = 0.5 * (cov + cov.T)
        vals, vecs = sorted_eigh(cov)
        proj = X @ vecs
        return cls(mean, cov, n, vals, vecs, proj.min(axis=0), proj.max(axis=0), rng_seed)

    def save(self, path) -> None:
        """Write a little-endian ``.npz`` archive; reload reproduces every array bit-exactly."""
        arrays = {
            name: np.asarray(getattr(self, name), dtype="<f8")
            for name in ("mean", "covariance", "eigenvalues", "eigenvectors", "pc_min", "pc_max")
        }
        meta = np.array([self.sample_count, -1 if self.rng_seed is None else self.rng_seed], dtype="<i8")
        with open(path, "wb") as fh:
            np.savez(fh, meta=meta, byteorder=np.array("little"), **arrays)

    @classmethod
    def load(cls, path) -> "LatentStats":
        with np.load(Path(path)) as data:
            if str(data["byteorder"]) != "little":
                raise ValueError("unsupported byte order in stats file")
            n, seed = (int(v) for v in data["meta"])
            arrays = {k: data[k].astype(float) for k in
                      ("mean", "covariance", "eigenvalues", "eigenvectors", "pc_min", "pc_max")}
        return cls(sample_count=n, rng_seed=None if seed < 0 else seed, **arrays)


def estimate_stats(handle: Generator, n_samples: int, rng_seed: int) -> LatentStats:
    """Sample mean, unbiased covariance and eigendecomposition of ``w = psi(z)``."""
    d_w = handle.spec.d_w
    if n_samples < d_w + 1:
        raise ValueError(f"n_samples must be at least d_w + 1 = {d_w + 1}")
    Z = sample_seeds(handle.spec.d_z, n_samples, rng_seed)
    return LatentStats.from_samples(handle.map_latent_batch(Z), rng_seed)


@dataclass
class FingerprintBasis:
    U: np.ndarray
    V: np.ndarray
    pc_range: tuple[int, int]
    source_stats: LatentStats = field(repr=False)
    center: bool = True

    @property
    def d_phi(self) -> int:
        return self.V.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """Offset added back before generation (the sample mean when centering)."""
        return self.source_stats.mean if self.center else np.zeros(self.source_stats.d_w)

    @property
    def u_index(self) -> np.ndarray:
        i, j = self.pc_range
        return np.r_[0:i, j:self.source_stats.d_w]

    def lambda_u(self) -> np.ndarray:
        return self.source_stats.eigenvalues[self.u_index]

    def lambda_v(self) -> np.ndarray:
        i, j = self.pc_range
        return self.source_stats.eigenvalues[i:j]

    def check(self) -> None:
        B = np.hstack([self.U, self.V])
        err = np.abs(B.T @ B - np.eye(B.shape[1])).max()
        if B.shape[0] != B.shape[1] or err > ORTHO_TOL:
            raise ValueError(f"[U V] is not an orthonormal basis (error {err:.3g})")


def select_basis(stats: LatentStats, i: int, j: int, center: bool = True) -> FingerprintBasis:
    """Fingerprint directions ``V = PC[i:j]``; ``U`` holds the remaining components in order."""
    d = stats.d_w
    if not (0 <= i < j <= d):
        raise ValueError(f"need 0 <= i < j <= d_w={d}, got ({i}, {j})")
    pcs = stats.eigenvectors
    basis = FingerprintBasis(
        U=pcs[:, np.r_[0:i, j:d]], V=pcs[:, i:j], pc_range=(i, j), source_stats=stats, center=center
    )
    basis.check()
    return basis


@dataclass
class GramEstimate:
    H: np.ndarray
    sample_count: int
    fingerprint_context: Optional[tuple] = None

    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        return sorted_eigh(self.H)


def mean_gram_at(handle: Generator, W: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Average of ``J^T J`` over the rows of ``W``."""
    W = np.atleast_2d(W)
    H = np.zeros((handle.spec.d_w, handle.spec.d_w))
    for start in range(0, W.shape[0], chunk):
        J = handle.jacobian_batch(W[start:start + chunk])
        H += np.einsum("nij,nik->jk", J, J)
    H /= W.shape[0]
    return 0.5 * (H + H.T)


def estimate_mean_gram(handle: Generator, n_samples: int, rng_seed: int,
                       fingerprint_context=None) -> GramEstimate:
    """Monte Carlo ``E[J_w^T J_w]``.

    With ``fingerprint_context = (basis, sigma, phi)`` the latents are the
    fingerprinted ``mu + U alpha + sigma V phi`` with ``alpha`` projected from
    ``psi(z)``; otherwise they are ``psi(z)`` directly.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    W = handle.map_latent_batch(sample_seeds(handle.spec.d_z, n_samples, rng_seed))
    if fingerprint_context is not None:
        basis, sigma, phi = fingerprint_context
        alpha = (W - basis.mean) @ basis.U
        W = basis.mean + alpha @ basis.U.T + sigma * (basis.V @ np.asarray(phi, dtype=float))
    return GramEstimate(mean_gram_at(handle, W), n_samples, fingerprint_context)


@dataclass
class AlignmentReport:
    angles: np.ndarray
    mean_sq_cosine: float


def _check_orthonormal(A: np.ndarray, name: str) -> None:
    err = np.abs(A.T @ A - np.eye(A.shape[1])).max() if A.size else 0.0
    if err > 1e-6:
        raise ValueError(f"{name} does not have orthonormal columns (error {err:.3g})")


def subspace_alignment(A: np.ndarray, B: np.ndarray) -> AlignmentReport:
    """Principal angles between ``span(A)`` and ``span(B)``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError("subspaces live in different ambient dimensions")
    _check_orthonormal(A, "A")
    _check_orthonormal(B, "B")
    cos = np.clip(np.linalg.svd(A.T @ B, compute_uv=False), 0.0, 1.0)
    return AlignmentReport(np.arccos(cos), float(np.mean(cos**2)))


def random_subspace(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))

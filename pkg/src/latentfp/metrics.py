"""Image distances, SSIM, Frechet-Gaussian distance and the trainable robust metric."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
FID_IDENTITY_MAX_DIM = 1024
FID_PROJECTION_DIM = 256


@dataclass
class MetricHandle:
    kind: str = "l2"
    weights: Optional[np.ndarray] = None
    feature_transform: str = "identity"
    block_size: int = 8
    description: str = ""
    train_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("l2", "weighted_feature"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.feature_transform not in ("identity", "blockwise-DCT"):
            raise ValueError(f"unknown feature transform {self.feature_transform!r}")
        if self.kind == "weighted_feature":
            if self.weights is None:
                shape = (self.block_size, self.block_size) if self.feature_transform == "blockwise-DCT" else ()
                self.weights = np.ones(shape)
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0) or not np.any(self.weights > 0):
                raise ValueError("weights must be nonnegative and not all zero")

    @property
    def label(self) -> str:
        return "l2" if self.kind == "l2" else f"robust({self.description or self.feature_transform})"

    def save(self, path) -> None:
        lines = [f"feature_transform={self.feature_transform}", f"block_size={self.block_size}",
                 f"attack_set={self.description}", f"shape={','.join(map(str, np.shape(self.weights)))}"]
        lines += [repr(float(v)) for v in np.ravel(self.weights)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MetricHandle":
        lines = Path(path).read_text().splitlines()
        header = dict(ln.split("=", 1) for ln in lines[:4])
        shape = tuple(int(s) for s in header["shape"].split(",") if s)
        weights = np.array([float(v) for v in lines[4:] if v.strip()]).reshape(shape)
        return cls("weighted_feature", weights, header["feature_transform"], int(header["block_size"]),
                   header["attack_set"])


def _blocks(x: np.ndarray, b: int) -> np.ndarray:
    """(..., H, W) -> (..., H/b, W/b, b, b)."""
    H, W = x.shape[-2:]
    if H % b or W % b:
        raise ValueError(f"image size {H}x{W} is not a multiple of block size {b}")
    x = x.reshape(x.shape[:-2] + (H // b, b, W // b, b))
    return np.swapaxes(x, -3, -2)


def _unblocks(f: np.ndarray) -> np.ndarray:
    f = np.swapaxes(f, -3, -2)
    s = f.shape
    return f.reshape(s[:-4] + (s[-4] * s[-3], s[-2] * s[-1]))


def block_dct(x: np.ndarray, b: int = 8) -> np.ndarray:
    return sfft.dctn(_blocks(np.asarray(x, dtype=float), b), axes=(-2, -1), norm="ortho")


def block_idct(f: np.ndarray) -> np.ndarray:
    return _unblocks(sfft.idctn(f, axes=(-2, -1), norm="ortho"))


def features(metric: MetricHandle, x: np.ndarray) -> np.ndarray:
    if metric.feature_transform == "blockwise-DCT":
        return block_dct(x, metric.block_size)
    return np.asarray(x, dtype=float)


def distance_batch(metric: MetricHandle, A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each image in ``A`` (..., C, H, W) to ``b`` and gradients w.r.t. ``A``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.shape[-b.ndim:] != b.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {b.shape}")
    axes = tuple(range(A.ndim - b.ndim, A.ndim))
    if metric.kind == "l2":
        diff = A - b
        return np.sum(diff * diff, axis=axes), 2.0 * diff
    if metric.feature_transform == "identity":
        diff = A - b
        wd = metric.weights * diff
        return np.sum(wd * diff, axis=axes), 2.0 * wd
    fd = features(metric, A) - features(metric, b)
    wfd = metric.weights * fd
    faxes = tuple(range(A.ndim - b.ndim, fd.ndim))
    return np.sum(wfd * fd, axis=faxes), 2.0 * block_idct(wfd)


def distance(metric: MetricHandle, a, b) -> tuple[float, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    value, grad = distance_batch(metric, a, b)
    return float(value), grad


def psnr(a, b, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(data_range**2 / mse)


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(x, win.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", v, win)


def ssim(a, b, data_range: float = 1.0) -> float | np.ndarray:
    """Mean SSIM over valid 11x11 Gaussian-window positions, averaged over channels.

    Leading batch axes beyond (C, H, W) are preserved.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gauss_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    out = smap.mean(axis=(-3, -2, -1))
    return float(out) if np.ndim(out) == 0 else out


def sqrtm_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term uses ``tr (S_a^(1/2) S_b S_a^(1/2))^(1/2)``, the symmetric
    form with the same eigenvalues as ``S_a S_b``.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(eig).sum()
    return float(max(value, 0.0))


def frechet_gaussian(samples_a, samples_b) -> float:
    A = np.asarray(samples_a, dtype=float)
    B = np.asarray(samples_b, dtype=float)
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature dimensions differ")
    d = A.shape[1]
    if min(A.shape[0], B.shape[0]) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set")
    return frechet_from_moments(A.mean(0), np.cov(A, rowvar=False), B.mean(0), np.cov(B, rowvar=False))


def fid_features(X: np.ndarray, seed: int = 0) -> np.ndarray:
    """Identity on flat pixels up to 1024 dims, else a fixed seeded projection to 256 dims."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    d = X.shape[1]
    if d <= FID_IDENTITY_MAX_DIM:
        return X
    P = np.random.default_rng(np.random.SeedSequence([seed, d])).standard_normal((d, FID_PROJECTION_DIM))
    return X @ P / np.sqrt(d)


@dataclass
class QualityReport:
    frechet_distance: float
    ssim_mean: float
    ssim_std: float
    sample_count: int


def quality_report(originals: np.ndarray, fingerprinted: np.ndarray, data_range: float = 1.0) -> QualityReport:
    """Frechet distance between the two populations plus paired SSIM statistics."""
    s = np.atleast_1d(ssim(originals, fingerprinted, data_range))
    fd = frechet_gaussian(fid_features(originals), fid_features(fingerprinted))
    return QualityReport(fd, float(s.mean()), float(s.std()), len(originals))


# -- robust metric training ------------------------------------------------

def _patch_features(metric: MetricHandle, X: np.ndarray) -> np.ndarray:
    """Per-patch feature vectors, shape (n_images, n_patches, n_features)."""
    f = features(metric, X)
    n = f.shape[0]
    return f.reshape(n, -1, metric.block_size * metric.block_size)


def ranking_margin_loss(w, d0_feats, d1_feats, margin):
    """Hinge on normalized distances, wanting ``d1 < d0``; returns (loss, grad)."""
    d0, d1 = d0_feats @ w, d1_feats @ w
    s = d0 + d1 + 1e-12
    r = (d1 - d0) / s
    active = (margin + r) > 0
    loss = np.mean(np.where(active, margin + r, 0.0))
    dr = (d1_feats - d0_feats) / s[:, None] - ((d1 - d0) / s**2)[:, None] * (d0_feats + d1_feats)
    grad = (dr * active[:, None]).sum(0) / len(r)
    return loss, grad


def train_robust_metric(handle, cfg, attack_set: Sequence, n_triplets: int, rng_seed: int,
                        margin: float = 0.1, epochs: int = 300, lr: float = 0.05,
                        holdout: float = 0.2) -> MetricHandle:
    """Learn nonnegative per-frequency DCT weights so postprocessed copies rank closer than fingerprinted ones.

    Triplets are ``(x, p0, p1)`` with ``x`` a clean generated image, ``p0`` its
    fingerprinted version under a random key and ``p1`` an attacked copy of
    ``x``; every 8x8 block is one training patch.
    """
    from .fingerprint import embed_batch, project_alpha
    from .postprocess import apply_array
    from .spectral import sample_seeds

    if not attack_set:
        raise ValueError("attack_set must be nonempty")
    b = 8
    metric = MetricHandle("weighted_feature", None, "blockwise-DCT", b,
                          "+".join(a.label for a in attack_set))
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 7]))
    Z = sample_seeds(handle.spec.d_z, n_triplets, rng_seed)
    W = handle.map_latent_batch(Z)
    phi = rng.integers(0, 2, size=(n_triplets, cfg.d_phi)).astype(float)
    shape = (n_triplets,) + handle.spec.image_shape
    X = handle.evaluate_batch(W).reshape(shape)
    P0 = handle.evaluate_batch(embed_batch(cfg, project_alpha(cfg, W), phi)).reshape(shape)
    P1 = np.stack([
        apply_array(attack_set[k % len(attack_set)], X[k], int(rng.integers(2**63)), handle.spec.output_range)
        for k in range(n_triplets)
    ])
    fx, f0, f1 = (_patch_features(metric, Y) for Y in (X, P0, P1))
    d0_all, d1_all = (fx - f0) ** 2, (fx - f1) ** 2
    keep = np.abs(P0 - P1).reshape(n_triplets, -1).max(axis=1) > 0
    order = rng.permutation(np.flatnonzero(keep))
    n_hold = int(round(holdout * len(order)))
    test_idx, train_idx = order[:n_hold], order[n_hold:]

    def flat(idx, arr):
        return arr[idx].reshape(-1, arr.shape[-1])

    d0_tr, d1_tr = flat(train_idx, d0_all), flat(train_idx, d1_all)
    w = np.ones(b * b)
    history = []
    for _ in range(epochs):
        loss, grad = ranking_margin_loss(w, d0_tr, d1_tr, margin)
        history.append(loss)
        if not np.any(grad):
            break
        # sign-scaled projected step: the loss is invariant to the overall weight scale
        w = np.maximum(w - lr * grad / np.abs(grad).max(), 0.0)
        if not np.any(w > 0):
            w = np.ones(b * b)
            break
        w /= w.mean()
    metric.weights = w.reshape(b, b)

    def image_rank_acc(idx):
        if len(idx) == 0:
            return float("nan")
        d0 = d0_all[idx].sum(1) @ w
        d1 = d1_all[idx].sum(1) @ w
        return float(np.mean(d1 < d0))

    metric.train_info = {
        "train_triplets": int(len(train_idx)),
        "heldout_triplets": int(len(test_idx)),
        "heldout_image_ranking": image_rank_acc(test_idx),
        "uniform_heldout_image_ranking": float(np.mean(
            d1_all[test_idx].sum((1, 2)) < d0_all[test_idx].sum((1, 2)))) if len(test_idx) else float("nan"),
        "final_loss": float(history[-1]) if history else 0.0,
    }
    return metric

"""User keys and their embedding along latent principal components."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .latent_model import Generator, ImageGrid, LatentSample
from .spectral import FingerprintBasis

BOUND_WIDENING = 0.05


@dataclass(frozen=True)
class Key:
    bits: tuple[int, ...]
    id: int = 0

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("key bits must be 0 or 1")

    @classmethod
    def from_array(cls, bits, id: int = 0) -> "Key":
        return cls(tuple(int(b) for b in np.asarray(bits).ravel()), id)

    @property
    def d_phi(self) -> int:
        return len(self.bits)

    @property
    def phi(self) -> np.ndarray:
        return np.array(self.bits, dtype=float)

    def hex(self) -> str:
        """Hex string of the bits, most-significant bit first (bit 0 is the MSB)."""
        value = int("".join(map(str, self.bits)), 2) if self.bits else 0
        return format(value, f"0{max(1, (len(self.bits) + 3) // 4)}x")

    @classmethod
    def from_hex(cls, text: str, d_phi: int, id: int = 0) -> "Key":
        value = int(text, 16)
        if value >> d_phi:
            raise ValueError(f"hex key {text!r} does not fit in {d_phi} bits")
        return cls(tuple(int(c) for c in format(value, f"0{d_phi}b")), id)


@dataclass
class KeyRegistry:
    d_phi: int
    keys: list[Key]
    seed: int | None = None

    def __len__(self):
        return len(self.keys)

    def __iter__(self):
        return iter(self.keys)

    def __getitem__(self, i) -> Key:
        return self.keys[i]

    def check(self) -> None:
        bits = [k.bits for k in self.keys]
        if len(set(bits)) != len(bits):
            raise ValueError("registry keys are not unique")
        if any(len(b) != self.d_phi for b in bits):
            raise ValueError("registry key length mismatch")

    def nearest(self, phi_hat) -> tuple[Key, int]:
        """Closest registered key by Hamming distance (ties go to the lowest id)."""
        phi_hat = np.asarray(phi_hat).astype(int)
        mat = np.array([k.bits for k in self.keys], dtype=int)
        dist = np.abs(mat - phi_hat).sum(axis=1)
        best = int(np.argmin(dist))
        return self.keys[best], int(dist[best])

    def save(self, path) -> None:
        lines = [f"d_phi={self.d_phi}", f"count={len(self.keys)}", f"seed={self.seed if self.seed is not None else ''}"]
        lines += [k.hex() for k in self.keys]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "KeyRegistry":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        header = dict(ln.split("=", 1) for ln in lines[:3])
        d_phi, count = int(header["d_phi"]), int(header["count"])
        seed = int(header["seed"]) if header.get("seed") else None
        keys = [Key.from_hex(h, d_phi, id=i) for i, h in enumerate(lines[3:])]
        if len(keys) != count:
            raise ValueError(f"registry header says {count} keys, file has {len(keys)}")
        reg = cls(d_phi, keys, seed)
        reg.check()
        return reg


def sample_keys(d_phi: int, count: int, rng_seed: int) -> KeyRegistry:
    """``count`` distinct Bernoulli(0.5) keys; duplicates are redrawn."""
    if d_phi < 1:
        raise ValueError("d_phi must be positive")
    if count > 2**d_phi:
        raise ValueError(f"cannot draw {count} distinct keys of length {d_phi}")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), d_phi]))
    seen: set[tuple[int, ...]] = set()
    keys = []
    while len(keys) < count:
        bits = tuple(int(b) for b in rng.integers(0, 2, size=d_phi))
        if bits in seen:
            continue
        seen.add(bits)
        keys.append(Key(bits, id=len(keys)))
    return KeyRegistry(d_phi, keys, rng_seed)


@dataclass
class FingerprintConfig:
    basis: FingerprintBasis
    sigma: float
    alpha_lower: np.ndarray
    alpha_upper: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if np.any(self.alpha_lower > self.alpha_upper):
            raise ValueError("alpha lower bounds exceed upper bounds")

    @property
    def U(self):
        return self.basis.U

    @property
    def V(self):
        return self.basis.V

    @property
    def mean(self):
        return self.basis.mean

    @property
    def d_phi(self) -> int:
        return self.basis.d_phi

    @property
    def d_alpha(self) -> int:
        return self.basis.U.shape[1]

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.alpha_lower, self.alpha_upper], axis=1)


def make_config(basis: FingerprintBasis, sigma: float, widen: float = BOUND_WIDENING) -> FingerprintConfig:
    """Attach strength and alpha bounds (sample extent along each U column, widened)."""
    stats = basis.source_stats
    idx = basis.u_index
    lo, hi = stats.pc_min[idx], stats.pc_max[idx]
    if not basis.center:
        shift = stats.mean @ basis.U
        lo, hi = lo + shift, hi + shift
    pad = widen * (hi - lo)
    return FingerprintConfig(basis, float(sigma), lo - pad, hi + pad)


def project_alpha(cfg: FingerprintConfig, w) -> np.ndarray:
    """Non-fingerprint coordinates ``U^T (w - mu)``; works row-wise on batches."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != cfg.U.shape[0]:
        raise ValueError(f"latent has dimension {w.shape[-1]}, expected {cfg.U.shape[0]}")
    return (w - cfg.mean) @ cfg.U


def _phi(cfg: FingerprintConfig, key) -> np.ndarray:
    phi = key.phi if isinstance(key, Key) else np.asarray(key, dtype=float)
    if phi.shape[-1] != cfg.d_phi:
        raise ValueError(f"key has {phi.shape[-1]} bits, basis expects {cfg.d_phi}")
    return phi


def embed_batch(cfg: FingerprintConfig, alpha, phi) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] != cfg.d_alpha:
        raise ValueError(f"alpha has dimension {alpha.shape[-1]}, expected {cfg.d_alpha}")
    return cfg.mean + alpha @ cfg.U.T + cfg.sigma * (np.asarray(phi, dtype=float) @ cfg.V.T)


def embed(cfg: FingerprintConfig, alpha, key) -> LatentSample:
    """``w = mu + U alpha + sigma V phi``."""
    return LatentSample(embed_batch(cfg, alpha, _phi(cfg, key)), "fingerprinted")


def read_key(cfg: FingerprintConfig, w) -> np.ndarray:
    """``V^T (w - mu) / sigma``: the (relaxed) key carried by a latent."""
    return (np.asarray(w, dtype=float) - cfg.mean) @ cfg.V / cfg.sigma


def fingerprint_latents(handle: Generator, cfg: FingerprintConfig, Z, key) -> np.ndarray:
    W = handle.map_latent_batch(np.atleast_2d(Z))
    return embed_batch(cfg, project_alpha(cfg, W), _phi(cfg, key))


def generate_fingerprinted(handle: Generator, cfg: FingerprintConfig, z, key) -> ImageGrid:
    w = fingerprint_latents(handle, cfg, np.asarray(z, dtype=float)[None], key)[0]
    return handle.evaluate(w)

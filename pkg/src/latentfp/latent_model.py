"""Synthetic smooth generator ``g`` and latent mapper ``psi``.

The generator is a small fully-connected network with a smooth activation and a
scaled-sigmoid output squash, so every quantity the attribution machinery needs
(outputs, Jacobians, vector-Jacobian products) is available in closed form.

Both networks share a seeded orthogonal "semantic frame" ``R`` and a decaying
scale profile: ``psi`` stretches its output along the columns of ``R`` and
``g`` is most sensitive along the same columns.  That gives the latent
covariance a decaying spectrum whose leading eigenvectors line up with the
leading eigenvectors of the mean Gram matrix of ``g``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

SMOOTH_ACTIVATIONS = ("tanh", "softplus", "silu")

LATENT_SOURCES = ("mapped-from-z", "fingerprinted", "synthetic-gaussian")
IMAGE_PROVENANCE = ("generated", "postprocessed")


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture and seed of a surrogate generator.

    Weights are never stored; ``(seed, architecture)`` rebuilds them exactly.
    """

    d_z: int = 64
    d_w: int = 64
    image_h: int = 16
    image_w: int = 16
    channels: int = 1
    layer_widths: tuple[int, ...] = (128,)
    psi_layer_widths: tuple[int, ...] = (64,)
    activation: str = "tanh"
    seed: int = 0
    output_range: tuple[float, float] = (0.0, 1.0)
    # ratio between the largest and smallest latent standard deviation
    spectrum_ratio: float = 10.0
    # std (in pixels) of the Gaussian used to spatially correlate output weights
    output_smoothing: float = 1.0
    # zero hidden layers and no output squash: g(w) = A w + b, psi(z) = B z + c
    affine: bool = False

    @property
    def d_x(self) -> int:
        return self.image_h * self.image_w * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_h, self.image_w)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        d["psi_layer_widths"] = list(self.psi_layer_widths)
        d["output_range"] = list(self.output_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        for key in ("layer_widths", "psi_layer_widths", "output_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LatentSample:
    w: np.ndarray
    source: str = "mapped-from-z"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.source not in LATENT_SOURCES:
            raise ValueError(f"unknown latent source {self.source!r}")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("latent sample has non-finite entries")

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)


@dataclass
class ImageGrid:
    pixels: np.ndarray
    provenance: str = "generated"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3:
            raise ValueError("ImageGrid pixels must have shape (channels, h, w)")
        if self.provenance not in IMAGE_PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)

    @property
    def shape(self):
        return self.pixels.shape

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


def _activation(name: str) -> tuple[Callable, Callable]:
    if name == "tanh":
        return np.tanh, lambda x, y: 1.0 - y * y
    if name == "softplus":
        return (lambda x: np.logaddexp(0.0, x)), (lambda x, y: _sigmoid(x))
    if name == "silu":
        def f(x):
            return x * _sigmoid(x)

        def df(x, y):
            s = _sigmoid(x)
            return s + x * s * (1.0 - s)

        return f, df
    raise ValueError(f"activation {name!r} is not one of the smooth set {SMOOTH_ACTIVATIONS}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Orthonormal rows (or columns), rescaled so a unit-variance input gives unit-variance outputs."""
    q = _orthogonal(rng, max(rows, cols))[:rows, :cols]
    return q * np.sqrt(max(rows, cols) / cols)


def _smoothing_matrix(h: int, w: int, channels: int, std: float) -> np.ndarray:
    """Row-normalized Gaussian spatial smoothing over a (channels, h, w) grid."""
    n = h * w
    if std <= 0:
        return np.eye(n * channels)
    ys, xs = np.divmod(np.arange(n), w)
    d2 = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    k = np.exp(-0.5 * d2 / std**2)
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    return np.kron(np.eye(channels), k)


def latent_scales(spec: GeneratorSpec) -> np.ndarray:
    """Per-direction latent standard deviations, geometric from 1 to 1/spectrum_ratio."""
    if spec.d_w == 1:
        return np.ones(1)
    return spec.spectrum_ratio ** (-np.arange(spec.d_w) / (spec.d_w - 1))


class Generator:
    """Immutable handle around the weights of ``g`` and ``psi``.

    ``layers`` and ``psi_layers`` are lists of ``(W, b)``; the activation is
    applied between consecutive layers, never after the last one.  ``g`` ends
    with a scaled sigmoid into ``output_range`` unless ``squash`` is False.
    """

    def __init__(self, spec: GeneratorSpec, layers, psi_layers, squash: bool):
        self.spec = spec
        self.layers = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in layers]
        self.psi_layers = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in psi_layers]
        for W, b in self.layers + self.psi_layers:
            W.flags.writeable = False
            b.flags.writeable = False
        self.squash = squash
        self._act, self._dact = _activation(spec.activation)
        lo, hi = spec.output_range
        self._lo, self._span = float(lo), float(hi - lo)
        if self.layers[0][0].shape[1] != spec.d_w or self.layers[-1][0].shape[0] != spec.d_x:
            raise ValueError("generator weights do not match spec dimensions")
        if self.psi_layers[0][0].shape[1] != spec.d_z or self.psi_layers[-1][0].shape[0] != spec.d_w:
            raise ValueError("mapper weights do not match spec dimensions")

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_act"], state["_dact"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        for W, b in self.layers + self.psi_layers:
            W.flags.writeable = False
            b.flags.writeable = False
        self._act, self._dact = _activation(self.spec.activation)

    @classmethod
    def from_affine(cls, A, b, B=None, c=None, output_range=(0.0, 1.0)) -> "Generator":
        """Affine ``g(w) = A w + b`` (no squash) with an affine mapper ``psi(z) = B z + c``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d_x, d_w = A.shape
        b = np.zeros(d_x) if b is None else np.asarray(b, dtype=float)
        B = np.eye(d_w) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        c = np.zeros(d_w) if c is None else np.asarray(c, dtype=float)
        spec = GeneratorSpec(
            d_z=B.shape[1], d_w=d_w, image_h=1, image_w=d_x, channels=1,
            layer_widths=(), psi_layer_widths=(), output_range=tuple(output_range),
            affine=True,
        )
        return cls(spec, [(A, b)], [(B, c)], squash=False)

    # -- forward passes -------------------------------------------------

    def _check(self, x, dim, what):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != dim:
            raise ValueError(f"{what} has dimension {x.shape[-1]}, expected {dim}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{what} has non-finite entries")
        return x

    def map_latent_batch(self, Z) -> np.ndarray:
        h = self._check(Z, self.spec.d_z, "z")
        for W, b in self.psi_layers[:-1]:
            h = self._act(h @ W.T + b)
        W, b = self.psi_layers[-1]
        return h @ W.T + b

    def map_latent(self, z) -> LatentSample:
        z = np.asarray(z, dtype=float)
        if z.ndim != 1:
            raise ValueError("map_latent expects a single latent seed; use map_latent_batch")
        return LatentSample(self.map_latent_batch(z[None])[0], "mapped-from-z")

    def _forward(self, X):
        """Return (output, cache) for a batch of latents, cache holding pre/post activations."""
        pres, posts = [], []
        h = X
        for W, b in self.layers[:-1]:
            pre = h @ W.T + b
            h = self._act(pre)
            pres.append(pre)
            posts.append(h)
        W, b = self.layers[-1]
        out_pre = h @ W.T + b
        if self.squash:
            s = _sigmoid(out_pre)
            y = self._lo + self._span * s
            dsquash = self._span * s * (1.0 - s)
        else:
            y = out_pre
            dsquash = None
        return y, (pres, posts, dsquash)

    def evaluate_batch(self, W_lat) -> np.ndarray:
        """Flat outputs, shape (n, d_x)."""
        X = self._check(np.atleast_2d(W_lat), self.spec.d_w, "w")
        return self._forward(X)[0]

    def evaluate(self, w) -> ImageGrid:
        w = np.asarray(w, dtype=float)
        if w.ndim != 1:
            raise ValueError("evaluate expects a single latent; use evaluate_batch")
        y = self.evaluate_batch(w[None])[0]
        return ImageGrid(y.reshape(self.spec.image_shape), "generated")

    def value_and_vjp(self, W_lat, cotangent_fn):
        """Batched outputs and the pullback of ``cotangent_fn(outputs)``.

        ``cotangent_fn`` maps outputs (n, d_x) to ``(values, cotangents)`` and
        the return is ``(outputs, values, grads)`` with grads of shape (n, d_w).
        """
        X = self._check(np.atleast_2d(W_lat), self.spec.d_w, "w")
        y, (pres, posts, dsquash) = self._forward(X)
        values, c = cotangent_fn(y)
        if dsquash is not None:
            c = c * dsquash
        for k in range(len(self.layers) - 1, 0, -1):
            c = (c @ self.layers[k][0]) * self._dact(pres[k - 1], posts[k - 1])
        return y, values, c @ self.layers[0][0]

    def vjp(self, W_lat, cotangent) -> np.ndarray:
        cot = np.atleast_2d(np.asarray(cotangent, dtype=float))
        return self.value_and_vjp(W_lat, lambda y: (None, cot))[2]

    def jacobian_batch(self, W_lat) -> np.ndarray:
        """Analytic Jacobians, shape (n, d_x, d_w)."""
        X = self._check(np.atleast_2d(W_lat), self.spec.d_w, "w")
        _, (pres, posts, dsquash) = self._forward(X)
        M = np.broadcast_to(self.layers[0][0], (X.shape[0],) + self.layers[0][0].shape)
        for k in range(1, len(self.layers)):
            M = self._dact(pres[k - 1], posts[k - 1])[:, :, None] * M
            M = np.einsum("ij,njk->nik", self.layers[k][0], M)
        if dsquash is not None:
            M = dsquash[:, :, None] * M
        return np.array(M)

    def jacobian(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim != 1:
            raise ValueError("jacobian expects a single latent; use jacobian_batch")
        return self.jacobian_batch(w[None])[0]

    def saturation_rate(self, Y, margin: float = 0.01) -> float:
        """Fraction of output pixels within ``margin`` (relative) of the range ends."""
        Y = np.asarray(Y, dtype=float)
        rel = (Y - self._lo) / self._span
        return float(np.mean((rel < margin) | (rel > 1.0 - margin)))


def build_generator(spec: GeneratorSpec) -> Generator:
    """Draw all weights of ``g`` and ``psi`` from ``spec.seed``."""
    if min(spec.d_z, spec.d_w, spec.image_h, spec.image_w, spec.channels) <= 0:
        raise ValueError("all generator dimensions must be positive")
    if spec.activation not in SMOOTH_ACTIVATIONS:
        raise ValueError(f"activation {spec.activation!r} is not one of the smooth set {SMOOTH_ACTIVATIONS}")
    if spec.spectrum_ratio < 1:
        raise ValueError("spectrum_ratio must be >= 1")
    if any(w <= 0 for w in tuple(spec.layer_widths) + tuple(spec.psi_layer_widths)):
        raise ValueError("hidden widths must be positive")

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    d_w, d_x = spec.d_w, spec.d_x
    frame = _orthogonal(rng, d_w)
    scales = latent_scales(spec)

    # psi: tanh MLP in z, then stretched along the frame
    psi_layers = []
    fan_in = spec.d_z
    widths = () if spec.affine else tuple(spec.psi_layer_widths)
    for width in widths:
        psi_layers.append((_semi_orthogonal(rng, width, fan_in), np.zeros(width)))
        fan_in = width
    if spec.affine:
        core = np.eye(d_w, spec.d_z)
    else:
        # tanh of a unit-variance input has second moment ~0.39
        core = _semi_orthogonal(rng, d_w, fan_in) / np.sqrt(0.394)
    psi_bias = 0.1 * rng.standard_normal(d_w)
    psi_layers.append(((frame * scales) @ core, psi_bias))

    # g: the first layer reads frame coordinates weighted by the same decay,
    # normalized so natural latents give unit-variance pre-activations
    reader = (scales / np.sqrt(np.mean(scales**4)))[:, None] * frame.T
    smooth = _smoothing_matrix(spec.image_h, spec.image_w, spec.channels, spec.output_smoothing)
    mid = 0.5 * (spec.output_range[0] + spec.output_range[1])
    if spec.affine:
        A = smooth @ (0.25 * rng.standard_normal((d_x, d_w)) / np.sqrt(d_w)) @ reader
        b = mid + 0.05 * rng.standard_normal(d_x) - A @ psi_bias
        return Generator(spec, [(A, b)], psi_layers, squash=False)

    layers = []
    fan_in = d_w
    for k, width in enumerate(spec.layer_widths):
        W = rng.standard_normal((width, fan_in)) / np.sqrt(fan_in)
        b = 0.1 * rng.standard_normal(width)
        if k == 0:
            W = W @ reader
            b = b - W @ psi_bias
        layers.append((W, b))
        fan_in = width
    gain = 1.5 / np.sqrt(0.394 * fan_in) if spec.layer_widths else 1.5 / np.sqrt(fan_in)
    W_out = smooth @ (gain * rng.standard_normal((d_x, fan_in)))
    b_out = 0.1 * rng.standard_normal(d_x)
    if not spec.layer_widths:
        W_out = W_out @ reader
        b_out = b_out - W_out @ psi_bias
    layers.append((W_out, b_out))
    return Generator(spec, layers, psi_layers, squash=True)

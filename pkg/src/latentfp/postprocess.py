"""Image postprocessing attacks: noise, Gaussian blur, JPEG-like quantization, combos."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .latent_model import ImageGrid

KINDS = ("identity", "noising", "blurring", "jpeg", "combo")
COMBO_ORDER = ("blurring", "noising", "jpeg")

NOISE_SIGMA_MAX = 0.1
BLUR_SIZES = (3, 7, 9, 16, 25)
BLUR_SIGMAS = (0.5, 1.0, 1.5, 2.0)
JPEG_QUALITIES = (80, 70, 60, 50)

# standard JPEG luminance quantization table
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=float)


@dataclass(frozen=True)
class PostprocessSpec:
    kind: str = "identity"
    noise_sigma: float = 0.0
    blur_kernel_size: int = 3
    blur_sigma: float = 1.0
    jpeg_quality: int = 75
    combo_include_prob: float = 0.5
    rng_seed: int = 0
    # fixed subset for combo; None draws the subset at apply time
    combo_parts: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.blur_kernel_size < 1 or self.blur_sigma <= 0:
            raise ValueError("blur kernel size must be >= 1 and sigma > 0")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must be in [1, 100]")
        if not 0 <= self.combo_include_prob <= 1:
            raise ValueError("combo_include_prob must be a probability")
        if self.combo_parts is not None and not set(self.combo_parts) <= set(COMBO_ORDER):
            raise ValueError(f"combo parts must be drawn from {COMBO_ORDER}")

    @property
    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "noising":
            return f"noising[{self.noise_sigma:g}]"
        if self.kind == "blurring":
            return f"blurring[{self.blur_kernel_size}x{self.blur_sigma:g}]"
        if self.kind == "jpeg":
            return f"jpeg[{self.jpeg_quality}]"
        parts = "+".join(self.combo_parts) if self.combo_parts else "random"
        return (f"combo[{parts};{self.blur_kernel_size}x{self.blur_sigma:g};"
                f"{self.noise_sigma:g};{self.jpeg_quality}]")

    def to_items(self) -> list[tuple[str, str]]:
        items = [
            ("attack.kind", self.kind),
            ("attack.noise_sigma", repr(float(self.noise_sigma))),
            ("attack.blur", f"{self.blur_kernel_size}x{self.blur_sigma!r}"),
            ("attack.jpeg_quality", str(self.jpeg_quality)),
            ("attack.seed", str(self.rng_seed)),
        ]
        if self.combo_parts is not None:
            items.append(("attack.combo_parts", ",".join(self.combo_parts)))
        return items

    @classmethod
    def from_items(cls, items: dict) -> "PostprocessSpec":
        kw = {"kind": items.get("attack.kind", "identity")}
        if "attack.noise_sigma" in items:
            kw["noise_sigma"] = float(items["attack.noise_sigma"])
        if "attack.blur" in items:
            size, sig = items["attack.blur"].lower().split("x")
            kw["blur_kernel_size"], kw["blur_sigma"] = int(size), float(sig)
        if "attack.jpeg_quality" in items:
            kw["jpeg_quality"] = int(items["attack.jpeg_quality"])
        if "attack.seed" in items:
            kw["rng_seed"] = int(items["attack.seed"])
        if items.get("attack.combo_parts"):
            kw["combo_parts"] = tuple(items["attack.combo_parts"].split(","))
        return cls(**kw)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps.

    Even sizes take the symmetric ``size + 1`` tap kernel and drop its last tap,
    so the kernel covers offsets ``-size/2 .. size/2 - 1``.
    """
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    if size % 2 == 0:
        k = k[:-1]
    return k / k.sum()


def blur(pixels: np.ndarray, size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(size, sigma)
    # correlate1d centers even-length weights at index size // 2, matching the offsets above
    out = ndimage.correlate1d(pixels, k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def quant_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_step_bound(quality: int, span: float = 1.0) -> float:
    """Largest quantization step of the table, in output-range units."""
    return float(quant_table(quality).max()) / 255.0 * span


def jpeg_like(pixels: np.ndarray, quality: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Channelwise 8x8 block DCT quantize/dequantize on the 0..255 scale (no entropy coding)."""
    table = quant_table(quality)
    h, w = pixels.shape[-2:]
    ph, pw = -h % 8, -w % 8
    pad = [(0, 0)] * (pixels.ndim - 2) + [(0, ph), (0, pw)]
    x = np.pad((pixels - lo) / (hi - lo) * 255.0 - 128.0, pad, mode="edge")
    H, W = x.shape[-2:]
    blocks = x.reshape(x.shape[:-2] + (H // 8, 8, W // 8, 8))
    coef = sfft.dctn(blocks, axes=(-3, -1), norm="ortho")
    coef = np.round(coef / table[:, None, :]) * table[:, None, :]
    rec = sfft.idctn(coef, axes=(-3, -1), norm="ortho").reshape(x.shape)
    rec = rec[..., :h, :w]
    return (rec + 128.0) / 255.0 * (hi - lo) + lo


def _combo_parts(spec: PostprocessSpec, rng: np.random.Generator) -> tuple[str, ...]:
    if spec.combo_parts is not None:
        return tuple(p for p in COMBO_ORDER if p in spec.combo_parts)
    if spec.combo_include_prob == 0:
        raise ValueError("combo with inclusion probability 0 never applies an attack")
    while True:
        flags = rng.random(len(COMBO_ORDER)) < spec.combo_include_prob
        if flags.any():
            return tuple(p for p, f in zip(COMBO_ORDER, flags) if f)


def apply_array(spec: PostprocessSpec, pixels: np.ndarray, rng_seed: Optional[int] = None,
                output_range=(0.0, 1.0)) -> np.ndarray:
    """Apply ``spec`` to an array whose last two axes are (h, w)."""
    lo, hi = output_range
    x = np.asarray(pixels, dtype=float)
    if spec.kind == "identity":
        return x.copy()
    seed = spec.rng_seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    parts = _combo_parts(spec, rng) if spec.kind == "combo" else (spec.kind,)
    for part in parts:
        if part == "blurring":
            x = blur(x, spec.blur_kernel_size, spec.blur_sigma)
        elif part == "noising":
            if spec.noise_sigma == 0:
                continue
            x = x + spec.noise_sigma * (hi - lo) * rng.standard_normal(x.shape)
        elif part == "jpeg":
            x = jpeg_like(x, spec.jpeg_quality, lo, hi)
        x = np.clip(x, lo, hi)
    return x


def apply(spec: PostprocessSpec, img, rng_seed: Optional[int] = None, output_range=(0.0, 1.0)) -> ImageGrid:
    pixels = np.asarray(img, dtype=float)
    lo, hi = output_range
    if pixels.min() < lo or pixels.max() > hi:
        raise ValueError("input image is outside the output range")
    return ImageGrid(apply_array(spec, pixels, rng_seed, output_range), "postprocessed")


def sample_attack(kind: str, rng_seed: int) -> PostprocessSpec:
    """Draw attack parameters from the standard ranges."""
    if kind not in KINDS:
        raise ValueError(f"unknown attack kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), KINDS.index(kind)]))
    noise = float(rng.uniform(0.0, NOISE_SIGMA_MAX))
    size = int(rng.choice(BLUR_SIZES))
    bsig = float(rng.choice(BLUR_SIGMAS))
    quality = int(rng.choice(JPEG_QUALITIES))
    base = PostprocessSpec(kind=kind, rng_seed=int(rng_seed))
    if kind == "noising":
        return replace(base, noise_sigma=noise)
    if kind == "blurring":
        return replace(base, blur_kernel_size=size, blur_sigma=bsig)
    if kind == "jpeg":
        return replace(base, jpeg_quality=quality)
    if kind == "combo":
        return replace(base, noise_sigma=noise, blur_kernel_size=size, blur_sigma=bsig, jpeg_quality=quality)
    return base


def strongest(kind: str, rng_seed: int = 0) -> PostprocessSpec:
    """Maximum-strength parameters; the combo applies all three sub-attacks."""
    base = PostprocessSpec(kind=kind, rng_seed=rng_seed)
    if kind == "noising":
        return replace(base, noise_sigma=NOISE_SIGMA_MAX)
    if kind == "blurring":
        return replace(base, blur_kernel_size=max(BLUR_SIZES), blur_sigma=max(BLUR_SIGMAS))
    if kind == "jpeg":
        return replace(base, jpeg_quality=min(JPEG_QUALITIES))
    if kind == "combo":
        return replace(base, noise_sigma=NOISE_SIGMA_MAX, blur_kernel_size=max(BLUR_SIZES),
                       blur_sigma=max(BLUR_SIGMAS), jpeg_quality=min(JPEG_QUALITIES),
                       combo_parts=COMBO_ORDER)
    if kind == "identity":
        return base
    raise ValueError(f"unknown attack kind {kind!r}")


PRESETS = {
    "identity": lambda: PostprocessSpec(),
    "strongest-noising": lambda: strongest("noising"),
    "strongest-blurring": lambda: strongest("blurring"),
    "strongest-jpeg": lambda: strongest("jpeg"),
    "strongest-combo": lambda: strongest("combo"),
}


def preset(name: str) -> PostprocessSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown attack preset {name!r}; known: {sorted(PRESETS)}") from None

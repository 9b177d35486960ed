"""Seeded multi-pass degradation of clean plates into low-quality inputs.

A pass walks an ordered list of stages; each stage fires with its own
probability and draws its parameters from the pass's random stream.  The
default configuration runs two passes of perspective jitter, contrast change,
motion blur, Gaussian blur, down/up-resampling, sensor noise and blocky
DCT quantization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, ndimage

from .imaging import resize
from .numerics import make_rng

STAGE_KINDS = ("perspective", "contrast", "motion_blur", "gaussian_blur", "resample",
               "gaussian_noise", "block_quantize")

# parameter names (with [min, max] ranges) each stage kind expects
STAGE_PARAMS = {
    "perspective": ("shift",),        # corner displacement, fraction of width/height
    "contrast": ("factor", "offset"),
    "motion_blur": ("length", "angle"),
    "gaussian_blur": ("sigma",),
    "resample": ("scale",),
    "gaussian_noise": ("sigma",),
    "block_quantize": ("quality",),
}


@dataclass
class Stage:
    kind: str
    probability: float = 1.0
    params: dict[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown degradation stage {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"{self.kind}.probability must be in [0, 1], got {self.probability}")
        expected = set(STAGE_PARAMS[self.kind])
        if set(self.params) != expected:
            raise ValueError(f"{self.kind} expects parameters {sorted(expected)}, got {sorted(self.params)}")
        for name, rng in self.params.items():
            lo, hi = rng
            if lo > hi:
                raise ValueError(f"{self.kind}.{name} range [{lo}, {hi}] is empty")
        if self.kind == "motion_blur" and self.params["length"][0] < 1:
            raise ValueError("motion_blur.length must be >= 1")
        if self.kind == "resample" and not 0 < self.params["scale"][0] <= self.params["scale"][1] <= 1:
            raise ValueError("resample.scale must lie in (0, 1]")
        if self.kind == "block_quantize" and not 1 <= self.params["quality"][0]:
            raise ValueError("block_quantize.quality must be >= 1")


def default_stages() -> list[Stage]:
    return [
        Stage("perspective", 0.5, {"shift": (0.0, 0.04)}),
        Stage("contrast", 0.6, {"factor": (0.55, 1.0), "offset": (-20.0, 20.0)}),
        Stage("motion_blur", 0.4, {"length": (2, 4), "angle": (0.0, 180.0)}),
        Stage("gaussian_blur", 0.7, {"sigma": (0.5, 1.1)}),
        Stage("resample", 0.7, {"scale": (0.4, 0.7)}),
        Stage("gaussian_noise", 0.8, {"sigma": (4.0, 12.0)}),
        Stage("block_quantize", 0.5, {"quality": (30.0, 80.0)}),
    ]


@dataclass
class DegradeConfig:
    stages: list[Stage] = field(default_factory=default_stages)
    orders: int = 2

    def validate(self) -> None:
        if self.orders < 1:
            raise ValueError(f"degrade.orders must be >= 1, got {self.orders}")
        for s in self.stages:
            s.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeConfig":
        unknown = set(d) - {"orders", "stages"}
        if unknown:
            raise ValueError(f"unknown degrade keys: {sorted(unknown)}")
        stages = []
        for s in d.get("stages", []):
            s = dict(s)
            kind = s.pop("kind", None)
            prob = s.pop("probability", 1.0)
            stages.append(Stage(kind, float(prob), {k: (float(v[0]), float(v[1])) for k, v in s.items()}))
        cfg = cls(stages=stages if "stages" in d else default_stages(), orders=int(d.get("orders", 2)))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {"orders": self.orders,
                "stages": [{"kind": s.kind, "probability": s.probability,
                            **{k: list(v) for k, v in s.params.items()}} for s in self.stages]}


# -- kernels -------------------------------------------------------------------

def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` pixels at ``angle`` degrees.

    The segment is centered on the kernel and rasterized by sampling
    ``length`` evenly spaced points along it and rounding each to the nearest
    pixel.
    """
    length = int(length)
    if length < 1:
        raise ValueError(f"motion blur length must be >= 1, got {length}")
    if length == 1:
        return np.ones((1, 1))
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)  # image rows grow downwards
    t = np.arange(length) - (length - 1) / 2.0
    xs = np.rint(t * dx + 1e-9).astype(int)
    ys = np.rint(t * dy + 1e-9).astype(int)
    r = max(np.abs(xs).max(), np.abs(ys).max())
    k = np.zeros((2 * r + 1, 2 * r + 1))
    np.add.at(k, (ys + r, xs + r), 1.0)
    k = k[~np.all(k == 0, axis=1)][:, ~np.all(k == 0, axis=0)]
    return k / k.sum()


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: float) -> np.ndarray:
    """Standard luminance table scaled by the usual quality mapping."""
    q = float(np.clip(quality, 1, 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1, 255)


# -- stage implementations ------------------------------------------------------------

def _per_channel(fn, img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(img[:, :, c]) for c in range(img.shape[2])], axis=2)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix H with H @ [src, 1] ~ [dst, 1] for four point pairs."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def perspective(img: np.ndarray, shift: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-1.0, 1.0, size=(4, 2)) * np.array([shift * w, shift * h])
    # output pixel -> source pixel
    hmat = _homography(corners, corners + jitter)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = hmat @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]
    fill = float(np.median(img))

    def warp(ch):
        return ndimage.map_coordinates(ch, [sy, sx], order=1, mode="constant", cval=fill).reshape(h, w)

    return _per_channel(warp, img)


def contrast(img: np.ndarray, factor: float, offset: float) -> np.ndarray:
    mean = img.mean()
    return (img - mean) * factor + mean + offset


def convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _per_channel(lambda ch: ndimage.correlate(ch, kernel, mode="nearest"), img)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)

    def blur(ch):
        ch = ndimage.correlate1d(ch, k, axis=0, mode="nearest")
        return ndimage.correlate1d(ch, k, axis=1, mode="nearest")

    return _per_channel(blur, img)


def resample(img: np.ndarray, scale: float) -> np.ndarray:
    h, w = img.shape[:2]
    small = resize(img, (max(1, round(h * scale)), max(1, round(w * scale))))
    return resize(small, (h, w))


def block_quantize(img: np.ndarray, quality: float) -> np.ndarray:
    table = quant_table(quality)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8

    def codec(ch):
        x = np.pad(ch, ((0, ph), (0, pw)), mode="edge") - 128.0
        hb, wb = x.shape[0] // 8, x.shape[1] // 8
        blocks = x.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
        coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
        coef = np.round(coef / table) * table
        rec = fft.idctn(coef, axes=(2, 3), norm="ortho")
        return (rec.transpose(0, 2, 1, 3).reshape(x.shape) + 128.0)[:h, :w]

    return _per_channel(codec, img)


def apply_stage(img: np.ndarray, stage: Stage, rng: np.random.Generator) -> np.ndarray:
    """Draw the stage's parameters from ``rng`` and apply it (no firing test)."""
    draw = {k: float(rng.uniform(lo, hi)) if lo < hi else float(lo) for k, (lo, hi) in stage.params.items()}
    kind = stage.kind
    if kind == "perspective":
        out = perspective(img, draw["shift"], rng)
    elif kind == "contrast":
        out = contrast(img, draw["factor"], draw["offset"])
    elif kind == "motion_blur":
        out = convolve(img, motion_blur_kernel(int(round(draw["length"])), draw["angle"]))
    elif kind == "gaussian_blur":
        out = gaussian_blur(img, draw["sigma"])
    elif kind == "resample":
        out = resample(img, draw["scale"])
    elif kind == "gaussian_noise":
        out = img + rng.standard_normal(img.shape) * draw["sigma"]
    else:
        out = block_quantize(img, draw["quality"])
    return np.clip(out, 0.0, 255.0)


def degrade_pass(image: np.ndarray, stages: list[Stage], rng: np.random.Generator) -> np.ndarray:
    """One pass over ``stages``; the result is rounded to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    for stage in stages:
        if rng.random() < stage.probability:
            img = apply_stage(img, stage, rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def degrade(image: np.ndarray, config: DegradeConfig, seed: int) -> np.ndarray:
    """Apply ``config.orders`` passes; pass k uses the stream ``(seed, "pass", k)``."""
    config.validate()
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    for k in range(config.orders):
        img = degrade_pass(img, config.stages, make_rng(seed, "pass", k))
    return img

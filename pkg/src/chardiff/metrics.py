"""Restoration (PSNR, SSIM) and recognition (CER, plate accuracy) metrics."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .charprior import TemplateRecognizer, segment_chars
from .imaging import read_pnm, to_gray
from .plates import Manifest

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, maxval: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if maxval <= 0:
        raise ValueError("psnr: maxval must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(maxval * maxval / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Averaged over valid window positions; color inputs are averaged over
    channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError(f"ssim: image {a.shape[:2]} is smaller than the 11x11 window")
    if a.ndim == 3:
        return float(np.mean([ssim(a[:, :, c], b[:, :, c], data_range) for c in range(a.shape[2])]))
    g = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(pred: str, gt: str) -> float:
    if not gt:
        raise ValueError("cer: ground truth must be non-empty")
    return levenshtein(pred, gt) / len(gt)


@dataclass
class SampleMetrics:
    id: str
    label: str
    prediction: str
    cer: float
    exact_match: bool
    psnr: float | None = None
    ssim: float | None = None


@dataclass
class MetricReport:
    samples: list[SampleMetrics] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    @property
    def has_restoration(self) -> bool:
        return bool(self.samples) and all(s.psnr is not None for s in self.samples)

    def aggregate(self) -> dict:
        n = len(self.samples)
        out = {"count": n, "errors": len(self.errors)}
        if n == 0:
            return out
        out["mean_cer"] = float(np.mean([s.cer for s in self.samples]))
        out["lpr_accuracy"] = sum(s.exact_match for s in self.samples) / n
        if self.has_restoration:
            out["mean_psnr"] = float(np.mean([s.psnr for s in self.samples]))
            out["mean_ssim"] = float(np.mean([s.ssim for s in self.samples]))
        return out

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.samples:
                rec = {k: v for k, v in asdict(s).items() if v is not None}
                fh.write(json.dumps(rec) + "\n")
            for e in self.errors:
                fh.write(json.dumps(e) + "\n")
            fh.write(json.dumps({"aggregate": self.aggregate()}) + "\n")

    def table(self) -> str:
        cols = ["id", "label", "pred", "cer", "exact"]
        if self.has_restoration:
            cols += ["psnr", "ssim"]
        rows = []
        for s in self.samples:
            r = [s.id, s.label, s.prediction, f"{s.cer:.3f}", "yes" if s.exact_match else "no"]
            if self.has_restoration:
                r += [f"{s.psnr:.2f}", f"{s.ssim:.4f}"]
            rows.append(r)
        for e in self.errors:
            rows.append([e["id"], "-", "ERROR", "-", "-"] + (["-", "-"] if self.has_restoration else []))
        agg = self.aggregate()
        if self.samples:
            r = ["mean", "", "", f"{agg['mean_cer']:.3f}", f"{agg['lpr_accuracy']:.3f}"]
            if self.has_restoration:
                r += [f"{agg['mean_psnr']:.2f}", f"{agg['mean_ssim']:.4f}"]
            rows.append(r)
        widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
        return "\n".join(lines)


def recognize(image: np.ndarray, recognizer: TemplateRecognizer) -> str:
    """Read a plate: projection segmentation then template OCR per box."""
    boxes = segment_chars(image, "projection", pitch=recognizer.pitch)
    return recognizer.text(recognizer.read(image, boxes))


def evaluate_run(manifest: Manifest, restored_dir: str | os.PathLike,
                 recognizer: TemplateRecognizer) -> MetricReport:
    """Score restored images ``<restored_dir>/<id>.pgm|.ppm`` against the manifest.

    Restoration metrics are computed only for records that carry an HQ path.
    Missing or unreadable files become error records.
    """
    restored_dir = Path(restored_dir)
    report = MetricReport()
    for rec in manifest:
        path = next((p for p in (restored_dir / f"{rec.id}.pgm", restored_dir / f"{rec.id}.ppm") if p.exists()), None)
        if path is None:
            report.errors.append({"id": rec.id, "error": "missing restored image"})
            continue
        try:
            img = read_pnm(path)
        except (OSError, ValueError) as exc:
            report.errors.append({"id": rec.id, "error": str(exc)})
            continue
        pred = recognize(img, recognizer)
        m = SampleMetrics(rec.id, rec.label, pred, cer(pred, rec.label), pred == rec.label)
        if rec.hq_path is not None:
            hq = read_pnm(manifest.resolve(rec.hq_path))
            m.psnr = psnr(img, hq)
            m.ssim = ssim(to_gray(img), to_gray(hq)) if img.ndim == 3 else ssim(img, hq)
        report.samples.append(m)
    return report

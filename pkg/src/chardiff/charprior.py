"""Character priors from a low-quality plate: segment, recognize, embed.

Segmentation and recognition are frozen stand-ins for a learned detector and
recognizer: an oracle/column-projection segmenter and a normalized
cross-correlation template matcher.  The character encoder (embedding table,
fixed sinusoidal positions and one single-head self-attention block) is the
trainable part.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .font import DEFAULT_VOCAB, scaled_glyph
from .imaging import resize, to_gray
from .numerics import Tensor, make_rng, parameter
from .numerics import functional as F

UNKNOWN = -1


class PriorWarning(UserWarning):
    pass


@dataclass
class CharDetection:
    box: tuple[int, int, int, int]
    class_id: int
    confidence: float


@dataclass
class SpatialMask:
    grid: np.ndarray  # bool (H_f, W_f)
    box: tuple[int, int, int, int]
    empty: bool = False


@dataclass
class CharPrior:
    embedding: np.ndarray | Tensor
    mask: SpatialMask


@dataclass
class StringPrior:
    embedding: np.ndarray | Tensor


@dataclass
class Priors:
    """Result of :func:`build_priors`; ``mode`` is 'none', 'char' or 'string'."""
    mode: str
    chars: list[CharPrior] = field(default_factory=list)
    string: StringPrior | None = None
    detections: list[CharDetection] = field(default_factory=list)
    warning: str | None = None


# -- segmentation ----------------------------------------------------------------

def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over 256 bins of [0, 255]; pixels below it are ink."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0, 255)
    hist = np.bincount(np.floor(v).astype(int), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * levels)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 / total - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    if between[k] <= 0:
        return float(v.min())  # constant image: nothing is strictly darker
    return k + 1.0


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], flags, [False]])
    d = np.diff(padded.astype(np.int8))
    return [(int(a), int(b)) for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))]


def projection_segment(image: np.ndarray, min_width: int = 2, min_ink: int = 4,
                       split_ratio: float = 1.6, pitch: float | None = None) -> list[tuple[int, int, int, int]]:
    """Boxes from the column profile of the Otsu-binarized image.

    Column runs containing ink become candidate characters; runs much wider
    than the typical character are split at their weakest columns.  The
    typical width is the known character ``pitch`` when given (fixed-pitch
    plates), else the median run width.  Within each run the vertical extent
    is the row run holding the most ink.
    """
    gray = to_gray(image)
    thr = otsu_threshold(gray)
    ink = gray < thr
    profile = ink.sum(axis=0)
    runs = [(a, b) for a, b in _runs(profile > 0)
            if b - a >= min_width and profile[a:b].sum() >= min_ink]
    if not runs:
        return []
    widths = np.array([b - a for a, b in runs])
    typical = float(pitch) if pitch else float(np.median(widths))
    split: list[tuple[int, int]] = []
    for a, b in runs:
        pieces = int(round((b - a) / typical)) if (b - a) > split_ratio * typical else 1
        if pieces <= 1:
            split.append((a, b))
            continue
        cuts = [a]
        for j in range(1, pieces):
            target = a + (b - a) * j / pieces
            lo, hi = int(target - typical / 3), int(target + typical / 3) + 1
            lo, hi = max(lo, cuts[-1] + 1), min(hi, b - 1)
            c = lo + int(np.argmin(profile[lo:hi])) if hi > lo else int(target)
            cuts.append(c)
        cuts.append(b)
        split.extend((cuts[j], cuts[j + 1]) for j in range(pieces) if cuts[j + 1] > cuts[j])
    boxes = []
    for a, b in split:
        rows = ink[:, a:b].sum(axis=1)
        row_runs = _runs(rows > 0)
        if not row_runs:
            continue
        y0, y1 = max(row_runs, key=lambda r: rows[r[0]:r[1]].sum())
        cols = np.flatnonzero(ink[y0:y1, a:b].any(axis=0))
        boxes.append((a + int(cols[0]), int(y0), a + int(cols[-1]) + 1, int(y1)))
    return boxes


def segment_chars(image: np.ndarray, mode: str = "projection", boxes=None,
                  pitch: float | None = None) -> list[tuple[int, int, int, int]]:
    """Left-to-right character boxes, from the manifest (oracle) or the image."""
    if mode == "oracle":
        if boxes is None:
            raise ValueError("oracle segmentation needs the sample's manifest boxes")
        return sorted((tuple(int(v) for v in b) for b in boxes), key=lambda b: b[0])
    if mode == "projection":
        return projection_segment(image, pitch=pitch)
    raise ValueError(f"unknown segmentation mode {mode!r}")


# -- recognition -------------------------------------------------------------------

def _zscore(x: np.ndarray) -> tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=np.float64)
    sd = float(x.std())
    return (x - x.mean()) / sd if sd > 1e-12 else np.zeros_like(x), sd


class TemplateRecognizer:
    """Frozen nearest-template classifier over the glyph atlas.

    Templates are tight glyph crops (dark ink on a light field) resized to
    the glyph cell and z-scored.  Their arrays are read-only.  With the
    plate's inter-character ``gap`` known, ``pitch`` (cell width plus gap) is
    offered to the projection segmenter as a layout hint.
    """

    def __init__(self, vocab: str = DEFAULT_VOCAB, glyph_scale: tuple[int, int] = (2, 2),
                 gap: int | None = None):
        self.vocab = vocab
        self.glyph_scale = tuple(glyph_scale)
        first = scaled_glyph(vocab[0], self.glyph_scale)
        self.cell = first.shape
        self.pitch = None if gap is None else self.cell[1] + int(gap)
        templates = []
        for c in vocab:
            g = scaled_glyph(c, self.glyph_scale)
            ys, xs = np.nonzero(g)
            tight = 1.0 - g[ys.min():ys.max() + 1, xs.min():xs.max() + 1].astype(np.float64)
            templates.append(_zscore(resize(tight, self.cell))[0])
        self.templates = np.stack(templates)
        self.templates.flags.writeable = False

    def state_bytes(self) -> bytes:
        """Serialized frozen state, used to verify it never changes."""
        header = f"{self.vocab}|{self.glyph_scale}|{self.cell}|{self.pitch}".encode()
        return header + self.templates.tobytes()

    def classify(self, crop: np.ndarray) -> tuple[int, float]:
        crop = to_gray(crop)
        if crop.size == 0:
            raise ValueError("cannot recognize an empty crop")
        z, sd = _zscore(resize(crop, self.cell))
        if sd <= 1e-12:
            return UNKNOWN, 0.0
        scores = (self.templates * z).mean(axis=(1, 2))
        k = int(np.argmax(scores))
        return k, float(np.clip((scores[k] + 1.0) / 2.0, 0.0, 1.0))

    def read(self, image: np.ndarray, boxes) -> list[CharDetection]:
        out = []
        for b in boxes:
            x0, y0, x1, y1 = b
            cls, conf = self.classify(np.asarray(image)[y0:y1, x0:x1])
            out.append(CharDetection(tuple(int(v) for v in b), cls, conf))
        return out

    def text(self, detections: list[CharDetection]) -> str:
        return "".join(self.vocab[d.class_id] if d.class_id != UNKNOWN else "?" for d in detections)


def ocr_char(crop: np.ndarray, recognizer: TemplateRecognizer) -> tuple[int, float]:
    return recognizer.classify(crop)


# -- masks -------------------------------------------------------------------------

def boxes_to_masks(boxes, image_shape: tuple[int, int],
                   feat_shape: tuple[int, int]) -> list[SpatialMask]:
    """Rasterize boxes onto a feature grid with the any-overlap rule.

    Shapes are ``(H, W)``.  A cell is on when its pixel-space pre-image and the
    box share positive area.
    """
    h, w = image_shape
    hf, wf = feat_shape
    sy, sx = h / hf, w / wf
    lo_x, hi_x = np.arange(wf) * sx, (np.arange(wf) + 1) * sx
    lo_y, hi_y = np.arange(hf) * sy, (np.arange(hf) + 1) * sy
    masks = []
    for b in boxes:
        x0, y0, x1, y1 = b
        cols = (lo_x < x1) & (hi_x > x0) & (x1 > x0)
        rows = (lo_y < y1) & (hi_y > y0) & (y1 > y0)
        grid = rows[:, None] & cols[None, :]
        empty = not grid.any()
        if empty:
            warnings.warn(f"box {tuple(b)} covers no feature cell", PriorWarning, stacklevel=2)
        masks.append(SpatialMask(grid, tuple(int(v) for v in b), empty))
    return masks


# -- character encoder ----------------------------------------------------------------

def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.zeros((n, dim))
    table[:, :half] = np.sin(pos * freq)
    table[:, half:2 * half] = np.cos(pos * freq)
    return table


def init_encoder(vocab_size: int, dim: int, max_chars: int, seed: int,
                 prefix: str = "encoder.") -> dict[str, Tensor]:
    rng = make_rng(seed, "encoder")
    s = 1.0 / math.sqrt(dim)
    p = {
        "table": rng.standard_normal((vocab_size, dim)),
        "wq": rng.standard_normal((dim, dim)) * s,
        "wk": rng.standard_normal((dim, dim)) * s,
        "wv": rng.standard_normal((dim, dim)) * s,
        "wo": rng.standard_normal((dim, dim)) * s,
    }
    params = {prefix + k: parameter(v, name=prefix + k) for k, v in p.items()}
    params[prefix + "pos"] = Tensor(sinusoidal_table(max_chars, dim), name=prefix + "pos")
    return params


def encode_chars(ids, params: dict[str, Tensor], valid=None, prefix: str = "encoder.") -> Tensor:
    """Embed class ids with one residual single-head self-attention block.

    ``ids`` is (n,) or (B, n); ``valid`` masks padded slots out of the
    attention keys.  Returns (n, C) or (B, n, C).
    """
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        valid = None if valid is None else np.asarray(valid)[None]
    table = params[prefix + "table"]
    pos = params[prefix + "pos"]
    vocab, dim = table.shape
    b, n = ids.shape
    if n > pos.shape[0]:
        raise ValueError(f"{n} characters exceed max_chars={pos.shape[0]}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"character id out of range [0, {vocab})")
    if valid is None:
        valid = np.ones((b, n), dtype=bool)
    x = F.take_rows(table, ids) + F.reshape(F.take_rows(pos, np.arange(n)), (1, n, dim))
    q = x @ F.transpose(params[prefix + "wq"], (1, 0))
    k = x @ F.transpose(params[prefix + "wk"], (1, 0))
    v = x @ F.transpose(params[prefix + "wv"], (1, 0))
    logits = F.mul(q @ F.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(dim))
    att = F.softmax(logits, axis=-1, mask=np.asarray(valid, bool)[:, None, :])
    out = x + (att @ v) @ F.transpose(params[prefix + "wo"], (1, 0))
    return F.reshape(out, (n, dim)) if single else out


# -- assembly ----------------------------------------------------------------------

def detect(image: np.ndarray, recognizer: TemplateRecognizer, segment_mode: str = "projection",
           boxes=None) -> list[CharDetection]:
    """Frozen part of prior extraction: boxes plus recognized classes."""
    found = segment_chars(image, segment_mode, boxes, recognizer.pitch)
    return [d for d in recognizer.read(image, found) if d.class_id != UNKNOWN]


def build_priors(lq_image: np.ndarray, mode: str, params: dict[str, Tensor],
                 recognizer: TemplateRecognizer, feat_shape: tuple[int, int],
                 segment_mode: str = "projection", boxes=None) -> Priors:
    """Character ('char'), string-level ('string') or empty ('none') priors."""
    if mode not in ("none", "char", "string"):
        raise ValueError(f"unknown prior mode {mode!r}")
    if mode == "none":
        return Priors("none")
    dets = detect(lq_image, recognizer, segment_mode, boxes)
    if not dets:
        warnings.warn("no characters detected; restoring without text prior", PriorWarning, stacklevel=2)
        return Priors("none", warning="no characters detected")
    emb = encode_chars([d.class_id for d in dets], params)
    if mode == "string":
        return Priors("string", string=StringPrior(emb.data.mean(axis=0)), detections=dets)
    masks = boxes_to_masks([d.box for d in dets], np.asarray(lq_image).shape[:2], feat_shape)
    chars = [CharPrior(emb.data[i].copy(), m) for i, m in enumerate(masks)]
    return Priors("char", chars=chars, detections=dets)

"""Synthetic license-plate rendering and dataset manifests.

Plates are dark glyphs from the built-in bitmap font on a flat light
background.  Because rendering is exact, the per-character boxes double as
ground truth for segmentation.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .font import DEFAULT_VOCAB, GLYPH_COLS, GLYPH_ROWS, scaled_glyph
from .imaging import write_pnm
from .numerics import derive_seed, make_rng

Box = tuple[int, int, int, int]  # half-open [x0, x1) x [y0, y1), stored as (x0, y0, x1, y1)


@dataclass
class PlateConfig:
    width: int = 64
    height: int = 32
    channels: int = 1
    vocab: str = DEFAULT_VOCAB
    min_chars: int = 4
    max_chars: int = 5
    glyph_scale: tuple[int, int] = (2, 2)  # (rows, cols) repetition of the 7x5 font
    gap: int = 2
    padding: int = 0
    jitter: int = 2
    background: tuple[int, int] = (190, 235)
    foreground: tuple[int, int] = (15, 60)
    min_contrast: int = 120
    split: tuple[int, int, int] = (7, 2, 1)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("plates.width and plates.height must be positive")
        if self.channels not in (1, 3):
            raise ValueError(f"plates.channels must be 1 or 3, got {self.channels}")
        if len(set(self.vocab)) != len(self.vocab) or not self.vocab:
            raise ValueError("plates.vocab must be a non-empty string of distinct characters")
        unknown = [c for c in self.vocab if c not in DEFAULT_VOCAB]
        if unknown:
            raise ValueError(f"plates.vocab has characters without a glyph: {''.join(unknown)!r}")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("plates.min_chars/max_chars must satisfy 1 <= min <= max")
        for key in ("background", "foreground"):
            lo, hi = getattr(self, key)
            if not 0 <= lo <= hi <= 255:
                raise ValueError(f"plates.{key} must be a range within [0, 255]")
        if self.background[0] - self.foreground[1] < self.min_contrast:
            raise ValueError("plates.background/foreground ranges violate plates.min_contrast")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) == 0:
            raise ValueError("plates.split must be three non-negative weights")
        if self.gap < 1:
            raise ValueError("plates.gap must be at least 1 pixel")
        if min(self.glyph_scale) < 1:
            raise ValueError("plates.glyph_scale entries must be >= 1")
        self.check_fits(self.max_chars)

    @property
    def cell(self) -> tuple[int, int]:
        """Glyph cell size (H, W) in pixels."""
        return GLYPH_ROWS * self.glyph_scale[0], GLYPH_COLS * self.glyph_scale[1]

    def check_fits(self, n: int) -> None:
        ch, cw = self.cell
        need_w = n * cw + (n - 1) * self.gap + 2 * self.padding
        if need_w > self.width or ch + 2 * self.padding > self.height:
            raise ValueError(
                f"{n} characters of {cw}x{ch} px with gap {self.gap} do not fit a "
                f"{self.width}x{self.height} plate")


@dataclass
class PlateSample:
    id: str
    label: str
    hq_image: np.ndarray
    boxes: list[Box]
    seed: int


def render_plate(label: str, config: PlateConfig, seed: int, sample_id: str = "") -> PlateSample:
    """Render ``label`` deterministically for ``(label, config, seed)``."""
    for c in label:
        if c not in config.vocab:
            raise ValueError(f"character {c!r} is not in the vocabulary {config.vocab!r}")
    n = len(label)
    if n < 1:
        raise ValueError("label must contain at least one character")
    if n > config.max_chars:
        raise ValueError(f"label {label!r} is longer than max_chars={config.max_chars}")
    config.check_fits(n)

    rng = make_rng(seed, "render")
    bg = int(rng.integers(config.background[0], config.background[1] + 1))
    fg = int(rng.integers(config.foreground[0], config.foreground[1] + 1))
    ch, cw = config.cell
    total_w = n * cw + (n - 1) * config.gap
    slack_x = config.width - total_w - 2 * config.padding
    slack_y = config.height - ch - 2 * config.padding
    x_start = slack_x // 2 + int(rng.integers(-config.jitter, config.jitter + 1))
    y_start = slack_y // 2 + int(rng.integers(-config.jitter, config.jitter + 1))
    x_start = int(np.clip(x_start, 0, slack_x)) + config.padding
    y_start = int(np.clip(y_start, 0, slack_y)) + config.padding

    img = np.full((config.height, config.width), bg, dtype=np.uint8)
    boxes: list[Box] = []
    p = config.padding
    for i, c in enumerate(label):
        glyph = scaled_glyph(c, config.glyph_scale)
        x0 = x_start + i * (cw + config.gap)
        img[y_start:y_start + ch, x0:x0 + cw][glyph] = fg
        ys, xs = np.nonzero(glyph)
        boxes.append((x0 + int(xs.min()) - p, y_start + int(ys.min()) - p,
                      x0 + int(xs.max()) + 1 + p, y_start + int(ys.max()) + 1 + p))
    if config.channels == 3:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return PlateSample(id=sample_id, label=label, hq_image=img, boxes=boxes, seed=seed)


# -- manifests ---------------------------------------------------------------------

@dataclass
class PlateRecord:
    id: str
    hq_path: str | None
    lq_path: str | None
    label: str
    boxes: list[list[int]]
    seed: int


@dataclass
class Manifest:
    records: list[PlateRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                expected = {"id", "hq_path", "lq_path", "label", "boxes", "seed"}
                if set(obj) != expected:
                    raise ValueError(f"{path}:{line_no}: record fields {sorted(obj)} != {sorted(expected)}")
                obj["boxes"] = [list(map(int, b)) for b in obj["boxes"]]
                records.append(PlateRecord(**obj))
        return cls(records, path.parent)


SPLITS = ("train", "val", "test")


def split_sizes(count: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    total = sum(ratio)
    n_train = (count * ratio[0]) // total
    n_val = (count * ratio[1]) // total
    return n_train, n_val, count - n_train - n_val


def assign_splits(ids: list[str], ratio: tuple[int, int, int]) -> dict[str, str]:
    """Deterministic split assignment: rank ids by hash, cut by ratio."""
    ranked = sorted(ids, key=lambda i: hashlib.sha1(i.encode("utf-8")).hexdigest())
    n_train, n_val, _ = split_sizes(len(ids), ratio)
    out = {}
    for k, i in enumerate(ranked):
        out[i] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return out


def random_label(config: PlateConfig, rng: np.random.Generator) -> str:
    n = int(rng.integers(config.min_chars, config.max_chars + 1))
    return "".join(config.vocab[int(k)] for k in rng.integers(0, len(config.vocab), size=n))


def generate_dataset(config: PlateConfig, count: int, out_dir: str | os.PathLike,
                     seed: int) -> dict[str, Manifest]:
    """Render ``count`` plates into ``out_dir`` and write one manifest per split.

    Writes ``hq/<id>.pgm`` (or ``.ppm``) plus ``train.jsonl``, ``val.jsonl``
    and ``test.jsonl``.  Anything written is removed again if a step fails.
    """
    config.validate()
    out = Path(out_dir)
    created_root = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    hq_dir = out / "hq"
    created_hq = not hq_dir.exists()
    hq_dir.mkdir(exist_ok=True)
    written: list[Path] = []
    ext = "pgm" if config.channels == 1 else "ppm"
    try:
        ids = [f"{i:06d}" for i in range(count)]
        split_of = assign_splits(ids, config.split)
        manifests = {s: Manifest(root=out) for s in SPLITS}
        for i, sid in enumerate(ids):
            s_seed = derive_seed(seed, "sample", i)
            label = random_label(config, make_rng(s_seed, "label"))
            sample = render_plate(label, config, s_seed, sid)
            rel = f"hq/{sid}.{ext}"
            write_pnm(out / rel, sample.hq_image)
            written.append(out / rel)
            manifests[split_of[sid]].records.append(
                PlateRecord(sid, rel, None, label, [list(b) for b in sample.boxes], s_seed))
        for s, m in manifests.items():
            m.write(out / f"{s}.jsonl")
            written.append(out / f"{s}.jsonl")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_hq:
            shutil.rmtree(hq_dir, ignore_errors=True)
        if created_root:
            shutil.rmtree(out, ignore_errors=True)
        raise
    return manifests


def load_split(data_dir: str | os.PathLike, split: str) -> Manifest:
    return Manifest.read(Path(data_dir) / f"{split}.jsonl")

"""End-to-end stages: dataset, degradation, training, restoration, ablation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .charprior import CharDetection, TemplateRecognizer, detect
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .degrade import degrade
from .denoiser import DenoiserConfig, DenoiserModel, PriorBatch
from .diffusion import make_schedule, restore, training_loss
from .imaging import from_model, read_pnm, resize, to_model, write_pnm
from .metrics import evaluate_run
from .numerics import AdamW, derive_seed, make_rng
from .plates import SPLITS, Manifest, generate_dataset, load_split

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.chdf"
TRACE_NAME = "trace.jsonl"
ABLATION_VARIANTS = ("none", "string", "char_global", "charm")
VARIANT_TITLES = {
    "none": "DDPM (no text prior)",
    "string": "DDPM + String-level prior",
    "char_global": "DDPM + Character-level prior",
    "charm": "CharDiff (CHARM)",
}


# -- data --------------------------------------------------------------------------

def make_recognizer(cfg: RunConfig) -> TemplateRecognizer:
    return TemplateRecognizer(cfg.plates.vocab, cfg.plates.glyph_scale, cfg.plates.gap)


def frozen_state_digest(recognizer: TemplateRecognizer) -> str:
    """Hash of everything the frozen segmenter/recognizer depends on."""
    from . import charprior
    seg = json.dumps(charprior.projection_segment.__defaults__).encode()
    return hashlib.sha256(seg + recognizer.state_bytes()).hexdigest()


def gen_dataset(cfg: RunConfig, data_dir: str | os.PathLike) -> dict[str, Manifest]:
    return generate_dataset(cfg.plates, cfg.data.count, data_dir, cfg.data.seed)


def degrade_dataset(cfg: RunConfig, data_dir: str | os.PathLike) -> dict[str, Manifest]:
    """Write ``lq/<id>`` for every record and add ``lq_path`` to the manifests."""
    data_dir = Path(data_dir)
    (data_dir / "lq").mkdir(exist_ok=True)
    out = {}
    for split in SPLITS:
        m = load_split(data_dir, split)
        for rec in m:
            hq = read_pnm(m.resolve(rec.hq_path))
            lq = degrade(hq, cfg.degrade, derive_seed(rec.seed, "degrade"))
            rel = "lq/" + Path(rec.hq_path).name
            write_pnm(data_dir / rel, lq)
            rec.lq_path = rel
        m.write(data_dir / f"{split}.jsonl")
        out[split] = m
    return out


@dataclass
class PairSet:
    ids: list[str]
    labels: list[str]
    x0: np.ndarray | None       # (N, ch, H, W) in [-1, 1]; None without HQ
    x_lq: np.ndarray            # (N, ch, H, W) in [-1, 1]
    detections: list[list[CharDetection]]

    def __len__(self) -> int:
        return len(self.ids)


def _chw(img: np.ndarray) -> np.ndarray:
    return img[None] if img.ndim == 2 else img.transpose(2, 0, 1)


def load_pairs(manifest: Manifest, recognizer: TemplateRecognizer, segment_mode: str = "oracle",
               dtype=np.float32) -> PairSet:
    """Load LQ (and HQ when present) images and run the frozen detector on LQ."""
    ids, labels, x0, xlq, dets = [], [], [], [], []
    for rec in manifest:
        if rec.lq_path is None:
            raise FileNotFoundError(f"record {rec.id} has no lq_path; run the degrade stage first")
        lq = read_pnm(manifest.resolve(rec.lq_path))
        ids.append(rec.id)
        labels.append(rec.label)
        xlq.append(_chw(to_model(lq)))
        if rec.hq_path is not None:
            x0.append(_chw(to_model(read_pnm(manifest.resolve(rec.hq_path)))))
        boxes = rec.boxes if segment_mode == "oracle" else None
        dets.append(detect(lq, recognizer, segment_mode, boxes))
    have_hq = len(x0) == len(ids) and ids
    return PairSet(ids, labels, np.stack(x0).astype(dtype) if have_hq else None,
                   np.stack(xlq).astype(dtype) if ids else np.zeros((0, 1, 1, 1), dtype), dets)


def prior_batch(model: DenoiserModel, pairs: PairSet, index) -> PriorBatch | None:
    if model.config.prior_mode == "none":
        return None
    image_shape = pairs.x_lq.shape[2:]
    dets = [pairs.detections[i] for i in np.atleast_1d(index)]
    return PriorBatch.from_detections(dets, image_shape, model.config.feat_shape(image_shape),
                                      model.config.max_chars)


# -- model persistence -------------------------------------------------------------------

def build_model(cfg: RunConfig) -> DenoiserModel:
    mcfg = dataclasses.replace(cfg.model, seed=cfg.train.seed)
    return DenoiserModel(mcfg, num_steps=cfg.schedule.num_steps)


def save_model(path, model: DenoiserModel, cfg: RunConfig) -> None:
    save_checkpoint(path, model.params, cfg.to_dict())


def load_model(path) -> tuple[DenoiserModel, RunConfig]:
    params, cfg_dict = load_checkpoint(path)
    cfg = RunConfig.from_dict(cfg_dict)
    model = build_model(cfg)
    if set(params) != set(model.params):
        missing = sorted(set(model.params) ^ set(params))
        raise ValueError(f"checkpoint parameters do not match the configured model: {missing[:5]}")
    for k, p in params.items():
        if p.shape != model.params[k].shape:
            raise ValueError(f"checkpoint tensor {k} has shape {p.shape}, expected {model.params[k].shape}")
    model.params = params
    return model, cfg


# -- training --------------------------------------------------------------------------

def train(cfg: RunConfig, data_dir: str | os.PathLike, run_dir: str | os.PathLike,
          pairs: PairSet | None = None) -> DenoiserModel:
    """Train from scratch; writes the checkpoint and a (step, loss) trace."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    recognizer = make_recognizer(cfg)
    if pairs is None:
        pairs = load_pairs(load_split(data_dir, "train"), recognizer, cfg.train.segment_mode)
    if len(pairs) == 0 or pairs.x0 is None:
        raise FileNotFoundError("training needs HQ/LQ pairs in the train split")
    schedule = make_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end, cfg.schedule.sample_steps)
    model = build_model(cfg)
    opt = AdamW(model.trainable(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    rng = make_rng(cfg.train.seed, "train")
    ckpt = run_dir / CHECKPOINT_NAME
    trace_path = run_dir / TRACE_NAME
    n = len(pairs)
    batch = min(cfg.train.batch, n)
    t0 = time.time()
    with open(trace_path, "w", encoding="utf-8") as trace:
        for step in range(1, cfg.train.steps + 1):
            idx = np.sort(rng.choice(n, size=batch, replace=False))
            loss = training_loss(pairs.x0[idx], pairs.x_lq[idx], prior_batch(model, pairs, idx),
                                 model, schedule, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.write(json.dumps({"step": step, "loss": value}) + "\n")
            if cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0:
                save_model(ckpt, model, cfg)
            if step % 200 == 0:
                log.info("step %d loss %.4f (%.1fs)", step, value, time.time() - t0)
    save_model(ckpt, model, cfg)
    return model


def read_trace(path) -> list[tuple[int, float]]:
    with open(path, encoding="utf-8") as fh:
        return [(r["step"], r["loss"]) for r in map(json.loads, fh)]


# -- restoration -----------------------------------------------------------------------

def _attention_heatmap(att_row: np.ndarray, feat_shape, image_shape) -> np.ndarray:
    grid = att_row.reshape(feat_shape)
    top = grid.max()
    grid = grid / top if top > 0 else grid
    return np.clip(np.rint(resize(grid, image_shape) * 255), 0, 255).astype(np.uint8)


def restore_pairs(model: DenoiserModel, cfg: RunConfig, pairs: PairSet, mode: str | None = None,
                  seed: int = 0, batch: int = 50, attention_out: list | None = None) -> np.ndarray:
    """Restore every LQ image in ``pairs``; returns uint8 images (N, H, W[, 3]).

    ``attention_out`` collects, per image, the middle-block attention maps of
    the final sampler step as (n, H_f*W_f) arrays.
    """
    mode = mode or cfg.schedule.sampler
    schedule = make_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end, cfg.schedule.sample_steps)
    outs = []
    for start in range(0, len(pairs), batch):
        idx = np.arange(start, min(start + batch, len(pairs)))
        priors = prior_batch(model, pairs, idx)
        captured: list = []
        last_t = int(schedule.taus[0])

        def predict(x_t, x_lq, t, p, _captured=captured):
            want = attention_out is not None and int(t[0]) == last_t
            return model.predict_noise(x_t, x_lq, t, p, attention=_captured if want else None)

        x0 = restore(pairs.x_lq[idx], priors, predict, schedule, mode,
                     seed=derive_seed(seed, "batch", start))
        outs.append(x0)
        if attention_out is not None:
            att = captured[0] if captured else np.zeros((len(idx), 0, 1))
            for j, i in enumerate(idx):
                k = len(pairs.detections[i]) if priors is not None else 0
                attention_out.append(att[j, :min(k, att.shape[1])])
    x = np.concatenate(outs) if outs else np.zeros((0,) + pairs.x_lq.shape[1:])
    imgs = from_model(x)
    return imgs[:, 0] if imgs.shape[1] == 1 else imgs.transpose(0, 2, 3, 1)


def restore_manifest(model: DenoiserModel, cfg: RunConfig, manifest: Manifest, out_dir,
                     mode: str | None = None, seed: int = 0, dump_attn: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs(manifest, make_recognizer(cfg), cfg.train.segment_mode)
    attention = [] if dump_attn else None
    imgs = restore_pairs(model, cfg, pairs, mode, seed, attention_out=attention)
    ext = "pgm" if imgs.ndim == 3 else "ppm"
    paths = []
    feat_shape = model.config.feat_shape(pairs.x_lq.shape[2:])
    for i, sid in enumerate(pairs.ids):
        p = out_dir / f"{sid}.{ext}"
        write_pnm(p, imgs[i])
        paths.append(p)
        if dump_attn:
            for j, row in enumerate(attention[i]):
                write_pnm(out_dir / f"{sid}.attn{j}.pgm",
                          _attention_heatmap(row, feat_shape, pairs.x_lq.shape[2:]))
    return paths


def restore_image(model: DenoiserModel, cfg: RunConfig, image: np.ndarray, mode: str | None = None,
                  seed: int = 0, boxes=None) -> np.ndarray:
    """Restore a single LQ image (uint8).  Without boxes, projection segmentation is used."""
    recognizer = make_recognizer(cfg)
    seg = "oracle" if boxes is not None else "projection"
    dets = detect(image, recognizer, seg, boxes)
    pairs = PairSet(["image"], [""], None, _chw(to_model(image))[None].astype(np.float32), [dets])
    return restore_pairs(model, cfg, pairs, mode, seed)[0]


# -- ablation ---------------------------------------------------------------------------

def _ablation_job(args):
    cfg_dict, variant, seed, data_dir, run_root, test_count, resume = args
    cfg = RunConfig.from_dict(cfg_dict).replace(prior_mode=variant, train__seed=seed)
    run_dir = Path(run_root) / f"{variant}_seed{seed}"
    done = run_dir / "result.json"
    key = {"config": cfg.to_dict(), "test_count": test_count}
    if resume and done.exists():
        saved = json.loads(done.read_text(encoding="utf-8"))
        if saved.get("key") == key:
            log.info("reusing finished run %s", run_dir)
            return saved["row"]
    try:
        model = train(cfg, data_dir, run_dir)
        test = load_split(data_dir, "test")
        test.records = test.records[:test_count] if test_count else test.records
        restore_manifest(model, cfg, test, run_dir / "restored", seed=seed)
        report = evaluate_run(test, run_dir / "restored", make_recognizer(cfg))
        report.write(run_dir / "report.jsonl")
        row = {"variant": variant, "seed": seed, "status": "ok", **report.aggregate()}
        done.write_text(json.dumps({"key": key, "row": row}), encoding="utf-8")
        return row
    except Exception as exc:  # a failed variant is reported, the others continue
        log.exception("ablation variant %s seed %d failed", variant, seed)
        return {"variant": variant, "seed": seed, "status": "failed", "error": str(exc)}


def ablate(cfg: RunConfig, seeds, data_dir, run_root, test_count: int | None = None,
           workers: int = 1, variants=ABLATION_VARIANTS, resume: bool = False) -> list[dict]:
    """Train and evaluate every variant for every seed on one dataset.

    With ``resume`` a variant whose run directory holds a finished result for
    the identical config is read back instead of retrained.
    """
    jobs = [(cfg.to_dict(), v, int(s), str(data_dir), str(run_root), test_count, resume)
            for s in seeds for v in variants]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    return rows


def ablation_table(rows: list[dict], variants=ABLATION_VARIANTS) -> tuple[list[dict], str]:
    """Per-seed rows plus seed-averaged rows, ordered by variant; and a text table."""
    metrics = ("mean_cer", "lpr_accuracy", "mean_psnr", "mean_ssim")
    out = []
    for v in variants:
        mine = [r for r in rows if r["variant"] == v]
        out.extend(sorted(mine, key=lambda r: r["seed"]))
        ok = [r for r in mine if r["status"] == "ok"]
        if ok:
            avg = {"variant": v, "seed": "mean", "status": "ok"}
            for m in metrics:
                vals = [r[m] for r in ok if m in r]
                if vals:
                    avg[m] = float(np.mean(vals))
            out.append(avg)
    header = f"{'variant':<32} {'seed':>5} {'CER':>7} {'LPR acc':>8} {'PSNR':>7} {'SSIM':>7}"
    lines = [header, "-" * len(header)]
    for r in out:
        name = VARIANT_TITLES.get(r["variant"], r["variant"])
        if r["status"] != "ok":
            lines.append(f"{name:<32} {r['seed']!s:>5} FAILED: {r.get('error', '')}")
            continue
        lines.append(f"{name:<32} {r['seed']!s:>5} {r.get('mean_cer', float('nan')):7.4f} "
                     f"{r.get('lpr_accuracy', float('nan')):8.3f} {r.get('mean_psnr', float('nan')):7.2f} "
                     f"{r.get('mean_ssim', float('nan')):7.4f}")
    return out, "\n".join(lines)

"""Command-line entry point: ``python -m chardiff <command>``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt files), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import CONFIG_ENV, ConfigError, RunConfig, load_config
from .imaging import read_pnm, write_pnm
from .metrics import evaluate_run
from .plates import Manifest, load_split

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "prior_mode", None):
        overrides["prior_mode"] = args.prior_mode
    if getattr(args, "steps", None) is not None:
        overrides["train__steps"] = args.steps
    if getattr(args, "train_seed", None) is not None:
        overrides["train__seed"] = args.train_seed
    if getattr(args, "count", None) is not None:
        overrides["data__count"] = args.count
    return cfg.replace(**overrides) if overrides else cfg


def _data_dir(args, cfg) -> Path:
    return Path(args.data or cfg.paths.data_dir)


def cmd_gen_dataset(args) -> int:
    cfg = _config(args)
    out = pipeline.gen_dataset(cfg, _data_dir(args, cfg))
    print(" ".join(f"{k}={len(v)}" for k, v in out.items()))
    return EXIT_OK


def cmd_degrade(args) -> int:
    cfg = _config(args)
    out = pipeline.degrade_dataset(cfg, _data_dir(args, cfg))
    print(f"degraded {sum(len(m) for m in out.values())} images")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run or cfg.paths.run_dir)
    recognizer = pipeline.make_recognizer(cfg)
    before = pipeline.frozen_state_digest(recognizer)
    pipeline.train(cfg, _data_dir(args, cfg), run_dir)
    after = pipeline.frozen_state_digest(recognizer)
    if before != after:
        raise RuntimeError("frozen recognizer state changed during training")
    print(f"checkpoint: {run_dir / pipeline.CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_restore(args) -> int:
    model, cfg = pipeline.load_model(args.checkpoint)
    if args.prior_mode and args.prior_mode != cfg.prior_mode:
        raise ConfigError(f"checkpoint was trained with prior_mode={cfg.prior_mode}, not {args.prior_mode}")
    out = Path(args.out)
    src = Path(args.input)
    if src.suffix == ".jsonl":
        paths = pipeline.restore_manifest(model, cfg, Manifest.read(src), out, args.mode, args.seed,
                                          args.dump_attn)
        print(f"restored {len(paths)} images into {out}")
    else:
        img = read_pnm(src)
        restored = pipeline.restore_image(model, cfg, img, args.mode, args.seed)
        target = out if out.suffix in (".pgm", ".ppm") else out / src.name
        target.parent.mkdir(parents=True, exist_ok=True)
        write_pnm(target, restored)
        print(f"restored {target}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = Manifest.read(args.manifest)
    cfg = load_config(args.config)
    report = evaluate_run(manifest, args.restored, pipeline.make_recognizer(cfg))
    report_path = Path(args.report or Path(args.restored) / "report.jsonl")
    report.write(report_path)
    print(report.table())
    return EXIT_OK if report.samples else EXIT_DATA


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data_dir = _data_dir(args, cfg)
    if not (data_dir / "train.jsonl").exists():
        pipeline.gen_dataset(cfg, data_dir)
        pipeline.degrade_dataset(cfg, data_dir)
    seeds = [int(s) for s in args.seeds.split(",")]
    run_root = Path(args.run or cfg.paths.run_dir)
    rows = pipeline.ablate(cfg, seeds, data_dir, run_root, args.test_count, args.workers,
                          resume=args.resume)
    rows, table = pipeline.ablation_table(rows)
    run_root.mkdir(parents=True, exist_ok=True)
    with open(run_root / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chardiff", description=__doc__.split("\n")[0])
    p.add_argument("--config", help=f"config file or profile name (env {CONFIG_ENV}; default desk)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-dataset", help="render HQ plates and write manifests")
    s.add_argument("--data")
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("degrade", help="synthesize LQ images for every record")
    s.add_argument("--data")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", dest="train_seed", type=int)
    s.add_argument("--prior-mode", choices=("none", "string", "char_global", "charm"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("restore", help="restore a manifest (.jsonl) or a single PGM/PPM")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("ancestral", "deterministic"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dump-attn", action="store_true")
    s.add_argument("--prior-mode", choices=("none", "string", "char_global", "charm"))
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("evaluate", help="score restored images against a manifest")
    s.add_argument("manifest")
    s.add_argument("restored")
    s.add_argument("--report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and compare the four prior variants")
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--steps", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--test-count", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--resume", action="store_true", help="reuse finished variants with an identical config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"chardiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"chardiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        print(f"chardiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

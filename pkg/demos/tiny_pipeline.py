"""
The whole pipeline on a toy budget
==================================

Generate a small dataset, degrade it, train two variants for a few hundred
steps and compare them on the test split.  This mirrors
``chardiff ablate`` but finishes in a few minutes on one core, so the
numbers are only a smoke signal.
"""
import logging
from pathlib import Path

from chardiff import pipeline
from chardiff.config import load_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path("demo_out/tiny")
cfg = load_config("desk").replace(data__count=200, train__steps=300, train__checkpoint_every=0)

pipeline.gen_dataset(cfg, root / "data")
pipeline.degrade_dataset(cfg, root / "data")

rows = pipeline.ablate(cfg, [0], root / "data", root / "runs", test_count=20, variants=("none", "charm"))
print(pipeline.ablation_table(rows, variants=("none", "charm"))[1])

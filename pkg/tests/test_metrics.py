import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chardiff.charprior import TemplateRecognizer
from chardiff.imaging import write_pnm
from chardiff.metrics import PSNR_CAP, cer, evaluate_run, levenshtein, psnr, ssim
from chardiff.numerics import make_rng
from chardiff.plates import Manifest, PlateConfig, generate_dataset, load_split

REC = TemplateRecognizer()


def edit_distance_bfs(a, b, alphabet):
    """Independent oracle: shortest edit sequence by breadth-first search."""
    if a == b:
        return 0
    frontier, seen, depth = {a}, {a}, 0
    limit = len(a) + len(b) + 1
    while frontier:
        depth += 1
        nxt = set()
        for s in frontier:
            cands = {s[:i] + s[i + 1:] for i in range(len(s))}
            cands |= {s[:i] + c + s[i:] for i in range(len(s) + 1) for c in alphabet}
            cands |= {s[:i] + c + s[i + 1:] for i in range(len(s)) for c in alphabet}
            for c in cands:
                if c == b:
                    return depth
                if c not in seen and len(c) <= limit:
                    seen.add(c)
                    nxt.add(c)
        frontier = nxt
    raise AssertionError("unreachable")


def all_strings(alphabet, max_len):
    for n in range(max_len + 1):
        for t in itertools.product(alphabet, repeat=n):
            yield "".join(t)


def test_levenshtein_exhaustive_small():
    strings = list(all_strings("abc", 3))
    for a in strings:
        for b in strings:
            assert levenshtein(a, b) == edit_distance_bfs(a, b, "abc")


def test_cer_examples():
    assert cer("A1B2", "A1B2") == 0.0
    assert cer("T773B8", "I777B6") == pytest.approx(0.5, abs=0)
    assert cer("", "AB") == 1.0
    with pytest.raises(ValueError):
        cer("A", "")


def test_psnr_examples():
    a = np.full((8, 8), 100, np.uint8)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 255.0)) == 0.0
    assert psnr(a, a + 16) == pytest.approx(10 * np.log10(255 ** 2 / 256), abs=1e-12)
    assert psnr(a, a + 16) == pytest.approx(24.05, abs=0.01)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_psnr_strictly_decreasing_in_error():
    a = np.full((8, 8), 50.0)
    vals = [psnr(a, a + d) for d in range(1, 60)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identity_and_constant_images():
    rng = make_rng(0)
    a = rng.integers(0, 256, (20, 24)).astype(float)
    assert ssim(a, a) == 1.0
    c1 = (0.01 * 255) ** 2
    expected = (2 * 100 * 120 + c1) / (100 ** 2 + 120 ** 2 + c1)
    assert ssim(np.full((16, 16), 100.0), np.full((16, 16), 120.0)) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = make_rng(seed)
    a = rng.integers(0, 256, (16, 20)).astype(float)
    b = np.clip(a + rng.normal(0, 40, a.shape), 0, 255)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


def test_ssim_against_direct_window_formula():
    rng = make_rng(1)
    a = rng.integers(0, 256, (13, 12)).astype(float)
    b = rng.integers(0, 256, (13, 12)).astype(float)
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(3):
        for j in range(2):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-9)


@pytest.fixture
def dataset(tmp_path):
    generate_dataset(PlateConfig(), 10, tmp_path / "d", seed=3)
    records = [r for s in ("train", "val", "test") for r in load_split(tmp_path / "d", s)]
    m = Manifest(records, tmp_path / "d")
    m.write(tmp_path / "d" / "all.jsonl")
    return Manifest.read(tmp_path / "d" / "all.jsonl")


def copy_hq(manifest, out, skip=()):
    out.mkdir(exist_ok=True)
    from chardiff.imaging import read_pnm
    for r in manifest:
        if r.id not in skip:
            write_pnm(out / f"{r.id}.pgm", read_pnm(manifest.resolve(r.hq_path)))


def test_evaluate_perfect_restoration(dataset, tmp_path):
    copy_hq(dataset, tmp_path / "out")
    report = evaluate_run(dataset, tmp_path / "out", REC)
    agg = report.aggregate()
    assert agg["mean_cer"] == 0.0 and agg["lpr_accuracy"] == 1.0
    assert agg["mean_psnr"] == PSNR_CAP and agg["mean_ssim"] == 1.0
    assert agg["mean_cer"] == pytest.approx(np.mean([s.cer for s in report.samples]), abs=1e-12)


def test_evaluate_without_hq(dataset, tmp_path):
    copy_hq(dataset, tmp_path / "out")
    for r in dataset:
        r.hq_path = None
    agg = evaluate_run(dataset, tmp_path / "out", REC).aggregate()
    assert "mean_psnr" not in agg and "mean_ssim" not in agg
    assert set(agg) == {"count", "errors", "mean_cer", "lpr_accuracy"}


def test_evaluate_missing_file(dataset, tmp_path):
    missing = dataset.records[4].id
    copy_hq(dataset, tmp_path / "out", skip={missing})
    report = evaluate_run(dataset, tmp_path / "out", REC)
    assert len(report.samples) == 9 and len(report.errors) == 1
    assert report.errors[0]["id"] == missing
    report.write(tmp_path / "r.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(lines) == 11 and "aggregate" in lines[-1]
    assert missing in report.table()


def test_aggregates_are_arithmetic_means(dataset, tmp_path):
    out = tmp_path / "noisy"
    out.mkdir()
    from chardiff.imaging import read_pnm
    rng = make_rng(4)
    for r in dataset:
        img = read_pnm(dataset.resolve(r.hq_path)).astype(float)
        write_pnm(out / f"{r.id}.pgm", np.clip(img + rng.normal(0, 30, img.shape), 0, 255).astype(np.uint8))
    report = evaluate_run(dataset, out, REC)
    agg = report.aggregate()
    for key, field in [("mean_cer", "cer"), ("mean_psnr", "psnr"), ("mean_ssim", "ssim")]:
        assert agg[key] == pytest.approx(np.mean([getattr(s, field) for s in report.samples]), abs=1e-12)
    assert agg["lpr_accuracy"] == sum(s.exact_match for s in report.samples) / len(report.samples)

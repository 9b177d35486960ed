import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chardiff.charm import charm_forward
from chardiff.charprior import CharDetection, encode_chars
from chardiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from chardiff.denoiser import DenoiserConfig, DenoiserModel, PriorBatch, timestep_embedding
from chardiff.numerics import Tensor, check_gradients, make_rng, precision
from chardiff.numerics import functional as F

SMALL = dict(base_width=4, multipliers=(1, 2, 4), groups=2, vocab_size=36, max_chars=6)


def model(mode="charm", seed=0, dtype=np.float32, **kw):
    with precision(dtype):
        return DenoiserModel(DenoiserConfig(prior_mode=mode, seed=seed, **{**SMALL, **kw}), num_steps=50)


def batch(rng, b=2, h=8, w=16, ch=1):
    return rng.uniform(-1, 1, (b, ch, h, w)), rng.uniform(-1, 1, (b, ch, h, w))


def priors_for(b, h, w, n=2):
    dets = [[CharDetection((2 + 5 * i, 1, 5 + 5 * i, h - 1), (3 * i + k) % 36, 1.0) for i in range(n)]
            for k in range(b)]
    return PriorBatch.from_detections(dets, (h, w), (h // 4, w // 4), 6)


def test_timestep_embedding_examples():
    e0 = timestep_embedding(0, 8)[0]
    np.testing.assert_array_equal(e0, [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.array_equal(timestep_embedding(7, 8), timestep_embedding(7, 8))
    e1, e2 = timestep_embedding([1, 2], 8)
    assert np.any(e1 != e2)
    with pytest.raises(ValueError):
        timestep_embedding(50, 8, num_steps=50)


@pytest.mark.parametrize("shape", [(32, 64), (48, 96)])
def test_output_shape(shape):
    rng = make_rng(0)
    m = model()
    x_t, x_lq = batch(rng, 2, *shape)
    out = m(x_t, x_lq, [3, 9], priors_for(2, *shape))
    assert out.shape == (2, 1) + shape
    assert m.params["in.w"].shape[1] == 2


def test_mid_grid_is_quarter_resolution():
    assert DenoiserConfig(**SMALL).feat_shape((32, 64)) == (8, 16)
    assert DenoiserConfig(**SMALL).mid_channels == 16


def test_none_equals_charm_without_characters():
    rng = make_rng(1)
    x_t, x_lq = batch(rng)
    a, b = model("none"), model("charm")
    for m in (a, b):  # break the zero-initialized output layer so outputs are informative
        m.params["out.w"].data[:] = make_rng(9).standard_normal(m.params["out.w"].shape) * 0.1
    out_none = a(x_t, x_lq, [1, 2], None).data
    out_charm = b(x_t, x_lq, [1, 2], PriorBatch.empty(2, (2, 4))).data
    assert out_none.tobytes() == out_charm.tobytes()


def test_prior_mode_mismatch_errors():
    rng = make_rng(2)
    x_t, x_lq = batch(rng)
    with pytest.raises(ValueError, match="no priors"):
        model("charm")(x_t, x_lq, [0, 0], None)
    with pytest.raises(ValueError, match="none"):
        model("none")(x_t, x_lq, [0, 0], priors_for(2, 8, 16))
    with pytest.raises(ValueError, match="same shape"):
        model("none")(x_t, x_lq[:, :, :4], [0, 0])


def test_gradient_check_sampled_weights_32bit():
    rng = make_rng(3)
    m = model("charm", dtype=np.float32)
    m.params["out.w"].data[:] = rng.standard_normal(m.params["out.w"].shape).astype(np.float32) * 0.2
    x_t, x_lq = (a.astype(np.float32) for a in batch(rng))
    target = rng.standard_normal(x_t.shape).astype(np.float32)
    pri = priors_for(2, 8, 16)
    params = m.trainable()
    total = sum(p.size for p in params.values())
    picks = make_rng(4).choice(total, size=max(1, total // 100), replace=False)
    offsets = np.cumsum([0] + [p.size for p in params.values()])
    sample = {}
    for name, lo, hi in zip(params, offsets[:-1], offsets[1:]):
        k = int(((picks >= lo) & (picks < hi)).sum())
        if k:
            sample[name] = k
    fn = lambda: F.mse(m(x_t, x_lq, [5, 20], pri), target)  # noqa: E731
    for p in params.values():
        p.grad = None
    fn().backward()
    num, ana = [], []
    srng = make_rng(5)
    for name, k in sample.items():
        p = params[name]
        g = p.grad.copy()
        for flat in srng.choice(p.size, size=k, replace=False):
            idx = np.unravel_index(flat, p.shape)
            old = p.data[idx].copy()
            h = 1e-2 * max(1.0, abs(float(old)))
            p.data[idx] = old + h
            fp = float(fn().data)
            p.data[idx] = old - h
            fm = float(fn().data)
            p.data[idx] = old
            num.append((fp - fm) / (2 * h))
            ana.append(float(g[idx]))
    num, ana = np.array(num), np.array(ana)
    err = np.abs(num - ana).max() / max(np.abs(num).max(), np.abs(ana).max())
    assert err < 1e-3, err
    assert len(num) >= total // 100


def test_gradient_check_64bit_two_level_net():
    rng = make_rng(6)
    m = model("charm", dtype=np.float64, multipliers=(1, 2))
    m.params["out.w"].data[:] = rng.standard_normal(m.params["out.w"].shape) * 0.2
    x_t, x_lq = batch(rng, 1, 8, 16)
    pri = PriorBatch.from_detections([[CharDetection((0, 0, 6, 8), 4, 1.0), CharDetection((8, 0, 14, 8), 9, 1.0)]],
                                     (8, 16), (4, 8), 6)
    target = rng.standard_normal(x_t.shape)
    errs = check_gradients(lambda: F.mse(m(x_t, x_lq, [7], pri), target), m.trainable(), sample=4, rng=rng)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_locality_at_charm_output():
    rng = make_rng(7)
    m = model("charm", dtype=np.float64)
    pri = priors_for(1, 8, 16, n=2)
    emb = encode_chars(pri.ids, m.params, valid=pri.valid).data
    feat = Tensor(rng.standard_normal((1, 16, 2, 4)), dtype=np.float64)
    base = charm_forward(feat, emb, pri.masks, m.params).data
    bumped = emb.copy()
    bumped[0, 0] += rng.standard_normal(16)
    moved = charm_forward(feat, bumped, pri.masks, m.params).data
    changed = np.any(base != moved, axis=1)[0]
    assert changed.any()
    assert not (changed & ~pri.masks[0, 0]).any()


def test_mid_features_reflect_injection():
    rng = make_rng(8)
    m = model("charm", dtype=np.float64)
    x_t, x_lq = batch(rng, 1)
    with_chars = m.mid_features(x_t, x_lq, [4], priors_for(1, 8, 16)).data
    without = m.mid_features(x_t, x_lq, [4], PriorBatch.empty(1, (2, 4))).data
    diff = np.any(with_chars != without, axis=1)[0]
    assert not (diff & ~priors_for(1, 8, 16).masks[0].any(axis=0)).any()


def test_char_global_equals_charm_with_full_masks():
    rng = make_rng(9)
    x_t, x_lq = batch(rng)
    pri = priors_for(2, 8, 16)
    full = PriorBatch(pri.ids, pri.valid, np.ones_like(pri.masks))
    a, b = model("char_global"), model("charm")
    assert np.array_equal(a(x_t, x_lq, [3, 4], pri).data, b(x_t, x_lq, [3, 4], full).data)


def test_checkpoint_round_trip(tmp_path):
    rng = make_rng(10)
    m = model("charm")
    for p in m.params.values():
        p.data[...] = rng.standard_normal(p.shape)
    x_t, x_lq = batch(rng)
    pri = priors_for(2, 8, 16)
    before = m(x_t, x_lq, [1, 2], pri).data
    save_checkpoint(tmp_path / "m.chdf", m.params, {"k": 1})
    params, cfg = load_checkpoint(tmp_path / "m.chdf")
    assert cfg == {"k": 1}
    m2 = model("charm")
    m2.params = params
    assert m2(x_t, x_lq, [1, 2], pri).data.tobytes() == before.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([np.float32, np.float64]))
def test_checkpoint_bit_exact_random_tensors(tmp_path_factory, seed, dtype):
    rng = make_rng(seed)
    params = {f"t{i}": Tensor(rng.standard_normal(tuple(rng.integers(1, 5, size=rng.integers(1, 4)))),
                              requires_grad=bool(i % 2), dtype=dtype) for i in range(4)}
    path = tmp_path_factory.mktemp("ck") / "x.chdf"
    save_checkpoint(path, params, {})
    back, _ = load_checkpoint(path)
    for k, t in params.items():
        assert back[k].data.dtype == t.data.dtype
        assert back[k].data.tobytes() == t.data.tobytes()
        assert back[k].requires_grad == t.requires_grad


def test_checkpoint_corruption_detected(tmp_path):
    m = model("none")
    path = tmp_path / "m.chdf"
    save_checkpoint(path, m.params, {})
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)

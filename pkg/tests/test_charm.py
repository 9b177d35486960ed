import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chardiff.charm import CharmWarning, charm_forward, charm_priors, init_charm
from chardiff.charprior import CharPrior, SpatialMask
from chardiff.numerics import Tensor, check_gradients, make_rng, parameter, precision
from chardiff.numerics import functional as F


def params64(c, seed=0):
    with precision(np.float64):
        return init_charm(c, seed)


def reference(feat, emb, masks, wq, wk, wv):
    """Brute-force cross-attention, one position at a time, masked positions skipped."""
    c, h, w = feat.shape
    out = feat.copy()
    for e, m in zip(emb, masks):
        k = wk @ e
        v = wv @ e
        cells = [(y, x) for y in range(h) for x in range(w) if m[y, x]]
        logits = {p: float((wq @ feat[:, p[0], p[1]]) @ k) / math.sqrt(c) for p in cells}
        if not logits:
            continue
        top = max(logits.values())
        z = sum(math.exp(l - top) for l in logits.values())
        for p, l in logits.items():
            out[:, p[0], p[1]] += math.exp(l - top) / z * v
    return out


def instance(rng, c, h, w, n, density=0.5):
    feat = rng.standard_normal((c, h, w))
    emb = rng.standard_normal((n, c))
    masks = rng.random((n, h, w)) < density
    return feat, emb, masks


def run(feat, emb, masks, p, **kw):
    return charm_forward(Tensor(feat, dtype=np.float64), emb, masks, p, **kw)


def test_no_priors_is_identity():
    feat = make_rng(0).standard_normal((4, 3, 3))
    out = run(feat, np.zeros((0, 4)), np.zeros((0, 3, 3), bool), params64(4))
    assert out.data.tobytes() == feat.tobytes()


def test_all_ones_hand_set_params_match_dense_reference():
    feat = np.array([[[1.0, -1.0], [0.5, 2.0]], [[0.0, 1.0], [-2.0, 0.3]]])
    p = params64(2)
    p["charm.wq"].data[:] = [[1.0, 0.5], [-0.5, 1.0]]
    p["charm.wk"].data[:] = [[0.2, 0.0], [1.0, -1.0]]
    p["charm.wv"].data[:] = [[2.0, 1.0], [0.0, -3.0]]
    emb = np.array([[0.7, -0.4]])
    masks = np.ones((1, 2, 2), bool)
    # dense attention written out by hand
    q = np.einsum("ij,jp->ip", p["charm.wq"].data, feat.reshape(2, 4))
    k = p["charm.wk"].data @ emb[0]
    a = np.exp(k @ q / math.sqrt(2))
    a /= a.sum()
    dense = feat + np.outer(p["charm.wv"].data @ emb[0], a).reshape(2, 2, 2)
    np.testing.assert_allclose(run(feat, emb, masks, p).data, dense, atol=1e-12)


def test_single_cell_mask_adds_value_vector():
    rng = make_rng(1)
    feat, emb, _ = instance(rng, 3, 3, 4, 1)
    masks = np.zeros((1, 3, 4), bool)
    masks[0, 0, 0] = True
    p = params64(3)
    out = run(feat, emb, masks, p).data
    delta = out - feat
    np.testing.assert_allclose(delta[:, 0, 0], p["charm.wv"].data @ emb[0], atol=1e-15)
    delta[:, 0, 0] = 0
    assert not delta.any()


def test_disjoint_masks_sum_independent_deltas():
    rng = make_rng(2)
    feat, emb, _ = instance(rng, 4, 4, 4, 2)
    masks = np.zeros((2, 4, 4), bool)
    masks[0, :, :2] = True
    masks[1, :, 2:] = True
    p = params64(4)
    both = run(feat, emb, masks, p).data - feat
    one = run(feat, emb[:1], masks[:1], p).data - feat
    two = run(feat, emb[1:], masks[1:], p).data - feat
    np.testing.assert_allclose(both, one + two, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 4),
       st.integers(0, 2**31 - 1))
def test_matches_reference_and_never_leaks(c, h, w, n, seed):
    rng = make_rng(seed)
    feat, emb, masks = instance(rng, c, h, w, n)
    p = params64(c, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CharmWarning)
        out, att = run(feat, emb, masks, p, return_attention=True)
    ref = reference(feat, emb, masks, *(p[f"charm.{k}"].data for k in ("wq", "wk", "wv")))
    np.testing.assert_allclose(out.data, ref, atol=1e-10)
    outside = ~masks.any(axis=0)
    assert out.data[:, outside].tobytes() == feat[:, outside].tobytes()
    for i in range(n):
        flat = masks[i].reshape(-1)
        assert np.all(att[0, i, ~flat] == 0.0)
        if flat.any():
            assert abs(att[0, i].sum() - 1.0) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(n, seed):
    rng = make_rng(seed)
    feat, emb, masks = instance(rng, 4, 3, 5, n)
    perm = rng.permutation(n)
    p = params64(4, seed)
    a = run(feat, emb, masks, p).data
    b = run(feat, emb[perm], masks[perm], p).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_mask_warns_and_contributes_nothing():
    rng = make_rng(3)
    feat, emb, _ = instance(rng, 2, 3, 3, 1)
    with pytest.warns(CharmWarning):
        out = run(feat, emb, np.zeros((1, 3, 3), bool), params64(2))
    assert out.data.tobytes() == feat.tobytes()


def test_shape_mismatch_errors():
    feat = np.zeros((2, 3, 3))
    with pytest.raises(ValueError, match="masks"):
        run(feat, np.zeros((1, 2)), np.ones((1, 3, 4), bool), params64(2))
    with pytest.raises(ValueError, match="embeddings"):
        run(feat, np.zeros((1, 3)), np.ones((1, 3, 3), bool), params64(2))


def test_literal_variant_leaks_outside_mask():
    rng = make_rng(4)
    feat, emb, _ = instance(rng, 3, 3, 3, 1)
    masks = np.zeros((1, 3, 3), bool)
    masks[0, 1, 1] = True
    out = run(feat, emb, masks, params64(3), literal_eq3=True).data
    assert not np.allclose(out[:, 0, 0], feat[:, 0, 0])


def test_batched_matches_single():
    rng = make_rng(5)
    p = params64(3)
    feats, embs, masks = zip(*(instance(rng, 3, 4, 4, 2) for _ in range(3)))
    batched = charm_forward(Tensor(np.stack(feats), dtype=np.float64), np.stack(embs), np.stack(masks), p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], run(feats[b], embs[b], masks[b], p).data, atol=1e-12)


def test_charm_priors_wrapper():
    rng = make_rng(6)
    feat, emb, masks = instance(rng, 3, 2, 4, 2, density=1.0)
    p = params64(3)
    priors = [CharPrior(e, SpatialMask(m, (0, 0, 1, 1))) for e, m in zip(emb, masks)]
    np.testing.assert_array_equal(charm_priors(Tensor(feat, dtype=np.float64), priors, p).data,
                                  run(feat, emb, masks, p).data)


def test_gradients_on_small_instance():
    rng = make_rng(7)
    with precision(np.float64):
        feat = parameter(rng.standard_normal((2, 3, 3)), "feat")
        emb = parameter(rng.standard_normal((2, 2)), "emb")
        p = init_charm(2, 1)
    masks = rng.random((2, 3, 3)) < 0.6
    masks[:, 0, 0] = True
    target = rng.standard_normal((2, 3, 3))
    errs = check_gradients(lambda: F.mse(charm_forward(feat, emb, masks, p), target),
                           {"feat": feat, "emb": emb, **p})
    assert max(errs.values()) < 1e-4, errs

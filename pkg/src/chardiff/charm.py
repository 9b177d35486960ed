"""Region-masked cross-attention of character embeddings into a feature map.

For every character i the flattened feature map provides the queries and the
character embedding provides a single key/value pair through shared C x C
projections.  Attention logits over spatial positions are normalized only
inside the character's mask, so the value vector is spread over that region
and nowhere else; the per-character results are summed onto the input
(residual).
"""
from __future__ import annotations

import math
import warnings

import numpy as np

from .numerics import Tensor, make_rng, parameter
from .numerics import functional as F


class CharmWarning(UserWarning):
    pass


def init_charm(dim: int, seed: int, prefix: str = "charm.") -> dict[str, Tensor]:
    rng = make_rng(seed, "charm")
    s = 1.0 / math.sqrt(dim)
    return {prefix + k: parameter(rng.standard_normal((dim, dim)) * s, name=prefix + k)
            for k in ("wq", "wk", "wv")}


def charm_forward(features: Tensor, embeddings, masks, params: dict[str, Tensor],
                  literal_eq3: bool = False, prefix: str = "charm.",
                  return_attention: bool = False):
    """Inject embeddings into their masked regions of ``features``.

    features:   (C, H, W) or (B, C, H, W)
    embeddings: (n, C) or (B, n, C) tensor/array
    masks:      (n, H, W) or (B, n, H, W) boolean

    With ``literal_eq3`` the mask multiplies the logits before an ordinary
    softmax over all positions instead of excluding masked-out positions.
    Returns the updated features, and the attention maps (B, n, H*W) when
    ``return_attention`` is set.
    """
    single = features.ndim == 3
    if single:
        features = F.reshape(features, (1,) + features.shape)
    if not isinstance(embeddings, Tensor):
        embeddings = Tensor(np.asarray(embeddings), dtype=features.dtype)
    masks = np.asarray(masks, dtype=bool)
    if single:
        embeddings = F.reshape(embeddings, (1,) + embeddings.shape)
        masks = masks[None]
    b, c, h, w = features.shape
    if embeddings.ndim != 3 or embeddings.shape[0] != b or embeddings.shape[2] != c:
        raise ValueError(f"charm: embeddings of shape {embeddings.shape} do not match features {features.shape}")
    n = embeddings.shape[1]
    if masks.shape != (b, n, h, w):
        raise ValueError(f"charm: masks of shape {masks.shape} do not match (B, n, H, W) = {(b, n, h, w)}")
    if n == 0:
        out = F.reshape(features, (c, h, w)) if single else features
        return (out, np.zeros((b, 0, h * w))) if return_attention else out
    if single and not literal_eq3:
        empty = ~masks.reshape(b, n, -1).any(axis=2)
        if empty.any():
            warnings.warn(f"charm: {int(empty.sum())} all-zero mask(s) contribute nothing",
                          CharmWarning, stacklevel=2)

    flat = F.reshape(features, (b, c, h * w))
    queries = F.transpose(flat, (0, 2, 1)) @ F.transpose(params[prefix + "wq"], (1, 0))  # (B, P, C)
    keys = embeddings @ F.transpose(params[prefix + "wk"], (1, 0))    # (B, n, C)
    values = embeddings @ F.transpose(params[prefix + "wv"], (1, 0))  # (B, n, C)
    logits = F.mul(keys @ F.transpose(queries, (0, 2, 1)), 1.0 / math.sqrt(c))  # (B, n, P)
    m = masks.reshape(b, n, h * w)
    if literal_eq3:
        att = F.softmax(F.mul(logits, m.astype(features.dtype)), axis=-1)
    else:
        att = F.softmax(logits, axis=-1, mask=m)
    delta = F.transpose(values, (0, 2, 1)) @ att  # (B, C, P)
    out = F.add(features, F.reshape(delta, (b, c, h, w)))
    if single:
        out = F.reshape(out, (c, h, w))
    return (out, att.data) if return_attention else out


def charm_priors(features: Tensor, priors, params: dict[str, Tensor], **kw):
    """:func:`charm_forward` over a list of CharPrior for one (C, H, W) map."""
    c, h, w = features.shape
    if not priors:
        return charm_forward(features, np.zeros((0, c)), np.zeros((0, h, w), bool), params, **kw)
    emb = [p.embedding for p in priors]
    if any(isinstance(e, Tensor) for e in emb):
        emb = F.concat([F.reshape(e if isinstance(e, Tensor) else Tensor(e), (1, c)) for e in emb], 0)
    else:
        emb = np.stack(emb)
    masks = np.stack([p.mask.grid for p in priors])
    return charm_forward(features, emb, masks, params, **kw)

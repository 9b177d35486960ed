"""Toy U-Net noise predictor with text-prior injection in the middle block.

The network sees ``Concat(x_t, x_lq)`` and the timestep, and optionally
character priors.  Priors enter only at the lowest resolution through
:func:`chardiff.charm.charm_forward`:

* ``none``: no prior;
* ``string``: the mean character embedding with an all-ones mask;
* ``char_global``: each character embedding with an all-ones mask;
* ``charm``: each character embedding with its own region mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .charm import charm_forward, init_charm
from .charprior import CharDetection, boxes_to_masks, encode_chars, init_encoder
from .numerics import Tensor, make_rng, parameter
from .numerics import functional as F

PRIOR_MODES = ("none", "string", "char_global", "charm")


@dataclass
class DenoiserConfig:
    channels: int = 1
    base_width: int = 32
    multipliers: tuple[int, ...] = (1, 2, 4)
    groups: int = 8
    prior_mode: str = "charm"
    vocab_size: int = 36
    max_chars: int = 8
    literal_eq3: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"model.prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if self.channels < 1 or self.base_width < 1:
            raise ValueError("model.channels and model.base_width must be positive")
        if len(self.multipliers) < 1 or min(self.multipliers) < 1:
            raise ValueError("model.multipliers must be a non-empty list of positive ints")
        for m in self.multipliers:
            if (m * self.base_width) % self._groups_for(m * self.base_width):
                raise ValueError("model.groups must divide every level width")

    def _groups_for(self, width: int) -> int:
        return math.gcd(self.groups, width)

    @property
    def mid_channels(self) -> int:
        return self.multipliers[-1] * self.base_width

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.multipliers) - 1)

    def feat_shape(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        h, w = image_shape
        d = self.downsample
        if h % d or w % d:
            raise ValueError(f"image {w}x{h} is not divisible by the U-Net downsampling factor {d}")
        return h // d, w // d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d


@dataclass
class PriorBatch:
    """Padded per-sample character detections ready for the middle block."""
    ids: np.ndarray     # (B, n) int
    valid: np.ndarray   # (B, n) bool
    masks: np.ndarray   # (B, n, H_f, W_f) bool

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls, batch: int, feat_shape: tuple[int, int]) -> "PriorBatch":
        return cls(np.zeros((batch, 0), np.int64), np.zeros((batch, 0), bool),
                   np.zeros((batch, 0) + tuple(feat_shape), bool))

    @classmethod
    def from_detections(cls, detections: list[list[CharDetection]], image_shape: tuple[int, int],
                        feat_shape: tuple[int, int], max_chars: int) -> "PriorBatch":
        b = len(detections)
        n = max([len(d) for d in detections] + [0])
        if n > max_chars:
            raise ValueError(f"{n} detections exceed max_chars={max_chars}")
        ids = np.zeros((b, n), np.int64)
        valid = np.zeros((b, n), bool)
        masks = np.zeros((b, n) + tuple(feat_shape), bool)
        for i, dets in enumerate(detections):
            if not dets:
                continue
            ms = boxes_to_masks([d.box for d in dets], image_shape, feat_shape)
            for j, (d, m) in enumerate(zip(dets, ms)):
                ids[i, j] = d.class_id
                valid[i, j] = True
                masks[i, j] = m.grid
        return cls(ids, valid, masks)

    def select(self, index) -> "PriorBatch":
        return PriorBatch(self.ids[index], self.valid[index], self.masks[index])


# -- building blocks -----------------------------------------------------------------

def timestep_embedding(t, dim: int, num_steps: int | None = None) -> np.ndarray:
    """Sinusoidal features [sin(t f_k), cos(t f_k)] with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t))
    if num_steps is not None and (t.min() < 0 or t.max() >= num_steps):
        raise ValueError(f"timestep out of range [0, {num_steps})")
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = t.astype(np.float64)[:, None] * freq[None]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _conv_init(rng, cout, cin, k, zero=False):
    if zero:
        return np.zeros((cout, cin, k, k)), np.zeros(cout)
    bound = 1.0 / math.sqrt(cin * k * k)
    return rng.uniform(-bound, bound, (cout, cin, k, k)), np.zeros(cout)


def _linear_init(rng, cout, cin):
    bound = 1.0 / math.sqrt(cin)
    return rng.uniform(-bound, bound, (cout, cin)), np.zeros(cout)


class DenoiserModel:
    """Parameters plus the forward pass of the noise predictor."""

    def __init__(self, config: DenoiserConfig, num_steps: int = 1000):
        config.validate()
        self.config = config
        self.num_steps = num_steps
        self.params: dict[str, Tensor] = {}
        rng = make_rng(config.seed, "denoiser")
        base = config.base_width
        widths = [m * base for m in config.multipliers]
        self.temb_in = base
        temb = 4 * base
        self._linear(rng, "temb.fc1", temb, self.temb_in)
        self._linear(rng, "temb.fc2", temb, temb)
        self._conv(rng, "in", widths[0], 2 * config.channels, 3)
        c = widths[0]
        for lvl, w in enumerate(widths[:-1]):
            self._res(rng, f"enc{lvl}", c, w, temb)
            c = w
        self._res(rng, "mid1", c, widths[-1], temb)
        self._res(rng, "mid2", widths[-1], widths[-1], temb)
        c = widths[-1]
        for lvl in reversed(range(len(widths) - 1)):
            self._res(rng, f"dec{lvl}", c + widths[lvl], widths[lvl], temb)
            c = widths[lvl]
        self._norm("out.norm", c)
        self._conv(rng, "out", config.channels, c, 3, zero=True)
        if config.prior_mode != "none":
            self.params.update(init_charm(config.mid_channels, config.seed))
            self.params.update(init_encoder(config.vocab_size, config.mid_channels,
                                            config.max_chars, config.seed))

    # -- parameter creation ------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = parameter(value, name=name)

    def _linear(self, rng, name, cout, cin):
        w, b = _linear_init(rng, cout, cin)
        self._add(name + ".w", w)
        self._add(name + ".b", b)

    def _conv(self, rng, name, cout, cin, k, zero=False):
        w, b = _conv_init(rng, cout, cin, k, zero)
        self._add(name + ".w", w)
        self._add(name + ".b", b)

    def _norm(self, name, c):
        self._add(name + ".g", np.ones(c))
        self._add(name + ".b", np.zeros(c))

    def _res(self, rng, name, cin, cout, temb):
        self._norm(name + ".norm1", cin)
        self._conv(rng, name + ".conv1", cout, cin, 3)
        self._linear(rng, name + ".temb", cout, temb)
        self._norm(name + ".norm2", cout)
        self._conv(rng, name + ".conv2", cout, cout, 3)
        if cin != cout:
            self._conv(rng, name + ".skip", cout, cin, 1)

    # -- forward -------------------------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def _gn(self, name, x):
        p = self.params
        return F.group_norm(x, self.config._groups_for(x.shape[1]), p[name + ".g"], p[name + ".b"])

    def _convf(self, name, x):
        return F.conv2d(x, self.params[name + ".w"], self.params[name + ".b"])

    def _resf(self, name, x, temb):
        p = self.params
        h = self._convf(name + ".conv1", F.silu(self._gn(name + ".norm1", x)))
        proj = F.linear(temb, p[name + ".temb.w"], p[name + ".temb.b"])
        h = h + F.reshape(proj, proj.shape + (1, 1))
        h = self._convf(name + ".conv2", F.silu(self._gn(name + ".norm2", h)))
        skip = self._convf(name + ".skip", x) if name + ".skip.w" in p else x
        return h + skip

    def time_embed(self, t) -> Tensor:
        p = self.params
        feats = Tensor(timestep_embedding(t, self.temb_in, self.num_steps), dtype=p["in.w"].dtype)
        h = F.silu(F.linear(feats, p["temb.fc1.w"], p["temb.fc1.b"]))
        return F.linear(h, p["temb.fc2.w"], p["temb.fc2.b"])

    def prior_inputs(self, priors: PriorBatch | None, batch: int, feat_shape):
        """Embeddings (B, n, C) and masks (B, n, H_f, W_f) for the configured mode."""
        mode = self.config.prior_mode
        if mode == "none":
            if priors is not None and priors.count:
                raise ValueError("model has prior_mode='none' but character priors were supplied")
            return None
        if priors is None:
            raise ValueError(f"model has prior_mode={mode!r} but no priors were supplied")
        if priors.ids.shape[0] != batch:
            raise ValueError(f"prior batch {priors.ids.shape[0]} != image batch {batch}")
        if priors.masks.shape[2:] != tuple(feat_shape):
            raise ValueError(f"prior masks {priors.masks.shape[2:]} do not match the mid-block grid {feat_shape}")
        n = priors.ids.shape[1]
        if n == 0:
            return None
        emb = encode_chars(priors.ids, self.params, valid=priors.valid)
        valid = priors.valid
        ones = np.ones((batch, n) + tuple(feat_shape), bool)
        if mode == "string":
            w = valid.astype(emb.dtype) / np.maximum(valid.sum(axis=1, keepdims=True), 1)
            pooled = Tensor(w[:, None, :], dtype=emb.dtype) @ emb  # (B, 1, C)
            mask = np.broadcast_to(valid.any(axis=1)[:, None, None, None], (batch, 1) + tuple(feat_shape))
            return pooled, mask
        if mode == "char_global":
            return emb, ones & valid[:, :, None, None]
        return emb, priors.masks & valid[:, :, None, None]

    def predict_noise(self, x_t, x_lq, t, priors: PriorBatch | None = None,
                      attention: list | None = None) -> Tensor:
        """Predicted noise for a batch of (x_t, x_lq) pairs, shape (B, ch, H, W)."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=self.params["in.w"].dtype)
        x_lq = x_lq if isinstance(x_lq, Tensor) else Tensor(x_lq, dtype=self.params["in.w"].dtype)
        if x_t.shape != x_lq.shape:
            raise ValueError(f"x_t {x_t.shape} and x_lq {x_lq.shape} must have the same shape")
        if x_t.ndim != 4 or x_t.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W) input, got {x_t.shape}")
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        feat_shape = self.config.feat_shape(x_t.shape[2:])
        temb = self.time_embed(t)
        h = self._convf("in", F.concat([x_t, x_lq], axis=1))
        skips = []
        levels = len(self.config.multipliers)
        for lvl in range(levels - 1):
            h = self._resf(f"enc{lvl}", h, temb)
            skips.append(h)
            h = F.avgpool2x(h)
        h = self._resf("mid1", h, temb)
        injected = self.prior_inputs(priors, b, feat_shape)
        if injected is not None:
            emb, masks = injected
            res = charm_forward(h, emb, masks, self.params, literal_eq3=self.config.literal_eq3,
                                return_attention=attention is not None)
            if attention is not None:
                h, att = res
                attention.append(att)
            else:
                h = res
        h = self._resf("mid2", h, temb)
        for lvl in reversed(range(levels - 1)):
            h = F.concat([F.upsample2x(h), skips[lvl]], axis=1)
            h = self._resf(f"dec{lvl}", h, temb)
        h = F.silu(self._gn("out.norm", h))
        return self._convf("out", h)

    __call__ = predict_noise

    def mid_features(self, x_t, x_lq, t, priors: PriorBatch | None = None) -> Tensor:
        """Middle-block features right after prior injection (for inspection)."""
        captured = []
        orig = self._resf

        def hook(name, x, temb):
            if name == "mid2":
                captured.append(x)
            return orig(name, x, temb)

        self._resf = hook
        try:
            self.predict_noise(x_t, x_lq, t, priors)
        finally:
            del self._resf
        return captured[0]

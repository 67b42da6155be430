"""Temporal aggregation heads: pooling, attention and recurrent.

Each head maps a clip of T frame features to a single vector whose length
does not depend on T. Clips arrive batched, as (B, T, D) vectors or
(B, T, w, h, C) feature maps; the unbatched module-level helpers accept
(T, D) / (T, w, h, C) and add the batch axis for you.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from . import tensor as tc
from .tensor import ShapeError, Tensor

PoolMode = Literal["avg", "max"]
AttentionNetwork = Literal["spatial_fc", "spatial_temporal_conv"]
Normalization = Literal["softmax", "sigmoid_l1"]
Cell = Literal["lstm", "gru"]
Readout = Literal["final_state", "output_average"]


@dataclass(frozen=True)
class PoolConfig:
    mode: PoolMode = "avg"
    kind: Literal["pool"] = "pool"

    def __post_init__(self):
        if self.mode not in ("avg", "max"):
            raise ValueError(f"pool mode must be 'avg' or 'max', got {self.mode!r}")


@dataclass(frozen=True)
class AttentionConfig:
    network: AttentionNetwork = "spatial_temporal_conv"
    normalization: Normalization = "softmax"
    d_t: int = 256
    temporal_kernel: int = 3
    # keep the leading 1/T of the weighted average (weights already sum to 1)
    literal_eq1: bool = False
    kind: Literal["attention"] = "attention"

    def __post_init__(self):
        if self.network not in ("spatial_fc", "spatial_temporal_conv"):
            raise ValueError(f"unknown attention network {self.network!r}")
        if self.normalization not in ("softmax", "sigmoid_l1"):
            raise ValueError(f"unknown attention normalization {self.normalization!r}")
        if self.d_t < 1:
            raise ValueError(f"d_t must be >= 1, got {self.d_t}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"temporal_kernel must be a positive odd integer, got "
                             f"{self.temporal_kernel}")


@dataclass(frozen=True)
class RnnConfig:
    cell: Cell = "lstm"
    hidden_size: int = 512
    readout: Readout = "output_average"
    kind: Literal["rnn"] = "rnn"

    def __post_init__(self):
        if self.cell not in ("lstm", "gru"):
            raise ValueError(f"unknown rnn cell {self.cell!r}")
        if self.readout not in ("final_state", "output_average"):
            raise ValueError(f"unknown rnn readout {self.readout!r}")
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be >= 1, got {self.hidden_size}")


AggregatorConfig = Union[PoolConfig, AttentionConfig, RnnConfig]

# The ten head configurations compared throughout the package.
HEAD_PRESETS: dict[str, AggregatorConfig] = {
    "avg": PoolConfig("avg"),
    "max": PoolConfig("max"),
    "att_fc_softmax": AttentionConfig("spatial_fc", "softmax"),
    "att_fc_sigmoid": AttentionConfig("spatial_fc", "sigmoid_l1"),
    "att_tconv_softmax": AttentionConfig("spatial_temporal_conv", "softmax"),
    "att_tconv_sigmoid": AttentionConfig("spatial_temporal_conv", "sigmoid_l1"),
    "lstm_final": RnnConfig("lstm", readout="final_state"),
    "lstm_avg": RnnConfig("lstm", readout="output_average"),
    "gru_final": RnnConfig("gru", readout="final_state"),
    "gru_avg": RnnConfig("gru", readout="output_average"),
}


def head_config_from_dict(d: dict) -> AggregatorConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    classes = {"pool": PoolConfig, "attention": AttentionConfig, "rnn": RnnConfig}
    if kind not in classes:
        raise ValueError(f"head kind must be one of {sorted(classes)}, got {kind!r}")
    return classes[kind](**d)


# shape helpers

def as_batch(x: Tensor) -> Tensor:
    """Add a batch axis to an unbatched clip ((T, D) or (T, w, h, C))."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"expected an unbatched clip (T, D) or (T, w, h, C), got {x.shape}")
    return x.reshape((1,) + x.shape)


def to_vectors(x: Tensor) -> Tensor:
    """Global spatial average of map-form clips; vector-form passes through."""
    if x.ndim == 5:
        return tc.mean(x, axis=(2, 3))
    if x.ndim == 3:
        return x
    raise ShapeError(f"expected batched clips (B, T, D) or (B, T, w, h, C), got {x.shape}")


def to_maps(x: Tensor) -> Tensor:
    """View vector-form clips as 1 x 1 feature maps."""
    if x.ndim == 5:
        return x
    if x.ndim == 3:
        return x.reshape(x.shape[:2] + (1, 1, x.shape[2]))
    raise ShapeError(f"expected batched clips (B, T, D) or (B, T, w, h, C), got {x.shape}")


def _check_frames(x: Tensor) -> None:
    if x.ndim < 3 or x.shape[1] < 1:
        raise ShapeError(f"clip must contain at least one frame, got shape {x.shape}")


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# heads

class Head:
    """Base class; subclasses fill ``params`` and implement ``forward``."""

    out_dim: int

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, x: Tensor, vectors: Tensor | None = None) -> Tensor:
        return self.forward(x, vectors)

    def forward(self, x: Tensor, vectors: Tensor | None = None) -> Tensor:
        raise NotImplementedError


class PoolingHead(Head):
    def __init__(self, config: PoolConfig, in_dim: int):
        super().__init__()
        self.config = config
        self.out_dim = in_dim

    def forward(self, x, vectors=None):
        _check_frames(x)
        v = to_vectors(x) if vectors is None else vectors
        if self.config.mode == "avg":
            return tc.mean(v, axis=1)
        return tc.max(v, axis=1)


class AttentionHead(Head):
    """Frame scores from a spatial conv followed by an FC or a temporal conv.

    Scores are computed from feature maps; the frames that get weighted are
    their spatially averaged vectors (or ``vectors`` when supplied).
    """

    def __init__(self, config: AttentionConfig, map_shape: tuple[int, int, int],
                 rng: np.random.Generator | None = None, init: str = "uniform",
                 out_dim: int | None = None):
        super().__init__()
        self.config = config
        self.map_shape = tuple(map_shape)
        w, h, c = self.map_shape
        self.out_dim = c if out_dim is None else out_dim
        d_t = config.d_t
        if config.network == "spatial_fc":
            second = (d_t, 1)
        else:
            second = (config.temporal_kernel, d_t, 1)
        if init == "zeros":
            self.params = {"conv_w": _zeros((w, h, c, d_t)), "conv_b": _zeros(d_t),
                           "score_w": _zeros(second), "score_b": _zeros(1)}
        else:
            rng = rng or np.random.default_rng(0)
            b1 = 1.0 / math.sqrt(w * h * c)
            b2 = 1.0 / math.sqrt(d_t * (config.temporal_kernel
                                        if config.network != "spatial_fc" else 1))
            self.params = {"conv_w": _uniform(rng, b1, (w, h, c, d_t)), "conv_b": _zeros(d_t),
                           "score_w": _uniform(rng, b2, second), "score_b": _zeros(1)}

    def scores(self, x: Tensor) -> Tensor:
        """Raw per-frame scores, shape (B, T)."""
        _check_frames(x)
        maps = to_maps(x)
        if maps.shape[2:] != self.map_shape:
            raise ShapeError(f"attention: clip spatial extent {maps.shape[2:]} does not match "
                             f"configured {self.map_shape}")
        p = self.params
        feat = tc.spatial_conv(maps, p["conv_w"], p["conv_b"])  # (B, T, d_t)
        if self.config.network == "spatial_fc":
            s = tc.affine(feat, p["score_w"], p["score_b"])
        else:
            s = tc.conv1d_time(feat, p["score_w"], p["score_b"])
        return s.reshape(s.shape[:2])

    def weights(self, x: Tensor) -> Tensor:
        return normalize_scores(self.config.normalization, self.scores(x))

    def forward(self, x, vectors=None):
        a = self.weights(x)
        v = to_vectors(x) if vectors is None else vectors
        return attention_aggregate(v, a, literal_eq1=self.config.literal_eq1)


class RNNHead(Head):
    """Single-layer LSTM or GRU run from a zero state; output at step t is h_t."""

    def __init__(self, config: RnnConfig, in_dim: int, rng: np.random.Generator | None = None,
                 init: str = "uniform"):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        H = config.hidden_size
        self.out_dim = H
        gates = 4 if config.cell == "lstm" else 3
        k = 1.0 / math.sqrt(H)
        rng = rng or np.random.default_rng(0)
        make = (lambda shape: _zeros(shape)) if init == "zeros" else \
            (lambda shape: _uniform(rng, k, shape))
        self.params = {"w_ih": make((in_dim, gates * H)), "w_hh": make((H, gates * H))}
        if config.cell == "lstm":
            b = make(gates * H)
            if init != "zeros":
                # gate order i, f, g, o; forget bias starts at 1
                data = b.data.copy()
                data[H:2 * H] = 1.0
                b = Tensor(data, requires_grad=True)
            self.params["b"] = b
        else:
            self.params["b_ih"] = make(gates * H)
            self.params["b_hh"] = make(gates * H)

    def _lstm_step(self, x_t, h, c):
        p, H = self.params, self.config.hidden_size
        z = tc.affine(x_t, p["w_ih"], p["b"]) + tc.matmul(h, p["w_hh"])
        i = tc.sigmoid(z[:, :H])
        f = tc.sigmoid(z[:, H:2 * H])
        g = tc.tanh(z[:, 2 * H:3 * H])
        o = tc.sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * tc.tanh(c)
        return h, c

    def _gru_step(self, x_t, h):
        p, H = self.params, self.config.hidden_size
        gi = tc.affine(x_t, p["w_ih"], p["b_ih"])
        gh = tc.affine(h, p["w_hh"], p["b_hh"])
        r = tc.sigmoid(gi[:, :H] + gh[:, :H])
        z = tc.sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
        n = tc.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
        return (1.0 - z) * n + z * h

    def forward(self, x, vectors=None):
        _check_frames(x)
        v = to_vectors(x) if vectors is None else vectors
        if v.shape[2] != self.in_dim:
            raise ShapeError(f"rnn: frame dimension {v.shape[2]} does not match configured "
                             f"{self.in_dim}")
        B, T = v.shape[:2]
        H = self.config.hidden_size
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        outputs = []
        for t in range(T):
            x_t = v[:, t, :]
            if self.config.cell == "lstm":
                h, c = self._lstm_step(x_t, h, c)
            else:
                h = self._gru_step(x_t, h)
            outputs.append(h)
        if self.config.readout == "final_state":
            return h
        total = outputs[0]
        for o in outputs[1:]:
            total = total + o
        return total * (1.0 / T)


def build_head(config: AggregatorConfig, feature_shape: tuple[int, ...],
               rng: np.random.Generator | None = None, init: str = "uniform",
               in_dim: int | None = None) -> Head:
    """Instantiate a head for frames of ``feature_shape`` ((D,) or (w, h, C)).

    ``in_dim`` overrides the dimension of the vectors being aggregated (used
    when a frame projection sits in front of the head).
    """
    feature_shape = tuple(feature_shape)
    channels = feature_shape[-1]
    vec_dim = channels if in_dim is None else in_dim
    if isinstance(config, PoolConfig):
        return PoolingHead(config, vec_dim)
    if isinstance(config, AttentionConfig):
        map_shape = feature_shape if len(feature_shape) == 3 else (1, 1, channels)
        return AttentionHead(config, map_shape, rng, init, out_dim=vec_dim)
    if isinstance(config, RnnConfig):
        return RNNHead(config, vec_dim, rng, init)
    raise TypeError(f"unknown head config {config!r}")


# functional forms on single clips

def temporal_pool(mode: PoolMode, clip) -> Tensor:
    """Average or max over time of a single clip; maps are spatially averaged first."""
    x = as_batch(clip)
    if x.shape[1] == 0:
        raise ShapeError("temporal_pool: empty clip")
    return PoolingHead(PoolConfig(mode), to_vectors(x).shape[-1])(x)[0]


def normalize_scores(mode: Normalization, scores) -> Tensor:
    """Turn raw scores into weights summing to one along the last axis."""
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    if s.shape[-1] < 1:
        raise ShapeError("normalize_scores: need at least one score")
    if mode == "softmax":
        return tc.softmax(s, axis=-1)
    if mode == "sigmoid_l1":
        sig = tc.sigmoid(s)
        return sig / tc.sum(sig, axis=-1, keepdims=True)
    raise ValueError(f"unknown normalization {mode!r}")


def attention_aggregate(frames, weights, literal_eq1: bool = False) -> Tensor:
    """Weighted sum of frame vectors over time.

    Works on a single clip ((T, D) frames, (T,) weights) or a batch
    ((B, T, D), (B, T)). ``literal_eq1`` additionally divides by T.
    """
    f = frames if isinstance(frames, Tensor) else Tensor(frames)
    a = weights if isinstance(weights, Tensor) else Tensor(weights)
    if f.ndim != a.ndim + 1 or f.shape[:-1] != a.shape:
        raise ShapeError(f"attention_aggregate: weights {a.shape} do not match frames {f.shape}")
    time_axis = f.ndim - 2
    out = tc.sum(f * a.reshape(a.shape + (1,)), axis=time_axis)
    if literal_eq1:
        out = out * (1.0 / f.shape[time_axis])
    return out


def attention_scores(head: AttentionHead, clip) -> Tensor:
    """Raw scores (T,) of a single clip under ``head``'s score network."""
    return head.scores(as_batch(clip))[0]


def rnn_aggregate(head: RNNHead, clip) -> Tensor:
    return head(as_batch(clip))[0]

"""Clip encoder: frame projection -> temporal head -> identity classifier."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as tc
from .aggregators import AggregatorConfig, build_head, to_vectors
from .retrieval import video_embedding
from .sampling import Tracklet, cut_clips
from .tensor import Tensor


class ReIDModel:
    """Trainable part of the pipeline on top of precomputed frame features.

    The optional frame projection is an affine map applied to every frame
    vector before aggregation, initialised to the identity. It stands in for
    the last trainable layer of a feature extractor, so that parameter-free
    heads (pooling) still learn an embedding. Attention scores are always
    computed from the raw feature maps.
    """

    def __init__(self, head_config: AggregatorConfig, feature_shape: Sequence[int],
                 num_classes: int, seed: int = 0, projection: bool = True,
                 init: str = "uniform"):
        self.head_config = head_config
        self.feature_shape = tuple(int(s) for s in feature_shape)
        self.num_classes = int(num_classes)
        self.projection = projection
        rng = np.random.default_rng(seed)
        dim = self.feature_shape[-1]
        self.head = build_head(head_config, self.feature_shape, rng, init=init, in_dim=dim)
        out = self.head.out_dim
        self.params: dict[str, Tensor] = {}
        if projection:
            self.params["proj.w"] = Tensor(np.eye(dim), requires_grad=True)
            self.params["proj.b"] = Tensor(np.zeros(dim), requires_grad=True)
        for name, p in self.head.params.items():
            self.params[f"head.{name}"] = p
        bound = 1.0 / math.sqrt(out)
        cls_w = np.zeros((out, num_classes)) if init == "zeros" else \
            rng.uniform(-bound, bound, size=(out, num_classes))
        self.params["cls.w"] = Tensor(cls_w, requires_grad=True)
        self.params["cls.b"] = Tensor(np.zeros(num_classes), requires_grad=True)

    @property
    def out_dim(self) -> int:
        return self.head.out_dim

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Replace parameter values in place (shapes must match)."""
        for name, value in values.items():
            old = self.params[name]
            if np.shape(value) != old.shape:
                raise ValueError(f"parameter {name}: expected shape {old.shape}, "
                                 f"got {np.shape(value)}")
            new = Tensor(value, requires_grad=True)
            self.params[name] = new
            if name.startswith("head."):
                self.head.params[name[5:]] = new

    def encode(self, clips) -> Tensor:
        """(B, T, ...) frame features -> (B, out_dim) clip embeddings."""
        x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=np.float64))
        vectors = to_vectors(x)
        if self.projection:
            vectors = tc.affine(vectors, self.params["proj.w"], self.params["proj.b"])
        return self.head(x, vectors)

    def logits(self, embeddings: Tensor) -> Tensor:
        return tc.affine(embeddings, self.params["cls.w"], self.params["cls.b"])

    def embed_tracklets(self, tracklets: Sequence[Tracklet], T: int, drop_padded: bool = False,
                        batch_size: int = 256) -> np.ndarray:
        """Video-level embeddings: mean of clip embeddings per tracklet."""
        clips, owner = [], []
        for i, tr in enumerate(tracklets):
            cut = cut_clips(tr, T, i)
            kept = [c for c in cut if not (drop_padded and c.padded)] or cut
            clips.extend(c.frames for c in kept)
            owner.extend([i] * len(kept))
        owner = np.array(owner)
        out = np.zeros((len(tracklets), self.out_dim))
        embs = []
        with tc.no_grad():
            for s in range(0, len(clips), batch_size):
                embs.append(self.encode(np.stack(clips[s:s + batch_size])).data)
        embs = np.concatenate(embs) if embs else np.zeros((0, self.out_dim))
        for i in range(len(tracklets)):
            out[i] = video_embedding(embs[owner == i]).vector
        return out

"""Clip cutting and identity-balanced (P x K) batch sampling."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Tracklet:
    """Time-ordered frame features of one identity seen by one camera."""

    identity: int
    camera: int
    frames: np.ndarray  # (length, D) or (length, w, h, C)
    role: str = "train"

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError(f"tracklet of identity {self.identity} has no frames")

    @property
    def length(self) -> int:
        return len(self.frames)


@dataclass
class FeatureClip:
    frames: np.ndarray  # (T, D) or (T, w, h, C)
    identity: int
    camera: int
    tracklet: int = -1
    start: int = 0
    padded: bool = False

    @property
    def T(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 4
    K: int = 8
    T: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.P < 2:
            raise ValueError(f"P must be >= 2, got {self.P}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")


def cut_clips(tracklet: Tracklet, T: int, tracklet_index: int = -1) -> list[FeatureClip]:
    """Consecutive non-overlapping T-frame clips from the start of the tracklet.

    A trailing remainder shorter than T is padded by repeating its last frame
    and marked ``padded``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    frames = tracklet.frames
    n = len(frames)
    if n == 0:
        raise ValueError("cannot cut clips from an empty tracklet")
    clips = []
    for start in range(0, n, T):
        chunk = frames[start:start + T]
        padded = len(chunk) < T
        if padded:
            fill = np.repeat(chunk[-1:], T - len(chunk), axis=0)
            chunk = np.concatenate([chunk, fill], axis=0)
        clips.append(FeatureClip(np.asarray(chunk), tracklet.identity, tracklet.camera,
                                 tracklet_index, start, padded))
    return clips


@dataclass
class Batch:
    clips: np.ndarray  # (P*K, T, ...)
    identities: np.ndarray  # (P*K,)
    clip_ids: np.ndarray  # index into the sampler's clip list


class PKSampler:
    """Draws P identities, then K clips per identity.

    Clips are pooled per identity across all of its tracklets. The batch for
    a given ``step`` depends only on (seed, step), so a resumed run sees the
    same batches as an uninterrupted one.
    """

    def __init__(self, tracklets: Sequence[Tracklet], config: SamplerConfig):
        self.config = config
        self.clips: list[FeatureClip] = []
        by_identity: dict[int, list[int]] = defaultdict(list)
        for ti, tr in enumerate(tracklets):
            for clip in cut_clips(tr, config.T, ti):
                by_identity[clip.identity].append(len(self.clips))
                self.clips.append(clip)
        self.identities = np.array(sorted(by_identity))
        self.pools = {ident: np.array(idx) for ident, idx in by_identity.items()}
        if len(self.identities) < config.P:
            raise ValueError(f"dataset has {len(self.identities)} identities, fewer than "
                             f"P={config.P}")

    def rng_for(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step])

    def sample(self, step: int = 0) -> Batch:
        cfg = self.config
        rng = self.rng_for(step)
        chosen = rng.choice(self.identities, size=cfg.P, replace=False)
        picks = []
        for ident in chosen:
            pool = self.pools[ident]
            picks.append(rng.choice(pool, size=cfg.K, replace=len(pool) < cfg.K))
        clip_ids = np.concatenate(picks)
        clips = np.stack([self.clips[i].frames for i in clip_ids])
        identities = np.repeat(chosen, cfg.K)
        return Batch(clips, identities, clip_ids)


def sample_batch(dataset: Sequence[Tracklet], config: SamplerConfig, step: int = 0) -> Batch:
    return PKSampler(dataset, config).sample(step)

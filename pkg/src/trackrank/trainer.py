"""Adam training loop over P x K batches, checkpoints and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregators import AggregatorConfig, PoolConfig, RnnConfig, head_config_from_dict
from .data import Dataset, read_tensor, write_tensor
from .losses import LabeledBatch, TripletConfig, batch_hard_triplet, softmax_cross_entropy
from .model import ReIDModel
from .retrieval import DEFAULT_RANKS, distance_matrix, evaluate, metrics_report, rerank
from .sampling import PKSampler, SamplerConfig
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_META = "checkpoint.json"


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or parameter."""

    def __init__(self, step: int, component: str, detail: str = ""):
        msg = f"non-finite {component} at step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.step = step
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    head: AggregatorConfig = PoolConfig("avg")
    sampler: SamplerConfig = SamplerConfig()
    triplet: TripletConfig = TripletConfig()
    lr: float | None = None  # None: 1e-4 for rnn heads, 3e-4 otherwise
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    eval_interval: int = 0  # 0: evaluate only at the end
    clip_norm: float | None = None  # None: 10 for rnn heads, off otherwise; <= 0: off
    frame_projection: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr is not None and self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.eps <= 0:
            raise ValueError(f"Adam epsilon must be > 0, got {self.eps}")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if isinstance(self.head, RnnConfig) else 3e-4

    @property
    def effective_clip_norm(self) -> float | None:
        if self.clip_norm is None:
            return 10.0 if isinstance(self.head, RnnConfig) else None
        return self.clip_norm if self.clip_norm > 0 else None

    def to_dict(self) -> dict:
        return {
            "head": asdict(self.head),
            "sampler": asdict(self.sampler),
            "triplet": asdict(self.triplet),
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "steps": self.steps, "eval_interval": self.eval_interval,
            "clip_norm": self.clip_norm, "frame_projection": self.frame_projection,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["head"] = head_config_from_dict(d["head"])
        d["sampler"] = SamplerConfig(**d["sampler"])
        d["triplet"] = TripletConfig(**d["triplet"])
        return cls(**d)

    def model_hash(self) -> str:
        """Hash of everything that determines the trajectory except its length."""
        d = self.to_dict()
        d.pop("steps")
        d.pop("eval_interval")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if eps <= 0:
        raise ValueError(f"Adam epsilon must be > 0, got {eps}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for {name}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# evaluation

@dataclass
class EvalOptions:
    ranks: tuple[int, ...] = DEFAULT_RANKS
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3
    drop_padded: bool = False


def evaluate_model(model: ReIDModel, test: Dataset, T: int,
                   options: EvalOptions = EvalOptions()) -> dict:
    """Embed query and gallery tracklets and score retrieval."""
    start = time.perf_counter()
    queries = test.with_role("query")
    gallery = test.with_role("gallery")
    if not queries or not gallery:
        raise ValueError("test dataset needs tracklets with roles 'query' and 'gallery'")
    q = model.embed_tracklets(queries, T, options.drop_padded)
    g = model.embed_tracklets(gallery, T, options.drop_padded)
    dist = distance_matrix(q, g)
    if options.rerank:
        dist = rerank(dist, distance_matrix(q, q), distance_matrix(g, g),
                      options.k1, options.k2, options.lambda_value)
    result = evaluate(dist, [t.identity for t in queries], [t.camera for t in queries],
                      [t.identity for t in gallery], [t.camera for t in gallery], options.ranks)
    return metrics_report(result, options.ranks, runtime=time.perf_counter() - start)


# checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    adam: AdamState
    feature_shape: tuple[int, ...]
    num_classes: int

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "tensors").mkdir(parents=True, exist_ok=True)
        files = {}
        groups = {"param": self.params, "adam_m": self.adam.m, "adam_v": self.adam.v}
        for group, arrays in groups.items():
            for name, arr in arrays.items():
                rel = f"tensors/{group}.{name}.trkf"
                write_tensor(directory / rel, np.atleast_1d(arr), "float64")
                files[f"{group}/{name}"] = {"path": rel, "shape": list(np.shape(arr))}
        meta = {"step": self.step, "adam_step": self.adam.step,
                "config_hash": self.config.model_hash(), "config": self.config.to_dict(),
                "feature_shape": list(self.feature_shape), "num_classes": self.num_classes,
                "tensors": files}
        (directory / CHECKPOINT_META).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> Checkpoint:
        directory = Path(directory)
        meta_path = directory / CHECKPOINT_META
        if not meta_path.exists():
            raise FileNotFoundError(f"no checkpoint at {directory} (missing {CHECKPOINT_META})")
        meta = json.loads(meta_path.read_text())
        config = TrainConfig.from_dict(meta["config"])
        if config.model_hash() != meta["config_hash"]:
            raise ValueError(f"{meta_path}: config hash mismatch")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key, entry in meta["tensors"].items():
            group, name = key.split("/", 1)
            arr = read_tensor(directory / entry["path"]).reshape(entry["shape"])
            groups[group][name] = arr
        return cls(config, meta["step"], groups["param"],
                   AdamState(meta["adam_step"], groups["adam_m"], groups["adam_v"]),
                   tuple(meta["feature_shape"]), meta["num_classes"])

    def build_model(self) -> ReIDModel:
        model = ReIDModel(self.config.head, self.feature_shape, self.num_classes,
                          seed=self.config.seed, projection=self.config.frame_projection)
        model.set_parameters(self.params)
        return model


# training loop

@dataclass
class TrainResult:
    model: ReIDModel
    checkpoint: Checkpoint
    loss_log: list[dict]
    metric_log: list[dict]


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _forward(model: ReIDModel, batch, triplet: TripletConfig, step: int) -> dict[str, Tensor]:
    """Component losses for one batch; overflow is reported as TrainingError."""
    # the non-finite guard raises on overflow, so numpy's own warning is noise
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            emb = model.encode(batch.clips)
        except NonFiniteError as exc:
            raise TrainingError(step, "embedding", str(exc)) from exc
        parts = {}
        for name, fn in (("softmax", lambda: softmax_cross_entropy(
                LabeledBatch(emb, batch.identities, model.logits(emb)))),
                ("triplet", lambda: batch_hard_triplet(
                    LabeledBatch(emb, batch.identities), triplet))):
            try:
                parts[name] = fn()
            except NonFiniteError as exc:
                raise TrainingError(step, f"{name} loss", str(exc)) from exc
    return parts


def train(dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
          resume: Checkpoint | None = None, eval_options: EvalOptions = EvalOptions(),
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the model on ``dataset``; deterministic given ``config.seed``.

    Batches depend only on (sampler seed, step), so resuming from a
    checkpoint reproduces the uninterrupted loss trajectory.
    """
    sampler = PKSampler(dataset.tracklets, config.sampler)
    num_classes = dataset.num_identities
    labels = sorted({t.identity for t in dataset.tracklets})
    if labels != list(range(num_classes)):
        raise ValueError("training identities must be contiguous 0..n-1")
    model = ReIDModel(config.head, dataset.feature_shape, num_classes, seed=config.seed,
                      projection=config.frame_projection)
    state = AdamState()
    start = 0
    if resume is not None:
        if resume.config.model_hash() != config.model_hash():
            raise ValueError("checkpoint was produced by a different configuration")
        model.set_parameters(resume.params)
        state = resume.adam
        start = resume.step
    lr = config.effective_lr
    clip = config.effective_clip_norm
    loss_log: list[dict] = []
    metric_log: list[dict] = []
    T = config.sampler.T

    for step in range(start, config.steps):
        batch = sampler.sample(step)
        params = model.parameters()
        parts = _forward(model, batch, config.triplet, step)
        loss = parts["softmax"] + parts["triplet"]
        backward(loss)
        grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for n, p in params.items()}
        norm = _global_norm(grads)
        clipped = False
        if clip is not None and norm > clip:
            grads = {n: g * (clip / norm) for n, g in grads.items()}
            clipped = True
            log.debug("step %d: gradient norm %.4g clipped to %.4g", step, norm, clip)
        values = {n: p.data for n, p in params.items()}
        new_values, state = adam_step(values, grads, state, lr, config.beta1, config.beta2,
                                      config.eps)
        for name, arr in new_values.items():
            if not np.isfinite(arr).all():
                raise TrainingError(step, f"parameter {name}")
        model.set_parameters(new_values)
        entry = {"step": step, "loss": loss.item(), "softmax": parts["softmax"].item(),
                 "triplet": parts["triplet"].item(), "grad_norm": norm, "clipped": clipped}
        loss_log.append(entry)
        if on_step is not None:
            on_step(entry)
        done = step + 1
        if test is not None and config.eval_interval > 0 and done % config.eval_interval == 0 \
                and done != config.steps:
            metric_log.append({"step": done, **evaluate_model(model, test, T, eval_options)})

    if test is not None:
        metric_log.append({"step": config.steps, **evaluate_model(model, test, T, eval_options)})
    checkpoint = Checkpoint(config, max(config.steps, start),
                            {n: p.data.copy() for n, p in model.parameters().items()},
                            state, dataset.feature_shape, num_classes)
    return TrainResult(model, checkpoint, loss_log, metric_log)


def untrained_checkpoint(dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """The initialization ``train`` would start from, as a step-0 checkpoint."""
    return train(dataset, replace(config, steps=0)).checkpoint


def write_loss_log(entries: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")

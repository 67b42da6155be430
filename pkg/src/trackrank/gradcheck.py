"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward

# A builder maps an RNG to (named leaves, closure recomputing the scalar loss
# from those leaves). The closure is called repeatedly with perturbed data.
Builder = Callable[[np.random.Generator], "tuple[Mapping[str, Tensor], Callable[[], Tensor]]"]


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e <= self.tolerance for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max absolute discrepancy scaled by the leaf's largest gradient entry.

    Scaling by the leaf-wide magnitude keeps entries whose true gradient is
    ~0 from dominating through round-off in the finite difference. The scale
    is floored at ``floor`` so a leaf whose gradient vanishes identically
    (e.g. a bias feeding a softmax) compares round-off against 1e-6, not
    against itself.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    diff = np.abs(analytic - numeric).max(initial=0.0)
    return float(diff / scale)


def numeric_gradient(loss_fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``leaf``."""
    original = leaf.data
    work = original.copy()
    grad = np.zeros_like(original)
    flat = work.reshape(-1)
    try:
        for i in range(flat.size):
            x = flat[i]
            flat[i] = x + eps
            leaf.data = work
            plus = loss_fn().item()
            flat[i] = x - eps
            leaf.data = work
            minus = loss_fn().item()
            flat[i] = x
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
    finally:
        leaf.data = original
    return grad


def grad_check(builder: Builder, tolerance: float = 1e-4, *, seed: int = 0,
               eps: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central differences for every leaf."""
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    try:
        leaves, loss_fn = builder(rng)
        loss = loss_fn()
        backward(loss)
        analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                    for name, t in leaves.items()}
        for name, leaf in leaves.items():
            numeric = numeric_gradient(loss_fn, leaf, eps)
            report.errors[name] = relative_error(analytic[name], numeric)
    except NonFiniteError as exc:
        report.failure = f"non-finite value at node '{exc.op}'"
    return report


# suite over every head configuration and both losses

_B, _T, _MAP, _DIM = 2, 4, (2, 2, 3), 4


def _separated(rng: np.random.Generator, shape, axis: int, gap: float = 1e-3) -> np.ndarray:
    """Random values whose entries along ``axis`` differ pairwise by at least ``gap``."""
    while True:
        x = rng.normal(size=shape)
        s = np.sort(x, axis=axis)
        if np.diff(s, axis=axis).min() >= gap:
            return x


def head_builder(name: str) -> Builder:
    from .aggregators import HEAD_PRESETS, AttentionConfig, PoolConfig, RnnConfig, build_head

    config = HEAD_PRESETS[name]

    def build(rng):
        if isinstance(config, AttentionConfig):
            cfg = AttentionConfig(config.network, config.normalization, d_t=3)
            head = build_head(cfg, _MAP, rng)
            x = Tensor(rng.normal(size=(_B, _T) + _MAP), requires_grad=True)
        elif isinstance(config, RnnConfig):
            cfg = RnnConfig(config.cell, hidden_size=3, readout=config.readout)
            head = build_head(cfg, (_DIM,), rng)
            x = Tensor(rng.normal(size=(_B, _T, _DIM)), requires_grad=True)
        else:
            head = build_head(config, (_DIM,), rng)
            x = Tensor(_separated(rng, (_B, _T, _DIM), axis=1), requires_grad=True)
        probe = rng.normal(size=(_B, head.out_dim))
        leaves = {"input": x, **{f"head.{k}": v for k, v in head.params.items()}}
        return leaves, lambda: (head(x) * probe).sum()

    return build


def _triplet_batch(rng, P=2, K=4, dim=3, gap=1e-3):
    from .losses import hardest_pairs, pairwise_distances

    labels = np.repeat(np.arange(P), K)
    while True:
        emb = rng.normal(size=(P * K, dim))
        dist = pairwise_distances(Tensor(emb)).data
        same = labels[:, None] == labels[None, :]
        ok = True
        for i in range(P * K):
            pos = np.sort(dist[i][same[i]])[::-1]
            neg = np.sort(dist[i][~same[i]])
            if pos[0] - pos[1] < gap or (len(neg) > 1 and neg[1] - neg[0] < gap):
                ok = False
                break
        pos, neg = hardest_pairs(Tensor(dist), labels)
        pre = 0.3 + pos.data - neg.data
        if ok and np.abs(pre).min() >= gap and (pre > 0).any():
            return emb, labels


def triplet_builder(rng):
    from .losses import LabeledBatch, TripletConfig, batch_hard_triplet

    emb, labels = _triplet_batch(rng)
    x = Tensor(emb, requires_grad=True)
    return {"embeddings": x}, lambda: batch_hard_triplet(LabeledBatch(x, labels),
                                                         TripletConfig(0.3))


def softmax_builder(rng):
    from .losses import LabeledBatch, softmax_cross_entropy

    labels = np.repeat(np.arange(4), 2)
    logits = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
    emb = Tensor(np.zeros((8, 1)))
    return {"logits": logits}, lambda: softmax_cross_entropy(LabeledBatch(emb, labels, logits))


def total_builder(rng):
    from . import tensor as tc
    from .losses import LabeledBatch, TripletConfig, total_loss

    emb, labels = _triplet_batch(rng)
    x = Tensor(emb, requires_grad=True)
    w = Tensor(rng.normal(size=(emb.shape[1], 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    return {"embeddings": x, "cls.w": w, "cls.b": b}, lambda: total_loss(
        LabeledBatch(x, labels, tc.affine(x, w, b)), TripletConfig(0.3))


def suite() -> dict[str, Builder]:
    from .aggregators import HEAD_PRESETS

    builders: dict[str, Builder] = {name: head_builder(name) for name in HEAD_PRESETS}
    builders["triplet"] = triplet_builder
    builders["softmax"] = softmax_builder
    builders["total"] = total_builder
    return builders


@dataclass
class SuiteRow:
    name: str
    seeds: int
    max_error: float
    passed: bool
    failure: str | None = None


def run_suite(names=None, seeds: int = 20, tolerance: float = 1e-4) -> list[SuiteRow]:
    builders = suite()
    names = list(builders) if names is None else list(names)
    unknown = [n for n in names if n not in builders]
    if unknown:
        raise KeyError(f"unknown gradient-check target(s) {unknown}; choose from {list(builders)}")
    rows = []
    for name in names:
        worst, failure = 0.0, None
        for seed in range(seeds):
            report = grad_check(builders[name], tolerance, seed=seed)
            worst = max(worst, report.max_error)
            if report.failure and failure is None:
                failure = f"seed {seed}: {report.failure}"
        rows.append(SuiteRow(name, seeds, worst, failure is None and worst <= tolerance, failure))
    return rows

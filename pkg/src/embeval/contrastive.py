"""Supervised contrastive objective with in-batch and hard negatives, trained on a linear head.

For a batch of N anchors h_i, positives h+_j and (optionally) hard negatives h-_j,
example i contributes

    -log( exp(s(h_i, h+_i)/tau) / sum_j [exp(s(h_i, h+_j)/tau) + exp(s(h_i, h-_j)/tau)] )

with s the cosine similarity. The head maps every input row through ``x W^T + b``
before the similarities are taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from embeval.errors import DimensionError, EmbevalError, ZeroNormError
from embeval.store import EmbeddingMatrix, TripletSet

DEFAULT_TAU = 0.05


class TrainingError(EmbevalError):
    pass


@dataclass(frozen=True)
class ProjectionHead:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        weight = np.array(self.weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] < 1 or weight.shape[1] < 1:
            raise DimensionError(f"head weight must be a non-empty 2-D matrix, got {weight.shape}")
        if not np.isfinite(weight).all():
            raise EmbevalError("head weight has non-finite entries")
        bias = None
        if self.bias is not None:
            bias = np.array(self.bias, dtype=np.float64)
            if bias.shape != (weight.shape[0],):
                raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
            if not np.isfinite(bias).all():
                raise EmbevalError("head bias has non-finite entries")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64) @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    @classmethod
    def identity(cls, dims: int, bias: bool = False) -> ProjectionHead:
        return cls(np.eye(dims), np.zeros(dims) if bias else None)

    def same_as(self, other: ProjectionHead) -> bool:
        if (self.bias is None) != (other.bias is None):
            return False
        same_w = self.weight.shape == other.weight.shape and self.weight.tobytes() == other.weight.tobytes()
        return same_w and (self.bias is None or self.bias.tobytes() == other.bias.tobytes())


@dataclass(frozen=True)
class TrainConfig:
    tau: float = DEFAULT_TAU
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    use_hard_negatives: bool = True
    d_out: Optional[int] = None  # None keeps the input dimensionality
    bias: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise EmbevalError(f"tau must be > 0, got {self.tau}")
        if not self.learning_rate > 0:
            raise EmbevalError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise EmbevalError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise EmbevalError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.d_out is not None and self.d_out < 1:
            raise EmbevalError(f"d_out must be >= 1, got {self.d_out}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    per_example: np.ndarray


@dataclass(frozen=True)
class HeadGradient:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    head: ProjectionHead
    loss_history: list[float] = field(default_factory=list)


def _as_batch(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty N x d matrix, got shape {x.shape}")
    return x


def _check_inputs(anchors, positives, hard_negatives, tau):
    if not tau > 0:
        raise EmbevalError(f"tau must be > 0, got {tau}")
    a = _as_batch(anchors, "anchors")
    p = _as_batch(positives, "positives")
    if p.shape != a.shape:
        raise DimensionError(f"positives shape {p.shape} != anchors shape {a.shape}")
    h = None
    if hard_negatives is not None:
        h = _as_batch(hard_negatives, "hard_negatives")
        if h.shape != a.shape:
            raise DimensionError(f"hard_negatives shape {h.shape} != anchors shape {a.shape}")
    return a, p, h


def _normalize(z: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if (norms == 0).any():
        raise ZeroNormError(f"zero-norm row {int(np.flatnonzero(norms == 0)[0])} in {name}")
    return z / norms[:, None], norms


def _forward(za, zp, zh, tau):
    ua, na = _normalize(za, "anchors")
    up, np_ = _normalize(zp, "positives")
    logits = ua @ up.T
    uh = nh = None
    if zh is not None:
        uh, nh = _normalize(zh, "hard_negatives")
        logits = np.concatenate([logits, ua @ uh.T], axis=1)
    logits = logits / tau
    peak = logits.max(axis=1, keepdims=True)
    shifted = logits - peak
    log_z = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(za.shape[0])
    per_example = log_z - shifted[idx, idx]
    # the positive is one of the summands, so each term is >= 0 up to rounding
    per_example = np.maximum(per_example, 0.0)
    cache = (ua, na, up, np_, uh, nh, shifted, log_z)
    return per_example, cache


def _backward(cache, tau):
    """Gradient of the mean loss w.r.t. the pre-normalization rows za, zp, zh."""
    ua, na, up, np_, uh, nh, shifted, log_z = cache
    n = ua.shape[0]
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(n), np.arange(n)] -= 1.0
    d_logits = probs / (n * tau)
    d_sp = d_logits[:, :n]
    d_ua = d_sp @ up
    d_up = d_sp.T @ ua
    d_uh = None
    if uh is not None:
        d_sh = d_logits[:, n:]
        d_ua += d_sh @ uh
        d_uh = d_sh.T @ ua

    def through_norm(u, norms, du):
        # d(z/|z|) = (I - u u^T) dz / |z|
        return (du - u * np.einsum("ij,ij->i", u, du)[:, None]) / norms[:, None]

    d_za = through_norm(ua, na, d_ua)
    d_zp = through_norm(up, np_, d_up)
    d_zh = through_norm(uh, nh, d_uh) if uh is not None else None
    return d_za, d_zp, d_zh


def contrastive_loss(anchors, positives, hard_negatives=None, tau: float = DEFAULT_TAU) -> LossBreakdown:
    a, p, h = _check_inputs(anchors, positives, hard_negatives, tau)
    per_example, _ = _forward(a, p, h, tau)
    return LossBreakdown(math.fsum(per_example.tolist()) / len(per_example), per_example)


def _loss_and_grad(head: ProjectionHead, a, p, h, tau) -> tuple[LossBreakdown, HeadGradient]:
    za, zp = head(a), head(p)
    zh = head(h) if h is not None else None
    per_example, cache = _forward(za, zp, zh, tau)
    d_za, d_zp, d_zh = _backward(cache, tau)
    grad_w = d_za.T @ a + d_zp.T @ p
    grad_b = d_za.sum(axis=0) + d_zp.sum(axis=0)
    if h is not None:
        grad_w += d_zh.T @ h
        grad_b += d_zh.sum(axis=0)
    loss = LossBreakdown(math.fsum(per_example.tolist()) / len(per_example), per_example)
    return loss, HeadGradient(grad_w, grad_b if head.bias is not None else None)


def contrastive_grad(anchors, positives, hard_negatives, tau: float, head: ProjectionHead) -> HeadGradient:
    """Analytic gradient of the mean contrastive loss w.r.t. the head parameters."""
    a, p, h = _check_inputs(anchors, positives, hard_negatives, tau)
    if a.shape[1] != head.d_in:
        raise DimensionError(f"input dims {a.shape[1]} != head d_in {head.d_in}")
    return _loss_and_grad(head, a, p, h, tau)[1]


def init_head(d_in: int, config: TrainConfig, rng: np.random.Generator) -> ProjectionHead:
    d_out = config.d_out or d_in
    if d_out == d_in:
        return ProjectionHead.identity(d_in, bias=config.bias)
    bound = 1.0 / math.sqrt(d_in)
    weight = rng.uniform(-bound, bound, size=(d_out, d_in))
    return ProjectionHead(weight, np.zeros(d_out) if config.bias else None)


EvalHook = Callable[[int, ProjectionHead, float], None]


def train_head(
    triplets: TripletSet,
    config: TrainConfig,
    eval_hook: Optional[EvalHook] = None,
) -> TrainResult:
    """Fit a projection head by plain gradient descent on the contrastive loss.

    Each epoch reshuffles the triplets with a generator seeded once from
    ``config.seed`` and takes one step per batch. ``loss_history[e]`` is the mean
    per-example loss seen during epoch ``e`` (before each step's update).
    ``eval_hook(epoch, head, mean_loss)`` runs after every epoch.
    """
    n = triplets.n
    if config.batch_size > n:
        raise EmbevalError(f"batch_size {config.batch_size} exceeds number of triplets {n}")
    rng = np.random.default_rng(config.seed)
    head = init_head(triplets.dims, config, rng)
    a_all = triplets.anchors.values.astype(np.float64)
    p_all = triplets.positives.values.astype(np.float64)
    h_all = triplets.hard_negatives.values.astype(np.float64) if config.use_hard_negatives else None
    history: list[float] = []
    weight = head.weight.copy()
    bias = None if head.bias is None else head.bias.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_terms: list[float] = []
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            if len(rows) < 2:
                # a single example has no negatives and contributes a zero gradient
                continue
            current = ProjectionHead(weight, bias)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                # divergence is reported just below with context, not as a numpy warning
                loss, grad = _loss_and_grad(
                    current, a_all[rows], p_all[rows], None if h_all is None else h_all[rows], config.tau
                )
            if not math.isfinite(loss.total) or not np.isfinite(grad.weight).all():
                raise TrainingError(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start}: "
                    f"loss={loss.total}; try a smaller learning_rate or larger tau"
                )
            epoch_terms.extend(loss.per_example.tolist())
            weight = weight - config.learning_rate * grad.weight
            if bias is not None:
                bias = bias - config.learning_rate * grad.bias
        mean_loss = math.fsum(epoch_terms) / len(epoch_terms)
        history.append(mean_loss)
        head = ProjectionHead(weight, bias)
        if eval_hook is not None:
            eval_hook(epoch, head, mean_loss)
    return TrainResult(head, history)


def apply_head(matrix: EmbeddingMatrix, head: ProjectionHead) -> EmbeddingMatrix:
    """Map every row through the head; the result is not normalized."""
    if matrix.dims != head.d_in:
        raise DimensionError(f"matrix dims {matrix.dims} != head d_in {head.d_in}")
    out = head(matrix.values.astype(np.float64)) if matrix.n else np.zeros((0, head.d_out))
    return EmbeddingMatrix(matrix.ids, out.astype(np.float32))


# ---------------------------------------------------------------------------
# persistence: weight rows in the EMBV embedding format, everything else in TSV


def encode_head(head: ProjectionHead, meta: dict | None = None, header: str = "") -> tuple[bytes, str]:
    """EMBV bytes for the weight (rows ``w0..w{d_out-1}``) and the key/value metadata TSV."""
    from embeval.store import encode_binary

    ids = tuple(f"w{i}" for i in range(head.d_out))
    weight_bytes = encode_binary(EmbeddingMatrix(ids, head.weight.astype(np.float32)))
    lines = [header, f"d_in\t{head.d_in}\n", f"d_out\t{head.d_out}\n"]
    if head.bias is not None:
        lines.append("bias\t" + " ".join(format(float(v), ".17g") for v in head.bias) + "\n")
    for key, value in (meta or {}).items():
        if isinstance(value, (list, tuple)):
            value = " ".join(format(float(v), ".17g") for v in value)
        elif isinstance(value, float):
            value = format(value, ".17g")
        lines.append(f"{key}\t{value}\n")
    return weight_bytes, "".join(lines)


def save_head(head: ProjectionHead, weight_path, meta_path, meta: dict | None = None, header: str = "") -> None:
    from embeval.store import atomic_write_many

    weight_bytes, meta_text = encode_head(head, meta, header)
    atomic_write_many({weight_path: weight_bytes, meta_path: meta_text.encode("utf-8")})


def load_head(weight_path, meta_path=None) -> ProjectionHead:
    from embeval.store import load_embeddings

    weight = load_embeddings(weight_path, "binary")
    bias = None
    if meta_path is not None:
        with open(meta_path, encoding="utf-8") as handle:
            for line in handle:
                if line.startswith("bias\t"):
                    bias = np.array([float(v) for v in line.split("\t", 1)[1].split()])
    return ProjectionHead(weight.values.astype(np.float64), bias)

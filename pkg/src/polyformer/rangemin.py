"""Range-minimization training: instrumentation, auxiliary losses, loop.

Stage two of the pipeline. Every activation site reports the min/max of
its pre-activation input and every LayerNorm site reports per-token
variances; the auxiliary losses push the extremes down so the later
polynomial substitution works on narrow domains:

    total = alpha * sum_sites max(|max|, |min|)
          + beta  * sum_norm_layers max(variance over batch and tokens)
          + task loss

Both auxiliary terms use the recorded maxima of the current batch with
subgradients flowing only through the extremal elements. The optimizer
is Adam with decoupled weight decay under linear warmup + cosine decay.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .model import Taps, TransformerModel, perplexity
from .seeding import SeedStream


@dataclass
class RangeRecord:
    """Observed input extremes of one activation site."""

    layer_id: str
    role: str  # "mlp_activation" | "attention_activation"
    min_value: float
    max_value: float
    min_tensor: T.Tensor | None = None  # current-batch graph nodes
    max_tensor: T.Tensor | None = None

    def merge(self, other: "RangeRecord"):
        self.min_value = min(self.min_value, other.min_value)
        self.max_value = max(self.max_value, other.max_value)

    @property
    def magnitude(self) -> float:
        return max(abs(self.min_value), abs(self.max_value))


@dataclass
class VarianceRecord:
    """Observed LayerNorm variance extremes of one normalization site.

    var_min is kept alongside the max/mean so conversion can bound the
    reciprocal-square-root domain away from zero.
    """

    layer_id: str
    var_max: float
    var_mean: float
    var_min: float = 0.0
    count: int = 1
    max_tensor: T.Tensor | None = None

    def merge(self, other: "VarianceRecord"):
        self.var_max = max(self.var_max, other.var_max)
        self.var_min = min(self.var_min, other.var_min)
        total = self.var_mean * self.count + other.var_mean * other.count
        self.count += other.count
        self.var_mean = total / self.count


@dataclass
class ObjectiveWeights:
    alpha: float = 0.01  # activation-range weight
    beta: float = 0.01  # variance weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("objective weights must be nonnegative")


def batch_records(taps: Taps) -> tuple[list[RangeRecord], list[VarianceRecord]]:
    """Differentiable per-batch records from a forward pass's taps."""
    ranges = []
    for site, role, x in taps.activations:
        mx = T.reduce("max", x)
        mn = T.reduce("min", x)
        ranges.append(RangeRecord(site, role, mn.item(), mx.item(), mn, mx))
    variances = []
    for site, var in taps.variances:
        vmax = T.reduce("max", var)
        vmean = T.reduce("mean", var)
        variances.append(VarianceRecord(site, vmax.item(), vmean.item(),
                                        var_min=float(var.data.min()),
                                        count=var.size, max_tensor=vmax))
    return ranges, variances


class RangeRecorder:
    """Running min/max window over batches, reset per epoch."""

    def __init__(self):
        self.ranges: dict[str, RangeRecord] = {}
        self.variances: dict[str, VarianceRecord] = {}
        self.history: list[dict] = []

    def observe(self, taps: Taps):
        ranges, variances = batch_records(taps)
        for r in ranges:
            if r.layer_id in self.ranges:
                self.ranges[r.layer_id].merge(r)
            else:
                self.ranges[r.layer_id] = RangeRecord(
                    r.layer_id, r.role, r.min_value, r.max_value
                )
        for v in variances:
            if v.layer_id in self.variances:
                self.variances[v.layer_id].merge(v)
            else:
                self.variances[v.layer_id] = VarianceRecord(
                    v.layer_id, v.var_max, v.var_mean, v.var_min, v.count
                )

    def snapshot(self, epoch: int):
        for site, r in self.ranges.items():
            self.history.append({
                "epoch": epoch, "layer_id": site, "role": r.role,
                "min": r.min_value, "max": r.max_value,
                "var_mean": "", "var_max": "",
            })
        for site, v in self.variances.items():
            self.history.append({
                "epoch": epoch, "layer_id": site, "role": "layernorm_variance",
                "min": "", "max": "", "var_mean": v.var_mean, "var_max": v.var_max,
            })

    def reset(self):
        self.ranges.clear()
        self.variances.clear()

    def write_history_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "layer_id", "role", "min", "max", "var_mean", "var_max"]
            )
            writer.writeheader()
            for row in self.history:
                writer.writerow(row)


def record_ranges(model: TransformerModel, batch, recorder: RangeRecorder | None = None,
                  mode: str = "eval") -> tuple[list[RangeRecord], list[VarianceRecord]]:
    """Run one batch through the instrumented model and record extremes."""
    taps = Taps()
    inputs, targets = batch
    if model.cfg.task == "lm":
        model.lm_loss(inputs, targets, mode=mode, taps=taps)
    else:
        model.image_loss(inputs, targets, mode=mode, taps=taps)
    if recorder is not None:
        recorder.observe(taps)
    return batch_records(taps)


def loss_activation_range(records: list[RangeRecord]) -> T.Tensor:
    """Sum over activation sites of max(|batch max|, |batch min|)."""
    total = None
    for r in records:
        if r.max_tensor is None or r.min_tensor is None:
            raise ValueError(f"record {r.layer_id} lacks current-batch tensors")
        mag = T.maximum(T.absolute(r.max_tensor), T.absolute(r.min_tensor))
        total = mag if total is None else T.add(total, mag)
    return total if total is not None else T.tensor(0.0)


def loss_variance(records: list[VarianceRecord]) -> T.Tensor:
    """Sum over LayerNorm sites of the batch-and-token maximum variance."""
    total = None
    for v in records:
        if v.max_tensor is None:
            raise ValueError(f"record {v.layer_id} lacks a current-batch tensor")
        total = v.max_tensor if total is None else T.add(total, v.max_tensor)
    return total if total is not None else T.tensor(0.0)


def combined_objective(original_loss: T.Tensor, range_loss: T.Tensor,
                       variance_loss: T.Tensor, weights: ObjectiveWeights) -> T.Tensor:
    if weights.alpha == 0.0 and weights.beta == 0.0:
        return original_loss
    total = original_loss
    if weights.alpha != 0.0:
        total = T.add(total, T.scale(range_loss, weights.alpha))
    if weights.beta != 0.0:
        total = T.add(total, T.scale(variance_loss, weights.beta))
    return total


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[tuple[str, T.Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.t = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def cosine_warmup_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int,
                     min_lr: float = 0.0) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 3
    steps_per_epoch: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.0
    clip_norm: float | None = None
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    eval_batches: int = 4

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["weights"] = {"alpha": self.weights.alpha, "beta": self.weights.beta}
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        w = obj.pop("weights", {})
        return cls(weights=ObjectiveWeights(**w), **obj)


@dataclass
class TrainResult:
    model: TransformerModel
    recorder: RangeRecorder
    loss_curve: list[float]
    final_metric: float  # perplexity (lm) or accuracy (image)
    metric_name: str
    diverged: bool = False


def _global_norm_clip(params, clip: float):
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > clip:
        factor = clip / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def evaluate_metric(model: TransformerModel, dataset, batches: int = 4,
                    batch_size: int = 16) -> tuple[float, str]:
    """Held-out perplexity for LM tasks, accuracy for image tasks."""
    if model.cfg.task == "lm":
        losses = []
        for x, y in dataset.test_batches(batch_size, limit=batches):
            loss, _ = model.lm_loss(x, y, mode="eval")
            losses.append(loss.item())
        return perplexity(float(np.mean(losses))), "perplexity"
    correct = total = 0
    for x, y in dataset.test_batches(batch_size, limit=batches):
        logits = model.image_logits(x, mode="eval")
        correct += int((np.argmax(logits.data, axis=-1) == y).sum())
        total += len(y)
    return correct / max(total, 1), "accuracy"


def train(model: TransformerModel, dataset, stage: str, hp: TrainConfig,
          seed: int = 0) -> TrainResult:
    """Run one training stage: "baseline" (task loss only) or "range_min".

    Deterministic given the seed. Raises DivergenceError with a
    diagnostic snapshot when the loss stops being finite.
    """
    if stage not in ("baseline", "range_min"):
        raise ValueError(f"unknown stage {stage!r}")
    stream = SeedStream(seed)
    batch_rng = stream.rng(f"{stage}-batches")
    opt = AdamW(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    total_steps = hp.epochs * hp.steps_per_epoch
    warmup = int(hp.warmup_frac * total_steps)
    recorder = RangeRecorder()
    loss_curve: list[float] = []

    step = 0
    for epoch in range(hp.epochs):
        for _ in range(hp.steps_per_epoch):
            x, y = dataset.sample_batch(batch_rng, "train", hp.batch_size)
            taps = Taps() if stage == "range_min" else None
            with T.Tape() as tape:
                if model.cfg.task == "lm":
                    task_loss, _ = model.lm_loss(x, y, mode="train", taps=taps)
                else:
                    task_loss, _ = model.image_loss(x, y, mode="train", taps=taps)
                if stage == "range_min":
                    ranges, variances = batch_records(taps)
                    total = combined_objective(
                        task_loss,
                        loss_activation_range(ranges),
                        loss_variance(variances),
                        hp.weights,
                    )
                else:
                    total = task_loss
            value = total.item()
            if not math.isfinite(value):
                snapshot = {
                    "stage": stage, "step": step, "epoch": epoch,
                    "loss": value, "recent_losses": loss_curve[-10:],
                    "train_config": hp.to_dict(),
                }
                raise DivergenceError(f"non-finite loss at step {step}", snapshot)
            loss_curve.append(value)
            opt.zero_grad()
            T.backward(tape, total)
            if hp.clip_norm is not None:
                _global_norm_clip(opt.params, hp.clip_norm)
            opt.step(cosine_warmup_lr(step, hp.lr, warmup, total_steps))
            step += 1

        # Epoch-end instrumentation pass over held-out batches.
        recorder.reset()
        for batch in dataset.test_batches(hp.batch_size, limit=hp.eval_batches):
            record_ranges(model, batch, recorder=recorder, mode="eval")
        recorder.snapshot(epoch)

    metric, metric_name = evaluate_metric(model, dataset, hp.eval_batches, hp.batch_size)
    return TrainResult(model, recorder, loss_curve, metric, metric_name)

"""Score stacking: log-odds transform of member scores and the trainable
FC -> ReLU -> FC(2) meta-classifier that fuses them.

Member order is contractual: a fusion model only accepts log-odds vectors
whose member ids match its own, in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ModelError
from .nnet import (
    Adam,
    PlateauSchedule,
    ScorePair,
    TrainSpec,
    WeightStore,
    _ce_batch,
    _uniform,
    softmax2,
)

# Probabilities are clamped here before the quotient, so log-odds stay finite
# even for saturated softmax outputs.
PROB_CLAMP = 1e-7

FUSION_HIDDEN = 16


@dataclass(eq=False)
class LogOddsVector:
    """One log-odds value per ensemble member, in contract order."""

    values: np.ndarray
    member_ids: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.member_ids = tuple(self.member_ids)
        if self.values.shape != (len(self.member_ids),):
            raise DataError(
                f"{self.values.shape[0] if self.values.ndim == 1 else self.values.shape} "
                f"values for {len(self.member_ids)} member ids"
            )
        if len(self.member_ids) < 1:
            raise DataError("need at least one ensemble member")
        if not np.all(np.isfinite(self.values)):
            raise DataError("log-odds must be finite")


def log_odds(p_pos: float, p_neg: float) -> float:
    """ln(p_pos / p_neg), with both probabilities clamped away from 0 and 1."""
    if abs(p_pos + p_neg - 1.0) > 1e-6:
        raise DataError(f"probabilities must sum to 1, got {p_pos + p_neg}")
    p_pos = min(max(p_pos, PROB_CLAMP), 1.0 - PROB_CLAMP)
    p_neg = min(max(p_neg, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(np.log(p_pos / p_neg))


def stack_scores(scores: Sequence[ScorePair], member_ids: Sequence[str]) -> LogOddsVector:
    """Turn one ScorePair per member into the fusion input vector."""
    if len(scores) != len(member_ids):
        raise DataError(f"{len(scores)} scores for {len(member_ids)} members")
    values = [log_odds(*softmax2(s)) for s in scores]
    return LogOddsVector(np.array(values), tuple(member_ids))


@dataclass(eq=False)
class FusionModel:
    """FC(N -> hidden) -> ReLU -> FC(hidden -> 2) over member log-odds."""

    weights: WeightStore

    def __post_init__(self):
        if self.weights.kind != "fusion":
            raise ModelError(f"expected a fusion store, got kind {self.weights.kind!r}")
        if "member_ids" not in self.weights.metadata:
            raise ModelError("fusion store lacks member_ids metadata")
        n = len(self.member_ids)
        if self.weights["fc1.w"].shape[1] != n:
            raise ModelError("fusion input width does not match member_ids")

    @property
    def member_ids(self) -> tuple[str, ...]:
        return tuple(self.weights.metadata["member_ids"])

    @property
    def hidden(self) -> int:
        return self.weights["fc1.w"].shape[0]


def mlp_forward(params: Sequence[np.ndarray], z: np.ndarray) -> np.ndarray:
    """Batched fusion forward: z (n, N) -> logits (n, 2)."""
    w1, b1, w2, b2 = params
    hidden = np.maximum(z @ w1.T + b1, 0.0)
    return hidden @ w2.T + b2


def mlp_grads(
    params: Sequence[np.ndarray], z: np.ndarray, y: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy on a batch plus analytic gradients for all four
    fusion parameters."""
    w1, b1, w2, b2 = params
    pre = z @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w2.T + b2
    loss, dlogits = _ce_batch(logits, y)
    dw2 = dlogits.T @ hidden
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ w2
    dhidden = np.where(pre > 0.0, dhidden, 0.0)
    dw1 = dhidden.T @ z
    db1 = dhidden.sum(axis=0)
    return loss, [dw1, db1, dw2, db2]


def fuse(z: LogOddsVector, model: FusionModel) -> ScorePair:
    """Run the meta-classifier on one log-odds vector."""
    if z.member_ids != model.member_ids:
        raise ModelError(
            f"member ids {z.member_ids} do not match model {model.member_ids}"
        )
    ws = model.weights
    params = [ws["fc1.w"].astype(np.float64), ws["fc1.b"].astype(np.float64),
              ws["fc2.w"].astype(np.float64), ws["fc2.b"].astype(np.float64)]
    logits = mlp_forward(params, z.values[None, :])[0]
    return ScorePair(float(logits[0]), float(logits[1]))


@dataclass(eq=False)
class ScoreDataset:
    """Labeled log-odds rows for fusion training and evaluation."""

    log_odds: np.ndarray
    labels: np.ndarray
    member_ids: tuple[str, ...]

    def __post_init__(self):
        self.log_odds = np.asarray(self.log_odds, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.member_ids = tuple(self.member_ids)
        if (
            self.log_odds.ndim != 2
            or self.log_odds.shape[0] != self.labels.shape[0]
            or self.log_odds.shape[1] != len(self.member_ids)
        ):
            raise DataError("inconsistent score dataset shapes")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "ScoreDataset":
        return ScoreDataset(self.log_odds[idx], self.labels[idx], self.member_ids)


def synth_score_task(
    n_members: int,
    sigmas: Sequence[float],
    n_samples: int,
    rng: np.random.Generator,
    mu: float = 1.0,
    member_ids: Sequence[str] | None = None,
) -> ScoreDataset:
    """Synthetic ensemble benchmark: balanced labels; member i emits
    mu * (+-1) plus Gaussian noise sigma_i, so members have heterogeneous
    error patterns."""
    if n_members < 1 or len(sigmas) != n_members:
        raise ValueError("need one sigma per member")
    if member_ids is None:
        member_ids = tuple(f"m{i}" for i in range(n_members))
    labels = rng.integers(0, 2, size=n_samples)
    signs = 2.0 * labels - 1.0
    z = np.empty((n_samples, n_members))
    for i, sigma in enumerate(sigmas):
        z[:, i] = mu * signs + rng.normal(0.0, sigma, size=n_samples)
    return ScoreDataset(z, labels, tuple(member_ids))


def train_fusion(
    dataset: ScoreDataset,
    spec: TrainSpec,
    valid: ScoreDataset | None = None,
    hidden: int = FUSION_HIDDEN,
) -> FusionModel:
    """Fit the stacking MLP; when no validation split is given, a seeded
    10% slice of the dataset is held out for the plateau schedule."""
    if len(set(dataset.labels.tolist())) < 2:
        raise DataError("fusion training data must contain both classes")
    if valid is None:
        rng_split = np.random.default_rng(spec.seed)
        order = rng_split.permutation(len(dataset))
        n_valid = max(1, len(dataset) // 10)
        valid = dataset.subset(order[:n_valid])
        dataset = dataset.subset(order[n_valid:])
    if valid.member_ids != dataset.member_ids:
        raise ModelError("train and valid member ids differ")

    n_members = dataset.log_odds.shape[1]
    rng = np.random.default_rng(spec.seed)
    params = [
        _uniform(rng, (hidden, n_members), n_members),
        _uniform(rng, hidden, n_members),
        _uniform(rng, (2, hidden), hidden),
        _uniform(rng, 2, hidden),
    ]
    adam = Adam(params, spec.lr0)
    schedule = PlateauSchedule(spec)
    best = [p.copy() for p in params]
    n = len(dataset)
    for _ in range(spec.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            _, grads = mlp_grads(params, dataset.log_odds[idx], dataset.labels[idx])
            adam.step(grads)
        val_loss, _ = _ce_batch(mlp_forward(params, valid.log_odds), valid.labels)
        action = schedule.observe(val_loss)
        if action == PlateauSchedule.IMPROVED:
            best = [p.copy() for p in params]
        elif action == PlateauSchedule.REDUCE:
            adam.lr *= spec.lr_decay_factor
        elif action == PlateauSchedule.STOP:
            break

    tensors = {"fc1.w": best[0], "fc1.b": best[1], "fc2.w": best[2], "fc2.b": best[3]}
    meta = {
        "kind": "fusion",
        "member_ids": list(dataset.member_ids),
        "hparams": {"hidden": hidden, "seed": spec.seed},
    }
    return FusionModel(WeightStore(tensors, meta))


def load_fusion(path) -> FusionModel:
    from .nnet import load_weights

    return FusionModel(load_weights(path))


def fusion_predictions(model: FusionModel, data: ScoreDataset) -> np.ndarray:
    """Hard labels the fused model assigns to every row of a dataset."""
    if data.member_ids != model.member_ids:
        raise ModelError("dataset member ids do not match the fusion model")
    ws = model.weights
    params = [ws["fc1.w"].astype(np.float64), ws["fc1.b"].astype(np.float64),
              ws["fc2.w"].astype(np.float64), ws["fc2.b"].astype(np.float64)]
    logits = mlp_forward(params, data.log_odds)
    return (logits[:, 0] >= logits[:, 1]).astype(np.int64)

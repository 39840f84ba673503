"""Minimal neural kernel: GRU scorers, a trainable linear baseline, Adam with
a plateau schedule, and the binary weight-file format.

Weight tensors are stored as float32 (the file format is float32), while all
forward/backward math runs in float64 for numerically clean gradients. GRU
scorers are inference-only; the trainable baseline is the linear classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DataError,
    ModelError,
    WeightLayoutError,
    WeightMagicError,
    WeightTruncatedError,
    WeightVersionError,
)
from .features import FeatureMatrix

WEIGHT_MAGIC = b"WUWM"
WEIGHT_VERSION = 1

# Binary label convention used across the toolkit.
LABEL_NEG = 0
LABEL_POS = 1


class ScorePair(NamedTuple):
    """A classifier's two raw outputs: positive (wake word) and negative."""

    logit_pos: float
    logit_neg: float


def softmax2(s: ScorePair) -> tuple[float, float]:
    """Numerically stable two-way softmax; returns (p_pos, p_neg)."""
    a, b = float(s[0]), float(s[1])
    m = max(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    total = ea + eb
    return float(ea / total), float(eb / total)


def cross_entropy(s: ScorePair, label: int) -> tuple[float, tuple[float, float]]:
    """Cross-entropy of a score pair against a binary label.

    Returns (loss, gradient w.r.t. (logit_pos, logit_neg)). Uses a stable
    log-sum-exp; the gradient is softmax minus the one-hot target.
    """
    a, b = float(s[0]), float(s[1])
    m = max(a, b)
    lse = m + np.log(np.exp(a - m) + np.exp(b - m))
    target = a if label == LABEL_POS else b
    loss = float(lse - target)
    p_pos, p_neg = softmax2(s)
    if label == LABEL_POS:
        grad = (p_pos - 1.0, p_neg)
    else:
        grad = (p_pos, p_neg - 1.0)
    return loss, grad


def _ce_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch of (pos, neg) logit rows.

    Returns (loss, d loss / d logits); the gradient already carries the 1/n
    of the mean.
    """
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    exps = np.exp(logits - m)
    probs = exps / exps.sum(axis=1, keepdims=True)
    target_col = np.where(labels == LABEL_POS, 0, 1)
    picked = probs[np.arange(n), target_col]
    # fully saturated inputs would otherwise produce log(0)
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), target_col] -= 1.0
    return loss, dlogits / n


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map w @ x + b with explicit shape checks."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ValueError("linear expects w (m,n), x (n,), b (m,)")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: w {w.shape}, x {x.shape}, b {b.shape}")
    return w @ x + b


# -- GRU -------------------------------------------------------------------

@dataclass
class GRUParams:
    """One GRU layer's parameters, gates stacked in (update, reset, candidate)
    order: w_ih (3H, I), w_hh (3H, H), b_ih (3H,), b_hh (3H,)."""

    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    def __post_init__(self):
        h3 = self.w_ih.shape[0]
        if (
            h3 % 3
            or self.w_hh.shape != (h3, h3 // 3)
            or self.b_ih.shape != (h3,)
            or self.b_hh.shape != (h3,)
        ):
            raise ValueError("inconsistent GRU parameter shapes")

    @property
    def hidden_size(self) -> int:
        return self.w_ih.shape[0] // 3

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_cell(x: np.ndarray, h: np.ndarray, params: GRUParams) -> np.ndarray:
    """One GRU step: h' = (1 - z) * n + z * h, with the candidate gated as
    n = tanh(W_n x + b_in + r * (U_n h + b_hn))."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    hs = params.hidden_size
    if x.shape != (params.input_size,) or h.shape != (hs,):
        raise ValueError(
            f"expected x ({params.input_size},) and h ({hs},), "
            f"got {x.shape} and {h.shape}"
        )
    gi = params.w_ih @ x + params.b_ih
    gh = params.w_hh @ h + params.b_hh
    z = _sigmoid(gi[:hs] + gh[:hs])
    r = _sigmoid(gi[hs : 2 * hs] + gh[hs : 2 * hs])
    n = np.tanh(gi[2 * hs :] + r * gh[2 * hs :])
    return (1.0 - z) * n + z * h


def gru_outputs(frames: np.ndarray, params: GRUParams) -> np.ndarray:
    """Hidden state after every frame, shape (T, H); h starts at zero."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DataError("gru needs a non-empty (T, I) sequence")
    h = np.zeros(params.hidden_size)
    out = np.empty((frames.shape[0], params.hidden_size))
    for t in range(frames.shape[0]):
        h = gru_cell(frames[t], h, params)
        out[t] = h
    return out


def gru_sequence(frames, params: GRUParams, mode: str = "last") -> np.ndarray:
    """Run a GRU over a sequence; pool with the final state or max over time."""
    if isinstance(frames, FeatureMatrix):
        frames = frames.values
    states = gru_outputs(frames, params)
    if mode == "last":
        return states[-1]
    if mode == "max":
        return states.max(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


# -- Weight store ----------------------------------------------------------

@dataclass(eq=False)
class WeightStore:
    """Ordered name -> float32 tensor map plus model metadata."""

    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        coerced = {}
        for name, t in self.tensors.items():
            arr = np.ascontiguousarray(t, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"tensor {name!r} contains non-finite values")
            coerced[name] = arr
        self.tensors = coerced

    @property
    def kind(self) -> str:
        return self.metadata.get("kind", "")

    @property
    def config_id(self) -> int | None:
        return self.metadata.get("config_id")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def param_count(ws: WeightStore) -> int:
    return int(sum(t.size for t in ws.tensors.values()))


def save_weights(ws: WeightStore, path) -> None:
    """Write the store: magic, u8 version, u32 JSON length, JSON metadata
    (kind, config_id, tensor names + shapes, hyperparameters), then raw
    little-endian float32 payloads in declared order."""
    meta = dict(ws.metadata)
    meta["tensors"] = [
        {"name": name, "shape": list(t.shape)} for name, t in ws.tensors.items()
    ]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<BI", WEIGHT_VERSION, len(blob))
    out += blob
    for t in ws.tensors.values():
        out += t.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path) -> WeightStore:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != WEIGHT_MAGIC:
        raise WeightMagicError(f"{path}: bad weight-file magic")
    if len(data) < 9:
        raise WeightTruncatedError(f"{path}: truncated header")
    version, meta_len = struct.unpack_from("<BI", data, 4)
    if version != WEIGHT_VERSION:
        raise WeightVersionError(f"{path}: unsupported version {version}")
    if len(data) < 9 + meta_len:
        raise WeightTruncatedError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[9 : 9 + meta_len].decode("utf-8"))
        declared = meta.pop("tensors")
        entries = [(d["name"], tuple(d["shape"])) for d in declared]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightLayoutError(f"{path}: invalid metadata ({exc})") from None
    if len({name for name, _ in entries}) != len(entries):
        raise WeightLayoutError(f"{path}: duplicate tensor names")

    tensors = {}
    offset = 9 + meta_len
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise WeightTruncatedError(f"{path}: payload for {name!r} truncated")
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise WeightLayoutError(f"{path}: {len(data) - offset} trailing bytes")
    return WeightStore(tensors, meta)


# -- Scorers ---------------------------------------------------------------

@dataclass(frozen=True)
class Scorer:
    """A named classifier over one feature config; the plug-in point for
    external architectures as well as the built-in ones."""

    member_id: str
    config_id: int
    fn: Callable[[FeatureMatrix], ScorePair]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def gru_scorer_param_count(n_inputs: int, hidden: int = 128, layers: int = 2) -> int:
    """Closed-form parameter total: 3(H*I + H^2 + 2H) per layer plus the
    (H -> 2) output head."""
    total = 0
    size_in = n_inputs
    for _ in range(layers):
        total += 3 * (hidden * size_in + hidden * hidden + 2 * hidden)
        size_in = hidden
    return total + 2 * hidden + 2


def init_gru_scorer(
    config,
    kind: str = "sgru",
    hidden: int = 128,
    layers: int = 2,
    seed: int = 0,
) -> WeightStore:
    """Random GRU scorer weights (uniform +-1/sqrt(fan_in) per tensor)."""
    if kind not in ("sgru", "gru-max"):
        raise ModelError(f"unknown GRU scorer kind {kind!r}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    size_in = config.n_mfcc
    for i in range(layers):
        tensors[f"gru{i}.w_ih"] = _uniform(rng, (3 * hidden, size_in), size_in)
        tensors[f"gru{i}.w_hh"] = _uniform(rng, (3 * hidden, hidden), hidden)
        tensors[f"gru{i}.b_ih"] = _uniform(rng, 3 * hidden, size_in)
        tensors[f"gru{i}.b_hh"] = _uniform(rng, 3 * hidden, hidden)
        size_in = hidden
    tensors["head.w"] = _uniform(rng, (2, hidden), hidden)
    tensors["head.b"] = _uniform(rng, 2, hidden)
    meta = {
        "kind": kind,
        "config_id": config.config_id,
        "hparams": {"hidden": hidden, "layers": layers},
    }
    return WeightStore(tensors, meta)


def _gru_scorer_forward(features: FeatureMatrix, ws: WeightStore, mode: str) -> ScorePair:
    if ws.config_id != features.config_id:
        raise ModelError(
            f"features config {features.config_id} != model config {ws.config_id}"
        )
    layers = ws.metadata.get("hparams", {}).get("layers", 2)
    seq = np.asarray(features.values, dtype=np.float64)
    for i in range(layers):
        params = GRUParams(
            ws[f"gru{i}.w_ih"].astype(np.float64),
            ws[f"gru{i}.w_hh"].astype(np.float64),
            ws[f"gru{i}.b_ih"].astype(np.float64),
            ws[f"gru{i}.b_hh"].astype(np.float64),
        )
        if i + 1 < layers:
            seq = gru_outputs(seq, params)
        else:
            pooled = gru_sequence(seq, params, mode=mode)
    logits = linear(pooled, ws["head.w"].astype(np.float64), ws["head.b"].astype(np.float64))
    return ScorePair(float(logits[0]), float(logits[1]))


def sgru_forward(features: FeatureMatrix, ws: WeightStore) -> ScorePair:
    """Stacked GRU scorer pooled with the last hidden state."""
    if ws.kind != "sgru":
        raise ModelError(f"expected an sgru store, got kind {ws.kind!r}")
    return _gru_scorer_forward(features, ws, "last")


def gru_max_forward(features: FeatureMatrix, ws: WeightStore) -> ScorePair:
    """Stacked GRU scorer pooled with the elementwise max over time."""
    if ws.kind != "gru-max":
        raise ModelError(f"expected a gru-max store, got kind {ws.kind!r}")
    return _gru_scorer_forward(features, ws, "max")


def linear_classifier_forward(features: FeatureMatrix, ws: WeightStore) -> ScorePair:
    """Standardize per coefficient column, flatten row-major, affine to 2 logits."""
    if ws.config_id != features.config_id:
        raise ModelError(
            f"features config {features.config_id} != model config {ws.config_id}"
        )
    mean = ws["norm.mean"].astype(np.float64)
    std = ws["norm.std"].astype(np.float64)
    w = ws["w"].astype(np.float64)
    b = ws["b"].astype(np.float64)
    x = (np.asarray(features.values, dtype=np.float64) - mean) / std
    flat = x.reshape(-1)
    if w.shape[1] != flat.shape[0]:
        raise ModelError(
            f"feature shape {features.values.shape} does not match model input "
            f"width {w.shape[1]}"
        )
    logits = linear(flat, w, b)
    return ScorePair(float(logits[0]), float(logits[1]))


_FORWARDS = {
    "sgru": sgru_forward,
    "gru-max": gru_max_forward,
    "linear": linear_classifier_forward,
}


def make_scorer(ws: WeightStore, member_id: str | None = None) -> Scorer:
    """Wrap a weight store as a Scorer, dispatching on its model kind."""
    try:
        forward = _FORWARDS[ws.kind]
    except KeyError:
        raise ModelError(f"no forward pass for model kind {ws.kind!r}") from None
    if ws.config_id is None:
        raise ModelError("weight store metadata lacks a config_id")
    name = member_id if member_id is not None else ws.metadata.get("name", ws.kind)
    return Scorer(name, ws.config_id, lambda fm: forward(fm, ws))


# -- Training --------------------------------------------------------------

@dataclass
class TrainSpec:
    """Optimization recipe: Adam, cross-entropy, and an LR plateau schedule.

    The learning rate drops by ``lr_decay_factor`` whenever validation loss
    has not improved by more than ``min_improvement`` for
    ``plateau_patience`` epochs; training stops once ``max_lr_reductions``
    consecutive reductions have passed without a new best.
    """

    batch_size: int = 128
    lr0: float = 1e-3
    max_epochs: int = 700
    lr_decay_factor: float = 0.1
    plateau_patience: int = 5
    max_lr_reductions: int = 4
    min_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if (
            self.batch_size < 1
            or self.lr0 <= 0
            or self.max_epochs < 0
            or not (0 < self.lr_decay_factor < 1)
            or self.plateau_patience < 1
            or self.max_lr_reductions < 1
        ):
            raise ValueError("invalid training spec")


class Adam:
    """Adam over a list of float64 parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauSchedule:
    """Tracks validation loss; tells the loop when to decay the LR or stop."""

    IMPROVED = "improved"
    CONTINUE = "continue"
    REDUCE = "reduce"
    STOP = "stop"

    def __init__(self, spec: TrainSpec):
        self.spec = spec
        self.best = np.inf
        self.epochs_since_improve = 0
        self.reductions = 0

    def observe(self, loss: float) -> str:
        if loss < self.best - self.spec.min_improvement:
            self.best = loss
            self.epochs_since_improve = 0
            self.reductions = 0
            return self.IMPROVED
        self.epochs_since_improve += 1
        if self.epochs_since_improve >= self.spec.plateau_patience:
            if self.reductions >= self.spec.max_lr_reductions:
                return self.STOP
            self.reductions += 1
            self.epochs_since_improve = 0
            return self.REDUCE
        return self.CONTINUE


def linear_grads(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of the affine classifier on a batch, with analytic
    gradients w.r.t. w (2, D) and b (2,). x is (n, D), y is (n,) labels."""
    logits = x @ w.T + b
    loss, dlogits = _ce_batch(logits, y)
    return loss, dlogits.T @ x, dlogits.sum(axis=0)


LabeledFeatures = Sequence[tuple[FeatureMatrix, int]]


def _dataset_arrays(data: LabeledFeatures) -> tuple[np.ndarray, np.ndarray]:
    mats = [fm.values for fm, _ in data]
    labels = np.array([int(y) for _, y in data])
    shapes = {m.shape for m in mats}
    configs = {fm.config_id for fm, _ in data}
    if len(shapes) != 1 or len(configs) != 1:
        raise DataError("all feature matrices must share one shape and config")
    return np.stack(mats).astype(np.float64), labels


def train_classifier(
    train: LabeledFeatures, valid: LabeledFeatures, spec: TrainSpec
) -> WeightStore:
    """Fit the linear baseline classifier and return the best-validation
    weights. Fully deterministic for a fixed spec.seed."""
    if not train or not valid:
        raise DataError("train and valid splits must be non-empty")
    x_train, y_train = _dataset_arrays(train)
    x_valid, y_valid = _dataset_arrays(valid)
    if len(set(y_train.tolist())) < 2:
        raise DataError("training data must contain both classes")
    n, frames, coeffs = x_train.shape
    config_id = train[0][0].config_id

    mean = x_train.reshape(-1, coeffs).mean(axis=0)
    std = np.maximum(x_train.reshape(-1, coeffs).std(axis=0), 1e-6)
    xt = ((x_train - mean) / std).reshape(n, -1)
    xv = ((x_valid - mean) / std).reshape(len(valid), -1)

    dim = frames * coeffs
    rng = np.random.default_rng(spec.seed)
    w = _uniform(rng, (2, dim), dim)
    b = _uniform(rng, 2, dim)

    adam = Adam([w, b], spec.lr0)
    schedule = PlateauSchedule(spec)
    best = (w.copy(), b.copy())
    for _ in range(spec.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            _, dw, db = linear_grads(w, b, xt[idx], y_train[idx])
            adam.step([dw, db])
        val_loss, _ = _ce_batch(xv @ w.T + b, y_valid)
        action = schedule.observe(val_loss)
        if action == PlateauSchedule.IMPROVED:
            best = (w.copy(), b.copy())
        elif action == PlateauSchedule.REDUCE:
            adam.lr *= spec.lr_decay_factor
        elif action == PlateauSchedule.STOP:
            break

    tensors = {
        "norm.mean": mean,
        "norm.std": std,
        "w": best[0],
        "b": best[1],
    }
    meta = {
        "kind": "linear",
        "config_id": config_id,
        "hparams": {
            "n_frames": frames,
            "n_coeffs": coeffs,
            "batch_size": spec.batch_size,
            "lr0": spec.lr0,
            "seed": spec.seed,
        },
    }
    return WeightStore(tensors, meta)

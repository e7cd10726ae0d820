"""HemCNN: four single-channel convolution filters that keep hemispheres apart.

Input rows are the channel layout's HbO/HbR pairs with the left hemisphere
in the upper half. CF1 merges each HbO/HbR pair, CF2 and CF3 filter along
time, and CF4 (stride = kernel = 12 channels x 5 steps) collapses each
hemisphere to a single logit. Logit 0 (left hand) therefore depends only on
the upper 24 input rows and logit 1 only on the lower 24.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .dataio import DEFAULT_LAYOUT, ChannelLayout, DataError, Hand, Hemisphere, Stage, TrialRecord, check_stage
from .signal import crop_window, zscore_matrix

FILTER_NAMES = ("cf1", "cf2", "cf3", "cf4")
CROP_LEN_S = 19.0
INPUT_COLS = 38  # 19 s at 2 Hz


class Variant(str, enum.Enum):
    BOTH = "Both"
    HBO_ONLY = "HbOOnly"
    HBR_ONLY = "HbROnly"

    @property
    def n_input_rows(self) -> int:
        return 48 if self is Variant.BOTH else 24


# (kernel, stride) per filter
ARCHITECTURE = {
    Variant.BOTH: (((2, 10), (2, 1)), ((1, 5), (1, 2)), ((1, 5), (1, 2)), ((12, 5), (12, 5))),
    Variant.HBO_ONLY: (((1, 10), (1, 1)), ((1, 5), (1, 2)), ((1, 5), (1, 2)), ((12, 5), (12, 5))),
}
ARCHITECTURE[Variant.HBR_ONLY] = ARCHITECTURE[Variant.HBO_ONLY]


@dataclass
class HemCNNModel:
    cf1: nn.ConvFilter
    cf2: nn.ConvFilter
    cf3: nn.ConvFilter
    cf4: nn.ConvFilter
    variant: Variant = Variant.BOTH
    layout: ChannelLayout = DEFAULT_LAYOUT

    @property
    def filters(self) -> tuple[nn.ConvFilter, ...]:
        return (self.cf1, self.cf2, self.cf3, self.cf4)

    @property
    def param_count(self) -> int:
        return sum(f.n_params for f in self.filters)

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.append(f.kernel.ravel(), f.bias) for f in self.filters])

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {theta.shape}")
        k = 0
        for f in self.filters:
            size = f.kernel.size
            f.kernel = theta[k:k + size].reshape(f.shape).copy()
            f.bias = float(theta[k + size])
            k += size + 1

    def copy(self) -> "HemCNNModel":
        return HemCNNModel(*(f.copy() for f in self.filters), variant=self.variant, layout=self.layout)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "layout_fingerprint": self.layout.fingerprint,
            "layout": self.layout.to_dict(),
            "filters": {name: f.to_dict() for name, f in zip(FILTER_NAMES, self.filters)},
        }

    @classmethod
    def from_dict(cls, d: dict, layout: ChannelLayout | None = None) -> "HemCNNModel":
        stored = ChannelLayout.from_dict(d["layout"]) if "layout" in d else DEFAULT_LAYOUT
        if d.get("layout_fingerprint") != stored.fingerprint:
            raise DataError("model file is inconsistent: layout fingerprint does not match its layout")
        if layout is not None and layout.fingerprint != stored.fingerprint:
            raise DataError(
                f"model layout fingerprint {stored.fingerprint} does not match dataset layout {layout.fingerprint}"
            )
        filters = [nn.ConvFilter.from_dict(d["filters"][name]) for name in FILTER_NAMES]
        return cls(*filters, variant=Variant(d["variant"]), layout=stored)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, layout: ChannelLayout | None = None) -> "HemCNNModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), layout)


def build(variant=Variant.BOTH, rng: np.random.Generator | None = None,
          layout: ChannelLayout = DEFAULT_LAYOUT) -> HemCNNModel:
    variant = Variant(variant)
    if layout.n_rows != 48:
        raise ValueError("HemCNN geometry is fixed to the 24-channel layout")
    rng = np.random.default_rng() if rng is None else rng
    filters = [nn.init_filter(m, n, rng, stride) for (m, n), stride in ARCHITECTURE[variant]]
    return HemCNNModel(*filters, variant=variant, layout=layout)


def select_rows(x: np.ndarray, variant: Variant) -> np.ndarray:
    """Pick the variant's input rows out of a 48-row HbO/HbR matrix."""
    variant = Variant(variant)
    if variant is Variant.BOTH:
        return x
    return x[..., 0::2, :] if variant is Variant.HBO_ONLY else x[..., 1::2, :]


def _check_input(model: HemCNNModel, x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-2:] != (model.variant.n_input_rows, INPUT_COLS):
        raise ValueError(
            f"{model.variant.value} input must be {model.variant.n_input_rows}x{INPUT_COLS}, got shape {x.shape}"
        )


def forward(model: HemCNNModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Log-probabilities and the retained layer maps.

    ``x`` is ``(rows, cols)`` or ``(batch, rows, cols)``. Returns
    ``(logp, [CL1, CL2, CL3, logits])`` where ``logits`` has shape
    ``(..., 2, 1)`` and ``logp`` ``(..., 2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(model, x)
    cl1 = nn.elu(nn.conv2d_forward(x, model.cf1))
    cl2 = nn.elu(nn.conv2d_forward(cl1, model.cf2))
    cl3 = nn.elu(nn.conv2d_forward(cl2, model.cf3))
    logits = nn.conv2d_forward(cl3, model.cf4)
    return nn.log_softmax(logits[..., 0]), [cl1, cl2, cl3, logits]


def loss_and_grad(model: HemCNNModel, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the flat parameters."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    labels = np.asarray(labels, dtype=np.intp).reshape(x.shape[0])
    _check_input(model, x)
    z1 = nn.conv2d_forward(x, model.cf1)
    a1 = nn.elu(z1)
    z2 = nn.conv2d_forward(a1, model.cf2)
    a2 = nn.elu(z2)
    z3 = nn.conv2d_forward(a2, model.cf3)
    a3 = nn.elu(z3)
    logits = nn.conv2d_forward(a3, model.cf4)[..., 0]
    logp = nn.log_softmax(logits)
    b = x.shape[0]
    loss = float(nn.nll_loss(logp, labels).mean())

    g_logits = nn.nll_grad_logits(logp, labels)[..., None] / b
    gk4, gb4, g_a3 = nn.conv2d_backward(a3, model.cf4, g_logits)
    gk3, gb3, g_a2 = nn.conv2d_backward(a2, model.cf3, nn.elu_backward(z3, g_a3))
    gk2, gb2, g_a1 = nn.conv2d_backward(a1, model.cf2, nn.elu_backward(z2, g_a2))
    gk1, gb1, _ = nn.conv2d_backward(x, model.cf1, nn.elu_backward(z1, g_a1), need_input_grad=False)
    grad = np.concatenate([
        np.append(gk1.ravel(), gb1), np.append(gk2.ravel(), gb2),
        np.append(gk3.ravel(), gb3), np.append(gk4.ravel(), gb4),
    ])
    return loss, grad


def predict(model: HemCNNModel, x) -> Hand | np.ndarray:
    """Argmax hand; an exact logit tie goes to Left."""
    logp, _ = forward(model, x)
    right = logp[..., 1] > logp[..., 0]
    if right.ndim == 0:
        return Hand.RIGHT if right else Hand.LEFT
    return right.astype(np.intp)


# ---------------------------------------------------------------------------
# training-time input handling


@dataclass(frozen=True)
class DropoutConfig:
    apply_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")


def hemisphere_dropout(x: np.ndarray, cfg: DropoutConfig, rng: np.random.Generator,
                       hemisphere: Hemisphere | None = None) -> np.ndarray:
    """Zero all rows of one hemisphere with probability ``apply_probability``.

    ``hemisphere`` forces the side (when the mask is applied); by default it
    is drawn uniformly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] % 2:
        raise ValueError("row count must split evenly into hemispheres")
    if cfg.apply_probability <= 0.0 or rng.random() >= cfg.apply_probability:
        return x
    side = Hemisphere(int(rng.integers(2))) if hemisphere is None else Hemisphere(hemisphere)
    half = x.shape[-2] // 2
    out = x.copy()
    if side == Hemisphere.LEFT:
        out[..., :half, :] = 0.0
    else:
        out[..., half:, :] = 0.0
    return out


@dataclass(frozen=True)
class AugmentConfig:
    folds: int = 5
    crop_len_s: float = CROP_LEN_S
    crop_source_window_s: tuple[float, float] = (0.0, 35.0)
    scale_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < min <= max")
        a, b = self.crop_source_window_s
        if a < 0 or b - a < self.crop_len_s:
            raise ValueError("crop source window shorter than crop length")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        object.__setattr__(self, "crop_source_window_s", (float(a), float(b)))


def model_input(trial: TrialRecord, start_s: float = 0.0, len_s: float = CROP_LEN_S,
                scale: float = 1.0, epsilon: float = 1e-8) -> np.ndarray:
    """Crop, scale and z-score one trial into a 48 x 38 network input."""
    check_stage(trial, Stage.PREPROCESSED)
    return zscore_matrix(scale * crop_window(trial, start_s, len_s), epsilon)


def augment(trials, cfg: AugmentConfig, rng: np.random.Generator, epsilon: float = 1e-8
            ) -> tuple[np.ndarray, np.ndarray]:
    """``folds`` random crops per trial, each scaled by U(scale_range) then z-scored.

    Returns ``(X, labels)`` with ``X`` of shape ``(folds * len(trials), 48, width)``.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no trials to augment")
    a, b = cfg.crop_source_window_s
    xs, ys = [], []
    for trial in trials:
        check_stage(trial, Stage.PREPROCESSED)
        width = int(round(cfg.crop_len_s * trial.fs))
        first = int(round(a * trial.fs))
        last = int(round(b * trial.fs))
        if trial.n_samples < last:
            raise DataError(f"trial {trial.trial_id} is {trial.duration:.2f}s, shorter than the {b}s source window")
        n_pos = last - first - width + 1
        for _ in range(cfg.folds):
            start = first + int(rng.integers(n_pos))
            scale = rng.uniform(*cfg.scale_range)
            xs.append(zscore_matrix(scale * trial.data[:, start:start + width], epsilon))
            ys.append(int(trial.hand))
    return np.stack(xs), np.array(ys, dtype=np.intp)


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle and cut into batches with the two classes spread evenly.

    Each class is shuffled and dealt across ``ceil(n / batch_size)`` batches,
    so equal class counts give exact half/half batches and every batch's
    class counts stay within one of the overall class ratio.
    """
    labels = np.asarray(labels)
    n_batches = -(-labels.size // batch_size)
    left = rng.permutation(np.flatnonzero(labels == Hand.LEFT))
    right = rng.permutation(np.flatnonzero(labels == Hand.RIGHT))
    # deal left-heavy parts first and right-heavy parts last so batch sizes even out
    lparts = np.array_split(left, n_batches)
    rparts = np.array_split(right, n_batches)[::-1]
    batches = [np.concatenate([l, r]) for l, r in zip(lparts, rparts)]
    order = rng.permutation(n_batches)
    return [rng.permutation(batches[i]) for i in order if batches[i].size]


@dataclass
class TrainResult:
    model: HemCNNModel
    loss_trace: list[float]


def train(model: HemCNNModel, X: np.ndarray, labels: np.ndarray, schedule: nn.TrainSchedule = nn.TrainSchedule(),
          dropout: DropoutConfig = DropoutConfig(), rng: np.random.Generator | None = None) -> TrainResult:
    """Mini-batch Adam training; returns a trained copy and per-epoch mean loss."""
    X = select_rows(np.asarray(X, dtype=np.float64), model.variant)
    labels = np.asarray(labels, dtype=np.intp)
    if X.shape[0] == 0 or X.shape[0] != labels.size:
        raise ValueError("examples and labels must be non-empty and of equal length")
    if np.unique(labels).size < 2:
        raise ValueError("training set holds a single class")
    rng = np.random.default_rng() if rng is None else rng
    model = model.copy()
    theta = model.get_params()
    state = nn.AdamState.zeros(theta.size, schedule.weight_decay)
    trace = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at_epoch(schedule, epoch)
        losses, sizes = [], []
        for idx in balanced_batches(labels, schedule.batch_size, rng):
            xb = np.stack([hemisphere_dropout(X[i], dropout, rng) for i in idx])
            loss, grad = loss_and_grad(model, xb, labels[idx])
            theta = nn.adam_step(theta, grad, state, lr)
            model.set_params(theta)
            losses.append(loss)
            sizes.append(idx.size)
        trace.append(float(np.average(losses, weights=sizes)))
    return TrainResult(model, trace)

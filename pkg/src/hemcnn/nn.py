"""Small deterministic training engine.

Everything here works on float64 numpy arrays. A "map" is a 2-D array
``(rows, cols)``; every function also accepts leading batch dimensions
``(..., rows, cols)`` so a whole mini-batch runs through one call.

Only ``np.einsum`` (non-BLAS) reductions are used, which keeps results
bit-identical across processes and thread settings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ConvFilter:
    """One single-channel convolution filter: kernel, scalar bias and stride."""

    kernel: np.ndarray
    bias: float = 0.0
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 2 or min(self.kernel.shape) < 1:
            raise ValueError(f"kernel must be a non-empty 2-D array, got shape {self.kernel.shape}")
        self.stride = (int(self.stride[0]), int(self.stride[1]))
        if min(self.stride) < 1:
            raise ValueError(f"stride entries must be >= 1, got {self.stride}")
        self.bias = float(self.bias)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kernel.shape

    @property
    def n_params(self) -> int:
        return self.kernel.size + 1

    def copy(self) -> "ConvFilter":
        return ConvFilter(self.kernel.copy(), self.bias, self.stride)

    def to_dict(self) -> dict:
        return {"kernel": self.kernel.tolist(), "bias": self.bias, "stride": list(self.stride)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvFilter":
        return cls(np.array(d["kernel"], dtype=np.float64), d["bias"], tuple(d["stride"]))


def conv_output_shape(in_shape, kernel_shape, stride) -> tuple[int, int]:
    """Valid-convolution output size, ``floor((d - k) / s) + 1`` per axis."""
    rows, cols = in_shape
    m, n = kernel_shape
    if rows < m or cols < n:
        raise ValueError(f"kernel {m}x{n} larger than input {rows}x{cols}")
    return (rows - m) // stride[0] + 1, (cols - n) // stride[1] + 1


def _windows(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    """Strided view ``(..., out_rows, out_cols, m, n)`` of every kernel placement."""
    m, n = f.shape
    sr, sc = f.stride
    win = sliding_window_view(x, (m, n), axis=(-2, -1))
    return win[..., ::sr, ::sc, :, :]


def conv2d_forward(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    """Valid cross-correlation of ``x`` with ``f`` (no kernel flip, no padding)."""
    x = np.asarray(x, dtype=np.float64)
    conv_output_shape(x.shape[-2:], f.shape, f.stride)
    return np.einsum("...ijab,ab->...ij", _windows(x, f), f.kernel) + f.bias


def conv2d_backward(x: np.ndarray, f: ConvFilter, grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of ``sum(conv2d_forward(x, f) * grad_out)``.

    Returns ``(grad_kernel, grad_bias, grad_input)``. Kernel and bias gradients
    are summed over any batch dimensions. ``grad_input`` is ``None`` when
    ``need_input_grad`` is false.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out_shape = conv_output_shape(x.shape[-2:], f.shape, f.stride)
    if grad_out.shape != x.shape[:-2] + out_shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output shape {x.shape[:-2] + out_shape}")

    win = _windows(x, f)
    grad_kernel = np.einsum("zijab,zij->ab", win.reshape((-1,) + win.shape[-4:]), grad_out.reshape((-1,) + out_shape))
    grad_bias = float(grad_out.sum())
    if not need_input_grad:
        return grad_kernel, grad_bias, None

    m, n = f.shape
    sr, sc = f.stride
    ho, wo = out_shape
    grad_input = np.zeros_like(x)
    # scatter-add, looping over whichever is smaller: kernel taps or output positions
    if m * n <= ho * wo:
        for a in range(m):
            for b in range(n):
                grad_input[..., a:a + sr * (ho - 1) + 1:sr, b:b + sc * (wo - 1) + 1:sc] += f.kernel[a, b] * grad_out
    else:
        for i in range(ho):
            for j in range(wo):
                grad_input[..., i * sr:i * sr + m, j * sc:j * sc + n] += grad_out[..., i, j, None, None] * f.kernel
    return grad_kernel, grad_bias, grad_input


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_backward(x: np.ndarray, grad_y: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return grad_y * np.where(x >= 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_loss(logp: np.ndarray, label) -> float | np.ndarray:
    """Negative log-likelihood of ``label`` under log-probabilities ``logp``."""
    logp = np.asarray(logp, dtype=np.float64)
    label = np.asarray(label, dtype=np.intp)
    return -np.take_along_axis(logp, label[..., None], axis=-1)[..., 0]


def nll_grad_logits(logp: np.ndarray, label) -> np.ndarray:
    """d nll / d logits for a log-softmax head: ``softmax - onehot``."""
    logp = np.asarray(logp, dtype=np.float64)
    g = np.exp(logp)
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, np.asarray(label, dtype=np.intp)[..., None], 1.0, axis=-1)
    return g - onehot


@dataclass
class AdamState:
    """Adam moments for one flat parameter vector (L2 decay coupled into the gradient)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    weight_decay: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, n: int, weight_decay: float = 1e-3) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, weight_decay)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One Adam update; advances ``state`` in place and returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    g = grads + state.weight_decay * params
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainSchedule:
    lr0: float = 0.03
    decay_per_epoch: float = 0.9
    epochs: int = 15
    batch_size: int = 10
    weight_decay: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.decay_per_epoch <= 1.0:
            raise ValueError(f"decay_per_epoch must lie in (0, 1], got {self.decay_per_epoch}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("lr0 and weight_decay must be non-negative")


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr0 * schedule.decay_per_epoch ** epoch


def init_filter(m: int, n: int, rng: np.random.Generator, stride=(1, 1)) -> ConvFilter:
    """Uniform(-L, L) kernel with L = sqrt(6 / (m*n + 1)); zero bias."""
    if m < 1 or n < 1:
        raise ValueError("filter dims must be >= 1")
    limit = math.sqrt(6.0 / (m * n + 1))
    return ConvFilter(rng.uniform(-limit, limit, size=(m, n)), 0.0, stride)

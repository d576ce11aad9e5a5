"""Minimal dense-array engine: the forward/backward ops a searchable conv net needs.

Arrays are plain numpy ndarrays, NCHW for images, float32 by default.  Every
forward op has a matching backward that returns input/weight gradients; ops
preserve the dtype they are given so tests can run the same math in float64.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParseError, ShapeError

DEFAULT_DTYPE = np.float32

CHECKPOINT_FORMAT = "netshrink-checkpoint-v1"


class Parameter:
    """A trainable array paired with a gradient of the same shape.

    The gradient accumulates additively across backward passes until
    ``zero_grad`` is called.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.value.astype(dtype), self.name)
        p.grad = self.grad.astype(dtype)
        return p

    def __repr__(self) -> str:
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape})"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Same-padding 2-D convolution (cross-correlation), NCHW in, NCHW out.

    x: [N, C, H, W], w: [F, C, k, k] with k odd.  Output spatial extents are
    ceil(H/stride) x ceil(W/stride); padding value is 0.
    """
    _require(x.ndim == 4, f"conv input must be 4-D NCHW, got rank {x.ndim}")
    _require(w.ndim == 4, f"conv weights must be 4-D [F,C,k,k], got rank {w.ndim}")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    _require(kh == kw, f"kernel must be square, got {kh}x{kw} on axes (2,3)")
    _require(kh % 2 == 1, f"kernel size must be odd, got {kh}")
    _require(
        wc == c,
        f"channel axis mismatch: input axis 1 has {c} channels, weight axis 1 expects {wc}",
    )
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    _require(
        h >= kh and wd >= kw,
        f"spatial extents ({h}x{wd}) must be >= kernel ({kh}) on axes (2,3)",
    )
    pad = (kh - 1) // 2
    h_out = -(-h // stride)
    w_out = -(-wd // stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, H_out, W_out, k, k] -> cols: [N, H_out*W_out, C*k*k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c * kh * kw)
    y = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(n, f, h_out, w_out))


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward: returns (dx, dw) for upstream gradient dy."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    _, _, h_out, w_out = dy.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c * k * k)
    dyc = dy.reshape(n, f, h_out * w_out).transpose(0, 2, 1)  # [N, P, F]
    dw = np.einsum("npf,npc->fc", dyc, cols).reshape(w.shape)
    dcols = dyc @ w.reshape(f, -1)  # [N, P, C*k*k]
    dwin = dcols.reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += dwin[
                :, :, :, :, u, v
            ]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(dx), dw


def dense_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x: [N, D], w: [O, D] -> [N, O]."""
    _require(x.ndim == 2, f"dense input must be 2-D [N,D], got rank {x.ndim}")
    _require(w.ndim == 2, f"dense weights must be 2-D [O,D], got rank {w.ndim}")
    _require(
        x.shape[1] == w.shape[1],
        f"inner axis mismatch: input axis 1 has {x.shape[1]}, weight axis 1 has {w.shape[1]}",
    )
    return x @ w.T


def dense_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dx = dy @ w
    dw = dy.T @ x
    return dx, dw


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, C] channel means."""
    _require(x.ndim == 4, f"pool input must be 4-D NCHW, got rank {x.ndim}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = input_shape
    return np.broadcast_to((dy / (h * w))[:, :, None, None], input_shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    _require(logits.ndim == 2, f"logits must be 2-D [N,classes], got rank {logits.ndim}")
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def sgd_step(params: list[Parameter], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p), in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for p in params:
        p.value -= lr * (p.grad + weight_decay * p.value)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as a versioned JSON map: name -> {shape, flat data}."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
            for name, arr in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by save_checkpoint. Returns (tensors, meta)."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"checkpoint {path} is not valid JSON at offset {e.pos}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(
            f"checkpoint {path}: unknown format {payload.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    tensors = {}
    for name, entry in payload["tensors"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=DEFAULT_DTYPE)
        if data.size != int(np.prod(shape)):
            raise ParseError(
                f"checkpoint {path}: tensor {name} has {data.size} values, "
                f"shape {shape} needs {int(np.prod(shape))}"
            )
        tensors[name] = data.reshape(shape)
    return tensors, payload.get("meta", {})

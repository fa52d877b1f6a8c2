"""Dense layer primitives with hand-written forward and backward passes.

Tensors are plain numpy arrays in NHWC layout (batch first).  Every
``*_backward`` function returns the gradient with respect to its input and,
for layers with parameters, accumulates into ``params.weight_grads`` /
``params.bias_grads``.
"""
from __future__ import annotations

import struct
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv", "relu", "rn", "maxpool", "fc", "logistic")


class ConfigError(ValueError):
    """Raised when a layer or network configuration is inconsistent."""


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    kernels: int = 0
    size: int = 0
    channels: int | None = None
    stride: int = 1
    pad: int = 0
    window: int = 3
    outputs: int = 0
    rn_k: float = 2.0
    rn_n: int = 5
    rn_alpha: float = 1e-4
    rn_beta: float = 0.75

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "maxpool" and self.stride == 1:
            self.stride = 2
        if not self.name:
            self.name = self.kind

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "conv":
            d.update(kernels=self.kernels, size=self.size, stride=self.stride, pad=self.pad)
            if self.channels is not None:
                d["channels"] = self.channels
        elif self.kind == "maxpool":
            d.update(window=self.window, stride=self.stride)
        elif self.kind == "fc":
            d.update(outputs=self.outputs)
        elif self.kind == "rn":
            d.update(rn_k=self.rn_k, rn_n=self.rn_n, rn_alpha=self.rn_alpha, rn_beta=self.rn_beta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray
    weight_grads: np.ndarray = field(default=None)
    bias_grads: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weight_grads is None:
            self.weight_grads = np.zeros_like(self.weights)
        if self.bias_grads is None:
            self.bias_grads = np.zeros_like(self.biases)

    def zero_grad(self):
        self.weight_grads[...] = 0
        self.bias_grads[...] = 0


def init_params(spec: LayerSpec, in_shape: tuple, rng: np.random.Generator,
                std: float | str = 0.01, dtype=np.float64) -> LayerParams:
    """Gaussian initialisation with zero biases.

    ``std`` may be a number or ``"he"`` for sqrt(2 / fan_in).
    """
    if spec.kind == "conv":
        c = in_shape[-1]
        shape = (spec.kernels, spec.size, spec.size, c)
        nb = spec.kernels
    elif spec.kind == "fc":
        shape = (spec.outputs, int(np.prod(in_shape)))
        nb = spec.outputs
    else:
        raise ConfigError(f"layer {spec.name} has no parameters")
    fan_in = int(np.prod(shape[1:]))
    scale = np.sqrt(2.0 / fan_in) if std == "he" else float(std)
    w = (rng.standard_normal(shape) * scale).astype(dtype)
    return LayerParams(w, np.zeros(nb, dtype=dtype))


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Shape inference for a single (unbatched) input shape."""
    if spec.kind == "conv":
        if len(in_shape) != 3:
            raise ConfigError(f"{spec.name}: conv expects HxWxC input, got {in_shape}")
        h, w, c = in_shape
        if spec.channels is not None and spec.channels != c:
            raise ConfigError(
                f"{spec.name}: kernel channel count {spec.channels} != input channels {c}")
        ho = (h + 2 * spec.pad - spec.size) // spec.stride + 1
        wo = (w + 2 * spec.pad - spec.size) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{spec.name}: kernel {spec.size} too large for input {in_shape}")
        return (ho, wo, spec.kernels)
    if spec.kind == "maxpool":
        if len(in_shape) != 3:
            raise ConfigError(f"{spec.name}: maxpool expects HxWxC input, got {in_shape}")
        h, w, c = in_shape
        ho = (h - spec.window) // spec.stride + 1
        wo = (w - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"{spec.name}: pooling window too large for input {in_shape}")
        return (ho, wo, c)
    if spec.kind == "fc":
        return (spec.outputs,)
    if spec.kind == "rn" and len(in_shape) != 3:
        raise ConfigError(f"{spec.name}: response normalisation expects HxWxC input")
    return tuple(in_shape)


def _check_input(x: np.ndarray, spec: LayerSpec, params: LayerParams | None = None):
    if spec.kind == "conv":
        if x.ndim != 4:
            raise ConfigError(f"{spec.name}: expected NHWC input, got shape {x.shape}")
        if params.weights.shape[3] != x.shape[3]:
            raise ConfigError(
                f"{spec.name}: kernel channels {params.weights.shape[3]} != input channels {x.shape[3]}")
    elif spec.kind == "fc":
        n_in = int(np.prod(x.shape[1:]))
        if params.weights.shape[1] != n_in:
            raise ConfigError(
                f"{spec.name}: fc expects {params.weights.shape[1]} inputs, got {n_in}")
    elif spec.kind in ("maxpool", "rn") and x.ndim != 4:
        raise ConfigError(f"{spec.name}: expected NHWC input, got shape {x.shape}")


# -- convolution -----------------------------------------------------------

def _im2col(x: np.ndarray, size: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C) to match (k, h, w, c) weights
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return cols, ho, wo


def conv_forward(x: np.ndarray, params: LayerParams, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec, params)
    k = params.weights.shape[0]
    cols, ho, wo = _im2col(x, spec.size, spec.stride, spec.pad)
    out = cols @ params.weights.reshape(k, -1).T
    out += params.biases
    return out.reshape(x.shape[0], ho, wo, k)


def conv_backward(x: np.ndarray, grad: np.ndarray, params: LayerParams,
                  spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec, params)
    k, kh, kw, c = params.weights.shape
    cols, ho, wo = _im2col(x, spec.size, spec.stride, spec.pad)
    n = x.shape[0]
    if grad.shape != (n, ho, wo, k):
        raise ConfigError(f"{spec.name}: upstream gradient shape {grad.shape} != {(n, ho, wo, k)}")
    g2 = grad.reshape(-1, k)
    params.weight_grads += (g2.T @ cols).reshape(params.weights.shape)
    params.bias_grads += g2.sum(axis=0)
    dcols = (g2 @ params.weights.reshape(k, -1)).reshape(n, ho, wo, kh, kw, c)
    p, s = spec.pad, spec.stride
    dxp = np.zeros((n, x.shape[1] + 2 * p, x.shape[2] + 2 * p, c), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
    if p:
        dxp = dxp[:, p:-p, p:-p, :]
    return dxp


# -- rectifier ---------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


# -- max pooling -------------------------------------------------------------

def maxpool_forward(x: np.ndarray, spec: LayerSpec, with_argmax: bool = True):
    """Returns ``(output, argmax)``; argmax indexes the flattened window.

    Ties resolve to the first window position, as ``np.argmax`` would.
    """
    _check_input(x, spec)
    s, w = spec.stride, spec.window
    ho = (x.shape[1] - w) // s + 1
    wo = (x.shape[2] - w) // s + 1
    out = x[:, 0:s * ho:s, 0:s * wo:s].copy()
    arg = np.zeros(out.shape, dtype=np.intp) if with_argmax else None
    for i in range(w):
        for j in range(w):
            if i == 0 and j == 0:
                continue
            v = x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            if with_argmax:
                hit = v > out
                arg[hit] = i * w + j
            np.maximum(out, v, out=out)
    return out, arg


def maxpool_backward(x: np.ndarray, grad: np.ndarray, argmax: np.ndarray,
                     spec: LayerSpec) -> np.ndarray:
    if grad.shape != argmax.shape:
        raise ConfigError(f"{spec.name}: upstream gradient shape {grad.shape} != {argmax.shape}")
    s, w = spec.stride, spec.window
    ho, wo = grad.shape[1:3]
    dx = np.zeros(x.shape, dtype=grad.dtype)
    for i in range(w):
        for j in range(w):
            hit = argmax == i * w + j
            dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += np.where(hit, grad, 0)
    return dx


# -- cross-channel response normalisation ------------------------------------

def _channel_window_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum over channels c - n//2 .. c + n//2 (clipped) for every channel c."""
    c = a.shape[-1]
    out = a.copy()
    for d in range(1, n // 2 + 1):
        out[..., d:] += a[..., :c - d]
        out[..., :c - d] += a[..., d:]
    return out


def _neg_power(d: np.ndarray, beta: float) -> np.ndarray:
    if beta == 0.75:
        # d ** -0.75 via square roots; pow is several times slower
        r = np.sqrt(d)
        r *= np.sqrt(r)
        return 1.0 / r
    return d ** -beta


def response_norm_forward(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    denom = spec.rn_k + spec.rn_alpha * _channel_window_sum(x * x, spec.rn_n)
    return x * _neg_power(denom, spec.rn_beta)


def response_norm_backward(x: np.ndarray, grad: np.ndarray, spec: LayerSpec) -> np.ndarray:
    if grad.shape != x.shape:
        raise ConfigError(f"{spec.name}: upstream gradient shape {grad.shape} != {x.shape}")
    beta = spec.rn_beta
    denom = spec.rn_k + spec.rn_alpha * _channel_window_sum(x * x, spec.rn_n)
    # window is symmetric, so the same windowed sum routes the cross terms back
    scale = _neg_power(denom, beta)
    cross = _channel_window_sum(grad * x * scale / denom, spec.rn_n)
    return grad * scale - 2 * spec.rn_alpha * beta * x * cross


# -- fully connected -----------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec, params)
    return x.reshape(x.shape[0], -1) @ params.weights.T + params.biases


def fc_backward(x: np.ndarray, grad: np.ndarray, params: LayerParams,
                spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec, params)
    if grad.shape != (x.shape[0], params.weights.shape[0]):
        raise ConfigError(f"{spec.name}: upstream gradient shape {grad.shape} is wrong")
    flat = x.reshape(x.shape[0], -1)
    params.weight_grads += grad.T @ flat
    params.bias_grads += grad.sum(axis=0)
    return (grad @ params.weights).reshape(x.shape)


# -- logistic output ---------------------------------------------------------

def logistic_forward(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    p = logistic_forward(x)
    return grad * p * (1.0 - p)


# -- optimiser -----------------------------------------------------------------

def sgd_step(params: LayerParams, learning_rate: float, momentum: float = 0.0,
             velocity: dict | None = None, weight_decay: float = 0.0):
    """Plain SGD by default; momentum and weight decay are opt-in."""
    gw, gb = params.weight_grads, params.bias_grads
    if weight_decay:
        gw = gw + weight_decay * params.weights
    if momentum and velocity is not None:
        key = id(params)
        vw, vb = velocity.get(key, (np.zeros_like(gw), np.zeros_like(gb)))
        vw = momentum * vw + gw
        vb = momentum * vb + gb
        velocity[key] = (vw, vb)
        gw, gb = vw, vb
    params.weights -= learning_rate * gw
    params.biases -= learning_rate * gb
    params.zero_grad()


# -- checkpoint format -------------------------------------------------------
#
# magic(8) | version u32 | manifest length u32 | manifest json | raw data
# All integers and array payloads are little-endian.

CKPT_MAGIC = b"JTLCKPT\x00"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[16:16 + mlen])
    base = 16 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, manifest["meta"]

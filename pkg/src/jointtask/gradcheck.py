"""Central finite-difference checks of every layer's backward pass."""
from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .tensor_core import LayerSpec

FD_EPS = 1e-5
TOLERANCE = 1e-4
KINDS = ("conv", "relu", "rn", "maxpool", "fc", "logistic")


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((num / den).max()) if num.size else 0.0


def _random_case(kind: str, rng: np.random.Generator):
    n = int(rng.integers(1, 3))
    if kind == "conv":
        size = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        c = int(rng.integers(1, 4))
        hw = int(rng.integers(size + 1, 7))
        spec = LayerSpec("conv", kernels=int(rng.integers(1, 4)), size=size, stride=stride, pad=pad)
        x = rng.standard_normal((n, hw, hw, c))
    elif kind == "maxpool":
        spec = LayerSpec("maxpool")
        hw = int(rng.integers(3, 8))
        x = rng.standard_normal((n, hw, hw, int(rng.integers(1, 4))))
    elif kind == "rn":
        # large alpha so the cross-channel term matters in the check
        spec = LayerSpec("rn", rn_n=int(rng.choice([3, 5])), rn_alpha=float(rng.uniform(0.05, 0.5)),
                         rn_k=float(rng.uniform(1.0, 2.0)), rn_beta=0.75)
        x = rng.standard_normal((n, 3, 3, int(rng.integers(2, 8))))
    elif kind == "fc":
        spec = LayerSpec("fc", outputs=int(rng.integers(1, 6)))
        x = rng.standard_normal((n, int(rng.integers(1, 4)), 2, 2))
    elif kind == "relu":
        spec = LayerSpec("relu")
        x = rng.standard_normal((n, 3, 3, 2))
        x[np.abs(x) < 1e-3] += 0.01  # keep away from the kink
    else:
        spec = LayerSpec("logistic")
        x = rng.uniform(-4, 4, (n, 7))
    params = tc.init_params(spec, x.shape[1:], rng, 0.5) if spec.has_params else None
    if params is not None:
        params.biases[...] = rng.standard_normal(params.biases.shape)
    return spec, x, params


def _forward(spec, x, params):
    if spec.kind == "conv":
        return tc.conv_forward(x, params, spec), None
    if spec.kind == "relu":
        return tc.relu_forward(x), None
    if spec.kind == "rn":
        return tc.response_norm_forward(x, spec), None
    if spec.kind == "maxpool":
        return tc.maxpool_forward(x, spec)
    if spec.kind == "fc":
        return tc.fc_forward(x, params, spec), None
    return tc.logistic_forward(x), None


def _backward(spec, x, grad, params, aux):
    if spec.kind == "conv":
        return tc.conv_backward(x, grad, params, spec)
    if spec.kind == "relu":
        return tc.relu_backward(x, grad)
    if spec.kind == "rn":
        return tc.response_norm_backward(x, grad, spec)
    if spec.kind == "maxpool":
        return tc.maxpool_backward(x, grad, aux, spec)
    if spec.kind == "fc":
        return tc.fc_backward(x, grad, params, spec)
    return tc.logistic_backward(x, grad)


def check_layer(kind: str, rng: np.random.Generator, corrupt: str | None = None) -> float:
    """Max relative error over input and parameter gradients for one random case."""
    spec, x, params = _random_case(kind, rng)
    out, aux = _forward(spec, x, params)
    r = rng.standard_normal(out.shape)

    def loss():
        return float((_forward(spec, x, params)[0] * r).sum())

    dx = _backward(spec, x, r, params, aux)
    if corrupt == kind:
        dx = dx * 1.01
        if params is not None:
            params.weight_grads *= 1.01
    errs = [rel_error(dx, numeric_grad(loss, x))]
    if params is not None:
        errs.append(rel_error(params.weight_grads, numeric_grad(loss, params.weights)))
        errs.append(rel_error(params.bias_grads, numeric_grad(loss, params.biases)))
    return max(errs)


def run_gradcheck(n_configs: int = 20, seed: int = 0, kinds=KINDS,
                  corrupt: str | None = None) -> dict:
    """Max relative error per layer kind over ``n_configs`` random cases each."""
    rng = np.random.default_rng(seed)
    return {k: max(check_layer(k, rng, corrupt) for _ in range(n_configs)) for k in kinds}

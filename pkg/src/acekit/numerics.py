"""Dense-network numerics: forward pass, exact backprop, activations, Adam,
and a finite-difference gradient oracle.

Everything runs at double precision so gradient checks can be tight.
Parameter containers are treated as immutable values; updates return new ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Published constants of the scaled exponential linear unit.
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805

LEAKY_RELU_SLOPE = 0.01

ACTIVATION_KINDS = ("selu", "relu", "leaky_relu", "tanh", "sigmoid", "linear")

_CHECKPOINT_MAGIC = b"ACEKIT-MLP"
_CHECKPOINT_VERSION = 1


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "selu":
        return SELU_LAMBDA * np.where(z > 0.0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_RELU_SLOPE * z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        e = np.exp(-np.abs(z))
        return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if kind == "linear":
        return z
    raise ValueError(f"unknown activation kind: {kind!r}")


def _act_deriv(kind: str, z: np.ndarray) -> np.ndarray:
    # Derivative w.r.t. the pre-activation z. At the kink of the piecewise
    # kinds we take the z <= 0 branch, matching the value branch split.
    if kind == "selu":
        return SELU_LAMBDA * np.where(z > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    if kind == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_RELU_SLOPE)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = _act("sigmoid", z)
        return s * (1.0 - s)
    if kind == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_apply(kind: str, x: float) -> float:
    """Apply one activation function to a scalar. Rejects non-finite input."""
    if not np.isfinite(x):
        raise ValueError(f"activation input must be finite, got {x!r}")
    return float(_act(kind, np.float64(x)))


@dataclass
class MlpParameters:
    """Weights, biases and activation schedule of one feed-forward network.

    Layer k maps in_k -> out_k with weight shape (out_k, in_k); adjacent
    layer dimensions must chain. The output layer uses ``output_activation``,
    every other layer uses ``hidden_activation``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "selu"
    output_activation: str = "linear"

    def __post_init__(self):
        for kind in (self.hidden_activation, self.output_activation):
            if kind not in ACTIVATION_KINDS:
                raise ValueError(f"unknown activation kind: {kind!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have the same layer count")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} do not agree")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k}: in-dim {w.shape[1]} does not chain with "
                    f"previous out-dim {self.weights[k - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k}: parameters contain non-finite values")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1] if self.weights else 0

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0] if self.weights else 0

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        return [(w.shape[0], w.shape[1]) for w in self.weights]

    def activation_of(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation

    def copy(self) -> "MlpParameters":
        return MlpParameters(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations recorded by mlp_forward."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    squeezed: bool


@dataclass
class GradientBundle:
    """Gradients mirroring MlpParameters shapes, plus the input gradient."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_gradient: np.ndarray


def init_mlp(
    layer_sizes: Sequence[int],
    hidden_activation: str = "selu",
    output_activation: str = "linear",
    rng: np.random.Generator | None = None,
    final_layer_scale: float = 1.0,
) -> MlpParameters:
    """Build an MLP with uniform fan-in initialization.

    Weights and biases of each layer are drawn from U(-1/sqrt(fan_in),
    +1/sqrt(fan_in)); the last layer is scaled by ``final_layer_scale``
    (actors use 1e-3 so initial actions sit near zero).
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    rng = np.random.default_rng() if rng is None else rng
    weights, biases = [], []
    n = len(layer_sizes) - 1
    for k in range(n):
        fan_in, fan_out = layer_sizes[k], layer_sizes[k + 1]
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if k == n - 1:
            w *= final_layer_scale
            b *= final_layer_scale
        weights.append(w)
        biases.append(b)
    return MlpParameters(weights, biases, hidden_activation, output_activation)


def mlp_forward(params: MlpParameters, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a single input vector or a (batch, in) matrix.

    Returns the output plus a cache sufficient for an exact backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"input must be 1-D or 2-D, got ndim={x.ndim}")
    if params.weights and x.shape[1] != params.input_dim:
        raise ValueError(f"input length {x.shape[1]} != first layer in-dim {params.input_dim}")

    layer_inputs, pre_acts = [], []
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        pre_acts.append(z)
        h = _act(params.activation_of(k), z)
    out = h[0] if squeezed else h
    return out, ForwardCache(layer_inputs, pre_acts, squeezed)


def mlp_backward(params: MlpParameters, cache: ForwardCache, upstream: np.ndarray) -> GradientBundle:
    """Exact gradients of (output . upstream) w.r.t. parameters and input.

    For a batched cache the upstream must be (batch, out) and parameter
    gradients are summed over the batch; the input gradient stays per-row.
    """
    if len(cache.pre_activations) != params.n_layers:
        raise ValueError(
            f"cache has {len(cache.pre_activations)} layers, params have {params.n_layers}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if cache.squeezed:
        if upstream.shape != (params.output_dim,) and params.weights:
            raise ValueError(f"upstream shape {upstream.shape} != ({params.output_dim},)")
        upstream = upstream[None, :]
    batch = cache.layer_inputs[0].shape[0] if params.weights else upstream.shape[0]
    if params.weights and upstream.shape != (batch, params.output_dim):
        raise ValueError(f"upstream shape {upstream.shape} != ({batch}, {params.output_dim})")

    weight_grads: list[np.ndarray] = [np.empty(0)] * params.n_layers
    bias_grads: list[np.ndarray] = [np.empty(0)] * params.n_layers
    delta = upstream
    for k in range(params.n_layers - 1, -1, -1):
        z = cache.pre_activations[k]
        if z.shape[1] != params.weights[k].shape[0]:
            raise ValueError(f"layer {k}: cache width {z.shape[1]} does not match params")
        delta = delta * _act_deriv(params.activation_of(k), z)
        weight_grads[k] = delta.T @ cache.layer_inputs[k]
        bias_grads[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
    input_grad = delta[0] if cache.squeezed else delta
    return GradientBundle(weight_grads, bias_grads, input_grad)


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair of arrays per parameter tensor."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: MlpParameters, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        0, beta1, beta2, epsilon,
    )


def adam_step(
    params: MlpParameters,
    grads: GradientBundle,
    state: AdamState,
    learning_rate: float,
) -> tuple[MlpParameters, AdamState]:
    """One bias-corrected Adam update. Returns new parameters and state."""
    for k, (gw, gb) in enumerate(zip(grads.weight_grads, grads.bias_grads)):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError(f"layer {k}: non-finite gradient, refusing to update")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    def upd(p, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        p_new = p - learning_rate * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        return p_new, m_new, v_new

    new_w, new_b = [], []
    mw, mb, vw, vb = [], [], [], []
    for k in range(params.n_layers):
        w, m, v = upd(params.weights[k], grads.weight_grads[k], state.m_weights[k], state.v_weights[k])
        new_w.append(w); mw.append(m); vw.append(v)
        b, m, v = upd(params.biases[k], grads.bias_grads[k], state.m_biases[k], state.v_biases[k])
        new_b.append(b); mb.append(m); vb.append(v)
    new_params = MlpParameters(new_w, new_b, params.hidden_activation, params.output_activation)
    new_state = AdamState(mw, mb, vw, vb, t, b1, b2, eps)
    return new_params, new_state


def gradient_check(
    params: MlpParameters,
    x: np.ndarray,
    h: float = 1e-5,
    upstream: np.ndarray | None = None,
) -> float:
    """Compare mlp_backward against central finite differences.

    The scalar under test is f(theta) = output(theta; x) . upstream. Returns
    the worst per-tensor relative error max|analytic - fd| normalized by the
    dominant gradient magnitude of that tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    if upstream is None:
        upstream = np.ones(params.output_dim)
    upstream = np.asarray(upstream, dtype=np.float64)

    out, cache = mlp_forward(params, x)
    analytic = mlp_backward(params, cache, upstream)

    def objective(p: MlpParameters) -> float:
        y, _ = mlp_forward(p, x)
        return float(np.dot(np.ravel(y), np.ravel(upstream)))

    worst = 0.0
    for k in range(params.n_layers):
        for which, grad in (("w", analytic.weight_grads[k]), ("b", analytic.bias_grads[k])):
            tensor = params.weights[k] if which == "w" else params.biases[k]
            fd = np.zeros_like(tensor)
            it = np.nditer(tensor, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                probe = params.copy()
                target = probe.weights[k] if which == "w" else probe.biases[k]
                orig = target[idx]
                target[idx] = orig + h
                f_plus = objective(probe)
                target[idx] = orig - h
                f_minus = objective(probe)
                fd[idx] = (f_plus - f_minus) / (2.0 * h)
            scale = max(float(np.max(np.abs(grad))), float(np.max(np.abs(fd))), 1e-12)
            err = float(np.max(np.abs(grad - fd))) / scale
            worst = max(worst, err)
    return worst


def save_mlp(params: MlpParameters, path) -> None:
    """Write a self-describing binary checkpoint; round trips are bit-exact."""
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "layer_dims": [[int(o), int(i)] for o, i in params.layer_dims],
        "hidden_activation": params.hidden_activation,
        "output_activation": params.output_activation,
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_mlp(path) -> MlpParameters:
    """Read a checkpoint written by save_mlp, validating layout and version."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an acekit MLP checkpoint")
    off = len(_CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise ValueError(f"{path}: truncated checkpoint header")
    (header_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + header_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
    off += header_len
    version = header.get("format_version")
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")

    itemsize = np.dtype(header["dtype"]).itemsize
    weights, biases = [], []
    for out_dim, in_dim in header["layer_dims"]:
        n = out_dim * in_dim * itemsize
        if len(data) < off + n + out_dim * itemsize:
            raise ValueError(f"{path}: payload shorter than declared dims")
        weights.append(np.frombuffer(data, dtype=header["dtype"], count=out_dim * in_dim,
                                     offset=off).reshape(out_dim, in_dim).copy())
        off += n
        biases.append(np.frombuffer(data, dtype=header["dtype"], count=out_dim,
                                    offset=off).copy())
        off += out_dim * itemsize
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after declared payload")
    return MlpParameters(weights, biases, header["hidden_activation"], header["output_activation"])

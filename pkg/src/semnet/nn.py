"""Minimal deterministic learning substrate.

Dense feed-forward networks with hand-written backpropagation, Adam, a
finite-difference gradient checker, and named deterministic RNG streams.
The layer vocabulary is deliberately small (dense layers with relu, tanh,
sigmoid, or identity activations) so every gradient stays auditable.
All math runs in float64; losses and optimizer moments accumulate in
float64 regardless of how parameters are stored on disk.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalFault, ShapeMismatch

Rng = np.random.Generator

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSSES = ("mse", "cross_entropy", "bce")

_MASK64 = (1 << 64) - 1


def named_stream(seed: int, label: str) -> Rng:
    """Deterministic RNG stream keyed by (seed, label).

    Distinct labels give statistically independent streams, so drawing more
    values on one concern (extra channel noise, say) never perturbs another
    (weight init). Identical (seed, label, call sequence) reproduces the
    same outputs on any platform running the same build.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    sub = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _MASK64, sub])))


def _apply_activation(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))
    return z


def _activation_grad(z: np.ndarray, out: np.ndarray, tag: str) -> np.ndarray:
    # derivative expressed via cached pre-activation z or output a
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - out * out
    if tag == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass
class Layer:
    """One dense layer: y = activation(x @ weight + bias)."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation tag {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeMismatch("layer expects 2-d weight and 1-d bias")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeMismatch(
                f"weight fan-out {self.weight.shape[1]} != bias width {self.bias.shape[0]}")


@dataclass
class Mlp:
    """Feed-forward network over the fixed layer vocabulary."""

    layers: list[Layer]
    init_spec: str = "glorot_uniform"

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeMismatch(
                    f"adjacent layers incompatible: {a.weight.shape} -> {b.weight.shape}")

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.in_width,) + tuple(l.weight.shape[1] for l in self.layers)

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(l.activation for l in self.layers)

    def params(self) -> list[np.ndarray]:
        """Live parameter arrays in fixed order (w0, b0, w1, b1, ...)."""
        out: list[np.ndarray] = []
        for l in self.layers:
            out.append(l.weight)
            out.append(l.bias)
        return out

    def param_names(self) -> list[str]:
        out: list[str] = []
        for i in range(len(self.layers)):
            out.append(f"w{i}")
            out.append(f"b{i}")
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        expected = self.params()
        if len(arrays) != len(expected):
            raise ShapeMismatch("parameter list length mismatch")
        for dst, src in zip(expected, arrays):
            if dst.shape != src.shape:
                raise ShapeMismatch(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            init_spec=self.init_spec,
        )

    def snap_to_storage(self) -> None:
        """Round parameters to the float32 grid used by checkpoint payloads.

        Called at the end of training so a saved model reloads bit-identical.
        """
        for p in self.params():
            p[...] = p.astype(np.float32).astype(np.float64)

    def digest(self) -> str:
        """SHA-256 over all parameter bytes; used to assert isolation."""
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_mlp(sizes: list[int] | tuple[int, ...], activations: list[str] | tuple[str, ...],
             rng: Rng) -> Mlp:
    """Build an Mlp with uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)) weights
    and zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ShapeMismatch("need one activation tag per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def _as_batch(x: np.ndarray, width: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise ShapeMismatch(f"input width {a.shape[-1]} != network input width {width}")
    return a, squeeze


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Run the network; batch dimension (if any) is preserved."""
    a, squeeze = _as_batch(x, net.in_width)
    with np.errstate(over="ignore", invalid="ignore"):
        for i, layer in enumerate(net.layers):
            a = _apply_activation(a @ layer.weight + layer.bias, layer.activation)
            if not np.all(np.isfinite(a)):
                raise NumericalFault(f"non-finite activations in layer {i}", layer=i)
    return a[0] if squeeze else a


def forward_cached(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass keeping per-layer (input, pre-activation, output) caches."""
    a, _ = _as_batch(x, net.in_width)
    caches = []
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight + layer.bias
        out = _apply_activation(z, layer.activation)
        if not np.all(np.isfinite(out)):
            raise NumericalFault(f"non-finite activations in layer {i}", layer=i)
        caches.append((a, z, out))
        a = out
    return a, caches


def backward_from_output(net: Mlp, caches: list, d_out: np.ndarray,
                         seed_is_preactivation: bool = False
                         ) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate an output-side gradient through the network.

    `d_out` is dLoss/dOutput (or dLoss/dPreactivation of the last layer when
    `seed_is_preactivation`, which fused losses use for stability). Returns
    gradients in params() order plus the gradient w.r.t. the network input.
    """
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    da = d_out
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        a_in, z, out = caches[i]
        if i == len(net.layers) - 1 and seed_is_preactivation:
            dz = da
        else:
            dz = da * _activation_grad(z, out, layer.activation)
        grads[2 * i] = a_in.T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        da = dz @ layer.weight.T
        if not (np.all(np.isfinite(grads[2 * i])) and np.all(np.isfinite(da))):
            raise NumericalFault(f"non-finite gradient in layer {i}", layer=i)
    return grads, da


def _loss_seed(net: Mlp, y: np.ndarray, z_last: np.ndarray, loss_tag: str,
               target: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Loss value plus the output-side gradient seed for backprop.

    Returns (loss, seed, seed_is_preactivation). bce fuses with a sigmoid
    output layer and cross_entropy with an identity one, in both cases
    seeding the last layer's pre-activation directly for stability.
    """
    last_act = net.layers[-1].activation
    if loss_tag == "mse":
        t = np.asarray(target, dtype=np.float64).reshape(y.shape)
        diff = y - t
        loss = float(np.mean(diff * diff))
        return loss, 2.0 * diff / diff.size, False
    if loss_tag == "cross_entropy":
        if last_act != "identity":
            raise ContractViolation("cross_entropy expects an identity output layer")
        idx = np.asarray(target).reshape(-1).astype(np.intp)
        if idx.shape[0] != y.shape[0]:
            raise ShapeMismatch("one class index per batch row required")
        m = y.max(axis=1, keepdims=True)
        logsumexp = m[:, 0] + np.log(np.exp(y - m).sum(axis=1))
        loss = float(np.mean(logsumexp - y[np.arange(y.shape[0]), idx]))
        p = np.exp(y - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(y.shape[0]), idx] -= 1.0
        return loss, p / y.shape[0], True
    if loss_tag == "bce":
        t = np.asarray(target, dtype=np.float64).reshape(y.shape)
        if t.min() < 0.0 or t.max() > 1.0:
            raise ContractViolation("bce targets must lie in [0, 1]")
        if last_act == "sigmoid":
            z = z_last
            loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
            return loss, (y - t) / y.size, True
        yc = np.clip(y, 1e-12, 1.0 - 1e-12)
        loss = float(-np.mean(t * np.log(yc) + (1.0 - t) * np.log1p(-yc)))
        return loss, (yc - t) / (yc * (1.0 - yc)) / y.size, False
    raise ContractViolation(f"unknown loss tag {loss_tag!r}")


def backward(net: Mlp, x: np.ndarray, loss_tag: str, target: np.ndarray
             ) -> tuple[float, list[np.ndarray]]:
    """Loss (batch mean) and parameter gradients, params() order."""
    loss, grads, _ = backward_with_input_grad(net, x, loss_tag, target)
    return loss, grads


def backward_with_input_grad(net: Mlp, x: np.ndarray, loss_tag: str, target: np.ndarray
                             ) -> tuple[float, list[np.ndarray], np.ndarray]:
    y, caches = forward_cached(net, x)
    loss, seed, fused = _loss_seed(net, y, caches[-1][1], loss_tag, target)
    grads, dx = backward_from_output(net, caches, seed, seed_is_preactivation=fused)
    return loss, grads, dx


def loss_only(net: Mlp, x: np.ndarray, loss_tag: str, target: np.ndarray) -> float:
    y, caches = forward_cached(net, np.atleast_2d(x))
    loss, _, _ = _loss_seed(net, y, caches[-1][1], loss_tag, target)
    return loss


GRAD_CHECK_PARAM_LIMIT = 10_000


def grad_check(net: Mlp, samples: np.ndarray, loss_tag: str, target: np.ndarray,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). Guarded to networks with at most
    10^4 parameters since the sweep costs two forward passes per parameter.
    """
    if net.n_params > GRAD_CHECK_PARAM_LIMIT:
        raise ContractViolation(
            f"grad_check limited to {GRAD_CHECK_PARAM_LIMIT} parameters, got {net.n_params}")
    _, grads = backward(net, samples, loss_tag, target)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + step
            lp = loss_only(net, samples, loss_tag, target)
            flat_p[j] = orig - step
            lm = loss_only(net, samples, loss_tag, target)
            flat_p[j] = orig
            numeric = (lp - lm) / (2.0 * step)
            analytic = flat_g[j]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            if err > worst:
                worst = err
    return worst


@dataclass
class AdamState:
    """Adam accumulators mirroring one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
              ) -> tuple[list[np.ndarray], AdamState]:
    """Standard bias-corrected Adam update, in place on `params`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Adam bound to one network, with optional pruning masks.

    Masks align with params() order; entries are None or a boolean keep-mask.
    Masked entries have their gradients zeroed before the update and their
    values re-zeroed after it, so pruned weights stay pruned.
    """

    def __init__(self, net: Mlp, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState.for_params(net.params(), lr=lr, beta1=beta1,
                                          beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self, net: Mlp, grads: list[np.ndarray],
             masks: list[np.ndarray | None] | None = None) -> None:
        if masks is not None:
            grads = [g if m is None else g * m for g, m in zip(grads, masks)]
        adam_step(net.params(), grads, self.state)
        if masks is not None:
            for p, m in zip(net.params(), masks):
                if m is not None:
                    p *= m

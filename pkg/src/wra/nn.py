"""Small dense-network engine: forward pass, exact backprop, first-order
optimizers, and loss functions including rate-objective losses whose
gradients flow straight into the network's power outputs.

Everything is float64 and value-semantic: parameter updates return new
``Mlp`` objects, inputs are never mutated. Networks are deliberately tiny
(a handful of dense layers), so clarity wins over cleverness.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh", "linear")
OUTPUT_ACTIVATIONS = ("linear", "softmax", "sigmoid")

LN2 = np.log(2.0)


def _parse_activation(spec: str) -> tuple[str, str]:
    """Split an activation spec like ``"relu"`` or ``"tanh-softmax"``.

    A bare hidden activation implies a linear output layer.
    """
    parts = spec.split("-")
    if len(parts) == 1:
        hidden, out = parts[0], "linear"
    elif len(parts) == 2:
        hidden, out = parts
    else:
        raise ValueError(f"bad activation spec {spec!r}")
    if hidden not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown hidden activation {hidden!r}")
    if out not in OUTPUT_ACTIVATIONS:
        raise ValueError(f"unknown output activation {out!r}")
    return hidden, out


@dataclass
class Mlp:
    """Dense network parameters. weights[l] has shape (fan_out, fan_in)."""

    layer_sizes: tuple
    weights: list
    biases: list
    hidden: str = "relu"
    out: str = "linear"
    out_scale: float = 1.0  # sigmoid head saturates at out_scale (e.g. P_max)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            tuple(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden,
            self.out,
            self.out_scale,
        )


def mlp_init(layer_sizes, activation="relu", seed=0, out_scale=1.0) -> Mlp:
    """Create a network with zero biases and uniform weights scaled by
    1/sqrt(fan_in). Identical (layer_sizes, seed) give identical parameters.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    hidden, out = _parse_activation(activation)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, hidden, out, float(out_scale))


@dataclass
class Trace:
    """All intermediate activations of one forward pass.

    Arrays are 2-D (batch, width) internally; ``single`` records whether the
    caller passed a bare vector.
    """

    inputs: np.ndarray
    pre: list  # pre-activations z per layer
    post: list  # post-activations a per layer (post[-1] is the output)
    single: bool

    @property
    def output(self) -> np.ndarray:
        out = self.post[-1]
        return out[0] if self.single else out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(net: Mlp, x) -> Trace:
    """Run the network; returns the full activation trace.

    ``x`` may be a single vector or a (batch, n_inputs) matrix.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != net.n_inputs:
        raise ValueError(
            f"input width {a.shape[1]} != network input {net.n_inputs}"
        )
    pre, post = [], []
    n_layers = len(net.weights)
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        if l < n_layers - 1:
            if net.hidden == "relu":
                a = np.maximum(z, 0.0)
            elif net.hidden == "tanh":
                a = np.tanh(z)
            else:
                a = z
        else:
            if net.out == "linear":
                a = z
            elif net.out == "softmax":
                a = _softmax(z)
            else:  # sigmoid head, scaled so outputs live in (0, out_scale)
                a = net.out_scale / (1.0 + np.exp(-z))
        post.append(a)
    return Trace(x[None, :] if single else x, pre, post, single)


@dataclass
class Grads:
    """Parameter gradients, same shapes as the network's weights/biases."""

    d_weights: list
    d_biases: list

    def scaled(self, c: float) -> "Grads":
        return Grads([c * g for g in self.d_weights], [c * g for g in self.d_biases])

    def add(self, other: "Grads") -> "Grads":
        return Grads(
            [a + b for a, b in zip(self.d_weights, other.d_weights)],
            [a + b for a, b in zip(self.d_biases, other.d_biases)],
        )

    def max_abs(self) -> float:
        vals = [np.max(np.abs(g)) for g in self.d_weights + self.d_biases if g.size]
        return float(max(vals))


def backward(net: Mlp, trace: Trace, output_gradient) -> Grads:
    """Exact chain rule from a loss gradient w.r.t. the network output.

    For batched traces the returned gradients are summed over the batch.
    """
    g = np.asarray(output_gradient, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    out = trace.post[-1]
    if g.shape != out.shape:
        raise ValueError(f"output gradient shape {g.shape} != output {out.shape}")

    # Jacobian of the output activation.
    if net.out == "linear":
        dz = g
    elif net.out == "softmax":
        p = out
        dz = p * (g - np.sum(g * p, axis=1, keepdims=True))
    else:  # scaled sigmoid: do/dz = o (1 - o/scale)
        dz = g * out * (1.0 - out / net.out_scale)

    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.biases)
    for l in range(len(net.weights) - 1, -1, -1):
        a_prev = trace.inputs if l == 0 else trace.post[l - 1]
        d_weights[l] = dz.T @ a_prev
        d_biases[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ net.weights[l]
            z_prev = trace.pre[l - 1]
            if net.hidden == "relu":
                dz = da * (z_prev > 0.0)
            elif net.hidden == "tanh":
                dz = da * (1.0 - trace.post[l - 1] ** 2)
            else:
                dz = da
    return Grads(d_weights, d_biases)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossSpec:
    """Which loss to evaluate, plus the channel context for the rate losses.

    For ``neg_spectral_efficiency`` / ``neg_energy_efficiency`` the output
    vector is read as per-transmitter powers and the loss is the negated
    network objective: gains[j, i] is the power gain transmitter j ->
    receiver i.
    """

    kind: str  # mse | cross_entropy | neg_spectral_efficiency | neg_energy_efficiency
    gains: np.ndarray | None = None
    noise: float | None = None
    circuit_power: float = 0.0

    def __post_init__(self):
        if self.kind in ("neg_spectral_efficiency", "neg_energy_efficiency"):
            if self.noise is None or self.noise <= 0.0:
                raise ValueError("noise power must be positive")
            self.gains = np.asarray(self.gains, dtype=float)
            if np.any(self.gains < 0.0):
                raise ValueError("channel gains must be nonnegative")
            if self.circuit_power < 0.0:
                raise ValueError("circuit power must be nonnegative")


def _rate_terms(gains, powers, noise):
    """Per-link SINR pieces for the rate losses. Returns (se, gamma, denom)."""
    direct = np.diag(gains) * powers
    received = powers @ gains  # sum_k P_k g[k, i]
    denom = noise + received - direct
    gamma = direct / denom
    se = np.log1p(gamma) / LN2
    return se, gamma, denom


def _neg_se_value_grad(gains, powers, noise):
    se, gamma, denom = _rate_terms(gains, powers, noise)
    diag = np.diag(gains)
    u = 1.0 / (denom * (1.0 + gamma))
    c = gamma * u
    # d(sum se)/dP_j = [g_jj u_j + g_jj c_j - (G c)_j] / ln 2
    d_se = (diag * u + diag * c - gains @ c) / LN2
    return -np.sum(se), -d_se


def _neg_ee_value_grad(gains, powers, noise, p_circuit):
    se, gamma, denom = _rate_terms(gains, powers, noise)
    diag = np.diag(gains)
    u = 1.0 / (denom * (1.0 + gamma))
    c = gamma * u
    a = 1.0 / (powers + p_circuit)
    ee = np.sum(se * a)
    # sum_i a_i d(se_i)/dP_j, then the quotient-rule term for i == j
    d_ee = (diag * u * a + diag * c * a - gains @ (c * a)) / LN2
    d_ee = d_ee - se * a**2
    return -ee, -d_ee


def evaluate_loss(spec: LossSpec, output, target=None):
    """Loss value and its exact gradient w.r.t. the output vector.

    Batched (2-D) outputs return the mean loss over rows and gradients
    scaled by 1/batch.
    """
    out = np.asarray(output, dtype=float)
    single = out.ndim == 1
    rows = out[None, :] if single else out
    n = rows.shape[0]

    if spec.kind in ("mse", "cross_entropy"):
        if target is None:
            raise ValueError(f"loss {spec.kind!r} needs a target")
        tgt = np.asarray(target, dtype=float)
        tgt = tgt[None, :] if tgt.ndim == 1 else tgt
        if spec.kind == "mse":
            diff = rows - tgt
            value = float(np.sum(diff**2)) / n
            grad = 2.0 * diff / n
        else:
            p = np.maximum(rows, 1e-300)
            value = float(-np.sum(tgt * np.log(p))) / n
            grad = -(tgt / p) / n
    elif spec.kind == "neg_spectral_efficiency":
        vals = np.empty(n)
        grad = np.empty_like(rows)
        for i in range(n):
            vals[i], grad[i] = _neg_se_value_grad(spec.gains, rows[i], spec.noise)
        value = float(vals.mean())
        grad = grad / n
    elif spec.kind == "neg_energy_efficiency":
        vals = np.empty(n)
        grad = np.empty_like(rows)
        for i in range(n):
            vals[i], grad[i] = _neg_ee_value_grad(
                spec.gains, rows[i], spec.noise, spec.circuit_power
            )
        value = float(vals.mean())
        grad = grad / n
    else:
        raise ValueError(f"unknown loss kind {spec.kind!r}")

    return value, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimizerState:
    """First-order optimizer with per-parameter accumulators.

    rmsprop decay 0.99, adam decays 0.9/0.999 (bias-corrected), eps 1e-8.
    """

    kind: str  # sgd | rmsprop | adam
    lr: float
    m: list = field(default_factory=list)  # first moment (adam)
    v: list = field(default_factory=list)  # second moment (adam/rmsprop)
    step: int = 0

    EPS = 1e-8
    RMSPROP_DECAY = 0.99
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999


def make_optimizer(kind: str, lr: float, net: Mlp) -> OptimizerState:
    if kind not in ("sgd", "rmsprop", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    if lr < 0.0:
        raise ValueError("step size must be nonnegative")
    shapes = [np.zeros_like(w) for w in net.weights] + [
        np.zeros_like(b) for b in net.biases
    ]
    m = [s.copy() for s in shapes] if kind == "adam" else []
    v = [s.copy() for s in shapes] if kind in ("adam", "rmsprop") else []
    return OptimizerState(kind, float(lr), m, v)


def _flatten(grads: Grads) -> list:
    return list(grads.d_weights) + list(grads.d_biases)


def apply_update(net: Mlp, grads: Grads, opt: OptimizerState):
    """One optimizer step. Returns (new_net, new_opt); inputs untouched.

    Non-finite gradients raise before anything is modified.
    """
    flat = _flatten(grads)
    for g in flat:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")

    params = [w.copy() for w in net.weights] + [b.copy() for b in net.biases]
    new = Mlp(tuple(net.layer_sizes), [], [], net.hidden, net.out, net.out_scale)
    step = opt.step + 1
    if opt.kind == "sgd":
        for p, g in zip(params, flat):
            p -= opt.lr * g
        new_opt = OptimizerState("sgd", opt.lr, [], [], step)
    elif opt.kind == "rmsprop":
        d = OptimizerState.RMSPROP_DECAY
        v = [d * vi + (1.0 - d) * g**2 for vi, g in zip(opt.v, flat)]
        for p, g, vi in zip(params, flat, v):
            p -= opt.lr * g / (np.sqrt(vi) + OptimizerState.EPS)
        new_opt = OptimizerState("rmsprop", opt.lr, [], v, step)
    else:  # adam
        b1, b2 = OptimizerState.ADAM_BETA1, OptimizerState.ADAM_BETA2
        m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(opt.m, flat)]
        v = [b2 * vi + (1.0 - b2) * g**2 for vi, g in zip(opt.v, flat)]
        c1 = 1.0 - b1**step
        c2 = 1.0 - b2**step
        for p, mi, vi in zip(params, m, v):
            p -= opt.lr * (mi / c1) / (np.sqrt(vi / c2) + OptimizerState.EPS)
        new_opt = OptimizerState("adam", opt.lr, m, v, step)

    k = len(net.weights)
    new.weights = params[:k]
    new.biases = params[k:]
    return new, new_opt


# ---------------------------------------------------------------------------
# Verification and persistence


def network_loss(net: Mlp, spec: LossSpec, x, target=None):
    """Loss of the network on one input, plus parameter gradients."""
    trace = forward(net, x)
    value, g_out = evaluate_loss(spec, trace.output, target)
    return value, backward(net, trace, g_out)


def gradient_check(net: Mlp, spec: LossSpec, x, target=None, h=1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    Relative error uses max(1, |numeric|) in the denominator so tiny
    gradients do not inflate the ratio.
    """
    _, analytic = network_loss(net, spec, x, target)
    an_flat = _flatten(analytic)
    worst = 0.0
    arrays = list(net.weights) + list(net.biases)
    for arr, an in zip(arrays, an_flat):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up, _ = evaluate_loss(spec, forward(net, x).output, target)
            arr[idx] = orig - h
            down, _ = evaluate_loss(spec, forward(net, x).output, target)
            arr[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(an[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


CHECKPOINT_MAGIC = "MLPv1"


def save_checkpoint(net: Mlp, path) -> None:
    """Versioned text checkpoint: magic line, layer sizes, then per layer
    the weight matrix row-major followed by the bias vector, 17 significant
    digits per value (exact float64 round-trip).
    """
    with open(path, "w") as f:
        f.write(CHECKPOINT_MAGIC + "\n")
        f.write(" ".join(str(s) for s in net.layer_sizes) + "\n")
        for w, b in zip(net.weights, net.biases):
            for row in w:
                f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            f.write(" ".join(f"{v:.17g}" for v in b) + "\n")


def load_checkpoint(path, activation="relu", out_scale=1.0) -> Mlp:
    """Read a checkpoint written by save_checkpoint.

    The file stores sizes and values only; the activation spec is supplied
    by the caller (it is part of the experiment config, not the weights).
    """
    with open(path) as f:
        magic = f.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a {CHECKPOINT_MAGIC} checkpoint: {magic!r}")
        sizes = tuple(int(t) for t in f.readline().split())
        tokens = f.read().split()
    values = np.array([float(t) for t in tokens])
    expected = sum((o * i + o) for i, o in zip(sizes[:-1], sizes[1:]))
    if values.size != expected:
        raise ValueError(f"checkpoint holds {values.size} values, need {expected}")
    hidden, out = _parse_activation(activation)
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(values[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in))
        pos += fan_out * fan_in
        biases.append(values[pos : pos + fan_out].copy())
        pos += fan_out
    return Mlp(sizes, weights, biases, hidden, out, float(out_scale))


def params_equal(a: Mlp, b: Mlp) -> bool:
    return (
        tuple(a.layer_sizes) == tuple(b.layer_sizes)
        and all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        and all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases))
    )

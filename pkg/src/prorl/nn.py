"""Feed-forward networks in plain numpy.

Everything here runs in float64. An :class:`Mlp` owns its weight arrays;
:class:`Adam` updates them in place, so an optimizer built on
``mlp.params`` keeps working for the lifetime of the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

HIDDEN_ACTIVATIONS = ("elu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "per_head")


def elu(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_grad(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def huber_loss(pred, target, delta: float = 1.0) -> float:
    """Mean elementwise Huber loss."""
    err = _residual(pred, target)
    a = np.abs(err)
    per = np.where(a <= delta, 0.5 * err**2, delta * (a - 0.5 * delta))
    return float(per.mean())


def huber_grad(pred, target, delta: float = 1.0) -> np.ndarray:
    """Gradient of :func:`huber_loss` with respect to ``pred``."""
    err = _residual(pred, target)
    return np.clip(err, -delta, delta) / err.size


def _residual(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("huber loss needs at least one element")
    return pred - target


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ContractError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def default(cls, n_in: int, n_out: int, hidden=(32, 32), **kw) -> "MlpSpec":
        return cls((n_in, *hidden, n_out), **kw)


class Mlp:
    """Fully connected network: affine layers, hidden activation, linear output.

    ``per_head`` output activation is a marker for callers that post-process
    slices of the output themselves (policy heads); the network still emits
    the raw affine output.
    """

    def __init__(self, spec: MlpSpec, weights, biases):
        self.spec = spec
        sizes = spec.layer_sizes
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ContractError("wrong number of layers for spec")
        self.weights = []
        self.biases = []
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ContractError(f"layer {i} has shapes {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"layer {i} has non-finite parameters")
            self.weights.append(w)
            self.biases.append(b)

    @classmethod
    def initialize(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _act(self, z):
        return elu(z) if self.spec.hidden_activation == "elu" else np.tanh(z)

    def _act_grad(self, z, a):
        if self.spec.hidden_activation == "elu":
            return elu_grad(z)
        return 1.0 - a**2

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.spec.n_in:
            raise ContractError(f"expected input width {self.spec.n_in}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        single = x.ndim == 1
        h = x[None, :] if single else x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = self._act(h)
        return h[0] if single else h

    __call__ = forward

    def forward_cached(self, x):
        """Batched forward pass that keeps what :meth:`backward` needs."""
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        inputs, pre, post = [], [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.T + b
            if i < last:
                a = self._act(z)
                pre.append(z)
                post.append(a)
                h = a
            else:
                h = z
        return h, (inputs, pre, post)

    def backward(self, cache, grad_out):
        """Backpropagate ``dL/d(output)`` for a batch.

        Returns ``(grads, grad_input)`` where ``grads`` is aligned with
        :attr:`params`.
        """
        inputs, pre, post = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.spec.n_out):
            raise ContractError(f"grad_out shape {g.shape} does not match output")
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = g.T @ inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * self._act_grad(pre[i - 1], post[i - 1])
        return grads, g

    def huber_gradients(self, inputs, targets, delta: float = 1.0):
        """Mean Huber loss over a batch and its exact parameter gradients."""
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[None, :]
        out, cache = self.forward_cached(inputs)
        if out.shape != targets.shape:
            raise ContractError(f"targets shape {targets.shape} != outputs {out.shape}")
        loss = huber_loss(out, targets, delta)
        grads, _ = self.backward(cache, huber_grad(out, targets, delta))
        return loss, grads

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.weights, self.biases)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.spec.layer_sizes),
            "hidden_activation": self.spec.hidden_activation,
            "output_activation": self.spec.output_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        spec = MlpSpec(tuple(d["layer_sizes"]), d["hidden_activation"], d["output_activation"])
        sizes = spec.layer_sizes
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[i + 1], sizes[i])
            for i, w in enumerate(d["weights"])
        ]
        return cls(spec, weights, d["biases"])


class MirroredMlp:
    """An :class:`Mlp` averaged with its own reflection.

    For a reflection ``z' = in_sign * z + in_shift`` of the (normalized)
    input, the output is

        (f(z) + out_sign * f(z')[:, out_perm]) / 2 + out_shift

    which makes the map equivariant by construction: applying the input
    reflection maps the output through the same signed permutation. The
    wrapper exposes the :class:`Mlp` interface, so optimizers and the
    policy and value heads use it unchanged.
    """

    def __init__(self, inner: Mlp, in_sign, out_sign, out_perm=None, in_shift=None, out_shift=None):
        self.inner = inner
        n_in, n_out = inner.spec.n_in, inner.spec.n_out
        self.in_sign = self._vec(in_sign, n_in, "in_sign")
        self.out_sign = self._vec(out_sign, n_out, "out_sign")
        self.in_shift = self._vec(0.0 if in_shift is None else in_shift, n_in, "in_shift")
        self.out_shift = self._vec(0.0 if out_shift is None else out_shift, n_out, "out_shift")
        perm = np.arange(n_out) if out_perm is None else np.asarray(out_perm, dtype=int)
        if sorted(perm.tolist()) != list(range(n_out)):
            raise ContractError(f"out_perm must permute {n_out} outputs")
        self.out_perm = perm

    @staticmethod
    def _vec(v, n, what):
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
        if not np.all(np.isfinite(v)):
            raise ContractError(f"{what} must be finite")
        return v

    @property
    def spec(self) -> MlpSpec:
        return self.inner.spec

    @property
    def params(self) -> list:
        return self.inner.params

    def reflect(self, x):
        return x * self.in_sign + self.in_shift

    def _combine(self, a, b):
        return 0.5 * (a + self.out_sign * b[:, self.out_perm]) + self.out_shift

    def forward(self, x) -> np.ndarray:
        x = self.inner._check_input(x)
        single = x.ndim == 1
        h = x[None, :] if single else x
        out = self._combine(self.inner.forward(h), self.inner.forward(self.reflect(h)))
        return out[0] if single else out

    __call__ = forward

    def forward_cached(self, x):
        x = self.inner._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        a, ca = self.inner.forward_cached(x)
        b, cb = self.inner.forward_cached(self.reflect(x))
        return self._combine(a, b), (ca, cb)

    def backward(self, cache, grad_out):
        ca, cb = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        gb = np.empty_like(g)
        gb[:, self.out_perm] = 0.5 * self.out_sign * g
        grads_a, gx_a = self.inner.backward(ca, 0.5 * g)
        grads_b, gx_b = self.inner.backward(cb, gb)
        return [x + y for x, y in zip(grads_a, grads_b)], gx_a + gx_b * self.in_sign

    def huber_gradients(self, inputs, targets, delta: float = 1.0):
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[None, :]
        out, cache = self.forward_cached(inputs)
        if out.shape != targets.shape:
            raise ContractError(f"targets shape {targets.shape} != outputs {out.shape}")
        grads, _ = self.backward(cache, huber_grad(out, targets, delta))
        return huber_loss(out, targets, delta), grads

    def copy(self) -> "MirroredMlp":
        return MirroredMlp(self.inner.copy(), self.in_sign, self.out_sign, self.out_perm,
                           self.in_shift, self.out_shift)

    def to_dict(self) -> dict:
        d = self.inner.to_dict()
        d["mirror"] = {"in_sign": self.in_sign.tolist(), "in_shift": self.in_shift.tolist(),
                       "out_sign": self.out_sign.tolist(), "out_perm": self.out_perm.tolist(),
                       "out_shift": self.out_shift.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MirroredMlp":
        m = d["mirror"]
        return cls(Mlp.from_dict(d), m["in_sign"], m["out_sign"], m["out_perm"], m["in_shift"], m["out_shift"])


def network_from_dict(d: dict):
    """Load either network kind from its serialized form."""
    return MirroredMlp.from_dict(d) if "mirror" in d else Mlp.from_dict(d)


class Adam:
    """Adam with decoupled weight decay, applied after the moment update."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ContractError("gradient list does not match parameter list")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        shrink = 1.0 - self.lr * self.weight_decay
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p *= shrink

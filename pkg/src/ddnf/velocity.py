"""tanh MLP velocity fields with exact batched Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class VelocitySpec:
    dim: int = 2
    hidden: tuple = (2, 2)
    context_dim: int = 0
    init_scale: float = 1.0
    zero_init_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.context_dim < 0:
            raise ValueError("context_dim must be non-negative")
        if any(h <= 0 for h in self.hidden):
            raise ValueError(f"zero-width hidden layer in {self.hidden}")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.context_dim, *self.hidden, self.dim]

    @property
    def layout(self) -> ad.Layout:
        w = self.widths
        shapes = []
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        return ad.Layout(tuple(shapes))


@dataclass(frozen=True)
class VelocityField:
    """A velocity field v: R^d (+ context) -> R^d.

    ``params`` is the flat parameter vector; layer ``i`` holds a weight of
    shape ``(out, in)`` followed by a bias, so one layer computes
    ``W @ x + b``.
    """

    spec: VelocitySpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        if params.shape != (self.spec.layout.size,):
            raise ValueError(
                f"parameter vector has length {params.size}, spec needs {self.spec.layout.size}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    def layers(self, params=None) -> list[tuple]:
        """List of ``(W, b)`` pairs; ``params`` may be an array or a tape ``Var``."""
        parts = self.spec.layout.unflatten(self.params if params is None else params)
        return list(zip(parts[0::2], parts[1::2]))

    def with_params(self, params) -> "VelocityField":
        return VelocityField(self.spec, np.array(params, dtype=np.float64))

    def __call__(self, z, context=None, params=None):
        return evaluate(self, z, context, params)


def init_field(spec: VelocitySpec, seed: int | np.random.Generator = 0) -> VelocityField:
    """Uniform(-s, s) weights with s = init_scale / sqrt(fan_in); biases likewise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays = []
    n_layers = len(spec.widths) - 1
    for i, shape in enumerate(spec.layout.shapes):
        layer = i // 2
        fan_in = spec.widths[layer]
        s = spec.init_scale / np.sqrt(fan_in)
        a = rng.uniform(-s, s, size=shape)
        if spec.zero_init_output and layer == n_layers - 1:
            a = np.zeros(shape)
        arrays.append(a)
    return VelocityField(spec, spec.layout.flatten(arrays))


def linear_field(A, bias=None) -> VelocityField:
    """Single-layer field v(z) = A z + bias (no hidden layers)."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError("A must be square")
    b = np.zeros(d) if bias is None else np.asarray(bias, dtype=np.float64)
    spec = VelocitySpec(dim=d, hidden=())
    return VelocityField(spec, spec.layout.flatten([A, b]))


def constant_field(c, hidden=(2, 2)) -> VelocityField:
    """Field identically equal to ``c``: zero weights, bias-only output layer."""
    c = np.asarray(c, dtype=np.float64)
    spec = VelocitySpec(dim=c.size, hidden=hidden)
    arrays = [np.zeros(s) for s in spec.layout.shapes]
    arrays[-1] = c.copy()
    return VelocityField(spec, spec.layout.flatten(arrays))


def _check_inputs(vf: VelocityField, z, context):
    d, c = vf.spec.dim, vf.spec.context_dim
    shape = ad.value_of(z).shape
    if not shape or shape[-1] != d:
        raise ValueError(f"point has trailing dimension {shape[-1] if shape else None}, field expects {d}")
    if c > 0 and context is None:
        raise ValueError(f"field expects a context of dimension {c}")
    if c == 0 and context is not None:
        raise ValueError("context given to a field without context inputs")
    if context is not None and np.shape(ad.value_of(context))[-1] != c:
        raise ValueError(f"context has wrong dimension, expected {c}")


def _input(z, context):
    if context is None:
        return z
    zshape = ad.value_of(z).shape
    ctx = context
    cshape = ad.value_of(ctx).shape
    if len(cshape) < len(zshape):
        ctx = ad.mul(ad.value_of(ctx) if not isinstance(ctx, ad.Var) else ctx,
                     np.ones(zshape[:-1] + (1,)))
    return ad.concat([z, ctx], axis=-1)


def _hidden_pass(layers, x):
    """Run the tanh layers; return hidden activations and the output."""
    acts = []
    h = x
    for W, b in layers[:-1]:
        h = ad.tanh(ad.add(ad.matmul(h, ad.swapaxes(W, -1, -2)), b))
        acts.append(h)
    W, b = layers[-1]
    out = ad.add(ad.matmul(h, ad.swapaxes(W, -1, -2)), b)
    return acts, out


def evaluate(vf: VelocityField, z, context=None, params=None, layers=None):
    """v(z); ``z`` may be a single point ``(d,)`` or a batch ``(B, d)``."""
    _check_inputs(vf, z, context)
    layers = vf.layers(params) if layers is None else layers
    return _hidden_pass(layers, _input(z, context))[1]


def eval_and_jacobian(vf: VelocityField, z, context=None, params=None, layers=None):
    """Return ``(v(z), J(z))`` with ``J[..., i, j] = d v_i / d z_j``.

    The Jacobian is the product W_n D_{n-1} W_{n-1} ... D_1 W_1[:, :d] with
    D_k = diag(1 - h_k^2), batched over leading axes of ``z``.
    """
    _check_inputs(vf, z, context)
    layers = vf.layers(params) if layers is None else layers
    acts, out = _hidden_pass(layers, _input(z, context))
    d = vf.spec.dim
    W1 = layers[0][0]
    M = W1 if vf.spec.context_dim == 0 else ad.getitem(W1, (slice(None), slice(0, d)))
    for (W_next, _), h in zip(layers[1:], acts):
        s = ad.sub(1.0, ad.square(h))
        s = ad.reshape(s, ad.value_of(s).shape + (1,))
        M = ad.matmul(W_next, ad.mul(s, M))
    if not acts:
        batch = ad.value_of(z).shape[:-1]
        M = ad.mul(M, np.ones(batch + (1, 1))) if batch else M
    return out, M


def jacobian(vf: VelocityField, z, context=None, params=None):
    return eval_and_jacobian(vf, z, context, params)[1]


def jvp(vf: VelocityField, z, w, context=None, params=None, layers=None):
    """J(z) @ w by forward-mode duals (no Jacobian is formed)."""
    zw = ad.Dual(z, w)
    out = evaluate(vf, zw, context, params, layers)
    return out.tangent


def magnitude_bound(vf: VelocityField) -> float:
    """Upper bound on |v(z)| valid for every z (tanh outputs lie in [-1, 1])."""
    W, b = vf.layers()[-1]
    if len(vf.spec.hidden) == 0:
        return np.inf
    width = vf.spec.hidden[-1]
    return float(np.linalg.norm(W, 2) * np.sqrt(width) + np.linalg.norm(b))

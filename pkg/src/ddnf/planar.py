"""Planar normalizing flow baseline, f(z) = z + u_hat * tanh(w.z + b)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flow import FlowResult


def planar_constrain(u, w):
    """Adjust ``u`` so that w . u_hat >= -1, which makes the layer invertible."""
    wu = ad.sum_(ad.mul(w, u), -1)
    w_sq = ad.sum_(ad.square(w), -1)
    if np.any(ad.value_of(w_sq) == 0):
        raise ValueError("planar layer needs w != 0")
    m = ad.sub(ad.softplus(wu), 1.0)
    coef = ad.div(ad.sub(m, wu), w_sq)
    return ad.add(u, ad.mul(ad.reshape(coef, ad.value_of(coef).shape + (1,)), w))


@dataclass(frozen=True)
class PlanarLayer:
    u: np.ndarray
    w: np.ndarray
    b: float


def planar_forward(layer: PlanarLayer, z, params=None):
    """Apply one layer; returns ``(z', log|det J|)``.

    ``params`` optionally replaces ``(u, w, b)`` with a flat ``[u, w, b]``
    vector (array or tape variable).
    """
    if params is None:
        u, w, b = layer.u, layer.w, layer.b
    else:
        d = np.shape(layer.u)[0]
        u = ad.getitem(params, slice(0, d))
        w = ad.getitem(params, slice(d, 2 * d))
        b = ad.getitem(params, 2 * d)
    u_hat = planar_constrain(u, w)
    a = ad.add(ad.sum_(ad.mul(z, w), -1), b)
    h = ad.tanh(a)
    shape = ad.value_of(h).shape + (1,)
    z_new = ad.add(z, ad.mul(ad.reshape(h, shape), u_hat))
    psi_u = ad.mul(ad.sub(1.0, ad.square(h)), ad.sum_(ad.mul(w, u_hat), -1))
    return z_new, ad.log(ad.abs_(ad.add(1.0, psi_u)))


@dataclass(frozen=True)
class PlanarFlow:
    """K planar layers; parameters stored flat as [u_k, w_k, b_k] per layer."""

    dim: int
    layers: int
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (self.layers * (2 * self.dim + 1),):
            raise ValueError("planar parameter vector has the wrong length")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def stride(self) -> int:
        return 2 * self.dim + 1

    def with_params(self, flat) -> "PlanarFlow":
        return PlanarFlow(self.dim, self.layers, np.array(flat, dtype=np.float64))

    def layer(self, k: int) -> PlanarLayer:
        p = self.params[k * self.stride:(k + 1) * self.stride]
        d = self.dim
        return PlanarLayer(p[:d], p[d:2 * d], float(p[2 * d]))


def init_planar(dim: int, layers: int, seed: int = 0, scale: float = 0.1) -> PlanarFlow:
    rng = np.random.default_rng(seed)
    return PlanarFlow(dim, layers, rng.normal(0.0, scale, layers * (2 * dim + 1)))


def planar_flow_forward(flow: PlanarFlow, z0, params=None, **_) -> FlowResult:
    flat = flow.params if params is None else params
    z = z0
    total = np.zeros(ad.value_of(z0).shape[:-1])
    for k in range(flow.layers):
        p = ad.getitem(flat, slice(k * flow.stride, (k + 1) * flow.stride))
        z, ld = planar_forward(flow.layer(k), z, p)
        total = ad.add(total, ld)
    return FlowResult(z, total)


def planar_inverse(flow: PlanarFlow, z, iters: int = 200) -> FlowResult:
    """Numerical inverse by bisection along w; ``sum_logdet`` is log|det d f^{-1}/dz|."""
    z = np.array(z, dtype=np.float64)
    total = np.zeros(z.shape[:-1])
    for k in reversed(range(flow.layers)):
        layer = flow.layer(k)
        u_hat = ad.value_of(planar_constrain(layer.u, layer.w))
        wu = float(layer.w @ u_hat)
        # solve alpha + wu * tanh(alpha + b) = w.z for alpha = w.x; monotone since wu >= -1
        target = z @ layer.w
        lo = target - abs(wu) - 1.0
        hi = target + abs(wu) + 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            g = mid + wu * np.tanh(mid + layer.b) - target
            lo = np.where(g < 0, mid, lo)
            hi = np.where(g < 0, hi, mid)
        alpha = 0.5 * (lo + hi)
        h = np.tanh(alpha + layer.b)
        x = z - h[..., None] * u_hat
        total = total - np.log(np.abs(1.0 + (1.0 - h ** 2) * wu))
        z = x
    return FlowResult(z, total)

"""Diffeomorphic flows: Euler cells, stationary blocks, non-stationary chains."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .velocity import VelocityField, VelocitySpec, eval_and_jacobian, evaluate, init_field, jvp

LOGDET_METHODS = ("first_order", "second_order_paper", "second_order_series", "exact")


class NonInvertibleCellError(ArithmeticError):
    pass


class FlowNumericalError(FloatingPointError):
    def __init__(self, cell: int, msg: str = "non-finite point"):
        super().__init__(f"{msg} after cell {cell}")
        self.cell = cell


@dataclass(frozen=True)
class FlowSpec:
    dim: int = 2
    blocks: int = 1
    cells_per_block: int = 8
    logdet_method: str = "exact"
    hutchinson_probes: int = 0
    velocity: VelocitySpec = None

    def __post_init__(self):
        if self.velocity is None:
            object.__setattr__(self, "velocity", VelocitySpec(dim=self.dim))
        if self.velocity.dim != self.dim:
            raise ValueError("velocity spec dimension differs from flow dimension")
        if self.blocks < 1 or self.cells_per_block < 1:
            raise ValueError("blocks and cells_per_block must be positive")
        if self.logdet_method not in LOGDET_METHODS:
            raise ValueError(f"unknown logdet method {self.logdet_method!r}")
        if self.hutchinson_probes < 0:
            raise ValueError("hutchinson_probes must be >= 0")
        if self.logdet_method == "exact" and self.hutchinson_probes > 0:
            raise ValueError("exact log-det cannot be combined with trace estimation")

    @property
    def context_dim(self) -> int:
        return self.velocity.context_dim

    @property
    def n_cells(self) -> int:
        return self.blocks * self.cells_per_block

    @property
    def dt(self) -> float:
        return 1.0 / self.n_cells


@dataclass
class FlowResult:
    z_out: object
    sum_logdet: object
    trajectory: Optional[list] = None
    path_energy: object = None


@dataclass(frozen=True)
class FlowModel:
    spec: FlowSpec
    fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) != self.spec.blocks:
            raise ValueError(f"{len(self.fields)} fields for {self.spec.blocks} blocks")
        for f in self.fields:
            if f.spec != self.spec.velocity:
                raise ValueError("block velocity spec does not match flow spec")

    @property
    def n_params(self) -> int:
        return self.spec.velocity.layout.size * self.spec.blocks

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([f.params for f in self.fields])

    def with_params(self, flat) -> "FlowModel":
        return FlowModel(self.spec, [f.with_params(p) for f, p in zip(self.fields, self.split(flat))])

    def split(self, flat) -> list:
        """Per-block slices of a flat parameter vector (array or ``Var``)."""
        n = self.spec.velocity.layout.size
        if ad.value_of(flat).shape != (n * self.spec.blocks,):
            raise ValueError("flat parameter vector has the wrong length")
        return [ad.getitem(flat, slice(k * n, (k + 1) * n)) for k in range(self.spec.blocks)]


def init_model(spec: FlowSpec, seed: int = 0) -> FlowModel:
    rng = np.random.default_rng(seed)
    return FlowModel(spec, [init_field(spec.velocity, rng) for _ in range(spec.blocks)])


def stationary_model(vf: VelocityField, cells: int, logdet_method: str = "exact") -> FlowModel:
    """A single-block flow around an existing field."""
    spec = FlowSpec(dim=vf.spec.dim, blocks=1, cells_per_block=cells,
                    logdet_method=logdet_method, velocity=vf.spec)
    return FlowModel(spec, [vf])


# --------------------------------------------------------------------------
# cells


def euler_step(vf: VelocityField, z, dt: float, context=None, params=None):
    """One Euler cell z + dt * v(z)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = ad.add(z, ad.mul(dt, evaluate(vf, z, context, params)))
    if not np.all(np.isfinite(ad.value_of(out))):
        raise FlowNumericalError(0)
    return out


def logdet_from_jacobian(J, dt: float, method: str):
    """Per-cell log|det(I + dt J)|, exactly or by a Taylor truncation."""
    if method == "exact":
        return exact_logdet(J, dt)
    tr = ad.trace(J)
    first = ad.mul(dt, tr)
    if method == "first_order":
        return first
    if method == "second_order_series":
        quad = ad.sum_(ad.sum_(ad.mul(J, ad.swapaxes(J, -1, -2)), -1), -1)
    elif method == "second_order_paper":
        quad = ad.sum_(ad.sum_(ad.square(J), -1), -1)
    else:
        raise ValueError(f"unknown logdet method {method!r}")
    return ad.sub(first, ad.mul(0.5 * dt * dt, quad))


def exact_logdet(J, dt: float):
    d = ad.value_of(J).shape[-1]
    A = ad.add(np.eye(d), ad.mul(dt, J))
    try:
        return ad.logabsdet(A)
    except np.linalg.LinAlgError:
        raise NonInvertibleCellError("I + dt*J is singular: cell is not invertible") from None


def cell_logdet(vf: VelocityField, z, dt: float, method: str = "exact", context=None):
    J = eval_and_jacobian(vf, z, context)[1]
    return logdet_from_jacobian(J, dt, method)


def _probe_estimates(vf, z, context, layers, probes, second_order: str | None):
    """Hutchinson estimates of Tr(J) and the quadratic term, from jvps only."""
    tr = 0.0
    quad = 0.0
    m = len(probes)
    for w in probes:
        Jw = jvp(vf, z, w, context, layers=layers)
        tr = ad.add(tr, ad.sum_(ad.mul(w, Jw), -1))
        if second_order == "second_order_series":
            JJw = jvp(vf, z, Jw, context, layers=layers)
            quad = ad.add(quad, ad.sum_(ad.mul(w, JJw), -1))
        elif second_order == "second_order_paper":
            quad = ad.add(quad, ad.sum_(ad.square(Jw), -1))
    return ad.mul(tr, 1.0 / m), ad.mul(quad, 1.0 / m)


def hutchinson_trace(vf: VelocityField, z, M: int, rng: np.random.Generator, context=None,
                     return_samples: bool = False):
    """Estimate Tr(J_v(z)) at a single point as the mean of w^T J w, w ~ N(0, I)."""
    if M < 1:
        raise ValueError("need at least one probe")
    z = np.asarray(z, dtype=np.float64)
    w = rng.standard_normal((M, z.shape[-1]))
    zs = np.broadcast_to(z, (M, z.shape[-1]))
    ctx = None if context is None else np.broadcast_to(context, (M, np.shape(context)[-1]))
    samples = np.sum(w * ad.value_of(jvp(vf, zs, w, ctx)), axis=-1)
    est = float(np.mean(samples))
    return (est, samples) if return_samples else est


# --------------------------------------------------------------------------
# forward / inverse


def _run(model: FlowModel, z, context, params, direction: int, want_logdet: bool,
         want_trajectory: bool, want_energy: bool, rng, method: str | None):
    spec = model.spec
    dt = spec.dt
    method = spec.logdet_method if method is None else method
    probes_n = spec.hutchinson_probes
    if ad.value_of(z).shape[-1] != spec.dim:
        raise ValueError(f"point dimension {ad.value_of(z).shape[-1]} != flow dimension {spec.dim}")
    if probes_n and method != "exact" and rng is None:
        raise ValueError("trace estimation needs an rng")
    block_params = [None] * spec.blocks if params is None else model.split(params)
    order = range(spec.blocks) if direction > 0 else range(spec.blocks - 1, -1, -1)
    batch_shape = ad.value_of(z).shape[:-1]
    sum_logdet = np.zeros(batch_shape)
    energy = np.zeros(batch_shape)
    traj = [ad.value_of(z)] if want_trajectory else None
    cell = 0
    for k in order:
        vf = model.fields[k]
        layers = vf.layers(block_params[k])
        if direction < 0:
            layers = layers[:-1] + [(ad.neg(layers[-1][0]), ad.neg(layers[-1][1]))]
        for _ in range(spec.cells_per_block):
            if want_logdet and (method == "exact" or not probes_n):
                v, J = eval_and_jacobian(vf, z, context, layers=layers)
                ld = logdet_from_jacobian(J, dt, method)
                sum_logdet = ad.add(sum_logdet, ld)
            else:
                v = evaluate(vf, z, context, layers=layers)
                if want_logdet:
                    probes = [rng.standard_normal(ad.value_of(z).shape) for _ in range(probes_n)]
                    so = None if method == "first_order" else method
                    tr, quad = _probe_estimates(vf, z, context, layers, probes, so)
                    ld = ad.sub(ad.mul(dt, tr), ad.mul(0.5 * dt * dt, quad))
                    sum_logdet = ad.add(sum_logdet, ld)
            if want_energy:
                energy = ad.add(energy, ad.mul(dt, ad.sum_(ad.square(v), -1)))
            z = ad.add(z, ad.mul(dt, v))
            cell += 1
            if not np.all(np.isfinite(ad.value_of(z))):
                raise FlowNumericalError(cell)
            if want_trajectory:
                traj.append(ad.value_of(z))
    return FlowResult(z, sum_logdet, traj, energy if want_energy else None)


def forward(model: FlowModel, z0, context=None, want_trajectory: bool = False, *,
            params=None, rng=None, want_logdet: bool = True, want_energy: bool = False,
            method: str | None = None) -> FlowResult:
    """Push ``z0`` through all K*T Euler cells, accumulating log-determinants.

    ``params`` overrides the model's own parameters (e.g. with a tape
    variable during training); ``rng`` drives Hutchinson probes when the
    spec enables them. ``want_energy`` also returns the per-sample path
    energy sum over cells of dt * |v|^2.
    """
    return _run(model, z0, context, params, +1, want_logdet, want_trajectory, want_energy,
                rng, method)


def inverse(model: FlowModel, zK, context=None, want_trajectory: bool = False, *,
            params=None, rng=None, want_logdet: bool = True, method: str | None = None) -> FlowResult:
    """Integrate -v backwards through the blocks K..1.

    ``sum_logdet`` is the log-determinant of the backward map itself, i.e.
    the sum of log|det(I - dt J)| over the backward cells.
    """
    return _run(model, zK, context, params, -1, want_logdet, want_trajectory, False, rng, method)


def log_density(model: FlowModel, base, z, context=None, *, params=None, base_params=None,
                method: str | None = None, rng=None):
    """log q_1(z) = log q_0(phi^{-1}(z)) + log|det d phi^{-1}/dz|."""
    res = inverse(model, z, context, params=params, method=method, rng=rng)
    return ad.add(base.log_density(res.z_out, base_params), res.sum_logdet)

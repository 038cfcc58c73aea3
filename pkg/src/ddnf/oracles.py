"""Ground-truth computations used to check the flow's approximations.

Nothing here depends on the autodiff tape: these are plain numpy routines
so they stay independent of the code paths they verify.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class StiffnessError(RuntimeError):
    pass


class SingularMatrixError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class RkResult:
    z_final: np.ndarray
    steps_accepted: int
    steps_rejected: int
    max_error_estimate: float


def rk45_integrate(f: Callable, z0, t1: float, rtol: float = 1e-10, atol: float = 1e-12,
                   t0: float = 0.0, h0: float | None = None, max_steps: int = 1_000_000) -> RkResult:
    """Integrate the autonomous ODE dz/dt = f(z) from t0 to t1.

    ``f`` maps an array of any shape to an array of the same shape, so a
    batch of points can be integrated as one system. Error norm is the RMS
    of the scaled local error estimate; step control uses safety 0.9 and a
    growth factor clamped to [0.2, 5].
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    z = np.array(z0, dtype=np.float64)
    t = t0
    span = t1 - t0
    if span == 0:
        return RkResult(z, 0, 0, 0.0)
    direction = np.sign(span)
    k1 = np.asarray(f(z), dtype=np.float64)
    if h0 is None:
        scale = atol + rtol * np.abs(z)
        d0 = np.sqrt(np.mean((z / scale) ** 2))
        d1 = np.sqrt(np.mean((k1 / scale) ** 2))
        if d1 == 0.0:
            h = abs(span)
        else:
            h = min(abs(span), 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6)
    else:
        h = abs(h0)
    accepted = rejected = 0
    max_err = 0.0
    while direction * (t1 - t) > 0:
        if accepted + rejected >= max_steps:
            raise StiffnessError("maximum number of steps exceeded")
        if h < 1e-14:
            raise StiffnessError(f"step size underflow at t={t}")
        h = min(h, abs(t1 - t))
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            zi = z + hs * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(np.asarray(f(zi), dtype=np.float64))
        z_new = z + hs * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = hs * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err <= 1.0:
            t = t + hs if abs(t1 - t - hs) > 1e-15 * abs(span) else t1
            z = z_new
            k1 = ks[6]  # first-same-as-last
            accepted += 1
            max_err = max(max_err, err)
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        else:
            rejected += 1
            factor = min(1.0, max(0.2, 0.9 * err ** -0.2))
        h = h * factor
    return RkResult(z, accepted, rejected, max_err)


def rk45_flow(model, z0, rtol: float = 1e-10, atol: float = 1e-12) -> np.ndarray:
    """Reference phi(1, z0) for a piecewise-stationary flow model.

    Block k is integrated for time 1/K with its own field; all points are
    advanced as one system.
    """
    from .velocity import evaluate

    z = np.array(z0, dtype=np.float64)
    span = 1.0 / model.spec.blocks
    for vf in model.fields:
        z = rk45_integrate(lambda x, vf=vf: evaluate(vf, x), z, span, rtol=rtol, atol=atol).z_final
    return z


# --------------------------------------------------------------------------
# linear algebra


def lu_decompose(A):
    """LU with partial pivoting: returns (LU packed, permutation, sign)."""
    LU = np.array(A, dtype=np.float64)
    n = LU.shape[0]
    if LU.shape != (n, n):
        raise ValueError("matrix must be square")
    perm = np.arange(n)
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(LU[k:, k])))
        if LU[p, k] == 0.0:
            raise SingularMatrixError("matrix is singular")
        if p != k:
            LU[[k, p]] = LU[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        LU[k + 1:, k] /= LU[k, k]
        LU[k + 1:, k + 1:] -= np.outer(LU[k + 1:, k], LU[k, k + 1:])
    return LU, perm, sign


def slogdet_lu(A) -> tuple[float, float]:
    """(sign, log|det A|) from the LU factors."""
    LU, _, sign = lu_decompose(A)
    diag = np.diag(LU)
    sign = sign * float(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def exact_cell_logdet(J, dt: float, return_sign: bool = False):
    """log|det(I + dt J)|; a negative sign means the cell flips orientation."""
    J = np.asarray(J, dtype=np.float64)
    sign, logabs = slogdet_lu(np.eye(J.shape[0]) + dt * J)
    return (logabs, sign) if return_sign else logabs


def matrix_exp(A, degree: int = 18) -> np.ndarray:
    """Scaling and squaring with a truncated Taylor series."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    norm = np.max(np.sum(np.abs(A), axis=0)) if A.size else 0.0
    s = 0 if norm <= 0.5 else int(np.ceil(np.log2(norm / 0.5)))
    X = A / (2.0 ** s)
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, degree + 1):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def finite_diff_grad(f: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def finite_diff_jacobian(f: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; column j is d f / d x_j."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# Metropolis-Hastings


@dataclass
class McmcChain:
    samples: np.ndarray
    acceptance_rate: float
    burn_in: int
    proposal_scale: np.ndarray = None
    warnings: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1)


def mh_sample(log_target: Callable, init, steps: int, proposal_scale=2.4, burn_in: int = 0,
              seed: int = 0, adapt: int = 0, transform: Callable | None = None) -> McmcChain:
    """Random-walk Metropolis with Gaussian proposals.

    ``adapt`` > 0 runs that many warm-up steps before the chain proper,
    rescaling the proposal every 100 steps towards 20-50% acceptance, then
    freezes the scale. ``steps`` counts the chain proper, of which the first
    ``burn_in`` are discarded.
    """
    if not steps > burn_in >= 0:
        raise ValueError("need steps > burn_in >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    x = np.array(init, dtype=np.float64).reshape(-1)
    d = x.size
    scale = np.broadcast_to(np.asarray(proposal_scale, dtype=np.float64), (d,)).copy()
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValueError("log target is not finite at the initial point")

    if adapt:
        acc = 0
        warm = np.empty((adapt, d))
        for i in range(1, adapt + 1):
            prop = x + scale * rng.standard_normal(d)
            lq = float(log_target(prop))
            if np.isfinite(lq) and np.log(rng.uniform()) < lq - lp:
                x, lp = prop, lq
                acc += 1
            warm[i - 1] = x
            if i == adapt // 2 and d > 1:
                # match the proposal shape to the warm-up spread per coordinate
                spread = warm[adapt // 4:i].std(axis=0)
                if np.all(spread > 0):
                    scale = 2.4 / np.sqrt(d) * spread
            if i % 100 == 0:
                rate = acc / 100
                if rate < 0.2:
                    scale *= 0.7
                elif rate > 0.5:
                    scale *= 1.4
                acc = 0

    out = np.empty((steps - burn_in, d))
    accepted = 0
    noise = rng.standard_normal((steps, d))
    logu = np.log(rng.uniform(size=steps))
    for i in range(steps):
        prop = x + scale * noise[i]
        lq = float(log_target(prop))
        if np.isfinite(lq) and logu[i] < lq - lp:
            x, lp = prop, lq
            accepted += 1
        if i >= burn_in:
            out[i - burn_in] = x
    rate = accepted / steps
    notes = []
    if rate < 0.01 or rate > 0.99:
        notes.append(f"acceptance rate {rate:.4f} outside [0.01, 0.99]")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if transform is not None:
        out = np.apply_along_axis(transform, 1, out)
    return McmcChain(out, rate, burn_in, scale, notes)


def write_chain_csv(chain: McmcChain, path) -> None:
    d = chain.samples.shape[1]
    header = "step," + ",".join(f"z{i}" for i in range(d))
    steps = np.arange(chain.burn_in, chain.burn_in + len(chain.samples))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for s, row in zip(steps, chain.samples):
            fh.write(f"{s}," + ",".join(repr(float(v)) for v in row) + "\n")

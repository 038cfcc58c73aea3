"""Regularized ELBO objectives and the stochastic-gradient trainer."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .flow import FlowModel, FlowNumericalError, NonInvertibleCellError, forward, inverse
from .planar import PlanarFlow, planar_flow_forward
from .regularize import RegWeights
from .targets import BaseDistribution


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite per-sample loss at batch index {index}")
        self.index = index


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 5000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reg: RegWeights = RegWeights()
    seed: int = 0
    logdet_method: Optional[str] = None
    eval_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    elbo: float
    geodesic: float
    inverse_consistency: float
    seconds: float


@dataclass
class TrainResult:
    flow: object
    base: BaseDistribution
    history: list
    losses: np.ndarray
    status: str = "ok"
    message: str = ""

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


# --------------------------------------------------------------------------
# objectives


def split_params(flow, base: BaseDistribution, theta):
    n = flow.n_params
    fp = ad.getitem(theta, slice(0, n))
    bp = ad.getitem(theta, slice(n, n + base.n_params)) if base.n_params else None
    return fp, bp


def pack_params(flow, base: BaseDistribution) -> np.ndarray:
    return np.concatenate([flow.params, base.params])


def unpack_params(flow, base: BaseDistribution, theta):
    theta = np.asarray(theta, dtype=np.float64)
    n = flow.n_params
    return flow.with_params(theta[:n]), base.with_params(theta[n:])


def variational_objective(flow, base: BaseDistribution, log_target: Callable, eps,
                          reg: RegWeights = RegWeights(), params=None, context=None, rng=None,
                          method: str | None = None):
    """Negative regularized ELBO on a batch of base noise ``eps``.

    Returns ``(loss, aux)`` where aux holds the ELBO estimate and the two
    penalty values (NaN when a penalty is switched off).
    """
    if np.shape(eps)[0] == 0:
        raise ValueError("empty batch")
    if params is None:
        params = pack_params(flow, base)
    fp, bp = split_params(flow, base, params)
    z0 = base.sample(eps, bp)
    log_q0 = base.log_density(z0, bp)
    planar = isinstance(flow, PlanarFlow)
    if planar:
        res = planar_flow_forward(flow, z0, params=fp)
    else:
        res = forward(flow, z0, context, params=fp, rng=rng, method=method,
                      want_energy=reg.gamma_geodesic > 0)
    per_sample = ad.sub(ad.sub(log_q0, res.sum_logdet), log_target(res.z_out))
    values = ad.value_of(per_sample)
    if not np.all(np.isfinite(values)):
        raise NonFiniteLossError(int(np.flatnonzero(~np.isfinite(values))[0]))
    nelbo = ad.mean(per_sample)
    loss = nelbo
    geo = invc = np.nan
    if reg.gamma_geodesic > 0 and not planar:
        g = ad.mean(res.path_energy)
        loss = ad.add(loss, ad.mul(reg.gamma_geodesic, g))
        geo = g
    if reg.gamma_inverse > 0 and not planar:
        back = inverse(flow, res.z_out, context, params=fp, want_logdet=False).z_out
        r = ad.mean(ad.sqrt(ad.sum_(ad.square(ad.sub(z0, back)), -1)))
        loss = ad.add(loss, ad.mul(reg.gamma_inverse, r))
        invc = r
    return loss, {"elbo": ad.neg(nelbo), "geodesic": geo, "inverse_consistency": invc}


def energy_objective(model, base, target, eps, reg=RegWeights(), params=None, rng=None, method=None):
    """Loss for fitting exp(-U): mean[log q0(z0) - sum logdet + U(z_K)] + penalties."""
    return variational_objective(model, base, target.log_unnorm, eps, reg, params, rng=rng,
                                 method=method)[0]


def posterior_objective(model, base, bb, eps, reg=RegWeights(), params=None, rng=None, method=None):
    """As :func:`energy_objective` with U replaced by the negative log posterior."""
    return variational_objective(model, base, bb.log_unnorm, eps, reg, params, rng=rng,
                                 method=method)[0]


# --------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent counter-based streams for base noise and trace probes."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(a)), np.random.Generator(np.random.Philox(b))


# --------------------------------------------------------------------------
# training


_NUMERICAL_FAILURES = (NonFiniteLossError, FlowNumericalError, NonInvertibleCellError,
                       ad.NonFiniteError, FloatingPointError, np.linalg.LinAlgError)


def train(flow, base: BaseDistribution, target, cfg: TrainConfig, context=None,
          callback: Callable | None = None) -> TrainResult:
    """Minimize the regularized negative ELBO for ``target.log_unnorm``.

    Numerical divergence stops the run; the partial history is returned
    with ``status='diverged'``.
    """
    eps_rng, probe_rng = make_rngs(cfg.seed)
    opt = make_optimizer(cfg)
    theta = pack_params(flow, base)
    dim = base.dim
    history: list[TrainRecord] = []
    losses: list[float] = []
    start = time.perf_counter()
    status, message = "ok", ""

    def objective(t):
        return variational_objective(flow, base, target.log_unnorm, eps, cfg.reg, params=t,
                                     context=context, rng=probe_rng, method=cfg.logdet_method)

    with np.errstate(all="ignore"):
        for it in range(1, cfg.iterations + 1):
            eps = eps_rng.standard_normal((cfg.batch_size, dim))
            try:
                (loss, aux), g = ad.value_and_grad(objective, theta, has_aux=True, check_finite=False)
                if not np.isfinite(loss):
                    raise NonFiniteLossError(-1)
                if not np.all(np.isfinite(g)):
                    raise ad.NonFiniteError("gradient", "backward")
            except _NUMERICAL_FAILURES as exc:
                status, message = "diverged", f"iteration {it}: {exc}"
                break
            losses.append(loss)
            if it % cfg.eval_every == 0 or it == cfg.iterations:
                rec = TrainRecord(it, loss, float(aux["elbo"]), float(aux["geodesic"]),
                                  float(aux["inverse_consistency"]), time.perf_counter() - start)
                history.append(rec)
                if callback is not None:
                    callback(rec)
            theta = opt.step(theta, g)
            if not np.all(np.isfinite(theta)):
                status, message = "diverged", f"iteration {it}: non-finite parameters"
                break

    if status == "diverged":
        # keep the last finite parameters
        theta = theta if np.all(np.isfinite(theta)) else pack_params(flow, base)
    flow_out, base_out = unpack_params(flow, base, theta)
    return TrainResult(flow_out, base_out, history, np.asarray(losses), status, message)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "elbo", "geo", "invc", "seconds"])
        for r in history:
            w.writerow([r.iteration, repr(r.loss), repr(r.elbo), repr(r.geodesic),
                        repr(r.inverse_consistency), f"{r.seconds:.3f}"])


def pushforward(flow, base: BaseDistribution, n: int, seed: int = 0, context=None) -> np.ndarray:
    """Draw ``n`` samples from the flow's approximation."""
    rng = np.random.Generator(np.random.Philox(seed))
    eps = rng.standard_normal((n, base.dim))
    z0 = base.sample(eps)
    if isinstance(flow, PlanarFlow):
        return np.asarray(planar_flow_forward(flow, z0).z_out)
    return np.asarray(forward(flow, z0, context, want_logdet=False).z_out)


def mc_elbo(flow, base, log_target, n: int, seed: int = 0, chunk: int = 10_000):
    """Per-sample ELBO terms log p~(z_K) - log q0(z0) + sum logdet for ``n`` draws."""
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    left = n
    while left > 0:
        m = min(chunk, left)
        eps = rng.standard_normal((m, base.dim))
        z0 = base.sample(eps)
        if isinstance(flow, PlanarFlow):
            res = planar_flow_forward(flow, z0)
        else:
            res = forward(flow, z0)
        out.append(np.asarray(log_target(res.z_out) - base.log_density(z0) + res.sum_logdet))
        left -= m
    return np.concatenate(out)

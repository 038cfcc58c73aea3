"""Base distribution and unnormalized target densities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BaseDistribution:
    """Diagonal Gaussian q0 = N(mu, diag(sigma^2))."""

    dim: int = 2
    mu: np.ndarray = None
    log_sigma: np.ndarray = None
    learnable: bool = False

    def __post_init__(self):
        mu = np.zeros(self.dim) if self.mu is None else np.array(self.mu, dtype=np.float64)
        ls = np.zeros(self.dim) if self.log_sigma is None else np.array(self.log_sigma, dtype=np.float64)
        if mu.shape != (self.dim,) or ls.shape != (self.dim,):
            raise ValueError("mu and log_sigma must have shape (dim,)")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def n_params(self) -> int:
        return 2 * self.dim if self.learnable else 0

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_sigma]) if self.learnable else np.zeros(0)

    def with_params(self, flat) -> "BaseDistribution":
        if not self.learnable:
            return self
        flat = np.asarray(flat, dtype=np.float64)
        return BaseDistribution(self.dim, flat[: self.dim], flat[self.dim:], True)

    def _unpack(self, params):
        if params is None or not self.learnable:
            return self.mu, self.log_sigma
        return ad.getitem(params, slice(0, self.dim)), ad.getitem(params, slice(self.dim, 2 * self.dim))

    def sample(self, eps, params=None):
        """Reparameterized draw mu + sigma * eps."""
        mu, ls = self._unpack(params)
        return ad.add(mu, ad.mul(ad.exp(ls), eps))

    def log_density(self, z, params=None):
        mu, ls = self._unpack(params)
        u = ad.div(ad.sub(z, mu), ad.exp(ls))
        per_dim = ad.sub(ad.mul(-0.5, ad.square(u)), ls)
        return ad.sub(ad.sum_(per_dim, -1), 0.5 * self.dim * LOG_2PI)


# --------------------------------------------------------------------------
# toy energies


ENERGIES = ("u1", "u2")
_RING_CONSTANT = {"u1": 4.0, "u2": 2.0}


def energy(name: str, z, ring_norm: str = "squared"):
    """Toy energy U(z) for z of shape (..., 2); p(z) is proportional to exp(-U).

    ``ring_norm='squared'`` uses |z|^2 in the ring term, ``'plain'`` uses |z|.
    """
    if name not in _RING_CONSTANT:
        raise ValueError(f"unknown energy {name!r}, expected one of {ENERGIES}")
    z1 = ad.getitem(z, (Ellipsis, 0))
    r2 = ad.sum_(ad.square(z), -1)
    if ring_norm == "squared":
        r = r2
    elif ring_norm == "plain":
        r = ad.sqrt(r2)
    else:
        raise ValueError(f"ring_norm must be 'squared' or 'plain', got {ring_norm!r}")
    ring = ad.mul(0.5, ad.square(ad.div(ad.sub(r, _RING_CONSTANT[name]), 0.4)))
    a = ad.mul(-0.5, ad.square(ad.div(ad.sub(z1, 2.0), 0.8)))
    b = ad.mul(-0.5, ad.square(ad.div(ad.add(z1, 2.0), 0.8)))
    return ad.sub(ring, ad.logaddexp(a, b))


@dataclass(frozen=True)
class EnergyTarget:
    name: str = "u1"
    ring_norm: str = "squared"

    def __post_init__(self):
        if self.name not in ENERGIES:
            raise ValueError(f"unknown energy {self.name!r}")

    dim = 2

    def log_unnorm(self, z):
        return ad.neg(energy(self.name, z, self.ring_norm))


# --------------------------------------------------------------------------
# beta-binomial over-dispersion model


@dataclass(frozen=True)
class BetaBinomialModel:
    n: np.ndarray
    y: np.ndarray
    log_binom: np.ndarray = field(init=False, repr=False)

    dim = 2

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if n.size == 0:
            raise ValueError("beta-binomial model needs at least one record")
        if n.shape != y.shape:
            raise ValueError("n and y must have the same length")
        if np.any(n <= 0) or np.any(y < 0) or np.any(y > n) or np.any(n != np.round(n)) \
                or np.any(y != np.round(y)):
            raise ValueError("records must satisfy 0 <= y <= n with n a positive integer")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "y", y)
        lb = ad.lanczos_lgamma(n + 1) - ad.lanczos_lgamma(y + 1) - ad.lanczos_lgamma(n - y + 1)
        object.__setattr__(self, "log_binom", lb)

    @classmethod
    def from_csv(cls, path) -> "BetaBinomialModel":
        n, y = read_counts_csv(path)
        return cls(n, y)

    def log_unnorm(self, z):
        return betabinom_log_unnorm_posterior(z, self)

    def moment_estimate(self) -> tuple[float, float]:
        """Crude (m, L) from the pooled rate and the excess binomial variance.

        Uses E[sum n_j (p_j - m)^2] ~ m (1 - m) sum(1 + (n_j - 1) / (L + 1)).
        """
        m = float(self.y.sum() / self.n.sum())
        m = min(max(m, 1e-6), 1 - 1e-6)
        p = self.y / self.n
        excess = np.sum(self.n * (p - m) ** 2) / (m * (1 - m)) - self.n.size
        phi = excess / np.sum(self.n - 1) if np.sum(self.n - 1) > 0 else 1.0
        phi = min(max(phi, 1e-6), 0.5)
        return m, 1.0 / phi - 1.0


def to_constrained(z):
    """(logit m, log L) -> (m, L)."""
    z = np.asarray(z, dtype=np.float64)
    return np.stack([ad.sigmoid(z[..., 0]), np.exp(z[..., 1])], axis=-1)


def to_unconstrained(m, L):
    return np.stack([np.log(m) - np.log1p(-np.asarray(m)), np.log(L)], axis=-1)


def betabinom_log_prior(z):
    """log p(m, L) plus the log-Jacobian of z -> (m, L).

    log[1 / (m (1-m) (1+L)^2)] + log(m (1-m)) + z_L = z_L - 2 log(1 + e^{z_L}).
    """
    zl = ad.getitem(z, (Ellipsis, 1))
    return ad.sub(zl, ad.mul(2.0, ad.softplus(zl)))


def betabinom_log_likelihood(z, model: BetaBinomialModel):
    zm = ad.getitem(z, (Ellipsis, 0))
    zl = ad.getitem(z, (Ellipsis, 1))
    m = ad.sigmoid(zm)
    one_minus_m = ad.sigmoid(ad.neg(zm))
    L = ad.exp(zl)
    a = ad.reshape(ad.mul(L, m), ad.value_of(m).shape + (1,))
    b = ad.reshape(ad.mul(L, one_minus_m), ad.value_of(m).shape + (1,))
    Lc = ad.reshape(L, ad.value_of(L).shape + (1,))
    n, y = model.n, model.y
    # log B(a + y, b + n - y) - log B(a, b)
    terms = ad.add(ad.lgamma(ad.add(a, y)), ad.lgamma(ad.add(b, n - y)))
    terms = ad.sub(terms, ad.lgamma(ad.add(Lc, n)))
    terms = ad.sub(terms, ad.add(ad.lgamma(a), ad.lgamma(b)))
    terms = ad.add(terms, ad.lgamma(Lc))
    return ad.add(ad.sum_(terms, -1), float(np.sum(model.log_binom)))


def betabinom_log_unnorm_posterior(z, model: BetaBinomialModel):
    """Unnormalized log posterior on the unconstrained (logit m, log L) plane."""
    return ad.add(betabinom_log_prior(z), betabinom_log_likelihood(z, model))


def read_counts_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column ``n,y`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["n", "y"]:
            raise ValueError(f"{path}: expected header 'n,y', got {reader.fieldnames}")
        rows = [(int(r["n"]), int(r["y"])) for r in reader]
    if not rows:
        raise ValueError(f"{path}: no records")
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0], arr[:, 1]


def write_counts_csv(path, n, y) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("n,y\n")
        for a, b in zip(n, y):
            fh.write(f"{int(a)},{int(b)}\n")


def synthetic_betabinom(m: float = 0.005, L: float = 1500.0, records: int = 20,
                        n_range=(1e3, 1e5), seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw counts from the beta-binomial model at known (m, L).

    Population sizes are log-uniform over ``n_range``.
    """
    rng = np.random.default_rng(seed)
    n = np.round(np.exp(rng.uniform(np.log(n_range[0]), np.log(n_range[1]), records))).astype(int)
    p = rng.beta(L * m, L * (1 - m), size=records)
    y = rng.binomial(n, p)
    return n, y


def default_synthetic_path() -> Path:
    return Path(__file__).with_name("data") / "synthetic_betabinom.csv"

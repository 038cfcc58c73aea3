"""Geodesic (path-energy) and inverse-consistency penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flow import FlowModel, forward, inverse


@dataclass(frozen=True)
class RegWeights:
    gamma_geodesic: float = 0.0
    gamma_inverse: float = 0.0

    def __post_init__(self):
        if self.gamma_geodesic < 0 or self.gamma_inverse < 0:
            raise ValueError("regularization weights must be non-negative")


def geodesic_penalty(model: FlowModel, batch, context=None, params=None):
    """Sum over cells of dt * mean_batch |v_k(z_cell)|^2 (identity metric)."""
    if ad.value_of(batch).shape[0] == 0:
        raise ValueError("empty batch")
    res = forward(model, batch, context, params=params, want_logdet=False, want_energy=True)
    return ad.mean(res.path_energy)


def inverse_residual(model: FlowModel, batch, context=None, params=None):
    """Per-sample |z0 - phi^{-1}(phi(z0))|_2."""
    zK = forward(model, batch, context, params=params, want_logdet=False).z_out
    z_back = inverse(model, zK, context, params=params, want_logdet=False).z_out
    return ad.sqrt(ad.sum_(ad.square(ad.sub(batch, z_back)), -1))


def inverse_consistency_penalty(model: FlowModel, batch, context=None, params=None):
    """Batch mean of the forward-then-inverse reconstruction distance."""
    if ad.value_of(batch).shape[0] == 0:
        raise ValueError("empty batch")
    return ad.mean(inverse_residual(model, batch, context, params))

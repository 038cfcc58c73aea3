"""Desk-scale experiment drivers behind the CLI.

Each ``run_*`` function returns plain Python data (rows and a summary dict)
so the test suite can call it directly; the CLI only adds file output.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .flow import FlowModel, FlowSpec, forward, init_model, inverse, log_density
from .inference import TrainConfig, TrainResult, pushforward, train
from .oracles import mh_sample, rk45_flow
from .planar import PlanarFlow, init_planar, planar_inverse
from .regularize import RegWeights
from .targets import (BaseDistribution, BetaBinomialModel, EnergyTarget, to_constrained,
                      to_unconstrained)
from .velocity import VelocitySpec, constant_field

DEFAULT_T_LIST = (1, 2, 4, 8, 16, 32, 64, 128)


def _random_models(t_list, trial_seed: int, blocks: int, vspec: VelocitySpec, field: str):
    """The same velocity fields wrapped at each cell count in ``t_list``."""
    if field == "constant":
        rng = np.random.default_rng(trial_seed)
        fields = [constant_field(rng.normal(size=vspec.dim), vspec.hidden) for _ in range(blocks)]
        vspec = fields[0].spec
    else:
        fields = init_model(FlowSpec(dim=vspec.dim, blocks=blocks, velocity=vspec), trial_seed).fields
    return [FlowModel(FlowSpec(dim=vspec.dim, blocks=blocks, cells_per_block=T, velocity=vspec), fields)
            for T in t_list]


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def run_ode_accuracy(t_list: Sequence[int] = DEFAULT_T_LIST, trials: int = 50, samples: int = 1000,
                     blocks: int = 1, seed: int = 0, hidden=(2, 2), init_scale: float = 1.0,
                     field: str = "random", rtol: float = 1e-10, atol: float = 1e-12):
    """Euler forward pass against an adaptive Dormand-Prince reference.

    Rows: ``T, dt, mse, rmse, std`` where ``mse`` is the mean over trials
    and samples of |phi_T(z0) - phi_ref(z0)|^2 and ``std`` the spread of the
    per-trial MSE.
    """
    if not t_list:
        raise ValueError("t_list must be nonempty")
    vspec = VelocitySpec(dim=2, hidden=tuple(hidden), init_scale=init_scale,
                         zero_init_output=(field == "zero"))
    per_trial = np.zeros((trials, len(t_list)))
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        z0 = rng.standard_normal((samples, 2))
        models = _random_models(t_list, seed * 100_003 + trial, blocks, vspec,
                                "constant" if field == "constant" else "random")
        ref = rk45_flow(models[0], z0, rtol=rtol, atol=atol)
        for j, model in enumerate(models):
            zT = forward(model, z0, want_logdet=False).z_out
            per_trial[trial, j] = np.mean(np.sum((zT - ref) ** 2, axis=-1))
    mse = per_trial.mean(axis=0)
    rows = [{"T": T, "dt": 1.0 / (blocks * T), "mse": float(m), "rmse": float(np.sqrt(m)),
             "std": float(s)} for T, m, s in zip(t_list, mse, per_trial.std(axis=0))]
    summary = {"slope_rmse_vs_dt": loglog_slope([r["dt"] for r in rows], [r["rmse"] for r in rows])
               if len(rows) > 1 and np.all(mse > 0) else float("nan")}
    return rows, summary


def run_inversion(t_list: Sequence[int] = DEFAULT_T_LIST, trials: int = 50, samples: int = 1000,
                  blocks: int = 1, seed: int = 0, hidden=(2, 2), init_scale: float = 1.0,
                  field: str = "random"):
    """Reconstruction error |z0 - phi^{-1}(phi(z0))|^2 per cell count.

    Rows: ``T, dt, mse, std`` (std across trials of the per-trial MSE).
    """
    if not t_list:
        raise ValueError("t_list must be nonempty")
    vspec = VelocitySpec(dim=2, hidden=tuple(hidden), init_scale=init_scale,
                         zero_init_output=(field == "zero"))
    per_trial = np.zeros((trials, len(t_list)))
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        z0 = rng.standard_normal((samples, 2))
        models = _random_models(t_list, seed * 100_003 + trial, blocks, vspec,
                                "constant" if field == "constant" else "random")
        for j, model in enumerate(models):
            zK = forward(model, z0, want_logdet=False).z_out
            back = inverse(model, zK, want_logdet=False).z_out
            per_trial[trial, j] = np.mean(np.sum((z0 - back) ** 2, axis=-1))
    rows = [{"T": T, "dt": 1.0 / (blocks * T), "mse": float(m), "std": float(s)}
            for T, m, s in zip(t_list, per_trial.mean(axis=0), per_trial.std(axis=0))]
    return rows, {"per_trial_mse": per_trial}


# --------------------------------------------------------------------------
# fitting


def grid_points(lo: float, hi: float, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred grid: returns (points of shape (res*res, 2), spacing)."""
    h = (hi - lo) / resolution
    g = lo + h * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(g, g, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=-1), h


def node_grid(lo: float, hi: float, resolution: int) -> np.ndarray:
    """Grid including both endpoints, for deformation plots."""
    g = np.linspace(lo, hi, resolution)
    X, Y = np.meshgrid(g, g, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def flow_log_density(flow, base: BaseDistribution, z, chunk: int = 20_000) -> np.ndarray:
    out = []
    for i in range(0, len(z), chunk):
        zc = z[i:i + chunk]
        if isinstance(flow, PlanarFlow):
            res = planar_inverse(flow, zc)
            out.append(base.log_density(res.z_out) + res.sum_logdet)
        else:
            out.append(np.asarray(log_density(flow, base, zc, method="exact")))
    return np.concatenate(out)


def grid_mass(flow, base, lo=-6.0, hi=6.0, resolution=400) -> float:
    pts, h = grid_points(lo, hi, resolution)
    return float(np.sum(np.exp(flow_log_density(flow, base, pts))) * h * h)


def build_flow(flow_kind: str, blocks: int, cells: int, logdet: str, seed: int,
               hidden=(2, 2), probes: int = 0, zero_init: bool = False, dim: int = 2):
    if flow_kind == "planar":
        return init_planar(dim, blocks, seed)
    if flow_kind != "ddnf":
        raise ValueError(f"unknown flow kind {flow_kind!r}")
    vspec = VelocitySpec(dim=dim, hidden=tuple(hidden), zero_init_output=zero_init)
    spec = FlowSpec(dim=dim, blocks=blocks, cells_per_block=cells, logdet_method=logdet,
                    hutchinson_probes=probes, velocity=vspec)
    return init_model(spec, seed)


def posterior_base(bb: BetaBinomialModel) -> BaseDistribution:
    """Learnable base centred on the moment estimate of (m, L)."""
    m0, L0 = bb.moment_estimate()
    mu = to_unconstrained(m0, L0)
    return BaseDistribution(2, mu, np.zeros(2), learnable=True)


def run_fit(kind: str, flow_kind: str = "ddnf", blocks: int = 8, cells: int = 8,
            logdet: str = "exact", cfg: TrainConfig = TrainConfig(), data=None,
            hidden=(2, 2), probes: int = 0, zero_init: bool = False, n_samples: int = 10_000,
            grid_range=(-4.0, 4.0), grid_resolution: int = 200, learn_base: bool | None = None,
            ring_norm: str = "squared"):
    """Train a flow on a toy energy or the beta-binomial posterior.

    Returns ``(result, outputs)`` where ``outputs`` holds sample arrays,
    optional grid tables and a summary dict.
    """
    if kind.startswith("energy-"):
        target = EnergyTarget(kind.split("-", 1)[1], ring_norm=ring_norm)
        learn = False if learn_base is None else learn_base
        base = BaseDistribution(2, learnable=learn)
    elif kind == "posterior":
        if data is None:
            raise ValueError("posterior fitting needs a data file")
        target = data if isinstance(data, BetaBinomialModel) else BetaBinomialModel.from_csv(data)
        base = posterior_base(target)
        if learn_base is False:
            base = replace(base, learnable=False)
    else:
        raise ValueError(f"unknown fit kind {kind!r}")
    flow = build_flow(flow_kind, blocks, cells, logdet, cfg.seed, hidden, probes, zero_init)
    result = train(flow, base, target, cfg)
    outputs: dict = {"summary": {
        "kind": kind, "flow": flow_kind, "status": result.status, "message": result.message,
        "iterations_run": int(len(result.losses)),
        "final_loss": float(result.losses[-1]) if len(result.losses) else float("nan"),
    }}
    if result.diverged:
        return result, outputs
    samples = pushforward(result.flow, result.base, n_samples, seed=cfg.seed + 1)
    outputs["samples"] = samples
    if kind.startswith("energy-"):
        pts, _ = grid_points(grid_range[0], grid_range[1], grid_resolution)
        outputs["grid"] = np.column_stack([pts, flow_log_density(result.flow, result.base, pts)])
        outputs["summary"].update({
            "mass_z1_gt_0.5": float(np.mean(samples[:, 0] > 0.5)),
            "mass_z1_lt_-0.5": float(np.mean(samples[:, 0] < -0.5)),
        })
    else:
        mL = to_constrained(samples)
        outputs["posterior_samples"] = mL
        outputs["summary"].update({
            "mean_m": float(mL[:, 0].mean()), "std_m": float(mL[:, 0].std(ddof=1)),
            "mean_L": float(mL[:, 1].mean()), "std_L": float(mL[:, 1].std(ddof=1)),
        })
    return result, outputs


# --------------------------------------------------------------------------
# MCMC and grids


def run_mcmc(data=None, steps: int = 100_000, burn_in: int = 10_000, scale=None, seed: int = 0,
             adapt: int = 5000, standard_normal: bool = False):
    """Random-walk Metropolis on the posterior (or a 1-d standard normal smoke target)."""
    if standard_normal:
        chain = mh_sample(lambda x: -0.5 * float(x @ x), np.zeros(1), steps,
                          2.4 if scale is None else scale, burn_in, seed)
        summary = {"acceptance_rate": chain.acceptance_rate, "mean": chain.mean.tolist(),
                   "var": (chain.std ** 2).tolist(), "warnings": chain.warnings}
        return chain, summary
    bb = data if isinstance(data, BetaBinomialModel) else BetaBinomialModel.from_csv(data)
    m0, L0 = bb.moment_estimate()
    init = to_unconstrained(m0, L0)
    chain = mh_sample(lambda z: float(bb.log_unnorm(z)), init, steps,
                      0.1 if scale is None else scale, burn_in, seed, adapt=adapt)
    mL = to_constrained(chain.samples)
    summary = {
        "acceptance_rate": chain.acceptance_rate, "warnings": chain.warnings,
        "proposal_scale": chain.proposal_scale.tolist(),
        "mean_m": float(mL[:, 0].mean()), "std_m": float(mL[:, 0].std(ddof=1)),
        "mean_L": float(mL[:, 1].mean()), "std_L": float(mL[:, 1].std(ddof=1)),
        "mean_z": chain.mean.tolist(), "std_z": chain.std.tolist(),
    }
    return chain, summary


def export_grid(flow: FlowModel, base: BaseDistribution | None = None, grid_range=(-4.0, 4.0),
                resolution: int = 20, heatmap_resolution: int = 200):
    """Deformed grid, displacement field, log-density heatmap and the
    inverse-consistency statistic mean |id - phi^{-1}(phi)|_2 over the grid."""
    base = BaseDistribution(flow.spec.dim) if base is None else base
    g = node_grid(grid_range[0], grid_range[1], resolution)
    phi = np.asarray(forward(flow, g, want_logdet=False).z_out)
    back = np.asarray(inverse(flow, phi, want_logdet=False).z_out)
    resid = np.linalg.norm(g - back, axis=-1)
    hpts, _ = grid_points(grid_range[0], grid_range[1], heatmap_resolution)
    heat = flow_log_density(flow, base, hpts)
    return {
        "deformed": np.column_stack([g, phi]),
        "displacement": np.column_stack([g, phi - g]),
        "heatmap": np.column_stack([hpts, heat]),
        "summary": {"mean_inverse_residual": float(resid.mean()),
                    "max_inverse_residual": float(resid.max())},
    }


def inverse_residual_on_grid(flow: FlowModel, grid_range=(-4.0, 4.0), resolution: int = 20) -> float:
    g = node_grid(grid_range[0], grid_range[1], resolution)
    phi = forward(flow, g, want_logdet=False).z_out
    back = inverse(flow, phi, want_logdet=False).z_out
    return float(np.mean(np.linalg.norm(g - back, axis=-1)))

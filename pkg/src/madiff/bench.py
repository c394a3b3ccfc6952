"""Benchmarks: numba-vs-numpy kernel comparison and the batched-agent
sampling wall-time protocol (fixed obs width, short DDIM chain, agent counts
swept while parameters stay shared)."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import kernels
from .data import NormStats
from .denoiser import NetConfig, init_params
from .invdyn import InvDynConfig
from .invdyn import init_params as init_inv
from .planner import Condition, ModelBundle, _sample_plan_batch
from .schedule import SamplerParams, build_schedule


def bench_kernels(repeats: int = 30):
    """Compare both conv kernel implementations on representative shapes.

    Returns rows (op, shape, impl, ms). Requires numba to be importable.
    """
    if not kernels.HAVE_NUMBA:
        raise RuntimeError("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    shapes = [
        (96, 14, 24, 32, 5, 1, 2),
        (96, 32, 24, 32, 5, 1, 2),
        (96, 32, 24, 64, 3, 2, 1),
        (96, 64, 12, 64, 5, 1, 2),
        (384, 32, 28, 32, 5, 1, 2),
    ]
    rows = []
    for b, ci, t, co, k, s, p in shapes:
        x = rng.standard_normal((b, ci, t)).astype(np.float32)
        w = rng.standard_normal((co, ci, k)).astype(np.float32)
        t_out = (t + 2 * p - k) // s + 1
        go = np.ascontiguousarray(
            rng.standard_normal((b, co, t_out)).astype(np.float32))
        ops = {
            "conv1d_forward": {
                "numba": lambda: kernels.conv1d_forward_numba(x, w, s, p),
                "numpy": lambda: kernels.conv1d_forward_numpy(x, w, s, p)},
            "conv1d_backward_x": {
                "numba": lambda: kernels.conv1d_backward_x_numba(go, w, t, s, p),
                "numpy": lambda: kernels.conv1d_backward_x_numpy(go, w, t, s, p)},
            "conv1d_backward_w": {
                "numba": lambda: kernels.conv1d_backward_w_numba(x, go, k, s, p),
                "numpy": lambda: kernels.conv1d_backward_w_numpy(x, go, k, s, p)},
        }
        shape_s = f"B{b}xC{ci}xT{t}->C{co} k{k} s{s}"
        for op, impls in ops.items():
            for impl, fn in impls.items():
                fn()  # warm up / compile
                t0 = time.perf_counter()
                for _ in range(repeats):
                    fn()
                rows.append((op, shape_s, impl,
                             (time.perf_counter() - t0) / repeats * 1e3))
    return rows


def _bench_bundle(base_net: NetConfig, seed: int) -> dict:
    params = init_params(base_net, np.random.default_rng(seed))
    inv = InvDynConfig(obs_dim=base_net.obs_dim, act_dim=2)
    params.update(init_inv(inv, np.random.default_rng(seed + 1)))
    return params


def bench_sampling(agent_counts=(8, 16, 32), trials: int = 100, seed: int = 0,
                   obs_dim: int = 88, history: int = 20, horizon: int = 8,
                   base_channels: int = 32, n_levels: int = 2,
                   checkpoint_bundle: ModelBundle | None = None,
                   progress=None):
    """Mean wall time to sample one joint trajectory for each agent count.

    With shared U-Net parameters, all agents ride one batched pass per
    diffusion step; the sweep reuses one parameter set across agent counts.
    Returns (rows [(n_agents, mean_ms, std_ms)], max/min ratio of means).
    """
    W = history + horizon
    sampler = SamplerParams(guidance_scale=1.2, temperature_scale=0.5,
                            sampler_kind="ddim", ddim_steps=15)
    if checkpoint_bundle is not None:
        base_cfg = checkpoint_bundle.net_cfg
        if not base_cfg.share_unet:
            raise ValueError("sampling benchmark needs shared parameters")
        params = checkpoint_bundle.params
        sched = checkpoint_bundle.sched
        stats = checkpoint_bundle.stats
        inv_cfg = checkpoint_bundle.inv_cfg
        W = base_cfg.horizon_total
        history = W - horizon
        obs_dim = base_cfg.obs_dim
    else:
        base_cfg = NetConfig(obs_dim=obs_dim, n_agents=int(agent_counts[0]),
                             horizon_total=W, base_channels=base_channels,
                             n_levels=n_levels, n_heads=4, share_unet=True)
        params = _bench_bundle(base_cfg, seed)
        sched = build_schedule(200, "cosine")
        stats = NormStats(np.full(obs_dim, -1.0), np.full(obs_dim, 1.0), 1.0)
        inv_cfg = InvDynConfig(obs_dim=obs_dim, act_dim=2)

    rng = np.random.default_rng(seed)
    rows = []
    for n in agent_counts:
        cfg_n = replace(base_cfg, n_agents=int(n))
        bundle = ModelBundle(params=params, net_cfg=cfg_n, inv_cfg=inv_cfg,
                             stats=stats, sched=sched)
        mask = np.zeros((n, W), dtype=bool)
        mask[:, : history + 1] = True
        times = []
        for trial in range(trials + 3):
            values = np.zeros((n, W, obs_dim), dtype=np.float32)
            values[:, : history + 1] = rng.uniform(
                -1, 1, (n, history + 1, obs_dim)).astype(np.float32)
            cond = Condition(return_values=np.float32(0.5), known_mask=mask,
                             known_values=values)
            chain_rng = np.random.default_rng(seed + trial)
            t0 = time.perf_counter()
            _sample_plan_batch([cond], bundle, sampler, [chain_rng],
                               np.array([0.5], dtype=np.float32))
            dt = (time.perf_counter() - t0) * 1e3
            if trial >= 3:  # discard warmup
                times.append(dt)
            if progress is not None:
                progress(n, trial)
        rows.append((int(n), float(np.mean(times)), float(np.std(times))))
    means = [r[1] for r in rows]
    ratio = max(means) / min(means)
    return rows, ratio

"""Shared test fixtures: tiny model bundles and dataset builders."""

import numpy as np

from madiff import denoiser, invdyn
from madiff.data import NormStats
from madiff.denoiser import NetConfig
from madiff.planner import ModelBundle
from madiff.schedule import build_schedule


def tiny_bundle(n_agents=2, obs_dim=3, W=8, K=12, seed=0, **net_kw):
    cfg = NetConfig(obs_dim=obs_dim, n_agents=n_agents, horizon_total=W,
                    base_channels=8, n_levels=2, n_heads=2, time_embed_dim=8,
                    return_embed_dim=16, **net_kw)
    params = denoiser.init_params(cfg, np.random.default_rng(seed))
    inv_cfg = invdyn.InvDynConfig(obs_dim=obs_dim, act_dim=2, hidden=16)
    params.update(invdyn.init_params(inv_cfg, np.random.default_rng(seed + 1)))
    stats = NormStats(np.full(obs_dim, -1.0), np.full(obs_dim, 1.0), 10.0)
    return ModelBundle(params=params, net_cfg=cfg, inv_cfg=inv_cfg,
                       stats=stats, sched=build_schedule(K, "cosine"))

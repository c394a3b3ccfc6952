"""Guided reverse-diffusion planning: centralized control or decentralized
execution with teammate modeling, action decoding through inverse dynamics,
and a batched rollout harness."""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import denoiser, invdyn
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint
from .data import Condition, NormStats, normalize_obs, normalized_return
from .schedule import (DiffusionSchedule, SamplerParams, build_schedule,
                       ddim_step, ddim_timesteps, denoise_step, guided_epsilon,
                       posterior_mean, sample_initial)


@dataclass(frozen=True)
class PlanConfig:
    mode: str = "decentralized"  # "centralized" | "decentralized"
    H: int = 24
    C: int = 0
    sampler: SamplerParams = field(default_factory=SamplerParams)
    target_return: float = 0.0   # raw (pre-normalization) conditioned return
    replan_every: int = 1

    def validate(self) -> None:
        if self.mode not in ("centralized", "decentralized"):
            raise ValueError(f"unknown plan mode {self.mode!r}")
        if self.H < 2:
            raise ValueError("H must be >= 2 (need current and next step)")
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if not 1 <= self.replan_every <= self.H - 1:
            raise ValueError("replan_every must be in 1..H-1")
        self.sampler.validate()

    @property
    def horizon_total(self) -> int:
        return self.C + self.H


class HistoryBuffer:
    """Bounded queue of the most recent C joint observations."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._q: deque = deque(maxlen=capacity) if capacity > 0 else deque(maxlen=0)

    def push(self, obs: np.ndarray) -> None:
        if self.capacity > 0:
            self._q.append(np.array(obs, copy=True))

    def __len__(self) -> int:
        return len(self._q)

    def window(self, current: np.ndarray) -> np.ndarray:
        """(C+1, N, D): stored history edge-padded at the front, then the
        current observation."""
        cur = np.asarray(current)
        items = list(self._q)
        if self.capacity > 0:
            oldest = items[0] if items else cur
            while len(items) < self.capacity:
                items.insert(0, oldest)
        return np.stack(items + [cur])


def condition_inpaint(tau_k: np.ndarray, cond: Condition) -> np.ndarray:
    """Overwrite known entries with their conditioning values, bit-exact."""
    mask = cond.known_mask
    if mask.shape != tau_k.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match "
                         f"trajectory {tau_k.shape}")
    if cond.known_values.shape != tau_k.shape:
        raise ValueError("known_values shape does not match trajectory")
    return np.where(mask[..., None], cond.known_values, tau_k)


@dataclass
class ModelBundle:
    """Everything the planner needs: parameters, configs, normalization."""

    params: dict[str, Tensor]
    net_cfg: denoiser.NetConfig
    inv_cfg: invdyn.InvDynConfig
    stats: NormStats
    sched: DiffusionSchedule
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_checkpoint(cls, path) -> "ModelBundle":
        params, conf = load_checkpoint(path)
        net_cfg = denoiser.NetConfig.from_json(conf["net"])
        inv_cfg = invdyn.InvDynConfig.from_json(conf["invdyn"])
        stats = NormStats.from_json(conf["norm_stats"])
        tr = conf.get("train", {})
        sched = build_schedule(int(tr.get("K", 200)),
                               tr.get("schedule_kind", "cosine"))
        return cls(params=params, net_cfg=net_cfg, inv_cfg=inv_cfg,
                   stats=stats, sched=sched, meta=conf)

    @classmethod
    def from_train_result(cls, result, use_ema: bool = False) -> "ModelBundle":
        conf = result.config
        params = result.params
        if use_ema:
            if result.ema_params is None:
                raise ValueError("training ran without EMA")
            params = {n: Tensor(a) for n, a in result.ema_params.items()}
        return cls(params=params,
                   net_cfg=denoiser.NetConfig.from_json(conf["net"]),
                   inv_cfg=invdyn.InvDynConfig.from_json(conf["invdyn"]),
                   stats=NormStats.from_json(conf["norm_stats"]),
                   sched=result.sched, meta=conf)

    def predict_eps(self, x: np.ndarray, ks, y, null_mask) -> np.ndarray:
        with no_grad():
            out = denoiser.forward(self.params, self.net_cfg, Tensor(x),
                                   ks, y, null_mask)
        return out.data


class _CallCounter:
    """Instrumentation hook: counts predictor passes (rows through the net)."""

    def __init__(self):
        self.calls = 0
        self.rows = 0

    def add(self, rows: int):
        self.calls += 1
        self.rows += rows


def _chain_steps(sampler: SamplerParams, K: int):
    if sampler.sampler_kind == "ddim":
        ks = ddim_timesteps(K, sampler.ddim_steps)
        return list(zip(ks[:-1], ks[1:]))
    return [(k, k - 1) for k in range(K, 0, -1)]


def _clamp_denoised(x: np.ndarray, k: int, eps_hat: np.ndarray,
                    sched: DiffusionSchedule) -> np.ndarray:
    """Clamp the implied clean sample to the normalized data range and return
    the correspondingly adjusted noise prediction. Reverse chains saturate
    without this at trajectory scale."""
    ab = sched.alpha_bar_at(k)
    sq, sq1 = np.sqrt(ab), np.sqrt(1.0 - ab)
    x0 = np.clip((x - sq1 * eps_hat) / sq, -1.0, 1.0)
    return ((x - sq * x0) / sq1).astype(x.dtype, copy=False)


def _sample_plan_batch(conds: list[Condition], bundle: ModelBundle,
                       sampler: SamplerParams, rngs, y_values: np.ndarray,
                       counter: _CallCounter | None = None,
                       groups: list[int] | None = None) -> np.ndarray:
    """Run B reverse chains in lockstep. rngs has one generator per group
    (consecutive chains in `groups` share one) so batching never changes any
    group's noise stream."""
    cfg = bundle.net_cfg
    K = bundle.sched.K
    sampler.validate(K)
    B = len(conds)
    groups = groups or [1] * B
    shape = (B, cfg.n_agents, cfg.horizon_total, cfg.obs_dim)
    omega = sampler.guidance_scale
    temp = sampler.temperature_scale

    parts, off = [], 0
    for g_i, g_n in enumerate(groups):
        parts.append(sample_initial((g_n,) + shape[1:], temp, rngs[g_i],
                                    dtype=np.float32))
        off += g_n
    x = np.concatenate(parts, axis=0)

    mask = np.stack([c.known_mask for c in conds])
    values = np.stack([c.known_values for c in conds]).astype(np.float32)
    null_flags = np.array([1.0 if c.is_null else 0.0 for c in conds],
                          dtype=np.float32)

    def inpaint(arr):
        return np.where(mask[..., None], values, arr)

    def predict(arr, k):
        ks = np.full(B, k)
        if omega == 1.0:
            eps = bundle.predict_eps(arr, ks, y_values, null_flags)
            if counter is not None:
                counter.add(B)
            return eps.copy()
        if omega == 0.0:
            eps = bundle.predict_eps(arr, ks, y_values, np.ones(B, dtype=np.float32))
            if counter is not None:
                counter.add(B)
            return eps.copy()
        both = np.concatenate([arr, arr], axis=0)
        ks2 = np.concatenate([ks, ks])
        y2 = np.concatenate([y_values, y_values], axis=0)
        nulls = np.concatenate([null_flags, np.ones(B, dtype=np.float32)])
        eps2 = bundle.predict_eps(both, ks2, y2, nulls)
        if counter is not None:
            counter.add(2 * B)
        return guided_epsilon(eps2[:B], eps2[B:], omega)

    for k, k_prev in _chain_steps(sampler, K):
        x = inpaint(x)
        eps_hat = _clamp_denoised(x, k, predict(x, k), bundle.sched)
        if sampler.sampler_kind == "ddim":
            x = ddim_step(x, k, k_prev, eps_hat, bundle.sched)
        else:
            mu = posterior_mean(x, k, eps_hat, bundle.sched)
            if k > 1 and temp > 0.0:
                sig = float(bundle.sched.sigma[k - 1])
                zs, off = [], 0
                for g_i, g_n in enumerate(groups):
                    zs.append(rngs[g_i].standard_normal(
                        (g_n,) + shape[1:]).astype(np.float32))
                    off += g_n
                mu = mu + temp * sig * np.concatenate(zs, axis=0)
            x = mu
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite values in reverse chain at k={k}")
    x = np.clip(x, -1.0, 1.0)
    return inpaint(x).astype(np.float32)


def sample_plan(cond: Condition, bundle: ModelBundle, sampler: SamplerParams,
                rng: np.random.Generator,
                counter: _CallCounter | None = None) -> np.ndarray:
    """One full reverse chain for a single condition -> (N, W, D) in [-1, 1],
    known entries equal to the conditioning values exactly."""
    y = np.asarray(cond.return_values, dtype=np.float32)
    y = y[None] if y.ndim <= 1 else y
    if y.ndim == 1 and y.shape[0] != 1:
        y = y[None]
    out = _sample_plan_batch([cond], bundle, sampler, [rng],
                             y.reshape(1, -1) if y.size > 1 else y.reshape(1),
                             counter=counter)
    return out[0]


def _build_conditions(window_norm: np.ndarray, mode: str, n_agents: int,
                      W: int, C: int, y_norm: float) -> list[Condition]:
    """Conditions for one env step from the (C+1, N, D) known prefix."""
    D = window_norm.shape[-1]
    base = np.zeros((n_agents, W, D), dtype=np.float32)
    base[:, : C + 1] = window_norm.transpose(1, 0, 2)
    if mode == "centralized":
        mask = np.zeros((n_agents, W), dtype=bool)
        mask[:, : C + 1] = True
        return [Condition(return_values=np.float32(y_norm), known_mask=mask,
                          known_values=np.where(mask[..., None], base, 0.0))]
    conds = []
    for i in range(n_agents):
        mask = np.zeros((n_agents, W), dtype=bool)
        mask[i, : C + 1] = True
        conds.append(Condition(return_values=np.float32(y_norm),
                               known_mask=mask,
                               known_values=np.where(mask[..., None], base, 0.0)))
    return conds


@dataclass
class PlanCache:
    plan: np.ndarray | None = None  # (chains, N, W, D) normalized
    age: int = 0


def act(obs: np.ndarray, history: HistoryBuffer, bundle: ModelBundle,
        plan_cfg: PlanConfig, rng: np.random.Generator,
        cache: PlanCache | None = None, counter: _CallCounter | None = None):
    """Plan (or reuse the cached plan) and decode per-agent actions.

    Returns (actions (N, act_dim), plans (chains, N, W, D) normalized).
    Updates the history buffer with obs.
    """
    plan_cfg.validate()
    cfg = bundle.net_cfg
    obs = np.asarray(obs, dtype=np.float32)
    if obs.shape != (cfg.n_agents, cfg.obs_dim):
        raise ValueError(f"obs shape {obs.shape} does not match model "
                         f"({cfg.n_agents}, {cfg.obs_dim})")
    C, W = plan_cfg.C, plan_cfg.horizon_total
    if W != cfg.horizon_total:
        raise ValueError("plan C+H does not match the model horizon")

    need_replan = (cache is None or cache.plan is None
                   or cache.age >= plan_cfg.replan_every)
    if need_replan:
        win = normalize_obs(history.window(obs), bundle.stats)
        y = normalized_return(plan_cfg.target_return, bundle.stats)
        conds = _build_conditions(win, plan_cfg.mode, cfg.n_agents, W, C, y)
        ys = np.full(len(conds), y, dtype=np.float32)
        plans = _sample_plan_batch(conds, bundle, plan_cfg.sampler,
                                   [rng], ys, counter=counter,
                                   groups=[len(conds)])
        age = 0
    else:
        plans, age = cache.plan, cache.age
    if cache is not None:
        cache.plan, cache.age = plans, age + 1

    pos = C + age
    if plan_cfg.mode == "centralized":
        o_t = plans[0, :, pos]
        o_next = plans[0, :, pos + 1]
    else:
        idx = np.arange(cfg.n_agents)
        o_t = plans[idx, idx, pos]
        o_next = plans[idx, idx, pos + 1]
    agent_ids = None if bundle.inv_cfg.share else np.arange(cfg.n_agents)
    actions = invdyn.predict_action(o_t, o_next, bundle.params, bundle.inv_cfg,
                                    agent_ids=agent_ids)
    history.push(obs)
    return actions, plans


@dataclass
class RolloutReport:
    seed: int
    episode_seeds: list[int]
    episode_returns: list[float]
    config_echo: dict
    plan_finals: np.ndarray | None = None  # (E, T, chains, N, D)
    plans: np.ndarray | None = None        # (E, T, chains, N, W, D)
    timing: dict = field(default_factory=dict)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.episode_returns)) if self.episode_returns else 0.0

    def to_json_dict(self, omit_timing: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "episode_seeds": list(map(int, self.episode_seeds)),
            "episode_returns": [float(r) for r in self.episode_returns],
            "mean_return": self.mean_return,
            "config": self.config_echo,
        }
        if self.plan_finals is not None:
            d["plan_finals"] = self.plan_finals.astype(float).tolist()
        if self.plans is not None:
            d["plans"] = self.plans.astype(float).tolist()
        if not omit_timing:
            d["timing"] = self.timing
        return d

    def save(self, path, omit_timing: bool = False) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(omit_timing), f, sort_keys=True,
                      separators=(",", ":"))


def rollout(env, bundle: ModelBundle, plan_cfg: PlanConfig, episodes: int,
            seed: int, log_plans: bool = False, log_full_plans: bool = False,
            max_steps: int = 10_000, counter: _CallCounter | None = None,
            progress=None) -> RolloutReport:
    """Run seeded evaluation episodes (batched in lockstep) and report
    per-episode returns plus optional logged plans."""
    plan_cfg.validate()
    if episodes < 0:
        raise ValueError("episodes must be >= 0")
    t_start = time.perf_counter()
    cfg = bundle.net_cfg
    echo = {
        "mode": plan_cfg.mode, "H": plan_cfg.H, "C": plan_cfg.C,
        "replan_every": plan_cfg.replan_every,
        "target_return": plan_cfg.target_return,
        "sampler": {
            "guidance_scale": plan_cfg.sampler.guidance_scale,
            "temperature_scale": plan_cfg.sampler.temperature_scale,
            "sampler_kind": plan_cfg.sampler.sampler_kind,
            "ddim_steps": plan_cfg.sampler.ddim_steps,
        },
        "episodes": episodes,
    }
    if episodes == 0:
        return RolloutReport(seed=seed, episode_seeds=[], episode_returns=[],
                             config_echo=echo,
                             timing={"wall_s": time.perf_counter() - t_start})

    ep_seeds = [int(s) for s in
                np.random.SeedSequence(seed).generate_state(episodes)]
    rngs = [np.random.default_rng(np.random.SeedSequence([seed, i]))
            for i in range(episodes)]
    envs = [env.spawn() for _ in range(episodes)]
    obs = [e.reset(s) for e, s in zip(envs, ep_seeds)]
    histories = [HistoryBuffer(plan_cfg.C) for _ in range(episodes)]
    caches = [PlanCache() for _ in range(episodes)]
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    n_chains = 1 if plan_cfg.mode == "centralized" else cfg.n_agents
    C, W = plan_cfg.C, plan_cfg.horizon_total
    y_cache = normalized_return(plan_cfg.target_return, bundle.stats)

    finals: list[np.ndarray] = []
    full: list[np.ndarray] = []
    step = 0
    while np.any(active) and step < max_steps:
        live = np.flatnonzero(active)
        need = [i for i in live
                if caches[i].plan is None or caches[i].age >= plan_cfg.replan_every]
        if need:
            conds, ys, groups, group_rngs = [], [], [], []
            for i in need:
                win = normalize_obs(histories[i].window(obs[i]), bundle.stats)
                cs = _build_conditions(win, plan_cfg.mode, cfg.n_agents, W, C,
                                       y_cache)
                conds.extend(cs)
                ys.extend([y_cache] * len(cs))
                groups.append(len(cs))
                group_rngs.append(rngs[i])
            plans = _sample_plan_batch(conds, bundle, plan_cfg.sampler,
                                       group_rngs, np.array(ys, dtype=np.float32),
                                       counter=counter, groups=groups)
            off = 0
            for i, g in zip(need, groups):
                caches[i].plan = plans[off : off + g]
                caches[i].age = 0
                off += g

        step_finals = np.zeros((episodes, n_chains, cfg.n_agents, cfg.obs_dim),
                               dtype=np.float32)
        step_full = (np.zeros((episodes, n_chains, cfg.n_agents, W, cfg.obs_dim),
                              dtype=np.float32) if log_full_plans else None)
        for i in live:
            plan_i = caches[i].plan
            pos = C + caches[i].age
            if plan_cfg.mode == "centralized":
                o_t, o_next = plan_i[0, :, pos], plan_i[0, :, pos + 1]
            else:
                idx = np.arange(cfg.n_agents)
                o_t, o_next = plan_i[idx, idx, pos], plan_i[idx, idx, pos + 1]
            agent_ids = None if bundle.inv_cfg.share else np.arange(cfg.n_agents)
            actions = invdyn.predict_action(o_t, o_next, bundle.params,
                                            bundle.inv_cfg, agent_ids=agent_ids)
            histories[i].push(obs[i])
            caches[i].age += 1
            o2, r, done = envs[i].step(actions)
            obs[i] = o2
            returns[i] += r
            if done:
                active[i] = False
                caches[i].plan = None
            if log_plans:
                step_finals[i] = plan_i[:, :, -1, :]
            if log_full_plans:
                step_full[i] = plan_i
        if log_plans:
            finals.append(step_finals)
        if log_full_plans:
            full.append(step_full)
        step += 1
        if progress is not None:
            progress(step, int(active.sum()))

    timing = {"wall_s": time.perf_counter() - t_start, "env_steps": step}
    return RolloutReport(
        seed=seed, episode_seeds=ep_seeds,
        episode_returns=[float(r) for r in returns],
        config_echo=echo,
        plan_finals=np.stack(finals, axis=1) if finals else None,
        plans=np.stack(full, axis=1) if full else None,
        timing=timing)

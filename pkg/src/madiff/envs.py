"""Desk-scale cooperative navigation environment and scripted data policies.

N point agents with double-integrator dynamics try to cover N landmarks in
the [-1, 1]^2 box under a shared reward. Stands in for particle-world
benchmarks so the full train/plan loop can run on a laptop.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Episode, NormStats, save_dataset


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 3
    t_max: int = 25
    dt: float = 0.1
    collision_penalty: float = 1.0
    collision_radius: float = 0.3
    sensing_radius: float = float("inf")
    max_speed: float = 1.0

    @property
    def obs_dim(self) -> int:
        # own pos+vel, landmark offsets, other agents' relative positions
        return 4 + 2 * self.n_agents + 2 * (self.n_agents - 1)

    @property
    def act_dim(self) -> int:
        return 2


class SpreadToyEnv:
    """Cooperative landmark-covering task with a shared team reward."""

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.pos = None
        self.vel = None
        self.landmarks = None
        self.t = 0
        self._done = True

    def spawn(self) -> "SpreadToyEnv":
        """Fresh instance with the same configuration (for parallel rollouts)."""
        return SpreadToyEnv(self.config)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n = self.config.n_agents
        self.pos = rng.uniform(-1.0, 1.0, size=(n, 2))
        self.landmarks = rng.uniform(-1.0, 1.0, size=(n, 2))
        self.vel = np.zeros((n, 2))
        self.t = 0
        self._done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        cfg = self.config
        n = cfg.n_agents
        obs = np.zeros((n, cfg.obs_dim), dtype=np.float32)
        for i in range(n):
            obs[i, 0:2] = self.pos[i]
            obs[i, 2:4] = self.vel[i]
            off = self.landmarks - self.pos[i]
            if np.isfinite(cfg.sensing_radius):
                off = np.where(np.linalg.norm(off, axis=1, keepdims=True)
                               <= cfg.sensing_radius, off, 0.0)
            obs[i, 4 : 4 + 2 * n] = off.ravel()
            others = np.delete(self.pos, i, axis=0) - self.pos[i]
            if np.isfinite(cfg.sensing_radius):
                others = np.where(np.linalg.norm(others, axis=1, keepdims=True)
                                  <= cfg.sensing_radius, others, 0.0)
            obs[i, 4 + 2 * n :] = others.ravel()
        return obs

    def _reward(self) -> float:
        cfg = self.config
        d = np.linalg.norm(self.pos[None, :, :] - self.landmarks[:, None, :], axis=2)
        cover = -float(d.min(axis=1).sum())
        pair_d = np.linalg.norm(self.pos[:, None, :] - self.pos[None, :, :], axis=2)
        iu = np.triu_indices(cfg.n_agents, k=1)
        collisions = int(np.count_nonzero(pair_d[iu] < cfg.collision_radius))
        return cover - cfg.collision_penalty * collisions

    def step(self, actions: np.ndarray):
        if self._done:
            raise RuntimeError("step() called on a finished episode; reset first")
        cfg = self.config
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        if a.shape != (cfg.n_agents, 2):
            raise ValueError(f"actions must have shape ({cfg.n_agents}, 2)")
        self.pos = self.pos + self.vel * cfg.dt
        self.vel = self.vel + a * cfg.dt
        speed = np.linalg.norm(self.vel, axis=1, keepdims=True)
        over = speed > cfg.max_speed
        if np.any(over):
            scale = cfg.max_speed / np.where(over, speed, 1.0)
            self.vel = np.where(over, self.vel * scale, self.vel)
        self.t += 1
        self._done = self.t >= cfg.t_max
        return self._observe(), self._reward(), self._done


# ---------------------------------------------------------------------------
# scripted policies
# ---------------------------------------------------------------------------

def best_assignment(dists: np.ndarray, exhaustive_limit: int = 8,
                    allow_greedy: bool = False) -> np.ndarray:
    """Agent -> landmark assignment minimizing summed distance.

    Exhaustive over permutations for n <= exhaustive_limit; beyond that a
    greedy sweep is used only when explicitly allowed.
    """
    n = dists.shape[0]
    if n <= exhaustive_limit:
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(n)):
            cost = dists[np.arange(n), perm].sum()
            if cost < best_cost:
                best, best_cost = perm, cost
        return np.array(best)
    if not allow_greedy:
        raise ValueError(
            f"exhaustive assignment limited to {exhaustive_limit} agents; "
            "pass allow_greedy=True for more")
    taken = np.zeros(n, dtype=bool)
    out = np.zeros(n, dtype=int)
    for i in range(n):
        order = np.argsort(dists[i])
        for l in order:
            if not taken[l]:
                out[i] = l
                taken[l] = True
                break
    return out


def _pd_controller(obs: np.ndarray, n: int, kp: float = 10.0, kd: float = 5.0,
                   allow_greedy: bool = False) -> np.ndarray:
    vel = obs[:, 2:4]
    offsets = obs[:, 4 : 4 + 2 * n].reshape(n, n, 2)  # landmark - agent
    dists = np.linalg.norm(offsets, axis=2)
    assign = best_assignment(dists, allow_greedy=allow_greedy)
    target = offsets[np.arange(n), assign]
    return np.clip(kp * target - kd * vel, -1.0, 1.0)


def scripted_policy(quality: str, noise_sigma: float = 1.0,
                    allow_greedy: bool = False):
    """Returns policy(joint_obs, rng) -> joint actions for the given tier."""
    if quality == "expert":
        def policy(obs, rng):
            return _pd_controller(obs, obs.shape[0], allow_greedy=allow_greedy)
    elif quality == "medium":
        def policy(obs, rng):
            a = _pd_controller(obs, obs.shape[0], allow_greedy=allow_greedy)
            return np.clip(a + rng.normal(0.0, noise_sigma, a.shape), -1.0, 1.0)
    elif quality == "random":
        def policy(obs, rng):
            return rng.uniform(-1.0, 1.0, (obs.shape[0], 2))
    else:
        raise ValueError(f"unknown policy quality {quality!r}")
    return policy


def run_episode(env: SpreadToyEnv, policy, seed: int) -> Episode:
    obs = env.reset(seed)
    rng = np.random.default_rng(seed + 1)
    obs_list, act_list, rew_list = [obs], [], []
    done = False
    while not done:
        # round to the stored precision before stepping so that replaying
        # the logged actions reproduces the logged observations bit-exactly
        a = np.asarray(policy(obs, rng), dtype=np.float32)
        obs, r, done = env.step(a)
        obs_list.append(obs)
        act_list.append(a)
        rew_list.append(r)
    return Episode(obs=np.stack(obs_list), actions=np.stack(act_list),
                   rewards=np.array(rew_list, dtype=np.float32),
                   terminated=True)


def generate_dataset(env_config: EnvConfig, policy_mix: dict[str, float],
                     episodes: int, seed: int, path=None, gamma: float = 0.99):
    """Roll scripted policies and write a dataset file.

    policy_mix maps tier name to a weight; weights are normalized and turned
    into per-tier episode counts. Returns the in-memory dataset.
    """
    from .data import Dataset  # local to avoid cycle at import time

    if episodes < 0:
        raise ValueError("episodes must be >= 0")
    weights = {k: float(v) for k, v in policy_mix.items()}
    total_w = sum(weights.values())
    if episodes > 0 and total_w <= 0:
        raise ValueError("policy mix weights must be positive")
    counts: dict[str, int] = {}
    acc = 0
    for i, (name, w) in enumerate(weights.items()):
        if i == len(weights) - 1:
            counts[name] = episodes - acc
        else:
            counts[name] = int(round(episodes * w / total_w))
            acc += counts[name]

    env = SpreadToyEnv(env_config)
    eps: list[Episode] = []
    labels: list[str] = []
    ep_seed = seed
    for name in sorted(counts):
        policy = scripted_policy(name)
        for _ in range(counts[name]):
            eps.append(run_episode(env, policy, ep_seed))
            labels.append(name)
            ep_seed += 1
    if eps:
        stats = NormStats.from_episodes(eps, gamma=gamma)
    else:
        d = env_config.obs_dim
        stats = NormStats(np.full(d, -1.0), np.full(d, 1.0), 1.0)
    meta = {
        "env": {
            "n_agents": env_config.n_agents,
            "t_max": env_config.t_max,
            "dt": env_config.dt,
            "collision_penalty": env_config.collision_penalty,
            "collision_radius": env_config.collision_radius,
            "sensing_radius": (None if np.isinf(env_config.sensing_radius)
                               else env_config.sensing_radius),
            "max_speed": env_config.max_speed,
        },
        "policy_mix": counts,
        "gamma": gamma,
        "seed": seed,
    }
    if path is not None:
        save_dataset(path, eps, stats, meta)
    ds = Dataset(episodes=eps, stats=stats, meta=meta)
    ds.meta.setdefault("episode_count", len(eps))
    return ds


def env_config_from_meta(meta: dict) -> EnvConfig:
    e = meta.get("env", {})
    sensing = e.get("sensing_radius")
    return EnvConfig(
        n_agents=int(e.get("n_agents", 3)),
        t_max=int(e.get("t_max", 25)),
        dt=float(e.get("dt", 0.1)),
        collision_penalty=float(e.get("collision_penalty", 1.0)),
        collision_radius=float(e.get("collision_radius", 0.3)),
        sensing_radius=float("inf") if sensing is None else float(sensing),
        max_speed=float(e.get("max_speed", 1.0)),
    )

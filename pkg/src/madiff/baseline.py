"""Behavior-cloning baseline: the inverse-dynamics MLP architecture trained
with next-observation targets. A regressor f(o_t) -> o_{t+1} clones the
dataset's transition behavior; actions are decoded through an inverse
dynamics model exactly as the planner does, so the comparison isolates the
trajectory-generation component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import invdyn
from .autodiff import Tensor, no_grad, zero_grads
from .data import Dataset, denormalize_obs, normalize_obs
from .training import Adam, sample_transitions


@dataclass
class BCPolicy:
    params: dict[str, Tensor]
    inv_cfg: invdyn.InvDynConfig
    stats: object

    def next_obs(self, obs_norm: np.ndarray) -> np.ndarray:
        with no_grad():
            x = Tensor(np.asarray(obs_norm, dtype=np.float32))
            h = (x @ self.params["bc.l1.w"] + self.params["bc.l1.b"]).silu()
            h = (h @ self.params["bc.l2.w"] + self.params["bc.l2.b"]).silu()
            out = h @ self.params["bc.l3.w"] + self.params["bc.l3.b"]
        return out.data

    def act(self, obs: np.ndarray) -> np.ndarray:
        """(N, obs_dim) raw observations -> (N, act_dim) actions."""
        o_norm = normalize_obs(np.asarray(obs, dtype=np.float32), self.stats)
        nxt = self.next_obs(o_norm)
        return invdyn.predict_action(o_norm, nxt, self.params, self.inv_cfg,
                                     prefix="bcinv.")


def _regressor_forward(params, obs: Tensor) -> Tensor:
    h = (obs @ params["bc.l1.w"] + params["bc.l1.b"]).silu()
    h = (h @ params["bc.l2.w"] + params["bc.l2.b"]).silu()
    return h @ params["bc.l3.w"] + params["bc.l3.b"]


def train_bc(dataset: Dataset, steps: int = 3000, lr: float = 2e-4,
             batch_size: int = 128, seed: int = 0, hidden: int = 256) -> BCPolicy:
    """Fit the next-obs regressor and its action decoder on the dataset."""
    if not dataset.episodes:
        raise ValueError("cannot train on an empty dataset")
    d = dataset.obs_dim
    inv_cfg = invdyn.InvDynConfig(obs_dim=d, act_dim=dataset.act_dim,
                                  act_kind=str(dataset.meta.get("act_kind",
                                                                "continuous")),
                                  hidden=hidden)
    ss = np.random.SeedSequence(seed)
    init_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    params: dict[str, Tensor] = {}
    for name, (fi, fo) in {"l1": (d, hidden), "l2": (hidden, hidden),
                           "l3": (hidden, d)}.items():
        w = (init_rng.standard_normal((fi, fo)) / np.sqrt(fi)).astype(np.float32)
        params[f"bc.{name}.w"] = Tensor(w, requires_grad=True)
        params[f"bc.{name}.b"] = Tensor(np.zeros(fo, dtype=np.float32),
                                        requires_grad=True)
    params.update(invdyn.init_params(inv_cfg, init_rng, prefix="bcinv."))
    opt = Adam(params, lr=lr)

    for _ in range(steps):
        obs, acts, obs_next, _ = sample_transitions(dataset, batch_rng,
                                                    batch_size)
        pred = _regressor_forward(params, Tensor(obs))
        diff = pred - Tensor(obs_next)
        reg_loss = (diff * diff).sum(axis=1).mean()
        id_l = invdyn.id_loss((obs, acts, obs_next), params, inv_cfg,
                              prefix="bcinv.")
        zero_grads(params)
        (reg_loss + id_l).backward()
        opt.step()
    return BCPolicy(params=params, inv_cfg=inv_cfg, stats=dataset.stats)


def rollout_bc(env, policy: BCPolicy, episodes: int, seed: int) -> list[float]:
    """Seeded evaluation returns for the BC baseline."""
    ep_seeds = [int(s) for s in
                np.random.SeedSequence(seed).generate_state(episodes)]
    returns = []
    for s in ep_seeds:
        e = env.spawn()
        obs = e.reset(s)
        done, total = False, 0.0
        while not done:
            obs, r, done = e.step(policy.act(obs))
            total += r
        returns.append(total)
    return returns

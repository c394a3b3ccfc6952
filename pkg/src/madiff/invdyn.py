"""Inverse dynamics: per-agent (or shared) MLPs decoding the action that
produced an observation transition."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, concat, no_grad


@dataclass(frozen=True)
class InvDynConfig:
    obs_dim: int
    act_dim: int
    act_kind: str = "continuous"  # "continuous" | "discrete"
    n_actions: int = 0            # discrete only
    hidden: int = 256
    share: bool = True            # mirrors share_unet
    n_agents: int = 1

    def validate(self) -> None:
        if self.act_kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown act_kind {self.act_kind!r}")
        if self.act_kind == "discrete" and self.n_actions < 2:
            raise ValueError("discrete actions need n_actions >= 2")

    @property
    def out_dim(self) -> int:
        return self.n_actions if self.act_kind == "discrete" else self.act_dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "InvDynConfig":
        return cls(**d)


def _mlp_init(store, rng, prefix, d_in, hidden, d_out):
    for name, (fi, fo) in {"l1": (d_in, hidden), "l2": (hidden, hidden),
                           "l3": (hidden, d_out)}.items():
        w = (rng.standard_normal((fi, fo)) / np.sqrt(fi)).astype(np.float32)
        store[f"{prefix}{name}.w"] = Tensor(w, requires_grad=True)
        store[f"{prefix}{name}.b"] = Tensor(np.zeros(fo, dtype=np.float32),
                                            requires_grad=True)


def init_params(cfg: InvDynConfig, rng: np.random.Generator,
                prefix: str = "invdyn.") -> dict[str, Tensor]:
    cfg.validate()
    store: dict[str, Tensor] = {}
    if cfg.share:
        _mlp_init(store, rng, prefix, 2 * cfg.obs_dim, cfg.hidden, cfg.out_dim)
    else:
        for a in range(cfg.n_agents):
            _mlp_init(store, rng, f"{prefix}a{a}.", 2 * cfg.obs_dim,
                      cfg.hidden, cfg.out_dim)
    return store


def _mlp(p, prefix, x: Tensor) -> Tensor:
    h = (x @ p[f"{prefix}l1.w"] + p[f"{prefix}l1.b"]).silu()
    h = (h @ p[f"{prefix}l2.w"] + p[f"{prefix}l2.b"]).silu()
    return h @ p[f"{prefix}l3.w"] + p[f"{prefix}l3.b"]


def _grouped(params, cfg, x: Tensor, agent_ids, prefix):
    """Yield (row indices, predictions) per parameter group, graph intact."""
    if cfg.share:
        yield np.arange(x.shape[0]), _mlp(params, prefix, x)
        return
    if agent_ids is None:
        raise ValueError("per-agent inverse dynamics needs agent_ids")
    agent_ids = np.asarray(agent_ids)
    for a in range(cfg.n_agents):
        pick = np.flatnonzero(agent_ids == a)
        if len(pick):
            yield pick, _mlp(params, f"{prefix}a{a}.", Tensor(x.data[pick]))


def predict_action(o_t: np.ndarray, o_next: np.ndarray, params,
                   cfg: InvDynConfig, agent_ids=None,
                   prefix: str = "invdyn."):
    """Decode the action for one transition or a batch of them.

    Continuous actions come back as real vectors, discrete ones as the
    argmax over the action logits.
    """
    o_t = np.asarray(o_t, dtype=np.float32)
    o_next = np.asarray(o_next, dtype=np.float32)
    if o_t.shape != o_next.shape:
        raise ValueError("observation pair shapes differ")
    if o_t.shape[-1] != cfg.obs_dim:
        raise ValueError(f"expected obs dim {cfg.obs_dim}, got {o_t.shape[-1]}")
    single = o_t.ndim == 1
    if single:
        o_t, o_next = o_t[None], o_next[None]
    raw = np.zeros((o_t.shape[0], cfg.out_dim), dtype=np.float32)
    with no_grad():
        x = concat([Tensor(o_t), Tensor(o_next)], axis=1)
        for pick, pred in _grouped(params, cfg, x, agent_ids, prefix):
            raw[pick] = pred.data
    if cfg.act_kind == "discrete":
        act = np.argmax(raw, axis=1)
        return int(act[0]) if single else act
    return raw[0] if single else raw


def id_loss(batch, params, cfg: InvDynConfig, prefix: str = "invdyn.") -> Tensor:
    """Mean squared error (continuous) or cross-entropy (discrete) over a
    batch of (obs, action, obs_next[, agent_ids]) transitions."""
    if len(batch) == 4:
        obs, act, obs_next, agent_ids = batch
    else:
        obs, act, obs_next = batch
        agent_ids = None
    obs = np.asarray(obs, dtype=np.float32)
    obs_next = np.asarray(obs_next, dtype=np.float32)
    n = obs.shape[0]
    if n == 0:
        raise ValueError("id_loss needs a nonempty batch")
    x = concat([Tensor(obs), Tensor(obs_next)], axis=1)

    total: Tensor | None = None
    for pick, pred in _grouped(params, cfg, x, agent_ids, prefix):
        if cfg.act_kind == "discrete":
            labels = np.asarray(act).astype(np.int64).ravel()[pick]
            onehot = np.zeros(pred.shape, dtype=np.float32)
            onehot[np.arange(len(pick)), labels] = 1.0
            term = -(_log_softmax(pred) * Tensor(onehot)).sum()
        else:
            target = Tensor(np.asarray(act, dtype=np.float32)[pick])
            diff = pred - target
            term = (diff * diff).sum()
        total = term if total is None else total + term
    return total.scale(1.0 / n)


def _log_softmax(x: Tensor) -> Tensor:
    s = x.softmax(axis=-1)

    def bwd(g):
        s._accum(g / (s.data + 1e-12))

    return Tensor._make(np.log(s.data + 1e-12), (s,), bwd)

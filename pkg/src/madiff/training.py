"""Joint training loop: reverse-diffusion loss with conditioning dropout plus
the inverse-dynamics loss, optimized with Adam, deterministically seeded and
checkpointed."""

from __future__ import annotations

import concurrent.futures
import math
import os
import time
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import denoiser, invdyn
from .autodiff import Tensor, zero_grads
from .checkpoint import save_checkpoint
from .data import Condition, Dataset, sample_window
from .schedule import DiffusionSchedule, build_schedule


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    cond_dropout_prob: float = 0.25
    total_steps: int = 5000
    checkpoint_interval: int = 0     # 0: final checkpoint only
    ema_decay: float | None = None   # e.g. 0.995; None disables EMA
    seed: int = 0
    gamma: float = 0.99
    C: int = 0
    H: int = 24
    K: int = 200
    schedule_kind: str = "cosine"
    mask_mode: str = "decentralized"  # window conditioning during training
    eval_guidance_scale: float = 1.2  # forwarded to evaluation defaults
    eval_temperature_scale: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError("cond_dropout_prob must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.mask_mode not in ("centralized", "decentralized", "mixed"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.C < 0 or self.H < 1 or self.K < 1:
            raise ValueError("need C >= 0, H >= 1, K >= 1")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")

    @property
    def horizon_total(self) -> int:
        return self.C + self.H

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class BatchedCondition:
    """Stacked Condition fields for a batch."""

    return_values: np.ndarray  # (B,) or (B, N)
    known_mask: np.ndarray     # (B, N, W) bool
    known_values: np.ndarray   # (B, N, W, D)
    null_mask: np.ndarray      # (B,) float, 1 where condition is the null token


def stack_conditions(conds: list[Condition]) -> BatchedCondition:
    y = np.stack([np.asarray(c.return_values, dtype=np.float32) for c in conds])
    return BatchedCondition(
        return_values=y,
        known_mask=np.stack([c.known_mask for c in conds]),
        known_values=np.stack([c.known_values for c in conds]).astype(np.float32),
        null_mask=np.array([1.0 if c.is_null else 0.0 for c in conds],
                           dtype=np.float32),
    )


def forward_noise_batch(x0: np.ndarray, ks: np.ndarray, eps: np.ndarray,
                        sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.alpha_bar[np.asarray(ks) - 1].astype(x0.dtype)
    ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(windows: np.ndarray, conds, params, net_cfg, sched,
                   rng: np.random.Generator, beta: float,
                   predictor=None):
    """Eq.-style denoising objective on one batch.

    Per sample: draw k and epsilon, noise the window with the closed form,
    overwrite the known (inpainted) entries, null the return condition with
    probability beta, then take the mean squared error between epsilon and
    the prediction over the non-inpainted positions only.

    Draw order from rng is fixed: steps, noise, dropout.
    Returns (loss Tensor, info dict).
    """
    if isinstance(conds, list):
        conds = stack_conditions(conds)
    B = windows.shape[0]
    if B == 0:
        raise ValueError("diffusion_loss needs a nonempty batch")
    x0 = np.asarray(windows, dtype=np.float32)
    ks = rng.integers(1, sched.K + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    dropout = (rng.random(B) < beta).astype(np.float32)

    x_k = forward_noise_batch(x0, ks, eps, sched)
    m = conds.known_mask[:, :, :, None]
    x_k = np.where(m, conds.known_values, x_k)
    null_mask = np.maximum(conds.null_mask, dropout)

    if predictor is None:
        pred = denoiser.forward(params, net_cfg, Tensor(x_k), ks,
                                conds.return_values, null_mask)
    else:
        pred = predictor(x_k, ks, conds.return_values, null_mask)
        if not isinstance(pred, Tensor):
            pred = Tensor(pred)

    loss_mask = (~conds.known_mask[:, :, :, None]).astype(np.float32)
    count = float(loss_mask.sum()) * x0.shape[-1]
    diff = (pred - Tensor(eps)) * Tensor(loss_mask)
    loss = (diff * diff).sum().scale(1.0 / max(count, 1.0))
    return loss, {"ks": ks, "null_mask": null_mask, "eps": eps}


class Adam:
    """Adaptive-moment first-order optimizer over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in sorted(params.items())}
        self.v = {n: np.zeros_like(p.data) for n, p in sorted(params.items())}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for n in sorted(self.params):
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * (g * g)
            update = (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)


def ema_update(params: dict[str, Tensor], shadow: dict[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    """shadow' = decay * shadow + (1 - decay) * params, elementwise."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    out = {}
    for n in sorted(params):
        p = params[n].data
        s = shadow[n]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {n}: {s.shape} vs {p.shape}")
        out[n] = decay * s + (1.0 - decay) * p
    return out


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("MADIFF_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def sample_batch(dataset: Dataset, rng: np.random.Generator, cfg: TrainConfig):
    """Draw a window batch. Worker threads (MADIFF_NUM_WORKERS) only split a
    precomputed descriptor list, so results do not depend on worker count."""
    n_eps = len(dataset.episodes)
    B = cfg.batch_size
    ep_idx = rng.integers(0, n_eps, size=B)
    ts = np.array([rng.integers(0, dataset.episodes[i].length) for i in ep_idx])
    n_agents = dataset.n_agents
    if cfg.mask_mode == "centralized":
        modes = ["centralized"] * B
        egos = [None] * B
    elif cfg.mask_mode == "decentralized":
        modes = ["decentralized"] * B
        egos = rng.integers(0, n_agents, size=B).tolist()
    else:
        pick = rng.random(B) < 0.5
        modes = ["centralized" if c else "decentralized" for c in pick]
        egos = [None if m == "centralized" else int(rng.integers(0, n_agents))
                for m in modes]

    def build(i: int):
        return sample_window(dataset.episodes[ep_idx[i]], int(ts[i]), cfg.C,
                             cfg.H, dataset.stats, cfg.gamma, mode=modes[i],
                             ego=egos[i])

    workers = _num_workers()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as ex:
            samples = list(ex.map(build, range(B)))
    else:
        samples = [build(i) for i in range(B)]
    windows = np.stack([s.window for s in samples])
    conds = stack_conditions([s.cond for s in samples])
    return windows, conds


def sample_transitions(dataset: Dataset, rng: np.random.Generator, n: int,
                       normalized: bool = True):
    """Uniform (obs, action, obs_next, agent) transitions for the ID loss."""
    from .data import normalize_obs

    n_eps = len(dataset.episodes)
    ep_idx = rng.integers(0, n_eps, size=n)
    obs = np.empty((n, dataset.obs_dim), dtype=np.float32)
    obs_next = np.empty_like(obs)
    acts = np.empty((n, dataset.act_dim), dtype=np.float32)
    agent_ids = np.empty(n, dtype=np.int64)
    for j, i in enumerate(ep_idx):
        ep = dataset.episodes[i]
        t = int(rng.integers(0, ep.length))
        a = int(rng.integers(0, ep.n_agents))
        obs[j] = ep.obs[t, a]
        obs_next[j] = ep.obs[t + 1, a]
        acts[j] = ep.actions[t, a]
        agent_ids[j] = a
    if normalized:
        obs = normalize_obs(obs, dataset.stats)
        obs_next = normalize_obs(obs_next, dataset.stats)
    return obs, acts, obs_next, agent_ids


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    ema_params: dict[str, np.ndarray] | None
    log_rows: list[tuple]
    checkpoint_paths: list[str]
    final_path: str | None
    config: dict
    sched: DiffusionSchedule = field(repr=False, default=None)


def checkpoint_config(dataset: Dataset, cfg: TrainConfig, net_cfg,
                      inv_cfg) -> dict:
    return {
        "net": net_cfg.to_json(),
        "invdyn": inv_cfg.to_json(),
        "train": cfg.to_json(),
        "norm_stats": dataset.stats.to_json(),
        "dataset_meta": dataset.meta,
        "format_version": 1,
    }


def train(dataset: Dataset, cfg: TrainConfig, net_cfg: "denoiser.NetConfig",
          out_dir=None, inv_cfg: invdyn.InvDynConfig | None = None,
          log_every: int = 50, progress=None) -> TrainResult:
    """Run the joint objective end to end. Deterministic given (seed, config,
    dataset): every checkpoint byte is reproducible."""
    cfg.validate()
    net_cfg.validate()
    if not dataset.episodes:
        raise ValueError("cannot train on an empty dataset")
    if net_cfg.n_agents != dataset.n_agents or net_cfg.obs_dim != dataset.obs_dim:
        raise ValueError("net config does not match dataset dimensions")
    if net_cfg.horizon_total != cfg.horizon_total:
        raise ValueError("net horizon_total must equal C + H")
    if inv_cfg is None:
        inv_cfg = invdyn.InvDynConfig(
            obs_dim=dataset.obs_dim, act_dim=dataset.act_dim,
            act_kind=str(dataset.meta.get("act_kind", "continuous")),
            share=net_cfg.share_unet, n_agents=dataset.n_agents)
    inv_cfg.validate()

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, batch_rng, loss_rng, id_rng = (np.random.default_rng(s)
                                             for s in ss.spawn(4))
    params = denoiser.init_params(net_cfg, init_rng)
    params.update(invdyn.init_params(inv_cfg, init_rng))
    sched = build_schedule(cfg.K, cfg.schedule_kind)
    opt = Adam(params, lr=cfg.learning_rate)
    shadow = ({n: p.data.copy() for n, p in sorted(params.items())}
              if cfg.ema_decay is not None else None)

    conf = checkpoint_config(dataset, cfg, net_cfg, inv_cfg)
    paths: list[str] = []
    rows: list[tuple] = []
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "loss_log.csv"), "w")
        log_f.write("step,diffusion_loss,id_loss,wall_ms\n")

    try:
        for step in range(1, cfg.total_steps + 1):
            t0 = time.perf_counter()
            windows, conds = sample_batch(dataset, batch_rng, cfg)
            dloss, _ = diffusion_loss(windows, conds, params, net_cfg, sched,
                                      loss_rng, cfg.cond_dropout_prob)
            trans = sample_transitions(dataset, id_rng, cfg.batch_size)
            iloss = invdyn.id_loss(trans if not inv_cfg.share else trans[:3],
                                   params, inv_cfg)
            total = dloss + iloss
            dval, ival = float(dloss.data), float(iloss.data)
            if not (math.isfinite(dval) and math.isfinite(ival)):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: diffusion={dval} id={ival}")
            zero_grads(params)
            total.backward()
            opt.step()
            if shadow is not None:
                shadow = ema_update(params, shadow, cfg.ema_decay)

            wall_ms = (time.perf_counter() - t0) * 1e3
            rows.append((step, dval, ival, wall_ms))
            if log_f is not None:
                log_f.write(f"{step},{dval:.8f},{ival:.8f},{wall_ms:.3f}\n")
            if progress is not None and (step % log_every == 0 or step == 1):
                progress(step, dval, ival)
            if (out_dir is not None and cfg.checkpoint_interval > 0
                    and step % cfg.checkpoint_interval == 0):
                pth = os.path.join(out_dir, f"checkpoint_{step:07d}.madc")
                save_checkpoint(pth, params, conf)
                paths.append(pth)
    finally:
        if log_f is not None:
            log_f.close()

    final_path = None
    if out_dir is not None:
        final_path = os.path.join(out_dir, "checkpoint_final.madc")
        save_checkpoint(final_path, params, conf)
        paths.append(final_path)
        if shadow is not None:
            ema_path = os.path.join(out_dir, "checkpoint_final_ema.madc")
            save_checkpoint(ema_path, {n: Tensor(a) for n, a in shadow.items()},
                            conf)
            paths.append(ema_path)
    return TrainResult(params=params, ema_params=shadow, log_rows=rows,
                       checkpoint_paths=paths, final_path=final_path,
                       config=conf, sched=sched)

"""Trajectory prediction (history-conditioned joint sampling) and the
evaluation metrics: displacement errors, best-of-k variants, score
normalization against expert/random references, and the cross-agent plan
consistency ratio."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Condition, denormalize_obs, normalize_obs, normalized_return
from .planner import ModelBundle, _sample_plan_batch
from .schedule import SamplerParams


@dataclass(frozen=True)
class PredictionRequest:
    history: np.ndarray        # (N, C, obs_dim) raw observations
    horizon: int               # H future steps to produce
    samples_per_request: int = 1

    def validate(self) -> None:
        if self.history.ndim != 3 or self.history.shape[1] < 1:
            raise ValueError("history must be (N, C, obs_dim) with C >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.samples_per_request < 1:
            raise ValueError("samples_per_request must be >= 1")


def predict(req: PredictionRequest, bundle: ModelBundle,
            sampler: SamplerParams, rng: np.random.Generator,
            target_return: float | None = None) -> np.ndarray:
    """Sample joint futures conditioned on all agents' history.

    The first C window positions are pinned to the (normalized) history for
    every chain; the returned array (samples, N, H, obs_dim) holds only the
    H future positions, denormalized. target_return None conditions on the
    null token.
    """
    req.validate()
    cfg = bundle.net_cfg
    n, C, d = req.history.shape
    if (n, d) != (cfg.n_agents, cfg.obs_dim):
        raise ValueError("history dims do not match the model")
    W = cfg.horizon_total
    if C + req.horizon != W:
        raise ValueError(f"C + H = {C + req.horizon} must equal the model "
                         f"window {W}")
    hist_norm = normalize_obs(np.asarray(req.history, dtype=np.float32),
                              bundle.stats)
    mask = np.zeros((n, W), dtype=bool)
    mask[:, :C] = True
    values = np.zeros((n, W, d), dtype=np.float32)
    values[:, :C] = hist_norm
    if target_return is None:
        y, is_null = 0.0, True
    else:
        y, is_null = normalized_return(target_return, bundle.stats), False
    conds = [Condition(return_values=np.float32(y), known_mask=mask,
                       known_values=values, is_null=is_null)
             for _ in range(req.samples_per_request)]
    ys = np.full(len(conds), y, dtype=np.float32)
    plans = _sample_plan_batch(conds, bundle, sampler, [rng], ys,
                               groups=[len(conds)])
    future = plans[:, :, C:, :]
    return denormalize_obs(future, bundle.stats)


# ---------------------------------------------------------------------------
# displacement metrics
# ---------------------------------------------------------------------------

def _check_pair(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.ndim != 3:
        raise ValueError("expected (N, L, D) trajectories")
    return pred, truth


def ade(pred: np.ndarray, truth: np.ndarray) -> float:
    """Average displacement error: mean over agents and steps of the
    Euclidean deviation."""
    pred, truth = _check_pair(pred, truth)
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


def fde(pred: np.ndarray, truth: np.ndarray) -> float:
    """Final displacement error: mean over agents at the last step."""
    pred, truth = _check_pair(pred, truth)
    return float(np.linalg.norm(pred[:, -1] - truth[:, -1], axis=-1).mean())


def _min_metric(metric, preds, truth, k: int, per_agent: bool,
                agent_metric) -> float:
    preds = np.asarray(preds)
    if k < 1:
        raise ValueError("k must be >= 1")
    if preds.ndim != 4 or preds.shape[0] < k:
        raise ValueError("need at least k sampled trajectories (k, N, L, D)")
    chosen = preds[:k]
    if not per_agent:
        return float(min(metric(s, truth) for s in chosen))
    # best sample selected independently per agent, then averaged
    per = np.array([[agent_metric(s[i], truth[i]) for s in chosen]
                    for i in range(preds.shape[1])])
    return float(per.min(axis=1).mean())


def min_ade(preds, truth, k: int, per_agent: bool = False) -> float:
    """Minimum joint ADE over the first k samples (per-agent variant via
    flag)."""
    return _min_metric(
        ade, preds, truth, k, per_agent,
        lambda p, t: float(np.linalg.norm(p - t, axis=-1).mean()))


def min_fde(preds, truth, k: int, per_agent: bool = False) -> float:
    return _min_metric(
        fde, preds, truth, k, per_agent,
        lambda p, t: float(np.linalg.norm(p[-1] - t[-1])))


def normalized_score(score: float, expert: float, random: float) -> float:
    """100 * (S - S_random) / (S_expert - S_random)."""
    if expert == random:
        raise ValueError("expert and random reference scores must differ")
    return 100.0 * (score - random) / (expert - random)


def consistency_ratio(plans: np.ndarray, t: int, tol: float,
                      pos_dims=None) -> float:
    """Fraction of episodes whose decentralized plans agree at env step t.

    plans: (episodes, steps, egos, agents, D) final planned positions (the
    rollout's plan_finals log) or (episodes, steps, egos, agents, W, D) full
    plans, in which case the last window position is used. An episode counts
    as consistent when, for every ordered ego pair (i, j), ego i's predicted
    final position for agent j lies within tol of agent j's own plan.
    pos_dims selects the observation dims treated as position (default all).
    """
    plans = np.asarray(plans)
    if plans.ndim == 6:
        plans = plans[:, :, :, :, -1, :]
    if plans.ndim != 5:
        raise ValueError("plans must be (E, T, egos, agents, D) or full windows")
    E, T, egos, agents, D = plans.shape
    if E == 0:
        raise ValueError("no logged plans")
    if egos != agents:
        raise ValueError("consistency needs decentralized plans (one per ego)")
    if not 0 <= t < T:
        raise ValueError(f"step t={t} outside logged range 0..{T - 1}")
    p = plans[:, t]
    if pos_dims is not None:
        p = p[..., list(pos_dims)]
    own = p[:, np.arange(agents), np.arange(agents), :]    # (E, j, pos)
    diff = p - own[:, None, :, :]                          # ego i vs agent j's own
    ok = (np.linalg.norm(diff, axis=-1) <= tol).all(axis=(1, 2))
    return float(ok.mean())


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (metric, split, value, n, seed)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "split", "value", "n", "seed"])
        for r in rows:
            w.writerow(list(r))


def plot_trajectories(truth: np.ndarray, pred: np.ndarray, path,
                      pos_dims=(0, 1)) -> None:
    """SVG overlay: truth solid, prediction dashed, one color per agent."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    truth = np.asarray(truth)
    pred = np.asarray(pred)
    n = truth.shape[0]
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = plt.cm.tab10(np.linspace(0, 1, max(n, 2)))
    i, j = pos_dims
    for a in range(n):
        ax.plot(truth[a, :, i], truth[a, :, j], "-", color=colors[a],
                label=f"agent {a}")
        ax.plot(pred[a, :, i], pred[a, :, j], "--", color=colors[a])
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=7)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)

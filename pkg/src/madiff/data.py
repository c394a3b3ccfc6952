"""Offline dataset model: episodes, returns, normalization, training windows,
and the on-disk container format.

File layout (little endian throughout)::

    "MADS" | u32 version | u32 len | metadata JSON (utf-8)
    per episode: u32 payload_len | payload | u32 crc32(payload)
    payload: u8 terminated | arrays obs, actions, rewards
    array:   u8 ndim | u32 * ndim dims | float32 data

Truncation, version and checksum problems raise distinct decode errors.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"MADS"
FORMAT_VERSION = 1

# conditioned returns are clipped to this band after dividing by return_scale;
# symmetric so that negative-reward tasks keep a usable conditioning signal
RETURN_CLIP = (-1.2, 1.2)


class DatasetFormatError(ValueError):
    """Base class for dataset decode failures."""


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    pass


class DatasetChecksumError(DatasetFormatError):
    pass


@dataclass
class Episode:
    """One recorded rollout. obs (T+1, N, obs_dim), actions (T, N, act_dim),
    rewards (T,) shared scalar reward."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool = False

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if self.rewards.ndim != 1 or len(self.rewards) < 1:
            raise ValueError("rewards must be a nonempty 1-D array")
        t = len(self.rewards)
        if self.obs.shape[0] != t + 1 or self.actions.shape[0] != t:
            raise ValueError("episode leading dimensions inconsistent")
        if self.obs.shape[1] != self.actions.shape[1]:
            raise ValueError("agent counts inconsistent between obs and actions")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def n_agents(self) -> int:
        return self.obs.shape[1]


@dataclass
class Condition:
    """Conditioning bundle for one window: target return, which entries of
    the trajectory are pinned by observation, and their values."""

    return_values: np.ndarray  # scalar () or per-agent (N,)
    known_mask: np.ndarray     # (N, W) bool
    known_values: np.ndarray   # (N, W, D), defined where known_mask
    is_null: bool = False


@dataclass
class NormStats:
    """Min/max ranges mapping observations into [-1, 1] plus the divisor
    applied to conditioned returns."""

    obs_min: np.ndarray
    obs_max: np.ndarray
    return_scale: float

    def __post_init__(self):
        self.obs_min = np.asarray(self.obs_min, dtype=np.float64)
        self.obs_max = np.asarray(self.obs_max, dtype=np.float64)
        if self.obs_min.shape != self.obs_max.shape:
            raise ValueError("obs_min/obs_max shape mismatch")
        if np.any(self.obs_max < self.obs_min):
            raise ValueError("obs_max must be >= obs_min")
        if not self.return_scale > 0:
            raise ValueError("return_scale must be positive")

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], gamma: float = 1.0,
                      per_agent: bool = False) -> "NormStats":
        if not episodes:
            raise ValueError("cannot compute stats from an empty dataset")
        obs = np.concatenate([ep.obs for ep in episodes], axis=0)  # (sum_T, N, D)
        if per_agent:
            mins, maxs = obs.min(axis=0), obs.max(axis=0)
        else:
            mins = obs.min(axis=(0, 1))
            maxs = obs.max(axis=(0, 1))
        r0 = [compute_returns(ep, gamma)[0] for ep in episodes]
        scale = float(np.max(np.abs(r0)))
        if scale <= 0:
            scale = 1.0
        return cls(obs_min=mins, obs_max=maxs, return_scale=scale)

    def to_json(self) -> dict:
        return {
            "obs_min": self.obs_min.tolist(),
            "obs_max": self.obs_max.tolist(),
            "return_scale": self.return_scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["obs_min"]), np.asarray(d["obs_max"]),
                   float(d["return_scale"]))


@dataclass
class WindowSample:
    """One training window: normalized trajectory (N, C+H, D), its condition,
    and the action labels for the transitions inside the window."""

    window: np.ndarray
    cond: Condition
    actions: np.ndarray       # (W-1, N, act_dim)
    action_valid: np.ndarray  # (W-1,) bool, False where padded
    fully_in_bounds: bool = True


def compute_returns(episode: Episode, gamma: float) -> np.ndarray:
    """Discounted return-to-go R_t = r_t + gamma * R_{t+1} for every step."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    r = episode.rewards.astype(np.float64)
    if r.size == 0:
        raise ValueError("episode has no rewards")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def _expand_stats(stats: NormStats, obs: np.ndarray):
    mins, maxs = stats.obs_min, stats.obs_max
    if mins.ndim == 2:
        # per-agent stats broadcast against (..., N, T, D)
        mins = mins[:, None, :]
        maxs = maxs[:, None, :]
    if obs.shape[-1] != stats.obs_min.shape[-1]:
        raise ValueError(
            f"obs dim {obs.shape[-1]} does not match stats dim {stats.obs_min.shape[-1]}")
    return mins, maxs


def normalize_obs(obs: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map observations into [-1, 1] per dimension; constant dims map to 0."""
    mins, maxs = _expand_stats(stats, obs)
    span = maxs - mins
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (obs - mins) / safe - 1.0
    out = np.where(span > 0, out, 0.0)
    return out.astype(obs.dtype, copy=False)


def denormalize_obs(obs: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of normalize_obs (constant dims return their stored min)."""
    mins, maxs = _expand_stats(stats, obs)
    span = maxs - mins
    out = mins + (obs + 1.0) * 0.5 * span
    out = np.where(span > 0, out, mins)
    return out.astype(obs.dtype, copy=False)


def normalized_return(raw_return: float, stats: NormStats) -> float:
    lo, hi = RETURN_CLIP
    return float(np.clip(raw_return / stats.return_scale, lo, hi))


def sample_window(episode: Episode, t: int, C: int, H: int, stats: NormStats,
                  gamma: float, mode: str = "centralized",
                  ego: int | None = None) -> WindowSample:
    """Cut the window covering env steps t-C .. t+H-1, normalized.

    Positions before the episode start are edge padded with the first
    observation and still marked known; positions past the end repeat the
    final observation and clear the window's in-bounds flag. The known mask
    covers the C+1 history-and-current positions, for every agent in
    centralized mode or for the ego agent only in decentralized mode.
    """
    T = episode.length
    if not 0 <= t <= T - 1:
        raise ValueError(f"window start t={t} out of range 0..{T - 1}")
    if C < 0 or H < 1:
        raise ValueError("need C >= 0 and H >= 1")
    if mode not in ("centralized", "decentralized"):
        raise ValueError(f"unknown window mode {mode!r}")
    if mode == "decentralized":
        if ego is None:
            raise ValueError("decentralized windows need an ego agent index")
        if not 0 <= ego < episode.n_agents:
            raise ValueError("ego agent index out of range")

    W = C + H
    idx = np.clip(np.arange(t - C, t + H), 0, T)  # obs has T+1 entries
    window = normalize_obs(episode.obs[idx], stats)       # (W, N, D)
    window = np.ascontiguousarray(window.transpose(1, 0, 2))  # (N, W, D)

    n = episode.n_agents
    known = np.zeros((n, W), dtype=bool)
    if mode == "centralized":
        known[:, : C + 1] = True
    else:
        known[ego, : C + 1] = True
    values = np.where(known[:, :, None], window, 0.0).astype(np.float32)

    y = normalized_return(compute_returns(episode, gamma)[t], stats)
    cond = Condition(return_values=np.float32(y), known_mask=known,
                     known_values=values)

    a_idx = np.arange(t - C, t + H - 1)
    valid = (a_idx >= 0) & (a_idx <= T - 1)
    actions = np.zeros((W - 1,) + episode.actions.shape[1:], dtype=np.float32)
    actions[valid] = episode.actions[a_idx[valid]]
    return WindowSample(window=window, cond=cond, actions=actions,
                        action_valid=valid,
                        fully_in_bounds=bool(t - C >= 0 and t + H - 1 <= T))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    episodes: list[Episode]
    stats: NormStats
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.episodes[0].n_agents if self.episodes else int(self.meta.get("n_agents", 0))

    @property
    def obs_dim(self) -> int:
        return self.episodes[0].obs.shape[2] if self.episodes else int(self.meta.get("obs_dim", 0))

    @property
    def act_dim(self) -> int:
        return self.episodes[0].actions.shape[2] if self.episodes else int(self.meta.get("act_dim", 0))

    def episode_returns(self, gamma: float) -> np.ndarray:
        return np.array([compute_returns(ep, gamma)[0] for ep in self.episodes])


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _unpack_array(buf: memoryview, off: int):
    if off + 1 > len(buf):
        raise DatasetTruncatedError("array header truncated")
    ndim = buf[off]
    off += 1
    if off + 4 * ndim > len(buf):
        raise DatasetTruncatedError("array shape truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    nbytes = count * 4
    if off + nbytes > len(buf):
        raise DatasetTruncatedError("array data truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return np.ascontiguousarray(arr), off + nbytes


def save_dataset(path, episodes: Sequence[Episode], stats: NormStats,
                 meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if episodes:
        meta.setdefault("n_agents", episodes[0].n_agents)
        meta.setdefault("obs_dim", int(episodes[0].obs.shape[2]))
        meta.setdefault("act_dim", int(episodes[0].actions.shape[2]))
    meta.setdefault("act_kind", "continuous")
    meta["episode_count"] = len(episodes)
    meta["norm_stats"] = stats.to_json()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for ep in episodes:
            payload = struct.pack("<B", int(ep.terminated))
            payload += _pack_array(ep.obs)
            payload += _pack_array(ep.actions)
            payload += _pack_array(ep.rewards)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise DatasetTruncatedError("file shorter than header")
    if raw[:4] != MAGIC:
        raise DatasetFormatError("bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    if 12 + meta_len > len(raw):
        raise DatasetTruncatedError("metadata truncated")
    try:
        meta = json.loads(raw[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"metadata not valid JSON: {e}") from e
    stats = NormStats.from_json(meta.pop("norm_stats"))

    episodes: list[Episode] = []
    off = 12 + meta_len
    count = int(meta.get("episode_count", 0))
    view = memoryview(raw)
    for i in range(count):
        if off + 4 > len(raw):
            raise DatasetTruncatedError(f"episode {i} length field truncated")
        (plen,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + plen + 4 > len(raw):
            raise DatasetTruncatedError(f"episode {i} payload truncated")
        payload = view[off : off + plen]
        off += plen
        (crc,) = struct.unpack_from("<I", raw, off)
        off += 4
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise DatasetChecksumError(f"episode {i} checksum mismatch")
        p = 0
        terminated = bool(payload[p])
        p += 1
        obs, p = _unpack_array(payload, p)
        actions, p = _unpack_array(payload, p)
        rewards, p = _unpack_array(payload, p)
        episodes.append(Episode(obs=obs, actions=actions, rewards=rewards,
                                terminated=terminated))
    return Dataset(episodes=episodes, stats=stats, meta=meta)

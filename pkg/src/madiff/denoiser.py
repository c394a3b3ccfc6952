"""Noise-prediction network: per-agent temporal U-Nets over observation
windows with cross-agent multi-head attention fused into every decoder skip
connection, conditioned on the diffusion step and a target return.

Parameters live in a flat name -> Tensor dict so checkpoints, the optimizer
and finite-difference checks all see one namespace. U-Net streams are shared
across agents (one parameter set) or per agent; the attention projections are
shared always.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, concat, conv1d, no_grad, upsample2
from .data import Condition


@dataclass(frozen=True)
class NetConfig:
    obs_dim: int
    n_agents: int
    horizon_total: int
    base_channels: int = 32
    n_levels: int = 2
    n_heads: int = 4
    share_unet: bool = True
    use_attention: bool = True
    time_embed_dim: int = 32
    return_embed_dim: int = 64
    returns_per_agent: bool = False

    def validate(self) -> None:
        if self.obs_dim < 1 or self.n_agents < 1:
            raise ValueError("obs_dim and n_agents must be >= 1")
        if self.n_levels < 2:
            raise ValueError("need n_levels >= 2 (one down/up pair)")
        div = 2 ** (self.n_levels - 1)
        if self.horizon_total % div:
            raise ValueError(
                f"horizon_total {self.horizon_total} not divisible by {div}")
        if self.base_channels % self.n_heads:
            raise ValueError("n_heads must divide base_channels")
        if self.time_embed_dim % 2 or self.time_embed_dim < 2:
            raise ValueError("time_embed_dim must be even and >= 2")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2**l for l in range(self.n_levels)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _n_groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of the step index; (B, dim) for vector k."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    denom = max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / denom)
    ang = k[:, None] * freqs[None, :]
    out = np.empty((len(k), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _linear_init(store, rng, name, fan_in, fan_out, zero=False):
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        w = (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)
    store[name + ".w"] = Tensor(w, requires_grad=True)
    store[name + ".b"] = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)


def _conv_init(store, rng, name, c_in, c_out, k, scale=1.0):
    w = (scale * rng.standard_normal((c_out, c_in, k))
         / math.sqrt(c_in * k)).astype(np.float32)
    store[name + ".w"] = Tensor(w, requires_grad=True)
    store[name + ".b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)


def _gn_init(store, name, channels):
    store[name + ".g"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
    store[name + ".b"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)


def _resblock_init(store, rng, prefix, c_in, c_out, emb_dim):
    _conv_init(store, rng, prefix + ".conv1", c_in, c_out, 5)
    _gn_init(store, prefix + ".gn1", c_out)
    _conv_init(store, rng, prefix + ".conv2", c_out, c_out, 5)
    _gn_init(store, prefix + ".gn2", c_out)
    _linear_init(store, rng, prefix + ".emb", emb_dim, c_out)
    if c_in != c_out:
        _conv_init(store, rng, prefix + ".skip", c_in, c_out, 1)


def _stream_init(store, rng, prefix, cfg: NetConfig):
    dims = cfg.level_channels
    emb = cfg.return_embed_dim
    _conv_init(store, rng, prefix + "in", cfg.obs_dim, dims[0], 5)
    for l in range(cfg.n_levels - 1):
        _resblock_init(store, rng, f"{prefix}enc{l}", dims[l], dims[l], emb)
        _conv_init(store, rng, f"{prefix}down{l}", dims[l], dims[l + 1], 3)
    _resblock_init(store, rng, prefix + "mid", dims[-1], dims[-1], emb)
    for l in range(cfg.n_levels - 1):
        _conv_init(store, rng, f"{prefix}up{l}", dims[l + 1], dims[l], 3)
        _resblock_init(store, rng, f"{prefix}dec{l}", 2 * dims[l], dims[l], emb)
    _gn_init(store, prefix + "out.gn", dims[0])
    _conv_init(store, rng, prefix + "out.conv1", dims[0], dims[0], 5)
    # small-but-nonzero head keeps the initial prediction near zero without
    # collapsing untrained outputs to an exact constant
    _conv_init(store, rng, prefix + "out.conv2", dims[0], cfg.obs_dim, 1, scale=0.1)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    store: dict[str, Tensor] = {}
    emb = cfg.return_embed_dim
    _linear_init(store, rng, "embed.time1", cfg.time_embed_dim, emb)
    _linear_init(store, rng, "embed.time2", emb, emb)
    _linear_init(store, rng, "embed.ret1", 1, emb)
    _linear_init(store, rng, "embed.ret2", emb, emb)
    store["embed.null"] = Tensor(
        rng.normal(0.0, 0.1, emb).astype(np.float32), requires_grad=True)
    if cfg.share_unet:
        _stream_init(store, rng, "unet.", cfg)
    else:
        for a in range(cfg.n_agents):
            _stream_init(store, rng, f"unet{a}.", cfg)
    if cfg.use_attention:
        dims = cfg.level_channels
        for l in range(cfg.n_levels - 1):
            for nm in ("q", "k", "v"):
                _linear_init(store, rng, f"attn{l}.{nm}", dims[l], dims[l])
    return store


def param_count(store: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in store.values())


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _linear(p, name, x: Tensor) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def _groupnorm(p, name, x: Tensor, eps: float = 1e-5) -> Tensor:
    B, C, T = x.shape
    g = _n_groups(C)
    xr = x.reshape(B, g, (C // g) * T)
    m = xr.mean(axis=2, keepdims=True)
    d = xr - m
    v = d.pow_const(2.0).mean(axis=2, keepdims=True)
    xh = (d * (v + eps).pow_const(-0.5)).reshape(B, C, T)
    return xh * p[name + ".g"].reshape(1, C, 1) + p[name + ".b"].reshape(1, C, 1)


def _resblock(p, prefix, x: Tensor, emb: Tensor) -> Tensor:
    h = _groupnorm(p, prefix + ".gn1", conv1d(x, p[prefix + ".conv1.w"],
                                              p[prefix + ".conv1.b"], 1, 2)).silu()
    shift = _linear(p, prefix + ".emb", emb.silu())
    h = h + shift.reshape(shift.shape[0], shift.shape[1], 1)
    h = _groupnorm(p, prefix + ".gn2", conv1d(h, p[prefix + ".conv2.w"],
                                              p[prefix + ".conv2.b"], 1, 2)).silu()
    if prefix + ".skip.w" in p:
        x = conv1d(x, p[prefix + ".skip.w"], p[prefix + ".skip.b"], 1, 0)
    return h + x


def _attention(p, level: int, feats: Tensor, n_heads: int,
               want_weights: bool = False):
    """Cross-agent multi-head attention at one skip level.

    feats (B, N, C, T) -> fused (B, N, C, T); softmax runs over the agent
    axis independently per time position and head.
    """
    B, N, C, T = feats.shape
    dh = C // n_heads
    x = feats.transpose(0, 3, 1, 2)  # (B, T, N, C)
    q = _linear(p, f"attn{level}.q", x)
    k = _linear(p, f"attn{level}.k", x)
    v = _linear(p, f"attn{level}.v", x)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, N, n_heads, dh).transpose(0, 1, 3, 2, 4)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = (qh @ kh.transpose(0, 1, 2, 4, 3)).scale(1.0 / math.sqrt(dh))
    w = scores.softmax(axis=-1)                       # (B, T, h, N, N)
    fused = w @ vh                                    # (B, T, h, N, dh)
    fused = fused.transpose(0, 1, 3, 2, 4).reshape(B, T, N, C)
    fused = fused.transpose(0, 2, 3, 1)               # (B, N, C, T)
    if want_weights:
        return fused, w
    return fused


def _cond_embedding(p, cfg: NetConfig, k, y, null_mask) -> Tensor:
    """Combined step/return embedding, one row per (sample, agent)."""
    B = len(k)
    N = cfg.n_agents
    sin = sinusoidal_embedding(k, cfg.time_embed_dim).astype(np.float32)
    t_emb = _linear(p, "embed.time2", _linear(p, "embed.time1", Tensor(sin)).silu())

    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 0:
        y = np.full(B, float(y), dtype=np.float32)
    if y.ndim == 1:
        y = np.repeat(y[:, None], N, axis=1)  # shared scalar per agent
    r_in = Tensor(y.reshape(B * N, 1))
    r_emb = _linear(p, "embed.ret2", _linear(p, "embed.ret1", r_in).silu())

    m_rows = np.repeat(np.asarray(null_mask, dtype=np.float32).reshape(B, 1), N, axis=0)
    null_vec = p["embed.null"].reshape(1, cfg.return_embed_dim)
    r_emb = r_emb * Tensor(1.0 - m_rows) + null_vec * Tensor(m_rows)

    t_rows = t_emb.reshape(B, 1, cfg.return_embed_dim)
    t_rows = (t_rows + Tensor(np.zeros((B, N, cfg.return_embed_dim), dtype=np.float32)))
    t_rows = t_rows.reshape(B * N, cfg.return_embed_dim)
    return t_rows + r_emb


def _stream_encode(p, prefix, rows: Tensor, emb: Tensor, cfg: NetConfig):
    h = conv1d(rows, p[prefix + "in.w"], p[prefix + "in.b"], 1, 2)
    skips = []
    for l in range(cfg.n_levels - 1):
        h = _resblock(p, f"{prefix}enc{l}", h, emb)
        skips.append(h)
        h = conv1d(h, p[f"{prefix}down{l}.w"], p[f"{prefix}down{l}.b"], 2, 1)
    h = _resblock(p, prefix + "mid", h, emb)
    return h, skips


def _stream_decode(p, prefix, h: Tensor, skips, emb: Tensor, cfg: NetConfig):
    for l in reversed(range(cfg.n_levels - 1)):
        h = conv1d(upsample2(h), p[f"{prefix}up{l}.w"], p[f"{prefix}up{l}.b"], 1, 1)
        h = _resblock(p, f"{prefix}dec{l}", concat([skips[l], h], axis=1), emb)
    h = _groupnorm(p, prefix + "out.gn",
                   conv1d(h, p[prefix + "out.conv1.w"], p[prefix + "out.conv1.b"], 1, 2)).silu()
    return conv1d(h, p[prefix + "out.conv2.w"], p[prefix + "out.conv2.b"], 1, 0)


def forward(p: dict[str, Tensor], cfg: NetConfig, x: Tensor, k, y, null_mask) -> Tensor:
    """Noise prediction for a batch. x (B, N, W, D) -> (B, N, W, D)."""
    B, N, W, D = x.shape
    if (N, W, D) != (cfg.n_agents, cfg.horizon_total, cfg.obs_dim):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match config "
            f"({cfg.n_agents}, {cfg.horizon_total}, {cfg.obs_dim})")
    emb = _cond_embedding(p, cfg, k, y, null_mask)  # (B*N, E)

    if cfg.share_unet:
        rows = x.transpose(0, 1, 3, 2).reshape(B * N, D, W)
        h, skips = _stream_encode(p, "unet.", rows, emb, cfg)
        if cfg.use_attention:
            fused = []
            for l, c in enumerate(skips):
                cN = c.reshape(B, N, c.shape[1], c.shape[2])
                cN = _attention(p, l, cN, cfg.n_heads)
                fused.append(cN.reshape(B * N, c.shape[1], c.shape[2]))
            skips = fused
        out = _stream_decode(p, "unet.", h, skips, emb, cfg)
        return out.reshape(B, N, D, W).transpose(0, 1, 3, 2)

    emb_rows = emb.reshape(B, N, cfg.return_embed_dim)
    mids, skips_per_agent, embs = [], [], []
    for a in range(N):
        xa = x.select(1, a).transpose(0, 2, 1)  # (B, D, W)
        ea = emb_rows.select(1, a)
        h, skips = _stream_encode(p, f"unet{a}.", xa, ea, cfg)
        mids.append(h)
        skips_per_agent.append(skips)
        embs.append(ea)
    if cfg.use_attention:
        for l in range(cfg.n_levels - 1):
            stack = concat([s[l].reshape(B, 1, s[l].shape[1], s[l].shape[2])
                            for s in skips_per_agent], axis=1)
            fused = _attention(p, l, stack, cfg.n_heads)
            for a in range(N):
                skips_per_agent[a][l] = fused.select(1, a)
    outs = []
    for a in range(N):
        o = _stream_decode(p, f"unet{a}.", mids[a], skips_per_agent[a], embs[a], cfg)
        outs.append(o.transpose(0, 2, 1).reshape(B, 1, W, D))
    return concat(outs, axis=1)


# ---------------------------------------------------------------------------
# spec-level surface
# ---------------------------------------------------------------------------

def embed_timestep(k: int, params: dict[str, Tensor], cfg: NetConfig) -> np.ndarray:
    """Learned embedding of one diffusion step (deterministic)."""
    if k < 1:
        raise ValueError("diffusion step k must be >= 1")
    with no_grad():
        sin = sinusoidal_embedding([k], cfg.time_embed_dim).astype(np.float32)
        t = _linear(params, "embed.time2",
                    _linear(params, "embed.time1", Tensor(sin)).silu())
    return t.data[0]


def agent_attention(level_features: np.ndarray, params: dict[str, Tensor],
                    level: int = 0, n_heads: int = 4,
                    return_weights: bool = False):
    """Fuse per-agent features (N, C, T) or (B, N, C, T) across agents."""
    feats = np.asarray(level_features)
    squeeze = feats.ndim == 3
    if squeeze:
        feats = feats[None]
    if feats.ndim != 4:
        raise ValueError("expected (N, C, T) or (B, N, C, T) features")
    with no_grad():
        out = _attention(params, level, Tensor(feats), n_heads, want_weights=return_weights)
    if return_weights:
        fused, w = out
        return (fused.data[0] if squeeze else fused.data,
                w.data[0] if squeeze else w.data)
    return out.data[0] if squeeze else out.data


def predict_noise(noisy: np.ndarray, cond: Condition, k: int,
                  params: dict[str, Tensor], cfg: NetConfig) -> np.ndarray:
    """Single-sample functional wrapper around forward()."""
    x = np.asarray(noisy, dtype=np.float32)
    if x.shape != (cfg.n_agents, cfg.horizon_total, cfg.obs_dim):
        raise ValueError(f"noisy has shape {x.shape}, expected "
                         f"({cfg.n_agents}, {cfg.horizon_total}, {cfg.obs_dim})")
    y = np.asarray(cond.return_values, dtype=np.float32)
    y = np.array([float(y)]) if y.ndim == 0 else y[None]  # (1,) or (1, N)
    with no_grad():
        out = forward(params, cfg, Tensor(x[None]), np.array([k]), y,
                      np.array([1.0 if cond.is_null else 0.0]))
    return out.data[0]


def grad_check(params: dict[str, Tensor], batch, cfg: NetConfig,
               n_samples: int = 50, h: float = 1e-4,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central finite differences.

    batch is (x, k, y, null_mask, target, loss_mask); runs in float64.
    """
    rng = rng or np.random.default_rng(0)
    x, k, y, null_mask, target, loss_mask = batch
    p64 = {n: Tensor(t.data.astype(np.float64), requires_grad=True)
           for n, t in params.items()}
    x64 = np.asarray(x, dtype=np.float64)
    t64 = np.asarray(target, dtype=np.float64)
    m64 = np.asarray(loss_mask, dtype=np.float64)
    denom = max(m64.sum(), 1.0)

    def loss_value() -> float:
        with no_grad():
            out = forward(p64, cfg, Tensor(x64), k, y, null_mask)
        return float((((out.data - t64) * m64) ** 2).sum() / denom)

    out = forward(p64, cfg, Tensor(x64), k, y, null_mask)
    diff = (out - Tensor(t64)) * Tensor(m64)
    (diff * diff).sum().scale(1.0 / denom).backward()

    names = sorted(p64)
    flat = [(n, i) for n in names for i in range(p64[n].data.size)]
    picks = rng.choice(len(flat), size=min(n_samples, len(flat)), replace=False)
    worst = 0.0
    for pi in picks:
        name, i = flat[pi]
        t = p64[name]
        analytic = t.grad.ravel()[i] if t.grad is not None else 0.0
        orig = t.data.ravel()[i]
        t.data.ravel()[i] = orig + h
        fp = loss_value()
        t.data.ravel()[i] = orig - h
        fm = loss_value()
        t.data.ravel()[i] = orig
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic - numeric) / (abs(analytic) + 1e-8)
        worst = max(worst, err)
    return worst

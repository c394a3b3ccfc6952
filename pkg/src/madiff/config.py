"""One JSON run-config document aggregating all module configs, with
validation that reports dotted field paths and dotted-path overrides for
sweep scripting."""

from __future__ import annotations

import copy
import json
import math

import numpy as np

from .data import Dataset
from .denoiser import NetConfig
from .envs import EnvConfig
from .planner import PlanConfig
from .schedule import SamplerParams
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": None,
    "dataset": {
        "path": None,
        "episodes": 300,
        "mix": {"expert": 100, "medium": 100, "random": 100},
        "gamma": 0.99,
    },
    "env": {
        "n_agents": 3,
        "t_max": 25,
        "dt": 0.1,
        "collision_penalty": 1.0,
        "collision_radius": 0.3,
        "sensing_radius": None,
        "max_speed": 1.0,
    },
    "net": {
        "base_channels": 32,
        "n_levels": 2,
        "n_heads": 4,
        "share_unet": True,
        "use_attention": True,
        "time_embed_dim": 32,
        "return_embed_dim": 64,
        "returns_per_agent": False,
    },
    "train": {
        "learning_rate": 2e-4,
        "batch_size": 32,
        "cond_dropout_prob": 0.25,
        "total_steps": 5000,
        "checkpoint_interval": 0,
        "ema_decay": None,
        "gamma": 0.99,
        "C": 0,
        "H": 24,
        "K": 200,
        "schedule_kind": "cosine",
        "mask_mode": "decentralized",
    },
    "plan": {
        "mode": "decentralized",
        "replan_every": 1,
        "target_return": None,
        "target_return_percentile": 95.0,
        "episodes": 100,
        "log_plans": False,
    },
    "sampler": {
        "guidance_scale": 1.2,
        "temperature_scale": 0.5,
        "sampler_kind": "ddim",
        "ddim_steps": 15,
    },
    "predict": {
        "horizon": 20,
        "samples": 20,
        "episodes": 8,
        "min_k": 20,
    },
}

_TYPES = {
    "seed": int,
    "out_dir": (str, type(None)),
    "dataset.path": (str, type(None)),
    "dataset.episodes": int,
    "dataset.mix": dict,
    "dataset.gamma": (int, float),
    "env.n_agents": int,
    "env.t_max": int,
    "env.dt": (int, float),
    "env.collision_penalty": (int, float),
    "env.collision_radius": (int, float),
    "env.sensing_radius": (int, float, type(None)),
    "env.max_speed": (int, float),
    "net.base_channels": int,
    "net.n_levels": int,
    "net.n_heads": int,
    "net.share_unet": bool,
    "net.use_attention": bool,
    "net.time_embed_dim": int,
    "net.return_embed_dim": int,
    "net.returns_per_agent": bool,
    "train.learning_rate": (int, float),
    "train.batch_size": int,
    "train.cond_dropout_prob": (int, float),
    "train.total_steps": int,
    "train.checkpoint_interval": int,
    "train.ema_decay": (int, float, type(None)),
    "train.gamma": (int, float),
    "train.C": int,
    "train.H": int,
    "train.K": int,
    "train.schedule_kind": str,
    "train.mask_mode": str,
    "plan.mode": str,
    "plan.replan_every": int,
    "plan.target_return": (int, float, type(None)),
    "plan.target_return_percentile": (int, float),
    "plan.episodes": int,
    "plan.log_plans": bool,
    "sampler.guidance_scale": (int, float),
    "sampler.temperature_scale": (int, float),
    "sampler.sampler_kind": str,
    "sampler.ddim_steps": int,
    "predict.horizon": int,
    "predict.samples": int,
    "predict.episodes": int,
    "predict.min_k": int,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown config field")
        if isinstance(base[key], dict) and key != "mix" and not here.endswith("mix"):
            if not isinstance(val, dict):
                raise ConfigError(here, f"expected an object, got {type(val).__name__}")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(cfg: dict) -> None:
    for path, types in _TYPES.items():
        node = cfg
        for part in path.split("."):
            node = node[part]
        if not isinstance(types, tuple):
            types = (types,)
        # bool is an int subclass; keep them distinct
        if isinstance(node, bool) and bool not in types:
            raise ConfigError(path, "expected a number, got a boolean")
        if not isinstance(node, types):
            names = "/".join(t.__name__ for t in types)
            raise ConfigError(path, f"expected {names}, got {type(node).__name__}")
        if isinstance(node, float) and not math.isfinite(node):
            raise ConfigError(path, "must be finite")
    if cfg["seed"] is None:
        raise ConfigError("seed", "a seed is mandatory")
    for tier, w in cfg["dataset"]["mix"].items():
        if not isinstance(w, (int, float)) or isinstance(w, bool):
            raise ConfigError(f"dataset.mix.{tier}", "weights must be numbers")


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("<config>", f"invalid JSON: {e}") from e
        cfg = _merge(cfg, user)
    for item in overrides or []:
        cfg = _apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def _apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(item, "overrides use key.path=value")
    path, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node = {}
    cur = node
    parts = path.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return _merge(cfg, node)


# -- object builders -----------------------------------------------------------

def env_config(cfg: dict) -> EnvConfig:
    e = cfg["env"]
    return EnvConfig(
        n_agents=e["n_agents"], t_max=e["t_max"], dt=e["dt"],
        collision_penalty=e["collision_penalty"],
        collision_radius=e["collision_radius"],
        sensing_radius=(float("inf") if e["sensing_radius"] is None
                        else float(e["sensing_radius"])),
        max_speed=e["max_speed"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"], batch_size=t["batch_size"],
        cond_dropout_prob=t["cond_dropout_prob"], total_steps=t["total_steps"],
        checkpoint_interval=t["checkpoint_interval"], ema_decay=t["ema_decay"],
        seed=cfg["seed"], gamma=t["gamma"], C=t["C"], H=t["H"], K=t["K"],
        schedule_kind=t["schedule_kind"], mask_mode=t["mask_mode"],
        eval_guidance_scale=cfg["sampler"]["guidance_scale"],
        eval_temperature_scale=cfg["sampler"]["temperature_scale"])


def net_config(cfg: dict, obs_dim: int, n_agents: int) -> NetConfig:
    n = cfg["net"]
    t = cfg["train"]
    return NetConfig(
        obs_dim=obs_dim, n_agents=n_agents, horizon_total=t["C"] + t["H"],
        base_channels=n["base_channels"], n_levels=n["n_levels"],
        n_heads=n["n_heads"], share_unet=n["share_unet"],
        use_attention=n["use_attention"], time_embed_dim=n["time_embed_dim"],
        return_embed_dim=n["return_embed_dim"],
        returns_per_agent=n["returns_per_agent"])


def sampler_params(cfg: dict) -> SamplerParams:
    s = cfg["sampler"]
    return SamplerParams(
        guidance_scale=s["guidance_scale"],
        temperature_scale=s["temperature_scale"],
        sampler_kind=s["sampler_kind"], ddim_steps=s["ddim_steps"])


def resolve_target_return(cfg: dict, dataset: Dataset) -> float:
    p = cfg["plan"]
    if p["target_return"] is not None:
        return float(p["target_return"])
    rets = dataset.episode_returns(cfg["train"]["gamma"])
    return float(np.percentile(rets, p["target_return_percentile"]))


def plan_config(cfg: dict, dataset: Dataset) -> PlanConfig:
    p = cfg["plan"]
    t = cfg["train"]
    return PlanConfig(mode=p["mode"], H=t["H"], C=t["C"],
                      sampler=sampler_params(cfg),
                      target_return=resolve_target_return(cfg, dataset),
                      replan_every=p["replan_every"])


def config_echo(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2)

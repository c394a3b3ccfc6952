"""Command-line entry point wiring all modules into reproducible runs.

Every command takes one JSON config (``--config``), dotted-path overrides
(``--set a.b=v``), and writes a config echo next to its outputs so a run can
be reproduced from the echo alone. Exit codes: 0 success, 1 runtime error,
2 usage/validation error; errors go to stderr as one JSON object.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click
import numpy as np

from . import baseline, bench, metrics
from .checkpoint import CheckpointError
from .config import (ConfigError, config_echo, env_config, load_config,
                     net_config, plan_config, resolve_target_return,
                     sampler_params, train_config)
from .data import DatasetFormatError, load_dataset
from .envs import SpreadToyEnv, env_config_from_meta, generate_dataset, scripted_policy, run_episode
from .metrics import PredictionRequest, consistency_ratio, write_metrics_csv
from .planner import ModelBundle, PlanConfig, rollout
from .training import train


class UsageFailure(click.UsageError):
    pass


def _echo_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.json"), "w") as f:
        f.write(config_echo(cfg))


def _need_out(cfg, out):
    out = out or cfg.get("out_dir")
    if not out:
        raise UsageFailure("an output directory is required (--out or out_dir)")
    return out


def _load_cfg(config, seed, sets):
    if config is not None and not os.path.exists(config):
        raise UsageFailure(f"config file not found: {config}")
    cfg = load_config(config, overrides=list(sets))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _open_dataset(cfg, dataset_path=None):
    path = dataset_path or cfg["dataset"]["path"]
    if not path:
        raise UsageFailure("dataset.path is not set (use --set dataset.path=...)")
    if not os.path.exists(path):
        raise UsageFailure(f"dataset file not found: {path}")
    return load_dataset(path)


def _open_bundle(checkpoint):
    if not checkpoint:
        raise UsageFailure("--checkpoint is required")
    if not os.path.exists(checkpoint):
        raise UsageFailure(f"checkpoint not found: {checkpoint}")
    return ModelBundle.from_checkpoint(checkpoint)


_common = [
    click.option("--config", type=str, default=None, help="JSON run config"),
    click.option("--seed", type=int, default=None, help="override config seed"),
    click.option("--out", type=str, default=None, help="output directory"),
    click.option("--set", "sets", multiple=True,
                 help="dotted-path override, e.g. --set train.K=100"),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def cli():
    """Multi-agent diffusion planning toolkit."""


@cli.command("gen-data")
@common_options
def cmd_gen_data(config, seed, out, sets):
    """Roll scripted policies and write the offline dataset file."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    _echo_config(cfg, out)
    path = cfg["dataset"]["path"] or os.path.join(out, "dataset.mads")
    ds = generate_dataset(env_config(cfg), cfg["dataset"]["mix"],
                          cfg["dataset"]["episodes"], cfg["seed"], path=path,
                          gamma=cfg["dataset"]["gamma"])
    click.echo(f"wrote {len(ds.episodes)} episodes to {path}")


@cli.command("train")
@common_options
@click.option("--dataset", "dataset_path", type=str, default=None)
def cmd_train(config, seed, out, sets, dataset_path):
    """Fit the denoiser and inverse dynamics on an offline dataset."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    ds = _open_dataset(cfg, dataset_path)
    _echo_config(cfg, out)
    tc = train_config(cfg)
    nc = net_config(cfg, ds.obs_dim, ds.n_agents)
    result = train(ds, tc, nc, out_dir=out,
                   progress=lambda s, d, i: click.echo(
                       f"step {s}: diffusion {d:.4f} id {i:.4f}"))
    click.echo(f"final checkpoint: {result.final_path}")


@cli.command("rollout")
@common_options
@click.option("--checkpoint", type=str, default=None)
@click.option("--mode", type=click.Choice(["centralized", "decentralized"]),
              default=None, help="override plan.mode")
@click.option("--episodes", type=int, default=None)
@click.option("--log-plans", is_flag=True, default=False)
@click.option("--omit-timing", is_flag=True, default=False,
              help="drop wall-clock fields for byte-stable reports")
def cmd_rollout(config, seed, out, sets, checkpoint, mode, episodes,
                log_plans, omit_timing):
    """Run the planner in the environment and write a rollout report."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    bundle = _open_bundle(checkpoint)
    if mode is not None:
        cfg["plan"]["mode"] = mode
    if episodes is not None:
        cfg["plan"]["episodes"] = episodes
    if cfg["plan"]["log_plans"]:
        log_plans = True
    _echo_config(cfg, out)

    if cfg["plan"]["target_return"] is not None:
        target = float(cfg["plan"]["target_return"])
    else:
        ds = _open_dataset(cfg)
        target = resolve_target_return(cfg, ds)
    tr = bundle.meta.get("train", {})
    pc = PlanConfig(mode=cfg["plan"]["mode"], H=int(tr.get("H", cfg["train"]["H"])),
                    C=int(tr.get("C", cfg["train"]["C"])),
                    sampler=sampler_params(cfg), target_return=target,
                    replan_every=cfg["plan"]["replan_every"])
    env = SpreadToyEnv(env_config_from_meta(bundle.meta.get("dataset_meta", {})))
    report = rollout(env, bundle, pc, cfg["plan"]["episodes"], cfg["seed"],
                     log_plans=log_plans)
    path = os.path.join(out, "rollout_report.json")
    report.save(path, omit_timing=omit_timing)
    click.echo(f"mean return {report.mean_return:.3f} over "
               f"{len(report.episode_returns)} episodes -> {path}")


@cli.command("predict")
@common_options
@click.option("--checkpoint", type=str, default=None)
def cmd_predict(config, seed, out, sets, checkpoint):
    """History-conditioned joint prediction metrics on held-out episodes."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    bundle = _open_bundle(checkpoint)
    _echo_config(cfg, out)
    pcfg = cfg["predict"]
    H = pcfg["horizon"]
    W = bundle.net_cfg.horizon_total
    C = W - H
    if C < 1:
        raise UsageFailure(f"predict.horizon={H} leaves no history in a "
                           f"window of {W}")
    env = SpreadToyEnv(env_config_from_meta(bundle.meta.get("dataset_meta", {})))
    expert = scripted_policy("expert")
    rng = np.random.default_rng(cfg["seed"])
    sampler = sampler_params(cfg)
    rows, svg_done = [], False
    ades, fdes, minades, minfdes = [], [], [], []
    for e in range(pcfg["episodes"]):
        ep = run_episode(env, expert, 7_700_000 + cfg["seed"] * 1000 + e)
        t0 = int(rng.integers(0, ep.length - W + 1))
        hist = ep.obs[t0 : t0 + C].transpose(1, 0, 2)
        truth = ep.obs[t0 + C : t0 + W].transpose(1, 0, 2)
        req = PredictionRequest(history=hist, horizon=H,
                                samples_per_request=pcfg["samples"])
        preds = metrics.predict(req, bundle, sampler, rng)
        ades.append(metrics.ade(preds[0], truth))
        fdes.append(metrics.fde(preds[0], truth))
        k = min(pcfg["min_k"], pcfg["samples"])
        minades.append(metrics.min_ade(preds, truth, k))
        minfdes.append(metrics.min_fde(preds, truth, k))
        if not svg_done:
            metrics.plot_trajectories(truth, preds[0],
                                      os.path.join(out, "prediction.svg"))
            svg_done = True
    n = pcfg["episodes"]
    rows = [("ade", "eval", float(np.mean(ades)), n, cfg["seed"]),
            ("fde", "eval", float(np.mean(fdes)), n, cfg["seed"]),
            (f"min_ade_{k}", "eval", float(np.mean(minades)), n, cfg["seed"]),
            (f"min_fde_{k}", "eval", float(np.mean(minfdes)), n, cfg["seed"])]
    path = os.path.join(out, "prediction_metrics.csv")
    write_metrics_csv(path, rows)
    for r in rows:
        click.echo(f"{r[0]}: {r[2]:.4f}")


@cli.command("eval")
@common_options
@click.option("--checkpoint", type=str, default=None)
@click.option("--episodes", type=int, default=None)
def cmd_eval(config, seed, out, sets, checkpoint, episodes):
    """Rollout plus normalized score and plan-consistency analysis."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    bundle = _open_bundle(checkpoint)
    if episodes is not None:
        cfg["plan"]["episodes"] = episodes
    _echo_config(cfg, out)
    ds = _open_dataset(cfg) if cfg["plan"]["target_return"] is None else None
    target = (float(cfg["plan"]["target_return"]) if ds is None
              else resolve_target_return(cfg, ds))
    tr = bundle.meta.get("train", {})
    pc = PlanConfig(mode=cfg["plan"]["mode"], H=int(tr.get("H", cfg["train"]["H"])),
                    C=int(tr.get("C", cfg["train"]["C"])),
                    sampler=sampler_params(cfg), target_return=target,
                    replan_every=cfg["plan"]["replan_every"])
    envc = env_config_from_meta(bundle.meta.get("dataset_meta", {}))
    env = SpreadToyEnv(envc)
    report = rollout(env, bundle, pc, cfg["plan"]["episodes"], cfg["seed"],
                     log_plans=(pc.mode == "decentralized"))
    report.save(os.path.join(out, "rollout_report.json"), omit_timing=True)

    # expert/random reference scores from the scripted controllers
    n_ref = max(50, cfg["plan"]["episodes"] // 2)
    refs = {}
    for tier in ("expert", "random"):
        pol = scripted_policy(tier)
        rets = [sum(run_episode(env, pol, 3_300_000 + cfg["seed"] * 100 + i
                                ).rewards) for i in range(n_ref)]
        refs[tier] = float(np.mean(rets))
    score = metrics.normalized_score(report.mean_return, refs["expert"],
                                     refs["random"])
    rows = [("mean_return", "eval", report.mean_return,
             cfg["plan"]["episodes"], cfg["seed"]),
            ("normalized_score", "eval", score, cfg["plan"]["episodes"],
             cfg["seed"]),
            ("expert_reference", "eval", refs["expert"], n_ref, cfg["seed"]),
            ("random_reference", "eval", refs["random"], n_ref, cfg["seed"])]
    if report.plan_finals is not None:
        t_mid = min(9, report.plan_finals.shape[1] - 1)
        ratio = consistency_ratio(report.plan_finals, t_mid, tol=0.1,
                                  pos_dims=(0, 1))
        rows.append((f"consistency_ratio_t{t_mid}", "eval", ratio,
                     cfg["plan"]["episodes"], cfg["seed"]))
    write_metrics_csv(os.path.join(out, "eval_metrics.csv"), rows)
    for r in rows:
        click.echo(f"{r[0]}: {r[2]:.4f}")


@cli.command("bench-sampling")
@common_options
@click.option("--checkpoint", type=str, default=None,
              help="optional trained container; random weights otherwise")
@click.option("--agents", type=str, default="8,16,32")
@click.option("--trials", type=int, default=100)
def cmd_bench_sampling(config, seed, out, sets, checkpoint, agents, trials):
    """Wall-time of joint-trajectory sampling as the agent count grows."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    _echo_config(cfg, out)
    try:
        counts = [int(a) for a in agents.split(",") if a]
    except ValueError as e:
        raise UsageFailure(f"bad --agents list {agents!r}") from e
    bundle = _open_bundle(checkpoint) if checkpoint else None
    rows, ratio = bench.bench_sampling(
        agent_counts=counts, trials=trials, seed=cfg["seed"],
        base_channels=cfg["net"]["base_channels"],
        n_levels=cfg["net"]["n_levels"], checkpoint_bundle=bundle)
    path = os.path.join(out, "sampling_times.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_agents", "mean_ms", "std_ms", "trials", "seed"])
        for n, mean, std in rows:
            w.writerow([n, f"{mean:.3f}", f"{std:.3f}", trials, cfg["seed"]])
        w.writerow(["max_over_min_ratio", f"{ratio:.4f}", "", trials,
                    cfg["seed"]])
    for n, mean, std in rows:
        click.echo(f"N={n}: {mean:.2f} ms (+/- {std:.2f})")
    click.echo(f"max/min ratio: {ratio:.3f}")


@cli.command("bench-kernels")
@common_options
@click.option("--repeats", type=int, default=30)
def cmd_bench_kernels(config, seed, out, sets, repeats):
    """Compare the numba and numpy conv kernels on this machine."""
    cfg = _load_cfg(config, seed, sets)
    out = _need_out(cfg, out)
    rows = bench.bench_kernels(repeats=repeats)
    path = os.path.join(out, "kernel_times.csv")
    os.makedirs(out, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["op", "shape", "impl", "ms"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.4f}"])
    for r in rows:
        click.echo(f"{r[0]:18s} {r[1]:28s} {r[2]:5s} {r[3]:8.3f} ms")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:  # --help and friends
        return int(e.exit_code)
    except click.UsageError as e:
        print(json.dumps({"error": e.format_message()}), file=sys.stderr)
        return 2
    except ConfigError as e:
        print(json.dumps({"error": str(e), "field": e.field}), file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, ValueError,
            RuntimeError, OSError) as e:
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

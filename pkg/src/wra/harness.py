"""Experiment orchestration: run a declarative config end to end (train,
then eval, then artifacts) with every random draw derived from the master
seed. Identical config + seed must reproduce every emitted byte; anything
wall-clock shaped goes to a separate sidecar file so the promise is checkable
with a hash.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .nn import Mlp, load_checkpoint, save_checkpoint
from .rl import ExplorationSchedule, write_training_log
from .seeding import stream
from .envs import dsa as dsa_env
from .envs import power as power_env
from .envs import v2x as v2x_env
from . import learnopt

log = logging.getLogger("wra")


def setup_logging() -> None:
    """WRA_LOG=debug|info|warning|error picks the package log level."""
    level = os.environ.get("WRA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# Metrics persistence


@dataclass
class MetricsRecord:
    run_id: str
    replica: int
    metric: str
    step: int
    value: float


class MetricsWriter:
    """Append-only CSV of MetricsRecords, flushed after every add() batch.

    Values are formatted with %.12g so reruns are
    byte-comparable.
    """

    HEADER = ["run_id", "replica", "metric", "step", "value"]

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._f = open(self.path, "a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(self.HEADER)
            self._f.flush()

    def add(self, replica: int, metric: str, step: int, value) -> None:
        self._w.writerow([self.run_id, int(replica), metric, int(step),
                          f"{float(value):.12g}"])

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        if not self._f.closed:
            self._f.flush()
            self._f.close()


# ---------------------------------------------------------------------------
# Config -> dataclass plumbing


def _build(cls, params: dict, where: str):
    """Construct a trainer/env dataclass from config keys with a readable
    error naming the section and the offending key. YAML lists become tuples
    for tuple-typed fields; eps_* keys build the exploration schedule.
    """
    params = dict(params)
    names = {f.name for f in fields(cls)}
    if "eps" in names and any(k.startswith("eps_") for k in params):
        params["eps"] = ExplorationSchedule(
            params.pop("eps_start", 1.0),
            params.pop("eps_end", 0.02),
            params.pop("eps_anneal", 15_000),
        )
    for key, value in list(params.items()):
        if isinstance(value, list):
            params[key] = tuple(value)
    unknown = set(params) - names
    if unknown:
        raise ValueError(
            f"{where}: unknown key(s) {sorted(unknown)}, expected from {sorted(names)}"
        )
    return cls(**params)


def _run_id(cfg: RunConfig) -> str:
    return f"{cfg.kind}-s{cfg.seed}"


# ---------------------------------------------------------------------------
# Per-kind runners. Each trains one replica, writes its artifacts, and
# returns a JSON-safe summary dict.


def _check_keys(section: str, given: dict, allowed) -> None:
    """Unknown section keys fail loudly instead of silently using defaults."""
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValueError(
            f"{section}: unknown key(s) {', '.join(unknown)}; "
            f"expected among {sorted(allowed)}"
        )


def _run_bandit(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n_arms"})
    _check_keys("train", cfg.train, {"steps", "epsilon"})
    _check_keys("eval", cfg.eval, {"steps"})
    arms = int(cfg.env.get("n_arms", 5))
    steps = int(cfg.train.get("steps", 200))
    eps = float(cfg.train.get("epsilon", 0.1))
    rng = stream(cfg.seed, replica, "env")
    means = rng.normal(0.0, 1.0, size=arms)
    q = np.zeros(arms)
    counts = np.zeros(arms)
    for step in range(steps):
        a = int(rng.integers(arms)) if rng.random() < eps else int(np.argmax(q))
        r = float(rng.normal(means[a], 1.0))
        counts[a] += 1
        q[a] += (r - q[a]) / counts[a]
        mw.add(replica, "reward", step, r)
    greedy = int(np.argmax(q))
    eval_steps = int(cfg.eval.get("steps", 100))
    eval_reward = float(np.mean(rng.normal(means[greedy], 1.0, size=eval_steps)))
    mw.add(replica, "eval_reward", 0, eval_reward)
    mw.flush()
    best_rate = float(counts[np.argmax(means)] / steps)
    return {"best_arm_rate": best_rate, "picked_best":
            float(greedy == int(np.argmax(means))), "eval_reward": eval_reward}


def _run_dsa(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n_channels", "world"})
    _check_keys("eval", cfg.eval, {"slots", "seed"})
    n_channels = int(cfg.env.get("n_channels", 4))
    world = cfg.env.get("world", "rotating")
    train = _build(dsa_env.DsaTrainConfig, cfg.train, "train")
    net, _, log_rows = dsa_env.train_dsa_dqn(
        n_channels, world, train, master_seed=cfg.seed, replica=replica
    )
    save_checkpoint(net, out / f"checkpoint-r{replica}.mlp")
    write_training_log(log_rows, out / f"training-r{replica}.csv")
    for step, episode, *_rest, reward in log_rows:
        mw.add(replica, "train_reward", episode, reward)

    eval_seed = int(cfg.eval.get("seed", 7777))
    slots = int(cfg.eval.get("slots", 2000))
    rate = dsa_env.evaluate_dsa_policy(net, n_channels, world, train.history,
                                       slots, eval_seed)
    mw.add(replica, "eval_success_rate", 0, rate)
    summary = {"success_rate": rate}
    if "random" in cfg.baselines:
        summary["random_rate"] = dsa_env.random_dsa_rate(
            n_channels, world, slots, eval_seed
        )
        mw.add(replica, "baseline_random", 0, summary["random_rate"])
    if "oracle" in cfg.baselines and world == "rotating":
        summary["oracle_rate"] = dsa_env.rotating_oracle_rate(n_channels, slots)
        mw.add(replica, "baseline_oracle", 0, summary["oracle_rate"])
    mw.flush()
    return summary


def _run_dsa_multi(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n_users", "n_channels", "capacities"})
    _check_keys("eval", cfg.eval, {"slots", "seed"})
    n_users = int(cfg.env.get("n_users", 2))
    n_channels = int(cfg.env.get("n_channels", 2))
    capacities = cfg.env.get("capacities")
    train = _build(dsa_env.DsaTrainConfig, cfg.train, "train")
    net = dsa_env.train_dsa_multi(n_users, n_channels, train,
                                  master_seed=cfg.seed, replica=replica,
                                  capacities=capacities)
    save_checkpoint(net, out / f"checkpoint-r{replica}.mlp")
    res = dsa_env.evaluate_dsa_multi(
        net, n_users, n_channels, train.history,
        int(cfg.eval.get("slots", 2000)), int(cfg.eval.get("seed", 7777)),
        capacities=capacities,
    )
    for u, rate in enumerate(res.success_rate):
        mw.add(replica, f"success_rate_user{u}", 0, rate)
    mw.add(replica, "utilization", 0, res.utilization)
    mw.add(replica, "log_utility", 0, res.log_utility)
    mw.flush()
    return {"min_success_rate": float(res.success_rate.min()),
            "utilization": res.utilization,
            "log_utility": res.log_utility}


def _run_coexist(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("eval", cfg.eval, {"slots", "seed"})
    env = _build(dsa_env.CoexistConfig, cfg.env, "env")
    train = _build(dsa_env.DsaTrainConfig, cfg.train, "train")
    net, _ = dsa_env.train_coexist_dqn(env, train, master_seed=cfg.seed,
                                       replica=replica)
    save_checkpoint(net, out / f"checkpoint-r{replica}.mlp")
    rate = dsa_env.evaluate_coexist_policy(
        net, env, train.history, int(cfg.eval.get("slots", 10_000)),
        int(cfg.eval.get("seed", 7777)),
    )
    oracle = dsa_env.coexist_oracle_rate(env)
    mw.add(replica, "eval_success_rate", 0, rate)
    mw.add(replica, "baseline_oracle", 0, oracle)
    mw.flush()
    return {"success_rate": rate, "oracle_rate": oracle}


def _power_env_config(env: dict) -> power_env.PowerEnvConfig:
    env = dict(env)
    if "geometry" in env:
        from .channels import InterferenceGeometry

        env["geometry"] = _build(InterferenceGeometry, env["geometry"],
                                 "env.geometry")
    return _build(power_env.PowerEnvConfig, env, "env")


def _run_power(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("eval", cfg.eval, {"slots", "seed", "episode_len"})
    env = _power_env_config(cfg.env)
    train = _build(power_env.PowerTrainConfig, cfg.train, "train")
    net, log_rows = power_env.train_power_dqn(env, train, master_seed=cfg.seed,
                                              replica=replica)
    save_checkpoint(net, out / f"checkpoint-r{replica}.mlp")
    write_training_log(log_rows, out / f"training-r{replica}.csv")
    ratio, dqn_rate, wmmse_rate, rows = power_env.evaluate_power_policy(
        net, env, seed=int(cfg.eval.get("seed", 7777)),
        slots=int(cfg.eval.get("slots", 500)),
        episode_len=int(cfg.eval.get("episode_len", 50)),
    )
    power_env.write_power_eval_csv(rows, out / f"power_eval-r{replica}.csv")
    mw.add(replica, "wmmse_ratio", 0, ratio)
    mw.add(replica, "dqn_rate", 0, dqn_rate)
    mw.add(replica, "wmmse_rate", 0, wmmse_rate)
    mw.flush()
    return {"wmmse_ratio": ratio, "dqn_rate": dqn_rate,
            "wmmse_rate": wmmse_rate}


def _v2x_env_config(env: dict) -> v2x_env.V2xConfig:
    env = dict(env)
    preset = env.pop("preset", None)
    if "highway" in env:
        from .channels import HighwayConfig

        env["highway"] = _build(HighwayConfig, env["highway"], "env.highway")
    if preset == "desk":
        return v2x_env.v2x_desk_config(**env)
    if preset is not None:
        raise ValueError(f"env: unknown preset {preset!r}; expected 'desk'")
    return _build(v2x_env.V2xConfig, env, "env")


def _run_v2x(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("eval", cfg.eval, {"episodes", "seed"})
    mode = ("marl_fingerprint" if cfg.kind == "v2x_marl"
            else "single_agent_turn_taking")
    env = _v2x_env_config(cfg.env)
    train = _build(v2x_env.V2xTrainConfig, cfg.train, "train")
    nets, log_rows = v2x_env.v2x_train(env, mode, train, master_seed=cfg.seed,
                                       replica=replica)
    for k, net in enumerate(nets):
        save_checkpoint(net, out / f"checkpoint-r{replica}-k{k}.mlp")
    write_training_log(log_rows, out / f"training-r{replica}.csv")

    use_fp = mode == "marl_fingerprint" and env.k_v2v > 1
    policy = v2x_env.greedy_v2x_policy(nets, use_fp=use_fp)
    res = v2x_env.evaluate_v2x(env, policy,
                               episodes=int(cfg.eval.get("episodes", 200)),
                               seed=int(cfg.eval.get("seed", 7777)))
    for name, value in res.items():
        mw.add(replica, name, 0, value)
    summary = dict(res)
    if "random" in cfg.baselines:
        rnd = v2x_env.evaluate_v2x(env, v2x_env.random_v2x_policy,
                                   episodes=int(cfg.eval.get("episodes", 200)),
                                   seed=int(cfg.eval.get("seed", 7777)))
        for name, value in rnd.items():
            mw.add(replica, f"random_{name}", 0, value)
        summary["random"] = rnd
    rows = v2x_env.rollout_v2x_trace(env, policy,
                                     seed=int(cfg.eval.get("seed", 7777)))
    v2x_env.write_v2x_trace_csv(rows, out / f"trace-r{replica}.csv")
    times = v2x_env.delivery_time_rows(env, policy,
                                       int(cfg.eval.get("episodes", 200)),
                                       seed=int(cfg.eval.get("seed", 7777)))
    v2x_env.write_delivery_times_csv(times,
                                     out / f"delivery_times-r{replica}.csv")
    mw.flush()
    return summary


def _run_supervised_power(cfg: RunConfig, replica: int, out: Path,
                          mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n_links"})
    _check_keys("train", cfg.train, {"n_samples", "hidden", "epochs", "lr",
                                     "batch"})
    _check_keys("eval", cfg.eval, {"n_samples", "seed"})
    n_links = int(cfg.env.get("n_links", 3))
    n_samples = int(cfg.train.get("n_samples", 10_000))
    ds = learnopt.gen_power_dataset(n_links, n_samples, seed=cfg.seed + replica)
    fit = learnopt.train_supervised(
        ds,
        hidden=tuple(cfg.train.get("hidden", (64, 64))),
        epochs=int(cfg.train.get("epochs", 40)),
        lr=float(cfg.train.get("lr", 1e-3)),
        batch=int(cfg.train.get("batch", 64)),
        seed=cfg.seed + replica,
    )
    save_checkpoint(fit.model, out / f"checkpoint-r{replica}.mlp")
    test = learnopt.sample_test_gains(n_links, int(cfg.eval.get("n_samples", 500)),
                                      seed=int(cfg.eval.get("seed", 999)))
    res = learnopt.eval_power_model(fit.model, test)
    rows = [("supervised", k, v) for k, v in sorted(res.items())]
    learnopt.write_pipeline_metrics_csv(
        rows, out / f"pipeline_metrics-r{replica}.csv"
    )
    for epoch, (tr, va) in enumerate(zip(fit.history["train_mse"],
                                         fit.history["val_mse"])):
        mw.add(replica, "train_mse", epoch, tr)
        mw.add(replica, "val_mse", epoch, va)
    mw.add(replica, "avg_rate_ratio", 0, res["avg_rate_ratio"])
    mw.flush()
    return res


def _run_unsupervised_power(cfg: RunConfig, replica: int, out: Path,
                            mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n_links"})
    _check_keys("train", cfg.train, {"hidden", "loss", "steps", "batch",
                                     "lr", "circuit_power"})
    _check_keys("eval", cfg.eval, {"n_samples", "seed"})
    n_links = int(cfg.env.get("n_links", 3))
    fit = learnopt.train_unsupervised_power(
        n_links,
        hidden=tuple(cfg.train.get("hidden", (64, 64))),
        loss=cfg.train.get("loss", "neg_spectral_efficiency"),
        steps=int(cfg.train.get("steps", 4000)),
        batch=int(cfg.train.get("batch", 32)),
        lr=float(cfg.train.get("lr", 1e-3)),
        seed=cfg.seed + replica,
        circuit_power=float(cfg.train.get("circuit_power", 0.0)),
    )
    save_checkpoint(fit.model, out / f"checkpoint-r{replica}.mlp")
    test = learnopt.sample_test_gains(n_links, int(cfg.eval.get("n_samples", 500)),
                                      seed=int(cfg.eval.get("seed", 999)))
    res = learnopt.eval_power_model(fit.model, test)
    res["trend_ok"] = learnopt.windowed_trend_ok(fit.history["loss"])
    rows = [("unsupervised", k, v) for k, v in sorted(res.items())]
    learnopt.write_pipeline_metrics_csv(
        rows, out / f"pipeline_metrics-r{replica}.csv"
    )
    for i in range(0, len(fit.history["loss"]), 100):
        mw.add(replica, "loss", i, fit.history["loss"][i])
    mw.add(replica, "avg_rate_ratio", 0, res["avg_rate_ratio"])
    mw.flush()
    return res


def _run_lsap(cfg: RunConfig, replica: int, out: Path, mw: MetricsWriter):
    _check_keys("env", cfg.env, {"n"})
    _check_keys("train", cfg.train, {"n_samples", "hidden", "epochs", "lr",
                                     "batch"})
    _check_keys("eval", cfg.eval, {"n_samples", "seed"})
    n = int(cfg.env.get("n", 4))
    n_samples = int(cfg.train.get("n_samples", 50_000))
    models, hist = learnopt.lsap_train(
        n, n_samples, seed=cfg.seed + replica,
        hidden=tuple(cfg.train.get("hidden", (64, 64))),
        epochs=int(cfg.train.get("epochs", 12)),
        lr=float(cfg.train.get("lr", 1e-3)),
        batch=int(cfg.train.get("batch", 64)),
    )
    for j, model in enumerate(models):
        save_checkpoint(model, out / f"checkpoint-r{replica}-j{j}.mlp")
    res = learnopt.lsap_accuracy(models,
                                 n_samples=int(cfg.eval.get("n_samples", 1000)),
                                 seed=int(cfg.eval.get("seed", 123)))
    rows = [("lsap", k, v) for k, v in sorted(res.items())
            if not k.endswith("_s_per_instance")]
    learnopt.write_pipeline_metrics_csv(
        rows, out / f"pipeline_metrics-r{replica}.csv"
    )
    mw.add(replica, "per_job_accuracy", 0, res["per_job_accuracy"])
    mw.add(replica, "exact_match", 0, res["exact_match"])
    for j, curve in enumerate(hist["val_accuracy"]):
        for epoch, acc in enumerate(curve):
            mw.add(replica, f"val_accuracy_j{j}", epoch, acc)
    mw.flush()
    return {k: v for k, v in res.items() if not k.endswith("_s_per_instance")}


_RUNNERS = {
    "bandit": _run_bandit,
    "dsa": _run_dsa,
    "dsa_multi": _run_dsa_multi,
    "coexist": _run_coexist,
    "power": _run_power,
    "v2x_turn_taking": _run_v2x,
    "v2x_marl": _run_v2x,
    "supervised_power": _run_supervised_power,
    "unsupervised_power": _run_unsupervised_power,
    "lsap": _run_lsap,
}


def _aggregate(summaries: list) -> dict:
    """Pool replica summaries: mean and (population) std per numeric key."""
    merged = {"replicas": summaries}
    keys = [k for k, v in summaries[0].items() if isinstance(v, (int, float))]
    if len(summaries) >= 1:
        merged["mean"] = {
            k: float(np.mean([s[k] for s in summaries])) for k in keys
        }
        merged["std"] = {
            k: float(np.std([s[k] for s in summaries])) for k in keys
        }
    return merged


def run_experiment(config, out=None) -> int:
    """Execute a config end to end. Returns a process-style exit status:
    0 ok, 1 numeric failure (partial artifacts plus a FAILED marker),
    2 invalid config. Wall-clock times go to a sidecar file so metrics
    stay byte-reproducible.
    """
    setup_logging()
    try:
        cfg = config if isinstance(config, RunConfig) else load_config(config)
    except (ValueError, OSError) as e:
        log.error("%s", e)
        print(e)
        return 2

    outdir = Path(out or cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, outdir / "config.yaml")
    metrics_path = outdir / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()  # reruns start clean, not appended
    mw = MetricsWriter(metrics_path, _run_id(cfg))

    t0 = time.perf_counter()
    summaries = []
    status = 0
    try:
        for replica in range(cfg.replicas):
            log.info("run %s replica %d", _run_id(cfg), replica)
            summaries.append(_RUNNERS[cfg.kind](cfg, replica, outdir, mw))
    except (ValueError, TypeError) as e:
        mw.close()
        log.error("%s", e)
        print(e)
        return 2
    except (RuntimeError, FloatingPointError) as e:
        (outdir / "FAILED").write_text(f"{e}\n")
        log.error("run failed: %s", e)
        status = 1
    finally:
        mw.close()
        sidecar = {"wall_clock_s": time.perf_counter() - t0}
        (outdir / "wallclock.json").write_text(json.dumps(sidecar) + "\n")

    if summaries:
        (outdir / "summary.json").write_text(
            json.dumps(_aggregate(summaries), sort_keys=True, indent=1,
                       default=float) + "\n"
        )
    return status


# ---------------------------------------------------------------------------
# Standalone evaluation of saved checkpoints


def _load_nets(paths) -> list:
    return [load_checkpoint(p) for p in paths]


def _check_width(net: Mlp, expected: int, what: str) -> None:
    if net.n_inputs != expected:
        raise ValueError(
            f"checkpoint input width {net.n_inputs} does not match "
            f"{what} observation width {expected}"
        )


def evaluate_policy(checkpoints, env_config: dict, episodes: int,
                    seed: int = 0) -> dict:
    """Greedy evaluation of saved checkpoints (or a named baseline).

    env_config holds {"kind": ..., then the env section of a run config}.
    checkpoints: path(s), or one of the baseline names "random" /
    "always_off" (v2x). Replica lists produce mean/std summaries.
    """
    kind = env_config["kind"]
    env = {k: v for k, v in env_config.items() if k != "kind"}

    if kind in ("v2x_marl", "v2x_turn_taking"):
        cfg = _v2x_env_config(env)
        if checkpoints == "random":
            return v2x_env.evaluate_v2x(cfg, v2x_env.random_v2x_policy,
                                        episodes, seed)
        if checkpoints == "always_off":
            off = len(cfg.power_levels_dbm) - 1

            def policy(world, obs, rng):
                return np.stack([np.zeros(cfg.k_v2v, dtype=int),
                                 np.full(cfg.k_v2v, off)], axis=1)

            return v2x_env.evaluate_v2x(cfg, policy, episodes, seed)
        groups = (checkpoints if checkpoints
                  and isinstance(checkpoints[0], (list, tuple))
                  else [checkpoints])
        use_fp = kind == "v2x_marl" and cfg.k_v2v > 1
        per_replica = []
        for group in groups:
            nets = _load_nets(group)
            expected = cfg.obs_width + (2 if use_fp else 0)
            for net in nets:
                _check_width(net, expected, "v2x")
            policy = v2x_env.greedy_v2x_policy(nets, use_fp=use_fp)
            per_replica.append(v2x_env.evaluate_v2x(cfg, policy, episodes, seed))
        return _aggregate(per_replica)

    if kind == "power":
        cfg = _power_env_config(env)
        paths = [checkpoints] if isinstance(checkpoints, (str, Path)) else checkpoints
        per_replica = []
        for p in paths:
            net = load_checkpoint(p)
            _check_width(net, cfg.obs_width, "power")
            ratio, dqn_rate, wmmse_rate, _ = power_env.evaluate_power_policy(
                net, cfg, seed=seed, slots=episodes
            )
            per_replica.append({"wmmse_ratio": ratio, "dqn_rate": dqn_rate,
                                "wmmse_rate": wmmse_rate})
        return _aggregate(per_replica)

    if kind == "dsa":
        n_channels = int(env.get("n_channels", 4))
        world = env.get("world", "rotating")
        history = int(env.get("history", 8))
        if checkpoints == "random":
            rate = dsa_env.random_dsa_rate(n_channels, world, episodes, seed)
            return {"success_rate": rate}
        paths = [checkpoints] if isinstance(checkpoints, (str, Path)) else checkpoints
        per_replica = []
        for p in paths:
            net = load_checkpoint(p)
            expected = dsa_env.HistoryEncoder(history, n_channels).width
            _check_width(net, expected, "dsa")
            per_replica.append({"success_rate": dsa_env.evaluate_dsa_policy(
                net, n_channels, world, history, episodes, seed)})
        return _aggregate(per_replica)

    raise ValueError(f"evaluate_policy does not handle kind {kind!r}")

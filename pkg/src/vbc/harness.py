"""Seeded experiment runner: per-seed artifact directories and aggregation.

Every run writes its manifest before training starts, so a crashed run
still documents what it was. A manifest plus the package code is enough to
reproduce a run bit for bit: the run seed drives the network init, the
exploration draws, the replay sampling and the environment layout, and
metric floats are written with their shortest round-trip representation.
Aggregation is a pure function of the per-seed metrics.csv files.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .envs import GridConfig, make_env
from .protocol import CommConfig
from .trainer import EVAL_MODES, METHODS, TrainConfig, Trainer, TrainDiverged

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
COMMLOG_NAME = "commlog.jsonl"
CHECKPOINT_NAME = "checkpoint.json"

# two-sided 95% Student-t critical values by degrees of freedom
T_TABLE = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160,
    14: 2.145, 15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093,
    20: 2.086, 21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060,
    26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}


def t_critical(df: int) -> float:
    if df < 1:
        raise ValueError("need at least one degree of freedom")
    return T_TABLE.get(df, 1.960)


@dataclass
class ExperimentSpec:
    env_name: str
    grid: GridConfig
    method: str
    train: TrainConfig = field(default_factory=TrainConfig)
    comm: CommConfig = field(default_factory=CommConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    episodes: int = 2000
    eval_episodes: int = 20
    checkpoint_period: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seeds list must be non-empty")
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be >= 1")
        if self.checkpoint_period < 1:
            raise ValueError("checkpoint_period must be >= 1")


@dataclass
class RunSummary:
    episodes: list          # checkpoint episode numbers
    mean: dict              # column -> per-checkpoint mean over seeds
    ci: Optional[dict]      # column -> 95% CI half-widths; None with 1 seed
    final_beta: float
    final_msg_variance: float
    seeds_ok: list
    seeds_failed: list
    run_dirs: list

    def final(self, column: str) -> float:
        return self.mean[column][-1]

    def final_ci(self, column: str) -> Optional[float]:
        return self.ci[column][-1] if self.ci is not None else None


def spec_to_manifest(spec: ExperimentSpec, seed: int) -> dict:
    grid = replace(spec.grid, seed=seed)
    return {
        "version": __version__,
        "env": {"name": spec.env_name, "grid": asdict(grid)},
        "method": spec.method,
        "train": asdict(spec.train),
        "comm": {"delta1": spec.comm.delta1, "delta2": spec.comm.delta2},
        "seed": seed,
        "episodes": spec.episodes,
        "eval_episodes": spec.eval_episodes,
        "checkpoint_period": spec.checkpoint_period,
    }


def manifest_to_spec(manifest: dict) -> tuple[ExperimentSpec, int]:
    grid = GridConfig(**manifest["env"]["grid"])
    spec = ExperimentSpec(
        env_name=manifest["env"]["name"],
        grid=grid,
        method=manifest["method"],
        train=TrainConfig(**manifest["train"]),
        comm=CommConfig(**manifest["comm"]),
        seeds=(manifest["seed"],),
        episodes=manifest["episodes"],
        eval_episodes=manifest["eval_episodes"],
        checkpoint_period=manifest["checkpoint_period"],
    )
    return spec, manifest["seed"]


def write_metrics(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {k: (int(v) if k == "episode" else float(v))
                   for k, v in raw.items()}
            rows.append(row)
    return rows


def run_single(spec: ExperimentSpec, seed: int, run_dir) -> dict:
    """Train one seed; writes manifest, metrics, final comm log, checkpoint.

    The manifest goes to disk before training so an aborted run still
    records its configuration. The metrics rows come from the trainer's
    periodic checkpoints; when the episode budget does not land on a
    checkpoint, one extra final evaluation is appended. The comm log traces
    a separate post-training evaluation.
    """
    os.makedirs(run_dir, exist_ok=True)
    manifest = spec_to_manifest(spec, seed)
    with open(os.path.join(run_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)

    env = make_env(spec.env_name, replace(spec.grid, seed=seed))
    trainer = Trainer(env, spec.method, spec.train, seed, comm=spec.comm,
                      eval_episodes=spec.eval_episodes,
                      checkpoint_period=spec.checkpoint_period)
    rows = trainer.run(spec.episodes)

    gated = trainer.model.comm and spec.method != "fc"
    stats, logs = trainer.evaluate(spec.eval_episodes, collect_log=gated)
    if not rows or rows[-1]["episode"] != spec.episodes:
        rows.append(trainer.metrics_row(spec.episodes, stats))

    write_metrics(rows, os.path.join(run_dir, METRICS_NAME))
    with open(os.path.join(run_dir, COMMLOG_NAME), "w") as fh:
        for k, log in enumerate(logs):
            log.dump_jsonl(fh, episode=k)
    trainer.model.save(os.path.join(run_dir, CHECKPOINT_NAME))
    return rows[-1]


def rerun_from_manifest(manifest_path, run_dir) -> dict:
    """Reproduce a recorded run into a fresh directory."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    spec, seed = manifest_to_spec(manifest)
    return run_single(spec, seed, run_dir)


def aggregate(run_dirs: list) -> RunSummary:
    """Combine per-seed metrics.csv files into means and 95% intervals."""
    if not run_dirs:
        raise ValueError("nothing to aggregate")
    per_seed = [read_metrics(os.path.join(d, METRICS_NAME)) for d in run_dirs]
    episodes = [row["episode"] for row in per_seed[0]]
    columns = [c for c in per_seed[0][0] if c != "episode"]
    for rows in per_seed[1:]:
        if [row["episode"] for row in rows] != episodes:
            raise ValueError("runs have mismatched checkpoint schedules")

    n = len(per_seed)
    mean: dict = {c: [] for c in columns}
    ci: Optional[dict] = {c: [] for c in columns} if n >= 2 else None
    for idx in range(len(episodes)):
        for c in columns:
            vals = np.array([rows[idx][c] for rows in per_seed])
            mean[c].append(float(vals.mean()))
            if ci is not None:
                half = t_critical(n - 1) * vals.std(ddof=1) / np.sqrt(n)
                ci[c].append(float(half))
    return RunSummary(
        episodes=episodes, mean=mean, ci=ci,
        final_beta=mean["beta"][-1],
        final_msg_variance=mean["mean_msg_variance"][-1],
        seeds_ok=[], seeds_failed=[], run_dirs=list(run_dirs))


def seed_dir(out_dir, seed: int) -> str:
    return os.path.join(out_dir, f"seed_{seed}")


def run_experiment(spec: ExperimentSpec, out_dir, parallelism: int = 1,
                   figures: bool = True) -> RunSummary:
    """Train every seed of the spec and aggregate the results.

    A seed whose run aborts (divergence, numeric failure) is recorded as
    failed while the remaining seeds proceed; the summary aggregates the
    survivors. All seeds failing is an error.
    """
    os.makedirs(out_dir, exist_ok=True)
    seeds_ok, seeds_failed = [], []
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = {seed: pool.submit(run_single, spec, seed,
                                         seed_dir(out_dir, seed))
                       for seed in spec.seeds}
            for seed, fut in futures.items():
                try:
                    fut.result()
                    seeds_ok.append(seed)
                except (TrainDiverged, FloatingPointError):
                    seeds_failed.append(seed)
    else:
        for seed in spec.seeds:
            try:
                run_single(spec, seed, seed_dir(out_dir, seed))
                seeds_ok.append(seed)
            except (TrainDiverged, FloatingPointError):
                seeds_failed.append(seed)
    if not seeds_ok:
        raise RuntimeError(f"all {len(spec.seeds)} seeds failed")

    summary = aggregate([seed_dir(out_dir, s) for s in seeds_ok])
    summary.seeds_ok = seeds_ok
    summary.seeds_failed = seeds_failed
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(asdict(summary), fh, indent=2)
    if figures:
        from .figures import metric_curves
        label = spec.method
        for metric in ("mean_eval_reward", "beta"):
            metric_curves({label: summary}, metric,
                          os.path.join(out_dir, f"{metric}.png"))
    return summary


def sweep(specs: list[ExperimentSpec], out_dir, parallelism: int = 1,
          figures: bool = True) -> list[dict]:
    """Run several specs on one environment; one comparison row per spec.

    Rows keep the spec order. Mixing environments in one sweep is an error
    because the compared metrics would not be commensurable.
    """
    if not specs:
        return []
    env_key = (specs[0].env_name, asdict(specs[0].grid))
    for spec in specs[1:]:
        if (spec.env_name, asdict(spec.grid)) != env_key:
            raise ValueError("sweep specs must share one environment")

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    summaries = {}
    for i, spec in enumerate(specs):
        sub = os.path.join(out_dir, f"{i:02d}_{spec.method}")
        summary = run_experiment(spec, sub, parallelism=parallelism,
                                 figures=False)
        label = f"{i:02d}_{spec.method}"
        summaries[label] = summary
        row = {"method": spec.method,
               "mean_eval_reward": summary.final("mean_eval_reward"),
               "ci95": summary.final_ci("mean_eval_reward"),
               "beta": summary.final_beta,
               "mean_msg_variance": summary.final_msg_variance,
               "seeds_failed": len(summary.seeds_failed)}
        rows.append(row)

    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if figures:
        from .figures import comparison_chart, metric_curves
        metric_curves(summaries, "mean_eval_reward",
                      os.path.join(out_dir, "mean_eval_reward.png"))
        comparison_chart(rows, "mean_eval_reward",
                         os.path.join(out_dir, "comparison.png"))
    return rows


def gate_sweep(trainer: Trainer, delta1_values, delta2_values,
               episodes: int = 20, eval_seed: int = 0) -> list[dict]:
    """Evaluate a trained model over a grid of gate thresholds.

    The environment is re-seeded before every grid point so each threshold
    pair sees the same evaluation episodes; greedy execution adds no other
    randomness. Rows are ordered by the input grids (delta1 outer).
    """
    if EVAL_MODES[trainer.method] != "eval-gated":
        raise ValueError("gate sweep needs a method that gates at execution")
    original = trainer.comm_cfg
    rows = []
    try:
        for d1 in delta1_values:
            for d2 in delta2_values:
                trainer.comm_cfg = CommConfig(delta1=float(d1),
                                              delta2=float(d2))
                trainer.env.rng = np.random.default_rng(eval_seed)
                stats, _ = trainer.evaluate(episodes)
                row = {"delta1": float(d1), "delta2": float(d2)}
                row.update(stats)
                rows.append(row)
    finally:
        trainer.comm_cfg = original
    return rows


def _fd_wrt(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() in every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(1e-6, np.abs(analytic) + np.abs(numeric))
    return float((num / den).max()) if num.size else 0.0


def _check_dense(rng) -> float:
    from .nn import Dense, max_relative_error, ParamBlock
    layer = Dense(3, 4, "leaky_relu", "d")
    layer.init_params(rng)
    x = rng.normal(size=(5, 3))
    block = ParamBlock(layer.params())

    def loss():
        return float((layer.forward(x, cache=False) ** 2).sum())

    block.zero_grad()
    out = layer.forward(x)
    dx = layer.backward(2.0 * out)
    return max(max_relative_error(loss, block), _rel_err(dx, _fd_wrt(loss, x)))


def _check_gru(rng) -> float:
    from .nn import GruCell, max_relative_error, ParamBlock
    cell = GruCell(3, 4, "g")
    cell.init_params(rng)
    x = rng.normal(size=(5, 3))
    h = rng.normal(size=(5, 4))
    block = ParamBlock(cell.params())

    def loss():
        return float((cell.forward(x, h, cache=False) ** 2).sum())

    block.zero_grad()
    out = cell.forward(x, h)
    dx, dh = cell.backward(2.0 * out)
    err = max_relative_error(loss, block)
    err = max(err, _rel_err(dx, _fd_wrt(loss, x)))
    return max(err, _rel_err(dh, _fd_wrt(loss, h)))


def _check_encoder(rng) -> float:
    from .agent import Encoder
    from .nn import max_relative_error, ParamBlock
    enc = Encoder(4, 3, hidden=5)
    enc.init_params(rng)
    c = rng.normal(size=(6, 4))
    block = ParamBlock(enc.params())

    def loss():
        return float((enc.forward(c, cache=False) ** 2).sum())

    block.zero_grad()
    out = enc.forward(c)
    dc = enc.backward(2.0 * out)
    return max(max_relative_error(loss, block), _rel_err(dc, _fd_wrt(loss, c)))


def _check_agent(rng) -> float:
    from .agent import AgentNet
    from .nn import max_relative_error, ParamBlock
    net = AgentNet(3, 2, d_h=4)
    net.init_params(rng)
    obs = rng.normal(size=(2, 3, 3))    # two timesteps, batch of three
    block = ParamBlock(net.params())

    def loss():
        h = net.initial_hidden(3)
        total = 0.0
        for t in range(2):
            q, _, h = net.step(obs[t], h, cache=False)
            total += float((q ** 2).sum())
        return total

    block.zero_grad()
    h = net.initial_hidden(3)
    qs = []
    for t in range(2):
        q, _, h = net.step(obs[t], h)
        qs.append(q)
    dh = np.zeros_like(h)
    for t in (1, 0):
        dh = net.backward_step(2.0 * qs[t], np.zeros_like(dh), dh)
    return max_relative_error(loss, block)


def _check_vdn(rng) -> float:
    from .mixer import VdnMixer
    mixer = VdnMixer(3)
    q = rng.normal(size=(7, 3))

    def loss():
        return float((mixer.forward(q, cache=False) ** 2).sum())

    out = mixer.forward(q)
    dq, _ = mixer.backward(2.0 * out)
    return _rel_err(dq, _fd_wrt(loss, q))


def _check_qmix(rng) -> float:
    from .mixer import QmixMixer
    from .nn import max_relative_error, ParamBlock
    mixer = QmixMixer(3, 4, d_mix=5)
    mixer.init_params(rng)
    q = rng.normal(size=(6, 3))
    s = rng.normal(size=(6, 4))
    block = ParamBlock(mixer.params())

    def loss():
        return float((mixer.forward(q, s, cache=False) ** 2).sum())

    block.zero_grad()
    out = mixer.forward(q, s)
    dq, ds = mixer.backward(2.0 * out)
    err = max_relative_error(loss, block)
    err = max(err, _rel_err(dq, _fd_wrt(loss, q)))
    return max(err, _rel_err(ds, _fd_wrt(loss, s)))


def _check_loss(rng, method: str) -> float:
    from .nn import max_relative_error
    from .trainer import compute_loss, EpisodeRecord, Model
    cfg = TrainConfig(gamma=0.9, lam=0.5, batch_size=1, buffer_capacity=1,
                      d_h=4, enc_hidden=3, d_mix=3)
    model = Model(3, 2, 2, 2, cfg, method, rng=rng)
    target = Model(3, 2, 2, 2, cfg, method, rng=rng)
    episode = EpisodeRecord(
        obs=rng.normal(size=(2, 2, 3)),
        state=rng.normal(size=(2, 2)),
        actions=rng.integers(2, size=(2, 2)),
        rewards=rng.normal(size=2))

    def loss():
        return compute_loss(model, target, [episode], cfg,
                            backward=False)[0]

    model.block.zero_grad()
    compute_loss(model, target, [episode], cfg)
    return max_relative_error(loss, model.block)


GRADCHECK_COMPONENTS = {
    "dense": _check_dense,
    "gru": _check_gru,
    "encoder": _check_encoder,
    "agent": _check_agent,
    "mixer-vdn": _check_vdn,
    "mixer-qmix": _check_qmix,
    "loss-vdn": lambda rng: _check_loss(rng, "vbc-vdn"),
    "loss-qmix": lambda rng: _check_loss(rng, "vbc-qmix"),
}


def gradcheck_report(n_seeds: int = 10, tol: float = 1e-4) -> list[dict]:
    """Finite-difference check of every backward pass, one row per
    component and seed: analytic against central differences on both
    parameters and inputs."""
    rows = []
    for name, check in GRADCHECK_COMPONENTS.items():
        for seed in range(n_seeds):
            err = check(np.random.default_rng(seed))
            rows.append({"component": name, "seed": seed,
                         "max_rel_error": err, "ok": bool(err < tol)})
    return rows


def select_gates(rows: list[dict], max_beta: float) -> dict:
    """Pick the best-reward row within the overhead budget.

    Falls back to the lowest-overhead row when nothing fits the budget;
    ties keep the earliest row.
    """
    if not rows:
        raise ValueError("no sweep rows to select from")
    within = [r for r in rows if r["beta"] <= max_beta]
    if within:
        return max(within, key=lambda r: r["mean_eval_reward"])
    return min(rows, key=lambda r: r["beta"])

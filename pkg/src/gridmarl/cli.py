"""Batch command-line front end.

Every run writes into its own directory::

    manifest.json     command, spec source and hash, resolved configs, seed,
                      artifact paths, wall-clock timings
    metrics.jsonl     one JSON object per episode, appended and flushed as it runs
    checkpoints/      periodic checkpoints (train, adapt)
    final.npz         last checkpoint (train, adapt)
    report.txt/.json  evaluation summary (eval)
    traces.jsonl      one record per (episode, step, agent): action index,
                      setpoint, DG voltage, reward, done (eval)

``--config`` accepts a YAML/JSON file with optional ``train``, ``episode``,
``sim`` and ``run`` sections, or a previous run's ``manifest.json``, which
replays that run. Explicit command-line flags override file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .agent import TrainConfig
from .env import EpisodeConfig, NormalizationStats, fit_normalization
from .gradcheck import run_suite
from .sim import SimConfig
from .topology import SpecError, load_spec
from .training import Trainer, adapt, evaluate, load_agents

log = logging.getLogger("gridmarl")

OUT_ROOT_ENV = "GRIDMARL_OUT_ROOT"
RUN_DEFAULTS = {"episodes": 10000, "checkpoint_every": 500, "norm_episodes": 200,
                "eval_episodes": 20, "load_level": 0.10, "checkpoint": None,
                "trace_episode": 0}

# CLI flag -> (section, key); section "run" holds harness-only settings.
OVERRIDES = {
    "episodes": ("run", "episodes"), "checkpoint_every": ("run", "checkpoint_every"),
    "norm_episodes": ("run", "norm_episodes"), "eval_episodes": ("run", "eval_episodes"),
    "load_level": ("run", "load_level"), "checkpoint": ("run", "checkpoint"),
    "alpha": ("train", "alpha"), "rho": ("train", "rho"), "gamma": ("train", "gamma"),
    "distance_threshold": ("train", "distance_threshold"),
    "smoothing_window": ("train", "smoothing_window"),
    "actor_lr": ("train", "actor_lr"), "critic_lr": ("train", "critic_lr"),
    "entropy_coef": ("train", "entropy_coef"), "message_gradient": ("train", "message_gradient"),
    "critic_target": ("train", "critic_target"),
    "horizon": ("episode", "horizon"), "episode_load_level": ("episode", "episode_load_level"),
}


class UsageError(Exception):
    """Bad paths or configuration; reported with exit status 2."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        text = path.read_text()
        # PyYAML reads exponent floats without a dot ("1e-08") as strings.
        doc = (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(doc) - {"train", "episode", "sim", "run", "command", "spec", "seed",
                          "artifacts", "timings", "provenance", "version", "status"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return doc


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    bad = set(values) - names
    if bad:
        raise UsageError(f"config section '{section}': unknown keys {sorted(bad)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section '{section}': {exc}") from exc


def resolve(args) -> dict:
    """Merge defaults, the config file and explicit flags into one run description."""
    doc = _read_config(args.config) if args.config else {}
    if doc.get("command") and doc["command"] != args.command:
        raise UsageError(f"manifest is for '{doc['command']}', not '{args.command}'")
    spec_src = args.spec or (doc.get("spec") or {}).get("source")
    if spec_src is not None and Path(spec_src).is_file():
        spec_src = str(Path(spec_src).resolve())
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    sections = {k: dict(doc.get(k) or {}) for k in ("train", "episode", "sim", "run")}
    run = {**RUN_DEFAULTS, **sections["run"]}
    if getattr(args, "ia2c", False):
        sections["train"].update(alpha=0.0, comm_enabled=False, critic_neighbor_actions=False)
    for flag, (section, key) in OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            (run if section == "run" else sections[section])[key] = val
    if run["checkpoint"]:
        run["checkpoint"] = str(Path(run["checkpoint"]).resolve())
    episode = _build(EpisodeConfig, sections["episode"], "episode")
    train_values = sections["train"]
    train_values.setdefault("batch_size", episode.horizon)
    train = _build(TrainConfig, train_values, "train")
    sim = _build(SimConfig, sections["sim"], "sim")
    return {"spec_source": spec_src, "seed": int(seed), "train": train, "episode": episode,
            "sim": sim, "run": run, "expected_spec_hash": (doc.get("spec") or {}).get("sha256"),
            "expected_checkpoint_hash": (doc.get("provenance") or {}).get("checkpoint_sha256")}


def _load_spec(cfg):
    if cfg["spec_source"] is None:
        raise UsageError("--spec is required")
    try:
        spec = load_spec(cfg["spec_source"])
    except (SpecError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    want = cfg["expected_spec_hash"]
    if want and want != spec.digest():
        raise UsageError(f"spec '{cfg['spec_source']}' has changed since the manifest was written")
    return spec


def out_dir(args, command: str, label: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        stem = f"{command}-{label}-s{args.seed if args.seed is not None else 'cfg'}"
        k = 0
        while (root / f"{stem}-{k:03d}").exists():
            k += 1
        path = root / f"{stem}-{k:03d}"
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"output directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


class RunDir:
    """Manifest and append-only metric log of one command."""

    def __init__(self, path: Path, command: str, cfg: dict, spec=None, extra=None):
        self.path = path
        self.t0 = time.time()
        self.manifest = {
            "version": __version__,
            "command": command,
            "seed": cfg["seed"],
            "spec": ({"source": str(cfg["spec_source"]), "sha256": spec.digest(), "name": spec.name}
                     if spec is not None else None),
            "train": asdict(cfg["train"]),
            "episode": asdict(cfg["episode"]),
            "sim": asdict(cfg["sim"]),
            "run": cfg["run"],
            "artifacts": {},
            "timings": {},
            "status": "running",
            **(extra or {}),
        }
        self.write_manifest()
        self._metrics = open(path / "metrics.jsonl", "a")

    def write_manifest(self):
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path / "manifest.json")

    def log_metrics(self, row: dict):
        self._metrics.write(json.dumps(row, sort_keys=True) + "\n")
        self._metrics.flush()

    def finish(self, status="completed", **artifacts):
        self._metrics.close()
        self.manifest["artifacts"].update({k: str(v) for k, v in artifacts.items()})
        self.manifest["artifacts"]["metrics"] = "metrics.jsonl"
        self.manifest["timings"]["wall_seconds"] = round(time.time() - self.t0, 3)
        self.manifest["status"] = status
        self.write_manifest()


def _train_loop(trainer: Trainer, run: RunDir, n_episodes: int, every: int):
    t0 = time.time()
    ckpt_dir = run.path / "checkpoints"
    metrics, ckpts = trainer.train(n_episodes, on_episode=run.log_metrics,
                                   checkpoint_dir=ckpt_dir, checkpoint_every=every)
    final = trainer.save(run.path / "final.npz")
    run.manifest["timings"]["train_seconds"] = round(time.time() - t0, 3)
    run.finish(final="final.npz",
               checkpoints=",".join(str(p.relative_to(run.path)) for p in ckpts))
    mean_last = np.mean([m["mean_step_reward"] for m in metrics[-100:]])
    print(f"trained {len(metrics)} episodes; last-100 mean step reward {mean_last:.4f}; "
          f"run directory {run.path}")


def cmd_train(args) -> int:
    cfg = resolve(args)
    spec = _load_spec(cfg)
    run = RunDir(out_dir(args, "train", spec.name), "train", cfg, spec)
    t0 = time.time()
    if cfg["run"]["norm_episodes"] > 0:
        norm = fit_normalization(spec, cfg["run"]["norm_episodes"], seed=cfg["seed"],
                                 episode=cfg["episode"], sim_config=cfg["sim"])
    else:
        norm = NormalizationStats.identity()
    run.manifest["timings"]["normalization_seconds"] = round(time.time() - t0, 3)
    trainer = Trainer(spec, cfg["train"], cfg["seed"], norm, cfg["episode"], cfg["sim"])
    _train_loop(trainer, run, cfg["run"]["episodes"], cfg["run"]["checkpoint_every"])
    return 0


def cmd_adapt(args) -> int:
    cfg = resolve(args)
    spec = _load_spec(cfg)
    ckpt = cfg["run"]["checkpoint"]
    if not ckpt or not Path(ckpt).is_file():
        raise UsageError(f"base checkpoint not found: {ckpt}")
    digest = _sha256(ckpt)
    if cfg["expected_checkpoint_hash"] and cfg["expected_checkpoint_hash"] != digest:
        raise UsageError(f"checkpoint {ckpt} has changed since the manifest was written")
    warm = adapt(ckpt, spec, seed=cfg["seed"], config=cfg["train"])
    run = RunDir(out_dir(args, "adapt", spec.name), "adapt", cfg, spec, extra={
        "provenance": {"checkpoint": str(ckpt), "checkpoint_sha256": digest,
                       **warm.summary()}})
    trainer = Trainer(spec, cfg["train"], cfg["seed"], warm.norm, cfg["episode"], cfg["sim"],
                      agents=warm.agents, ret_stats=warm.ret_stats)
    print(f"warm start: kept {warm.kept}, reinitialised message/critic layers of "
          f"{warm.partial}, new agents {warm.new}")
    _train_loop(trainer, run, cfg["run"]["episodes"], cfg["run"]["checkpoint_every"])
    return 0


def cmd_eval(args) -> int:
    cfg = resolve(args)
    ckpt = cfg["run"]["checkpoint"]
    if not ckpt or not Path(ckpt).is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    agents, meta = load_agents(ckpt)
    if cfg["spec_source"] is None:
        cfg["spec_source"] = meta["spec_name"]
        spec = load_spec(meta["spec"])
    else:
        spec = _load_spec(cfg)
    if [d.bus for d in spec.dgs] != meta["dg_buses"]:
        raise UsageError("checkpoint agents do not match the grid's DGs; use adapt")
    train_cfg = TrainConfig(**meta["train_config"])
    run = RunDir(out_dir(args, "eval", spec.name), "eval", cfg, spec,
                 extra={"provenance": {"checkpoint": str(ckpt), "checkpoint_sha256": _sha256(ckpt)}})
    n_eps = cfg["run"]["eval_episodes"]
    res = evaluate(agents, spec, n_eps, cfg["run"]["load_level"], cfg["seed"], train_cfg,
                   NormalizationStats.from_dict(meta["normalization"]),
                   step_load_level=cfg["episode"].step_load_level,
                   horizon=cfg["episode"].horizon, sim_config=cfg["sim"], keep_records=True)
    records = res.pop("records")
    with open(run.path / "traces.jsonl", "w") as fh:
        for k, rec in enumerate(records):
            run.log_metrics({"episode": k, "mean_step_reward": float(rec.rewards.mean()),
                             "return": float(rec.rewards.sum(axis=0).mean()),
                             "diverged": bool(rec.diverged)})
            for row in trace_records(k, rec):
                fh.write(json.dumps(row) + "\n")
    (run.path / "report.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    text = format_report(res)
    (run.path / "report.txt").write_text(text)
    print(text, end="")
    run.finish(report="report.json", traces="traces.jsonl")
    return 0


def trace_records(episode: int, rec):
    """One record per (step, agent); a diverged voltage is written as null."""
    T = rec.rewards.shape[0]
    for t in range(T):
        for i, v in enumerate(rec.voltages[t]):
            yield {"episode": episode, "step": t + 1, "agent": i,
                   "action_index": int(rec.actions[t, i]),
                   "setpoint": float(rec.setpoints[t, i]),
                   "v": float(v) if np.isfinite(v) else None,
                   "reward": float(rec.rewards[t, i]), "done": t == T - 1}


def format_report(res: dict) -> str:
    z = res["zone_occupancy"]
    return (f"episodes            {res['episodes']}\n"
            f"load disturbance    {res['load_level']:.2f}\n"
            f"mean step reward    {res['mean_step_reward']:.5f}\n"
            f"mean episode return {res['mean_episode_return']:.5f}\n"
            f"zone occupancy      normal {z['normal']:.3f}  violation {z['violation']:.3f}  "
            f"diverged {z['diverged']:.3f}\n"
            f"divergent episodes  {res['divergent_episodes']}\n"
            f"decision time       {res['decision_time_ms']:.4f} ms per agent\n")


def trailing_mean(x, window: int = 100) -> np.ndarray:
    """Row ``k`` is the mean of ``x[max(0, k - window + 1) .. k]``."""
    x = np.asarray(x, float)
    c = np.concatenate(([0.0], np.cumsum(x)))
    k = np.arange(len(x))
    lo = np.maximum(0, k - window + 1)
    return (c[k + 1] - c[lo]) / (k + 1 - lo)


def cmd_export(args) -> int:
    src = Path(args.run)
    metrics_path = src / "metrics.jsonl" if src.is_dir() else src
    if not metrics_path.is_file():
        raise UsageError(f"metric log not found: {metrics_path}")
    rows = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    if not rows:
        raise UsageError(f"metric log {metrics_path} is empty")
    dest = Path(args.out) if args.out else metrics_path.parent / "export"
    dest.mkdir(parents=True, exist_ok=True)
    r = [row["mean_step_reward"] for row in rows]
    sm = trailing_mean(r, args.window)
    with open(dest / "rewards.tsv", "w") as fh:
        fh.write(f"episode\tmean_step_reward\ttrailing{args.window}\n")
        for row, a, b in zip(rows, r, sm):
            fh.write(f"{row['episode']}\t{float(a)!r}\t{float(b)!r}\n")
    written = [dest / "rewards.tsv"]
    traces = metrics_path.parent / "traces.jsonl"
    if traces.is_file():
        recs = [r for r in map(json.loads, traces.read_text().splitlines())
                if r["episode"] == args.trace_episode]
        if not recs:
            raise UsageError(f"no evaluation episode {args.trace_episode} in {traces}")
        n_steps = max(r["step"] for r in recs)
        n_agents = max(r["agent"] for r in recs) + 1
        v = np.full((n_steps, n_agents), np.nan)
        for r in recs:
            v[r["step"] - 1, r["agent"]] = np.nan if r["v"] is None else r["v"]
        path = dest / f"voltages_ep{args.trace_episode}.tsv"
        with open(path, "w") as fh:
            fh.write("step\t" + "\t".join(f"dg{i}" for i in range(n_agents)) + "\n")
            for t, vt in enumerate(v):
                fh.write(f"{t + 1}\t" + "\t".join(repr(float(x)) for x in vt) + "\n")
        written.append(path)
    for p in written:
        print(p)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.samples, seed=args.seed or 0)
    for name, rep in results:
        print(f"{name:22s} {rep}")
    ok = all(rep.passed for _, rep in results)
    print("all gradient checks passed" if ok else "GRADIENT CHECK FAILED")
    return 0 if ok else 1


def cmd_validate_spec(args) -> int:
    if not args.spec:
        raise UsageError("--spec is required")
    try:
        spec = load_spec(args.spec)
    except (SpecError, FileNotFoundError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(f"valid: {spec.name}: {spec.n_bus} buses, {len(spec.lines)} lines, "
          f"{len(spec.loads)} loads, {spec.n_dg} DGs, {len(spec.comm_edges)} comm edges; "
          f"sha256 {spec.digest()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="grid file or bundled fixture name")
    common.add_argument("--seed", type=int, help="base seed (default 0)")
    common.add_argument("--out", help=f"output directory (default under ${OUT_ROOT_ENV} or ./runs)")
    common.add_argument("--config", help="YAML/JSON config or a manifest.json to replay")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gridmarl",
                                description="Multi-agent voltage control laboratory")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(sp):
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--checkpoint-every", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--distance-threshold", type=int)
        sp.add_argument("--smoothing-window", type=int)
        sp.add_argument("--actor-lr", type=float)
        sp.add_argument("--critic-lr", type=float)
        sp.add_argument("--entropy-coef", type=float)
        sp.add_argument("--message-gradient", choices=("stop", "flow"))
        sp.add_argument("--critic-target", choices=("mc", "td0"))
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--episode-load-level", type=float)
        sp.add_argument("--ia2c", action="store_true", help="independent agents baseline")

    sp = sub.add_parser("train", parents=[common], help="train agents from scratch")
    training_flags(sp)
    sp.add_argument("--norm-episodes", type=int, help="random-policy episodes for normalisation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", parents=[common], help="warm-start from a checkpoint and train")
    training_flags(sp)
    sp.add_argument("--checkpoint", help="base checkpoint")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", parents=[common], help="greedy evaluation of a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--episodes", dest="eval_episodes", type=int)
    sp.add_argument("--load-level", type=float, help="episode load disturbance (default 0.10)")
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", parents=[common], help="write plot-ready TSV files")
    sp.add_argument("--run", required=True, help="run directory or metrics.jsonl")
    sp.add_argument("--window", type=int, default=100)
    sp.add_argument("--trace-episode", type=int, default=0)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sp.add_argument("--samples", type=int, default=200)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("validate-spec", parents=[common], help="check a grid description")
    sp.set_defaults(func=cmd_validate_spec)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SpecError) as exc:
        print(f"gridmarl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: every experiment stage as a subcommand.

Each run validates its config strictly, verifies the digests of upstream
artifacts before touching them, and leaves two bookkeeping files next to its
outputs: ``resolved_config.json`` (the fully defaulted config that actually
ran) and ``manifest.json`` (command, seed, and sha256 digests of every input
and output file). Exit codes: 0 success, 2 config error, 3 integrity error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import multiprocessing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .backbone import init_params, predict, train_backbone
from .checkpoint import params_digest
from .decode import Strategy, decode
from .errors import ConfigError, DataError, IntegrityError, MdlabError
from .experiments import ablation_sweep
from .kernels import active_backend
from .metrics import trace_metrics
from .planner import build_training_set, load_dataset, make_plan_initial, save_dataset, train_planner
from .planner import PlannerConfig
from .rng import derive_rng
from .runconfig import (build_backbone_config, build_decode_config,
                        build_planner_train_config, build_task_config,
                        build_train_config, load_config_file, resolve_config,
                        sha256_file)
from .stats import bootstrap_ci
from .tasks import generate_suite, load_suite, reward, save_suite
from .trajio import load_trajectory_file, replay_trajectory, trajectory_bytes

log = logging.getLogger("mdlab")


@dataclass
class RunContext:
    resolved: dict
    out: Path
    workers: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def emit(self, relpath: str) -> None:
        self.outputs.append(str(relpath))

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)


def _verify_inputs(resolved: dict) -> dict:
    """Hash every {"path": ...} input section; a pinned sha256 that no longer
    matches the file means a stale upstream artifact, and the run refuses."""
    digests = {}
    for section in resolved.values():
        if isinstance(section, dict) and "path" in section:
            path = Path(section["path"])
            if not path.exists():
                raise ConfigError(f"input file not found: {path}")
            digest = sha256_file(path)
            want = section.get("sha256")
            if want is not None and want != digest:
                raise IntegrityError(
                    f"stale artifact: {path} hashes to {digest[:12]}… but the "
                    f"config pins {want[:12]}…")
            digests[str(path)] = digest
    return digests


def _reward_fn(suite):
    return lambda inst, window: reward(inst, window, suite.vocab)


def _select_instances(suite, select: dict):
    insts = suite.split(select["split"])
    if select["limit"] is not None:
        insts = insts[: select["limit"]]
    if not insts:
        raise DataError(f"no instances selected from split {select['split']!r}")
    return insts


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_tasks(ctx: RunContext) -> None:
    cfg = build_task_config(ctx.resolved["task"])
    suite = generate_suite(cfg, seed=ctx.resolved["seed"])
    save_suite(suite, ctx.out / "tasks.jsonl")
    ctx.emit("tasks.jsonl")
    log.info("generated %d %s instances (%d train / %d test, vocab %d)",
             len(suite.instances), cfg.kind, len(suite.split("train")),
             len(suite.split("test")), len(suite.vocab.tokens))


def cmd_train_backbone(ctx: RunContext) -> None:
    seed = ctx.resolved["seed"]
    suite = load_suite(ctx.resolved["tasks"]["path"])
    tr_p, tr_w = suite.arrays("train")
    te_p, te_w = suite.arrays("test")
    xs = np.concatenate([tr_p, tr_w], axis=1)
    xs_heldout = np.concatenate([te_p, te_w], axis=1)
    bcfg = build_backbone_config(ctx.resolved["model"],
                                 vocab_size=len(suite.vocab.tokens),
                                 max_len=suite.prompt_len + suite.gen_len)
    params = init_params(bcfg, derive_rng(seed, "init"))
    tcfg = build_train_config(ctx.resolved["train"])
    result = train_backbone(params, xs, xs_heldout, suite.prompt_len, tcfg,
                            derive_rng(seed, "train"),
                            log_path=ctx.out / "train_log.csv")
    digest = checkpoint.save_backbone(params, ctx.out / "backbone.ckpt")
    ctx.emit("backbone.ckpt")
    ctx.emit("train_log.csv")
    log.info("checkpoint %s… after %d steps (%.1fs, final loss %s)",
             digest[:12], tcfg.steps, result["seconds"], result["final_loss"])


def cmd_gen_planner_data(ctx: RunContext) -> None:
    seed = ctx.resolved["seed"]
    suite = load_suite(ctx.resolved["tasks"]["path"])
    bb = checkpoint.load_backbone(ctx.resolved["backbone"]["path"])
    dcfg, semi = build_decode_config(ctx.resolved["decode"])
    if semi is not None:
        raise ConfigError("planner rollouts are fully non-autoregressive; "
                          "drop the decode.semi_ar section")
    pd = ctx.resolved["planner_data"]
    insts = suite.split(pd["split"])[: pd["n_prompts"]]
    ds = build_training_set(lambda s: predict(bb, s), insts, dcfg,
                            _reward_fn(suite), pd["sets_per_prompt"],
                            seed=seed, backbone_digest=params_digest(bb.blocks))
    save_dataset(ds, ctx.out / "planset")
    ctx.emit("planset.jsonl")
    ctx.emit("planset.bin")
    log.info("%d rollouts from %d prompts, positive rate %.3f",
             len(ds), len(insts), float(ds.labels.mean()))


def cmd_train_planner(ctx: RunContext) -> None:
    seed = ctx.resolved["seed"]
    ds = load_dataset(ctx.resolved["dataset"]["path"])
    expected = None
    if ctx.resolved["backbone"] is not None:
        bb = checkpoint.load_backbone(ctx.resolved["backbone"]["path"])
        expected = params_digest(bb.blocks)
    p = ctx.resolved["planner"]
    max_positions = int(ds.meta["decode_config"]["L"])
    pcfg = PlannerConfig(feature_dim=ds.feature_dim, d_model=p["d_model"],
                         n_layers=p["n_layers"], n_heads=p["n_heads"],
                         ffn_dim=p["ffn_dim"], pos_dim=p["pos_dim"],
                         max_positions=max_positions, dropout=p["dropout"])
    tcfg = build_planner_train_config(ctx.resolved["train"])
    params, history = train_planner(ds, pcfg, derive_rng(seed, "plantrain"),
                                    tcfg, expected_backbone_digest=expected)
    digest = checkpoint.save_planner(params, ctx.out / "planner.ckpt")
    with open(ctx.out / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_rerank"])
        writer.writeheader()
        writer.writerows(history)
    ctx.emit("planner.ckpt")
    ctx.emit("train_log.csv")
    log.info("checkpoint %s… best epoch %d, val rerank %.3f",
             digest[:12], params.meta["best_epoch"], params.meta["val_rerank"])


@functools.lru_cache(maxsize=4)
def _cached_backbone(path: str):
    return checkpoint.load_backbone(path)


@functools.lru_cache(maxsize=4)
def _cached_planner(path: str):
    return checkpoint.load_planner(path)


def _decode_job(job):
    """One instance decoded to trajectory-file bytes; runs in a worker.

    The rng stream is derived from (seed, "decode", instance_id), so the
    result is a pure function of the job and worker count cannot matter.
    """
    bb_path, planner_path, decode_section, seed, instance_id, prompt = job
    bb = _cached_backbone(bb_path)
    dcfg, semi = build_decode_config(decode_section)
    hook = None
    if planner_path is not None:
        hook = make_plan_initial(_cached_planner(planner_path),
                                 dcfg.strategy.pool_size)
    traj = decode(lambda s: predict(bb, s), np.asarray(prompt, dtype=np.int64),
                  dcfg, derive_rng(seed, "decode", instance_id),
                  plan_initial=hook, semi_ar=semi)
    return instance_id, trajectory_bytes(traj, seed_path=("decode", instance_id),
                                         instance_id=instance_id)


def cmd_decode(ctx: RunContext) -> None:
    seed = ctx.resolved["seed"]
    suite = load_suite(ctx.resolved["tasks"]["path"])
    dcfg, _ = build_decode_config(ctx.resolved["decode"])
    planner_section = ctx.resolved["planner"]
    if dcfg.strategy.kind == "planner_guided" and planner_section is None:
        raise ConfigError("strategy planner_guided needs a planner checkpoint")
    planner_path = planner_section["path"] if planner_section else None
    insts = _select_instances(suite, ctx.resolved["select"])
    jobs = [(str(ctx.resolved["backbone"]["path"]), planner_path,
             ctx.resolved["decode"], seed, inst.instance_id, inst.prompt)
            for inst in insts]
    if ctx.workers > 1:
        with multiprocessing.Pool(ctx.workers) as pool:
            results = pool.map(_decode_job, jobs)
    else:
        results = [_decode_job(j) for j in jobs]
    traj_dir = ctx.out / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    for instance_id, blob in sorted(results):
        (traj_dir / f"{instance_id}.jsonl").write_bytes(blob)
        ctx.emit(f"trajectories/{instance_id}.jsonl")
    log.info("decoded %d instances with %d worker(s), backend %s",
             len(results), ctx.workers, active_backend())


def cmd_eval(ctx: RunContext) -> None:
    suite = load_suite(ctx.resolved["tasks"]["path"])
    traj_dir = Path(ctx.resolved["trajectories"]["dir"])
    files = sorted(traj_dir.glob("*.jsonl"))
    if not files:
        raise DataError(f"no trajectory files under {traj_dir}")
    by_id = {inst.instance_id: inst for inst in suite.instances}
    rows = []
    for f in files:
        ctx.add_input(f)
        tf = load_trajectory_file(f)
        inst = by_id.get(tf.instance_id)
        if inst is None:
            raise IntegrityError(
                f"{f.name}: instance {tf.instance_id!r} is not in the task suite")
        rows.append((tf.instance_id, reward(inst, tf.final_window, suite.vocab)))
    rows.sort()
    with open(ctx.out / "per_instance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "reward"])
        writer.writerows(rows)
    rewards = np.array([r for _, r in rows], dtype=np.float64)
    mean, lo, hi = bootstrap_ci(rewards, derive_rng(ctx.resolved["seed"], "evalci"))
    summary = {"count": len(rows), "accuracy": float(rewards.mean()),
               "ci95": [lo, hi], "resamples": 10000}
    (ctx.out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                     sort_keys=True) + "\n")
    ctx.emit("per_instance.csv")
    ctx.emit("summary.json")
    log.info("accuracy %.4f over %d trajectories (95%% CI %.4f..%.4f)",
             summary["accuracy"], len(rows), lo, hi)


_ANALYZE_PREAMBLE = (
    "# front/back are the min/max positions committed at each step; when a\n"
    "# step commits a single token the two coincide.\n"
    "# consecutive_distance: mean |p - nearest position committed at the\n"
    "# previous step|, empty at d=1.\n")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def cmd_analyze(ctx: RunContext) -> None:
    bb = checkpoint.load_backbone(ctx.resolved["backbone"]["path"])
    traj_dir = Path(ctx.resolved["trajectories"]["dir"])
    files = sorted(traj_dir.glob("*.jsonl"))
    if not files:
        raise DataError(f"no trajectory files under {traj_dir}")
    predict_fn = lambda s: predict(bb, s)
    ref_config = None
    step_rows = []
    heat_sum = None
    eff, dist, eos_curves = [], [], []
    for f in files:
        ctx.add_input(f)
        tf = load_trajectory_file(f)
        if ref_config is None:
            ref_config = tf.config
        elif tf.config != ref_config:
            raise IntegrityError(
                f"{f.name}: decode config differs from {files[0].name}; "
                "analyze expects one homogeneous run per directory")
        traj = replay_trajectory(predict_fn, tf)
        m = trace_metrics(traj)
        for i in range(ref_config.T):
            d = None if i == 0 else m.consecutive_distances[i - 1]
            step_rows.append((tf.instance_id, i + 1, m.front[i], m.back[i],
                              m.eos_ratio[i], d))
        heat_sum = m.heatmap if heat_sum is None else heat_sum + m.heatmap
        eff.append(m.effective_tokens)
        dist.append(m.mean_consecutive_distance)
        eos_curves.append(m.eos_ratio)
    n = len(files)

    with open(ctx.out / "step_metrics.csv", "w", newline="") as fh:
        fh.write(_ANALYZE_PREAMBLE)
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "d", "front", "back", "eos_ratio",
                         "consecutive_distance"])
        for iid, d, front, back, ratio, dd in step_rows:
            writer.writerow([iid, d, front, back, _fmt(ratio), _fmt(dd)])

    eos_mean = np.mean(eos_curves, axis=0)
    front_mean = np.zeros(ref_config.T)
    back_mean = np.zeros(ref_config.T)
    dist_mean = np.full(ref_config.T, np.nan)
    per_step = {}
    for iid, d, front, back, ratio, dd in step_rows:
        per_step.setdefault(d, []).append((front, back, dd))
    for d, vals in per_step.items():
        front_mean[d - 1] = np.mean([v[0] for v in vals])
        back_mean[d - 1] = np.mean([v[1] for v in vals])
        if d > 1:
            dist_mean[d - 1] = np.mean([v[2] for v in vals])
    with open(ctx.out / "aggregate_curves.csv", "w", newline="") as fh:
        fh.write(f"# means over {n} trajectories\n")
        fh.write(_ANALYZE_PREAMBLE)
        writer = csv.writer(fh)
        writer.writerow(["d", "front", "back", "eos_ratio", "consecutive_distance"])
        for i in range(ref_config.T):
            writer.writerow([i + 1, _fmt(front_mean[i]), _fmt(back_mean[i]),
                             _fmt(eos_mean[i]),
                             "" if i == 0 else _fmt(dist_mean[i])])

    with open(ctx.out / "heatmap_mean.csv", "w", newline="") as fh:
        fh.write(f"# mean top-1 probability over {n} trajectories; "
                 "row = step d, column = window position\n")
        writer = csv.writer(fh)
        for row in heat_sum / n:
            writer.writerow([repr(float(x)) for x in row])

    summary = {
        "trajectories": n,
        "mean_effective_tokens": float(np.mean(eff)),
        "mean_consecutive_distance": float(np.mean(dist)),
        "eos_ratio_peak_step": int(np.argmax(eos_mean)) + 1,
        "kernel_backend": active_backend(),
    }
    (ctx.out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                     sort_keys=True) + "\n")
    for rel in ("step_metrics.csv", "aggregate_curves.csv", "heatmap_mean.csv",
                "summary.json"):
        ctx.emit(rel)
    log.info("analyzed %d trajectories: eff tokens %.2f, distance %.3f, "
             "eos peak at step %d", n, summary["mean_effective_tokens"],
             summary["mean_consecutive_distance"], summary["eos_ratio_peak_step"])


def cmd_ablate(ctx: RunContext) -> None:
    seed = ctx.resolved["seed"]
    suite = load_suite(ctx.resolved["tasks"]["path"])
    bb = checkpoint.load_backbone(ctx.resolved["backbone"]["path"])
    planner = checkpoint.load_planner(ctx.resolved["planner"]["path"])
    dcfg, semi = build_decode_config(ctx.resolved["decode"])
    if semi is not None:
        raise ConfigError("sweeps run fully non-autoregressive; "
                          "drop the decode.semi_ar section")
    insts = _select_instances(suite, ctx.resolved["select"])
    sweep = ctx.resolved["sweep"]
    axis, values = sweep["axis"], sweep["values"]

    if axis == "P":
        values = [int(v) for v in values]
        cfg_fn = lambda v: replace(dcfg, strategy=Strategy("planner_guided",
                                                           pool_size=int(v)))
        hook_fn = lambda v: make_plan_initial(planner, int(v))
    elif axis == "T":
        values = [int(v) for v in values]
        cfg_fn = lambda v: replace(dcfg, T=int(v))
        hook_fn = lambda v: make_plan_initial(planner, dcfg.strategy.pool_size)
    else:  # strategy composition
        values = [str(v) for v in values]
        cfg_fn = lambda v: replace(dcfg, strategy=Strategy(
            str(v), d0=dcfg.strategy.d0, pool_size=dcfg.strategy.pool_size))
        hook_fn = lambda v: make_plan_initial(planner, dcfg.strategy.pool_size)

    records = ablation_sweep(lambda s: predict(bb, s), insts, _reward_fn(suite),
                             seed, axis, values, cfg_fn, hook_fn,
                             n_samples=sweep["n_samples"])
    with open(ctx.out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "accuracy", "ci_lo", "ci_hi",
                         "instances", "n_samples", "seconds"])
        for rec in records:
            acc = rec.aggregates["accuracy"]
            writer.writerow([axis, rec.point["value"], _fmt(acc["mean"]),
                             _fmt(acc["lo"]), _fmt(acc["hi"]), len(insts),
                             sweep["n_samples"], f"{rec.seconds:.3f}"])
    dump = [{"kind": rec.kind, "point": rec.point, "aggregates": rec.aggregates,
             "seeds": rec.seeds, "seconds": rec.seconds,
             "outcomes": np.asarray(rec.outcomes).tolist()} for rec in records]
    (ctx.out / "records.json").write_text(json.dumps(dump, indent=2,
                                                     sort_keys=True) + "\n")
    ctx.emit("ablation.csv")
    ctx.emit("records.json")
    log.info("swept %s over %s on %d instances", axis, values, len(insts))


_COMMANDS = {
    "gen-tasks": (cmd_gen_tasks, "generate a task suite"),
    "train-backbone": (cmd_train_backbone, "train the denoiser on a task suite"),
    "gen-planner-data": (cmd_gen_planner_data,
                         "sample first-step rollouts into a planner dataset"),
    "train-planner": (cmd_train_planner, "fit the first-step scorer"),
    "decode": (cmd_decode, "decode a split and record trajectories"),
    "eval": (cmd_eval, "score recorded trajectories against their tasks"),
    "analyze": (cmd_analyze, "replay trajectories and emit step metrics"),
    "ablate": (cmd_ablate, "sweep one axis of the decode config"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdlab",
        description="masked-diffusion decoding lab: training, decoding and "
                    "trajectory experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel decode workers")
    return parser


def run_command(command: str, config_path, out_dir, seed: int | None = None,
                workers: int = 1) -> Path:
    """Programmatic entry used by main() and the tests; returns the out dir."""
    if workers < 1:
        raise ConfigError("--workers must be at least 1")
    resolved = resolve_config(command, load_config_file(config_path))
    if seed is not None:
        resolved["seed"] = seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(resolved=resolved, out=out, workers=workers,
                     inputs=_verify_inputs(resolved))
    _COMMANDS[command][0](ctx)
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    ctx.emit("resolved_config.json")
    manifest = {
        "command": command,
        "seed": resolved["seed"],
        "inputs": ctx.inputs,
        "outputs": {rel: sha256_file(out / rel) for rel in sorted(ctx.outputs)},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args.command, args.config, args.out, seed=args.seed,
                    workers=args.workers)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return 2
    except IntegrityError as exc:
        log.error("integrity: %s", exc)
        return 3
    except MdlabError as exc:
        log.error("%s", exc)
        return 4
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

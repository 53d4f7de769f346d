"""Command-line entry point: ``mdg <command> [options]``.

Exit codes: 0 success, 2 usage or contract error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from mdg.errors import ContractError, DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# config and provenance
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for i, ln in enumerate(text.splitlines(), 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise ContractError(f"config line {i} is not key=value: {ln!r}")
        k, _, v = ln.partition("=")
        k = k.strip()
        if k.split(".")[0] not in ("model", "train", "infer", "eval"):
            raise ContractError(f"config key {k!r} needs a model./train./infer./eval. prefix")
        out[k] = v.strip()
    return out


def load_config(path, overrides: list[str] | None) -> dict[str, str]:
    cfg = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides or []:
        cfg.update(parse_config_text(item))
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    return {k: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_provenance(target: Path, command: str, resolved: dict, inputs: dict[str, str]) -> None:
    """Resolved config snapshot plus input hashes next to an output."""
    lines = [f"# command={command}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved)]
    lines += [f"# input {k} sha256={inputs[k]}" for k in sorted(inputs)]
    target.write_text("\n".join(lines) + "\n")


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".run.txt")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from mdg.synthworld import KINDS, generate_scenarios, save_dataset

    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        print(f"error: invalid kind(s) {', '.join(bad) or '(none)'}; valid kinds: {', '.join(KINDS)}", file=sys.stderr)
        return EXIT_USAGE
    if args.count < 0 or args.agents < 1 or args.agents > 16:
        print("error: --count must be >= 0 and --agents within 1..16", file=sys.stderr)
        return EXIT_USAGE
    if args.count == 0:
        print("warning: --count 0 writes an empty dataset", file=sys.stderr)
    scenarios = generate_scenarios(args.count, args.seed, kinds, args.agents)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(scenarios, out, seed=args.seed)
    counts = Counter(s.kind for s in scenarios)
    for k in KINDS:
        if k in kinds:
            print(f"{k}: {counts.get(k, 0)}")
    print(f"wrote {len(scenarios)} scenarios to {out}")
    write_provenance(_sidecar(out), "gen-data",
                     {"data.kinds": ",".join(kinds), "data.count": args.count, "data.agents": args.agents,
                      "data.seed": args.seed}, {"output": file_hash(out)})
    return EXIT_OK


def _model_config(cfg: dict):
    from mdg.model import ModelConfig
    return ModelConfig.from_mapping(section(cfg, "model"))


def cmd_train(args) -> int:
    from mdg.model import MDGModel
    from mdg.synthworld import load_dataset
    from mdg.training import TrainConfig, train

    cfg = load_config(args.config, args.set)
    tr = section(cfg, "train")
    for flag, key in (("epochs", "train.epochs"), ("seed", "train.seed"), ("batch_size", "train.batch_size")):
        if getattr(args, flag) is not None:
            tr[key] = str(getattr(args, flag))
    preset = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    base = {f"train.{k}": str(v) for k, v in vars(preset).items()}
    base.update(tr)
    tcfg = TrainConfig.from_mapping(base)
    mcfg = _model_config(cfg)
    scenarios = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = MDGModel(mcfg, seed=tcfg.seed)
    log_path = out / "train_log.csv"
    with open(log_path, "w") as fh:
        def log(row):
            fh.write(row + "\n")

        def on_epoch(e):
            if tcfg.ckpt_every and (e + 1) % tcfg.ckpt_every == 0:
                model.save(out / f"epoch_{e + 1:03d}.ckpt")

        reports = train(model, scenarios, tcfg, log=log, on_epoch=on_epoch)
    model.save(out / "model.ckpt")
    resolved = {**{k: v for k, v in (ln.split("=", 1) for ln in mcfg.to_text().splitlines())},
                **{f"train.{k}": v for k, v in vars(tcfg).items()}}
    write_provenance(out / "run_config.txt", "train", resolved, {"data": file_hash(args.data)})
    if reports:
        print(f"trained {len(reports)} steps; final L_d={reports[-1].denoise:.4f} L_p={reports[-1].predict:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _read_goals(path) -> dict:
    goals: dict = {}
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#") or ln.startswith("scene"):
            continue
        parts = ln.split(",")
        if len(parts) != 4:
            raise DataError(f"goal line must be scene,agent,x,y: {ln!r}")
        s, a, x, y = int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])
        goals.setdefault(s, {})[a] = (x, y)
    return goals


def _select(scenarios, limit):
    return scenarios if limit is None else scenarios[:limit]


def cmd_generate(args) -> int:
    from mdg.inference import generate, trace_header, trace_rows
    from mdg.model import MDGModel
    from mdg.noisefield import InferenceSchedule, format_schedule
    from mdg.synthworld import load_dataset

    model = MDGModel.load(args.ckpt)
    scenarios = _select(load_dataset(args.data), args.scenes)
    if not scenarios:
        raise DataError("dataset holds no scenarios")
    goals = _read_goals(args.guide) if args.guide else None
    for s in goals or {}:
        if s >= len(scenarios):
            raise DataError(f"goal refers to scene {s}, but only {len(scenarios)} scenes are loaded")
    steps = 1 if args.mode == "one_step" else args.steps
    meta = {"command": "generate", "ckpt_sha256": file_hash(args.ckpt), "data_sha256": file_hash(args.data),
            "mode": args.mode, "steps": steps, "samples": args.samples, "seed": args.seed,
            "guided": int(bool(goals)), "config_sha256": text_hash(model.cfg.to_text())}
    out = Path(args.trace)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(trace_header(meta))
        for i in range(0, len(scenarios), 8):
            chunk = scenarios[i:i + 8]
            g = None
            if goals:
                g = {b - i: goals[b] for b in goals if i <= b < i + 8}
            res = generate(model, chunk, args.mode, steps, args.samples, args.seed, goals=g or None)
            for b, sc in enumerate(chunk):
                for s in range(args.samples):
                    fh.write(trace_rows(sc.scenario_id, 0, s, res.states[b, s, :sc.n_agents]))
            if i == 0 and args.schedule_out:
                n = chunk[0].n_agents
                sch = InferenceSchedule([m[0, :n] for m in res.masks] + [np.zeros_like(res.masks[0][0, :n])],
                                        args.mode, model.cfg.K)
                Path(args.schedule_out).write_text(format_schedule(sch))
    write_provenance(_sidecar(out), "generate", {f"infer.{k}": v for k, v in meta.items()}, {})
    print(f"wrote {len(scenarios) * args.samples} sample records to {out}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    from mdg.evalmetrics import plan_consistency
    from mdg.inference import run_episode, trace_header, trace_rows
    from mdg.model import MDGModel
    from mdg.synthworld import load_dataset

    model = MDGModel.load(args.ckpt)
    scenarios = _select(load_dataset(args.data), args.scenes)
    period = int(round(1.0 / (args.replan_hz * 0.1)))
    meta = {"command": "rollout", "ckpt_sha256": file_hash(args.ckpt), "data_sha256": file_hash(args.data),
            "mode": "closed_loop", "reuse": int(args.reuse), "replan_hz": args.replan_hz,
            "replan_period": period, "duration": args.duration, "seed": args.seed,
            "config_sha256": text_hash(model.cfg.to_text())}
    out = Path(args.trace)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = ["episode,plan_consistency,denoiser_calls"]
    values = []
    with open(out, "w") as fh:
        fh.write(trace_header(meta))
        for sc in scenarios:
            ep = run_episode(model, sc, args.reuse, args.seed, args.duration, args.replan_hz)
            for k, (t0, plan) in enumerate(ep.plans):
                fh.write(trace_rows(sc.scenario_id, k, 0, plan, t0))
            pc = float(plan_consistency(ep.ego_plans())) if len(ep.plans) > 1 else float("nan")
            values.append(pc)
            summary.append(f"{sc.scenario_id},{pc!r},{ep.denoiser_calls}")
    summary.append(f"mean,{float(np.nanmean(values))!r},")
    summary_path = out.with_name(out.name + ".summary.csv")
    summary_path.write_text("\n".join(summary) + "\n")
    write_provenance(_sidecar(out), "rollout", {f"infer.{k}": v for k, v in meta.items()}, {})
    print(f"mean plan consistency ({'reuse' if args.reuse else 'no reuse'}): {float(np.nanmean(values)):.6f} m")
    return EXIT_OK


def trace_to_scenes(meta: dict, rec: np.ndarray, scenarios, goals=None):
    """Rebuild per-scene evaluation inputs from trace records."""
    from mdg.evalmetrics import SceneEval

    by_id = {sc.scenario_id: sc for sc in scenarios}
    episodes = np.unique(rec["episode"])
    missing = [int(e) for e in episodes if e not in by_id]
    if missing:
        raise DataError(f"trace episodes {missing[:5]} are not in the dataset")
    closed = meta.get("mode") == "closed_loop"
    period = int(meta.get("replan_period", 0) or 0)
    scenes = []
    for idx, sc in enumerate(scenarios):
        if sc.scenario_id not in episodes:
            continue
        r = rec[rec["episode"] == sc.scenario_id]
        if closed:
            r = r[(r["t"] >= r["replan"] * period) & (r["t"] < (r["replan"] + 1) * period)]
        n_s = int(r["sample"].max()) + 1
        n_a = int(r["agent"].max()) + 1
        n_t = int(r["t"].max()) + 1
        if n_a != sc.n_agents:
            raise DataError(f"trace episode {sc.scenario_id} has {n_a} agents, dataset has {sc.n_agents}")
        traj = np.zeros((n_s, n_a, n_t, 5))
        traj[r["sample"], r["agent"], r["t"]] = np.stack([r[c] for c in ("x", "y", "theta", "vx", "vy")], -1)
        T = min(n_t, sc.future.shape[1])
        g = {}
        if goals and idx in goals:
            g = goals[idx]
        scenes.append(SceneEval(traj[:, :, :T], sc.future[:, :T], sc.extents, np.ones(n_a, bool),
                                sc.types, sc.map_polylines, g))
    return scenes


def cmd_eval(args) -> int:
    from mdg.evalmetrics import METRICS, evaluate, format_csv, format_table
    from mdg.inference import read_trace
    from mdg.synthworld import load_dataset

    meta, rec = read_trace(args.trace)
    if len(rec) == 0:
        raise DataError("trace holds no records")
    if "data_sha256" in meta and meta["data_sha256"] != file_hash(args.data):
        raise DataError("trace was produced from a different dataset (hash mismatch)")
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(METRICS)
    goals = _read_goals(args.goals) if args.goals else None
    if "GR" in metrics and not goals:
        metrics.remove("GR")
    scenes = trace_to_scenes(meta, rec, load_dataset(args.data), goals)
    report = evaluate(scenes, metrics)
    print(format_table(report), end="")
    if args.out:
        Path(args.out).write_text(format_csv(report))
        write_provenance(_sidecar(Path(args.out)), "eval", {"eval.metrics": ",".join(metrics)},
                         {"trace": file_hash(args.trace), "data": file_hash(args.data)})
    return EXIT_OK


def cmd_schedule(args) -> int:
    from mdg.noisefield import build_schedule, format_schedule

    try:
        n, ta = (int(v) for v in args.dims.split(","))
    except ValueError:
        print("error: --dims expects N,T_a", file=sys.stderr)
        return EXIT_USAGE
    steps = 1 if args.mode == "one_step" else args.steps
    sys.stdout.write(format_schedule(build_schedule(args.mode, steps, n, ta, args.K)))
    return EXIT_OK


def cmd_plot(args) -> int:
    from mdg.inference import read_trace
    from mdg.plotting import trace_svg
    from mdg.synthworld import load_dataset

    meta, rec = read_trace(args.trace)
    scenarios = load_dataset(args.data)
    by_id = {sc.scenario_id: sc for sc in scenarios}
    ep = args.episode if args.episode is not None else int(rec["episode"].min())
    if ep not in by_id:
        raise DataError(f"episode {ep} is not in the dataset")
    Path(args.out).write_text(trace_svg(by_id[ep], rec[rec["episode"] == ep]))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdg", description="Masked denoising generation for multi-agent traffic.")
    p.add_argument("--threads", type=int, default=1, help="worker cap (all commands currently run single-threaded)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario dataset")
    g.add_argument("--kinds", default="straight,curve,intersection,merge")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--agents", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", help="override, e.g. --set train.epochs=1")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("generate", help="sample futures from a checkpoint")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--mode", choices=("one_step", "temporal", "agent"), default="one_step")
    n.add_argument("--steps", type=int, default=5)
    n.add_argument("--samples", type=int, default=1)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--scenes", type=int)
    n.add_argument("--guide", help="goals file with scene,agent,x,y lines")
    n.add_argument("--schedule-out", help="write the first scene's mask schedule as a level grid")
    n.add_argument("--trace", required=True)
    n.set_defaults(func=cmd_generate)

    r = sub.add_parser("rollout", help="closed-loop replanning episodes")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--replan-hz", type=float, default=1.0)
    r.add_argument("--duration", type=float, default=8.0)
    r.add_argument("--reuse", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--scenes", type=int)
    r.add_argument("--trace", required=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="metric report for a trace")
    e.add_argument("--trace", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", help="comma list from CR,OR,SADE,minSADE,GR")
    e.add_argument("--goals")
    e.add_argument("--out", help="write the comma-separated summary here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("schedule", help="print a mask schedule as a level grid")
    s.add_argument("--mode", choices=("one_step", "temporal", "agent"), default="temporal")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--dims", default="8,20", help="N,T_a")
    s.add_argument("--K", type=int, default=5)
    s.set_defaults(func=cmd_schedule)

    v = sub.add_parser("plot", help="SVG overlay of a trace on its map")
    v.add_argument("--trace", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--episode", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``uamrl {train,eval,compare,print-config}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Sequence

from uamrl import env as sim
from uamrl import trainer
from uamrl.config import Config, ConfigFileError, load_config
from uamrl.nn import NumericFault, ShapeError

log = logging.getLogger("uamrl")

CURVE_COLUMNS = ("episode", "total_reward", "epsilon", "loss", "serviced")


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _atomic_write(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_curve(path: Path, curve: Sequence[trainer.CurveRow]) -> Path:
    rows = [(r.episode, repr(r.total_reward), repr(r.epsilon), repr(r.loss), r.serviced) for r in curve]
    return _atomic_write(path, _csv_text(CURVE_COLUMNS, rows))


def write_manifest(out: Path, cfg: Config, command: str, seeds, mode, artifacts, started: float) -> Path:
    missing = [a for a in artifacts if not Path(a).exists()]
    if missing:
        raise RuntimeError(f"declared artifacts were not written: {missing}")
    manifest = {
        "schema": 1,
        "command": command,
        "tool_version": tool_version(),
        "mode": mode,
        "seeds": list(seeds),
        "config": cfg.to_dict(),
        "artifacts": [str(a) for a in artifacts],
        "wall_clock_s": round(time.time() - started, 3),
    }
    return _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2))


def _progress(mode: str, seed: int, every: int = 100):
    def report(row: trainer.CurveRow) -> None:
        if (row.episode + 1) % every == 0:
            log.info("%s seed %d episode %d reward %.2f eps %.4f loss %.3g serviced %d",
                     mode, seed, row.episode + 1, row.total_reward, row.epsilon, row.loss, row.serviced)
    return report


def cmd_train(cfg: Config, mode: str, seeds: Sequence[int], out: Path, episodes: int | None = None) -> list[Path]:
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for seed in seeds:
        result = trainer.train(cfg.sim, cfg.reward, cfg.trainer, mode, seed, episodes, _progress(mode, seed))
        artifacts.append(trainer.save_learner(out / f"{mode}_seed{seed}.npz", result.learner, cfg.sim, seed))
        artifacts.append(write_curve(out / f"curve_{mode}_seed{seed}.csv", result.curve))
    write_manifest(out, cfg, "train", seeds, mode, artifacts, started)
    return artifacts


def write_eval(out: Path, report: trainer.EvalReport, prefix: str = "") -> list[Path]:
    paths = [_atomic_write(out / f"{prefix}report.json", json.dumps(report.to_dict(), indent=2))]
    rows = [
        (i, m, n, v)
        for i, ep in enumerate(report.episodes)
        for m, (n, v) in enumerate(zip(ep.serviced_per_agent, ep.vertiports_per_agent))
    ]
    paths.append(_atomic_write(out / f"{prefix}serviced.csv",
                               _csv_text(("episode", "agent", "serviced", "vertiports_visited"), rows)))
    rows = [(i, ep.serviced_total, "" if ep.mean_wait_min is None else repr(ep.mean_wait_min))
            for i, ep in enumerate(report.episodes)]
    paths.append(_atomic_write(out / f"{prefix}waiting.csv",
                               _csv_text(("episode", "serviced_total", "mean_wait_min"), rows)))
    return paths


def cmd_eval(cfg: Config, checkpoint: Path, episodes: int, seed: int, out: Path) -> trainer.EvalReport:
    started = time.time()
    learner = trainer.load_learner(checkpoint, cfg.sim, cfg.trainer)
    out.mkdir(parents=True, exist_ok=True)
    report = trainer.evaluate(learner, cfg.sim, cfg.reward, episodes, seed, out_dir=out)
    artifacts = write_eval(out, report) + [Path(p) for p in report.trajectory_files]
    write_manifest(out, cfg, "eval", [seed], learner.mode, artifacts, started)
    return report


def cmd_compare(
    cfg: Config,
    seeds: Sequence[int],
    out: Path,
    episodes: int | None = None,
    modes: tuple[str, str] = ("commnet", "iql-dnn"),
) -> dict:
    """Train and evaluate two modes on the same seeds; the first is the proposed method."""
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    per_mode: list[list[trainer.ComparisonRow]] = [[], []]
    for seed in seeds:
        for slot, mode in enumerate(modes):
            tag = f"{mode}_seed{seed}" if modes[0] != modes[1] else f"{mode}{slot}_seed{seed}"
            result = trainer.train(cfg.sim, cfg.reward, cfg.trainer, mode, seed, episodes, _progress(mode, seed))
            artifacts.append(trainer.save_learner(out / f"{tag}.npz", result.learner, cfg.sim, seed))
            artifacts.append(write_curve(out / f"curve_{tag}.csv", result.curve))
            report = trainer.evaluate(result.learner, cfg.sim, cfg.reward, cfg.trainer.eval_episodes, seed)
            artifacts += write_eval(out, report, prefix=f"eval_{tag}_")
            row = trainer.ComparisonRow(seed, mode, report.serviced_total, report.mean_wait_min,
                                        result.curve[-1].total_reward)
            per_mode[slot].append(row)
            log.info("seed %d %s: serviced %.2f mean wait %s", seed, mode, row.serviced_total, row.mean_wait_min)
    table = trainer.compare_table(per_mode[0], per_mode[1])
    table["modes"] = list(modes)
    table["per_seed"] = [
        {"seed": a.seed, "proposed_serviced": a.serviced_total, "baseline_serviced": b.serviced_total,
         "proposed_mean_wait_min": a.mean_wait_min, "baseline_mean_wait_min": b.mean_wait_min}
        for a, b in zip(*per_mode)
    ]
    artifacts.append(_atomic_write(out / "comparison.json", json.dumps(table, indent=2)))
    artifacts.append(_atomic_write(out / "comparison.csv", comparison_csv(table)))
    write_manifest(out, cfg, "compare", seeds, list(modes), artifacts, started)
    return table


def comparison_csv(table: dict) -> str:
    fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
    rows = [
        (f"seed{r['seed']}", fmt(r["proposed_serviced"]), fmt(r["baseline_serviced"]),
         fmt(r["proposed_mean_wait_min"]), fmt(r["baseline_mean_wait_min"]))
        for r in table["per_seed"]
    ]
    rows.append(("median", fmt(table["proposed"]["median_serviced"]), fmt(table["baseline"]["median_serviced"]),
                 fmt(table["proposed"]["median_mean_wait_min"]), fmt(table["baseline"]["median_mean_wait_min"])))
    rows.append(("delta", fmt(table["delta"]["serviced"]), "", fmt(table["delta"]["mean_wait_min"]), ""))
    a, b = table["modes"]
    header = ("row", f"{a}_serviced", f"{b}_serviced", f"{a}_mean_wait_min", f"{b}_mean_wait_min")
    return _csv_text(header, rows)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uamrl", description="UAM passenger-delivery MARL experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False):
        p.add_argument("--config", type=Path, help="YAML config (defaults used when omitted)")
        p.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds")
        p.add_argument("--episodes", type=int, help="override trainer.episodes")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if mode:
            p.add_argument("--mode", choices=trainer.MODES, default="commnet")

    common(sub.add_parser("train", help="train policies"), mode=True)
    p = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("compare", help="train and evaluate CommNet against the IQL baseline")
    common(p)
    p.add_argument("--modes", default="commnet,iql-dnn", help="proposed,baseline (default commnet,iql-dnn)")
    p = sub.add_parser("print-config", help="dump the effective configuration")
    p.add_argument("--config", type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "print-config":
            sys.stdout.write(cfg.dump())
            return 0
        if args.episodes is not None and args.episodes < 1:
            raise ConfigFileError("--episodes must be >= 1")
        if args.command == "train":
            cmd_train(cfg, args.mode, args.seeds, args.out, args.episodes)
        elif args.command == "eval":
            if not args.checkpoint.exists():
                raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
            episodes = args.episodes or cfg.trainer.eval_episodes
            report = cmd_eval(cfg, args.checkpoint, episodes, args.seeds[0], args.out)
            print(json.dumps({"serviced_total": report.serviced_total, "mean_wait_min": report.mean_wait_min}))
        elif args.command == "compare":
            modes = tuple(m.strip() for m in args.modes.split(","))
            if len(modes) != 2 or any(m not in trainer.MODES for m in modes):
                raise ConfigFileError(f"--modes needs two of {trainer.MODES}, got {args.modes!r}")
            table = cmd_compare(cfg, args.seeds, args.out, args.episodes, modes)
            print(comparison_csv(table), end="")
    except (ConfigFileError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericFault, FloatingPointError, sim.ContractViolation) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

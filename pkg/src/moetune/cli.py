"""Command line: ``moetune params|train|analyze|ablate``.

Exit codes: 0 success, 2 configuration error, 3 non-finite value during a run.
The default output root is ``$MOETUNE_OUT`` (falling back to ``./runs``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from . import config as runconfig
from .analytics import (
    RoutingTrace,
    expert_load_distribution,
    modality_preference,
    token_pathways,
    write_loads_csv,
    write_pathways_json,
    write_preferences_csv,
)
from .autodiff import NonFiniteError
from .model import ConfigError, build, count_parameters
from .tuning import STAGES, evaluate, expand_to_moe, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ABLATION_AXES = ("experts", "topk", "placement", "capacity", "subset")
ABLATION_COLUMNS = ["axis", "value", "regressive", "total", "drop_rate", "max_load", "wall_time"]


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


@dataclass
class RunManifest:
    run_id: str
    config_path: str
    seed: int
    stages: list[str]
    output_dir: str
    version: str

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def default_out(name: str) -> Path:
    return Path(os.environ.get("MOETUNE_OUT", "runs")) / name


def _fmt_b(n: int) -> str:
    return f"{n / 1e9:.2f}B"


def cmd_params(args) -> int:
    cfg = runconfig.load(args.config).model
    active, total = count_parameters(cfg)
    print(f"{cfg.name}: activated {_fmt_b(active)} ({active}), total {_fmt_b(total)} ({total})")
    print(json.dumps({"name": cfg.name, "activated": active, "total": total}))
    return EXIT_OK


def _stage_path(out: Path, stage: str) -> Path:
    return out / "checkpoints" / f"stage_{stage}.moel"


def cmd_train(args) -> int:
    rc = runconfig.load(args.config)
    seed = rc.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else default_out(rc.name)
    stages = list(STAGES) if args.stage == "all" else [args.stage]

    if stages[0] == "I":
        model = build(rc.model, seed, dense=True)
    else:
        prev = STAGES[STAGES.index(stages[0]) - 1]
        src = Path(args.init) if args.init else _stage_path(out, prev)
        if not src.exists():
            raise ConfigError(f"stage {stages[0]} needs a stage {prev} checkpoint; not found at {src}")
        model, _ = ckpt.load(src)

    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    RunManifest(f"{rc.name}-s{seed}", str(args.config), seed, stages, str(out), version_string()).write(out)
    dataset = rc.make_dataset(seed)
    metrics_path = out / "metrics.jsonl"
    extra = {"run": rc.to_dict(), "seed": seed}

    with open(metrics_path, "a") as mf:

        def sink(rec):
            mf.write(json.dumps(rec) + "\n")

        for stage in stages:
            spec = rc.pipeline.by_stage(stage)
            if stage == "III" and not model.is_sparse:
                model = expand_to_moe(model)
            t0 = time.perf_counter()
            run_stage(model, spec, dataset, seed + STAGES.index(stage), sink)
            ev = evaluate(model, dataset.eval)
            path = ckpt.save(model, _stage_path(out, stage), extra | {"stage": stage})
            print(
                f"stage {stage}: {spec.steps} steps in {time.perf_counter() - t0:.1f}s, "
                f"eval regressive {ev['regressive']:.4f} -> {path}"
            )
    return EXIT_OK


def _trace_for(model, dataset, samples: int) -> RoutingTrace:
    batch = dataset.eval.subset(slice(0, samples))
    sink = []
    model.forward(batch, trace_sink=sink, use_capacity=False)
    return RoutingTrace(sink)


def cmd_analyze(args) -> int:
    model, extra = ckpt.load(args.checkpoint)
    if not model.is_sparse:
        raise ConfigError("analyze needs a checkpoint with MoE layers (stage III)")
    run = extra.get("run")
    rc = runconfig.parse(run) if run else runconfig.RunConfig(model.config)
    dataset = rc.make_dataset(args.dataset_seed if args.dataset_seed is not None else extra.get("seed", 0))
    trace = _trace_for(model, dataset, args.samples)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "reports"
    out.mkdir(parents=True, exist_ok=True)
    layers = [lt.layer for lt in trace.layers]
    paths = [
        write_loads_csv(expert_load_distribution(trace), layers, out / "loads.csv"),
        write_preferences_csv(modality_preference(trace), layers, out / "preferences.csv"),
        write_pathways_json(token_pathways(trace, args.top), out / "pathways.json"),
    ]
    for p in paths:
        print(p)
    return EXIT_OK


def _parse_value(axis: str, raw: str):
    if axis in ("experts", "topk"):
        return int(raw)
    if axis == "capacity":
        return float(raw)
    return raw


def run_ablation(rc: runconfig.RunConfig, axis: str, values: list, seed: int) -> list[dict]:
    """One row per value: stages I/II are shared, stage III is rerun per value."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}")
    dataset = rc.make_dataset(seed)
    dense = build(rc.model, seed, dense=True)
    for stage in ("I", "II"):
        run_stage(dense, rc.pipeline.by_stage(stage), dataset, seed + STAGES.index(stage))
    rows = []
    for value in values:
        t0 = time.perf_counter()
        spec = rc.pipeline.stage3
        base = dense
        if axis == "experts":
            model = expand_to_moe(base, num_experts=value, top_k=min(rc.model.top_k, value))
        elif axis == "topk":
            model = expand_to_moe(base, top_k=value)
        elif axis == "capacity":
            model = expand_to_moe(base, capacity_factor=value)
        elif axis == "placement":
            base = _with_config(dense, rc.model.replace(placement=value))
            model = expand_to_moe(base)
        else:
            spec = runconfig.StageSpec(**(vars(spec) | {"tuned_subset": value}))
            model = expand_to_moe(base)
        _, timeline = run_stage(model, spec, dataset, seed + 2)
        ev = evaluate(model, dataset.eval)
        drops = [r["drop_rate"] for r in timeline if "drop_rate" in r]
        rows.append(
            {
                "axis": axis,
                "value": value,
                "regressive": ev["regressive"],
                "total": ev["total"],
                "drop_rate": sum(drops) / len(drops) if drops else 0.0,
                "max_load": ev.get("max_load", float("nan")),
                "wall_time": time.perf_counter() - t0,
            }
        )
    return rows


def _with_config(model, cfg):
    m = copy.deepcopy(model)
    m.config = cfg
    return m


def cmd_ablate(args) -> int:
    rc = runconfig.load(args.base_config)
    seed = rc.seed if args.seed is None else args.seed
    values = [_parse_value(args.axis, v) for v in args.values]
    rows = run_ablation(rc, args.axis, values, seed)
    out = Path(args.out) if args.out else default_out(rc.name) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{args.axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"{'value':>10} {'regressive':>11} {'total':>9} {'drop':>7} {'max_load':>9} {'time':>7}")
    for r in rows:
        print(
            f"{str(r['value']):>10} {r['regressive']:11.4f} {r['total']:9.4f} "
            f"{r['drop_rate']:7.4f} {r['max_load']:9.4f} {r['wall_time']:6.1f}s"
        )
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moetune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("params", help="activated/total parameter counts of a config")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("train", help="run tuning stages")
    sp.add_argument("config")
    sp.add_argument("--stage", choices=["I", "II", "III", "all"], default="all")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--init", help="checkpoint to start from (default: previous stage in --out)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("analyze", help="routing reports for a sparse checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--dataset-seed", type=int)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="stage-III sweep along one axis")
    sp.add_argument("base_config")
    sp.add_argument("--axis", choices=ABLATION_AXES, required=True)
    sp.add_argument("--values", nargs="+", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"error: non-finite value, run aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

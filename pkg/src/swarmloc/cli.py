"""Command-line entry point: ``swarmloc {plan,run,metrics,sweep,export}``.

Exit codes: 0 success, 1 usage error, 2 input/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import SweepTemplate, config_from_mapping, config_to_mapping, generate_sweep
from .config import load_config
from .engine import RunLogs, run
from .exceptions import IncompleteRun, InputError, SwarmLocError
from .mesh import (PointCloud, grid_point_cloud, load_mesh, parse_grid_spec,
                   poisson_disk_sample, required_fls_count, surface_area)
from .metrics import metrics_series
from .planner import FlsSpec, Plan, load_plan, plan_swarm, save_plan

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("swarmloc")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def ground_truth_cloud(plan: Plan) -> PointCloud:
    bright = plan.bright
    return PointCloud(plan.ground_truth([a.fls_id for a in bright]),
                      np.array([a.fls_id for a in bright]))


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    spec = FlsSpec(args.radius, args.min_range, args.max_range)
    meta = {"seed": args.seed}
    area = None
    if args.mesh:
        mesh = load_mesh(args.mesh)
        area = surface_area(mesh)
        count = args.count or required_fls_count(area, args.radius, args.cell_size)
        cloud = poisson_disk_sample(mesh, count, seed=args.seed)
        meta.update(source=os.path.basename(args.mesh), surface_area=area)
    else:
        rows, cols, spacing = parse_grid_spec(args.grid)
        cloud = grid_point_cloud(rows, cols, spacing)
        meta.update(source=f"grid:{args.grid}")
    plan = plan_swarm(cloud.points, spec, args.swarm_size, meta=meta)

    os.makedirs(args.out, exist_ok=True)
    save_plan(plan, os.path.join(args.out, "plan.json"))
    ground_truth_cloud(plan).to_csv(os.path.join(args.out, "cloud.csv"))

    s = plan.summary()
    if area is not None:
        print(f"surface area: {area:.6g} m^2")
    print(f"F: {s['fls_bright']}")
    print(f"groups (nG): {s['group_count']}")
    print(f"swarms: {s['swarm_count']}")
    print(f"dark FLSs: {s['fls_dark']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    values = {}
    if args.config:
        values = config_to_mapping(load_config(args.config))
    overrides = {
        "plan": args.plan, "duration_s": args.duration, "mode": args.mode, "seed": args.seed,
        "deploy.alpha": args.alpha, "deploy.dispatcher": args.dispatcher,
        "policy": args.policy, "output_dir": args.out, "transport": args.transport,
        "tick_interval_ms": args.tick_ms,
    }
    values.update({k: (v if isinstance(v, str) else repr(v) if isinstance(v, float) else str(v))
                   for k, v in overrides.items() if v is not None})
    if not values.get("plan"):
        raise InputError("no plan given (use --plan or the 'plan' config key)")
    values.setdefault("output_dir", "results")
    if not values["output_dir"]:
        values["output_dir"] = "results"
    config = config_from_mapping(values)
    logs = run(config)
    m = logs.manifest
    print(f"status: {m['status']}")
    print(f"FLSs: {len(m['fls_ids'])}  ticks: {m['n_ticks']}")
    print(f"results: {config.output_dir}")
    return EXIT_OK if m["status"] == "ok" else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# metrics / export


def _load_results(results, ground_truth=None, interval=None, with_messages=False):
    logs = RunLogs.read(results, with_messages=with_messages)
    if ground_truth:
        gt = PointCloud.from_csv(ground_truth)
    else:
        plan_path = os.path.join(results, "plan.json")
        if not os.path.exists(plan_path):
            raise IncompleteRun(f"{results}: no plan.json; pass --ground-truth")
        gt = ground_truth_cloud(load_plan(plan_path))
    if interval is None:
        interval = logs.manifest["config"]["tick_interval_ms"] / 1000.0
    return logs, gt, metrics_series(logs, gt, interval)


def cmd_metrics(args) -> int:
    _, _, series = _load_results(args.results, args.ground_truth, args.interval)
    out = args.out or os.path.join(args.results, "metrics.csv")
    series.to_csv(out)
    print(f"samples: {len(series)}")
    print(f"final hausdorff: {series.hausdorff[-1]:.6g} m  chamfer: {series.chamfer[-1]:.6g} m")
    print(f"metrics: {out}")
    return EXIT_OK


def export_dataset(results, ground_truth=None, interval=None) -> dict:
    """Metrics series plus per-FLS final error and message counts."""
    logs, gt, series = _load_results(results, ground_truth, interval, with_messages=True)
    truth = dict(zip(gt.ids.tolist(), gt.points))
    plan_path = os.path.join(results, "plan.json")
    plan = load_plan(plan_path) if os.path.exists(plan_path) else None
    dark = set(logs.manifest.get("dark_ids", []))
    final = logs.final_positions()
    fls = []
    for fid in logs.manifest["fls_ids"]:
        if fid in truth:
            target = truth[fid]
        elif plan is not None:
            target = np.asarray(plan[fid].ground_truth_location)
        else:
            target = None
        err = (float(np.linalg.norm(final[fid] - target))
               if target is not None and fid in final else float("nan"))
        recs = logs.messages.get(fid, [])
        fls.append({"fls_id": fid, "dark": int(fid in dark), "final_error": err,
                    "sent": sum(r.direction == "sent" for r in recs),
                    "received": sum(r.direction == "recv" for r in recs)})
    metrics = [{"t": t, "hausdorff": h, "chamfer": c} for t, h, c in series.rows()]
    return {"metrics": metrics, "fls": fls}


EXPORT_COLUMNS = ("record", "t", "hausdorff", "chamfer", "fls_id", "dark", "final_error",
                  "sent", "received")


def write_export_csv(data: dict, path) -> None:
    """One tidy table: ``record`` is ``metrics`` or ``fls``; unused cells are empty."""
    with open(path, "w") as fh:
        fh.write(",".join(EXPORT_COLUMNS) + "\n")
        for kind in ("metrics", "fls"):
            for row in data[kind]:
                cells = [kind] + ["" if row.get(c) is None else repr(row[c])
                                  for c in EXPORT_COLUMNS[1:]]
                fh.write(",".join(cells) + "\n")


def read_export_csv(path) -> dict:
    data = {"metrics": [], "fls": []}
    ints = {"fls_id", "dark", "sent", "received"}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            cells = dict(zip(header, line.rstrip("\n").split(",")))
            kind = cells.pop("record")
            data[kind].append({k: (int(v) if k in ints else float(v))
                               for k, v in cells.items() if v != ""})
    return data


def cmd_export(args) -> int:
    data = export_dataset(args.results, args.ground_truth, args.interval)
    out = args.out or os.path.join(args.results, f"export.{args.format}")
    if args.format == "json":
        with open(out, "w") as fh:
            json.dump(data, fh, indent=1)
            fh.write("\n")
    else:
        write_export_csv(data, out)
    print(f"export: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    paths = generate_sweep(SweepTemplate.load(args.template), args.out)
    print(f"configs: {len(paths)} in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swarmloc", description="Plan and simulate FLS swarm localization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("plan", help="plan FLS groups, anchors and swarms for a shape")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", help="OBJ triangle mesh")
    src.add_argument("--grid", help="synthetic grid cloud, RxC:spacing")
    sp.add_argument("--radius", type=float, default=0.02, help="FLS radius in meters")
    sp.add_argument("--min-range", type=float, default=0.05)
    sp.add_argument("--max-range", type=float, default=0.6)
    sp.add_argument("--swarm-size", type=int, default=25, help="group size G")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, help="number of FLSs (mesh only; default from area)")
    sp.add_argument("--cell-size", type=float, default=2.0,
                    help="cell side in FLS radii for the default count")
    sp.add_argument("--out", default="plan_out")
    sp.set_defaults(func=cmd_plan)

    rp = sub.add_parser("run", help="run a localization experiment")
    rp.add_argument("--plan")
    rp.add_argument("--config", help="flat key = value config file")
    rp.add_argument("--duration", type=float)
    rp.add_argument("--mode", choices=["deterministic", "wallclock"])
    rp.add_argument("--seed", type=int)
    rp.add_argument("--alpha", type=float, help="dead-reckoning error bound in degrees")
    rp.add_argument("--dispatcher", help="x,y,z or below:H")
    rp.add_argument("--policy", choices=["cascade", "continuous"])
    rp.add_argument("--transport", choices=["bus", "udp"])
    rp.add_argument("--tick-ms", type=float)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_run)

    mp = sub.add_parser("metrics", help="Hausdorff and Chamfer distance over time")
    mp.add_argument("results")
    mp.add_argument("--ground-truth", help="id,x,y,z CSV (default: bright FLSs of plan.json)")
    mp.add_argument("--interval", type=float, help="seconds (default: tick interval)")
    mp.add_argument("--out")
    mp.set_defaults(func=cmd_metrics)

    wp = sub.add_parser("sweep", help="expand a sweep template into config files")
    wp.add_argument("template", help='JSON: {"base": {...}, "varying": {key: [values]}}')
    wp.add_argument("--out", required=True)
    wp.set_defaults(func=cmd_sweep)

    ep = sub.add_parser("export", help="consolidated plot-ready dataset")
    ep.add_argument("results")
    ep.add_argument("--format", choices=["csv", "json"], default="csv")
    ep.add_argument("--ground-truth")
    ep.add_argument("--interval", type=float)
    ep.add_argument("--out")
    ep.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SwarmLocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

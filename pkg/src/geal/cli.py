"""Command-line pipeline driver.

Subcommands: gen-synthetic, extract-clusters, select, baseline, report.
A flat key=value config file can pre-set any flag of the chosen subcommand;
explicit flags win. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import baselines, feature_store, knowledge_clusters, report, selector
from .errors import GealError


def _load_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise GealError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _progress(enabled):
    if not enabled:
        return None

    def show(done, total):
        print(f"processed {done}/{total}", file=sys.stderr)

    return show


def _add_common(p):
    p.add_argument("--config", help="flat key=value file supplying flag defaults")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="plain-text progress on stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="geal",
        description="One-shot diversity selection over knowledge clusters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic feature dump")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--regions", type=int, default=49)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--clean-clusters", type=int, default=8)
    p.add_argument("--spread", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--id-prefix", default="img")

    p = sub.add_parser("extract-clusters", help="build knowledge clusters from a dump")
    _add_common(p)
    p.add_argument("--dump")
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=knowledge_clusters.DEFAULT_TAU)
    p.add_argument("--k", type=int, default=knowledge_clusters.DEFAULT_K)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--distance", choices=selector.DISTANCE_KINDS, default="cosine",
                   help="distance the clusters are destined for (cosine forbids "
                        "all-zero patch rows)")
    p.add_argument("--summary-json", help="write the extraction summary here")

    p = sub.add_parser("select", help="run the one-shot selection loop")
    _add_common(p)
    p.add_argument("--clusters")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", choices=selector.STRATEGIES, default="probabilistic")
    p.add_argument("--distance", choices=selector.DISTANCE_KINDS, default="cosine")
    p.add_argument("--tau", type=float, default=knowledge_clusters.DEFAULT_TAU,
                   help="echoed into the result for provenance")
    p.add_argument("--k", type=int, default=knowledge_clusters.DEFAULT_K,
                   help="echoed into the result for provenance")
    p.add_argument("--trials", type=int, default=1,
                   help="run this many selections with seeds seed..seed+T-1")
    p.add_argument("--out-dir", help="write ids + result JSON per trial here")

    p = sub.add_parser("baseline", help="k-center greedy or random baseline")
    _add_common(p)
    p.add_argument("--dump", help="feature dump (required for kcenter)")
    p.add_argument("--ids-from", help="cluster file or dump supplying ids for random")
    p.add_argument("--method", choices=("kcenter", "random"))
    p.add_argument("--distance", choices=selector.DISTANCE_KINDS, default="cosine")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")

    p = sub.add_parser("report", help="coverage / instance / timing reports")
    _add_common(p)
    p.add_argument("--result", help="selection result JSON")
    p.add_argument("--clusters", help="cluster file (enables coverage stats)")
    p.add_argument("--distance", choices=selector.DISTANCE_KINDS, default="cosine")
    p.add_argument("--manifest", help="annotation CSV (enables instance totals)")
    p.add_argument("--timing", nargs="*", default=None,
                   help="JSON files with timings_ms (enables the timing table)")
    p.add_argument("--out-dir", help="write CSV/text reports here")
    return parser


def _apply_config_defaults(parser, argv):
    # pre-scan for --config so file values become defaults that flags override
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _load_config_file(known.config)
    for action in parser._subparsers._group_actions[0].choices.values():
        defaults = {}
        for act in action._actions:
            if act.dest in values:
                raw = values[act.dest]
                if act.type is int:
                    defaults[act.dest] = int(raw)
                elif act.type is float:
                    defaults[act.dest] = float(raw)
                else:
                    defaults[act.dest] = raw
        if defaults:
            action.set_defaults(**defaults)


def _result_paths(out_dir, stem):
    return os.path.join(out_dir, stem + ".ids"), os.path.join(out_dir, stem + ".json")


def _write_result(result, out_dir, stem):
    os.makedirs(out_dir, exist_ok=True)
    ids_path, json_path = _result_paths(out_dir, stem)
    result.write_ids(ids_path)
    _json_dump(result.to_dict(), json_path)
    return ids_path, json_path


def _cmd_gen_synthetic(args):
    noise = feature_store.NoiseSpec(
        sigma=args.sigma,
        clean_cluster_count=args.clean_clusters,
        spread=args.spread,
    )
    records = feature_store.generate_synthetic(
        args.images, args.regions, args.dim, noise, args.seed,
        id_prefix=args.id_prefix,
    )
    count = feature_store.write_dump(records, args.out)
    print(f"wrote {count} records to {args.out}")
    return 0


def _cmd_extract_clusters(args):
    summary = knowledge_clusters.extract_all(
        args.dump,
        args.out,
        tau=args.tau,
        k=args.k,
        seed=args.seed,
        workers=args.workers,
        require_nonzero_rows=(args.distance == "cosine"),
        progress=_progress(args.verbose),
    )
    if args.summary_json:
        _json_dump(summary, args.summary_json)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_select(args):
    pool = selector.ClusterPool.load(args.clusters)
    summary = {"trials": [], "strategy": args.strategy, "budget": args.budget}
    for trial in range(args.trials):
        config = selector.SelectionConfig(
            tau=args.tau,
            k=args.k,
            distance=args.distance,
            strategy=args.strategy,
            budget=args.budget,
            seed=args.seed + trial,
            trials=args.trials,
        )
        result = selector.select(pool, config)
        if args.out_dir:
            ids_path, json_path = _write_result(
                result, args.out_dir, f"select_seed{config.seed}"
            )
            summary["trials"].append(
                {
                    "seed": config.seed,
                    "ids": os.path.basename(ids_path),
                    "result": os.path.basename(json_path),
                    "total_ms": result.timings_ms["total"],
                }
            )
        if args.trials == 1:
            for image_id in result.selected:
                print(image_id)
    if args.out_dir and args.trials > 1:
        _json_dump(summary, os.path.join(args.out_dir, "select_summary.json"))
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_baseline(args):
    if args.method == "kcenter":
        if not args.dump:
            raise GealError("baseline kcenter requires --dump")
        config = baselines.BaselineConfig(
            method="kcenter_global",
            distance=args.distance,
            budget=args.budget,
            seed=args.seed,
        )
        result = baselines.kcenter_greedy(args.dump, config)
    else:
        source = args.ids_from or args.dump
        if not source:
            raise GealError("baseline random requires --ids-from or --dump")
        with open(source, "rb") as f:
            magic = f.read(8)
        if magic == knowledge_clusters.KC_MAGIC:
            ids = [rec.image_id for rec in knowledge_clusters.iter_cluster_file(source)]
        else:
            ids = [rec.image_id for rec in feature_store.read_dump(source)]
        result = baselines.random_select(ids, args.budget, args.seed)
    if args.out_dir:
        _write_result(result, args.out_dir, f"{args.method}_seed{args.seed}")
    for image_id in result.selected:
        print(image_id)
    return 0


def _cmd_report(args):
    wrote = []
    out_dir = args.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def emit(name, text):
        if out_dir:
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
            wrote.append(path)
        else:
            print(text)

    result = None
    if args.result:
        with open(args.result, encoding="utf-8") as f:
            doc = json.load(f)
        result = selector.SelectionResult(
            selected=doc["selected"],
            steps=doc.get("steps", []),
            config=doc.get("config", {}),
            seed=doc.get("seed", 0),
            timings_ms=doc.get("timings_ms", {}),
            method=doc.get("method", "geal"),
        )
    if args.clusters:
        if result is None:
            raise GealError("coverage stats need --result")
        stats = report.coverage_stats(result, args.clusters, args.distance)
        emit("coverage.csv", report.coverage_csv(stats))
        emit("coverage.txt", report.coverage_text(stats))
        print(
            f"covering_radius={stats['covering_radius']:.6g} "
            f"mean_min_dist={stats['mean_min_dist']:.6g}"
        )
    if args.manifest:
        if result is None:
            raise GealError("instance totals need --result")
        manifest = report.AnnotationManifest.load_csv(args.manifest)
        totals = report.instance_totals(result, manifest)
        emit("instances.csv", report.instances_csv(totals))
        emit("instances.txt", report.instances_text(totals))
        print(f"total_instances={totals['total_instances']}")
    if args.timing is not None:
        entries = []
        for path in args.timing:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
            entries.append(
                {
                    "label": os.path.splitext(os.path.basename(path))[0],
                    "phases": {
                        k: v
                        for k, v in doc.get("timings_ms", {}).items()
                        if isinstance(v, (int, float))
                    },
                }
            )
        summary = report.timing_summary(entries)
        emit("timing.csv", report.timing_csv(summary))
        emit("timing.txt", report.timing_text(summary))
        if out_dir:
            print(report.timing_text(summary), end="")
    if wrote:
        print("wrote " + ", ".join(wrote))
    return 0


_HANDLERS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "extract-clusters": _cmd_extract_clusters,
    "select": _cmd_select,
    "baseline": _cmd_baseline,
    "report": _cmd_report,
}


_REQUIRED = {
    "gen-synthetic": ("out",),
    "extract-clusters": ("dump", "out"),
    "select": ("clusters", "budget"),
    "baseline": ("method", "budget"),
    "report": (),
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        missing = [n for n in _REQUIRED[args.command]
                   if getattr(args, n, None) is None]
        if missing:
            flags = ", ".join("--" + n.replace("_", "-") for n in missing)
            print(f"usage error: {args.command} requires {flags} "
                  "(flag or config file)", file=sys.stderr)
            return 2
        return _HANDLERS[args.command](args)
    except GealError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

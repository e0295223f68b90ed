"""Post-hoc selection analytics: coverage/diversity statistics, ground-truth
instance totals, and wall-clock timing tables.

Nothing here feeds back into selection; annotation counts are used strictly
for after-the-fact analysis.
"""

from __future__ import annotations

import csv
import io
import os

import numpy as np

from ._engine import build_engine
from .errors import ValidationError
from .selector import ClusterPool

HISTOGRAM_BINS = 50


class AnnotationManifest:
    """image_id -> non-negative instance count, loaded from a two-column CSV."""

    def __init__(self, counts: dict):
        for image_id, c in counts.items():
            if c < 0:
                raise ValidationError(
                    f"instance_count for {image_id!r} must be >= 0, got {c}",
                    image_id=image_id,
                )
        self.counts = dict(counts)

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, image_id):
        return self.counts[image_id]

    def __contains__(self, image_id):
        return image_id in self.counts

    @classmethod
    def load_csv(cls, path) -> "AnnotationManifest":
        counts = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["image_id", "instance_count"]:
                raise ValidationError(
                    f"manifest {os.fspath(path)!r} must start with header "
                    f"'image_id,instance_count', got {header}"
                )
            for row in reader:
                if len(row) != 2:
                    raise ValidationError(f"malformed manifest row: {row}")
                counts[row[0]] = int(row[1])
        return cls(counts)

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["image_id", "instance_count"])
            for image_id in self.counts:
                writer.writerow([image_id, self.counts[image_id]])


def _selected_indices(result, pool):
    index = {image_id: i for i, image_id in enumerate(pool.ids)}
    missing = [s for s in result.selected if s not in index]
    if missing:
        raise ValidationError(f"selected ids not in cluster file: {missing[:10]}")
    return [index[s] for s in result.selected]


def coverage_stats(result, clusters, distance: str = "cosine") -> dict:
    """Covering radius, mean min distance, and a histogram of min distances.

    The covering radius is the max over every cluster in the pool of its
    distance to the nearest selected image's cluster, the k-center objective
    used as a diversity proxy.
    """
    pool = clusters if isinstance(clusters, ClusterPool) else ClusterPool.load(clusters)
    chosen = _selected_indices(result, pool)
    engine = build_engine(pool.vecs, distance, seed=0)
    for i in chosen:
        start, stop = pool.slices[i]
        engine.update(pool.vecs[start:stop].astype(np.float64))
        engine.zero_rows(engine.invmap[start:stop])
    md = engine.min_dist
    radius = float(md.max())
    hi = radius if radius > 0 else 1.0
    counts, edges = np.histogram(md, bins=HISTOGRAM_BINS, range=(0.0, hi))
    return {
        "covering_radius": radius,
        "mean_min_dist": float(md.mean()),
        "histogram": {"bin_edges": edges.tolist(), "counts": counts.tolist()},
        "distance": distance,
        "selected": len(chosen),
        "clusters": pool.cluster_count,
    }


def instance_totals(result, manifest: AnnotationManifest) -> dict:
    """Total annotated instances over the selection, plus the cumulative curve."""
    missing = [s for s in result.selected if s not in manifest]
    if missing:
        raise ValidationError(f"selected ids missing from manifest: {missing[:10]}")
    per_step = [manifest[s] for s in result.selected]
    cumulative = np.cumsum(per_step).tolist() if per_step else []
    return {
        "total_instances": int(sum(per_step)),
        "per_step": per_step,
        "cumulative": cumulative,
    }


def timing_summary(entries) -> dict:
    """Tabulate per-phase wall-clock times.

    `entries` is a list of {"label": str, "phases": {name: ms}}; rows carry a
    per-entry total and the totals row sums every phase across entries.
    """
    rows = []
    phase_names = []
    for e in entries:
        for name in e["phases"]:
            if name not in phase_names:
                phase_names.append(name)
    totals = dict.fromkeys(phase_names, 0.0)
    for e in entries:
        phases = {name: float(e["phases"].get(name, 0.0)) for name in phase_names}
        for name, v in phases.items():
            totals[name] += v
        rows.append({"label": e["label"], "phases": phases,
                     "total_ms": sum(phases.values())})
    return {
        "phase_names": phase_names,
        "rows": rows,
        "totals": totals,
        "total_ms": sum(totals.values()),
    }


def timing_csv(summary) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["label"] + summary["phase_names"] + ["total_ms"])
    for row in summary["rows"]:
        writer.writerow(
            [row["label"]]
            + [f"{row['phases'][p]:.3f}" for p in summary["phase_names"]]
            + [f"{row['total_ms']:.3f}"]
        )
    writer.writerow(
        ["TOTAL"]
        + [f"{summary['totals'][p]:.3f}" for p in summary["phase_names"]]
        + [f"{summary['total_ms']:.3f}"]
    )
    return out.getvalue()


def timing_text(summary) -> str:
    names = summary["phase_names"]
    widths = [max(len("label"), *(len(r["label"]) for r in summary["rows"]), 5)]
    lines = []
    header = "label".ljust(widths[0]) + "".join(f"{n:>16}" for n in names) + f"{'total_ms':>16}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in summary["rows"]:
        lines.append(
            row["label"].ljust(widths[0])
            + "".join(f"{row['phases'][n]:>16.3f}" for n in names)
            + f"{row['total_ms']:>16.3f}"
        )
    lines.append(
        "TOTAL".ljust(widths[0])
        + "".join(f"{summary['totals'][n]:>16.3f}" for n in names)
        + f"{summary['total_ms']:>16.3f}"
    )
    return "\n".join(lines) + "\n"


def coverage_csv(stats) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["metric", "value"])
    writer.writerow(["covering_radius", f"{stats['covering_radius']:.9g}"])
    writer.writerow(["mean_min_dist", f"{stats['mean_min_dist']:.9g}"])
    writer.writerow(["selected", stats["selected"]])
    writer.writerow(["clusters", stats["clusters"]])
    writer.writerow([])
    writer.writerow(["bin_left", "bin_right", "count"])
    edges = stats["histogram"]["bin_edges"]
    for i, c in enumerate(stats["histogram"]["counts"]):
        writer.writerow([f"{edges[i]:.9g}", f"{edges[i + 1]:.9g}", c])
    return out.getvalue()


def instances_csv(totals) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["step", "instance_count", "cumulative"])
    for i, (c, cum) in enumerate(zip(totals["per_step"], totals["cumulative"])):
        writer.writerow([i, c, cum])
    writer.writerow([])
    writer.writerow(["total_instances", totals["total_instances"], ""])
    return out.getvalue()


def coverage_text(stats) -> str:
    lines = [
        f"covering_radius  {stats['covering_radius']:.9g}",
        f"mean_min_dist    {stats['mean_min_dist']:.9g}",
        f"selected images  {stats['selected']}",
        f"clusters in pool {stats['clusters']}",
        f"distance         {stats['distance']}",
    ]
    return "\n".join(lines) + "\n"


def instances_text(totals) -> str:
    lines = [f"total_instances {totals['total_instances']}"]
    if totals["cumulative"]:
        lines.append("cumulative curve: "
                     + " ".join(str(c) for c in totals["cumulative"]))
    return "\n".join(lines) + "\n"

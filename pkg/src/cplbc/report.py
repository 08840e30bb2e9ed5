"""Run reports: per-seed results, aggregates, CSV traces and the comparison table."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

METRICS = ("ap50", "ap75", "ap", "fdr")
TRACE_COLUMNS = ("epoch", "EP", "threshold", "objects_weighted", "mean_weight",
                 "train_loss_f", "train_loss_g")

# display order and names of the comparison table rows
ROW_ORDER = (
    ("as", None, "AS"),
    ("es", None, "ES"),
    ("spl-hard", "esp", "SPL-BH"),
    ("spl-hard", "asp", "SPL-BH"),
    ("spl-linear", "esp", "SPL-BLine"),
    ("spl-linear", "asp", "SPL-BLine"),
    ("spl-log", "esp", "SPL-BLog"),
    ("spl-log", "asp", "SPL-BLog"),
    ("spl-poly", "esp", "SPL-BPoly"),
    ("spl-poly", "asp", "SPL-BPoly"),
    ("spl-bc", "esp", "SPL-BC"),
    ("spl-bc", "asp", "SPL-BC"),
    ("cpl-bc", "esp", "CPL-BC"),
    ("cpl-bc", "asp", "CPL-BC"),
)


def row_rank(strategy: str, prior: Optional[str]) -> int:
    for i, (s, p, _) in enumerate(ROW_ORDER):
        if s == strategy and p == prior:
            return i
    return len(ROW_ORDER)


def display_name(strategy: str) -> str:
    for s, _, name in ROW_ORDER:
        if s == strategy:
            return name
    return strategy


@dataclass
class SeedResult:
    seed: int
    metrics: dict  # metric -> value
    trace: list = field(default_factory=list)  # trace rows
    wall_time: float = 0.0
    checkpoints: dict = field(default_factory=dict)  # model name -> sha256
    error: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunReport:
    strategy: str
    prior: Optional[str]
    config: dict
    seeds: list = field(default_factory=list)  # SeedResult

    def aggregate(self) -> dict:
        return aggregate([s.metrics for s in self.seeds if s.ok])

    def to_dict(self) -> dict:
        body = {
            "strategy": self.strategy,
            "prior": self.prior,
            "config": self.config,
            "config_checksum": config_checksum(self.config),
            "code_checksum": code_checksum(),
            "seeds": [{"seed": s.seed, "metrics": s.metrics, "trace": s.trace,
                       "wall_time": s.wall_time, "checkpoints": s.checkpoints,
                       "error": s.error} for s in self.seeds],
            "aggregate": self.aggregate(),
        }
        return body

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        seeds = [SeedResult(seed=s["seed"], metrics=s["metrics"], trace=s.get("trace", []),
                            wall_time=s.get("wall_time", 0.0), checkpoints=s.get("checkpoints", {}),
                            error=s.get("error")) for s in d["seeds"]]
        return cls(strategy=d["strategy"], prior=d.get("prior"), config=d.get("config", {}), seeds=seeds)


def aggregate(per_seed: list) -> dict:
    """Mean and population stddev of every metric over seeds."""
    out = {}
    for k in METRICS:
        vals = [m[k] for m in per_seed if k in m]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


def config_checksum(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def code_checksum() -> str:
    """sha256 over the package's Python sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def trace_csv(rows: list) -> str:
    """Trace rows as CSV; single-model strategies leave train_loss_g blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get("epoch")), _fmt(r.get("ep")), _fmt(r.get("threshold")),
                    _fmt(r.get("objects_weighted")), _fmt(r.get("mean_weight")),
                    _fmt(r.get("train_loss_f")), _fmt(r.get("train_loss_g"))])
    return buf.getvalue()


def per_seed_csv(reports: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("strategy", "prior", "seed") + METRICS + ("wall_time", "error"))
    for r in sorted(reports, key=lambda r: row_rank(r.strategy, r.prior)):
        for s in r.seeds:
            w.writerow([r.strategy, r.prior or "", s.seed]
                       + [_fmt(s.metrics.get(k)) for k in METRICS]
                       + [f"{s.wall_time:.2f}", (s.error or {}).get("message", "")])
    return buf.getvalue()


def markdown_table(reports: list) -> str:
    """One row per (strategy, prior): mean over seeds with stddev in parentheses."""
    lines = ["| Training strategy | Prior type | AP50 | AP75 | AP | FDR |",
             "|---|---|---|---|---|---|"]
    for r in sorted(reports, key=lambda r: row_rank(r.strategy, r.prior)):
        agg = r.aggregate()
        cells = []
        for k in METRICS:
            a = agg.get(k)
            cells.append(f"{a['mean']:.3f} ({a['std']:.3f})" if a else "failed")
        prior = (r.prior or "").upper() or "-"
        lines.append(f"| {display_name(r.strategy)} | {prior} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- optional figures -----------------------------------------------------------------

def _save_svg(fig, path) -> None:
    import matplotlib
    import matplotlib.pyplot as plt

    # fixed id salt and no date stamp keep the file byte-identical across runs
    with matplotlib.rc_context({"svg.hashsalt": "cplbc"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_schedule_svg(schedule, path, points: int = 201) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .curriculum import schedule_xi

    ep = np.linspace(0.0, 1.0, points)
    xi = [schedule_xi(schedule, e) for e in ep]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ep, xi)
    ax.set_xlabel("training progress EP")
    ax.set_ylabel("confidence threshold")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    _save_svg(fig, path)


def plot_pr_svg(curves: dict, path) -> None:
    """``curves`` maps a label to (precision, recall) arrays."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for label, (p, r) in curves.items():
        ax.step(r, p, where="post", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)

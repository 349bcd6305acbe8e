"""Collect ``summary.json`` files into an attacks x aggregators table of final TER."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackKind
from .sim import AGGREGATORS

MISSING = "—"


@dataclass
class RunSummary:
    attack: str
    aggregator: str
    seed: int
    final_ter: float
    ter: list[float]
    stage_switch: int


@dataclass
class ReportTable:
    attacks: list[str]
    aggregators: list[str]
    cells: dict[tuple[str, str], list[float]]
    curves: dict[tuple[str, str], list[list[float]]] = field(default_factory=dict)
    stage_switch: int | None = None

    def cell_text(self, attack: str, agg: str) -> str:
        vals = self.cells.get((attack, agg))
        if not vals:
            return MISSING
        return f"{100 * np.mean(vals):.2f} ± {100 * np.std(vals):.2f}"

    def rows(self) -> list[list[str]]:
        return [[a] + [self.cell_text(a, g) for g in self.aggregators] for a in self.attacks]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", *self.aggregators])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        table = [["attack", *self.aggregators], *self.rows()]
        widths = [max(len(r[j]) for r in table) for j in range(len(table[0]))]
        lines = ["  ".join(c.ljust(wd) if j == 0 else c.rjust(wd) for j, (c, wd) in
                           enumerate(zip(r, widths))).rstrip() for r in table]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines) + "\n"


def run_label(cfg: dict) -> str:
    """Aggregator name, tagged when an ablation switch is off."""
    label = cfg["aggregator"]
    if not cfg.get("use_acdg", True):
        label += "-noACDG"
    if not cfg.get("use_ra", True):
        label += "-noRA"
    return label


def read_summaries(results_dir: str | Path) -> list[RunSummary]:
    out = []
    for path in sorted(Path(results_dir).glob("*/summary.json")):
        doc = json.loads(path.read_text())
        cfg = doc["config"]
        out.append(RunSummary(cfg["attack"]["kind"], run_label(cfg), cfg["seed"],
                              doc["final_ter"], doc["ter"], cfg["stage_switch"]))
    return out


def _ordered(values, canonical) -> list[str]:
    seen = set(values)
    head = [v for v in canonical if v in seen]
    return head + sorted(seen - set(head))


def build_table(runs: list[RunSummary]) -> ReportTable:
    cells: dict[tuple[str, str], list[float]] = {}
    curves: dict[tuple[str, str], list[list[float]]] = {}
    for r in sorted(runs, key=lambda r: (r.attack, r.aggregator, r.seed)):
        cells.setdefault((r.attack, r.aggregator), []).append(r.final_ter)
        curves.setdefault((r.attack, r.aggregator), []).append(r.ter)
    attacks = _ordered({r.attack for r in runs}, [k.value for k in AttackKind])
    canon = [f"{a}{s}" for a in AGGREGATORS for s in ("", "-noACDG", "-noRA", "-noACDG-noRA")]
    aggs = _ordered({r.aggregator for r in runs}, canon)
    switches = {r.stage_switch for r in runs}
    return ReportTable(attacks, aggs, cells, curves, switches.pop() if len(switches) == 1 else None)

"""Two-stage federated training loop, adversary scheduling and metrics.

Rounds ``1..stage_switch`` are condensation rounds: clients condense their shards,
the server rectifies the pooled labels and trains the global model on the
pseudo-labeled pool. Later rounds are ordinary local-training rounds whose
updates go through the configured aggregation rule.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import aggregate as agg
from .acdg import AcdgConfig, AuditRow, WindowPool, pool_window, run_acdg_round, write_audit
from .attacks import AttackConfig, AttackKind, BenignView, dlf_labels, dyn_opt, lie, slf_labels, stat_opt
from .condense import CondensedSet, DmConfig, generate_condensed
from .core import Rng, make_rng, norm
from .data import Dataset, dirichlet_partition, train_test_blobs
from .nn import (NetParams, NetSpec, RectifierNet, ce_loss, flatten, init_params, one_hot, predict_proba,
                 sgd_epochs, unflatten)

log = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "multi_krum", "trimmed_mean", "bulyan", "fltrust", "fedidm")
NO_RA_MODES = ("corrected_mean", "raw_mean")

# stream tags for make_rng(seed, round, client, tag)
_INIT, _PART, _COND, _ATTACK, _LOCAL, _ACDG, _SERVER, _ORACLE, _DEDUP, _SCHED = range(10)


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 4
    input_dim: int = 16
    n_per_class: int = 200
    n_test_per_class: int = 100
    separation: float = 6.0
    std: float = 1.0
    concentration: float = 0.5


@dataclass(frozen=True)
class SimConfig:
    n_clients: int = 20
    clients_per_round: int = 20
    total_rounds: int = 60
    stage_switch: int = 15
    local_epochs: int = 1
    local_lr: float = 0.1
    batch_size: int = 32
    hidden: tuple[int, ...] = (32,)
    emb_dim: int = 16
    seed: int = 0
    aggregator: str = "fedidm"
    byzantine_f: int | None = None
    trim_fraction: float = 0.2
    use_acdg: bool = True
    use_ra: bool = True
    no_ra_mode: str = "corrected_mean"
    continue_condensation: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)
    ra: agg.RaConfig = field(default_factory=agg.RaConfig)
    dm: DmConfig = field(default_factory=DmConfig)
    acdg: AcdgConfig = field(default_factory=AcdgConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "SimConfig":
        if not 0 < self.stage_switch < self.total_rounds:
            raise ValueError("need 0 < stage_switch < total_rounds")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError("need 1 <= clients_per_round <= n_clients")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATORS}")
        if self.local_epochs < 0 or self.local_lr < 0 or self.batch_size < 1:
            raise ValueError("local_epochs, local_lr must be non-negative and batch_size positive")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must be in [0, 0.5)")
        if self.no_ra_mode not in NO_RA_MODES:
            raise ValueError(f"no_ra_mode must be one of {NO_RA_MODES}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        return self


@dataclass
class RoundRecord:
    round: int
    stage: str
    adversarial: bool
    ter: float
    accepted: int = 0
    rejected_negative: int = 0
    rejected_cluster: int = 0
    rejected_loss: int = 0
    skipped: bool = False
    report: agg.ContributionReport | None = None
    audit: list[AuditRow] | None = None
    wall_time: float = 0.0


@dataclass
class RectificationMetrics:
    rsr: float | None
    fpr: float | None
    fnr: float | None
    n_flipped: int
    n_clean: int


@dataclass
class MetricSummary:
    final_ter: float
    ter: list[float]
    rsr: float | None
    fpr: float | None
    fnr: float | None
    n_skipped: int
    records: list[RoundRecord] = field(repr=False, default_factory=list)

    def to_json_dict(self, config: dict[str, Any]) -> dict[str, Any]:
        return {"final_ter": self.final_ter, "rsr": self.rsr, "fpr": self.fpr, "fnr": self.fnr,
                "n_skipped": self.n_skipped, "ter": self.ter, "config": config}


class InvariantViolation(RuntimeError):
    """A run finished in a state the simulator guarantees cannot happen."""


def check_invariants(summary: "MetricSummary", cfg: SimConfig) -> None:
    recs = summary.records
    if [r.round for r in recs] != list(range(1, cfg.total_rounds + 1)):
        raise InvariantViolation("expected exactly one record per round")
    for r in recs:
        want = "ACDG" if r.round <= cfg.stage_switch else "RA"
        if r.stage != want:
            raise InvariantViolation(f"round {r.round} ran stage {r.stage}, expected {want}")
        if not 0.0 <= r.ter <= 1.0:
            raise InvariantViolation(f"round {r.round}: TER {r.ter} outside [0, 1]")
    if summary.rsr is not None and abs(summary.rsr + summary.fnr - 1.0) > 1e-12:
        raise InvariantViolation("RSR + FNR != 1")


# -- small operations --------------------------------------------------------------


def schedule_adversarial(total_rounds: int, fraction: float, rng: Rng) -> set[int]:
    """Uniformly random subset of rounds ``1..total_rounds`` of size round(fraction * total)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    k = int(round(fraction * total_rounds))
    return {int(r) + 1 for r in rng.choice(total_rounds, size=k, replace=False)}


def local_train(shard: Dataset, w: NetParams, local_epochs: int, local_lr: float, rng: Rng,
                batch_size: int = 32, labels: np.ndarray | None = None) -> np.ndarray:
    """Minibatch SGD from ``w``; returns ``flatten(w) - flatten(w_after)``."""
    if len(shard) == 0:
        raise ValueError("empty shard")
    y = shard.y if labels is None else labels
    after = sgd_epochs(w, shard.X, one_hot(y, shard.n_classes), local_epochs, local_lr,
                       batch_size, rng)
    return flatten(w) - flatten(after)


def compute_ter(w: NetParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_proba(w, test.X), axis=1)
    return float(np.mean(pred != test.y))


def compute_rectification_metrics(pseudo, claimed, honest) -> RectificationMetrics:
    """RSR/FNR over flipped points (claimed != honest), FPR over the clean ones."""
    pseudo = np.asarray(pseudo)
    claimed = np.asarray(claimed)
    honest = np.asarray(honest)
    flipped = claimed != honest
    nf, nc = int(flipped.sum()), int((~flipped).sum())
    rsr = float(np.mean(pseudo[flipped] == honest[flipped])) if nf else None
    fpr = float(np.mean(pseudo[~flipped] != claimed[~flipped])) if nc else None
    return RectificationMetrics(rsr, fpr, None if rsr is None else 1.0 - rsr, nf, nc)


# -- aggregation rules ---------------------------------------------------------------


@dataclass
class RoundContext:
    w: NetParams
    g_s: np.ndarray | None
    loss_fn: Callable[[np.ndarray], float] | None
    rng: Rng


@dataclass
class AggOut:
    update: np.ndarray
    kept: np.ndarray
    report: agg.ContributionReport | None = None


class Rule:
    """Aggregation rule seen by the server loop and by the adversary's oracle."""

    name = "rule"

    def __call__(self, updates: np.ndarray, ctx: RoundContext) -> AggOut:
        raise NotImplementedError

    def commit(self, g: np.ndarray) -> None:
        """Called with the applied global update; stateful rules override."""


class FedAvgRule(Rule):
    name = "fedavg"

    def __call__(self, updates, ctx):
        return AggOut(agg.fedavg(updates), np.ones(len(updates), dtype=bool))


class MultiKrumRule(Rule):
    name = "multi_krum"

    def __init__(self, f: int):
        self.f = f

    def __call__(self, updates, ctx):
        sel = agg.krum_select(updates, self.f)
        kept = np.zeros(len(updates), dtype=bool)
        kept[sel] = True
        return AggOut(updates[sel].mean(axis=0), kept)


class TrimmedMeanRule(Rule):
    name = "trimmed_mean"

    def __init__(self, b: float):
        self.b = b

    def __call__(self, updates, ctx):
        mask = agg.trimmed_keep_mask(updates, self.b)
        return AggOut(agg.trimmed_mean(updates, self.b), mask.mean(axis=1) >= 0.5)


class BulyanRule(Rule):
    name = "bulyan"

    def __init__(self, f: int):
        self.f = f

    def __call__(self, updates, ctx):
        kept = np.zeros(len(updates), dtype=bool)
        kept[agg.bulyan_select(updates, self.f)] = True
        return AggOut(agg.bulyan(updates, self.f), kept)


class FLTrustRule(Rule):
    name = "fltrust"

    def __call__(self, updates, ctx):
        return AggOut(agg.fltrust_like(updates, ctx.g_s), agg.fltrust_trust(updates, ctx.g_s) > 0)


class FedIDMRule(Rule):
    name = "fedidm"

    def __init__(self, cfg: agg.RaConfig, use_ra: bool = True, no_ra_mode: str = "corrected_mean"):
        self.cfg = cfg
        self.use_ra = use_ra
        self.no_ra_mode = no_ra_mode
        self.history = agg.UpdateHistory(cfg.delta_hist)

    def __call__(self, updates, ctx):
        if not self.use_ra:
            g = (agg.fedavg(updates) if self.no_ra_mode == "raw_mean"
                 else agg.corrected_mean(updates, self.history, self.cfg))
            return AggOut(g, np.ones(len(updates), dtype=bool))
        g, rep = agg.fedidm_aggregate(updates, self.history, ctx.g_s, flatten(ctx.w),
                                      ctx.loss_fn, self.cfg, ctx.rng)
        kept = np.zeros(len(updates), dtype=bool)
        kept[rep.kept] = True
        return AggOut(g, kept, rep)

    def commit(self, g):
        if norm(g) > 0:
            self.history.push(g)


def build_rule(cfg: SimConfig, n_selected: int) -> Rule:
    name = cfg.aggregator
    if name == "fedavg":
        return FedAvgRule()
    if name == "multi_krum":
        f = cfg.byzantine_f if cfg.byzantine_f is not None else max((n_selected - 3) // 2, 0)
        return MultiKrumRule(f)
    if name == "bulyan":
        f = cfg.byzantine_f if cfg.byzantine_f is not None else max((n_selected - 3) // 4, 0)
        return BulyanRule(f)
    if name == "trimmed_mean":
        return TrimmedMeanRule(cfg.trim_fraction)
    if name == "fltrust":
        return FLTrustRule()
    return FedIDMRule(cfg.ra, cfg.use_ra, cfg.no_ra_mode)


# -- experiment ------------------------------------------------------------------------


@dataclass
class World:
    train: Dataset
    test: Dataset
    shards: list[Dataset]
    malicious: set[int]
    adversarial_rounds: set[int]


def build_world(cfg: SimConfig) -> World:
    d = cfg.data
    rng = make_rng(cfg.seed, 0, 0, _INIT)
    train, test = train_test_blobs(d.n_classes, d.input_dim, d.n_per_class, d.n_test_per_class,
                                   d.separation, rng, d.std)
    part = dirichlet_partition(train, cfg.n_clients, d.concentration, make_rng(cfg.seed, 0, 0, _PART))
    n_mal = int(round(cfg.attack.malicious_fraction * cfg.n_clients))
    if cfg.attack.kind == AttackKind.NONE:
        n_mal = 0
    srng = make_rng(cfg.seed, 0, 0, _SCHED)
    malicious = {int(i) for i in srng.choice(cfg.n_clients, size=n_mal, replace=False)}
    adv = (schedule_adversarial(cfg.total_rounds, cfg.attack.adversarial_round_fraction, srng)
           if n_mal else set())
    return World(train, test, [train.subset(s) for s in part.client_shards], malicious, adv)


def _flip(kind: AttackKind, y, X, n_classes: int, surrogate: NetParams) -> np.ndarray:
    return slf_labels(y, n_classes) if kind == AttackKind.SLF else dlf_labels(X, surrogate)


def run_experiment(cfg: SimConfig, out_dir: str | Path | None = None) -> MetricSummary:
    cfg.validate()
    world = build_world(cfg)
    d = cfg.data
    K = d.n_classes
    spec = NetSpec((d.input_dim, *cfg.hidden, K))
    w = init_params(spec, make_rng(cfg.seed, 0, 1, _INIT))
    rect = RectifierNet.create(d.input_dim, K, make_rng(cfg.seed, 0, 2, _INIT), cfg.hidden, cfg.emb_dim)
    rect_fresh = True
    history: deque[list[CondensedSet]] = deque(maxlen=cfg.acdg.delta)
    pool: WindowPool | None = None
    pseudo: np.ndarray | None = None
    rule: Rule | None = None
    attack = cfg.attack
    records: list[RoundRecord] = []
    rect_counts = [0, 0, 0, 0]  # flipped, flipped fixed, clean, clean changed

    for t in range(1, cfg.total_rounds + 1):
        t0 = time.perf_counter()
        adversarial = t in world.adversarial_rounds
        selected = _select(cfg, t)
        condensing = t <= cfg.stage_switch or cfg.continue_condensation

        if condensing:
            sets = []
            for c in selected:
                crng = make_rng(cfg.seed, t, c, _COND)
                S = generate_condensed(world.shards[c], cfg.dm, crng, classifier=w, round_tag=t,
                                       client_id=c)
                if adversarial and c in world.malicious and attack.kind.flips_labels:
                    S = S.with_labels(_flip(attack.kind, S.y, S.X, K, w))
                sets.append(S)
            history.append(sets)
            arng = make_rng(cfg.seed, t, 0, _ACDG)
            if cfg.use_acdg:
                res = run_acdg_round(list(history), rect, cfg.acdg, arng, round_idx=t, fresh=rect_fresh)
                rect, rect_fresh = res.net, False
                pool, pseudo, audit = res.pool, res.pseudo_labels, res.audit
            else:
                pool = pool_window(list(history), cfg.acdg.delta)
                pseudo = pool.y.copy()
                audit = [AuditRow(t, int(p), int(c), int(c), 1.0, int(h))
                         for p, c, h in zip(pool.point_ids, pool.y, pool.honest_y)]
            if adversarial and attack.kind.flips_labels:
                m = compute_rectification_metrics(pseudo, pool.y, pool.honest_y)
                rect_counts[0] += m.n_flipped
                rect_counts[1] += int(round((m.rsr or 0.0) * m.n_flipped))
                rect_counts[2] += m.n_clean
                rect_counts[3] += int(round((m.fpr or 0.0) * m.n_clean))

        if t <= cfg.stage_switch:
            w = sgd_epochs(w, pool.X, one_hot(pseudo, K), cfg.local_epochs, cfg.local_lr,
                           cfg.batch_size, make_rng(cfg.seed, t, 0, _SERVER))
            rec = RoundRecord(t, "ACDG", adversarial, compute_ter(w, world.test),
                              accepted=len(selected), audit=audit)
        else:
            if rule is None:
                rule = build_rule(cfg, len(selected))
            rec, w = _ra_round(cfg, world, t, selected, adversarial, w, pool, pseudo, rule)
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)

    ter = [r.ter for r in records]
    rsr = rect_counts[1] / rect_counts[0] if rect_counts[0] else None
    fpr = rect_counts[3] / rect_counts[2] if rect_counts[2] and rect_counts[0] else None
    summary = MetricSummary(ter[-1], ter, rsr, fpr, None if rsr is None else 1.0 - rsr,
                            sum(r.skipped for r in records), records)
    check_invariants(summary, cfg)
    if out_dir is not None:
        write_outputs(summary, cfg, Path(out_dir))
    return summary


def _select(cfg: SimConfig, t: int) -> list[int]:
    if cfg.clients_per_round == cfg.n_clients:
        return list(range(cfg.n_clients))
    rng = make_rng(cfg.seed, t, 0, _SCHED)
    return sorted(int(c) for c in rng.choice(cfg.n_clients, cfg.clients_per_round, replace=False))


def _ra_round(cfg: SimConfig, world: World, t: int, selected: list[int], adversarial: bool,
              w: NetParams, pool: WindowPool, pseudo: np.ndarray, rule: Rule
              ) -> tuple[RoundRecord, NetParams]:
    K = cfg.data.n_classes
    attack = cfg.attack
    spec = w.spec
    targets = one_hot(pseudo, K)
    w_flat = flatten(w)

    def loss_fn(v: np.ndarray) -> float:
        return ce_loss(unflatten(spec, v), pool.X, targets)

    g_s = w_flat - flatten(sgd_epochs(w, pool.X, targets, 1, cfg.local_lr, cfg.batch_size,
                                      make_rng(cfg.seed, t, 1, _SERVER)))
    mal_sel = [j for j, c in enumerate(selected) if adversarial and c in world.malicious]

    updates = []
    for c in selected:
        labels = None
        if adversarial and c in world.malicious and attack.kind.flips_labels:
            sh = world.shards[c]
            labels = _flip(attack.kind, sh.y, sh.X, K, w)
        updates.append(local_train(world.shards[c], w, cfg.local_epochs, cfg.local_lr,
                                   make_rng(cfg.seed, t, c, _LOCAL), cfg.batch_size, labels))
    updates = np.array(updates)

    if mal_sel and attack.kind.poisons_updates:
        benign = [j for j in range(len(selected)) if j not in mal_sel]
        view = BenignView.of(updates[benign])

        def accepts(cand: np.ndarray) -> bool:
            trial = updates.copy()
            trial[mal_sel] = cand
            ctx = RoundContext(w, g_s, loss_fn, make_rng(cfg.seed, t, 0, _ORACLE))
            try:
                out = rule(trial, ctx)
            except agg.AllRejected:
                return False
            return bool(out.kept[mal_sel].any())

        if attack.kind == AttackKind.LIE:
            outcome = lie(view, len(selected), len(mal_sel), attack.z_override)
        elif attack.kind == AttackKind.STAT_OPT:
            outcome = stat_opt(view, accepts, attack)
        else:
            outcome = dyn_opt(view, accepts, attack)
        updates[mal_sel] = outcome.update

    ctx = RoundContext(w, g_s, loss_fn, make_rng(cfg.seed, t, 0, _DEDUP))
    rec = RoundRecord(t, "RA", adversarial, 0.0)
    try:
        out = rule(updates, ctx)
    except agg.AllRejected:
        rec.skipped = True
        rec.ter = compute_ter(w, world.test)
        log.info("round %d: all updates rejected, skipping", t)
        return rec, w
    rec.accepted = int(out.kept.sum())
    if out.report is not None:
        rec.report = out.report
        rec.rejected_negative = out.report.count("negative_contribution")
        rec.rejected_cluster = out.report.count("cluster_dedup")
        rec.rejected_loss = out.report.count("loss_reject")
    g = out.update
    rule.commit(g)
    w = unflatten(spec, agg.apply_global(w_flat, g, cfg.ra.eta))
    rec.ter = compute_ter(w, world.test)
    return rec, w


# -- outputs -------------------------------------------------------------------------------

ROUND_COLUMNS = ("round", "stage", "adversarial", "ter", "accepted", "rejected_negative",
                 "rejected_cluster", "rejected_loss")


def rounds_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for r in records:
        w.writerow([r.round, r.stage, int(r.adversarial), repr(r.ter), r.accepted,
                    r.rejected_negative, r.rejected_cluster, r.rejected_loss])
    return buf.getvalue()


def config_to_dict(cfg: SimConfig) -> dict[str, Any]:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, AttackKind):
            return v.value
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_outputs(summary: MetricSummary, cfg: SimConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "rounds.csv", rounds_csv(summary.records))
    _atomic_write(out_dir / "summary.json",
                  json.dumps(summary.to_json_dict(config_to_dict(cfg)), indent=2, sort_keys=True) + "\n")
    reports = [(r.round, r.report) for r in summary.records if r.report is not None]
    if reports:
        tmp = out_dir / "contributions.csv.tmp"
        agg.write_reports(reports, tmp)
        tmp.replace(out_dir / "contributions.csv")
    audits = [a for r in summary.records if r.audit for a in r.audit]
    if audits:
        tmp = out_dir / "audit.csv.tmp"
        write_audit(audits, tmp)
        tmp.replace(out_dir / "audit.csv")

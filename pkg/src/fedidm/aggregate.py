"""Server aggregation rules.

Baselines (FedAvg, Multi-Krum, Trimmed-mean, Bulyan, FLTrust-style) and the
contribution-based pipeline: history correction, cosine contribution against
the server's base update, rejection of non-positive contributions, 1-D DBSCAN
deduplication, median-magnitude reset, loss-based rejection and
contribution-weighted averaging.

Updates are passed as an ``(n_clients, d)`` array; row ``i`` is client ``i``.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import DegenerateDirection, Rng, cosine_similarity, l2_normalize, median_scalar, norm

LossFn = Callable[[np.ndarray], float]


def _as_updates(updates) -> np.ndarray:
    u = np.asarray(updates, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) array of updates")
    return u


# -- baselines -----------------------------------------------------------------


def fedavg(updates, weights=None) -> np.ndarray:
    u = _as_updates(updates)
    w = np.ones(u.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (u.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    out = np.zeros(u.shape[1])
    for i in range(u.shape[0]):
        out += w[i] * u[i]
    return out / w.sum()


def pairwise_sq_dists(u: np.ndarray) -> np.ndarray:
    diff = u[:, None, :] - u[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(u: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to the ``n - f - 2`` nearest other updates."""
    n = u.shape[0]
    k = max(n - f - 2, 0)
    d = pairwise_sq_dists(u)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d[i], i))
        scores[i] = others[:k].sum()
    return scores


def krum_select(updates, f: int, multi_k: int | None = None) -> np.ndarray:
    """Indices of the ``multi_k`` lowest Krum scores (ties to the lower index)."""
    u = _as_updates(updates)
    n = u.shape[0]
    if n < 2 * f + 3:
        raise ValueError("insufficient clients for Krum")
    m = n - f if multi_k is None else int(multi_k)
    if not 1 <= m <= n:
        raise ValueError("multi_k must be in [1, n]")
    order = np.lexsort((np.arange(n), krum_scores(u, f)))
    return np.sort(order[:m])


def multi_krum(updates, f: int, multi_k: int | None = None) -> np.ndarray:
    u = _as_updates(updates)
    return u[krum_select(u, f, multi_k)].mean(axis=0)


def n_trimmed(n: int, b: float) -> int:
    k = int(math.floor(b * n))
    if n <= 2 * k:
        raise ValueError(f"trim fraction {b} removes every one of {n} values")
    return k


def trimmed_mean(updates, b: float) -> np.ndarray:
    """Per coordinate, drop the ``floor(b n)`` largest and smallest values and average."""
    u = _as_updates(updates)
    k = n_trimmed(u.shape[0], b)
    s = np.sort(u, axis=0)
    return s[k:u.shape[0] - k].mean(axis=0)


def trimmed_keep_mask(updates, b: float) -> np.ndarray:
    """``(n, d)`` mask of entries surviving per-coordinate trimming (stable order)."""
    u = _as_updates(updates)
    n = u.shape[0]
    k = n_trimmed(n, b)
    ranks = np.argsort(np.argsort(u, axis=0, kind="stable"), axis=0, kind="stable")
    return (ranks >= k) & (ranks < n - k)


def bulyan_select(updates, f: int) -> np.ndarray:
    """Iterated Krum: pick ``n - 2f`` updates one at a time, removing each pick."""
    u = _as_updates(updates)
    n = u.shape[0]
    if n < 4 * f + 3:
        raise ValueError("insufficient clients for Bulyan")
    remaining = list(range(n))
    chosen: list[int] = []
    for _ in range(n - 2 * f):
        sub = u[remaining]
        scores = krum_scores(sub, f)
        pick = int(np.lexsort((np.arange(len(remaining)), scores))[0])
        chosen.append(remaining.pop(pick))
    return np.array(chosen, dtype=np.int64)


def bulyan(updates, f: int) -> np.ndarray:
    """Iterated-Krum selection, then per coordinate the mean of the ``n - 4f``
    selected values closest to the coordinate-wise median."""
    u = _as_updates(updates)
    sel = u[bulyan_select(u, f)]
    beta = u.shape[0] - 4 * f
    med = np.median(sel, axis=0)
    out = np.empty(u.shape[1])
    for j in range(u.shape[1]):
        col = sel[:, j]
        order = np.argsort(np.abs(col - med[j]), kind="stable")
        out[j] = col[order[:beta]].mean()
    return out


def fltrust_like(updates, server_update) -> np.ndarray:
    """ReLU-cosine trust against the server update; members rescaled to its norm."""
    u = _as_updates(updates)
    g_s = np.asarray(server_update, dtype=np.float64)
    ns = norm(g_s)
    if ns == 0:
        raise DegenerateDirection("server update degenerate")
    num = np.zeros(u.shape[1])
    tot = 0.0
    for i in range(u.shape[0]):
        ni = norm(u[i])
        if ni == 0:
            continue
        t = max(0.0, cosine_similarity(u[i], g_s))
        num += t * (ns / ni) * u[i]
        tot += t
    return num / tot if tot > 0 else np.zeros(u.shape[1])


def fltrust_trust(updates, server_update) -> np.ndarray:
    u = _as_updates(updates)
    return np.array([max(0.0, cosine_similarity(x, server_update)) if norm(x) > 0 else 0.0
                     for x in u])


# -- contribution-based pipeline ---------------------------------------------------


class UpdateHistory:
    """Ring buffer of the most recent global updates, oldest first."""

    def __init__(self, capacity: int, items: Iterable[np.ndarray] = ()):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._buf: deque[np.ndarray] = deque(maxlen=capacity if capacity > 0 else 0)
        for g in items:
            self.push(g)

    def push(self, g: np.ndarray) -> None:
        if self.capacity > 0:
            self._buf.append(np.asarray(g, dtype=np.float64).copy())

    def recent_first(self) -> list[np.ndarray]:
        return list(reversed(self._buf))

    def copy(self) -> "UpdateHistory":
        return UpdateHistory(self.capacity, list(self._buf))

    def __len__(self) -> int:
        return len(self._buf)


@dataclass(frozen=True)
class RaConfig:
    lam: float = 0.5
    delta_hist: int = 5
    k_top: int | None = None
    k_top_fraction: float = 0.1
    ell_o: float | None = None
    ell_o_factor: float = 1.25
    dbscan_eps: float = 0.05
    eta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must be in (0, 1)")
        if self.delta_hist < 0 or (self.k_top is not None and self.k_top < 0):
            raise ValueError("delta_hist and k_top must be non-negative")
        if self.dbscan_eps <= 0 or self.eta <= 0 or self.ell_o_factor <= 0:
            raise ValueError("dbscan_eps, eta and ell_o_factor must be positive")


class AllRejected(RuntimeError):
    def __init__(self, msg: str = "all updates rejected"):
        super().__init__(msg)


def correct_update(g, history: UpdateHistory | Sequence[np.ndarray], lam: float) -> np.ndarray:
    """``lam * norm(g) + sum_j lam**(j+1) * norm(g_{t-j})`` over the available history."""
    out = lam * l2_normalize(g)
    past = history.recent_first() if isinstance(history, UpdateHistory) else list(history)
    for j, h in enumerate(past, start=1):
        out = out + lam ** (j + 1) * l2_normalize(h)
    return out


def contribution(g_corrected, g_s) -> float:
    if norm(np.asarray(g_s, dtype=np.float64)) == 0:
        raise DegenerateDirection("base update degenerate")
    return cosine_similarity(g_corrected, g_s)


def dbscan_1d(values, eps: float) -> list[list[int]]:
    """DBSCAN on scalars with ``min_samples = 1``: chain values whose gap is <= eps.

    Clusters are returned in ascending value order, members by index.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return []
    order = np.lexsort((np.arange(v.size), v))
    clusters = [[int(order[0])]]
    for a, b in zip(order[:-1], order[1:]):
        if v[b] - v[a] > eps:
            clusters.append([])
        clusters[-1].append(int(b))
    return [sorted(c) for c in clusters]


def dedup_by_contribution(ids: Sequence[int], alphas: Sequence[float], eps: float,
                          rng: Rng) -> tuple[list[int], list[list[int]]]:
    """One uniformly random representative per 1-D DBSCAN cluster of contributions."""
    ids = list(ids)
    clusters = [[ids[i] for i in c] for c in dbscan_1d(alphas, eps)]
    reps = [c[int(rng.integers(len(c)))] for c in clusters]
    return sorted(reps), clusters


def magnitude_adjust(corrected: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Rescale each corrected update to the median norm of the original updates."""
    corrected = _as_updates(corrected)
    original = _as_updates(original)
    target = median_scalar([norm(g) for g in original])
    return np.array([target * l2_normalize(g) for g in corrected])


def loss_reject(ids: Sequence[int], candidates: np.ndarray, w: np.ndarray, loss_fn: LossFn,
                eta: float, k_top: int, ell_o: float) -> tuple[list[int], dict[int, float], dict[int, str]]:
    """Drop the ``k_top`` highest-loss candidates and any with loss >= ``ell_o``.

    Loss of candidate ``i`` is ``loss_fn(w - eta * g_i)``. Returns the survivors,
    per-candidate losses and the ids removed by each rule.
    """
    ids = list(ids)
    if not ids:
        raise AllRejected()
    if k_top >= len(ids):
        raise ValueError("k_top must be smaller than the number of candidates")
    losses = {i: float(loss_fn(w - eta * g)) for i, g in zip(ids, candidates)}
    by_loss = sorted(ids, key=lambda i: (-losses[i], i))
    removed = {i: "loss_reject" for i in by_loss[:k_top]}
    for i in ids:
        if losses[i] >= ell_o:
            removed.setdefault(i, "loss_reject")
    keep = [i for i in ids if i not in removed]
    if not keep:
        raise AllRejected()
    return keep, losses, removed


def weighted_aggregate(updates: np.ndarray, alphas: Sequence[float]) -> np.ndarray:
    u = _as_updates(updates)
    a = np.asarray(alphas, dtype=np.float64)
    if a.shape != (u.shape[0],) or np.any(a <= 0):
        raise ValueError("need one positive contribution per survivor")
    out = np.zeros(u.shape[1])
    for i in range(u.shape[0]):
        out += a[i] * u[i]
    return out / a.sum()


def apply_global(w, g, eta: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {g.shape}")
    return w - eta * g


@dataclass
class ClientDecision:
    client_id: int
    alpha: float
    norm_before: float
    norm_after: float = float("nan")
    loss: float = float("nan")
    decision: str = "kept"
    reason: str = ""


@dataclass
class ContributionReport:
    decisions: list[ClientDecision]
    base_update: np.ndarray
    clusters: list[list[int]] = field(default_factory=list)
    corrected: np.ndarray | None = None
    k_top: int = 0
    ell_o: float = float("nan")

    def count(self, reason: str) -> int:
        return sum(d.reason == reason for d in self.decisions)

    @property
    def kept(self) -> list[int]:
        return [d.client_id for d in self.decisions if d.decision == "kept"]


REPORT_COLUMNS = ("round", "client_id", "alpha", "norm_before", "norm_after", "loss",
                  "decision", "reason")


def write_reports(reports: Sequence[tuple[int, ContributionReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rnd, rep in reports:
            for d in rep.decisions:
                w.writerow([rnd, d.client_id, f"{d.alpha:.8f}", f"{d.norm_before:.8f}",
                            f"{d.norm_after:.8f}", f"{d.loss:.8f}", d.decision, d.reason])


def default_k_top(n: int, cfg: RaConfig) -> int:
    k = cfg.k_top if cfg.k_top is not None else math.ceil(cfg.k_top_fraction * n)
    return max(0, min(k, n - 1))


def fedidm_aggregate(updates, history: UpdateHistory, g_s, w, loss_fn: LossFn,
                     cfg: RaConfig, rng: Rng) -> tuple[np.ndarray, ContributionReport]:
    """Contribution-scored robust aggregation of one round.

    Raises :class:`AllRejected` when no update survives the filters.
    """
    u = _as_updates(updates)
    g_s = np.asarray(g_s, dtype=np.float64)
    n = u.shape[0]
    decisions = [ClientDecision(i, float("nan"), norm(u[i])) for i in range(n)]
    # a zero update has no direction; it scores alpha = 0 and is rejected below
    live = [norm(u[i]) > 0 for i in range(n)]
    corrected = np.array([correct_update(u[i], history, cfg.lam) if live[i] else np.zeros_like(u[i])
                          for i in range(n)])
    alphas = np.array([contribution(corrected[i], g_s) if live[i] else 0.0 for i in range(n)])
    for d, a in zip(decisions, alphas):
        d.alpha = float(a)

    positive = [i for i in range(n) if alphas[i] > 0]
    for i in range(n):
        if alphas[i] <= 0:
            decisions[i].decision, decisions[i].reason = "rejected", "negative_contribution"
    report = ContributionReport(decisions, g_s.copy(), corrected=corrected)
    if not positive:
        raise AllRejected()

    reps, clusters = dedup_by_contribution(positive, alphas[positive], cfg.dbscan_eps, rng)
    report.clusters = clusters
    for i in positive:
        if i not in reps:
            decisions[i].decision, decisions[i].reason = "rejected", "cluster_dedup"

    adjusted = magnitude_adjust(corrected[reps], u[positive])
    for i, g in zip(reps, adjusted):
        decisions[i].norm_after = norm(g)

    base_loss = float(loss_fn(w))
    ell_o = cfg.ell_o if cfg.ell_o is not None else cfg.ell_o_factor * base_loss
    k_top = default_k_top(len(reps), cfg)
    report.k_top, report.ell_o = k_top, ell_o
    keep, losses, removed = loss_reject(reps, adjusted, w, loss_fn, cfg.eta, k_top, ell_o)
    for i, l in losses.items():
        decisions[i].loss = l
    for i, why in removed.items():
        decisions[i].decision, decisions[i].reason = "rejected", why

    pos = {c: j for j, c in enumerate(reps)}
    g_t = weighted_aggregate(adjusted[[pos[i] for i in keep]], alphas[keep])
    return g_t, report


def corrected_mean(updates, history: UpdateHistory, cfg: RaConfig) -> np.ndarray:
    """Ablation without the robust filters: plain average of the history-corrected
    updates. Zero updates carry no direction and are left out."""
    u = _as_updates(updates)
    live = [g for g in u if norm(g) > 0]
    if not live:
        return np.zeros(u.shape[1])
    return np.mean([correct_update(g, history, cfg.lam) for g in live], axis=0)

"""Adversary models: update poisoning (LIE, STAT-OPT, DYN-OPT) and label flipping (SLF, DLF).

The adversary sees the honest clients' updates of the round and can query the
target aggregation rule as an acceptance oracle; all malicious clients submit
the same crafted update.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import inv_normal_cdf, norm
from .nn import NetParams, predict_proba

log = logging.getLogger(__name__)

Accepts = Callable[[np.ndarray], bool]


class AttackKind(str, enum.Enum):
    NONE = "NONE"
    LIE = "LIE"
    STAT_OPT = "STAT_OPT"
    DYN_OPT = "DYN_OPT"
    SLF = "SLF"
    DLF = "DLF"

    @property
    def poisons_updates(self) -> bool:
        return self in (AttackKind.LIE, AttackKind.STAT_OPT, AttackKind.DYN_OPT)

    @property
    def flips_labels(self) -> bool:
        return self in (AttackKind.SLF, AttackKind.DLF)


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.NONE
    malicious_fraction: float = 0.5
    adversarial_round_fraction: float = 0.5
    gamma_init: float = 10.0
    gamma_steps: int = 10
    z_override: float | None = None
    stat_literal: bool = False
    dyn_direction: str = "unit"

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not 0.0 <= self.malicious_fraction <= 0.5:
            raise ValueError("malicious_fraction must be in [0, 0.5]")
        if not 0.0 <= self.adversarial_round_fraction <= 1.0:
            raise ValueError("adversarial_round_fraction must be in [0, 1]")
        if self.gamma_init < 0 or self.gamma_steps < 0:
            raise ValueError("gamma_init and gamma_steps must be non-negative")
        if self.dyn_direction not in ("unit", "std"):
            raise ValueError("dyn_direction must be 'unit' or 'std'")


@dataclass(frozen=True)
class BenignView:
    updates: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, updates) -> "BenignView":
        u = np.atleast_2d(np.asarray(updates, dtype=np.float64))
        if u.shape[0] == 0:
            raise ValueError("adversary needs at least one benign update")
        return cls(u, u.mean(axis=0), u.std(axis=0))


@dataclass
class AttackOutcome:
    update: np.ndarray
    gamma: float = 0.0
    z: float = 0.0
    succeeded: bool = True
    trace: list[float] = field(default_factory=list)


def lie_z(n_total: int, n_malicious: int) -> float:
    """Order-statistic quantile used by the little-is-enough attack."""
    if n_malicious < 1:
        raise ValueError("invalid LIE configuration: no malicious clients")
    s = n_total // 2 + 1 - n_malicious
    denom = n_total - n_malicious
    p = (denom - s) / denom if denom > 0 else -1.0
    if not 0.0 < p < 1.0:
        raise ValueError(f"invalid LIE configuration: quantile {p} for n={n_total}, m={n_malicious}")
    return inv_normal_cdf(p)


def lie(view: BenignView, n_total: int, n_malicious: int,
        z_override: float | None = None) -> AttackOutcome:
    z = lie_z(n_total, n_malicious) if z_override is None else float(z_override)
    return AttackOutcome(view.mean + z * view.std, z=z)


def stat_opt(view: BenignView, accepts: Accepts, cfg: AttackConfig) -> AttackOutcome:
    """Static direction ``-sign(mean)``; gamma halved from ``gamma_init`` until accepted.

    With ``cfg.stat_literal`` the update is ``-gamma * omega`` instead of
    ``mean + gamma * omega``.
    """
    omega = -np.sign(view.mean)

    def craft(g: float) -> np.ndarray:
        return -g * omega if cfg.stat_literal else view.mean + g * omega

    gamma = cfg.gamma_init
    trace = []
    for _ in range(cfg.gamma_steps + 1):
        trace.append(gamma)
        cand = craft(gamma)
        if accepts(cand):
            return AttackOutcome(cand, gamma=gamma, trace=trace)
        gamma /= 2.0
    log.warning("STAT-OPT: no gamma accepted, falling back to the benign mean")
    return AttackOutcome(view.mean.copy(), gamma=0.0, succeeded=False, trace=trace)


def dyn_direction(view: BenignView, kind: str = "unit") -> np.ndarray:
    if kind == "std":
        n = norm(view.std)
        return -view.std / n if n > 0 else np.zeros_like(view.std)
    n = norm(view.mean)
    return -view.mean / n if n > 0 else np.zeros_like(view.mean)


def dyn_opt(view: BenignView, accepts: Accepts, cfg: AttackConfig) -> AttackOutcome:
    """Largest gamma in ``[0, gamma_init]`` the oracle accepts, by bisection.

    ``trace`` lists the accepted lower bound after every iteration, which is
    non-decreasing.
    """
    omega = dyn_direction(view, cfg.dyn_direction)

    def craft(g: float) -> np.ndarray:
        return view.mean + g * omega

    if accepts(craft(cfg.gamma_init)):
        return AttackOutcome(craft(cfg.gamma_init), gamma=cfg.gamma_init, trace=[cfg.gamma_init])
    lo, hi = 0.0, cfg.gamma_init
    trace = []
    for _ in range(cfg.gamma_steps):
        mid = 0.5 * (lo + hi)
        if accepts(craft(mid)):
            lo = mid
        else:
            hi = mid
        trace.append(lo)
    if lo == 0.0:
        log.warning("DYN-OPT: no gamma accepted, falling back to the benign mean")
        return AttackOutcome(view.mean.copy(), gamma=0.0, succeeded=False, trace=trace)
    return AttackOutcome(craft(lo), gamma=lo, trace=trace)


def slf_labels(y, n_classes: int) -> np.ndarray:
    """Static flip ``y -> K - 1 - y``."""
    return (n_classes - 1 - np.asarray(y, dtype=np.int64)).astype(np.int64)


def dlf_labels(X, surrogate: NetParams) -> np.ndarray:
    """Least-likely class under the surrogate model (ties to the lowest index)."""
    return np.argmin(predict_proba(surrogate, X), axis=1).astype(np.int64)


def slf(ds, n_classes: int | None = None):
    """Flip every label of a ``Dataset`` or ``CondensedSet``."""
    k = ds.n_classes if n_classes is None else n_classes
    return _with_labels(ds, slf_labels(ds.y, k))


def dlf(ds, surrogate: NetParams):
    return _with_labels(ds, dlf_labels(ds.X, surrogate))


def _with_labels(ds, y):
    if hasattr(ds, "with_labels"):
        return ds.with_labels(y)
    return type(ds)(ds.X.copy(), y, ds.n_classes)

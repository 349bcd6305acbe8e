"""Client-side dataset condensation by class-conditional distribution matching.

The synthetic points of class ``k`` are moved so that their mean embedding under
a freshly sampled random network matches the mean embedding of the client's
real class-``k`` points. A cross-entropy term under the current global model
keeps synthetic points on the right side of its decision boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import Rng
from .data import Dataset, load_csv, save_csv
from .nn import NetParams, NetSpec, RandomFeatureNet, ce_input_grad, ce_loss, one_hot


@dataclass(frozen=True)
class CondensedSet:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    ipc: int
    round_tag: int = 0
    client_id: int = -1
    # labels before any adversarial flip; simulation bookkeeping for metrics only
    honest_y: np.ndarray | None = None

    def __post_init__(self):
        if self.honest_y is None:
            object.__setattr__(self, "honest_y", np.asarray(self.y, dtype=np.int64).copy())

    def __len__(self) -> int:
        return self.X.shape[0]

    def as_dataset(self) -> Dataset:
        return Dataset(self.X, self.y, self.n_classes)

    def with_labels(self, y) -> "CondensedSet":
        return replace(self, y=np.asarray(y, dtype=np.int64).copy())

    def save(self, path: str | Path) -> None:
        save_csv(self.as_dataset(), path, {"round": np.full(len(self), self.round_tag)})

    @classmethod
    def load(cls, path: str | Path, ipc: int) -> "CondensedSet":
        ds, extra = load_csv(path)
        rounds = extra.get("round", np.zeros(len(ds), dtype=np.int64))
        tag = int(rounds[0]) if rounds.size else 0
        return cls(ds.X, ds.y, ds.n_classes, ipc, tag)


@dataclass(frozen=True)
class DmConfig:
    ipc: int = 10
    steps: int = 50
    n_random_nets: int = 4
    lr_s: float = 0.1
    upsilon: float = 0.1
    feature_widths: tuple[int, ...] = (32, 16)
    activation: str = "tanh"

    def __post_init__(self):
        if self.ipc < 1 or self.steps < 0 or self.n_random_nets < 1:
            raise ValueError("ipc and n_random_nets must be positive, steps non-negative")
        if self.lr_s < 0 or self.upsilon < 0:
            raise ValueError("lr_s and upsilon must be non-negative")

    def feature_spec(self, input_dim: int) -> NetSpec:
        return NetSpec((input_dim, *self.feature_widths), self.activation)


def _class_sets(real_y: np.ndarray, syn_y: np.ndarray, n_classes: int):
    for k in range(n_classes):
        r = np.flatnonzero(real_y == k)
        s = np.flatnonzero(syn_y == k)
        if r.size == 0 and s.size == 0:
            continue
        if r.size == 0 or s.size == 0:
            raise ValueError(f"class {k} present in only one of real shard / condensed set")
        yield k, r, s


def dm_loss(real: Dataset, syn_X: np.ndarray, syn_y: np.ndarray, phi: RandomFeatureNet,
            classifier: NetParams | None = None, upsilon: float = 0.0) -> float:
    """Sum over classes of the squared mean-embedding gap, plus ``upsilon`` * CE(S)."""
    emb_r = phi.embed(real.X)
    emb_s = phi.embed(syn_X)
    total = 0.0
    for _, r, s in _class_sets(real.y, syn_y, real.n_classes):
        gap = emb_r[r].mean(axis=0) - emb_s[s].mean(axis=0)
        total += float(gap @ gap)
    if classifier is not None and upsilon > 0:
        total += upsilon * ce_loss(classifier, syn_X, one_hot(syn_y, real.n_classes))
    return total


def dm_loss_grad(real: Dataset, syn_X: np.ndarray, syn_y: np.ndarray, phi: RandomFeatureNet,
                 classifier: NetParams | None = None, upsilon: float = 0.0,
                 groups: list | None = None) -> tuple[float, np.ndarray]:
    """``dm_loss`` and its gradient w.r.t. the synthetic coordinates.

    ``groups`` may carry precomputed ``_class_sets`` output.
    """
    if groups is None:
        groups = list(_class_sets(real.y, syn_y, real.n_classes))
    emb_r = phi.embed(real.X)
    emb_s, cache = phi.embed_with_cache(syn_X)
    d_emb = np.zeros_like(emb_s)
    total = 0.0
    for _, r, s in groups:
        gap = emb_r[r].mean(axis=0) - emb_s[s].mean(axis=0)
        total += float(gap @ gap)
        d_emb[s] = -2.0 * gap / s.size
    grad = phi.input_grad(cache, d_emb)
    if classifier is not None and upsilon > 0:
        ce, dx = ce_input_grad(classifier, syn_X, one_hot(syn_y, real.n_classes))
        total += upsilon * ce
        grad = grad + upsilon * dx
    return total, grad


def condense_step(S: CondensedSet, real: Dataset, rng: Rng, cfg: DmConfig,
                  classifier: NetParams | None = None, groups: list | None = None) -> CondensedSet:
    """One gradient step on the synthetic points, averaged over fresh random nets.

    The classifier term does not depend on the random net, so it is added once.
    """
    if groups is None:
        groups = list(_class_sets(real.y, S.y, real.n_classes))
    spec = cfg.feature_spec(real.input_dim)
    grad = np.zeros_like(S.X)
    for _ in range(cfg.n_random_nets):
        _, g = dm_loss_grad(real, S.X, S.y, RandomFeatureNet(spec, rng), groups=groups)
        grad += g
    grad /= cfg.n_random_nets
    if classifier is not None and cfg.upsilon > 0:
        grad += cfg.upsilon * ce_input_grad(classifier, S.X, one_hot(S.y, real.n_classes))[1]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite distribution-matching gradient")
    return replace(S, X=S.X - cfg.lr_s * grad)


def init_condensed(shard: Dataset, ipc: int, rng: Rng, round_tag: int = 0,
                   client_id: int = -1) -> CondensedSet:
    """``ipc`` real points per class present in the shard (with replacement when short)."""
    xs, ys = [], []
    for k in range(shard.n_classes):
        idx = np.flatnonzero(shard.y == k)
        if idx.size == 0:
            continue
        pick = rng.choice(idx, size=ipc, replace=idx.size < ipc)
        xs.append(shard.X[pick])
        ys.append(np.full(ipc, k, dtype=np.int64))
    if not xs:
        raise ValueError("shard has no points")
    return CondensedSet(np.concatenate(xs), np.concatenate(ys), shard.n_classes, ipc,
                        round_tag, client_id)


def generate_condensed(shard: Dataset, cfg: DmConfig, rng: Rng,
                       classifier: NetParams | None = None, round_tag: int = 0,
                       client_id: int = -1) -> CondensedSet:
    S = init_condensed(shard, cfg.ipc, rng, round_tag, client_id)
    groups = list(_class_sets(shard.y, S.y, shard.n_classes))
    for _ in range(cfg.steps):
        S = condense_step(S, shard, rng, cfg, classifier, groups)
    return S

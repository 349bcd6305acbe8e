"""Server-side label rectification of pooled condensed data.

Per round the server pools the condensed sets of the last ``delta`` rounds,
draws two augmented views of every point, models the rectifier's embeddings
with a prediction-guided Gaussian mixture, scores how plausible each claimed
label is, relabels softly and trains the rectifier with a cross-view
cross-entropy, an InfoNCE term and a Mixup term. The rectifier's predictions
on the pool become the pseudo-labels used to train the global model.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .condense import CondensedSet
from .core import Rng, softmax
from .data import AugmentConfig, augment
from .nn import Adam, RectifierNet, ce_from_logits, one_hot

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class AcdgConfig:
    delta: int = 3
    tau: float = 0.5
    epochs: int = 10
    warmup_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2
    mix_alpha: float = 0.75
    eps_resp: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.delta < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("delta must be >= 1 and epoch counts non-negative")
        if self.tau <= 0 or self.lr <= 0 or self.batch_size < 2:
            raise ValueError("tau, lr must be positive and batch_size >= 2")


@dataclass(frozen=True)
class WindowPool:
    """Pooled condensed points of the rounds ``(t - delta, t]``."""

    X: np.ndarray
    y: np.ndarray
    honest_y: np.ndarray
    rounds: np.ndarray
    clients: np.ndarray
    point_ids: np.ndarray
    n_classes: int
    delta: int

    @property
    def m(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class GmmParams:
    mu: np.ndarray       # (K, e)
    sigma: np.ndarray    # (K,) isotropic variance per component
    weights: np.ndarray  # (K,)
    stale: np.ndarray    # (K,) bool, component kept its previous parameters

    @property
    def n_components(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class CleanlinessScores:
    beta: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    n_iter: int


def pool_window(history: Sequence[Sequence[CondensedSet]], delta: int) -> WindowPool:
    """Concatenate the condensed sets of the last ``delta`` rounds of ``history``.

    ``history`` holds, per round in chronological order, the sets received that
    round (at least one round). Point ids are ``round * 10**6 + client * 10**3 + i``.
    """
    if not history:
        raise ValueError("condensed history is empty")
    sets = [s for rnd in history[-delta:] for s in rnd]
    if not sets:
        raise ValueError("window contains no condensed points")
    n_classes = sets[0].n_classes
    ids = [s.round_tag * 10**6 + max(s.client_id, 0) * 10**3 + np.arange(len(s)) for s in sets]
    return WindowPool(
        X=np.concatenate([s.X for s in sets]),
        y=np.concatenate([s.y for s in sets]),
        honest_y=np.concatenate([s.honest_y for s in sets]),
        rounds=np.concatenate([np.full(len(s), s.round_tag) for s in sets]),
        clients=np.concatenate([np.full(len(s), s.client_id) for s in sets]),
        point_ids=np.concatenate(ids).astype(np.int64),
        n_classes=n_classes,
        delta=delta,
    )


def pool_and_augment(history: Sequence[Sequence[CondensedSet]], delta: int, rng: Rng,
                     aug: AugmentConfig = AugmentConfig()) -> tuple[WindowPool, np.ndarray]:
    """Window pool plus the ``2m`` views ordered ``s1_1, s2_1, ..., s1_m, s2_m``."""
    pool = pool_window(history, delta)
    views = np.empty((2 * pool.m, pool.X.shape[1]))
    views[0::2] = augment(pool.X, rng, aug)
    views[1::2] = augment(pool.X, rng, aug)
    return pool, views


def gmm_from_labels(r: np.ndarray, labels: np.ndarray, n_classes: int) -> GmmParams:
    return guided_em_step(r, one_hot(labels, n_classes), None)


def guided_em_step(r: np.ndarray, resp: np.ndarray, prev: GmmParams | None,
                   eps_resp: float = 1e-8) -> GmmParams:
    """M-step with classifier predictions in place of E-step responsibilities.

    The isotropic variance is the trace of the weighted scatter divided by the
    embedding dimension. Components whose total responsibility is below
    ``eps_resp`` keep ``prev``'s parameters (or a unit-variance placeholder at
    the origin when there is no ``prev``) and are flagged stale.
    """
    r = np.asarray(r, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    n, e = r.shape
    K = resp.shape[1]
    mass = resp.sum(axis=0)
    mu = np.zeros((K, e))
    sigma = np.ones(K)
    stale = mass < eps_resp
    for k in range(K):
        if stale[k]:
            if prev is not None:
                mu[k], sigma[k] = prev.mu[k], prev.sigma[k]
            continue
        mu[k] = resp[:, k] @ r / mass[k]
        d = r - mu[k]
        sigma[k] = max(float(resp[:, k] @ np.einsum("ij,ij->i", d, d)) / (mass[k] * e), SIGMA_FLOOR)
    weights = mass / n
    return GmmParams(mu, sigma, weights, stale)


def posterior_gamma(r: np.ndarray, gmm: GmmParams) -> np.ndarray:
    """Posterior over components from squared distances scaled by ``2 sigma_k``.

    Mixing weights and Gaussian normalisers are deliberately left out.
    """
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    d2 = ((r[:, None, :] - gmm.mu[None, :, :]) ** 2).sum(axis=2)
    return softmax(-d2 / (2.0 * gmm.sigma[None, :]), axis=1)


def fit_cleanliness(values, max_iter: int = 100, tol: float = 1e-6,
                    var_floor: float = 1e-8) -> CleanlinessScores:
    """Two-component 1-D EM; ``beta`` is the posterior of the larger-mean component."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("need at least two values")
    if np.all(v == v[0]):
        return CleanlinessScores(np.ones(v.size), np.array([v[0], v[0]]), np.zeros(2),
                                 np.array([0.5, 0.5]), 0)
    mu = np.percentile(v, [25, 75])
    if mu[0] == mu[1]:
        mu = np.array([v.min(), v.max()])
    var = np.full(2, max(float(v.var()), var_floor))
    w = np.array([0.5, 0.5])
    prev_ll = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        logp = (np.log(w)[None, :] - 0.5 * np.log(2 * np.pi * var)[None, :]
                - 0.5 * (v[:, None] - mu[None, :]) ** 2 / var[None, :])
        mx = logp.max(axis=1, keepdims=True)
        ll_i = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        resp = np.exp(logp - ll_i[:, None])
        ll = float(ll_i.sum())
        nk = resp.sum(axis=0) + 1e-12
        mu = (resp * v[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (v[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk, var_floor)
        w = nk / nk.sum()
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= tol * abs(prev_ll):
            break
        prev_ll = ll
    logp = (np.log(w)[None, :] - 0.5 * np.log(2 * np.pi * var)[None, :]
            - 0.5 * (v[:, None] - mu[None, :]) ** 2 / var[None, :])
    post = softmax(logp, axis=1)
    benign = int(np.argmax(mu))
    return CleanlinessScores(np.clip(post[:, benign], 0.0, 1.0), mu, var, w, it)


def relabel(y_onehot, beta, h1, h2) -> tuple[np.ndarray, np.ndarray]:
    """Blend claimed one-hot labels with the predictions on each view by ``beta``."""
    y_onehot = np.atleast_2d(np.asarray(y_onehot, dtype=np.float64))
    b = np.asarray(beta, dtype=np.float64).reshape(-1, 1)
    return b * y_onehot + (1 - b) * np.atleast_2d(h1), b * y_onehot + (1 - b) * np.atleast_2d(h2)


@dataclass(frozen=True)
class MixPlan:
    partner: np.ndarray
    rho: np.ndarray


def draw_mixup(m: int, rng: Rng, alpha: float = 0.75) -> MixPlan:
    """One blend per point with a uniformly random partner from the pool."""
    return MixPlan(rng.integers(0, m, size=m), rng.beta(alpha, alpha, size=m))


def _normalize_rows(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.sqrt((e * e).sum(axis=1, keepdims=True)) + 1e-12
    return e / n, n


def _normalize_backward(z: np.ndarray, n: np.ndarray, dz: np.ndarray) -> np.ndarray:
    return (dz - z * (z * dz).sum(axis=1, keepdims=True)) / n


def info_nce(z1: np.ndarray, z2: np.ndarray, zbar: np.ndarray, tau: float
             ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean InfoNCE over pairs; negatives are the other pooled points (positive excluded).

    Inputs are unit-norm embeddings; returns the loss and gradients w.r.t.
    ``z1``, ``z2`` and ``zbar``.
    """
    m = z1.shape[0]
    if m < 2:
        raise ValueError("contrastive loss needs >= 2 points")
    pos = (z1 * z2).sum(axis=1) / tau
    logits = z1 @ zbar.T / tau
    np.fill_diagonal(logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    tot = ex.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(tot[:, 0])
    loss = float((lse - pos).mean())
    p = ex / tot
    dz1 = (p @ zbar - z2) / (tau * m)
    dz2 = -z1 / (tau * m)
    dzbar = p.T @ z1 / (tau * m)
    return loss, dz1, dz2, dzbar


@dataclass
class RectifierLoss:
    total: float
    ce: float
    ctr: float
    mixup: float
    grad: np.ndarray


def rectifier_loss(net: RectifierNet, X_bar: np.ndarray, views: np.ndarray,
                   yt1: np.ndarray, yt2: np.ndarray, tau: float,
                   mix: MixPlan | None = None, rng: Rng | None = None,
                   mix_alpha: float = 0.75,
                   weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> RectifierLoss:
    """Cross-view CE + InfoNCE + Mixup CE, each averaged over the ``m`` pooled points.

    ``views`` holds the ``2m`` augmented views interleaved as produced by
    :func:`pool_and_augment`; ``yt1``/``yt2`` are the relabeled targets of the
    first and second view. ``weights`` scales the three terms (total and
    gradient), which lets each term be inspected on its own.
    """
    w_ce, w_ctr, w_mix = weights
    m = X_bar.shape[0]
    if m < 2:
        raise ValueError("contrastive loss needs >= 2 points")
    if mix is None:
        if rng is None:
            raise ValueError("need a mixup plan or an rng")
        mix = draw_mixup(m, rng, mix_alpha)

    # views
    e_v, lg_v, c_v = net.forward(views)
    lg1, lg2 = lg_v[0::2], lg_v[1::2]
    ce1, d1 = ce_from_logits(lg1, yt2)
    ce2, d2 = ce_from_logits(lg2, yt1)
    d_lg_v = np.empty_like(lg_v)
    d_lg_v[0::2] = d1
    d_lg_v[1::2] = d2
    l_ce = ce1 + ce2

    # pooled originals for negatives
    e_b, lg_b, c_b = net.forward(X_bar)
    zv, nv = _normalize_rows(e_v)
    zb, nb = _normalize_rows(e_b)
    l_ctr, dz1, dz2, dzb = info_nce(zv[0::2], zv[1::2], zb, tau)
    dzv = np.empty_like(zv)
    dzv[0::2], dzv[1::2] = dz1, dz2
    d_e_v = _normalize_backward(zv, nv, dzv)
    d_e_b = _normalize_backward(zb, nb, dzb)

    # mixup
    ybar = 0.5 * (yt1 + yt2)
    rho = mix.rho[:, None]
    X_mix = rho * X_bar + (1 - rho) * X_bar[mix.partner]
    y_mix = rho * ybar + (1 - rho) * ybar[mix.partner]
    _, lg_m, c_m = net.forward(X_mix)
    l_mix, d_lg_m = ce_from_logits(lg_m, y_mix)

    grad = (net.backward(c_v, w_ctr * d_e_v, w_ce * d_lg_v)
            + net.backward(c_b, w_ctr * d_e_b, None)
            + net.backward(c_m, None, w_mix * d_lg_m))
    return RectifierLoss(w_ce * l_ce + w_ctr * l_ctr + w_mix * l_mix, l_ce, l_ctr, l_mix, grad)


@dataclass
class AuditRow:
    round: int
    point_id: int
    claimed_label: int
    pseudo_label: int
    beta: float
    honest_label: int


@dataclass
class AcdgResult:
    pool: WindowPool
    pseudo_soft: np.ndarray
    pseudo_labels: np.ndarray
    beta: np.ndarray
    net: RectifierNet
    gmm: GmmParams
    audit: list[AuditRow]

    @property
    def n_changed(self) -> int:
        return int(np.sum(self.pseudo_labels != self.pool.y))


def _batches(m: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(m)
    out = [order[i:i + batch_size] for i in range(0, m, batch_size)]
    if len(out) > 1 and out[-1].size < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _train_epoch(net: RectifierNet, opt: Adam, X_bar, views, yt1, yt2, cfg: AcdgConfig,
                 rng: Rng) -> RectifierNet:
    flat = net.flatten()
    for idx in _batches(X_bar.shape[0], cfg.batch_size, rng):
        vidx = np.empty(2 * idx.size, dtype=np.int64)
        vidx[0::2], vidx[1::2] = 2 * idx, 2 * idx + 1
        res = rectifier_loss(net, X_bar[idx], views[vidx], yt1[idx], yt2[idx], cfg.tau,
                             rng=rng, mix_alpha=cfg.mix_alpha)
        flat = opt.step(flat, res.grad)
        net = net.with_flat(flat)
    return net


def claimed_gamma(r: np.ndarray, gmm: GmmParams, y: np.ndarray) -> np.ndarray:
    """Posterior at the claimed label, averaged over the two views of each point."""
    g = posterior_gamma(r, gmm)
    m = y.size
    return 0.5 * (g[0::2][np.arange(m), y] + g[1::2][np.arange(m), y])


def run_acdg_round(history: Sequence[Sequence[CondensedSet]], net: RectifierNet,
                   cfg: AcdgConfig, rng: Rng, round_idx: int | None = None,
                   fresh: bool = False) -> AcdgResult:
    """Rectify the window pool and emit pseudo-labels.

    Each epoch runs one guided EM step, rescores the claimed labels, relabels
    and makes one minibatch pass on the rectifier loss. A ``fresh`` rectifier
    first gets ``cfg.warmup_epochs`` passes against the claimed labels.
    """
    pool, views = pool_and_augment(history, cfg.delta, rng, cfg.augment)
    K = pool.n_classes
    y1h = one_hot(pool.y, K)
    opt = Adam(net.flatten().size, lr=cfg.lr)
    if fresh:
        for _ in range(cfg.warmup_epochs):
            net = _train_epoch(net, opt, pool.X, views, y1h, y1h, cfg, rng)

    emb, _, _ = net.forward(views)
    r, _ = _normalize_rows(emb)
    gmm = gmm_from_labels(r, np.repeat(pool.y, 2), K)
    beta = np.ones(pool.m)
    for _ in range(cfg.epochs):
        emb, logits, _ = net.forward(views)
        r, _ = _normalize_rows(emb)
        pred = softmax(logits, axis=1)
        gmm = guided_em_step(r, pred, gmm, cfg.eps_resp)
        beta = fit_cleanliness(claimed_gamma(r, gmm, pool.y)).beta
        yt1, yt2 = relabel(y1h, beta, pred[0::2], pred[1::2])
        net = _train_epoch(net, opt, pool.X, views, yt1, yt2, cfg, rng)

    soft = net.predict_proba(pool.X)
    hard = np.argmax(soft, axis=1)
    tag = int(pool.rounds.max()) if round_idx is None else round_idx
    audit = [AuditRow(tag, int(pid), int(c), int(p), float(b), int(h))
             for pid, c, p, b, h in zip(pool.point_ids, pool.y, hard, beta, pool.honest_y)]
    return AcdgResult(pool, soft, hard, beta, net, gmm, audit)


AUDIT_COLUMNS = ("round", "point_id", "claimed_label", "pseudo_label", "beta")


def write_audit(rows: Sequence[AuditRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AUDIT_COLUMNS)
        for a in rows:
            w.writerow([a.round, a.point_id, a.claimed_label, a.pseudo_label, f"{a.beta:.6f}"])

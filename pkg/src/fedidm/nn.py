"""Tiny feed-forward networks with hand-written backpropagation.

Stands in for the convolutional backbones at desk scale. Inputs are batches of
flat feature vectors of shape ``(n, in_dim)``; a layer computes ``x @ W + b``
with ``W`` of shape ``(in, out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Rng, log_softmax, softmax

_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # name -> (f(z), f'(z) expressed through the activation output a)
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (lambda z: 1.0 / (1.0 + np.exp(-z)), lambda a: a * (1.0 - a)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(np.float64)),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


@dataclass(frozen=True)
class NetSpec:
    """Layer widths from input to output plus the hidden nonlinearity.

    ``activate_output`` applies the nonlinearity after the last layer too, which
    is what an encoder feeding further heads wants.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    activate_output: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class NetParams:
    spec: NetSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        widths = self.spec.layer_widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("layer count does not match spec")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} has shape {W.shape}/{b.shape}, spec wants "
                                 f"{(widths[i], widths[i + 1])}")

    def flatten(self) -> np.ndarray:
        return flatten(self)


@dataclass
class Cache:
    # activations[0] is the input; activations[i+1] the output of layer i
    activations: list[np.ndarray]


def init_params(spec: NetSpec, rng: Rng) -> NetParams:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    ws, bs = [], []
    widths = spec.layer_widths
    for i in range(len(widths) - 1):
        bound = 1.0 / np.sqrt(widths[i])
        ws.append(rng.uniform(-bound, bound, size=(widths[i], widths[i + 1])))
        bs.append(np.zeros(widths[i + 1]))
    return NetParams(spec, tuple(ws), tuple(bs))


def zeros_like(params: NetParams) -> NetParams:
    return NetParams(params.spec, tuple(np.zeros_like(W) for W in params.weights),
                     tuple(np.zeros_like(b) for b in params.biases))


def flatten(params: NetParams) -> np.ndarray:
    """Layer by layer: weights row-major, then biases."""
    parts = []
    for W, b in zip(params.weights, params.biases):
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(spec: NetSpec, vec) -> NetParams:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != spec.n_params:
        raise ValueError(f"expected {spec.n_params} values, got {vec.size}")
    ws, bs = [], []
    pos = 0
    widths = spec.layer_widths
    for i in range(len(widths) - 1):
        n_w = widths[i] * widths[i + 1]
        ws.append(vec[pos:pos + n_w].reshape(widths[i], widths[i + 1]).copy())
        pos += n_w
        bs.append(vec[pos:pos + widths[i + 1]].copy())
        pos += widths[i + 1]
    return NetParams(spec, tuple(ws), tuple(bs))


def _as_batch(x, in_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input has shape {x.shape}, network expects width {in_dim}")
    return x


def forward(params: NetParams, x) -> tuple[np.ndarray, Cache]:
    """Batched forward pass. A 1-D ``x`` is treated as a batch of one."""
    spec = params.spec
    act, _ = _ACTIVATIONS[spec.activation]
    a = _as_batch(x, spec.in_dim)
    acts = [a]
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        a = act(z) if (i < n_layers - 1 or spec.activate_output) else z
        acts.append(a)
    return a, Cache(acts)


def predict_proba(params: NetParams, x) -> np.ndarray:
    logits, _ = forward(params, x)
    return softmax(logits, axis=1)


def backward(params: NetParams, cache: Cache, d_out: np.ndarray) -> tuple[NetParams, np.ndarray]:
    """Backpropagate ``d_out`` (gradient w.r.t. the network output).

    Returns parameter gradients and the gradient w.r.t. the input batch.
    """
    spec = params.spec
    _, dact = _ACTIVATIONS[spec.activation]
    n_layers = len(params.weights)
    gws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = np.asarray(d_out, dtype=np.float64)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1 or spec.activate_output:
            delta = delta * dact(cache.activations[i + 1])
        gws[i] = cache.activations[i].T @ delta
        gbs[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
    return NetParams(spec, tuple(gws), tuple(gbs)), delta


def check_simplex(targets: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(targets < -tol) or np.any(np.abs(targets.sum(axis=1) - 1.0) > tol):
        raise ValueError("targets must lie on the probability simplex")


def ce_from_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean soft-target cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = float(-(targets * logp).sum() / n)
    d_logits = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
    return loss, d_logits


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(params: NetParams, x, targets) -> float:
    logits, _ = forward(params, x)
    return ce_from_logits(logits, np.asarray(targets, dtype=np.float64))[0]


def backward_ce(params: NetParams, x, targets) -> tuple[float, NetParams]:
    """Mean cross-entropy over the batch and its exact parameter gradient.

    ``targets`` are probability vectors, so soft labels are supported.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    check_simplex(targets)
    logits, cache = forward(params, x)
    loss, d_logits = ce_from_logits(logits, targets)
    grads, _ = backward(params, cache, d_logits)
    return loss, grads


def ce_input_grad(params: NetParams, x, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the inputs (labels fixed)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    logits, cache = forward(params, x)
    loss, d_logits = ce_from_logits(logits, targets)
    _, dx = backward(params, cache, d_logits)
    return loss, dx


def sgd_epochs(params: NetParams, x: np.ndarray, targets: np.ndarray, epochs: int,
               lr: float, batch_size: int, rng: Rng) -> NetParams:
    """Plain minibatch SGD on mean cross-entropy with a seeded shuffle per epoch."""
    flat = flatten(params)
    spec = params.spec
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = backward_ce(unflatten(spec, flat), x[idx], targets[idx])
            flat = flat - lr * flatten(g)
    return unflatten(spec, flat)


class RandomFeatureNet:
    """Frozen randomly initialised network used as an embedding ``phi_theta``."""

    def __init__(self, spec: NetSpec, rng: Rng):
        self.spec = spec
        self.params = init_params(spec, rng)

    @classmethod
    def from_params(cls, params: NetParams) -> "RandomFeatureNet":
        net = cls.__new__(cls)
        net.spec = params.spec
        net.params = params
        return net

    def embed(self, x) -> np.ndarray:
        return forward(self.params, x)[0]

    def embed_with_cache(self, x) -> tuple[np.ndarray, Cache]:
        return forward(self.params, x)

    def input_grad(self, cache: Cache, d_emb: np.ndarray) -> np.ndarray:
        return backward(self.params, cache, d_emb)[1]


@dataclass
class RectifierCache:
    enc: Cache
    hidden: np.ndarray


class RectifierNet:
    """Shared encoder with a feature head ``f`` and a classifier head ``h``.

    Both heads are linear maps of the encoder output; ``h`` yields logits and
    ``predict_proba`` applies the softmax.
    """

    def __init__(self, encoder: NetParams, feat_head: NetParams, cls_head: NetParams):
        if feat_head.spec.in_dim != encoder.spec.out_dim or cls_head.spec.in_dim != encoder.spec.out_dim:
            raise ValueError("heads must consume the encoder output")
        self.encoder = encoder
        self.feat_head = feat_head
        self.cls_head = cls_head

    @classmethod
    def create(cls, in_dim: int, n_classes: int, rng: Rng, hidden: Sequence[int] = (32,),
               emb_dim: int = 16, activation: str = "tanh") -> "RectifierNet":
        enc_spec = NetSpec((in_dim, *hidden), activation, activate_output=True)
        return cls(init_params(enc_spec, rng),
                   init_params(NetSpec((hidden[-1], emb_dim)), rng),
                   init_params(NetSpec((hidden[-1], n_classes)), rng))

    @property
    def n_classes(self) -> int:
        return self.cls_head.spec.out_dim

    @property
    def emb_dim(self) -> int:
        return self.feat_head.spec.out_dim

    def _specs(self) -> tuple[NetSpec, NetSpec, NetSpec]:
        return self.encoder.spec, self.feat_head.spec, self.cls_head.spec

    def forward(self, x) -> tuple[np.ndarray, np.ndarray, RectifierCache]:
        hid, enc_cache = forward(self.encoder, x)
        emb = hid @ self.feat_head.weights[0] + self.feat_head.biases[0]
        logits = hid @ self.cls_head.weights[0] + self.cls_head.biases[0]
        return emb, logits, RectifierCache(enc_cache, hid)

    def backward(self, cache: RectifierCache, d_emb, d_logits) -> np.ndarray:
        """Flat parameter gradient (same ordering as :meth:`flatten`)."""
        hid = cache.hidden
        d_hid = np.zeros_like(hid)
        parts_f = [np.zeros_like(self.feat_head.weights[0]), np.zeros_like(self.feat_head.biases[0])]
        parts_h = [np.zeros_like(self.cls_head.weights[0]), np.zeros_like(self.cls_head.biases[0])]
        if d_emb is not None:
            parts_f = [hid.T @ d_emb, d_emb.sum(axis=0)]
            d_hid = d_hid + d_emb @ self.feat_head.weights[0].T
        if d_logits is not None:
            parts_h = [hid.T @ d_logits, d_logits.sum(axis=0)]
            d_hid = d_hid + d_logits @ self.cls_head.weights[0].T
        g_enc, _ = backward(self.encoder, cache.enc, d_hid)
        return np.concatenate([flatten(g_enc), parts_f[0].ravel(), parts_f[1],
                               parts_h[0].ravel(), parts_h[1]])

    def features(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.forward(x)[1], axis=1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([flatten(self.encoder), flatten(self.feat_head), flatten(self.cls_head)])

    def with_flat(self, vec) -> "RectifierNet":
        enc_spec, f_spec, h_spec = self._specs()
        a = enc_spec.n_params
        b = a + f_spec.n_params
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != b + h_spec.n_params:
            raise ValueError("flat vector length does not match rectifier")
        return RectifierNet(unflatten(enc_spec, vec[:a]), unflatten(f_spec, vec[a:b]),
                            unflatten(h_spec, vec[b:]))


def features(net: RectifierNet | RandomFeatureNet, x) -> np.ndarray:
    """Embedding of ``x``: ``f(.)`` for a rectifier, the network output for a random net."""
    if isinstance(net, RectifierNet):
        return net.features(x)
    return net.embed(x)


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-2, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

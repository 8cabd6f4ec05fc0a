"""Permutation-invariant point-cloud network with in-repo exact gradients.

A shared per-point affine+ReLU encoder feeds a coordinate-wise max pool; the
pooled global feature passes through an affine head ending in 52 sigmoids,
one probability per visual-field test point.  Parameters live in one flat
array so the optimizer and finite-difference checks stay trivial.

Reverse-mode gradients are computed manually.  The max pool routes gradient
to the argmax point per channel (ties to the lowest point index), so only
those rows participate in the encoder backward pass; the implementation
exploits that sparsity but is numerically identical to the dense pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_VF_POINTS = 52
DEFAULT_THRESHOLD = 0.5
PROB_CLIP_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Architecture:
    """Layer widths: shared encoder up to the max pool, then the head."""

    in_features: int = 5
    encoder: tuple = (64, 64, 128, 256)
    head: tuple = (128, N_VF_POINTS)

    def __post_init__(self):
        if len(self.encoder) == 0 or len(self.head) == 0:
            raise ValueError("architecture must have encoder and head layers")
        if self.head[-1] != N_VF_POINTS:
            raise ValueError(f"final width must be {N_VF_POINTS}")
        if self.in_features < 1:
            raise ValueError("in_features must be >= 1")

    def layer_shapes(self):
        """(fan_in, fan_out) for every affine layer, encoder then head."""
        widths = (self.in_features,) + tuple(self.encoder) + tuple(self.head)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def n_encoder_layers(self):
        return len(self.encoder)

    @property
    def n_params(self):
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())


@dataclass
class ModelParams:
    """Flat parameter vector plus the layout that interprets it."""

    arch: Architecture
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError("theta length does not match architecture layout")

    def layers(self):
        """Views (W, b) per affine layer, sharing memory with theta."""
        out = []
        off = 0
        for fi, fo in self.arch.layer_shapes():
            W = self.theta[off:off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = self.theta[off:off + fo]
            off += fo
            out.append((W, b))
        return out

    def copy(self):
        return ModelParams(self.arch, self.theta.copy())

    def astype(self, dtype):
        return ModelParams(self.arch, self.theta.astype(dtype))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams):
        z = np.zeros_like(params.theta)
        return cls(m=z.copy(), v=z.copy(), t=0)


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per generator state."""
    theta = np.empty(arch.n_params)
    off = 0
    for fi, fo in arch.layer_shapes():
        limit = np.sqrt(6.0 / (fi + fo))
        theta[off:off + fi * fo] = rng.uniform(-limit, limit, size=fi * fo)
        off += fi * fo
        theta[off:off + fo] = 0.0
        off += fo
    return ModelParams(arch=arch, theta=theta)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_batch(params: ModelParams, X):
    """Shared forward over a (B, n, f) batch; returns probs and caches."""
    B, n, f = X.shape
    if n == 0:
        raise ValueError("empty cloud")
    if f != params.arch.in_features:
        raise ValueError("feature width does not match architecture")
    layers = params.layers()
    ne = params.arch.n_encoder_layers

    A = X.reshape(B * n, f)
    enc_acts = [A]
    for W, b in layers[:ne]:
        A = np.maximum(A @ W + b, 0.0)
        enc_acts.append(A)

    pooled_in = A.reshape(B, n, -1)
    argmax = pooled_in.argmax(axis=1)                      # (B, C) lowest index on ties
    G = np.take_along_axis(pooled_in, argmax[:, None, :], axis=1)[:, 0, :]

    head_acts = [G]
    H = G
    for W, b in layers[ne:-1]:
        H = np.maximum(H @ W + b, 0.0)
        head_acts.append(H)
    W, b = layers[-1]
    logits = H @ W + b
    probs = _sigmoid(logits)
    return probs, (enc_acts, argmax, head_acts, probs)


def forward(params: ModelParams, features) -> np.ndarray:
    """Probabilities (52,) for one cloud of per-point feature rows.

    Invariant under any permutation or duplication of the input points; all
    outputs lie strictly in (0, 1).
    """
    X = np.asarray(features, dtype=params.theta.dtype)
    if X.ndim != 2:
        raise ValueError("features must be (n_points, n_features)")
    probs, _ = _forward_batch(params, X[None])
    return probs[0]


def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy over the 52 visual-field points."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must have equal length")
    p = np.clip(probs, PROB_CLIP_EPS, 1.0 - PROB_CLIP_EPS)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))))


def _backward_batch(params: ModelParams, X, Y, caches):
    """Gradient of the mean-over-batch BCE loss; flat layout as theta."""
    enc_acts, argmax, head_acts, probs = caches
    B, n, _ = X.shape
    layers = params.layers()
    ne = params.arch.n_encoder_layers
    dtype = params.theta.dtype
    grads = np.zeros_like(params.theta)
    gviews = ModelParams(params.arch, grads).layers()

    Y = np.asarray(Y, dtype=dtype)
    k = probs.shape[1]
    pc = np.clip(probs, PROB_CLIP_EPS, 1.0 - PROB_CLIP_EPS)
    # d(mean BCE)/d(clipped p), gated where the clip saturates.
    dpc = (-(Y / pc) + (1.0 - Y) / (1.0 - pc)) / k
    gate = (probs > PROB_CLIP_EPS) & (probs < 1.0 - PROB_CLIP_EPS)
    dlogits = (dpc * gate * probs * (1.0 - probs) / B).astype(dtype)

    # Head, dense over the (B, width) matrices.
    dH = dlogits
    for li in range(len(layers) - 1, ne - 1, -1):
        W, _ = layers[li]
        A_in = head_acts[li - ne]
        gW, gb = gviews[li]
        gW += A_in.T @ dH
        gb += dH.sum(axis=0)
        dH = dH @ W.T
        if li > ne:
            dH = dH * (A_in > 0)

    # Max pool routes gradient to one point per channel; gather those rows.
    C = dH.shape[1]
    rows = (argmax + (np.arange(B) * n)[:, None]).reshape(-1)       # (B*C,)
    uniq, inv = np.unique(rows, return_inverse=True)
    dA = np.zeros((len(uniq), C), dtype=dtype)
    cols = np.tile(np.arange(C), B)
    np.add.at(dA, (inv, cols), dH.reshape(-1))

    for li in range(ne - 1, -1, -1):
        W, _ = layers[li]
        A_out = enc_acts[li + 1][uniq]
        dZ = dA * (A_out > 0)
        A_in = enc_acts[li][uniq]
        gW, gb = gviews[li]
        gW += A_in.T @ dZ
        gb += dZ.sum(axis=0)
        if li > 0:
            dA = dZ @ W.T
    return grads


def backward(params: ModelParams, features, labels) -> np.ndarray:
    """Exact gradient of bce_loss(forward(params, features), labels).

    Returned flat, in the same layout as params.theta.
    """
    X = np.asarray(features, dtype=params.theta.dtype)[None]
    _, caches = _forward_batch(params, X)
    return _backward_batch(params, X, np.asarray(labels)[None], caches)


def forward_backward_batch(params: ModelParams, X, Y):
    """(mean loss, probs, gradient) for a batch of equally sized clouds."""
    X = np.asarray(X, dtype=params.theta.dtype)
    probs, caches = _forward_batch(params, X)
    loss = float(np.mean([bce_loss(probs[i], Y[i]) for i in range(len(probs))]))
    grads = _backward_batch(params, X, Y, caches)
    return loss, probs, grads


def forward_batch(params: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=params.theta.dtype)
    probs, _ = _forward_batch(params, X)
    return probs


def adam_step(params: ModelParams, grads, state: AdamState, lr) -> tuple:
    """One bias-corrected Adam update; returns new (params, state)."""
    g = np.asarray(grads)
    if g.shape != params.theta.shape:
        raise ValueError("gradient shape does not match parameters")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return ModelParams(params.arch, theta), AdamState(m=m, v=v, t=t)


def predict(probs, threshold=DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary defect labels: 1 wherever the probability reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(probs) >= threshold).astype(np.int8)

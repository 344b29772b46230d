"""Minimal differentiable core: affine layers, ReLU, a dense-connectivity
MLP backbone, weighted softmax cross-entropy, Adam, and a finite-difference
gradient checker.

Tensors are plain float64 numpy arrays of shape (batch, width); gradients
live in per-layer buffers that accumulate until zero_grad.  Everything is
64-bit so the gradient checker can run at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64


class NnetError(ValueError):
    pass


class LinearLayer:
    """Affine map x @ W + b with gradient buffers.

    Weights initialize uniform in +-sqrt(6 / (in + out)) from the given
    stream (row-major draw order); biases start at zero.
    """

    def __init__(self, n_in: int, n_out: int, stream: SplitMix64 | None = None):
        self.n_in = n_in
        self.n_out = n_out
        if stream is None:
            self.W = np.zeros((n_in, n_out))
        else:
            limit = math.sqrt(6.0 / (n_in + n_out))
            u = stream.fill_uniform(n_in * n_out).reshape(n_in, n_out)
            self.W = (2.0 * u - 1.0) * limit
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise NnetError(f"expected (B, {self.n_in}) input, got {x.shape}")
        return x @ self.W + self.b

    def backward(self, x: np.ndarray, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return gradient w.r.t. x."""
        self.gW += x.T @ dout
        self.gb += dout.sum(axis=0)
        return dout @ self.W.T

    def zero_grad(self) -> None:
        self.gW[:] = 0.0
        self.gb[:] = 0.0

    def parameters(self):
        return [(self.W, self.gW), (self.b, self.gb)]


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (z > 0.0)


class Backbone:
    """Stack of Linear+ReLU blocks with optional dense connectivity.

    With dense connectivity, block k reads the concatenation of the
    original input and every previous block's output, so its input width
    is D + sum(widths[:k]).  The feature output is the last block's
    activation (width widths[-1]).
    """

    def __init__(self, input_dim: int, widths, dense_connectivity: bool,
                 stream: SplitMix64 | None = None):
        if not widths:
            raise NnetError("backbone needs at least one block")
        self.input_dim = input_dim
        self.widths = tuple(int(w) for w in widths)
        self.dense_connectivity = dense_connectivity
        self.blocks: list[LinearLayer] = []
        for k, width in enumerate(self.widths):
            if dense_connectivity:
                n_in = input_dim + sum(self.widths[:k])
            else:
                n_in = input_dim if k == 0 else self.widths[k - 1]
            self.blocks.append(LinearLayer(n_in, width, stream))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: np.ndarray):
        """Returns (features, cache) where cache feeds backward()."""
        if not np.isfinite(x).all():
            raise NnetError("non-finite backbone input")
        inputs, pre = [], []
        outs = []
        cur_in = x
        for k, block in enumerate(self.blocks):
            if self.dense_connectivity:
                cur_in = np.concatenate([x] + outs, axis=1) if outs else x
            elif k > 0:
                cur_in = outs[-1]
            z = block.forward(cur_in)
            inputs.append(cur_in)
            pre.append(z)
            outs.append(relu(z))
        return outs[-1], (x, inputs, pre, outs)

    def backward(self, cache, dfeat: np.ndarray) -> np.ndarray:
        """Accumulate layer gradients; return gradient w.r.t. the input."""
        x, inputs, pre, outs = cache
        douts = [np.zeros_like(o) for o in outs]
        douts[-1] = douts[-1] + dfeat
        dx = np.zeros_like(x)
        for k in range(len(self.blocks) - 1, -1, -1):
            dz = relu_backward(pre[k], douts[k])
            dinp = self.blocks[k].backward(inputs[k], dz)
            if self.dense_connectivity:
                dx += dinp[:, : self.input_dim]
                offset = self.input_dim
                for j in range(k):
                    douts[j] += dinp[:, offset : offset + self.widths[j]]
                    offset += self.widths[j]
            elif k > 0:
                douts[k - 1] += dinp
            else:
                dx += dinp
        return dx

    def layers(self) -> list[LinearLayer]:
        return list(self.blocks)


def weighted_ce(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Class-weighted softmax cross-entropy, mean over the batch.

    loss = (1/B) * sum_i w[y_i] * (-log softmax(z_i)[y_i])
    Returns (loss, dlogits).  Softmax uses max-shift stabilization.
    """
    if logits.ndim != 2:
        raise NnetError(f"logits must be (B, K), got {logits.shape}")
    if not np.isfinite(logits).all():
        raise NnetError("non-finite logits")
    B, K = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= K:
        raise NnetError("target out of range")
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise NnetError("negative class weight")

    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    probs = expz / denom

    wy = weights[targets]
    loss = float(-(wy * logp[np.arange(B), targets]).sum() / B)
    dlogits = probs * wy[:, None]
    dlogits[np.arange(B), targets] -= wy
    dlogits /= B
    return loss, dlogits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    return expz / expz.sum(axis=1, keepdims=True)


class Adam:
    """Adam with bias correction over a fixed list of (param, grad) pairs."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p, _ in self.params]
        self.v = [np.zeros_like(p) for p, _ in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(self.params):
            if not np.isfinite(g).all():
                raise NnetError("non-finite gradient in Adam step")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: lr(e) = initial * factor^floor(e / period)."""

    initial: float = 0.01
    factor: float = 1.0 / 3.0
    period: int = 20

    def at_epoch(self, epoch: int) -> float:
        return self.initial * self.factor ** (epoch // self.period)


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    return sched.at_epoch(epoch)


def perturb_parameters(model, stream: SplitMix64, scale: float = 0.01) -> None:
    """Nudge every parameter by small gaussian noise.

    Moves the model to a generic point before gradient checking: freshly
    initialized models have zero biases, so samples whose upstream ReLUs
    are all inactive produce pre-activations of exactly 0, and a central
    difference across that kink disagrees with the (valid) subgradient.
    """
    for p, _ in model.parameters():
        p += scale * stream.fill_gaussian(p.size).reshape(p.shape)


def grad_check(model, batch, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `model` must expose parameters() -> [(array, grad_array), ...] and
    loss_and_backward(batch) -> float (zeroing its own grads first).
    Relative error per element: |a - n| / max(|a|, |n|, 1e-12).
    """
    model.loss_and_backward(batch)
    analytic = [g.copy() for _, g in model.parameters()]
    worst = 0.0
    for (param, _), ga in zip(model.parameters(), analytic):
        flat = param.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = model.loss(batch)
            flat[i] = orig - h
            lm = model.loss(batch)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = gflat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst

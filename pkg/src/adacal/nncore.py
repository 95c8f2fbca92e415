"""Minimal neural-network core: MLPs with hand-written backprop, diagonal
Gaussian / Laplace log-densities, and Adam.

Everything here is plain numpy with explicit gradients; no autodiff. The
derivative code is verified against central finite differences in the test
suite and by the self-check command, so keep forward and backward in sync
when editing.

Conventions:

* ``rng(seed)`` is the package-wide PRNG constructor (PCG64). Any function
  that draws documents its draw order.
* MLP weights have shape (fan_in, fan_out); a layer computes ``x @ W + b``.
  Hidden activations are ReLU (subgradient 0 at the kink). The output
  activation is identity or softplus.
* Batched inputs are (B, d); 1-d inputs get the 1-d output back. Parameter
  gradients are summed over the batch.
"""

from __future__ import annotations

import dataclasses

import numpy as np


def rng(seed: int) -> np.random.Generator:
    """The package-wide seeded generator: ``Generator(PCG64(seed))``."""
    return np.random.Generator(np.random.PCG64(seed))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), overflow-safe."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow on either tail."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax(s: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    shifted = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_logit_grad(s: np.ndarray, y: int) -> np.ndarray:
    """d/ds of ``-log softmax(s)[y]``: softmax(s) - onehot(y)."""
    g = softmax(s)
    g[..., y] -= 1.0
    return g


_ACTIVATIONS = ("identity", "softplus")


@dataclasses.dataclass
class Mlp:
    """Fully connected ReLU network; parameters are owned, writeable arrays."""

    weights: list
    biases: list
    output_activation: str = "identity"

    @classmethod
    def create(cls, dims, generator: np.random.Generator,
               output_activation: str = "identity") -> "Mlp":
        """He-normal weights (std sqrt(2 / fan_in)), zero biases.

        Draw order: one standard-normal block per layer, first to last.
        """
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        if output_activation not in _ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {_ACTIVATIONS}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(scale * generator.standard_normal((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases,
                   output_activation=output_activation)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


@dataclasses.dataclass
class MlpGrads:
    dweights: list
    dbiases: list


def _forward_cache(mlp: Mlp, x: np.ndarray):
    """Returns (output, layer_inputs, preactivations) for a (B, d) batch."""
    inputs, preacts = [], []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        if i < last:
            h = relu(z)
        elif mlp.output_activation == "softplus":
            h = softplus(z)
        else:
            h = z
    return h, inputs, preacts


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    out, _, _ = _forward_cache(mlp, x[None, :] if squeeze else x)
    return out[0] if squeeze else out


def mlp_backward(mlp: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Backprop ``upstream`` (d objective / d output) through the network.

    Returns ``(MlpGrads, input_grad)``; parameter gradients are summed over
    the batch, ``input_grad`` matches the shape of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        upstream = upstream[None, :]
    _, inputs, preacts = _forward_cache(mlp, x)

    last = len(mlp.weights) - 1
    if mlp.output_activation == "softplus":
        delta = upstream * sigmoid(preacts[last])
    else:
        delta = upstream
    dweights = [None] * len(mlp.weights)
    dbiases = [None] * len(mlp.biases)
    for i in range(last, -1, -1):
        dweights[i] = inputs[i].T @ delta
        dbiases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ mlp.weights[i].T) * (preacts[i - 1] > 0)
    input_grad = delta @ mlp.weights[0].T
    return (MlpGrads(dweights=dweights, dbiases=dbiases),
            input_grad[0] if squeeze else input_grad)


def mlp_params(mlp: Mlp) -> list:
    """Flat parameter list (w0, b0, w1, b1, ...); aliases the model arrays."""
    out = []
    for w, b in zip(mlp.weights, mlp.biases):
        out.extend((w, b))
    return out


def mlp_grad_arrays(grads: MlpGrads) -> list:
    out = []
    for dw, db in zip(grads.dweights, grads.dbiases):
        out.extend((dw, db))
    return out


# ---------------------------------------------------------------------------
# distributions

@dataclasses.dataclass(frozen=True)
class DiagonalGaussian:
    """Mean / log-std pair; arrays may carry leading batch axes."""

    mean: np.ndarray
    log_std: np.ndarray


def gaussian_logpdf(g: DiagonalGaussian, z: np.ndarray):
    """log N(z; g.mean, diag(exp(g.log_std)^2)), summed over the last axis."""
    diff = (z - g.mean) * np.exp(-g.log_std)
    return -0.5 * np.sum(np.log(2.0 * np.pi) + 2.0 * g.log_std + diff * diff,
                         axis=-1)


def laplace_logpdf(loc: np.ndarray, scale: float, x: np.ndarray):
    """Factorized Laplace log-density of x, summed over the last axis."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    return np.sum(-np.abs(x - loc) / scale - np.log(2.0 * scale), axis=-1)


def reparameterize(g: DiagonalGaussian, noise: np.ndarray) -> np.ndarray:
    """z = mean + exp(log_std) * noise."""
    return g.mean + np.exp(g.log_std) * noise


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian):
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Per dimension: lp - lq + (exp(2 lq) + (mq - mp)^2) exp(-2 lp) / 2 - 1/2.
    """
    var_ratio = np.exp(2.0 * (q.log_std - p.log_std))
    scaled_sq = (q.mean - p.mean) ** 2 * np.exp(-2.0 * p.log_std)
    return np.sum(p.log_std - q.log_std + 0.5 * (var_ratio + scaled_sq) - 0.5,
                  axis=-1)


# ---------------------------------------------------------------------------
# optimizer

@dataclasses.dataclass
class AdamState:
    """Adam with bias correction; updates parameters in place."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: list
    v: list

    @classmethod
    def create(cls, params, lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads) -> None:
    """One descent step: p -= lr * m_hat / (sqrt(v_hat) + eps).

    ``params`` must be the same arrays the state was created for; they are
    modified in place. ``grads`` are gradients of the quantity being
    minimized.
    """
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match the optimizer state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

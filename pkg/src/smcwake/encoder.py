"""Amortized conditional densities q(z|x) with exact log-density, sampling,
and score gradients, backed by a small dense ReLU network with hand-rolled
backpropagation, plus the Adam/SGD parameter update.

Sampling never carries gradient information: score gradients treat the
supplied coefficients and sampled points as constants, which is exactly the
stop-gradient convention the training objectives require.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .numkit import GaussianDist, as_generator

__all__ = [
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "FullCovGaussianEncoder",
    "MixtureDiagGaussianEncoder",
    "AdamState",
    "adam_step",
    "NonFiniteGradientError",
    "load_encoder",
]


@dataclass
class MlpParams:
    """Dense network weights; rectified-linear hidden activations."""

    weights: list  # (n_out, n_in) per layer
    biases: list   # (n_out,) per layer

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        offset = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[offset:offset + w.size].reshape(w.shape)
            offset += w.size
            b[...] = vec[offset:offset + b.size]
            offset += b.size


def init_mlp(layer_sizes, rng) -> MlpParams:
    """Centered-uniform init scaled by fan-in, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    gen = as_generator(rng)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(gen.uniform(-bound, bound, (n_out, n_in)))
        biases.append(gen.uniform(-bound, bound, n_out))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; returns (output, cache) with cache reusable by backward."""
    h = np.asarray(x, dtype=float)
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = w @ h + b
        preacts.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    return h, (inputs, preacts)


def mlp_backward(params: MlpParams, cache, d_out: np.ndarray) -> np.ndarray:
    """Backpropagate d(loss)/d(output) to a flat gradient over all weights."""
    inputs, preacts = cache
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = np.asarray(d_out, dtype=float)
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = np.outer(delta, inputs[i])
        grads_b[i] = delta
        if i > 0:
            delta = (params.weights[i].T @ delta) * (preacts[i - 1] > 0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


class _EncoderBase:
    """Shared parameter-vector plumbing and checkpoint format."""

    family: str = ""
    trunk: MlpParams

    @property
    def n_params(self) -> int:
        return self.trunk.n_params

    def get_params(self) -> np.ndarray:
        return self.trunk.flatten()

    def set_params(self, vec: np.ndarray) -> None:
        self.trunk.set_flat(vec)

    def _meta(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        """Flat little-endian float64 vector plus a JSON sidecar."""
        path = Path(path)
        path.write_bytes(self.get_params().astype("<f8").tobytes())
        meta = {"format_version": 1, "family": self.family,
                "layer_sizes": self.trunk.layer_sizes}
        meta.update(self._meta())
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_encoder(path):
    """Rebuild an encoder from a checkpoint written by ``save``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    hidden = tuple(meta["layer_sizes"][1:-1])
    if meta["family"] == FullCovGaussianEncoder.family:
        enc = FullCovGaussianEncoder(meta["obs_dim"], meta["latent_dim"],
                                     hidden=hidden, jitter=meta["jitter"], rng=0)
    elif meta["family"] == MixtureDiagGaussianEncoder.family:
        enc = MixtureDiagGaussianEncoder(meta["obs_dim"], meta["latent_dim"],
                                         n_components=meta["n_components"],
                                         hidden=hidden, rng=0)
    else:
        raise ValueError(f"unknown encoder family {meta['family']!r}")
    vec = np.frombuffer(path.read_bytes(), dtype="<f8").astype(float)
    enc.set_params(vec)
    return enc


class FullCovGaussianEncoder(_EncoderBase):
    """q(z|x) = N(mu(x), L(x) L(x)^T + jitter I).

    The trunk emits mu and the packed lower-triangular entries of L; raw
    diagonal entries pass through exp so that zero output means unit scale
    (broad initial q) and the covariance is positive definite for any output.
    """

    family = "full-cov"

    def __init__(self, obs_dim: int, latent_dim: int, hidden=(64, 64),
                 jitter: float = 1e-4, rng=0):
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.jitter = float(jitter)
        p = self.latent_dim
        self._tril_rows, self._tril_cols = np.tril_indices(p)
        self._diag_mask = self._tril_rows == self._tril_cols
        out_dim = p + self._tril_rows.size
        self.trunk = init_mlp([self.obs_dim, *hidden, out_dim], rng)
        # Broad initial q: zero the biases feeding the raw diagonal of L.
        self.trunk.biases[-1][p:][self._diag_mask] = 0.0

    def _meta(self) -> dict:
        return {"obs_dim": self.obs_dim, "latent_dim": self.latent_dim,
                "jitter": self.jitter}

    def _heads(self, x):
        out, cache = mlp_forward(self.trunk, np.asarray(x, dtype=float).reshape(self.obs_dim))
        p = self.latent_dim
        mu = out[:p]
        raw = out[p:]
        lower = np.zeros((p, p))
        lower[self._tril_rows, self._tril_cols] = raw
        diag = np.exp(raw[self._diag_mask])
        lower[np.arange(p), np.arange(p)] = diag
        cov = lower @ lower.T + self.jitter * np.eye(p)
        chol_cov = cholesky(cov, lower=True)
        return mu, lower, chol_cov, cache

    def conditional(self, x) -> GaussianDist:
        mu, _, chol_cov, _ = self._heads(x)
        return GaussianDist(mu, chol_cov)

    def log_prob(self, x, z):
        return self.conditional(x).logpdf(z)

    def sample(self, x, n: int, rng) -> np.ndarray:
        return self.conditional(x).sample(n, rng)

    def _pack_lower_grad(self, d_lower: np.ndarray, lower: np.ndarray) -> np.ndarray:
        raw_grad = d_lower[self._tril_rows, self._tril_cols].copy()
        diag = lower[np.arange(self.latent_dim), np.arange(self.latent_dim)]
        raw_grad[self._diag_mask] *= diag  # chain through exp on the diagonal
        return raw_grad

    def _output_grad(self, mu, lower, chol_cov, zs, coeffs):
        """d/d(trunk outputs) of sum_i c_i log q(z_i | x)."""
        p = self.latent_dim
        sigma_inv = cho_solve((chol_cov, True), np.eye(p))
        diffs = zs - mu                       # (n, p)
        total_c = float(np.sum(coeffs))
        d_mu = sigma_inv @ (coeffs @ diffs)
        scatter = (coeffs[:, None] * diffs).T @ diffs
        g_sigma = 0.5 * (sigma_inv @ scatter @ sigma_inv - total_c * sigma_inv)
        d_lower = 2.0 * g_sigma @ lower
        return np.concatenate([d_mu, self._pack_lower_grad(d_lower, lower)])

    def score_grad(self, x, zs, coeffs) -> np.ndarray:
        """sum_i coeffs_i * d log q(z_i|x) / d(parameters); coefficients are constants."""
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        coeffs = np.asarray(coeffs, dtype=float).reshape(zs.shape[0])
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("score coefficients must be finite")
        mu, lower, chol_cov, cache = self._heads(x)
        d_out = self._output_grad(mu, lower, chol_cov, zs, coeffs)
        return mlp_backward(self.trunk, cache, d_out)

    def posterior_score_expectation(self, x, target: GaussianDist) -> np.ndarray:
        """Closed-form E_target[d log q(z|x) / d(parameters)] for Gaussian targets."""
        mu, lower, chol_cov, cache = self._heads(x)
        p = self.latent_dim
        sigma_inv = cho_solve((chol_cov, True), np.eye(p))
        delta = target.mean - mu
        second = target.cov + np.outer(delta, delta)
        d_mu = sigma_inv @ delta
        g_sigma = 0.5 * (sigma_inv @ second @ sigma_inv - sigma_inv)
        d_lower = 2.0 * g_sigma @ lower
        d_out = np.concatenate([d_mu, self._pack_lower_grad(d_lower, lower)])
        return mlp_backward(self.trunk, cache, d_out)


class MixtureDiagGaussianEncoder(_EncoderBase):
    """q(z|x): mixture of C diagonal Gaussians with softmax weights.

    The trunk emits component logits, C mean vectors, and C log-std vectors;
    stds are strictly positive through the exponential link. Used where the
    posterior is multimodal or curved (e.g. the two-moons benchmark).
    """

    family = "mixture-diag"

    def __init__(self, obs_dim: int, latent_dim: int, n_components: int = 8,
                 hidden=(64, 64), rng=0):
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.n_components = int(n_components)
        out_dim = self.n_components * (1 + 2 * self.latent_dim)
        self.trunk = init_mlp([self.obs_dim, *hidden, out_dim], rng)
        # Broad initial q: zero the biases feeding the log-std block.
        c, p = self.n_components, self.latent_dim
        self.trunk.biases[-1][c + c * p:] = 0.0

    def _meta(self) -> dict:
        return {"obs_dim": self.obs_dim, "latent_dim": self.latent_dim,
                "n_components": self.n_components}

    def _heads(self, x):
        out, cache = mlp_forward(self.trunk, np.asarray(x, dtype=float).reshape(self.obs_dim))
        c, p = self.n_components, self.latent_dim
        logits = out[:c]
        means = out[c:c + c * p].reshape(c, p)
        log_stds = out[c + c * p:].reshape(c, p)
        return logits, means, log_stds, cache

    def mixture_params(self, x):
        """(weights, means, stds) of the conditional mixture at x."""
        logits, means, log_stds, _ = self._heads(x)
        w = np.exp(logits - np.max(logits))
        return w / w.sum(), means, np.exp(log_stds)

    @staticmethod
    def _component_logpdf(zs, means, log_stds):
        # zs (n, p) against each component -> (n, C)
        diffs = zs[:, None, :] - means[None, :, :]
        inv_var = np.exp(-2.0 * log_stds)[None, :, :]
        quad = np.sum(diffs * diffs * inv_var, axis=2)
        log_norm = np.sum(log_stds, axis=1)[None, :]
        p = means.shape[1]
        return -0.5 * (p * np.log(2 * np.pi) + quad) - log_norm

    def log_prob(self, x, z):
        zs = np.asarray(z, dtype=float)
        single = zs.ndim == 1
        zs = np.atleast_2d(zs)
        logits, means, log_stds, _ = self._heads(x)
        log_pi = logits - (np.max(logits) + np.log(np.sum(np.exp(logits - np.max(logits)))))
        joint = log_pi[None, :] + self._component_logpdf(zs, means, log_stds)
        m = np.max(joint, axis=1, keepdims=True)
        out = (m[:, 0] + np.log(np.sum(np.exp(joint - m), axis=1)))
        return float(out[0]) if single else out

    def sample(self, x, n: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        weights, means, stds = self.mixture_params(x)
        idx = gen.choice(self.n_components, size=n, p=weights)
        eps = gen.standard_normal((n, self.latent_dim))
        return means[idx] + stds[idx] * eps

    def score_grad(self, x, zs, coeffs) -> np.ndarray:
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        coeffs = np.asarray(coeffs, dtype=float).reshape(zs.shape[0])
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("score coefficients must be finite")
        logits, means, log_stds, cache = self._heads(x)
        log_pi = logits - (np.max(logits) + np.log(np.sum(np.exp(logits - np.max(logits)))))
        pi = np.exp(log_pi)
        joint = log_pi[None, :] + self._component_logpdf(zs, means, log_stds)
        m = np.max(joint, axis=1, keepdims=True)
        log_q = m[:, 0] + np.log(np.sum(np.exp(joint - m), axis=1))
        resp = np.exp(joint - log_q[:, None])     # (n, C)
        d_logits = coeffs @ (resp - pi[None, :])
        diffs = zs[:, None, :] - means[None, :, :]
        inv_var = np.exp(-2.0 * log_stds)[None, :, :]
        weighted = coeffs[:, None, None] * resp[:, :, None]
        d_means = np.sum(weighted * diffs * inv_var, axis=0)
        d_log_stds = np.sum(weighted * (diffs * diffs * inv_var - 1.0), axis=0)
        d_out = np.concatenate([d_logits, d_means.ravel(), d_log_stds.ravel()])
        return mlp_backward(self.trunk, cache, d_out)


class NonFiniteGradientError(ValueError):
    """The optimizer refused a step because the gradient is not finite."""


@dataclass
class AdamState:
    """Adaptive-moment optimizer state; ``sgd=True`` disables the moments for
    the plain update phi <- phi - lr * grad."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sgd: bool = False
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step_count: int = 0


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One descent step; returns (new_params, state). Rejects non-finite grads."""
    grad = np.asarray(grad, dtype=float)
    params = np.asarray(params, dtype=float)
    if grad.shape != params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("gradient contains non-finite entries")
    state.step_count += 1
    if state.sgd:
        return params - state.lr * grad, state
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ValueError("optimizer state shape does not match parameters")
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step_count)
    v_hat = state.v / (1 - state.beta2**state.step_count)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state

"""Unnormalised target log-densities and their gradients.

Provides the 1-D Gaussian mixture, diagonal Gaussians, Bayesian-NN
posteriors for binary classification, and exact finite-state chains used
to check KL monotonicity of Markov transitions at machine precision.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    """Invalid target or dataset configuration."""


class TargetDensity:
    """log p(z) up to a constant, with gradient in z.

    Subclasses implement the single-point methods; the batch methods accept
    a (K, dim) matrix and default to row loops.  Evaluations are pure.
    """

    dim: int

    def log_density(self, z: np.ndarray) -> float:
        raise NotImplementedError

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_density_batch(self, Z: np.ndarray) -> np.ndarray:
        return np.array([self.log_density(z) for z in np.atleast_2d(Z)])

    def grad_log_density_batch(self, Z: np.ndarray) -> np.ndarray:
        return np.stack([self.grad_log_density(z) for z in np.atleast_2d(Z)])

    def value_and_grad_batch(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.log_density_batch(Z), self.grad_log_density_batch(Z)


class DiagonalGaussian(TargetDensity):
    """N(mean, diag(std^2)), normalised."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise ConfigError("std entries must be positive")
        self.dim = self.mean.size
        self._log_norm = -0.5 * self.dim * np.log(2 * np.pi) - np.sum(np.log(self.std))

    def log_density(self, z):
        z = np.atleast_1d(z)
        return float(self._log_norm - 0.5 * np.sum(((z - self.mean) / self.std) ** 2))

    def grad_log_density(self, z):
        z = np.atleast_1d(z)
        return -(z - self.mean) / self.std**2

    def log_density_batch(self, Z):
        Z = np.atleast_2d(Z)
        return self._log_norm - 0.5 * np.sum(((Z - self.mean) / self.std) ** 2, axis=1)

    def grad_log_density_batch(self, Z):
        Z = np.atleast_2d(Z)
        return -(Z - self.mean) / self.std**2


class GaussianMixture1D(TargetDensity):
    """Two-component (by default) 1-D Gaussian mixture, normalised.

    Defaults give the bimodal 0.5 N(-3,1) + 0.5 N(3,1) benchmark target.
    """

    dim = 1

    def __init__(self, weights=(0.5, 0.5), means=(-3.0, 3.0), variances=(1.0, 1.0)):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ConfigError("mixture variances must be positive")

    def _component_logs(self, z):
        # shape (..., n_components)
        z = np.asarray(z, dtype=np.float64)[..., None]
        return (
            np.log(self.weights)
            - 0.5 * np.log(2 * np.pi * self.variances)
            - 0.5 * (z - self.means) ** 2 / self.variances
        )

    def log_density(self, z):
        z = float(np.atleast_1d(z)[0])
        comp = self._component_logs(z)
        m = comp.max()
        return float(m + np.log(np.exp(comp - m).sum()))

    def grad_log_density(self, z):
        z = float(np.atleast_1d(z)[0])
        comp = self._component_logs(z)
        resp = np.exp(comp - comp.max())
        resp /= resp.sum()
        return np.array([np.sum(resp * (self.means - z) / self.variances)])

    def log_density_batch(self, Z):
        z = np.atleast_2d(Z)[:, 0]
        comp = self._component_logs(z)
        m = comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]

    def grad_log_density_batch(self, Z):
        z = np.atleast_2d(Z)[:, 0]
        comp = self._component_logs(z)
        resp = np.exp(comp - comp.max(axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        g = np.sum(resp * (self.means - z[:, None]) / self.variances, axis=1)
        return g[:, None]


class BnnPosterior(TargetDensity):
    """Posterior over the weights of a [d_in, hidden, 1] classifier.

    log joint = Gaussian prior over the flattened weights (biases included)
    + Bernoulli likelihood through a ReLU net with sigmoid output.  The
    single-point gradient goes through the autodiff tape; the batch path is
    a hand-vectorised backward pass over K weight vectors, tested against
    the tape.
    """

    def __init__(self, X, y, hidden: int = 50, prior_std: float = 1.0,
                 likelihood_scale: float = 1.0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.size == 0 or y.size == 0:
            raise ConfigError("BNN posterior needs a non-empty dataset")
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ConfigError("features must be (N, d) with matching label vector")
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ConfigError("labels must be binary 0/1")
        self.X, self.y = X, y
        self.hidden = hidden
        self.prior_std = float(prior_std)
        self.likelihood_scale = float(likelihood_scale)
        self.d_in = X.shape[1]
        self.layer_sizes = [self.d_in, hidden, 1]
        self._template = ad.ParamSet(
            {
                "w0": np.zeros((self.d_in, hidden)),
                "b0": np.zeros(hidden),
                "w1": np.zeros((hidden, 1)),
                "b1": np.zeros(1),
            }
        )
        self.dim = self._template.size()

    def with_minibatch(self, idx: np.ndarray) -> "BnnPosterior":
        """View with the likelihood term rescaled to N/len(idx).

        No stationarity claim is made for MH under minibatching; this is a
        training-time knob only.
        """
        idx = np.asarray(idx)
        scale = self.X.shape[0] / idx.size
        return BnnPosterior(
            self.X[idx], self.y[idx], hidden=self.hidden,
            prior_std=self.prior_std, likelihood_scale=scale,
        )

    def split_weights(self, z: np.ndarray) -> ad.ParamSet:
        return self._template.unflatten(np.asarray(z, dtype=np.float64))

    def _log_joint_node(self, params: ad.ParamSet) -> ad.Tensor:
        logits = ad.forward_mlp(params, self.layer_sizes, "relu", ad.constant(self.X))
        y = ad.constant(self.y[:, None])
        # y*log(sigma) + (1-y)*log(1-sigma), via stable softplus
        ll = ad.neg(
            ad.add(
                ad.mul(y, ad.softplus(ad.neg(logits))),
                ad.mul(ad.constant(1.0) - y, ad.softplus(logits)),
            )
        )
        total_ll = ad.mul(ad.constant(self.likelihood_scale), ad.tsum(ll))
        flat_sq = [ad.tsum(ad.mul(t, t)) for t in params.tensors().values()]
        sq_norm = flat_sq[0]
        for term in flat_sq[1:]:
            sq_norm = ad.add(sq_norm, term)
        prior = ad.add(
            ad.constant(
                -0.5 * self.dim * np.log(2 * np.pi * self.prior_std**2)
            ),
            ad.mul(ad.constant(-0.5 / self.prior_std**2), sq_norm),
        )
        return ad.add(prior, total_ll)

    def log_density(self, z):
        return float(self._log_joint_node(self.split_weights(z)).data)

    def grad_log_density(self, z):
        params = self.split_weights(z)
        node = self._log_joint_node(params)
        grads = ad.grad(node, params)
        return np.concatenate([grads[name].ravel() for name in params.names()])

    def log_likelihood_node(self, params: ad.ParamSet) -> ad.Tensor:
        """Likelihood term only; used by predictive diagnostics."""
        logits = ad.forward_mlp(params, self.layer_sizes, "relu", ad.constant(self.X))
        y = ad.constant(self.y[:, None])
        ll = ad.neg(
            ad.add(
                ad.mul(y, ad.softplus(ad.neg(logits))),
                ad.mul(ad.constant(1.0) - y, ad.softplus(logits)),
            )
        )
        return ad.tsum(ll)

    def logits_batch(self, Z: np.ndarray) -> np.ndarray:
        """(K, N) classifier logits for K weight vectors at once."""
        W1, b1, W2, b2 = self._unpack_batch(np.atleast_2d(Z))
        A1 = np.einsum("nd,kdh->knh", self.X, W1) + b1[:, None, :]
        H1 = np.maximum(A1, 0.0)
        return np.einsum("knh,kho->kn", H1, W2) + b2[:, None, 0]

    def _unpack_batch(self, Z):
        K = Z.shape[0]
        d, h = self.d_in, self.hidden
        o = 0
        W1 = Z[:, o : o + d * h].reshape(K, d, h)
        o += d * h
        b1 = Z[:, o : o + h]
        o += h
        W2 = Z[:, o : o + h].reshape(K, h, 1)
        o += h
        b2 = Z[:, o : o + 1]
        return W1, b1, W2, b2

    def value_and_grad_batch(self, Z):
        Z = np.atleast_2d(Z)
        K = Z.shape[0]
        W1, b1, W2, b2 = self._unpack_batch(Z)
        A1 = np.einsum("nd,kdh->knh", self.X, W1) + b1[:, None, :]
        H1 = np.maximum(A1, 0.0)
        logits = np.einsum("knh,kho->kn", H1, W2) + b2[:, None, 0]

        y = self.y[None, :]
        ll = -(y * np.logaddexp(0.0, -logits) + (1 - y) * np.logaddexp(0.0, logits))
        prior_const = -0.5 * self.dim * np.log(2 * np.pi * self.prior_std**2)
        vals = (
            prior_const
            - 0.5 * np.sum(Z * Z, axis=1) / self.prior_std**2
            + self.likelihood_scale * ll.sum(axis=1)
        )

        # d ll / d logit = y - sigmoid(logit)
        s = np.where(
            logits >= 0,
            1.0 / (1.0 + np.exp(-np.abs(logits))),
            np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))),
        )
        dlogit = self.likelihood_scale * (y - s)  # (K, N)
        gW2 = np.einsum("knh,kn->kh", H1, dlogit)[:, :, None]
        gb2 = dlogit.sum(axis=1)[:, None]
        dH1 = np.einsum("kn,kho->knh", dlogit, W2)
        dA1 = dH1 * (A1 > 0)
        gW1 = np.einsum("nd,knh->kdh", self.X, dA1)
        gb1 = dA1.sum(axis=1)
        grads = np.concatenate(
            [gW1.reshape(K, -1), gb1, gW2.reshape(K, -1), gb2], axis=1
        )
        grads -= Z / self.prior_std**2
        return vals, grads

    def log_density_batch(self, Z):
        return self.value_and_grad_batch(Z)[0]

    def grad_log_density_batch(self, Z):
        return self.value_and_grad_batch(Z)[1]


class FiniteChainTarget:
    """Finite-state Markov chain with known stationary vector.

    The exact testbed for KL monotonicity of Markov transitions: rows of M
    are transition laws, pi is stationary to 1e-12.
    """

    def __init__(self, pi: np.ndarray, M: np.ndarray):
        pi = np.asarray(pi, dtype=np.float64)
        M = np.asarray(M, dtype=np.float64)
        if pi.ndim != 1 or M.shape != (pi.size, pi.size):
            raise ConfigError("pi must be length-S and M must be S x S")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ConfigError("pi must be strictly positive and sum to 1")
        if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-12:
            raise ConfigError("M must be row-stochastic")
        if np.max(np.abs(pi @ M - pi)) > 1e-12:
            raise ConfigError("pi is not stationary for M")
        self.pi, self.M = pi, M
        self.n_states = pi.size


def make_reversible_chain(
    n_states: int, rng: np.random.Generator, lazy_eps: float = 0.1
) -> FiniteChainTarget:
    """Random pi-reversible chain: lazy mixture of I and a Metropolised
    random proposal, so pi is stationary by construction."""
    pi = rng.random(n_states) + 0.1
    pi /= pi.sum()
    proposal = rng.random((n_states, n_states)) + 0.1
    proposal /= proposal.sum(axis=1, keepdims=True)
    M = np.zeros_like(proposal)
    for i in range(n_states):
        for j in range(n_states):
            if i == j:
                continue
            accept = min(1.0, pi[j] * proposal[j, i] / (pi[i] * proposal[i, j]))
            M[i, j] = proposal[i, j] * accept
        M[i, i] = 1.0 - M[i].sum()
    M = lazy_eps * np.eye(n_states) + (1.0 - lazy_eps) * M
    # kill float drift so the stationarity check holds at 1e-12
    M /= M.sum(axis=1, keepdims=True)
    return FiniteChainTarget(pi, M)


def chain_evolve_exact(q: np.ndarray, M: np.ndarray, steps: int) -> np.ndarray:
    """q M^steps with renormalisation against float drift."""
    q = np.asarray(q, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ConfigError("q must lie on the simplex")
    if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-12:
        raise ConfigError("M must be row-stochastic")
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    out = q.copy()
    for _ in range(steps):
        out = out @ M
        drift = out.sum()
        if abs(drift - 1.0) > 1e-12:
            out /= drift
    return out


def gmm_log_density(z: float, target: GaussianMixture1D | None = None) -> float:
    """Module-level convenience over GaussianMixture1D.log_density."""
    return (target or GaussianMixture1D()).log_density(z)

"""Parametric sampler families: the student side of the training loop.

Every family draws fresh noise and warps it through a transform built on
the autodiff tape, so pathwise gradients flow into the family's ParamSet.
Only the mean-field Gaussian exposes a density; the other families are
"wild" and raise UnsupportedDensity, which is what forces the sample-based
update rules.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .kernels import STUDENT_INITIAL, SampleBatch


class UnsupportedDensity(RuntimeError):
    """The family can be sampled but its density cannot be evaluated."""


class SamplerFamily:
    """Shared sampler interface; subclasses define the noise warp."""

    family: str = "abstract"
    density_tractable: bool = False
    noise_dim: int = 0
    output_dim: int = 0

    def __init__(self):
        self.params = ad.ParamSet()

    def sample(self, K: int, rng: np.random.Generator, seed: int | None = None) -> SampleBatch:
        if K < 1:
            raise ValueError("K must be >= 1")
        node = self._sample_node(K, rng)
        return SampleBatch(
            np.array(node.data), provenance=STUDENT_INITIAL, seed=seed, node=node
        )

    def _sample_node(self, K: int, rng: np.random.Generator) -> ad.Tensor:
        raise NotImplementedError

    def log_density(self, z: np.ndarray) -> float:
        raise UnsupportedDensity(
            f"{self.family} has no tractable density; use a sample-based rule"
        )

    def log_density_node(self, Z: np.ndarray) -> ad.Tensor:
        raise UnsupportedDensity(
            f"{self.family} has no tractable density; use a sample-based rule"
        )

    def checkpoint(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "params": json.loads(self.params.to_json()),
                "extras": self._extras(),
            },
            sort_keys=True,
        )

    def _extras(self) -> dict:
        return {}

    @staticmethod
    def from_checkpoint(text: str) -> "SamplerFamily":
        payload = json.loads(text)
        spec = _FAMILIES[payload["family"]].__new__(_FAMILIES[payload["family"]])
        SamplerFamily.__init__(spec)
        spec.params = ad.ParamSet.from_json(json.dumps(payload["params"]))
        spec._restore()
        for key, value in payload.get("extras", {}).items():
            setattr(spec, key, value)
        return spec

    def _restore(self):
        raise NotImplementedError(f"{self.family} does not support checkpoints")


class MeanFieldGaussian(SamplerFamily):
    """Diagonal Gaussian via z = mu + exp(log_std) * eps."""

    family = "mean_field_gaussian"
    density_tractable = True

    def __init__(self, dim: int, mu0=None, log_std0=None):
        super().__init__()
        self.dim = dim
        self.noise_dim = dim
        self.output_dim = dim
        self.params.add("mu", np.zeros(dim) if mu0 is None else np.asarray(mu0, float))
        self.params.add(
            "log_std", np.zeros(dim) if log_std0 is None else np.asarray(log_std0, float)
        )

    def _restore(self):
        self.dim = self.params.value("mu").size
        self.noise_dim = self.output_dim = self.dim

    @property
    def mu(self) -> np.ndarray:
        return self.params.value("mu")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.params.value("log_std"))

    def _sample_node(self, K, rng):
        eps = ad.constant(rng.standard_normal((K, self.dim)))
        return ad.add(self.params["mu"], ad.mul(ad.exp(self.params["log_std"]), eps))

    def log_density(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        mu, log_std = self.mu, self.params.value("log_std")
        return float(
            -0.5 * self.dim * np.log(2 * np.pi)
            - log_std.sum()
            - 0.5 * np.sum(((z - mu) / np.exp(log_std)) ** 2)
        )

    def log_density_node(self, Z) -> ad.Tensor:
        """(K,) log q(z_k) as a tape node in the family's parameters.

        Z may be a live node (reparameterised ELBO) or plain values."""
        if not isinstance(Z, ad.Tensor):
            Z = ad.constant(np.atleast_2d(Z))
        mu, log_std = self.params["mu"], self.params["log_std"]
        diff = ad.sub(Z, mu)
        inv_var = ad.exp(ad.mul(ad.constant(-2.0), log_std))
        quad = ad.tsum(ad.mul(ad.mul(diff, diff), inv_var), axis=1)
        const = ad.constant(-0.5 * self.dim * np.log(2 * np.pi))
        return ad.add(
            ad.sub(const, ad.tsum(log_std)), ad.mul(ad.constant(-0.5), quad)
        )


class VariationalProgram(SamplerFamily):
    """Four-scalar program: a coin (eps3) picks the sign of one of two
    rectified Gaussian arms, giving a bimodal 1-D sampler.

    z = 1[eps3 >= 0] relu(w1 eps1 + b1) - 1[eps3 < 0] relu(w2 eps2 + b2)
    """

    family = "variational_program"
    noise_dim = 3
    output_dim = 1

    def __init__(self, w1=1.0, b1=0.0, w2=1.0, b2=0.0):
        super().__init__()
        for name, value in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            self.params.add(name, np.array([value], dtype=np.float64))

    def _restore(self):
        pass

    def _sample_node(self, K, rng):
        eps = rng.standard_normal((K, 3))
        e1, e2 = ad.constant(eps[:, 0:1]), ad.constant(eps[:, 1:2])
        gate = ad.constant((eps[:, 2:3] >= 0).astype(np.float64))
        arm1 = ad.relu(ad.add(ad.mul(self.params["w1"], e1), self.params["b1"]))
        arm2 = ad.relu(ad.add(ad.mul(self.params["w2"], e2), self.params["b2"]))
        return ad.sub(ad.mul(gate, arm1), ad.mul(ad.constant(1.0) - gate, arm2))


class ImplicitMlp(SamplerFamily):
    """Noise warped through a small dense net; density intractable."""

    family = "implicit_mlp"

    def __init__(self, layer_sizes=(3, 20, 20, 1), rng: np.random.Generator | None = None,
                 init_scale: float | None = None):
        super().__init__()
        self.layer_sizes = list(layer_sizes)
        self.noise_dim = self.layer_sizes[0]
        self.output_dim = self.layer_sizes[-1]
        rng = rng or np.random.default_rng(0)
        self.params = ad.init_mlp_params(self.layer_sizes, rng, scale=init_scale)

    def _restore(self):
        sizes = []
        i = 0
        while f"w{i}" in self.params:
            w = self.params.value(f"w{i}")
            if not sizes:
                sizes.append(w.shape[0])
            sizes.append(w.shape[1])
            i += 1
        self.layer_sizes = sizes
        self.noise_dim = sizes[0]
        self.output_dim = sizes[-1]

    def warp(self, eps: np.ndarray) -> ad.Tensor:
        return ad.forward_mlp(self.params, self.layer_sizes, "relu", ad.constant(eps))

    def _sample_node(self, K, rng):
        return self.warp(rng.standard_normal((K, self.noise_dim)))


class DropoutMlp(ImplicitMlp):
    """ImplicitMlp with a multiplicative Bernoulli mask on the input noise.

    The mask is drawn per sample and held constant on the tape, so pathwise
    gradients w.r.t. the weights stay valid.
    """

    family = "dropout_mlp"

    def __init__(self, layer_sizes=(3, 20, 20, 1), rate: float = 0.5,
                 rng: np.random.Generator | None = None, init_scale: float | None = None):
        if not (0 <= rate < 1):
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        super().__init__(layer_sizes=layer_sizes, rng=rng, init_scale=init_scale)
        self.rate = rate

    def _extras(self):
        return {"rate": self.rate}

    def _restore(self):
        super()._restore()
        self.rate = 0.5

    def _sample_node(self, K, rng):
        eps = rng.standard_normal((K, self.noise_dim))
        mask = (rng.random((K, self.noise_dim)) >= self.rate).astype(np.float64)
        return self.warp(mask * eps)


class NormalizedEnsemble(SamplerFamily):
    """Gaussian sampler whose batches are whitened before the affine map.

    Noise is standardised per dimension by the batch mean/std (population
    convention, ddof=0) and then rescaled by the learned (mu, sigma), so
    the output batch carries empirical mean mu and std sigma exactly.  The
    batch coupling makes the density intractable.
    """

    family = "normalized_ensemble"

    def __init__(self, dim: int, mu0=None, log_std0=None):
        super().__init__()
        self.dim = dim
        self.noise_dim = dim
        self.output_dim = dim
        self.params.add("mu", np.zeros(dim) if mu0 is None else np.asarray(mu0, float))
        self.params.add(
            "log_std", np.zeros(dim) if log_std0 is None else np.asarray(log_std0, float)
        )

    def _restore(self):
        self.dim = self.params.value("mu").size
        self.noise_dim = self.output_dim = self.dim

    @property
    def mu(self) -> np.ndarray:
        return self.params.value("mu")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.params.value("log_std"))

    def _sample_node(self, K, rng):
        if K < 2:
            raise ValueError("normalised ensemble sampling needs K >= 2")
        eps = rng.standard_normal((K, self.dim))
        u = (eps - eps.mean(axis=0)) / eps.std(axis=0)
        return ad.add(self.params["mu"], ad.mul(ad.exp(self.params["log_std"]), ad.constant(u)))


_FAMILIES = {
    cls.family: cls
    for cls in (
        MeanFieldGaussian,
        VariationalProgram,
        ImplicitMlp,
        DropoutMlp,
        NormalizedEnsemble,
    )
}


def load_checkpoint(text: str) -> SamplerFamily:
    return SamplerFamily.from_checkpoint(text)

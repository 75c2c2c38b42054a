"""Training loops: the amortisation iteration (sample, evolve, feed back,
update), decoder learning through the teacher-evolved bound, and the VI
baseline used for comparisons."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data_io import write_float_csv
from .diagnostics import KsdConfig, ksd
from .kernels import (
    STUDENT_INITIAL,
    KernelConfig,
    SampleBatch,
    run_chain,
)
from .samplers import MeanFieldGaussian, SamplerFamily, UnsupportedDensity
from .targets import TargetDensity
from .update_rules import (
    Discriminator,
    UpdateRuleConfig,
    adversarial_js_losses,
    energy_matching_loss,
    inclusive_kl_loss,
    target_log_density_node,
)

# Stream ids for per-iteration SeedSequence spawning.
_S_SAMPLE, _S_CHAIN, _S_GEN, _S_EVAL, _S_INIT, _S_VI, _S_DATA = range(7)

BASELINES = ("none", "vi_meanfield", "mcmc_only")


def derived_rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration, stream))
    )


def derived_seed(seed: int, iteration: int, stream: int) -> int:
    return int(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration, stream)).generate_state(1)[0]
    )


@dataclass
class TrainConfig:
    iterations: int = 1000
    K: int = 10
    kernel: KernelConfig = field(default_factory=KernelConfig)
    rule: UpdateRuleConfig = field(default_factory=UpdateRuleConfig)
    lr_phi: float = 1e-3
    lr_psi: float = 1e-3
    lr_theta: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 512
    baseline: str = "none"
    persistent: bool = False
    minibatch: int | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.lr_phi, self.lr_psi, self.lr_theta) <= 0:
            raise ValueError("learning rates must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch must be >= 1 when set")


@dataclass
class LedgerRecord:
    iteration: int
    rule_loss: float
    disc_loss: float = float("nan")
    ksd: float = float("nan")
    acceptance_rate: float = float("nan")
    eta: float = float("nan")
    wall_ms: float = 0.0
    theta_objective: float = float("nan")


class RunLedger:
    """Append-only per-iteration records.

    Wall-clock lives in a separate timings file so the main CSV is
    byte-identical across reruns of the same seed.
    """

    COLUMNS = ["iteration", "rule_loss", "disc_loss", "ksd", "acceptance_rate", "eta"]

    def __init__(self):
        self.records: list[LedgerRecord] = []

    def append(self, record: LedgerRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def final_ksd(self) -> float:
        for record in reversed(self.records):
            if np.isfinite(record.ksd):
                return record.ksd
        return float("nan")

    def write_csv(self, path: str, include_theta: bool = False):
        header = list(self.COLUMNS)
        if include_theta:
            header.append("theta_objective")
        rows = []
        for r in self.records:
            row = [r.iteration, r.rule_loss, r.disc_loss, r.ksd, r.acceptance_rate, r.eta]
            if include_theta:
                row.append(r.theta_objective)
            rows.append(row)
        write_float_csv(path, header, rows)

    def write_timings_csv(self, path: str):
        write_float_csv(
            path,
            ["iteration", "wall_ms"],
            [[r.iteration, r.wall_ms] for r in self.records],
        )


@dataclass
class FitResult:
    ledger: RunLedger
    spec: SamplerFamily | None = None
    disc: Discriminator | None = None
    kernel: KernelConfig | None = None
    persistent_state: np.ndarray | None = None
    model: "GenerativeModel | None" = None
    encoder: "GaussianEncoder | None" = None


class _AmcState:
    """Optimiser and (persistent-mode only) chain state across iterations."""

    def __init__(self, kernel: KernelConfig):
        self.phi = ad.AdamState()
        self.psi = ad.AdamState()
        self.kernel = kernel
        self.persistent_particles: np.ndarray | None = None


def amc_step(
    spec: SamplerFamily,
    target: TargetDensity,
    config: TrainConfig,
    disc: Discriminator | None,
    state: _AmcState,
    iteration: int,
) -> LedgerRecord:
    """One projected fixed-point update: sample, evolve, feed back, step.

    Mutates spec/disc parameters and the optimiser state in place and
    returns the iteration's ledger record.
    """
    t0 = time.perf_counter()
    rule = config.rule.rule
    if rule == "inclusive_kl" and not spec.density_tractable:
        raise UnsupportedDensity(
            f"inclusive KL cannot train the {spec.family} family"
        )
    if config.minibatch is not None and hasattr(target, "with_minibatch"):
        n_rows = target.X.shape[0]
        idx = derived_rng(config.seed, iteration, _S_DATA).choice(
            n_rows, size=min(config.minibatch, n_rows), replace=False
        )
        target = target.with_minibatch(idx)

    z0 = spec.sample(config.K, derived_rng(config.seed, iteration, _S_SAMPLE))
    chain_seed = derived_seed(config.seed, iteration, _S_CHAIN)
    if config.persistent and state.persistent_particles is not None:
        chain_in = SampleBatch(
            state.persistent_particles, provenance="teacher_evolved", seed=chain_seed
        )
        zT, stats = run_chain(
            chain_in, state.kernel, target, seed=chain_seed,
            persistent=True, return_stats=True,
        )
    else:
        zT, stats = run_chain(
            z0, state.kernel, target, seed=chain_seed, return_stats=True
        )
    if config.persistent:
        state.persistent_particles = zT.particles.copy()
    if state.kernel.acceptance_target is not None:
        state.kernel = replace(state.kernel, step_size=stats.final_step_size)

    disc_loss_value = float("nan")
    if rule == "inclusive_kl":
        loss = inclusive_kl_loss(zT, spec)
        grads = ad.grad(loss, spec.params)
        spec.params, state.phi = ad.adam_step(spec.params, grads, state.phi, config.lr_phi)
        rule_loss_value = float(loss.data)
    elif rule == "energy_matching":
        loss = energy_matching_loss(z0, zT, target, config.rule.beta)
        grads = ad.grad(loss, spec.params)
        spec.params, state.phi = ad.adam_step(spec.params, grads, state.phi, config.lr_phi)
        rule_loss_value = float(loss.data)
    else:
        if disc is None:
            raise ValueError("adversarial rule needs a discriminator")
        for _ in range(config.rule.disc_steps):
            disc_loss, _ = adversarial_js_losses(
                z0, zT, disc, config.rule.generator_loss_variant
            )
            disc_grads = ad.grad(disc_loss, disc.params)
            disc.params, state.psi = ad.adam_step(
                disc.params, disc_grads, state.psi, config.lr_psi
            )
        disc_loss_value = float(disc_loss.data)
        if config.rule.independent_z0:
            z_gen = spec.sample(config.K, derived_rng(config.seed, iteration, _S_GEN))
        else:
            z_gen = z0
        _, gen_loss = adversarial_js_losses(
            z_gen, zT, disc, config.rule.generator_loss_variant
        )
        if iteration >= config.rule.disc_warmup:
            gen_grads = ad.grad(gen_loss, spec.params)
            spec.params, state.phi = ad.adam_step(
                spec.params, gen_grads, state.phi, config.lr_phi
            )
        rule_loss_value = float(gen_loss.data)

    return LedgerRecord(
        iteration=iteration,
        rule_loss=rule_loss_value,
        disc_loss=disc_loss_value,
        acceptance_rate=stats.acceptance_rate,
        eta=state.kernel.step_size,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def fit(
    config: TrainConfig,
    target_or_model,
    spec: SamplerFamily | None = None,
    data: np.ndarray | None = None,
    disc: Discriminator | None = None,
) -> FitResult:
    """Run the configured number of iterations against a fixed target, or
    jointly learn a GenerativeModel's decoder when one is supplied."""
    if isinstance(target_or_model, GenerativeModel):
        if data is None:
            raise ValueError("generative-model fitting needs the observation matrix")
        return _fit_generative(config, target_or_model, data)
    return _fit_posterior(config, target_or_model, spec, disc)


def _fit_posterior(config, target, spec, disc=None) -> FitResult:
    if spec is None:
        raise ValueError("posterior fitting needs a sampler spec")
    if config.rule.rule == "adversarial_js" and disc is None:
        disc = Discriminator(
            spec.output_dim,
            hidden=config.rule.disc_hidden,
            rng=derived_rng(config.seed, 0, _S_INIT),
        )
    state = _AmcState(config.kernel)
    ledger = RunLedger()
    for i in range(config.iterations):
        record = amc_step(spec, target, config, disc, state, i)
        if config.eval_every > 0 and (
            (i + 1) % config.eval_every == 0 or i + 1 == config.iterations
        ):
            eval_batch = spec.sample(
                config.eval_samples, derived_rng(config.seed, i, _S_EVAL)
            )
            record.ksd = ksd(eval_batch.particles, target, KsdConfig())
        ledger.append(record)
    return FitResult(
        ledger=ledger,
        spec=spec,
        disc=disc,
        kernel=state.kernel,
        persistent_state=state.persistent_particles,
    )


@dataclass
class VIResult:
    spec: MeanFieldGaussian
    elbo_trace: np.ndarray


def vi_baseline_fit(
    spec: MeanFieldGaussian,
    target: TargetDensity,
    config: TrainConfig,
    n_samples: int = 10,
) -> VIResult:
    """Reparameterised-ELBO ascent with a small Monte Carlo batch."""
    if not spec.density_tractable:
        raise UnsupportedDensity("the VI baseline needs a tractable family")
    state = ad.AdamState()
    trace = np.zeros(config.iterations)
    for i in range(config.iterations):
        rng = derived_rng(config.seed, i, _S_VI)
        z = spec._sample_node(n_samples, rng)
        energy = ad.tmean(target_log_density_node(z, target))
        log_q = spec.log_density_node(z)
        elbo = ad.sub(energy, ad.tmean(log_q))
        loss = ad.neg(elbo)
        grads = ad.grad(loss, spec.params)
        spec.params, state = ad.adam_step(spec.params, grads, state, config.lr_phi)
        trace[i] = float(elbo.data)
    return VIResult(spec=spec, elbo_trace=trace)


class GenerativeModel:
    """Decoder p(x|z, theta) with N(0, I) prior on z and Gaussian
    observation noise of fixed scale."""

    def __init__(
        self,
        latent_dim: int,
        observed_dim: int,
        decoder: str = "linear",
        hidden: int = 16,
        obs_noise_std: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        if decoder not in ("linear", "mlp"):
            raise ValueError(f"unknown decoder {decoder!r}")
        self.latent_dim = latent_dim
        self.observed_dim = observed_dim
        self.decoder = decoder
        self.obs_noise_std = float(obs_noise_std)
        self.layer_sizes = (
            [latent_dim, observed_dim]
            if decoder == "linear"
            else [latent_dim, hidden, observed_dim]
        )
        rng = rng or np.random.default_rng(0)
        self.params = ad.init_mlp_params(self.layer_sizes, rng)

    def decode_node(self, Z) -> ad.Tensor:
        z = Z if isinstance(Z, ad.Tensor) else ad.constant(np.atleast_2d(Z))
        activation = "linear" if self.decoder == "linear" else "relu"
        return ad.forward_mlp(self.params, self.layer_sizes, activation, z)

    def log_lik_node(self, X: np.ndarray, Z) -> ad.Tensor:
        """(N,) per-row log p(x_n | z_n, theta)."""
        X = np.atleast_2d(X)
        pred = self.decode_node(Z)
        resid = ad.sub(ad.constant(X), pred)
        var = self.obs_noise_std**2
        quad = ad.mul(ad.constant(-0.5 / var), ad.tsum(ad.mul(resid, resid), axis=1))
        const = -0.5 * self.observed_dim * np.log(2 * np.pi * var)
        return ad.add(ad.constant(const), quad)

    def weight_matrix(self) -> np.ndarray:
        """(observed, latent) first-layer weights; the comparison subject
        for linear decoders."""
        return self.params.value("w0").T.copy()


class PosteriorTarget:
    """Row-wise posterior log p(z_n | x_n, theta) for a matched (Z, X) pair.

    Quacks like TargetDensity for the kernel: each particle row carries its
    own conditioning observation.
    """

    def __init__(self, model: GenerativeModel, X: np.ndarray):
        self.model = model
        self.X = np.atleast_2d(X)
        self.dim = model.latent_dim

    def _joint_node(self, z: ad.Tensor) -> ad.Tensor:
        ll = self.model.log_lik_node(self.X, z)
        prior = ad.add(
            ad.constant(-0.5 * self.dim * np.log(2 * np.pi)),
            ad.mul(ad.constant(-0.5), ad.tsum(ad.mul(z, z), axis=1)),
        )
        return ad.add(prior, ll)

    def value_and_grad_batch(self, Z):
        z = ad.constant(np.atleast_2d(Z))
        if z.shape[0] != self.X.shape[0]:
            raise ValueError("particle rows must match observation rows")
        vals_node = self._joint_node(z)
        total = ad.tsum(vals_node)
        ad.backward(total)
        return vals_node.data.copy(), z.grad

    def log_density_batch(self, Z):
        return self.value_and_grad_batch(Z)[0]

    def grad_log_density_batch(self, Z):
        return self.value_and_grad_batch(Z)[1]


class GaussianEncoder:
    """Amortised q(z|x): an MLP emitting per-row mean and log-std."""

    def __init__(
        self,
        observed_dim: int,
        latent_dim: int,
        hidden: int = 16,
        rng: np.random.Generator | None = None,
    ):
        self.observed_dim = observed_dim
        self.latent_dim = latent_dim
        self.layer_sizes = [observed_dim, hidden, 2 * latent_dim]
        rng = rng or np.random.default_rng(0)
        self.params = ad.init_mlp_params(self.layer_sizes, rng)
        L = latent_dim
        eye = np.eye(2 * L)
        self._select_mu = eye[:, :L]
        self._select_log_std = eye[:, L:]

    def _heads(self, X: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        h = ad.forward_mlp(self.params, self.layer_sizes, "relu", ad.constant(np.atleast_2d(X)))
        mu = ad.matmul(h, ad.constant(self._select_mu))
        log_std = ad.matmul(h, ad.constant(self._select_log_std))
        return mu, log_std

    def sample_node(self, X: np.ndarray, rng: np.random.Generator) -> ad.Tensor:
        mu, log_std = self._heads(X)
        eps = ad.constant(rng.standard_normal((np.atleast_2d(X).shape[0], self.latent_dim)))
        return ad.add(mu, ad.mul(ad.exp(log_std), eps))

    def log_density_node(self, X: np.ndarray, Z: np.ndarray) -> ad.Tensor:
        """(N,) log q(z_n | x_n) with Z as constants."""
        mu, log_std = self._heads(X)
        diff = ad.sub(ad.constant(np.atleast_2d(Z)), mu)
        inv_var = ad.exp(ad.mul(ad.constant(-2.0), log_std))
        quad = ad.tsum(ad.mul(ad.mul(diff, diff), inv_var), axis=1)
        return ad.add(
            ad.constant(-0.5 * self.latent_dim * np.log(2 * np.pi)),
            ad.sub(ad.mul(ad.constant(-0.5), quad), ad.tsum(log_std, axis=1)),
        )


def theta_step(
    model: GenerativeModel,
    zT: SampleBatch,
    X: np.ndarray,
    lr: float,
    state: ad.AdamState | None = None,
) -> tuple[ad.AdamState, float, float]:
    """Ascend mean_n log p(x_n | z_T^n, theta); lr = 0 is an explicit no-op.

    Returns (optimizer state, objective value, gradient norm).
    """
    state = state or ad.AdamState()
    objective = ad.tmean(model.log_lik_node(X, zT.particles))
    grads = ad.grad(ad.neg(objective), model.params)
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if lr > 0:
        model.params, state = ad.adam_step(model.params, grads, state, lr)
    return state, float(objective.data), norm


def _fit_generative(config: TrainConfig, model: GenerativeModel, X: np.ndarray) -> FitResult:
    X = np.atleast_2d(X)
    encoder = GaussianEncoder(
        model.observed_dim, model.latent_dim, rng=derived_rng(config.seed, 0, _S_INIT)
    )
    phi_state, theta_state = ad.AdamState(), ad.AdamState()
    kernel = config.kernel
    ledger = RunLedger()
    for i in range(config.iterations):
        t0 = time.perf_counter()
        z0_node = encoder.sample_node(X, derived_rng(config.seed, i, _S_SAMPLE))
        z0 = SampleBatch(np.array(z0_node.data), provenance=STUDENT_INITIAL, node=z0_node)
        target = PosteriorTarget(model, X)
        chain_seed = derived_seed(config.seed, i, _S_CHAIN)
        zT, stats = run_chain(z0, kernel, target, seed=chain_seed, return_stats=True)
        if kernel.acceptance_target is not None:
            kernel = replace(kernel, step_size=stats.final_step_size)

        # encoder: inclusive KL projection onto the evolved batch
        enc_loss = ad.neg(ad.tmean(encoder.log_density_node(X, zT.particles)))
        enc_grads = ad.grad(enc_loss, encoder.params)
        encoder.params, phi_state = ad.adam_step(
            encoder.params, enc_grads, phi_state, config.lr_phi
        )

        theta_state, theta_obj, _ = theta_step(
            model, zT, X, config.lr_theta, theta_state
        )
        ledger.append(
            LedgerRecord(
                iteration=i,
                rule_loss=float(enc_loss.data),
                acceptance_rate=stats.acceptance_rate,
                eta=kernel.step_size,
                wall_ms=(time.perf_counter() - t0) * 1e3,
                theta_objective=theta_obj,
            )
        )
    return FitResult(ledger=ledger, model=model, encoder=encoder)


def aligned_relative_error(W_est: np.ndarray, W_true: np.ndarray) -> float:
    """Relative Frobenius error after orthogonal alignment.

    A Gaussian-latent linear decoder is identified only up to a rotation of
    the latent space, so the raw comparison is gauge-fixed by Procrustes.
    """
    U, _, Vt = np.linalg.svd(W_est.T @ W_true)
    R = U @ Vt
    return float(np.linalg.norm(W_est @ R - W_true) / np.linalg.norm(W_true))

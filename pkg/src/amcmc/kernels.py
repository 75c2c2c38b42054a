"""Langevin transition kernels: the teacher side of the training loop.

Unadjusted Langevin (ULA) and Metropolis-adjusted Langevin (MALA) steps,
T-step batch evolution with per-particle RNG streams, and acceptance-rate
step-size adaptation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace, field

import numpy as np

from .targets import TargetDensity

STUDENT_INITIAL = "student_initial"
TEACHER_EVOLVED = "teacher_evolved"

ETA_MIN = 1e-8
ETA_MAX = 1e2


class KernelError(RuntimeError):
    """Numerical failure inside a transition, with offending state attached."""

    def __init__(self, message, z=None, particle=None):
        super().__init__(message)
        self.z = z
        self.particle = particle


@dataclass(frozen=True)
class KernelConfig:
    """Teacher settings: chain length, step size, MH toggle, adaptation."""

    steps: int = 1
    step_size: float = 0.1
    metropolis_adjust: bool = True
    acceptance_target: float | None = None
    adapt_rate: float = 0.01
    adapt_window: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.acceptance_target is not None and not (
            0 < self.acceptance_target <= 1
        ):
            raise ValueError("acceptance_target must lie in (0, 1]")


@dataclass
class SampleBatch:
    """K particles in R^d plus provenance.

    Student-initial batches may carry the live autodiff node that produced
    them; teacher-evolved batches never do (the chain is not differentiated
    through).
    """

    particles: np.ndarray
    provenance: str = STUDENT_INITIAL
    seed: int | None = None
    node: object = None  # autodiff.Tensor for student-initial batches

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[0] < 1:
            raise ValueError("a batch needs at least one particle")
        if not np.all(np.isfinite(self.particles)):
            raise ValueError("batch contains non-finite particles")

    @property
    def K(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


@dataclass
class ChainStats:
    """Per-run diagnostics from run_chain."""

    acceptance_rate: float
    final_step_size: float
    accept_history: list = field(default_factory=list)


def langevin_proposal(
    z: np.ndarray, target: TargetDensity, eta: float, noise: np.ndarray
) -> np.ndarray:
    """z + (eta/2) grad log p(z) + sqrt(eta) * noise, noise supplied by the
    caller so tests stay deterministic."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    g = target.grad_log_density(z)
    if not np.all(np.isfinite(g)):
        raise KernelError("non-finite gradient in Langevin proposal", z=z)
    return z + 0.5 * eta * g + np.sqrt(eta) * np.asarray(noise, dtype=np.float64)


def _log_q(z_to: np.ndarray, z_from: np.ndarray, g_from: np.ndarray, eta: float):
    """Gaussian proposal log-density N(z_from + (eta/2) g_from, eta I),
    without the z-independent normaliser (it cancels in the MH ratio)."""
    mean = z_from + 0.5 * eta * g_from
    return -np.sum((z_to - mean) ** 2, axis=-1) / (2.0 * eta)


def mala_step(
    z: np.ndarray, target: TargetDensity, eta: float, rng: np.random.Generator
) -> tuple[np.ndarray, bool, float]:
    """One Metropolis-adjusted Langevin step on a single point.

    Returns (next state, accepted, log acceptance ratio).  Consumes the rng
    in the order (noise, uniform) so streams can be continued across calls.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    logp, g = target.log_density(z), target.grad_log_density(z)
    if not np.all(np.isfinite(g)) or not np.isfinite(logp):
        raise KernelError("non-finite target evaluation", z=z)
    noise = rng.standard_normal(z.size)
    z_prop = z + 0.5 * eta * g + np.sqrt(eta) * noise
    logp_prop, g_prop = target.log_density(z_prop), target.grad_log_density(z_prop)
    if not np.all(np.isfinite(g_prop)) or not np.isfinite(logp_prop):
        raise KernelError("non-finite target evaluation at proposal", z=z_prop)
    log_alpha = (
        logp_prop
        - logp
        + _log_q(z, z_prop, g_prop, eta)
        - _log_q(z_prop, z, g, eta)
    )
    accepted = np.log(rng.uniform()) < log_alpha
    return (z_prop if accepted else z), bool(accepted), float(log_alpha)


def adapt_step_size(config: KernelConfig, recent_acceptance: float) -> KernelConfig:
    """Robbins-Monro log-space update toward the acceptance target, clamped
    to [1e-8, 1e2]."""
    if config.acceptance_target is None:
        raise ValueError("adapt_step_size needs an acceptance_target")
    if not (0.0 <= recent_acceptance <= 1.0):
        raise ValueError("recent_acceptance must lie in [0, 1]")
    eta = config.step_size * np.exp(
        config.adapt_rate * (recent_acceptance - config.acceptance_target)
    )
    return replace(config, step_size=float(np.clip(eta, ETA_MIN, ETA_MAX)))


def particle_rngs(seed: int, K: int) -> list[np.random.Generator]:
    """Independent per-particle streams, reproducible from (seed, K)."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(K)]


def run_chain(
    batch: SampleBatch,
    config: KernelConfig,
    target: TargetDensity,
    seed: int = 0,
    rngs: list[np.random.Generator] | None = None,
    persistent: bool = False,
    return_stats: bool = False,
    trace_path: str | None = None,
):
    """Evolve every particle independently for config.steps transitions.

    Per-particle RNG streams are derived from (seed, particle index) unless
    explicit generators are handed in, which lets callers continue streams
    across chained runs.  When config.acceptance_target is set the step
    size adapts in-run from the windowed running acceptance.
    """
    if batch.provenance != STUDENT_INITIAL and not persistent:
        raise ValueError(
            "run_chain expects a student-initial batch; pass persistent=True "
            "to re-evolve teacher output"
        )
    if rngs is None:
        rngs = particle_rngs(seed, batch.K)
    if len(rngs) != batch.K:
        raise ValueError("need one rng stream per particle")

    Z = batch.particles.copy()
    K, d = Z.shape
    eta = config.step_size
    accept_history: list[float] = []
    trace_rows = []

    vals, grads = target.value_and_grad_batch(Z)
    _require_finite(vals, grads, Z)

    for step in range(config.steps):
        noise = np.stack([rng.standard_normal(d) for rng in rngs])
        Z_prop = Z + 0.5 * eta * grads + np.sqrt(eta) * noise
        vals_prop, grads_prop = target.value_and_grad_batch(Z_prop)
        _require_finite(vals_prop, grads_prop, Z_prop)

        if config.metropolis_adjust:
            log_alpha = (
                vals_prop
                - vals
                + _log_q(Z, Z_prop, grads_prop, eta)
                - _log_q(Z_prop, Z, grads, eta)
            )
            log_u = np.log(np.array([rng.uniform() for rng in rngs]))
            accepted = log_u < log_alpha
        else:
            accepted = np.ones(K, dtype=bool)

        Z = np.where(accepted[:, None], Z_prop, Z)
        vals = np.where(accepted, vals_prop, vals)
        grads = np.where(accepted[:, None], grads_prop, grads)
        accept_history.append(float(accepted.mean()))

        if trace_path is not None:
            for k in range(K):
                trace_rows.append(
                    [step, k] + [f"{c:.17g}" for c in Z[k]] + [int(accepted[k])]
                )

        if config.acceptance_target is not None:
            window = accept_history[-config.adapt_window :]
            eta = float(
                np.clip(
                    eta
                    * np.exp(
                        config.adapt_rate
                        * (np.mean(window) - config.acceptance_target)
                    ),
                    ETA_MIN,
                    ETA_MAX,
                )
            )

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "particle"] + [f"z{i}" for i in range(d)] + ["accepted"])
            writer.writerows(trace_rows)

    out = SampleBatch(Z, provenance=TEACHER_EVOLVED, seed=seed)
    if return_stats:
        stats = ChainStats(
            acceptance_rate=float(np.mean(accept_history)),
            final_step_size=eta,
            accept_history=accept_history,
        )
        return out, stats
    return out


def _require_finite(vals, grads, Z):
    bad = ~(np.isfinite(vals) & np.all(np.isfinite(grads), axis=1))
    if np.any(bad):
        k = int(np.argmax(bad))
        raise KernelError(
            f"non-finite target evaluation for particle {k}", z=Z[k], particle=k
        )

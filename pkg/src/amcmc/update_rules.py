"""Divergence estimates between the student and its teacher-evolved batch.

Three feedback signals, all scalar tape nodes:

* inclusive KL: cross-entropy of the evolved batch under a tractable
  student density;
* adversarial JS: a discriminator's binary-classification bound, with
  saturating and nonsaturating generator variants;
* energy matching: |gap between batch-mean log joints|^beta, gradient
  through the student batch only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import STUDENT_INITIAL, TEACHER_EVOLVED, SampleBatch
from .samplers import SamplerFamily, UnsupportedDensity
from .targets import TargetDensity

RULES = ("inclusive_kl", "adversarial_js", "energy_matching")
GENERATOR_VARIANTS = ("nonsaturating", "saturating")


@dataclass
class UpdateRuleConfig:
    rule: str = "adversarial_js"
    beta: float = 2.0
    generator_loss_variant: str = "nonsaturating"
    independent_z0: bool = False
    disc_hidden: tuple = (20, 20)
    disc_steps: int = 1
    # iterations of critic-only updates before the student starts moving;
    # an untrained critic's gradients can collapse a fresh student
    disc_warmup: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; pick one of {RULES}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.generator_loss_variant not in GENERATOR_VARIANTS:
            raise ValueError(
                f"unknown generator variant {self.generator_loss_variant!r}"
            )
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be >= 1")
        if self.disc_warmup < 0:
            raise ValueError("disc_warmup must be >= 0")


class Discriminator:
    """MLP logit d(z), leaky-ReLU hidden layers.

    A conditioning-features slot exists for conditional problems but stays
    unused for the fixed-posterior tasks here.
    """

    def __init__(self, input_dim: int, hidden=(20, 20), rng: np.random.Generator | None = None,
                 conditioning_dim: int = 0):
        self.layer_sizes = [input_dim + conditioning_dim, *hidden, 1]
        self.conditioning_dim = conditioning_dim
        rng = rng or np.random.default_rng(0)
        self.params = ad.init_mlp_params(self.layer_sizes, rng)

    def logits(self, Z, conditioning: np.ndarray | None = None) -> ad.Tensor:
        """(K, 1) raw logits; Z may be a live node or plain values."""
        z = Z if isinstance(Z, ad.Tensor) else ad.constant(np.atleast_2d(Z))
        if self.conditioning_dim:
            if conditioning is None:
                raise ValueError("discriminator built with conditioning needs features")
            z = _concat_features(z, np.atleast_2d(conditioning))
        h = z
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
            if i < n_layers - 1:
                h = ad.leaky_relu(h)
        return h


def _concat_features(z: ad.Tensor, x: np.ndarray) -> ad.Tensor:
    pad_left = ad.matmul(z, ad.constant(np.eye(z.shape[1], z.shape[1] + x.shape[1])))
    shifted = np.zeros((z.shape[0], z.shape[1] + x.shape[1]))
    shifted[:, z.shape[1]:] = x
    return ad.add(pad_left, ad.constant(shifted))


def target_log_density_node(z: ad.Tensor, target: TargetDensity) -> ad.Tensor:
    """(K,) log p(z_k) as a tape node; backward uses the target's own
    gradient, so anything downstream of z gets exact pathwise signal."""
    Z = np.atleast_2d(z.data)
    vals, grads = target.value_and_grad_batch(Z)
    out = ad.Tensor(vals, parents=(z,))
    out._backward = lambda g: (g[:, None] * grads,)
    return out


def _require(batch: SampleBatch, provenance: str, what: str):
    if batch.provenance != provenance:
        raise ValueError(f"{what} must have provenance {provenance!r}, "
                         f"got {batch.provenance!r}")


def inclusive_kl_loss(zT: SampleBatch, spec: SamplerFamily) -> ad.Tensor:
    """-(1/K) sum_k log q(z_T^k): the cross-entropy part of KL[q_T || q],
    the only part that depends on the student parameters."""
    _require(zT, TEACHER_EVOLVED, "zT")
    if not spec.density_tractable:
        raise UnsupportedDensity(
            f"inclusive KL needs a tractable density; {spec.family} has none"
        )
    return ad.neg(ad.tmean(spec.log_density_node(zT.particles)))


def adversarial_js_losses(
    z0: SampleBatch,
    zT: SampleBatch,
    disc: Discriminator,
    generator_loss_variant: str = "nonsaturating",
) -> tuple[ad.Tensor, ad.Tensor]:
    """(disc_loss, gen_loss) for one adversarial round.

    The bound being ascended is
        D_adv = mean log sigmoid(d(zT)) + mean log(1 - sigmoid(d(z0)))
    so disc_loss = -D_adv with both batches as constants, while gen_loss
    sees z0 through its live node.  log sigmoid goes through softplus to
    keep saturated logits finite.
    """
    if z0.K != zT.K:
        raise ValueError(f"batch sizes differ: z0 has {z0.K}, zT has {zT.K}")
    _require(z0, STUDENT_INITIAL, "z0")
    _require(zT, TEACHER_EVOLVED, "zT")
    if generator_loss_variant not in GENERATOR_VARIANTS:
        raise ValueError(f"unknown generator variant {generator_loss_variant!r}")

    d_teacher = disc.logits(zT.particles)
    log_sig_teacher = ad.neg(ad.softplus(ad.neg(d_teacher)))

    d_student_const = disc.logits(z0.particles)
    log_one_minus_const = ad.neg(ad.softplus(d_student_const))
    d_adv = ad.add(ad.tmean(log_sig_teacher), ad.tmean(log_one_minus_const))
    disc_loss = ad.neg(d_adv)

    z0_node = z0.node if z0.node is not None else ad.constant(z0.particles)
    d_student_live = disc.logits(z0_node)
    if generator_loss_variant == "saturating":
        gen_loss = ad.neg(ad.tmean(ad.softplus(d_student_live)))
    else:
        gen_loss = ad.tmean(ad.softplus(ad.neg(d_student_live)))
    return disc_loss, gen_loss


def d_adv_value(z0: np.ndarray, zT: np.ndarray, disc: Discriminator) -> float:
    """Plain evaluation of the adversarial bound on two sample matrices."""
    d_t = disc.logits(np.atleast_2d(zT)).data
    d_s = disc.logits(np.atleast_2d(z0)).data
    return float(
        np.mean(-np.logaddexp(0.0, -d_t)) + np.mean(-np.logaddexp(0.0, d_s))
    )


def energy_matching_loss(
    z0: SampleBatch, zT: SampleBatch, target: TargetDensity, beta: float
) -> ad.Tensor:
    """|mean log p(zT) - mean log p(z0)|^beta, teacher side constant."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    _require(z0, STUDENT_INITIAL, "z0")
    _require(zT, TEACHER_EVOLVED, "zT")
    teacher_energy = float(np.mean(target.log_density_batch(zT.particles)))
    z0_node = z0.node if z0.node is not None else ad.constant(z0.particles)
    student_energy = ad.tmean(target_log_density_node(z0_node, target))
    gap = ad.sub(ad.constant(teacher_energy), student_energy)
    return ad.abs_power(gap, beta)

"""Objective terms for semi-supervised disentanglement training.

Composition: total = unsup_nll + unsup_kl + gamma_tc * R_u
                     + alpha * label_recon + tau * label_replacement
with (alpha, tau) either given directly or derived from (gamma, lambda) via
alpha = lambda*gamma / (1 + lambda*gamma), tau = (1-lambda)*gamma / (1 + lambda*gamma).
tau = 0 recovers the plain label-loss baseline; alpha = tau = 0 the
unsupervised objective.

Gaussian log-density constants that do not depend on model parameters are
dropped throughout, except in gaussian_kl which is the exact closed form.

The label-replacement term decodes from the ground-truth label with a sampled
nuisance and adds +KL(q(z|x) || p(z)): that sign makes the term a Jensen upper
bound on -log p(x|y), which the enumeration tests verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .models import reparameterize


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term, value):
        self.term = term
        super().__init__(f"non-finite loss term {term !r}: {value}")


@dataclass
class SemiLossConfig:
    """All objective hyperparameters.

    coef_mode "direct-alpha-tau" uses alpha/tau as given;
    "from-gamma-lambda" overwrites them from (gamma, lam).
    """

    ru_kind: str = "beta-tcvae"  # beta-vae | beta-tcvae | factorvae
    gamma_tc: float = 4.0
    coef_mode: str = "direct-alpha-tau"
    gamma: float = 0.0
    lam: float = 0.5
    alpha: float = 5.0
    tau: float = 1.0
    sigma2: float = 0.1

    def __post_init__(self):
        if self.ru_kind not in ("beta-vae", "beta-tcvae", "factorvae"):
            raise ValueError(f"unknown ru_kind {self.ru_kind!r}")
        if self.coef_mode not in ("direct-alpha-tau", "from-gamma-lambda"):
            raise ValueError(f"unknown coef_mode {self.coef_mode!r}")
        if self.gamma_tc < 0 or self.sigma2 <= 0:
            raise ValueError("gamma_tc must be >= 0 and sigma2 > 0")
        if self.coef_mode == "from-gamma-lambda":
            self.alpha, self.tau = coefficients_from(self.gamma, self.lam)
        if self.alpha < 0 or self.tau < 0:
            raise ValueError("alpha and tau must be >= 0")


def coefficients_from(gamma, lam):
    """(gamma, lambda) -> (alpha, tau) weights of the two supervised terms."""
    if gamma < 0:
        raise ad.DomainError("coefficients_from", f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise ad.DomainError("coefficients_from", f"lambda must be in [0,1], got {lam}")
    denom = 1.0 + lam * gamma
    return lam * gamma / denom, (1.0 - lam) * gamma / denom


def gaussian_kl(mean, sigma2):
    """KL(N(mean, sigma2*I) || N(0, I)), exact closed form.

    mean (D,) gives the plain sum over dimensions; mean (B, D) averages the
    per-row KL over the batch. Zero-width means give exactly 0.
    """
    if sigma2 <= 0:
        raise ad.DomainError("gaussian_kl", f"sigma2 must be > 0, got {sigma2}")
    mean = ad._as_tensor(mean)
    d = mean.shape[-1] if mean.ndim else 1
    s = ad.tensor_sum(ad.square(mean), axis=-1)
    if s.ndim:
        s = ad.tensor_mean(s)
    const = 0.5 * d * (sigma2 - 1.0 - math.log(sigma2)) if d else 0.0
    return ad.add(ad.scalar_mul(s, 0.5), ad.constant(const))


def gaussian_nll(x, mean, sigma2):
    """||x - mean||^2 / (2 sigma2), parameter-free constants dropped.

    1-D inputs sum over all entries; batched inputs (leading axis = batch)
    sum per item and average over the batch.
    """
    if sigma2 <= 0:
        raise ad.DomainError("gaussian_nll", f"sigma2 must be > 0, got {sigma2}")
    x, mean = ad._as_tensor(x), ad._as_tensor(mean)
    if x.shape != mean.shape:
        raise ad.ShapeError("gaussian_nll", x.shape, mean.shape)
    sq = ad.square(ad.sub(x, mean))
    if sq.ndim <= 1:
        s = ad.tensor_sum(sq)
    else:
        s = ad.tensor_mean(ad.tensor_sum(ad.reshape(sq, (sq.shape[0], -1)), axis=1))
    return ad.scalar_mul(s, 1.0 / (2.0 * sigma2))


@dataclass
class LatentSample:
    """One reparameterized draw of the full latent and the posterior means."""

    y: ad.Tensor
    z: ad.Tensor
    xi: ad.Tensor
    mu_xi: ad.Tensor


def elbo_loss(model, x, eps):
    """Negative-ELBO pieces from one reparameterized sample of xi = (y, z).

    Returns (nll, kl, sample); kl is the analytic KL of the factorized
    posterior, i.e. the y-part plus the z-part.
    """
    x = ad._as_tensor(x)
    y, z, gy, gz = model.sample_latent(x, eps)
    recon = model.decode(y, z)
    nll = gaussian_nll(x, recon.mean, model.sigma2)
    kl = ad.add(gaussian_kl(gy.mean, gy.sigma2), gaussian_kl(gz.mean, gz.sigma2))
    sample = LatentSample(y=y, z=z, xi=ad.concat_last(y, z),
                          mu_xi=ad.concat_last(gy.mean, gz.mean))
    return nll, kl, sample


def ru_beta(kl, gamma_tc):
    """beta-VAE regularizer: R_u is the KL itself (effective beta = 1 + gamma_tc)."""
    if gamma_tc < 0:
        raise ad.DomainError("ru_beta", f"gamma_tc must be >= 0, got {gamma_tc}")
    return kl


def tc_estimate_mws(latents, means, sigma2, dataset_size):
    """Minibatch-weighted estimate of the total correlation of the aggregate
    posterior.

    The aggregate density at z_i ~ q(z|x_i) is estimated from the batch with
    the sample that produced z_i weighted by its true mixture weight 1/N and
    the remaining batch entries standing in for the other N-1 components:

        q(z_i) ~= q(z_i|x_i)/N + (N-1)/(N(M-1)) * sum_{j!=i} q(z_i|x_j)

    and likewise per dimension; batch = dataset makes this the exact mixture.
    TC is the mean of log q(z_i) - sum_d log q(z_i,d). The per-dimension
    Gaussian normalization constants cancel between the joint and marginal
    terms and are omitted. Differentiable through latents and means.
    """
    latents, means = ad._as_tensor(latents), ad._as_tensor(means)
    if latents.shape != means.shape or latents.ndim != 2:
        raise ad.ShapeError("tc_estimate_mws", latents.shape, means.shape)
    b, d = latents.shape
    if b < 2:
        raise ad.DomainError("tc_estimate_mws", f"batch must be >= 2, got {b}")
    n = max(dataset_size, b)
    log_w = np.full((b, b), math.log((n - 1.0) / (n * (b - 1.0))))
    np.fill_diagonal(log_w, -math.log(n))
    z_i = ad.broadcast(ad.reshape(latents, (b, 1, d)), (b, b, d))
    mu_k = ad.broadcast(ad.reshape(means, (1, b, d)), (b, b, d))
    logp = ad.scalar_mul(ad.square(ad.sub(z_i, mu_k)), -1.0 / (2.0 * sigma2))
    joint_arg = ad.add(ad.tensor_sum(logp, axis=2), ad.constant(log_w))     # (B,B)
    log_joint = ad.logsumexp(joint_arg, axis=1)                             # (B,)
    marg_arg = ad.add(logp, ad.broadcast(ad.constant(log_w[:, :, None]), (b, b, d)))
    log_marg = ad.tensor_sum(ad.logsumexp(marg_arg, axis=1), axis=1)        # (B,)
    return ad.tensor_mean(ad.sub(log_joint, log_marg))


def permute_dims(latents, rng):
    """Shuffle each latent dimension independently across the batch."""
    latents = np.asarray(latents)
    out = np.empty_like(latents)
    b = latents.shape[0]
    for j in range(latents.shape[1]):
        out[:, j] = latents[rng.permutation(b), j]
    return out


def tc_estimate_adversarial(latents, disc_spec, disc_params):
    """Density-ratio TC estimate: mean(logit_joint - logit_marginal).

    The discriminator emits two logits (class 0 = joint batch, class 1 =
    dimension-permuted batch); evaluated on the non-permuted latents.
    """
    latents = ad._as_tensor(latents)
    if latents.shape[0] < 2:
        raise ad.DomainError("tc_estimate_adversarial", "batch must be >= 2")
    logits = nn.forward_stack(disc_spec, disc_params, latents)
    diff = ad.sub(ad.slice_last(logits, 0, 1), ad.slice_last(logits, 1, 2))
    return ad.tensor_mean(diff)


def discriminator_loss(disc_spec, disc_params, latents, permuted):
    """Two-class cross-entropy: joint batch -> class 0, permuted -> class 1."""
    lj = nn.forward_stack(disc_spec, disc_params, ad.constant(latents))
    lp = nn.forward_stack(disc_spec, disc_params, ad.constant(permuted))
    b = lj.shape[0]
    ce_j = ad.tensor_mean(ad.sub(ad.logsumexp(lj, axis=1),
                                 ad.reshape(ad.slice_last(lj, 0, 1), (b,))))
    ce_p = ad.tensor_mean(ad.sub(ad.logsumexp(lp, axis=1),
                                 ad.reshape(ad.slice_last(lp, 1, 2), (b,))))
    return ad.scalar_mul(ad.add(ce_j, ce_p), 0.5)


def label_recon_loss(mu_y, y):
    """Mean over the batch of the summed squared label error."""
    mu_y, y = ad._as_tensor(mu_y), ad._as_tensor(y)
    if mu_y.shape != y.shape:
        raise ad.ShapeError("label_recon_loss", mu_y.shape, y.shape)
    sq = ad.square(ad.sub(mu_y, y))
    if sq.ndim == 1:
        return ad.tensor_sum(sq)
    return ad.tensor_mean(ad.tensor_sum(sq, axis=1))


def rep_from_posterior(model, x, y_truth, gz, eps_z):
    """Label-replacement bound given an already-computed nuisance posterior."""
    z = reparameterize(gz, eps_z)
    recon = model.decode(ad.constant(y_truth), z)
    nll = gaussian_nll(x, recon.mean, model.sigma2)
    return ad.add(nll, gaussian_kl(gz.mean, gz.sigma2))


def label_replacement_loss(model, x, y_truth, eps_z):
    """-E_q(z|x)[log p(x | y_truth, z)] bound: recon NLL + KL(q(z|x) || p(z)).

    The ground-truth label bypasses the encoder entirely; only the nuisance
    posterior is read from it.
    """
    x = ad._as_tensor(x)
    _, gz = model.encode(x)
    return rep_from_posterior(model, x, y_truth, gz, eps_z)


def unsup_loss(model, x, eps, cfg, dataset_size, disc=None):
    """Unsupervised objective pieces: (nll, kl, ru_term, sample).

    ru_term is None when gamma_tc == 0 (nothing to weight). The factorvae
    variant needs `disc` = (spec, params) of the adversary.
    """
    nll, kl, sample = elbo_loss(model, x, eps)
    if cfg.gamma_tc == 0.0:
        return nll, kl, None, sample
    if cfg.ru_kind == "beta-vae":
        ru = ru_beta(kl, cfg.gamma_tc)
    elif cfg.ru_kind == "beta-tcvae":
        ru = tc_estimate_mws(sample.xi, sample.mu_xi, model.sigma2, dataset_size)
    else:
        spec, params = disc
        ru = tc_estimate_adversarial(sample.xi, spec, params)
    return nll, kl, ru, sample


@dataclass
class LossBreakdown:
    """Scalar values of every objective term plus the differentiable total."""

    total: float
    unsup_nll: float
    unsup_kl: float
    ru_term: float
    recon: float
    rep: float
    node: ad.Tensor = field(repr=False, default=None)


def compose_semi_loss(unsup_nll, unsup_kl, ru, recon, rep, cfg):
    """Weight and sum the objective terms per the config.

    ru / recon / rep may be None when their weight is zero; zero-weight terms
    never contribute even if provided. Raises NonFiniteLossError naming the
    first non-finite term.
    """
    parts = {"unsup_nll": unsup_nll, "unsup_kl": unsup_kl, "ru_term": ru,
             "recon": recon, "rep": rep}
    vals = {}
    for name, t in parts.items():
        vals[name] = 0.0 if t is None else float(t.data)
        if not math.isfinite(vals[name]):
            raise NonFiniteLossError(name, vals[name])
    total = ad.add(unsup_nll, unsup_kl)
    if cfg.gamma_tc > 0.0 and ru is not None:
        total = ad.add(total, ad.scalar_mul(ru, cfg.gamma_tc))
    if cfg.alpha > 0.0 and recon is not None:
        total = ad.add(total, ad.scalar_mul(recon, cfg.alpha))
    if cfg.tau > 0.0 and rep is not None:
        total = ad.add(total, ad.scalar_mul(rep, cfg.tau))
    return LossBreakdown(total=float(total.data), node=total, **vals)

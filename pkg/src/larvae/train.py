"""Adam optimizer and the training loop, with checkpointing and evaluation.

Per iteration: sample one unlabeled and one labeled batch, compute the
composed objective, take one Adam step on the encoder/decoder parameters;
with the adversarial regularizer, one interleaved discriminator step on its
own optimizer. The master seed is split into dedicated sub-streams
(model init, batch sampling, reparameterization noise, metric evaluation,
discriminator) so that runs with all supervised weights at zero update the
parameters byte-identically to a purely unsupervised loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses, metrics, nn
from .models import SemiVAE, save_checkpoint

HISTORY_COLUMNS = ("iteration", "mig", "l2", "factorvae_score",
                   "total_loss", "unsup", "recon", "rep")


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-4
    eta: float = 0.02
    seed: int = 0
    eval_every: int = 2000
    dim_z: int = 5
    arch: str = "mlp"
    disc_learning_rate: float = 1e-4
    loss: losses.SemiLossConfig = field(default_factory=losses.SemiLossConfig)
    eval_votes: int = 800
    eval_batch_per_vote: int = 64
    mig_bins: int = 20

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._scratch = {k: np.empty_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        """One update from the grads currently stored on the parameters."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"adam_step: parameter {k!r} has no gradient")
            if g.shape != p.data.shape:
                raise ad.ShapeError("adam_step", g.shape, p.data.shape)
            m, v, buf = self.m[k], self.v[k], self._scratch[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            np.divide(v, bc2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= self.lr / bc1
            p.data -= buf


def adam_step(optimizer):
    optimizer.step()


class Discriminator:
    """Two-logit MLP adversary for the density-ratio TC estimate."""

    def __init__(self, latent_dim, lr, seed, hidden=64):
        self.spec = [
            nn.dense(latent_dim, hidden), nn.relu_layer(),
            nn.dense(hidden, hidden), nn.relu_layer(),
            nn.dense(hidden, 2),
        ]
        self.params = nn.init_params(self.spec, seed)
        self.optimizer = Adam(self.params, lr)


def discriminator_step(disc, latents, permuted):
    """One cross-entropy update of the adversary on (joint, permuted) batches."""
    with ad.Tape() as tape:
        loss = losses.discriminator_loss(disc.spec, disc.params, latents, permuted)
    ad.zero_grad(disc.params)
    tape.backward(loss)
    disc.optimizer.step()
    return float(loss.data)


def encode_means(model, images, chunk=256):
    """Posterior means for a stack of images, without recording a tape."""
    rows = []
    for lo in range(0, images.shape[0], chunk):
        gy, gz = model.encode(ad.constant(images[lo:lo + chunk]))
        rows.append(np.concatenate([gy.mean.data, gz.mean.data], axis=1))
    return np.concatenate(rows, axis=0)


def evaluate(model, dataset, seed=0, votes=800, batch_per_vote=64, bins=20):
    """Full-dataset MetricsReport; deterministic given the seed."""
    mu = encode_means(model, dataset.images)
    mi = metrics.mi_matrix(mu, dataset.factor_index, bins=bins)
    ent = metrics.factor_entropies(dataset.factor_index)
    mig_score = metrics.mig(mi, ent)
    l2 = metrics.l2_score(mu[:, :model.dim_y], dataset.labels)
    score = metrics.factorvae_score(mu, dataset, votes=votes,
                                    batch_per_vote=batch_per_vote,
                                    rng=np.random.default_rng(seed))
    return metrics.MetricsReport(mig=mig_score, l2=l2, factorvae_score=score,
                                 mi_matrix=mi, entropies=ent)


def train(dataset, pool, cfg, out_dir=None):
    """Run the training loop; returns (model, history).

    history is one dict per evaluation point with the HISTORY_COLUMNS keys.
    When out_dir is given, the final checkpoint, the metric history CSV, and
    the final report CSVs are written there. Aborts with NonFiniteLossError
    (naming the term) if any loss component goes non-finite.
    """
    ss = np.random.SeedSequence(cfg.seed)
    s_init, s_batch, s_rep, s_metric, s_disc = ss.spawn(5)
    rng_batch = np.random.default_rng(s_batch)
    rng_rep = np.random.default_rng(s_rep)
    rng_metric = np.random.default_rng(s_metric)
    rng_disc = np.random.default_rng(s_disc)

    dim_y = dataset.num_factors
    model = SemiVAE(dataset.spec.image_shape, dim_y, cfg.dim_z,
                    sigma2=cfg.loss.sigma2, arch=cfg.arch,
                    seed=np.random.default_rng(s_init))
    optimizer = Adam(model.parameters(), cfg.learning_rate)
    disc = None
    if cfg.loss.ru_kind == "factorvae" and cfg.loss.gamma_tc > 0:
        disc = Discriminator(model.partition.total, cfg.disc_learning_rate,
                             seed=rng_disc)

    lcfg = cfg.loss
    total_dim = model.partition.total
    history = []
    breakdown = None
    for it in range(1, cfg.iterations + 1):
        xu, (xl, yl) = data_mod.sample_batches(dataset, pool, cfg.batch_size, rng_batch)
        eps_xi = rng_rep.standard_normal((cfg.batch_size, total_dim))
        with ad.Tape() as tape:
            nll, kl, ru, sample = losses.unsup_loss(
                model, ad.constant(xu), eps_xi, lcfg, len(dataset),
                disc=(disc.spec, disc.params) if disc else None)
            recon = rep = None
            if lcfg.alpha > 0 or lcfg.tau > 0:
                xl_t = ad.constant(xl)
                gy_l, gz_l = model.encode(xl_t)
                if lcfg.alpha > 0:
                    recon = losses.label_recon_loss(gy_l.mean, ad.constant(yl))
                if lcfg.tau > 0:
                    eps_z = rng_rep.standard_normal((cfg.batch_size, cfg.dim_z))
                    rep = losses.rep_from_posterior(model, xl_t, yl, gz_l, eps_z)
            try:
                breakdown = losses.compose_semi_loss(nll, kl, ru, recon, rep, lcfg)
            except losses.NonFiniteLossError as err:
                raise losses.NonFiniteLossError(
                    f"{err.term} at iteration {it}", float("nan")) from err
        ad.zero_grad(model.parameters())
        if disc:
            ad.zero_grad(disc.params)
        tape.backward(breakdown.node)
        optimizer.step()
        if disc:
            permuted = losses.permute_dims(sample.xi.data, rng_disc)
            discriminator_step(disc, sample.xi.data, permuted)

        if it % cfg.eval_every == 0 or it == cfg.iterations:
            report = evaluate(model, dataset, seed=rng_metric.integers(2 ** 63),
                              votes=cfg.eval_votes,
                              batch_per_vote=cfg.eval_batch_per_vote,
                              bins=cfg.mig_bins)
            unsup = breakdown.unsup_nll + breakdown.unsup_kl \
                + lcfg.gamma_tc * breakdown.ru_term
            history.append({
                "iteration": it,
                "mig": report.mig,
                "l2": report.l2,
                "factorvae_score": report.factorvae_score,
                "total_loss": breakdown.total,
                "unsup": unsup,
                "recon": breakdown.recon,
                "rep": breakdown.rep,
            })
            if out_dir is not None:
                metrics.write_report(report, out_dir)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model.parameters(), out_dir / "checkpoint.bin")
        write_history_csv(history, out_dir / "metrics.csv")
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def read_history_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        rec = {"iteration": int(r["iteration"])}
        rec.update({c: float(r[c]) for c in HISTORY_COLUMNS[1:]})
        out.append(rec)
    return out


def traverse(model, dataset, item_index, dim, steps):
    """Label-traversal grid: the reference image then `steps` decodes.

    Takes the item's ground-truth label, sweeps dimension `dim` over `steps`
    equally spaced values spanning that dimension's observed range, and
    decodes each variant with the nuisance fixed at zero. Every non-traversed
    label entry is identical across the grid.
    """
    if not 0 <= item_index < len(dataset):
        raise IndexError(f"item {item_index} out of range [0, {len(dataset)})")
    if not 0 <= dim < model.dim_y:
        raise IndexError(f"label dimension {dim} out of range [0, {model.dim_y})")
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    base = dataset.labels[item_index].copy()
    lo = dataset.labels[:, dim].min()
    hi = dataset.labels[:, dim].max()
    z = np.zeros((1, model.dim_z))
    cells = [dataset.images[item_index]]
    for c in np.linspace(lo, hi, steps):
        y = base.copy()
        y[dim] = c
        out = model.decode(ad.constant(y[None]), ad.constant(z))
        cells.append(out.mean.data[0])
    return np.stack(cells)

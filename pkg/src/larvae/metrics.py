"""Disentanglement metrics: MI matrix, MIG, l2 score, FactorVAE score.

MIG follows the histogram recipe: each latent (means, not samples) is
discretized into equal-width bins over its observed range, mutual information
with each factor is read off the empirical joint, and the per-factor gap
between the top two latents is normalized by the factor entropy. Everything
is in nats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    mig: float
    l2: float
    factorvae_score: float
    mi_matrix: np.ndarray       # (num_latents, num_factors)
    entropies: np.ndarray       # (num_factors,)


def _discretize(column, bins):
    lo, hi = column.min(), column.max()
    if hi <= lo:
        return None  # constant latent dimension
    codes = ((column - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(codes, 0, bins - 1)


def _discrete_mi(codes_a, card_a, codes_b, card_b):
    joint = np.zeros((card_a, card_b), dtype=np.float64)
    np.add.at(joint, (codes_a, codes_b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    denom = np.outer(pa, pb)
    return float(np.sum(joint[nz] * np.log(joint[nz] / denom[nz])))


def factor_entropies(factor_index):
    """Empirical marginal entropy of each factor, in nats."""
    factor_index = np.asarray(factor_index)
    out = np.empty(factor_index.shape[1])
    for k in range(factor_index.shape[1]):
        _, counts = np.unique(factor_index[:, k], return_counts=True)
        p = counts / counts.sum()
        out[k] = -np.sum(p * np.log(p))
    return out


def mi_matrix(latent_means, factor_index, bins=20):
    """Mutual information between every latent dimension and every factor.

    latent_means: (N, L) float array of encoder means.
    factor_index: (N, K) integer factor value indices.
    Constant latent dimensions get MI 0 against every factor.
    """
    latent_means = np.asarray(latent_means, dtype=np.float64)
    factor_index = np.asarray(factor_index)
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    n, num_latents = latent_means.shape
    if n < 2:
        raise ValueError(f"need at least 2 items, got {n}")
    num_factors = factor_index.shape[1]
    cards = [int(factor_index[:, k].max()) + 1 for k in range(num_factors)]
    out = np.zeros((num_latents, num_factors))
    for j in range(num_latents):
        codes = _discretize(latent_means[:, j], bins)
        if codes is None:
            continue
        for k in range(num_factors):
            out[j, k] = _discrete_mi(codes, bins, factor_index[:, k], cards[k])
    return out


def mig(mi, entropies):
    """Mean over factors of (top MI - second MI) / factor entropy."""
    mi = np.asarray(mi, dtype=np.float64)
    entropies = np.asarray(entropies, dtype=np.float64)
    if np.any(entropies <= 0):
        raise ValueError("every factor must have positive entropy")
    ordered = np.sort(mi, axis=0)[::-1]
    top = ordered[0]
    second = ordered[1] if mi.shape[0] > 1 else np.zeros_like(top)
    return float(np.mean((top - second) / entropies))


def l2_score(mu_y, y):
    """Mean Euclidean distance between inferred and ground-truth labels."""
    mu_y = np.asarray(mu_y, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mu_y.shape != y.shape:
        raise ValueError(f"l2_score: shapes {mu_y.shape} vs {y.shape}")
    return float(np.mean(np.linalg.norm(mu_y - y, axis=-1)))


def factorvae_score(encoder, dataset, votes=800, batch_per_vote=64, rng=None):
    """Majority-vote accuracy of the fixed-factor / least-variance classifier.

    Per vote: fix one random factor at a random value, draw batch_per_vote
    items from that slice, and record the argmin-variance dimension of the
    std-normalized latents. The vote table's majority classifier is scored on
    the votes themselves. `encoder` is either a callable images -> (N, L)
    latent means or a precomputed (N, L) array. Dimensions whose full-dataset
    std is below 1e-6 are excluded as collapsed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if votes < 1:
        raise ValueError(f"votes must be >= 1, got {votes}")
    latents = encoder if isinstance(encoder, np.ndarray) else encoder(dataset.images)
    latents = np.asarray(latents, dtype=np.float64)
    stds = latents.std(axis=0)
    keep = stds >= 1e-6
    if not np.any(keep):
        raise ValueError("all latent dimensions are collapsed")
    normalized = latents[:, keep] / stds[keep]
    num_factors = dataset.num_factors
    cards = dataset.spec.cardinalities
    groups = [
        [np.flatnonzero(dataset.factor_index[:, k] == v) for v in range(cards[k])]
        for k in range(num_factors)
    ]
    table = np.zeros((normalized.shape[1], num_factors), dtype=np.int64)
    for _ in range(votes):
        k = int(rng.integers(num_factors))
        v = int(rng.integers(cards[k]))
        members = groups[k][v]
        pick = members[rng.integers(0, len(members), size=batch_per_vote)]
        variances = normalized[pick].var(axis=0)
        table[int(np.argmin(variances)), k] += 1
    return float(table.max(axis=1).sum() / votes)


def write_report(report, out_dir):
    """report.csv with `metric,value` rows plus the mi_matrix.csv sidecar."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["mig", repr(report.mig)])
        w.writerow(["l2", repr(report.l2)])
        w.writerow(["factorvae_score", repr(report.factorvae_score)])
    with open(out_dir / "mi_matrix.csv", "w", newline="") as f:
        w = csv.writer(f)
        for row in report.mi_matrix:
            w.writerow([repr(v) for v in row])

"""Alignment objectives tying the trainable trial encoder to frozen
observational embeddings: an unbiased MMD U-statistic with a Gaussian kernel,
a shared-covariate contrastive loss, conditional-mean alignment, the median
bandwidth heuristic, and the penalty-weight annealing schedule.

Each loss returns (value, gradient w.r.t. the trial embeddings); the
observational side is always treated as frozen.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from calmcate.linmod import fit_ridge_multi

ALIGNMENT_MODES = ("mmd", "contrastive", "cond_mean")

# Fraction of epochs with the penalty weight held constant, and the floor it
# decays to by the final epoch.
ANNEAL_HOLD_FRACTION = 0.6
ANNEAL_FLOOR_FRACTION = 0.2

EPSILON_QUANTILE = 0.05


@dataclass(frozen=True)
class AlignmentConfig:
    """Alignment mode and its hyperparameters.

    ``sigma`` may be the string ``"median"`` to request the median heuristic;
    ``epsilon=None`` requests the pairwise-distance quantile rule.
    """

    mode: str = "mmd"
    lambda0: float = 1.0
    sigma: float | str = "median"
    epsilon: float | None = None
    cond_alpha: float = 1.0

    def __post_init__(self):
        if self.mode not in ALIGNMENT_MODES:
            raise ValueError(f"mode must be one of {ALIGNMENT_MODES}")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")
        if not isinstance(self.sigma, str) and self.sigma <= 0:
            raise ValueError("fixed sigma must be positive")


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (
        np.sum(A**2, axis=1)[:, None]
        + np.sum(B**2, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.maximum(d, 0.0)


def median_heuristic(pooled: np.ndarray) -> float:
    """Kernel bandwidth from pooled embeddings of both sources.

    sigma = sqrt(median of pairwise squared distances over distinct pairs).
    Falls back to 1.0 with a warning when all points coincide.
    """
    pooled = np.atleast_2d(np.asarray(pooled, dtype=float))
    n = pooled.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    d2 = _sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(n, k=1)]
    med = float(np.median(upper))
    if med <= 0.0:
        warnings.warn("all points identical; falling back to sigma = 1", stacklevel=2)
        return 1.0
    return float(np.sqrt(med))


def mmd_loss(w_os: np.ndarray, w_rct: np.ndarray, sigma):
    """Unbiased MMD^2 U-statistic between frozen OS and trainable RCT
    embeddings, with its gradient w.r.t. the RCT side.

    value = mean_{j != j'} k(o_j, o_j') - 2 mean_{j,i} k(o_j, r_i)
          + mean_{i != i'} k(r_i, r_i'),  k(a, b) = exp(-||a-b||^2 / (2 sigma^2)).

    ``sigma`` may be a sequence of bandwidths, in which case the kernel is
    the sum of the Gaussians and value and gradient add up over components.
    The estimate may be slightly negative; it is never clamped.
    """
    if np.ndim(sigma) > 0:
        total, grad = 0.0, 0.0
        for s in np.asarray(sigma, dtype=float):
            value, g = mmd_loss(w_os, w_rct, float(s))
            total += value
            grad = grad + g
        return total, grad
    w_os = np.atleast_2d(np.asarray(w_os, dtype=float))
    w_rct = np.atleast_2d(np.asarray(w_rct, dtype=float))
    n_o, n_r = w_os.shape[0], w_rct.shape[0]
    if n_o < 2 or n_r < 2:
        raise ValueError("mmd needs at least two points per source")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s2 = 2.0 * sigma**2
    k_oo = np.exp(-_sq_dists(w_os, w_os) / s2)
    k_or = np.exp(-_sq_dists(w_os, w_rct) / s2)
    k_rr = np.exp(-_sq_dists(w_rct, w_rct) / s2)
    term1 = (k_oo.sum() - n_o) / (n_o * (n_o - 1))
    term2 = 2.0 * k_or.sum() / (n_o * n_r)
    term3 = (k_rr.sum() - n_r) / (n_r * (n_r - 1))
    value = term1 - term2 + term3

    # cross term: d/dr_i of -2/(n_o n_r) sum k = +2/(n_o n_r s^2) sum_j k_ji (r_i - o_j)
    col = k_or.sum(axis=0)
    grad = (2.0 / (n_o * n_r * sigma**2)) * (w_rct * col[:, None] - k_or.T @ w_os)
    # within-RCT term: each unordered pair appears twice in the double sum
    k_rr_off = k_rr - np.eye(n_r)
    row = k_rr_off.sum(axis=1)
    grad -= (2.0 / (n_r * (n_r - 1) * sigma**2)) * (
        w_rct * row[:, None] - k_rr_off @ w_rct
    )
    return float(value), grad


def neighbor_sets(z_os: np.ndarray, z_rct: np.ndarray, epsilon: float):
    """Per-RCT-unit OS index arrays: N_i = {j : ||Z_j - Z_i|| <= epsilon}."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    z_os = np.atleast_2d(np.asarray(z_os, dtype=float))
    z_rct = np.atleast_2d(np.asarray(z_rct, dtype=float))
    d2 = _sq_dists(z_rct, z_os)
    cut = epsilon**2
    return [np.flatnonzero(row <= cut) for row in d2]


def default_epsilon(
    z_os: np.ndarray,
    z_rct: np.ndarray,
    quantile: float = EPSILON_QUANTILE,
    max_pairs: int = 5_000_000,
    seed: int = 0,
) -> float:
    """Radius rule: a low quantile of OS-RCT pairwise Z distances.

    When the full pair set exceeds ``max_pairs`` the OS side is subsampled
    deterministically from ``seed``.
    """
    z_os = np.atleast_2d(np.asarray(z_os, dtype=float))
    z_rct = np.atleast_2d(np.asarray(z_rct, dtype=float))
    n_o, n_r = z_os.shape[0], z_rct.shape[0]
    if n_o * n_r > max_pairs:
        keep = max(2, max_pairs // max(n_r, 1))
        rng = np.random.default_rng(seed)
        z_os = z_os[rng.choice(n_o, size=min(keep, n_o), replace=False)]
    d = np.sqrt(_sq_dists(z_rct, z_os))
    return float(np.quantile(d.ravel(), quantile))


def contrastive_loss(w_os: np.ndarray, w_rct: np.ndarray, neighbors):
    """Mean over RCT units of the mean squared embedding distance to their
    OS neighbors; units with empty neighbor sets are skipped and the outer
    mean renormalizes over the non-empty ones.

    Returns (value, gradient w.r.t. w_rct). All sets empty contributes 0
    with a warning.
    """
    w_os = np.atleast_2d(np.asarray(w_os, dtype=float))
    w_rct = np.atleast_2d(np.asarray(w_rct, dtype=float))
    n_r = w_rct.shape[0]
    if len(neighbors) != n_r:
        raise ValueError("neighbor list length must match the RCT embeddings")
    nonempty = [i for i, idx in enumerate(neighbors) if len(idx) > 0]
    grad = np.zeros_like(w_rct)
    if not nonempty:
        warnings.warn(
            "all neighbor sets empty; contrastive loss contributes 0", stacklevel=2
        )
        return 0.0, grad
    count = len(nonempty)
    value = 0.0
    for i in nonempty:
        block = w_os[neighbors[i]]
        diffs = block - w_rct[i]
        value += float(np.mean(np.sum(diffs**2, axis=1)))
        grad[i] = (2.0 / count) * (w_rct[i] - block.mean(axis=0))
    return value / count, grad


def cond_mean_targets(
    z_os: np.ndarray, w_os: np.ndarray, z_rct: np.ndarray, alpha: float
) -> np.ndarray:
    """Targets for conditional-mean alignment: a ridge fit of the frozen OS
    embedding on Z, evaluated at the RCT units' shared covariates."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    model = fit_ridge_multi(z_os, w_os, alpha=alpha)
    return model.predict(np.atleast_2d(np.asarray(z_rct, dtype=float)))


def cond_mean_loss(w_rct: np.ndarray, targets: np.ndarray):
    """Mean squared distance to the per-unit targets, with gradient
    2 (w_r - target) / n_r."""
    w_rct = np.atleast_2d(np.asarray(w_rct, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if w_rct.shape != targets.shape:
        raise ValueError("embeddings and targets must share a shape")
    n_r = w_rct.shape[0]
    diff = w_rct - targets
    value = float(np.mean(np.sum(diff**2, axis=1)))
    return value, (2.0 / n_r) * diff


def anneal_lambda(epoch: int, total_epochs: int, lambda0: float) -> float:
    """Penalty weight schedule: constant for the first 60% of epochs, then
    linear decay to 0.2 * lambda0 at the final epoch."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    hold = ANNEAL_HOLD_FRACTION * total_epochs
    if epoch < hold or total_epochs == 0:
        return lambda0
    frac = (epoch - hold) / (total_epochs - hold)
    return lambda0 * (1.0 - (1.0 - ANNEAL_FLOOR_FRACTION) * frac)

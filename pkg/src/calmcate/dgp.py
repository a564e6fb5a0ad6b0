"""Synthetic data-generating processes: a linear-CATE regime with AR(1)
shared covariates, a shared-latent-factor regime with nonlinear CATEs, and a
semi-synthetic benchmark built over a real covariate CSV.

Each generator returns (os, rct, oracle); the oracle retains every sampled
coefficient plus the conditional Gaussian law of the unmeasured block, so it
can regenerate the data bit-identically and evaluate the true CATE
marginalized over V.
"""

from __future__ import annotations

import csv
import os as _os
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from calmcate.data import CovariateLayout, Dataset

OUTCOME_FORMS = ("linear", "quadratic", "sinusoidal")
CATE_FORMS = ("sin", "abs", "quad")

# Scales applied to the standardized CATE index in the latent regime.
TAU_SCALE = {"sin": 2.0, "abs": 2.0, "quad": 1.0}

# Quadratic outcome interaction strength, and the logistic confounding slope.
QUAD_COEF = 0.3
PROPENSITY_SLOPE = 0.3
SHIFT_DIRECTION_WIDTH = 5

TRUE_CATE_DRAWS = 2000


@dataclass(frozen=True)
class BaselineDgpConfig:
    """Linear-regime configuration.

    ``shared_proportion``, when set, recomputes (p_z, p_v) on the fixed
    budget p_z + p_v = 50 so the mismatch sweep varies only the split.
    """

    p_z: int = 30
    p_u: int = 10
    p_v: int = 20
    d_true: int = 5
    rho_ar: float = 0.5
    sigma_v2: float = 1.0
    sigma_u2: float = 1.0
    outcome_form: str = "linear"
    shift_magnitude: float = 0.5
    n_r: int = 500
    n_o: int = 10_000
    shared_proportion: float | None = None
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.shared_proportion is not None:
            if not 0.0 < self.shared_proportion < 1.0:
                raise ValueError("shared_proportion must be in (0, 1)")
            p_z = int(round(self.shared_proportion * 50))
            object.__setattr__(self, "p_z", p_z)
            object.__setattr__(self, "p_v", 50 - p_z)
        if self.outcome_form not in OUTCOME_FORMS:
            raise ValueError(f"outcome_form must be one of {OUTCOME_FORMS}")
        if self.outcome_form == "quadratic" and self.d_true < 2:
            raise ValueError("the quadratic form needs d_true >= 2")
        if not 1 <= self.d_true <= self.p:
            raise ValueError("d_true must lie in [1, p]")
        if min(self.sigma_v2, self.sigma_u2, self.noise_sd) < 0:
            raise ValueError("variances must be non-negative")
        if self.shift_magnitude < 0:
            raise ValueError("shift_magnitude must be non-negative")
        if not 0 <= self.rho_ar < 1:
            raise ValueError("rho_ar must lie in [0, 1)")
        if min(self.n_r, self.n_o) < 2:
            raise ValueError("need at least two units per source")

    @property
    def p(self) -> int:
        return self.p_u + self.p_z + self.p_v

    @property
    def layout(self) -> CovariateLayout:
        return CovariateLayout(p_u=self.p_u, p_z=self.p_z, p_v=self.p_v)


@dataclass(frozen=True)
class LatentDgpConfig:
    """Shared-latent-factor regime configuration."""

    latent_dim: int = 5
    latent_scale_v: float = 2.0
    alpha_u: float = 2.0
    sigma_v2: float = 0.1
    sigma_u2: float = 0.1
    w_z: float = 0.0
    w_u: float = 0.0
    w_v: float = 2.0
    cate_form: str = "sin"
    omega: float = 1.5
    p_z: int = 30
    p_u: int = 10
    p_v: int = 20
    rho_ar: float = 0.5
    n_r: int = 500
    n_o: int = 10_000
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.cate_form not in CATE_FORMS:
            raise ValueError(f"cate_form must be one of {CATE_FORMS}")
        if min(self.w_z, self.w_u, self.w_v) < 0:
            raise ValueError("signal weights must be non-negative")
        if self.sigma_u2 <= 0 or self.sigma_v2 <= 0:
            raise ValueError("measurement noise variances must be positive")
        if self.alpha_u < 0:
            raise ValueError("alpha_u must be non-negative")
        if min(self.n_r, self.n_o) < 2:
            raise ValueError("need at least two units per source")

    @property
    def layout(self) -> CovariateLayout:
        return CovariateLayout(p_u=self.p_u, p_z=self.p_z, p_v=self.p_v)


def default_ihdp_path() -> str:
    """Path of the covariate table shipped with the package."""
    return str(resources.files("calmcate").joinpath("assets/ihdp_covariates.csv"))


@dataclass(frozen=True)
class IhdpConfig:
    """Semi-synthetic benchmark over a covariate CSV.

    ``z_idx``/``u_idx``/``v_idx`` assign file columns to the blocks; when
    ``v_idx`` is None every remaining column goes to V. Structural-model
    coefficients derive from ``coef_seed`` and stay fixed across replicates;
    the bootstrap resampling carries the replicate randomness.
    """

    path: str | None = None
    z_idx: tuple = tuple(range(13))
    u_idx: tuple = tuple(range(13, 19))
    v_idx: tuple | None = None
    n_o: int = 2000
    n_r: int = 300
    coef_seed: int = 0
    rct_shift_magnitude: float = 0.5
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.path is None:
            object.__setattr__(self, "path", default_ihdp_path())
        if min(self.n_r, self.n_o) < 2:
            raise ValueError("need at least two units per source")
        if self.rct_shift_magnitude < 0:
            raise ValueError("rct_shift_magnitude must be non-negative")


def ar1_cov(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _unit_vector(rng, dim, norm=1.0):
    v = rng.normal(size=dim)
    return v * (norm / np.linalg.norm(v))


def _propensity_coefs(p_o: int) -> np.ndarray:
    k = min(10, p_o)
    coefs = np.zeros(p_o)
    coefs[:k] = PROPENSITY_SLOPE * (-1.0) ** np.arange(k)
    return coefs


class DgpOracle:
    """Everything needed to regenerate a replicate and evaluate its truth.

    Holds the regime tag, the config and seed, all sampled coefficients, and
    the parameters of the conditional Gaussian law V | (U, Z).
    """

    def __init__(self, regime: str, cfg, seed: int, params: dict):
        self.regime = regime
        self.cfg = cfg
        self.seed = seed
        self.params = params

    @property
    def layout(self) -> CovariateLayout:
        return self.cfg.layout if self.regime != "ihdp" else self.params["layout"]

    def regenerate(self):
        """Re-run the generator with the stored config and seed."""
        if self.regime == "baseline":
            return gen_baseline(self.cfg, self.seed)
        if self.regime == "latent":
            return gen_latent_nonlinear(self.cfg, self.seed)
        return load_ihdp_semi_synthetic(self.cfg, self.seed)

    # -- conditional law of the unmeasured block ---------------------------

    def conditional_v_params(self, X_r: np.ndarray):
        """Mean matrix and covariance Cholesky of V | (U, Z) per row."""
        X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
        lay = self.layout
        if self.regime == "baseline":
            Z = X_r[:, lay.p_u :]
            mean = Z @ self.params["lam_vz"].T
            chol = np.sqrt(self.cfg.sigma_v2) * np.eye(lay.p_v)
            return mean, chol
        if self.regime == "latent":
            U = X_r[:, : lay.p_u]
            mean = U @ self.params["gain_vu"].T
            return mean, self.params["cond_chol"]
        raise ValueError(f"regime {self.regime!r} has no conditional V sampler")

    def sample_v_given(self, x_r: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
        """Draw ``m`` samples of V from the conditional law at one point."""
        mean, chol = self.conditional_v_params(np.atleast_2d(x_r))
        rng = np.random.default_rng(seed)
        eps = rng.normal(size=(m, chol.shape[0]))
        return mean[0] + eps @ chol.T

    # -- truth -------------------------------------------------------------

    def true_cate_batch(self, X_r: np.ndarray, m: int = TRUE_CATE_DRAWS, seed: int = 0):
        """True CATE and Monte-Carlo SE per row of ``X_r``.

        Closed forms (SE 0) apply when the marginalized integrand is linear
        in V; otherwise the integrand is averaged over ``m`` conditional
        draws with common random numbers across the batch.
        """
        if m < 1:
            raise ValueError("m must be at least 1")
        X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
        if self.regime == "baseline":
            return self._true_cate_baseline(X_r, m, seed)
        if self.regime == "latent":
            return self._true_cate_latent(X_r, m, seed)
        tau = X_r @ self.params["theta"]
        return tau, np.zeros_like(tau)

    def _mean_index_baseline(self, X_r):
        lay = self.layout
        U = X_r[:, : lay.p_u]
        Z = X_r[:, lay.p_u :]
        P = self.params["proj"]
        P_u = P[:, : lay.p_u]
        P_z = P[:, lay.p_u : lay.p_u + lay.p_z]
        P_v = P[:, lay.p_u + lay.p_z :]
        t_mean = U @ P_u.T + Z @ P_z.T + (Z @ self.params["lam_vz"].T) @ P_v.T
        return t_mean, P_v

    def _rct_shift_baseline(self, Z):
        """Trial-only outcome shift; shared by both arms, so it never enters
        the CATE but does enter the trial conditional means."""
        eta = self.params["eta"]
        k = eta.shape[0]
        index = Z[:, :k] @ eta / self.params["sd_eta"]
        return self.cfg.shift_magnitude * index

    def _true_cate_baseline(self, X_r, m, seed):
        cfg = self.cfg
        lay = self.layout
        t_mean, P_v = self._mean_index_baseline(X_r)
        beta_e = self.params["beta_e"]
        if cfg.outcome_form == "linear":
            tau = 2.0 * (t_mean @ beta_e)
            return tau, np.zeros_like(tau)
        # common random numbers: one set of V-noise draws for the whole batch
        rng = np.random.default_rng(seed)
        eps = rng.normal(size=(lay.p_v, m))
        H = (np.sqrt(cfg.sigma_v2) * P_v) @ eps
        if cfg.outcome_form == "sinusoidal":
            args = (t_mean @ beta_e)[:, None] + (beta_e @ H)[None, :]
            g = np.sin(args)
        else:
            lin = (t_mean @ beta_e)[:, None] + (beta_e @ H)[None, :]
            t1 = t_mean[:, 0][:, None] + H[0][None, :]
            t2 = t_mean[:, 1][:, None] + H[1][None, :]
            g = lin + QUAD_COEF * (t1 * t2 + t1**2 - 1.0)
        tau = 2.0 * g.mean(axis=1)
        se = 2.0 * g.std(axis=1, ddof=1) / np.sqrt(m)
        return tau, se

    def _true_cate_latent(self, X_r, m, seed):
        cfg = self.cfg
        lay = self.layout
        U = X_r[:, : lay.p_u]
        mu_s = (U @ self.params["gain_vu"].T) @ self.params["beta_tau"]
        rng = np.random.default_rng(seed)
        eps = rng.normal(size=(lay.p_v, m))
        xi = (self.params["cond_chol"].T @ self.params["beta_tau"]) @ eps
        s = (mu_s[:, None] + xi[None, :]) / self.params["sd_s"]
        vals = _tau_form(s, cfg.cate_form, cfg.omega)
        return vals.mean(axis=1), vals.std(axis=1, ddof=1) / np.sqrt(m)

    def cmo_reference(self, X_r: np.ndarray) -> np.ndarray:
        """Closed-form variance-minimizing augmentation, available in the
        linear baseline regime: the arm-averaged trial outcome mean. The
        effect terms cancel in the average while the baseline index and the
        arm-shared trial shift survive."""
        if self.regime != "baseline" or self.cfg.outcome_form != "linear":
            raise ValueError("closed-form reference needs the linear baseline regime")
        X_r = np.atleast_2d(np.asarray(X_r, float))
        t_mean, _ = self._mean_index_baseline(X_r)
        Z = X_r[:, self.layout.p_u :]
        return t_mean @ self.params["beta_b"] + self._rct_shift_baseline(Z)


def true_cate(oracle: DgpOracle, x_r: np.ndarray, m: int = TRUE_CATE_DRAWS, seed: int = 0):
    """True CATE at a single trial-covariate point; returns (value, mc_se)."""
    tau, se = oracle.true_cate_batch(np.atleast_2d(x_r), m=m, seed=seed)
    return float(tau[0]), float(se[0])


def _tau_form(s: np.ndarray, form: str, omega: float) -> np.ndarray:
    if form == "sin":
        return TAU_SCALE["sin"] * np.sin(omega * s)
    if form == "abs":
        return TAU_SCALE["abs"] * np.abs(s)
    return TAU_SCALE["quad"] * s**2


def _baseline_g(t: np.ndarray, beta_e: np.ndarray, form: str) -> np.ndarray:
    lin = t @ beta_e
    if form == "linear":
        return lin
    if form == "sinusoidal":
        return np.sin(lin)
    return lin + QUAD_COEF * (t[:, 0] * t[:, 1] + t[:, 0] ** 2 - 1.0)


def gen_baseline(cfg: BaselineDgpConfig, seed: int):
    """Paired OS/RCT draw from the linear-CATE regime.

    Coefficients (mixing matrices, projection, outcome directions) are drawn
    once from ``seed`` before the unit-level sampling, so the oracle can
    regenerate everything bit-identically.
    """
    rng = np.random.default_rng(seed)
    lay = cfg.layout
    lam_vz = rng.normal(size=(cfg.p_v, cfg.p_z)) / np.sqrt(cfg.p_z)
    lam_uz = rng.normal(size=(cfg.p_u, cfg.p_z)) / np.sqrt(cfg.p_z)
    G = rng.normal(size=(cfg.p, cfg.d_true))
    Q, _ = np.linalg.qr(G)
    proj = Q.T
    beta_b = _unit_vector(rng, cfg.d_true, norm=2.0)
    beta_e = _unit_vector(rng, cfg.d_true, norm=1.0)
    k_eta = min(SHIFT_DIRECTION_WIDTH, cfg.p_z)
    eta = np.ones(k_eta) / np.sqrt(k_eta)
    sd_eta = float(np.sqrt(eta @ ar1_cov(k_eta, cfg.rho_ar) @ eta))
    prop_coefs = _propensity_coefs(lay.p_o)

    chol_z = np.linalg.cholesky(ar1_cov(cfg.p_z, cfg.rho_ar))

    def draw_units(n, source):
        Z = rng.normal(size=(n, cfg.p_z)) @ chol_z.T
        V = Z @ lam_vz.T + np.sqrt(cfg.sigma_v2) * rng.normal(size=(n, cfg.p_v))
        U = Z @ lam_uz.T + np.sqrt(cfg.sigma_u2) * rng.normal(size=(n, cfg.p_u))
        if source == "os":
            X_obs = np.column_stack([Z, V])
            p1 = _sigmoid(X_obs @ prop_coefs)
            a = np.where(rng.random(n) < p1, 1, -1)
        else:
            X_obs = np.column_stack([U, Z])
            a = np.where(rng.random(n) < 0.5, 1, -1)
        t = np.column_stack([U, Z, V]) @ proj.T
        g = _baseline_g(t, beta_e, cfg.outcome_form)
        mean = t @ beta_b + a * g
        # trial-only baseline shift, identical in both arms: it moves the
        # source outcome laws apart without touching the treatment effect
        if source == "rct" and cfg.shift_magnitude > 0:
            mean = mean + cfg.shift_magnitude * (Z[:, :k_eta] @ eta) / sd_eta
        y = mean + cfg.noise_sd * rng.normal(size=n)
        return Dataset(X=X_obs, y=y, a=a, source=source, layout=lay)

    os_data = draw_units(cfg.n_o, "os")
    rct_data = draw_units(cfg.n_r, "rct")
    oracle = DgpOracle(
        regime="baseline",
        cfg=cfg,
        seed=seed,
        params={
            "lam_vz": lam_vz,
            "lam_uz": lam_uz,
            "proj": proj,
            "beta_b": beta_b,
            "beta_e": beta_e,
            "eta": eta,
            "sd_eta": sd_eta,
            "propensity_coefs": prop_coefs,
        },
    )
    return os_data, rct_data, oracle


def gen_latent_nonlinear(cfg: LatentDgpConfig, seed: int):
    """Paired OS/RCT draw from the shared-latent regime.

    U and V both load on a common latent factor H; Z is AR(1) noise
    independent of H. The CATE is a nonlinear transform of a V index, so the
    trial-side truth marginalizes V over its Gaussian law given U.
    """
    rng = np.random.default_rng(seed)
    lay = cfg.layout
    L = cfg.latent_dim

    def _row_normalized(rows, cols):
        B = rng.normal(size=(rows, cols))
        return B / np.linalg.norm(B, axis=1, keepdims=True)

    B_u = _row_normalized(cfg.p_u, L)
    B_v = _row_normalized(cfg.p_v, L)
    beta_z = _unit_vector(rng, cfg.p_z)
    beta_u = _unit_vector(rng, cfg.p_u)
    beta_v = _unit_vector(rng, cfg.p_v)
    beta_tau = _unit_vector(rng, cfg.p_v)
    prop_coefs = _propensity_coefs(lay.p_o)

    sigma_vv = cfg.latent_scale_v**2 * B_v @ B_v.T + cfg.sigma_v2 * np.eye(cfg.p_v)
    sigma_uu = cfg.alpha_u**2 * B_u @ B_u.T + cfg.sigma_u2 * np.eye(cfg.p_u)
    sigma_vu = cfg.latent_scale_v * cfg.alpha_u * B_v @ B_u.T
    gain_vu = np.linalg.solve(sigma_uu, sigma_vu.T).T
    cond_cov = sigma_vv - gain_vu @ sigma_vu.T
    cond_chol = np.linalg.cholesky(cond_cov)
    sd_s = float(np.sqrt(beta_tau @ sigma_vv @ beta_tau))

    chol_z = np.linalg.cholesky(ar1_cov(cfg.p_z, cfg.rho_ar))

    def draw_units(n, source):
        H = rng.normal(size=(n, L))
        V = cfg.latent_scale_v * H @ B_v.T + np.sqrt(cfg.sigma_v2) * rng.normal(
            size=(n, cfg.p_v)
        )
        U = cfg.alpha_u * H @ B_u.T + np.sqrt(cfg.sigma_u2) * rng.normal(
            size=(n, cfg.p_u)
        )
        Z = rng.normal(size=(n, cfg.p_z)) @ chol_z.T
        if source == "os":
            X_obs = np.column_stack([Z, V])
            p1 = _sigmoid(X_obs @ prop_coefs)
            a = np.where(rng.random(n) < p1, 1, -1)
        else:
            X_obs = np.column_stack([U, Z])
            a = np.where(rng.random(n) < 0.5, 1, -1)
        s = (V @ beta_tau) / sd_s
        mean = (
            cfg.w_z * Z @ beta_z
            + cfg.w_u * U @ beta_u
            + cfg.w_v * V @ beta_v
            + 0.5 * a * _tau_form(s, cfg.cate_form, cfg.omega)
        )
        y = mean + cfg.noise_sd * rng.normal(size=n)
        return Dataset(X=X_obs, y=y, a=a, source=source, layout=lay)

    os_data = draw_units(cfg.n_o, "os")
    rct_data = draw_units(cfg.n_r, "rct")
    oracle = DgpOracle(
        regime="latent",
        cfg=cfg,
        seed=seed,
        params={
            "B_u": B_u,
            "B_v": B_v,
            "beta_z": beta_z,
            "beta_u": beta_u,
            "beta_v": beta_v,
            "beta_tau": beta_tau,
            "gain_vu": gain_vu,
            "cond_cov": cond_cov,
            "cond_chol": cond_chol,
            "sd_s": sd_s,
            "propensity_coefs": prop_coefs,
        },
    )
    return os_data, rct_data, oracle


def _read_numeric_csv(path: str) -> np.ndarray:
    if not _os.path.exists(path):
        raise FileNotFoundError(f"covariate file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise ValueError(f"covariate file is empty: {path}")
        try:
            rows.append([float(c) for c in first])
        except ValueError:
            pass  # header row
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError as exc:
                raise ValueError(
                    f"non-numeric cell at line {lineno} of {path}"
                ) from exc
    mat = np.asarray(rows, dtype=float)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError(f"covariate file must hold at least two numeric rows: {path}")
    return mat


def load_ihdp_semi_synthetic(cfg: IhdpConfig, seed: int):
    """Bootstrap a covariate CSV into paired OS/RCT samples with a linear
    structural model: base outcome over all covariates, a CATE linear in
    (Z, U), and an RCT-only shift along the first shared covariates.

    The truth is exact (no Monte-Carlo marginalization is needed).
    """
    mat = _read_numeric_csv(cfg.path)
    n_all, p_all = mat.shape
    z_idx = tuple(cfg.z_idx)
    u_idx = tuple(cfg.u_idx)
    taken = set(z_idx) | set(u_idx)
    if cfg.v_idx is None:
        v_idx = tuple(j for j in range(p_all) if j not in taken)
    else:
        v_idx = tuple(cfg.v_idx)
    all_idx = list(z_idx) + list(u_idx) + list(v_idx)
    if len(set(all_idx)) != len(all_idx):
        raise ValueError("column index lists must be disjoint")
    if any(j < 0 or j >= p_all for j in all_idx):
        raise ValueError(f"column index out of range for a {p_all}-column file")
    lay = CovariateLayout(p_u=len(u_idx), p_z=len(z_idx), p_v=len(v_idx))

    sd = mat.std(axis=0)
    scale = np.where(sd <= 1e-12, 1.0, sd)
    std_mat = (mat - mat.mean(axis=0)) / scale

    coef_rng = np.random.default_rng(cfg.coef_seed)
    beta_base = _unit_vector(coef_rng, lay.p, norm=2.0)
    theta = _unit_vector(coef_rng, lay.p_r, norm=1.0)
    k_eta = min(SHIFT_DIRECTION_WIDTH, lay.p_z)
    eta = np.ones(k_eta) / np.sqrt(k_eta)
    z_all = std_mat[:, z_idx]
    sd_eta = float(np.std(z_all[:, :k_eta] @ eta))
    if sd_eta <= 1e-12:
        sd_eta = 1.0
    prop_coefs = _propensity_coefs(lay.p_o)

    rng = np.random.default_rng(seed)

    def draw_units(n, source):
        rows = rng.integers(0, n_all, size=n)
        Z = std_mat[np.ix_(rows, z_idx)]
        U = std_mat[np.ix_(rows, u_idx)]
        V = std_mat[np.ix_(rows, v_idx)]
        full = np.column_stack([U, Z, V])
        if source == "os":
            X_obs = np.column_stack([Z, V])
            p1 = _sigmoid(X_obs @ prop_coefs)
            a = np.where(rng.random(n) < p1, 1, -1)
        else:
            X_obs = np.column_stack([U, Z])
            a = np.where(rng.random(n) < 0.5, 1, -1)
        tau_lin = np.column_stack([U, Z]) @ theta
        mean = full @ beta_base + 0.5 * a * tau_lin
        if source == "rct" and cfg.rct_shift_magnitude > 0:
            mean = mean + cfg.rct_shift_magnitude * (Z[:, :k_eta] @ eta) / sd_eta
        y = mean + cfg.noise_sd * rng.normal(size=n)
        return Dataset(X=X_obs, y=y, a=a, source=source, layout=lay)

    os_data = draw_units(cfg.n_o, "os")
    rct_data = draw_units(cfg.n_r, "rct")
    oracle = DgpOracle(
        regime="ihdp",
        cfg=cfg,
        seed=seed,
        params={
            "layout": lay,
            "beta_base": beta_base,
            "theta": theta,
            "eta": eta,
            "sd_eta": sd_eta,
            "propensity_coefs": prop_coefs,
        },
    )
    return os_data, rct_data, oracle


def export_dataset_csv(data: Dataset, path: str, start_id: int = 0):
    """Write a dataset as CSV: unit_id, source, a, y, then covariates named
    u0.., z0.., v0.. according to the source's column order."""
    lay = data.layout
    if data.source == "rct":
        names = [f"u{j}" for j in range(lay.p_u)] + [f"z{j}" for j in range(lay.p_z)]
    else:
        names = [f"z{j}" for j in range(lay.p_z)] + [f"v{j}" for j in range(lay.p_v)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "source", "a", "y", *names])
        for i in range(data.n):
            writer.writerow(
                [start_id + i, data.source, int(data.a[i]), repr(float(data.y[i]))]
                + [repr(float(v)) for v in data.X[i]]
            )


def with_overrides(cfg, **kwargs):
    """Dataclass-config copy with updated fields (validation re-runs)."""
    return replace(cfg, **kwargs)

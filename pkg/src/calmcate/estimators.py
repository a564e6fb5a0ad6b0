"""CATE estimation from a randomized trial augmented with an observational
sample that measures a different covariate set.

All pipeline methods share one backbone. Arm-specific outcome models supply
calibrated predictions mu_cal_a at trial covariates; the counterfactual-mean
augmentation m(x) = sum_a pi_{-a}(x) mu_cal_a(x) turns trial outcomes into
pseudo-outcomes psi_i = A_i (Y_i - m(X_i)) / pi_{A_i}, which stay unbiased
for the CATE no matter how wrong the augmentation is; a final LASSO of
(psi - tau_pre) on the raw trial covariates supplies a correction delta, and
the estimate is tau_pre + delta. Methods differ only in how mu_cal is built:
from the trial alone (racer), from observational heads on shared covariates
(sr_oscar), via imputation of the missing block (mr_oscar, calm_lin), or via
learned neural encoders with distribution alignment (calm_nn). naive skips
the augmentation, and the htce variants are simplified encoder baselines.

Every quantity entering a unit's pseudo-outcome is produced by models fitted
without that unit (cross-fitting over trial folds); each fit carries a
provenance record that makes this auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from calmcate.alignment import (
    anneal_lambda,
    cond_mean_loss,
    cond_mean_targets,
    contrastive_loss,
    default_epsilon,
    median_heuristic,
    mmd_loss,
    neighbor_sets,
)
from calmcate.data import (
    Dataset,
    FoldAssignment,
    PropensityModel,
    TREATMENT_VALUES,
    derive_seed,
    make_folds,
)
from calmcate.linmod import (
    LinearModel,
    Projection,
    build_rct_encoder_linear,
    fit_lasso,
    fit_lasso_at,
    fit_pca,
    fit_ridge_multi,
    identity_projection,
)
from calmcate.neural import (
    MlpSpec,
    TrainConfig,
    mlp_backward,
    mlp_forward,
    mlp_init,
    train_loop,
)

DEFAULT_FOLDS = 5
SMALL_RCT_FOLDS = 2
SMALL_RCT_MAX = 150
SMALL_RCT_RESTARTS = 3

CALIBRATION_METHODS = ("racer", "sr_oscar", "mr_oscar", "calm_lin")
ALL_METHODS = ("naive",) + CALIBRATION_METHODS + ("calm_nn", "htce_t", "htce_dr")

RAW_FEATURES = "raw_x_r"


def resolve_folds(n_r: int, n_folds: int | None, seed: int) -> FoldAssignment:
    """Fold assignment with the small-trial default of two folds."""
    if n_folds is None:
        n_folds = SMALL_RCT_FOLDS if n_r <= SMALL_RCT_MAX else DEFAULT_FOLDS
    return make_folds(n_r, n_folds, seed)


# --------------------------------------------------------------------------
# pseudo-outcomes and the counterfactual-mean augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoOutcomes:
    """Per-trial-unit pseudo-outcomes and the augmentation values used."""

    psi: np.ndarray
    m_values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.psi)):
            raise ValueError("pseudo-outcomes must be finite")


def pseudo_outcome_values(y, a, m_values, propensity: PropensityModel) -> np.ndarray:
    """psi_i = a_i (y_i - m_i) / pi_{a_i}."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a)
    m_values = np.broadcast_to(np.asarray(m_values, dtype=float), y.shape)
    probs = propensity.prob_of(a)
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise ValueError("positivity violation: propensities must lie in (0, 1)")
    return a * (y - m_values) / probs


def pseudo_outcomes(rct: Dataset, m, propensity: PropensityModel) -> PseudoOutcomes:
    """Pseudo-outcomes for a trial sample under augmentation ``m``.

    ``m`` may be a callable on the trial covariates, a per-unit vector, or a
    scalar (0 gives the unaugmented estimator).
    """
    if callable(m):
        m_values = np.asarray(m(rct.X), dtype=float).ravel()
    else:
        m_values = np.broadcast_to(np.asarray(m, dtype=float), (rct.n,)).copy()
    psi = pseudo_outcome_values(rct.y, rct.a, m_values, propensity)
    return PseudoOutcomes(psi=psi, m_values=m_values)


def cmo(mu_by_arm: dict, propensity: PropensityModel, n: int | None = None):
    """Counterfactual-mean augmentation sum_a pi_{-a} mu_a.

    This is the variance-minimizing choice of m; the opposite-arm weighting
    makes m(x) the mean outcome a unit would contribute regardless of the
    arm it lands in.
    """
    mu_pos = np.asarray(mu_by_arm[1], dtype=float)
    mu_neg = np.asarray(mu_by_arm[-1], dtype=float)
    if mu_pos.shape != mu_neg.shape:
        raise ValueError("arm predictions must have matching shapes")
    p1 = propensity.treat_prob(n if n is not None else len(np.atleast_1d(mu_pos)))
    return (1.0 - p1) * mu_pos + p1 * mu_neg


# --------------------------------------------------------------------------
# provenance and the fitted-estimate container
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossFitRecord:
    """Which trial rows trained the nuisances applied to each unit.

    ``fold_of[i]`` is the fold whose models produced unit i's augmentation
    and preliminary CATE; ``train_indices[k]`` lists the trial rows those
    fold-k models were fitted on. A correct cross-fit never contains a unit
    in its own fold's training set.
    """

    fold_of: np.ndarray
    train_indices: tuple

    @property
    def n_folds(self) -> int:
        return len(self.train_indices)

    def violations(self) -> int:
        count = 0
        train_sets = [set(np.asarray(t).tolist()) for t in self.train_indices]
        for i, k in enumerate(self.fold_of):
            if i in train_sets[int(k)]:
                count += 1
        return count


def _zero_linear(p: int) -> LinearModel:
    return LinearModel(intercept=0.0, coef=np.zeros(p), penalty=None, diagnostics={})


@dataclass
class FittedCate:
    """A fitted CATE map tau(x) = tau_pre(x) + delta(x).

    ``preliminary`` is the model-based CATE (zero for the unaugmented
    method); ``correction`` is the final linear adjustment fitted on the raw
    trial covariates (or, for the simplified encoder baselines, absorbed
    into ``preliminary`` with a zero correction).
    """

    method: str
    p_r: int
    preliminary: object
    correction: LinearModel
    provenance: CrossFitRecord
    diagnostics: dict = field(default_factory=dict)
    fold_models: tuple = ()
    cross_fit_predictions: np.ndarray | None = None

    def predict(self, X_r: np.ndarray) -> np.ndarray:
        X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
        if X_r.shape[1] != self.p_r:
            raise ValueError(
                f"expected {self.p_r} trial covariates, got {X_r.shape[1]}"
            )
        return self.preliminary(X_r) + self.correction.predict(X_r)


def predict_cate(model: FittedCate, X_r: np.ndarray) -> np.ndarray:
    return model.predict(X_r)


def _zero_preliminary(X):
    return np.zeros(len(X))


def fit_cate_correction(
    rct: Dataset,
    psi: np.ndarray,
    tau_tilde=None,
    tau_tilde_values: np.ndarray | None = None,
    folds: FoldAssignment | int | None = None,
    seed: int = 0,
    penalty: float | None = None,
    method: str = "correction",
    provenance: CrossFitRecord | None = None,
    diagnostics: dict | None = None,
    fold_models: tuple = (),
) -> FittedCate:
    """Final-stage regression: LASSO of (psi - tau_pre) on raw covariates.

    ``tau_tilde`` is the preliminary CATE map used at prediction time;
    ``tau_tilde_values`` overrides its values at the training units (the
    pipelines pass cross-fitted per-unit values here, which differ from the
    fold-averaged prediction map).
    """
    psi = np.asarray(psi, dtype=float).ravel()
    if len(psi) != rct.n:
        raise ValueError("pseudo-outcome length does not match the trial sample")
    if tau_tilde is None:
        tau_tilde = _zero_preliminary
    if tau_tilde_values is None:
        tau_tilde_values = np.asarray(tau_tilde(rct.X), dtype=float).ravel()
    target = psi - tau_tilde_values
    if penalty is not None:
        correction = fit_lasso_at(rct.X, target, penalty)
    else:
        cv = folds if folds is not None else DEFAULT_FOLDS
        correction = fit_lasso(rct.X, target, folds=cv, seed=derive_seed(seed, "stage4"))
    diag = dict(diagnostics or {})
    diag["correction_features"] = RAW_FEATURES
    diag["correction_penalty"] = correction.penalty
    if provenance is None:
        provenance = CrossFitRecord(
            fold_of=np.zeros(rct.n, dtype=int), train_indices=(np.empty(0, dtype=int),)
        )
    return FittedCate(
        method=method,
        p_r=rct.layout.p_r,
        preliminary=tau_tilde,
        correction=correction,
        provenance=provenance,
        diagnostics=diag,
        fold_models=fold_models,
        cross_fit_predictions=tau_tilde_values + correction.predict(rct.X),
    )


# --------------------------------------------------------------------------
# linear pipelines
# --------------------------------------------------------------------------


class ArmStageModel:
    """One fold's nuisance bundle: arm heads over a stated feature space
    plus optional arm discrepancy models over a second feature space.

    mu_cal_a(x) = head_a(head_map(x)) + disc_a(disc_map(x)) exactly.
    """

    def __init__(self, heads, head_map, head_space, disc=None, disc_map=None,
                 disc_space=None):
        self.heads = heads
        self.head_map = head_map
        self.head_space = head_space
        self.disc = disc
        self.disc_map = disc_map
        self.disc_space = disc_space

    def mu_base(self, X_r, arm):
        return self.heads[arm].predict(self.head_map(X_r))

    def discrepancy(self, X_r, arm):
        if self.disc is None:
            return np.zeros(len(X_r))
        return self.disc[arm].predict(self.disc_map(X_r))

    def mu_cal(self, X_r, arm):
        return self.mu_base(X_r, arm) + self.discrepancy(X_r, arm)

    def tau_pre(self, X_r):
        return self.mu_cal(X_r, 1) - self.mu_cal(X_r, -1)


def _fit_arm_lassos(X, y, a, seed, label, penalty=None, cv_folds=DEFAULT_FOLDS):
    models = {}
    for arm in TREATMENT_VALUES:
        mask = a == arm
        Xa, ya = X[mask], y[mask]
        if len(ya) < 2:
            raise ValueError(f"arm {arm} has fewer than two units")
        if penalty is not None:
            models[arm] = fit_lasso_at(Xa, ya, penalty)
        else:
            k = int(min(cv_folds, len(ya)))
            models[arm] = fit_lasso(
                Xa, ya, folds=k, seed=derive_seed(seed, label, int(arm))
            )
    return models


def _average_tau_pre(fold_models):
    def tau_tilde(X):
        total = np.zeros(len(X))
        for model in fold_models:
            total += model.tau_pre(X)
        return total / len(fold_models)

    return tau_tilde


def _finish_pipeline(
    method,
    rct,
    propensity,
    assignment,
    fold_models,
    seed,
    correction_penalty,
    diagnostics,
):
    """Stages 3 and 4: cross-fitted augmentation, pseudo-outcomes, and the
    final correction. ``fold_models[k]`` must have been fitted without the
    rows of fold k."""
    n = rct.n
    m_hat = np.empty(n)
    tau_vals = np.empty(n)
    for k in range(assignment.n_folds):
        idx = assignment.fold_indices(k)
        model = fold_models[k]
        mu = {arm: model.mu_cal(rct.X[idx], arm) for arm in TREATMENT_VALUES}
        m_hat[idx] = cmo(mu, propensity, n=len(idx))
        tau_vals[idx] = mu[1] - mu[-1]
    psi = pseudo_outcome_values(rct.y, rct.a, m_hat, propensity)
    provenance = CrossFitRecord(
        fold_of=assignment.fold_of.copy(),
        train_indices=tuple(
            assignment.train_indices(k) for k in range(assignment.n_folds)
        ),
    )
    diagnostics = dict(diagnostics)
    diagnostics["n_folds"] = assignment.n_folds
    return fit_cate_correction(
        rct,
        psi,
        tau_tilde=_average_tau_pre(fold_models),
        tau_tilde_values=tau_vals,
        seed=seed,
        penalty=correction_penalty,
        method=method,
        provenance=provenance,
        diagnostics=diagnostics,
        fold_models=tuple(fold_models),
    )


class BaseCateEstimator(BaseEstimator):
    """Shared fit/predict surface; subclasses implement ``_fit``."""

    method_name = ""

    def fit(self, os_data: Dataset, rct_data: Dataset, propensity=None):
        if os_data.source != "os" or rct_data.source != "rct":
            raise ValueError("expected (observational, trial) datasets in that order")
        if os_data.layout != rct_data.layout:
            raise ValueError("datasets must share a covariate layout")
        if propensity is None:
            propensity = PropensityModel(0.5)
        propensity.treat_prob(rct_data.n)
        self.fitted_ = self._fit(os_data, rct_data, propensity)
        return self

    def predict(self, X_r: np.ndarray) -> np.ndarray:
        if not hasattr(self, "fitted_"):
            raise RuntimeError("estimator is not fitted")
        return self.fitted_.predict(X_r)

    def _fit(self, os_data, rct_data, propensity):  # pragma: no cover
        raise NotImplementedError


class NaiveCate(BaseCateEstimator):
    """Trial-only pseudo-outcome regression with no augmentation (m = 0)."""

    method_name = "naive"

    def __init__(self, n_folds=None, seed=0, correction_penalty=None):
        self.n_folds = n_folds
        self.seed = seed
        self.correction_penalty = correction_penalty

    def _fit(self, os_data, rct_data, propensity):
        assignment = resolve_folds(rct_data.n, self.n_folds, self.seed)
        po = pseudo_outcomes(rct_data, 0.0, propensity)
        provenance = CrossFitRecord(
            fold_of=assignment.fold_of.copy(),
            train_indices=tuple(
                np.empty(0, dtype=int) for _ in range(assignment.n_folds)
            ),
        )
        return fit_cate_correction(
            rct_data,
            po.psi,
            seed=self.seed,
            penalty=self.correction_penalty,
            method=self.method_name,
            provenance=provenance,
            diagnostics={"n_folds": assignment.n_folds},
        )


class RacerCate(BaseCateEstimator):
    """Trial-only augmentation: cross-fitted per-arm LASSO heads on the
    trial covariates, no observational borrowing."""

    method_name = "racer"

    def __init__(self, n_folds=None, seed=0, head_penalty=None,
                 correction_penalty=None, cv_folds=DEFAULT_FOLDS):
        self.n_folds = n_folds
        self.seed = seed
        self.head_penalty = head_penalty
        self.correction_penalty = correction_penalty
        self.cv_folds = cv_folds

    def _fit(self, os_data, rct_data, propensity):
        assignment = resolve_folds(rct_data.n, self.n_folds, self.seed)
        identity = lambda X: X  # noqa: E731
        fold_models = []
        for k in range(assignment.n_folds):
            tr = assignment.train_indices(k)
            heads = _fit_arm_lassos(
                rct_data.X[tr],
                rct_data.y[tr],
                rct_data.a[tr],
                seed=self.seed,
                label=f"head{k}",
                penalty=self.head_penalty,
                cv_folds=self.cv_folds,
            )
            fold_models.append(
                ArmStageModel(heads, identity, RAW_FEATURES)
            )
        return _finish_pipeline(
            self.method_name,
            rct_data,
            propensity,
            assignment,
            fold_models,
            self.seed,
            self.correction_penalty,
            {"head_features": RAW_FEATURES},
        )


class _CalibratedLinearBase(BaseCateEstimator):
    """Observational heads (fold-independent) plus per-fold trial-fitted
    discrepancy LASSOs; subclasses define the two feature maps."""

    def _fit(self, os_data, rct_data, propensity):
        assignment = resolve_folds(rct_data.n, self.n_folds, self.seed)
        head_map, disc_map, head_space, disc_space, head_train = self._feature_maps(
            os_data, rct_data
        )
        heads = _fit_arm_lassos(
            head_train,
            os_data.y,
            os_data.a,
            seed=self.seed,
            label="os-head",
            penalty=self.head_penalty,
            cv_folds=self.cv_folds,
        )
        fold_models = []
        for k in range(assignment.n_folds):
            tr = assignment.train_indices(k)
            X_tr = rct_data.X[tr]
            base = {
                arm: heads[arm].predict(head_map(X_tr)) for arm in TREATMENT_VALUES
            }
            disc = {}
            for arm in TREATMENT_VALUES:
                mask = rct_data.a[tr] == arm
                if mask.sum() < 2:
                    raise ValueError(f"arm {arm} has fewer than two trial units")
                resid = rct_data.y[tr][mask] - base[arm][mask]
                feats = disc_map(X_tr[mask])
                if self.disc_penalty is not None:
                    disc[arm] = fit_lasso_at(feats, resid, self.disc_penalty)
                else:
                    kf = int(min(self.cv_folds, mask.sum()))
                    disc[arm] = fit_lasso(
                        feats,
                        resid,
                        folds=kf,
                        seed=derive_seed(self.seed, f"disc{k}", int(arm)),
                    )
            fold_models.append(
                ArmStageModel(heads, head_map, head_space, disc, disc_map, disc_space)
            )
        return _finish_pipeline(
            self.method_name,
            rct_data,
            propensity,
            assignment,
            fold_models,
            self.seed,
            self.correction_penalty,
            {"head_features": head_space, "disc_features": disc_space},
        )


class SrOscarCate(_CalibratedLinearBase):
    """Shared-covariates-only borrowing: observational heads and trial
    discrepancies both live on Z, forgoing imputation entirely."""

    method_name = "sr_oscar"

    def __init__(self, n_folds=None, seed=0, head_penalty=None, disc_penalty=None,
                 correction_penalty=None, cv_folds=DEFAULT_FOLDS):
        self.n_folds = n_folds
        self.seed = seed
        self.head_penalty = head_penalty
        self.disc_penalty = disc_penalty
        self.correction_penalty = correction_penalty
        self.cv_folds = cv_folds

    def _feature_maps(self, os_data, rct_data):
        lay = os_data.layout
        os_z = lay.z_slice("os")
        rct_z = lay.z_slice("rct")
        head_map = lambda X: X[:, rct_z]  # noqa: E731
        return head_map, head_map, "z", "z", os_data.X[:, os_z]


class MrOscarCate(_CalibratedLinearBase):
    """Imputation-based borrowing: a ridge map Z -> V fitted on the
    observational sample fills in the unmeasured block, heads are fitted on
    the full observational covariates, and trial discrepancies are fitted
    on the raw trial covariates (the imputed block is a linear function of
    Z, so it adds no information there)."""

    method_name = "mr_oscar"

    def __init__(self, n_folds=None, seed=0, imputer_alpha=1.0, head_penalty=None,
                 disc_penalty=None, correction_penalty=None, cv_folds=DEFAULT_FOLDS):
        self.n_folds = n_folds
        self.seed = seed
        self.imputer_alpha = imputer_alpha
        self.head_penalty = head_penalty
        self.disc_penalty = disc_penalty
        self.correction_penalty = correction_penalty
        self.cv_folds = cv_folds

    def _feature_maps(self, os_data, rct_data):
        lay = os_data.layout
        os_z = lay.z_slice("os")
        rct_z = lay.z_slice("rct")
        imputer = fit_ridge_multi(
            os_data.X[:, os_z], os_data.X[:, lay.v_slice()], self.imputer_alpha
        )

        def head_map(X):
            z = X[:, rct_z]
            return np.column_stack([z, imputer.predict(z)])

        disc_map = lambda X: X  # noqa: E731
        return head_map, disc_map, "z_plus_imputed_v", RAW_FEATURES, os_data.X


class CalmLinCate(_CalibratedLinearBase):
    """Linear embedding pipeline: an observational projection (PCA or
    pass-through), per-arm LASSO heads on the embedding, a trial-side
    encoder built by composing the projection with a ridge imputer, and
    trial discrepancies on the raw trial covariates.

    With the projection disabled this reduces exactly to the imputation
    pipeline, which is the linear-equivalence proposition the tests pin.
    """

    method_name = "calm_lin"

    def __init__(self, n_folds=None, seed=0, pca="off", d=None, imputer_alpha=1.0,
                 head_penalty=None, disc_penalty=None, correction_penalty=None,
                 cv_folds=DEFAULT_FOLDS):
        self.n_folds = n_folds
        self.seed = seed
        self.pca = pca
        self.d = d
        self.imputer_alpha = imputer_alpha
        self.head_penalty = head_penalty
        self.disc_penalty = disc_penalty
        self.correction_penalty = correction_penalty
        self.cv_folds = cv_folds

    def _feature_maps(self, os_data, rct_data):
        lay = os_data.layout
        if self.pca not in ("on", "off"):
            raise ValueError("pca must be 'on' or 'off'")
        if self.pca == "on":
            d = self.d
            if d is None or not 1 <= d <= lay.p_o:
                raise ValueError("pca='on' requires 1 <= d <= p_o")
            os_proj = fit_pca(os_data.X, d)
        else:
            os_proj = identity_projection(lay.p_o)
        imputer = fit_ridge_multi(
            os_data.X[:, lay.z_slice("os")],
            os_data.X[:, lay.v_slice()],
            self.imputer_alpha,
        )
        rct_proj = build_rct_encoder_linear(os_proj, imputer, lay)
        head_map = rct_proj.apply
        disc_map = lambda X: X  # noqa: E731
        return head_map, disc_map, "embedding", RAW_FEATURES, os_proj.apply(os_data.X)


# --------------------------------------------------------------------------
# neural pipelines
# --------------------------------------------------------------------------


def _n_arrays(spec: MlpSpec) -> int:
    return 2 * (len(spec.widths) - 1)


def _split_params(params, counts):
    out = []
    pos = 0
    for c in counts:
        out.append(params[pos : pos + c])
        pos += c
    if pos != len(params):
        raise ValueError("parameter list length does not match the specs")
    return out


def _weights_only_decay(specs_and_decays):
    """Per-array decay list: weight matrices decay, biases do not."""
    decays = []
    for spec, wd in specs_and_decays:
        for _ in range(len(spec.widths) - 1):
            decays.extend([wd, 0.0])
    return decays


def calm_stage1_loss(params, enc_spec, head_spec, X_o, y, a):
    """Per-arm normalized squared loss of arm heads over a shared encoder.

    params order: encoder, then one head per treatment arm in (-1, +1)
    order. Returns (loss, grads aligned with params).
    """
    counts = [_n_arrays(enc_spec), _n_arrays(head_spec), _n_arrays(head_spec)]
    enc_p, *head_p = _split_params(params, counts)
    heads = dict(zip(TREATMENT_VALUES, head_p))
    E, cache = mlp_forward(enc_spec, enc_p, X_o)
    dE = np.zeros_like(E)
    loss = 0.0
    head_grads = {}
    for arm in TREATMENT_VALUES:
        rows = np.flatnonzero(a == arm)
        if rows.size == 0:
            head_grads[arm] = [np.zeros_like(p) for p in heads[arm]]
            continue
        pred, hcache = mlp_forward(head_spec, heads[arm], E[rows])
        resid = pred[:, 0] - y[rows]
        loss += float(resid @ resid) / rows.size
        dout = (2.0 / rows.size) * resid[:, None]
        g_head, dE_rows = mlp_backward(head_spec, heads[arm], hcache, dout)
        head_grads[arm] = g_head
        dE[rows] += dE_rows
    g_enc, _ = mlp_backward(enc_spec, enc_p, cache, dE)
    return loss, g_enc + head_grads[-1] + head_grads[1]


def calm_stage2_loss(
    params,
    enc_spec,
    disc_spec,
    head_spec,
    frozen_heads,
    X_r,
    y,
    a,
    align_mode=None,
    os_embed=None,
    lam=0.0,
    sigma=1.0,
    neighbors=None,
    targets=None,
):
    """Calibration loss of a trial encoder with frozen observational heads,
    plus an optional alignment penalty on the embeddings.

    params order: trial encoder, then one discrepancy head per arm in
    (-1, +1) order. The frozen heads contribute input gradients only.
    """
    counts = [_n_arrays(enc_spec), _n_arrays(disc_spec), _n_arrays(disc_spec)]
    enc_p, *disc_p = _split_params(params, counts)
    discs = dict(zip(TREATMENT_VALUES, disc_p))
    E, cache = mlp_forward(enc_spec, enc_p, X_r)
    dE = np.zeros_like(E)
    loss = 0.0
    disc_grads = {}
    for arm in TREATMENT_VALUES:
        rows = np.flatnonzero(a == arm)
        if rows.size == 0:
            disc_grads[arm] = [np.zeros_like(p) for p in discs[arm]]
            continue
        base, bcache = mlp_forward(head_spec, frozen_heads[arm], E[rows])
        delta, dcache = mlp_forward(disc_spec, discs[arm], E[rows])
        resid = base[:, 0] + delta[:, 0] - y[rows]
        loss += float(resid @ resid) / rows.size
        dout = (2.0 / rows.size) * resid[:, None]
        _, dE_base = mlp_backward(head_spec, frozen_heads[arm], bcache, dout)
        g_disc, dE_disc = mlp_backward(disc_spec, discs[arm], dcache, dout)
        disc_grads[arm] = g_disc
        dE[rows] += dE_base + dE_disc
    if lam > 0.0 and align_mode is not None:
        if align_mode == "mmd":
            value, grad = mmd_loss(os_embed, E, sigma)
        elif align_mode == "contrastive":
            value, grad = contrastive_loss(os_embed, E, neighbors)
        elif align_mode == "cond_mean":
            value, grad = cond_mean_loss(E, targets)
        else:
            raise ValueError(f"unknown alignment mode {align_mode!r}")
        loss += lam * value
        dE += lam * grad
    g_enc, _ = mlp_backward(enc_spec, enc_p, cache, dE)
    return loss, g_enc + disc_grads[-1] + disc_grads[1]


def _copy_encoder_init(enc_o_spec, enc_o_params, enc_r_spec, layout, rng):
    """Trial encoder initialized from the observational one: shared-covariate
    input weights are copied into the Z columns, the U columns start at
    zero, and all deeper layers are copied verbatim."""
    params = mlp_init(enc_r_spec, rng)
    W0 = np.zeros_like(params[0])
    W0[layout.p_u : layout.p_u + layout.p_z, :] = enc_o_params[0][: layout.p_z, :]
    params[0] = W0
    params[1] = enc_o_params[1].copy()
    for i in range(2, len(params)):
        params[i] = enc_o_params[i].copy()
    return params


def _placement_basis(enc_o_params, p_z):
    """Scaled right-singular basis of the observational encoder's V-input
    rows.

    The unshared-covariate adjustment is expressed as coefficients on this
    basis. With a linear encoder, imputing the missing block through any
    conditional mean lands the adjustment exactly in the row space of the
    V rows; folding in the singular values makes a uniform decay on the
    coefficients shrink hardest along directions the observational fit
    barely uses.
    """
    w_v = enc_o_params[0][p_z:]
    _, svals, vt = np.linalg.svd(w_v, full_matrices=False)
    return svals[:, None] * vt


def _anchored_init(base, p_u, basis):
    """Trainable arrays for an encoder anchored at ``base``: zero weight
    deltas (layer 0 split into an unshared block, parameterized in
    ``basis``, and a shared row block so their decay rates can differ)
    plus absolute bias copies."""
    out = [np.zeros((p_u, basis.shape[0])), np.zeros_like(base[0][p_u:]),
           base[1].copy()]
    for i in range(2, len(base), 2):
        out.append(np.zeros_like(base[i]))
        out.append(base[i + 1].copy())
    return out


def _anchored_assemble(base, deltas, p_u, basis):
    full = [base[0] + np.vstack([deltas[0] @ basis, deltas[1]]), deltas[2]]
    j = 3
    for i in range(2, len(base), 2):
        full.append(base[i] + deltas[j])
        full.append(deltas[j + 1])
        j += 2
    return full


def _anchored_grads(grads, p_u, basis):
    out = [grads[0][:p_u] @ basis.T, grads[0][p_u:], grads[1]]
    for i in range(2, len(grads), 2):
        out.append(grads[i])
        out.append(grads[i + 1])
    return out


class _FoldCommittee:
    """Average of independently trained fold models. Small trials make the
    per-fold training noisy through the tiny validation split and the
    sampled alignment set; averaging a few restarts removes most of that
    variance without touching the training protocol."""

    def __init__(self, members):
        self.members = tuple(members)
        self.head_space = self.members[0].head_space
        self.disc_space = self.members[0].disc_space

    def mu_base(self, X_r, arm):
        return np.mean([m.mu_base(X_r, arm) for m in self.members], axis=0)

    def discrepancy(self, X_r, arm):
        return np.mean([m.discrepancy(X_r, arm) for m in self.members], axis=0)

    def mu_cal(self, X_r, arm):
        return self.mu_base(X_r, arm) + self.discrepancy(X_r, arm)

    def tau_pre(self, X_r):
        return self.mu_cal(X_r, 1) - self.mu_cal(X_r, -1)


class _NeuralFoldModel:
    """Per-fold calibrated model: trial encoder, frozen observational heads,
    and discrepancy heads, all in embedding space."""

    def __init__(self, enc_spec, enc_params, head_spec, frozen_heads, disc_spec, discs):
        self.enc_spec = enc_spec
        self.enc_params = enc_params
        self.head_spec = head_spec
        self.frozen_heads = frozen_heads
        self.disc_spec = disc_spec
        self.discs = discs
        self.head_space = "embedding"
        self.disc_space = "embedding"

    def embed(self, X_r):
        return mlp_forward(self.enc_spec, self.enc_params, X_r)[0]

    def mu_base(self, X_r, arm):
        E = self.embed(X_r)
        return mlp_forward(self.head_spec, self.frozen_heads[arm], E)[0][:, 0]

    def discrepancy(self, X_r, arm):
        E = self.embed(X_r)
        return mlp_forward(self.disc_spec, self.discs[arm], E)[0][:, 0]

    def mu_cal(self, X_r, arm):
        return self.mu_base(X_r, arm) + self.discrepancy(X_r, arm)

    def tau_pre(self, X_r):
        return self.mu_cal(X_r, 1) - self.mu_cal(X_r, -1)


def _standardize_shared(z_os, z_rct):
    pooled = np.vstack([z_os, z_rct])
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd <= 1e-12, 1.0, sd)
    return (z_os - mean) / sd, (z_rct - mean) / sd


class CalmNnCate(BaseCateEstimator):
    """Neural pipeline: an encoder with per-arm MLP heads is trained on the
    observational sample, then frozen; a trial-side encoder and discrepancy
    heads are trained per fold on trial data under a calibration loss with an
    annealed alignment penalty pulling the two embedding clouds together.
    Stages 3 and 4 are shared with the linear pipelines.

    By default both encoders and the discrepancy heads are linear and all
    nonlinearity lives in the frozen outcome heads. A linear observational
    encoder makes the trial-side placement problem linear too (conditional
    expectation commutes through it), which keeps the per-fold stage
    estimable from a few hundred trial rows without memorizing them; widen
    ``encoder_hidden``/``disc_hidden`` to relax this.
    """

    method_name = "calm_nn"

    def __init__(self, n_folds=None, seed=0, embed_dim=8, encoder_hidden=(),
                 head_hidden=(32,), disc_hidden=(), activation="tanh",
                 stage1_epochs=300, stage2_epochs=200, lr=1e-3, stage2_lr=1e-2,
                 stage1_weight_decay=1.0, encoder_weight_decay=0.01,
                 anchor_weight_decay=100.0, disc_weight_decay=3.0,
                 align_mode="mmd", lambda0=30.0, align_batch=1024,
                 epsilon=None, cond_alpha=1.0, patience=30, val_fraction=0.2,
                 init_from_os=True, stage2_restarts=None,
                 correction_penalty=None, cv_folds=DEFAULT_FOLDS):
        self.n_folds = n_folds
        self.seed = seed
        self.embed_dim = embed_dim
        self.encoder_hidden = encoder_hidden
        self.head_hidden = head_hidden
        self.disc_hidden = disc_hidden
        self.activation = activation
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.lr = lr
        self.stage2_lr = stage2_lr
        self.stage1_weight_decay = stage1_weight_decay
        self.encoder_weight_decay = encoder_weight_decay
        self.anchor_weight_decay = anchor_weight_decay
        self.disc_weight_decay = disc_weight_decay
        self.align_mode = align_mode
        self.lambda0 = lambda0
        self.align_batch = align_batch
        self.epsilon = epsilon
        self.cond_alpha = cond_alpha
        self.patience = patience
        self.val_fraction = val_fraction
        self.init_from_os = init_from_os
        self.stage2_restarts = stage2_restarts
        self.correction_penalty = correction_penalty
        self.cv_folds = cv_folds

    def _train_stage1(self, os_data):
        lay = os_data.layout
        enc_spec = MlpSpec(lay.p_o, self.embed_dim, tuple(self.encoder_hidden),
                           self.activation)
        head_spec = MlpSpec(self.embed_dim, 1, tuple(self.head_hidden),
                            self.activation)
        rng = np.random.default_rng(derive_seed(self.seed, "stage1-init"))
        params = (mlp_init(enc_spec, rng) + mlp_init(head_spec, rng)
                  + mlp_init(head_spec, rng))
        split_rng = np.random.default_rng(derive_seed(self.seed, "stage1-split"))
        perm = split_rng.permutation(os_data.n)
        n_val = max(1, int(round(self.val_fraction * os_data.n)))
        val_rows, train_rows = perm[:n_val], perm[n_val:]
        X, y, a = os_data.X, os_data.y, os_data.a

        def batch_loss(ps, idx, epoch):
            rows = train_rows[idx]
            return calm_stage1_loss(ps, enc_spec, head_spec, X[rows], y[rows], a[rows])

        def val_loss(ps):
            return calm_stage1_loss(ps, enc_spec, head_spec, X[val_rows],
                                    y[val_rows], a[val_rows])[0]

        decay = _weights_only_decay([
            (enc_spec, self.stage1_weight_decay),
            (head_spec, self.stage1_weight_decay),
            (head_spec, self.stage1_weight_decay),
        ])
        cfg = TrainConfig(epochs=self.stage1_epochs, lr=self.lr, weight_decay=decay,
                          patience=self.patience,
                          seed=derive_seed(self.seed, "stage1-loop"))
        result = train_loop(params, batch_loss, len(train_rows), val_loss, cfg)
        counts = [_n_arrays(enc_spec), _n_arrays(head_spec), _n_arrays(head_spec)]
        enc_p, head_m, head_p = _split_params(result.params, counts)
        # The encoder/head factorization leaves each embedding coordinate's
        # scale and offset arbitrary. Standardize them over the OS sample and
        # absorb the inverse affine map into the heads' first layer (exact),
        # so the trial encoder always regresses onto unit-scale targets.
        E = mlp_forward(enc_spec, enc_p, X)[0]
        m = E.mean(axis=0)
        s = np.where(E.std(axis=0) < 1e-8, 1.0, E.std(axis=0))
        for hp in (head_m, head_p):
            hp[1] = hp[1] + m @ hp[0]
            hp[0] = hp[0] * s[:, None]
        enc_p[-2] = enc_p[-2] / s
        enc_p[-1] = (enc_p[-1] - m) / s
        frozen_heads = {-1: head_m, 1: head_p}
        return enc_spec, enc_p, head_spec, frozen_heads, result

    def _stage2_seed(self, label, k, r):
        # Restart 0 keeps the original per-fold stream; later restarts fork.
        if r == 0:
            return derive_seed(self.seed, label, k)
        return derive_seed(self.seed, label, k, r)

    def _train_stage2_fold(self, k, train_idx, os_data, rct_data, enc_o_spec,
                           enc_o_params, head_spec, frozen_heads, os_embed,
                           n_restarts):
        members, results = [], []
        for r in range(n_restarts):
            model, res = self._train_stage2_once(
                k, r, train_idx, os_data, rct_data, enc_o_spec, enc_o_params,
                head_spec, frozen_heads, os_embed,
            )
            members.append(model)
            results.append(res)
        if n_restarts == 1:
            return members[0], results
        return _FoldCommittee(members), results

    def _train_stage2_once(self, k, r, train_idx, os_data, rct_data, enc_o_spec,
                           enc_o_params, head_spec, frozen_heads, os_embed):
        lay = rct_data.layout
        enc_spec = MlpSpec(lay.p_r, self.embed_dim, tuple(self.encoder_hidden),
                           self.activation)
        disc_spec = MlpSpec(self.embed_dim, 1, tuple(self.disc_hidden),
                            self.activation)
        rng = np.random.default_rng(self._stage2_seed("stage2-init", k, r))
        if self.init_from_os:
            base_enc = _copy_encoder_init(enc_o_spec, enc_o_params, enc_spec,
                                          lay, rng)
            basis = _placement_basis(enc_o_params, lay.p_z)
            enc_train = _anchored_init(base_enc, lay.p_u, basis)
            enc_decay = [self.encoder_weight_decay, self.anchor_weight_decay, 0.0]
            enc_decay += [self.anchor_weight_decay, 0.0] * ((len(base_enc) - 2) // 2)

            def enc_full(ps):
                return _anchored_assemble(base_enc, ps, lay.p_u, basis)

            def enc_grads(gs):
                return _anchored_grads(gs, lay.p_u, basis)
        else:
            enc_train = mlp_init(enc_spec, rng)
            enc_decay = _weights_only_decay([(enc_spec, self.encoder_weight_decay)])

            def enc_full(ps):
                return ps

            def enc_grads(gs):
                return gs
        params = (enc_train + mlp_init(disc_spec, rng, final_zero=True)
                  + mlp_init(disc_spec, rng, final_zero=True))

        split_rng = np.random.default_rng(self._stage2_seed("stage2-split", k, r))
        X, y, a = rct_data.X, rct_data.y, rct_data.a
        # Arm-stratified validation split: the early-stopping criterion sums
        # per-arm errors, so an arm-imbalanced split makes it erratic.
        val_parts, fit_parts = [], []
        for arm in TREATMENT_VALUES:
            rows = train_idx[a[train_idx] == arm]
            perm = split_rng.permutation(len(rows))
            n_val = int(round(self.val_fraction * len(rows)))
            if len(rows) >= 2:
                n_val = min(max(n_val, 1), len(rows) - 1)
            else:
                n_val = 0
            val_parts.append(rows[perm[:n_val]])
            fit_parts.append(rows[perm[n_val:]])
        val_rows = np.concatenate(val_parts)
        fit_rows = np.concatenate(fit_parts)
        if len(val_rows) == 0 or len(fit_rows) == 0:
            perm = split_rng.permutation(len(train_idx))
            n_val = max(1, int(round(self.val_fraction * len(train_idx))))
            val_rows = train_idx[perm[:n_val]]
            fit_rows = train_idx[perm[n_val:]]

        align_mode = self.align_mode if self.lambda0 > 0 else None
        neighbors = targets = None
        os_subsample = None
        if align_mode in ("contrastive", "cond_mean"):
            z_os = os_data.X[:, lay.z_slice("os")]
            z_rct = X[fit_rows][:, lay.z_slice("rct")]
            z_os_std, z_rct_std = _standardize_shared(z_os, z_rct)
            if align_mode == "contrastive":
                eps = self.epsilon
                if eps is None:
                    eps = default_epsilon(z_os_std, z_rct_std,
                                          seed=self._stage2_seed("eps", k, r))
                neighbors = neighbor_sets(z_os_std, z_rct_std, eps)
            else:
                targets = cond_mean_targets(z_os_std, os_embed, z_rct_std,
                                            self.cond_alpha)
        align_rng = np.random.default_rng(self._stage2_seed("align", k, r))
        w_os_fixed = sigma_fixed = None
        if align_mode == "mmd":
            # One fixed observational sample and bandwidth per fold: the OS
            # side of the penalty is frozen, so resampling it per step only
            # adds gradient noise.
            take = min(self.align_batch, len(os_embed))
            os_rows = align_rng.choice(len(os_embed), size=take, replace=False)
            w_os_fixed = os_embed[os_rows]
            sigma_fixed = median_heuristic(w_os_fixed)
        enc_count = len(enc_train)
        n_enc = _n_arrays(enc_spec)

        def composite(ps, X_s, y_s, a_s, align=None, lam=0.0, **kwargs):
            full = enc_full(ps[:enc_count]) + list(ps[enc_count:])
            loss, grads = calm_stage2_loss(full, enc_spec, disc_spec, head_spec,
                                           frozen_heads, X_s, y_s, a_s,
                                           align_mode=align, lam=lam, **kwargs)
            return loss, enc_grads(grads[:n_enc]) + grads[n_enc:]

        def batch_loss(ps, idx, epoch):
            rows = fit_rows[idx]
            lam = anneal_lambda(epoch, self.stage2_epochs, self.lambda0)
            kwargs = {}
            if align_mode == "mmd":
                kwargs = {"os_embed": w_os_fixed, "sigma": sigma_fixed}
            elif align_mode == "contrastive":
                kwargs = {"os_embed": os_embed,
                          "neighbors": [neighbors[i] for i in idx]}
            elif align_mode == "cond_mean":
                kwargs = {"targets": targets[idx]}
            return composite(ps, X[rows], y[rows], a[rows], align=align_mode,
                             lam=lam, **kwargs)

        def val_loss(ps):
            return composite(ps, X[val_rows], y[val_rows], a[val_rows])[0]

        decay = enc_decay + _weights_only_decay([
            (disc_spec, self.disc_weight_decay),
            (disc_spec, self.disc_weight_decay),
        ])
        lr2 = self.lr if self.stage2_lr is None else self.stage2_lr
        cfg = TrainConfig(epochs=self.stage2_epochs, lr=lr2, weight_decay=decay,
                          patience=self.patience,
                          seed=self._stage2_seed("stage2-loop", k, r))
        result = train_loop(params, batch_loss, len(fit_rows), val_loss, cfg)
        counts = [enc_count, _n_arrays(disc_spec), _n_arrays(disc_spec)]
        enc_p, disc_m, disc_p = _split_params(result.params, counts)
        model = _NeuralFoldModel(enc_spec, enc_full(enc_p), head_spec, frozen_heads,
                                 disc_spec, {-1: disc_m, 1: disc_p})
        return model, result

    def _fit(self, os_data, rct_data, propensity):
        assignment = resolve_folds(rct_data.n, self.n_folds, self.seed)
        enc_o_spec, enc_o_p, head_spec, frozen_heads, res1 = self._train_stage1(os_data)
        self.stage1_heads_ = frozen_heads
        self._stage1_snapshot = {
            arm: [p.copy() for p in ps] for arm, ps in frozen_heads.items()
        }
        os_embed = mlp_forward(enc_o_spec, enc_o_p, os_data.X)[0]
        n_restarts = self.stage2_restarts
        if n_restarts is None:
            n_restarts = (SMALL_RCT_RESTARTS if rct_data.n <= SMALL_RCT_MAX
                          else 1)
        fold_models = []
        stage2_diag = []
        for k in range(assignment.n_folds):
            model, results = self._train_stage2_fold(
                k, assignment.train_indices(k), os_data, rct_data, enc_o_spec,
                enc_o_p, head_spec, frozen_heads, os_embed, n_restarts,
            )
            fold_models.append(model)
            stage2_diag.append({
                "epochs": [res.epochs_run for res in results],
                "best_val": [res.best_val for res in results],
            })
        diagnostics = {
            "head_features": "embedding",
            "disc_features": "embedding",
            "align_mode": self.align_mode,
            "lambda0": self.lambda0,
            "stage1_epochs_run": res1.epochs_run,
            "stage1_best_val": res1.best_val,
            "stage2": stage2_diag,
        }
        return _finish_pipeline(
            self.method_name, rct_data, propensity, assignment, fold_models,
            self.seed, self.correction_penalty, diagnostics,
        )


# --------------------------------------------------------------------------
# simplified shared/private-encoder baselines
# --------------------------------------------------------------------------


def htce_loss(params, shared_spec, priv_r_spec, priv_o_spec, head_r_spec,
              head_o_spec, z_r, u_r, y_r, a_r, z_o, v_o, y_o, a_o):
    """Joint per-source, per-arm normalized squared loss of the shared and
    private encoders with four outcome heads.

    params order: shared encoder, private trial encoder (if any), private
    observational encoder (if any), trial heads (-1, +1), observational
    heads (-1, +1).
    """
    counts = [_n_arrays(shared_spec)]
    counts.append(_n_arrays(priv_r_spec) if priv_r_spec is not None else 0)
    counts.append(_n_arrays(priv_o_spec) if priv_o_spec is not None else 0)
    counts.extend([_n_arrays(head_r_spec)] * 2 + [_n_arrays(head_o_spec)] * 2)
    shared_p, priv_r_p, priv_o_p, hr_m, hr_p, ho_m, ho_p = _split_params(params, counts)
    n_r, n_o = len(z_r), len(z_o)
    z_all = np.vstack([z_r, z_o])
    S, s_cache = mlp_forward(shared_spec, shared_p, z_all)
    dS = np.zeros_like(S)
    rep_r = S[:n_r]
    rep_o = S[n_r:]
    if priv_r_spec is not None:
        P_r, pr_cache = mlp_forward(priv_r_spec, priv_r_p, u_r)
        rep_r = np.column_stack([rep_r, P_r])
        dP_r = np.zeros_like(P_r)
    if priv_o_spec is not None:
        P_o, po_cache = mlp_forward(priv_o_spec, priv_o_p, v_o)
        rep_o = np.column_stack([rep_o, P_o])
        dP_o = np.zeros_like(P_o)
    d_shared = shared_spec.widths[-1]
    loss = 0.0
    head_grads = {}
    d_rep_r = np.zeros_like(rep_r)
    d_rep_o = np.zeros_like(rep_o)
    for tag, spec, heads, rep, d_rep, y, a in (
        ("r", head_r_spec, {-1: hr_m, 1: hr_p}, rep_r, d_rep_r, y_r, a_r),
        ("o", head_o_spec, {-1: ho_m, 1: ho_p}, rep_o, d_rep_o, y_o, a_o),
    ):
        for arm in TREATMENT_VALUES:
            rows = np.flatnonzero(a == arm)
            if rows.size == 0:
                head_grads[(tag, arm)] = [np.zeros_like(p) for p in heads[arm]]
                continue
            pred, hcache = mlp_forward(spec, heads[arm], rep[rows])
            resid = pred[:, 0] - y[rows]
            loss += float(resid @ resid) / rows.size
            dout = (2.0 / rows.size) * resid[:, None]
            g_head, d_rows = mlp_backward(spec, heads[arm], hcache, dout)
            head_grads[(tag, arm)] = g_head
            d_rep[rows] += d_rows
    dS[:n_r] += d_rep_r[:, :d_shared]
    dS[n_r:] += d_rep_o[:, :d_shared]
    grads = []
    g_shared, _ = mlp_backward(shared_spec, shared_p, s_cache, dS)
    grads.extend(g_shared)
    if priv_r_spec is not None:
        dP_r += d_rep_r[:, d_shared:]
        g_priv_r, _ = mlp_backward(priv_r_spec, priv_r_p, pr_cache, dP_r)
        grads.extend(g_priv_r)
    if priv_o_spec is not None:
        dP_o += d_rep_o[:, d_shared:]
        g_priv_o, _ = mlp_backward(priv_o_spec, priv_o_p, po_cache, dP_o)
        grads.extend(g_priv_o)
    for key in (("r", -1), ("r", 1), ("o", -1), ("o", 1)):
        grads.extend(head_grads[key])
    return loss, grads


class _HtceFoldModel:
    """Per-fold shared/private encoders with trial outcome heads."""

    def __init__(self, layout, shared_spec, shared_p, priv_r_spec, priv_r_p,
                 head_r_spec, heads_r):
        self.layout = layout
        self.shared_spec = shared_spec
        self.shared_p = shared_p
        self.priv_r_spec = priv_r_spec
        self.priv_r_p = priv_r_p
        self.head_r_spec = head_r_spec
        self.heads_r = heads_r

    def representation(self, X_r):
        lay = self.layout
        S = mlp_forward(self.shared_spec, self.shared_p,
                        X_r[:, lay.z_slice("rct")])[0]
        if self.priv_r_spec is None:
            return S
        P = mlp_forward(self.priv_r_spec, self.priv_r_p, X_r[:, lay.u_slice()])[0]
        return np.column_stack([S, P])

    def mu_arm(self, X_r, arm):
        rep = self.representation(X_r)
        return mlp_forward(self.head_r_spec, self.heads_r[arm], rep)[0][:, 0]

    def tau(self, X_r):
        return self.mu_arm(X_r, 1) - self.mu_arm(X_r, -1)


class _HtceBase(BaseCateEstimator):
    """Simplified encoder baseline trained jointly on both sources, with
    trial predictions cross-fitted over trial folds."""

    def __init__(self, n_folds=None, seed=0, shared_dim=8, private_dim=4,
                 encoder_hidden=(64,), head_hidden=(32,), activation="tanh",
                 epochs=100, lr=1e-3, weight_decay=1e-4, patience=15,
                 val_fraction=0.15, cv_folds=DEFAULT_FOLDS,
                 use_cmo_augmentation=True):
        self.n_folds = n_folds
        self.seed = seed
        self.shared_dim = shared_dim
        self.private_dim = private_dim
        self.encoder_hidden = encoder_hidden
        self.head_hidden = head_hidden
        self.activation = activation
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.patience = patience
        self.val_fraction = val_fraction
        self.cv_folds = cv_folds
        self.use_cmo_augmentation = use_cmo_augmentation

    def _specs(self, layout):
        hidden = tuple(self.encoder_hidden)
        heads = tuple(self.head_hidden)
        shared_spec = MlpSpec(layout.p_z, self.shared_dim, hidden, self.activation)
        priv_r_spec = (MlpSpec(layout.p_u, self.private_dim, hidden, self.activation)
                       if layout.p_u > 0 else None)
        priv_o_spec = (MlpSpec(layout.p_v, self.private_dim, hidden, self.activation)
                       if layout.p_v > 0 else None)
        d_r = self.shared_dim + (self.private_dim if priv_r_spec else 0)
        d_o = self.shared_dim + (self.private_dim if priv_o_spec else 0)
        head_r_spec = MlpSpec(d_r, 1, heads, self.activation)
        head_o_spec = MlpSpec(d_o, 1, heads, self.activation)
        return shared_spec, priv_r_spec, priv_o_spec, head_r_spec, head_o_spec

    def _train_fold(self, k, train_idx, os_data, rct_data):
        lay = rct_data.layout
        specs = self._specs(lay)
        shared_spec, priv_r_spec, priv_o_spec, head_r_spec, head_o_spec = specs
        rng = np.random.default_rng(derive_seed(self.seed, "htce-init", k))
        params = mlp_init(shared_spec, rng)
        decay_groups = [(shared_spec, self.weight_decay)]
        for spec in (priv_r_spec, priv_o_spec):
            if spec is not None:
                params += mlp_init(spec, rng)
                decay_groups.append((spec, self.weight_decay))
        params += mlp_init(head_r_spec, rng) + mlp_init(head_r_spec, rng)
        params += mlp_init(head_o_spec, rng) + mlp_init(head_o_spec, rng)
        decay_groups += [(head_r_spec, self.weight_decay)] * 2
        decay_groups += [(head_o_spec, self.weight_decay)] * 2

        split_rng = np.random.default_rng(derive_seed(self.seed, "htce-split", k))
        os_perm = split_rng.permutation(os_data.n)
        n_os_val = max(1, int(round(self.val_fraction * os_data.n)))
        os_val, os_train = os_perm[:n_os_val], os_perm[n_os_val:]
        rct_perm = split_rng.permutation(len(train_idx))
        n_r_val = max(1, int(round(self.val_fraction * len(train_idx))))
        rct_val = train_idx[rct_perm[:n_r_val]]
        rct_train = train_idx[rct_perm[n_r_val:]]

        z_r_all = rct_data.X[:, lay.z_slice("rct")]
        u_all = rct_data.X[:, lay.u_slice()]
        z_o_all = os_data.X[:, lay.z_slice("os")]
        v_all = os_data.X[:, lay.v_slice()]
        n_rt = len(rct_train)

        def subset_loss(ps, rct_rows, os_rows):
            return htce_loss(
                ps, shared_spec, priv_r_spec, priv_o_spec, head_r_spec, head_o_spec,
                z_r_all[rct_rows], u_all[rct_rows], rct_data.y[rct_rows],
                rct_data.a[rct_rows], z_o_all[os_rows], v_all[os_rows],
                os_data.y[os_rows], os_data.a[os_rows],
            )

        def batch_loss(ps, idx, epoch):
            rct_rows = rct_train[idx[idx < n_rt]]
            os_rows = os_train[idx[idx >= n_rt] - n_rt]
            return subset_loss(ps, rct_rows, os_rows)

        def val_loss(ps):
            return subset_loss(ps, rct_val, os_val)[0]

        cfg = TrainConfig(epochs=self.epochs, lr=self.lr,
                          weight_decay=_weights_only_decay(decay_groups),
                          patience=self.patience,
                          seed=derive_seed(self.seed, "htce-loop", k))
        result = train_loop(params, batch_loss, n_rt + len(os_train), val_loss, cfg)
        counts = [_n_arrays(shared_spec),
                  _n_arrays(priv_r_spec) if priv_r_spec else 0,
                  _n_arrays(priv_o_spec) if priv_o_spec else 0,
                  _n_arrays(head_r_spec), _n_arrays(head_r_spec),
                  _n_arrays(head_o_spec), _n_arrays(head_o_spec)]
        shared_p, priv_r_p, priv_o_p, hr_m, hr_p, _, _ = _split_params(
            result.params, counts
        )
        model = _HtceFoldModel(lay, shared_spec, shared_p, priv_r_spec, priv_r_p,
                               head_r_spec, {-1: hr_m, 1: hr_p})
        return model, result

    def _fit_folds(self, os_data, rct_data):
        assignment = resolve_folds(rct_data.n, self.n_folds, self.seed)
        fold_models = []
        diag = []
        for k in range(assignment.n_folds):
            model, res = self._train_fold(k, assignment.train_indices(k),
                                          os_data, rct_data)
            fold_models.append(model)
            diag.append({"epochs": res.epochs_run, "best_val": res.best_val})
        provenance = CrossFitRecord(
            fold_of=assignment.fold_of.copy(),
            train_indices=tuple(
                assignment.train_indices(k) for k in range(assignment.n_folds)
            ),
        )
        return assignment, fold_models, provenance, diag


class HtceTCate(_HtceBase):
    """T-variant: the CATE is the difference of the trial heads."""

    method_name = "htce_t"

    def _fit(self, os_data, rct_data, propensity):
        assignment, fold_models, provenance, diag = self._fit_folds(os_data, rct_data)

        def tau_tilde(X):
            total = np.zeros(len(X))
            for model in fold_models:
                total += model.tau(X)
            return total / len(fold_models)

        cf = np.empty(rct_data.n)
        for k in range(assignment.n_folds):
            idx = assignment.fold_indices(k)
            cf[idx] = fold_models[k].tau(rct_data.X[idx])
        return FittedCate(
            method=self.method_name,
            p_r=rct_data.layout.p_r,
            preliminary=tau_tilde,
            correction=_zero_linear(rct_data.layout.p_r),
            provenance=provenance,
            diagnostics={"simplified": True, "correction_features": "none",
                         "n_folds": assignment.n_folds, "folds": diag},
            fold_models=tuple(fold_models),
            cross_fit_predictions=cf,
        )


class HtceDrCate(_HtceBase):
    """DR-variant: pseudo-outcomes from the trial heads' counterfactual-mean
    augmentation, regressed on the learned trial representation (per fold,
    averaged at prediction)."""

    method_name = "htce_dr"

    def _fit(self, os_data, rct_data, propensity):
        assignment, fold_models, provenance, diag = self._fit_folds(os_data, rct_data)
        n = rct_data.n
        m_hat = np.zeros(n)
        if self.use_cmo_augmentation:
            for k in range(assignment.n_folds):
                idx = assignment.fold_indices(k)
                mu = {arm: fold_models[k].mu_arm(rct_data.X[idx], arm)
                      for arm in TREATMENT_VALUES}
                m_hat[idx] = cmo(mu, propensity, n=len(idx))
        psi = pseudo_outcome_values(rct_data.y, rct_data.a, m_hat, propensity)
        regressions = []
        for k in range(assignment.n_folds):
            tr = assignment.train_indices(k)
            feats = fold_models[k].representation(rct_data.X[tr])
            kf = int(min(self.cv_folds, len(tr)))
            regressions.append(
                fit_lasso(feats, psi[tr], folds=kf,
                          seed=derive_seed(self.seed, "dr-reg", k))
            )

        def tau_tilde(X):
            total = np.zeros(len(X))
            for model, reg in zip(fold_models, regressions):
                total += reg.predict(model.representation(X))
            return total / len(fold_models)

        cf = np.empty(n)
        for k in range(assignment.n_folds):
            idx = assignment.fold_indices(k)
            cf[idx] = regressions[k].predict(
                fold_models[k].representation(rct_data.X[idx])
            )
        return FittedCate(
            method=self.method_name,
            p_r=rct_data.layout.p_r,
            preliminary=tau_tilde,
            correction=_zero_linear(rct_data.layout.p_r),
            provenance=provenance,
            diagnostics={"simplified": True,
                         "correction_features": "representation",
                         "use_cmo_augmentation": self.use_cmo_augmentation,
                         "n_folds": assignment.n_folds, "folds": diag,
                         "psi": psi},
            fold_models=tuple(fold_models),
            cross_fit_predictions=cf,
        )


# --------------------------------------------------------------------------
# dispatchers and registry
# --------------------------------------------------------------------------

METHOD_REGISTRY = {
    "naive": NaiveCate,
    "racer": RacerCate,
    "sr_oscar": SrOscarCate,
    "mr_oscar": MrOscarCate,
    "calm_lin": CalmLinCate,
    "calm_nn": CalmNnCate,
    "htce_t": HtceTCate,
    "htce_dr": HtceDrCate,
}


def make_estimator(name: str, **params) -> BaseCateEstimator:
    if name not in METHOD_REGISTRY:
        known = ", ".join(sorted(METHOD_REGISTRY))
        raise ValueError(f"unknown method {name!r}; known methods: {known}")
    return METHOD_REGISTRY[name](**params)


def fit_baseline(method, os_data, rct_data, propensity=None, **params) -> FittedCate:
    """Fit one of the non-neural methods by name."""
    if method not in ("naive", "racer", "sr_oscar", "mr_oscar"):
        raise ValueError(f"not a baseline method: {method!r}")
    est = make_estimator(method, **params)
    return est.fit(os_data, rct_data, propensity).fitted_


def fit_calm_lin(os_data, rct_data, propensity=None, **params) -> FittedCate:
    return CalmLinCate(**params).fit(os_data, rct_data, propensity).fitted_


def fit_calm_nn(os_data, rct_data, propensity=None, **params) -> FittedCate:
    return CalmNnCate(**params).fit(os_data, rct_data, propensity).fitted_


def fit_htce(variant, os_data, rct_data, propensity=None, **params) -> FittedCate:
    cls = {"t": HtceTCate, "dr": HtceDrCate}.get(variant)
    if cls is None:
        raise ValueError("variant must be 't' or 'dr'")
    return cls(**params).fit(os_data, rct_data, propensity).fitted_

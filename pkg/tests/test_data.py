import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calmcate.data import (
    ColumnScaler,
    CovariateLayout,
    Dataset,
    PropensityModel,
    make_folds,
    shared_block,
)


def _dataset(n=6, layout=None, source="rct", seed=0):
    layout = layout or CovariateLayout(p_u=2, p_z=3, p_v=4)
    rng = np.random.default_rng(seed)
    p = layout.n_cols(source)
    return Dataset(
        X=rng.normal(size=(n, p)),
        y=rng.normal(size=n),
        a=rng.choice([-1, 1], size=n),
        source=source,
        layout=layout,
    )


class TestLayout:
    def test_derived_dims(self):
        lay = CovariateLayout(p_u=2, p_z=3, p_v=4)
        assert (lay.p_r, lay.p_o, lay.p) == (5, 7, 9)

    def test_zero_width_private_blocks_allowed(self):
        lay = CovariateLayout(p_u=0, p_z=3, p_v=0)
        assert lay.p_r == lay.p_o == lay.p == 3

    def test_rejects_empty_shared_block(self):
        with pytest.raises(ValueError):
            CovariateLayout(p_u=2, p_z=0, p_v=4)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            CovariateLayout(p_u=-1, p_z=3, p_v=4)

    def test_z_slices(self):
        lay = CovariateLayout(p_u=2, p_z=3, p_v=4)
        assert lay.z_slice("rct") == slice(2, 5)
        assert lay.z_slice("os") == slice(0, 3)


class TestDataset:
    def test_column_count_checked_per_source(self):
        lay = CovariateLayout(p_u=2, p_z=3, p_v=4)
        with pytest.raises(ValueError, match="columns"):
            Dataset(
                X=np.zeros((5, lay.p_o)),
                y=np.zeros(5),
                a=np.ones(5),
                source="rct",
                layout=lay,
            )

    def test_treatment_coding_enforced(self):
        lay = CovariateLayout(p_u=1, p_z=1, p_v=1)
        with pytest.raises(ValueError, match="treatments"):
            Dataset(
                X=np.zeros((3, 2)),
                y=np.zeros(3),
                a=np.array([0, 1, 1]),
                source="rct",
                layout=lay,
            )

    def test_nonfinite_rejected(self):
        lay = CovariateLayout(p_u=1, p_z=1, p_v=1)
        X = np.zeros((3, 2))
        X[1, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            Dataset(X=X, y=np.zeros(3), a=np.ones(3), source="rct", layout=lay)

    def test_row_mismatch_rejected(self):
        lay = CovariateLayout(p_u=1, p_z=1, p_v=1)
        with pytest.raises(ValueError, match="row mismatch"):
            Dataset(X=np.zeros((3, 2)), y=np.zeros(4), a=np.ones(3), source="rct", layout=lay)

    def test_arrays_immutable(self):
        ds = _dataset()
        with pytest.raises(ValueError):
            ds.X[0, 0] = 1.0

    def test_shared_block_returns_z_columns(self):
        lay = CovariateLayout(p_u=2, p_z=3, p_v=4)
        rct = _dataset(layout=lay, source="rct")
        os_ = _dataset(layout=lay, source="os")
        assert np.array_equal(shared_block(rct), rct.X[:, 2:5])
        assert np.array_equal(shared_block(os_), os_.X[:, 0:3])

    def test_arm_masks_partition(self):
        ds = _dataset(n=20)
        assert (ds.arm(1) | ds.arm(-1)).all()
        assert not (ds.arm(1) & ds.arm(-1)).any()


class TestPropensity:
    def test_constant_broadcast(self):
        pm = PropensityModel(0.5)
        assert np.allclose(pm.treat_prob(4), 0.5)

    def test_prob_of_realized_treatment(self):
        pm = PropensityModel(np.array([0.3, 0.7]))
        got = pm.prob_of(np.array([1, -1]))
        assert np.allclose(got, [0.3, 0.3])

    def test_positivity_enforced(self):
        with pytest.raises(ValueError, match="positivity"):
            PropensityModel(np.array([0.5, 0.001]))

    def test_length_checked(self):
        pm = PropensityModel(np.array([0.3, 0.7]))
        with pytest.raises(ValueError, match="length"):
            pm.treat_prob(3)


class TestFolds:
    def test_partition_and_balance(self):
        fa = make_folds(10, 3, seed=0)
        sizes = sorted(len(fa.fold_indices(k)) for k in range(3))
        assert sizes == [3, 3, 4]
        all_idx = np.concatenate([fa.fold_indices(k) for k in range(3)])
        assert sorted(all_idx.tolist()) == list(range(10))

    def test_deterministic_in_seed(self):
        a = make_folds(57, 5, seed=123)
        b = make_folds(57, 5, seed=123)
        c = make_folds(57, 5, seed=124)
        assert np.array_equal(a.fold_of, b.fold_of)
        assert not np.array_equal(a.fold_of, c.fold_of)

    def test_train_indices_complement(self):
        fa = make_folds(11, 2, seed=7)
        for k in range(2):
            merged = np.concatenate([fa.fold_indices(k), fa.train_indices(k)])
            assert sorted(merged.tolist()) == list(range(11))

    def test_too_many_folds_rejected(self):
        with pytest.raises(ValueError):
            make_folds(3, 4, seed=0)

    @pytest.mark.invariants
    @given(
        n=st.integers(min_value=4, max_value=200),
        k=st.integers(min_value=2, max_value=7),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    @settings(deadline=None, max_examples=60)
    def test_fold_sizes_property(self, n, k, seed):
        if k > n:
            return
        fa = make_folds(n, k, seed)
        sizes = [len(fa.fold_indices(j)) for j in range(k)]
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1


class TestScaler:
    def test_hand_example(self):
        # column {0, 2}: mean 1, population sd 1 -> transformed {-1, 1}
        X = np.array([[0.0], [2.0]])
        sc = ColumnScaler().fit(X)
        assert np.allclose(sc.params_.mean, [1.0])
        assert np.allclose(sc.params_.scale, [1.0])
        assert np.allclose(sc.transform(X).ravel(), [-1.0, 1.0])

    def test_constant_column_flagged_and_centered(self):
        X = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        sc = ColumnScaler().fit(X)
        assert sc.params_.constant_mask.tolist() == [True, False]
        out = sc.transform(X)
        assert np.allclose(out[:, 0], 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 4)) * [1, 10, 0.1, 5] + [0, -3, 2, 100]
        sc = ColumnScaler().fit(X)
        assert np.allclose(sc.inverse_transform(sc.transform(X)), X)

    def test_transform_applies_training_params_to_new_rows(self):
        train = np.array([[0.0], [2.0]])
        sc = ColumnScaler().fit(train)
        assert np.allclose(sc.transform(np.array([[4.0]])), [[3.0]])

    def test_unfitted_raises(self):
        with pytest.raises(RuntimeError):
            ColumnScaler().transform(np.zeros((2, 2)))

    @pytest.mark.invariants
    @given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=10**6))
    @settings(deadline=None, max_examples=40)
    def test_standardized_moments_property(self, n, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3)) * 7 + 2
        out = ColumnScaler().fit(X).transform(X)
        assert np.allclose(out.mean(axis=0), 0, atol=1e-9)
        assert np.allclose(out.std(axis=0), 1, atol=1e-9)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lsam.corruption import CorruptionSpec, corrupt, corrupt_mar, corrupt_mcar, corrupt_mnar, fraction_count
from lsam.data import FeatureSchema, TabularDataset
from lsam.errors import CorruptionError

from oracles import top_k_rows


def _complete(values, targets=None):
    values = np.asarray(values, dtype=float)
    n, d = values.shape
    targets = np.arange(n) % 2 if targets is None else targets
    return TabularDataset(values, np.zeros((n, d), dtype=bool), targets, tuple(FeatureSchema(f"f{j}") for j in range(d)))


def _gaussian(n=1000, d=10, seed=0):
    return _complete(np.random.default_rng(seed).standard_normal((n, d)))


def test_fraction_count_avoids_float_overshoot():
    assert fraction_count(0.4, 10) == 4
    assert fraction_count(0.7, 10) == 7
    assert fraction_count(0.41, 10) == 5
    assert fraction_count(1.0, 3) == 3


def test_mcar_counts():
    out = corrupt_mcar(_gaussian(), CorruptionSpec("mcar", seed=1))
    per_col = out.mask.sum(axis=0)
    assert sorted(per_col.tolist()) == [0] * 6 + [400] * 4
    assert abs(out.mask.mean() - 0.16) <= 0.005


def test_mcar_deterministic():
    ds = _gaussian()
    a = corrupt(ds, CorruptionSpec("mcar", seed=3)).mask
    b = corrupt(ds, CorruptionSpec("mcar", seed=3)).mask
    assert np.array_equal(a, b)
    assert not np.array_equal(a, corrupt(ds, CorruptionSpec("mcar", seed=4)).mask)


def test_mcar_independent_of_values():
    ds = _gaussian(seed=2)
    out = corrupt_mcar(ds, CorruptionSpec("mcar", seed=2))
    cols = np.flatnonzero(out.mask.any(axis=0))
    # deletion indicator vs above/below-median value, pooled over corrupted columns
    above = np.concatenate([ds.values[:, j] > np.median(ds.values[:, j]) for j in cols])
    deleted = np.concatenate([out.mask[:, j] for j in cols])
    table = np.array([[np.sum(above & deleted), np.sum(above & ~deleted)], [np.sum(~above & deleted), np.sum(~above & ~deleted)]])
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_mar_hand_example():
    left = np.arange(1.0, 11.0)
    ds = _complete(np.column_stack([left, np.zeros(10)]))
    out = corrupt_mar(ds, CorruptionSpec("mar", column_fraction=0.5, seed=0))
    assert not out.mask[:, 0].any()
    assert np.flatnonzero(out.mask[:, 1]).tolist() == [6, 7, 8, 9]


def test_mar_matches_independent_oracle():
    rng = np.random.default_rng(5)
    values = rng.integers(0, 20, (200, 6)).astype(float)  # plenty of ties
    ds = _complete(values)
    spec = CorruptionSpec("mar", seed=9)
    out = corrupt_mar(ds, spec)
    cols = np.flatnonzero(out.mask.any(axis=0))
    assert len(cols) == 3 and 0 not in cols
    k = fraction_count(spec.cell_fraction, 200)
    for j in cols:
        assert np.flatnonzero(out.mask[:, j]).tolist() == top_k_rows(values[:, j - 1].tolist(), k)


def test_mar_permutation_equivariant():
    rng = np.random.default_rng(6)
    values = rng.uniform(size=(50, 4))
    perm = rng.permutation(50)
    spec = CorruptionSpec("mar", seed=2)
    a = corrupt_mar(_complete(values), spec).mask
    b = corrupt_mar(_complete(values[perm]), spec).mask
    assert np.array_equal(a[perm], b)


def test_mar_correlates_with_left_neighbour():
    ds = _complete(np.random.default_rng(7).uniform(size=(1000, 5)))
    out = corrupt_mar(ds, CorruptionSpec("mar", seed=1))
    for j in np.flatnonzero(out.mask.any(axis=0)):
        r = stats.pointbiserialr(out.mask[:, j], ds.values[:, j - 1]).statistic
        assert abs(r) > 0.5


def test_mar_uses_uncorrupted_left_neighbour():
    # every column past the first is selected, so column j-1 is itself corrupted
    values = np.random.default_rng(8).uniform(size=(40, 3))
    out = corrupt_mar(_complete(values), CorruptionSpec("mar", column_fraction=1.0, seed=0))
    for j in (1, 2):
        assert np.flatnonzero(out.mask[:, j]).tolist() == top_k_rows(values[:, j - 1].tolist(), 16)


def test_mar_needs_two_columns():
    with pytest.raises(CorruptionError):
        corrupt_mar(_complete(np.ones((5, 1))), CorruptionSpec("mar"))


def test_mnar_hand_example():
    ds = _complete(np.arange(1.0, 11.0)[:, None])
    out = corrupt_mnar(ds, CorruptionSpec("mnar", seed=0))
    assert ds.values[out.mask[:, 0], 0].tolist() == [7.0, 8.0, 9.0, 10.0]


def test_mnar_deletes_high_values():
    ds = _gaussian(seed=3)
    out = corrupt_mnar(ds, CorruptionSpec("mnar", seed=3))
    cols = np.flatnonzero(out.mask.any(axis=0))
    assert len(cols) == 4
    for j in cols:
        assert out.mask[:, j].sum() == 400
        assert ds.values[out.mask[:, j], j].mean() > ds.values[~out.mask[:, j], j].mean()


def test_pre_existing_missingness_rejected():
    ds = _gaussian(n=20, d=3)
    holed = ds.with_mask(np.eye(20, 3, dtype=bool))
    for pattern in ("mcar", "mar", "mnar"):
        with pytest.raises(CorruptionError):
            corrupt(holed, CorruptionSpec(pattern))


def test_spec_validation():
    with pytest.raises(CorruptionError):
        CorruptionSpec("mxar")
    with pytest.raises(CorruptionError):
        CorruptionSpec("mcar", cell_fraction=0.0)
    with pytest.raises(CorruptionError):
        CorruptionSpec("mcar", column_fraction=1.5)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["mcar", "mar", "mnar"]),
    st.integers(5, 60),
    st.integers(2, 7),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
    st.integers(0, 2**31),
)
def test_generator_invariants(pattern, n, d, colf, cellf, seed):
    rng = np.random.default_rng(seed)
    ds = _complete(rng.standard_normal((n, d)), rng.integers(0, 3, n))
    out = corrupt(ds, CorruptionSpec(pattern, colf, cellf, seed))
    per_col = out.mask.sum(axis=0)
    hit = per_col > 0
    n_cols = fraction_count(colf, d) if pattern != "mar" else min(fraction_count(colf, d), d - 1)
    assert hit.sum() == n_cols
    assert set(per_col[hit].tolist()) == {fraction_count(cellf, n)}
    assert np.array_equal(out.targets, ds.targets)
    assert np.array_equal(out.values[~out.mask], ds.values[~out.mask])
    if pattern == "mnar":
        assert np.array_equal(out.mask, corrupt(ds, CorruptionSpec(pattern, colf, cellf, seed)).mask)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robnoddi.dataio import ArrayPatches, PatchExample
from robnoddi.exceptions import DimensionError, PolicyMismatchError, RankDeficientError, SelectionSizeError
from robnoddi.pipeline import (
    RAW,
    SH,
    FeatureSpec,
    SamplingPolicy,
    ShFeaturizer,
    build_epoch,
    build_epoch_arrays,
    fixed_selections,
    iter_epoch,
    make_test_example,
    make_training_example,
)
from robnoddi.shbasis import FitSettings, eval_basis, fit_sh, laplace_beltrami, sh_degrees
from robnoddi.sphere import GradientScheme, SubsampleSelection, random_subsample

LAM = 6e-3


@pytest.fixture(scope="module")
def scheme():
    return GradientScheme.uniform([1000, 2000], [90, 90], seed=0)


def _bandlimited_patch(scheme, w=5, max_degree=6, scale=0.1, seed=0):
    """Noiseless patch whose per-shell signals are exact SH expansions."""
    rng = np.random.default_rng(seed)
    ls = np.array(sh_degrees(6)[0])
    coeffs, parts = [], []
    for sh in scheme.shells:
        c = rng.standard_normal((w, w, w, 28)) * scale * (ls <= max_degree)
        c[..., 0] = 1.0
        coeffs.append(c)
        parts.append(c @ eval_basis(sh.directions, 6).entries.T)
    return np.concatenate(parts, -1), np.concatenate(coeffs, -1)


def _example(patch, w=5):
    return PatchExample(patch, np.zeros((w - 2,) * 3 + (3,)), ("t", (0, 0, 0)))


def _stacked_oracle(signal, dirs, lam):
    """Regularized fit as an augmented least-squares problem solved with pinv."""
    B = eval_basis(dirs, 6).entries
    A = np.vstack([B, np.sqrt(lam) * np.diag(laplace_beltrami(6))])
    rhs = np.concatenate([signal.reshape(-1, len(dirs)).T, np.zeros((28, signal[..., 0].size))])
    return (np.linalg.pinv(A) @ rhs).T.reshape(signal.shape[:-1] + (28,))


# policy / feature spec -----------------------------------------------------------------------


def test_policy_validation(scheme):
    SamplingPolicy("adaptive", 20, 60).validate(scheme)
    for lo, hi in [(19, 60), (40, 30), (20, 91)]:
        with pytest.raises(SelectionSizeError):
            SamplingPolicy("adaptive", lo, hi).validate(scheme)
    with pytest.raises(PolicyMismatchError):
        SamplingPolicy("fixed").validate(scheme)
    with pytest.raises(PolicyMismatchError):
        SamplingPolicy.fixed(fixed_selections(scheme, 30)[:1]).validate(scheme)
    with pytest.raises(PolicyMismatchError):
        SamplingPolicy("sometimes").validate(scheme)


def test_feature_spec_channels():
    assert FeatureSpec(SH, 6, (0, 1)).channels() == 56
    assert FeatureSpec(RAW, 6, (0, 1)).channels([30, 25]) == 55
    with pytest.raises(ValueError):
        FeatureSpec(RAW).channels()
    with pytest.raises(ValueError):
        FeatureSpec("fourier")


def test_fixed_selections(scheme):
    spread = fixed_selections(scheme, 30)
    assert [len(s) for s in spread] == [30, 30] and spread == fixed_selections(scheme, 30)
    rand = fixed_selections(scheme, [20, 25], how="random", seed=4)
    assert [len(s) for s in rand] == [20, 25] and rand == fixed_selections(scheme, [20, 25], how="random", seed=4)
    assert rand != fixed_selections(scheme, [20, 25], how="random", seed=5)


# training examples -------------------------------------------------------------------


def test_training_feature_shape(scheme):
    patch, _ = _bandlimited_patch(scheme)
    ex = make_training_example(_example(patch), scheme, SamplingPolicy(), FeatureSpec(), FitSettings(6, LAM), 0)
    assert ex.input_patch.shape == (5, 5, 5, 56)
    assert ex.target_patch.shape == (3, 3, 3, 3)


def test_full_fixed_selection_equals_direct_fit(scheme):
    patch, _ = _bandlimited_patch(scheme)
    full = SamplingPolicy.fixed(SubsampleSelection(s, tuple(range(90))) for s in range(2))
    ex = make_training_example(_example(patch), scheme, full, FeatureSpec(), FitSettings(6, LAM), 0)
    x, y, z = 1, 2, 3
    for s, sl in enumerate(scheme.shell_slices(include_b0=False)):
        direct = fit_sh(patch[x, y, z, sl], eval_basis(scheme.shells[s].directions, 6), FitSettings(6, LAM)).values
        np.testing.assert_allclose(ex.input_patch[x, y, z, 28 * s:28 * (s + 1)], direct, atol=1e-12)


def test_training_features_match_stacked_oracle(scheme):
    patch, _ = _bandlimited_patch(scheme, seed=3)
    rng_seed = 11
    ex = make_training_example(_example(patch), scheme, SamplingPolicy("adaptive", 20, 40), FeatureSpec(),
                               FitSettings(6, LAM), rng_seed)
    # replay the draws the pipeline makes: per shell, n then the subset
    rng = np.random.default_rng(rng_seed)
    for s, sl in enumerate(scheme.shell_slices(include_b0=False)):
        n = int(rng.integers(20, 41))
        idx = np.array(random_subsample(scheme, s, n, rng).indices)
        oracle = _stacked_oracle(patch[..., sl][..., idx], scheme.shells[s].directions[idx], LAM)
        np.testing.assert_allclose(ex.input_patch[..., 28 * s:28 * (s + 1)], oracle, atol=1e-9)


def test_different_rng_states_unregularized_agree(scheme):
    """Without regularization 30 directions determine order-6 coefficients exactly."""
    patch, coeffs = _bandlimited_patch(scheme, seed=1)
    policy, spec = SamplingPolicy("adaptive", 30, 30), FeatureSpec()
    a = make_training_example(_example(patch), scheme, policy, spec, FitSettings(6, 0.0), 1).input_patch
    b = make_training_example(_example(patch), scheme, policy, spec, FitSettings(6, 0.0), 2).input_patch
    assert np.max(np.abs(a - b)) < 1e-4
    np.testing.assert_allclose(a, coeffs, atol=1e-8)


def test_different_rng_states_regularized_isotropic_agree(scheme):
    """The Laplace-Beltrami penalty leaves degree 0 untouched, so isotropic data agree at lambda > 0."""
    patch, _ = _bandlimited_patch(scheme, max_degree=0, seed=1)
    policy, spec, fs = SamplingPolicy("adaptive", 30, 30), FeatureSpec(), FitSettings(6, LAM)
    sels = []
    feats = []
    for r in (1, 2):
        feats.append(make_training_example(_example(patch), scheme, policy, spec, fs, r).input_patch)
        rng = np.random.default_rng(r)
        sels.append([random_subsample(scheme, s, int(rng.integers(30, 31)), rng).indices for s in range(2)])
    assert sels[0] != sels[1]
    assert np.max(np.abs(feats[0] - feats[1])) < 1e-4


def test_rank_deficient_propagates(scheme):
    patch, _ = _bandlimited_patch(scheme)
    with pytest.raises(RankDeficientError):
        make_training_example(_example(patch), scheme, SamplingPolicy("adaptive", 20, 27), FeatureSpec(),
                              FitSettings(6, 0.0), 0)


def test_raw_mode_needs_fixed_count(scheme):
    patch, _ = _bandlimited_patch(scheme)
    with pytest.raises(PolicyMismatchError):
        make_training_example(_example(patch), scheme, SamplingPolicy("adaptive", 20, 40), FeatureSpec(RAW),
                              FitSettings(6, LAM), 0)


def test_raw_mode_width_equals_selection(scheme):
    patch, _ = _bandlimited_patch(scheme)
    policy = SamplingPolicy.fixed(fixed_selections(scheme, [30, 24]))
    ex = make_training_example(_example(patch), scheme, policy, FeatureSpec(RAW), FitSettings(6, LAM), 0)
    assert ex.input_patch.shape[-1] == 54
    idx = np.array(policy.fixed_selection[1].indices)
    np.testing.assert_array_equal(ex.input_patch[..., 30:], patch[..., 90:][..., idx])


def test_patch_channel_mismatch(scheme):
    with pytest.raises(DimensionError):
        make_training_example(_example(np.zeros((5, 5, 5, 100))), scheme, SamplingPolicy(), FeatureSpec(),
                              FitSettings(6, LAM), 0)


# test examples ----------------------------------------------------------------------


@pytest.mark.parametrize("s1, s2", [(30, 30), (16, 29), (21, 28), (45, 45)])
def test_test_feature_shape_independent_of_counts(s1, s2):
    test_scheme = GradientScheme.uniform([1000, 2000], [s1, s2], seed=9)
    patch = np.random.default_rng(0).uniform(0.1, 1, (5, 5, 5, s1 + s2))
    ex = make_test_example(_example(patch), test_scheme, FeatureSpec(), FitSettings(6, LAM))
    assert ex.input_patch.shape == (5, 5, 5, 56)


def test_test_path_equals_training_path_on_same_selection(scheme):
    patch, _ = _bandlimited_patch(scheme, seed=5)
    sels = fixed_selections(scheme, [30, 35], how="random", seed=2)
    train = make_training_example(_example(patch), scheme, SamplingPolicy.fixed(sels), FeatureSpec(),
                                  FitSettings(6, LAM), 0).input_patch
    idx = np.concatenate([np.array(sels[0].indices), 90 + np.array(sels[1].indices)])
    test = make_test_example(_example(patch[..., idx]), scheme.subset(sels), FeatureSpec(), FitSettings(6, LAM))
    np.testing.assert_allclose(test.input_patch, train, atol=1e-12)


def test_test_path_rank_deficient():
    test_scheme = GradientScheme.uniform([1000, 2000], [16, 29], seed=9)
    with pytest.raises(RankDeficientError):
        make_test_example(_example(np.ones((5, 5, 5, 45))), test_scheme, FeatureSpec(), FitSettings(6, 0.0))


@settings(max_examples=10, deadline=None)
@given(s1=st.integers(20, 45), s2=st.integers(20, 45), seed=st.integers(0, 50))
def test_sh_width_independent_of_direction_counts(s1, s2, seed):
    test_scheme = GradientScheme.uniform([1000, 2000], [s1, s2], seed=seed)
    X = np.random.default_rng(seed).uniform(size=(3, 3, 3, s1 + s2))
    assert ShFeaturizer(test_scheme, 6, LAM).fit_transform(X).shape == (3, 3, 3, 56)
    assert ShFeaturizer(test_scheme, 6, LAM, representation=RAW).fit_transform(X).shape[-1] == s1 + s2


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_disjoint_halves_agree_unregularized(seed):
    """Two disjoint 45-direction halves of a 90-direction shell give the same coefficients."""
    sch = GradientScheme.uniform([1000, 2000], [90, 90], seed=0)
    patch, _ = _bandlimited_patch(sch, w=3, seed=seed)
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(90) for _ in range(2)]
    halves = [[SubsampleSelection(s, tuple(sorted(p[h * 45:(h + 1) * 45]))) for s, p in enumerate(perms)] for h in (0, 1)]
    out = []
    for sels in halves:
        idx = np.concatenate([np.array(sels[0].indices), 90 + np.array(sels[1].indices)])
        out.append(ShFeaturizer(sch.subset(sels), 6, 0.0).fit_transform(patch[..., idx]))
    assert np.max(np.abs(out[0] - out[1])) < 1e-3


def test_featurizer_sklearn_api(scheme):
    f = ShFeaturizer(scheme, 6, LAM, shells=(1,))
    X = np.random.default_rng(0).uniform(size=(4, 180))
    Z = f.fit_transform(X)
    assert Z.shape == (4, 28) and f.n_features_in_ == 180
    names = f.get_feature_names_out()
    assert len(names) == 28 and names[0] == "b2000_l0_m0"
    assert f.get_params()["shells"] == (1,)


# epochs ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(scheme):
    rng = np.random.default_rng(7)
    X = rng.uniform(0.1, 1.0, (100, 3, 3, 3, 180))
    Y = rng.uniform(size=(100, 1, 1, 1, 3))
    return X, Y


def _args(scheme, w=3):
    return scheme, SamplingPolicy("adaptive", 20, 40), FeatureSpec(), FitSettings(6, LAM)


def test_build_epoch_deterministic(scheme, dataset):
    X, Y = dataset
    ds = [PatchExample(x, y, ("t", i)) for i, (x, y) in enumerate(zip(X[:10], Y[:10]))]
    a = build_epoch(ds, *_args(scheme), epoch_seed=3)
    b = build_epoch(ds, *_args(scheme), epoch_seed=3)
    assert len(a) == 10
    assert all(np.array_equal(p.input_patch, q.input_patch) and p.provenance == q.provenance for p, q in zip(a, b))


def test_epoch_seeds_change_selections(scheme, dataset):
    X, Y = dataset
    fa, ya, oa = build_epoch_arrays(X, Y, *_args(scheme), epoch_seed=1)
    fb, yb, ob = build_epoch_arrays(X, Y, *_args(scheme), epoch_seed=2)
    assert len(fa) == len(X)
    # align by dataset position before comparing
    ia, ib = np.argsort(oa), np.argsort(ob)
    differs = [not np.allclose(fa[ia][i], fb[ib][i]) for i in range(len(X))]
    assert sum(differs) >= 1
    np.testing.assert_array_equal(ya[ia], Y)


def test_build_epoch_matches_array_form(scheme, dataset):
    X, Y = dataset
    ds = [PatchExample(x, y, ("t", i)) for i, (x, y) in enumerate(zip(X[:12], Y[:12]))]
    listed = build_epoch(ds, *_args(scheme), epoch_seed=9)
    feats, targets, order = build_epoch_arrays(X[:12], Y[:12], *_args(scheme), epoch_seed=9)
    assert [e.provenance[1] for e in listed] == list(order)
    np.testing.assert_allclose(np.stack([e.input_patch for e in listed]), feats, atol=1e-12)


@pytest.mark.parametrize("chunk", [1, 7, 100])
def test_iter_epoch_chunking_invariant(scheme, dataset, chunk):
    X, Y = dataset
    whole, wy, _ = build_epoch_arrays(X, Y, *_args(scheme), epoch_seed=4)
    parts = list(iter_epoch(ArrayPatches(X, Y), *_args(scheme), epoch_seed=4, chunk=chunk))
    np.testing.assert_allclose(np.concatenate([p[0] for p in parts]), whole, atol=1e-12)
    np.testing.assert_array_equal(np.concatenate([p[1] for p in parts]), wy)


def test_empty_dataset(scheme):
    with pytest.raises(ValueError):
        build_epoch([], *_args(scheme), epoch_seed=0)

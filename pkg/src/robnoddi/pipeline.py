"""Feature construction for training and testing.

Raw patches are ``(w, w, w, D)`` arrays whose last axis holds the diffusion
channels of a :class:`~robnoddi.sphere.GradientScheme` (no b0), shell after
shell. Training features subsample every shell independently and fit SH
coefficients on the chosen directions; test features fit SH on whatever
directions the test acquisition provides. In SH mode the feature width is
``n_shells * num_coefficients(order)`` no matter how many directions went in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import ArrayPatches, PatchExample
from .exceptions import DimensionError, PolicyMismatchError, RankDeficientError, SelectionSizeError
from .shbasis import FitSettings, ShFitter, eval_basis, laplace_beltrami, num_coefficients, real_sh
from .sphere import GradientScheme, SubsampleSelection, random_subsample, spread_selection

RAW = "raw_dwi"
SH = "sh_coeffs"
MIN_ADAPTIVE = 20


@dataclass(frozen=True)
class SamplingPolicy:
    """How training directions are chosen per shell.

    ``mode="adaptive"`` draws ``n ~ U{n_min..n_max}`` fresh directions per
    shell per example; ``mode="fixed"`` always uses ``fixed_selection``.
    """

    mode: str = "adaptive"
    n_min: int = 20
    n_max: int = 60
    fixed_selection: tuple | None = None

    def validate(self, scheme: GradientScheme) -> "SamplingPolicy":
        if self.mode == "adaptive":
            smallest = min(scheme.shell_sizes)
            if not MIN_ADAPTIVE <= self.n_min <= self.n_max <= smallest:
                raise SelectionSizeError(
                    f"adaptive policy needs {MIN_ADAPTIVE} <= n_min <= n_max <= {smallest}, "
                    f"got {self.n_min}..{self.n_max}"
                )
        elif self.mode == "fixed":
            sel = self.fixed_selection
            if sel is None or sorted(s.shell_index for s in sel) != list(range(scheme.n_shells)):
                raise PolicyMismatchError("fixed policy needs one selection per shell")
            for s in sel:
                if s.indices and max(s.indices) >= len(scheme.shells[s.shell_index]):
                    raise SelectionSizeError(f"selection for shell {s.shell_index} is out of range")
        else:
            raise PolicyMismatchError(f"unknown sampling mode {self.mode!r}")
        return self

    @classmethod
    def fixed(cls, selections) -> "SamplingPolicy":
        return cls(mode="fixed", fixed_selection=tuple(selections))


@dataclass(frozen=True)
class FeatureSpec:
    representation: str = SH
    sh_order: int = 6
    shells_used: tuple = (0, 1)

    def __post_init__(self):
        if self.representation not in (RAW, SH):
            raise ValueError(f"representation must be {RAW!r} or {SH!r}")
        object.__setattr__(self, "shells_used", tuple(int(s) for s in self.shells_used))

    def channels(self, counts: Sequence[int] | None = None) -> int:
        """Feature width; raw mode needs the per-shell direction ``counts``."""
        if self.representation == SH:
            return num_coefficients(self.sh_order) * len(self.shells_used)
        if counts is None:
            raise ValueError("raw feature width depends on the direction counts")
        return int(sum(counts))


def fixed_selections(scheme: GradientScheme, n_per_shell, how: str = "spread", seed: int = 0) -> tuple:
    """One selection per shell, either well spread (deterministic) or random."""
    if np.isscalar(n_per_shell):
        n_per_shell = [int(n_per_shell)] * scheme.n_shells
    out = []
    for s, n in enumerate(n_per_shell):
        if how == "spread":
            out.append(spread_selection(scheme, s, n))
        elif how == "random":
            out.append(random_subsample(scheme, s, n, np.random.default_rng([seed, s])))
        else:
            raise ValueError(f"unknown selection method {how!r}")
    return tuple(out)


class _BasisCache:
    """Full-shell basis matrices; subsets are row slices."""

    def __init__(self, scheme: GradientScheme, order: int):
        self.order = order
        self.bases = [real_sh(sh.directions, order) for sh in scheme.shells]
        self.penalty = laplace_beltrami(order) ** 2

    def solve(self, shell: int, idx, signals, lam: float) -> np.ndarray:
        B = self.bases[shell][idx]
        if lam == 0 and np.linalg.matrix_rank(B) < B.shape[1]:
            raise RankDeficientError(
                f"{len(idx)} directions cannot determine {B.shape[1]} coefficients with lambda = 0"
            )
        normal = B.T @ B + lam * np.diag(self.penalty)
        return linalg.cho_solve(linalg.cho_factor(normal, lower=True), (signals @ B).T).T


def _check_settings(spec: FeatureSpec, settings: FitSettings):
    if spec.representation == SH and settings.order != spec.sh_order:
        raise ValueError(f"fit order {settings.order} differs from feature order {spec.sh_order}")


def _draw_selections(scheme, policy, spec, rng) -> list:
    if policy.mode == "fixed":
        by_shell = {s.shell_index: s for s in policy.fixed_selection}
        return [by_shell[s] for s in spec.shells_used]
    sels = []
    for s in spec.shells_used:
        n = int(rng.integers(policy.n_min, policy.n_max + 1))
        sels.append(random_subsample(scheme, s, n, rng))
    return sels


def _features_from_selection(patch, scheme, sels, spec, lam, cache) -> np.ndarray:
    slices = scheme.shell_slices(include_b0=False)
    parts = []
    for sel in sels:
        idx = np.asarray(sel.indices)
        sig = patch[..., slices[sel.shell_index]][..., idx]
        if spec.representation == RAW:
            parts.append(sig)
        else:
            flat = sig.reshape(-1, len(idx))
            c = cache.solve(sel.shell_index, idx, flat, lam)
            parts.append(c.reshape(sig.shape[:-1] + (c.shape[-1],)))
    return np.concatenate(parts, axis=-1)


def _check_patch(patch, scheme: GradientScheme):
    if patch.shape[-1] != scheme.n_diffusion:
        raise DimensionError(
            f"patch has {patch.shape[-1]} channels but the scheme has {scheme.n_diffusion} directions"
        )


def make_training_example(
    example: PatchExample,
    scheme: GradientScheme,
    policy: SamplingPolicy,
    spec: FeatureSpec,
    settings: FitSettings,
    rng,
    _cache: _BasisCache | None = None,
) -> PatchExample:
    """Subsample each shell, fit SH per voxel, concatenate shells.

    ``rng`` should be fresh per (patch, epoch) so that the sampling pattern
    changes from epoch to epoch.
    """
    if spec.representation == RAW and policy.mode == "adaptive" and policy.n_min != policy.n_max:
        raise PolicyMismatchError("raw DWI features need a fixed direction count")
    _check_settings(spec, settings)
    patch = np.asarray(example.input_patch, dtype=np.float64)
    _check_patch(patch, scheme)
    rng = np.random.default_rng(rng)
    cache = _cache or _BasisCache(scheme, spec.sh_order)
    sels = _draw_selections(scheme, policy, spec, rng)
    feats = _features_from_selection(patch, scheme, sels, spec, settings.lam, cache)
    return PatchExample(feats, example.target_patch, example.provenance)


def make_test_example(
    example: PatchExample,
    scheme: GradientScheme,
    spec: FeatureSpec,
    settings: FitSettings,
) -> PatchExample:
    """Features from every supplied direction; no subsampling at test time."""
    feats = ShFeaturizer(scheme, spec.sh_order, settings.lam, spec.shells_used, spec.representation).fit_transform(
        np.asarray(example.input_patch)[None]
    )[0]
    return PatchExample(feats, example.target_patch, example.provenance)


def epoch_rng(epoch_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(epoch_seed), int(index)])


def _check_policy(scheme, policy, spec, settings):
    _check_settings(spec, settings)
    policy.validate(scheme)
    if spec.representation == RAW and policy.mode == "adaptive" and policy.n_min != policy.n_max:
        raise PolicyMismatchError("raw DWI features need a fixed direction count")


def training_features(X, indices, scheme, policy, spec, settings, epoch_seed: int, _cache=None) -> np.ndarray:
    """Training features of raw patches ``X`` whose dataset positions are ``indices``.

    Patch ``indices[i]`` draws its directions from ``epoch_rng(epoch_seed,
    indices[i])``, so the result does not depend on how a dataset is chunked.
    """
    cache = _cache or _BasisCache(scheme, spec.sh_order)
    if policy.mode == "fixed":
        sels = _draw_selections(scheme, policy, spec, None)
        return _features_from_selection(np.asarray(X, dtype=np.float64), scheme, sels, spec, settings.lam, cache)
    feats = None
    for j, i in enumerate(indices):
        sels = _draw_selections(scheme, policy, spec, epoch_rng(epoch_seed, i))
        f = _features_from_selection(np.asarray(X[j], dtype=np.float64), scheme, sels, spec, settings.lam, cache)
        if feats is None:
            feats = np.empty((len(X),) + f.shape)
        feats[j] = f
    return feats


def epoch_order(n: int, epoch_seed: int) -> np.ndarray:
    return np.random.default_rng(int(epoch_seed)).permutation(n)


def iter_epoch(source, scheme, policy, spec, settings, epoch_seed: int, chunk: int = 1024):
    """Yield shuffled ``(features, targets)`` chunks covering one epoch.

    ``source`` is a :class:`~robnoddi.dataio.PatchSource` or
    :class:`~robnoddi.dataio.ArrayPatches`. Concatenating the chunks gives
    the same arrays as :func:`build_epoch_arrays`.
    """
    if len(source) == 0:
        raise ValueError("dataset is empty")
    _check_policy(scheme, policy, spec, settings)
    if source.n_channels != scheme.n_diffusion:
        raise DimensionError(
            f"patches have {source.n_channels} channels but the scheme has {scheme.n_diffusion} directions"
        )
    cache = _BasisCache(scheme, spec.sh_order)
    order = epoch_order(len(source), epoch_seed)
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        X, Y = source.patches(idx)
        yield training_features(X, idx, scheme, policy, spec, settings, epoch_seed, cache), Y


def build_epoch_arrays(X, Y, scheme, policy, spec, settings, epoch_seed: int):
    """Array form of :func:`build_epoch`: returns shuffled ``(features, targets, order)``."""
    src = ArrayPatches(X, Y)
    parts = list(iter_epoch(src, scheme, policy, spec, settings, epoch_seed, chunk=max(len(src), 1)))
    return parts[0][0], parts[0][1], epoch_order(len(src), epoch_seed)


def build_epoch(dataset, scheme, policy, spec, settings, epoch_seed: int) -> list:
    """One epoch of training examples with per-patch resampling, shuffled."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    policy.validate(scheme)
    cache = _BasisCache(scheme, spec.sh_order)
    examples = [
        make_training_example(ex, scheme, policy, spec, settings, epoch_rng(epoch_seed, i), _cache=cache)
        for i, ex in enumerate(dataset)
    ]
    order = np.random.default_rng(int(epoch_seed)).permutation(len(examples))
    return [examples[i] for i in order]


class ShFeaturizer(TransformerMixin, BaseEstimator):
    """Per-shell SH coefficients of raw diffusion channels.

    Stateless apart from validation: ``fit`` only records the input width.
    ``transform`` maps ``(..., n_diffusion)`` arrays to ``(..., n_shells *
    n_coeffs)``. With ``representation="raw_dwi"`` the requested shells are
    passed through unchanged.

    Parameters
    ----------
    scheme : GradientScheme
        Directions of the input channels (b0 channels, if any, are ignored
        and must not be present in ``X``).
    order : int, default=6
    lam : float, default=6e-3
        Laplace-Beltrami regularization weight.
    shells : tuple of int, optional
        Shells to use; all by default.
    """

    def __init__(self, scheme=None, order=6, lam=6e-3, shells=None, representation=SH):
        self.scheme = scheme
        self.order = order
        self.lam = lam
        self.shells = shells
        self.representation = representation

    def _shells(self):
        return tuple(range(self.scheme.n_shells)) if self.shells is None else tuple(self.shells)

    def fit(self, X, y=None):
        X = np.asarray(X)
        _check_patch(X, self.scheme)
        self.n_features_in_ = X.shape[-1]
        self.fitters_ = {
            s: ShFitter(eval_basis(self.scheme.shells[s].directions, self.order), self.lam)
            for s in self._shells()
        } if self.representation == SH else {}
        return self

    def transform(self, X):
        check_is_fitted(self, "fitters_")
        X = np.asarray(X, dtype=np.float64)
        _check_patch(X, self.scheme)
        slices = self.scheme.shell_slices(include_b0=False)
        if self.representation == RAW:
            return np.concatenate([X[..., slices[s]] for s in self._shells()], axis=-1)
        return np.concatenate([self.fitters_[s].fit(X[..., slices[s]]) for s in self._shells()], axis=-1)

    def get_feature_names_out(self, input_features=None):
        from .shbasis import sh_degrees

        ls, ms = sh_degrees(self.order)
        return np.array(
            [f"b{self.scheme.shells[s].bvalue:g}_l{l}_m{m}" for s in self._shells() for l, m in zip(ls, ms)]
        )

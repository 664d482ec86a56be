"""End-to-end estimator: raw DWI patches in, NODDI parameter patches out."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .dataio import ArrayPatches, DwiVolume, corner_grid
from .estimator import NoddiPatchRegressor, loss_mse
from .exceptions import DimensionError, NormalizationRequiredError
from .phantom import ParameterVolume
from .pipeline import RAW, SH, FeatureSpec, SamplingPolicy, ShFeaturizer, iter_epoch
from .shbasis import FitSettings
from .sphere import GradientScheme

METHODS = ("raw_fixed", "sh_fixed", "robnoddi")


class RobNODDI(RegressorMixin, BaseEstimator):
    """Train a patch regressor under one of three input/sampling regimes.

    Parameters
    ----------
    method : {"robnoddi", "sh_fixed", "raw_fixed"}
        ``robnoddi`` fits SH on freshly subsampled directions every epoch;
        ``sh_fixed`` fits SH on ``fixed_selection`` every epoch; ``raw_fixed``
        feeds the raw signals of ``fixed_selection``.
    scheme : GradientScheme
        Diffusion directions of the raw training patches (no b0).
    fixed_selection : tuple of SubsampleSelection
        Per-shell selection used by the fixed methods and by SS testing.
    n_min, n_max : int
        Per-shell direction-count range for adaptive sampling.
    sh_order : int, default=6
    lam : float, default=6e-3
    regressor : NoddiPatchRegressor, optional
        Template estimator; cloned on ``fit``. Its ``epochs`` sets the
        training length.
    random_state : int, default=0
        Seeds the per-epoch direction draws.
    """

    def __init__(
        self,
        method="robnoddi",
        scheme=None,
        fixed_selection=None,
        n_min=20,
        n_max=40,
        sh_order=6,
        lam=6e-3,
        regressor=None,
        random_state=0,
    ):
        self.method = method
        self.scheme = scheme
        self.fixed_selection = fixed_selection
        self.n_min = n_min
        self.n_max = n_max
        self.sh_order = sh_order
        self.lam = lam
        self.regressor = regressor
        self.random_state = random_state

    # configuration ------------------------------------------------------

    def _policy(self) -> SamplingPolicy:
        if self.method == "robnoddi":
            return SamplingPolicy("adaptive", self.n_min, self.n_max)
        if self.method in ("sh_fixed", "raw_fixed"):
            return SamplingPolicy.fixed(self.fixed_selection)
        raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    def _spec(self) -> FeatureSpec:
        rep = RAW if self.method == "raw_fixed" else SH
        return FeatureSpec(rep, self.sh_order, tuple(range(self.scheme.n_shells)))

    def _settings(self) -> FitSettings:
        return FitSettings(self.sh_order, self.lam)

    def ss_scheme(self) -> GradientScheme:
        """Directions of the fixed training selection (the SS test protocol)."""
        return self.scheme.subset(self.fixed_selection)

    def epoch_seed(self, epoch: int) -> int:
        return int(np.random.default_rng([int(self.random_state), int(epoch)]).integers(2**31))

    # training -----------------------------------------------------------

    def fit(self, X, y=None, validation=None, callback=None):
        """Train on raw patches.

        ``X`` is either an array of raw patches (n, w, w, w, D) with targets
        ``y``, or a :class:`~robnoddi.dataio.PatchSource` (``y`` unused).
        Every epoch visits the patches in a fresh seeded order and rebuilds
        their features, so adaptive sampling sees new directions each time.
        ``validation`` may be ``(X_val, y_val)`` with raw patches on the same
        scheme; its SS loss is logged per epoch in ``val_curve_``.
        ``callback(epoch, train_loss, val_loss_or_None)`` runs after every epoch.
        """
        source = X if hasattr(X, "patches") else ArrayPatches(X, y)
        policy = self._policy().validate(self.scheme)
        spec, settings = self._spec(), self._settings()
        self.regressor_ = clone(self.regressor) if self.regressor is not None else NoddiPatchRegressor()
        chunk = 8 * self.regressor_.batch_size
        self.val_curve_ = []
        val = None
        if validation is not None:
            val = (self._ss_features(np.asarray(validation[0])), np.asarray(validation[1]))
        for epoch in range(self.regressor_.epochs):
            seed = self.epoch_seed(epoch)
            self.regressor_.train_epoch(iter_epoch(source, self.scheme, policy, spec, settings, seed, chunk))
            if val is not None:
                self.val_curve_.append(loss_mse(self.regressor_.predict(val[0]), val[1]))
            if callback is not None:
                callback(epoch, self.regressor_.loss_curve_[-1], self.val_curve_[-1] if val is not None else None)
        self.n_features_in_ = source.n_channels
        self.loss_curve_ = self.regressor_.loss_curve_
        return self

    def _ss_features(self, X_full):
        """Features of raw full-scheme patches restricted to the SS selection."""
        slices = self.scheme.shell_slices(include_b0=False)
        parts = [
            np.asarray(X_full)[..., slices[sel.shell_index]][..., np.asarray(sel.indices)]
            for sel in self.fixed_selection
        ]
        return self.featurize(np.concatenate(parts, axis=-1), self.ss_scheme())

    # testing ------------------------------------------------------------

    def featurize(self, X, scheme: GradientScheme):
        """Test-time features: SH fit on every direction of ``scheme``."""
        scheme = scheme.diffusion_only()
        spec = self._spec()
        if spec.representation == RAW:
            trained = sum(len(s) for s in self.fixed_selection)
            if scheme.n_diffusion != trained:
                raise DimensionError(
                    f"raw-signal model was trained on {trained} channels but the test acquisition has "
                    f"{scheme.n_diffusion}; raw inputs cannot adapt to a different direction count"
                )
        return ShFeaturizer(scheme, self.sh_order, self.lam, None, spec.representation).fit_transform(X)

    def predict(self, X, scheme: GradientScheme | None = None):
        """Predict parameter patches from raw patches acquired on ``scheme``.

        ``scheme`` defaults to the SS protocol (the fixed training selection),
        in which case ``X`` must carry exactly those channels.
        """
        check_is_fitted(self, "regressor_")
        scheme = self.ss_scheme() if scheme is None else scheme
        return self.regressor_.predict(self.featurize(np.asarray(X), scheme))

    def score(self, X, y, scheme=None, sample_weight=None):
        return -loss_mse(self.predict(X, scheme), y)


def predict_volume(model: RobNODDI, vol: DwiVolume, w: int = 5, stride: int | None = None, batch: int = 256) -> ParameterVolume:
    """Tile ``vol`` with patches and assemble the central blocks.

    Returns a parameter volume cropped by one voxel on every face (the
    border can never be the centre of a patch). Voxels outside the input
    mask are zero and excluded from the returned mask.
    """
    if not vol.normalized:
        raise NormalizationRequiredError("normalize the volume by its b0 signal before prediction")
    stride = w - 2 if stride is None else stride
    if w > min(vol.dims):
        raise DimensionError(f"patch width {w} exceeds volume dims {vol.dims}")
    data = vol.diffusion_data()
    corners = [
        (x, y, z)
        for z in corner_grid(vol.dims[2], w, stride, cover=True)
        for y in corner_grid(vol.dims[1], w, stride, cover=True)
        for x in corner_grid(vol.dims[0], w, stride, cover=True)
    ]
    out = np.zeros(tuple(d - 2 for d in vol.dims) + (3,))
    for start in range(0, len(corners), batch):
        chunk = corners[start:start + batch]
        X = np.stack([data[x:x + w, y:y + w, z:z + w] for x, y, z in chunk])
        pred = model.predict(X, vol.scheme)
        for (x, y, z), p in zip(chunk, pred):
            out[x:x + w - 2, y:y + w - 2, z:z + w - 2] = p
    mask = vol.mask[1:-1, 1:-1, 1:-1].copy()
    out[~mask] = 0.0
    mu = np.zeros(mask.shape + (3,))
    mu[..., 2] = 1.0
    return ParameterVolume(out[..., 0], out[..., 1], out[..., 2], mu, mask)

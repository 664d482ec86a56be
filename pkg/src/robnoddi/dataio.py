"""File formats and dataset mechanics.

* FSL-style ``bvals``/``bvecs`` text tables
* RVOL, a minimal binary container for 4D float32 volumes
* key=value text files (manifests and configs)
* b0 normalization and 4D patch extraction
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    CorruptFileError,
    DimensionError,
    MalformedTableError,
    ManifestError,
    MissingB0Error,
    PatchTooLargeError,
    UngroupedChannelError,
    VersionError,
)
from .phantom import DwiVolume, ParameterVolume
from .sphere import GradientScheme, Shell

B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 50.0
NOMINAL_STEP = 1000.0

RVOL_MAGIC = "RVOL1"


# -- gradient tables ---------------------------------------------------------


def _parse_rows(text: str, what: str) -> list:
    rows = [line.split() for line in text.strip().splitlines() if line.strip()]
    try:
        return [[float(v) for v in row] for row in rows]
    except ValueError as exc:
        raise MalformedTableError(f"non-numeric entry in {what}: {exc}") from exc


def parse_gradient_table(
    bvals_text: str,
    bvecs_text: str,
    b0_threshold: float = B0_THRESHOLD,
    shell_tolerance: float = SHELL_TOLERANCE,
    nominal_bvalues=None,
):
    """Group an FSL gradient table into a :class:`GradientScheme`.

    Channels with ``b < b0_threshold`` are b0. Each other channel is assigned
    to the nominal b-value it lies within ``shell_tolerance`` of. Nominal
    values default to ``b`` rounded to the nearest multiple of 1000 s/mm^2;
    pass ``nominal_bvalues`` for other protocols.

    Returns
    -------
    scheme : GradientScheme
    channel_map : dict
        ``(shell_index, direction_index) -> original channel index``, with
        b0 channels under ``(-1, k)``.
    """
    brows = _parse_rows(bvals_text, "bvals")
    vrows = _parse_rows(bvecs_text, "bvecs")
    if len(brows) != 1:
        raise MalformedTableError(f"bvals must be one row, got {len(brows)}")
    bvals = np.asarray(brows[0])
    if len(vrows) != 3 or any(len(r) != len(bvals) for r in vrows):
        raise MalformedTableError(
            f"bvecs must be 3 rows of {len(bvals)} values, got {[len(r) for r in vrows]}"
        )
    bvecs = np.asarray(vrows).T

    b0 = bvals < b0_threshold
    if nominal_bvalues is None:
        nominal = NOMINAL_STEP * np.round(bvals / NOMINAL_STEP)
    else:
        cand = np.asarray(sorted(nominal_bvalues), dtype=float)
        nominal = cand[np.argmin(np.abs(bvals[:, None] - cand[None, :]), axis=1)]
    bad = ~b0 & ((np.abs(bvals - nominal) > shell_tolerance) | (nominal <= 0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise UngroupedChannelError(f"channel {i} with b={bvals[i]:g} matches no shell")

    channel_map = {(-1, k): int(i) for k, i in enumerate(np.flatnonzero(b0))}
    shells = []
    for s, nb in enumerate(np.unique(nominal[~b0])):
        idx = np.flatnonzero(~b0 & (nominal == nb))
        d = bvecs[idx]
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise MalformedTableError(f"non-unit bvec in shell b={nb:g}")
        fix = np.abs(norms - 1.0) > 1e-12
        d = d.copy()
        d[fix] /= norms[fix, None]
        shells.append(Shell(float(nb), d))
        channel_map.update({(s, j): int(i) for j, i in enumerate(idx)})
    return GradientScheme(tuple(shells), int(b0.sum())), channel_map


def format_gradient_table(scheme: GradientScheme):
    """Canonical (bvals_text, bvecs_text) in the package channel layout."""
    bvals = scheme.bvals()
    bvecs = scheme.bvecs()
    bvals_text = " ".join(repr(float(b)) for b in bvals) + "\n"
    bvecs_text = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in bvecs)
    return bvals_text, bvecs_text


def write_gradient_table(scheme: GradientScheme, bvals_path, bvecs_path):
    bvals_text, bvecs_text = format_gradient_table(scheme)
    with open(bvals_path, "w") as f:
        f.write(bvals_text)
    with open(bvecs_path, "w") as f:
        f.write(bvecs_text)


def read_gradient_table(bvals_path, bvecs_path, **kwargs):
    with open(bvals_path) as f:
        bvals_text = f.read()
    with open(bvecs_path) as f:
        bvecs_text = f.read()
    return parse_gradient_table(bvals_text, bvecs_text, **kwargs)


def reorder_channels(data, scheme: GradientScheme, channel_map) -> np.ndarray:
    """Permute the last axis of ``data`` from file order to package layout."""
    order = [channel_map[(-1, k)] for k in range(scheme.b0_count)]
    for s, n in enumerate(scheme.shell_sizes):
        order.extend(channel_map[(s, j)] for j in range(n))
    return np.asarray(data)[..., order]


# -- RVOL ---------------------------------------------------------------------


def rvol_header(shape) -> bytes:
    nx, ny, nz, nc = shape
    return f"{RVOL_MAGIC} {nx} {ny} {nz} {nc} dtype=f32 order=xyzc\n".encode("ascii")


def write_rvol(path, volume) -> None:
    """Write a 4D array (3D arrays get one channel) as little-endian float32, x fastest."""
    arr = np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DimensionError(f"RVOL holds 3D or 4D arrays, got shape {arr.shape}")
    payload = np.asarray(arr, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(rvol_header(arr.shape))
        f.write(payload)


def read_rvol(path) -> np.ndarray:
    """Read an RVOL file into a float32 array of shape (nx, ny, nz, nc)."""
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CorruptFileError(f"{path}: missing RVOL header line")
    tokens = blob[:nl].decode("ascii", errors="replace").split()
    if len(tokens) != 7 or tokens[0] != RVOL_MAGIC or tokens[5] != "dtype=f32" or tokens[6] != "order=xyzc":
        raise VersionError(f"{path}: unsupported RVOL header {blob[:nl]!r}")
    try:
        shape = tuple(int(t) for t in tokens[1:5])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: bad dimensions in header") from exc
    payload = blob[nl + 1:]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape, order="F").astype(np.float32)


def params_to_array(pv: ParameterVolume) -> np.ndarray:
    """Seven channels: vic, viso, od, mu_x, mu_y, mu_z, mask."""
    return np.concatenate(
        [pv.stack(), pv.mu, pv.mask[..., None].astype(np.float64)], axis=-1
    )


def array_to_params(arr) -> ParameterVolume:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[3] != 7:
        raise DimensionError(f"parameter volume needs 7 channels, got shape {arr.shape}")
    mu = arr[..., 3:6]
    norm = np.linalg.norm(mu, axis=-1, keepdims=True)
    mu = mu / np.where(norm > 0, norm, 1.0)
    return ParameterVolume(arr[..., 0], arr[..., 1], arr[..., 2], mu, arr[..., 6] > 0.5)


# -- key=value files ----------------------------------------------------------


def read_keyvalue(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ManifestError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, items: dict) -> None:
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k} = {v}\n")


# -- normalization and patches ------------------------------------------------


def normalize_by_b0(vol: DwiVolume, min_b0: float = 1e-6, clamp=(0.0, 2.0)) -> DwiVolume:
    """Divide each voxel by the mean of its b0 channels.

    Voxels whose mean b0 falls below ``min_b0`` are dropped from the mask and
    zeroed. Results are clamped to ``clamp``.
    """
    nb0 = vol.scheme.b0_count
    if nb0 < 1:
        raise MissingB0Error("b0 normalization needs at least one b0 channel")
    b0 = vol.data[..., :nb0].mean(axis=-1)
    mask = vol.mask & (b0 >= min_b0)
    safe = np.where(mask, b0, 1.0)
    data = np.clip(vol.data / safe[..., None], *clamp)
    data[~mask] = 0.0
    return DwiVolume(data, vol.scheme, normalized=True, mask=mask)


@dataclass
class PatchExample:
    input_patch: np.ndarray
    target_patch: np.ndarray
    provenance: tuple = ()


def corner_grid(dim: int, w: int, stride: int, cover: bool = False) -> list:
    """Patch start indices along one axis.

    With ``cover`` the last start is pushed to ``dim - w`` when the stride
    grid would leave interior voxels uncovered.
    """
    starts = list(range(0, dim - w + 1, stride))
    if cover and starts[-1] != dim - w:
        starts.append(dim - w)
    return starts


def _check_patch_geometry(vol: DwiVolume, params: ParameterVolume, w: int, stride: int):
    if w < 3 or w % 2 == 0:
        raise DimensionError(f"patch width must be odd and >= 3, got {w}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if vol.dims != params.dims:
        raise DimensionError(f"volume dims {vol.dims} differ from parameter dims {params.dims}")
    if w > min(vol.dims):
        raise PatchTooLargeError(f"patch width {w} exceeds volume dims {vol.dims}")


def patch_corners(vol: DwiVolume, params: ParameterVolume, w: int = 5, stride: int = 3) -> list:
    """Corners ``(x, y, z)`` of the patches :func:`extract_patches` keeps, in its order.

    The stride grid is extended by a final corner flush with the far face,
    so that with ``stride <= w - 2`` every voxel that can be the centre of a
    foreground block is covered.
    """
    _check_patch_geometry(vol, params, w, stride)
    fg = vol.mask & params.mask
    xs, ys, zs = (corner_grid(n, w, stride, cover=True) for n in vol.dims)
    return [
        (x, y, z)
        for z in zs
        for y in ys
        for x in xs
        if fg[x + 1:x + w - 1, y + 1:y + w - 1, z + 1:z + w - 1].all()
    ]


def extract_patches(vol: DwiVolume, params: ParameterVolume, w: int = 5, stride: int = 3, volume_id=0) -> list:
    """Cut ``w^3`` input patches and their central ``(w-2)^3 x 3`` targets.

    Only patches whose central block lies entirely in the foreground (the
    intersection of both masks) are kept. Order is z, then y, then x
    ascending. Inputs hold the diffusion channels only.
    """
    data = vol.diffusion_data()
    target = params.stack()
    out = []
    for x, y, z in patch_corners(vol, params, w, stride):
        inner = (slice(x + 1, x + w - 1), slice(y + 1, y + w - 1), slice(z + 1, z + w - 1))
        outer = (slice(x, x + w), slice(y, y + w), slice(z, z + w))
        out.append(PatchExample(data[outer].copy(), target[inner].copy(), (volume_id, (x, y, z))))
    return out


class ArrayPatches:
    """Training patches held in memory as ``(X, Y)`` arrays."""

    def __init__(self, X, Y):
        self.X = np.asarray(X)
        self.Y = np.asarray(Y)
        if len(self.X) != len(self.Y):
            raise DimensionError(f"{len(self.X)} input patches but {len(self.Y)} targets")

    def __len__(self):
        return len(self.X)

    @property
    def n_channels(self) -> int:
        return self.X.shape[-1]

    def patches(self, idx):
        idx = np.asarray(idx)
        return self.X[idx], self.Y[idx]


class PatchSource:
    """Random access to the patches of several volumes without copying them out.

    Patch ``i`` is identical to the ``i``-th example of
    :func:`extract_patches` applied to each volume in turn. Signals are
    held in float32, the precision of the on-disk format.
    """

    def __init__(self, volumes, params, w: int = 5, stride: int = 3):
        volumes, params = list(volumes), list(params)
        if len(volumes) != len(params):
            raise DimensionError("need one parameter volume per DWI volume")
        self.w = w
        self.data = [v.diffusion_data().astype(np.float32) for v in volumes]
        self.targets = [p.stack() for p in params]
        index = [(k,) + c for k, (v, p) in enumerate(zip(volumes, params)) for c in patch_corners(v, p, w, stride)]
        self.index = np.array(index, dtype=np.int64).reshape(-1, 4)
        if self.data and len({d.shape[-1] for d in self.data}) > 1:
            raise DimensionError("all volumes must share one acquisition")

    def __len__(self):
        return len(self.index)

    @property
    def n_channels(self) -> int:
        return self.data[0].shape[-1]

    def patches(self, idx):
        w = self.w
        X = np.empty((len(idx), w, w, w, self.n_channels), dtype=np.float32)
        Y = np.empty((len(idx), w - 2, w - 2, w - 2, 3))
        for j, i in enumerate(np.asarray(idx)):
            k, x, y, z = self.index[i]
            X[j] = self.data[k][x:x + w, y:y + w, z:z + w]
            Y[j] = self.targets[k][x + 1:x + w - 1, y + 1:y + w - 1, z + 1:z + w - 1]
        return X, Y


def stack_patches(examples):
    """Stack a list of :class:`PatchExample` into ``(X, Y)`` arrays."""
    if not examples:
        raise DimensionError("no patches to stack")
    X = np.stack([e.input_patch for e in examples])
    Y = np.stack([e.target_patch for e in examples])
    return X, Y


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robnoddi.dataio import (
    ArrayPatches,
    PatchSource,
    array_to_params,
    corner_grid,
    extract_patches,
    format_gradient_table,
    normalize_by_b0,
    params_to_array,
    parse_gradient_table,
    read_keyvalue,
    read_rvol,
    reorder_channels,
    rvol_header,
    stack_patches,
    write_keyvalue,
    write_rvol,
)
from robnoddi.exceptions import (
    CorruptFileError,
    DimensionError,
    MalformedTableError,
    ManifestError,
    MissingB0Error,
    PatchTooLargeError,
    UngroupedChannelError,
    VersionError,
)
from robnoddi.phantom import DwiVolume, ParameterVolume, generate_dwi, generate_parameter_volume
from robnoddi.sphere import GradientScheme


def _table(bvals, dirs):
    bv = " ".join(f"{b:g}" for b in bvals) + "\n"
    bvec = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in np.asarray(dirs).T) + "\n"
    return bv, bvec


# gradient tables -------------------------------------------------------------


def test_parse_hcp_like_table():
    sch = GradientScheme.uniform([1000, 2000], [90, 90], seed=0)
    rng = np.random.default_rng(0)
    # scanner-style jitter on b and shuffled channel order
    b = np.concatenate([np.zeros(18) + rng.uniform(0, 10, 18), sch.bvals()[:] + rng.uniform(-20, 20, 180)])
    d = np.concatenate([np.zeros((18, 3)), sch.bvecs().T])
    perm = rng.permutation(len(b))
    parsed, cmap = parse_gradient_table(*_table(b[perm], d[perm]))
    assert parsed.b0_count == 18
    assert [s.bvalue for s in parsed.shells] == [1000.0, 2000.0]
    assert parsed.shell_sizes == (90, 90)
    assert sorted(cmap.values()) == list(range(198))
    # channel map: original channel index of shell s, direction j
    s, j = 1, 5
    orig = cmap[(s, j)]
    np.testing.assert_allclose(parsed.shells[s].directions[j], d[perm][orig], atol=1e-12)


def test_all_zero_bvals():
    parsed, cmap = parse_gradient_table(*_table(np.zeros(4), np.zeros((4, 3))))
    assert parsed.n_shells == 0 and parsed.b0_count == 4


def test_ungrouped_channel():
    d = np.eye(3)
    with pytest.raises(UngroupedChannelError):
        parse_gradient_table(*_table([1000, 1500, 2000], d))


def test_malformed_tables():
    with pytest.raises(MalformedTableError):
        parse_gradient_table("0 1000\n", "1 0\n0 1\n")
    with pytest.raises(MalformedTableError):
        parse_gradient_table("0 1000 x\n", "0 0 0\n0 0 0\n1 1 1\n")
    with pytest.raises(MalformedTableError):
        parse_gradient_table("1000\n", "0.5\n0\n0\n")


def test_table_roundtrip_fixed_point():
    sch = GradientScheme.uniform([1000, 2000], [12, 15], b0_count=3, seed=2)
    text = format_gradient_table(sch)
    parsed, cmap = parse_gradient_table(*text)
    assert format_gradient_table(parsed) == text
    for s in range(2):
        np.testing.assert_array_equal(parsed.shells[s].directions, sch.shells[s].directions)
    data = np.arange(30)[None, :] * np.ones((2, 1))
    np.testing.assert_array_equal(reorder_channels(data, parsed, cmap), data)


# RVOL --------------------------------------------------------------------------


def test_rvol_roundtrip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5, 6)).astype(np.float32)
    p = tmp_path / "a.rvol"
    write_rvol(p, arr)
    back = read_rvol(p)
    assert back.dtype == np.float32 and back.tobytes() == arr.tobytes()
    q = tmp_path / "b.rvol"
    write_rvol(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_rvol_layout(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 2, 2, 3)
    p = tmp_path / "a.rvol"
    write_rvol(p, arr)
    blob = p.read_bytes()
    header = b"RVOL1 2 2 2 3 dtype=f32 order=xyzc\n"
    assert blob.startswith(header) and rvol_header(arr.shape) == header
    payload = blob[len(header):]
    assert len(payload) == 96
    # x fastest, then y, z, channel
    vals = np.frombuffer(payload, "<f4")
    assert vals[1] == arr[1, 0, 0, 0] and vals[2] == arr[0, 1, 0, 0] and vals[8] == arr[0, 0, 0, 1]


def test_rvol_errors(tmp_path):
    p = tmp_path / "a.rvol"
    write_rvol(p, np.zeros((2, 2, 2, 3), np.float32))
    blob = p.read_bytes()
    p.write_bytes(blob[:-4])
    with pytest.raises(CorruptFileError):
        read_rvol(p)
    p.write_bytes(blob.replace(b"RVOL1", b"RVOL2"))
    with pytest.raises(VersionError):
        read_rvol(p)


def test_params_roundtrip(tmp_path):
    pv = generate_parameter_volume((8, 9, 10), seed=2)
    p = tmp_path / "gt.rvol"
    write_rvol(p, params_to_array(pv))
    back = array_to_params(read_rvol(p))
    np.testing.assert_allclose(back.stack(), pv.stack(), atol=1e-7)
    np.testing.assert_array_equal(back.mask, pv.mask)


def test_keyvalue(tmp_path):
    p = tmp_path / "m.txt"
    write_keyvalue(p, {"a": 1, "b.c": "x y"})
    with open(p, "a") as f:
        f.write("# comment\n\nd = 4  # trailing\n")
    assert read_keyvalue(p) == {"a": "1", "b.c": "x y", "d": "4"}
    p.write_text("no equals sign\n")
    with pytest.raises(ManifestError):
        read_keyvalue(p)


# normalization -------------------------------------------------------------------


def _vol(dims=(8, 8, 8), seed=0, snr=None):
    sch = GradientScheme.uniform([1000, 2000], [10, 12], b0_count=3, seed=1)
    pv = generate_parameter_volume(dims, seed=seed)
    return pv, generate_dwi(pv, sch, snr=snr, seed=seed)


def test_normalize_noiseless_identity():
    _, dwi = _vol()
    out = normalize_by_b0(dwi)
    assert out.normalized
    np.testing.assert_allclose(out.data[dwi.mask], dwi.data[dwi.mask], atol=1e-15)


def test_normalize_scale_invariant():
    _, dwi = _vol(snr=30)
    scaled = DwiVolume(7.0 * dwi.data, dwi.scheme, mask=dwi.mask)
    np.testing.assert_allclose(normalize_by_b0(scaled).data, normalize_by_b0(dwi).data, atol=1e-12)


def test_normalize_masks_zero_b0():
    _, dwi = _vol()
    data = dwi.data.copy()
    x, y, z = 4, 4, 4
    data[x, y, z, :3] = 0
    out = normalize_by_b0(DwiVolume(data, dwi.scheme, mask=dwi.mask))
    assert not out.mask[x, y, z] and np.all(out.data[x, y, z] == 0)
    assert out.data.max() <= 2.0


def test_normalize_needs_b0():
    sch = GradientScheme.uniform([1000], [6])
    with pytest.raises(MissingB0Error):
        normalize_by_b0(DwiVolume(np.ones((2, 2, 2, 6)), sch))


# patches ---------------------------------------------------------------------------


def test_corner_grid():
    assert corner_grid(8, 5, 3) == [0, 3]
    assert corner_grid(10, 5, 3) == [0, 3]
    assert corner_grid(10, 5, 3, cover=True) == [0, 3, 5]


def test_patch_shapes_and_alignment():
    pv, dwi = _vol()
    ex = extract_patches(dwi, pv, 5, 3)
    for e in ex:
        assert e.input_patch.shape == (5, 5, 5, 22)
        assert e.target_patch.shape == (3, 3, 3, 3)
        x, y, z = e.provenance[1]
        np.testing.assert_array_equal(e.target_patch, pv.stack()[x + 1:x + 4, y + 1:y + 4, z + 1:z + 4])
        np.testing.assert_array_equal(e.input_patch, dwi.data[x:x + 5, y:y + 5, z:z + 5, 3:])


def test_eight_corners_before_masking():
    dims = (8, 8, 8)
    pv, dwi = _vol(dims)
    full = ParameterVolume(pv.vic, pv.viso, pv.od, pv.mu, np.ones(dims, bool))
    dwi.mask = np.ones(dims, bool)
    ex = extract_patches(dwi, full, 5, 3)
    assert len(ex) == 8
    # z outermost, x innermost
    assert [e.provenance[1] for e in ex[:2]] == [(0, 0, 0), (3, 0, 0)]


def test_empty_mask_gives_no_patches():
    pv, dwi = _vol()
    empty = ParameterVolume(pv.vic, pv.viso, pv.od, pv.mu, np.zeros(pv.dims, bool))
    assert extract_patches(dwi, empty) == []
    with pytest.raises(DimensionError):
        stack_patches([])


def test_patch_errors():
    pv, dwi = _vol()
    with pytest.raises(PatchTooLargeError):
        extract_patches(dwi, pv, 9, 3)
    with pytest.raises(DimensionError):
        extract_patches(dwi, pv, 4, 3)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("dims", [(13, 12, 11), (8, 8, 8), (24, 24, 24)])
def test_interior_coverage(stride, dims):
    """With stride <= w - 2 every non-border voxel of a foreground volume is a target."""
    pv, dwi = _vol(dims)
    full = ParameterVolume(pv.vic, pv.viso, pv.od, pv.mu, np.ones(dims, bool))
    dwi.mask = np.ones(dims, bool)
    covered = np.zeros(dims, int)
    for e in extract_patches(dwi, full, 5, stride):
        x, y, z = e.provenance[1]
        covered[x + 1:x + 4, y + 1:y + 4, z + 1:z + 4] += 1
    assert np.all(covered[1:-1, 1:-1, 1:-1] >= 1)
    assert np.all(covered[0] == 0) and np.all(covered[:, :, -1] == 0)


def test_masked_extraction_keeps_only_foreground_blocks():
    pv, dwi = _vol((13, 12, 11))
    fg = pv.mask & dwi.mask
    for e in extract_patches(dwi, pv, 5, 1):
        x, y, z = e.provenance[1]
        assert fg[x + 1:x + 4, y + 1:y + 4, z + 1:z + 4].all()


def test_patch_source_matches_extraction():
    vols = [_vol(seed=s) for s in (1, 2)]
    src = PatchSource([v for _, v in vols], [p for p, _ in vols], 5, 2)
    X, Y = stack_patches(extract_patches(vols[0][1], vols[0][0], 5, 2) + extract_patches(vols[1][1], vols[1][0], 5, 2))
    assert len(src) == len(X)
    idx = np.array([len(X) - 1, 0, 3])
    xs, ys = src.patches(idx)
    np.testing.assert_array_equal(xs, X[idx].astype(np.float32))
    np.testing.assert_array_equal(ys, Y[idx])
    arr = ArrayPatches(X, Y)
    assert len(arr) == len(X) and arr.n_channels == 22


@settings(max_examples=10, deadline=None)
@given(w=st.sampled_from([3, 5, 7]), stride=st.integers(1, 5))
def test_patch_targets_are_centres(w, stride):
    pv, dwi = _vol((10, 10, 10))
    for e in extract_patches(dwi, pv, w, stride)[:5]:
        x, y, z = e.provenance[1]
        c = w // 2
        np.testing.assert_array_equal(e.target_patch[c - 1, c - 1, c - 1], pv.stack()[x + c, y + c, z + c])

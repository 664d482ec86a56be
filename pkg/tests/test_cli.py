import os

import numpy as np
import pytest

from robnoddi import cli
from robnoddi.config import (
    ABLATION_GRID,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from robnoddi.exceptions import ConfigError
from robnoddi.model import METHODS

TINY = {
    "phantom.dims": "10 10 10",
    "phantom.n_train": "2",
    "phantom.n_val": "1",
    "phantom.n_test": "1",
    "phantom.directions": "45 45",
    "phantom.b0": "4",
    "pipeline.stride": "3",
    "pipeline.n_max": "30",
    "train.hidden": "16",
    "train.epochs": "2",
}


def _write_cfg(path, items):
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()))
    return str(path)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg_path = _write_cfg(root / "tiny.cfg", TINY)
    out = str(root / "out")
    assert cli.main(["phantom", "--config", cfg_path, "--out", out]) == 0
    for m in METHODS:
        assert cli.main(["train", "--config", cfg_path, "--out", out, "--method", m, "--threads", "1"]) == 0
    return cfg_path, out, load_config(cfg_path)


# config ----------------------------------------------------------------------------------


def test_default_config():
    cfg = load_config(None)
    assert cfg.phantom.dims == (24, 24, 24)
    assert (cfg.phantom.n_train, cfg.phantom.n_val, cfg.phantom.n_test) == (6, 2, 2)
    assert cfg.phantom.snr == 30 and cfg.phantom.directions == (90, 90)
    assert cfg.pipeline.w == 5 and cfg.pipeline.n_fixed == 30 and cfg.pipeline.lam == 6e-3
    assert cfg.train.batch_size == 128 and cfg.train.lr == 5e-4
    assert cfg.eval.ablation == ABLATION_GRID and len(ABLATION_GRID) == 8


def test_config_roundtrip(tmp_path):
    cfg = config_from_dict(TINY)
    path = tmp_path / "c.cfg"
    save_config(path, cfg)
    assert load_config(path) == cfg
    assert config_to_dict(load_config(path)) == config_to_dict(cfg)


@pytest.mark.parametrize("items", [
    {"phantom.colour": "red"},
    {"bogus.key": "1"},
    {"train.epochs": "many"},
    {"phantom.dims": "4 4 4"},
    {"pipeline.w": "4"},
    {"pipeline.n_min": "10"},
    {"train.standardize": "maybe"},
    {"eval.s1": "91"},
])
def test_config_errors(items):
    with pytest.raises(ConfigError):
        config_from_dict(items)


def test_config_overrides():
    cfg = ExperimentConfig().with_overrides(train={"epochs": 3}, out="x")
    assert cfg.train.epochs == 3 and cfg.out == "x" and cfg.train.lr == 5e-4


# phantom -------------------------------------------------------------------------------


def test_phantom_default_counts_and_rerun_identical(tmp_path):
    cfg = ExperimentConfig().with_overrides(phantom={"dims": (8, 8, 8), "directions": (30, 30), "b0": 2})
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    man = cli.cmd_phantom(cfg, a)
    cli.cmd_phantom(cfg, b)
    assert [len(man[f"{s}.volumes"].split()) for s in cli.SPLITS] == [6, 2, 2]
    files = sorted(os.listdir(os.path.join(a, "data")))
    assert len([f for f in files if f.endswith(".rvol")]) == 20 and "manifest.txt" in files
    for f in files:
        with open(os.path.join(a, "data", f), "rb") as fa, open(os.path.join(b, "data", f), "rb") as fb:
            assert fa.read() == fb.read(), f


def test_phantom_bad_dims_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.cfg", {"phantom.dims": "4 4 4"})
    assert cli.main(["phantom", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "phantom.dims" in capsys.readouterr().err


# train ----------------------------------------------------------------------------------


def test_training_log_and_checkpoints(experiment):
    _, out, cfg = experiment
    for m in METHODS:
        lines = open(os.path.join(out, "models", f"{m}_log.csv")).read().splitlines()
        assert lines[0] == "epoch,learning_rate,train_mse,val_mse"
        assert len(lines) == 1 + cfg.train.epochs


def test_feature_widths(experiment):
    _, out, _ = experiment
    ds = cli.Dataset(out)
    raw = cli.load_model(out, "raw_fixed", ds.scheme)
    assert raw.regressor_.input_shape_[-1] == 60
    for m in ("sh_fixed", "robnoddi"):
        assert cli.load_model(out, m, ds.scheme).regressor_.input_shape_[-1] == 56


def test_robnoddi_fixed_count_differs_only_in_policy(experiment):
    _, out, _ = experiment
    ds = cli.Dataset(out)
    rob = cli.load_model(out, "robnoddi", ds.scheme).set_params(n_min=30, n_max=30)
    shf = cli.load_model(out, "sh_fixed", ds.scheme)
    assert rob._spec() == shf._spec() and rob._settings() == shf._settings()
    assert rob._policy().mode == "adaptive" and shf._policy().mode == "fixed"
    assert rob._policy().n_min == rob._policy().n_max == len(shf.fixed_selection[0])


def test_train_without_dataset_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--method", "robnoddi"]) == 3
    assert "manifest" in capsys.readouterr().err


def test_corrupt_volume_exit_code(experiment, tmp_path):
    cfg_path, out, _ = experiment
    import shutil

    copy = str(tmp_path / "copy")
    shutil.copytree(os.path.join(out, "data"), os.path.join(copy, "data"))
    path = os.path.join(copy, "data", "train_00_dwi.rvol")
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-10])
    assert cli.main(["train", "--config", cfg_path, "--out", copy, "--method", "sh_fixed"]) == 3


# eval -----------------------------------------------------------------------------------


def test_ss_and_rs_rows(experiment):
    cfg_path, out, cfg = experiment
    ss = cli.cmd_eval(cfg, out, "sh_fixed", "ss")
    rs = cli.cmd_eval(cfg, out, "sh_fixed", "rs")
    assert ss.keys() == rs.keys()
    assert (ss["sampling_mode"], rs["sampling_mode"]) == ("SS", "RS")
    assert (ss["n_dirs_shell1"], ss["n_dirs_shell2"]) == (30, 30)
    for r in (ss, rs):
        assert r["mse"] > 0 and 0 < r["ssim"] <= 1


@pytest.mark.parametrize("method", ["sh_fixed", "robnoddi"])
def test_rs_mismatched_counts_run(experiment, method):
    _, out, cfg = experiment
    row = cli.cmd_eval(cfg, out, method, "rs", 16, 29, write=False)
    assert (row["n_dirs_shell1"], row["n_dirs_shell2"]) == (16, 29)


def test_raw_rs_count_mismatch_is_config_error(experiment, capsys):
    cfg_path, out, _ = experiment
    args = ["eval", "--config", cfg_path, "--out", out, "--method", "raw_fixed", "--mode", "rs"]
    assert cli.main(args + ["--s1", "16", "--s2", "29"]) == 2
    assert "60 channels" in capsys.readouterr().err
    assert cli.main(args) == 0


def test_rs_on_ss_directions_reproduces_ss(experiment):
    _, out, cfg = experiment
    ds = cli.Dataset(out)
    model = cli.load_model(out, "raw_fixed", ds.scheme)
    ss = cli.cmd_eval(cfg, out, "raw_fixed", "ss", write=False)
    # an independently assembled scheme holding exactly the training selection's directions
    sel = model.fixed_selection
    shells = [(sh.bvalue, sh.directions[list(s.indices)]) for sh, s in zip(ds.scheme.shells, sel)]
    scheme = cli.GradientScheme(tuple(shells), ds.scheme.b0_count)
    avg, _ = cli.evaluate_scheme(model, ds.params("test"), scheme, ds.snr, cfg.eval.noise_seed)
    assert (avg["mse"], avg["psnr"], avg["ssim"]) == (ss["mse"], ss["psnr"], ss["ssim"])


def test_rs_scheme_seeded():
    cfg = ExperimentConfig()
    a, b, c = cli.rs_scheme(cfg, 30, 30, 5), cli.rs_scheme(cfg, 30, 30, 5), cli.rs_scheme(cfg, 30, 30, 6)
    assert a.shell_sizes == (30, 30) and a.b0_count == 18
    np.testing.assert_array_equal(a.shells[0].directions, b.shells[0].directions)
    assert not np.array_equal(a.shells[0].directions, c.shells[0].directions)
    train = cli._training_scheme(cfg)
    # fresh directions are not the training directions
    dots = np.abs(a.shells[0].directions @ train.shells[0].directions.T)
    assert np.max(dots) < 1 - 1e-9


def test_eval_cli_prints_row(experiment, capsys):
    cfg_path, out, _ = experiment
    assert cli.main(["eval", "--config", cfg_path, "--out", out, "--method", "robnoddi", "--mode", "SS"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,sampling_mode,n_dirs_shell1,n_dirs_shell2,mse,psnr,ssim"
    assert lines[1].startswith("robnoddi,SS,30,30,")


def test_bad_mode_and_method(experiment):
    cfg_path, out, _ = experiment
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--out", out, "--method", "robnoddi", "--mode", "xs"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--out", out, "--method", "cnn"])
    assert e.value.code == 2


# ablate / report --------------------------------------------------------------------------


def test_ablation_rows_and_reproducibility(experiment):
    cfg_path, out, cfg = experiment
    rows = cli.cmd_ablate(cfg, out, "robnoddi")
    assert [(r["n_dirs_shell1"], r["n_dirs_shell2"]) for r in rows] == list(ABLATION_GRID)
    path = os.path.join(out, "results", "ablation_robnoddi.csv")
    first = open(path, "rb").read()
    assert cli.main(["ablate", "--config", cfg_path, "--out", out, "--method", "robnoddi"]) == 0
    assert open(path, "rb").read() == first
    summary = open(os.path.join(out, "results", "ablation_robnoddi_summary.txt")).read()
    assert "non_increasing_within_5pct" in summary


def test_ablation_summary_flags():
    rows = [dict(n_dirs_shell1=s, n_dirs_shell2=s, mse=m) for s, m in [(20, 1.0), (25, 1.04), (30, 0.9)]]
    rows.append(dict(n_dirs_shell1=16, n_dirs_shell2=29, mse=0.95))
    out = cli.ablation_summary(rows)
    assert out["non_increasing_within_5pct"] == "True"
    assert out["mismatched_within_15pct_of_30_30"] == "True"
    rows[1]["mse"] = 1.06
    assert cli.ablation_summary(rows)["non_increasing_within_5pct"] == "False"


def test_report(experiment, tmp_path):
    cfg_path, out, cfg = experiment
    for m in METHODS:
        for mode in ("ss", "rs"):
            assert cli.main(["eval", "--config", cfg_path, "--out", out, "--method", m, "--mode", mode]) == 0
    text = cli.cmd_report(out)
    table = [l for l in text.split("## Direction")[0].splitlines() if l.startswith("| ") and "method" not in l]
    assert len(table) == 6
    assert text == cli.cmd_report(out)
    img = os.path.join(out, "report", "images")
    truth = cli.Dataset(out).params("test")[0].crop(1)
    err = cli.read_pgm(os.path.join(img, "robnoddi_RS_30_30_seed777_od_abserr.pgm"))
    assert err.shape == (truth.dims[1], truth.dims[0])
    before = {f: open(os.path.join(img, f), "rb").read() for f in os.listdir(img)}
    cli.cmd_report(out)
    assert before == {f: open(os.path.join(img, f), "rb").read() for f in os.listdir(img)}


def test_report_empty_exit_code(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 3


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    cli.write_pgm(tmp_path / "a.pgm", img)
    blob = (tmp_path / "a.pgm").read_bytes()
    assert blob.startswith(b"P5\n4 3\n255\n") and len(blob) == 11 + 12
    np.testing.assert_allclose(cli.read_pgm(tmp_path / "a.pgm"), img, atol=0.5 / 255)


def test_threads_flag_validation(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path), "--threads", "0"]) == 2

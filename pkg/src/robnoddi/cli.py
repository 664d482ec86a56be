"""Command-line experiment driver.

``robnoddi phantom|train|eval|ablate|report`` with a shared output directory::

    <out>/data/      manifest.txt, bvals, bvecs, <split>_<k>_{dwi,params}.rvol
    <out>/models/    <method>.ckpt, <method>_log.csv
    <out>/results/   eval/<tag>.csv, pred/<tag>_test<k>.rvol, ablation_<method>.csv
    <out>/report/    report.md, images/*.pgm

Exit codes: 0 success, 2 configuration or usage error, 3 data error.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig, load_config, save_config
from .dataio import (
    PatchSource,
    array_to_params,
    ensure_dir,
    extract_patches,
    normalize_by_b0,
    params_to_array,
    read_gradient_table,
    read_keyvalue,
    read_rvol,
    reorder_channels,
    stack_patches,
    write_gradient_table,
    write_keyvalue,
    write_rvol,
)
from .estimator import NoddiPatchRegressor, load_checkpoint, save_checkpoint
from .exceptions import ConfigError, DataError, ManifestError, RobNoddiError
from .metrics import CSV_COLUMNS, average_reports, evaluate, format_row, read_csv, write_csv
from .model import METHODS, RobNODDI, predict_volume
from .phantom import PARAM_NAMES, DwiVolume, generate_dwi, generate_parameter_volume
from .pipeline import fixed_selections
from .sphere import GradientScheme, SubsampleSelection, random_subsample

log = logging.getLogger("robnoddi")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
MANIFEST_FORMAT = "robnoddi-dataset-1"
SPLITS = ("train", "val", "test")


# -- dataset ---------------------------------------------------------------------


def _paths(out):
    return {k: os.path.join(out, k) for k in ("data", "models", "results", "report")}


def _training_scheme(cfg: ExperimentConfig) -> GradientScheme:
    p = cfg.phantom
    return GradientScheme.uniform(p.bvalues, p.directions, b0_count=p.b0, seed=p.scheme_seed)


def cmd_phantom(cfg: ExperimentConfig, out: str) -> dict:
    """Write parameter maps, noisy acquisitions, gradient table and manifest."""
    p = cfg.phantom
    data = ensure_dir(_paths(out)["data"])
    scheme = _training_scheme(cfg)
    write_gradient_table(scheme, os.path.join(data, "bvals"), os.path.join(data, "bvecs"))
    manifest = {
        "format": MANIFEST_FORMAT,
        "dims": " ".join(map(str, p.dims)),
        "snr": repr(float(p.snr)),
        "bvals": "bvals",
        "bvecs": "bvecs",
    }
    k = 0
    for split, n in zip(SPLITS, (p.n_train, p.n_val, p.n_test)):
        names = []
        for i in range(n):
            pv = generate_parameter_volume(p.dims, seed=p.seed + k)
            dwi = generate_dwi(pv, scheme, snr=p.snr, seed=p.noise_seed + k)
            stem = f"{split}_{i:02d}"
            write_rvol(os.path.join(data, stem + "_params.rvol"), params_to_array(pv))
            write_rvol(os.path.join(data, stem + "_dwi.rvol"), dwi.data)
            names.append(stem)
            k += 1
        manifest[f"{split}.volumes"] = " ".join(names)
    write_keyvalue(os.path.join(data, "manifest.txt"), manifest)
    save_config(os.path.join(data, "config.txt"), cfg)
    log.info("wrote %d volumes to %s", k, data)
    return manifest


class Dataset:
    """Read access to a dataset written by :func:`cmd_phantom`."""

    def __init__(self, out: str):
        self.root = _paths(out)["data"]
        path = os.path.join(self.root, "manifest.txt")
        if not os.path.exists(path):
            raise ManifestError(f"no dataset manifest at {path}; run `robnoddi phantom` first")
        self.manifest = read_keyvalue(path)
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{path}: unsupported dataset format {self.manifest.get('format')!r}")
        try:
            self.snr = float(self.manifest["snr"])
            self.split_names = {s: self.manifest.get(f"{s}.volumes", "").split() for s in SPLITS}
            self.scheme, self.channel_map = read_gradient_table(
                os.path.join(self.root, self.manifest["bvals"]), os.path.join(self.root, self.manifest["bvecs"])
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}: incomplete manifest ({exc})") from exc
        except OSError as exc:
            raise ManifestError(f"{path}: cannot read gradient table ({exc})") from exc

    def _read(self, name):
        path = os.path.join(self.root, name)
        if not os.path.exists(path):
            raise ManifestError(f"manifest lists {name} but {path} is missing")
        return read_rvol(path)

    def params(self, split):
        return [array_to_params(self._read(n + "_params.rvol")) for n in self.split_names[split]]

    def dwi(self, split):
        out = []
        for name, pv in zip(self.split_names[split], self.params(split)):
            raw = reorder_channels(self._read(name + "_dwi.rvol"), self.scheme, self.channel_map)
            if raw.shape[3] != self.scheme.n_channels:
                raise DataError(f"{name}: {raw.shape[3]} channels, gradient table has {self.scheme.n_channels}")
            out.append(normalize_by_b0(DwiVolume(raw.astype(np.float64), self.scheme, mask=pv.mask)))
        return out


# -- training --------------------------------------------------------------------


def _regressor(cfg: ExperimentConfig, seed: int) -> NoddiPatchRegressor:
    t = cfg.train
    return NoddiPatchRegressor(
        architecture=t.architecture, hidden_layer_sizes=tuple(t.hidden), code_size=t.code_size,
        n_iterations=t.n_iterations, learning_rate=t.lr, lr_schedule=t.lr_schedule, lr_decay=t.lr_decay,
        lr_step=t.lr_step, batch_size=t.batch_size, epochs=t.epochs, standardize=cfg.standardize_flag(),
        random_state=seed,
    )


def _check_method(method):
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {', '.join(METHODS)}, got {method!r}")


def cmd_train(cfg: ExperimentConfig, out: str, method: str, seed: int | None = None) -> RobNODDI:
    """Train one method and write its checkpoint and per-epoch log."""
    _check_method(method)
    seed = cfg.train.seed if seed is None else seed
    ds = Dataset(out)
    q = cfg.pipeline
    scheme = ds.scheme.diffusion_only()
    if min(scheme.shell_sizes) < max(q.n_fixed, q.n_max):
        raise ConfigError(f"dataset shells {scheme.shell_sizes} are smaller than the requested selections")
    sel = fixed_selections(scheme, q.n_fixed, how=q.selection, seed=seed)
    source = PatchSource(ds.dwi("train"), ds.params("train"), q.w, q.stride)
    if len(source) == 0:
        raise DataError("training volumes yield no foreground patches")
    validation = None
    if ds.split_names["val"]:
        ex = [e for v, p in zip(ds.dwi("val"), ds.params("val")) for e in extract_patches(v, p, q.w, q.w - 2)]
        if ex:
            validation = stack_patches(ex)
    model = RobNODDI(method, scheme, sel, q.n_min, q.n_max, q.sh_order, q.lam, _regressor(cfg, seed), seed)
    log.info("training %s on %d patches for %d epochs", method, len(source), cfg.train.epochs)
    rows = []

    def progress(epoch, loss, val):
        lr = model.regressor_._train_config().lr_at(epoch)
        rows.append((epoch + 1, lr, loss, val))
        log.info("%s epoch %d/%d  lr %.2e  train %.6f  val %s", method, epoch + 1, cfg.train.epochs, lr, loss,
                 "-" if val is None else f"{val:.6f}")

    model.fit(source, validation=validation, callback=progress)
    models = ensure_dir(_paths(out)["models"])
    extra = {
        "method": method,
        "seed": seed,
        "n_min": q.n_min,
        "n_max": q.n_max,
        "sh_order": q.sh_order,
        "lam": q.lam,
        "w": q.w,
        "fixed_selection": [list(s.indices) for s in sel],
    }
    save_checkpoint(os.path.join(models, f"{method}.ckpt"), model.regressor_, extra)
    with open(os.path.join(models, f"{method}_log.csv"), "w") as f:
        f.write("epoch,learning_rate,train_mse,val_mse\n")
        for e, lr, loss, val in rows:
            f.write(f"{e},{lr:.8g},{loss:.8g},{'' if val is None else f'{val:.8g}'}\n")
    return model


def load_model(out: str, method: str, scheme: GradientScheme) -> RobNODDI:
    _check_method(method)
    path = os.path.join(_paths(out)["models"], f"{method}.ckpt")
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}; run `robnoddi train --method {method}` first")
    reg, extra = load_checkpoint(path)
    if extra.get("method") != method:
        raise DataError(f"{path} holds a {extra.get('method')!r} model")
    scheme = scheme.diffusion_only()
    sel = tuple(SubsampleSelection(s, tuple(idx)) for s, idx in enumerate(extra["fixed_selection"]))
    model = RobNODDI(method, scheme, sel, extra["n_min"], extra["n_max"], extra["sh_order"], extra["lam"],
                     reg, extra["seed"])
    model.regressor_ = reg
    model.loss_curve_ = reg.loss_curve_
    model.w_ = int(extra["w"])
    return model


# -- evaluation ------------------------------------------------------------------


def rs_scheme(cfg: ExperimentConfig, s1: int, s2: int, seed: int) -> GradientScheme:
    """Random test directions: ``s1``/``s2`` drawn from a fresh, differently seeded scheme."""
    p = cfg.phantom
    fresh = GradientScheme.uniform(p.bvalues, p.directions, b0_count=p.b0, seed=seed)
    rng = np.random.default_rng([int(seed), int(s1), int(s2)])
    sels = [random_subsample(fresh, k, n, rng) for k, n in enumerate((s1, s2))]
    return GradientScheme(fresh.subset(sels).shells, p.b0)


def ss_scheme(model: RobNODDI, b0: int) -> GradientScheme:
    return GradientScheme(model.ss_scheme().shells, b0)


def evaluate_scheme(model: RobNODDI, truths, scheme: GradientScheme, snr: float, noise_seed: int):
    """Acquire every test volume on ``scheme``, predict, and score.

    Returns the averaged metrics and the predicted volumes. The noise seed
    of test volume ``k`` is ``noise_seed + k`` whatever the scheme.
    """
    reports, preds = [], []
    for k, pv in enumerate(truths):
        dwi = normalize_by_b0(generate_dwi(pv, scheme, snr=snr, seed=noise_seed + k))
        pred = predict_volume(model, dwi, w=getattr(model, "w_", 5))
        reports.append(evaluate(pred, pv.crop(1), pred.mask))
        preds.append(pred)
    return average_reports(reports), preds


def _tag(method, mode, s1, s2, seed):
    return f"{method}_{mode}_{s1}_{s2}" + ("" if mode == "SS" else f"_seed{seed}")


def cmd_eval(cfg: ExperimentConfig, out: str, method: str, mode: str, s1=None, s2=None, seed=None,
             write=True) -> dict:
    """Score one checkpoint under the SS or RS protocol; returns the CSV row."""
    mode = mode.upper()
    if mode not in ("SS", "RS"):
        raise ConfigError(f"--mode must be ss or rs, got {mode.lower()!r}")
    ds = Dataset(out)
    model = load_model(out, method, ds.scheme)
    truths = ds.params("test")
    if not truths:
        raise DataError("the dataset has no test volumes")
    seed = cfg.eval.rs_seed if seed is None else seed
    if mode == "SS":
        scheme = ss_scheme(model, ds.scheme.b0_count)
    else:
        s1 = cfg.eval.s1 if s1 is None else s1
        s2 = cfg.eval.s2 if s2 is None else s2
        for s, shell in zip((s1, s2), ds.scheme.shells):
            if not 1 <= s <= len(shell):
                raise ConfigError(f"test direction count {s} outside 1..{len(shell)}")
        scheme = rs_scheme(cfg, s1, s2, seed)
    s1, s2 = scheme.shell_sizes
    avg, preds = evaluate_scheme(model, truths, scheme, ds.snr, cfg.eval.noise_seed)
    row = dict(method=method, sampling_mode=mode, n_dirs_shell1=s1, n_dirs_shell2=s2,
               mse=avg["mse"], psnr=avg["psnr"], ssim=avg["ssim"])
    if write:
        res = _paths(out)["results"]
        tag = _tag(method, mode, s1, s2, seed)
        write_csv(os.path.join(ensure_dir(os.path.join(res, "eval")), tag + ".csv"), [row])
        pred_dir = ensure_dir(os.path.join(res, "pred"))
        for k, pred in enumerate(preds):
            write_rvol(os.path.join(pred_dir, f"{tag}_test{k}.rvol"), params_to_array(pred))
    log.info("%s %s %d/%d  mse %.6f  psnr %.3f  ssim %.4f", method, mode, s1, s2, row["mse"], row["psnr"], row["ssim"])
    return row


def ablation_summary(rows) -> dict:
    """Trend checks over an ablation table (averaged over seeds per grid point)."""
    by = {}
    for r in rows:
        by.setdefault((int(r["n_dirs_shell1"]), int(r["n_dirs_shell2"])), []).append(float(r["mse"]))
    mean = {k: float(np.mean(v)) for k, v in by.items()}
    equal = sorted(k for k in mean if k[0] == k[1])
    steps = [mean[b] / mean[a] for a, b in zip(equal, equal[1:])]
    out = {"equal_counts": " ".join(f"{a}/{b}" for a, b in equal),
           "non_increasing_within_5pct": str(all(s <= 1.05 for s in steps))}
    if (30, 30) in mean:
        mism = [k for k in mean if k[0] != k[1]]
        rel = [abs(mean[k] - mean[(30, 30)]) / mean[(30, 30)] for k in mism]
        out["mismatched_within_15pct_of_30_30"] = str(all(r < 0.15 for r in rel))
    return out


def cmd_ablate(cfg: ExperimentConfig, out: str, method: str, seeds=None) -> list:
    """RS evaluation over the direction-count grid; one row per (s1, s2, seed)."""
    seeds = tuple(cfg.eval.ablation_seeds) if seeds is None else tuple(seeds)
    rows = [cmd_eval(cfg, out, method, "RS", s1, s2, seed, write=False)
            for s1, s2 in cfg.eval.ablation for seed in seeds]
    res = ensure_dir(_paths(out)["results"])
    write_csv(os.path.join(res, f"ablation_{method}.csv"), rows)
    write_keyvalue(os.path.join(res, f"ablation_{method}_summary.txt"), ablation_summary(rows))
    return rows


# -- report ----------------------------------------------------------------------


def write_pgm(path, image) -> None:
    """8-bit binary PGM of ``image`` (values clipped to [0, 1], row 0 at top)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    magic, w, h, maxval, rest = blob.split(maxsplit=4)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(rest, np.uint8).reshape(int(h), int(w)) / 255.0


def _table(rows, columns=CSV_COLUMNS):
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in columns) + " |")
    return lines


def cmd_report(out: str) -> str:
    """Markdown summary of every evaluation plus mid-slice PGM images."""
    paths = _paths(out)
    res = paths["results"]
    eval_files = sorted(glob.glob(os.path.join(res, "eval", "*.csv")))
    rows = [r for f in eval_files for r in read_csv(f)]
    ablations = sorted(glob.glob(os.path.join(res, "ablation_*.csv")))
    if not rows and not ablations:
        raise DataError(f"no evaluation results under {res}; run `robnoddi eval` first")
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (order.get(r["method"], 99), r["sampling_mode"] != "SS",
                             int(r["n_dirs_shell1"]), int(r["n_dirs_shell2"])))
    report = ensure_dir(paths["report"])
    img_dir = ensure_dir(os.path.join(report, "images"))
    md = ["# RobNODDI experiment report", ""]
    md += ["## Same vs random test sampling", ""]
    md += _table(rows) if rows else ["No SS/RS evaluations found."]
    missing = [m for m in METHODS if not any(r["method"] == m for r in rows)]
    if missing:
        log.warning("report is partial: no evaluations for %s", ", ".join(missing))
        md += ["", f"Missing methods: {', '.join(missing)}."]
    for path in ablations:
        method = os.path.basename(path)[len("ablation_"):-len(".csv")]
        md += ["", f"## Direction-count ablation: {method}", ""]
        md += _table(read_csv(path))
        summary = path[:-4] + "_summary.txt"
        if os.path.exists(summary):
            md += [""] + [f"- {k}: {v}" for k, v in read_keyvalue(summary).items()]
    pred_files = sorted(glob.glob(os.path.join(res, "pred", "*_test0.rvol")))
    if pred_files:
        truth = None
        try:
            truth = Dataset(out).params("test")[0].crop(1)
        except RobNoddiError as exc:
            log.warning("skipping images: %s", exc)
        if truth is not None:
            md += ["", "## Mid-slice maps (test volume 0)", "",
                   "Each image is the axial mid-slice; error maps show |prediction - truth| on the same [0, 1] scale.", ""]
            z = truth.dims[2] // 2
            for i, name in enumerate(PARAM_NAMES):
                fn = f"truth_{name}.pgm"
                write_pgm(os.path.join(img_dir, fn), truth.stack()[:, :, z, i].T)
                md.append(f"- truth {name}: images/{fn}")
            for path in pred_files:
                tag = os.path.basename(path)[: -len("_test0.rvol")]
                pred = array_to_params(read_rvol(path))
                for i, name in enumerate(PARAM_NAMES):
                    p = pred.stack()[:, :, z, i]
                    err = np.abs(p - truth.stack()[:, :, z, i]) * truth.mask[:, :, z]
                    write_pgm(os.path.join(img_dir, f"{tag}_{name}_pred.pgm"), p.T)
                    write_pgm(os.path.join(img_dir, f"{tag}_{name}_abserr.pgm"), err.T)
                md.append(f"- {tag}: images/{tag}_<param>_pred.pgm, images/{tag}_<param>_abserr.pgm")
    text = "\n".join(md) + "\n"
    with open(os.path.join(report, "report.md"), "w") as f:
        f.write(text)
    return text


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment config (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides the config's `out`)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="robnoddi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("phantom", parents=[common], help="generate the synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train one method")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--seed", type=int, help="training seed (default train.seed)")
    p = sub.add_parser("eval", parents=[common], help="SS or RS evaluation of a trained method")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--mode", required=True, type=str.lower, choices=("ss", "rs"))
    p.add_argument("--s1", type=int, help="RS directions on shell 1 (default eval.s1)")
    p.add_argument("--s2", type=int, help="RS directions on shell 2 (default eval.s2)")
    p.add_argument("--seed", type=int, help="RS direction seed (default eval.rs_seed)")
    p = sub.add_parser("ablate", parents=[common], help="RS evaluation over the direction-count grid")
    p.add_argument("--method", default="robnoddi", choices=METHODS)
    p.add_argument("--seed", type=int, action="append", help="RS seed; repeat for several (default eval.ablation_seeds)")
    sub.add_parser("report", parents=[common], help="write the markdown report and images")
    return parser


def run(args) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.out
    if args.command == "phantom":
        cmd_phantom(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out, args.method, args.seed)
    elif args.command == "eval":
        row = cmd_eval(cfg, out, args.method, args.mode, args.s1, args.s2, args.seed)
        print(",".join(CSV_COLUMNS))
        print(",".join(format_row(row)))
    elif args.command == "ablate":
        cmd_ablate(cfg, out, args.method, args.seed)
    elif args.command == "report":
        print(cmd_report(out), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("robnoddi: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return run(args)
    except (DataError, OSError) as exc:
        print(f"robnoddi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, RobNoddiError, ValueError) as exc:
        print(f"robnoddi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

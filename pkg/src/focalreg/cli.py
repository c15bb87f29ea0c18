"""Command-line pipeline driver.

One binary, one subcommand per pipeline stage. Every run writes its fully
resolved configuration into its output directory so it can be reproduced
from that file alone. Config precedence: built-in defaults < --config JSON
file < explicit flags.

Exit codes: 0 ok, 2 usage, 3 missing file, 4 schema/format error,
5 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bspline, dataset as ds, metrics, synth, trainer
from .checkpoint import CheckpointError, load_params, save_params
from .focalnet import MODEL_TYPES, build_model
from .rng import Rng
from .tensor import NumericError, ShapeError, Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

_FORMAT_ERRORS = (ds.DatasetFormatError, bspline.VolumeFormatError,
                  CheckpointError, ShapeError, json.JSONDecodeError,
                  ValueError, TypeError, KeyError)
_NUMERIC_ERRORS = (NumericError, FloatingPointError, ZeroDivisionError,
                   np.linalg.LinAlgError)


def _write_resolved(out_dir, args):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items()
                if k != "func" and not k.startswith("_")}
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    _write_resolved(args.out, args)
    params = synth.SynthParams(dims=(args.size,) * 3)
    subjects = synth.generate_subjects(args.seed, args.subjects, params)
    synth.save_subjects(args.out, subjects, params, args.seed)
    print(f"wrote {len(subjects)} subjects to {args.out}")
    return EXIT_OK


def cmd_fit_landmarks(args):
    """Recover known random deformations from landmarks; the residual mTRE
    is the silver-ground-truth quality check."""
    _write_resolved(args.out, args)
    subjects, _ = synth.load_subjects(args.cohort)
    rng = Rng(args.seed)
    results = []
    for i, subj in enumerate(sorted(subjects, key=lambda s: s.id)):
        true = bspline.random_deformation(rng.split(i), subj.us,
                                          args.max_points, args.max_disp)
        moving = subj.landmarks_mm()
        fixed = moving + bspline.displacement_at(true, moving)
        lms = bspline.LandmarkSet(fixed, moving)
        fit = bspline.fit_landmark_bspline(lms, subj.us, args.spacing,
                                           args.ridge)
        results.append({"subject": subj.id,
                        "n_landmarks": len(lms),
                        "mtre_before_mm": bspline.mtre(
                            lms, bspline.BSplineGrid(
                                fit.grid_dims, fit.grid_spacing,
                                fit.grid_origin)),
                        "mtre_after_mm": bspline.mtre(lms, fit)})
    vals = [r["mtre_after_mm"] for r in results]
    summary = {"subjects": results,
               "mtre_mean_mm": float(np.mean(vals)),
               "mtre_std_mm": float(np.std(vals))}
    (Path(args.out) / "fit_report.json").write_text(
        json.dumps(summary, indent=2))
    print(f"residual mTRE {summary['mtre_mean_mm']:.2e} "
          f"± {summary['mtre_std_mm']:.2e} mm")
    return EXIT_OK


def cmd_build_dataset(args):
    _write_resolved(args.out, args)
    subjects, _ = synth.load_subjects(args.cohort)
    params = ds.BuildParams(deformations_per_volume=args.deformations,
                            max_points=args.max_points,
                            max_disp_mm=args.max_disp)
    samples, manifest = ds.build_dataset(subjects, args.seed, params)
    out = Path(args.out)
    ds.save_dataset(out / "dataset.fend", out / "manifest.json",
                    samples, manifest)
    counts = {}
    for rec in manifest["samples"]:
        counts[rec["split"]] = counts.get(rec["split"], 0) + 1
    print(f"wrote {len(samples)} samples ({counts}) to {out}")
    return EXIT_OK


def cmd_shift_testset(args):
    _write_resolved(args.out, args)
    subjects, _ = synth.load_subjects(args.cohort)
    manifest = json.loads(Path(args.manifest).read_text())
    samples, shifted = ds.shifted_test_set(subjects, manifest, args.seed,
                                           args.max_shift)
    out = Path(args.out)
    ds.save_dataset(out / "dataset.fend", out / "manifest.json",
                    samples, shifted)
    print(f"wrote {len(samples)} shifted test samples to {out}")
    return EXIT_OK


def _load_patchdataset(data_dir):
    d = Path(data_dir)
    return ds.PatchDataset.load(d / "dataset.fend", d / "manifest.json")


def cmd_train(args):
    _write_resolved(args.out, args)
    config = trainer.TrainConfig(
        model=args.model, learning_rate=args.lr, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, augment=not args.no_augment,
        model_config=json.loads(args.model_config)
        if args.model_config else {})
    data = _load_patchdataset(args.data)
    (Path(args.out) / "splits.json").write_text(
        json.dumps(data.manifest["splits"], indent=2, sort_keys=True))
    result = trainer.train(config, data, args.out,
                           log=None if args.quiet else print)
    print(f"best val MSE {result.best_val_mse:.5f} "
          f"at epoch {result.best_epoch}; checkpoint {result.best_params_path}")
    return EXIT_OK


def _load_trained(run_dir):
    run = Path(run_dir)
    tc = json.loads((run / "train_config.json").read_text())
    kind = tc["model"]
    _, cfg_cls = MODEL_TYPES[kind]
    cfg = cfg_cls(**json.loads((run / "model_config.json").read_text()))
    params = load_params(run / "best.fenp")
    return kind, build_model(kind, cfg, params=params), \
        json.loads((run / "splits.json").read_text())


def cmd_evaluate(args):
    _write_resolved(args.out, args)
    kind_a, model_a, splits_a = _load_trained(args.model_a)
    kind_b, model_b, splits_b = _load_trained(args.model_b)
    if splits_a != splits_b:
        raise ValueError("models were trained on different subject splits; "
                         "refusing to compare")
    data = _load_patchdataset(args.data)
    shifted = _load_patchdataset(args.shifted) if args.shifted else None
    models = {kind_a: model_a, kind_b: model_b}
    if len(models) != 2:
        raise ValueError("evaluate needs two models of different kinds")
    report, _ = metrics.evaluate_report(
        models, data, shifted, n_mc=args.n_mc, rng=Rng(args.seed),
        out_dir=args.out, workers=args.workers,
        log=None if args.quiet else print)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args):
    kind, model, _ = _load_trained(args.model_dir)
    if args.index is not None:
        data = _load_patchdataset(args.data)
        s = data.samples[args.index]
        mri, us = s.mri_patch, s.us_patch
    else:
        mri = bspline.load_volume(args.mri).data
        us = bspline.load_volume(args.us).data
    pred = metrics.mc_predict(model, mri, us, n=args.n_mc,
                              rng=Rng(args.seed))
    print(f"{pred.mean_mm:.4f} ± {pred.std_mm:.4f} mm")
    return EXIT_OK


def cmd_gradcheck(args):
    from . import ops
    from .gradcheck import grad_check
    rng = np.random.default_rng(args.seed)
    checks = {}

    def conv_graph(ts):
        return ops.sum_all(ops.conv3d(ts[0], ts[1], ts[2], stride=2,
                                      padding=1))

    checks["conv3d"] = grad_check(conv_graph, [
        rng.standard_normal((2, 3, 5, 5, 5)),
        rng.standard_normal((4, 3, 3, 3, 3)), rng.standard_normal(4)])

    def model_graph(kind):
        cfg = _small_config(kind)
        model = build_model(kind, cfg, rng=Rng(args.seed))
        x = rng.standard_normal((2, 2, 9, 9, 9))
        y = rng.standard_normal((2, 1))

        def build(ts):
            for name, t in zip(sorted(model.params), ts):
                model.params[name] = t
            return ops.mse_loss(model.forward(Tensor(x), mode="infer"), y)
        # check at a perturbed point: zero-initialized residual projections
        # would otherwise make their branch gradients trivially zero
        # small epsilon: layernorm's curvature dominates truncation error
        return grad_check(build,
                          [model.params[k].data.astype(np.float64)
                           + 0.2 * rng.standard_normal(model.params[k].shape)
                           for k in sorted(model.params)], epsilon=2e-5)

    checks["focalerrornet"] = model_graph("focalerrornet")
    checks["baseline"] = model_graph("baseline")
    ok = all(v <= 1e-3 for v in checks.values())
    print(json.dumps({"max_rel_error": checks, "pass": bool(ok)}, indent=2))
    return EXIT_OK if ok else EXIT_NUMERIC


def _small_config(kind):
    if kind == "focalerrornet":
        from .focalnet import FocalErrorNetConfig
        return FocalErrorNetConfig(patch_size=9, stem_dim=4,
                                   stage_dims=(4, 6), blocks_per_stage=(1, 1),
                                   stage_strides=(1, 2), focal_kernels=(3, 3),
                                   mlp_hidden=(8, 6), dropout_p=0.0)
    from .focalnet import BaselineCnnConfig
    return BaselineCnnConfig(patch_size=9, channels=(3, 4), fc_hidden=6,
                             dropout_p=0.0)


def cmd_selftest(args):
    """Fast invariant sweep; summary JSON on stdout."""
    results = {}
    vol = bspline.Volume3D((24, 24, 24), (0.5, 0.5, 0.5))
    vol.data[...] = Rng(0).random(vol.data.shape)
    u = Rng(1).random(64)
    results["basis_partition_of_unity"] = float(
        np.abs(bspline.bspline_basis(u).sum(axis=-1) - 1).max())
    grid = bspline.grid_covering(vol, 6.0)
    results["identity_warp_exact"] = bool(
        np.array_equal(bspline.warp_volume(vol, grid).data, vol.data))
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        model = build_model("focalerrornet", _small_config("focalerrornet"),
                            rng=Rng(2))
        p = Path(tmp) / "ck.fenp"
        save_params(p, model.parameters())
        loaded = load_params(p)
        results["checkpoint_roundtrip_exact"] = all(
            np.array_equal(loaded[k].data, v.data)
            for k, v in model.parameters().items())
    x = Rng(3).random((2, 2, 9, 9, 9)).astype(np.float32)
    m = build_model("focalerrornet", _small_config("focalerrornet"),
                    rng=Rng(2))
    a = m.forward(Tensor(x), mode="infer").data
    b = m.forward(Tensor(x), mode="infer").data
    results["infer_deterministic"] = bool(np.array_equal(a, b))
    ok = (results["basis_partition_of_unity"] < 1e-12
          and results["identity_warp_exact"]
          and results["checkpoint_roundtrip_exact"]
          and results["infer_deterministic"])
    results["pass"] = bool(ok)
    print(json.dumps(results, indent=2))
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="focalreg",
        description="Synthetic inter-modal registration-error regression "
                    "pipeline. File formats: FENV (volume), FENG (B-spline "
                    "grid), FEND (patch dataset), FENP (parameters).")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic subject cohort")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--subjects", type=int, default=10)
    sp.add_argument("--size", type=int, default=128,
                    help="volume side length in voxels (0.5 mm spacing)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit-landmarks",
                        help="landmark B-spline fit quality (residual mTRE)")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-points", type=int, default=20)
    sp.add_argument("--max-disp", type=float, default=30.0)
    sp.add_argument("--spacing", type=float, default=10.0)
    sp.add_argument("--ridge", type=float, default=1e-6)
    sp.set_defaults(func=cmd_fit_landmarks)

    sp = sub.add_parser("build-dataset", help="deform, cut and label patches")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--deformations", type=int, default=10)
    sp.add_argument("--max-points", type=int, default=20)
    sp.add_argument("--max-disp", type=float, default=40.0)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("shift-testset",
                        help="robustness set: shifted patch centers")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-shift", type=int, default=10)
    sp.set_defaults(func=cmd_shift_testset)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True,
                    help="directory with dataset.fend + manifest.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", default="focalerrornet",
                    choices=sorted(MODEL_TYPES))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=5e-5)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--model-config", default=None,
                    help="JSON object overriding model config fields")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="full metric suite for two models")
    sp.add_argument("--data", required=True)
    sp.add_argument("--shifted", default=None)
    sp.add_argument("--model-a", required=True)
    sp.add_argument("--model-b", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-mc", type=int, default=200)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="mean ± std (mm) for one pair")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--index", type=int, default=None)
    sp.add_argument("--mri", default=None, help="33^3 FENV volume")
    sp.add_argument("--us", default=None, help="33^3 FENV volume")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-mc", type=int, default=200)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="fast invariant sweep")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error:missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except _NUMERIC_ERRORS as exc:
        print(f"error:numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _FORMAT_ERRORS as exc:
        print(f"error:format: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())

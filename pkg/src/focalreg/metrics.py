"""MC-dropout uncertainty and the statistical evaluation suite.

Prediction and uncertainty per patch pair come from repeated stochastic
passes: the sample mean is the predicted error (mm) and the n-1 sample
standard deviation the uncertainty (mm). Since dropout lives only in the MLP
head, the deterministic backbone is evaluated once per pair and only the head
is re-sampled; this is algebraically identical to full repeated passes.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .tensor import Tensor, no_grad


@dataclass
class MCPrediction:
    samples: np.ndarray
    mean_mm: float
    std_mm: float


def _mc_from_samples(samples):
    s = np.asarray(samples, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least 2 MC samples")
    return MCPrediction(s, float(s.mean()), float(s.std(ddof=1)))


def mc_predict(model, mri_patch, us_patch, n=200, rng=None):
    """n stochastic passes on one pair; substream i drives pass i."""
    if n < 2:
        raise ValueError("need n >= 2 MC samples")
    if rng is None:
        raise ValueError("mc_predict needs an rng")
    size = model.config.patch_size
    x = np.stack([np.asarray(mri_patch, dtype=np.float32),
                  np.asarray(us_patch, dtype=np.float32)])[None]
    with no_grad():
        feat = model.features(Tensor(x.reshape(1, 2, size, size, size)))
        samples = np.empty(n)
        for i in range(n):
            samples[i] = model.head(feat, mode="mc", rng=rng.split(i)).item()
    return _mc_from_samples(samples)


def mc_predict_dataset(model, dataset, indices, n=200, rng=None,
                       batch_size=64, workers=1):
    """MCPrediction per sample; streams keyed by manifest index, so worker
    count and batching cannot change any result."""
    if rng is None:
        raise ValueError("mc_predict_dataset needs an rng")
    feats = {}
    with no_grad():
        for lo in range(0, len(indices), batch_size):
            batch = indices[lo:lo + batch_size]
            f = model.features(Tensor(dataset.batch_arrays(batch))).data
            for j, i in enumerate(batch):
                feats[i] = f[j:j + 1]

        def one(i):
            srng = rng.split(i)
            feat = Tensor(feats[i])
            samples = np.empty(n)
            for k in range(n):
                samples[k] = model.head(feat, mode="mc",
                                        rng=srng.split(k)).item()
            return _mc_from_samples(samples)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(one, indices))
        else:
            preds = [one(i) for i in indices]
    return preds


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def pearson_corr(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_corr needs two equal-length vectors (n>=2)")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0 or vy == 0:
        raise ZeroDivisionError("correlation undefined for zero variance")
    return float((xc @ yc) / np.sqrt(vx * vy))


def paired_ttest_two_sided(a, b):
    """(t, p) for paired samples; p via the regularized incomplete beta."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length vectors (n>=2)")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        if d.mean() == 0:
            return 0.0, 1.0   # identical inputs: no effect, p = 1
        raise ZeroDivisionError("t undefined: constant non-zero differences")
    t = d.mean() / (sd / np.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return float(t), p


def mutual_information(patch_a, patch_b, bins=32):
    """Histogram MI (nats) between two same-size patches in [0, 1]."""
    a = np.asarray(patch_a, dtype=np.float64).reshape(-1)
    b = np.asarray(patch_b, dtype=np.float64).reshape(-1)
    if a.size == 0 or a.size != b.size:
        raise ValueError("patches must be non-empty and equally sized")
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[0, 1], [0, 1]])
    pij = joint / joint.sum()
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    outer = np.outer(pi, pj)
    return float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))


def bin_values(x, y, per_bin=20, min_last=10):
    """Sort by x, group runs of `per_bin`; a final partial bin is kept only
    if it has at least `min_last` points, otherwise merged into the previous
    one. Returns [(mean_x, mean_y), ...]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("bin_values needs two equal-length vectors")
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    edges = list(range(0, n, per_bin)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] < min_last:
        del edges[-2]
    return [(float(xs[lo:hi].mean()), float(ys[lo:hi].mean()))
            for lo, hi in zip(edges[:-1], edges[1:])]


# ---------------------------------------------------------------------------
# full evaluation protocol
# ---------------------------------------------------------------------------

def _set_metrics(model, dataset, indices, n_mc, rng, workers):
    preds = mc_predict_dataset(model, dataset, indices, n=n_mc, rng=rng,
                               workers=workers)
    true = dataset.labels[indices]
    pred = np.array([p.mean_mm for p in preds])
    unc = np.array([p.std_mm for p in preds])
    mi = np.array([mutual_information(dataset.samples[i].mri_patch,
                                      dataset.samples[i].us_patch)
                   for i in indices])
    abserr = np.abs(pred - true)
    return {"true": true, "pred": pred, "unc": unc, "mi": mi,
            "abserr": abserr}


def _safe_corr(x, y):
    try:
        return pearson_corr(x, y)
    except ZeroDivisionError:
        return None


def evaluate_report(models, dataset, shifted_dataset, n_mc=200, rng=None,
                    out_dir=None, workers=1, log=None):
    """Paper protocol over the test and shifted-test sets for a pair of
    models: MAE, pred/true correlation, uncertainty validation correlations,
    paired t-test between models' absolute errors, binned scatter tables.

    `models`: dict name -> trained model, evaluated in sorted-name order.
    """
    if rng is None:
        raise ValueError("evaluate_report needs an rng")
    sets = {"test": (dataset, dataset.split_indices["test"])}
    if shifted_dataset is not None:
        sets["shifted"] = (shifted_dataset,
                           shifted_dataset.split_indices["test"])
    report = {"n_mc": n_mc, "models": sorted(models), "sets": {}}
    tables = {}
    for set_name, (ds, indices) in sets.items():
        if not indices:
            raise ValueError(f"no test samples in {set_name} set")
        per_model = {}
        for mi_, name in enumerate(sorted(models)):
            if log:
                log(f"evaluating {name} on {set_name} "
                    f"({len(indices)} pairs, {n_mc} MC samples)")
            cols = _set_metrics(models[name], ds, indices, n_mc,
                                rng.split(1000 * mi_ + len(set_name)),
                                workers)
            per_model[name] = cols
            tables[(set_name, name)] = cols
            report["sets"].setdefault(set_name, {})[name] = {
                "n": len(indices),
                "mae_mean_mm": float(cols["abserr"].mean()),
                "mae_std_mm": float(cols["abserr"].std(ddof=1)),
                "corr_pred_true": _safe_corr(cols["pred"], cols["true"]),
                "corr_unc_abserr": _safe_corr(cols["unc"], cols["abserr"]),
                "corr_unc_mi": _safe_corr(cols["unc"], cols["mi"]),
            }
        if len(models) == 2:
            na, nb = sorted(models)
            t, p = paired_ttest_two_sided(per_model[na]["abserr"],
                                          per_model[nb]["abserr"])
            report["sets"][set_name]["paired_ttest_abserr"] = {
                "models": [na, nb], "t": t, "p": p}
    if out_dir is not None:
        _emit(out_dir, report, tables, sets)
    return report, tables


def _emit(out_dir, report, tables, sets):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2,
                                                sort_keys=True))
    for (set_name, model_name), cols in sorted(tables.items()):
        indices = sets[set_name][1]
        ds = sets[set_name][0]
        with open(out / f"per_sample_{model_name}_{set_name}.csv", "w",
                  newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["index", "subject_id", "true_mm", "pred_mm",
                         "unc_mm", "mi_nats"])
            for j, i in enumerate(indices):
                wr.writerow([i, ds.samples[i].subject_id,
                             repr(float(cols["true"][j])),
                             repr(float(cols["pred"][j])),
                             repr(float(cols["unc"][j])),
                             repr(float(cols["mi"][j]))])
        plots = {"pred_vs_true": ("true", "pred"),
                 "unc_vs_abserr": ("unc", "abserr"),
                 "mi_vs_unc": ("mi", "unc")}
        for plot, (xk, yk) in plots.items():
            rows = bin_values(cols[xk], cols[yk])
            with open(out / f"binned_{plot}_{model_name}_{set_name}.csv",
                      "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow([f"mean_{xk}", f"mean_{yk}"])
                for mx, my in rows:
                    wr.writerow([repr(mx), repr(my)])

"""Statistical comparison of metric maps: normalized/absolute voxel errors,
symmetric KL divergence of binned distributions, percentage differences,
paired t-tests with FDR correction and Hedges' g effect sizes."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, ndtri

from .errors import ArgumentError, DegenerateDataError, EvaluationError

CLIP_PERCENTILES = (0.1, 99.9)


@dataclass
class VoxelErrors:
    """Clipped per-voxel MNE and signed error with exclusion bookkeeping."""

    mne: np.ndarray
    error: np.ndarray
    n_excluded: int
    mne_clip: tuple
    error_clip: tuple


def _clip_to_percentiles(values):
    lo, hi = np.percentile(values, CLIP_PERCENTILES)
    return np.clip(values, lo, hi), (float(lo), float(hi))


def voxel_errors(predicted, acquired, mask) -> VoxelErrors:
    """MNE = |predicted - acquired| / acquired and error = predicted - acquired.

    Both value sets are clipped to their own [0.1, 99.9] percentile range;
    voxels with acquired == 0 are excluded from the MNE and counted.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    acquired = np.asarray(acquired, dtype=np.float64)
    if predicted.shape != acquired.shape:
        raise ArgumentError("map shapes differ: %s vs %s"
                            % (predicted.shape, acquired.shape))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != predicted.shape:
        raise ArgumentError("mask shape does not match the maps")
    if not mask.any():
        raise ArgumentError("empty mask")
    p = predicted[mask]
    a = acquired[mask]
    nonzero = a != 0
    n_excluded = int((~nonzero).sum())
    mne = np.abs(p[nonzero] - a[nonzero]) / a[nonzero]
    error = p - a
    mne, mne_clip = _clip_to_percentiles(mne)
    error, error_clip = _clip_to_percentiles(error)
    return VoxelErrors(mne, error, n_excluded, mne_clip, error_clip)


def kl_symmetric(sample_p, sample_q, k=100):
    """Symmetrized KL divergence of two samples over shared equal-width bins.

    Bins where either distribution has zero mass are removed from both; the
    remaining masses are compared as-is (natural log).
    """
    p = np.asarray(sample_p, dtype=np.float64).ravel()
    q = np.asarray(sample_q, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ArgumentError("both samples must be nonempty")
    if k < 1:
        raise ArgumentError("need at least one bin")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if lo == hi:
        return 0.0  # both samples are the same constant
    edges = np.linspace(lo, hi, k + 1)
    pk = np.histogram(p, bins=edges)[0] / p.size
    qk = np.histogram(q, bins=edges)[0] / q.size
    keep = (pk > 0) & (qk > 0)
    if not keep.any():
        raise EvaluationError("distributions share no occupied bin")
    pk, qk = pk[keep], qk[keep]
    ratio = np.log(pk / qk)
    return float((pk * ratio).sum() - (qk * ratio).sum())


def _region_values(arr, region):
    return np.asarray(arr, dtype=np.float64)[region.slices].ravel()


def percentage_difference(harmonized, baseline, harmonized_altered,
                          baseline_altered, region):
    """100 * |(h - b)/b - (h_a - b_a)/b_a| per region voxel.

    Returns (values, n_excluded); voxels where either denominator is zero
    are excluded and counted.
    """
    maps = [np.asarray(a, dtype=np.float64)
            for a in (harmonized, baseline, harmonized_altered, baseline_altered)]
    if len({m.shape for m in maps}) != 1:
        raise ArgumentError("all four maps must share a shape")
    region.validate_within(maps[0].shape)
    if region.n_voxels == 0:
        raise ArgumentError("empty region")
    h, b, ha, ba = (_region_values(m, region) for m in maps)
    valid = (b != 0) & (ba != 0)
    n_excluded = int((~valid).sum())
    values = 100.0 * np.abs((h[valid] - b[valid]) / b[valid]
                            - (ha[valid] - ba[valid]) / ba[valid])
    return values, n_excluded


def raw_percentage_difference(a, b, region):
    """Symmetric percent difference 100 * |a - b| / ((a + b)/2) in a region.

    Returns (values, n_excluded); voxels with a + b == 0 are excluded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError("map shapes differ")
    region.validate_within(a.shape)
    av = _region_values(a, region)
    bv = _region_values(b, region)
    denom = (av + bv) / 2.0
    valid = denom != 0
    n_excluded = int((~valid).sum())
    values = 100.0 * np.abs(av[valid] - bv[valid]) / denom[valid]
    return values, n_excluded


def paired_ttest(x, y):
    """Two-sided paired Student t-test: returns (t, df, p)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ArgumentError("paired samples must have equal length")
    n = x.size
    if n < 2:
        raise ArgumentError("need at least two pairs")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateDataError("zero-variance differences")
    t = d.mean() * math.sqrt(n) / sd
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), int(df), p


def fdr_correct(pvals, alpha=0.05):
    """Benjamini-Hochberg step-up: returns (adjusted p-values, reject flags)."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    if np.any((p < 0) | (p > 1)):
        raise ArgumentError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    return adjusted, adjusted <= alpha


def _moments(sample):
    s = np.asarray(sample, dtype=np.float64).ravel()
    if s.size < 2:
        raise ArgumentError("samples need at least two values")
    return s.mean(), s.std(ddof=1), s.size


def hedges_g(x, y):
    """Small-sample corrected absolute standardized mean difference."""
    m1, s1, n1 = _moments(x)
    m2, s2, n2 = _moments(y)
    if s1 + s2 == 0:
        raise DegenerateDataError("both samples have zero spread")
    correction = 1.0 - 3.0 / (4.0 * (n1 + n2) - 9.0)
    return abs(m1 - m2) / ((s1 + s2) / 2.0) * correction


def g_confidence_interval(x, y, level=0.95):
    """Normal-approximation CI for the effect size g."""
    if not 0.0 < level < 1.0:
        raise ArgumentError("level must lie in (0, 1)")
    g = hedges_g(x, y)
    n1 = np.asarray(x).size
    n2 = np.asarray(y).size
    var = (n1 + n2) / (n1 * n2) + g * g / (2.0 * (n1 + n2))
    z = float(ndtri(0.5 + level / 2.0))
    half = z * math.sqrt(var)
    return g - half, g + half


def _summary(values):
    if values.size == 0:
        return {"mean": None, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"mean": float(values.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3)}


def build_report(metric, subject, comparison, predicted, acquired, mask,
                 kl_bins=100, alpha=0.05, extra_tests=()):
    """Assemble the per-metric JSON report record.

    extra_tests: optional iterable of (label, sample_x, sample_y) whose
    t-tests join the FDR correction alongside the main comparison.
    """
    errs = voxel_errors(predicted, acquired, mask)
    mask = np.asarray(mask, dtype=bool)
    pv = np.asarray(predicted, dtype=np.float64)[mask]
    av = np.asarray(acquired, dtype=np.float64)[mask]
    kl = kl_symmetric(pv, av, k=kl_bins)

    tests = [("main", pv, av)] + [tuple(t) for t in extra_tests]
    stats = []
    for label, xs, ys in tests:
        try:
            t, df, p = paired_ttest(xs, ys)
            stats.append({"label": label, "t": t, "df": df, "p": p})
        except DegenerateDataError:
            stats.append({"label": label, "t": None, "df": None, "p": None,
                          "degenerate": True})
    defined = [s for s in stats if s["p"] is not None]
    if defined:
        adjusted, reject = fdr_correct([s["p"] for s in defined], alpha=alpha)
        for s, padj, rej in zip(defined, adjusted, reject):
            s["p_fdr"] = float(padj)
            s["reject"] = bool(rej)

    try:
        g = hedges_g(pv, av)
        lo, hi = g_confidence_interval(pv, av)
        g_record = {"value": float(g), "ci_low": float(lo), "ci_high": float(hi)}
    except DegenerateDataError:
        g_record = {"value": None, "ci_low": None, "ci_high": None,
                    "degenerate": True}

    main = stats[0]
    report = {
        "metric": metric,
        "subject": subject,
        "comparison": comparison,
        "mne": {**_summary(errs.mne),
                "clip_low": errs.mne_clip[0], "clip_high": errs.mne_clip[1]},
        "error": {**_summary(errs.error),
                  "clip_low": errs.error_clip[0], "clip_high": errs.error_clip[1]},
        "kl_sym": float(kl),
        "ttest": {k: main.get(k) for k in ("t", "df", "p", "p_fdr", "reject")},
        "g": g_record,
        "excluded_voxels": errs.n_excluded,
    }
    if len(stats) > 1:
        report["extra_tests"] = stats[1:]
    return report


def write_report(report, path):
    """Write the report as deterministic JSON (sorted keys, fixed separators)."""
    with open(path, "w") as f:
        json.dump(report, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def write_report_csv(report, path):
    """Flat one-row CSV export of the scalar report fields."""
    flat = {}

    def _flatten(prefix, value):
        if isinstance(value, dict):
            for key, sub in value.items():
                _flatten(f"{prefix}{key}_", sub)
        elif isinstance(value, list):
            flat[prefix.rstrip("_")] = json.dumps(value)
        else:
            flat[prefix.rstrip("_")] = value

    for key, value in report.items():
        _flatten(f"{key}_", value)
    names = sorted(flat)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        writer.writerow([flat[n] for n in names])

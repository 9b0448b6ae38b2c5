"""Segmentation evaluation: planar/volumetric Dice, laterality registration,
slice-wise score profiles with bootstrap confidence bands, severity-stratified
reports, and a paired signed-rank comparison.

Conventions (all surfaced in the emitted tables):
- Dice of two empty masks is 1.0; exactly one empty gives 0.0.
- Volumetric Dice is computed over 3D voxel counts, never as a mean of
  planar values.
- Slice profiles exclude slices where the reference class is absent.
- Bootstrap resamples whole scans (the independent units), percentile
  method; when the number of distinct resamples is no larger than the
  iteration budget the resample space is enumerated exhaustively instead
  of sampled.
- The signed-rank test uses Pratt zero handling; the exact distribution is
  used up to 25 pairs, a tie-corrected normal approximation above.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data_model import LABEL_NAMES, Laterality, Manifest, MaskVolume, ScanRecord, Volume
from .errors import DataError, IoError, ShapeError

CANONICAL_LATERALITY = Laterality.LEFT

EVAL_CLASS_IDS = (1, 2, 3, 4)


def dsc(pred_mask: np.ndarray, ref_mask: np.ndarray, both_empty_value: float = 1.0) -> float:
    """2 |pred & ref| / (|pred| + |ref|) over boolean arrays of any rank."""
    if pred_mask.shape != ref_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {ref_mask.shape}")
    pred = pred_mask.astype(bool)
    ref = ref_mask.astype(bool)
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return both_empty_value
    return 2.0 * int((pred & ref).sum()) / denom


def volumetric_dsc(pred_labels: np.ndarray, ref_labels: np.ndarray, class_id: int) -> float:
    return dsc(pred_labels == class_id, ref_labels == class_id)


def register_laterality(
    volume: Volume, mask: Optional[MaskVolume], record: ScanRecord
) -> tuple[Volume, Optional[MaskVolume]]:
    """Reverse the slice axis of non-canonical-laterality scans so slice 0 is
    always the most medial slice."""
    if record.laterality == CANONICAL_LATERALITY:
        return volume, mask
    flipped = Volume(voxels=volume.voxels[::-1].copy(), pixel_spacing=volume.pixel_spacing)
    flipped_mask = None if mask is None else MaskVolume(labels=mask.labels[::-1].copy())
    return flipped, flipped_mask


@dataclass
class SliceProfile:
    class_id: int
    per_slice_mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    method: str = ""

    def __post_init__(self):
        valid = ~np.isnan(self.per_slice_mean)
        if np.any(self.ci_low[valid] > self.per_slice_mean[valid] + 1e-12) or np.any(
            self.ci_high[valid] < self.per_slice_mean[valid] - 1e-12
        ):
            raise DataError("confidence band does not bracket the mean profile")


@dataclass
class DscReport:
    method: str
    per_scan: dict[str, dict[int, float]]  # scan_id -> class -> volumetric DSC
    per_class_mean: dict[int, tuple[float, float]]
    stratified: dict[int, dict[int, tuple[float, float, int]]]  # grade -> class -> (mean, std, count)
    class_ids: tuple[int, ...] = EVAL_CLASS_IDS
    empty_convention: str = "both-empty=1.0"


def _planar_dsc_table(pred: np.ndarray, ref: np.ndarray, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice Dice and a validity mask (reference class present)."""
    slices = pred.shape[0]
    values = np.zeros(slices)
    valid = np.zeros(slices, dtype=bool)
    for z in range(slices):
        r = ref[z] == class_id
        valid[z] = bool(r.any())
        values[z] = dsc(pred[z] == class_id, r)
    return values, valid


def bootstrap_percentile_ci(
    sample_matrix: np.ndarray,
    valid: np.ndarray,
    iters: int,
    rng: np.random.Generator,
    q_low: float = 2.5,
    q_high: float = 97.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Percentile CI of the per-column mean under resampling of rows.

    `sample_matrix` is (scans, slices); `valid` masks entries to include.
    Enumerates all n**n equally likely resamples when that count fits the
    iteration budget, otherwise Monte-Carlo samples `iters` resamples.
    """
    n = sample_matrix.shape[0]

    def column_means(rows: np.ndarray) -> np.ndarray:
        vals = sample_matrix[rows]
        ok = valid[rows]
        with np.errstate(invalid="ignore"):
            sums = np.where(ok, vals, 0.0).sum(axis=0)
            counts = ok.sum(axis=0)
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    if n**n <= iters:
        resamples = np.array(list(itertools.product(range(n), repeat=n)))
    else:
        resamples = rng.integers(n, size=(iters, n))
    means = np.stack([column_means(rows) for rows in resamples])
    with warnings.catch_warnings():
        # columns where no resample has a valid entry stay NaN by design
        warnings.simplefilter("ignore", RuntimeWarning)
        lo = np.nanpercentile(means, q_low, axis=0)
        hi = np.nanpercentile(means, q_high, axis=0)
    return lo, hi


def slice_profile(
    predictions: dict[str, np.ndarray],
    references: dict[str, np.ndarray],
    class_id: int,
    bootstrap_iters: int = 1000,
    seed: int = 0,
    method: str = "",
) -> SliceProfile:
    """Mean planar Dice per registered slice index with a bootstrap band."""
    scan_ids = sorted(predictions)
    if set(scan_ids) != set(references):
        raise DataError("prediction and reference scan sets differ")
    slice_counts = {predictions[s].shape[0] for s in scan_ids} | {references[s].shape[0] for s in scan_ids}
    if len(slice_counts) != 1:
        raise DataError(f"inconsistent slice counts across scans: {sorted(slice_counts)}")
    values, valid = [], []
    for sid in scan_ids:
        v, ok = _planar_dsc_table(predictions[sid], references[sid], class_id)
        values.append(v)
        valid.append(ok)
    matrix = np.stack(values)
    valid_m = np.stack(valid)
    with np.errstate(invalid="ignore"):
        counts = valid_m.sum(axis=0)
        mean = np.where(counts > 0, np.where(valid_m, matrix, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan)
    rng = np.random.default_rng(seed)
    lo, hi = bootstrap_percentile_ci(matrix, valid_m, bootstrap_iters, rng)
    return SliceProfile(class_id=class_id, per_slice_mean=mean, ci_low=lo, ci_high=hi, method=method)


def stratified_report(
    predictions: dict[str, np.ndarray],
    references: dict[str, np.ndarray],
    manifest: Manifest,
    class_ids: tuple[int, ...] = EVAL_CLASS_IDS,
    method: str = "",
) -> DscReport:
    """Per-scan volumetric Dice, grouped by KL grade and overall ('all' row
    is stored under grade -1)."""
    grade_of = {r.scan_id: r.kl_grade for r in manifest.records}
    per_scan: dict[str, dict[int, float]] = {}
    for sid in sorted(predictions):
        if sid not in references:
            raise DataError(f"missing reference for scan {sid!r}")
        per_scan[sid] = {c: volumetric_dsc(predictions[sid], references[sid], c) for c in class_ids}

    def summarize(ids):
        out = {}
        for c in class_ids:
            vals = np.array([per_scan[s][c] for s in ids])
            out[c] = (float(vals.mean()), float(vals.std(ddof=0)), len(ids))
        return out

    stratified = {}
    grades = sorted({grade_of[s] for s in per_scan})
    for g in grades:
        ids = [s for s in per_scan if grade_of[s] == g]
        stratified[g] = summarize(ids)
    stratified[-1] = summarize(list(per_scan))
    per_class_mean = {c: stratified[-1][c][:2] for c in class_ids}
    return DscReport(
        method=method,
        per_scan=per_scan,
        per_class_mean=per_class_mean,
        stratified=stratified,
        class_ids=tuple(class_ids),
    )


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test (Pratt zeros, exact <= 25 pairs)
# ---------------------------------------------------------------------------


def _signed_rank_exact_sf(doubled_ranks: list[int]) -> np.ndarray:
    """PMF of W+ over doubled ranks via shift-convolution; index = 2*W+."""
    total = sum(doubled_ranks)
    pmf = np.zeros(total + 1)
    pmf[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(pmf)
        shifted[r:] = pmf[: total + 1 - r]
        pmf = 0.5 * (pmf + shifted)
    return pmf


def wilcoxon_signed_rank(x: np.ndarray, y: np.ndarray, exact_max_n: int = 25) -> tuple[float, float]:
    """Two-sided paired signed-rank test; returns (W+, p).

    Zeros are ranked with the rest and then discarded (Pratt); mid-ranks
    resolve ties. All-zero differences give p = 1.0 by convention.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("paired samples must be 1D arrays of equal length")
    n = len(x)
    if n < 2:
        raise DataError(f"signed-rank test needs at least 2 pairs, got {n}")
    d = x - y
    abs_d = np.abs(d)
    order = np.argsort(abs_d, kind="stable")
    ranks = np.empty(n)
    # mid-ranks over the full sample, zeros included
    sorted_abs = abs_d[order]
    i = 0
    while i < n:
        j = i
        while j < n and sorted_abs[j] == sorted_abs[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average of ranks i+1..j
        i = j
    nonzero = d != 0
    if not nonzero.any():
        return 0.0, 1.0
    w_plus = float(ranks[nonzero & (d > 0)].sum())
    r_nz = ranks[nonzero]
    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in r_nz]
        pmf = _signed_rank_exact_sf(doubled)
        idx = int(round(2 * w_plus))
        p_le = float(pmf[: idx + 1].sum())
        p_ge = float(pmf[idx:].sum())
        p = min(1.0, 2.0 * min(p_le, p_ge))
        return w_plus, p
    mean = r_nz.sum() / 2.0
    var = float((r_nz**2).sum()) / 4.0
    if var == 0:
        return w_plus, 1.0
    z = (w_plus - mean - 0.5 * np.sign(w_plus - mean)) / np.sqrt(var)
    return w_plus, float(2.0 * norm.sf(abs(z)))


def paired_compare(report_a: DscReport, report_b: DscReport, class_id: int) -> tuple[float, float]:
    """Signed-rank test on paired per-scan volumetric Dice of one class."""
    ids_a, ids_b = set(report_a.per_scan), set(report_b.per_scan)
    if ids_a != ids_b:
        raise DataError("reports cover different scan sets")
    ids = sorted(ids_a)
    if len(ids) < 2:
        raise DataError("insufficient paired sample for the signed-rank test")
    a = np.array([report_a.per_scan[s][class_id] for s in ids])
    b = np.array([report_b.per_scan[s][class_id] for s in ids])
    return wilcoxon_signed_rank(a, b)


# ---------------------------------------------------------------------------
# Output emission: tables, flat summary, profile plots
# ---------------------------------------------------------------------------


def _format_float(v: float) -> str:
    return f"{v:.6f}"


def write_stratified_table(reports: list[DscReport], path) -> None:
    """One row per (method, KL group); per class 'mean,std,count' columns."""
    class_ids = reports[0].class_ids
    lines = []
    header = ["method", "kl_group"]
    for c in class_ids:
        name = LABEL_NAMES.get(c, str(c))
        header += [f"{name}_mean", f"{name}_std", f"{name}_count"]
    lines.append(",".join(header))
    for rep in reports:
        for grade in sorted(rep.stratified, key=lambda g: (g < 0, g)):
            row = [rep.method, "all" if grade < 0 else str(grade)]
            for c in class_ids:
                mean, std, count = rep.stratified[grade][c]
                row += [_format_float(mean), _format_float(std), str(count)]
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary(reports: list[DscReport], path) -> None:
    lines = []
    for rep in reports:
        lines.append(f"{rep.method}.empty_convention={rep.empty_convention}")
        for c in rep.class_ids:
            mean, std = rep.per_class_mean[c]
            name = LABEL_NAMES.get(c, str(c))
            lines.append(f"{rep.method}.{name}.mean={_format_float(mean)}")
            lines.append(f"{rep.method}.{name}.std={_format_float(std)}")
        lines.append(f"{rep.method}.scan_count={len(rep.per_scan)}")
    Path(path).write_text("\n".join(sorted(lines)) + "\n", encoding="utf-8")


def write_profile_csv(profile: SliceProfile, path) -> None:
    lines = ["slice,mean,ci_low,ci_high"]
    for z in range(len(profile.per_slice_mean)):
        lines.append(
            f"{z},{profile.per_slice_mean[z]:.6f},{profile.ci_low[z]:.6f},{profile.ci_high[z]:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def plot_profile(profile: SliceProfile, path) -> None:
    """Mean line with a 95% band over the medial-to-lateral slice axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = np.arange(len(profile.per_slice_mean))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.fill_between(z, profile.ci_low, profile.ci_high, alpha=0.3, label="95% CI")
    ax.plot(z, profile.per_slice_mean, label="mean")
    name = LABEL_NAMES.get(profile.class_id, str(profile.class_id))
    ax.set_xlabel("slice index (medial to lateral)")
    ax.set_ylabel("planar Dice")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{name.upper()} - {profile.method}" if profile.method else name.upper())
    ax.legend(loc="lower center")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def emit_outputs(report: DscReport, profiles: list[SliceProfile], out_dir) -> list[Path]:
    """Write the stratified table, a flat summary, per-profile CSVs and plots.

    Returns the list of written paths; deterministic for fixed inputs.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e
    written = []
    table = out_dir / "stratified.csv"
    write_stratified_table([report], table)
    written.append(table)
    summary = out_dir / "summary.txt"
    write_summary([report], summary)
    written.append(summary)
    for profile in profiles:
        name = LABEL_NAMES.get(profile.class_id, str(profile.class_id))
        method = profile.method or report.method or "run"
        csv_path = out_dir / f"profile_{name}_{method}.csv"
        write_profile_csv(profile, csv_path)
        written.append(csv_path)
        png_path = out_dir / f"profile_{name}_{method}.png"
        plot_profile(profile, png_path)
        written.append(png_path)
    return written

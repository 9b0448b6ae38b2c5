"""Volumes, masks, manifests, scan storage, and subject-wise cross-validation splits.

Label semantics are fixed for the whole package:
0 = background, 1 = femoral cartilage (FC), 2 = tibial cartilage (TC),
3 = patellar cartilage (PC), 4 = menisci (M).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

CLASS_COUNT = 5
LABEL_NAMES = {0: "background", 1: "fc", 2: "tc", 3: "pc", 4: "m"}
NAME_TO_LABEL = {v: k for k, v in LABEL_NAMES.items()}

MANIFEST_COLUMNS = [
    "scan_id",
    "subject_id",
    "kl_grade",
    "domain_id",
    "laterality",
    "volume_uri",
    "mask_uri",
]


class Laterality(enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class DomainRole(enum.Enum):
    LABELED_SOURCE = "LABELED_SOURCE"
    UNLABELED_TARGET = "UNLABELED_TARGET"
    TEST = "TEST"


@dataclass(frozen=True)
class Volume:
    """3D grayscale scan, slice-major: voxels[slice, row, col].

    Slice index 0 is the most medial slice once laterality registration
    (evaluation module) has been applied.
    """

    voxels: np.ndarray
    pixel_spacing: tuple[float, float]

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError("volume contains non-finite intensities")
        if min(self.pixel_spacing) <= 0:
            raise ValidationError(f"pixel spacing must be positive: {self.pixel_spacing}")

    @property
    def slice_count(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class MaskVolume:
    """Integer label volume aligned with its Volume; labels in {0..4}."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValidationError(f"mask must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValidationError(f"mask dtype must be integer, got {self.labels.dtype}")
        lo, hi = self.labels.min(), self.labels.max()
        if lo < 0 or hi >= CLASS_COUNT:
            raise ValidationError(f"mask labels out of range [0, {CLASS_COUNT - 1}]: [{lo}, {hi}]")


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    subject_id: str
    kl_grade: int
    domain_id: str
    laterality: Laterality
    volume_uri: str
    mask_uri: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.kl_grade <= 4:
            raise ValidationError(f"{self.scan_id}: kl_grade {self.kl_grade} out of range")


@dataclass(frozen=True)
class Manifest:
    records: tuple[ScanRecord, ...]
    domain_roles: dict[str, DomainRole]
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.records:
            raise ValidationError("manifest has no records")
        seen = set()
        for r in self.records:
            if r.scan_id in seen:
                raise ValidationError(f"duplicate scan_id {r.scan_id!r}")
            seen.add(r.scan_id)
            role = self.domain_roles.get(r.domain_id)
            if role is None:
                raise ValidationError(f"{r.scan_id}: domain {r.domain_id!r} has no role")
            annotated = role in (DomainRole.LABELED_SOURCE, DomainRole.TEST)
            if annotated and not r.mask_uri:
                raise ValidationError(f"{r.scan_id}: {role.value} record is missing mask_uri")
            if not annotated and r.mask_uri:
                raise ValidationError(f"{r.scan_id}: {role.value} record must not carry a mask")

    def records_for_role(self, role: DomainRole) -> list[ScanRecord]:
        return [r for r in self.records if self.domain_roles[r.domain_id] == role]

    def resolve(self, uri: str) -> Path:
        p = Path(uri)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


@dataclass(frozen=True)
class FoldSplit:
    fold_count: int
    assignments: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for subject, fold in self.assignments.items():
            if not 0 <= fold < self.fold_count:
                raise ValidationError(f"subject {subject!r} assigned to invalid fold {fold}")


# ---------------------------------------------------------------------------
# Manifest file I/O (CSV, header row, one record per line)
# ---------------------------------------------------------------------------


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        try:
            reader = csv.reader(f)
            rows = list(reader)
        except csv.Error as e:
            raise ParseError(f"malformed manifest {path}: {e}") from e
    if not rows:
        raise ParseError(f"empty manifest file: {path}")
    header = rows[0]
    if header[: len(MANIFEST_COLUMNS)] != MANIFEST_COLUMNS:
        raise ParseError(f"bad manifest header: {header}")
    has_role_col = len(header) > len(MANIFEST_COLUMNS) and header[len(MANIFEST_COLUMNS)] == "domain_role"

    records = []
    domain_roles: dict[str, DomainRole] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < len(MANIFEST_COLUMNS):
            raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
        scan_id, subject_id, kl, domain_id, lat, vol_uri, mask_uri = row[: len(MANIFEST_COLUMNS)]
        try:
            kl_grade = int(kl)
            laterality = Laterality(lat)
        except (ValueError, KeyError) as e:
            raise ParseError(f"{path}:{lineno}: {e}") from e
        records.append(
            ScanRecord(
                scan_id=scan_id,
                subject_id=subject_id,
                kl_grade=kl_grade,
                domain_id=domain_id,
                laterality=laterality,
                volume_uri=vol_uri,
                mask_uri=mask_uri or None,
            )
        )
        if has_role_col:
            try:
                role = DomainRole(row[len(MANIFEST_COLUMNS)])
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
            prev = domain_roles.setdefault(domain_id, role)
            if prev != role:
                raise ValidationError(f"domain {domain_id!r} has conflicting roles")
    if not has_role_col:
        # Role column is part of the format; reject files without it.
        raise ParseError(f"{path}: missing domain_role column")
    return Manifest(records=tuple(records), domain_roles=domain_roles, root=path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS + ["domain_role"])
        for r in manifest.records:
            writer.writerow(
                [
                    r.scan_id,
                    r.subject_id,
                    r.kl_grade,
                    r.domain_id,
                    r.laterality.value,
                    r.volume_uri,
                    r.mask_uri or "",
                    manifest.domain_roles[r.domain_id].value,
                ]
            )


# ---------------------------------------------------------------------------
# Scan storage: one directory per scan, meta.txt + one .npy per slice
# ---------------------------------------------------------------------------


def save_scan(scan_dir, volume: Volume, mask: Optional[MaskVolume] = None) -> None:
    scan_dir = Path(scan_dir)
    scan_dir.mkdir(parents=True, exist_ok=True)
    if mask is not None and mask.labels.shape != volume.voxels.shape:
        raise ValidationError(
            f"mask shape {mask.labels.shape} does not match volume {volume.voxels.shape}"
        )
    meta = {
        "slice_count": volume.slice_count,
        "rows": volume.voxels.shape[1],
        "cols": volume.voxels.shape[2],
        "spacing_row_mm": repr(volume.pixel_spacing[0]),
        "spacing_col_mm": repr(volume.pixel_spacing[1]),
        "dtype": str(volume.voxels.dtype),
        "has_mask": int(mask is not None),
    }
    with open(scan_dir / "meta.txt", "w", encoding="utf-8") as f:
        for k, v in meta.items():
            f.write(f"{k}={v}\n")
    for z in range(volume.slice_count):
        np.save(scan_dir / f"slice_{z:03d}.npy", volume.voxels[z])
        if mask is not None:
            np.save(scan_dir / f"mask_{z:03d}.npy", mask.labels[z].astype(np.uint8))


def load_scan(scan_dir) -> tuple[Volume, Optional[MaskVolume]]:
    scan_dir = Path(scan_dir)
    meta_path = scan_dir / "meta.txt"
    if not meta_path.exists():
        raise ParseError(f"missing scan metadata: {meta_path}")
    meta: dict[str, str] = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k] = v
    n = int(meta["slice_count"])
    spacing = (float(meta["spacing_row_mm"]), float(meta["spacing_col_mm"]))
    voxels = np.stack([np.load(scan_dir / f"slice_{z:03d}.npy") for z in range(n)])
    volume = Volume(voxels=voxels, pixel_spacing=spacing)
    mask = None
    if int(meta.get("has_mask", "0")):
        labels = np.stack([np.load(scan_dir / f"mask_{z:03d}.npy") for z in range(n)])
        if labels.shape != voxels.shape:
            raise ValidationError(f"{scan_dir}: mask/volume shape mismatch")
        mask = MaskVolume(labels=labels)
    return volume, mask


# ---------------------------------------------------------------------------
# Cross-validation splits
# ---------------------------------------------------------------------------


def subject_grades(records) -> dict[str, int]:
    """Subject grade = max KL grade over the subject's scans."""
    grades: dict[str, int] = {}
    for r in records:
        grades[r.subject_id] = max(grades.get(r.subject_id, 0), r.kl_grade)
    return grades


def make_cv_splits(
    manifest: Manifest,
    fold_count: int,
    seed: int,
    role: Optional[DomainRole] = DomainRole.LABELED_SOURCE,
) -> FoldSplit:
    """Stratified subject-wise folds: group subjects by KL grade, shuffle
    within grade, deal round-robin from a seed-derived offset.

    Grades with fewer subjects than folds are dealt round-robin as well,
    so per-grade per-fold counts always stay within +-1 of ideal.
    """
    if fold_count < 2:
        raise ConfigError(f"fold_count must be >= 2, got {fold_count}")
    if role is None:
        records = manifest.records
    else:
        records = manifest.records_for_role(role)
    grades = subject_grades(records)
    if len(grades) < fold_count:
        raise ConfigError(f"{len(grades)} subjects cannot fill {fold_count} folds")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for grade in sorted(set(grades.values())):
        subjects = sorted(s for s, g in grades.items() if g == grade)
        order = rng.permutation(len(subjects))
        offset = int(rng.integers(fold_count))
        for i, idx in enumerate(order):
            assignments[subjects[idx]] = (offset + i) % fold_count
    return FoldSplit(fold_count=fold_count, assignments=assignments)


def subject_wise_partition(
    manifest: Manifest, split: FoldSplit, held_out_fold: int
) -> tuple[list[ScanRecord], list[ScanRecord]]:
    """Split the records covered by `split` into (train, validation) lists."""
    if not 0 <= held_out_fold < split.fold_count:
        raise ConfigError(f"held_out_fold {held_out_fold} out of range for {split.fold_count} folds")
    train, validation = [], []
    for r in manifest.records:
        fold = split.assignments.get(r.subject_id)
        if fold is None:
            continue
        (validation if fold == held_out_fold else train).append(r)
    return train, validation

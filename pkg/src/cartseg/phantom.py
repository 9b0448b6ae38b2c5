"""Synthetic knee-like phantom volumes with ground-truth masks.

Two ellipsoidal "bones" (femur above, tibia below) carry thin curved
cartilage bands on their facing surfaces, a patellar disc carries its own
band, and two meniscal wedges sit at the margins of the joint gap.
A severity knob in {0..4} thins the cartilage and carves elliptical
defects, emulating increasing disease grades. Appearance (spacing, gain,
bias, blur, noise, matrix size) is controlled per domain so that two
shifted acquisition settings can be synthesized from shared geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data_model import (
    DomainRole,
    Laterality,
    Manifest,
    MaskVolume,
    ScanRecord,
    Volume,
    save_manifest,
    save_scan,
)
from .errors import ConfigError, IoError
from .seeding import derive_rng, derive_seed

# Per-label base intensities on a nominal [0, 1] dynamic range.
BASE_INTENSITY = {0: 0.2, 1: 0.85, 2: 0.75, 3: 0.8, 4: 0.5}


@dataclass(frozen=True)
class DomainAppearance:
    pixel_spacing: tuple[float, float] = (0.37, 0.37)
    intensity_gain: float = 1.0
    intensity_bias: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma_px: float = 0.0
    matrix_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        if min(self.matrix_size) < 64:
            raise ConfigError(f"matrix_size components must be >= 64: {self.matrix_size}")
        if min(self.pixel_spacing) <= 0:
            raise ConfigError(f"pixel_spacing must be positive: {self.pixel_spacing}")
        if self.intensity_gain <= 0:
            raise ConfigError("intensity_gain must be positive")
        if self.noise_sigma < 0 or self.blur_sigma_px < 0:
            raise ConfigError("noise_sigma and blur_sigma_px must be nonnegative")


@dataclass(frozen=True)
class PhantomSpec:
    slice_count: int = 16
    tissue_geometry_seed: int = 0
    severity: int = 0
    appearance: DomainAppearance = DomainAppearance()

    def __post_init__(self):
        if self.slice_count < 1:
            raise ConfigError("slice_count must be positive")
        if not 0 <= self.severity <= 4:
            raise ConfigError(f"severity must be in 0..4, got {self.severity}")


def _slice_scale(z: int, slice_count: int) -> float:
    # Structures shrink toward the volume edges but never vanish.
    if slice_count == 1:
        return 1.0
    t = 2.0 * z / (slice_count - 1) - 1.0
    return 0.6 + 0.4 * float(np.sqrt(max(0.0, 1.0 - 0.85 * t * t)))


def _geometry_params(seed: int):
    rng = derive_rng(seed, "geometry")
    jit = lambda lo, hi: float(rng.uniform(lo, hi))
    return {
        # ellipse centers and semi-axes in normalized [-1, 1] coordinates
        "femur_c": (jit(-0.05, 0.05), -0.52 + jit(-0.03, 0.03)),
        "femur_ax": (0.55 * jit(0.9, 1.1), 0.46 * jit(0.9, 1.1)),
        "tibia_c": (jit(-0.05, 0.05), 0.56 + jit(-0.03, 0.03)),
        "tibia_ax": (0.6 * jit(0.9, 1.1), 0.42 * jit(0.9, 1.1)),
        "patella_c": (-0.62 + jit(-0.03, 0.03), -0.18 + jit(-0.03, 0.03)),
        "patella_r": 0.13 * jit(0.9, 1.1),
        "fc_thick": jit(0.09, 0.12),
        "tc_thick": jit(0.08, 0.11),
        # relative to the small patellar radius, so the band stays a few px wide
        "pc_thick": jit(0.35, 0.45),
        "menisc_u": jit(0.4, 0.46),
    }


def _render_slice(geom, scale: float, rows: int, cols: int, thin: float, medial_frac: float):
    """Label one slice on a normalized grid. `thin` scales cartilage
    thickness; `medial_frac` in [0, 1] grows the medial meniscus so that
    laterality is detectable from geometry."""
    v = np.linspace(-1.0, 1.0, rows)[:, None] * np.ones((1, cols))
    u = np.ones((rows, 1)) * np.linspace(-1.0, 1.0, cols)[None, :]

    fu, fv = geom["femur_c"]
    fa, fb = (a * scale for a in geom["femur_ax"])
    tu, tv = geom["tibia_c"]
    ta, tb = (a * scale for a in geom["tibia_ax"])
    pu, pv = geom["patella_c"]
    pr = geom["patella_r"] * scale

    r_f = np.sqrt(((u - fu) / fa) ** 2 + ((v - fv) / fb) ** 2)
    r_t = np.sqrt(((u - tu) / ta) ** 2 + ((v - tv) / tb) ** 2)
    r_p = np.sqrt(((u - pu) / pr) ** 2 + ((v - pv) / pr) ** 2)

    labels = np.zeros((rows, cols), dtype=np.uint8)

    fc = (r_f > 1.0) & (r_f <= 1.0 + geom["fc_thick"] * thin) & (v > fv) & (np.abs(u - fu) < 0.5)
    tc = (r_t > 1.0) & (r_t <= 1.0 + geom["tc_thick"] * thin) & (v < tv) & (np.abs(u - tu) < 0.45)
    pc = (r_p > 1.0) & (r_p <= 1.0 + geom["pc_thick"] * thin) & (u > pu)

    # Meniscal wedges at the joint-gap margins, outside both cartilage shells.
    gap_v = (fv + geom["femur_ax"][1] * scale + tv - geom["tibia_ax"][1] * scale) / 2.0
    um = geom["menisc_u"]
    clear = (r_f > 1.0 + geom["fc_thick"] * thin) & (r_t > 1.0 + geom["tc_thick"] * thin)
    wedge_width = 0.16
    taper = lambda du: np.clip((wedge_width - np.abs(du)) / wedge_width, 0.0, 1.0)
    m_med = clear & (np.abs(v - gap_v) <= 0.14 * (0.7 + 0.6 * medial_frac) * taper(u + um))
    m_med &= np.abs(u + um) < wedge_width
    m_lat = clear & (np.abs(v - gap_v) <= 0.14 * (1.3 - 0.6 * medial_frac) * taper(u - um))
    m_lat &= np.abs(u - um) < wedge_width

    labels[fc] = 1
    labels[tc & (labels == 0)] = 2
    labels[pc & (labels == 0)] = 3
    labels[(m_med | m_lat) & (labels == 0)] = 4
    return labels


def _carve_defects(labels: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Remove `floor(severity * 2)` elliptical defects from cartilage bands."""
    n_def = int(severity * 2)
    if n_def == 0:
        return labels
    out = labels.copy()
    slices, rows, cols = labels.shape
    cart = np.argwhere(np.isin(labels, (1, 2, 3)))
    if len(cart) == 0:
        return out
    for _ in range(n_def):
        cz, cr, cc = cart[rng.integers(len(cart))]
        rz = max(1, slices // 6)
        rr = rng.integers(2, max(3, rows // 20))
        rc = rng.integers(2, max(3, cols // 20))
        z = np.arange(slices)[:, None, None]
        r = np.arange(rows)[None, :, None]
        c = np.arange(cols)[None, None, :]
        ell = ((z - cz) / rz) ** 2 + ((r - cr) / rr) ** 2 + ((c - cc) / rc) ** 2 <= 1.0
        out[ell & np.isin(out, (1, 2, 3))] = 0
    return out


def generate_phantom(
    spec: PhantomSpec,
    scan_id: str = "phantom",
    subject_id: str | None = None,
    domain_id: str = "A",
    laterality: Laterality = Laterality.LEFT,
) -> tuple[Volume, MaskVolume, ScanRecord]:
    """Deterministically generate one scan, its mask, and its record.

    For a RIGHT knee the slice order is reversed in storage, so the most
    medial slice sits at the last index until laterality registration.
    """
    app = spec.appearance
    rows, cols = app.matrix_size
    geom = _geometry_params(spec.tissue_geometry_seed)
    thin = 1.0 - 0.1 * spec.severity

    labels = np.zeros((spec.slice_count, rows, cols), dtype=np.uint8)
    for z in range(spec.slice_count):
        medial_frac = 1.0 - (z / max(1, spec.slice_count - 1))
        labels[z] = _render_slice(geom, _slice_scale(z, spec.slice_count), rows, cols, thin, medial_frac)

    labels = _carve_defects(labels, spec.severity, derive_rng(spec.tissue_geometry_seed, "defects", spec.severity))

    intensity = np.zeros_like(labels, dtype=np.float64)
    for lbl, base in BASE_INTENSITY.items():
        intensity[labels == lbl] = base

    if app.blur_sigma_px > 0:
        for z in range(spec.slice_count):
            intensity[z] = gaussian_filter(intensity[z], app.blur_sigma_px)
    intensity = app.intensity_gain * intensity + app.intensity_bias
    if app.noise_sigma > 0:
        noise_rng = derive_rng(spec.tissue_geometry_seed, "noise", spec.severity, rows, cols)
        intensity = intensity + noise_rng.normal(0.0, app.noise_sigma, size=intensity.shape)

    if laterality == Laterality.RIGHT:
        intensity = intensity[::-1].copy()
        labels = labels[::-1].copy()

    volume = Volume(voxels=intensity.astype(np.float32), pixel_spacing=app.pixel_spacing)
    mask = MaskVolume(labels=labels)
    record = ScanRecord(
        scan_id=scan_id,
        subject_id=subject_id or scan_id,
        kl_grade=spec.severity,
        domain_id=domain_id,
        laterality=laterality,
        volume_uri=scan_id,
        mask_uri=scan_id,
    )
    return volume, mask, record


# Presets for the source/target appearance gap, loosely mirroring a sharp
# high-resolution protocol vs a coarser, noisier one.
GAP_PRESETS = {
    "none": (
        DomainAppearance(),
        DomainAppearance(),
    ),
    "mild": (
        DomainAppearance(),
        DomainAppearance(
            pixel_spacing=(0.46, 0.46),
            intensity_gain=1.15,
            intensity_bias=0.05,
            noise_sigma=0.04,
            blur_sigma_px=0.7,
            matrix_size=(104, 104),
        ),
    ),
    "strong": (
        DomainAppearance(noise_sigma=0.01),
        DomainAppearance(
            pixel_spacing=(0.52, 0.52),
            intensity_gain=1.3,
            intensity_bias=0.08,
            noise_sigma=0.05,
            blur_sigma_px=1.0,
            matrix_size=(92, 92),
        ),
    ),
}

# Test severities cycle over moderate grades, mimicking a clinically graded
# test cohort spread over grades 1-3.
_TEST_SEVERITIES = (1, 2, 3)
_TRAIN_SEVERITIES = (0, 1, 2, 3, 4)


def generate_benchmark(
    source_count: int,
    target_count: int,
    seed: int,
    source_app: DomainAppearance,
    target_app: DomainAppearance,
    out_dir,
    test_count: int | None = None,
    slice_count: int = 16,
) -> Manifest:
    """Write a three-domain benchmark (labeled source A, unlabeled target B,
    annotated test C) to `out_dir` and return its manifest."""
    if source_count < 1 or target_count < 1:
        raise ConfigError("source_count and target_count must be >= 1")
    if test_count is None:
        test_count = target_count
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e

    records = []

    def emit(domain_id: str, role: DomainRole, count: int, app: DomainAppearance, severities, seed_ns: str):
        for i in range(count):
            severity = severities[i % len(severities)]
            spec = PhantomSpec(
                slice_count=slice_count,
                tissue_geometry_seed=derive_seed(seed, seed_ns, i),
                severity=severity,
                appearance=app,
            )
            scan_id = f"{domain_id.lower()}{i:03d}"
            laterality = Laterality.LEFT if i % 2 == 0 else Laterality.RIGHT
            volume, mask, record = generate_phantom(
                spec, scan_id=scan_id, subject_id=f"subj_{scan_id}", domain_id=domain_id, laterality=laterality
            )
            with_mask = role != DomainRole.UNLABELED_TARGET
            try:
                save_scan(out_dir / scan_id, volume, mask if with_mask else None)
            except OSError as e:
                raise IoError(f"cannot write scan {scan_id}: {e}") from e
            records.append(record if with_mask else replace(record, mask_uri=None))

    emit("A", DomainRole.LABELED_SOURCE, source_count, source_app, _TRAIN_SEVERITIES, "source")
    emit("B", DomainRole.UNLABELED_TARGET, target_count, target_app, _TRAIN_SEVERITIES, "target")
    emit("C", DomainRole.TEST, test_count, target_app, _TEST_SEVERITIES, "test")

    manifest = Manifest(
        records=tuple(records),
        domain_roles={
            "A": DomainRole.LABELED_SOURCE,
            "B": DomainRole.UNLABELED_TARGET,
            "C": DomainRole.TEST,
        },
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest

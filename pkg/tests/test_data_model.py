import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartseg.data_model import (
    DomainRole,
    FoldSplit,
    Laterality,
    Manifest,
    MaskVolume,
    ScanRecord,
    Volume,
    load_manifest,
    load_scan,
    make_cv_splits,
    save_manifest,
    save_scan,
    subject_wise_partition,
)
from cartseg.errors import ConfigError, ParseError, ValidationError


def make_record(i, subject=None, kl=2, domain="A", mask="m"):
    return ScanRecord(
        scan_id=f"scan{i}",
        subject_id=subject or f"subj{i}",
        kl_grade=kl,
        domain_id=domain,
        laterality=Laterality.LEFT,
        volume_uri=f"scan{i}",
        mask_uri=mask,
    )


def make_manifest(records, roles=None):
    return Manifest(records=tuple(records), domain_roles=roles or {"A": DomainRole.LABELED_SOURCE})


class TestTypes:
    def test_volume_rejects_nonfinite(self):
        bad = np.zeros((2, 4, 4))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            Volume(voxels=bad, pixel_spacing=(0.37, 0.37))

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(ValidationError):
            Volume(voxels=np.zeros((2, 4, 4)), pixel_spacing=(0.0, 0.37))

    def test_mask_label_range(self):
        with pytest.raises(ValidationError):
            MaskVolume(labels=np.full((1, 2, 2), 5, dtype=np.uint8))

    def test_kl_grade_range(self):
        with pytest.raises(ValidationError):
            make_record(0, kl=7)

    def test_empty_manifest_rejected(self):
        with pytest.raises(ValidationError):
            make_manifest([])

    def test_duplicate_scan_ids_rejected(self):
        with pytest.raises(ValidationError):
            make_manifest([make_record(0), make_record(0, subject="other")])

    def test_unlabeled_domain_must_not_carry_mask(self):
        with pytest.raises(ValidationError):
            make_manifest([make_record(0, domain="B")], roles={"B": DomainRole.UNLABELED_TARGET})

    def test_labeled_domain_requires_mask(self):
        with pytest.raises(ValidationError):
            make_manifest([make_record(0, mask=None)])

    def test_fold_split_bounds(self):
        with pytest.raises(ValidationError):
            FoldSplit(fold_count=3, assignments={"s": 3})


class TestManifestIo:
    def test_round_trip(self, tmp_path):
        manifest = make_manifest([make_record(i, kl=i % 5) for i in range(6)])
        path = tmp_path / "manifest.csv"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert [r.scan_id for r in loaded.records] == [r.scan_id for r in manifest.records]
        assert loaded.domain_roles == manifest.domain_roles
        assert loaded.root == tmp_path

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_manifest(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_duplicate_ids_on_load(self, tmp_path):
        manifest = make_manifest([make_record(0), make_record(1)])
        path = tmp_path / "m.csv"
        save_manifest(manifest, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
        with pytest.raises(ValidationError):
            load_manifest(path)


class TestScanStorage:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        voxels = rng.normal(size=(3, 8, 9)).astype(np.float32)
        labels = rng.integers(0, 5, size=(3, 8, 9)).astype(np.uint8)
        volume = Volume(voxels=voxels, pixel_spacing=(0.37, 0.59))
        save_scan(tmp_path / "s", volume, MaskVolume(labels=labels))
        loaded_v, loaded_m = load_scan(tmp_path / "s")
        assert np.array_equal(loaded_v.voxels, voxels)
        assert loaded_v.voxels.dtype == voxels.dtype
        assert loaded_v.pixel_spacing == (0.37, 0.59)
        assert np.array_equal(loaded_m.labels, labels)

    def test_mask_shape_mismatch_rejected(self, tmp_path):
        volume = Volume(voxels=np.zeros((2, 4, 4), dtype=np.float32), pixel_spacing=(1, 1))
        with pytest.raises(ValidationError):
            save_scan(tmp_path / "s", volume, MaskVolume(labels=np.zeros((2, 4, 5), dtype=np.uint8)))


def grade_manifest(counts_per_grade):
    """counts_per_grade: grade -> number of subjects (one scan each)."""
    records = []
    i = 0
    for grade, count in counts_per_grade.items():
        for _ in range(count):
            records.append(make_record(i, kl=grade))
            i += 1
    return make_manifest(records)


class TestCvSplits:
    def test_five_subjects_five_folds(self):
        manifest = grade_manifest({2: 5})
        split = make_cv_splits(manifest, 5, seed=0)
        assert sorted(split.assignments.values()) == [0, 1, 2, 3, 4]

    def test_exact_divisibility(self):
        manifest = grade_manifest({g: 20 for g in range(5)})
        split = make_cv_splits(manifest, 5, seed=3)
        grades = {r.subject_id: r.kl_grade for r in manifest.records}
        for fold in range(5):
            for grade in range(5):
                count = sum(1 for s, f in split.assignments.items() if f == fold and grades[s] == grade)
                assert count == 4

    def test_dataset_a_like_balance(self):
        # 88 subjects spread over grades like the labeled cohort: 0/4/29/49/6
        manifest = grade_manifest({1: 4, 2: 29, 3: 49, 4: 6})
        split = make_cv_splits(manifest, 5, seed=11)
        grades = {r.subject_id: r.kl_grade for r in manifest.records}
        for grade, n in {1: 4, 2: 29, 3: 49, 4: 6}.items():
            counts = [
                sum(1 for s, f in split.assignments.items() if f == fold and grades[s] == grade)
                for fold in range(5)
            ]
            assert sum(counts) == n
            assert max(counts) - min(counts) <= 1

    def test_deterministic(self):
        manifest = grade_manifest({1: 7, 3: 9})
        assert make_cv_splits(manifest, 4, seed=5).assignments == make_cv_splits(manifest, 4, seed=5).assignments

    def test_multi_scan_subject_stays_together(self):
        records = [make_record(0, subject="p"), make_record(1, subject="p", kl=3)]
        records += [make_record(i) for i in range(2, 6)]
        split = make_cv_splits(make_manifest(records), 2, seed=0)
        assert "p" in split.assignments  # one fold for both scans by construction

    def test_too_few_subjects(self):
        with pytest.raises(ConfigError):
            make_cv_splits(grade_manifest({2: 3}), 5, seed=0)

    def test_fold_count_validation(self):
        with pytest.raises(ConfigError):
            make_cv_splits(grade_manifest({2: 5}), 1, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(
        counts=st.dictionaries(st.integers(0, 4), st.integers(0, 15), min_size=1),
        folds=st.integers(2, 6),
        seed=st.integers(0, 10_000),
    )
    def test_split_invariants(self, counts, folds, seed):
        total = sum(counts.values())
        if total < folds:
            return
        manifest = grade_manifest({g: c for g, c in counts.items() if c > 0})
        split = make_cv_splits(manifest, folds, seed=seed)
        grades = {r.subject_id: r.kl_grade for r in manifest.records}
        # exhaustive coverage, one fold per subject
        assert set(split.assignments) == set(grades)
        # per-grade per-fold balance within +-1 of ideal
        for grade in set(grades.values()):
            per_fold = [
                sum(1 for s, f in split.assignments.items() if f == fold and grades[s] == grade)
                for fold in range(folds)
            ]
            assert max(per_fold) - min(per_fold) <= 1


class TestPartition:
    def test_no_subject_overlap(self):
        manifest = grade_manifest({2: 10})
        split = make_cv_splits(manifest, 5, seed=1)
        train, val = subject_wise_partition(manifest, split, 0)
        assert not ({r.subject_id for r in train} & {r.subject_id for r in val})
        assert {r.scan_id for r in train} | {r.scan_id for r in val} == {r.scan_id for r in manifest.records}

    def test_validation_matches_fold(self):
        manifest = grade_manifest({2: 10})
        split = make_cv_splits(manifest, 5, seed=2)
        _, val = subject_wise_partition(manifest, split, 3)
        expected = {s for s, f in split.assignments.items() if f == 3}
        assert {r.subject_id for r in val} == expected
        assert len(val) == 2

    def test_out_of_range_fold(self):
        manifest = grade_manifest({2: 10})
        split = make_cv_splits(manifest, 5, seed=2)
        with pytest.raises(ConfigError):
            subject_wise_partition(manifest, split, 7)

    def test_all_folds_cover_all_subjects(self):
        manifest = grade_manifest({1: 4, 2: 9})
        split = make_cv_splits(manifest, 4, seed=9)
        covered = set()
        for fold in range(4):
            _, val = subject_wise_partition(manifest, split, fold)
            subjects = {r.subject_id for r in val}
            assert not covered & subjects
            covered |= subjects
        assert covered == {r.subject_id for r in manifest.records}

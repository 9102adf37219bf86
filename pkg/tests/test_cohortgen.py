import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progrisk.cohortgen import (BMI_TOLERANCE, CohortFormatError, Group, HORIZONS, KneeRecord, KneeTrajectory,
                                ScanSample, SimConfig, SubjectRecord, assign_group, assign_klg, cohort_to_csv,
                                generate_knees, group_counts, horizon_label, is_match, match_case_control,
                                read_cohort_csv, select_scans, simulate_cohort, write_cohort_csv)

ANNUAL = [float(t) for t in range(0, 109, 12)]


def _subject(sid="S1", age=60, sex="F", eth="A", bmi=30.0, role="case"):
    return SubjectRecord(sid, age, sex, eth, bmi, role)


def _scan(index, labels, klg=1):
    return ScanSample("K", index, 0.0 if index == 1 else 12.0, np.zeros(2), klg, dict(zip(HORIZONS, labels)))


@pytest.fixture(scope="module")
def small_cohort():
    cfg = SimConfig(n_subjects=400)
    knees, match, cohort = generate_knees(cfg, 11)
    return cfg, knees, match, cohort


class TestScanSelection:
    def test_case_tkr_30(self):
        knee = KneeTrajectory("K", 30.0, 30.0, [t for t in ANNUAL if t < 30])
        assert select_scans(knee, "case") == (0.0, 12.0)

    def test_control_followup_48(self):
        knee = KneeTrajectory("K", 48.0, None, [t for t in ANNUAL if t <= 48])
        assert select_scans(knee, "control") == (0.0, None)

    def test_case_tkr_6(self):
        knee = KneeTrajectory("K", 6.0, 6.0, [0.0])
        assert select_scans(knee, "case") == (0.0, None)

    def test_case_takes_latest_window_visit(self):
        knee = KneeTrajectory("K", 72.0, 72.0, [0.0, 12.0, 24.0, 36.0, 48.0, 60.0])
        # window is [24, 60]
        assert select_scans(knee, "case") == (0.0, 60.0)

    def test_control_takes_latest_with_four_years_left(self):
        knee = KneeTrajectory("K", 108.0, None, ANNUAL)
        assert select_scans(knee, "control") == (0.0, 60.0)


class TestMatching:
    def test_within_tolerance(self):
        assert is_match(_subject(bmi=30), _subject("S2", bmi=32, role="control"))

    def test_outside_tolerance(self):
        assert not is_match(_subject(bmi=30), _subject("S2", bmi=34, role="control"))

    @pytest.mark.parametrize("field,value", [("age", 61), ("sex", "M"), ("eth", "B")])
    def test_demographics_must_agree(self, field, value):
        assert not is_match(_subject(), _subject("S2", role="control", **{field: value}))

    def test_one_to_one(self):
        subjects = [_subject("S1"), _subject("S2"), _subject("S3", bmi=31, role="control")]
        result = match_case_control(subjects)
        assert len(result.pairs) == 1
        assert [s.subject_id for s in result.excluded] == ["S2"]

    def test_closest_bmi_wins(self):
        subjects = [_subject("S1"), _subject("S2", bmi=32.5, role="control"), _subject("S3", bmi=29.5, role="control")]
        (case, control), = match_case_control(subjects).pairs
        assert control.subject_id == "S3"


class TestLabelsAndGroups:
    @pytest.mark.parametrize("tkr,t,h,expected", [(None, 0, 4, 0), (12, 0, 1, 1), (13, 0, 1, 0), (12, 12, 1, 0),
                                                  (48, 0, 4, 1), (49, 0, 4, 0), (30, 12, 2, 1)])
    def test_horizon_label(self, tkr, t, h, expected):
        assert horizon_label(tkr, t, h) == expected

    @pytest.mark.parametrize("severity,grade", [(0.0, 0), (0.2, 0), (0.2000001, 1), (0.4, 1), (0.6, 2),
                                                (0.8, 3), (0.81, 4), (1.0, 4)])
    def test_klg_bins(self, severity, grade):
        assert assign_klg(severity) == grade

    def test_klg_out_of_range(self):
        with pytest.raises(ValueError):
            assign_klg(1.5)

    @pytest.mark.parametrize("l1,l2,group", [(0, 1, Group.SET1), (0, 0, Group.SET2), (1, 1, Group.SET3),
                                             (1, 0, Group.NA)])
    def test_groups(self, l1, l2, group):
        knee = KneeRecord(_subject(), _scan(1, (l1,) * 3), _scan(2, (l2,) * 3))
        assert assign_group(knee, 1) is group

    def test_single_scan_not_applicable(self):
        assert assign_group(KneeRecord(_subject(), _scan(1, (0, 0, 0))), 4) is Group.NA

    @given(st.one_of(st.none(), st.integers(1, 120)), st.integers(0, 108))
    @settings(max_examples=200)
    def test_nested_horizons(self, tkr, t):
        labels = [horizon_label(tkr, t, h) for h in HORIZONS]
        assert labels[0] <= labels[1] <= labels[2]


class TestSimulation:
    def test_deterministic(self):
        cfg = SimConfig(n_subjects=60)
        a, b = simulate_cohort(cfg, 5), simulate_cohort(cfg, 5)
        assert a.subjects == b.subjects
        assert np.array_equal(a.projection, b.projection)
        assert cohort_to_csv(generate_knees(cfg, 5)[0]) == cohort_to_csv(generate_knees(cfg, 5)[0])

    def test_seed_changes_cohort(self):
        cfg = SimConfig(n_subjects=60)
        assert simulate_cohort(cfg, 5).subjects != simulate_cohort(cfg, 6).subjects

    def test_zero_noise_features_deterministic(self):
        cfg = SimConfig(n_subjects=80, feature_noise=0.0)
        knees, _, cohort = generate_knees(cfg, 2)
        trajectories = {t.knee_id: t for t in cohort.trajectories}
        for knee in knees:
            s = knee.subject
            for scan in knee.scans():
                sev = trajectories[knee.knee_id].severity_at(scan.scan_time_months)
                signal = np.array([(sev - 0.5) / 0.25, (s.age - 63.5) / 8.0, 1.0 if s.sex == "F" else -1.0,
                                   (s.bmi - 30.0) / 4.5])
                np.testing.assert_allclose(scan.features, cohort.projection @ signal, rtol=0, atol=1e-12)

    def test_case_fraction(self):
        cohort = simulate_cohort(SimConfig(n_subjects=2000), 0)
        fraction = np.mean([s.role == "case" for s in cohort.subjects])
        assert 0.4 <= fraction <= 0.6

    def test_severity_monotone(self, small_cohort):
        _, _, _, cohort = small_cohort
        grid = np.linspace(0, 108, 50)
        for knee in cohort.trajectories:
            assert np.all(np.diff(knee.severity_at(grid)) >= 0)

    def test_no_baseline_surgery(self, small_cohort):
        _, _, _, cohort = small_cohort
        assert all(k.tkr_time_months is None or k.tkr_time_months > 0 for k in cohort.trajectories)

    def test_set3_empty_at_one_year(self, small_cohort):
        _, knees, _, _ = small_cohort
        assert group_counts(knees)[1][Group.SET3.value] == 0

    def test_nested_labels_on_every_scan(self, small_cohort):
        _, knees, _, _ = small_cohort
        for knee in knees:
            for scan in knee.scans():
                assert scan.label_1yr <= scan.label_2yr <= scan.label_4yr

    def test_matched_pairs_satisfy_predicates(self, small_cohort):
        _, _, match, _ = small_cohort
        assert match.pairs
        for case, control in match.pairs:
            assert case.role == "case" and control.role == "control"
            assert (case.age, case.sex, case.ethnicity) == (control.age, control.sex, control.ethnicity)
            assert abs(case.bmi - control.bmi) <= BMI_TOLERANCE * case.bmi

    def test_second_scan_windows(self, small_cohort):
        _, knees, _, cohort = small_cohort
        trajectories = {t.knee_id: t for t in cohort.trajectories}
        for knee in knees:
            if knee.scan2 is None:
                continue
            t2 = knee.scan2.scan_time_months
            traj = trajectories[knee.knee_id]
            if knee.is_case:
                assert traj.tkr_time_months - 48 <= t2 <= traj.tkr_time_months - 12
            else:
                assert traj.followup_end_months - t2 >= 48

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SimConfig(n_subjects=2)
        with pytest.raises(ValueError):
            SimConfig(ethnicity_probs=(0.5, 0.5, 0.5))


class TestCsv:
    def test_round_trip(self, small_cohort, tmp_path):
        _, knees, _, _ = small_cohort
        path = tmp_path / "cohort.csv"
        write_cohort_csv(knees, path)
        loaded = read_cohort_csv(path)
        assert cohort_to_csv(loaded) == path.read_text()
        assert {k.knee_id: k.group_per_horizon for k in loaded} == {k.knee_id: k.group_per_horizon for k in knees}

    def test_bad_value_cites_row_and_column(self, small_cohort, tmp_path):
        _, knees, _, _ = small_cohort
        lines = cohort_to_csv(knees).splitlines()
        fields = lines[3].split(",")
        fields[9] = "7"  # klg
        lines[3] = ",".join(fields)
        path = tmp_path / "bad.csv"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CohortFormatError) as err:
            read_cohort_csv(path)
        assert err.value.row == 4 and err.value.column == "klg"
        assert "row 4" in str(err.value)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("subject_id,knee_id\nS1,S1-L\n")
        with pytest.raises(CohortFormatError) as err:
            read_cohort_csv(path)
        assert err.value.row == 1

    def test_short_row(self, small_cohort, tmp_path):
        _, knees, _, _ = small_cohort
        lines = cohort_to_csv(knees).splitlines()
        lines[2] = lines[2].rsplit(",", 1)[0]
        path = tmp_path / "bad.csv"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CohortFormatError, match="row 3"):
            read_cohort_csv(path)

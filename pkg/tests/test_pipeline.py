import itertools
import math

import numpy as np
import pytest
from scipy.optimize import nnls

from bsslasso.dictionary import build_dictionary, build_observation, position_grid
from bsslasso.fibermodel import (
    DEFAULT_CONSTANTS,
    Event,
    FiberLink,
    default_frequency_grid,
    default_z_grid,
    frequency_response_analytic,
    frequency_response_numeric,
    time_domain_profile,
)
from bsslasso.pipeline import (
    Cluster,
    DetectorConfig,
    SelectionVector,
    correction_stage,
    detect,
    find_clusters,
    naive_magnitudes,
    reconstruct_magnitudes,
    report_from_dict,
    report_to_dict,
    selection_stage,
    treatment_stage,
)

FREQS = default_frequency_grid()


def observe(link: FiberLink, numeric: bool = True):
    if numeric:
        z = default_z_grid(link.length)
        p = time_domain_profile(link, DEFAULT_CONSTANTS, z)
        return frequency_response_numeric(z, p, DEFAULT_CONSTANTS, FREQS)
    return frequency_response_analytic(link, DEFAULT_CONSTANTS, FREQS)


def small_config(length, **kw):
    return DetectorConfig(fiber_length_m=length, **kw)


class TestFindClusters:
    def test_all_zero(self):
        assert find_clusters(SelectionVector(np.zeros(10), 5, 5)) == []

    def test_runs_and_singletons(self):
        v = np.zeros(50)
        v[[12, 13, 14, 40]] = 1.0
        out = find_clusters(SelectionVector(v, 50, 0))
        assert [c.indices for c in out] == [(12, 13, 14), (40,)]
        assert all(c.block == "fault" for c in out)

    def test_blocks_clustered_independently(self):
        v = np.zeros(8)
        v[[2, 3]] = 1.0       # fault run
        v[[6, 7]] = 2.0       # reflection run (indices 2,3 of reflect block)
        out = find_clusters(SelectionVector(v, 4, 4))
        assert [(c.block, c.indices) for c in out] == [("fault", (2, 3)), ("reflection", (2, 3))]

    def test_reflection_block_toggle(self):
        v = np.zeros(8)
        v[[1, 6]] = 1.0
        out = find_clusters(SelectionVector(v, 4, 4), include_reflections=False)
        assert [(c.block, c.indices) for c in out] == [("fault", (1,))]

    def test_cluster_validation(self):
        with pytest.raises(ValueError):
            Cluster((3, 5), "fault")
        with pytest.raises(ValueError):
            Cluster((), "fault")
        with pytest.raises(ValueError):
            Cluster((1,), "steps")


class TestTreatment:
    def _setup(self, length=3000.0):
        grid = position_grid(length, 10.0, margin=0.0)
        d = build_dictionary(grid, FREQS)
        link = FiberLink(length, (Event(1500.0, 3.0, reflectance_db=12.0), Event(length, 2.0)))
        y = build_observation(observe(link))
        return d, y

    def test_singletons_refit_support_unchanged(self):
        d, y = self._setup()
        clusters = [Cluster((149,), "fault"), Cluster((299,), "fault"), Cluster((149,), "reflection")]
        out = treatment_stage(y, d, clusters)
        assert set(np.flatnonzero(out.beta.fault)) == {149, 299}
        assert set(np.flatnonzero(out.beta.reflect)) == {149}
        # refit equals a direct nonnegative least squares on that support
        cols = [149, 299, d.q + 149]
        coef, rnorm = nnls(np.ascontiguousarray(d.matrix[:, cols]), y)
        assert out.rss == pytest.approx(rnorm * rnorm, rel=1e-9)

    def test_exhaustive_matches_bruteforce(self):
        d, y = self._setup()
        clusters = [
            Cluster((147, 148, 149, 150), "fault"),
            Cluster((298, 299), "fault"),
            Cluster((148, 149, 150), "reflection"),
        ]
        out = treatment_stage(y, d, clusters)
        # independent enumeration with fresh RSS computation per candidate
        best = (math.inf, None)
        for combo in itertools.product(*[c.indices for c in clusters]):
            cols = [j if c.block == "fault" else d.q + j for j, c in zip(combo, clusters)]
            coef, _ = nnls(np.ascontiguousarray(d.matrix[:, cols]), y)
            r = y - d.matrix[:, cols] @ coef
            rss = float(r @ r)
            if rss < best[0]:
                best = (rss, combo)
        assert out.rss == pytest.approx(best[0], rel=1e-9)
        chosen_fault = set(np.flatnonzero(out.beta.fault))
        expect_fault = {j for j, c in zip(best[1], clusters) if c.block == "fault"}
        assert chosen_fault == expect_fault

    def test_weighted_average_tie_goes_low(self):
        d, y = self._setup()
        amps = np.zeros(2 * d.q)
        amps[[100, 101]] = 5.0     # symmetric two-index cluster
        cfg = small_config(3000.0, enumeration_cap=1)
        out = treatment_stage(
            y, d, [Cluster((100, 101), "fault")], cfg,
            amplitudes=SelectionVector(amps, d.q, d.q),
        )
        assert list(np.flatnonzero(out.beta.fault)) == [100]

    def test_empty_clusters(self):
        d, y = self._setup()
        out = treatment_stage(y, d, [])
        assert out.rss == pytest.approx(float(y @ y))
        assert np.all(out.beta.values == 0.0)

    def test_cap_exceeded_narrows_largest_first(self):
        d, y = self._setup()
        amps = np.zeros(2 * d.q)
        amps[10:16] = np.array([1.0, 2.0, 4.0, 2.0, 1.0, 0.5])
        amps[40:42] = 1.0
        cfg = small_config(3000.0, enumeration_cap=2)
        out = treatment_stage(
            y, d,
            [Cluster(tuple(range(10, 16)), "fault"), Cluster((40, 41), "fault")],
            cfg, amplitudes=SelectionVector(amps, d.q, d.q),
        )
        fault_idx = set(np.flatnonzero(out.beta.fault))
        assert len(fault_idx & {10, 11, 12, 13, 14, 15}) <= 1
        assert 12 in fault_idx or fault_idx & {40, 41}


class TestStages:
    def test_zero_observation_empty_selection(self):
        grid = position_grid(2000.0, 10.0, margin=0.0)
        d = build_dictionary(grid, FREQS)
        out = selection_stage(np.zeros(2 * FREQS.size), d)
        assert np.all(out.beta.values == 0.0)

    def test_correction_noop_without_reflective_selections(self):
        link = FiberLink(4000.0, (Event(4000.0, 2.5),))
        y = build_observation(observe(link))
        grid = position_grid(4000.0, 10.0)
        d = build_dictionary(grid, FREQS)
        sel = selection_stage(y, d)
        assert float(sel.beta.reflect.max()) == 0.0
        out = correction_stage(y, d, sel)
        assert out is sel

    def test_correction_requires_reflection_block(self):
        link = FiberLink(4000.0, (Event(4000.0, 2.5),))
        y = build_observation(observe(link))
        d = build_dictionary(position_grid(4000.0, 10.0), FREQS, include_reflections=False)
        sel = selection_stage(y, d)
        with pytest.raises(ValueError):
            correction_stage(y, d, sel)

    def test_correction_fixes_reflective_shift(self):
        # midpoint reflective event: the selection lands hundreds of meters
        # off while the re-weighted passes pull it back
        link = FiberLink(
            8000.0, (Event(4000.0, 3.0, reflectance_db=18.0), Event(8000.0, 2.0))
        )
        y = build_observation(observe(link))
        grid = position_grid(8000.0, 10.0)
        d = build_dictionary(grid, FREQS)
        cfg = small_config(8000.0)
        sel = selection_stage(y, d, cfg)
        sel_pos = grid.positions[np.flatnonzero(sel.beta.fault)]
        sel_err = np.min(np.abs(sel_pos - 4000.0))
        out = correction_stage(y, d, sel, config=cfg)
        assert out.stage in ("correction_2", "correction_3")
        cor_pos = grid.positions[np.flatnonzero(out.beta.fault)]
        cor_err = np.min(np.abs(cor_pos - 4000.0))
        assert sel_err > 100.0
        assert cor_err <= 20.0


class TestDetect:
    def test_single_event_within_grid_step(self):
        link = FiberLink(5000.0, (Event(5000.0, 3.0),))
        report = detect(observe(link), small_config(5000.0))
        assert len(report.estimates) == 1
        assert abs(report.estimates[0].position_m - 5000.0) <= 10.0
        assert not report.estimates[0].is_reflective

    def test_reflective_flag_set_on_reflective_event(self):
        link = FiberLink(5000.0, (Event(5000.0, 3.0, reflectance_db=15.0),))
        report = detect(observe(link), small_config(5000.0))
        assert len(report.estimates) >= 1
        best = min(report.estimates, key=lambda e: abs(e.position_m - 5000.0))
        assert abs(best.position_m - 5000.0) <= 20.0
        assert best.is_reflective

    def test_reflective_implies_fault_estimate(self):
        link = FiberLink(
            6000.0, (Event(2500.0, 2.0, reflectance_db=10.0), Event(6000.0, 3.0, reflectance_db=17.0))
        )
        report = detect(observe(link), small_config(6000.0))
        # flags only ever attach to emitted fault estimates
        fault_positions = {e.position_m for e in report.estimates}
        flagged = {e.position_m for e in report.estimates if e.is_reflective}
        assert flagged <= fault_positions

    def test_modes_agree_when_nothing_reflective(self):
        link = FiberLink(7000.0, (Event(3000.0, 2.0), Event(7000.0, 4.0)))
        prof = observe(link)
        full = detect(prof, small_config(7000.0, mode="bss-lasso"))
        bss1 = detect(prof, small_config(7000.0, mode="bss-1"))
        assert full.fault_positions() == pytest.approx(bss1.fault_positions())
        assert [s.stage for s in full.diagnostics] == ["selection", "treated"]

    def test_sinclasso_has_no_reflection_block(self):
        link = FiberLink(5000.0, (Event(5000.0, 3.0, reflectance_db=15.0),))
        report = detect(observe(link), small_config(5000.0, mode="sinclasso"))
        assert all(not e.is_reflective for e in report.estimates)
        assert report.diagnostics[0].beta.n_reflect == 0

    def test_requires_length(self):
        link = FiberLink(5000.0, (Event(5000.0, 3.0),))
        with pytest.raises(ValueError, match="fiber_length_m"):
            detect(observe(link), DetectorConfig())

    def test_determinism(self):
        link = FiberLink(
            6500.0, (Event(3200.0, 2.0, reflectance_db=9.0), Event(6500.0, 3.5))
        )
        prof = observe(link)
        cfg = small_config(6500.0)
        r1 = detect(prof, cfg)
        r2 = detect(prof, cfg)
        d1 = report_to_dict(r1)
        d2 = report_to_dict(r2)
        assert d1 == d2

    def test_fitted_profile_close_to_observation(self):
        link = FiberLink(4500.0, (Event(4500.0, 2.0),))
        prof = observe(link)
        report = detect(prof, small_config(4500.0))
        resid = np.linalg.norm(report.fitted_profile.samples - prof.samples)
        assert resid / np.linalg.norm(prof.samples) < 1e-2

    def test_treated_rss_not_worse_than_biased_fit(self):
        link = FiberLink(5200.0, (Event(2600.0, 2.0), Event(5200.0, 3.0)))
        prof = observe(link)
        report = detect(prof, small_config(5200.0))
        lasso_stage = report.diagnostics[-2]
        treated = report.diagnostics[-1]
        d = build_dictionary(position_grid(5200.0, 10.0), FREQS)
        # same support as treated, coefficients from the penalized stage
        y = build_observation(prof)
        sup = np.flatnonzero(treated.beta.values)
        biased = lasso_stage.beta.values.copy()
        mask = np.zeros_like(biased, dtype=bool)
        mask[sup] = True
        biased[~mask] = 0.0
        r = y - d.matrix[:, : biased.size] @ biased
        assert treated.rss <= float(r @ r) + 1e-9


class TestReconstruction:
    def test_on_grid_magnitudes_recovered(self):
        link = FiberLink(5000.0, (Event(2000.0, 2.0), Event(5000.0, 3.4, reflectance_db=13.0)))
        prof = observe(link)
        cfg = small_config(5000.0)
        report = reconstruct_magnitudes(detect(prof, cfg))
        assert len(report.estimates) == 2
        est = sorted(report.estimates, key=lambda e: e.position_m)
        assert est[0].loss_db == pytest.approx(2.0, abs=0.1)
        assert est[1].loss_db == pytest.approx(3.4, abs=0.1)
        assert est[1].reflectance_db == pytest.approx(13.0, abs=2.0)

    def test_zero_loss_candidate_loses(self):
        link = FiberLink(4000.0, (Event(4000.0, 2.0),))
        prof = observe(link)
        report = reconstruct_magnitudes(detect(prof, small_config(4000.0)))
        assert report.estimates[0].loss_db is not None
        assert report.estimates[0].loss_db > 0.5

    def test_empty_report_passthrough(self):
        grid = position_grid(2000.0, 10.0, margin=0.0)
        from bsslasso.fibermodel import FrequencyProfile

        prof = FrequencyProfile(FREQS, np.zeros(FREQS.size, dtype=complex))
        report = detect(prof, small_config(2000.0))
        assert reconstruct_magnitudes(report) is report

    def test_observation_target_requires_profile(self):
        link = FiberLink(4000.0, (Event(4000.0, 2.0),))
        prof = observe(link)
        cfg = small_config(4000.0, reconstruct_target="observation")
        report = detect(prof, cfg)
        with pytest.raises(ValueError, match="needs the measured profile"):
            reconstruct_magnitudes(report)
        out = reconstruct_magnitudes(report, observation=prof)
        assert out.estimates[0].loss_db == pytest.approx(2.0, abs=0.1)

    def test_naive_magnitudes_failure_modes_reported(self):
        link = FiberLink(5000.0, (Event(2000.0, 2.0), Event(5000.0, 3.0)))
        prof = observe(link)
        report = detect(prof, small_config(5000.0))
        entries = naive_magnitudes(report)
        assert entries, "expected naive magnitude entries"
        for e in entries:
            assert math.isinf(e["loss_db"]) or e["loss_db"] > 0
            assert "failure" in e


class TestReportSerialization:
    def test_round_trip_dict(self):
        link = FiberLink(3000.0, (Event(3000.0, 2.0),))
        report = detect(observe(link), small_config(3000.0))
        d = report_to_dict(report, fitted_profile_ref="fitted_0.csv")
        assert d["schema"] == "bsslasso-report/1"
        assert d["runtime_ms"] is None
        assert d["fitted_profile_ref"] == "fitted_0.csv"
        assert report_from_dict(d) is d
        stages = [s["stage"] for s in d["stage_diagnostics"]]
        assert stages[0] == "selection" and stages[-1] == "treated"

    def test_bad_schema_rejected(self):
        with pytest.raises(ValueError, match="schema"):
            report_from_dict({"schema": "nope"})

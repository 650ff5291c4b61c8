import numpy as np
import pytest

from piaug import model as M
from piaug.augment import DataSequence
from piaug.evalharness import (BinSpec, ErrorReport, KbmPredictor, NeuralPredictor,
                               bin_and_aggregate, domain_shift_report,
                               figure8_experiment, prediction_errors,
                               run_figure8_trial, sequence_attributes,
                               write_domain_shift_csv, write_heatmap_csv)
from piaug.kbm import KbmParams
from piaug.mppi import KbmMppiModel, MppiConfig, figure_eight_plan
from piaug.state import kbm_project_rows, wrap_angle
from piaug.worldsim import SimParams, generate_terrain


class PerfectPredictor:
    """Feeds ground truth back as the prediction."""

    name = "perfect"

    def predict_kbm_batch(self, seqs):
        return np.array([kbm_project_rows(s.labels) for s in seqs])


class OffsetPredictor:
    name = "offset"

    def predict_kbm_batch(self, seqs):
        out = np.array([kbm_project_rows(s.labels) for s in seqs])
        out[:, :, 0] += 1.0
        return out


class TestPredictionErrors:
    def test_ground_truth_gives_zero(self, tiny_dataset):
        reports, flagged = prediction_errors(PerfectPredictor(), tiny_dataset)
        assert flagged == 0
        for r in reports:
            assert r.delta_p == 0.0 and r.delta_psi == 0.0 and r.delta_v == 0.0

    def test_constant_offset_gives_exact_dp(self, tiny_dataset):
        reports, _ = prediction_errors(OffsetPredictor(), tiny_dataset)
        for r in reports:
            assert r.delta_p == pytest.approx(1.0, abs=1e-12)

    def test_matches_double_loop_oracle(self, tiny_dataset):
        pred = KbmPredictor(KbmParams())
        reports, _ = prediction_errors(pred, tiny_dataset[:3])
        raw = pred.predict_kbm_batch(tiny_dataset[:3])
        for i, seq in enumerate(tiny_dataset[:3]):
            truth = kbm_project_rows(seq.labels)
            T = truth.shape[0]
            dp = dpsi = dv = 0.0
            for t in range(T):
                dp += np.sqrt((raw[i, t, 0] - truth[t, 0]) ** 2
                              + (raw[i, t, 1] - truth[t, 1]) ** 2)
                dpsi += abs(float(wrap_angle(raw[i, t, 2] - truth[t, 2])))
                dv += abs(raw[i, t, 3] - truth[t, 3])
            assert reports[i].delta_p == pytest.approx(dp / T, rel=1e-12)
            assert reports[i].delta_psi == pytest.approx(dpsi / T, rel=1e-12)
            assert reports[i].delta_v == pytest.approx(dv / T, rel=1e-12)

    def test_divergent_model_flagged(self, tiny_dataset):
        class NanPredictor:
            name = "nan"

            def predict_kbm_batch(self, seqs):
                out = np.array([kbm_project_rows(s.labels) for s in seqs])
                out[0] = np.nan
                return out

        reports, flagged = prediction_errors(NanPredictor(), tiny_dataset[:4])
        assert flagged == 1
        assert np.isnan(reports[0].delta_p)

    def test_neural_predictor_runs(self, tiny_dataset):
        params = M.init_params(seed=0, hidden=16, enc_hidden=8)
        reports, flagged = prediction_errors(NeuralPredictor(params), tiny_dataset[:4])
        assert flagged == 0
        assert all(np.isfinite(r.delta_p) for r in reports)


class TestBinning:
    def test_classify_examples(self):
        spec = BinSpec()
        assert spec.classify(2.0, 0.01, 0.01) == ("low", "low", "low")
        assert spec.classify(6.0, 0.01, 0.08) == ("high", "low", "med")
        # closed upper bound keeps the boundary in the lower group
        assert spec.classify(3.0, 0.05, 0.12) == ("low", "low", "med")

    def test_every_sequence_lands_in_one_cell(self, tiny_dataset):
        reports, _ = prediction_errors(PerfectPredictor(), tiny_dataset)
        rows = bin_and_aggregate(reports, tiny_dataset)
        assert len(rows) == 27
        assert sum(r["n"] for r in rows) == len(tiny_dataset)

    def test_flagged_sequences_excluded_from_cells(self, tiny_dataset):
        reports, _ = prediction_errors(PerfectPredictor(), tiny_dataset)
        reports[0] = ErrorReport(float("nan"), float("nan"), float("nan"))
        rows = bin_and_aggregate(reports, tiny_dataset)
        assert sum(r["n"] for r in rows) == len(tiny_dataset) - 1

    def test_masked_cell_annotated(self, tiny_dataset):
        reports, _ = prediction_errors(PerfectPredictor(), tiny_dataset)
        rows = bin_and_aggregate(reports, tiny_dataset)
        masked = [r for r in rows if r["paper_masked"]]
        assert len(masked) == 1
        assert (masked[0]["v_bin"], masked[0]["theta_bin"], masked[0]["psi_bin"]) == \
            ("high", "low", "high")

    def test_heatmap_csv_schema(self, tmp_path, tiny_dataset):
        reports, _ = prediction_errors(PerfectPredictor(), tiny_dataset)
        rows = bin_and_aggregate(reports, tiny_dataset)
        path = tmp_path / "heat.csv"
        write_heatmap_csv(path, rows, meta="m")
        lines = path.read_text().splitlines()
        assert lines[1] == "v_bin,theta_bin,psi_bin,n,dp,dpsi,dv"
        assert len([l for l in lines if not l.startswith("#")]) == 28

    def test_domain_shift_rows(self, tmp_path, tiny_dataset):
        reports, _ = prediction_errors(PerfectPredictor(), tiny_dataset)
        rows = domain_shift_report({"perfect": reports}, tiny_dataset)
        assert len(rows) == 3
        write_domain_shift_csv(tmp_path / "d.csv", rows)
        header = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert header == "model,v_bin,n,dp,dpsi,dv"


class TestSequenceAttributes:
    def test_straight_constant_speed(self, tiny_dataset):
        seq = tiny_dataset[0]
        labels = seq.labels.copy()
        labels[:, 3:9] = [1, 0, 0, 0, 1, 0]
        labels[:, 9] = 2.5
        x0 = seq.x0
        straight = DataSequence(
            x0=type(x0)(p=x0.p, r6=np.array([1, 0, 0, 0, 1, 0.0]), v=x0.v, w=x0.w,
                        delta=x0.delta),
            obs=seq.obs, actions=seq.actions, labels=labels)
        v, pitch, psi_rate = sequence_attributes(straight)
        assert v == pytest.approx(2.5)
        assert pitch == pytest.approx(0.0, abs=1e-12)
        assert psi_rate == pytest.approx(0.0, abs=1e-12)


class TestFigure8:
    def test_huge_radius_trivially_successful(self):
        terrain = generate_terrain(31, 256, 0.0)
        cfg = MppiConfig(n_samples=32, horizon=15)
        result = figure8_experiment(KbmMppiModel(KbmParams()), goal_radius=1e6,
                                    trials=1, terrain=terrain,
                                    sim_params=SimParams(), cfg=cfg,
                                    time_budget=10.0)
        assert result.successes == 1

    def test_success_monotone_in_radius(self):
        # re-scoring one recorded trace: entering a small radius implies
        # entering any larger one
        terrain = generate_terrain(31, 256, 0.0)
        cfg = MppiConfig(n_samples=64, horizon=20, seed=3)
        center = (terrain.extent / 2, terrain.extent / 2 - 10.0)
        plan_small = figure_eight_plan(3.0, center=center)
        trial = run_figure8_trial(KbmMppiModel(KbmParams()), plan_small, terrain,
                                  SimParams(), cfg, seed=1, time_budget=45.0)
        xy = trial.trace[:, 1:3]

        def reaches_all(radius):
            active = 0
            pts = plan_small.points
            for p in xy:
                if active < len(pts) and np.hypot(*(p - pts[active])) <= radius:
                    active += 1
            return active >= len(pts)

        for r_small, r_big in ((3.0, 5.0), (4.0, 8.0)):
            if reaches_all(r_small):
                assert reaches_all(r_big)

"""End-to-end tests of the command-line interface."""
import json

import numpy as np
import pytest

from pointforest import RngSeed, Window, load_model, read_raster, write_raster
from pointforest.cli import main

RES = ["--resolution", "64"]
WIN = ["--window", "0", "0", "1", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One simulated dataset plus fitted spatial and covariate models."""
    d = tmp_path_factory.mktemp("cli")
    pts = d / "points.csv"
    rc = main(["simulate", "--model", "constant", "--intensity", "150",
               "--seed", "1", *WIN, *RES, "--out", str(pts)])
    assert rc == 0

    # synthetic benchmark data (covariates + truth raster + points)
    syn_pts = d / "syn_points.csv"
    rc = main(["simulate", "--model", "synthetic", "--p", "4",
               "--target-count", "200", "--seed", "2",
               "--window", "0", "0", "200", "100", *RES,
               "--covariates-out", str(d / "covs"),
               "--truth-out", str(d / "truth.grid"),
               "--out", str(syn_pts)])
    assert rc == 0

    spatial_model = d / "spatial.model"
    rc = main(["fit", "--mode", "spatial", "--points", str(pts),
               "--gamma", "16", "--M", "3", "--bootstrap", "--seed", "3",
               *WIN, *RES, "--out", str(spatial_model),
               "--predict-grid", str(d / "spatial_fit.grid")])
    assert rc == 0

    cov_model = d / "cov.model"
    rc = main(["fit", "--mode", "covariate", "--points", str(syn_pts),
               "--covariates", str(d / "covs" / "covariates.txt"),
               "--M", "2", "--n-min", "10", "--seed", "4",
               "--window", "0", "0", "200", "100", *RES,
               "--out", str(cov_model),
               "--predict-grid", str(d / "cov_fit.grid")])
    assert rc == 0
    return d


class TestSimulate:
    def test_points_file_and_report(self, workdir, capsys):
        pts = workdir / "points.csv"
        assert pts.exists()
        text = pts.read_text()
        assert text.splitlines()[0] == "x,y"

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        for out in (out1, out2):
            assert main(["simulate", "--model", "constant", "--intensity",
                         "150", "--seed", "1", *WIN, *RES,
                         "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert out1.read_bytes() == (workdir / "points.csv").read_bytes()

    def test_synthetic_writes_manifest_and_truth(self, workdir):
        covdir = workdir / "covs"
        manifest = covdir / "covariates.txt"
        names = [ln.split()[0] for ln in manifest.read_text().splitlines()]
        assert names[:3] == ["Mn", "Zn", "Fe"]
        assert len(names) == 4
        for ln in manifest.read_text().splitlines():
            assert (covdir / ln.split()[1]).exists()
        truth = read_raster(workdir / "truth.grid")
        assert np.nanmin(truth.values) >= 0

    def test_thomas_model(self, tmp_path):
        out = tmp_path / "t.csv"
        rc = main(["simulate", "--model", "thomas", "--parent-intensity", "10",
                   "--mean-offspring", "5", "--cluster-sd", "0.05",
                   "--seed", "9", *WIN, *RES, "--out", str(out)])
        assert rc == 0
        assert out.exists()

    def test_grid_model(self, tmp_path):
        w = Window(0.0, 0.0, 1.0, 1.0)
        g = w.blank_grid(64)
        X, _ = g.pixel_centers()
        write_raster(g.with_values(100.0 * X + g.values), tmp_path / "lam.grid")
        out = tmp_path / "g.csv"
        rc = main(["simulate", "--model", "grid",
                   "--intensity-grid", str(tmp_path / "lam.grid"),
                   "--seed", "10", *WIN, *RES, "--out", str(out)])
        assert rc == 0


class TestTessellate:
    def test_writes_label_grid(self, tmp_path, capsys):
        out = tmp_path / "part.grid"
        rc = main(["tessellate", "--gamma", "25", "--seed", "5", *WIN, *RES,
                   "--out", str(out)])
        assert rc == 0
        report = capsys.readouterr().out
        assert report.startswith("n_cells ")
        grid = read_raster(out)
        n_cells = int(report.split()[1])
        assert len(np.unique(grid.values[np.isfinite(grid.values)])) == n_cells


class TestFitAndPredict:
    def test_fit_reports(self, workdir):
        assert (workdir / "spatial.model").exists()
        assert (workdir / "spatial_fit.grid").exists()
        assert (workdir / "cov.model").exists()

    def test_predict_grid_matches_fit_grid(self, workdir, tmp_path):
        out = tmp_path / "pred.grid"
        rc = main(["predict", "--model", str(workdir / "spatial.model"),
                   "--grid-out", str(out)])
        assert rc == 0
        assert out.read_bytes() == (workdir / "spatial_fit.grid").read_bytes()

    def test_predict_at_location(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "spatial.model"),
                   "--at", "0.5", "0.5"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("estimate ")
        est = float(out.split()[1])
        model = load_model(workdir / "spatial.model")
        from pointforest import predict_spatial
        assert est == predict_spatial(model, 0.5, 0.5)

    def test_predict_covariate_with_z(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "cov.model"),
                   "--z", "0.5,0.5,0.5,0.5", "--at", "0", "0"])
        assert rc == 0
        assert capsys.readouterr().out.startswith("estimate ")

    def test_predict_covariate_grid_matches_fit(self, workdir, tmp_path):
        out = tmp_path / "cov_pred.grid"
        rc = main(["predict", "--model", str(workdir / "cov.model"),
                   "--covariates", str(workdir / "covs" / "covariates.txt"),
                   "--grid-out", str(out)])
        assert rc == 0
        assert out.read_bytes() == (workdir / "cov_fit.grid").read_bytes()

    def test_predict_covariate_at_location(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "cov.model"),
                   "--covariates", str(workdir / "covs" / "covariates.txt"),
                   "--at", "100", "50"])
        assert rc == 0
        assert capsys.readouterr().out.startswith("estimate ")

    def test_mismatched_manifest_is_data_error(self, workdir, tmp_path):
        manifest = workdir / "covs" / "covariates.txt"
        lines = manifest.read_text().splitlines()
        renamed = tmp_path / "covariates.txt"
        body = []
        for ln in lines:
            name, fname = ln.split()
            (tmp_path / fname).write_bytes(
                (workdir / "covs" / fname).read_bytes())
            body.append(f"{name}x {fname}")
        renamed.write_text("\n".join(body) + "\n")
        rc = main(["predict", "--model", str(workdir / "cov.model"),
                   "--covariates", str(renamed),
                   "--grid-out", str(tmp_path / "o.grid")])
        assert rc == 3

    def test_fit_default_mtry_is_p_over_three(self, workdir, tmp_path,
                                              capsys):
        rc = main(["fit", "--mode", "covariate",
                   "--points", str(workdir / "syn_points.csv"),
                   "--covariates", str(workdir / "covs" / "covariates.txt"),
                   "--M", "1", "--seed", "6",
                   "--window", "0", "0", "200", "100", *RES,
                   "--out", str(tmp_path / "m.model")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mtry 1" in out  # round(4 / 3) = 1


class TestTune:
    def test_spatial_scores_csv(self, workdir, tmp_path, capsys):
        scores = tmp_path / "scores.csv"
        rc = main(["tune", "--mode", "spatial",
                   "--points", str(workdir / "points.csv"),
                   "--gamma-grid", "9,25", "--M", "2", "--seed", "7",
                   *WIN, *RES, "--scores-out", str(scores)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("best_gamma ")
        best = float(out.split()[1])
        assert best in (9.0, 25.0)
        rows = scores.read_text().splitlines()
        assert rows[0] == "gamma,mean_oob"
        assert len(rows) == 3
        table = {float(r.split(",")[0]): float(r.split(",")[1])
                 for r in rows[1:]}
        assert best == max(table, key=table.get)

    def test_covariate_tune(self, workdir, capsys):
        rc = main(["tune", "--mode", "covariate",
                   "--points", str(workdir / "syn_points.csv"),
                   "--covariates", str(workdir / "covs" / "covariates.txt"),
                   "--mtry-grid", "1,2", "--n-min-grid", "10",
                   "--M", "2", "--seed", "8",
                   "--window", "0", "0", "200", "100", *RES])
        assert rc == 0
        out = capsys.readouterr().out
        assert "best_mtry" in out and "best_n_min" in out

    def test_determinism(self, workdir, tmp_path):
        outs = []
        for name in ("s1.csv", "s2.csv"):
            path = tmp_path / name
            rc = main(["tune", "--mode", "spatial",
                       "--points", str(workdir / "points.csv"),
                       "--gamma-grid", "9,25", "--M", "2", "--seed", "7",
                       *WIN, *RES, "--scores-out", str(path)])
            assert rc == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]


class TestVip:
    def test_from_saved_model(self, workdir, tmp_path):
        out = tmp_path / "vip.csv"
        rc = main(["vip", "--model", str(workdir / "cov.model"),
                   "--out", str(out)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "covariate,vip"
        assert [r.split(",")[0] for r in rows[1:]][:3] == ["Mn", "Zn", "Fe"]
        assert len(rows) == 5  # header + the 4 covariates

    def test_spatial_model_is_usage_error(self, workdir, capsys):
        rc = main(["vip", "--model", str(workdir / "spatial.model")])
        assert rc == 2
        assert "ERROR:" in capsys.readouterr().err

    def test_refit_mode_with_reps(self, workdir, capsys):
        rc = main(["vip", "--points", str(workdir / "syn_points.csv"),
                   "--covariates", str(workdir / "covs" / "covariates.txt"),
                   "--M", "2", "--reps", "2", "--seed", "11",
                   "--window", "0", "0", "200", "100", *RES])
        assert rc == 0
        rows = capsys.readouterr().out.splitlines()
        assert rows[0] == "rep,covariate,vip"
        assert len(rows) == 1 + 2 * 4  # 2 reps x 4 covariates


class TestEvaluate:
    def test_metrics_between_rasters(self, tmp_path, capsys):
        w = Window(0.0, 0.0, 1.0, 1.0)
        g = w.blank_grid(32)
        write_raster(g.with_values(np.full(g.values.shape, 2.0)),
                     tmp_path / "est.grid")
        write_raster(g.with_values(np.full(g.values.shape, 5.0)),
                     tmp_path / "tru.grid")
        rc = main(["evaluate", "--estimate", str(tmp_path / "est.grid"),
                   "--truth", str(tmp_path / "tru.grid"), "--metric", "both"])
        assert rc == 0
        out = dict(ln.split() for ln in capsys.readouterr().out.splitlines())
        assert float(out["mise"]) == pytest.approx(9.0, rel=1e-9)
        assert float(out["miae"]) == pytest.approx(3.0, rel=1e-9)

    def test_geometry_mismatch_is_data_error(self, tmp_path, capsys):
        w = Window(0.0, 0.0, 1.0, 1.0)
        write_raster(w.blank_grid(32), tmp_path / "a.grid")
        write_raster(w.blank_grid(16), tmp_path / "b.grid")
        rc = main(["evaluate", "--estimate", str(tmp_path / "a.grid"),
                   "--truth", str(tmp_path / "b.grid")])
        assert rc == 3

    def test_replication_benchmark(self, tmp_path):
        out = tmp_path / "bench.csv"
        rc = main(["evaluate", "--replications", "1", "--p", "4",
                   "--target-count", "120", "--M", "2", "--mtry", "2",
                   "--seed", "12", "--window", "0", "0", "200", "100", *RES,
                   "--out", str(out)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows[0].startswith("rep,n_points,mise_covariate")
        assert len(rows) == 2


class TestStudyInfill:
    def test_csv_output(self, tmp_path):
        w = Window(0.0, 0.0, 1.0, 1.0)
        g = w.blank_grid(64)
        X, _ = g.pixel_centers()
        write_raster(g.with_values(80.0 * X + g.values), tmp_path / "lam.grid")
        out = tmp_path / "study.csv"
        rc = main(["study-infill", "--intensity-grid", str(tmp_path / "lam.grid"),
                   "--a-grid", "1,4", "--reps", "2", "--M", "2",
                   "--seed", "13", *RES, "--x", "0.6", "0.5",
                   "--out", str(out)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "a_n,h_n,gamma_n,mse,stderr"
        assert len(rows) == 3
        a_levels = [float(r.split(",")[0]) for r in rows[1:]]
        assert a_levels == [1.0, 4.0]


class TestConfigAndErrors:
    def test_config_fills_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "intensity": 120.0, "seed": 21,
            "window": [0.0, 0.0, 1.0, 1.0], "resolution": 64}))
        out = tmp_path / "c.csv"
        rc = main(["simulate", "--model", "constant", "--config", str(cfg),
                   "--out", str(out)])
        assert rc == 0
        assert out.exists()

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "intensity": 120.0, "seed": 21,
            "window": [0.0, 0.0, 1.0, 1.0], "resolution": 64}))
        o1 = tmp_path / "c1.csv"
        o2 = tmp_path / "c2.csv"
        assert main(["simulate", "--model", "constant", "--config", str(cfg),
                     "--seed", "22", "--out", str(o1)]) == 0
        assert main(["simulate", "--model", "constant", "--config", str(cfg),
                     "--out", str(o2)]) == 0
        assert o1.read_bytes() != o2.read_bytes()  # the explicit seed won

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"no_such_flag": 1}))
        rc = main(["simulate", "--model", "constant", "--intensity", "100",
                   "--seed", "1", *WIN, "--config", str(cfg),
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 2
        assert "ERROR:" in capsys.readouterr().err

    def test_missing_window(self, tmp_path, capsys):
        rc = main(["simulate", "--model", "constant", "--intensity", "100",
                   "--seed", "1", "--out", str(tmp_path / "x.csv")])
        assert rc == 2
        assert "window" in capsys.readouterr().err

    def test_window_and_mask_conflict(self, tmp_path, capsys):
        w = Window(0.0, 0.0, 1.0, 1.0)
        mask = w.blank_grid(16, fill=1.0)
        write_raster(mask, tmp_path / "mask.grid")
        rc = main(["simulate", "--model", "constant", "--intensity", "100",
                   "--seed", "1", *WIN, "--mask", str(tmp_path / "mask.grid"),
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 2

    def test_missing_seed(self, tmp_path, capsys):
        rc = main(["simulate", "--model", "constant", "--intensity", "100",
                   *WIN, "--out", str(tmp_path / "x.csv")])
        assert rc == 2
        assert "seed" in capsys.readouterr().err

    def test_constant_needs_intensity(self, tmp_path, capsys):
        rc = main(["simulate", "--model", "constant", "--seed", "1", *WIN,
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 2

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--bogus"])
        assert exc.value.code == 2
        assert "ERROR:" in capsys.readouterr().err

    def test_missing_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_missing_points_file_exits_3(self, tmp_path, capsys):
        rc = main(["fit", "--mode", "spatial", "--points",
                   str(tmp_path / "absent.csv"), "--gamma", "9", "--M", "1",
                   "--seed", "1", *WIN, "--out", str(tmp_path / "m.model")])
        assert rc == 3

    def test_corrupt_model_exits_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.model"
        bad.write_text("not a model\n")
        rc = main(["predict", "--model", str(bad), "--at", "0.5", "0.5"])
        assert rc == 3

    def test_z_on_spatial_model_exits_2(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "spatial.model"),
                   "--z", "1,2"])
        assert rc == 2

    def test_predict_needs_exactly_one_target(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "spatial.model")])
        assert rc == 2
        rc = main(["predict", "--model", str(workdir / "spatial.model"),
                   "--grid-out", "/tmp/x.grid", "--at", "0.5", "0.5"])
        assert rc == 2

    def test_outside_location_exits_2(self, workdir, capsys):
        rc = main(["predict", "--model", str(workdir / "spatial.model"),
                   "--at", "5", "5"])
        assert rc == 2

import json

import numpy as np
import pytest

from stagecal.calibration import CalibrationBundle, predict_lit_chart
from stagecal.cli import load_config, main, run_oracle, run_solve
from stagecal.imaging import ChartGridSpec, ChartSamples, LinearImage, extract_chart, read_chart_csv, read_pfm
from stagecal.spectral import brute_force_q

SCENARIO_SEEDS = {"broad": 3, "identity": 0, "monochromatic": 0, "rgb-led": 0}


@pytest.fixture(scope="session")
def fixtures(tmp_path_factory):
    """One generated fixture directory per scenario, solved once."""
    root = tmp_path_factory.mktemp("fixtures")
    out = {}
    for scenario, seed in SCENARIO_SEEDS.items():
        fixture_dir = run_oracle(seed, scenario, root / scenario)
        config = load_config(fixture_dir / "config.json")
        bundle, report, code = run_solve(config)
        out[scenario] = {
            "dir": fixture_dir,
            "config": config,
            "bundle": bundle,
            "report": report,
            "code": code,
        }
    return out


def rebuild_srl(config):
    from stagecal.calibration import build_srl

    charts = []
    for channel in ("red", "green", "blue"):
        src = config.channel_charts[channel]
        grid = ChartGridSpec(src.corners, inset=src.inset)
        img = LinearImage(read_pfm(src.image))
        charts.append(extract_chart(img, grid, white_index=config.white_index, saturation_level=None))
    return build_srl(*charts)


class TestSolve:
    def test_broad_exit_code_and_files(self, fixtures):
        fx = fixtures["broad"]
        assert fx["code"] == 0
        out = fx["config"].output_dir
        for name in (
            "bundle.json",
            "report.json",
            "targets.csv",
            "lit_m_only.csv",
            "lit_m_q.csv",
            "displayed_no_black_level.csv",
            "displayed_with_black_level.csv",
            "comparison_lit_m_q.png",
        ):
            assert (out / name).is_file()

    def test_bundle_q_matches_brute_force(self, fixtures):
        fx = fixtures["broad"]
        srl = rebuild_srl(fx["config"])
        bundle = fx["bundle"]
        targets = read_chart_csv(fx["config"].targets_csv, fx["config"].white_index)
        predicted = predict_lit_chart(srl, bundle.m, targets.white / 0.9, bundle.beta)
        qb = brute_force_q(predicted, targets.patches)
        assert np.linalg.norm(bundle.q - qb) / np.linalg.norm(qb) < 1e-9

    def test_report_improvement(self, fixtures):
        errors = fixtures["broad"]["report"]["errors"]
        for c in "rgb":
            assert errors["lit_m_q"][c] <= errors["lit_m_only"][c]
        assert any(errors["lit_m_q"][c] < errors["lit_m_only"][c] for c in "rgb")

    def test_black_level_improves_displayed(self, fixtures):
        errors = fixtures["broad"]["report"]["errors"]
        with_bl = sum(errors["displayed_with_black_level"].values())
        without = sum(errors["displayed_no_black_level"].values())
        assert with_bl < without

    def test_identity_scene_near_perfect(self, fixtures):
        errors = fixtures["identity"]["report"]["errors"]["lit_m_q"]
        assert all(err < 1e-6 for err in errors.values())
        # flat-chart spread is capture noise only; the anchored solve must
        # leave Q at the identity rather than fit the noise directions
        assert np.abs(fixtures["identity"]["bundle"].q - np.eye(3)).max() < 1e-6

    def test_monochromatic_soft_failure(self, fixtures):
        fx = fixtures["monochromatic"]
        assert fx["code"] == 1
        assert fx["bundle"].n is None
        assert fx["report"]["diagnostics"]["n_available"] is False
        assert fx["report"]["diagnostics"]["cond_Q"] > 1e4
        # outputs still written despite the soft failure
        assert (fx["config"].output_dir / "bundle.json").is_file()
        doc = json.loads((fx["config"].output_dir / "bundle.json").read_text())
        assert doc["N"] is None

    def test_rgb_led_q_near_identity(self, fixtures):
        q = fixtures["rgb-led"]["bundle"].q
        assert np.abs(q - np.eye(3)).max() < 0.05

    def test_report_errors_reproducible_from_csvs(self, fixtures):
        from stagecal.calibration import chart_error

        fx = fixtures["broad"]
        out = fx["config"].output_dir
        targets = read_chart_csv(out / "targets.csv")
        for variant, expect in fx["report"]["errors"].items():
            measured = read_chart_csv(out / f"{variant}.csv")
            err = chart_error(targets, measured)
            assert np.array_equal(err, np.array([expect["r"], expect["g"], expect["b"]]))


class TestDeterminism:
    def test_oracle_byte_identical(self, tmp_path):
        a = run_oracle(11, "broad", tmp_path / "a")
        b = run_oracle(11, "broad", tmp_path / "b")
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_solve_byte_identical(self, fixtures, tmp_path):
        fx = fixtures["broad"]
        code1 = main(
            ["solve", "--config", str(fx["dir"] / "config.json"), "--output-dir", str(tmp_path / "r1")]
        )
        code2 = main(
            ["solve", "--config", str(fx["dir"] / "config.json"), "--output-dir", str(tmp_path / "r2")]
        )
        assert code1 == code2 == 0
        for name in ("bundle.json", "report.json", "lit_m_q.csv", "comparison_lit_m_q.png"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


class TestSimulate:
    def test_matches_solve_prediction_bit_exactly(self, fixtures, tmp_path):
        fx = fixtures["broad"]
        bundle_path = fx["config"].output_dir / "bundle.json"
        code = main(
            [
                "simulate",
                "--config", str(fx["dir"] / "config.json"),
                "--bundle", str(bundle_path),
                "--variant", "m-q",
                "--output-dir", str(tmp_path),
            ]
        )
        assert code == 0
        simulated = (tmp_path / "simulated_lit_m_q.csv").read_bytes()
        solved = (fx["config"].output_dir / "lit_m_q.csv").read_bytes()
        assert simulated == solved

    def test_identity_q_makes_variants_agree(self, fixtures, tmp_path):
        fx = fixtures["broad"]
        bundle = fx["bundle"]
        tweaked = CalibrationBundle(
            m=bundle.m, q=np.eye(3), n=bundle.n, beta=bundle.beta, black_offset=bundle.black_offset
        )
        bundle_path = tmp_path / "identity_q.json"
        bundle_path.write_text(tweaked.to_json())
        for variant in ("m-only", "m-q"):
            assert (
                main(
                    [
                        "simulate",
                        "--config", str(fx["dir"] / "config.json"),
                        "--bundle", str(bundle_path),
                        "--variant", variant,
                        "--output-dir", str(tmp_path / variant),
                    ]
                )
                == 0
            )
        a = (tmp_path / "m-only" / "simulated_lit_m_only.csv").read_text()
        b = (tmp_path / "m-q" / "simulated_lit_m_q.csv").read_text()
        assert a.splitlines()[1:] == b.splitlines()[1:]

    def test_tampered_beta_rejected(self, fixtures, tmp_path):
        fx = fixtures["broad"]
        doc = json.loads((fx["config"].output_dir / "bundle.json").read_text())
        doc["beta"] = 0.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        code = main(
            [
                "simulate",
                "--config", str(fx["dir"] / "config.json"),
                "--bundle", str(bad),
            ]
        )
        assert code == 2


class TestErrorsAndUtilities:
    def test_missing_input_exit_2(self, fixtures, tmp_path, capsys):
        fx = fixtures["broad"]
        doc = json.loads((fx["dir"] / "config.json").read_text())
        doc["primaries"]["image"] = "nope.pfm"
        bad = tmp_path / "config.json"
        bad.write_text(json.dumps(doc))
        assert main(["solve", "--config", str(bad)]) == 2
        captured = capsys.readouterr()
        assert "primaries" in captured.err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["solve", "--config", str(tmp_path / "none.json")]) == 2

    def test_flag_overrides_file(self, fixtures, tmp_path):
        # raising the Q condition limit turns the monochromatic soft failure
        # into a (numerically dubious but permitted) full solve
        fx = fixtures["monochromatic"]
        code = main(
            [
                "solve",
                "--config", str(fx["dir"] / "config.json"),
                "--output-dir", str(tmp_path / "forced"),
                "--cond-limit-q", "1e30",
            ]
        )
        assert code == 0
        doc = json.loads((tmp_path / "forced" / "bundle.json").read_text())
        assert doc["N"] is not None

    def test_beta_command(self, capsys):
        assert main(["beta", "--half-extent", "0.6", "--resolution", "256"]) == 0
        value = float(capsys.readouterr().out.strip())
        assert 0.30 < value < 0.32

    def test_chart_error_command(self, fixtures, capsys):
        out = fixtures["broad"]["config"].output_dir
        code = main(
            [
                "chart-error",
                "--target", str(out / "targets.csv"),
                "--measured", str(out / "lit_m_q.csv"),
            ]
        )
        assert code == 0
        metrics = json.loads(capsys.readouterr().out)
        expect = fixtures["broad"]["report"]["errors"]["lit_m_q"]
        assert metrics == expect

    def test_oracle_rejects_unknown_scenario(self):
        with pytest.raises(SystemExit):
            main(["oracle", "--seed", "1", "--scenario", "nope", "--outdir", "/tmp/x"])

    def test_gamut_fraction_recorded(self, fixtures):
        diag = fixtures["broad"]["report"]["diagnostics"]
        assert 0.0 <= diag["out_of_gamut_fraction"] <= 1.0
        assert diag["negative_clamped_components"] >= 0
        assert diag["cond_SL"] >= 1.0 and diag["residual"] >= 0.0

    def test_report_records_both_panel_geometries(self, fixtures):
        beta_block = fixtures["broad"]["report"]["beta"]
        assert beta_block["half_extent"] == 0.6
        assert abs(beta_block["value"] - beta_block["analytic_form_factor"]) < 1e-3
        assert beta_block["exact_1m_panel_half_extent"] == 0.5
        assert abs(beta_block["exact_1m_panel_form_factor"] - 0.2394564704607735) < 1e-12


class TestAlternateConfigRoutes:
    def test_env_map_w_avg_source(self, fixtures, tmp_path):
        from stagecal.imaging import write_pfm
        from stagecal.cli import run_solve

        fx = fixtures["broad"]
        targets = read_chart_csv(fx["dir"] / "targets.csv")
        # uniform environment whose diffuse integral reproduces the white route
        w_avg = targets.white / 0.9
        env = np.broadcast_to(w_avg, (64, 128, 3)).copy()
        write_pfm(fx["dir"] / "env.pfm", env)
        doc = json.loads((fx["dir"] / "config.json").read_text())
        doc["w_avg"] = {"mode": "env_map", "path": "env.pfm", "facing": [0.0, 0.0, 1.0]}
        doc["output_dir"] = str(tmp_path / "out")
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(doc))
        # relative paths resolve against the config's own directory
        doc["primaries"]["image"] = str(fx["dir"] / "primaries.pfm")
        for name in ("red", "green", "blue"):
            doc["channel_charts"][name]["image"] = str(fx["dir"] / f"chart_{name}.pfm")
        doc["targets"]["csv"] = str(fx["dir"] / "targets.csv")
        doc["w_avg"]["path"] = str(fx["dir"] / "env.pfm")
        doc["black_level"]["image"] = str(fx["dir"] / "black.pfm")
        cfg_path.write_text(json.dumps(doc))
        bundle, report, code = run_solve(load_config(cfg_path))
        assert code == 0
        assert report["metadata"]["w_avg_mode"] == "env_map"
        # uniform-env integration agrees with the white route to ~0.2%
        ref_q = fx["bundle"].q
        assert np.abs(bundle.q - ref_q).max() < 0.01

    def test_targets_from_image(self, fixtures, tmp_path):
        from stagecal.cli import run_solve
        from stagecal.imaging import write_pfm

        fx = fixtures["broad"]
        targets = read_chart_csv(fx["dir"] / "targets.csv")
        img = np.zeros((4 * 16, 6 * 16, 3))
        for j in range(24):
            r, c = divmod(j, 6)
            img[r * 16 : (r + 1) * 16, c * 16 : (c + 1) * 16] = targets.patches[j]
        write_pfm(tmp_path / "targets.pfm", img)
        doc = json.loads((fx["dir"] / "config.json").read_text())
        doc["primaries"]["image"] = str(fx["dir"] / "primaries.pfm")
        for name in ("red", "green", "blue"):
            doc["channel_charts"][name]["image"] = str(fx["dir"] / f"chart_{name}.pfm")
        doc["black_level"]["image"] = str(fx["dir"] / "black.pfm")
        doc["targets"] = {
            "image": str(tmp_path / "targets.pfm"),
            "corners": [[0, 0], [96, 0], [96, 64], [0, 64]],
            "inset": 0.25,
        }
        doc["output_dir"] = str(tmp_path / "out")
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(doc))
        bundle, report, code = run_solve(load_config(cfg_path))
        assert code == 0
        # flat patches re-extract bit-exactly through float32, so Q matches
        # the CSV-targets run up to that quantization
        assert np.abs(bundle.q - fx["bundle"].q).max() < 1e-6

    def test_weights_from_config(self, fixtures, tmp_path):
        from stagecal.cli import run_solve

        fx = fixtures["broad"]
        doc = json.loads((fx["dir"] / "config.json").read_text())
        doc["primaries"]["image"] = str(fx["dir"] / "primaries.pfm")
        for name in ("red", "green", "blue"):
            doc["channel_charts"][name]["image"] = str(fx["dir"] / f"chart_{name}.pfm")
        doc["targets"]["csv"] = str(fx["dir"] / "targets.csv")
        doc["black_level"]["image"] = str(fx["dir"] / "black.pfm")
        weights = [0.0] * 24
        for j in (0, 7, 14, 21):
            weights[j] = 1.0
        doc["weights"] = weights
        doc["output_dir"] = str(tmp_path / "out")
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(doc))
        bundle, report, code = run_solve(load_config(cfg_path))
        assert code == 0
        assert np.isfinite(bundle.q).all()

import csv
import json

import numpy as np
import pytest

from grangernet import io
from grangernet.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from grangernet.exceptions import NumericalError
from grangernet.netanalysis import GcNetwork, edge_betweenness, read_network_csv, write_network_csv

from oracles import brute_edge_betweenness


def simulate(tmp_path, name, **scenario):
    out = tmp_path / name
    config = tmp_path / f"{name}.yaml"
    io.dump_config(config, {"scenario": scenario})
    assert main(["simulate", "--config", str(config), "--seed", "5", "-o", str(out)]) == EXIT_OK
    return out


def check_null_groups_are_zero(outdir):
    coefs, _ = io.read_coefs(outdir / "coefs.npz")
    support = io.read_support(outdir / "support.json")
    null = ~support & ~np.eye(support.shape[1], dtype=bool)[None]
    for k, i, j in np.argwhere(null):
        assert np.all(coefs[k, :, i, j] == 0.0)


def check_betweenness_exact(path):
    net = read_network_csv(path)
    D = net.distance
    edges = {(j, i): D[i, j] for i, j in np.argwhere(np.isfinite(D) & (net.strength > 0))}
    assert edge_betweenness(net, exact=True) == brute_edge_betweenness(net.n, edges)


class TestSimulate:
    def test_default_shape_scenario(self, tmp_path):
        out = simulate(tmp_path, "sim", n=20, p=1, K=5, T=100)
        files = io.series_files(out)
        assert len(files) == 5
        for f in files:
            assert io.read_series(f)[0].shape == (20, 100)
        assert (out / "truth.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 5 and manifest["command"] == "simulate"

    def test_repeat_is_byte_identical(self, tmp_path):
        a = simulate(tmp_path, "a", n=5, K=2, T=40)
        b = simulate(tmp_path, "b", n=5, K=2, T=40)
        for name in ["series_1.csv", "series_2.csv", "truth.json"]:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_binary_format(self, tmp_path):
        out = tmp_path / "bin"
        assert main(["simulate", "--format", "binary", "-o", str(out)]) == EXIT_OK
        assert len(list(out.glob("series_*.gcts"))) == 5

    def test_infeasible_densities(self, tmp_path, capsys):
        config = tmp_path / "c.yaml"
        io.dump_config(config, {"scenario": {"common_density": 0.7, "differential_density": 0.4}})
        assert main(["simulate", "--config", str(config), "-o", str(tmp_path / "x")]) == EXIT_VALIDATION
        assert "density" in capsys.readouterr().err

    def test_validation_errors(self, tmp_path):
        assert main(["simulate"]) == EXIT_VALIDATION
        assert main(["estimate", "-o", str(tmp_path)]) == EXIT_VALIDATION
        config = tmp_path / "c.yaml"
        io.dump_config(config, {"solver": {"bogus": 1}})
        assert main(["simulate", "--config", str(config), "-o", str(tmp_path)]) == EXIT_VALIDATION


class TestPipeline:
    def test_simulate_estimate_evaluate(self, tmp_path):
        sim = simulate(tmp_path, "sim", n=6, K=2, T=80)
        est = tmp_path / "est"
        code = main(["estimate", "-i", str(sim), "--formulation", "dgn", "--q", "1", "--grid-size", "4",
                     "--lam2-size", "3", "-o", str(est)])
        assert code == EXIT_OK
        for name in ["grid.csv", "support.json", "coefs.npz", "refit_coefs.npz", "network_1.csv",
                     "network_2.csv", "selected.json", "manifest.json"]:
            assert (est / name).exists()
        with open(est / "grid.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 12
        check_null_groups_are_zero(est)
        ev = tmp_path / "ev"
        assert main(["evaluate", "--truth", str(sim / "truth.json"), "--support", str(est / "support.json"),
                     "-o", str(ev)]) == EXIT_OK
        with open(ev / "metrics.csv") as fh:
            assert [r["part"] for r in csv.DictReader(fh)] == ["total", "common", "differential"]

    def test_select_alias_and_single_point(self, tmp_path):
        sim = simulate(tmp_path, "sim", n=5, K=2, T=60)
        config = tmp_path / "c.yaml"
        io.dump_config(config, {"grid": [[0.05, 0.05]], "formulation": "dgn", "q": 1.0})
        assert main(["select", "--config", str(config), "-i", str(sim), "-o", str(tmp_path / "s")]) == EXIT_OK
        sel = json.loads((tmp_path / "s" / "selected.json").read_text())
        assert (sel["lam1"], sel["lam2"]) == (0.05, 0.05)

    def test_evaluate_perfect_prediction(self, tmp_path):
        sim = simulate(tmp_path, "sim", n=6, K=3, T=40)
        truth = io.read_truth(sim / "truth.json")
        io.write_support(tmp_path / "support.json", truth.support)
        assert main(["evaluate", "--truth", str(sim / "truth.json"), "--support", str(tmp_path / "support.json"),
                     "-o", str(tmp_path / "ev")]) == EXIT_OK
        with open(tmp_path / "ev" / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert truth.differential.any()
        assert [float(r["F1"]) for r in rows] == [100.0, 100.0, 100.0]

    def test_evaluate_experiment(self, tmp_path):
        config = tmp_path / "c.yaml"
        io.dump_config(config, {"formulation": "dgn", "q": 1.0, "replicates": 2,
                                "scenario": {"n": 5, "K": 2, "T": 60, "grid_size": 3, "lam2_size": 2}})
        assert main(["evaluate", "--config", str(config), "-o", str(tmp_path / "ev")]) == EXIT_OK
        assert (tmp_path / "ev" / "summary.csv").exists()

    @pytest.mark.parametrize("preset,K", [("d2k", 2), ("f2k", 2)])
    def test_two_group_presets(self, tmp_path, preset, K):
        sim = simulate(tmp_path, "sim", n=5, K=K, T=60)
        out = tmp_path / preset
        assert main(["estimate", "--preset", preset, "-i", str(sim), "--grid-size", "3", "--lam2-size", "2",
                     "-o", str(out)]) == EXIT_OK
        check_null_groups_are_zero(out)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["q"] == 1.0

    def test_c18k_preset_on_eighteen_subjects(self, tmp_path):
        sim = simulate(tmp_path, "sim", n=6, K=18, T=60, common_density=0.2, differential_density=0.0)
        out = tmp_path / "c18k"
        assert main(["estimate", "--preset", "c18k", "-i", str(sim), "--grid-size", "4", "-o", str(out)]) == EXIT_OK
        assert io.read_support(out / "support.json").shape == (18, 6, 6)
        assert json.loads((out / "manifest.json").read_text())["config"]["formulation"] == "cgn"
        check_null_groups_are_zero(out)
        for k in range(18):
            check_betweenness_exact(out / f"network_{k + 1}.csv")

    def test_preset_group_count_checked(self, tmp_path):
        sim = simulate(tmp_path, "sim", n=5, K=3, T=40)
        assert main(["estimate", "--preset", "d2k", "-i", str(sim), "-o", str(tmp_path / "o")]) == EXIT_VALIDATION

    def test_numerical_failure_exit_code(self, tmp_path, monkeypatch):
        sim = simulate(tmp_path, "sim", n=4, K=2, T=40)

        def fail(*args, **kwargs):
            raise NumericalError("diverged")

        monkeypatch.setattr("grangernet.cli.select_model", fail)
        assert main(["estimate", "-i", str(sim), "-o", str(tmp_path / "o")]) == EXIT_NUMERICAL


def _write_net(path, W, labels):
    write_network_csv(GcNetwork(tuple(labels), np.asarray(W, float)), path)


class TestAnalyze:
    def test_identical_networks_give_empty_report(self, tmp_path):
        W = [[0, 1, 0], [0, 0, 2], [1, 0, 0]]
        _write_net(tmp_path / "a.csv", W, "abc")
        assert main(["analyze", "--network-a", str(tmp_path / "a.csv"), "--network-b", str(tmp_path / "a.csv"),
                     "-o", str(tmp_path / "o")]) == EXIT_OK
        lines = (tmp_path / "o" / "centrality.csv").read_text().splitlines()
        assert lines == ["rank,cause,effect,difference,type"]

    def test_one_edge_difference(self, tmp_path):
        _write_net(tmp_path / "a.csv", [[0, 1], [0, 0]], "ab")
        _write_net(tmp_path / "b.csv", [[0, 0], [0, 0]], "ab")
        assert main(["analyze", "--network-a", str(tmp_path / "a.csv"), "--network-b", str(tmp_path / "b.csv"),
                     "-o", str(tmp_path / "o")]) == EXIT_OK
        with open(tmp_path / "o" / "centrality.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert (rows[0]["cause"], rows[0]["effect"], rows[0]["type"]) == ("b", "a", "extra")
        assert float(rows[0]["difference"]) == 1.0

    def test_missing_network_argument(self, tmp_path):
        assert main(["analyze", "-o", str(tmp_path)]) == EXIT_VALIDATION

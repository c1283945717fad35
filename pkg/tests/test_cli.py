import csv
import json

import pytest

from multicell import cli, model
from conftest import single_cell_spec


def write_config(tmp_path, spec, name="net.json"):
    path = tmp_path / name
    model.save_spec(spec, path)
    return str(path)


def two_cell_spec():
    law = model.DiscreteSessionLaw(
        (0.5, 0.5), (((1.0, (2.0,)),), ((1.0, (3.0, 4.0)),)))
    return model.NetworkSpec(2, (model.RouteSpec(model.Route((1, 2)), 1.5, law),))


class TestAnalyze:
    def test_outputs_and_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path, two_cell_spec())
        out = tmp_path / "out"
        rc = cli.main(["analyze", "--config", cfg, "--out", str(out), "--seed", "3"])
        assert rc == 0
        for name in ("manifest.json", "stage_means.csv", "cell_means.csv", "cell_pmf.csv"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["subcommand"] == "analyze"
        assert cfg in manifest["input_digests"]

    def test_cell_pmf_sums_to_one(self, tmp_path):
        cfg = write_config(tmp_path, two_cell_spec())
        out = tmp_path / "out"
        cli.main(["analyze", "--config", cfg, "--out", str(out)])
        mass = {}
        with open(out / "cell_pmf.csv") as fh:
            for row in csv.DictReader(fh):
                mass[row["cell"]] = mass.get(row["cell"], 0.0) + float(row["probability"])
        assert set(mass) == {"1", "2"}
        for total in mass.values():
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_unreachable_stage_warning(self, tmp_path, capsys):
        law = model.DiscreteSessionLaw((1.0, 0.0), (((1.0, (2.0,)),), ()))
        spec = model.NetworkSpec(2, (model.RouteSpec(model.Route((1, 2)), 1.0, law),))
        cfg = write_config(tmp_path, spec)
        rc = cli.main(["analyze", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 0
        assert "unreachable" in capsys.readouterr().out

    def test_invalid_config_exit_1(self, tmp_path, capsys):
        law = model.DiscreteSessionLaw((0.7,), (((1.0, (2.0,)),),))
        spec = model.NetworkSpec(1, (model.RouteSpec(model.Route((1,)), 1.0, law),))
        cfg = write_config(tmp_path, spec)
        rc = cli.main(["analyze", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "stage_probs" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path, capsys):
        rc = cli.main(["analyze", "--config", str(tmp_path / "absent.json"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2


class TestSimulate:
    def _run(self, tmp_path, out_name, seed="5", reps="2"):
        cfg = write_config(tmp_path, single_cell_spec(rate=1.0, hold=2.0))
        out = tmp_path / out_name
        rc = cli.main(["simulate", "--config", cfg, "--out", str(out),
                       "--seed", seed, "--horizon", "2000", "--warmup", "50",
                       "--interval", "5", "--replications", reps])
        assert rc == 0
        return out

    def test_outputs(self, tmp_path):
        out = self._run(tmp_path, "a")
        for name in ("manifest.json", "snapshots.csv", "snapshots_rep0.csv",
                     "snapshots_rep1.csv", "summary.csv"):
            assert (out / name).exists()
        with open(out / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["analytic_mean"]) == pytest.approx(2.0)
        assert float(rows[0]["relative_error"]) < 0.2

    def test_deterministic_given_seed(self, tmp_path):
        a = self._run(tmp_path, "a")
        b = self._run(tmp_path, "b")
        assert (a / "snapshots.csv").read_bytes() == (b / "snapshots.csv").read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = self._run(tmp_path, "a", seed="5")
        c = self._run(tmp_path, "c", seed="6")
        assert (a / "snapshots.csv").read_bytes() != (c / "snapshots.csv").read_bytes()

    def test_pooled_is_concatenation(self, tmp_path):
        out = self._run(tmp_path, "a")
        pooled = cli.read_snapshots_csv(out / "snapshots.csv")
        parts = (cli.read_snapshots_csv(out / "snapshots_rep0.csv")
                 + cli.read_snapshots_csv(out / "snapshots_rep1.csv"))
        assert pooled == parts


class TestCompare:
    def test_end_to_end(self, tmp_path):
        cfg = write_config(tmp_path, two_cell_spec())
        sim_out = tmp_path / "sim"
        cli.main(["simulate", "--config", cfg, "--out", str(sim_out),
                  "--seed", "1", "--horizon", "20000", "--warmup", "100",
                  "--interval", "10"])
        cmp_out = tmp_path / "cmp"
        rc = cli.main(["compare", "--config", cfg,
                       "--snapshots", str(sim_out / "snapshots.csv"),
                       "--out", str(cmp_out), "--seed", "2", "--repeats", "10"])
        assert rc == 0
        with open(cmp_out / "subset_metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["n"] for r in rows] == ["1", "2"]
        for r in rows:
            assert float(r["h_kl_mean"]) < 0.2
            assert float(r["h_real_mean"]) > 0.0

    def test_subset_size_flag(self, tmp_path):
        cfg = write_config(tmp_path, two_cell_spec())
        sim_out = tmp_path / "sim"
        cli.main(["simulate", "--config", cfg, "--out", str(sim_out),
                  "--seed", "1", "--horizon", "5000", "--warmup", "100",
                  "--interval", "10"])
        cmp_out = tmp_path / "cmp"
        rc = cli.main(["compare", "--config", cfg,
                       "--snapshots", str(sim_out / "snapshots.csv"),
                       "--out", str(cmp_out), "--subset-size", "2",
                       "--repeats", "5"])
        assert rc == 0
        with open(cmp_out / "subset_metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["n"] for r in rows] == ["2"]

    def test_distance_max_without_coordinates_exit_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path, two_cell_spec())
        sim_out = tmp_path / "sim"
        cli.main(["simulate", "--config", cfg, "--out", str(sim_out),
                  "--seed", "1", "--horizon", "2000", "--warmup", "50",
                  "--interval", "10"])
        rc = cli.main(["compare", "--config", cfg,
                       "--snapshots", str(sim_out / "snapshots.csv"),
                       "--out", str(tmp_path / "cmp"), "--distance-max", "100"])
        assert rc == 1

    def test_dimension_mismatch_exit_1(self, tmp_path):
        cfg2 = write_config(tmp_path, two_cell_spec(), "two.json")
        cfg1 = write_config(tmp_path, single_cell_spec(1.0, 2.0), "one.json")
        sim_out = tmp_path / "sim"
        cli.main(["simulate", "--config", cfg2, "--out", str(sim_out),
                  "--seed", "1", "--horizon", "2000", "--warmup", "50",
                  "--interval", "10"])
        rc = cli.main(["compare", "--config", cfg1,
                       "--snapshots", str(sim_out / "snapshots.csv"),
                       "--out", str(tmp_path / "cmp")])
        assert rc == 1


class TestFixtureAndTrace:
    def _fixture_spec(self):
        # cadence-multiple holds so the pipeline recovers stages exactly
        law = model.DiscreteSessionLaw(
            (0.5, 0.5), (((1.0, (1200.0,)),), ((1.0, (900.0, 600.0)),)))
        return model.NetworkSpec(2, (
            model.RouteSpec(model.Route((1, 2)), 1 / 500.0, law),))

    def test_fixture_then_trace_round_trip(self, tmp_path, capsys):
        cfg = write_config(tmp_path, self._fixture_spec())
        fix_out = tmp_path / "fix"
        rc = cli.main(["fixture", "--config", cfg, "--out", str(fix_out),
                       "--seed", "9", "--days", "2", "--closed-users", "1"])
        assert rc == 0
        truth = json.loads((fix_out / "ground_truth.json").read_text())

        trc_out = tmp_path / "trc"
        rc = cli.main(["trace", "--polls", str(fix_out / "polls.csv"),
                       "--out", str(trc_out), "--cadence", "300"])
        assert rc == 0
        report = json.loads((trc_out / "report.json").read_text())
        assert report["stage_table"] == truth["stage_table"]
        assert report["closed_users"] == 1
        assert report["closed_fraction"] == pytest.approx(truth["closed_fraction"])
        assert report["preprocessing_notes"]
        for name in ("sessions.csv", "ap_params.csv", "stage_table.csv",
                     "ap_validity.csv", "marginal_comparison.csv", "manifest.json"):
            assert (trc_out / name).exists()

    def test_fixture_deterministic(self, tmp_path):
        cfg = write_config(tmp_path, self._fixture_spec())
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            cli.main(["fixture", "--config", cfg, "--out", str(out),
                      "--seed", "4", "--days", "2"])
        assert (a / "polls.csv").read_bytes() == (b / "polls.csv").read_bytes()
        assert (a / "ground_truth.json").read_bytes() == (b / "ground_truth.json").read_bytes()

    def test_trace_exclude_mode_and_one_stage(self, tmp_path):
        cfg = write_config(tmp_path, self._fixture_spec())
        fix_out = tmp_path / "fix"
        cli.main(["fixture", "--config", cfg, "--out", str(fix_out),
                  "--seed", "2", "--days", "2"])
        out = tmp_path / "trc"
        rc = cli.main(["trace", "--polls", str(fix_out / "polls.csv"),
                       "--out", str(out), "--cadence", "300",
                       "--exclude-mode", "1", "--exclude-one-stage"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["exclusion_mode"] == 1
        assert report["sessions_after_exclusion"] <= report["sessions"]
        with open(out / "sessions.csv") as fh:
            rows = list(csv.DictReader(fh))
        users = {r["user"] for r in rows}
        for u in users:
            assert sum(1 for r in rows if r["user"] == u) >= 2

    def test_trace_empty_polls_exit_1(self, tmp_path):
        polls = tmp_path / "polls.csv"
        polls.write_text("timestamp,ap,user,packets\n")
        rc = cli.main(["trace", "--polls", str(polls),
                       "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_trace_missing_polls_exit_2(self, tmp_path):
        rc = cli.main(["trace", "--polls", str(tmp_path / "nope.csv"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2

import csv
import itertools
import json
import subprocess
import sys

import numpy as np
import pytest

from nmfgen.cli import ALL_MODELS, main
from nmfgen.diagnose import cosine_matrix, match_features
from nmfgen.io import load_matrix, write_matrix_csv


@pytest.fixture
def poisson_data(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--n", "60", "--m", "30", "--k", "2", "--family", "poisson", "--mean", "50",
                 "--seed", "1", "--out", str(out)]) == 0
    return out


def run_fit(data, out, model="NMF/T/Po/2", *extra):
    return main(["fit", "--input", str(data), "--model", model, "--restarts", "3", "--out", str(out), *extra])


class TestFit:
    def test_recovers_planted_features(self, poisson_data, tmp_path):
        assert run_fit(poisson_data / "V.csv", tmp_path / "fit") == 0
        got = load_matrix(tmp_path / "fit" / "features.csv").dense()
        planted = load_matrix(poisson_data / "H.csv").dense()
        assert match_features(got, planted).mean >= 0.95

    def test_manifest_and_round_trip(self, poisson_data, tmp_path):
        out = tmp_path / "fit"
        run_fit(poisson_data / "V.csv", out)
        report = json.loads((out / "report.json").read_text())
        assert sorted(p.name for p in out.iterdir()) == sorted(report["manifest"])
        for name in report["manifest"]:
            if name.endswith(".csv") and name != "trace.csv":
                load_matrix(out / name)
        W = load_matrix(out / "W.csv")
        assert list(W.row_labels[:2]) == ["r1", "r2"] and list(W.col_labels) == ["F1", "F2"]
        with open(out / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "divergence"] and len(rows) == report["iterations"] + 2
        assert float(rows[-1][1]) == report["final_divergence"]
        assert set(report["timings"]) == {"estimate", "fit", "diagnose"}
        for key in ("spec", "config", "seed", "iterations", "converged", "loglik", "bic", "n_params", "cost"):
            assert key in report

    def test_deterministic(self, poisson_data, tmp_path):
        run_fit(poisson_data / "V.csv", tmp_path / "a", "NMF/C/NB/2")
        run_fit(poisson_data / "V.csv", tmp_path / "b", "NMF/C/NB/2")
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        assert a["final_divergence"] == b["final_divergence"] and a["spec"] == b["spec"]

    def test_convex_normalization(self, poisson_data, tmp_path):
        out = tmp_path / "fit"
        assert run_fit(poisson_data / "V.csv", out, "NMF/C/Po/2") == 0
        vte = load_matrix(out / "VtE.csv").dense()
        np.testing.assert_allclose(vte.sum(axis=0), 1.0, atol=1e-9)
        report = json.loads((out / "report.json").read_text())
        assert {"E.csv", "D.csv", "VtE.csv", "features.csv"} <= set(report["manifest"])

    def test_bad_spec(self, poisson_data, tmp_path, capsys):
        assert run_fit(poisson_data / "V.csv", tmp_path / "x", "NMF/Q/Po/2") == 1
        assert "variant" in capsys.readouterr().err

    def test_missing_rank(self, poisson_data, tmp_path, capsys):
        assert run_fit(poisson_data / "V.csv", tmp_path / "x", "NMF/T/Po") == 1
        assert "rank" in capsys.readouterr().err

    def test_bad_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("1,2\n3,-4\n")
        assert run_fit(bad, tmp_path / "x") == 1
        assert "row 2, column 2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run_fit(tmp_path / "nope.csv", tmp_path / "x") == 1

    def test_nonconvergence_exit(self, poisson_data, tmp_path):
        out = tmp_path / "fit"
        assert run_fit(poisson_data / "V.csv", out, "NMF/T/Po/2", "--max-iter", "2") == 2
        report = json.loads((out / "report.json").read_text())
        assert report["converged"] is False and (out / "W.csv").exists()

    def test_usage_error_exit(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit", "--model", "NMF/T/Po/2"])
        assert exc.value.code == 1

    def test_coord_input(self, tmp_path):
        main(["synth", "--n", "20", "--m", "15", "--k", "2", "--family", "poisson", "--mean", "0.5",
              "--format", "coord", "--out", str(tmp_path / "s")])
        assert run_fit(tmp_path / "s" / "V.coord", tmp_path / "fit", "NMF/C/NB/2", "--format", "coord") == 0


class TestSelect:
    def test_ranks_and_records_failures(self, tmp_path):
        main(["synth", "--n", "100", "--m", "60", "--k", "2", "--family", "negbin", "--alpha", "5",
              "--mean", "5", "--seed", "2", "--out", str(tmp_path / "s")])
        models = ["NMF/T/N", "NMF/T/Po", "NMF/T/NB", "NMF/T/TW_2"]
        out = tmp_path / "sel"
        assert main(["select", "--input", str(tmp_path / "s" / "V.csv"), "--rank", "2", "--restarts", "2",
                     "--models", *models, "--out", str(out)]) == 0
        reports = json.loads((out / "select.json").read_text())
        assert len(reports) == len(models)
        order = [r["spec"].split("/")[2].split("_")[0] for r in reports]
        assert order[:3] == ["NB", "Po", "N"]
        failed = reports[-1]
        assert failed["bic"] is None and "SupportError" in failed["error"]
        assert (out / "residuals_T_NB_2.csv").exists() and (out / "meanvar_T_Po_2.csv").exists()

    def test_normal_last_on_sparse_counts(self, tmp_path):
        main(["synth", "--n", "80", "--m", "40", "--k", "2", "--family", "poisson", "--mean", "0.5",
              "--seed", "3", "--out", str(tmp_path / "s")])
        out = tmp_path / "sel"
        main(["select", "--input", str(tmp_path / "s" / "V.csv"), "--rank", "2", "--restarts", "1",
              "--models", "NMF/T/N", "NMF/T/Po", "NMF/T/NB", "NMF/C/N", "NMF/C/Po", "--out", str(out)])
        reports = json.loads((out / "select.json").read_text())
        assert {r["spec"].split("/")[2] for r in reports[-2:]} == {"N"}

    def test_default_model_list(self):
        assert len(ALL_MODELS) == 8


class TestCompare:
    def write_features(self, path, F):
        return write_matrix_csv(path, F, [f"S{i + 1}" for i in range(len(F))], [f"t{j}" for j in range(F.shape[1])])

    def test_self(self, tmp_path, capsys):
        F = np.random.default_rng(0).random((3, 8))
        p = self.write_features(tmp_path / "f.csv", F)
        assert main(["compare", "--features-a", str(p), "--features-b", str(p)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["min"] == pytest.approx(1.0) and summary["mean"] == pytest.approx(1.0)

    def test_permutation(self, tmp_path):
        F = np.random.default_rng(1).random((4, 8))
        a = self.write_features(tmp_path / "a.csv", F)
        b = write_matrix_csv(tmp_path / "b.csv", F[[2, 0, 3, 1]], ["B3", "B1", "B4", "B2"],
                             [f"t{j}" for j in range(8)])
        assert main(["compare", "--features-a", str(a), "--features-b", str(b), "--out", str(tmp_path / "o")]) == 0
        with open(tmp_path / "o" / "matching.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["feature_a"], r["feature_b"]) for r in rows] == [("S1", "B1"), ("S2", "B2"), ("S3", "B3"),
                                                                    ("S4", "B4")]

    def test_brute_force(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        A, B = rng.random((4, 9)), rng.random((4, 9))
        pa, pb = self.write_features(tmp_path / "a.csv", A), self.write_features(tmp_path / "b.csv", B)
        main(["compare", "--features-a", str(pa), "--features-b", str(pb)])
        S = cosine_matrix(A, B)
        best = max(sum(S[i, j] for i, j in enumerate(p)) for p in itertools.permutations(range(4)))
        assert json.loads(capsys.readouterr().out)["total"] == pytest.approx(best, rel=1e-12)

    def test_dimension_mismatch(self, tmp_path):
        a = self.write_features(tmp_path / "a.csv", np.ones((2, 3)))
        b = self.write_features(tmp_path / "b.csv", np.ones((2, 4)))
        assert main(["compare", "--features-a", str(a), "--features-b", str(b)]) == 1


class TestOtherCommands:
    def test_estimate_alpha(self, tmp_path):
        main(["synth", "--n", "100", "--m", "60", "--k", "2", "--family", "negbin", "--alpha", "5",
              "--seed", "4", "--out", str(tmp_path / "s")])
        out = tmp_path / "a.json"
        assert main(["estimate-alpha", "--input", str(tmp_path / "s" / "V.csv"), "--rank", "2",
                     "--restarts", "1", "--out", str(out)]) == 0
        assert 3 <= json.loads(out.read_text())["alpha"] <= 8

    def test_estimate_power(self, poisson_data, tmp_path):
        out, prof = tmp_path / "p.json", tmp_path / "prof.csv"
        assert main(["estimate-power", "--input", str(poisson_data / "V.csv"), "--rank", "2", "--restarts", "1",
                     "--step", "0.1", "--profile", str(prof), "--out", str(out)]) == 0
        res = json.loads(out.read_text())
        assert 1.0 <= res["p"] <= 1.2
        with open(prof) as fh:
            assert next(csv.reader(fh)) == ["p", "loglik", "sigma2"]

    def test_diagnose(self, poisson_data, tmp_path):
        run_fit(poisson_data / "V.csv", tmp_path / "fit")
        out = tmp_path / "diag"
        assert main(["diagnose", "--input", str(poisson_data / "V.csv"), "--fit", str(tmp_path / "fit"),
                     "--topk", "3", "--max-rows", "100", "--out", str(out)]) == 0
        d = json.loads((out / "diagnose.json").read_text())
        fit_report = json.loads((tmp_path / "fit" / "report.json").read_text())
        assert d["bic"] == pytest.approx(fit_report["bic"], rel=1e-9)
        assert d["residual_rows"] == 100 and d["downsample_seed"] == 0
        assert (out / "residuals.csv").read_text().startswith("fitted,residual,band\n")
        assert (out / "meanvar.csv").read_text().startswith("mean,variance\n")
        assert len((out / "top_entries.csv").read_text().splitlines()) == 1 + 2 * 3

    def test_synth_outputs(self, poisson_data):
        V = load_matrix(poisson_data / "V.csv")
        assert V.shape == (60, 30)
        assert load_matrix(poisson_data / "W.csv").shape == (60, 2)

    def test_bench(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bench", "--sizes", "20,40", "--m", "10", "--k", "2", "--reps", "2", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 and all(float(r["seconds"]) > 0 for r in rows)
        assert rows[0].keys() == {"variant", "family", "n", "m", "k", "seconds", "reps", "threads"}

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "nmfgen.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("fit", "select", "estimate-alpha", "estimate-power", "diagnose", "compare", "synth", "bench"):
            assert cmd in res.stdout

"""Command line surface: exit codes, artifacts, determinism."""

import json
import subprocess
import sys

import numpy as np
import pytest

from ltckit import read_dataset, read_ltc_matrix, read_scores_csv
from ltckit.cli import EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def workspace(tmp_path, capsys):
    """A trained pair of trajectory files plus matrix and scores."""
    t = tmp_path / "train.ltrj"
    q = tmp_path / "query.ltrj"
    tcsv = tmp_path / "train.csv"
    qcsv = tmp_path / "query.csv"
    code, _, err = run(
        capsys,
        "train-toy",
        "--classes", "3",
        "--per-class", "20",
        "--query-per-class", "5",
        "--features", "4",
        "--noise", "0.1",
        "--epochs", "8",
        "--seed", "11",
        "--train-out", str(t),
        "--query-out", str(q),
        "--train-data-out", str(tcsv),
        "--query-data-out", str(qcsv),
    )
    assert code == EXIT_OK, err
    m = tmp_path / "m.ltcm"
    s = tmp_path / "s.csv"
    code, _, err = run(
        capsys,
        "ltc",
        "--train", str(t),
        "--query", str(q),
        "--matrix-out", str(m),
        "--scores-out", str(s),
    )
    assert code == EXIT_OK, err
    return {
        "train": t, "query": q, "train_csv": tcsv, "query_csv": qcsv,
        "matrix": m, "scores": s, "dir": tmp_path,
    }


class TestExitCodes:
    def test_no_subcommand_is_usage(self, capsys):
        assert run(capsys)[0] == EXIT_USAGE

    def test_unknown_subcommand_is_usage(self, capsys):
        assert run(capsys, "frobnicate")[0] == EXIT_USAGE

    def test_unknown_flag_is_usage(self, capsys):
        assert run(capsys, "validate", "--sideways", "x")[0] == EXIT_USAGE

    def test_missing_file_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "validate", str(tmp_path / "absent.ltrj"))
        assert code == EXIT_DATA

    def test_internal_error_is_three(self, capsys, monkeypatch):
        import ltckit.cli as cli_mod

        def boom(args):
            raise RuntimeError("simulated defect")

        parser = build_parser()
        monkeypatch.setattr(cli_mod, "build_parser", lambda: parser)
        for action in parser._subparsers._group_actions[0].choices.values():
            action.set_defaults(func=boom)
        code, _, err = run(capsys, "validate", "whatever")
        assert code == EXIT_INTERNAL
        assert "internal error" in err

    def test_help_exits_zero_everywhere(self, capsys):
        assert run(capsys, "--help")[0] == EXIT_OK
        parser = build_parser()
        for name in parser._subparsers._group_actions[0].choices:
            assert run(capsys, name, "--help")[0] == EXIT_OK, name


class TestTrainToy:
    def test_artifacts_validate(self, workspace, capsys):
        for key in ("train", "query"):
            code, out, _ = run(capsys, "validate", str(workspace[key]))
            assert code == EXIT_OK
            assert json.loads(out)["ok"] is True

    def test_shapes(self, workspace):
        train = read_dataset(workspace["train"])
        query = read_dataset(workspace["query"])
        assert train.n_samples == 60
        assert query.n_samples == 15
        assert train.n_snapshots == 9  # snapshot 0 plus 8 epochs
        assert query.split_tag == "query"
        assert not set(train.sample_ids) & set(query.sample_ids)

    def test_corrupt_file_fails_validate(self, workspace, capsys):
        raw = bytearray(workspace["train"].read_bytes())
        raw[-1] ^= 0xFF
        bad = workspace["dir"] / "bad.ltrj"
        bad.write_bytes(bytes(raw))
        code, out, _ = run(capsys, "validate", str(bad))
        assert code == EXIT_DATA
        doc = json.loads(out)
        assert doc["ok"] is False
        assert any(i["code"] == "checksum-mismatch" for i in doc["issues"])


class TestLtc:
    def test_outputs_consistent(self, workspace):
        matrix = read_ltc_matrix(workspace["matrix"])
        scores, labels = read_scores_csv(workspace["scores"])
        assert matrix.values.shape == (15, 60)
        np.testing.assert_array_equal(scores.train_ids, matrix.train_ids)
        # Scores CSV holds the query-averaged matrix at f32 precision.
        np.testing.assert_allclose(
            scores.scores, matrix.values.mean(axis=0), atol=1e-6
        )

    def test_mismatched_snapshots_is_data_error(self, workspace, capsys, tmp_path):
        other = tmp_path / "other.ltrj"
        code, _, _ = run(
            capsys,
            "train-toy",
            "--classes", "3",
            "--per-class", "4",
            "--query-per-class", "2",
            "--features", "4",
            "--epochs", "3",
            "--train-out", str(other),
            "--query-out", str(tmp_path / "oq.ltrj"),
        )
        assert code == EXIT_OK
        code, _, err = run(
            capsys,
            "ltc",
            "--train", str(workspace["train"]),
            "--query", str(other),
            "--matrix-out", str(tmp_path / "x.ltcm"),
            "--scores-out", str(tmp_path / "x.csv"),
        )
        assert code == EXIT_DATA
        assert "snapshot count mismatch" in err

    def test_worker_env_gives_identical_bytes(self, workspace, capsys, monkeypatch, tmp_path):
        base = workspace["matrix"].read_bytes()
        monkeypatch.setenv("MUSE_WORKERS", "4")
        m2 = tmp_path / "m2.ltcm"
        code, _, _ = run(
            capsys,
            "ltc",
            "--train", str(workspace["train"]),
            "--query", str(workspace["query"]),
            "--matrix-out", str(m2),
            "--scores-out", str(tmp_path / "s2.csv"),
        )
        assert code == EXIT_OK
        assert m2.read_bytes() == base


class TestSelect:
    def test_manifest_matches_stdout(self, workspace, capsys, tmp_path):
        out_path = tmp_path / "manifest.json"
        code, out, _ = run(
            capsys,
            "select",
            "--scores", str(workspace["scores"]),
            "--k", "9",
            "--policy", "class-balanced",
            "--out", str(out_path),
        )
        assert code == EXIT_OK
        assert out_path.read_text() == out
        doc = json.loads(out)
        assert doc["policy"] == "class-balanced"
        assert doc["per_class_count"] == {"0": 3, "1": 3, "2": 3}

    def test_k_larger_than_candidates_is_data_error(self, workspace, capsys):
        code, _, _ = run(
            capsys, "select", "--scores", str(workspace["scores"]), "--k", "100"
        )
        assert code == EXIT_DATA


class TestInfluencers:
    def test_lists_requested_count(self, workspace, capsys):
        query_id = int(read_ltc_matrix(workspace["matrix"]).query_ids[0])
        code, out, _ = run(
            capsys,
            "influencers",
            "--matrix", str(workspace["matrix"]),
            "--query-id", str(query_id),
            "--count", "4",
        )
        assert code == EXIT_OK
        doc = json.loads(out)
        assert doc["query_id"] == query_id
        assert len(doc["influencers"]) == 4
        vals = [e["value"] for e in doc["influencers"]]
        assert vals == sorted(vals, reverse=True)

    def test_unknown_query_id_is_data_error(self, workspace, capsys):
        code, _, _ = run(
            capsys,
            "influencers",
            "--matrix", str(workspace["matrix"]),
            "--query-id", "999999",
        )
        assert code == EXIT_DATA


class TestEvaluationCommands:
    def test_lds_with_baseline(self, workspace, capsys):
        code, out, _ = run(
            capsys,
            "lds",
            "--train-data", str(workspace["train_csv"]),
            "--query-data", str(workspace["query_csv"]),
            "--matrix", str(workspace["matrix"]),
            "--subsets", "6",
            "--ratio", "0.5",
            "--retrains", "1",
            "--epochs", "4",
            "--measurable", "negative_query_loss",
            "--random-baseline",
        )
        assert code == EXIT_OK
        doc = json.loads(out)
        assert set(doc) == {"attribution", "random_baseline"}
        assert doc["attribution"]["measurable"] == "negative_query_loss"
        # Both reports must rest on identical subset draws.
        assert doc["attribution"]["subset_ids"] == doc["random_baseline"]["subset_ids"]

    def test_brittleness_k_zero_row(self, workspace, capsys):
        code, out, _ = run(
            capsys,
            "brittleness",
            "--train-data", str(workspace["train_csv"]),
            "--query-data", str(workspace["query_csv"]),
            "--scores", str(workspace["scores"]),
            "--k-values", "0,6",
            "--retrains", "2",
            "--epochs", "4",
        )
        assert code == EXIT_OK
        doc = json.loads(out)
        assert doc["k_values"] == [0, 6]
        assert doc["mean_flip"][0] == 0.0


class TestCost:
    def test_preset_engineering_report(self, capsys):
        code, out, _ = run(
            capsys, "cost", "--set", "coreset", "--preset", "table4",
            "--units", "engineering",
        )
        assert code == EXIT_OK
        assert "2.10e+07" in out  # Glister compute
        assert "0.461" in out  # trajectory storage

    def test_param_overrides_preset(self, capsys):
        code, out, _ = run(
            capsys, "cost", "--set", "coreset", "--preset", "table4",
            "--param", "T=90", "--param", "N=1281167",
        )
        assert code == EXIT_OK
        code2, out2, _ = run(
            capsys, "cost", "--set", "coreset", "--preset", "table4",
            "--param", "N=640583",
        )
        assert code2 == EXIT_OK
        assert out != out2

    def test_config_file_between_preset_and_params(self, capsys, tmp_path):
        cfg = tmp_path / "cost.cfg"
        cfg.write_text("# workload\nN=100\nT=10\n")
        code, out, _ = run(
            capsys, "cost", "--set", "coreset", "--preset", "table4",
            "--config", str(cfg), "--param", "N=200", "--units", "raw",
        )
        assert code == EXIT_OK
        # N comes from --param, T from the file: LTC storage N*T*bpp = 8000.
        line = [l for l in out.splitlines() if l.startswith("LTC")][0]
        assert "8.00e+03" in line or "8000" in line

    def test_unknown_param_is_usage_error(self, capsys):
        code, _, err = run(
            capsys, "cost", "--set", "coreset", "--preset", "table4",
            "--param", "warp=9",
        )
        assert code == EXIT_USAGE

    def test_missing_required_param_is_data_error(self, capsys):
        code, _, err = run(capsys, "cost", "--set", "coreset", "--param", "N=10")
        assert code == EXIT_DATA

    def test_csv_out(self, capsys, tmp_path):
        dest = tmp_path / "table.csv"
        code, _, _ = run(
            capsys, "cost", "--set", "tda", "--preset", "table4",
            "--csv-out", str(dest),
        )
        assert code == EXIT_OK
        header = dest.read_text().splitlines()[0]
        assert header.startswith("method,compute_flops")


class TestPipeline:
    def write_config(self, tmp_path, name="pipe.cfg", **extra):
        lines = {
            "classes": 3,
            "per_class": 30,
            "query_per_class": 6,
            "features": 5,
            "noise": 0.1,
            "epochs": 6,
            "seed": 4,
            "k": 9,
            "policy": "class-balanced",
            "out_dir": str(tmp_path / "run"),
        }
        lines.update(extra)
        path = tmp_path / name
        path.write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
        return path

    def test_end_to_end_artifacts(self, capsys, tmp_path):
        cfg = self.write_config(tmp_path)
        code, out, _ = run(capsys, "pipeline", str(cfg))
        assert code == EXIT_OK
        doc = json.loads(out)
        run_dir = tmp_path / "run"
        for name in ("train.ltrj", "query.ltrj", "matrix.ltcm", "scores.csv",
                     "manifest.json"):
            assert (run_dir / name).exists()
        assert set(doc["artifacts"]) == {"train", "query", "matrix", "scores",
                                         "manifest"}
        assert set(doc["digests"]) == set(doc["artifacts"])
        for digest in doc["digests"].values():
            assert digest.startswith("sha256:")
        assert len(set(doc["digests"].values())) == 5  # all artifacts distinct
        assert doc["per_class_count"] == {"0": 3, "1": 3, "2": 3}
        assert doc["policy"] == "class-balanced"

    def test_deterministic_stdout(self, capsys, tmp_path):
        cfg_a = self.write_config(
            tmp_path, name="a.cfg", out_dir=str(tmp_path / "a")
        )
        cfg_b = self.write_config(
            tmp_path, name="b.cfg", out_dir=str(tmp_path / "b")
        )
        code_a, out_a, _ = run(capsys, "pipeline", str(cfg_a))
        code_b, out_b, _ = run(capsys, "pipeline", str(cfg_b))
        assert code_a == code_b == EXIT_OK
        norm_a = out_a.replace(str(tmp_path / "a"), "OUT")
        norm_b = out_b.replace(str(tmp_path / "b"), "OUT")
        assert norm_a == norm_b

    def test_k_out_of_range_is_usage_error(self, capsys, tmp_path):
        cfg = self.write_config(tmp_path, k=1000)
        code, _, err = run(capsys, "pipeline", str(cfg))
        assert code == EXIT_USAGE
        assert "out of range" in err

    def test_unknown_key_is_usage_error(self, capsys, tmp_path):
        cfg = self.write_config(tmp_path, warp_factor=9)
        code, _, _ = run(capsys, "pipeline", str(cfg))
        assert code == EXIT_USAGE

    def test_malformed_line_is_usage_error(self, capsys, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("classes 3\n")
        code, _, _ = run(capsys, "pipeline", str(path))
        assert code == EXIT_USAGE


class TestConsoleScript:
    def test_installed_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "ltckit.cli", "cost", "--set", "coreset",
             "--preset", "table4"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "LTC" in proc.stdout

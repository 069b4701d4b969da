import json
import subprocess
import sys

import numpy as np
import pytest

from synfuse.cli import cli_main
from synfuse.data import SyntheticSpec, gen_multimodal, gen_xor_triple, load_csv, save_csv


def run(argv, capsys):
    code = cli_main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def multimodal_csv(tmp_path):
    path = tmp_path / "m.csv"
    save_csv(gen_multimodal(SyntheticSpec(n=300, seed=1)), path)
    return path


class TestGenData:
    def test_matches_in_memory_generator(self, tmp_path, capsys):
        code, _, _ = run(["gen-data", "--variant", "xor_triple", "--n", 500, "--seed", 4, "--out", tmp_path / "x.csv"], capsys)
        assert code == 0
        back = load_csv(tmp_path / "x.csv")
        ref = gen_xor_triple(SyntheticSpec("xor_triple", n=500, seed=4))
        assert all(np.array_equal(a, b) for a, b in zip(back.modalities, ref.modalities))

    def test_multimodal_defaults(self, tmp_path, capsys):
        run(["gen-data", "--n", 200, "--seed", 2, "--out", tmp_path / "m.csv"], capsys)
        ref = gen_multimodal(SyntheticSpec(n=200, seed=2))
        assert np.array_equal(load_csv(tmp_path / "m.csv").labels, ref.labels)

    def test_invalid_generator_options(self, tmp_path, capsys):
        code, out, err = run(["gen-data", "--variant", "gaussian_pair", "--rho", 1.5, "--out", tmp_path / "d.csv"], capsys)
        assert code == 2 and out == "" and "rho" in err
        assert not (tmp_path / "d.csv").exists()


class TestEstimates:
    def test_gaussian_mi_end_to_end(self, tmp_path, capsys):
        d = tmp_path / "d.csv"
        assert run(["gen-data", "--variant", "gaussian_pair", "--rho", 0.8, "--n", 10000, "--seed", 7, "--out", d], capsys)[0] == 0
        code, out, _ = run(["estimate-mi", d, "--x", "a", "--y", "v"], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["unit"] == "nats" and doc["spec_version"]
        assert abs(doc["value"] - 0.5108) < 0.1

    def test_mmd_with_permutation_test(self, multimodal_csv, capsys):
        code, out, _ = run(["estimate-mmd", multimodal_csv, "--x", "a", "--y", "v", "--permutations", 19], capsys)
        doc = json.loads(out)
        assert code == 0 and 0 < doc["permutation_test"]["p_value"] <= 1 and doc["permutation_test"]["n_perm"] == 19

    def test_mmd_fixed_sigma(self, multimodal_csv, capsys):
        code, out, _ = run(["estimate-mmd", multimodal_csv, "--x", "a", "--y", "t", "--sigma", 2.0], capsys)
        assert code == 0 and np.isfinite(json.loads(out)["value"])

    def test_synergy_mmd(self, multimodal_csv, capsys):
        code, out, _ = run(["estimate-synergy", multimodal_csv, "--measure", "mmd"], capsys)
        doc = json.loads(out)
        assert code == 0 and len(doc["partitions"]) == 3
        assert doc["value"] == pytest.approx(np.mean([p["value"] for p in doc["partitions"]]))

    def test_synergy_below_floor(self, tmp_path, capsys):
        save_csv(gen_multimodal(SyntheticSpec(n=8, seed=0)).rows(np.arange(3)), tmp_path / "tiny.csv")
        code, out, err = run(["estimate-synergy", tmp_path / "tiny.csv", "--measure", "kl"], capsys)
        assert code == 2 and out == ""
        assert "64" in err

    def test_unknown_column_group(self, multimodal_csv, capsys):
        code, out, err = run(["estimate-mi", multimodal_csv, "--x", "a", "--y", "q"], capsys)
        assert code == 2 and out == "" and "q" in err


class TestTrainEvaluate:
    def test_train_then_evaluate(self, tmp_path, multimodal_csv, capsys):
        ck = tmp_path / "c.json"
        code, out, _ = run(["train", multimodal_csv, "--split", "0.7,0.15,0.15", "--epochs", 2,
                            "--measure", "mmd", "--lam", 0.1, "--checkpoint", ck, "--no-timestamp"], capsys)
        report = json.loads(out)
        assert code == 0 and report["schema"] == "synfuse.train_report" and len(report["epochs"]) == 2
        code, out, _ = run(["evaluate", ck, multimodal_csv, "--no-timestamp"], capsys)
        assert code == 0 and json.loads(out)["n_eval"] == 300

    def test_byte_identical_reruns(self, tmp_path, multimodal_csv, capsys):
        outs = []
        for k in range(2):
            r, c = tmp_path / f"r{k}.json", tmp_path / f"c{k}.json"
            code, _, _ = run(["train", multimodal_csv, "--split", "0.7,0.15,0.15", "--epochs", 1,
                              "--measure", "kl", "--batch-size", 64, "--checkpoint", c, "--out", r,
                              "--no-timestamp", "--seed", 3], capsys)
            assert code == 0
            outs.append((r.read_bytes(), c.read_bytes()))
        assert outs[0] == outs[1]

    def test_config_file_and_override(self, tmp_path, multimodal_csv, capsys):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"epochs": 1, "lam": 0.5, "measure": "MMD"}))
        code, out, _ = run(["train", multimodal_csv, "--split", "0.7,0.15,0.15", "--config", cfgp, "--lam", 0.2], capsys)
        cfg = json.loads(out)["config"]
        assert code == 0 and cfg["lam"] == 0.2 and cfg["measure"] == "MMD" and cfg["epochs"] == 1

    def test_bad_config_key(self, tmp_path, multimodal_csv, capsys):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"epochz": 1}))
        code, out, _ = run(["train", multimodal_csv, "--split", "0.7,0.15,0.15", "--config", cfgp], capsys)
        assert code == 2 and out == ""

    def test_missing_label_is_parse_error(self, tmp_path, capsys):
        p = tmp_path / "nolabel.csv"
        p.write_text("id,a_0,v_0\n0,1,2\n1,3,4\n")
        code, out, err = run(["evaluate", tmp_path / "none.json", p], capsys)
        assert code in (1, 3) and out == ""
        code, out, err = run(["train", p, "--split", "0.7,0.15,0.15"], capsys)
        assert code == 3 and out == "" and "label" in err

    def test_corrupt_checkpoint(self, tmp_path, multimodal_csv, capsys):
        (tmp_path / "bad.json").write_text("{")
        code, out, _ = run(["evaluate", tmp_path / "bad.json", multimodal_csv], capsys)
        assert code == 3 and out == ""


class TestGridAndGradcheck:
    def test_grid(self, tmp_path, multimodal_csv, capsys):
        cfgp = tmp_path / "grid.json"
        cfgp.write_text(json.dumps({"models": ["concat"], "variants": ["MLE", "S_MMD"],
                                    "base": {"epochs": 1, "encoder_hidden": [8], "head_hidden": [8]}}))
        code, out, _ = run(["grid", multimodal_csv, "--split", "0.7,0.15,0.15", "--config", cfgp,
                            "--seeds", "0,1", "--lambdas", "0.1", "--table-csv", tmp_path / "t.csv",
                            "--no-timestamp"], capsys)
        doc = json.loads(out)
        assert code == 0 and len(doc["runs"]) == 4 and len(doc["table"]) == 2
        assert (tmp_path / "t.csv").read_text().startswith("model,loss_variant,lambda")

    def test_gradcheck_single_suite(self, capsys):
        code, out, _ = run(["gradcheck", "--suite", "nets", "--no-timestamp"], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["passed"] and doc["suites"][0]["n_instances"] >= 20

    def test_gradcheck_impossible_tolerance_fails(self, capsys):
        code, out, _ = run(["gradcheck", "--suite", "nets", "--tol", 1e-300], capsys)
        assert code == 1 and json.loads(out)["passed"] is False


class TestUsage:
    @pytest.mark.parametrize("argv", [["bogus"], ["gen-data", "--nope"], []])
    def test_usage_errors(self, argv, capsys):
        code, out, err = run(argv, capsys)
        assert code == 2 and out == "" and "usage" in err.lower()

    def test_global_flags_either_side(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(["--seed", 5, "gen-data", "--n", 20, "--out", a], capsys)
        run(["gen-data", "--n", 20, "--seed", 5, "--out", b], capsys)
        assert a.read_bytes() == b.read_bytes()

    def test_quiet(self, tmp_path, capsys):
        _, _, err = run(["gen-data", "--n", 20, "--quiet", "--out", tmp_path / "a.csv"], capsys)
        assert err == ""

    def test_console_script_streams(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "synfuse", "estimate-mi", str(tmp_path / "missing.csv"), "--x", "a", "--y", "v"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2 and proc.stdout == "" and "no such file" in proc.stderr

import json
import subprocess
import sys

import pytest

from diffreg.cli import build_parser, main, replay
from diffreg.dataset import GroupDef

SMALL_DAR = ["--hidden", "16,8", "--embed-dim", "4", "--epochs", "1", "-C", "10"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--out", "data.csv", "--num-subjects", "40", "--samples-per-subject", "3",
                 "--feature-dim", "6", "--label-range", "20,35", "--group", "sex:f,m:1.0", "--seed", "7"]) == 0
    assert main(["split", "--data", "data.csv", "--out-dir", "parts", "--dist-frac", "0.1", "--seed", "7"]) == 0
    assert main(["train-bar", "--train", "parts/train.csv", "--out", "bar.json"]) == 0
    return tmp_path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


class TestDefaults:
    def test_documented_defaults(self):
        a = build_parser().parse_args(["refine", "--train", "t", "--dist", "d", "--model", "m", "--out", "o"])
        assert (a.references, a.pool, a.max_class, a.clip, a.lr, a.iterations, a.epochs) == (10, 30, 20, 20.0, 3e-4,
                                                                                              2, 150)
        s = build_parser().parse_args(["split", "--data", "x", "--out-dir", "y"])
        assert s.dist_frac == 0.02

    @pytest.mark.parametrize("text,expected", [
        ("g:a,b", GroupDef("g", ("a", "b"))),
        ("g:a,b:1.5", GroupDef("g", ("a", "b"), 1.5)),
        ("g:a,b:0:0.8,0.2:4", GroupDef("g", ("a", "b"), 0.0, (0.8, 0.2), 4.0)),
        ("g:a,b:::4", GroupDef("g", ("a", "b"), 0.0, None, 4.0)),
    ])
    def test_group_spec(self, text, expected):
        assert build_parser().parse_args(["synth", "--out", "x", "--group", text]).group == [expected]

    @pytest.mark.parametrize("text", ["g", "g:a,b:x", "g:a,b:0:0.5,0.5:1:extra", ":a,b"])
    def test_bad_group_spec(self, text, capsys):
        assert main(["synth", "--out", "x.csv", "--group", text]) == 2

    def test_unknown_flag_rejected(self, capsys):
        assert main(["synth", "--out", "x.csv", "--bogus"]) == 2
        assert error_line(capsys)["error"] == "ConfigError"


class TestCommands:
    def test_synth_is_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert main(["synth", "--out", str(tmp_path / name), "--num-subjects", "10", "--seed", "7"]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_full_flow(self, workdir):
        assert main(["fit-err", "--model", "bar.json", "--dist", "parts/dist.csv", "--out", "err.json"]) == 0
        assert main(["train-dar", "--train", "parts/train.csv", "--model", "bar.json", "--err", "err.json",
                     "--out", "p1.json", *SMALL_DAR]) == 0
        assert main(["refine", "--train", "parts/train.csv", "--dist", "parts/dist.csv", "--model", "bar.json",
                     "--iterations", "2", "--out", "final.json", *SMALL_DAR]) == 0
        assert json.loads((workdir / "final.json").read_text())["iteration"] == 2
        assert (workdir / "final.json.stage1.json").exists()
        assert main(["predict", "--model", "final.json", "--data", "parts/test.csv", "--out", "pred.csv"]) == 0
        assert main(["eval", "--model", "final.json", "--data", "parts/test.csv", "--out-dir", "ev"]) == 0
        metrics = json.loads((workdir / "ev" / "metrics.json").read_text())
        assert metrics["mae"] > 0
        assert main(["bias", "--predictions", "ev/predictions.csv", "--axes", "sex", "--train", "parts/train.csv",
                     "--out", "bias.csv"]) == 0
        assert (workdir / "bias.csv").read_text().startswith("table,range,cell,n_samples")
        manifest = json.loads((workdir / "final.json.manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["flags"]["iterations"] == 2
        assert set(manifest["inputs"]) == {"parts/train.csv", "parts/dist.csv", "bar.json"}

    def test_replay_reproduces_outputs(self, workdir):
        assert main(["train-dar", "--train", "parts/train.csv", "--model", "bar.json", "--dist", "parts/dist.csv",
                     "--out", "p.json", "--seed", "3", *SMALL_DAR]) == 0
        before = (workdir / "p.json").read_bytes()
        (workdir / "p.json").unlink()
        assert all(replay("p.json.manifest.json").values())
        assert (workdir / "p.json").read_bytes() == before

    def test_gradcheck_exit_code(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
        rep = json.loads((tmp_path / "g.json").read_text())
        assert rep["ok"] and rep["max_rel_err"] < 1e-4


class TestErrors:
    def test_r_above_p_before_any_work(self, tmp_path, capsys):
        # inputs do not exist: the flag check must fire first
        code = main(["refine", "--train", "missing.csv", "--dist", "missing.csv", "--model", "missing.json",
                     "--out", str(tmp_path / "o.json"), "-R", "31", "-P", "30"])
        assert code == 2
        assert "exceeds" in error_line(capsys)["message"]

    def test_missing_input_is_data_error(self, tmp_path, capsys):
        assert main(["train-bar", "--train", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "b.json")]) == 3
        msg = error_line(capsys)
        assert msg["exit_code"] == 3 and "nope.csv" in msg["message"]

    def test_schema_mismatch(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("sample_id,subject_id,label,f0\na,x,30\n")
        assert main(["train-bar", "--train", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "b.json")]) == 3
        assert "row 2" in error_line(capsys)["message"]

    def test_unknown_bias_axis(self, workdir, capsys):
        assert main(["eval", "--model", "bar.json", "--data", "parts/test.csv", "--out-dir", "ev"]) == 0
        assert main(["bias", "--predictions", "ev/predictions.csv", "--axes", "race", "--out", "b.csv"]) == 2
        assert "known" in error_line(capsys)["message"]

    def test_threads_env_validated(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("DIFFREG_THREADS", "zero")
        assert main(["synth", "--out", str(tmp_path / "a.csv"), "--num-subjects", "5"]) == 2
        error_line(capsys)

    def test_threads_flag(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "a.csv"), "--num-subjects", "5", "--threads", "1"]) == 0

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "diffreg", "synth", "--out", str(tmp_path / "a.csv"),
                               "--num-subjects", "5", "-R", "3"], capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stderr)["error"] == "ConfigError"

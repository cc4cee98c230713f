import json

import numpy as np
import pytest

from seqalign import numcore
from seqalign.cli import main
from seqalign.data import read_bundle

SMALL = ["--set", "n_tasks=2", "--set", "videos_per_order=2", "--set", "eval_videos_per_order=2",
         "--set", "d_model=16", "--set", "d_ff=32", "--set", "depth=1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL)
    assert code == 0
    return tmp_path / "d"


def test_gen_data_deterministic_and_creates_dirs(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--out", str(tmp_path / name / "nested"), *SMALL)[0] == 0
    for part in ("train/payload.bin", "train/manifest.tsv", "eval/payload.bin"):
        a = (tmp_path / "a" / "nested" / part).read_bytes()
        assert a == (tmp_path / "b" / "nested" / part).read_bytes()


def test_config_echo_and_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nn_tasks = 3\nseed=5\n")
    code, _, err = run(capsys, "gen-data", "--config", str(cfg), "--set", "seed=6",
                       "--out", str(tmp_path / "d"))
    assert code == 0
    assert "# n_tasks=3" in err and "# seed=6" in err and "# n_frames=16" in err


@pytest.mark.parametrize("extra", [["--set", "n_steps=20"], ["--set", "bogus=1"],
                                   ["--set", "fine_method=dtw"], ["--set", "epochs=many"]])
def test_bad_config_exits_2(tmp_path, capsys, extra):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "d"), *extra)
    assert code == 2
    assert "error:" in err


def test_train_outputs_and_zero_fine(tmp_path, capsys, data_dir):
    out = tmp_path / "r"
    code, stdout, _ = run(capsys, "train", "--data", str(data_dir), "--out", str(out), *SMALL,
                          "--set", "epochs=2", "--set", "lambda_fine=0")
    assert code == 0
    lines = (out / "metrics.tsv").read_text().splitlines()
    assert stdout.splitlines() == lines
    assert [float(l.split("\t")[3]) for l in lines] == [0.0, 0.0]
    assert (out / "training.png").read_bytes()[:4] == b"\x89PNG"
    assert (out / "checkpoint.svrc").exists()


@pytest.mark.parametrize("method", ["sort", "viterbi", "split"])
def test_train_accepts_every_method(tmp_path, capsys, data_dir, method):
    code, stdout, _ = run(capsys, "train", "--data", str(data_dir), "--out", str(tmp_path / method),
                          *SMALL, "--set", "epochs=1", "--set", f"fine_method={method}")
    assert code == 0 and float(stdout.split("\t")[3]) > 0


def test_train_resume_matches_uninterrupted(tmp_path, capsys, data_dir):
    common = [*SMALL, "--set", "epochs=3", "--data", str(data_dir)]
    assert run(capsys, "train", "--out", str(tmp_path / "full"), *common)[0] == 0
    assert run(capsys, "train", "--out", str(tmp_path / "part"), *common, "--until-epoch", "1")[0] == 0
    assert run(capsys, "train", "--out", str(tmp_path / "part"), *common, "--resume")[0] == 0
    full = (tmp_path / "full" / "metrics.tsv").read_bytes()
    assert full == (tmp_path / "part" / "metrics.tsv").read_bytes()
    assert (tmp_path / "full" / "checkpoint.svrc").read_bytes() == \
        (tmp_path / "part" / "checkpoint.svrc").read_bytes()


def test_resume_without_checkpoint_is_data_error(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "train", "--data", str(data_dir), "--out", str(tmp_path / "x"),
                     *SMALL, "--resume")
    assert code == 3


def test_eval_commands(tmp_path, capsys, data_dir):
    code, out, _ = run(capsys, "eval-verify", "--data", str(data_dir), *SMALL, "--json")
    assert code == 0
    metrics = json.loads(out)
    assert 0.0 <= metrics["verify_auc"] <= 1.0 and metrics["n_pairs"] > 0
    code, out, _ = run(capsys, "eval-match", "--data", str(data_dir), *SMALL,
                       "--out", str(tmp_path / "m.tsv"))
    assert code == 0
    assert out == (tmp_path / "m.tsv").read_text()
    assert out.splitlines()[0].startswith("match_top1\t")


def test_eval_dim_mismatch_exits_3(tmp_path, capsys, data_dir):
    run(capsys, "train", "--data", str(data_dir), "--out", str(tmp_path / "r"), *SMALL,
        "--set", "epochs=1")
    code, _, err = run(capsys, "eval-verify", "--data", str(data_dir),
                       "--checkpoint", str(tmp_path / "r" / "checkpoint.svrc"))
    assert code == 3 and "shape" in err


def test_missing_data_exits_3(tmp_path, capsys):
    assert run(capsys, "eval-verify", "--data", str(tmp_path / "nowhere"))[0] == 3


def test_trained_noise_free_model_separates(tmp_path, capsys):
    cfg = ["--set", "noise_sigma=0", "--set", "n_tasks=3", "--set", "videos_per_order=4",
           "--set", "eval_videos_per_order=4", "--set", "lr_base=2e-3", "--set", "epochs=40"]
    assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), *cfg)[0] == 0
    assert run(capsys, "train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), *cfg)[0] == 0
    code, out, _ = run(capsys, "eval-verify", "--data", str(tmp_path / "d"), *cfg, "--json",
                       "--checkpoint", str(tmp_path / "r" / "checkpoint.svrc"))
    assert code == 0 and json.loads(out)["verify_auc"] >= 0.99


@pytest.mark.parametrize("method", ["sort", "viterbi"])
def test_align_dump_recovers_noise_free_segments(tmp_path, capsys, method):
    assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL, "--set", "noise_sigma=0")[0] == 0
    sample = read_bundle(tmp_path / "d" / "train")[0]
    code, out, _ = run(capsys, "align-dump", "--data", str(tmp_path / "d"), "--video-id",
                       sample.video_id, "--method", method, "--out", str(tmp_path / "a"))
    assert code == 0
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert len(rows) == 16
    assert [int(r[1]) for r in rows] == sample.gt_labels.tolist()
    assert [int(r[1]) for r in rows] == [int(r[2]) for r in rows]
    sim = np.loadtxt(tmp_path / "a" / "sim.csv", delimiter=",")
    assert sim.shape == (16, 4)
    assert (tmp_path / "a" / "alignment.png").exists()
    assert (tmp_path / "a" / "path.csv").exists() == (method == "viterbi")


def test_align_dump_single_step_is_all_zero(tmp_path, capsys):
    assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), *SMALL, "--set", "n_steps=1",
               "--set", "n_orders=1")[0] == 0
    vid = read_bundle(tmp_path / "d" / "train")[0].video_id
    for method in ("sort", "viterbi", "split"):
        code, out, _ = run(capsys, "align-dump", "--data", str(tmp_path / "d"), "--video-id", vid,
                           "--method", method, "--out", str(tmp_path / method))
        assert code == 0
        assert {line.split(",")[1] for line in out.splitlines()[1:]} == {"0"}


def test_align_dump_with_checkpoint(tmp_path, capsys, data_dir):
    run(capsys, "train", "--data", str(data_dir), "--out", str(tmp_path / "r"), *SMALL,
        "--set", "epochs=1")
    vid = read_bundle(data_dir / "eval")[0].video_id
    code, out, _ = run(capsys, "align-dump", "--data", str(data_dir), "--video-id", vid,
                       "--checkpoint", str(tmp_path / "r" / "checkpoint.svrc"), *SMALL,
                       "--method", "split", "--out", str(tmp_path / "a"))
    assert code == 0 and len(out.splitlines()) == 17
    assert (tmp_path / "a" / "split.csv").read_text().count("\n") == 4


def test_align_dump_unknown_id(tmp_path, capsys, data_dir):
    code, _, err = run(capsys, "align-dump", "--data", str(data_dir), "--video-id", "nope",
                       "--out", str(tmp_path / "a"))
    assert code == 3 and "nope" in err


def test_gradcheck_passes_and_names_worst_parameter(capsys):
    code, out, _ = run(capsys, "gradcheck", "--method", "viterbi")
    assert code == 0
    lines = dict((l.split("\t")[0], l.split("\t")[1:]) for l in out.splitlines())
    assert lines["status"][0] == "pass"
    assert lines["max"][0].startswith("viterbi:")
    assert any(l.startswith("viterbi\tblocks.0.attn.q.w\t") for l in out.splitlines())


def test_gradcheck_catches_corrupted_backward(capsys, monkeypatch):
    real = numcore._gelu_grad
    monkeypatch.setattr(numcore, "_gelu_grad", lambda x: 1.3 * real(x))
    code, out, _ = run(capsys, "gradcheck", "--method", "sort")
    assert code == 4
    assert "status\tfail" in out
    worst = out.split("max\t")[1].split("\t")[0]
    assert worst.split(":")[1].startswith(("blocks.0.", "adapter.", "cls", "pos"))


def test_thread_env_is_validated(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SEQALIGN_THREADS", "1")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "a"), *SMALL)[0] == 0
    monkeypatch.setenv("SEQALIGN_THREADS", "lots")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "b"), *SMALL)[0] == 2

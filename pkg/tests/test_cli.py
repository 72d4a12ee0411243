import json

import numpy as np
import pytest

from mclext.cli import main
from mclext.wavio import read_wav, write_wav

SHORT = ["--set", "scene.duration_s=1.0", "--set", "scene.enroll_s=1.0"]
TINY = ["--set", "model.embed_dim=4", "--set", "model.hidden=3", "--set", "model.spk_dim=6",
        "--set", "model.embed_hidden=5", "--set", "model.fusion=film", "--set", "train.batch_size=2"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "c"
    assert main(["synth", "--out", str(out), "--n-train", "4", "--n-val", "2", "--n-test", "4",
                 "--neg-fraction", "0.25", "--seed", "3"] + SHORT) == 0
    return out


@pytest.fixture(scope="module")
def model_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--corpus", str(corpus), "--out", str(out), "--loss", "log_mse", "--max-steps", "2",
                 "--config", str(corpus / "config.yaml")] + TINY) == 0
    return out


def test_synth_counts_and_repeatability(corpus, tmp_path, capsys):
    lines = {s: (corpus / f"{s}.jsonl").read_text().splitlines() for s in ("train", "val", "test")}
    assert [len(v) for v in lines.values()] == [4, 2, 4]
    assert sum(json.loads(x)["polarity"] == "negative" for x in lines["test"]) == 1
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--n-train", "4", "--n-val", "2", "--n-test", "4",
          "--neg-fraction", "0.25", "--seed", "3"] + SHORT)
    for p in corpus.rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (again / p.relative_to(corpus)).read_bytes()
    assert main(["synth", "--out", str(corpus), "--n-train", "1"] + SHORT) == 3
    assert "not empty" in capsys.readouterr().err


def test_train_outputs(model_dir):
    recs = [json.loads(x) for x in (model_dir / "train_log.jsonl").read_text().splitlines()]
    assert max(r["step"] for r in recs) == 2
    for name in ("last.ckpt", "best.ckpt", "train_loss.png"):
        assert (model_dir / name).exists()


def test_resume(corpus, model_dir, tmp_path):
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path), "--loss", "log_mse", "--max-steps", "3",
                 "--resume", str(model_dir / "last.ckpt"), "--config", str(corpus / "config.yaml")] + TINY) == 0
    recs = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert max(r["step"] for r in recs) == 3


def test_eval_report(corpus, model_dir, tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    assert main(["eval", "--checkpoint", str(model_dir / "last.ckpt"), "--manifest", str(corpus / "test.jsonl"),
                 "--report", str(report)]) == 0
    rows = [json.loads(x) for x in report.read_text().splitlines()]
    assert len(rows) == 5 and rows[-1]["summary"] and rows[-1]["n_negative"] == 1
    assert report.with_suffix(".png").stat().st_size > 0
    assert "si_sdri_mean\t" in capsys.readouterr().out


def test_eval_oracle(corpus, tmp_path):
    report = tmp_path / "o.jsonl"
    assert main(["eval", "--oracle", "--manifest", str(corpus / "test.jsonl"), "--report", str(report)]) == 0
    summary = json.loads(report.read_text().splitlines()[-1])
    assert summary["si_sdr_mean"] == pytest.approx(80.0)
    assert main(["eval", "--manifest", str(corpus / "test.jsonl"), "--report", str(report)]) == 2


def test_extract_round_trip(corpus, model_dir, tmp_path, capsys):
    rec = json.loads((corpus / "test.jsonl").read_text().splitlines()[0])
    out = tmp_path / "est.wav"
    args = ["extract", "--checkpoint", str(model_dir / "last.ckpt"), "--mixture", str(corpus / rec["mixture_path"]),
            "--enrollment", str(corpus / rec["enrollment_path"]), "--out", str(out)]
    assert main(args) == 0
    est, rate = read_wav(out)
    assert rate == 8000 and est.shape == (1, 8000)
    mono = tmp_path / "mono.wav"
    write_wav(mono, np.zeros(8000), 8000)
    args[4] = str(mono)
    assert main(args) == 3
    assert "channels" in capsys.readouterr().err


def test_flops_table(tmp_path, capsys):
    out = tmp_path / "f.tsv"
    assert main(["flops", "--preset", "v1", "--out", str(out)]) == 0
    rows = [line.split("\t") for line in out.read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [(g, str(ell)) for g in ("0", "1") for ell in range(1, 5)]
    vals = [float(r[2]) for r in rows[:4]]
    assert vals[0] / vals[-1] < 0.7
    assert out.with_suffix(".png").exists()
    assert capsys.readouterr().out == out.read_text()


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "loss\tgroup\tmax_rel_err\tpassed"
    assert all(line.endswith("True") for line in lines[1:])


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["flops", "--set", "model.channels=3"]) == 2
    assert "geometry.mic_count" in capsys.readouterr().err
    assert main(["flops", "--set", "bogus.key=1"]) == 2
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "stft.sample_rate=16000"]) == 2


def test_missing_manifest_exit_3(tmp_path):
    assert main(["eval", "--oracle", "--manifest", str(tmp_path / "none.jsonl"), "--report", str(tmp_path / "r")]) == 3

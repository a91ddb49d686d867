import json

import numpy as np
import pytest

from tokenmark import attacks
from tokenmark.audio import load_wav, quantize_pcm16, save_wav
from tokenmark.cli import (EXIT_CAPACITY, EXIT_CODEC, EXIT_ERROR, EXIT_MISMATCH, EXIT_OK,
                           EXIT_PREREQ, main)
from tokenmark.corpus import synth_speech

TINY = {"stage1_steps": 4, "stage2_steps": 3, "batch_size": 2, "segment_seconds": 0.25,
        "calibration_clips": 1, "vq": {"hidden": 16, "codebook_size": 8, "code_dim": 8},
        "manipulator": {"layers": 1, "hidden": 16, "filter": 32, "embed_dim": 16}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    save_wav(d / "clip.wav", quantize_pcm16(synth_speech(1.0, seed=3)))
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    common = ["--config", workdir / "cfg.json", "--synthetic-clips", "3", "--clip-seconds", "0.5"]
    assert main([str(a) for a in ["train", "--stage", "1", "--out", workdir / "s1.npz", *common]]) == 0
    assert main([str(a) for a in ["train", "--stage", "2", "--stage1", workdir / "s1.npz",
                                  "--out", workdir / "s2.npz", *common]]) == 0
    return workdir / "s2.npz"


def test_train_writes_checkpoint_and_log(trained, workdir):
    assert trained.exists()
    lines = (workdir / "s1.jsonl").read_text().splitlines()
    assert len(lines) == TINY["stage1_steps"]


def test_stage2_without_stage1(capsys, workdir):
    code, _, err = run(capsys, "train", "--stage", "2", "--out", workdir / "x.npz",
                       "--config", workdir / "cfg.json")
    assert code == EXIT_PREREQ and "stage-1 checkpoint required" in err


def test_train_same_seed_same_record(capsys, workdir):
    records = []
    for i in range(2):
        code, out, _ = run(capsys, "train", "--stage", "1", "--out", workdir / f"d{i}.npz",
                           "--config", workdir / "cfg.json", "--synthetic-clips", "2",
                           "--clip-seconds", "0.5", "--seed", "7")
        assert code == EXIT_OK
        records.append(json.loads(out)["final"])
    assert records[0] == records[1]


def test_embed_detect_ztest(capsys, trained, workdir):
    wav, marked = workdir / "clip.wav", workdir / "marked.wav"
    code, out, _ = run(capsys, "embed", "-c", trained, wav, marked, "--bits", "0xA5")
    assert code == EXIT_OK
    plan = json.loads((workdir / "marked.plan.json").read_text())
    assert plan["bits"] == "10100101" and len(plan["positions"]) == 8

    code, out, _ = run(capsys, "detect", "-c", trained, marked, "--expected-length", "8")
    res = json.loads(out)
    assert code == EXIT_OK and len(res["aligned_bits"]) == 8
    assert set(res["verdict"]) == {"count", "T", "beta", "z", "p", "decision", "threshold"}

    code, out, _ = run(capsys, "ztest", "-c", trained, wav, "--json", workdir / "z.json")
    assert code == EXIT_OK
    assert json.loads(out) == json.loads((workdir / "z.json").read_text())


def test_ztest_from_counts(capsys):
    code, out, _ = run(capsys, "ztest", "--count", "37", "--frames", "200", "--beta", "0.1")
    v = json.loads(out)
    assert code == EXIT_OK and v["decision"] is True and abs(v["z"] - 4.01) < 0.01


def test_capacity_exit_code(capsys, trained, workdir):
    code, _, err = run(capsys, "embed", "-c", trained, workdir / "clip.wav", workdir / "o.wav",
                       "--bits", "1" * 151)
    assert code == EXIT_CAPACITY and "capacity" in err


def test_missing_checkpoint(capsys, workdir):
    code, _, _ = run(capsys, "detect", "-c", workdir / "nope.npz", workdir / "clip.wav")
    assert code == EXIT_PREREQ


def test_stft_mismatch(capsys, trained, workdir):
    code, _, err = run(capsys, "detect", "-c", trained, workdir / "clip.wav", "--hop", "100",
                       "--win-length", "400")
    assert code == EXIT_MISMATCH


def test_attack_amplitude(capsys, workdir):
    out_wav = workdir / "as.wav"
    code, out, _ = run(capsys, "attack", workdir / "clip.wav", out_wav, "--kind", "AS")
    assert code == EXIT_OK and json.loads(out)["spec"]["params"]["scale"] == 0.9
    src = load_wav(workdir / "clip.wav").samples
    # 0.9x exactly, up to the 16-bit write
    np.testing.assert_allclose(load_wav(out_wav).samples, 0.9 * src, atol=1 / 32768)
    assert (workdir / "as.attack.json").exists()


def test_attack_codec_unavailable(capsys, workdir, monkeypatch):
    def broken(*_):
        raise attacks.CodecUnavailable("no encoder")

    attacks.set_mp3_codec(broken)
    try:
        code, _, _ = run(capsys, "attack", workdir / "clip.wav", workdir / "m.wav", "--kind", "MP3")
    finally:
        attacks.set_mp3_codec(None)
    assert code == EXIT_CODEC


def test_bad_arguments(capsys, workdir):
    code, _, _ = run(capsys, "attack", workdir / "clip.wav", workdir / "b.wav", "--kind", "XX")
    assert code == EXIT_ERROR
    code, _, _ = run(capsys, "ztest")
    assert code == EXIT_ERROR


def test_evaluate_writes_report(capsys, trained, workdir):
    code, out, _ = run(capsys, "evaluate", "-c", trained, "--mode", "hiding", "--out",
                       workdir / "rep", "--synthetic-clips", "2", "--catalog", "NONE,AS")
    assert code == EXIT_OK
    files = json.loads(out)["files"]
    assert (workdir / "rep" / "information_hiding_report.json").exists() and "ber_csv" in files
    code, out, _ = run(capsys, "evaluate", "-c", trained, "--mode", "detection", "--out",
                       workdir / "rep", "--synthetic-clips", "2")
    assert code == EXIT_OK and "sweep_png" in json.loads(out)["files"]

"""
コマンドライン全体のテスト（features → train → export → eval）
"""

import logging

import numpy as np
import pytest
from scipy.io import wavfile

from corpus import WordSegment, make_synthetic_corpus, write_manifest
from dsp_features import FeatureSequence, read_feature_cache, write_feature_cache
from main import main


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def prepared(tmp_path):
    """合成コーパスから特徴量キャッシュとマニフェストを直接作る"""
    corpus = make_synthetic_corpus(vocab_size=12, num_utterances=6, num_synonym_pairs=1, seed=0)
    features_dir = tmp_path / "features"
    features_dir.mkdir()
    segments = []
    for utterance_id, group in corpus.groups.items():
        frames = np.concatenate([s.features.frames for s in group])
        write_feature_cache(str(features_dir / f"{utterance_id}.a2vf"), FeatureSequence(frames))
        start = 0
        for s in group:
            segments.append(WordSegment(utterance_id, s.segment_index, s.word, s.features, start, start + s.features.T))
            start += s.features.T
    manifest = features_dir / "segments.tsv"
    with open(manifest, "w", encoding="utf-8") as f:
        write_manifest(segments, f)
    return features_dir, manifest, sorted({s.word for s in segments})


@pytest.fixture
def trained(prepared, tmp_path):
    features_dir, manifest, words = prepared
    checkpoint = tmp_path / "model.a2vc"
    log_file = tmp_path / "run.log"
    code = main([
        "train", str(features_dir), str(manifest),
        "--checkpoint", str(checkpoint),
        "--epochs", "2", "--hidden-size", "8", "--encoder-layers", "1", "--k", "2",
        "--precision", "f64", "--faithful", "--quiet", "--log-file", str(log_file),
        "--train-log", str(tmp_path / "train.log"),
    ])
    assert code == 0
    return features_dir, manifest, words, checkpoint, log_file


def write_alignments(path, text):
    path.write_text(text)
    return str(path)


def test_features_empty_directory(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    alignments = write_alignments(tmp_path / "align.tsv", "u1\thello\t0.0\t0.5\n")
    out = tmp_path / "out"
    assert main(["features", str(audio), alignments, str(out), "--quiet"]) == 0
    assert (out / "segments.tsv").read_text().count("\n") == 1


def test_features_one_second_wav(tmp_path):
    audio = tmp_path / "audio"
    (audio / "spk").mkdir(parents=True)
    samples = (np.random.default_rng(0).normal(0, 0.1, size=16000) * 32767).astype(np.int16)
    wavfile.write(str(audio / "spk" / "u1.wav"), 16000, samples)
    alignments = write_alignments(tmp_path / "align.tsv", "u1\thello\t0.0\t0.5\nu1\tworld\t0.5\t1.0\n")
    out = tmp_path / "out"

    assert main(["features", str(audio), alignments, str(out), "--quiet"]) == 0
    features = read_feature_cache(str(out / "u1.a2vf"))
    assert (features.T, features.d) == (98, 13)
    rows = (out / "segments.tsv").read_text().splitlines()[1:]
    assert [row.split("\t")[2] for row in rows] == ["hello", "world"]
    assert rows[1].split("\t")[4] == "98"


def test_features_reextract_when_mfcc_settings_change(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    samples = (np.random.default_rng(1).normal(0, 0.1, size=16000) * 32767).astype(np.int16)
    wavfile.write(str(audio / "u1.wav"), 16000, samples)
    alignments = write_alignments(tmp_path / "align.tsv", "u1\tcat\t0.3\t0.5\n")
    out = tmp_path / "out"
    cache = out / "u1.a2vf"

    assert main(["features", str(audio), alignments, str(out), "--quiet"]) == 0
    assert read_feature_cache(str(cache)).T == 98
    assert (out / "segments.tsv").read_text().splitlines()[1].split("\t")[3:5] == ["30", "50"]
    stamp = cache.stat().st_mtime_ns
    assert main(["features", str(audio), alignments, str(out), "--quiet"]) == 0
    assert cache.stat().st_mtime_ns == stamp

    assert main(["features", str(audio), alignments, str(out), "--quiet", "--set", "frame_hop=0.02"]) == 0
    assert read_feature_cache(str(cache)).T == 49
    row = (out / "segments.tsv").read_text().splitlines()[1].split("\t")
    assert row[3:5] == ["15", "25"]


def test_features_corrupt_wav_continues(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    wavfile.write(str(audio / "good.wav"), 16000, np.zeros(8000, dtype=np.int16))
    (audio / "bad.wav").write_bytes(b"not a wav file at all")
    alignments = write_alignments(tmp_path / "align.tsv", "bad\ta\t0.0\t0.2\ngood\tb\t0.0\t0.2\n")
    out = tmp_path / "out"

    assert main(["features", str(audio), alignments, str(out), "--quiet"]) == 1
    assert (out / "good.a2vf").exists()
    assert "good\t0\tb" in (out / "segments.tsv").read_text()


def test_train_rejects_zero_epochs(tmp_path):
    assert main(["train", str(tmp_path), str(tmp_path / "m.tsv"), "--checkpoint", str(tmp_path / "c"), "--epochs", "0"]) == 1


def test_train_unknown_set_key(tmp_path):
    assert main(["train", str(tmp_path), str(tmp_path / "m.tsv"), "--checkpoint", str(tmp_path / "c"), "--set", "epoch=3"]) == 1


def test_train_logs_resolved_config(trained, tmp_path):
    _, _, _, checkpoint, log_file = trained
    assert checkpoint.exists()
    log = log_file.read_text(encoding="utf-8")
    assert "faithful = true" in log
    assert "loss_normalization = raw_sum" in log
    assert "grad_clip_norm = none" in log
    epoch_lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(epoch_lines) == 2


def test_export_one_line_per_word_and_stable(trained, tmp_path):
    features_dir, manifest, words, checkpoint, _ = trained
    first, second = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["export", str(checkpoint), str(features_dir), str(manifest), str(first), "--quiet"]) == 0
    assert main(["export", str(checkpoint), str(features_dir), str(manifest), str(second), "--quiet", "--threads", "2"]) == 0

    lines = first.read_text().splitlines()
    assert [line.split()[0] for line in lines] == words
    assert all(len(line.split()) == 9 for line in lines)
    assert first.read_bytes() == second.read_bytes()


def test_eval_and_neighbors(trained, tmp_path, capsys):
    features_dir, manifest, words, checkpoint, _ = trained
    vectors = tmp_path / "vectors.txt"
    assert main(["export", str(checkpoint), str(features_dir), str(manifest), str(vectors), "--quiet"]) == 0

    benchmark = tmp_path / "toy.txt"
    benchmark.write_text(
        f"{words[0]} {words[1]} 9.0\n{words[0]} {words[2]} 2.0\n{words[1]} {words[3]} 5.5\nabsent {words[0]} 1.0\n"
    )
    benchmarks = tmp_path / "benchmarks.tsv"
    benchmarks.write_text("toy\ttoy.txt\t4\n")
    tsv = tmp_path / "report.tsv"
    capsys.readouterr()

    assert main(["eval", str(benchmarks), "--vectors", str(vectors), "--tsv", str(tsv), "--quiet"]) == 0
    assert "toy" in capsys.readouterr().out
    header, row = tsv.read_text().splitlines()
    assert header.split("\t")[-1] == "ρ"
    assert row.split("\t")[1:4] == ["toy", "4", "1"]

    assert main(["eval", str(benchmarks), "--vectors", f"a={vectors}", "--vectors", f"b={vectors}", "--quiet"]) == 0
    assert "a ρ" in capsys.readouterr().out

    assert main(["neighbors", str(vectors), words[0], "--top", "3", "--quiet"]) == 0
    ranked = capsys.readouterr().out.splitlines()
    assert len(ranked) == 3
    assert words[0] not in [line.split("\t")[0] for line in ranked]


def test_eval_lists_missing_benchmark_and_continues(trained, tmp_path, capsys):
    features_dir, manifest, words, checkpoint, _ = trained
    vectors = tmp_path / "vectors.txt"
    assert main(["export", str(checkpoint), str(features_dir), str(manifest), str(vectors), "--quiet"]) == 0
    (tmp_path / "toy.txt").write_text(f"{words[0]} {words[1]} 9.0\n{words[0]} {words[2]} 2.0\n{words[1]} {words[3]} 5.5\n")
    benchmarks = tmp_path / "benchmarks.tsv"
    benchmarks.write_text("toy\ttoy.txt\t3\ngone\tgone.txt\t10\n")
    capsys.readouterr()

    assert main(["eval", str(benchmarks), "--vectors", str(vectors), "--quiet"]) == 1
    assert "toy" in capsys.readouterr().out


def test_eval_missing_vectors(tmp_path):
    benchmarks = tmp_path / "benchmarks.tsv"
    benchmarks.write_text("toy\ttoy.txt\t4\n")
    assert main(["eval", str(benchmarks), "--vectors", str(tmp_path / "nope.txt"), "--quiet"]) != 0


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "2", "--quiet"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_detects_perturbed_gradient(capsys):
    assert main(["gradcheck", "--perturb-gradient", "--quiet"]) == 2
    assert "FAIL" in capsys.readouterr().out

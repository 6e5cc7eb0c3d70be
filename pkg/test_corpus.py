import io

import numpy as np
import pytest

from corpus import (
    WordSegment,
    build_skipgram_examples,
    compute_normalization,
    excise_segments,
    group_by_utterance,
    load_alignments,
    make_synthetic_corpus,
    normalize_word,
    read_manifest,
    segments_from_manifest,
    write_manifest,
)
from dsp_features import FeatureSequence
from errors import InputError, ParseError, ValidationError


def alignments(text):
    return load_alignments(io.StringIO(text))


def test_load_alignments_groups_and_sorts():
    grouped = alignments(
        "u1\tworld\t0.50\t0.90\n"
        "# comment\n"
        "u1\tHello,\t0.10\t0.40\n"
        "u2\tcat\t0.0\t0.3\n"
    )
    assert list(grouped) == ["u1", "u2"]
    assert [e.word for e in grouped["u1"]] == ["hello", "world"]


def test_load_alignments_errors():
    with pytest.raises(ParseError) as info:
        alignments("u1\tword\t0.1\n")
    assert info.value.line_number == 1
    with pytest.raises(ParseError):
        alignments("u1\tword\tabc\t0.3\n")
    with pytest.raises(ValidationError):
        alignments("u1\tword\t0.5\t0.5\n")
    with pytest.raises(ValidationError):
        alignments("u1\t...\t0.1\t0.2\n")


def test_overlapping_words_rejected():
    with pytest.raises(ValidationError):
        alignments("u1\ta\t0.0\t0.5\nu1\tb\t0.4\t0.8\n")


def test_normalize_word():
    assert normalize_word("Don't!") == "don't"
    assert normalize_word("'quoted'") == "quoted"


def test_excise_segments_frame_rounding():
    features = FeatureSequence(np.arange(100 * 2, dtype=float).reshape(100, 2))
    entries = alignments("u\ta\t0.004\t0.107\nu\tb\t0.107\t0.2\n")["u"]
    segments = excise_segments(features, entries, hop=0.01)
    assert [(s.start_frame, s.end_frame) for s in segments] == [(0, 11), (11, 20)]
    assert [s.segment_index for s in segments] == [0, 1]
    np.testing.assert_array_equal(segments[1].features.frames, features.frames[11:20])


def test_excise_drops_empty_slices_and_reindexes():
    features = FeatureSequence(np.ones((10, 2)))
    entries = alignments("u\ta\t0.0\t0.05\nu\tb\t0.05\t0.052\nu\tc\t0.06\t0.5\n")["u"]
    segments = excise_segments(features, entries, hop=0.01)
    assert [s.word for s in segments] == ["a", "c"]
    assert [s.segment_index for s in segments] == [0, 1]
    assert segments[1].end_frame == 10


def test_excise_all_empty_is_error():
    features = FeatureSequence(np.ones((10, 2)))
    entries = alignments("u\ta\t1.0\t2.0\n")["u"]
    with pytest.raises(InputError):
        excise_segments(features, entries, hop=0.01)


def test_long_segments_flagged():
    features = FeatureSequence(np.ones((300, 2)))
    entries = alignments("u\ta\t0.0\t2.5\n")["u"]
    (segment,) = excise_segments(features, entries, hop=0.01, max_segment_frames=100)
    assert segment.is_long


def test_compute_normalization_matches_numpy(make_utterance, rng):
    segments = make_utterance(rng, [3, 7, 1, 5], dim=4, offset=2.0)
    stats = compute_normalization(segments)
    stacked = np.concatenate([s.features.frames for s in segments])
    np.testing.assert_allclose(stats.mean, stacked.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(stats.std, stacked.std(axis=0), rtol=1e-12)


def test_normalization_std_floor(make_utterance, rng):
    segments = make_utterance(rng, [2, 2], dim=3)
    constant = [WordSegment(s.utterance_id, s.segment_index, s.word, FeatureSequence(np.ones_like(s.features.frames))) for s in segments]
    stats = compute_normalization(constant)
    np.testing.assert_array_equal(stats.std, 1e-8)
    np.testing.assert_array_equal(stats.apply(np.ones((1, 3))), 0.0)


def test_skipgram_window_truncated_at_edges(make_utterance, rng):
    group = make_utterance(rng, [2] * 5)
    examples = build_skipgram_examples({"u0": group}, k=2)
    assert len(examples) == 5
    assert [o for o, _ in examples[0].targets] == [1, 2]
    assert [o for o, _ in examples[2].targets] == [-2, -1, 1, 2]
    assert [t.segment_index for _, t in examples[4].targets] == [2, 3]


def test_skipgram_never_crosses_utterances(make_utterance, rng):
    a = make_utterance(rng, [2, 2, 2], utterance_id="a")
    b = make_utterance(rng, [2, 2], utterance_id="b")
    single = make_utterance(rng, [2], utterance_id="c")
    examples = build_skipgram_examples(group_by_utterance(a + b + single), k=5)
    assert len(examples) == 5
    for example in examples:
        assert all(t.utterance_id == example.center.utterance_id for _, t in example.targets)


def test_target_count_matches_double_loop(make_utterance, rng):
    groups = [make_utterance(rng, [1] * n, utterance_id=f"u{n}") for n in (1, 2, 3, 7, 12)]
    for k in (1, 2, 5):
        examples = build_skipgram_examples(groups, k=k)
        expected = 0
        for group in groups:
            for i in range(len(group)):
                for j in range(len(group)):
                    if i != j and abs(i - j) <= k:
                        expected += 1
        assert sum(len(e.targets) for e in examples) == expected


def test_normalized_corpus_is_standardized(make_utterance, rng):
    segments = make_utterance(rng, [4, 9, 2, 6, 3], dim=5, offset=-3.0)
    stats = compute_normalization(segments)
    stacked = np.concatenate([stats.apply_segment(s).features.frames for s in segments])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-6)


def test_skipgram_rejects_bad_window(make_utterance, rng):
    with pytest.raises(InputError):
        build_skipgram_examples([make_utterance(rng, [2, 2])], k=0)


def test_manifest_roundtrip(make_utterance, rng):
    group = make_utterance(rng, [2, 3])
    features = FeatureSequence(np.concatenate([s.features.frames for s in group]))
    segments = excise_segments(features, alignments("u0\tx\t0.0\t0.02\nu0\ty\t0.02\t0.05\n")["u0"], hop=0.01)

    buffer = io.StringIO()
    write_manifest(segments, buffer)
    rows = read_manifest(io.StringIO(buffer.getvalue()))
    restored = segments_from_manifest(rows, {"u0": features})
    assert [(s.word, s.start_frame, s.end_frame) for s in restored] == [("x", 0, 2), ("y", 2, 5)]
    np.testing.assert_array_equal(restored[1].features.frames, features.frames[2:5])


def test_manifest_missing_utterance():
    rows = read_manifest(io.StringIO("utterance_id\tsegment_index\tword\tstart_frame\tend_frame\nzz\t0\ta\t0\t2\n"))
    with pytest.raises(InputError):
        segments_from_manifest(rows, {})


def test_synthetic_corpus_shape():
    corpus = make_synthetic_corpus(vocab_size=20, num_utterances=50, num_synonym_pairs=3, dim=5, seed=3)
    assert len(corpus.groups) == 50
    assert len(corpus.synonym_pairs) == 3
    words = {s.word for group in corpus.groups.values() for s in group}
    assert words <= set(corpus.vocabulary)
    for group in corpus.groups.values():
        assert len(group) == 5
        assert all(s.features.d == 5 for s in group)

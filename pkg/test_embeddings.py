import numpy as np
import pytest

from corpus import (
    NormalizationStats,
    WordSegment,
    build_skipgram_examples,
    compute_normalization,
    group_by_utterance,
    make_synthetic_corpus,
)
from dsp_features import FeatureSequence
from embeddings import (
    WordVectorTable,
    average_by_word,
    encode_corpus,
    export_table,
    import_table,
    nearest_neighbors,
)
from errors import FormatError, InputError
from neuralnet import ModelConfig, encode, init_params
from trainer import TrainConfig, train
from wordsim_eval import cosine_similarity


def test_average_by_word_hand_arithmetic():
    table = average_by_word([("a", np.array([0.0])), ("a", np.array([2.0])), ("cat", np.array([5.0]))])
    np.testing.assert_array_equal(table["a"], [1.0])
    np.testing.assert_array_equal(table["cat"], [5.0])
    assert table.counts == {"a": 2, "cat": 1}
    assert table.words == ["a", "cat"]


def test_average_by_word_empty():
    table = average_by_word([])
    assert len(table) == 0


def test_average_matches_group_by_and_is_order_free(rng):
    words = [f"w{i}" for i in rng.integers(0, 6, size=60)]
    vectors = list(rng.normal(size=(60, 4)))
    table = average_by_word(zip(words, vectors))

    for word in set(words):
        expected = np.mean([v for w, v in zip(words, vectors) if w == word], axis=0)
        np.testing.assert_allclose(table[word], expected, rtol=1e-12, atol=1e-12)
    assert sum(table.counts.values()) == 60

    order = rng.permutation(60)
    shuffled = average_by_word((words[i], vectors[i]) for i in order)
    for word in table.words:
        np.testing.assert_allclose(shuffled[word], table[word], rtol=1e-12, atol=1e-12)


def test_average_rejects_mixed_dimensions():
    with pytest.raises(InputError):
        average_by_word([("a", np.zeros(2)), ("b", np.zeros(3))])


def test_encode_corpus(tiny_config, make_utterance, rng):
    params = init_params(tiny_config, 0)
    stats = NormalizationStats(np.full(3, 0.5), np.full(3, 2.0))
    segments = make_utterance(rng, [3, 1, 5, 2])
    segments.append(segments[0])
    pairs = encode_corpus(params, stats, segments, batch_size=2)

    assert [w for w, _ in pairs] == [s.word for s in segments]
    expected = encode(params, (segments[2].features.frames - 0.5) / 2.0).z
    np.testing.assert_allclose(pairs[2][1].z, expected, atol=1e-12)
    np.testing.assert_allclose(pairs[-1][1].z, pairs[0][1].z, atol=1e-12)
    assert encode_corpus(params, stats, []) == []


def test_every_segment_is_counted_once(tiny_config, make_utterance, rng):
    params = init_params(tiny_config, 0)
    stats = NormalizationStats(np.zeros(3), np.ones(3))
    segments = make_utterance(rng, [2, 3, 1, 4, 2, 5]) + make_utterance(rng, [3, 3], utterance_id="u1")
    table = average_by_word((w, e.z) for w, e in encode_corpus(params, stats, segments, batch_size=3))
    assert sum(table.counts.values()) == len(segments)
    assert table.counts["w0"] == 2


def test_encode_corpus_dimension_mismatch(tiny_config):
    params = init_params(tiny_config, 0)
    segment = WordSegment("u", 0, "a", FeatureSequence(np.zeros((2, 4))))
    with pytest.raises(InputError):
        encode_corpus(params, NormalizationStats(np.zeros(4), np.ones(4)), [segment])


def test_export_format_and_byte_stable(tmp_path):
    table = average_by_word([("a", np.array([1.0, 2.0])), ("b", np.array([0.1, -3.25e-7]))])
    first = tmp_path / "a.txt"
    export_table(table, str(first))
    assert first.read_text().splitlines()[0] == "a 1 2"

    second = tmp_path / "b.txt"
    export_table(import_table(str(first)), str(second))
    assert first.read_bytes() == second.read_bytes()


def test_export_rejects_whitespace_words(tmp_path):
    table = WordVectorTable(dimension=1)
    table.entries["new york"] = np.zeros(1)
    with pytest.raises(FormatError):
        export_table(table, str(tmp_path / "v.txt"))


def test_import_with_header(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("2 3\nThe 0.1 0.2 0.3\ncat 1 2 3\n")
    table = import_table(str(path))
    assert table.dimension == 3
    assert table.words == ["the", "cat"]


def test_import_dimension_mismatch_has_line_number(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a 1 2\nb 1 2 3\n")
    with pytest.raises(FormatError) as info:
        import_table(str(path))
    assert info.value.line_number == 2


def test_import_duplicate_word(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a 1 2\na 3 4\n")
    with pytest.raises(FormatError):
        import_table(str(path))


def test_import_vocabulary_filter(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a 1 0\nb 0 1\nc 1 1\n")
    assert import_table(str(path), vocabulary={"a", "c"}).words == ["a", "c"]


def test_nearest_neighbors():
    table = average_by_word([
        ("cat", np.array([1.0, 0.1])),
        ("dog", np.array([0.9, 0.2])),
        ("car", np.array([-1.0, 0.5])),
        ("nil", np.array([0.0, 0.0])),
    ])
    ranked = nearest_neighbors(table, "cat", top_n=5)
    assert [w for w, _ in ranked] == ["dog", "car"]
    with pytest.raises(InputError):
        nearest_neighbors(table, "bird")


@pytest.mark.slow
def test_synonyms_end_up_closer_than_random_pairs():
    corpus = make_synthetic_corpus(seed=0)
    segments = [s for group in corpus.groups.values() for s in group]
    stats = compute_normalization(segments)
    normalized = group_by_utterance(stats.apply_segment(s) for s in segments)
    # 自己回帰デコーダ: 全フレームが z から決まる
    config = TrainConfig(learning_rate=0.1, epochs=60, k=2, batch_size=16, precision="f32", seed=0)
    model = ModelConfig(hidden_size=32, encoder_layers=1, teacher_forcing=False)
    state = train(build_skipgram_examples(normalized, k=2), config, model, stats, quiet=True)

    table = average_by_word(encode_corpus(state.params, stats, segments))
    synonym = np.mean([cosine_similarity(table[a], table[b]) for a, b in corpus.synonym_pairs])
    rng = np.random.default_rng(0)
    synonyms = {frozenset(p) for p in corpus.synonym_pairs}
    random_pairs = []
    while len(random_pairs) < 100:
        a, b = rng.choice(table.words, size=2, replace=False)
        if frozenset((a, b)) not in synonyms:
            random_pairs.append(cosine_similarity(table[a], table[b]))
    assert synonym - np.mean(random_pairs) >= 0.15


def test_import_rejects_non_utf8(tmp_path):
    path = tmp_path / "v.txt"
    path.write_bytes("café 1 2\n".encode("latin-1"))
    with pytest.raises(FormatError):
        import_table(str(path))

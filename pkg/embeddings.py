"""
単語ベクトル
- 学習済みエンコーダで全セグメントを埋め込み、単語ごとに平均
- テキスト形式の読み書き（"word v1 v2 ... vd"、先頭行 "count dim" は任意）
"""

import logging
import re
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from corpus import NormalizationStats, WordSegment
from errors import FormatError, InputError
from neuralnet import ModelParams, SegmentEmbedding, encode_many

logger = logging.getLogger(__name__)

_WHITESPACE = re.compile(r"\s")


@dataclass
class WordVectorTable:
    dimension: int
    entries: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    counts: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> np.ndarray:
        return self.entries[word]

    def get(self, word: str) -> Optional[np.ndarray]:
        return self.entries.get(word)

    @property
    def words(self) -> List[str]:
        return list(self.entries)


def encode_corpus(
    params: ModelParams,
    normalization: NormalizationStats,
    segments: Sequence[WordSegment],
    threads: int = 1,
    batch_size: int = 64,
) -> List[Tuple[str, SegmentEmbedding]]:
    """正規化してからエンコード（入力順を保つ）"""
    if not segments:
        return []
    if normalization.dim != params.config.input_dim:
        raise InputError(f"normalization dimension {normalization.dim} != model input dimension {params.config.input_dim}")

    # 長さの近いものをまとめてパディングを減らす
    order = sorted(range(len(segments)), key=lambda i: segments[i].features.T)
    chunks = [order[start:start + batch_size] for start in range(0, len(order), batch_size)]

    def run(chunk: List[int]) -> np.ndarray:
        return encode_many(params, [normalization.apply(segments[i].features.frames) for i in chunk])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            encoded = list(pool.map(run, chunks))
    else:
        encoded = [run(chunk) for chunk in chunks]

    vectors: List[Optional[np.ndarray]] = [None] * len(segments)
    for chunk, z in zip(chunks, encoded):
        for row, i in enumerate(chunk):
            vectors[i] = z[row]
    return [(segment.word, SegmentEmbedding(vectors[i])) for i, segment in enumerate(segments)]


def average_by_word(pairs: Iterable[Tuple[str, np.ndarray]]) -> WordVectorTable:
    """単語ごとの算術平均（単語順に加算するので入力順に依存しない）"""
    grouped: Dict[str, List[np.ndarray]] = {}
    dimension = None
    for word, vector in pairs:
        vector = np.asarray(getattr(vector, "z", vector))
        if dimension is None:
            dimension = vector.shape[0]
        elif vector.shape[0] != dimension:
            raise InputError(f"vector for '{word}' has dimension {vector.shape[0]}, expected {dimension}")
        grouped.setdefault(word, []).append(vector)

    table = WordVectorTable(dimension=dimension or 0)
    for word in sorted(grouped):
        # 加算順を固定
        stacked = np.stack(sorted(grouped[word], key=lambda v: v.tobytes()))
        table.entries[word] = stacked.mean(axis=0)
        table.counts[word] = len(stacked)
    return table


def export_table(table: WordVectorTable, path: str):
    """1 行 1 単語、有効数字 9 桁"""
    with open(path, "w", encoding="utf-8") as f:
        for word, vector in table.entries.items():
            if not word or _WHITESPACE.search(word):
                raise FormatError(f"cannot export word {word!r}: empty or contains whitespace")
            f.write(word + " " + " ".join(f"{v:.9g}" for v in vector) + "\n")
    logger.info(f"✅ exported {len(table)} word vectors (dim {table.dimension}) to {path}")


def _numbered_lines(f, path: str):
    try:
        yield from enumerate(f, start=1)
    except UnicodeDecodeError as e:
        raise FormatError(f"{path} is not valid UTF-8 text ({e.reason})") from e


def import_table(path: str, vocabulary: Optional[Set[str]] = None) -> WordVectorTable:
    """
    単語ベクトルのテキストファイルを読み込む

    Args:
        path: ファイルパス
        vocabulary: 指定時はこの集合に含まれる単語だけ保持（大規模な事前学習ベクトル用）

    Returns:
        WordVectorTable: 単語は小文字化済み
    """
    table = WordVectorTable(dimension=0)
    raw_words: Dict[str, str] = {}
    collisions = 0

    with open(path, "r", encoding="utf-8", errors="strict") as f:
        for line_number, line in _numbered_lines(f, path):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            if line_number == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                table.dimension = int(parts[1])
                continue

            raw, values = parts[0], parts[1:]
            if table.dimension == 0:
                table.dimension = len(values)
            if len(values) != table.dimension or not values:
                raise FormatError(f"expected {table.dimension} values, found {len(values)}", line_number)
            if raw in raw_words:
                raise FormatError(f"duplicate word {raw!r}", line_number)

            word = raw.lower()
            raw_words[raw] = word
            if vocabulary is not None and word not in vocabulary:
                continue
            if word in table.entries:
                # 大文字小文字違いの衝突は最初の出現を残す
                collisions += 1
                continue
            try:
                table.entries[word] = np.array([float(v) for v in values])
            except ValueError as e:
                raise FormatError(f"non-numeric vector component for {raw!r}", line_number) from e
            table.counts[word] = 1

    if collisions:
        logger.warning(f"⚠️ {collisions} words collided after lowercasing in {path}; first occurrence kept")
    logger.info(f"loaded {len(table)} word vectors (dim {table.dimension}) from {path}")
    return table


def nearest_neighbors(table: WordVectorTable, word: str, top_n: int = 10) -> List[Tuple[str, float]]:
    """コサイン類似度の高い順（ゼロベクトルは除外）"""
    query = table.get(word.lower())
    if query is None:
        raise InputError(f"'{word}' is not in the vector table")
    query_norm = np.linalg.norm(query)
    if query_norm == 0:
        raise InputError(f"'{word}' has a zero vector")

    words = [w for w in table.entries if w != word.lower()]
    if not words:
        return []
    matrix = np.stack([table.entries[w] for w in words])
    norms = np.linalg.norm(matrix, axis=1)
    keep = norms > 0
    scores = (matrix[keep] @ query) / (norms[keep] * query_norm)
    kept_words = [w for w, k in zip(words, keep) if k]

    ranked = sorted(zip(kept_words, scores.tolist()), key=lambda pair: (-pair[1], pair[0]))
    return ranked[:top_n]

"""
単語類似度ベンチマーク評価
コサイン類似度と人手評定のスピアマン順位相関 ρ、#(not found) を集計する
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import chardet
import numpy as np
from jinja2 import Template
from scipy.stats import rankdata

from embeddings import WordVectorTable
from errors import (
    Audio2VecError,
    InputError,
    InsufficientDataError,
    ParseError,
    UndefinedCorrelationError,
    UndefinedSimilarityError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkPair:
    word_a: str
    word_b: str
    human_score: float


@dataclass(frozen=True)
class EvalResult:
    dataset_name: str
    num_pairs: int
    num_not_found: int
    rho: float


@dataclass(frozen=True)
class CanonicalBenchmark:
    """公開値（GloVe Wikipedia 2014, 300 次元）"""

    number: int
    name: str
    num_pairs: int
    reference_not_found: int
    reference_rho: float


CANONICAL_BENCHMARKS: Tuple[CanonicalBenchmark, ...] = (
    CanonicalBenchmark(1, "WS-353", 353, 0, 0.6054),
    CanonicalBenchmark(2, "WS-353-REL", 252, 0, 0.5725),
    CanonicalBenchmark(3, "WS-353-SIM", 203, 0, 0.6638),
    CanonicalBenchmark(4, "MC-30", 30, 0, 0.7026),
    CanonicalBenchmark(5, "RG-65", 65, 0, 0.7662),
    CanonicalBenchmark(6, "Rare-Word", 2034, 252, 0.4118),
    CanonicalBenchmark(7, "MEN", 3000, 0, 0.7375),
    CanonicalBenchmark(8, "MTurk-287", 287, 0, 0.6332),
    CanonicalBenchmark(9, "MTurk-771", 771, 0, 0.6501),
    CanonicalBenchmark(10, "YP-130", 130, 0, 0.5613),
    CanonicalBenchmark(11, "SimLex-999", 999, 0, 0.3705),
    CanonicalBenchmark(12, "Verb-143", 144, 0, 0.3051),
    CanonicalBenchmark(13, "SimVerb-3500", 3500, 2, 0.2267),
)
_CANONICAL_BY_NAME: Dict[str, CanonicalBenchmark] = {b.name.lower(): b for b in CANONICAL_BENCHMARKS}


def canonical_benchmark(name: str) -> Optional[CanonicalBenchmark]:
    return _CANONICAL_BY_NAME.get(name.lower())


def load_benchmark(stream: TextIO) -> List[BenchmarkPair]:
    """
    "word1 word2 score" 形式（空白区切り、# 以降はコメント）
    単語は小文字化、行の順序は保持
    """
    pairs = []
    for line_number, line in enumerate(stream, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        fields = content.split()
        if len(fields) != 3:
            raise ParseError(f"expected 'word1 word2 score', found {len(fields)} fields", line_number)
        try:
            score = float(fields[2])
        except ValueError:
            raise ParseError(f"non-numeric score {fields[2]!r}", line_number)
        if not math.isfinite(score):
            raise ParseError(f"non-finite score {fields[2]!r}", line_number)
        pairs.append(BenchmarkPair(fields[0].lower(), fields[1].lower(), score))
    return pairs


def load_benchmark_file(path: str) -> List[BenchmarkPair]:
    # 公開データセットは UTF-8 以外で配布されているものがある
    with open(path, "rb") as f:
        raw_data = f.read()
    encoding = chardet.detect(raw_data)["encoding"] or "utf-8"
    with open(path, "r", encoding=encoding) as f:
        return load_benchmark(f)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InputError(f"vector shapes differ: {u.shape} vs {v.shape}")
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise UndefinedSimilarityError("cosine similarity with a zero vector")
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """平均順位のピアソン相関（同順位は平均順位）"""
    if len(a) != len(b):
        raise InputError(f"lists of different length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise InsufficientDataError(f"need at least 2 values, got {len(a)}")
    rank_a = rankdata(a, method="average")
    rank_b = rankdata(b, method="average")
    da = rank_a - rank_a.mean()
    db = rank_b - rank_b.mean()
    denominator = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denominator == 0:
        raise UndefinedCorrelationError("all ranks are tied")
    return float(np.clip(np.dot(da, db) / denominator, -1.0, 1.0))


def evaluate(table: WordVectorTable, benchmark: Sequence[BenchmarkPair], name: str = "") -> EvalResult:
    """
    ベンチマーク 1 件を評価
    どちらかの単語が無い（またはゼロベクトル）ペアは除外して #(not found) に数える
    """
    if not benchmark:
        raise InputError(f"benchmark {name!r} is empty")
    predicted, human = [], []
    not_found = 0
    for pair in benchmark:
        u = table.get(pair.word_a.lower())
        v = table.get(pair.word_b.lower())
        if u is None or v is None:
            not_found += 1
            continue
        try:
            predicted.append(cosine_similarity(u, v))
        except UndefinedSimilarityError:
            not_found += 1
            continue
        human.append(pair.human_score)

    if len(predicted) < 2:
        raise InsufficientDataError(f"{name or 'benchmark'}: only {len(predicted)} evaluable pairs")
    return EvalResult(
        dataset_name=name,
        num_pairs=len(benchmark),
        num_not_found=not_found,
        rho=spearman_rho(predicted, human),
    )


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: str
    expected_pairs: Optional[int]


def load_manifest(stream: TextIO, base_dir: str = ".") -> List[ManifestEntry]:
    """name<TAB>path<TAB>expected_pairs（相対パスはマニフェストの場所から）"""
    entries = []
    for line_number, line in enumerate(stream, start=1):
        content = line.rstrip("\n")
        if not content.strip() or content.lstrip().startswith("#"):
            continue
        fields = content.split("\t")
        if len(fields) not in (2, 3):
            raise ParseError(f"expected 'name<TAB>path<TAB>expected_pairs', found {len(fields)} fields", line_number)
        expected = None
        if len(fields) == 3 and fields[2].strip():
            try:
                expected = int(fields[2])
            except ValueError:
                raise ParseError(f"non-integer expected pair count {fields[2]!r}", line_number)
        path = fields[1].strip()
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        entries.append(ManifestEntry(fields[0].strip(), path, expected))

    # 既知のデータセットは公開順に並べる
    def order(entry: ManifestEntry):
        canonical = canonical_benchmark(entry.name)
        return (0, canonical.number) if canonical else (1, 0)

    return sorted(entries, key=order)


def check_pair_count(entry: ManifestEntry, pairs: Sequence[BenchmarkPair]):
    """件数の不一致は警告のみ（データセットには改訂版がある）"""
    expected = entry.expected_pairs
    canonical = canonical_benchmark(entry.name)
    if expected is None and canonical is not None:
        expected = canonical.num_pairs
    if expected is not None and expected != len(pairs):
        logger.warning(f"⚠️ {entry.name}: {len(pairs)} pairs in {entry.path}, expected {expected}")


def evaluate_manifest(
    table: WordVectorTable, entries: Sequence[ManifestEntry], threads: int = 1
) -> Tuple[List[EvalResult], List[Tuple[str, str]]]:
    """
    マニフェストの全ベンチマークを評価

    Returns:
        (結果のリスト, 失敗した (name, 理由) のリスト)
    """

    def run(entry: ManifestEntry):
        try:
            pairs = load_benchmark_file(entry.path)
            check_pair_count(entry, pairs)
            return evaluate(table, pairs, entry.name), None
        except (OSError, Audio2VecError) as e:
            return None, str(e)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, entries))
    else:
        outcomes = [run(entry) for entry in entries]

    results, failures = [], []
    for entry, (result, error) in zip(entries, outcomes):
        if result is not None:
            results.append(result)
        else:
            logger.error(f"❌ {entry.name}: {error}")
            failures.append((entry.name, error))
    return results, failures


_TEXT_TEMPLATE = Template(
    "{% for row in rows %}"
    "{{ row | join('  ') }}\n"
    "{% endfor %}"
)


def _row_number(result: EvalResult, position: int) -> int:
    canonical = canonical_benchmark(result.dataset_name)
    return canonical.number if canonical else position


def _render(header: List[str], rows: List[List[str]]) -> Tuple[str, str]:
    tsv = "\n".join("\t".join(row) for row in [header] + rows) + "\n"
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    aligned = [[cell.ljust(width) for cell, width in zip(row, widths)] for row in [header] + rows]
    text = _TEXT_TEMPLATE.render(rows=aligned)
    return tsv, "\n".join(line.rstrip() for line in text.splitlines()) + "\n"


def report(results: Sequence[EvalResult]) -> Tuple[str, str]:
    """
    結果表

    Returns:
        (TSV, 整形済みテキスト) 列: No., Dataset, #(word pairs), #(not found), ρ
    """
    header = ["No.", "Dataset", "#(word pairs)", "#(not found)", "ρ"]
    rows = [
        [str(_row_number(r, i)), r.dataset_name, str(r.num_pairs), str(r.num_not_found), f"{r.rho:.4f}"]
        for i, r in enumerate(results, start=1)
    ]
    return _render(header, rows)


def compare_report(results_by_model: Sequence[Tuple[str, Sequence[EvalResult]]]) -> Tuple[str, str]:
    """複数モデルを横に並べる（モデルごとに #(not found) と ρ）"""
    header = ["No.", "Dataset", "#(word pairs)"]
    for model_name, _ in results_by_model:
        header += [f"{model_name} #(not found)", f"{model_name} ρ"]

    datasets: Dict[str, int] = {}
    for _, results in results_by_model:
        for r in results:
            datasets.setdefault(r.dataset_name, r.num_pairs)

    def order(name: str):
        canonical = canonical_benchmark(name)
        return (0, canonical.number, name) if canonical else (1, 0, name)

    rows = []
    for position, name in enumerate(sorted(datasets, key=order), start=1):
        canonical = canonical_benchmark(name)
        row = [str(canonical.number if canonical else position), name, str(datasets[name])]
        for _, results in results_by_model:
            found = next((r for r in results if r.dataset_name == name), None)
            row += [str(found.num_not_found), f"{found.rho:.4f}"] if found else ["-", "-"]
        rows.append(row)
    return _render(header, rows)

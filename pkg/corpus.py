"""
コーパス構築
強制アラインメントの単語境界 → 単語セグメント切り出し → 正規化 → skip-gram 学習例
"""

import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, TextIO, Tuple, Union

import numpy as np

from dsp_features import FeatureSequence
from errors import InputError, ParseError, ValidationError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
DEFAULT_MAX_SEGMENT_FRAMES = 100

_PUNCTUATION = re.compile(r"[^\w']+")


def normalize_word(word: str) -> str:
    """小文字化・記号除去（アポストロフィは残す）"""
    return _PUNCTUATION.sub("", word.strip().lower()).strip("'")


@dataclass(frozen=True)
class AlignmentEntry:
    utterance_id: str
    word: str
    start: float
    end: float


@dataclass(frozen=True)
class WordSegment:
    utterance_id: str
    segment_index: int
    word: str
    features: FeatureSequence
    start_frame: int = 0
    end_frame: int = 0
    is_long: bool = False


@dataclass(frozen=True)
class SkipGramExample:
    center: WordSegment
    targets: Tuple[Tuple[int, WordSegment], ...]


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        if frames.shape[-1] != self.dim:
            raise InputError(f"feature dimension {frames.shape[-1]} != normalization dimension {self.dim}")
        return (frames - self.mean) / self.std

    def apply_segment(self, segment: WordSegment) -> WordSegment:
        return WordSegment(
            utterance_id=segment.utterance_id,
            segment_index=segment.segment_index,
            word=segment.word,
            features=FeatureSequence(self.apply(segment.features.frames)),
            start_frame=segment.start_frame,
            end_frame=segment.end_frame,
            is_long=segment.is_long,
        )


@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    segment_index: int
    word: str
    start_frame: int
    end_frame: int


def load_alignments(stream: TextIO) -> "OrderedDict[str, List[AlignmentEntry]]":
    """
    アラインメント TSV を読み込み

    Args:
        stream: `utterance_id<TAB>word<TAB>start<TAB>end` 形式のテキスト（# はコメント）

    Returns:
        OrderedDict: utterance_id → 開始時刻順の AlignmentEntry リスト
    """
    grouped: "OrderedDict[str, List[Tuple[int, AlignmentEntry]]]" = OrderedDict()

    for line_number, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", line_number)
        utterance_id, word, start_text, end_text = fields
        try:
            start, end = float(start_text), float(end_text)
        except ValueError:
            raise ParseError(f"non-numeric time in {line!r}", line_number)
        if not (math.isfinite(start) and math.isfinite(end)):
            raise ParseError("non-finite time", line_number)
        if end <= start:
            raise ValidationError(f"end {end} <= start {start}", line_number)
        label = normalize_word(word)
        if not label:
            raise ValidationError(f"empty word label {word!r}", line_number)
        entry = AlignmentEntry(utterance_id.strip(), label, start, end)
        grouped.setdefault(entry.utterance_id, []).append((line_number, entry))

    result: "OrderedDict[str, List[AlignmentEntry]]" = OrderedDict()
    for utterance_id, numbered in grouped.items():
        numbered.sort(key=lambda item: item[1].start)
        for (_, prev), (line_number, cur) in zip(numbered, numbered[1:]):
            if cur.start < prev.end:
                raise ValidationError(
                    f"'{cur.word}' overlaps '{prev.word}' in utterance {utterance_id}", line_number
                )
        result[utterance_id] = [entry for _, entry in numbered]
    return result


def _to_frame(seconds: float, hop: float) -> int:
    # 四捨五入（偶数丸めではない）
    return int(math.floor(seconds / hop + 0.5))


def segment_ranges(num_frames: int, entries: Sequence[AlignmentEntry], hop: float) -> List[Tuple[AlignmentEntry, int, int]]:
    """各エントリのフレーム範囲 [start, end)（T でクリップ、空は除外）"""
    ranges = []
    for entry in entries:
        start = min(max(_to_frame(entry.start, hop), 0), num_frames)
        end = min(max(_to_frame(entry.end, hop), 0), num_frames)
        if end > start:
            ranges.append((entry, start, end))
    return ranges


def excise_segments(
    utterance_features: FeatureSequence,
    entries: Sequence[AlignmentEntry],
    hop: float,
    max_segment_frames: int = DEFAULT_MAX_SEGMENT_FRAMES,
) -> List[WordSegment]:
    """
    発話の特徴量から単語セグメントを切り出す

    Returns:
        List[WordSegment]: 0 から連番のセグメント
    """
    ranges = segment_ranges(utterance_features.T, entries, hop)
    dropped = len(entries) - len(ranges)
    if not ranges:
        utterance_id = entries[0].utterance_id if entries else "?"
        raise InputError(f"utterance {utterance_id}: every word slice is empty")
    if dropped:
        logger.warning(f"⚠️ {entries[0].utterance_id}: dropped {dropped} empty word slices")

    segments = []
    for index, (entry, start, end) in enumerate(ranges):
        segments.append(WordSegment(
            utterance_id=entry.utterance_id,
            segment_index=index,
            word=normalize_word(entry.word),
            features=FeatureSequence(utterance_features.frames[start:end]),
            start_frame=start,
            end_frame=end,
            is_long=(end - start) > max_segment_frames,
        ))

    long_count = sum(s.is_long for s in segments)
    if long_count:
        logger.info(f"{entries[0].utterance_id}: {long_count} segments longer than {max_segment_frames} frames")
    return segments


def compute_normalization(segments: Iterable[WordSegment]) -> NormalizationStats:
    """
    係数ごとの平均・母標準偏差（2 パス）
    """
    segments = list(segments)
    frame_total = sum(s.features.T for s in segments)
    if frame_total == 0:
        raise InputError("cannot compute normalization over zero frames")

    # 1 パス目: 部分和 → 平均
    partial_sums = [s.features.frames.sum(axis=0) for s in segments]
    mean = np.sum(partial_sums, axis=0) / frame_total

    # 2 パス目: 偏差平方和
    partial_sq = [((s.features.frames - mean) ** 2).sum(axis=0) for s in segments]
    std = np.sqrt(np.sum(partial_sq, axis=0) / frame_total)
    return NormalizationStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def group_by_utterance(segments: Iterable[WordSegment]) -> "OrderedDict[str, List[WordSegment]]":
    groups: "OrderedDict[str, List[WordSegment]]" = OrderedDict()
    for segment in segments:
        groups.setdefault(segment.utterance_id, []).append(segment)
    for group in groups.values():
        group.sort(key=lambda s: s.segment_index)
    return groups


def build_skipgram_examples(
    grouped_segments: Union[Mapping[str, Sequence[WordSegment]], Iterable[Sequence[WordSegment]]],
    k: int,
) -> List[SkipGramExample]:
    """
    発話内の前後 k 単語をターゲットとする学習例を作成（発話境界は跨がない）
    """
    if k < 1:
        raise InputError(f"window k must be >= 1, got {k}")
    groups = grouped_segments.values() if isinstance(grouped_segments, Mapping) else grouped_segments

    examples = []
    lonely = 0
    for group in groups:
        group = list(group)
        if len(group) < 2:
            lonely += 1
            continue
        for n, center in enumerate(group):
            targets = tuple(
                (offset, group[n + offset])
                for offset in list(range(-k, 0)) + list(range(1, k + 1))
                if 0 <= n + offset < len(group)
            )
            examples.append(SkipGramExample(center=center, targets=targets))

    if lonely:
        logger.info(f"{lonely} single-word utterances yield no skip-gram example")
    return examples


def write_manifest(segments: Iterable[WordSegment], stream: TextIO):
    """セグメント一覧 TSV"""
    stream.write("utterance_id\tsegment_index\tword\tstart_frame\tend_frame\n")
    for s in segments:
        stream.write(f"{s.utterance_id}\t{s.segment_index}\t{s.word}\t{s.start_frame}\t{s.end_frame}\n")


def read_manifest(stream: TextIO) -> List[ManifestRow]:
    rows = []
    for line_number, raw in enumerate(stream, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if line_number == 1 and fields[0] == "utterance_id":
            continue
        if len(fields) != 5:
            raise ParseError(f"expected 5 manifest fields, got {len(fields)}", line_number)
        try:
            rows.append(ManifestRow(fields[0], int(fields[1]), fields[2], int(fields[3]), int(fields[4])))
        except ValueError:
            raise ParseError(f"non-integer index in {line!r}", line_number)
    return rows


def segments_from_manifest(rows: Sequence[ManifestRow], features_by_utterance: Mapping[str, FeatureSequence]) -> List[WordSegment]:
    """マニフェスト行と発話特徴量から WordSegment を復元"""
    segments = []
    for row in rows:
        if row.utterance_id not in features_by_utterance:
            raise InputError(f"no feature cache for utterance {row.utterance_id}")
        frames = features_by_utterance[row.utterance_id].frames
        if not 0 <= row.start_frame < row.end_frame <= len(frames):
            raise InputError(
                f"{row.utterance_id}#{row.segment_index}: frame range [{row.start_frame}, {row.end_frame}) "
                f"outside utterance of {len(frames)} frames"
            )
        segments.append(WordSegment(
            utterance_id=row.utterance_id,
            segment_index=row.segment_index,
            word=row.word,
            features=FeatureSequence(frames[row.start_frame:row.end_frame]),
            start_frame=row.start_frame,
            end_frame=row.end_frame,
        ))
    return segments


@dataclass
class SyntheticCorpus:
    groups: "OrderedDict[str, List[WordSegment]]"
    vocabulary: List[str]
    synonym_pairs: List[Tuple[str, str]]
    prototypes: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def make_synthetic_corpus(
    vocab_size: int = 40,
    num_utterances: int = 2000,
    num_synonym_pairs: int = 5,
    dim: int = 13,
    frames_per_word: Tuple[int, int] = (4, 8),
    noise: float = 0.1,
    offset: float = 0.0,
    seed: int = 0,
) -> SyntheticCorpus:
    """
    合成コーパス
    単語タイプごとに固定のランダム特徴プロトタイプ＋ノイズ。
    同義語ペアは同じ文脈テンプレートの中で入れ替え可能。
    """
    rng = np.random.default_rng(seed)
    vocabulary = [f"w{i:02d}" for i in range(vocab_size)]
    synonym_pairs = [(vocabulary[2 * i], vocabulary[2 * i + 1]) for i in range(num_synonym_pairs)]
    synonym_of = {}
    for a, b in synonym_pairs:
        synonym_of[a], synonym_of[b] = b, a

    # 各同義語ペアの片側と、残りの単語で文脈テンプレートを作る
    slot_words = [a for a, _ in synonym_pairs]
    context_words = vocabulary[2 * num_synonym_pairs:]
    templates = []
    for slot in slot_words:
        for _ in range(3):
            left = list(rng.choice(context_words, size=2, replace=False))
            right = list(rng.choice(context_words, size=2, replace=False))
            templates.append(left + [slot] + right)
    for _ in range(10):
        templates.append(list(rng.choice(context_words, size=5, replace=False)))

    prototypes = {word: rng.normal(size=dim) for word in vocabulary}
    groups: "OrderedDict[str, List[WordSegment]]" = OrderedDict()
    for u in range(num_utterances):
        template = templates[rng.integers(len(templates))]
        words = [synonym_of[w] if w in synonym_of and rng.random() < 0.5 else w for w in template]
        utterance_id = f"syn{u:05d}"
        segments = []
        for index, word in enumerate(words):
            length = int(rng.integers(frames_per_word[0], frames_per_word[1] + 1))
            frames = offset + prototypes[word] + noise * rng.normal(size=(length, dim))
            segments.append(WordSegment(utterance_id, index, word, FeatureSequence(frames)))
        groups[utterance_id] = segments
    return SyntheticCorpus(groups, vocabulary, synonym_pairs, prototypes)

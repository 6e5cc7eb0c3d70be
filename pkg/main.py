#!/usr/bin/env python3
"""
audio2vec - 音声セグメントの意味ベクトル学習ツールキット
Version: 1.0.0

パイプラインはファイル経由の段階構成:
features → train → export → eval（＋ gradcheck / neighbors）
"""

import argparse
import glob
import logging
import os
import sys
from collections import OrderedDict
from dataclasses import asdict
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from tqdm import tqdm

from corpus import (
    SkipGramExample,
    WordSegment,
    build_skipgram_examples,
    compute_normalization,
    excise_segments,
    group_by_utterance,
    load_alignments,
    read_manifest,
    segments_from_manifest,
    write_manifest,
)
from dsp_features import FeatureSequence, MfccConfig, extract_mfcc, read_feature_cache, read_wav, write_feature_cache
from embeddings import average_by_word, encode_corpus, export_table, import_table, nearest_neighbors
from errors import Audio2VecError, InputError, NumericalError
from neuralnet import ModelConfig, finite_difference_check, init_params, skipgram_gradient
from run_config import RunConfig
from trainer import load_checkpoint, train
from wordsim_eval import compare_report, evaluate_manifest, load_benchmark_file, load_manifest, report

logger = logging.getLogger(__name__)

MANIFEST_NAME = "segments.tsv"
CACHE_SUFFIX = ".a2vf"
MFCC_STAMP_NAME = "mfcc.cfg"
GRADCHECK_TOLERANCE = 1e-6


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, mode="a", encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def _cache_path(features_dir: str, utterance_id: str) -> str:
    return os.path.join(features_dir, f"{utterance_id}{CACHE_SUFFIX}")


def _mfcc_stamp(mfcc: MfccConfig) -> Dict[str, str]:
    return {key: str(value) for key, value in asdict(mfcc).items()}


def _caches_match(features_dir: str, mfcc: MfccConfig) -> bool:
    """キャッシュを書いたときの MFCC 設定が今回と同じか"""
    path = os.path.join(features_dir, MFCC_STAMP_NAME)
    return os.path.exists(path) and dict(dotenv_values(path)) == _mfcc_stamp(mfcc)


def _write_mfcc_stamp(features_dir: str, mfcc: MfccConfig):
    path = os.path.join(features_dir, MFCC_STAMP_NAME)
    with open(f"{path}.tmp", "w", encoding="utf-8") as f:
        for key, value in _mfcc_stamp(mfcc).items():
            f.write(f"{key}={value}\n")
    os.replace(f"{path}.tmp", path)


def _threads(config: RunConfig) -> int:
    return 1 if config["deterministic"] else config["threads"]


def _load_segments(features_dir: str, manifest_path: str) -> List[WordSegment]:
    with open(manifest_path, "r", encoding="utf-8") as f:
        rows = read_manifest(f)
    features: Dict[str, FeatureSequence] = {}
    for row in rows:
        if row.utterance_id not in features:
            features[row.utterance_id] = read_feature_cache(_cache_path(features_dir, row.utterance_id))
    return segments_from_manifest(rows, features)


def cmd_features(args, config: RunConfig) -> int:
    """WAV → A2VF 特徴量キャッシュ＋セグメントマニフェスト"""
    mfcc = config.mfcc_config()
    with open(args.alignments, "r", encoding="utf-8") as f:
        alignments = load_alignments(f)

    wav_paths = sorted(glob.glob(os.path.join(args.audio_dir, "**", "*.wav"), recursive=True))
    wavs = {os.path.splitext(os.path.basename(p))[0]: p for p in wav_paths}
    os.makedirs(args.out_dir, exist_ok=True)

    jobs = [(uid, wavs[uid], entries) for uid, entries in alignments.items() if uid in wavs]
    missing = [uid for uid in alignments if uid not in wavs]
    if missing:
        logger.warning(f"⚠️ {len(missing)} aligned utterances have no WAV file (first: {missing[0]})")
    unaligned = len(wavs) - len(jobs)
    if unaligned:
        logger.warning(f"⚠️ {unaligned} WAV files have no alignment and are skipped")

    reuse = not args.force and _caches_match(args.out_dir, mfcc)
    if not args.force and not reuse and glob.glob(os.path.join(args.out_dir, f"*{CACHE_SUFFIX}")):
        logger.warning(f"⚠️ MFCC settings differ from the existing caches in {args.out_dir}; re-extracting")

    def process(job) -> List[WordSegment]:
        uid, wav_path, entries = job
        cache = _cache_path(args.out_dir, uid)
        if reuse and os.path.exists(cache) and os.path.getmtime(cache) >= os.path.getmtime(wav_path):
            features = read_feature_cache(cache)
        else:
            features = extract_mfcc(read_wav(wav_path), mfcc)
            write_feature_cache(cache, features)
        return excise_segments(features, entries, mfcc.frame_hop, config["max_segment_frames"])

    segments: List[WordSegment] = []
    failed = 0
    with ThreadPoolExecutor(max_workers=_threads(config)) as pool:
        futures = [pool.submit(process, job) for job in jobs]
        for job, future in zip(jobs, tqdm(futures, desc="features", unit="utt", disable=args.quiet)):
            try:
                segments.extend(future.result())
            except Audio2VecError as e:
                failed += 1
                logger.error(f"❌ {job[0]}: {e}")

    _write_mfcc_stamp(args.out_dir, mfcc)
    manifest_path = args.manifest or os.path.join(args.out_dir, MANIFEST_NAME)
    tmp_path = f"{manifest_path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        write_manifest(segments, f)
    os.replace(tmp_path, manifest_path)

    logger.info(f"✅ {len(jobs) - failed}/{len(jobs)} utterances, {len(segments)} segments → {manifest_path}")
    return 1 if failed else 0


def cmd_train(args, config: RunConfig) -> int:
    train_config = config.train_config()
    segments = _load_segments(args.features_dir, args.manifest)
    if not segments:
        raise InputError(f"{args.manifest} lists no segments")

    resume = load_checkpoint(args.resume, precision=train_config.precision) if args.resume else None
    normalization = resume.normalization if resume else compute_normalization(segments)
    normalized = [normalization.apply_segment(s) for s in segments]
    examples = build_skipgram_examples(group_by_utterance(normalized), train_config.k)

    model_config = config.model_config(input_dim=segments[0].features.d)
    state = train(
        examples,
        train_config,
        model_config,
        normalization,
        checkpoint_path=args.checkpoint,
        log_file=args.train_log,
        resume=resume,
        quiet=args.quiet,
    )
    logger.info(f"✅ training finished at epoch {state.epoch}, loss {state.running_loss:.6g}")
    return 0


def cmd_export(args, config: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    segments = _load_segments(args.features_dir, args.manifest)
    pairs = encode_corpus(state.params, state.normalization, segments, threads=_threads(config))
    table = average_by_word(pairs)
    export_table(table, args.out_vectors)
    return 0


def _parse_vectors_arg(value: str):
    if "=" in value and not os.path.exists(value):
        name, path = value.split("=", 1)
        return name, path
    return os.path.splitext(os.path.basename(value))[0], value


def cmd_eval(args, config: RunConfig) -> int:
    with open(args.benchmarks, "r", encoding="utf-8") as f:
        entries = load_manifest(f, base_dir=os.path.dirname(os.path.abspath(args.benchmarks)))

    # 大きな事前学習ベクトルはベンチマークに出てくる単語だけ読む
    vocabulary = set()
    for entry in entries:
        try:
            pairs = load_benchmark_file(entry.path)
        except (OSError, InputError):
            # evaluate_manifest が失敗として報告する
            continue
        for pair in pairs:
            vocabulary.update((pair.word_a, pair.word_b))

    results_by_model = []
    failed = False
    for name, path in (_parse_vectors_arg(v) for v in args.vectors):
        if not os.path.exists(path):
            raise InputError(f"vector file not found: {path}")
        table = import_table(path, vocabulary=vocabulary)
        results, failures = evaluate_manifest(table, entries, threads=_threads(config))
        failed = failed or bool(failures)
        results_by_model.append((name, results))

    if len(results_by_model) == 1:
        tsv, text = report(results_by_model[0][1])
    else:
        tsv, text = compare_report(results_by_model)
    print(text, end="")
    if args.tsv:
        with open(args.tsv, "w", encoding="utf-8") as f:
            f.write(tsv)
    return 1 if failed else 0


def _gradcheck_instance(seed: int, config: RunConfig):
    """エンコーダ 2×6、デコーダ 6、d=3、T ≤ 4、k=2 の小さな検査用インスタンス"""
    rng = np.random.default_rng(seed)
    model_config = ModelConfig(
        input_dim=3,
        hidden_size=6,
        encoder_layers=2,
        teacher_forcing=config["teacher_forcing"],
        loss_normalization=config["loss_normalization"],
        offset_conditioning=config["offset_conditioning"],
        window=2,
        precision="f64",
    )
    params = init_params(model_config, seed)
    # バイアスやオフセット埋め込みも 0 以外の点で検査する
    params.flat += rng.normal(0.0, 0.1, size=params.flat.size)

    group = [
        WordSegment("check", i, f"w{i}", FeatureSequence(rng.normal(size=(int(rng.integers(1, 5)), 3))))
        for i in range(5)
    ]
    center = 2
    example = SkipGramExample(
        center=group[center],
        targets=tuple((offset, group[center + offset]) for offset in (-2, -1, 1, 2)),
    )
    return params, example


def cmd_gradcheck(args, config: RunConfig) -> int:
    worst = 0.0
    for seed in range(config["seed"], config["seed"] + args.seeds):
        params, example = _gradcheck_instance(seed, config)
        gradient = None
        if args.perturb_gradient:
            gradient = skipgram_gradient(params, example)
            gradient[np.random.default_rng(seed).integers(gradient.size)] += 1e-3
        error = finite_difference_check(params, example, epsilon=args.epsilon, gradient=gradient)
        logger.debug(f"seed {seed}: max relative error {error:.3e}")
        worst = max(worst, error)

    passed = worst < GRADCHECK_TOLERANCE
    print(f"max relative error: {worst:.3e} ({'PASS' if passed else 'FAIL'})")
    if passed:
        logger.info(f"✅ gradient check passed over {args.seeds} seeds")
        return 0
    logger.error(f"❌ gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
    return NumericalError.exit_code


def cmd_neighbors(args, config: RunConfig) -> int:
    table = import_table(args.vectors)
    for word, score in nearest_neighbors(table, args.word, args.top):
        print(f"{word}\t{score:.4f}")
    return 0


def _config_flags() -> argparse.ArgumentParser:
    """全サブコマンド共通の設定フラグ"""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="key = value 形式の設定ファイル")
    parent.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="任意の設定キーを上書き")
    parent.add_argument("--threads", type=int)
    parent.add_argument("--deterministic", action="store_const", const=True)
    parent.add_argument("--faithful", action="store_const", const=True, help="クリッピングなし・生の二乗和損失")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--epochs", type=int)
    parent.add_argument("--learning-rate", type=float)
    parent.add_argument("--batch-size", type=int)
    parent.add_argument("--k", type=int)
    parent.add_argument("--hidden-size", type=int)
    parent.add_argument("--encoder-layers", type=int)
    parent.add_argument("--precision", choices=("f32", "f64"))
    parent.add_argument("--checkpoint-every", type=int)
    parent.add_argument("--log-file", help="ログの追記先")
    parent.add_argument("-v", "--verbose", action="store_true")
    parent.add_argument("--quiet", action="store_true", help="進捗バーを表示しない")
    return parent


_OVERRIDE_KEYS = (
    "threads", "deterministic", "faithful", "seed", "epochs", "learning_rate",
    "batch_size", "k", "hidden_size", "encoder_layers", "precision", "checkpoint_every",
)


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = argparse.ArgumentParser(prog="audio2vec", description="音声セグメントの意味ベクトル学習")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[parent], help="MFCC 抽出とセグメントマニフェスト作成")
    p.add_argument("audio_dir")
    p.add_argument("alignments")
    p.add_argument("out_dir")
    p.add_argument("--manifest", help=f"既定: OUT_DIR/{MANIFEST_NAME}")
    p.add_argument("--force", action="store_true", help="最新のキャッシュも作り直す")
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser("train", parents=[parent], help="SGD 学習")
    p.add_argument("features_dir")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-log", help="エポック行の追記先")
    p.add_argument("--resume", help="再開するチェックポイント")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("export", parents=[parent], help="単語ベクトルの書き出し")
    p.add_argument("checkpoint")
    p.add_argument("features_dir")
    p.add_argument("manifest")
    p.add_argument("out_vectors")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("eval", parents=[parent], help="単語類似度ベンチマーク評価")
    p.add_argument("benchmarks", help="name<TAB>path<TAB>expected_pairs 形式のマニフェスト")
    p.add_argument("--vectors", action="append", required=True, help="PATH または NAME=PATH（複数可）")
    p.add_argument("--tsv", help="TSV の書き出し先")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[parent], help="有限差分による勾配検査")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--perturb-gradient", action="store_true", help="検出器の動作確認用に勾配を壊す")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("neighbors", parents=[parent], help="最近傍の単語")
    p.add_argument("vectors")
    p.add_argument("word")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(handler=cmd_neighbors)
    return parser


def _overrides(args) -> Dict[str, object]:
    overrides: Dict[str, object] = OrderedDict((key, getattr(args, key, None)) for key in _OVERRIDE_KEYS)
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.log_file)
    try:
        config = RunConfig.load(args.config, overrides=_overrides(args))
        config.log_resolved(args.command)
        return args.handler(args, config)
    except Audio2VecError as e:
        logger.error(f"❌ {args.command}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ {args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

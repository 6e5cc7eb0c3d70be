"""
学習ループ
- モーメンタムなし SGD（固定学習率）
- エポックごとにシャッフル → 中心セグメント長でバケット化 → バッチ平均勾配
- 大域ノルムによる勾配クリッピング
- A2VC チェックポイント（一時ファイル経由で置き換え）
"""

import json
import logging
import os
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from corpus import NormalizationStats, SkipGramExample
from errors import ConfigError, CorruptFileError, FormatError, InputError, NumericalError
from neuralnet import PRECISIONS, ModelConfig, ModelParams, PaddedBatch, batch_loss_and_gradient, init_params, pad_examples

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"A2VC"
CHECKPOINT_VERSION = 1
_PARAM_DTYPES = {"f32": "<f4", "f64": "<f8"}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 500
    k: int = 5
    batch_size: int = 32
    grad_clip_norm: Optional[float] = 5.0
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 25
    threads: int = 1
    deterministic: bool = False
    faithful: bool = False

    def validate(self):
        # lr = 0 は「更新なし」の確認用に許可する
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0: {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1 or self.k < 1:
            raise ConfigError(f"epochs, batch_size and k must be >= 1: {self.epochs}, {self.batch_size}, {self.k}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be positive or none: {self.grad_clip_norm}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.checkpoint_every < 1 or self.threads < 1:
            raise ConfigError("checkpoint_every and threads must be >= 1")

    def effective(self) -> "TrainConfig":
        """faithful 指定時はクリッピングなし"""
        return replace(self, grad_clip_norm=None) if self.faithful else self


@dataclass
class TrainState:
    params: ModelParams
    normalization: NormalizationStats
    epoch: int
    running_loss: float
    rng_state: Dict[str, Any]
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: List[float] = field(default_factory=list)


def batch_examples(
    examples: Sequence[SkipGramExample],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> List[PaddedBatch]:
    """
    中心セグメント長でバケット化したバッチ列
    rng 指定時: シャッフル → 安定ソート → 分割 → バッチ順をシャッフル
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1: {batch_size}")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    lengths = np.array([examples[i].center.features.T for i in order], dtype=np.int64)
    order = order[np.argsort(lengths, kind="stable")]

    chunks = [order[start:start + batch_size] for start in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [pad_examples([examples[i] for i in chunk]) for chunk in chunks]


def clip_gradient(grad: np.ndarray, max_norm: Optional[float]) -> Tuple[np.ndarray, float]:
    """大域ノルムが max_norm を超えたら方向を保って縮める"""
    norm = float(np.linalg.norm(grad))
    if max_norm is None or norm <= max_norm:
        return grad, norm
    return grad * (max_norm / norm), norm


def _batch_gradient(
    params: ModelParams, batch: PaddedBatch, pool: Optional[ThreadPoolExecutor], threads: int
) -> Tuple[float, np.ndarray]:
    if pool is None or batch.size < 2:
        return batch_loss_and_gradient(params, batch)

    workers = min(threads, batch.size)
    bounds = np.linspace(0, batch.size, workers + 1).astype(int)
    shards = [batch.subset(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    results = list(pool.map(lambda shard: batch_loss_and_gradient(params, shard), shards))

    # 合算順は固定
    loss = 0.0
    grad = np.zeros_like(params.flat)
    for shard_loss, shard_grad in results:
        loss += shard_loss
        grad += shard_grad
    return loss, grad


def train(
    examples: Sequence[SkipGramExample],
    config: TrainConfig,
    model_config: ModelConfig,
    normalization: NormalizationStats,
    checkpoint_path: Optional[str] = None,
    log_file: Optional[str] = None,
    resume: Optional[TrainState] = None,
    quiet: bool = False,
) -> TrainState:
    """
    SGD 学習

    Args:
        examples: 正規化済みの skip-gram 学習例
        config: 学習設定
        model_config: モデル構成（input_dim / window / precision は学習例と config に合わせる）
        normalization: チェックポイントに保存する正規化統計
        checkpoint_path: checkpoint_every エポックごとと最終エポックで保存
        log_file: エポック行の追記先
        resume: 途中から再開する TrainState

    Returns:
        TrainState: 最終状態
    """
    config.validate()
    config = config.effective()
    if not examples:
        raise InputError("training needs at least one skip-gram example")
    if config.faithful:
        model_config = replace(model_config, loss_normalization="raw_sum")
    model_config = replace(
        model_config,
        input_dim=examples[0].center.features.d,
        window=config.k,
        precision=config.precision,
    )
    model_config.validate()

    if resume is not None:
        if resume.params.config.num_params != model_config.num_params:
            raise ConfigError("resume checkpoint does not match the configured model")
        params = ModelParams(model_config, resume.params.flat.astype(model_config.dtype))
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        history = list(resume.loss_history)
        running_loss = resume.running_loss
        logger.info(f"✅ resuming from epoch {start_epoch}")
    else:
        params = init_params(model_config, config.seed)
        rng = np.random.default_rng([config.seed, 1])
        start_epoch = 0
        history = []
        running_loss = 0.0

    state = TrainState(
        params=params,
        normalization=normalization,
        epoch=start_epoch,
        running_loss=running_loss,
        rng_state=rng.bit_generator.state,
        config=config,
        loss_history=history,
    )

    threads = 1 if config.deterministic else config.threads
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    logger.info(
        f"training {len(examples)} examples, {model_config.num_params} parameters, "
        f"epochs {start_epoch + 1}..{config.epochs}, threads {threads}"
    )

    try:
        for epoch in tqdm(range(start_epoch + 1, config.epochs + 1), desc="epochs", unit="epoch", disable=quiet, file=sys.stderr):
            started = time.perf_counter()
            total = 0.0
            for batch in batch_examples(examples, config.batch_size, rng):
                loss, grad = _batch_gradient(params, batch, pool, threads)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss {loss} at epoch {epoch}")
                grad, _ = clip_gradient(grad / batch.size, config.grad_clip_norm)
                params.flat -= config.learning_rate * grad
                total += loss

            mean_loss = total / len(examples)
            if not np.isfinite(mean_loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            wall = time.perf_counter() - started
            history.append(mean_loss)
            state.epoch = epoch
            state.running_loss = mean_loss
            state.rng_state = rng.bit_generator.state
            _emit_epoch_line(epoch, mean_loss, wall, log_file)

            if checkpoint_path and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
                save_checkpoint(state, checkpoint_path)
    except NumericalError as e:
        logger.error(f"❌ training aborted: {e}")
        if checkpoint_path and os.path.exists(checkpoint_path):
            logger.error(f"last good checkpoint kept at {checkpoint_path}")
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    return state


def _emit_epoch_line(epoch: int, mean_loss: float, wall: float, log_file: Optional[str]):
    line = f"{epoch}\t{mean_loss:.9g}\t{wall:.3f}"
    tqdm.write(line, file=sys.stdout)
    if log_file:
        with open(log_file, "a", encoding="utf-8") as f:
            f.write(line + "\n")


def _encode_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode_value(raw: str, default):
    if raw == "none":
        return None
    if isinstance(default, bool):
        return raw == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _config_block(model_config: ModelConfig, train_config: TrainConfig) -> bytes:
    lines = [f"{f.name}={_encode_value(getattr(model_config, f.name))}" for f in fields(ModelConfig)]
    lines += [
        f"{f.name}={_encode_value(getattr(train_config, f.name))}"
        for f in fields(TrainConfig)
        if f.name != "precision"
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(block: bytes, path) -> Tuple[ModelConfig, TrainConfig]:
    try:
        entries = dict(line.split("=", 1) for line in block.decode("utf-8").splitlines() if line)
    except (UnicodeDecodeError, ValueError) as e:
        raise CorruptFileError(f"{path}: unreadable config block") from e

    def build(cls, **extra):
        values = {}
        for f in fields(cls):
            if f.name in entries:
                values[f.name] = _decode_value(entries[f.name], f.default)
        values.update(extra)
        return cls(**values)

    try:
        model_config = build(ModelConfig)
        train_config = build(TrainConfig, precision=model_config.precision)
    except ValueError as e:
        raise FormatError(f"{path}: invalid config block: {e}") from e
    return model_config, train_config


def save_checkpoint(state: TrainState, path: str):
    """A2VC 形式で保存（途中で失敗しても前回のファイルは残る）"""
    params = state.params
    precision = params.config.precision
    block = _config_block(params.config, state.config)
    rng_json = json.dumps(state.rng_state).encode("utf-8")
    mean = np.ascontiguousarray(state.normalization.mean, dtype="<f8")
    std = np.ascontiguousarray(state.normalization.std, dtype="<f8")

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(block)))
        f.write(block)
        f.write(struct.pack("<Id", state.epoch, state.running_loss))
        f.write(struct.pack("<I", len(mean)))
        f.write(mean.tobytes())
        f.write(std.tobytes())
        f.write(struct.pack("<Q", params.flat.size))
        f.write(params.flat.astype(_PARAM_DTYPES[precision]).tobytes())
        f.write(struct.pack("<I", len(rng_json)))
        f.write(rng_json)
    os.replace(tmp_path, path)
    logger.info(f"✅ checkpoint written: {path} (epoch {state.epoch})")


class _Reader:
    def __init__(self, f, path):
        self.f = f
        self.path = path

    def take(self, n: int) -> bytes:
        data = self.f.read(n)
        if len(data) < n:
            raise CorruptFileError(f"{self.path}: truncated checkpoint")
        return data

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str, precision: Optional[str] = None) -> TrainState:
    """
    A2VC 読み込み

    Args:
        precision: 指定すると保存時の精度から明示的に変換する（ログに残す）
    """
    with open(path, "rb") as f:
        reader = _Reader(f, path)
        magic = f.read(len(CHECKPOINT_MAGIC))
        if len(magic) < len(CHECKPOINT_MAGIC):
            raise CorruptFileError(f"{path}: truncated checkpoint header")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        version, block_len = reader.unpack("<II")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        model_config, train_config = _parse_config_block(reader.take(block_len), path)

        epoch, running_loss = reader.unpack("<Id")
        (dim,) = reader.unpack("<I")
        mean = np.frombuffer(reader.take(8 * dim), dtype="<f8").astype(np.float64)
        std = np.frombuffer(reader.take(8 * dim), dtype="<f8").astype(np.float64)

        (count,) = reader.unpack("<Q")
        if count != model_config.num_params:
            raise FormatError(f"{path}: {count} parameters, config implies {model_config.num_params}")
        dtype = np.dtype(_PARAM_DTYPES[model_config.precision])
        flat = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).astype(model_config.dtype)

        (rng_len,) = reader.unpack("<I")
        try:
            rng_state = json.loads(reader.take(rng_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"{path}: unreadable rng state") from e

    params = ModelParams(model_config, flat)
    if precision is not None and precision != model_config.precision:
        logger.info(f"checkpoint parameters converted {model_config.precision} → {precision}")
        params = params.astype(precision)

    return TrainState(
        params=params,
        normalization=NormalizationStats(mean, std),
        epoch=epoch,
        running_loss=running_loss,
        rng_state=rng_state,
        config=train_config,
    )

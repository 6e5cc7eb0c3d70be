"""
音響特徴量抽出（MFCC）
モノラル PCM 音声 → 10ms ごとの 13 次元 MFCC フレーム列
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy.io import wavfile

from errors import ConfigError, CorruptFileError, FormatError, InputError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"A2VF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive: {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    """MFCC 設定（値はすべて RunConfig から上書き可能）"""

    frame_length: float = 0.025
    frame_hop: float = 0.010
    num_coefficients: int = 13
    num_mel_filters: int = 26
    pre_emphasis: float = 0.97
    fft_size: Optional[int] = None  # None = フレーム長以上の最小の 2 のべき
    log_floor: float = 1e-10

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length * sample_rate))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_hop * sample_rate))

    def resolved_fft_size(self, sample_rate: int) -> int:
        if self.fft_size:
            return self.fft_size
        frame = self.frame_samples(sample_rate)
        return 1 << max(0, (frame - 1).bit_length())

    def validate(self, sample_rate: int):
        if not 0 < self.num_coefficients <= self.num_mel_filters:
            raise ConfigError(
                f"num_coefficients must be in (0, num_mel_filters]: "
                f"{self.num_coefficients} / {self.num_mel_filters}"
            )
        if self.frame_hop <= 0 or self.frame_length <= 0:
            raise ConfigError("frame_length and frame_hop must be positive")
        if self.frame_hop > self.frame_length:
            raise ConfigError(f"frame_hop {self.frame_hop} exceeds frame_length {self.frame_length}")
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive: {self.log_floor}")
        if self.hop_samples(sample_rate) < 1:
            raise ConfigError(f"frame_hop is shorter than one sample at {sample_rate} Hz")
        n_fft = self.resolved_fft_size(sample_rate)
        if n_fft & (n_fft - 1):
            raise ConfigError(f"fft_size must be a power of two: {n_fft}")
        if n_fft < self.frame_samples(sample_rate):
            raise ConfigError(f"fft_size {n_fft} is shorter than one frame")


@dataclass(frozen=True)
class FeatureSequence:
    """T×d の特徴量行列"""

    frames: np.ndarray

    def __post_init__(self):
        frames = self.frames
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InputError(f"feature matrix must be T×d with T >= 1, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("feature matrix contains non-finite values")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


def mel_from_hz(f):
    """Hz → mel（2595·log10(1 + f/700)）"""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise InputError(f"frequency must be non-negative: {f}")
    mel = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(mel) if mel.ndim == 0 else mel


def hz_from_mel(m):
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(config: MfccConfig, sample_rate: int) -> np.ndarray:
    """
    三角フィルタバンクを作成

    Args:
        config: MFCC 設定
        sample_rate: サンプリング周波数 (Hz)

    Returns:
        np.ndarray: num_mel_filters × (fft_size/2 + 1)
    """
    config.validate(sample_rate)
    n_fft = config.resolved_fft_size(sample_rate)
    n_filters = config.num_mel_filters

    mels = np.linspace(0.0, mel_from_hz(sample_rate / 2.0), n_filters + 2)
    bins = np.floor((n_fft + 1) * hz_from_mel(mels) / sample_rate).astype(int)

    if np.any(np.diff(bins) <= 0):
        raise ConfigError(
            f"{n_filters} mel filters are too many for fft_size {n_fft} at {sample_rate} Hz "
            "(a filter would have zero width)"
        )

    bank = np.zeros((n_filters, n_fft // 2 + 1))
    for m in range(n_filters):
        left, center, right = bins[m:m + 3]
        bank[m, left:center] = (np.arange(left, center) - left) / (center - left)
        bank[m, center:right + 1] = (right - np.arange(center, right + 1)) / (right - center)
    return bank


def frame_count(num_samples: int, frame_len: int, hop: int) -> int:
    return 1 + (num_samples - frame_len) // hop


def extract_mfcc(w: Waveform, config: MfccConfig) -> FeatureSequence:
    """
    MFCC 抽出
    プリエンファシス → フレーム分割 → ハミング窓 → パワースペクトル
    → メルフィルタバンク → 対数 → 直交 DCT-II
    """
    config.validate(w.sample_rate)
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InputError(f"waveform must be mono, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise InputError("waveform contains non-finite samples")

    frame_len = config.frame_samples(w.sample_rate)
    hop = config.hop_samples(w.sample_rate)
    if len(samples) < frame_len:
        raise InputError(
            f"signal of {len(samples)} samples is shorter than one frame ({frame_len} samples)"
        )
    n_fft = config.resolved_fft_size(w.sample_rate)

    emphasized = np.empty_like(samples)
    emphasized[0] = samples[0]
    emphasized[1:] = samples[1:] - config.pre_emphasis * samples[:-1]

    n_frames = frame_count(len(samples), frame_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, frame_len)[::hop][:n_frames]
    frames = frames * np.hamming(frame_len)

    power = np.abs(sp_fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft
    energies = power @ mel_filterbank(config, w.sample_rate).T
    log_energies = np.log(np.maximum(energies, config.log_floor))

    cepstra = sp_fft.dct(log_energies, type=2, norm="ortho", axis=1)
    return FeatureSequence(cepstra[:, :config.num_coefficients])


def read_wav(path) -> Waveform:
    """
    WAV 読み込み（モノラル PCM16 / float32 のみ）
    多チャンネルはダウンミックスせずエラーにする
    """
    try:
        sample_rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as e:
        raise InputError(f"cannot read WAV {path}: {e}") from e

    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype} (PCM16 or float32 only)")
    if len(samples) == 0:
        raise InputError(f"{path}: no samples")
    return Waveform(samples, int(sample_rate))


def write_feature_cache(path, features: FeatureSequence):
    """A2VF 形式で保存（一時ファイル経由で置き換え）"""
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, features.T, features.d))
        f.write(frames.tobytes())
    os.replace(tmp_path, path)


def _read_header(f, path) -> Tuple[int, int]:
    header = f.read(_FEATURE_HEADER.size)
    if len(header) < _FEATURE_HEADER.size:
        raise CorruptFileError(f"{path}: truncated feature cache header")
    magic, version, n_frames, dim = _FEATURE_HEADER.unpack(header)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature cache (magic {magic!r})")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature cache version {version}")
    return n_frames, dim


def read_cache_header(path) -> Tuple[int, int]:
    """(T, d) のみ読む"""
    with open(path, "rb") as f:
        return _read_header(f, path)


def read_feature_cache(path) -> FeatureSequence:
    with open(path, "rb") as f:
        n_frames, dim = _read_header(f, path)
        payload = f.read()
    expected = n_frames * dim * 4
    if len(payload) < expected:
        raise CorruptFileError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    frames = np.frombuffer(payload[:expected], dtype="<f4").reshape(n_frames, dim)
    return FeatureSequence(frames.astype(np.float64))

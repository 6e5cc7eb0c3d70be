"""
実行設定（RunConfig）
優先順位: 既定値 < 設定ファイル (--config) < 環境変数 AUDIO2VEC_<KEY> < コマンドライン引数
"""

import logging
import os
from collections import OrderedDict
from typing import Any, Dict, List, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from corpus import DEFAULT_MAX_SEGMENT_FRAMES
from dsp_features import MfccConfig
from errors import ConfigError
from neuralnet import LOSS_NORMALIZATIONS, ModelConfig
from trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "AUDIO2VEC_"

DEFAULTS: "OrderedDict[str, Any]" = OrderedDict([
    ("frame_length", 0.025),
    ("frame_hop", 0.010),
    ("num_coefficients", 13),
    ("num_mel_filters", 26),
    ("pre_emphasis", 0.97),
    ("fft_size", 0),
    ("log_floor", 1e-10),
    ("max_segment_frames", DEFAULT_MAX_SEGMENT_FRAMES),
    ("hidden_size", 300),
    ("encoder_layers", 3),
    ("teacher_forcing", True),
    ("offset_conditioning", False),
    ("loss_normalization", "per_frame"),
    ("learning_rate", 1e-3),
    ("epochs", 500),
    ("k", 5),
    ("batch_size", 32),
    ("grad_clip_norm", 5.0),
    ("seed", 0),
    ("precision", "f32"),
    ("checkpoint_every", 25),
    ("threads", 1),
    ("deterministic", False),
    ("faithful", False),
])

_NULLABLE = {"grad_clip_norm"}
# 設定キーではない AUDIO2VEC_* 変数（テスト用データの場所など）
_NON_CONFIG_ENV = {"slow_tests", "glove_path", "benchmark_manifest"}
_CHOICES = {"loss_normalization": LOSS_NORMALIZATIONS, "precision": ("f32", "f64")}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def coerce(key: str, value: Any) -> Any:
    """既定値の型に合わせて変換"""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    default = DEFAULTS[key]

    if isinstance(value, str):
        value = value.strip()
        if key in _NULLABLE and value.lower() in ("none", ""):
            return None
        try:
            if isinstance(default, bool):
                lowered = value.lower()
                if lowered in _TRUE:
                    return True
                if lowered in _FALSE:
                    return False
                raise ValueError(value)
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}")
    elif value is None and key in _NULLABLE:
        return None
    elif isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"invalid value for {key}: {value!r}")
    elif isinstance(default, float) and isinstance(value, (int, float)):
        value = float(value)

    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key} must be one of {_CHOICES[key]}, got {value!r}")
    return value


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """全サブコマンド共通の設定"""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values: Dict[str, Any] = OrderedDict(DEFAULTS)
        self.sources: Dict[str, str] = {key: "default" for key in DEFAULTS}
        if values:
            self.update(values, "code")

    def update(self, values: Mapping[str, Any], source: str):
        for key, value in values.items():
            self.values[key] = coerce(key, value)
            self.sources[key] = source

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def load(
        cls,
        config_path: Optional[str] = None,
        environ: Optional[Mapping[str, str]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        """
        全ての層を重ねた設定を作る

        Args:
            config_path: key = value 形式の設定ファイル
            environ: 環境変数（省略時は .env を読み込んだ os.environ）
            overrides: コマンドライン引数（None の値は無視）
        """
        config = cls()
        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            file_values = dotenv_values(config_path, interpolate=False)
            config.update({k: ("" if v is None else v) for k, v in file_values.items()}, config_path)

        if environ is None:
            load_dotenv()
            environ = os.environ
        env_values = {
            name[len(ENV_PREFIX):].lower(): value
            for name, value in environ.items()
            if name.startswith(ENV_PREFIX) and name[len(ENV_PREFIX):].lower() not in _NON_CONFIG_ENV
        }
        config.update(env_values, "environment")

        if overrides:
            config.update({k: v for k, v in overrides.items() if v is not None}, "command line")
        config.apply_faithful()
        return config

    def apply_faithful(self):
        if self.values["faithful"]:
            self.values["grad_clip_norm"] = None
            self.values["loss_normalization"] = "raw_sum"
            self.sources["grad_clip_norm"] = self.sources["loss_normalization"] = "faithful"

    def resolved_lines(self) -> List[str]:
        """そのまま --config に渡せる形式"""
        return [f"{key} = {_format(value)}" for key, value in self.values.items()]

    def log_resolved(self, subcommand: str):
        logger.info(f"resolved config for '{subcommand}':")
        for line in self.resolved_lines():
            logger.info(f"  {line}")

    def mfcc_config(self) -> MfccConfig:
        v = self.values
        return MfccConfig(
            frame_length=v["frame_length"],
            frame_hop=v["frame_hop"],
            num_coefficients=v["num_coefficients"],
            num_mel_filters=v["num_mel_filters"],
            pre_emphasis=v["pre_emphasis"],
            fft_size=v["fft_size"] or None,
            log_floor=v["log_floor"],
        )

    def model_config(self, input_dim: Optional[int] = None) -> ModelConfig:
        v = self.values
        config = ModelConfig(
            input_dim=input_dim or v["num_coefficients"],
            hidden_size=v["hidden_size"],
            encoder_layers=v["encoder_layers"],
            teacher_forcing=v["teacher_forcing"],
            loss_normalization=v["loss_normalization"],
            offset_conditioning=v["offset_conditioning"],
            window=v["k"],
            precision=v["precision"],
        )
        config.validate()
        return config

    def train_config(self) -> TrainConfig:
        v = self.values
        config = TrainConfig(
            learning_rate=v["learning_rate"],
            epochs=v["epochs"],
            k=v["k"],
            batch_size=v["batch_size"],
            grad_clip_norm=v["grad_clip_norm"],
            seed=v["seed"],
            precision=v["precision"],
            checkpoint_every=v["checkpoint_every"],
            threads=v["threads"],
            deterministic=v["deterministic"],
            faithful=v["faithful"],
        )
        config.validate()
        return config

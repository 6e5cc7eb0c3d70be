"""
audio2vec 例外定義
ライブラリ側は例外を送出し、終了コードへの変換は main.py のみで行う
"""

from typing import Optional


class Audio2VecError(Exception):
    """全例外の基底クラス"""

    exit_code = 1


class ConfigError(Audio2VecError, ValueError):
    """設定値エラー（未知のキー・範囲外の値など）"""


class InputError(Audio2VecError, ValueError):
    """入力データエラー（信号・WAV・形状の契約違反など）"""


class ParseError(InputError):
    """テキスト行の解析エラー"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(ParseError):
    """解析はできたが値が不正（end <= start、重複区間など）"""


class FormatError(Audio2VecError, ValueError):
    """ファイル形式エラー（マジック・バージョン不一致、ベクトルファイル不整合）"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CorruptFileError(FormatError):
    """途中で切れたファイル"""


class NumericalError(Audio2VecError, ArithmeticError):
    """数値計算の失敗（NaN/Inf、未定義の相関など）"""

    exit_code = 2


class UndefinedSimilarityError(NumericalError):
    """ゼロベクトルのコサイン類似度"""


class UndefinedCorrelationError(NumericalError):
    """全順位が同一のリストに対するスピアマン相関"""


class InsufficientDataError(NumericalError):
    """評価可能なペアが 2 未満"""

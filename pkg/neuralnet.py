"""
Seq2seq skip-gram モデル本体
- 多層 LSTM エンコーダ（最終時刻の最上位層 h = セグメント埋め込み z）
- 全ターゲット共通の単層 LSTM デコーダ＋線形射影
- 二乗誤差損失と BPTT による厳密な勾配

パラメータは 1 本のフラット配列を持ち、各行列はそのビューになっている。
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from corpus import SkipGramExample
from dsp_features import FeatureSequence
from errors import ConfigError, InputError, NumericalError

logger = logging.getLogger(__name__)

LOSS_NORMALIZATIONS = ("per_frame", "raw_sum")
PRECISIONS = {"f32": np.float32, "f64": np.float64}
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """モデル構成と学習目的関数の設定"""

    input_dim: int = 13
    hidden_size: int = 300
    encoder_layers: int = 3
    teacher_forcing: bool = True
    loss_normalization: str = "per_frame"
    offset_conditioning: bool = False
    window: int = 5
    precision: str = "f64"

    def validate(self):
        if self.input_dim < 1 or self.hidden_size < 1 or self.encoder_layers < 1:
            raise ConfigError(
                f"input_dim, hidden_size and encoder_layers must be >= 1: "
                f"{self.input_dim}, {self.hidden_size}, {self.encoder_layers}"
            )
        if self.loss_normalization not in LOSS_NORMALIZATIONS:
            raise ConfigError(f"loss_normalization must be one of {LOSS_NORMALIZATIONS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1: {self.window}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """フラット配列上の並び順（固定）"""
        h, d = self.hidden_size, self.input_dim
        shapes = []
        for layer in range(self.encoder_layers):
            d_in = d if layer == 0 else h
            shapes += [
                (f"encoder[{layer}].W_input", (4 * h, d_in)),
                (f"encoder[{layer}].W_recurrent", (4 * h, h)),
                (f"encoder[{layer}].bias", (4 * h,)),
            ]
        shapes += [
            ("decoder.W_input", (4 * h, d)),
            ("decoder.W_recurrent", (4 * h, h)),
            ("decoder.bias", (4 * h,)),
            ("projection.W", (d, h)),
            ("projection.bias", (d,)),
        ]
        if self.offset_conditioning:
            shapes.append(("offset_embedding", (2 * self.window, h)))
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.shapes())


@dataclass(frozen=True)
class LstmLayerParams:
    W_input: np.ndarray
    W_recurrent: np.ndarray
    bias: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W_recurrent.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_input.shape[1]


@dataclass(frozen=True)
class HiddenState:
    h: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class SegmentEmbedding:
    z: np.ndarray


@dataclass(frozen=True)
class DecodedSequence:
    frames: np.ndarray


class ModelParams:
    """全パラメータ（flat がフラットビュー、各行列はそのビュー）"""

    def __init__(self, config: ModelConfig, flat: np.ndarray):
        if flat.ndim != 1 or flat.size != config.num_params:
            raise InputError(f"flat parameter vector of size {flat.size}, expected {config.num_params}")
        self.config = config
        self.flat = flat
        self._names: List[Tuple[str, int, Tuple[int, ...]]] = []

        views: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in config.shapes():
            size = int(np.prod(shape))
            views[name] = flat[offset:offset + size].reshape(shape)
            self._names.append((name, offset, shape))
            offset += size

        self.encoder_layers = [
            LstmLayerParams(views[f"encoder[{i}].W_input"], views[f"encoder[{i}].W_recurrent"], views[f"encoder[{i}].bias"])
            for i in range(config.encoder_layers)
        ]
        self.decoder = LstmLayerParams(views["decoder.W_input"], views["decoder.W_recurrent"], views["decoder.bias"])
        self.projection_W = views["projection.W"]
        self.projection_b = views["projection.bias"]
        self.offset_embedding = views.get("offset_embedding")

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=None) -> "ModelParams":
        return cls(config, np.zeros(config.num_params, dtype=dtype or config.dtype))

    @classmethod
    def unflatten(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        return cls(config, np.array(flat, dtype=config.dtype, copy=True))

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def astype(self, precision: str) -> "ModelParams":
        config = replace(self.config, precision=precision)
        return ModelParams(config, self.flat.astype(config.dtype))

    @property
    def dtype(self):
        return self.flat.dtype

    def locate(self, index: int) -> str:
        """フラット添字 → 'decoder.W_recurrent[3, 7]' 形式"""
        for name, offset, shape in self._names:
            size = int(np.prod(shape))
            if offset <= index < offset + size:
                position = np.unravel_index(index - offset, shape)
                return f"{name}[{', '.join(str(int(p)) for p in position)}]"
        raise IndexError(index)


def init_params(config: ModelConfig, rng_seed: int) -> ModelParams:
    """
    重み ~ U(-r, r), r = 1/√fan_in。バイアスは 0（忘却ゲートのみ 1.0）。
    オフセット埋め込みは 0 で開始する。
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    params = ModelParams.zeros(config)
    h = config.hidden_size

    def uniform(W):
        r = 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-r, r, size=W.shape)

    for layer in params.encoder_layers + [params.decoder]:
        uniform(layer.W_input)
        uniform(layer.W_recurrent)
        layer.bias[h:2 * h] = FORGET_BIAS
    uniform(params.projection_W)
    return params


def _sigmoid(x):
    # tanh 表現は大きな |x| でもオーバーフローしない
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _cell_forward(layer: LstmLayerParams, x, h_prev, c_prev):
    H = layer.hidden_size
    a = x @ layer.W_input.T + h_prev @ layer.W_recurrent.T + layer.bias
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = _sigmoid(a[:, 3 * H:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (x, h_prev, c_prev, i, f, g, o, tanh_c)


def _cell_backward(layer: LstmLayerParams, grad: LstmLayerParams, cache, dh, dc):
    x, h_prev, c_prev, i, f, g, o, tanh_c = cache
    do = dh * tanh_c
    dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
    da = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    # 勾配配列はフラット勾配のビューなのでその場で加算する
    grad.W_input[...] += da.T @ x
    grad.W_recurrent[...] += da.T @ h_prev
    grad.bias[...] += da.sum(axis=0)
    return da @ layer.W_input, da @ layer.W_recurrent, dc * f


def _masked_step(layer, x, h, c, m):
    """m = 0 の行は状態をそのまま持ち越す"""
    h_new, c_new, cache = _cell_forward(layer, x, h, c)
    return m * h_new + (1.0 - m) * h, m * c_new + (1.0 - m) * c, cache


def _masked_step_backward(layer, grad, cache, dh, dc, m):
    dx, dh_prev, dc_prev = _cell_backward(layer, grad, cache, m * dh, m * dc)
    return dx, dh_prev + (1.0 - m) * dh, dc_prev + (1.0 - m) * dc


def lstm_cell_step(params: LstmLayerParams, x: np.ndarray, prev: HiddenState) -> HiddenState:
    """LSTM 1 ステップ（ゲート順: i, f, g, o）"""
    x = np.asarray(x)
    if x.shape != (params.input_size,):
        raise InputError(f"input of shape {x.shape}, expected ({params.input_size},)")
    if prev.h.shape != (params.hidden_size,) or prev.c.shape != (params.hidden_size,):
        raise InputError(f"hidden state shapes {prev.h.shape}/{prev.c.shape}, expected ({params.hidden_size},)")
    h, c, _ = _cell_forward(params, x[None, :], prev.h[None, :], prev.c[None, :])
    return HiddenState(h[0], c[0])


@dataclass
class PaddedBatch:
    """
    マスク付きバッチ
    パディング部分のフレームは 0、マスクも 0
    """

    center: np.ndarray          # B × T_max × d
    center_mask: np.ndarray     # B × T_max
    center_lengths: np.ndarray  # B
    targets: np.ndarray         # P × T'_max × d（全学習例のターゲットを連結）
    target_mask: np.ndarray     # P × T'_max
    target_lengths: np.ndarray  # P
    target_owner: np.ndarray    # P（所属する学習例の番号）
    target_offsets: np.ndarray  # P

    @property
    def size(self) -> int:
        return len(self.center_lengths)

    @property
    def padding_frames(self) -> int:
        return int(self.center_mask.size - self.center_mask.sum() + self.target_mask.size - self.target_mask.sum())

    def subset(self, start: int, stop: int) -> "PaddedBatch":
        """学習例 [start, stop) だけを取り出す（パディング長はそのまま）"""
        selected = (self.target_owner >= start) & (self.target_owner < stop)
        return PaddedBatch(
            center=self.center[start:stop],
            center_mask=self.center_mask[start:stop],
            center_lengths=self.center_lengths[start:stop],
            targets=self.targets[selected],
            target_mask=self.target_mask[selected],
            target_lengths=self.target_lengths[selected],
            target_owner=self.target_owner[selected] - start,
            target_offsets=self.target_offsets[selected],
        )


def _pad(sequences: Sequence[np.ndarray], dim: int):
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    t_max = int(lengths.max()) if len(lengths) else 0
    frames = np.zeros((len(sequences), t_max, dim))
    mask = np.zeros((len(sequences), t_max))
    for n, seq in enumerate(sequences):
        frames[n, :len(seq)] = seq
        mask[n, :len(seq)] = 1.0
    return frames, mask, lengths


def pad_examples(examples: Sequence[SkipGramExample]) -> PaddedBatch:
    if not examples:
        raise InputError("cannot pad an empty batch")
    dim = examples[0].center.features.d
    for example in examples:
        if not example.targets:
            raise InputError(f"example centred on {example.center.utterance_id}#{example.center.segment_index} has no targets")
        for _, segment in ((0, example.center),) + tuple(example.targets):
            if segment.features.d != dim:
                raise InputError(f"feature dimension {segment.features.d} != {dim}")

    center, center_mask, center_lengths = _pad([e.center.features.frames for e in examples], dim)
    target_frames, owners, offsets = [], [], []
    for n, example in enumerate(examples):
        for offset, segment in example.targets:
            target_frames.append(segment.features.frames)
            owners.append(n)
            offsets.append(offset)
    targets, target_mask, target_lengths = _pad(target_frames, dim)
    return PaddedBatch(
        center=center,
        center_mask=center_mask,
        center_lengths=center_lengths,
        targets=targets,
        target_mask=target_mask,
        target_lengths=target_lengths,
        target_owner=np.array(owners, dtype=np.int64),
        target_offsets=np.array(offsets, dtype=np.int64),
    )


def _check_input_dim(params: ModelParams, dim: int):
    if dim != params.config.input_dim:
        raise InputError(f"feature dimension {dim} != model input dimension {params.config.input_dim}")


def _encoder_forward(params: ModelParams, X: np.ndarray, M: np.ndarray):
    """X: T × B × d（時間軸先頭）、M: T × B"""
    T, B, _ = X.shape
    H = params.config.hidden_size
    layer_input = X
    caches = []
    h = np.zeros((B, H), dtype=params.dtype)
    for layer in params.encoder_layers:
        h = np.zeros((B, H), dtype=params.dtype)
        c = np.zeros((B, H), dtype=params.dtype)
        outputs = np.empty((T, B, H), dtype=params.dtype)
        steps = []
        for t in range(T):
            h, c, cache = _masked_step(layer, layer_input[t], h, c, M[t][:, None])
            outputs[t] = h
            steps.append(cache)
        caches.append(steps)
        layer_input = outputs
    return h, caches


def _encoder_backward(params: ModelParams, grads: ModelParams, caches, M: np.ndarray, dz: np.ndarray):
    d_above = None
    for index in reversed(range(len(params.encoder_layers))):
        layer, grad = params.encoder_layers[index], grads.encoder_layers[index]
        steps = caches[index]
        dh = dz if d_above is None else np.zeros_like(dz)
        dc = np.zeros_like(dz)
        d_input = np.empty((len(steps), dz.shape[0], layer.input_size), dtype=dz.dtype)
        for t in reversed(range(len(steps))):
            if d_above is not None:
                dh = dh + d_above[t]
            d_input[t], dh, dc = _masked_step_backward(layer, grad, steps[t], dh, dc, M[t][:, None])
        d_above = d_input


def _offset_index(offsets: np.ndarray, window: int) -> np.ndarray:
    if np.any((offsets == 0) | (np.abs(offsets) > window)):
        raise InputError(f"target offsets {offsets.tolist()} outside ±{window}")
    return np.where(offsets < 0, offsets + window, offsets + window - 1)


def _decoder_initial_state(params: ModelParams, z: np.ndarray, owners: np.ndarray, offsets: np.ndarray):
    h0 = z[owners]
    if params.offset_embedding is not None:
        h0 = h0 + params.offset_embedding[_offset_index(offsets, params.config.window)]
    return h0


def _decoder_forward(params: ModelParams, h0: np.ndarray, Y: np.ndarray, M: np.ndarray, teacher_forcing: bool):
    """Y: T' × P × d のターゲット。先頭ステップの入力はゼロフレーム。"""
    Tp, P, d = Y.shape
    H = params.config.hidden_size
    layer = params.decoder
    h, c = h0, np.zeros((P, H), dtype=params.dtype)
    x = np.zeros((P, d), dtype=params.dtype)
    outputs = np.empty((Tp, P, d), dtype=params.dtype)
    hidden = np.empty((Tp, P, H), dtype=params.dtype)
    steps = []
    for t in range(Tp):
        if t > 0:
            x = Y[t - 1] if teacher_forcing else outputs[t - 1]
        h, c, cache = _masked_step(layer, x, h, c, M[t][:, None])
        hidden[t] = h
        outputs[t] = h @ params.projection_W.T + params.projection_b
        steps.append(cache)
    return outputs, hidden, steps


def _decoder_backward(params, grads, hidden, steps, M, d_outputs, teacher_forcing):
    P, H = hidden.shape[1], hidden.shape[2]
    dh = np.zeros((P, H), dtype=hidden.dtype)
    dc = np.zeros((P, H), dtype=hidden.dtype)
    d_fed = 0.0
    for t in reversed(range(len(steps))):
        dy = d_outputs[t] + d_fed
        grads.projection_W += dy.T @ hidden[t]
        grads.projection_b += dy.sum(axis=0)
        dh = dh + dy @ params.projection_W
        dx, dh, dc = _masked_step_backward(params.decoder, grads.decoder, steps[t], dh, dc, M[t][:, None])
        # 自己回帰時は入力 x_t = y_{t-1}
        d_fed = 0.0 if teacher_forcing else dx
    return dh


@dataclass
class _Forward:
    z: np.ndarray
    encoder_caches: list
    outputs: np.ndarray
    hidden: np.ndarray
    decoder_steps: list
    target_losses: np.ndarray
    example_losses: np.ndarray
    d_outputs: np.ndarray


def _forward(params: ModelParams, batch: PaddedBatch) -> _Forward:
    config = params.config
    _check_input_dim(params, batch.center.shape[2])
    dtype = params.dtype

    X = np.ascontiguousarray(batch.center.transpose(1, 0, 2), dtype=dtype)
    MX = np.ascontiguousarray(batch.center_mask.T, dtype=dtype)
    Y = np.ascontiguousarray(batch.targets.transpose(1, 0, 2), dtype=dtype)
    MY = np.ascontiguousarray(batch.target_mask.T, dtype=dtype)

    z, encoder_caches = _encoder_forward(params, X, MX)
    h0 = _decoder_initial_state(params, z, batch.target_owner, batch.target_offsets)
    outputs, hidden, decoder_steps = _decoder_forward(params, h0, Y, MY, config.teacher_forcing)

    residual = (Y - outputs) * MY[:, :, None]
    if config.loss_normalization == "per_frame":
        weights = 1.0 / (batch.target_lengths.astype(dtype) * config.input_dim)
    else:
        weights = np.ones(len(batch.target_lengths), dtype=dtype)
    weights = weights.astype(dtype)
    target_losses = weights * (residual * residual).sum(axis=(0, 2))
    example_losses = np.zeros(batch.size, dtype=dtype)
    np.add.at(example_losses, batch.target_owner, target_losses)
    d_outputs = -2.0 * weights[None, :, None] * residual

    return _Forward(z, encoder_caches, outputs, hidden, decoder_steps, target_losses, example_losses, d_outputs)


def batch_loss(params: ModelParams, batch: PaddedBatch) -> Tuple[float, np.ndarray]:
    """(学習例ごとの損失の総和, 学習例ごとの損失)"""
    fwd = _forward(params, batch)
    return float(fwd.example_losses.sum()), fwd.example_losses


def batch_loss_and_gradient(params: ModelParams, batch: PaddedBatch) -> Tuple[float, np.ndarray]:
    """
    バッチ損失（学習例の総和）とその勾配

    Returns:
        (loss, flat gradient)
    """
    config = params.config
    fwd = _forward(params, batch)
    loss = float(fwd.example_losses.sum())
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")

    grads = ModelParams.zeros(config, dtype=params.dtype)
    MY = np.ascontiguousarray(batch.target_mask.T, dtype=params.dtype)
    dh0 = _decoder_backward(params, grads, fwd.hidden, fwd.decoder_steps, MY, fwd.d_outputs, config.teacher_forcing)

    if grads.offset_embedding is not None:
        np.add.at(grads.offset_embedding, _offset_index(batch.target_offsets, config.window), dh0)
    # 全ターゲットからの勾配を z に合算
    dz = np.zeros_like(fwd.z)
    np.add.at(dz, batch.target_owner, dh0)

    MX = np.ascontiguousarray(batch.center_mask.T, dtype=params.dtype)
    _encoder_backward(params, grads, fwd.encoder_caches, MX, dz)

    bad = np.flatnonzero(~np.isfinite(grads.flat))
    if bad.size:
        raise NumericalError(f"non-finite gradient at {params.locate(int(bad[0]))}")
    return loss, grads.flat


def _frames_of(x: Union[FeatureSequence, np.ndarray]) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x)


def encode(params: ModelParams, x: Union[FeatureSequence, np.ndarray]) -> SegmentEmbedding:
    """セグメントを固定長ベクトル z に変換"""
    frames = _frames_of(x)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise InputError(f"expected a T×d feature matrix with T >= 1, got {frames.shape}")
    _check_input_dim(params, frames.shape[1])
    X = np.asarray(frames, dtype=params.dtype)[:, None, :]
    M = np.ones((frames.shape[0], 1), dtype=params.dtype)
    z, _ = _encoder_forward(params, X, M)
    return SegmentEmbedding(z[0])


def encode_many(params: ModelParams, sequences: Sequence[np.ndarray]) -> np.ndarray:
    """可変長セグメントをまとめてエンコード（N × h）"""
    if not sequences:
        return np.zeros((0, params.config.hidden_size), dtype=params.dtype)
    for frames in sequences:
        _check_input_dim(params, frames.shape[1])
    frames, mask, _ = _pad(sequences, params.config.input_dim)
    X = np.ascontiguousarray(frames.transpose(1, 0, 2), dtype=params.dtype)
    M = np.ascontiguousarray(mask.T, dtype=params.dtype)
    z, _ = _encoder_forward(params, X, M)
    return z


def decode_target(
    params: ModelParams,
    z: SegmentEmbedding,
    target: Union[FeatureSequence, np.ndarray],
    teacher_forcing: Optional[bool] = None,
    offset: Optional[int] = None,
) -> DecodedSequence:
    """
    z からターゲットと同じ長さのフレーム列を生成
    teacher_forcing が True なら 2 ステップ目以降の入力は正解の前フレーム
    """
    frames = _frames_of(target)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputError("decode target must have at least one frame")
    _check_input_dim(params, frames.shape[1])
    if z.z.shape != (params.config.hidden_size,):
        raise InputError(f"embedding of shape {z.z.shape}, expected ({params.config.hidden_size},)")
    if params.offset_embedding is not None and offset is None:
        raise InputError("offset is required when offset conditioning is enabled")
    if teacher_forcing is None:
        teacher_forcing = params.config.teacher_forcing

    h0 = _decoder_initial_state(
        params, np.asarray(z.z, dtype=params.dtype)[None, :], np.zeros(1, dtype=np.int64),
        np.array([offset if offset is not None else 1]),
    )
    Y = np.asarray(frames, dtype=params.dtype)[:, None, :]
    M = np.ones((frames.shape[0], 1), dtype=params.dtype)
    outputs, _, _ = _decoder_forward(params, h0, Y, M, teacher_forcing)
    return DecodedSequence(outputs[:, 0, :])


def skipgram_loss(params: ModelParams, example: SkipGramExample) -> Tuple[float, List[float]]:
    """(損失, ターゲットごとの損失)"""
    fwd = _forward(params, pad_examples([example]))
    return float(fwd.example_losses[0]), [float(v) for v in fwd.target_losses]


def skipgram_gradient(params: ModelParams, example: SkipGramExample) -> np.ndarray:
    """skipgram_loss のフラット勾配"""
    _, grad = batch_loss_and_gradient(params, pad_examples([example]))
    return grad


def _tanh_difference(p, m, d):
    """tanh(p) - tanh(m)。d = p - m を直接使うので桁落ちしない"""
    return np.sinh(d) / (np.cosh(p) * np.cosh(m))


def _sigmoid_difference(p, m, d):
    return 0.5 * _tanh_difference(0.5 * p, 0.5 * m, 0.5 * d)


def _cell_difference(layers, x, h, c):
    """
    θ+ と θ- の 2 つの LSTM ステップを並走させる
    各量は (plus, minus, plus - minus) の 3 つ組で、差は積の法則で直接伝播する
    """
    lp, lm, ld = layers
    H = lp.hidden_size
    ap = x[0] @ lp.W_input.T + h[0] @ lp.W_recurrent.T + lp.bias
    am = x[1] @ lm.W_input.T + h[1] @ lm.W_recurrent.T + lm.bias
    ad = (x[2] @ lp.W_input.T + x[1] @ ld.W_input.T
          + h[2] @ lp.W_recurrent.T + h[1] @ ld.W_recurrent.T + ld.bias)

    gates = []
    for k in range(4):
        part = slice(k * H, (k + 1) * H)
        p_, m_, d_ = ap[:, part], am[:, part], ad[:, part]
        if k == 2:
            gates.append((np.tanh(p_), np.tanh(m_), _tanh_difference(p_, m_, d_)))
        else:
            gates.append((_sigmoid(p_), _sigmoid(m_), _sigmoid_difference(p_, m_, d_)))
    i, f, g, o = gates

    cp = f[0] * c[0] + i[0] * g[0]
    cm = f[1] * c[1] + i[1] * g[1]
    cd = f[2] * c[0] + f[1] * c[2] + i[2] * g[0] + i[1] * g[2]
    tp, tm = np.tanh(cp), np.tanh(cm)
    td = _tanh_difference(cp, cm, cd)
    return (o[0] * tp, o[1] * tm, o[2] * tp + o[1] * td), (cp, cm, cd)


def _masked_triple(m, new, old):
    return tuple(m * a + (1.0 - m) * b for a, b in zip(new, old))


def _zeros_triple(shape, dtype):
    return tuple(np.zeros(shape, dtype=dtype) for _ in range(3))


def _loss_difference(sides: Tuple[ModelParams, ModelParams, ModelParams], batch: PaddedBatch) -> float:
    """
    L(θ+) - L(θ-)（学習例の総和）を差の伝播で求める
    sides = (θ+, θ-, θ+ - θ-)
    """
    plus, minus, delta = sides
    config = plus.config
    dtype = plus.dtype
    H = config.hidden_size

    X = np.ascontiguousarray(batch.center.transpose(1, 0, 2), dtype=dtype)
    MX = np.ascontiguousarray(batch.center_mask.T, dtype=dtype)
    Y = np.ascontiguousarray(batch.targets.transpose(1, 0, 2), dtype=dtype)
    MY = np.ascontiguousarray(batch.target_mask.T, dtype=dtype)
    T, B, _ = X.shape
    Tp, P, d = Y.shape

    inputs = (X, X, np.zeros_like(X))
    h = _zeros_triple((B, H), dtype)
    for layers in zip(plus.encoder_layers, minus.encoder_layers, delta.encoder_layers):
        h, c = _zeros_triple((B, H), dtype), _zeros_triple((B, H), dtype)
        outputs = _zeros_triple((T, B, H), dtype)
        for t in range(T):
            m = MX[t][:, None]
            h_new, c_new = _cell_difference(layers, tuple(s[t] for s in inputs), h, c)
            h, c = _masked_triple(m, h_new, h), _masked_triple(m, c_new, c)
            for out, value in zip(outputs, h):
                out[t] = value
        inputs = outputs

    owners = batch.target_owner
    h = tuple(z[owners] for z in h)
    if config.offset_conditioning:
        index = _offset_index(batch.target_offsets, config.window)
        h = tuple(z + side.offset_embedding[index] for z, side in zip(h, sides))

    if config.loss_normalization == "per_frame":
        weights = 1.0 / (batch.target_lengths.astype(dtype) * config.input_dim)
    else:
        weights = np.ones(P, dtype=dtype)

    decoders = (plus.decoder, minus.decoder, delta.decoder)
    c = _zeros_triple((P, H), dtype)
    x = _zeros_triple((P, d), dtype)
    per_target = np.zeros(P, dtype=dtype)
    for t in range(Tp):
        m = MY[t][:, None]
        h_new, c_new = _cell_difference(decoders, x, h, c)
        h, c = _masked_triple(m, h_new, h), _masked_triple(m, c_new, c)
        y = (
            h[0] @ plus.projection_W.T + plus.projection_b,
            h[1] @ minus.projection_W.T + minus.projection_b,
            h[2] @ plus.projection_W.T + h[1] @ delta.projection_W.T + delta.projection_b,
        )
        # r+^2 - r-^2 = (r+ + r-)(r+ - r-)、r+ - r- = -(y+ - y-)
        r_sum = (2.0 * Y[t] - y[0] - y[1]) * m
        per_target += (r_sum * (-y[2] * m)).sum(axis=1)
        x = (Y[t], Y[t], np.zeros_like(Y[t])) if config.teacher_forcing else y
    return float((weights * per_target).sum())


def central_difference(params: ModelParams, example: SkipGramExample, index: int, epsilon: float = 1e-5) -> float:
    """(L(θ + ε e_j) - L(θ - ε e_j)) / 2ε（2 つの損失の引き算による丸め誤差なし）"""
    return _central_difference(params, pad_examples([example]), index, epsilon)


def _central_difference(params: ModelParams, batch: PaddedBatch, index: int, epsilon: float) -> float:
    plus, minus = params.flat.copy(), params.flat.copy()
    plus[index] += epsilon
    minus[index] -= epsilon
    delta = np.zeros_like(params.flat)
    delta[index] = plus[index] - minus[index]
    sides = (ModelParams(params.config, plus), ModelParams(params.config, minus), ModelParams(params.config, delta))
    return _loss_difference(sides, batch) / float(delta[index])


def finite_difference_check(
    params: ModelParams,
    example: SkipGramExample,
    epsilon: float = 1e-5,
    num_samples: Optional[int] = None,
    seed: int = 0,
    gradient: Optional[np.ndarray] = None,
) -> float:
    """
    中心差分と解析勾配の最大相対誤差
    |a - b| / max(1e-8, |a| + |b|)

    Args:
        num_samples: None なら全パラメータ、指定時はランダムな部分集合
        gradient: 検査する勾配（省略時は skipgram_gradient）
    """
    if params.dtype != np.float64:
        raise InputError("finite difference checks require float64 parameters")
    analytic = skipgram_gradient(params, example) if gradient is None else np.asarray(gradient)

    indices = np.arange(params.flat.size)
    if num_samples is not None and num_samples < indices.size:
        indices = np.sort(np.random.default_rng(seed).choice(indices, size=num_samples, replace=False))

    batch = pad_examples([example])
    worst, worst_index = 0.0, -1
    for j in indices:
        numeric = _central_difference(params, batch, int(j), epsilon)
        a = float(analytic[j])
        error = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if error > worst:
            worst, worst_index = error, int(j)

    if worst_index >= 0:
        logger.debug(f"worst gradient coordinate {params.locate(worst_index)}: relative error {worst:.3e}")
    return worst

"""The motion forecaster: an encoder-decoder transformer whose decoder
runs once over the whole future instead of frame by frame.

Given T observed frames, the encoder embeds them (optionally prepending
a learnable classification token at position 0) and self-attends. The
query sequence for the decoder is simply T' copies of the last observed
frame; the decoder self-attends over it without any causal mask,
cross-attends into the encoder memory, and every decoder layer's output
is turned into a pose residual that is added onto the query. Because the
residual map starts zero-initialized, an untrained model predicts
exactly the repeated last frame, the zero-velocity baseline, and
training only has to learn deviations from it.

Both sublayer stacks are pre-normalization: layer norm feeds each
sublayer, the residual wraps around it, and a final shared layer norm
cleans up each stack's output. The pose embedding codec is shared
between encoder input and decoder queries; it is either a single affine
map or a graph-convolutional network over the skeleton's joints.

An autoregressive decoding path exists for comparison only: it feeds
predictions back one frame at a time under a causal mask and costs T'
decoder passes where the parallel path costs one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor
from .data import FormatError, NormalizationStats, PoseSequence
from .layers import (
    BatchNormParams,
    ConfigError,
    FeedForwardParams,
    GcnLayerParams,
    LayerNormParams,
    LinearParams,
    MultiHeadAttentionParams,
    batch_norm,
    causal_mask,
    dropout,
    feed_forward,
    gcn_layer,
    layer_norm,
    linear,
    multi_head_attention,
    positional_encoding_table,
)

CODEC_KINDS = ("linear", "gcn_enc", "gcn_dec", "gcn_full")
ACTIVITY_SOURCES = ("class_token", "memory")


@dataclass
class ModelConfig:
    pose_dim: int
    input_len: int
    target_len: int
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    codec: str = "linear"
    num_joints: int = 0
    gcn_stages: int = 1
    gcn_node_features: int = 512
    num_classes: int = 0
    activity_source: str = "class_token"
    dropout: float = 0.1
    codec_dropout: float = 0.1
    ffn_dim: int = 0
    share_output_codec: bool = True

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.embed_dim
        self.validate()

    def validate(self) -> None:
        if self.pose_dim < 1:
            raise ConfigError(f"pose_dim must be >= 1, got {self.pose_dim}")
        if self.input_len < 1 or self.target_len < 1:
            raise ConfigError("input_len and target_len must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2 != 0:
            raise ConfigError(
                f"embed_dim must be even and >= 2, got {self.embed_dim}"
            )
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must divide evenly over "
                f"{self.num_heads} heads"
            )
        if self.codec not in CODEC_KINDS:
            raise ConfigError(f"codec must be one of {CODEC_KINDS}, got {self.codec!r}")
        if self.codec != "linear":
            if self.num_joints < 1:
                raise ConfigError("graph codecs need num_joints set")
            if self.pose_dim % self.num_joints != 0:
                raise ConfigError(
                    f"pose_dim {self.pose_dim} is not divisible by "
                    f"num_joints {self.num_joints}"
                )
            if self.gcn_stages < 1:
                raise ConfigError(f"gcn_stages must be >= 1, got {self.gcn_stages}")
            if self.gcn_node_features < 1:
                raise ConfigError("gcn_node_features must be >= 1")
        if self.codec in ("gcn_dec", "gcn_full"):
            if self.embed_dim % self.num_joints != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} is not divisible by "
                    f"num_joints {self.num_joints} (needed to decode embeddings "
                    f"through the joint graph)"
                )
        if self.num_classes < 0:
            raise ConfigError(f"num_classes must be >= 0, got {self.num_classes}")
        if self.activity_source not in ACTIVITY_SOURCES:
            raise ConfigError(
                f"activity_source must be one of {ACTIVITY_SOURCES}, "
                f"got {self.activity_source!r}"
            )
        for name, rate in (("dropout", self.dropout),
                           ("codec_dropout", self.codec_dropout)):
            if not (0.0 <= rate < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
        if self.ffn_dim < 1:
            raise ConfigError(f"ffn_dim must be >= 1, got {self.ffn_dim}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls(**values)


@dataclass
class AttentionMap:
    """One head's attention weights from one layer, detached."""

    stage: str  # "encoder" | "decoder"
    kind: str  # "self" | "encoder_decoder"
    layer: int
    head: int
    weights: np.ndarray


@dataclass
class ForwardResult:
    """Graph-connected outputs of one forward pass."""

    layer_predictions: list[Tensor]
    logits: Tensor | None
    memory: Tensor
    attention: list[AttentionMap]
    query_frames: np.ndarray


@dataclass
class Prediction:
    """Detached inference outputs."""

    frames: np.ndarray
    layer_frames: list[np.ndarray]
    logits: np.ndarray | None
    attention: list[AttentionMap]

    def as_sequence(self, like: PoseSequence) -> PoseSequence:
        return like.with_frames(self.frames)


def build_query_sequence(x, target_len: int):
    """T' copies of the last observed frame. PoseSequence in,
    PoseSequence out; array in, array out."""
    if target_len < 1:
        raise ContractError(f"target_len must be >= 1, got {target_len}")
    if isinstance(x, PoseSequence):
        return x.with_frames(np.repeat(x.frames[-1:], target_len, axis=0))
    frames = np.asarray(x, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractError(
            f"query construction needs a non-empty (T, N) array, got {frames.shape}"
        )
    return np.repeat(frames[-1:], target_len, axis=0)


# ---------------------------------------------------------------------------
# pose codecs


class LinearCodec:
    """Single affine map between pose space and embedding space."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.lin = LinearParams(d_in, d_out, rng, zero_init=zero_init)

    def apply(self, x: Tensor, training: bool, rng) -> Tensor:
        return linear(x, self.lin)

    def named_params(self) -> dict[str, Tensor]:
        return {f"lin.{k}": v for k, v in self.lin.named_params().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {}


class _ResidualGcnBlock:
    def __init__(self, num_joints: int, features: int, rng: np.random.Generator):
        self.gcn1 = GcnLayerParams(num_joints, features, features, rng)
        self.bn1 = BatchNormParams(features)
        self.gcn2 = GcnLayerParams(num_joints, features, features, rng)
        self.bn2 = BatchNormParams(features)

    def apply(self, h: Tensor, rate: float, training: bool, rng) -> Tensor:
        out = ad.tanh(batch_norm(gcn_layer(h, self.gcn1), self.bn1, training))
        out = dropout(out, rate, training, rng)
        out = ad.tanh(batch_norm(gcn_layer(out, self.gcn2), self.bn2, training))
        out = dropout(out, rate, training, rng)
        return h + out

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for part, obj in (("gcn1", self.gcn1), ("bn1", self.bn1),
                          ("gcn2", self.gcn2), ("bn2", self.bn2)):
            for k, v in obj.named_params().items():
                out[f"{part}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for part, obj in (("bn1", self.bn1), ("bn2", self.bn2)):
            for k, v in obj.named_buffers().items():
                out[f"{part}.{k}"] = v
        return out


class GcnCodec:
    """Graph-convolutional codec over the skeleton.

    Each vector is reshaped to (num_joints, features), widened to the
    working node width by a graph convolution (batch norm over the
    joints, tanh, dropout), passed through residual graph blocks, taken
    back to the input node width, flattened, and affinely projected to
    the output space. The same machinery decodes embeddings back to pose
    space; there ``zero_init`` zeroes the closing projection so the
    codec starts as the zero map.
    """

    def __init__(self, d_in: int, d_out: int, num_joints: int,
                 node_features: int, stages: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if d_in % num_joints != 0:
            raise ConfigError(
                f"codec input width {d_in} is not divisible by {num_joints} joints"
            )
        self.num_joints = num_joints
        self.f_in = d_in // num_joints
        self.d_in = d_in
        self.gcn_in = GcnLayerParams(num_joints, self.f_in, node_features, rng)
        self.bn_in = BatchNormParams(node_features)
        self.blocks = [_ResidualGcnBlock(num_joints, node_features, rng)
                       for _ in range(stages)]
        self.gcn_out = GcnLayerParams(num_joints, node_features, self.f_in, rng)
        self.project = LinearParams(d_in, d_out, rng, zero_init=zero_init)
        self.dropout_rate = 0.0  # set by the owning model

    def _encode_vector(self, row: Tensor, training: bool, rng) -> Tensor:
        h = ad.reshape(row, (self.num_joints, self.f_in))
        h = ad.tanh(batch_norm(gcn_layer(h, self.gcn_in), self.bn_in, training))
        h = dropout(h, self.dropout_rate, training, rng)
        for block in self.blocks:
            h = block.apply(h, self.dropout_rate, training, rng)
        h = gcn_layer(h, self.gcn_out)
        return ad.reshape(h, (1, self.d_in))

    def apply(self, x: Tensor, training: bool, rng) -> Tensor:
        if x.shape[1] != self.d_in:
            raise ShapeError(f"codec expects width {self.d_in}, got {x.shape}")
        rows = [self._encode_vector(ad.slice_rows(x, t, t + 1), training, rng)
                for t in range(x.shape[0])]
        stacked = rows[0] if len(rows) == 1 else ad.concat_rows(rows)
        return linear(stacked, self.project)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.gcn_in.named_params().items():
            out[f"gcn_in.{k}"] = v
        for k, v in self.bn_in.named_params().items():
            out[f"bn_in.{k}"] = v
        for i, block in enumerate(self.blocks):
            for k, v in block.named_params().items():
                out[f"block{i}.{k}"] = v
        for k, v in self.gcn_out.named_params().items():
            out[f"gcn_out.{k}"] = v
        for k, v in self.project.named_params().items():
            out[f"project.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.bn_in.named_buffers().items():
            out[f"bn_in.{k}"] = v
        for i, block in enumerate(self.blocks):
            for k, v in block.named_buffers().items():
                out[f"block{i}.{k}"] = v
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        parts = name.split(".")
        if parts[0] == "bn_in":
            target = self.bn_in
        elif parts[0].startswith("block"):
            block = self.blocks[int(parts[0][5:])]
            target = getattr(block, parts[1])
            parts = parts[1:]
        else:
            raise FormatError(f"unknown codec buffer {name!r}")
        setattr(target, parts[-1], value)


# ---------------------------------------------------------------------------
# transformer layers


class _EncoderLayer:
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng):
        self.norm_attn = LayerNormParams(dim)
        self.attn = MultiHeadAttentionParams(dim, heads, rng)
        self.norm_ffn = LayerNormParams(dim)
        self.ffn = FeedForwardParams(dim, ffn_dim, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for part, obj in (("norm_attn", self.norm_attn), ("attn", self.attn),
                          ("norm_ffn", self.norm_ffn), ("ffn", self.ffn)):
            for k, v in obj.named_params().items():
                out[f"{part}.{k}"] = v
        return out


class _DecoderLayer:
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng):
        self.norm_self = LayerNormParams(dim)
        self.self_attn = MultiHeadAttentionParams(dim, heads, rng)
        self.norm_cross = LayerNormParams(dim)
        self.cross_attn = MultiHeadAttentionParams(dim, heads, rng)
        self.norm_ffn = LayerNormParams(dim)
        self.ffn = FeedForwardParams(dim, ffn_dim, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for part, obj in (("norm_self", self.norm_self),
                          ("self_attn", self.self_attn),
                          ("norm_cross", self.norm_cross),
                          ("cross_attn", self.cross_attn),
                          ("norm_ffn", self.norm_ffn), ("ffn", self.ffn)):
            for k, v in obj.named_params().items():
                out[f"{part}.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# the model


class MotionTransformer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.init_seed = seed
        rng = np.random.default_rng(seed)
        d = config.embed_dim

        self.input_codec = self._make_codec(rng, encode=True)
        if config.share_output_codec:
            self.output_codecs = [self._make_codec(rng, encode=False)]
        else:
            self.output_codecs = [self._make_codec(rng, encode=False)
                                  for _ in range(config.num_layers)]

        self.class_token = None
        self.activity_head = None
        if config.num_classes > 0:
            self.class_token = Tensor(rng.normal(scale=0.02, size=d),
                                      requires_grad=True)
            self.activity_head = LinearParams(d, config.num_classes, rng)

        self.enc_layers = [_EncoderLayer(d, config.num_heads, config.ffn_dim, rng)
                           for _ in range(config.num_layers)]
        self.enc_final_norm = LayerNormParams(d)
        self.dec_layers = [_DecoderLayer(d, config.num_heads, config.ffn_dim, rng)
                           for _ in range(config.num_layers)]
        self.dec_final_norm = LayerNormParams(d)

        max_rows = max(config.input_len + 1, config.target_len) + 8
        self._positions = positional_encoding_table(max_rows, d)
        self.training = False
        self.decoder_calls = 0
        self._dropout_rng = np.random.default_rng(int(rng.integers(2 ** 62)))

    def _make_codec(self, rng, encode: bool):
        cfg = self.config
        use_gcn = cfg.codec in (("gcn_enc", "gcn_full") if encode
                                else ("gcn_dec", "gcn_full"))
        d_in = cfg.pose_dim if encode else cfg.embed_dim
        d_out = cfg.embed_dim if encode else cfg.pose_dim
        if use_gcn:
            codec = GcnCodec(d_in, d_out, cfg.num_joints, cfg.gcn_node_features,
                             cfg.gcn_stages, rng, zero_init=not encode)
            codec.dropout_rate = cfg.codec_dropout
            return codec
        return LinearCodec(d_in, d_out, rng, zero_init=not encode)

    # -- mode switches ------------------------------------------------------

    def train(self) -> "MotionTransformer":
        self.training = True
        return self

    def eval(self) -> "MotionTransformer":
        self.training = False
        return self

    def seed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng(seed)

    def reset_decoder_calls(self) -> None:
        self.decoder_calls = 0

    # -- forward ------------------------------------------------------------

    def _frames_of(self, x) -> np.ndarray:
        frames = x.frames if isinstance(x, PoseSequence) else np.asarray(
            x, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ShapeError(f"expected (T, N) frames, got shape {frames.shape}")
        if frames.shape[1] != self.config.pose_dim:
            raise ShapeError(
                f"frame width {frames.shape[1]} does not match model pose_dim "
                f"{self.config.pose_dim}"
            )
        return frames

    def _position_rows(self, rows: int) -> Tensor:
        if rows > self._positions.max_len:
            self._positions = positional_encoding_table(rows + 8,
                                                        self.config.embed_dim)
        return Tensor(self._positions.slice(rows))

    def _output_codec(self, layer_index: int):
        if self.config.share_output_codec:
            return self.output_codecs[0]
        return self.output_codecs[layer_index]

    def encode(self, x, collect_attention: bool = False):
        """Embed observed frames and run the encoder stack. Returns the
        memory, (T+1, D) when a class token is present, else (T, D),
        plus any collected attention maps."""
        frames = self._frames_of(x)
        cfg = self.config
        rng = self._dropout_rng
        emb = self.input_codec.apply(Tensor(frames), self.training, rng)
        if self.class_token is not None:
            token_row = ad.reshape(self.class_token, (1, cfg.embed_dim))
            emb = ad.concat_rows([token_row, emb])
        emb = emb + self._position_rows(emb.shape[0])
        emb = dropout(emb, cfg.dropout, self.training, rng)
        maps: list[AttentionMap] = []
        for index, layer in enumerate(self.enc_layers):
            normed = layer_norm(emb, layer.norm_attn)
            attended, weights = multi_head_attention(normed, normed, normed,
                                                     layer.attn)
            emb = emb + dropout(attended, cfg.dropout, self.training, rng)
            normed = layer_norm(emb, layer.norm_ffn)
            emb = emb + dropout(feed_forward(normed, layer.ffn), cfg.dropout,
                                self.training, rng)
            if collect_attention:
                maps.extend(
                    AttentionMap("encoder", "self", index, h, w)
                    for h, w in enumerate(weights)
                )
        memory = layer_norm(emb, self.enc_final_norm)
        return memory, maps

    def decode_parallel(self, query_frames, memory: Tensor,
                        causal: bool = False, collect_attention: bool = False):
        """One decoder pass over the whole query. Returns the per-layer
        embeddings (each already passed through the shared final norm)
        and any collected maps. ``causal`` masks future query positions
        and exists for the autoregressive path; the parallel path leaves
        self-attention unmasked so every position sees every other."""
        self.decoder_calls += 1
        cfg = self.config
        rng = self._dropout_rng
        frames = np.asarray(query_frames.frames if isinstance(query_frames, PoseSequence)
                            else query_frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != cfg.pose_dim:
            raise ShapeError(
                f"query frames must be (T', {cfg.pose_dim}), got {frames.shape}"
            )
        if memory.shape[1] != cfg.embed_dim:
            raise ShapeError(
                f"memory width {memory.shape[1]} does not match embed_dim "
                f"{cfg.embed_dim}"
            )
        target_len = frames.shape[0]
        x = self.input_codec.apply(Tensor(frames), self.training, rng)
        x = x + self._position_rows(target_len)
        x = dropout(x, cfg.dropout, self.training, rng)
        mask = causal_mask(target_len) if causal else None
        per_layer: list[Tensor] = []
        maps: list[AttentionMap] = []
        for index, layer in enumerate(self.dec_layers):
            normed = layer_norm(x, layer.norm_self)
            attended, self_weights = multi_head_attention(
                normed, normed, normed, layer.self_attn, mask=mask)
            x = x + dropout(attended, cfg.dropout, self.training, rng)
            normed = layer_norm(x, layer.norm_cross)
            attended, cross_weights = multi_head_attention(
                normed, memory, memory, layer.cross_attn)
            x = x + dropout(attended, cfg.dropout, self.training, rng)
            normed = layer_norm(x, layer.norm_ffn)
            x = x + dropout(feed_forward(normed, layer.ffn), cfg.dropout,
                            self.training, rng)
            per_layer.append(layer_norm(x, self.dec_final_norm))
            if collect_attention:
                maps.extend(AttentionMap("decoder", "self", index, h, w)
                            for h, w in enumerate(self_weights))
                maps.extend(AttentionMap("decoder", "encoder_decoder", index, h, w)
                            for h, w in enumerate(cross_weights))
        return per_layer, maps

    def forward(self, x, target_len: int | None = None,
                collect_attention: bool = False) -> ForwardResult:
        """Full graph-building pass: per-layer predictions as query plus
        decoded residual, and activity logits when the model has a head."""
        frames = self._frames_of(x)
        target_len = target_len or self.config.target_len
        query = build_query_sequence(frames, target_len)
        memory, enc_maps = self.encode(frames, collect_attention)
        per_layer, dec_maps = self.decode_parallel(query, memory,
                                                   collect_attention=collect_attention)
        query_tensor = Tensor(query)
        predictions = []
        for index, emb in enumerate(per_layer):
            residual = self._output_codec(index).apply(emb, self.training,
                                                       self._dropout_rng)
            predictions.append(query_tensor + residual)
        logits = self._classify(memory, frames.shape[0])
        return ForwardResult(
            layer_predictions=predictions,
            logits=logits,
            memory=memory,
            attention=enc_maps + dec_maps,
            query_frames=query,
        )

    def _classify(self, memory: Tensor, num_frames: int) -> Tensor | None:
        if self.activity_head is None:
            return None
        if self.config.activity_source == "class_token":
            summary = ad.slice_rows(memory, 0, 1)
        else:
            start = 1 if self.class_token is not None else 0
            frame_rows = ad.slice_rows(memory, start, memory.shape[0])
            pool = np.full((1, num_frames), 1.0 / num_frames)
            summary = ad.matmul(Tensor(pool), frame_rows)
        return linear(summary, self.activity_head)

    # -- inference ----------------------------------------------------------

    def predict(self, x, target_len: int | None = None,
                collect_attention: bool = False) -> Prediction:
        """Parallel one-pass forecast, detached from the graph."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                result = self.forward(x, target_len, collect_attention)
        finally:
            self.training = was_training
        layer_frames = [p.data.copy() for p in result.layer_predictions]
        logits = None
        if result.logits is not None:
            logits = result.logits.data.reshape(-1).copy()
        return Prediction(
            frames=layer_frames[-1],
            layer_frames=layer_frames,
            logits=logits,
            attention=result.attention,
        )

    def predict_autoregressive(self, x, target_len: int | None = None,
                               collect_attention: bool = False) -> Prediction:
        """Frame-by-frame forecast under a causal mask, feeding each
        prediction back as the next query. Reference implementation for
        speed comparisons; one decoder pass per future frame."""
        frames = self._frames_of(x)
        target_len = target_len or self.config.target_len
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                memory, _ = self.encode(frames)
                final_codec = self._output_codec(self.config.num_layers - 1)
                rows = [frames[-1]]
                maps: list[AttentionMap] = []
                for step in range(1, target_len + 1):
                    query = np.array(rows)
                    collect = collect_attention and step == target_len
                    per_layer, step_maps = self.decode_parallel(
                        query, memory, causal=True, collect_attention=collect)
                    last = ad.slice_rows(per_layer[-1], step - 1, step)
                    residual = final_codec.apply(last, False, self._dropout_rng)
                    rows.append(rows[-1] + residual.data[0])
                    if collect:
                        maps = step_maps
                logits = self._classify(memory, frames.shape[0])
        finally:
            self.training = was_training
        predicted = np.array(rows[1:])
        return Prediction(
            frames=predicted,
            layer_frames=[predicted],
            logits=None if logits is None else logits.data.reshape(-1).copy(),
            attention=maps,
        )

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def merge(prefix, mapping):
            for k, v in mapping.items():
                out[f"{prefix}.{k}"] = v

        merge("input_codec", self.input_codec.named_params())
        for i, codec in enumerate(self.output_codecs):
            merge(f"output_codec{i}", codec.named_params())
        if self.class_token is not None:
            out["class_token"] = self.class_token
        if self.activity_head is not None:
            merge("activity_head", self.activity_head.named_params())
        for i, layer in enumerate(self.enc_layers):
            merge(f"enc{i}", layer.named_params())
        merge("enc_final_norm", self.enc_final_norm.named_params())
        for i, layer in enumerate(self.dec_layers):
            merge(f"dec{i}", layer.named_params())
        merge("dec_final_norm", self.dec_final_norm.named_params())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, v in self.input_codec.named_buffers().items():
            out[f"input_codec.{k}"] = v
        for i, codec in enumerate(self.output_codecs):
            for k, v in codec.named_buffers().items():
                out[f"output_codec{i}.{k}"] = v
        return out

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        owner, rest = name.split(".", 1)
        if owner == "input_codec":
            self.input_codec.set_buffer(rest, value)
        elif owner.startswith("output_codec"):
            self.output_codecs[int(owner[len("output_codec"):])].set_buffer(rest, value)
        else:
            raise FormatError(f"unknown buffer {name!r}")

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# attention export


def export_attention(maps: list[AttentionMap], directory) -> list[str]:
    """Write each map as CSV (rows queries, columns keys) named
    attn_{kind}_L{layer}_H{head}.csv. Distinct maps must not collide on
    that name; filter by stage before exporting mixed collections."""
    if not maps:
        raise ContractError("export_attention needs at least one map")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    seen = set()
    for m in maps:
        name = f"attn_{m.kind}_L{m.layer}_H{m.head}.csv"
        if name in seen:
            raise ContractError(
                f"duplicate attention map for {name}; filter maps by stage first"
            )
        seen.add(name)
        path = directory / name
        np.savetxt(path, m.weights, delimiter=",", fmt="%.17g")
        written.append(str(path))
    return written


# ---------------------------------------------------------------------------
# checkpointing

_CKPT_MAGIC = b"PCKP"
_CKPT_VERSION = 1


@dataclass
class CheckpointBundle:
    model: MotionTransformer
    step: int
    stats: NormalizationStats | None = None
    optimizer_state: dict | None = field(default=None)


def _write_block(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.asarray(array, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f8").tobytes())


def _need(fh, count: int, what: str) -> bytes:
    offset = fh.tell()
    raw = fh.read(count)
    if len(raw) != count:
        raise FormatError(f"truncated checkpoint: {what} cut short", offset)
    return raw


def _read_block(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _need(fh, 2, "block name length"))
    name = _need(fh, name_len, "block name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _need(fh, 1, f"rank of {name!r}"))
    shape = tuple(struct.unpack("<I", _need(fh, 4, f"shape of {name!r}"))[0]
                  for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _need(fh, count * 8, f"data of {name!r}")
    return name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(model: MotionTransformer, path, step: int = 0,
                    stats: NormalizationStats | None = None,
                    optimizer_state: dict | None = None) -> None:
    """Single-file binary checkpoint: JSON header (config, step,
    optimizer step count) followed by named float64 blocks for every
    parameter, buffer, normalization stat and optimizer moment."""
    header = {
        "config": model.config.to_dict(),
        "step": int(step),
        "init_seed": model.init_seed,
    }
    blocks: list[tuple[str, np.ndarray]] = []
    for name, param in model.named_parameters().items():
        blocks.append((f"param.{name}", param.data))
    for name, buf in model.named_buffers().items():
        blocks.append((f"buffer.{name}", buf))
    if stats is not None:
        blocks.append(("norm.mean", stats.mean))
        blocks.append(("norm.std", stats.std))
    if optimizer_state is not None:
        header["optimizer_step_count"] = int(optimizer_state.get("step_count", 0))
        for name, moments in optimizer_state.items():
            if name == "step_count":
                continue
            blocks.append((f"opt.m.{name}", moments["m"]))
            blocks.append((f"opt.v.{name}", moments["v"]))
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(blocks)))
        for name, array in blocks:
            _write_block(fh, name, array)


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild a model (and optional stats/optimizer state) from a
    checkpoint file. Every parameter and buffer must be present with
    a matching shape."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", 0)
        (version,) = struct.unpack("<I", _need(fh, 4, "version"))
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        (header_len,) = struct.unpack("<I", _need(fh, 4, "header length"))
        try:
            header = json.loads(_need(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"unreadable checkpoint header: {err}", 12) from None
        (block_count,) = struct.unpack("<I", _need(fh, 4, "block count"))
        blocks = dict(_read_block(fh) for _ in range(block_count))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes", fh.tell() - 1)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as err:
        raise FormatError(f"bad checkpoint config: {err}") from None
    model = MotionTransformer(config, seed=header.get("init_seed", 0))

    params = model.named_parameters()
    for name, param in params.items():
        key = f"param.{name}"
        if key not in blocks:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        stored = blocks.pop(key)
        if stored.shape != param.data.shape:
            raise FormatError(
                f"parameter {name!r} has shape {stored.shape}, "
                f"model expects {param.data.shape}"
            )
        param.data = stored
    for name in list(model.named_buffers()):
        key = f"buffer.{name}"
        if key not in blocks:
            raise FormatError(f"checkpoint is missing buffer {name!r}")
        model._set_buffer(name, blocks.pop(key))

    stats = None
    if "norm.mean" in blocks:
        stats = NormalizationStats(blocks.pop("norm.mean"), blocks.pop("norm.std"))

    optimizer_state = None
    moment_keys = [k for k in blocks if k.startswith("opt.m.")]
    if moment_keys:
        optimizer_state = {"step_count": header.get("optimizer_step_count", 0)}
        for key in moment_keys:
            name = key[len("opt.m."):]
            v_key = f"opt.v.{name}"
            if v_key not in blocks:
                raise FormatError(f"optimizer state for {name!r} lacks its v block")
            optimizer_state[name] = {"m": blocks.pop(key), "v": blocks.pop(v_key)}

    leftovers = [k for k in blocks if k.startswith(("param.", "buffer."))]
    if leftovers:
        raise FormatError(f"checkpoint has unknown blocks: {leftovers[:3]}")
    return CheckpointBundle(model=model, step=header.get("step", 0),
                            stats=stats, optimizer_state=optimizer_state)

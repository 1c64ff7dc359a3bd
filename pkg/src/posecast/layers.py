"""Neural building blocks used by the forecaster.

Everything here is written against :mod:`posecast.autodiff`: functions
take and return tensors, parameter containers own the learnable leaves
and expose them through ``named_params`` (and ``named_buffers`` for
non-learnable running state) so checkpointing can walk the model by
name. Randomness (initialization, dropout masks) always comes from a
caller-supplied ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    """A layer or model was configured with inconsistent sizes."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# affine map


class LinearParams:
    """Weight (d_in x d_out) plus bias (d_out). ``zero_init`` zeroes both,
    which makes the map identically zero until training moves it."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if d_in < 1 or d_out < 1:
            raise ConfigError(f"linear sizes must be positive, got {d_in}x{d_out}")
        if zero_init:
            weight = np.zeros((d_in, d_out))
        else:
            weight = xavier_uniform(rng, d_in, d_out)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def linear(x: Tensor, params: LinearParams) -> Tensor:
    out = ad.matmul(x, params.weight)
    return out + ad.broadcast_rows(params.bias, out.shape[0])


# ---------------------------------------------------------------------------
# attention


class MultiHeadAttentionParams:
    """Per-head query/key/value projections (embed_dim x head_dim, no
    biases) plus a shared output projection (embed_dim x embed_dim)."""

    def __init__(self, embed_dim: int, num_heads: int, rng: np.random.Generator):
        if num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {num_heads}")
        if embed_dim % num_heads != 0:
            raise ConfigError(
                f"embed_dim {embed_dim} is not divisible by num_heads {num_heads}"
            )
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.w_query = [Tensor(xavier_uniform(rng, embed_dim, self.head_dim),
                               requires_grad=True) for _ in range(num_heads)]
        self.w_key = [Tensor(xavier_uniform(rng, embed_dim, self.head_dim),
                             requires_grad=True) for _ in range(num_heads)]
        self.w_value = [Tensor(xavier_uniform(rng, embed_dim, self.head_dim),
                               requires_grad=True) for _ in range(num_heads)]
        self.w_out = Tensor(xavier_uniform(rng, embed_dim, embed_dim),
                            requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        out = {"w_out": self.w_out}
        for h in range(self.num_heads):
            out[f"head{h}.w_query"] = self.w_query[h]
            out[f"head{h}.w_key"] = self.w_key[h]
            out[f"head{h}.w_value"] = self.w_value[h]
        return out


MASK_SENTINEL = -1e9


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    params: MultiHeadAttentionParams,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, list[np.ndarray]]:
    """Scaled dot-product attention over all heads.

    ``mask`` is boolean with shape (num_queries, num_keys); True marks a
    key a query must not see, enforced by adding a large negative
    constant to the score before the softmax. Returns the attended
    output (num_queries x embed_dim) and, per head, a detached copy of
    the attention weight matrix for inspection and export.
    """
    d = params.embed_dim
    if queries.data.ndim != 2 or queries.shape[1] != d:
        raise ShapeError(f"queries must be (t, {d}), got {queries.shape}")
    if keys.data.ndim != 2 or keys.shape[1] != d:
        raise ShapeError(f"keys must be (s, {d}), got {keys.shape}")
    if values.shape != keys.shape:
        raise ShapeError(
            f"keys and values must agree, got {keys.shape} vs {values.shape}"
        )
    num_queries, num_keys = queries.shape[0], keys.shape[0]
    mask_add = None
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (num_queries, num_keys):
            raise ShapeError(
                f"mask must be ({num_queries}, {num_keys}), got {mask.shape}"
            )
        # All-False masks add nothing; skip them so masked and unmasked
        # calls agree bit for bit in the degenerate case.
        if mask.any():
            mask_add = Tensor(np.where(mask, MASK_SENTINEL, 0.0))

    inv_sqrt_dim = 1.0 / np.sqrt(params.head_dim)
    head_outputs = []
    head_weights = []
    for h in range(params.num_heads):
        q = ad.matmul(queries, params.w_query[h])
        k = ad.matmul(keys, params.w_key[h])
        v = ad.matmul(values, params.w_value[h])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dim)
        if mask_add is not None:
            scores = scores + mask_add
        weights = ad.softmax_rows(scores)
        head_weights.append(weights.data.copy())
        head_outputs.append(ad.matmul(weights, v))
    combined = ad.concat_cols(head_outputs)
    return ad.matmul(combined, params.w_out), head_weights


def causal_mask(num_queries: int, num_keys: int | None = None) -> np.ndarray:
    """True above the diagonal: position t may attend to keys 0..t."""
    if num_keys is None:
        num_keys = num_queries
    return np.triu(np.ones((num_queries, num_keys), dtype=bool), k=1)


# ---------------------------------------------------------------------------
# feed-forward


class FeedForwardParams:
    def __init__(self, embed_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.lin1 = LinearParams(embed_dim, hidden_dim, rng)
        self.lin2 = LinearParams(hidden_dim, embed_dim, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.lin1.named_params().items():
            out[f"lin1.{name}"] = p
        for name, p in self.lin2.named_params().items():
            out[f"lin2.{name}"] = p
        return out


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    """Position-wise two-layer network: linear, relu, linear."""
    return linear(ad.relu(linear(x, params.lin1)), params.lin2)


# ---------------------------------------------------------------------------
# normalization


class LayerNormParams:
    def __init__(self, dim: int):
        if dim < 2:
            raise ConfigError(f"layer_norm needs dim >= 2, got {dim}")
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then apply the
    learned per-feature gain and bias."""
    rows = x.shape[0]
    normalized = ad.normalize_rows(x, eps=eps)
    return normalized * ad.broadcast_rows(params.gain, rows) + ad.broadcast_rows(
        params.bias, rows
    )


class BatchNormParams:
    """Per-feature gain/bias plus running mean and variance buffers.

    Running statistics follow running = (1 - momentum) * running +
    momentum * batch_stat with momentum 0.1.
    """

    def __init__(self, num_features: int, momentum: float = 0.1):
        self.num_features = num_features
        self.momentum = momentum
        self.gain = Tensor(np.ones(num_features), requires_grad=True)
        self.bias = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def named_params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(x: Tensor, params: BatchNormParams, training: bool,
               eps: float = 1e-5) -> Tensor:
    """Normalize each feature (column) over the batch (rows).

    Training mode with batch size >= 2 uses batch statistics (population
    variance) and updates the running buffers; a single-row batch has no
    usable variance, so it falls back to the running statistics and
    leaves the buffers untouched. Evaluation always uses the buffers.
    """
    if x.data.ndim != 2 or x.shape[1] != params.num_features:
        raise ShapeError(
            f"batch_norm expects (batch, {params.num_features}), got {x.shape}"
        )
    batch = x.shape[0]
    if training and batch >= 2:
        batch_mean = x.data.mean(axis=0)
        batch_var = x.data.var(axis=0)
        m = params.momentum
        params.running_mean = (1.0 - m) * params.running_mean + m * batch_mean
        params.running_var = (1.0 - m) * params.running_var + m * batch_var
        # Normalizing columns = normalizing rows of the transpose, which
        # keeps the batch-statistics gradient path inside the graph.
        normalized = ad.transpose(ad.normalize_rows(ad.transpose(x), eps=eps))
    else:
        inv_std = 1.0 / np.sqrt(params.running_var + eps)
        shift = Tensor(np.tile(params.running_mean, (batch, 1)))
        scale_const = Tensor(np.tile(inv_std, (batch, 1)))
        normalized = (x - shift) * scale_const
    return normalized * ad.broadcast_rows(params.gain, batch) + ad.broadcast_rows(
        params.bias, batch
    )


# ---------------------------------------------------------------------------
# graph convolution


class GcnLayerParams:
    """Learnable adjacency over the joint graph plus a feature transform.

    The adjacency starts as the identity with small uniform noise in
    [-0.05, 0.05), so each node initially listens mostly to itself and
    training is free to discover the rest of the connectivity. The
    feature weight uses Xavier-uniform initialization.
    """

    def __init__(self, num_nodes: int, f_in: int, f_out: int,
                 rng: np.random.Generator):
        if num_nodes < 1:
            raise ConfigError(f"gcn needs at least one node, got {num_nodes}")
        adjacency = np.eye(num_nodes) + rng.uniform(-0.05, 0.05,
                                                    size=(num_nodes, num_nodes))
        self.num_nodes = num_nodes
        self.f_in = f_in
        self.f_out = f_out
        self.adjacency = Tensor(adjacency, requires_grad=True)
        self.weight = Tensor(xavier_uniform(rng, f_in, f_out), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {"adjacency": self.adjacency, "weight": self.weight}


def gcn_layer(h: Tensor, params: GcnLayerParams, activation: str = "identity") -> Tensor:
    """One graph convolution: adjacency @ h @ weight, then an optional
    elementwise activation ("identity" or "tanh")."""
    if h.data.ndim != 2 or h.shape != (params.num_nodes, params.f_in):
        raise ShapeError(
            f"gcn_layer expects ({params.num_nodes}, {params.f_in}), got {h.shape}"
        )
    out = ad.matmul(ad.matmul(params.adjacency, h), params.weight)
    if activation == "identity":
        return out
    if activation == "tanh":
        return ad.tanh(out)
    raise ConfigError(f"unknown gcn activation {activation!r}")


# ---------------------------------------------------------------------------
# positional encodings


class PositionalEncoding:
    """Fixed sinusoid table: even columns sin, odd columns cos, with the
    usual geometric frequency ladder over 10000."""

    def __init__(self, max_len: int, dim: int):
        if dim % 2 != 0:
            raise ConfigError(f"positional encoding needs an even dim, got {dim}")
        if max_len < 1:
            raise ConfigError(f"positional encoding needs max_len >= 1, got {max_len}")
        positions = np.arange(max_len, dtype=np.float64)[:, np.newaxis]
        pair_index = np.arange(0, dim, 2, dtype=np.float64)
        inv_freq = np.power(10000.0, -pair_index / dim)
        angles = positions * inv_freq[np.newaxis, :]
        table = np.zeros((max_len, dim))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        self.max_len = max_len
        self.dim = dim
        self.table = table

    def slice(self, length: int) -> np.ndarray:
        if length > self.max_len:
            raise ShapeError(
                f"positional encoding holds {self.max_len} positions, asked for {length}"
            )
        return self.table[:length]


def positional_encoding_table(max_len: int, dim: int) -> PositionalEncoding:
    return PositionalEncoding(max_len, dim)


# ---------------------------------------------------------------------------
# dropout


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    expectation matches the input. Identity when evaluating or rate 0."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)

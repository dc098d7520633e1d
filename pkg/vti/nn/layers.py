# vti/nn/layers.py
"""
Neural Building Blocks

Linear layers, embeddings with sinusoidal positions, an LSTM cell, multi-head
attention and a pre-norm Transformer encoder layer, all expressed in engine ops.

Conventions:
- batched inputs are row matrices (n x d); rank-1 vectors are accepted and returned as rank-1
- LSTM gate order is (input, forget, cell-candidate, output)
- layer norm epsilon is 1e-5
"""

from dataclasses import dataclass

import numpy as np

from vti.core.errors import ContractViolation
from vti.engine import (
    Tensor,
    add,
    concat,
    im2col,
    index,
    matmul,
    mean,
    mul,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)
from vti.nn.params import ParameterStore

LAYER_NORM_EPS = 1e-5


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0])), True
    if x.ndim != 2:
        raise ContractViolation(f"expected a vector or row matrix, got shape {x.shape}")
    return x, False


def _restore(x: Tensor, was_vector: bool) -> Tensor:
    return reshape(x, (x.shape[1],)) if was_vector else x


# ============================================================================
# Linear
# ============================================================================

@dataclass
class LinearLayer:
    weight: Tensor          # (d_in, d_out)
    bias: Tensor | None     # (d_out,)

    @classmethod
    def create(cls, store: ParameterStore, name: str, d_in: int, d_out: int,
               bias: bool = True) -> "LinearLayer":
        bound = 1.0 / np.sqrt(d_in)
        return cls(
            weight=store.uniform(f"{name}.weight", (d_in, d_out), bound),
            bias=store.uniform(f"{name}.bias", (d_out,), bound) if bias else None,
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def linear(layer: LinearLayer, x: Tensor) -> Tensor:
    """x @ W + b, bias broadcast over rows"""
    rows, was_vector = _as_rows(x)
    if rows.shape[1] != layer.d_in:
        raise ContractViolation(f"linear: input width {rows.shape[1]} != d_in {layer.d_in}")
    out = matmul(rows, layer.weight)
    if layer.bias is not None:
        out = add(out, layer.bias)
    return _restore(out, was_vector)


# ============================================================================
# Embeddings
# ============================================================================

def sinusoidal_table(max_len: int, dim: int) -> np.ndarray:
    """Fixed positional table: sin on even dimensions, cos on odd ones"""
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class EmbeddingTable:
    table: Tensor       # (d_vocab, d_e)
    positional: Tensor  # (max_len, d_e), not trained

    @classmethod
    def create(cls, store: ParameterStore, name: str, vocab_size: int, dim: int, max_len: int) -> "EmbeddingTable":
        return cls(
            table=store.uniform(f"{name}.table", (vocab_size, dim), 0.5),
            positional=Tensor(sinusoidal_table(max_len, dim)),
        )

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


def embed(table: EmbeddingTable, token_ids, add_position: bool = False) -> Tensor:
    """
    Look up rows of the embedding table

    Backward scatters into the selected rows only; repeated ids accumulate.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ContractViolation("embed: empty id list")
    if ids.min() < 0 or ids.max() >= table.vocab_size:
        raise ContractViolation(f"embed: token id out of range [0, {table.vocab_size})")
    out = index(table.table, ids)
    if add_position:
        if ids.size > table.positional.shape[0]:
            raise ContractViolation(f"embed: sequence of {ids.size} exceeds {table.positional.shape[0]} positions")
        out = add(out, Tensor(table.positional.data[: ids.size]))
    return out


# ============================================================================
# LSTM
# ============================================================================

@dataclass
class LstmCellParams:
    w_ih: Tensor  # (d_in, 4*d_h)
    w_hh: Tensor  # (d_h, 4*d_h)
    bias: Tensor  # (4*d_h,)

    @classmethod
    def create(cls, store: ParameterStore, name: str, d_in: int, d_h: int) -> "LstmCellParams":
        bound = 1.0 / np.sqrt(d_h)
        params = cls(
            w_ih=store.uniform(f"{name}.w_ih", (d_in, 4 * d_h), bound),
            w_hh=store.uniform(f"{name}.w_hh", (d_h, 4 * d_h), bound),
            bias=store.uniform(f"{name}.bias", (4 * d_h,), bound),
        )
        params.bias.data[d_h:2 * d_h] = 1.0  # forget gate
        return params

    @property
    def d_h(self) -> int:
        return self.w_hh.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_ih.shape[0]


def lstm_cell(p: LstmCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step: c = f*c_prev + i*g, h = o*tanh(c)"""
    x_rows, was_vector = _as_rows(x)
    h_rows, _ = _as_rows(h_prev)
    c_rows, _ = _as_rows(c_prev)
    if x_rows.shape[1] != p.d_in or h_rows.shape[1] != p.d_h or c_rows.shape[1] != p.d_h:
        raise ContractViolation(
            f"lstm_cell: got x {x_rows.shape}, h {h_rows.shape}, c {c_rows.shape} for d_in={p.d_in}, d_h={p.d_h}"
        )
    if not (x_rows.shape[0] == h_rows.shape[0] == c_rows.shape[0]):
        raise ContractViolation("lstm_cell: batch sizes differ")
    d = p.d_h
    gates = add(add(matmul(x_rows, p.w_ih), matmul(h_rows, p.w_hh)), p.bias)
    i = sigmoid(index(gates, (slice(None), slice(0, d))))
    f = sigmoid(index(gates, (slice(None), slice(d, 2 * d))))
    g = tanh(index(gates, (slice(None), slice(2 * d, 3 * d))))
    o = sigmoid(index(gates, (slice(None), slice(3 * d, 4 * d))))
    c = add(mul(f, c_rows), mul(i, g))
    h = mul(o, tanh(c))
    return _restore(h, was_vector), _restore(c, was_vector)


# ============================================================================
# Attention and Transformer
# ============================================================================

@dataclass
class AttentionParams:
    query: LinearLayer
    key: LinearLayer
    value: LinearLayer
    out: LinearLayer | None  # None when only per-head outputs are consumed
    heads: int

    @classmethod
    def create(cls, store: ParameterStore, name: str, d_model: int, heads: int,
               with_output: bool = True) -> "AttentionParams":
        if d_model % heads != 0:
            raise ContractViolation(f"d_model={d_model} not divisible by heads={heads}")
        return cls(
            query=LinearLayer.create(store, f"{name}.query", d_model, d_model, bias=False),
            key=LinearLayer.create(store, f"{name}.key", d_model, d_model, bias=False),
            value=LinearLayer.create(store, f"{name}.value", d_model, d_model, bias=False),
            out=LinearLayer.create(store, f"{name}.out", d_model, d_model) if with_output else None,
            heads=heads,
        )

    @property
    def d_model(self) -> int:
        return self.query.d_in

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class TransformerLayerParams:
    attention: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_in: LinearLayer
    ffn_out: LinearLayer
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def create(cls, store: ParameterStore, name: str, d_model: int, heads: int) -> "TransformerLayerParams":
        return cls(
            attention=AttentionParams.create(store, f"{name}.attn", d_model, heads),
            ln1_gain=store.ones(f"{name}.ln1.gain", (d_model,)),
            ln1_bias=store.zeros(f"{name}.ln1.bias", (d_model,)),
            ffn_in=LinearLayer.create(store, f"{name}.ffn_in", d_model, 2 * d_model),
            ffn_out=LinearLayer.create(store, f"{name}.ffn_out", 2 * d_model, d_model),
            ln2_gain=store.ones(f"{name}.ln2.gain", (d_model,)),
            ln2_bias=store.zeros(f"{name}.ln2.bias", (d_model,)),
        )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift"""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    return add(mul(normed, gain), bias)


def _attend(p: AttentionParams, seq: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    if seq.ndim != 2 or seq.shape[0] < 1 or seq.shape[1] != p.d_model:
        raise ContractViolation(f"attention: expected (n >= 1, {p.d_model}), got {seq.shape}")
    q = linear(p.query, seq)
    k = linear(p.key, seq)
    v = linear(p.value, seq)
    hd = p.head_dim
    outputs, weights = [], []
    for h in range(p.heads):
        cols = (slice(None), slice(h * hd, (h + 1) * hd))
        qh, kh, vh = index(q, cols), index(k, cols), index(v, cols)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(hd))
        w = softmax(scores, axis=-1)
        weights.append(w)
        outputs.append(matmul(w, vh))
    return outputs, weights


def _attention_params(p) -> AttentionParams:
    return p.attention if isinstance(p, TransformerLayerParams) else p


def multi_head_attention(p, seq: Tensor, return_per_head: bool = False):
    """
    Scaled dot-product self-attention

    Args:
        p: TransformerLayerParams or AttentionParams
        seq: (n, d_model)
        return_per_head: return the H pre-concatenation head outputs (each n x d_model/H)

    Returns:
        (n, d_model) tensor, or a list of H per-head tensors
    """
    att = _attention_params(p)
    outputs, _ = _attend(att, seq)
    if return_per_head:
        return outputs
    if att.out is None:
        raise ContractViolation("attention has no output projection; use return_per_head=True")
    return linear(att.out, concat(outputs, axis=1))


def attention_weights(p, seq: Tensor) -> list[np.ndarray]:
    """Per-head (n x n) attention matrices, for inspection"""
    _, weights = _attend(_attention_params(p), seq)
    return [w.data for w in weights]


def transformer_layer(p: TransformerLayerParams, seq: Tensor) -> Tensor:
    """Pre-norm encoder layer: x + MHA(LN(x)), then + FFN(LN(.))"""
    x = add(seq, multi_head_attention(p, layer_norm(seq, p.ln1_gain, p.ln1_bias)))
    hidden = relu(linear(p.ffn_in, layer_norm(x, p.ln2_gain, p.ln2_bias)))
    return add(x, linear(p.ffn_out, hidden))


# ============================================================================
# Convolution
# ============================================================================

@dataclass
class ConvStage:
    weight: Tensor  # (c_in*k*k, c_out)
    bias: Tensor    # (c_out,)
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    @classmethod
    def create(cls, store: ParameterStore, name: str, c_in: int, c_out: int,
               kernel: int = 3, stride: int = 2, padding: int = 1) -> "ConvStage":
        fan_in = c_in * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        return cls(
            weight=store.uniform(f"{name}.weight", (fan_in, c_out), bound),
            bias=store.uniform(f"{name}.bias", (c_out,), bound),
            kernel=kernel, stride=stride, padding=padding,
        )

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]


def conv_stage(stage: ConvStage, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """
    Strided convolution + ReLU on a (C, H, W) map

    Returns:
        (positions x c_out) features and the (Ho, Wo) grid they came from
    """
    cols = im2col(x, stage.kernel, stage.stride, stage.padding)
    if cols.shape[1] != stage.weight.shape[0]:
        raise ContractViolation(f"conv: patch width {cols.shape[1]} != weight rows {stage.weight.shape[0]}")
    return relu(add(matmul(cols, stage.weight), stage.bias)), cols.spatial


def to_feature_map(features: Tensor, grid: tuple[int, int]) -> Tensor:
    """(positions x C) -> (C, Ho, Wo)"""
    return reshape(transpose(features), (features.shape[1], grid[0], grid[1]))

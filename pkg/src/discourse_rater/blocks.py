"""Neural building blocks.

Multi-head attention (self and cross), pre-norm transformer encoder blocks,
the three-layer MLP rating head, a bidirectional LSTM encoder used as a
baseline, and the CLS / sinusoidal-position utilities the sequence models
share.  All blocks are pure functions of (parameters, input) built from the
autodiff primitives in :mod:`.tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import Tensor

# Finite stand-in for -inf: exp(x - max) underflows to exactly 0.0, so masked
# positions get exactly zero attention weight while softmax inputs stay finite.
NEG_FILL = -1e30


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


# -- attention ---------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projections for multi-head attention.

    Queries always come from the 768-wide stream; keys/values may come from a
    context of different width (1024 for audio), absorbed by the K/V
    projections.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    num_heads: int = 12
    model_dim: int = 768
    context_dim: int = 768

    @classmethod
    def create(cls, rng: np.random.Generator, model_dim: int = 768,
               context_dim: int | None = None, num_heads: int = 12) -> "AttentionParams":
        if context_dim is None:
            context_dim = model_dim
        if model_dim % num_heads != 0:
            raise UsageError(f"model_dim {model_dim} not divisible by {num_heads} heads")
        return cls(
            wq=xavier_uniform(rng, model_dim, model_dim),
            bq=zeros_param(model_dim),
            wk=xavier_uniform(rng, context_dim, model_dim),
            bk=zeros_param(model_dim),
            wv=xavier_uniform(rng, context_dim, model_dim),
            bv=zeros_param(model_dim),
            wo=xavier_uniform(rng, model_dim, model_dim),
            bo=zeros_param(model_dim),
            num_heads=num_heads,
            model_dim=model_dim,
            context_dim=context_dim,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}


def multi_head_attention(q_seq: Tensor, kv_seq: Tensor, kv_mask: np.ndarray | None,
                         params: AttentionParams, return_weights: bool = False):
    """Scaled dot-product attention with the query stream kept at model width.

    ``kv_mask`` marks valid context rows; invalid rows receive exactly zero
    attention weight.  Returns ``[Lq, model_dim]`` (and the per-head weight
    array when ``return_weights``).
    """
    if q_seq.shape[1] != params.model_dim:
        raise ShapeError(f"query width {q_seq.shape[1]} != model_dim {params.model_dim}")
    if kv_seq.shape[1] != params.context_dim:
        raise ShapeError(f"context width {kv_seq.shape[1]} != context_dim {params.context_dim}")
    n_kv = kv_seq.shape[0]
    if kv_mask is None:
        kv_mask = np.ones(n_kv, dtype=bool)
    else:
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if kv_mask.shape != (n_kv,):
            raise ShapeError(f"kv_mask shape {kv_mask.shape} != ({n_kv},)")
    if not kv_mask.any():
        raise UsageError("attention needs at least one valid context position")

    n_heads = params.num_heads
    head_dim = params.model_dim // n_heads
    scale = 1.0 / math.sqrt(head_dim)
    n_q = q_seq.shape[0]

    def split_heads(x: Tensor) -> Tensor:
        rows = x.shape[0]
        return T.permute(x.reshape((rows, n_heads, head_dim)), (1, 0, 2))

    q = split_heads(T.matmul(q_seq, params.wq) + params.bq)   # [H, Lq, dh]
    k = split_heads(T.matmul(kv_seq, params.wk) + params.bk)  # [H, Lk, dh]
    v = split_heads(T.matmul(kv_seq, params.wv) + params.bv)

    scores = T.bmm(q, T.permute(k, (0, 2, 1))) * scale        # [H, Lq, Lk]
    if not kv_mask.all():
        scores = T.masked_fill(scores, ~kv_mask[None, None, :], NEG_FILL)
    attn = T.softmax(scores, axis=-1)
    merged = T.permute(T.bmm(attn, v), (1, 0, 2)).reshape((n_q, params.model_dim))
    out = T.matmul(merged, params.wo) + params.bo
    if return_weights:
        return out, attn.data.copy()
    return out


# -- encoder block -----------------------------------------------------------


@dataclass
class EncoderBlockParams:
    """One pre-norm transformer block: attention + 2x-expansion FFN."""

    attention: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    dropout_rate: float = 0.1

    @classmethod
    def create(cls, rng: np.random.Generator, model_dim: int = 768,
               context_dim: int | None = None, num_heads: int = 12,
               ffn_dim: int | None = None, dropout_rate: float = 0.1) -> "EncoderBlockParams":
        if ffn_dim is None:
            ffn_dim = 2 * model_dim
        return cls(
            attention=AttentionParams.create(rng, model_dim, context_dim, num_heads),
            w1=xavier_uniform(rng, model_dim, ffn_dim),
            b1=zeros_param(ffn_dim),
            w2=xavier_uniform(rng, ffn_dim, model_dim),
            b2=zeros_param(model_dim),
            ln1_gain=ones_param(model_dim),
            ln1_bias=zeros_param(model_dim),
            ln2_gain=ones_param(model_dim),
            ln2_bias=zeros_param(model_dim),
            dropout_rate=dropout_rate,
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {f"attn.{k}": v for k, v in self.attention.parameters().items()}
        out.update({
            "ffn.w1": self.w1, "ffn.b1": self.b1,
            "ffn.w2": self.w2, "ffn.b2": self.b2,
            "ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
            "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias,
        })
        return out


def encoder_block(x_seq: Tensor, params: EncoderBlockParams, *,
                  context: Tensor | None = None,
                  x_mask: np.ndarray | None = None,
                  context_mask: np.ndarray | None = None,
                  training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual block: x + Attn(LN(x), ctx), then y + FFN(LN(y)).

    Self-attention over ``x_seq`` when ``context`` is None, cross-attention
    with text as the query otherwise.
    """
    normed = T.layer_norm(x_seq, params.ln1_gain, params.ln1_bias)
    if context is None:
        kv, kv_mask = normed, x_mask
    else:
        kv, kv_mask = context, context_mask
    attn = multi_head_attention(normed, kv, kv_mask, params.attention)
    y = x_seq + dropout(attn, params.dropout_rate, training, rng)
    normed2 = T.layer_norm(y, params.ln2_gain, params.ln2_bias)
    hidden = T.relu(T.matmul(normed2, params.w1) + params.b1)
    ffn = T.matmul(hidden, params.w2) + params.b2
    return y + dropout(ffn, params.dropout_rate, training, rng)


# -- rating head ---------------------------------------------------------------


@dataclass
class HeadParams:
    """Three fully connected layers, 512 hidden units, ReLU between layers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int = 768,
               hidden: int = 512, out_dim: int = 7) -> "HeadParams":
        return cls(
            w1=xavier_uniform(rng, in_dim, hidden), b1=zeros_param(hidden),
            w2=xavier_uniform(rng, hidden, hidden), b2=zeros_param(hidden),
            w3=xavier_uniform(rng, hidden, out_dim), b3=zeros_param(out_dim),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2,
                "b2": self.b2, "w3": self.w3, "b3": self.b3}


def mlp_head(x: Tensor, params: HeadParams, mode: str = "classify") -> Tensor:
    """Map a pooled vector to 7 class probabilities or one unbounded score."""
    if x.ndim != 1:
        raise ShapeError(f"head input must be a vector, got shape {x.shape}")
    if x.shape[0] != params.w1.shape[0]:
        raise ShapeError(f"head input width {x.shape[0]} != {params.w1.shape[0]}")
    if mode not in ("classify", "regress"):
        raise UsageError(f"unknown head mode {mode!r}")
    row = x.reshape((1, x.shape[0]))
    h = T.relu(T.matmul(row, params.w1) + params.b1)
    h = T.relu(T.matmul(h, params.w2) + params.b2)
    logits = T.matmul(h, params.w3) + params.b3
    if mode == "classify":
        return T.softmax(logits, axis=-1).reshape((logits.shape[1],))
    return logits.reshape((logits.shape[1],))


# -- bidirectional LSTM baseline ----------------------------------------------


@dataclass
class LstmCellParams:
    wx: Tensor  # [in, 4h], gate order i, f, g, o
    wh: Tensor  # [h, 4h]
    b: Tensor   # [4h]


@dataclass
class BiLstmParams:
    """Stacked bidirectional LSTM; hidden size equals the input width."""

    layers: list[dict[str, LstmCellParams]] = field(default_factory=list)
    hidden_size: int = 0

    @classmethod
    def create(cls, rng: np.random.Generator, input_dim: int,
               hidden_size: int | None = None, num_layers: int = 2) -> "BiLstmParams":
        h = input_dim if hidden_size is None else hidden_size
        layers = []
        for layer in range(num_layers):
            in_dim = input_dim if layer == 0 else 2 * h
            layers.append({
                direction: LstmCellParams(
                    wx=xavier_uniform(rng, in_dim, 4 * h),
                    wh=xavier_uniform(rng, h, 4 * h),
                    b=zeros_param(4 * h),
                )
                for direction in ("fw", "bw")
            })
        return cls(layers=layers, hidden_size=h)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for direction, cell in layer.items():
                out[f"l{i}.{direction}.wx"] = cell.wx
                out[f"l{i}.{direction}.wh"] = cell.wh
                out[f"l{i}.{direction}.b"] = cell.b
        return out


def _lstm_direction(rows: list[Tensor], cell: LstmCellParams, h_dim: int) -> tuple[list[Tensor], Tensor]:
    """Run one direction over the given row order; returns per-step h and final h."""
    h = Tensor(np.zeros((1, h_dim)))
    c = Tensor(np.zeros((1, h_dim)))
    outputs = []
    for row in rows:
        z = T.matmul(row, cell.wx) + T.matmul(h, cell.wh) + cell.b
        i = T.sigmoid(z[:, 0:h_dim])
        f = T.sigmoid(z[:, h_dim:2 * h_dim])
        g = T.tanh(z[:, 2 * h_dim:3 * h_dim])
        o = T.sigmoid(z[:, 3 * h_dim:4 * h_dim])
        c = f * c + i * g
        h = o * T.tanh(c)
        outputs.append(h)
    return outputs, h


def bilstm_encode(seq: Tensor, params: BiLstmParams) -> Tensor:
    """Concatenate the last layer's final forward and reverse hidden states."""
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise UsageError(f"bilstm_encode needs a nonempty [L, d] sequence, got {seq.shape}")
    h_dim = params.hidden_size
    length = seq.shape[0]
    rows = [seq[t:t + 1] for t in range(length)]
    final_fw = final_bw = None
    for layer in params.layers:
        fw_steps, final_fw = _lstm_direction(rows, layer["fw"], h_dim)
        bw_steps, final_bw = _lstm_direction(rows[::-1], layer["bw"], h_dim)
        bw_steps = bw_steps[::-1]
        rows = [T.concat([fw_steps[t], bw_steps[t]], axis=1) for t in range(length)]
    pooled = T.concat([final_fw, final_bw], axis=1)
    return pooled.reshape((2 * h_dim,))


# -- sequence utilities ---------------------------------------------------------


def prepend_cls(seq: Tensor, cls: Tensor) -> Tensor:
    """Row 0 becomes the CLS embedding; original rows follow unchanged."""
    if cls.ndim != 1:
        raise ShapeError(f"cls must be a vector, got shape {cls.shape}")
    if seq.ndim != 2 or seq.shape[1] != cls.shape[0]:
        raise ShapeError(f"width mismatch: seq {seq.shape} vs cls {cls.shape}")
    return T.concat([cls.reshape((1, cls.shape[0])), seq], axis=0)


def sinusoid_table(length: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Standard sinusoidal position encodings, shape [length, dim]."""
    table = np.zeros((length, dim))
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(base, idx / dim)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


def add_positional(seq: Tensor, enabled: bool = True) -> Tensor:
    if not enabled:
        return seq
    return seq + Tensor(sinusoid_table(seq.shape[0], seq.shape[1]))

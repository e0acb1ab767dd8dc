"""Pre-layer-norm transformer encoder-decoder over the tensorcore engine.

Sinusoidal positional encodings, multi-head attention with pad masking,
causal self-attention in the decoder, and an output projection to target
vocabulary logits under teacher forcing. Parameters live in a flat named
map so checkpoints, averaging, and the optimizer all address tensors by
stable names.

Parameters are immutable during a forward; eval-mode forwards over shared
parameters may run concurrently. Training forwards are confined to one
graph per thread.
"""

from __future__ import annotations

import functools
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .subword import PAD
from .tensorcore import Tensor

MASK_FILL_VALUE = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture constants.

    Defaults are the desk-scale preset (CPU-trainable); ``full_scale`` is the
    reference preset (4 blocks, 8 heads, 1024/2048 dims, dropout 0.2).
    """

    num_blocks: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ffn: int = 128
    dropout: float = 0.2
    max_positions: int = 512
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def full_scale(cls, **overrides) -> "TransformerConfig":
        base = dict(num_blocks=4, num_heads=8, d_model=1024, d_ffn=2048, dropout=0.2)
        base.update(overrides)
        return cls(**base)


@dataclass
class TransformerParams:
    """All trainable tensors, addressable by stable names."""

    config: TransformerConfig
    src_vocab_size: int
    tgt_vocab_size: int
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}


def _param_shapes(cfg: TransformerConfig, src_vocab: int, tgt_vocab: int):
    """Yield (name, shape, kind) in a fixed order; kind drives initialization."""
    d, f = cfg.d_model, cfg.d_ffn
    yield "src_embed.weight", (src_vocab, d), "weight"
    yield "tgt_embed.weight", (tgt_vocab, d), "weight"

    def attn(prefix):
        # no key bias: softmax scores are invariant to a constant key offset,
        # so the parameter would be exactly gradient-free
        for p in ("wq", "wk", "wv", "wo"):
            yield f"{prefix}.{p}.weight", (d, d), "weight"
            if p != "wk":
                yield f"{prefix}.{p}.bias", (d,), "bias"

    def ffn(prefix):
        yield f"{prefix}.w1.weight", (d, f), "weight"
        yield f"{prefix}.w1.bias", (f,), "bias"
        yield f"{prefix}.w2.weight", (f, d), "weight"
        yield f"{prefix}.w2.bias", (d,), "bias"

    def ln(prefix):
        yield f"{prefix}.gain", (d,), "gain"
        yield f"{prefix}.bias", (d,), "bias"

    for i in range(cfg.num_blocks):
        yield from ln(f"enc.{i}.ln1")
        yield from attn(f"enc.{i}.attn")
        yield from ln(f"enc.{i}.ln2")
        yield from ffn(f"enc.{i}.ffn")
    yield from ln("enc.final_ln")
    for i in range(cfg.num_blocks):
        yield from ln(f"dec.{i}.ln1")
        yield from attn(f"dec.{i}.self_attn")
        yield from ln(f"dec.{i}.ln2")
        yield from attn(f"dec.{i}.cross_attn")
        yield from ln(f"dec.{i}.ln3")
        yield from ffn(f"dec.{i}.ffn")
    yield from ln("dec.final_ln")
    if not cfg.tied_embeddings:
        yield "out_proj.weight", (d, tgt_vocab), "weight"
    yield "out_proj.bias", (tgt_vocab,), "bias"


def init_params(cfg: TransformerConfig, src_vocab_size: int, tgt_vocab_size: int,
                seed: int) -> TransformerParams:
    """Deterministic init: weights ~ U(-s, s), s = sqrt(6/(fan_in+fan_out));
    layer-norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _param_shapes(cfg, src_vocab_size, tgt_vocab_size):
        if kind == "weight":
            s = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-s, s, size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return TransformerParams(cfg, src_vocab_size, tgt_vocab_size, tensors)


@functools.lru_cache(maxsize=8)
def _sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(d_model // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def _linear(x: Tensor, params: TransformerParams, prefix: str) -> Tensor:
    return tc.add(tc.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _multi_head_attention(params: TransformerParams, prefix: str, x_q: Tensor,
                          x_kv: Tensor, keep: np.ndarray, train: bool,
                          rng) -> Tensor:
    """keep: bool [B, 1, Tq, Tk], True where attention is allowed."""
    cfg = params.config
    B, Tq = x_q.shape[0], x_q.shape[1]
    Tk = x_kv.shape[1]
    H = cfg.num_heads
    dh = cfg.d_model // H

    def heads(t: Tensor, T: int) -> Tensor:
        return tc.transpose(tc.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x_q, params, f"{prefix}.wq"), Tq)
    k = heads(tc.matmul(x_kv, params[f"{prefix}.wk.weight"]), Tk)
    v = heads(_linear(x_kv, params, f"{prefix}.wv"), Tk)
    scores = tc.sqrt_scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), dh)
    scores = tc.mask_fill(scores, ~keep, MASK_FILL_VALUE)
    attn = tc.softmax(scores)
    ctx = tc.matmul(attn, v)  # [B, H, Tq, dh]
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (B, Tq, cfg.d_model))
    return _linear(ctx, params, f"{prefix}.wo")


def _embed_positions(params: TransformerParams, which: str, ids: np.ndarray,
                     train: bool, rng) -> Tensor:
    cfg = params.config
    T = ids.shape[1]
    if T > cfg.max_positions:
        raise ValueError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
    emb = tc.scale(tc.embed(params[f"{which}_embed.weight"], ids), math.sqrt(cfg.d_model))
    pe = _sinusoid_table(cfg.max_positions, cfg.d_model)[:T]
    x = tc.add(emb, Tensor(np.broadcast_to(pe, emb.shape).copy()))
    return tc.dropout(x, cfg.dropout, rng, train)


def _sublayer(x: Tensor, sub_out: Tensor, p: float, train: bool, rng) -> Tensor:
    return tc.add(x, tc.dropout(sub_out, p, rng, train))


def encode(params: TransformerParams, src_ids: np.ndarray, src_mask: np.ndarray,
           train_mode: bool = False, rng=None) -> Tensor:
    """Encoder states [B, S, d_model]; pad keys are excluded from attention."""
    cfg = params.config
    keep = np.asarray(src_mask, bool)[:, None, None, :]  # [B,1,1,S] -> broadcast over Tq
    x = _embed_positions(params, "src", src_ids, train_mode, rng)
    for i in range(cfg.num_blocks):
        h = tc.layer_norm(x, params[f"enc.{i}.ln1.gain"], params[f"enc.{i}.ln1.bias"])
        x = _sublayer(x, _multi_head_attention(params, f"enc.{i}.attn", h, h, keep,
                                               train_mode, rng), cfg.dropout, train_mode, rng)
        h = tc.layer_norm(x, params[f"enc.{i}.ln2.gain"], params[f"enc.{i}.ln2.bias"])
        ff = _linear(tc.relu(_linear(h, params, f"enc.{i}.ffn.w1")), params, f"enc.{i}.ffn.w2")
        x = _sublayer(x, ff, cfg.dropout, train_mode, rng)
    return tc.layer_norm(x, params["enc.final_ln.gain"], params["enc.final_ln.bias"])


def decode_logits(params: TransformerParams, enc_out: Tensor, src_mask: np.ndarray,
                  tgt_in: np.ndarray, train_mode: bool = False, rng=None) -> Tensor:
    """Decoder logits [B, T, V] given encoder states; causal self-attention."""
    cfg = params.config
    B, T = tgt_in.shape
    tgt_real = tgt_in != PAD
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_keep = causal[None, None, :, :] & tgt_real[:, None, None, :]
    cross_keep = np.asarray(src_mask, bool)[:, None, None, :]
    x = _embed_positions(params, "tgt", tgt_in, train_mode, rng)
    for i in range(cfg.num_blocks):
        h = tc.layer_norm(x, params[f"dec.{i}.ln1.gain"], params[f"dec.{i}.ln1.bias"])
        x = _sublayer(x, _multi_head_attention(params, f"dec.{i}.self_attn", h, h,
                                               self_keep, train_mode, rng),
                      cfg.dropout, train_mode, rng)
        h = tc.layer_norm(x, params[f"dec.{i}.ln2.gain"], params[f"dec.{i}.ln2.bias"])
        x = _sublayer(x, _multi_head_attention(params, f"dec.{i}.cross_attn", h, enc_out,
                                               cross_keep, train_mode, rng),
                      cfg.dropout, train_mode, rng)
        h = tc.layer_norm(x, params[f"dec.{i}.ln3.gain"], params[f"dec.{i}.ln3.bias"])
        ff = _linear(tc.relu(_linear(h, params, f"dec.{i}.ffn.w1")), params, f"dec.{i}.ffn.w2")
        x = _sublayer(x, ff, cfg.dropout, train_mode, rng)
    x = tc.layer_norm(x, params["dec.final_ln.gain"], params["dec.final_ln.bias"])
    if cfg.tied_embeddings:
        proj = tc.transpose(params["tgt_embed.weight"], (1, 0))
        return tc.add(tc.matmul(x, proj), params["out_proj.bias"])
    return tc.add(tc.matmul(x, params["out_proj.weight"]), params["out_proj.bias"])


def forward_teacher_forced(params: TransformerParams, src_ids: np.ndarray,
                           src_mask: np.ndarray, tgt_in: np.ndarray,
                           train_mode: bool = False, rng=None) -> Tensor:
    """Full pass: position t's logits depend only on tgt_in[0..t] and the source."""
    enc = encode(params, src_ids, src_mask, train_mode, rng)
    return decode_logits(params, enc, src_mask, tgt_in, train_mode, rng)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (little-endian):
#   magic   8 bytes  b"CRNMTCKP"
#   version u32      1
#   hlen    u32      header length in bytes
#   header  JSON     {"config": {...}, "src_vocab_size": int,
#                     "tgt_vocab_size": int, "tensors": [[name, [shape]], ...]}
#   data             float64 C-order buffers, concatenated in header order
# Tensors are written sorted by name so identical params serialize to
# identical bytes.

CKPT_MAGIC = b"CRNMTCKP"
CKPT_VERSION = 1


def save_checkpoint(params: TransformerParams, path) -> None:
    names = sorted(params.tensors)
    header = {
        "config": asdict(params.config),
        "src_vocab_size": params.src_vocab_size,
        "tgt_vocab_size": params.tgt_vocab_size,
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        arr = np.ascontiguousarray(params.tensors[n].data, dtype="<f8")
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TransformerParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cfg = TransformerConfig(**header["config"])
    offset = 16 + hlen
    tensors: dict[str, Tensor] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        tensors[name] = Tensor(arr.copy(), requires_grad=True)
    return TransformerParams(cfg, header["src_vocab_size"], header["tgt_vocab_size"], tensors)

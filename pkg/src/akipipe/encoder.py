"""A small bidirectional transformer encoder with exact backpropagation.

Implemented directly on numpy arrays so every gradient is analytic and
checkable against finite differences. The architecture follows the
standard recipe: token + position + segment embeddings with layer
normalization, stacked blocks of multi-head self-attention (additive
-1e9 padding mask before the softmax) and GELU feed-forward sublayers,
each with residual connection and layer normalization, and a tanh
pooler over the final [CLS] state. Parameters live in named tensors;
training runs in float32, and a float64 mode exists for verification.

Checkpoints are a JSON manifest (tensor name, shape, element type,
byte offset, embedded config) followed by one little-endian binary
blob.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    CorruptCheckpoint,
    IdOutOfRange,
    IncompatibleArchitecture,
    SequenceTooLong,
    ShapeMismatch,
)
from .tokenizer import TokenizedSequence

CHECKPOINT_MAGIC = b"AKPCKPT1"
HEAD_NAMES = ("mlm", "nsp", "classifier")
ALL_HEADS = HEAD_NAMES
MASK_BIAS = -1e9
LAYER_NORM_EPS = 1e-12

_SQRT_2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    hidden_dim: int
    ff_dim: int
    vocab_size: int
    max_position: int = 512
    type_vocab: int = 2
    dropout_rate: float = 0.1
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.num_layers, self.num_heads, self.hidden_dim, self.ff_dim) < 1:
            raise ValueError("layer, head, and width counts must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.vocab_size < 1 or self.max_position < 1 or self.type_vocab < 1:
            raise ValueError("vocab_size, max_position, type_vocab must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def architecture_fields(self) -> tuple:
        return (
            self.num_layers,
            self.num_heads,
            self.hidden_dim,
            self.ff_dim,
            self.vocab_size,
            self.max_position,
            self.type_vocab,
        )


def parameter_shapes(
    config: ModelConfig, heads: Sequence[str] = ALL_HEADS
) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every tensor for a config and head set."""
    H, F = config.hidden_dim, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, H),
        "embeddings.position": (config.max_position, H),
        "embeddings.segment": (config.type_vocab, H),
        "embeddings.norm.scale": (H,),
        "embeddings.norm.offset": (H,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}"
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.weight"] = (H, H)
            shapes[f"{p}.attn.{proj}.bias"] = (H,)
        shapes[f"{p}.attn.norm.scale"] = (H,)
        shapes[f"{p}.attn.norm.offset"] = (H,)
        shapes[f"{p}.ffn.w1.weight"] = (H, F)
        shapes[f"{p}.ffn.w1.bias"] = (F,)
        shapes[f"{p}.ffn.w2.weight"] = (F, H)
        shapes[f"{p}.ffn.w2.bias"] = (H,)
        shapes[f"{p}.ffn.norm.scale"] = (H,)
        shapes[f"{p}.ffn.norm.offset"] = (H,)
    shapes["pooler.weight"] = (H, H)
    shapes["pooler.bias"] = (H,)
    if "mlm" in heads:
        shapes["mlm.weight"] = (H, config.vocab_size)
        shapes["mlm.bias"] = (config.vocab_size,)
    if "nsp" in heads:
        shapes["nsp.weight"] = (H, 2)
        shapes["nsp.bias"] = (2,)
    if "classifier" in heads:
        shapes["classifier.weight"] = (H, 2)
        shapes["classifier.bias"] = (2,)
    return shapes


def head_of(name: str) -> str | None:
    """The head a tensor belongs to, or None for shared tensors."""
    prefix = name.split(".", 1)[0]
    return prefix if prefix in HEAD_NAMES else None


@dataclass
class ParameterSet:
    """Named tensor collection for the encoder and its task heads."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def has_head(self, head: str) -> bool:
        return f"{head}.weight" in self.tensors


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with redraws outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def _is_norm_scale(name: str) -> bool:
    return name.endswith("norm.scale")


def _is_bias_like(name: str) -> bool:
    return name.endswith(".bias") or name.endswith("norm.offset")


def init_params(
    config: ModelConfig,
    heads: Sequence[str] = ALL_HEADS,
    dtype=np.float32,
    rng: np.random.Generator | None = None,
) -> ParameterSet:
    """Fresh parameters: truncated-normal weights, unit norm scales, zero biases."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config, heads).items():
        if _is_norm_scale(name):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif _is_bias_like(name):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = _truncated_normal(rng, shape, config.init_std).astype(dtype)
    return ParameterSet(config, tensors)


# --- forward / backward ---


@dataclass
class EncoderBatch:
    ids: np.ndarray            # [B, T] int64
    attention_mask: np.ndarray  # [B, T] int64
    segment_ids: np.ndarray     # [B, T] int64


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray  # [T, H]
    pooled: np.ndarray         # [H]
    attentions: np.ndarray     # [L, heads, T, T]


@dataclass
class BatchOutput:
    hidden: np.ndarray             # [B, T, H]
    pooled: np.ndarray             # [B, H]
    attentions: np.ndarray | None  # [L, B, heads, T, T] when requested


@dataclass
class _NormTrace:
    xhat: np.ndarray
    inv_std: np.ndarray


@dataclass
class _LayerTrace:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    context: np.ndarray
    attn_drop: np.ndarray | None
    norm1: _NormTrace
    y: np.ndarray
    ff_pre: np.ndarray
    ff_act: np.ndarray
    ff_drop: np.ndarray | None
    norm2: _NormTrace


@dataclass
class Trace:
    batch: EncoderBatch
    emb_norm: _NormTrace
    emb_drop: np.ndarray | None
    layers: list[_LayerTrace] = field(default_factory=list)
    hidden: np.ndarray | None = None
    cls_state: np.ndarray | None = None
    pooled: np.ndarray | None = None


def make_batch(seqs: Sequence[TokenizedSequence], config: ModelConfig) -> EncoderBatch:
    """Stack tokenized sequences, padding shorter ones with id 0 / mask 0."""
    if not seqs:
        raise ValueError("empty batch")
    T = max(len(s) for s in seqs)
    if T > config.max_position:
        raise SequenceTooLong(f"sequence length {T} exceeds max_position {config.max_position}")
    B = len(seqs)
    ids = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.int64)
    segs = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s.ids
        mask[b, : len(s)] = s.attention_mask
        segs[b, : len(s)] = s.segment_ids
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise IdOutOfRange(
            f"token ids must lie in [0, {config.vocab_size}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    if segs.min() < 0 or segs.max() >= config.type_vocab:
        raise IdOutOfRange("segment ids out of range")
    return EncoderBatch(ids, mask, segs)


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + erf(x / _SQRT_2)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    return scale * xhat + offset, _NormTrace(xhat, inv_std)


def _layer_norm_backward(d_out: np.ndarray, scale: np.ndarray, tr: _NormTrace):
    H = d_out.shape[-1]
    dxhat = d_out * scale
    d_scale = np.sum(d_out * tr.xhat, axis=tuple(range(d_out.ndim - 1)))
    d_offset = np.sum(d_out, axis=tuple(range(d_out.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * tr.xhat).mean(axis=-1, keepdims=True)
    dx = tr.inv_std * (dxhat - mean_dxhat - tr.xhat * mean_dxhat_xhat)
    return dx, d_scale, d_offset


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    B, T, H = x.shape
    return x.reshape(B, T, num_heads, H // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, nh, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * dh)


class _DropoutStream:
    """Draws inverted-dropout masks in a fixed order, or None when inactive."""

    def __init__(self, rate: float, active: bool, seed: int, scalar_type):
        self.rate = rate
        self.active = active and rate > 0.0
        self.rng = np.random.default_rng(seed) if self.active else None
        self.scalar_type = scalar_type

    def mask(self, shape) -> np.ndarray | None:
        if not self.active:
            return None
        keep = (self.rng.random(shape) >= self.rate).astype(self.scalar_type)
        return keep / self.scalar_type(1.0 - self.rate)


def _apply_drop(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return x if mask is None else x * mask


def forward_batch(
    params: ParameterSet,
    batch: EncoderBatch,
    train_mode: bool = False,
    dropout_seed: int = 0,
    keep_trace: bool = False,
    keep_attentions: bool = False,
) -> tuple[BatchOutput, Trace | None]:
    """Run the encoder over a prepared batch.

    Dropout is active only in train mode and is driven entirely by
    ``dropout_seed``, so identical inputs give bitwise-identical
    outputs. Attention maps are stacked into the output only on
    request (at 512 positions they dwarf everything else).
    """
    cfg = params.config
    t = params.tensors
    dt = params.dtype.type
    ids, mask, segs = batch.ids, batch.attention_mask, batch.segment_ids
    B, T = ids.shape
    if T > cfg.max_position:
        raise SequenceTooLong(f"sequence length {T} exceeds max_position {cfg.max_position}")

    drops = _DropoutStream(cfg.dropout_rate, train_mode, dropout_seed, dt)

    x = t["embeddings.token"][ids] + t["embeddings.position"][:T][None, :, :] \
        + t["embeddings.segment"][segs]
    x, emb_norm = _layer_norm(x, t["embeddings.norm.scale"], t["embeddings.norm.offset"])
    emb_drop = drops.mask(x.shape)
    x = _apply_drop(x, emb_drop)

    trace = Trace(batch=batch, emb_norm=emb_norm, emb_drop=emb_drop) if keep_trace else None
    attn_bias = np.where(mask[:, None, None, :] == 0, dt(MASK_BIAS), dt(0.0))
    scale = 1.0 / np.sqrt(cfg.head_dim)

    attentions = []
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        q = _split_heads(x @ t[f"{p}.attn.q.weight"] + t[f"{p}.attn.q.bias"], cfg.num_heads)
        k = _split_heads(x @ t[f"{p}.attn.k.weight"] + t[f"{p}.attn.k.bias"], cfg.num_heads)
        v = _split_heads(x @ t[f"{p}.attn.v.weight"] + t[f"{p}.attn.v.bias"], cfg.num_heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * dt(scale) + attn_bias
        attn = _softmax(scores)
        context = _merge_heads(attn @ v)
        out = context @ t[f"{p}.attn.out.weight"] + t[f"{p}.attn.out.bias"]
        attn_drop = drops.mask(out.shape)
        out = _apply_drop(out, attn_drop)
        y, norm1 = _layer_norm(
            x + out, t[f"{p}.attn.norm.scale"], t[f"{p}.attn.norm.offset"]
        )
        ff_pre = y @ t[f"{p}.ffn.w1.weight"] + t[f"{p}.ffn.w1.bias"]
        ff_act = _gelu(ff_pre)
        ff_out = ff_act @ t[f"{p}.ffn.w2.weight"] + t[f"{p}.ffn.w2.bias"]
        ff_drop = drops.mask(ff_out.shape)
        ff_out = _apply_drop(ff_out, ff_drop)
        z, norm2 = _layer_norm(
            y + ff_out, t[f"{p}.ffn.norm.scale"], t[f"{p}.ffn.norm.offset"]
        )
        if keep_attentions:
            attentions.append(attn)
        if trace is not None:
            trace.layers.append(
                _LayerTrace(
                    x=x, q=q, k=k, v=v, attn=attn, context=context,
                    attn_drop=attn_drop, norm1=norm1, y=y, ff_pre=ff_pre,
                    ff_act=ff_act, ff_drop=ff_drop, norm2=norm2,
                )
            )
        x = z

    cls_state = x[:, 0, :]
    pooled = np.tanh(cls_state @ t["pooler.weight"] + t["pooler.bias"])
    if trace is not None:
        trace.hidden = x
        trace.cls_state = cls_state
        trace.pooled = pooled
    output = BatchOutput(
        hidden=x,
        pooled=pooled,
        attentions=np.stack(attentions, axis=0) if keep_attentions else None,
    )
    return output, trace


def forward(
    params: ParameterSet,
    seqs: Sequence[TokenizedSequence],
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> list[EncoderOutput]:
    """Encode a batch of tokenized sequences, one output per sequence."""
    batch = make_batch(seqs, params.config)
    out, _ = forward_batch(
        params, batch, train_mode=train_mode, dropout_seed=dropout_seed,
        keep_attentions=True,
    )
    return [
        EncoderOutput(
            hidden_states=out.hidden[b],
            pooled=out.pooled[b],
            attentions=out.attentions[:, b],
        )
        for b in range(len(seqs))
    ]


def zero_grads(params: ParameterSet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(tensor) for name, tensor in params.tensors.items()}


def backward(
    params: ParameterSet,
    trace: Trace,
    d_hidden: np.ndarray | None = None,
    d_pooled: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradients of every parameter tensor.

    ``d_hidden`` is the upstream gradient w.r.t. the final hidden
    states [B, T, H]; ``d_pooled`` w.r.t. the pooler output [B, H].
    Task-head tensors not on this path come back as zeros.
    """
    cfg = params.config
    t = params.tensors
    grads = zero_grads(params)
    assert trace.hidden is not None, "trace must come from forward_batch(keep_trace=True)"

    dx = np.zeros_like(trace.hidden) if d_hidden is None else d_hidden.copy()
    if d_pooled is not None:
        du = d_pooled * (1.0 - trace.pooled * trace.pooled)
        grads["pooler.weight"] += trace.cls_state.T @ du
        grads["pooler.bias"] += du.sum(axis=0)
        dx[:, 0, :] += du @ t["pooler.weight"].T

    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}"
        tr = trace.layers[i]
        B, T, H = tr.x.shape

        # feed-forward sublayer
        d_r2, g_scale2, g_offset2 = _layer_norm_backward(
            dx, t[f"{p}.ffn.norm.scale"], tr.norm2
        )
        grads[f"{p}.ffn.norm.scale"] += g_scale2
        grads[f"{p}.ffn.norm.offset"] += g_offset2
        d_ff_out = _apply_drop(d_r2, tr.ff_drop)
        flat_act = tr.ff_act.reshape(-1, cfg.ff_dim)
        flat_dff = d_ff_out.reshape(-1, H)
        grads[f"{p}.ffn.w2.weight"] += flat_act.T @ flat_dff
        grads[f"{p}.ffn.w2.bias"] += flat_dff.sum(axis=0)
        d_act = d_ff_out @ t[f"{p}.ffn.w2.weight"].T
        d_pre = d_act * _gelu_grad(tr.ff_pre)
        flat_y = tr.y.reshape(-1, H)
        flat_dpre = d_pre.reshape(-1, cfg.ff_dim)
        grads[f"{p}.ffn.w1.weight"] += flat_y.T @ flat_dpre
        grads[f"{p}.ffn.w1.bias"] += flat_dpre.sum(axis=0)
        d_y = d_r2 + d_pre @ t[f"{p}.ffn.w1.weight"].T

        # attention sublayer
        d_r1, g_scale1, g_offset1 = _layer_norm_backward(
            d_y, t[f"{p}.attn.norm.scale"], tr.norm1
        )
        grads[f"{p}.attn.norm.scale"] += g_scale1
        grads[f"{p}.attn.norm.offset"] += g_offset1
        d_out = _apply_drop(d_r1, tr.attn_drop)
        flat_ctx = tr.context.reshape(-1, H)
        flat_dout = d_out.reshape(-1, H)
        grads[f"{p}.attn.out.weight"] += flat_ctx.T @ flat_dout
        grads[f"{p}.attn.out.bias"] += flat_dout.sum(axis=0)
        d_context = _split_heads(d_out @ t[f"{p}.attn.out.weight"].T, cfg.num_heads)
        d_attn = d_context @ tr.v.transpose(0, 1, 3, 2)
        d_v = tr.attn.transpose(0, 1, 3, 2) @ d_context
        d_scores = tr.attn * (d_attn - np.sum(d_attn * tr.attn, axis=-1, keepdims=True))
        d_q = (d_scores @ tr.k) * params.dtype.type(scale)
        d_k = (d_scores.transpose(0, 1, 3, 2) @ tr.q) * params.dtype.type(scale)

        dx_layer = d_r1
        flat_x = tr.x.reshape(-1, H)
        for proj, d_heads in (("q", d_q), ("k", d_k), ("v", d_v)):
            d_flat = _merge_heads(d_heads).reshape(-1, H)
            grads[f"{p}.attn.{proj}.weight"] += flat_x.T @ d_flat
            grads[f"{p}.attn.{proj}.bias"] += d_flat.sum(axis=0)
            dx_layer = dx_layer + _merge_heads(d_heads) @ t[f"{p}.attn.{proj}.weight"].T
        dx = dx_layer

    # embeddings
    d_emb_out = _apply_drop(dx, trace.emb_drop)
    d_emb, g_scale0, g_offset0 = _layer_norm_backward(
        d_emb_out, t["embeddings.norm.scale"], trace.emb_norm
    )
    grads["embeddings.norm.scale"] += g_scale0
    grads["embeddings.norm.offset"] += g_offset0
    ids = trace.batch.ids
    segs = trace.batch.segment_ids
    H = d_emb.shape[-1]
    np.add.at(grads["embeddings.token"], ids.reshape(-1), d_emb.reshape(-1, H))
    grads["embeddings.position"][: d_emb.shape[1]] += d_emb.sum(axis=0)
    np.add.at(grads["embeddings.segment"], segs.reshape(-1), d_emb.reshape(-1, H))
    return grads


# --- checkpoints ---


@dataclass
class Checkpoint:
    params: ParameterSet
    extra_tensors: dict[str, np.ndarray]
    meta: dict


_DTYPE_CODES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(
    params: ParameterSet,
    path: str | Path,
    extra_tensors: Mapping[str, np.ndarray] | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write params (plus optional extra tensors, e.g. optimizer moments)."""
    entries = []
    blobs = []
    offset = 0
    named = dict(params.tensors)
    if extra_tensors:
        named.update(extra_tensors)
    for name, tensor in named.items():
        code = _DTYPE_CODES[np.dtype(tensor.dtype)]
        data = np.ascontiguousarray(tensor, dtype=tensor.dtype).astype(
            np.dtype(code), copy=False
        ).tobytes()
        entries.append(
            {"name": name, "shape": list(tensor.shape), "dtype": code, "offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps(
        {"config": asdict(params.config), "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(len(manifest).to_bytes(8, "little"))
        handle.write(manifest)
        for blob in blobs:
            handle.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint, validating shapes against its embedded config."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    manifest_len = int.from_bytes(raw[len(CHECKPOINT_MAGIC) : len(CHECKPOINT_MAGIC) + 8], "little")
    header_end = len(CHECKPOINT_MAGIC) + 8 + manifest_len
    if len(raw) < header_end:
        raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(CHECKPOINT_MAGIC) + 8 : header_end].decode("utf-8"))
        config = ModelConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: bad manifest: {exc}") from exc
    blob = raw[header_end:]

    expected = parameter_shapes(config, ALL_HEADS)
    params_tensors: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = _CODE_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CorruptCheckpoint(f"{path}: unknown element type {entry['dtype']!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CorruptCheckpoint(f"{path}: blob truncated at tensor {name!r}")
        base = name.removeprefix("adam.m.").removeprefix("adam.v.")
        if base in expected and shape != expected[base]:
            raise ShapeMismatch(
                f"{path}: tensor {name!r} has shape {shape}, config implies {expected[base]}"
            )
        tensor = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
        if name.startswith("adam."):
            extra[name] = tensor
        else:
            params_tensors[name] = tensor
    return Checkpoint(
        params=ParameterSet(config, params_tensors),
        extra_tensors=extra,
        meta=manifest.get("meta", {}),
    )


@dataclass
class ImportReport:
    copied: list[str]
    initialized: list[str]


def import_initialization(
    target_config: ModelConfig,
    source: ParameterSet,
    heads: Sequence[str] = ALL_HEADS,
    seed: int | None = None,
) -> tuple[ParameterSet, ImportReport]:
    """Initialize a model from an existing one, adding missing task heads.

    The source architecture must equal the target's; every source
    tensor is copied, and any requested head absent from the source is
    freshly initialized (seeded). Missing non-head tensors mean the
    checkpoint does not fit the architecture.
    """
    if source.config.architecture_fields() != target_config.architecture_fields():
        raise IncompatibleArchitecture(
            f"source architecture {source.config.architecture_fields()} != "
            f"target {target_config.architecture_fields()}"
        )
    expected = parameter_shapes(target_config, ALL_HEADS)
    for name, tensor in source.tensors.items():
        if name in expected and tensor.shape != expected[name]:
            raise ShapeMismatch(
                f"tensor {name!r}: shape {tensor.shape} vs expected {expected[name]}"
            )
    missing_shared = [
        name
        for name in parameter_shapes(target_config, heads=())
        if name not in source.tensors
    ]
    if missing_shared:
        raise IncompatibleArchitecture(f"source lacks shared tensors: {missing_shared}")

    rng = np.random.default_rng(target_config.seed if seed is None else seed)
    dtype = source.dtype
    tensors: dict[str, np.ndarray] = {}
    copied: list[str] = []
    initialized: list[str] = []
    for name, tensor in source.tensors.items():
        tensors[name] = tensor.copy()
        copied.append(name)
    for name, shape in parameter_shapes(target_config, heads).items():
        if name in tensors:
            continue
        if _is_norm_scale(name):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif _is_bias_like(name):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = _truncated_normal(rng, shape, target_config.init_std).astype(dtype)
        initialized.append(name)
    return ParameterSet(target_config, tensors), ImportReport(copied, initialized)

"""Multimodal transformer: patch/metadata embeddings, self- and cross-attention, softmax head.

Pipeline for one batch (``B`` samples, ``N`` fMRI tokens, ``K`` metadata tokens)::

    Z_f = tokens_f @ W_e^T + PE          (B, N, d)
    Z_m = tokens_m @ W_m^T               (B, K, d)
    Z   = self-attention^L_self([Z_f; Z_m])
    Z_f = cross-attention^L_cross(Z_f <- Z_m)
    fused = mean over the N fMRI rows    (B, d)
    probs = softmax(fused @ W_out^T)     (B, C)

Weight matrices are stored as (out_features, in_features).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, FormatError, ShapeError
from .fmri import TokenSequence, atomic_write
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    heads: int = 4
    L_self: int = 2
    L_cross: int = 1
    ff_mult: int = 4
    dropout_rate: float = 0.1
    C: int = 2
    p: int | None = None
    f: int | None = None
    K: int | None = None
    N: int | None = None

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"embedding dim d must be even and >= 2, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.L_self < 0 or self.L_cross < 0 or self.ff_mult < 1:
            raise ConfigError("layer counts must be >= 0 and ff_mult >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.C < 2:
            raise ConfigError(f"class count C must be >= 2, got {self.C}")
        for name in ("p", "f", "K", "N"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    @property
    def complete(self) -> bool:
        return None not in (self.p, self.f, self.K, self.N)

    def with_shapes(self, **shapes) -> ModelConfig:
        return replace(self, **shapes)

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        unknown = sorted(set(obj) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map; the order is also the checkpoint payload order."""
    if not cfg.complete:
        raise ConfigError("model config needs p, f, K and N before parameters can be built")
    d, hidden = cfg.d, cfg.ff_mult * cfg.d
    shapes = {"W_e": (d, cfg.p), "W_m": (d, cfg.f)}
    for l in range(cfg.L_self):
        pre = f"self{l}."
        shapes.update({
            pre + "ln1.gamma": (d,), pre + "ln1.beta": (d,),
            pre + "W_q": (d, d), pre + "W_k": (d, d), pre + "W_v": (d, d), pre + "W_o": (d, d),
            pre + "ln2.gamma": (d,), pre + "ln2.beta": (d,),
            pre + "ff1": (hidden, d), pre + "ff2": (d, hidden),
        })
    for l in range(cfg.L_cross):
        pre = f"cross{l}."
        shapes.update({
            pre + "ln.gamma": (d,), pre + "ln.beta": (d,),
            pre + "W_q": (d, d), pre + "W_k": (d, d), pre + "W_v": (d, d), pre + "W_o": (d, d),
        })
    shapes["W_out"] = (cfg.C, d)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta"):
            value = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: PE[i, 2j] = sin(i / 10000^(2j/d)), PE[i, 2j+1] = cos(...)."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def _tokens(x, width: int, what: str) -> Tensor:
    if isinstance(x, TokenSequence):
        x = x.values
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[-1] != width:
        raise ShapeError(f"{what} token width {t.shape[-1]} does not match expected {width}")
    return t


def embed_fmri(tokens, params: dict) -> Tensor:
    """Rows W_e . p_i + PE(i); accepts (N, p) or (B, N, p)."""
    W_e = params["W_e"]
    x = _tokens(tokens, W_e.shape[1], "fMRI")
    pe = positional_encoding(x.shape[-2], W_e.shape[0])
    return tn.linear(x, W_e) + Tensor._wrap(pe)


def embed_meta(tokens, params: dict) -> Tensor:
    """Rows W_m . x_k; no positional term."""
    W_m = params["W_m"]
    return tn.linear(_tokens(tokens, W_m.shape[1], "metadata"), W_m)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, d = x.shape
    return x.reshape(B, S, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, S, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, h * dk)


def attention(q: Tensor, k: Tensor, v: Tensor):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; returns (context, weights)."""
    q = q * (1.0 / math.sqrt(q.shape[-1]))
    weights = tn.softmax_rows(q @ k.transpose(0, 1, 3, 2))
    return weights @ v, weights


def _batched(z: Tensor) -> tuple:
    if z.ndim == 2:
        return z.reshape(1, *z.shape), True
    if z.ndim != 3:
        raise ShapeError(f"expected (S, d) or (B, S, d) activations, got {z.shape}")
    return z, False


def self_attention_layer(Z: Tensor, layer: dict, heads: int, rng=None, training=False, rate=0.0):
    """Pre-LN residual block over all tokens. ``layer`` maps short names (W_q, ff1, ...) to tensors.

    Returns (new activations, attention weights of shape (B, heads, S, S)).
    """
    Z, squeeze = _batched(Z)
    if Z.shape[-1] != layer["W_q"].shape[1]:
        raise ShapeError(f"activation width {Z.shape[-1]} does not match layer width {layer['W_q'].shape[1]}")
    h = tn.layer_norm(Z, layer["ln1.gamma"], layer["ln1.beta"], LN_EPS)
    q = _split_heads(tn.linear(h, layer["W_q"]), heads)
    k = _split_heads(tn.linear(h, layer["W_k"]), heads)
    v = _split_heads(tn.linear(h, layer["W_v"]), heads)
    context, weights = attention(q, k, v)
    Z = Z + tn.dropout_apply(tn.linear(_merge_heads(context), layer["W_o"]), rate, rng, training)
    h = tn.layer_norm(Z, layer["ln2.gamma"], layer["ln2.beta"], LN_EPS)
    ff = tn.linear(tn.gelu(tn.linear(h, layer["ff1"])), layer["ff2"])
    Z = Z + tn.dropout_apply(ff, rate, rng, training)
    if squeeze:
        Z = Z.reshape(Z.shape[1:])
    return Z, weights.data


def _canonical_order(z: np.ndarray) -> np.ndarray:
    """Per-sample row order sorting metadata tokens lexicographically by value."""
    return np.stack([np.lexsort(sample.T[::-1]) for sample in z])


def cross_attention_layer(Z_fmri: Tensor, Z_meta: Tensor, layer: dict, heads: int, rng=None, training=False, rate=0.0):
    """fMRI queries attend over metadata keys/values; metadata rows are not updated.

    Key/value rows are put in a canonical value-sorted order before the
    attention sums, so the output is bitwise independent of the order in
    which metadata tokens arrive. Returned weights are mapped back to the
    caller's metadata order, shape (B, heads, N, K).
    """
    Z_fmri, squeeze = _batched(Z_fmri)
    Z_meta, _ = _batched(Z_meta)
    if Z_fmri.shape[0] != Z_meta.shape[0] or Z_fmri.shape[-1] != Z_meta.shape[-1]:
        raise ShapeError(f"cross-attention shapes do not conform: {Z_fmri.shape} vs {Z_meta.shape}")
    if Z_fmri.shape[-1] != layer["W_q"].shape[1]:
        raise ShapeError(f"activation width {Z_fmri.shape[-1]} does not match layer width {layer['W_q'].shape[1]}")
    order = _canonical_order(Z_meta.data)
    batch_index = np.arange(order.shape[0])[:, None]
    meta_sorted = tn.take(Z_meta, (batch_index, order))

    h = tn.layer_norm(Z_fmri, layer["ln.gamma"], layer["ln.beta"], LN_EPS)
    q = _split_heads(tn.linear(h, layer["W_q"]), heads)
    k = _split_heads(tn.linear(meta_sorted, layer["W_k"]), heads)
    v = _split_heads(tn.linear(meta_sorted, layer["W_v"]), heads)
    context, weights = attention(q, k, v)
    out = Z_fmri + tn.dropout_apply(tn.linear(_merge_heads(context), layer["W_o"]), rate, rng, training)

    restored = np.empty_like(weights.data)
    for b in range(order.shape[0]):
        restored[b][..., order[b]] = weights.data[b]
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out, restored


@dataclass
class AttentionMaps:
    """Attention weights for one forward pass, batched along the first axis.

    ``self_layers[l]`` has shape (B, heads, N+K, N+K); ``cross_layers[l]`` has
    shape (B, heads, N, K). ``legend`` names the token behind each row.
    """

    self_layers: list = field(default_factory=list)
    cross_layers: list = field(default_factory=list)
    legend: list = field(default_factory=list)
    n_fmri: int = 0

    def for_sample(self, i: int) -> AttentionMaps:
        return AttentionMaps(
            [w[i:i + 1] for w in self.self_layers],
            [w[i:i + 1] for w in self.cross_layers],
            list(self.legend),
            self.n_fmri,
        )

    def all_weights(self):
        yield from self.self_layers
        yield from self.cross_layers


@dataclass
class ForwardOutput:
    probs: Tensor
    logits: Tensor
    fused: Tensor
    attention: AttentionMaps


def _layer(params: dict, prefix: str) -> dict:
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def token_legend(n_fmri: int, meta_names) -> list:
    return [f"fmri:{i}" for i in range(n_fmri)] + [f"meta:{name}" for name in meta_names]


def forward(params: dict, cfg: ModelConfig, fmri_tokens, meta_tokens, rng=None, training=False, meta_names=None) -> ForwardOutput:
    """Run the full model on one sample ((N, p), (K, f)) or a batch ((B, N, p), (B, K, f))."""
    z_f = embed_fmri(fmri_tokens, params)
    z_m = embed_meta(meta_tokens, params)
    z_f, single = _batched(z_f)
    z_m, _ = _batched(z_m)
    if z_f.shape[0] != z_m.shape[0]:
        raise ShapeError(f"batch sizes differ: {z_f.shape[0]} fMRI vs {z_m.shape[0]} metadata")
    if cfg.N is not None and z_f.shape[1] != cfg.N:
        raise ShapeError(f"expected {cfg.N} fMRI tokens, got {z_f.shape[1]}")
    if cfg.K is not None and z_m.shape[1] != cfg.K:
        raise ShapeError(f"expected {cfg.K} metadata tokens, got {z_m.shape[1]}")
    n = z_f.shape[1]
    names = meta_names or [str(k) for k in range(z_m.shape[1])]
    maps = AttentionMaps(legend=token_legend(n, names), n_fmri=n)
    rate = cfg.dropout_rate

    if cfg.L_self:
        z = tn.concat([z_f, z_m], axis=1)
        for l in range(cfg.L_self):
            z, w = self_attention_layer(z, _layer(params, f"self{l}."), cfg.heads, rng, training, rate)
            maps.self_layers.append(w)
        z_f, z_m = z[:, :n], z[:, n:]
    for l in range(cfg.L_cross):
        z_f, w = cross_attention_layer(z_f, z_m, _layer(params, f"cross{l}."), cfg.heads, rng, training, rate)
        maps.cross_layers.append(w)

    fused = z_f.mean(axis=1)
    logits = tn.linear(fused, params["W_out"])
    probs = tn.softmax_rows(logits)
    if single:
        fused, logits, probs = fused.reshape(-1), logits.reshape(-1), probs.reshape(-1)
    return ForwardOutput(probs, logits, fused, maps)


def export_attention(maps: AttentionMaps, path, sample: int = 0) -> dict:
    """Write one sample's attention matrices as JSON; rows are re-checked to sum to 1."""
    layers = []
    kinds = [("self", w) for w in maps.self_layers] + [("cross", w) for w in maps.cross_layers]
    counts = {"self": 0, "cross": 0}
    n, total = maps.n_fmri, len(maps.legend)
    for kind, weights in kinds:
        w = np.asarray(weights[sample])
        if not np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-9):
            raise ShapeError(f"{kind} attention layer {counts[kind]} has a row not summing to 1")
        rows = list(range(total)) if kind == "self" else list(range(n))
        cols = list(range(total)) if kind == "self" else list(range(n, total))
        layers.append({
            "kind": kind,
            "index": counts[kind],
            "rows": rows,
            "cols": cols,
            "heads": w.tolist(),
        })
        counts[kind] += 1
    doc = {"legend": list(maps.legend), "n_fmri": n, "n_meta": total - n, "layers": layers}
    atomic_write(path, (json.dumps(doc) + "\n").encode())
    return doc


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, float64 LE payload

CKPT_MAGIC = b"FUSECKPT"
CKPT_VERSION = 1


def checkpoint_bytes(cfg: ModelConfig, params: dict, extra: dict | None = None) -> bytes:
    shapes = parameter_shapes(cfg)
    manifest = [{"name": name, "shape": list(shape)} for name, shape in shapes.items()]
    header = {"format_version": CKPT_VERSION, "model": cfg.to_dict(), "parameters": manifest, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(params[name].data, dtype="<f8").tobytes() for name in shapes
    )
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(cfg, params, extra))


def load_checkpoint(path) -> tuple:
    """Return (ModelConfig, params, extra)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)", offset=0)
    if len(raw) < 16:
        raise FormatError("checkpoint header length truncated", offset=len(raw))
    (head_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + head_len > len(raw):
        raise FormatError("checkpoint header truncated", offset=len(raw))
    header = json.loads(raw[16:16 + head_len])
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}", offset=16)
    cfg = ModelConfig.from_dict(header["model"])
    shapes = parameter_shapes(cfg)
    manifest = {entry["name"]: tuple(entry["shape"]) for entry in header["parameters"]}
    if manifest != shapes:
        raise FormatError("checkpoint parameter manifest does not match its model config", offset=16)
    pos, params = 16 + head_len, {}
    for name, shape in shapes.items():
        nbytes = 8 * math.prod(shape)
        if pos + nbytes > len(raw):
            raise FormatError(f"payload truncated in parameter {name}", offset=pos)
        values = np.frombuffer(raw, dtype="<f8", count=math.prod(shape), offset=pos).reshape(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after checkpoint payload", offset=pos)
    return cfg, params, header.get("extra", {})

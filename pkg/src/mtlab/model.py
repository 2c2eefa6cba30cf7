"""Pre-LN encoder-decoder transformer built on :mod:`mtlab.autodiff`.

Layout choices: one embedding table shared by encoder input, decoder input
and the output projection (logits = h @ E^T, no output bias); fixed
sinusoidal positions; GELU feed-forward; final layer norm on both stacks.

Parameter count for vocab V, width D, feed-forward F, L layers per stack::

    V*D                                        shared embedding
  + L * (4*D*D + 4*D  + 2*D*F + F + D + 2*2*D) encoder layer
  + L * (8*D*D + 8*D  + 2*D*F + F + D + 3*2*D) decoder layer
  + 2*2*D                                      final norms

(attention = four D x D projections with biases; decoder layers have self-
and cross-attention; each layer norm has a gain and a bias.)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "ConfigError",
    "LengthError",
    "Transformer",
    "init_params",
    "forward",
    "greedy_decode",
    "param_count",
    "positional_encoding",
]

_CKPT_MAGIC = "mtlab-checkpoint v1"
_MASK = -1e9


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq_len: int = 64
    vocab_size: int = 512
    dropout_rate: float = 0.1

    def validate(self) -> "ModelConfig":
        if min(self.num_layers, self.num_heads, self.d_model, self.d_ff, self.vocab_size) < 1:
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        return self

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw}).validate()


def param_count(cfg: ModelConfig) -> int:
    v, d, f, n = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.num_layers
    enc = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    dec = 8 * d * d + 8 * d + 2 * d * f + f + d + 6 * d
    return v * d + n * (enc + dec) + 4 * d


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff

    def attn(prefix):
        out = []
        for w in "qkvo":
            out += [(f"{prefix}.w{w}", (d, d)), (f"{prefix}.b{w}", (d,))]
        return out

    def norm(prefix):
        return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]

    def ff(prefix):
        return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)),
                (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]

    shapes = [("embed", (cfg.vocab_size, d))]
    for i in range(cfg.num_layers):
        p = f"enc.{i}"
        shapes += norm(f"{p}.ln1") + attn(f"{p}.attn") + norm(f"{p}.ln2") + ff(f"{p}.ff")
    shapes += norm("enc.ln")
    for i in range(cfg.num_layers):
        p = f"dec.{i}"
        shapes += (norm(f"{p}.ln1") + attn(f"{p}.self") + norm(f"{p}.ln2")
                   + attn(f"{p}.cross") + norm(f"{p}.ln3") + ff(f"{p}.ff"))
    shapes += norm("dec.ln")
    return shapes


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


class Transformer:
    """Config plus named parameter tensors in a fixed order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config.validate()
        expected = _param_shapes(config)
        if [k for k, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params
        self.positions = positional_encoding(config.max_seq_len, config.d_model)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "Transformer":
        return Transformer(self.config, {k: Tensor(t.data, requires_grad=True, name=k)
                                         for k, t in self.params.items()})

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- checkpoint ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        head = [_CKPT_MAGIC]
        head += [f"{f.name}={getattr(self.config, f.name)!r}" for f in fields(ModelConfig)]
        head += [f"tensors={len(self.params)}"]
        head += [f"{k} {'x'.join(map(str, t.shape))}" for k, t in self.params.items()]
        head += ["end", ""]
        body = b"".join(t.data.astype("<f8").tobytes() for t in self.params.values())
        return "\n".join(head).encode("ascii") + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Transformer":
        marker = b"\nend\n"
        cut = blob.find(marker)
        if not blob.startswith(_CKPT_MAGIC.encode()) or cut < 0:
            raise ConfigError("not an mtlab checkpoint")
        lines = blob[:cut].decode("ascii").split("\n")[1:]
        types = {f.name: f.type for f in fields(ModelConfig)}
        kw = {}
        i = 0
        while not lines[i].startswith("tensors="):
            key, val = lines[i].split("=", 1)
            kw[key] = float(val) if types[key] in ("float", float) else int(val)
            i += 1
        n = int(lines[i].split("=", 1)[1])
        specs = [ln.split(" ") for ln in lines[i + 1:i + 1 + n]]
        config = ModelConfig(**kw)
        raw = blob[cut + len(marker):]
        params, off = {}, 0
        for name, dims in specs:
            shape = tuple(int(x) for x in dims.split("x"))
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
            off += 8 * count
        if off != len(raw):
            raise ConfigError(f"checkpoint body has {len(raw)} bytes, header implies {off}")
        return cls(config, params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Transformer":
        return cls.from_bytes(Path(path).read_bytes())


def init_params(config: ModelConfig, seed: int = 0) -> Transformer:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Transformer(config, params)


# --- forward pass -------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.linear(x, w, b)


def _attention(m: Transformer, prefix: str, q_in: Tensor, kv_in: Tensor,
               mask: np.ndarray, cache: dict | None = None) -> Tensor:
    """Multi-head attention; ``mask`` is additive, broadcast to [B, H, Tq, Tk].

    With ``cache`` (inference only) new keys/values are appended to the
    cached ones, or for cross-attention computed once and reused.
    """
    p = m.params
    q = _linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    if cache is not None and cache.get("static"):
        k, v = cache["k"], cache["v"]
    else:
        k = _linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = _linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        if cache is not None:
            if "k" in cache:
                k = Tensor._wrap(np.concatenate([cache["k"].data, k.data], axis=1))
                v = Tensor._wrap(np.concatenate([cache["v"].data, v.data], axis=1))
            cache["k"], cache["v"] = k, v
    ctx = ad.attention(q, k, v, mask, m.config.num_heads)
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _feed_forward(m: Transformer, prefix: str, x: Tensor) -> Tensor:
    p = m.params
    return _linear(ad.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])),
                   p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _norm(m: Transformer, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, m.params[f"{prefix}.g"], m.params[f"{prefix}.b"])


def _embed(m: Transformer, ids: np.ndarray, start: int, rng) -> Tensor:
    d = m.config.d_model
    x = ad.mul(ad.embedding(m.params["embed"], ids), math.sqrt(d))
    x = ad.add(x, m.positions[start:start + ids.shape[1]])
    return ad.dropout(x, m.config.dropout_rate, rng)


def _as_batch(ids, name: str, max_len: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise LengthError(f"{name}: expected a non-empty [batch, time] id array, got {arr.shape}")
    if arr.shape[1] > max_len:
        raise LengthError(f"{name}: length {arr.shape[1]} exceeds max_seq_len {max_len}")
    return arr


def encode(m: Transformer, src: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack; returns memory and the source key mask."""
    src_mask = np.where(src == 0, _MASK, 0.0)[:, None, None, :]
    x = _embed(m, src, 0, rng)
    for i in range(m.config.num_layers):
        p = f"enc.{i}"
        h = _norm(m, f"{p}.ln1", x)
        x = ad.add(x, ad.dropout(_attention(m, f"{p}.attn", h, h, src_mask),
                                 m.config.dropout_rate, rng))
        x = ad.add(x, ad.dropout(_feed_forward(m, f"{p}.ff", _norm(m, f"{p}.ln2", x)),
                                 m.config.dropout_rate, rng))
    return _norm(m, "enc.ln", x), src_mask


def decode(m: Transformer, tgt: np.ndarray, memory: Tensor, src_mask: np.ndarray,
           rng=None, caches: list | None = None, start: int = 0) -> Tensor:
    """Decoder stack plus tied output projection -> logits [B, T, V]."""
    t = tgt.shape[1]
    total = start + t
    causal = np.triu(np.full((total, total), _MASK), k=1)[start:total]
    self_mask = causal[None, None, :, :]
    if caches is None:
        self_mask = self_mask + np.where(tgt == 0, _MASK, 0.0)[:, None, None, :]
    drop = m.config.dropout_rate
    x = _embed(m, tgt, start, rng)
    for i in range(m.config.num_layers):
        p = f"dec.{i}"
        sc = cc = None
        if caches is not None:
            sc, cc = caches[i]
        h = _norm(m, f"{p}.ln1", x)
        x = ad.add(x, ad.dropout(_attention(m, f"{p}.self", h, h, self_mask, sc), drop, rng))
        h = _norm(m, f"{p}.ln2", x)
        x = ad.add(x, ad.dropout(_attention(m, f"{p}.cross", h, memory, src_mask, cc), drop, rng))
        x = ad.add(x, ad.dropout(_feed_forward(m, f"{p}.ff", _norm(m, f"{p}.ln3", x)), drop, rng))
    h = _norm(m, "dec.ln", x)
    return ad.matmul(h, ad.transpose(m.params["embed"], (1, 0)))


def forward(m: Transformer, src_ids, tgt_ids, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced logits.

    1-D inputs give [len(tgt), V]; 2-D (PAD-padded) batches give [B, T, V].
    Dropout is active only when ``rng`` is supplied.
    """
    single = np.asarray(tgt_ids).ndim == 1
    cap = m.config.max_seq_len
    src = _as_batch(src_ids, "source", cap)
    tgt = _as_batch(tgt_ids, "target", cap)
    if src.shape[0] != tgt.shape[0]:
        raise LengthError(f"batch sizes differ: {src.shape[0]} vs {tgt.shape[0]}")
    vmax = max(int(src.max()), int(tgt.max()))
    if min(int(src.min()), int(tgt.min())) < 0 or vmax >= m.config.vocab_size:
        raise IndexError(f"token id outside [0, {m.config.vocab_size})")
    memory, src_mask = encode(m, src, rng)
    logits = decode(m, tgt, memory, src_mask, rng)
    if single:
        return ad.reshape(logits, logits.shape[1:])
    return logits


def greedy_decode(m: Transformer, src_ids, max_len: int, bos_id: int = 1,
                  eos_id: int = 2, pad_id: int = 0) -> list[int] | list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` generated tokens.

    Returned sequences start with BOS and include EOS if produced.  Ties go
    to the lowest token id.  Accepts one id list or a PAD-padded batch.
    """
    single = np.asarray(src_ids).ndim == 1
    src = _as_batch(src_ids, "source", m.config.max_seq_len)
    b = src.shape[0]
    steps = max(0, min(max_len, m.config.max_seq_len - 1))
    out = [[bos_id] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    with ad.no_grad():
        memory, src_mask = encode(m, src)
        caches = [({}, {}) for _ in range(m.config.num_layers)]
        last = np.full((b, 1), bos_id, dtype=np.int64)
        for step in range(steps):
            logits = decode(m, last, memory, src_mask, caches=caches, start=step)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            for i in range(b):
                if not done[i]:
                    out[i].append(int(nxt[i]))
                    done[i] = nxt[i] == eos_id
            if done.all():
                break
            for _, cc in caches:
                cc["static"] = True
            last = np.where(done, pad_id, nxt)[:, None]
    return out[0] if single else out

"""A small fully non-autoregressive encoder-decoder in numpy with hand-written
backpropagation.

The decoder sees position information only (every target slot is masked) and
predicts all target tokens in one pass given the gold target length. Layers
are pre-norm, attention is single-head.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-5
NEG_INF = -1e9


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    ffn_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 1
    max_len: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "ffn_dim", "enc_layers", "dec_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ModelInputError(f"{name} must be positive")
        if self.heads != 1:
            raise ModelInputError("only single-head attention is supported")
        if self.embed_dim % 4:
            raise ModelInputError("embed_dim must be a multiple of 4")


# ---------------------------------------------------------------- parameters


def _attn_names(prefix):
    return [f"{prefix}.{p}" for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d, d) if name.split(".")[-1].startswith("w") else (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for l in range(cfg.enc_layers):
        ln(f"enc.{l}.ln1"); attn(f"enc.{l}.self")
        ln(f"enc.{l}.ln2"); ffn(f"enc.{l}.ffn")
    ln("enc.ln")
    for l in range(cfg.dec_layers):
        ln(f"dec.{l}.ln1"); attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln2"); attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3"); ffn(f"dec.{l}.ffn")
    ln("dec.ln")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform init with bound ``1/sqrt(fan_in)``; biases 0, norm gains 1."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if name == "embed":
            bound = 1.0 / np.sqrt(cfg.embed_dim)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf.startswith("w"):
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
        params[name] = params[name].astype(DTYPE)
    return params


def infer_config(params: dict[str, np.ndarray], max_len: int = 128) -> ModelConfig:
    vocab, d = params["embed"].shape
    enc = sum(1 for k in params if k.startswith("enc.") and k.endswith(".ln1.g"))
    dec = sum(1 for k in params if k.startswith("dec.") and k.endswith(".ln1.g"))
    ffn = params["enc.0.ffn.w1"].shape[1] if enc else params["dec.0.ffn.w1"].shape[1]
    return ModelConfig(vocab, d, ffn, enc, dec, 1, max_len)


# ---------------------------------------------------------------- positions


def _sinusoid(n_pos: int, dim: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    rates = 1.0 / np.power(10000.0, np.arange(0, dim, 2) / dim)
    table = np.zeros((n_pos, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


def position_encoding(lengths, width: int, dim: int) -> np.ndarray:
    """(B, width, dim) fixed encodings: half from the index counted from the
    start, half from the index counted from the end. Padding rows are zero."""
    lengths = np.asarray(lengths)
    half = dim // 2
    table = _sinusoid(max(width, 1), half)
    idx = np.arange(width)[None, :]
    from_end = np.clip(lengths[:, None] - 1 - idx, 0, None)
    enc = np.concatenate(
        [np.broadcast_to(table[:width][None], (len(lengths), width, half)), table[from_end]],
        axis=-1,
    )
    return (enc * (idx < lengths[:, None])[..., None]).astype(DTYPE)


# ---------------------------------------------------------------- layers


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache, grads, prefix):
    xhat, inv, g = cache
    grads[f"{prefix}.g"] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    grads[f"{prefix}.b"] += dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )


def _linear_grad(grads, wname, bname, x, dy):
    d_in, d_out = x.shape[-1], dy.shape[-1]
    grads[wname] += x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    grads[bname] += dy.reshape(-1, d_out).sum(0)


def _attn_fwd(p, prefix, xq, xkv, key_mask):
    d = xq.shape[-1]
    scale = DTYPE(1.0 / np.sqrt(d))
    q = xq @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = xkv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = xkv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    s = (q @ k.transpose(0, 2, 1)) * scale + np.where(key_mask, 0.0, NEG_INF)[:, None, :].astype(DTYPE)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    ctx = a @ v
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return out, (xq, xkv, q, k, v, a, ctx, scale)


def _attn_bwd(p, prefix, dout, cache, grads):
    xq, xkv, q, k, v, a, ctx, scale = cache
    _linear_grad(grads, f"{prefix}.wo", f"{prefix}.bo", ctx, dout)
    dctx = dout @ p[f"{prefix}.wo"].T
    da = dctx @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ dctx
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    _linear_grad(grads, f"{prefix}.wq", f"{prefix}.bq", xq, dq)
    _linear_grad(grads, f"{prefix}.wk", f"{prefix}.bk", xkv, dk)
    _linear_grad(grads, f"{prefix}.wv", f"{prefix}.bv", xkv, dv)
    dxq = dq @ p[f"{prefix}.wq"].T
    dxkv = dk @ p[f"{prefix}.wk"].T + dv @ p[f"{prefix}.wv"].T
    return dxq, dxkv


def _ffn_fwd(p, prefix, x):
    pre = x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
    h = np.maximum(pre, 0)
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], (x, pre, h)


def _ffn_bwd(p, prefix, dy, cache, grads):
    x, pre, h = cache
    _linear_grad(grads, f"{prefix}.w2", f"{prefix}.b2", h, dy)
    dh = (dy @ p[f"{prefix}.w2"].T) * (pre > 0)
    _linear_grad(grads, f"{prefix}.w1", f"{prefix}.b1", x, dh)
    return dh @ p[f"{prefix}.w1"].T


# ---------------------------------------------------------------- model


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def _check_inputs(cfg, src, src_len, tgt_len):
    if len(src_len) == 0:
        raise ModelInputError("empty batch")
    if src_len.min() < 1 or tgt_len.min() < 1:
        raise ModelInputError("sequences must have at least one token")
    if src_len.max() > cfg.max_len or tgt_len.max() > cfg.max_len:
        raise ModelInputError(f"sequence longer than max_len={cfg.max_len}")
    live = np.arange(src.shape[1])[None, :] < src_len[:, None]
    if np.any((src < 0) & live) or np.any((src >= cfg.vocab_size) & live):
        raise ModelInputError(f"source token id outside vocabulary [0, {cfg.vocab_size})")


def forward_batch(params, cfg: ModelConfig, src: np.ndarray, src_len, tgt_len):
    """Log-probabilities ``(B, T, V)`` for padded sources and target lengths.

    Returns ``(logp, cache)``; the cache feeds :func:`backward_batch`.
    """
    src = np.asarray(src, dtype=np.int64)
    src_len = np.asarray(src_len, dtype=np.int64)
    tgt_len = np.asarray(tgt_len, dtype=np.int64)
    _check_inputs(cfg, src, src_len, tgt_len)
    d = cfg.embed_dim
    p = params
    src_mask = np.arange(src.shape[1])[None, :] < src_len[:, None]
    width = int(tgt_len.max())
    tgt_mask = np.arange(width)[None, :] < tgt_len[:, None]
    safe_src = np.where(src_mask, src, 0)

    x = p["embed"][safe_src] * DTYPE(np.sqrt(d)) + position_encoding(src_len, src.shape[1], d)
    enc_caches = []
    for l in range(cfg.enc_layers):
        pre = f"enc.{l}"
        h, c1 = _ln_fwd(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        a, c2 = _attn_fwd(p, f"{pre}.self", h, h, src_mask)
        x = x + a
        h, c3 = _ln_fwd(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        f, c4 = _ffn_fwd(p, f"{pre}.ffn", h)
        x = x + f
        enc_caches.append((c1, c2, c3, c4))
    memory, c_enc = _ln_fwd(x, p["enc.ln.g"], p["enc.ln.b"])

    y = position_encoding(tgt_len, width, d)
    dec_caches = []
    for l in range(cfg.dec_layers):
        pre = f"dec.{l}"
        h, c1 = _ln_fwd(y, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        a, c2 = _attn_fwd(p, f"{pre}.self", h, h, tgt_mask)
        y = y + a
        h, c3 = _ln_fwd(y, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        a, c4 = _attn_fwd(p, f"{pre}.cross", h, memory, src_mask)
        y = y + a
        h, c5 = _ln_fwd(y, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        f, c6 = _ffn_fwd(p, f"{pre}.ffn", h)
        y = y + f
        dec_caches.append((c1, c2, c3, c4, c5, c6))
    h, c_dec = _ln_fwd(y, p["dec.ln.g"], p["dec.ln.b"])
    logits = h @ p["out.w"] + p["out.b"]
    logits = logits - logits.max(-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    cache = (safe_src, src_mask, enc_caches, c_enc, dec_caches, c_dec, h, logp)
    return logp, cache


def backward_batch(params, cfg: ModelConfig, cache, dlogp: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogp * logp)`` with respect to every parameter."""
    safe_src, src_mask, enc_caches, c_enc, dec_caches, c_dec, h, logp = cache
    if dlogp.shape != logp.shape:
        raise ModelInputError(f"upstream gradient shape {dlogp.shape} != output shape {logp.shape}")
    p = params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dlogp = dlogp.astype(DTYPE, copy=False)
    dlogits = dlogp - np.exp(logp) * dlogp.sum(-1, keepdims=True)
    _linear_grad(grads, "out.w", "out.b", h, dlogits)
    dh = dlogits @ p["out.w"].T
    dy = _ln_bwd(dh, c_dec, grads, "dec.ln")
    dmemory = np.zeros_like(c_enc[0])
    for l in reversed(range(cfg.dec_layers)):
        pre = f"dec.{l}"
        c1, c2, c3, c4, c5, c6 = dec_caches[l]
        dh = _ffn_bwd(p, f"{pre}.ffn", dy, c6, grads)
        dy = dy + _ln_bwd(dh, c5, grads, f"{pre}.ln3")
        dq, dkv = _attn_bwd(p, f"{pre}.cross", dy, c4, grads)
        dmemory += dkv
        dy = dy + _ln_bwd(dq, c3, grads, f"{pre}.ln2")
        dq, dkv = _attn_bwd(p, f"{pre}.self", dy, c2, grads)
        dy = dy + _ln_bwd(dq + dkv, c1, grads, f"{pre}.ln1")
    dx = _ln_bwd(dmemory, c_enc, grads, "enc.ln")
    for l in reversed(range(cfg.enc_layers)):
        pre = f"enc.{l}"
        c1, c2, c3, c4 = enc_caches[l]
        dh = _ffn_bwd(p, f"{pre}.ffn", dx, c4, grads)
        dx = dx + _ln_bwd(dh, c3, grads, f"{pre}.ln2")
        dq, dkv = _attn_bwd(p, f"{pre}.self", dx, c2, grads)
        dx = dx + _ln_bwd(dq + dkv, c1, grads, f"{pre}.ln1")
    demb = (dx * DTYPE(np.sqrt(cfg.embed_dim))) * src_mask[..., None]
    np.add.at(grads["embed"], safe_src.reshape(-1), demb.reshape(-1, cfg.embed_dim))
    return grads


def forward(params, cfg: ModelConfig, source: Sequence[int], target_len: int) -> np.ndarray:
    """Log-probability matrix ``(target_len, V)`` for a single source."""
    if not 1 <= target_len <= cfg.max_len:
        raise ModelInputError(f"target_len must lie in [1, {cfg.max_len}], got {target_len}")
    src, src_len = pad_batch([source])
    logp, _ = forward_batch(params, cfg, src, src_len, [target_len])
    return logp[0]


def backward(params, cfg: ModelConfig, sources, target_lens, upstream_grads) -> dict[str, np.ndarray]:
    """Parameter gradients of the batch-mean loss given per-example
    log-prob gradients (each ``(target_len_i, V)``)."""
    if len(upstream_grads) != len(sources):
        raise ModelInputError("one upstream gradient per example is required")
    src, src_len = pad_batch(sources)
    logp, cache = forward_batch(params, cfg, src, src_len, target_lens)
    dlogp = np.zeros(logp.shape, dtype=DTYPE)
    for i, (g, n) in enumerate(zip(upstream_grads, target_lens)):
        g = np.asarray(g)
        if g.shape != (n, cfg.vocab_size):
            raise ModelInputError(f"upstream gradient {i} has shape {g.shape}, want {(n, cfg.vocab_size)}")
        dlogp[i, :n] = g / len(sources)
    return backward_batch(params, cfg, cache, dlogp)


def decode_batch(params, cfg: ModelConfig, sources, target_lens, batch_size: int = 256) -> list[list[int]]:
    """Argmax per position in one parallel pass; ties go to the lowest id."""
    out = []
    for start in range(0, len(sources), batch_size):
        chunk = sources[start : start + batch_size]
        lens = list(target_lens[start : start + batch_size])
        src, src_len = pad_batch(chunk)
        logp, _ = forward_batch(params, cfg, src, src_len, lens)
        best = logp.argmax(-1)
        out.extend(best[i, :n].tolist() for i, n in enumerate(lens))
    return out


def decode(params, cfg: ModelConfig, source: Sequence[int], target_len: int) -> list[int]:
    return forward(params, cfg, source, target_len).argmax(-1).tolist()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"OAXE-CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_records(fh, records: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_records(buf: memoryview, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        records[name] = arr.astype(DTYPE)
    return records, pos


def save_checkpoint(path, params: dict, cfg: ModelConfig, optimizer_state: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory, then rename.

    Layout: magic, u32 version, a parameter record section, an optimizer
    record section. Each section is a u32 count then records of (u32 name
    length, name, u32 rank, u32 dims, little-endian float32 data).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = np.array(
        [cfg.vocab_size, cfg.embed_dim, cfg.ffn_dim, cfg.enc_layers, cfg.dec_layers, cfg.max_len],
        dtype=DTYPE,
    )
    records = {"meta.model_config": meta, **params}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            _write_records(fh, records)
            _write_records(fh, optimizer_state or {})
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, ModelConfig, dict]:
    """Returns ``(params, model_config, optimizer_state)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not an OAXE checkpoint")
    buf = memoryview(data)
    (version,) = struct.unpack_from("<I", buf, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params, pos = _read_records(buf, len(CKPT_MAGIC) + 4)
    opt, pos = _read_records(buf, pos)
    if pos != len(data):
        raise CheckpointError(f"{path} has {len(data) - pos} trailing bytes")
    meta = params.pop("meta.model_config").astype(int).tolist()
    cfg = ModelConfig(meta[0], meta[1], meta[2], meta[3], meta[4], 1, meta[5])
    expected = param_shapes(cfg)
    if set(expected) != set(params) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path} parameter records do not match the stored model config")
    return params, cfg, opt


def content_hash(path) -> str:
    """Git blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

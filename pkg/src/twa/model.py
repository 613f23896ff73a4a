"""Small teacher-forced Transformer encoder-decoder in numpy with manual backprop.

One pre-LayerNorm encoder block (self-attention + feed-forward) and one
decoder block (causal self-attention, cross-attention, feed-forward), learned
positional embeddings and an untied output projection. ``forward`` returns
logits for every target position together with a :class:`ForwardTrace`;
``backward`` consumes that trace once and returns gradients of
``sum(grad_logits * logits)`` for every parameter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tokenize_align import BOS, EOS, PAD

NEG_INF = -1e30
LN_EPS = 1e-5
INIT_SCALE = 0.08
CHECKPOINT_FORMAT = "twa-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_heads: int = 2
    max_src_len: int = 32
    max_tgt_len: int = 32
    seed: int = 0

    def __post_init__(self):
        dims = (self.vocab_size, self.embed_dim, self.hidden_dim, self.num_heads,
                self.max_src_len, self.max_tgt_len)
        if min(dims) <= 0:
            raise ValueError(f"all model dimensions must be positive: {self}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")


# --- primitives --------------------------------------------------------------
# Each *_fwd returns (output, cache); each *_bwd takes (grad_output, cache)
# and returns the input gradient, accumulating parameter grads into `grads`.

def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dy, x, w, grads, wname, bname):
    grads[wname] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_bwd(dy, cache, g, grads, gname, bname):
    xhat, inv = cache
    grads[gname] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_fwd(p, prefix, xq, xkv, mask, num_heads):
    """Multi-head attention; ``mask`` broadcasts to (B, 1, Tq, Tk), True = visible."""
    q, cq = linear_fwd(xq, p[prefix + "wq"], p[prefix + "bq"])
    k, ck = linear_fwd(xkv, p[prefix + "wk"], p[prefix + "bk"])
    v, cv = linear_fwd(xkv, p[prefix + "wv"], p[prefix + "bv"])
    qh, kh, vh = (_split_heads(a, num_heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = np.where(mask, (qh @ kh.transpose(0, 1, 3, 2)) * scale, NEG_INF)
    attn = softmax(scores)
    ctx = _merge_heads(attn @ vh)
    out, co = linear_fwd(ctx, p[prefix + "wo"], p[prefix + "bo"])
    return out, (cq, ck, cv, qh, kh, vh, attn, co, scale)


def attention_bwd(dout, cache, p, prefix, grads, num_heads, self_attn):
    cq, ck, cv, qh, kh, vh, attn, co, scale = cache
    dctx = linear_bwd(dout, co, p[prefix + "wo"], grads, prefix + "wo", prefix + "bo")
    dctx_h = _split_heads(dctx, num_heads)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dxq = linear_bwd(_merge_heads(dqh), cq, p[prefix + "wq"], grads, prefix + "wq", prefix + "bq")
    dxk = linear_bwd(_merge_heads(dkh), ck, p[prefix + "wk"], grads, prefix + "wk", prefix + "bk")
    dxv = linear_bwd(_merge_heads(dvh), cv, p[prefix + "wv"], grads, prefix + "wv", prefix + "bv")
    if self_attn:
        return dxq + dxk + dxv, None
    return dxq, dxk + dxv


def ffn_fwd(p, prefix, x):
    h, c1 = linear_fwd(x, p[prefix + "w1"], p[prefix + "b1"])
    a, cg = gelu_fwd(h)
    y, c2 = linear_fwd(a, p[prefix + "w2"], p[prefix + "b2"])
    return y, (c1, cg, c2)


def ffn_bwd(dy, cache, p, prefix, grads):
    c1, cg, c2 = cache
    da = linear_bwd(dy, c2, p[prefix + "w2"], grads, prefix + "w2", prefix + "b2")
    dh = gelu_bwd(da, cg)
    return linear_bwd(dh, c1, p[prefix + "w1"], grads, prefix + "w1", prefix + "b1")


# --- model -------------------------------------------------------------------

class ForwardTrace:
    """Activations of one forward pass; consumed by exactly one backward."""

    def __init__(self, src, tgt, caches):
        self.src = src
        self.tgt = tgt
        self.caches = caches
        self.consumed = False


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    v, d, f = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (v, d), "src_pos": (cfg.max_src_len, d),
        "tgt_emb": (v, d), "tgt_pos": (cfg.max_tgt_len, d),
    }

    def ln(name):
        shapes[name + ".g"] = (d,)
        shapes[name + ".b"] = (d,)

    def attn(name):
        for m in "qkvo":
            shapes[f"{name}.w{m}"] = (d, d)
            shapes[f"{name}.b{m}"] = (d,)

    def ffn(name):
        shapes.update({name + ".w1": (d, f), name + ".b1": (f,),
                       name + ".w2": (f, d), name + ".b2": (d,)})

    ln("enc.ln1"); attn("enc.attn"); ln("enc.ln2"); ffn("enc.ffn"); ln("enc.lnf")
    ln("dec.ln1"); attn("dec.self"); ln("dec.ln2"); attn("dec.cross")
    ln("dec.ln3"); ffn("dec.ffn"); ln("dec.lnf")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g") and ".ln" in name:
            params[name] = np.ones(shape)
        elif name.endswith(".b") and ".ln" in name:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return params


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = _param_shapes(config)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward --------------------------------------------------------------

    def _check_tokens(self, arr, max_len, what):
        if arr.ndim != 2:
            raise ValueError(f"{what} tokens must be a 2-D batch")
        if arr.shape[1] > max_len:
            raise ValueError(f"{what} length {arr.shape[1]} exceeds maximum {max_len}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.config.vocab_size):
            raise ValueError(f"{what} token id out of vocabulary range")

    def encode(self, src):
        p, h = self.params, self.config.num_heads
        src = np.asarray(src, dtype=np.int64)
        self._check_tokens(src, self.config.max_src_len, "source")
        x = p["src_emb"][src] + p["src_pos"][: src.shape[1]]
        mask = (src != PAD)[:, None, None, :]
        n1, c_ln1 = layernorm_fwd(x, p["enc.ln1.g"], p["enc.ln1.b"])
        a, c_att = attention_fwd(p, "enc.attn.", n1, n1, mask, h)
        x = x + a
        n2, c_ln2 = layernorm_fwd(x, p["enc.ln2.g"], p["enc.ln2.b"])
        f, c_ffn = ffn_fwd(p, "enc.ffn.", n2)
        x = x + f
        enc, c_lnf = layernorm_fwd(x, p["enc.lnf.g"], p["enc.lnf.b"])
        return enc, mask, (c_ln1, c_att, c_ln2, c_ffn, c_lnf)

    def decode_logits(self, enc, src_mask, tgt):
        p, h = self.params, self.config.num_heads
        tgt = np.asarray(tgt, dtype=np.int64)
        self._check_tokens(tgt, self.config.max_tgt_len, "target")
        t = tgt.shape[1]
        y = p["tgt_emb"][tgt] + p["tgt_pos"][:t]
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        n1, c_ln1 = layernorm_fwd(y, p["dec.ln1.g"], p["dec.ln1.b"])
        a, c_self = attention_fwd(p, "dec.self.", n1, n1, causal, h)
        y = y + a
        n2, c_ln2 = layernorm_fwd(y, p["dec.ln2.g"], p["dec.ln2.b"])
        a, c_cross = attention_fwd(p, "dec.cross.", n2, enc, src_mask, h)
        y = y + a
        n3, c_ln3 = layernorm_fwd(y, p["dec.ln3.g"], p["dec.ln3.b"])
        f, c_ffn = ffn_fwd(p, "dec.ffn.", n3)
        y = y + f
        yf, c_lnf = layernorm_fwd(y, p["dec.lnf.g"], p["dec.lnf.b"])
        logits, c_out = linear_fwd(yf, p["out.w"], p["out.b"])
        return logits, (c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn, c_lnf, c_out)

    def forward(self, src, tgt):
        """Logits of shape (B, T, V); ``logits[:, t]`` predicts ``tgt[:, t + 1]``."""
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        enc, mask, enc_caches = self.encode(src)
        logits, dec_caches = self.decode_logits(enc, mask, tgt)
        return logits, ForwardTrace(src, tgt, (enc_caches, dec_caches))

    # -- backward -------------------------------------------------------------

    def backward(self, trace: ForwardTrace, grad_logits) -> dict[str, np.ndarray]:
        if trace.consumed:
            raise RuntimeError("forward trace already consumed by a backward pass")
        trace.consumed = True
        p, h = self.params, self.config.num_heads
        grads = self.zero_grads()
        (e_ln1, e_att, e_ln2, e_ffn, e_lnf), \
            (d_ln1, d_self, d_ln2, d_cross, d_ln3, d_ffn, d_lnf, d_out) = trace.caches
        dy = np.asarray(grad_logits, dtype=np.float64)

        # decoder
        dy = linear_bwd(dy, d_out, p["out.w"], grads, "out.w", "out.b")
        dy = layernorm_bwd(dy, d_lnf, p["dec.lnf.g"], grads, "dec.lnf.g", "dec.lnf.b")
        dn = ffn_bwd(dy, d_ffn, p, "dec.ffn.", grads)
        dy = dy + layernorm_bwd(dn, d_ln3, p["dec.ln3.g"], grads, "dec.ln3.g", "dec.ln3.b")
        dn, denc = attention_bwd(dy, d_cross, p, "dec.cross.", grads, h, self_attn=False)
        dy = dy + layernorm_bwd(dn, d_ln2, p["dec.ln2.g"], grads, "dec.ln2.g", "dec.ln2.b")
        dn, _ = attention_bwd(dy, d_self, p, "dec.self.", grads, h, self_attn=True)
        dy = dy + layernorm_bwd(dn, d_ln1, p["dec.ln1.g"], grads, "dec.ln1.g", "dec.ln1.b")
        t = trace.tgt.shape[1]
        grads["tgt_pos"][:t] += dy.sum(axis=0)
        np.add.at(grads["tgt_emb"], trace.tgt, dy)

        # encoder
        dx = layernorm_bwd(denc, e_lnf, p["enc.lnf.g"], grads, "enc.lnf.g", "enc.lnf.b")
        dn = ffn_bwd(dx, e_ffn, p, "enc.ffn.", grads)
        dx = dx + layernorm_bwd(dn, e_ln2, p["enc.ln2.g"], grads, "enc.ln2.g", "enc.ln2.b")
        dn, _ = attention_bwd(dx, e_att, p, "enc.attn.", grads, h, self_attn=True)
        dx = dx + layernorm_bwd(dn, e_ln1, p["enc.ln1.g"], grads, "enc.ln1.g", "enc.ln1.b")
        s = trace.src.shape[1]
        grads["src_pos"][:s] += dx.sum(axis=0)
        np.add.at(grads["src_emb"], trace.src, dx)
        return grads

    # -- checkpoints ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "Seq2SeqModel":
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        cfg = ModelConfig(**blob["config"])
        params = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in blob["params"].items()
        }
        return cls(cfg, params)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# --- batching and decoding ---------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def realized_logprobs(logits, tgt):
    """Log-softmax over the vocabulary and log p of each realized next token.

    Returns ``(logp_all, logp)`` with ``logp[:, t] = logp_all[:, t, tgt[:, t+1]]``
    for positions ``t < T-1``.
    """
    logp_all = log_softmax(logits[:, :-1])
    nxt = np.asarray(tgt)[:, 1:]
    logp = np.take_along_axis(logp_all, nxt[..., None], axis=-1)[..., 0]
    return logp_all, logp


def grad_logits_from_logp(logp_all, tgt, grad_logp):
    """Chain dL/d(log p_t) through log-softmax to dL/dlogits of shape (B, T, V)."""
    b, tm1, v = logp_all.shape
    nxt = np.asarray(tgt)[:, 1:]
    g = -np.exp(logp_all) * grad_logp[..., None]
    np.put_along_axis(g, nxt[..., None],
                      np.take_along_axis(g, nxt[..., None], axis=-1) + grad_logp[..., None],
                      axis=-1)
    out = np.zeros((b, tm1 + 1, v))
    out[:, :-1] = g
    return out


def greedy_decode(model: Seq2SeqModel, src_batch, max_len: int) -> list[list[int]]:
    """Argmax decoding (ties to the lowest id) until EOS or ``max_len`` tokens.

    Returned sequences exclude BOS and include EOS when it was produced.
    """
    src = src_batch if isinstance(src_batch, np.ndarray) else pad_batch(src_batch)
    max_len = min(max_len, model.config.max_tgt_len)
    enc, mask, _ = model.encode(src)
    b = src.shape[0]
    tgt = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        logits, _ = model.decode_logits(enc, mask, tgt)
        nxt = logits[:, -1].argmax(axis=-1)
        for i in np.flatnonzero(~done):
            outs[i].append(int(nxt[i]))
            if nxt[i] == EOS:
                done[i] = True
        if done.all():
            break
        tgt = np.concatenate([tgt, np.where(done, PAD, nxt)[:, None]], axis=1)
    return outs

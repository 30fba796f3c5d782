"""Miniature T5-style encoder-decoder.

Pre-norm residual blocks, relative position bias per layer (bidirectional in
the encoder, causal in the decoder, none for cross-attention), GeLU
feed-forward layers and a token embedding tied between the inputs and the
output projection.

Every attention block accepts key/value prefixes and every feed-forward block
accepts parallel gated adapters.  Prefix columns receive zero position bias.
"""

import math
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .hypernets import adapter_branch

BLOCK_KINDS = ("enc_self_attn", "enc_ffn", "dec_self_attn", "dec_cross_attn", "dec_ffn")
ATTN_KINDS = ("enc_self_attn", "dec_self_attn", "dec_cross_attn")
FFN_KINDS = ("enc_ffn", "dec_ffn")

PAD_ID = 0
EOS_ID = 1
NEG_INF = -1e9
# tied embedding std; with the 1/sqrt(d) output scale this keeps untrained
# logits near uniform
EMBED_INIT_STD = 0.5


class BlockId(NamedTuple):
    layer: int
    kind: str

    def __str__(self):
        return f"{self.layer}.{self.kind}"

    @property
    def is_attention(self):
        return self.kind in ATTN_KINDS


def all_blocks(n_layers, kinds=BLOCK_KINDS):
    return [BlockId(i, k) for i in range(n_layers) for k in kinds]


# --------------------------------------------------------------------------
# parameters

def _linear(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(np.float32)


def init_backbone(config, rng):
    """Random backbone weights keyed by dotted names."""
    d, h = config.d_model, config.n_heads
    p = {"shared.embed": rng.normal(0.0, EMBED_INIT_STD, size=(config.vocab_size, d)).astype(np.float32)}

    def attn(prefix, with_bias):
        for w in ("q", "k", "v", "o"):
            p[f"{prefix}.{w}"] = _linear(rng, d, d)
        if with_bias:
            p[f"{prefix}.rel_bias"] = rng.normal(
                0.0, 0.5, size=(config.rel_buckets, h)).astype(np.float32)

    def ln(prefix):
        p[f"{prefix}.scale"] = np.ones(d, dtype=np.float32)
        p[f"{prefix}.bias"] = np.zeros(d, dtype=np.float32)

    def ffn(prefix):
        p[f"{prefix}.wi"] = _linear(rng, d, config.d_ff)
        p[f"{prefix}.wo"] = _linear(rng, config.d_ff, d)

    for i in range(config.n_layers):
        e = f"encoder.{i}"
        ln(f"{e}.ln_self")
        attn(f"{e}.self_attn", True)
        ln(f"{e}.ln_ffn")
        ffn(f"{e}.ffn")
    ln("encoder.final_ln")
    for i in range(config.n_layers):
        e = f"decoder.{i}"
        ln(f"{e}.ln_self")
        attn(f"{e}.self_attn", True)
        ln(f"{e}.ln_cross")
        attn(f"{e}.cross_attn", False)
        ln(f"{e}.ln_ffn")
        ffn(f"{e}.ffn")
    ln("decoder.final_ln")
    return p


# --------------------------------------------------------------------------
# relative position bias

def relative_position_bucket(relative_position, bidirectional, num_buckets, max_distance):
    """T5 bucketing of ``key_pos - query_pos``: exact for short range, log-spaced beyond."""
    rel = np.asarray(relative_position)
    ret = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(rel.dtype) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = max(num_buckets // 2, 1)
    is_small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact)
            / math.log(max(max_distance / max_exact, 1 + 1e-9))
            * (num_buckets - max_exact)
        ).astype(rel.dtype)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(is_small, n, large)


def relative_bias(table, q_len, k_len, bidirectional, max_distance):
    """Bias of shape ``(H, q_len, k_len)`` looked up from a ``(buckets, H)`` table."""
    ctx = np.arange(q_len)[:, None]
    mem = np.arange(k_len)[None, :]
    buckets = relative_position_bucket(mem - ctx, bidirectional, table.shape[0], max_distance)
    return T.transpose(T.embedding(table, buckets), (2, 0, 1))


def pad_relative_bias(bias, n_prefix):
    """Prepend ``n_prefix`` all-zero key columns to a bias (or additive mask)."""
    if n_prefix == 0:
        return bias
    zeros = np.zeros(bias.shape[:-1] + (n_prefix,), dtype=bias.dtype)
    return T.concat([T.Tensor(zeros), bias], axis=-1)


# --------------------------------------------------------------------------
# blocks

def _heads(t, n_heads):
    """(B, L, d) -> (B, H, L, dh); (L, d) -> (H, L, dh)."""
    *lead, length, d = t.shape
    t = T.reshape(t, tuple(lead) + (length, n_heads, d // n_heads))
    if lead:
        return T.transpose(t, (0, 2, 1, 3))
    return T.transpose(t, (1, 0, 2))


def attention_with_prefix(x, context, weights, n_heads, prefix=None, rel_bias=None, mask=None):
    """Multi-head attention with optional key/value prefixes.

    x: ``(B, Tq, d)`` queries; context: ``(B, Tk, d)``; weights: mapping with
    ``q, k, v, o`` each ``(d, d)``.  prefix: ``(P_k, P_v)`` each ``(Np, d)``
    shared by the batch or ``(B, Np, d)`` per example; they are prepended to
    the projected keys and values.  rel_bias: ``(H, Tq, Tk)`` or ``(Tq, Tk)``;
    mask: additive, broadcastable to ``(B, H, Tq, Tk)``.
    """
    d = x.shape[-1]
    if context.shape[-1] != d:
        raise DimensionError(f"attention: query width {d} != context width {context.shape[-1]}")
    b = x.shape[0]
    q = _heads(T.matmul(x, weights["q"]), n_heads)
    k = _heads(T.matmul(context, weights["k"]), n_heads)
    v = _heads(T.matmul(context, weights["v"]), n_heads)
    n_prefix = 0
    if prefix is not None:
        p_k, p_v = prefix
        if p_k.shape != p_v.shape:
            raise DimensionError(f"attention: prefix shapes {p_k.shape} != {p_v.shape}")
        if p_k.shape[-1] != d:
            raise DimensionError(f"attention: prefix width {p_k.shape[-1]} != model width {d}")
        n_prefix = p_k.shape[-2]
        pk, pv = _heads(p_k, n_heads), _heads(p_v, n_heads)
        full = (b, n_heads, n_prefix, d // n_heads)
        if pk.ndim == 3:
            pk, pv = T.broadcast_to(pk, full), T.broadcast_to(pv, full)
        k = T.concat([pk, k], axis=2)
        v = T.concat([pv, v], axis=2)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    if rel_bias is not None:
        scores = T.add(scores, pad_relative_bias(rel_bias, n_prefix))
    if mask is not None:
        mask = mask if isinstance(mask, T.Tensor) else T.Tensor(mask.astype(x.dtype))
        scores = T.add(scores, pad_relative_bias(mask, n_prefix))
    out = T.matmul(T.softmax(scores), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, x.shape[1], d))
    return T.matmul(out, weights["o"])


def feed_forward(x, wi, wo):
    return T.matmul(T.gelu(T.matmul(x, wi)), wo)


def ffn_with_adapter(h, ln_scale, ln_bias, wi, wo, adapters=None, eps=T.LN_EPS):
    """Feed-forward sub-layer on the residual stream ``h`` with parallel adapters.

    Returns ``h + FFN(LN(h))`` plus ``lam * LN_a(W_up GeLU(W_down h))`` for each
    adapter, i.e. the adapter's own ``+ h`` supplies the residual.
    """
    out = T.add(h, feed_forward(T.layernorm(h, ln_scale, ln_bias, eps), wi, wo))
    if adapters is None:
        return out
    if not isinstance(adapters, (list, tuple)):
        adapters = [adapters]
    for a in adapters:
        out = T.add(out, T.mul(adapter_branch(a, h), a.lam))
    return out


# --------------------------------------------------------------------------
# full model

def _ln(params, name, x, eps):
    return T.layernorm(x, params[f"{name}.scale"], params[f"{name}.bias"], eps)


def _attn_weights(params, name):
    return {w: params[f"{name}.{w}"] for w in ("q", "k", "v", "o")}


def sinusoid_positions(length, d, dtype=np.float32):
    """Fixed sine/cosine position table (length, d); not a parameter."""
    pos = np.arange(length)[:, None]
    rate = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table.astype(dtype)


def _embed(config, embed, ids):
    h = T.embedding(embed, ids)
    if config.abs_positions:
        h = T.add(h, T.Tensor(sinusoid_positions(ids.shape[1], config.d_model, h.data.dtype)))
    return h


def padding_mask(ids, dtype=np.float32):
    """Additive key mask (B, 1, 1, L): 0 for tokens, -1e9 for padding."""
    m = np.where(np.asarray(ids) == PAD_ID, NEG_INF, 0.0).astype(dtype)
    return m[:, None, None, :]


def causal_mask(length, dtype=np.float32):
    return np.triu(np.full((length, length), NEG_INF, dtype=dtype), k=1)


def encode(config, params, input_ids, prefix=None, adapters=None):
    """Encoder stack; returns final-normed states (B, M, d)."""
    prefix, adapters = prefix or {}, adapters or {}
    ids = np.asarray(input_ids)
    eps, nh = config.ln_eps, config.n_heads
    h = _embed(config, params["shared.embed"], ids)
    mask = padding_mask(ids)
    m = ids.shape[1]
    for i in range(config.n_layers):
        e = f"encoder.{i}"
        bias = relative_bias(params[f"{e}.self_attn.rel_bias"], m, m, True,
                             config.rel_max_distance)
        x = _ln(params, f"{e}.ln_self", h, eps)
        h = T.add(h, attention_with_prefix(
            x, x, _attn_weights(params, f"{e}.self_attn"), nh,
            prefix.get(BlockId(i, "enc_self_attn")), bias, mask))
        h = ffn_with_adapter(h, params[f"{e}.ln_ffn.scale"], params[f"{e}.ln_ffn.bias"],
                             params[f"{e}.ffn.wi"], params[f"{e}.ffn.wo"],
                             adapters.get(BlockId(i, "enc_ffn")), eps)
    return _ln(params, "encoder.final_ln", h, eps), mask


def decode_states(config, params, enc_out, enc_mask, decoder_ids, prefix=None, adapters=None):
    """Decoder stack under teacher forcing; returns logits (B, T, vocab)."""
    prefix, adapters = prefix or {}, adapters or {}
    ids = np.asarray(decoder_ids)
    eps, nh = config.ln_eps, config.n_heads
    embed = params["shared.embed"]
    h = _embed(config, embed, ids)
    t = ids.shape[1]
    causal = causal_mask(t)
    for i in range(config.n_layers):
        e = f"decoder.{i}"
        bias = relative_bias(params[f"{e}.self_attn.rel_bias"], t, t, False,
                             config.rel_max_distance)
        x = _ln(params, f"{e}.ln_self", h, eps)
        h = T.add(h, attention_with_prefix(
            x, x, _attn_weights(params, f"{e}.self_attn"), nh,
            prefix.get(BlockId(i, "dec_self_attn")), bias, causal))
        x = _ln(params, f"{e}.ln_cross", h, eps)
        h = T.add(h, attention_with_prefix(
            x, enc_out, _attn_weights(params, f"{e}.cross_attn"), nh,
            prefix.get(BlockId(i, "dec_cross_attn")), None, enc_mask))
        h = ffn_with_adapter(h, params[f"{e}.ln_ffn.scale"], params[f"{e}.ln_ffn.bias"],
                             params[f"{e}.ffn.wi"], params[f"{e}.ffn.wo"],
                             adapters.get(BlockId(i, "dec_ffn")), eps)
    h = _ln(params, "decoder.final_ln", h, eps)
    logits = T.matmul(h, T.transpose(embed, (1, 0)))
    return T.mul(logits, 1.0 / math.sqrt(config.d_model))


def strip_eos(ids):
    ids = list(ids)
    return ids[:ids.index(EOS_ID)] if EOS_ID in ids else ids


def shift_right(target_ids):
    """Teacher-forcing decoder inputs: PAD as start token, then targets[:-1]."""
    tgt = np.asarray(target_ids)
    out = np.full_like(tgt, PAD_ID)
    out[:, 1:] = tgt[:, :-1]
    return out


def target_weights(target_ids, dtype=np.float32):
    """Mean over each example's tokens, then mean over the batch."""
    tgt = np.asarray(target_ids)
    valid = (tgt != PAD_ID).astype(np.float64)
    counts = valid.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("forward_seq2seq: empty target sequence")
    return (valid / counts / tgt.shape[0]).astype(dtype)


def forward_seq2seq(config, params, input_ids, target_ids, prefix=None, adapters=None):
    """Logits ``(B, T, vocab)`` and mean token cross-entropy under teacher forcing."""
    inp, tgt = np.asarray(input_ids), np.asarray(target_ids)
    if tgt.ndim != 2 or tgt.shape[1] == 0:
        raise ContractError("forward_seq2seq: empty target")
    for ids in (inp, tgt):
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise ContractError("forward_seq2seq: token id outside vocabulary")
    weights = target_weights(tgt)
    enc, mask = encode(config, params, inp, prefix, adapters)
    logits = decode_states(config, params, enc, mask, shift_right(tgt), prefix, adapters)
    return logits, T.cross_entropy(logits, tgt, weights)


def greedy_decode(config, params, input_ids, prefix=None, adapters=None, max_len=8):
    """Argmax decoding; each row stops at EOS or after ``max_len`` tokens.

    Returns one list of emitted ids per row, including the EOS that ended it.
    """
    if max_len < 1:
        raise ContractError("greedy_decode: max_len must be >= 1")
    inp = np.asarray(input_ids)
    b = inp.shape[0]
    with T.no_grad():
        enc, mask = encode(config, params, inp, prefix, adapters)
        dec = np.full((b, 1), PAD_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out = [[] for _ in range(b)]
        for _ in range(max_len):
            logits = decode_states(config, params, enc, mask, dec, prefix, adapters)
            nxt = logits.data[:, -1].argmax(axis=-1)
            for r in range(b):
                if not done[r]:
                    out[r].append(int(nxt[r]))
                    done[r] = nxt[r] == EOS_ID
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return out

"""Linear hypernetworks that emit prefixes and adapter weights.

A single prefix hypernetwork and a single adapter hypernetwork serve every
task, layer and block; the only thing that varies per insertion site is the
hyper-embedding fed to them.  Neither map has a bias.

Also home to the gated-adapter rule and the check that prefix attention
decomposes into a gated mix of plain attention and attention over the
prefixes alone.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


@dataclass
class PrefixHypernet:
    """Two bias-free heads mapping hyper-embedding rows to key and value prefixes.

    Stored as ``(d_hyper, d_model)`` so that ``P = I @ w``.
    """

    key: T.Tensor
    value: T.Tensor

    @property
    def d_hyper(self):
        return self.key.shape[0]


@dataclass
class AdapterHypernet:
    """Bias-free maps from a pooled hyper-embedding to flattened adapter matrices."""

    up: T.Tensor     # (d_hyper, d_model * d_adapter) -> W_up (d_model, d_adapter)
    down: T.Tensor   # (d_hyper, d_adapter * d_model) -> W_down (d_adapter, d_model)
    d_model: int
    d_adapter: int


@dataclass
class AdapterWeights:
    """Weights of one gated parallel adapter.

    ``up`` is ``(..., d_model, d_adapter)`` and ``down`` ``(..., d_adapter,
    d_model)``; a leading batch axis carries per-example (visual) adapters.
    """

    up: T.Tensor
    down: T.Tensor
    lam: T.Tensor
    ln_scale: T.Tensor
    ln_bias: T.Tensor
    eps: float = T.LN_EPS


def generate_prefix(hypernet, hyper_embedding):
    """Map ``(..., N, d_hyper)`` hyper-embeddings to ``(P_k, P_v)``, each ``(..., N, d_model)``."""
    if hyper_embedding.shape[-1] != hypernet.d_hyper:
        raise DimensionError(
            f"generate_prefix: hyper-embedding width {hyper_embedding.shape[-1]} "
            f"!= hypernet input {hypernet.d_hyper}")
    return T.matmul(hyper_embedding, hypernet.key), T.matmul(hyper_embedding, hypernet.value)


def generate_adapter_weights(hypernet, pooled):
    """Map pooled hyper-embeddings ``(..., d_hyper)`` to ``(W_up, W_down)``."""
    d_hyper = hypernet.up.shape[0]
    if pooled.shape[-1] != d_hyper:
        raise DimensionError(
            f"generate_adapter_weights: pooled width {pooled.shape[-1]} != {d_hyper}")
    lead = pooled.shape[:-1]
    flat = T.reshape(pooled, (-1, d_hyper))
    d, m = hypernet.d_model, hypernet.d_adapter
    up = T.reshape(T.matmul(flat, hypernet.up), lead + (d, m))
    down = T.reshape(T.matmul(flat, hypernet.down), lead + (m, d))
    return up, down


def _swap_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(t, axes)


def adapter_branch(weights, x):
    """``LN(W_up GeLU(W_down x))`` for states ``x`` of shape ``(B, T, d)``."""
    if weights.down.shape[-1] != x.shape[-1] or weights.up.shape[-2] != x.shape[-1]:
        raise DimensionError(
            f"adapter: weights {weights.up.shape}/{weights.down.shape} do not fit states {x.shape}")
    if weights.up.shape[-1] != weights.down.shape[-2]:
        raise DimensionError(
            f"adapter: bottleneck mismatch {weights.up.shape} vs {weights.down.shape}")
    # per-example weights (B, m, d) broadcast against states (B, T, d)
    h = T.gelu(T.matmul(x, _swap_last(weights.down)))
    y = T.matmul(h, _swap_last(weights.up))
    return T.layernorm(y, weights.ln_scale, weights.ln_bias, weights.eps)


def apply_adapter(weights, x):
    """Gated residual adapter: ``lam * LN(W_up GeLU(W_down x)) + x``."""
    return T.add(T.mul(adapter_branch(weights, x), weights.lam), x)


# --------------------------------------------------------------------------
# prefix attention viewed as gated interpolation (single head)

def _logsumexp(v):
    if v.size == 0:
        return -np.inf
    m = v.max()
    return m + np.log(np.exp(v - m).sum())


def lambda_gate(x_row, w_q, p_k, context_keys):
    """Share of softmax mass a query puts on the prefix keys.

    ``context_keys`` are the projected context keys ``C W_k`` (``M x d``); an
    empty prefix gives 0.
    """
    q = np.asarray(x_row, dtype=np.float64) @ np.asarray(w_q, dtype=np.float64)
    p_k = np.asarray(p_k, dtype=np.float64).reshape(-1, q.shape[-1])
    keys = np.asarray(context_keys, dtype=np.float64).reshape(-1, q.shape[-1])
    if p_k.shape[0] == 0 and keys.shape[0] == 0:
        raise ContractError("lambda_gate: no prefix and no context keys")
    if p_k.shape[0] == 0:
        return 0.0
    lp = _logsumexp(p_k @ q)
    lc = _logsumexp(keys @ q)
    return float(np.exp(lp - np.logaddexp(lp, lc)))


def _attend(q, k, v):
    s = k @ q
    w = np.exp(s - s.max())
    return (w / w.sum()) @ v


def prefix_head(x, w_q, w_k, w_v, context, p_k, p_v):
    """One attention head over concat(prefix, projected context), query per row of x."""
    keys = np.concatenate([p_k, context @ w_k])
    values = np.concatenate([p_v, context @ w_v])
    return np.stack([_attend(row @ w_q, keys, values) for row in x])


def gated_head(x, w_q, w_k, w_v, context, p_k, p_v, lam_override=None):
    """Same head written as ``(1 - lam) * Attn(context) + lam * Attn(prefix)``."""
    ck, cv = context @ w_k, context @ w_v
    out = []
    for row in x:
        q = row @ w_q
        lam = lambda_gate(row, w_q, p_k, ck) if lam_override is None else lam_override
        plain = _attend(q, ck, cv)
        pref = _attend(q, p_k, p_v) if len(p_k) else np.zeros_like(plain)
        out.append((1.0 - lam) * plain + lam * pref)
    return np.stack(out)


@dataclass
class EquivalenceResult:
    passed: bool
    max_deviation: float


def random_prefix_instance(rng, n_prefix=None, n_context=None, width=None, n_query=4):
    """Random single-head problem with N <= 8 prefixes, M <= 16 context rows, d <= 32."""
    n = int(rng.integers(0, 9)) if n_prefix is None else n_prefix
    m = int(rng.integers(1, 17)) if n_context is None else n_context
    d = int(rng.integers(1, 33)) if width is None else width
    s = 1.0 / np.sqrt(d)
    return dict(
        x=rng.normal(size=(n_query, d)),
        w_q=rng.normal(scale=s, size=(d, d)),
        w_k=rng.normal(scale=s, size=(d, d)),
        w_v=rng.normal(scale=s, size=(d, d)),
        context=rng.normal(size=(m, d)),
        p_k=rng.normal(size=(n, d)),
        p_v=rng.normal(size=(n, d)),
    )


def verify_prefix_equivalence(instance, tol=1e-5, lam_override=None):
    """Evaluate a head both ways and compare; ``lam_override`` injects a wrong gate."""
    direct = prefix_head(**instance)
    gated = gated_head(**instance, lam_override=lam_override)
    dev = float(np.abs(direct - gated).max())
    return EquivalenceResult(passed=dev < tol, max_deviation=dev)

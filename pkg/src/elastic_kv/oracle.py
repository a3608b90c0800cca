"""Brute-force reference implementations, used only by the test suite.

Nothing here imports the cache or policy modules: the point is to recompute
the same quantities by a different route, so that a bug shared by production
code and its test cannot hide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np


# -- dense kernels -------------------------------------------------------------------


def oracle_matmul(a, b) -> np.ndarray:
    """Triple-loop matrix product in row-major, left-to-right order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    k2, m = b.shape
    if k != k2:
        raise ValueError("dimension mismatch")
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def oracle_causal_softmax(scores) -> np.ndarray:
    """Row ``m`` normalised over columns ``0..m`` with scalar loops and ``math.exp``."""
    s = np.asarray(scores, dtype=np.float64)
    t = s.shape[0]
    out = np.zeros((t, t))
    for m in range(t):
        top = max(s[m, : m + 1])
        e = [math.exp(s[m, n] - top) for n in range(m + 1)]
        z = sum(e)
        for n in range(m + 1):
            out[m, n] = e[n] / z
    return out


# -- no-cache forward ----------------------------------------------------------------


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _forward_all(weights: dict, n_layers: int, n_heads: int, tokens, prefix=None):
    """One full causal pass, heads looped explicitly.

    Returns logits, per-layer attention and per-layer ``(keys, values)`` shaped
    ``(heads, T, d_head)``.
    """
    x = weights["tok_emb"][list(tokens)]
    if prefix is not None:
        x = np.concatenate([np.asarray(prefix, dtype=np.float64), x])
    t, d = x.shape
    dh = d // n_heads
    x = x + weights["pos_emb"][:t]
    attention, kv = [], []
    for i in range(n_layers):
        w = lambda n: weights[f"layers.{i}.{n}"]  # noqa: E731
        h = _layer_norm(x, w("ln1_g"), w("ln1_b"))
        q, k, v = h @ w("wq"), h @ w("wk"), h @ w("wv")
        kv.append((k.reshape(t, n_heads, dh).transpose(1, 0, 2),
                   v.reshape(t, n_heads, dh).transpose(1, 0, 2)))
        heads_out, layer_attn = [], []
        for j in range(n_heads):
            sl = slice(j * dh, (j + 1) * dh)
            s = (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
            s = np.where(np.tri(t, dtype=bool), s, -np.inf)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            layer_attn.append(a)
            heads_out.append(a @ v[:, sl])
        attention.append(np.stack(layer_attn))
        x = x + np.concatenate(heads_out, axis=1) @ w("wo")
        h = _layer_norm(x, w("ln2_g"), w("ln2_b"))
        x = x + _gelu(h @ w("w1") + w("b1")) @ w("w2") + w("b2")
    h = _layer_norm(x, weights["lnf_g"], weights["lnf_b"])
    return h @ weights["w_out"] + weights["b_out"], attention, kv


def oracle_full_forward(model, tokens, prefix=None) -> np.ndarray:
    """Logits at every position, each recomputed from scratch over its own prefix.

    Row ``m`` comes from a fresh pass over ``tokens[: m + 1]``: no state is
    carried between positions.
    """
    cfg = model.config
    tokens = list(tokens)
    rows = []
    for m in range(len(tokens)):
        logits, _, _ = _forward_all(model.w, cfg.n_layers, cfg.n_heads, tokens[: m + 1], prefix)
        rows.append(logits[-1])
    return np.stack(rows)


def oracle_attention(model, tokens, prefix=None) -> list[np.ndarray]:
    """Per-layer ``(heads, T, T)`` attention of one full pass."""
    cfg = model.config
    return _forward_all(model.w, cfg.n_layers, cfg.n_heads, list(tokens), prefix)[1]


def oracle_prefill_kv(model, tokens) -> list[OracleLayer]:
    """Uncompressed per-layer cache after one pass over ``tokens``."""
    cfg = model.config
    kv = _forward_all(model.w, cfg.n_layers, cfg.n_heads, list(tokens))[2]
    return [OracleLayer(k, v, list(range(len(tokens)))) for k, v in kv]


# -- bucket merge --------------------------------------------------------------------


def oracle_nearest(index: int, keep: list[int]) -> int:
    """Closest kept index; equidistant ties go to the earlier one."""
    best = keep[0]
    for k in keep[1:]:
        if abs(k - index) < abs(best - index):
            best = k
    return best


def oracle_merge(keys, anchors) -> tuple[list[list[int]], np.ndarray]:
    """Assign every position to its nearest anchor and average each group.

    Returns the member lists (one per anchor, ascending) and the merged rows.
    """
    keys = np.asarray(keys, dtype=np.float64)
    anchors = sorted(int(a) for a in anchors)
    groups = {a: [] for a in anchors}
    for t in range(keys.shape[0]):
        groups[oracle_nearest(t, anchors)].append(t)
    members = [groups[a] for a in anchors]
    merged = np.stack([sum(keys[t] for t in m) / len(m) for m in members])
    return members, merged


# -- transcription of the two-phase reference algorithm ------------------------


@dataclass
class OracleLayer:
    """One layer's cache: per-head key/value rows and the origin of each slot."""

    keys: np.ndarray     # (heads, n, d_head)
    values: np.ndarray   # (heads, n, d_head)
    origins: list[int]


@dataclass
class OracleTrace:
    """Retained origins (per step, per layer) and cache lengths per step."""

    retained: list[list[list[int]]] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    def check(self, total_lens: list[int]) -> None:
        for sets, n in zip(self.retained, total_lens):
            for s in sets:
                if any(not 0 <= o < n for o in s):
                    raise AssertionError(f"origin outside 0..{n - 1}: {s}")


def oracle_alg1(kv: list[OracleLayer] | None, scores, n: int, gamma: float, p: int,
                gen_len: int) -> list[OracleLayer] | None:
    """One call of the reference algorithm on a multi-layer cache.

    ``scores`` is the ``S`` accumulator, one list per layer over the current
    slots. ``n`` is the number of tokens seen so far, ``gamma`` the retention
    ratio (the algorithm's ``r`` is the pruned share ``1 - gamma``) and ``p``
    the fixed position offset. ``gen_len > 1`` marks the instruction pass,
    which merges; a single-token step removes one slot at ``fix_idx``.

    Deviations from the literal text: the merge branch is chosen by the phase
    rather than by ``del_num`` (its remaining branch would otherwise be unreachable),
    the first and last instruction slots are protected by giving them infinite
    score, and ``fix_idx`` is clamped to ``[1, seq_len - 2]``.
    """
    if kv is None:
        return None
    seq_len = len(kv[0].origins)
    r = 1 - Fraction(str(gamma))
    del_num = int(seq_len - n * (1 - r))
    if del_num <= 0:
        return kv
    kv_new = []
    if gen_len > 1:
        for i, layer in enumerate(kv):
            s = [float(x) for x in scores[i]]
            s[0] = s[-1] = math.inf
            # rank by score, larger index first among equals so the smaller index is kept
            ranked = sorted(range(seq_len), key=lambda t: (s[t], -t))
            throw_idx = sorted(ranked[:del_num])
            keep_idx = sorted(ranked[del_num:])
            merge_idx = {t: oracle_nearest(t, keep_idx) for t in throw_idx}
            k_sum = {a: layer.keys[:, a].copy() for a in keep_idx}
            v_sum = {a: layer.values[:, a].copy() for a in keep_idx}
            size = {a: 1 for a in keep_idx}
            for t in throw_idx:
                a = merge_idx[t]
                k_sum[a] = k_sum[a] + layer.keys[:, t]
                v_sum[a] = v_sum[a] + layer.values[:, t]
                size[a] += 1
            kv_new.append(OracleLayer(
                keys=np.stack([k_sum[a] / size[a] for a in keep_idx], axis=1),
                values=np.stack([v_sum[a] / size[a] for a in keep_idx], axis=1),
                origins=[layer.origins[a] for a in keep_idx],
            ))
        return kv_new
    fix_idx = min(max(seq_len - del_num + p, 1), seq_len - 2)
    for layer in kv:
        kv_new.append(OracleLayer(
            keys=np.concatenate([layer.keys[:, :fix_idx], layer.keys[:, fix_idx + 1 :]], axis=1),
            values=np.concatenate([layer.values[:, :fix_idx], layer.values[:, fix_idx + 1 :]],
                                  axis=1),
            origins=layer.origins[:fix_idx] + layer.origins[fix_idx + 1 :],
        ))
    return kv_new


def oracle_elastic_trace(model, instruction, n_steps: int, gamma: float,
                         recent_window: int = 25, trunc_offset: int = 0) -> OracleTrace:
    """Retained origins of the elastic pipeline over ``n_steps`` decode steps.

    Instruction keys, values and attention come from the oracle forward pass.
    Decode-phase removals depend only on positions, so appended slots carry
    zero vectors. The production truncation point (``recent_window`` slots
    behind the tail, shifted by ``trunc_offset``) is an algorithm offset of
    ``trunc_offset - recent_window``.
    """
    cfg = model.config
    t = len(instruction)
    _, attn, kv_rows = _forward_all(model.w, cfg.n_layers, cfg.n_heads, list(instruction))
    scores = []
    for layer in attn:
        head_mean = layer.mean(axis=0)
        scores.append([sum(head_mean[m, c] for m in range(t)) for c in range(t)])
    kv = [OracleLayer(k, v, list(range(t))) for k, v in kv_rows]
    p = trunc_offset - recent_window
    kv = oracle_alg1(kv, scores, t, gamma, p, gen_len=t)
    trace = OracleTrace()
    trace.retained.append([list(layer.origins) for layer in kv])
    trace.lengths.append(len(kv[0].origins))
    blank = np.zeros((cfg.n_heads, 1, cfg.d_head))
    for s in range(n_steps):
        pos = t + s
        kv = [OracleLayer(np.concatenate([layer.keys, blank], axis=1),
                          np.concatenate([layer.values, blank], axis=1),
                          layer.origins + [pos])
              for layer in kv]
        trace.lengths.append(len(kv[0].origins))
        kv = oracle_alg1(kv, None, pos + 1, gamma, p, gen_len=1)
        trace.retained.append([list(layer.origins) for layer in kv])
    return trace


# -- LCS -----------------------------------------------------------------------------


def _is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def oracle_lcs(a, b) -> int:
    """Longest common subsequence by enumerating subsequences of the shorter input."""
    a, b = list(a), list(b)
    if len(a) > 12 or len(b) > 12:
        raise ValueError("oracle_lcs is exponential; inputs are limited to length 12")
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in combinations(range(len(short)), size):
            if _is_subsequence([short[i] for i in idx], long_):
                return size
    return 0

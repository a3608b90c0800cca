"""Cache compression policies.

Instruction encoding (prefill) and output generation (decode) are handled by
different rules:

* prefill: score every cached position by how much attention it received,
  keep the top ``ceil(budget * T)`` positions as anchors and fold every other
  position into its nearest anchor (bucket mean), or evict / cluster it;
* decode: once the cache exceeds its budget, drop one slot per step at a fixed
  truncation point just behind the recent window.

Full, Local (attention sink + recency window) and H2O (heavy-hitter eviction)
baselines and the ablation variants are expressed through the same
:class:`~elastic_kv.cache.PolicyConfig`.
"""

from __future__ import annotations

import json
from collections.abc import Sequence

import numpy as np

from .cache import (
    BucketPartition,
    CacheError,
    CacheSlot,
    Discard,
    LayerKvCache,
    MergeMode,
    PolicyConfig,
    PolicyKind,
    Scope,
    Statistic,
    over_budget,
    retained_count,
)


# -- importance ---------------------------------------------------------------------


def column_statistic(attn: np.ndarray, statistic: Statistic, decay: float = 0.9) -> np.ndarray:
    """Per-position statistic of a causal attention stack ``(..., T, T)`` -> ``(..., T)``."""
    attn = np.asarray(attn, dtype=np.float64)
    t = attn.shape[-1]
    if statistic is Statistic.SUM:
        return attn.sum(axis=-2)
    if statistic is Statistic.MEAN:
        return attn.sum(axis=-2) / (t - np.arange(t))
    if statistic is Statistic.MOVING_AVERAGE:
        # s <- decay * s + A[m, :] over rows m = 0..T-1
        w = decay ** np.arange(t - 1, -1, -1, dtype=np.float64)
        return np.einsum("m,...mn->...n", w, attn)
    raise ValueError(statistic)


def importance_scores(
    attention: Sequence[np.ndarray],
    statistic: Statistic = Statistic.SUM,
    scope: Scope = Scope.LAYER,
    decay: float = 0.9,
) -> np.ndarray:
    """Importance of every prefill position.

    ``attention`` holds one ``(heads, T, T)`` causal attention stack per layer.
    Returns ``(L, T)`` for layer scope (head mean), ``(L, K, T)`` for head scope
    and ``(T,)`` for shared scope (mean over heads and layers).
    """
    if len(attention) == 0:
        raise ValueError("empty attention set")
    per_head = np.stack([column_statistic(a, statistic, decay) for a in attention])
    if scope is Scope.HEAD:
        return per_head
    per_layer = per_head.mean(axis=1)
    if scope is Scope.LAYER:
        return per_layer
    return per_layer.mean(axis=0)


def _per_head(scores: np.ndarray, n_layers: int, n_heads: int) -> np.ndarray:
    """Broadcast any importance layout to ``(L, K, T)``."""
    if scores.ndim == 1:
        scores = scores[None, None, :]
    elif scores.ndim == 2:
        scores = scores[:, None, :]
    t = scores.shape[-1]
    return np.broadcast_to(scores, (n_layers, n_heads, t))


# -- anchors and buckets ---------------------------------------------------------------


def select_anchors(
    scores,
    budget: float,
    protect_first: bool = True,
    protect_last: bool = True,
) -> np.ndarray:
    """Ascending indices of the ``ceil(budget * T)`` most important positions.

    Protected positions (first / last) are always included and count towards
    the total. Equal scores prefer the smaller index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    t = scores.shape[0]
    if t == 0:
        raise ValueError("cannot select anchors from an empty sequence")
    n_keep = retained_count(budget, t)
    forced = []
    if protect_first:
        forced.append(0)
    if protect_last and t - 1 not in forced:
        forced.append(t - 1)
    n_keep = max(n_keep, len(forced))
    keyed = scores.copy()
    keyed[forced] = np.inf
    order = np.lexsort((np.arange(t), -keyed))
    return np.sort(order[:n_keep])


def partition_buckets(anchors, t: int) -> BucketPartition:
    """Split ``0..t-1`` into one contiguous bucket per anchor.

    Bucket ``k`` runs from one past the midpoint with the previous anchor up to
    the (floored) midpoint with the next; the first starts at 0 and the last
    ends at ``t - 1``. A position equidistant from two anchors joins the
    earlier one.
    """
    a = np.asarray(anchors, dtype=np.int64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("anchors must be a non-empty 1-D sequence")
    if (np.diff(a) <= 0).any():
        raise ValueError("anchors must be strictly ascending")
    if a[0] < 0 or a[-1] >= t:
        raise ValueError(f"anchors out of range for length {t}")
    mid = (a[:-1] + a[1:]) // 2
    lo = np.concatenate(([0], mid + 1))
    hi = np.concatenate((mid, [t - 1]))
    return BucketPartition(anchors=a, lo=lo, hi=hi)


def bucket_labels(partition: BucketPartition, t: int) -> np.ndarray:
    """Bucket id of every position ``0..t-1``."""
    return np.repeat(np.arange(len(partition)), partition.sizes)[:t]


# -- merging -----------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, iters: int = 10) -> np.ndarray:
    """Lloyd's k-means, returns a label per point.

    Centres start at evenly spaced points (deterministic, no RNG). An empty
    cluster is re-seeded with the point farthest from its current centre.
    """
    n = points.shape[0]
    k = min(k, n)
    centres = points[np.round(np.linspace(0, n - 1, k)).astype(np.int64)].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=-1)
        labels = d2.argmin(axis=1)
        for c in range(k):
            members = labels == c
            if members.any():
                centres[c] = points[members].mean(axis=0)
            else:
                far = int(d2[np.arange(n), labels].argmax())
                centres[c] = points[far]
                labels[far] = c
                d2[far] = 0.0
    return labels


def _group_mean(x: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Mean of the rows of ``x`` per label, ``x`` shaped ``(n, d)``."""
    out = np.zeros((n_groups,) + x.shape[1:])
    np.add.at(out, labels, x)
    sizes = np.bincount(labels, minlength=n_groups).astype(np.float64)
    return out / sizes.reshape((-1,) + (1,) * (x.ndim - 1))


def _merge_head(cache: LayerKvCache, h: int, part: BucketPartition, mode: MergeMode, clusters: int):
    """Compressed contents for head ``h``: keys, values, origins, spans, weights, scores, counts."""
    n = cache.length
    keys, vals = cache.keys[h, :n], cache.values[h, :n]
    scores, counts = cache.scores[h, :n], cache.counts[h, :n]
    anchors = part.anchors
    if mode is MergeMode.MERGE:
        labels = bucket_labels(part, n)
        nb = len(part)
        k_new = _group_mean(keys, labels, nb)
        v_new = _group_mean(vals, labels, nb)
        # singleton buckets keep their vectors bit-exact
        single = part.sizes == 1
        k_new[single] = keys[anchors[single]]
        v_new[single] = vals[anchors[single]]
        spans = np.stack([part.lo, part.hi], axis=1)
        return (k_new, v_new, anchors, spans, part.sizes,
                np.bincount(labels, scores, nb), np.bincount(labels, counts, nb))

    base_spans = cache.spans[h, :n]
    base_w = cache.weights[h, :n]
    parts = [(keys[anchors], vals[anchors], cache.origins[h, anchors], base_spans[anchors],
              base_w[anchors], scores[anchors], counts[anchors])]
    if mode is MergeMode.CLUSTER:
        rest = np.setdiff1d(np.arange(n), anchors)
        if rest.size:
            _, labels = np.unique(kmeans(keys[rest], clusters), return_inverse=True)
            nc = int(labels.max()) + 1
            members = [rest[labels == c] for c in range(nc)]
            order = sorted(range(nc), key=lambda c: members[c][0])
            remap = np.empty(nc, dtype=np.int64)
            remap[order] = np.arange(nc)
            labels = remap[labels]
            members = [members[c] for c in order]
            parts.append((
                _group_mean(keys[rest], labels, nc),
                _group_mean(vals[rest], labels, nc),
                np.array([m[0] for m in members]),
                np.array([[m[0], m[-1]] for m in members]),
                np.bincount(labels, base_w[rest], nc).astype(np.int64),
                np.bincount(labels, scores[rest], nc),
                np.bincount(labels, counts[rest], nc),
            ))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(7))


def merge_buckets(
    cache: LayerKvCache,
    partition: BucketPartition | Sequence[BucketPartition],
    merge_mode: MergeMode = MergeMode.MERGE,
    clusters: int = 10,
) -> LayerKvCache:
    """Compress an uncompressed layer cache in place and return it.

    ``partition`` is either shared by all heads or given per head. Merge
    replaces each bucket by the mean of its keys and of its values; Evict keeps
    only the anchors; Cluster keeps the anchors and appends k-means centroids
    of the remaining keys (values averaged per cluster).
    """
    parts = [partition] * cache.n_heads if isinstance(partition, BucketPartition) else list(partition)
    if len(parts) != cache.n_heads:
        raise ValueError("need one partition per head")
    for p in parts:
        if int(p.hi[-1]) + 1 != cache.length or p.lo[0] != 0:
            raise ValueError(f"partition covers 0..{int(p.hi[-1])}, cache length is {cache.length}")
    merged = [_merge_head(cache, h, p, merge_mode, clusters) for h, p in enumerate(parts)]
    sizes = {m[0].shape[0] for m in merged}
    if len(sizes) != 1:
        raise CacheError("heads ended with different cache lengths")
    cache.replace(*(np.stack([m[i] for m in merged]) for i in range(7)))
    cache.instruction_boundary = cache.length
    return cache


# -- instruction encoding -------------------------------------------------------------


def _seed_scores(cache: LayerKvCache, head_scores: np.ndarray, t: int) -> None:
    cache.scores[:, :t] = head_scores
    cache.counts[:, :t] = t - np.arange(t)


def elastic_prefill_compress(
    layers: Sequence[LayerKvCache],
    attention: Sequence[np.ndarray],
    config: PolicyConfig,
) -> list[BucketPartition]:
    """Anchor selection + bucket merge on every layer; returns head-0 partitions."""
    t = layers[0].length
    n_layers, n_heads = len(layers), layers[0].n_heads
    scores = importance_scores(attention, config.statistic, config.scope, config.decay)
    per_head = _per_head(scores, n_layers, n_heads)
    mode = MergeMode.EVICT if config.kind is PolicyKind.H2O else config.merge_mode
    out = []
    for i, cache in enumerate(layers):
        if cache.length != t:
            raise CacheError("prefill compression needs equal, uncompressed layer caches")
        _seed_scores(cache, per_head[i], t)
        if config.scope is Scope.HEAD:
            partition = [partition_buckets(select_anchors(per_head[i, h], config.budget,
                                                          config.protect_first,
                                                          config.protect_last), t)
                         for h in range(n_heads)]
        else:
            partition = partition_buckets(select_anchors(per_head[i, 0], config.budget,
                                                         config.protect_first,
                                                         config.protect_last), t)
        merge_buckets(cache, partition, mode, config.clusters)
        out.append(partition[0] if isinstance(partition, list) else partition)
    return out


def local_prefill_compress(layers: Sequence[LayerKvCache], attention, config: PolicyConfig) -> None:
    """Keep the sink slot plus the most recent slots, evict the middle."""
    t = layers[0].length
    n_keep = retained_count(config.budget, t)
    sink = 1 if config.protect_first else 0
    n_keep = max(n_keep, sink + 1)
    keep = np.concatenate((np.arange(sink), np.arange(t - (n_keep - sink), t)))
    keep = np.unique(keep)
    scores = importance_scores(attention, config.statistic, Scope.LAYER, config.decay)
    for i, cache in enumerate(layers):
        _seed_scores(cache, scores[i], t)
        part = partition_buckets(keep, t)
        merge_buckets(cache, part, MergeMode.EVICT)


# -- output generation ----------------------------------------------------------------


def _window(length: int, config: PolicyConfig) -> tuple[int, int]:
    lo = 1 if config.protect_first else 0
    hi = length - 2 if config.protect_last else length - 1
    if hi < lo:
        raise CacheError(f"cache of length {length} has no removable slot")
    return lo, hi


def truncation_index(length: int, config: PolicyConfig) -> int:
    """Slot removed by the fixed-point rule: the one just behind the recent window.

    With offset 0 this keeps the ``recent_window`` newest slots; the index is
    clamped so protected slots survive.
    """
    lo, hi = _window(length, config)
    return min(max(length - config.recent_window - 1 + config.trunc_offset, lo), hi)


def frequency_victims(cache: LayerKvCache, config: PolicyConfig) -> np.ndarray:
    """Per-head index of the least-attended slot outside the recent window."""
    n = cache.length
    lo, hi = _window(n, config)
    top = min(hi, n - config.recent_window - 1)
    if top < lo:
        top = hi
    s = cache.scores[:, lo : top + 1]
    if config.statistic is Statistic.MEAN:
        s = s / np.maximum(cache.counts[:, lo : top + 1], 1.0)
    return lo + s.argmin(axis=1)


def apply_decode_rule(cache: LayerKvCache, total_len: int, config: PolicyConfig) -> int | None:
    """Run the over-budget check after an append; returns the removed index (head 0)."""
    if config.kind is PolicyKind.FULL or not over_budget(cache.length, total_len, config.budget):
        return None
    if config.discard is Discard.FIXED:
        victim = truncation_index(cache.length, config)
    elif config.discard is Discard.RECENT:
        victim = _window(cache.length, config)[0]
    else:
        victim = frequency_victims(cache, config)
    cache.remove(victim)
    return int(np.asarray(victim).reshape(-1)[0])


def _decode_update(cache, new_slot, total_len, config, discard, attention_row=None):
    cache.append_slot(new_slot)
    if attention_row is not None:
        cache.observe(np.atleast_2d(attention_row), config.statistic, config.scope, config.decay)
    rule = config if config.discard is discard else PolicyConfig(**{**config.as_dict(), "discard": discard})
    apply_decode_rule(cache, total_len, rule)
    return cache


def elastic_decode_update(cache: LayerKvCache, new_slot: CacheSlot, total_len: int,
                          config: PolicyConfig) -> LayerKvCache:
    """Append ``new_slot``; if over budget drop the slot at the truncation point."""
    return _decode_update(cache, new_slot, total_len, config, Discard.FIXED)


def h2o_decode_update(cache: LayerKvCache, new_slot: CacheSlot, total_len: int,
                      config: PolicyConfig, attention_row=None) -> LayerKvCache:
    """Append ``new_slot``, accumulate ``attention_row`` and evict the least-attended slot."""
    return _decode_update(cache, new_slot, total_len, config, Discard.FREQUENCY, attention_row)


def local_decode_update(cache: LayerKvCache, new_slot: CacheSlot, total_len: int,
                        config: PolicyConfig) -> LayerKvCache:
    """Append ``new_slot``; if over budget drop the oldest non-sink slot."""
    return _decode_update(cache, new_slot, total_len, config, Discard.RECENT)


# -- a full cache set -----------------------------------------------------------------


class CacheSet:
    """All layer caches of one generation plus the policy that manages them."""

    def __init__(self, policy: PolicyConfig, n_layers: int, n_heads: int, d_head: int,
                 capacity: int):
        self.policy = policy
        self.layers = [LayerKvCache(n_heads, d_head, capacity) for _ in range(n_layers)]
        self.total_len = 0
        self.last_attended = 0
        self.prefill_partitions: list[BucketPartition] | None = None

    @classmethod
    def for_model(cls, model, policy: PolicyConfig | None = None) -> "CacheSet":
        c = model.config
        return cls(policy or PolicyConfig(kind=PolicyKind.FULL), c.n_layers, c.n_heads,
                   c.d_head, c.max_seq)

    def __len__(self) -> int:
        return self.layers[0].length

    @property
    def lengths(self) -> list[int]:
        return [c.length for c in self.layers]

    def is_empty(self) -> bool:
        return all(c.length == 0 for c in self.layers)

    def check_consistent(self) -> None:
        if len(set(self.lengths)) != 1:
            raise CacheError(f"layer caches disagree in length: {self.lengths}")

    def compress_prefill(self, attention: Sequence[np.ndarray]) -> None:
        p = self.policy
        if p.kind is PolicyKind.FULL:
            scores = importance_scores(attention, Statistic.SUM, Scope.LAYER)
            t = self.layers[0].length
            for i, cache in enumerate(self.layers):
                _seed_scores(cache, scores[i], t)
            return
        if p.kind is PolicyKind.LOCAL:
            local_prefill_compress(self.layers, attention, p)
        else:
            self.prefill_partitions = elastic_prefill_compress(self.layers, attention, p)

    @property
    def tracks_scores(self) -> bool:
        """Decode-time score accumulation is only kept where a rule reads it."""
        return self.policy.kind is not PolicyKind.FULL and self.policy.discard is Discard.FREQUENCY

    def observe(self, layer: int, attn: np.ndarray) -> None:
        p = self.policy
        self.layers[layer].observe(attn, p.statistic, p.scope, p.decay)

    def finish_step(self) -> list[int | None]:
        """Apply the decode rule to every layer after a step has been appended."""
        return [apply_decode_rule(c, self.total_len, self.policy) for c in self.layers]

    def snapshot(self) -> list[dict]:
        return [c.snapshot(i) for i, c in enumerate(self.layers)]

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.snapshot():
                fh.write(json.dumps(row) + "\n")

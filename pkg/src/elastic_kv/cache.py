"""KV-cache storage and policy configuration.

A :class:`LayerKvCache` holds the key/value vectors of one transformer layer
for all of its heads, together with per-slot bookkeeping: which token the slot
stands for (``origin``), the token range it covers (``span``), how many tokens
were merged into it (``weight``) and the accumulated attention it received
(``scores`` / ``counts``). Buffers are pre-allocated so appends and single-slot
removals never reallocate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np


class CacheError(RuntimeError):
    """The cache is in a state the requested operation cannot handle."""


class PolicyKind(str, Enum):
    FULL = "full"
    LOCAL = "local"
    H2O = "h2o"
    ELASTIC = "elastic"


class Statistic(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    MOVING_AVERAGE = "moving_average"


class Scope(str, Enum):
    SHARED = "shared"
    HEAD = "head"
    LAYER = "layer"


class MergeMode(str, Enum):
    EVICT = "evict"
    MERGE = "merge"
    CLUSTER = "cluster"


class Discard(str, Enum):
    """Which slot the decode phase drops once the cache is over budget."""

    FIXED = "fixed"          # fixed truncation point behind the recent window
    FREQUENCY = "frequency"  # least accumulated attention (heavy-hitter style)
    RECENT = "recent"        # oldest non-sink slot, keeps the most recent ones


_DEFAULT_DISCARD = {
    PolicyKind.FULL: Discard.FIXED,
    PolicyKind.LOCAL: Discard.RECENT,
    PolicyKind.H2O: Discard.FREQUENCY,
    PolicyKind.ELASTIC: Discard.FIXED,
}

_ALIASES = {
    "layerwise": "layer", "layer_wise": "layer", "headwise": "head", "head_wise": "head",
    "moving-average": "moving_average", "movingaverage": "moving_average", "ma": "moving_average",
    "fixed-point": "fixed", "fixed_point": "fixed", "most_recent": "recent", "most-recent": "recent",
    "clustering": "cluster", "eviction": "evict", "merging": "merge", "streaming": "local",
}

_ENUM_FIELDS = {
    "kind": PolicyKind,
    "statistic": Statistic,
    "scope": Scope,
    "merge_mode": MergeMode,
    "discard": Discard,
}

_SHORT_KEYS = {
    "budget": "budget", "gamma": "budget", "window": "recent_window", "w": "recent_window",
    "offset": "trunc_offset", "p": "trunc_offset", "stat": "statistic", "merge": "merge_mode",
    "k": "clusters",
}


def _coerce(name: str, value):
    if name in _ENUM_FIELDS:
        if isinstance(value, _ENUM_FIELDS[name]):
            return value
        text = str(value).strip().lower()
        return _ENUM_FIELDS[name](_ALIASES.get(text, text))
    if name in ("budget", "decay"):
        return float(value)
    if name in ("recent_window", "trunc_offset", "clusters"):
        return int(value)
    if name in ("protect_first", "protect_last"):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    raise KeyError(name)


@dataclass(frozen=True)
class PolicyConfig:
    """Cache policy selection and its knobs.

    ``discard`` defaults per kind: Elastic uses the fixed truncation point,
    H2O the accumulated-score rule, Local the oldest non-sink slot.
    """

    kind: PolicyKind = PolicyKind.ELASTIC
    budget: float = 1.0
    recent_window: int = 25
    trunc_offset: int = 0
    statistic: Statistic = Statistic.SUM
    decay: float = 0.9
    scope: Scope = Scope.LAYER
    merge_mode: MergeMode = MergeMode.MERGE
    clusters: int = 10
    discard: Discard | None = None
    protect_first: bool = True
    protect_last: bool = True

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                object.__setattr__(self, f.name, _coerce(f.name, value))
        if self.discard is None:
            object.__setattr__(self, "discard", _DEFAULT_DISCARD[self.kind])
        if not 0.0 < self.budget <= 1.0:
            raise ValueError(f"budget must be in (0, 1], got {self.budget}")
        if self.recent_window < 1:
            raise ValueError("recent_window must be >= 1")
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")

    @classmethod
    def parse(cls, text: str, **defaults) -> "PolicyConfig":
        """Build a config from ``"kind"`` or ``"kind:key=value,key=value"``.

        >>> PolicyConfig.parse("elastic:merge=evict,discard=frequency").merge_mode.value
        'evict'
        """
        head, _, tail = text.strip().partition(":")
        kwargs = dict(defaults)
        kwargs["kind"] = head
        for item in filter(None, (s.strip() for s in tail.replace(";", ",").split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"bad policy option {item!r} in {text!r}")
            key = key.strip().lower().replace("-", "_")
            kwargs[_SHORT_KEYS.get(key, key)] = value.strip()
        names = {f.name for f in fields(cls)}
        unknown = set(kwargs) - names
        if unknown:
            raise ValueError(f"unknown policy option(s) {sorted(unknown)}")
        return cls(**kwargs)

    def with_budget(self, budget: float) -> "PolicyConfig":
        return replace(self, budget=budget)

    @property
    def label(self) -> str:
        """Short name used in reports; non-default knobs are listed."""
        base = PolicyConfig(kind=self.kind)
        extra = []
        for name in ("discard", "merge_mode", "scope", "statistic", "recent_window",
                     "trunc_offset", "decay", "clusters", "protect_first", "protect_last"):
            value = getattr(self, name)
            if value != getattr(base, name):
                extra.append(f"{name}={value.value if isinstance(value, Enum) else value}")
        return self.kind.value + (f"[{','.join(extra)}]" if extra else "")

    def as_dict(self) -> dict:
        return {f.name: (v.value if isinstance(v := getattr(self, f.name), Enum) else v)
                for f in fields(self)}


def retained_count(budget: float, n: int) -> int:
    """Number of slots kept out of ``n`` at retention ratio ``budget``: ceil(budget * n).

    A 1e-9 slack absorbs float error so that e.g. 0.7 * 10 keeps exactly 7.
    """
    if n <= 0:
        return 0
    return max(1, min(n, math.ceil(budget * n - 1e-9)))


def over_budget(length: int, total_len: int, budget: float) -> bool:
    """True when a freshly appended slot pushes the cache over its budget.

    The ratio is taken over the slots held before the append: removal happens
    once ``length - 1 >= budget * total_len``.
    """
    return length - 1 >= budget * total_len - 1e-9


@dataclass
class CacheSlot:
    key: np.ndarray
    value: np.ndarray
    origin: int
    span: tuple[int, int] = (-1, -1)
    weight: int = 1
    score: float = 0.0

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError("slot weight must be >= 1")
        if self.span == (-1, -1):
            self.span = (self.origin, self.origin)


@dataclass
class BucketPartition:
    """Anchors and the inclusive ``[lo, hi]`` token range owned by each."""

    anchors: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def buckets(self) -> list[range]:
        return [range(int(a), int(b) + 1) for a, b in zip(self.lo, self.hi)]

    @property
    def sizes(self) -> np.ndarray:
        return self.hi - self.lo + 1

    def __len__(self) -> int:
        return len(self.anchors)


# per-slot metadata columns stored after the key and value vectors
_ORIGIN, _SPAN_LO, _SPAN_HI, _WEIGHT, _SCORE, _COUNT = range(6)
_N_META = 6


@dataclass
class LayerKvCache:
    """One layer's cache for all heads.

    Everything a slot carries lives in a single ``(heads, capacity, 2*d_head + 6)``
    float buffer, so an append or a removal is one slice write. ``keys``,
    ``values``, ``origins``, ``spans``, ``weights``, ``scores`` and ``counts``
    are views into it; the integer-valued columns hold exact small integers.
    """

    n_heads: int
    d_head: int
    capacity: int
    length: int = 0
    instruction_boundary: int = 0
    data: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.d_head
        self.data = np.zeros((self.n_heads, self.capacity, 2 * d + _N_META))
        self.keys = self.data[:, :, :d]
        self.values = self.data[:, :, d : 2 * d]
        meta = 2 * d
        self.origins = self.data[:, :, meta + _ORIGIN]
        self.spans = self.data[:, :, meta + _SPAN_LO : meta + _SPAN_HI + 1]
        self.weights = self.data[:, :, meta + _WEIGHT]
        self.scores = self.data[:, :, meta + _SCORE]
        self.counts = self.data[:, :, meta + _COUNT]
        self._meta = meta
        self._fresh = np.zeros(_N_META)
        self._fresh[_WEIGHT] = 1.0

    def __len__(self) -> int:
        return self.length

    # -- filling -----------------------------------------------------------

    def load(self, keys: np.ndarray, values: np.ndarray, start: int = 0) -> None:
        """Bulk-store uncompressed prefill vectors, shape ``(heads, T, d_head)``."""
        if self.length:
            raise CacheError("load() needs an empty cache")
        t = keys.shape[1]
        if t > self.capacity:
            raise CacheError(f"{t} slots exceed capacity {self.capacity}")
        idx = np.arange(start, start + t)
        self.data[:, :t] = 0.0
        self.keys[:, :t] = keys
        self.values[:, :t] = values
        self.origins[:, :t] = idx
        self.spans[:, :t, 0] = idx
        self.spans[:, :t, 1] = idx
        self.weights[:, :t] = 1
        self.length = t
        self.instruction_boundary = t

    def append(self, key: np.ndarray, value: np.ndarray, origin: int) -> None:
        n = self.length
        if n >= self.capacity:
            raise CacheError("cache capacity exhausted")
        d, row = self.d_head, self.data[:, n]
        row[:, :d] = key
        row[:, d : 2 * d] = value
        fresh = self._fresh
        fresh[_ORIGIN] = fresh[_SPAN_LO] = fresh[_SPAN_HI] = origin
        row[:, self._meta :] = fresh
        self.length = n + 1

    def append_slot(self, slot: CacheSlot) -> None:
        """Append the same slot to every head (key/value may be per head)."""
        key = np.broadcast_to(slot.key, (self.n_heads, self.d_head))
        value = np.broadcast_to(slot.value, (self.n_heads, self.d_head))
        self.append(key, value, slot.origin)
        n = self.length - 1
        self.spans[:, n] = slot.span
        self.weights[:, n] = slot.weight
        self.scores[:, n] = slot.score

    def replace(self, keys, values, origins, spans, weights, scores, counts) -> None:
        """Overwrite the contents with ``(heads, n, ...)`` arrays."""
        n = keys.shape[1]
        self.keys[:, :n] = keys
        self.values[:, :n] = values
        self.origins[:, :n] = origins
        self.spans[:, :n] = spans
        self.weights[:, :n] = weights
        self.scores[:, :n] = scores
        self.counts[:, :n] = counts
        self.length = n

    # -- views ---------------------------------------------------------------

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.length
        return self.keys[:, :n], self.values[:, :n]

    def slot(self, head: int, index: int) -> CacheSlot:
        if not 0 <= index < self.length:
            raise IndexError(index)
        return CacheSlot(
            key=self.keys[head, index].copy(),
            value=self.values[head, index].copy(),
            origin=int(self.origins[head, index]),
            span=(int(self.spans[head, index, 0]), int(self.spans[head, index, 1])),
            weight=int(self.weights[head, index]),
            score=float(self.scores[head, index]),
        )

    def slots(self, head: int = 0) -> list[CacheSlot]:
        return [self.slot(head, i) for i in range(self.length)]

    def head_consistent(self) -> bool:
        o = self.origins[:, : self.length]
        return bool((o == o[:1]).all())

    def retained_origins(self, head: int = 0) -> list[int]:
        return self.origins[head, : self.length].astype(np.int64).tolist()

    # -- decode-time bookkeeping -------------------------------------------

    def observe(self, attn: np.ndarray, statistic: Statistic, scope: Scope, decay: float) -> None:
        """Fold one decode step's attention row ``(heads, length)`` into the scores."""
        n = self.length
        row = attn if scope is Scope.HEAD else attn.mean(axis=0, keepdims=True)
        if statistic is Statistic.MOVING_AVERAGE:
            self.scores[:, :n] *= decay
        self.scores[:, :n] += row
        self.counts[:, :n] += 1.0

    def remove(self, index) -> None:
        """Drop one slot per head; ``index`` is an int or one index per head."""
        n = self.length
        if isinstance(index, (int, np.integer)):
            i = int(index)
            if not 0 <= i < n:
                raise CacheError(f"remove index {index} out of range for length {n}")
            self.data[:, i : n - 1] = self.data[:, i + 1 : n]
            self.length = n - 1
            if i < self.instruction_boundary:
                self.instruction_boundary -= 1
            return
        idx = np.broadcast_to(np.asarray(index, dtype=np.int64), (self.n_heads,))
        if ((idx < 0) | (idx >= n)).any():
            raise CacheError(f"remove index {index} out of range for length {n}")
        if (idx == idx[0]).all():
            i = int(idx[0])
            self.data[:, i : n - 1] = self.data[:, i + 1 : n]
        else:
            for h, i in enumerate(idx.tolist()):
                self.data[h, i : n - 1] = self.data[h, i + 1 : n]
        self.length = n - 1
        if idx[0] < self.instruction_boundary:
            self.instruction_boundary -= 1

    def snapshot(self, layer: int) -> dict:
        """JSON-ready dump: flat lists when heads agree, per-head lists otherwise."""
        n = self.length
        if self.head_consistent() and (self.weights[:, :n] == self.weights[:1, :n]).all():
            origins = self.origins[0, :n].astype(np.int64).tolist()
            weights = self.weights[0, :n].astype(np.int64).tolist()
        else:
            origins = self.origins[:, :n].astype(np.int64).tolist()
            weights = self.weights[:, :n].astype(np.int64).tolist()
        return {
            "layer": layer,
            "origins": origins,
            "weights": weights,
            "scores": self.scores[:, :n].mean(axis=0).tolist(),
        }

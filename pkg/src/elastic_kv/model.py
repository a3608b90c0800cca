"""A small deterministic decoder-only transformer.

Pre-norm blocks, learned absolute position embeddings, GELU MLP of width
``4 * d_model``, untied output head. All KV storage goes through a
:class:`~elastic_kv.policies.CacheSet`, so the same model runs under any cache
policy.

Weight file layout (little endian)::

    b"EKV1"
    uint32 n_layers, n_heads, d_model, d_head, vocab_size
    float32 arrays, row-major, in the order of ``weight_shapes``:
    tok_emb, pos_emb, then per layer LAYER_WEIGHTS, then lnf_g, lnf_b,
    w_out, b_out

``max_seq`` is not in the header; it is recovered from the payload size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkern as nk
from .cache import PolicyConfig, PolicyKind
from .policies import CacheSet
from .tokenizer import EOS, N_SPECIAL, BYTE_VOCAB

MAGIC = b"EKV1"

LAYER_WEIGHTS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = BYTE_VOCAB + N_SPECIAL
    max_seq: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ModelError(
                f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}")
        if self.vocab_size < BYTE_VOCAB + N_SPECIAL:
            raise ModelError(f"vocab_size must be >= {BYTE_VOCAB + N_SPECIAL}")
        if min(self.n_layers, self.n_heads, self.d_head, self.max_seq) < 1:
            raise ModelError("dimensions must be positive")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def weight_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.d_model, cfg.vocab_size
    layer = {"ln1_g": (d,), "ln1_b": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d),
             "wo": (d, d), "ln2_g": (d,), "ln2_b": (d,), "w1": (d, cfg.d_ff),
             "b1": (cfg.d_ff,), "w2": (cfg.d_ff, d), "b2": (d,)}
    out = [("tok_emb", (v, d)), ("pos_emb", (cfg.max_seq, d))]
    for i in range(cfg.n_layers):
        out += [(f"layers.{i}.{n}", layer[n]) for n in LAYER_WEIGHTS]
    out += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, v)), ("b_out", (v,))]
    return out


def _init_std(name: str, cfg: ModelConfig) -> float:
    d = cfg.d_model
    base = name.rsplit(".", 1)[-1]
    return {
        "tok_emb": 1.0, "pos_emb": 0.5,
        # sharp-ish attention so importance scores are informative
        "wq": 2.0 / np.sqrt(d), "wk": 2.0 / np.sqrt(d),
        "wv": 1.0 / np.sqrt(d), "wo": 0.5 / np.sqrt(d),
        "w1": 1.0 / np.sqrt(d), "w2": 0.5 / np.sqrt(cfg.d_ff),
        "w_out": 1.0 / np.sqrt(d),
    }.get(base, 0.0)


def random_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Weights drawn from ``numpy.random.default_rng(seed)`` (PCG64) in file order.

    Matrices are N(0, std^2); layer-norm gains are 1, biases 0. Values are
    rounded to float32 so a save/load round trip is exact.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in weight_shapes(cfg):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            w = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b"):
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * _init_std(name, cfg)
        weights[name] = w.astype(np.float32).astype(np.float64)
    return weights


def save_weights(path, cfg: ModelConfig, weights: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head,
                             cfg.vocab_size))
        for name, shape in weight_shapes(cfg):
            w = np.asarray(weights[name])
            if w.shape != shape:
                raise ModelError(f"{name} has shape {w.shape}, expected {shape}")
            fh.write(w.astype("<f4").tobytes(order="C"))


def load_weights(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read a weight file; returns the config implied by the file (seed=0)."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise ModelError(f"{path}: not an EKV1 weight file")
    n_layers, n_heads, d_model, d_head, vocab = struct.unpack("<5I", raw[4:24])
    n_floats, rem = divmod(len(raw) - 24, 4)
    if rem:
        raise ModelError(f"{path}: truncated payload")
    d = d_model
    per_layer = 4 * d + 4 * d * d + 2 * d * 4 * d + 4 * d + d
    fixed = vocab * d + n_layers * per_layer + 2 * d + d * vocab + vocab
    max_seq, rem = divmod(n_floats - fixed, d) if d else (0, 1)
    if rem or max_seq < 1:
        raise ModelError(f"{path}: payload size does not match header dimensions")
    cfg = ModelConfig(n_layers, n_heads, d_model, d_head, vocab, max_seq)
    flat = np.frombuffer(raw, dtype="<f4", offset=24).astype(np.float64)
    weights, pos = {}, 0
    for name, shape in weight_shapes(cfg):
        size = int(np.prod(shape))
        weights[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return cfg, weights


def load_prefix(path) -> np.ndarray:
    """Embedding-prefix file: uint32 count, uint32 d_model, then float32 rows."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ModelError(f"{path}: truncated prefix file")
    count, d = struct.unpack("<2I", raw[:8])
    if len(raw) != 8 + 4 * count * d:
        raise ModelError(f"{path}: expected {count}x{d} float32 rows")
    return np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float64).reshape(count, d)


def save_prefix(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", *rows.shape))
        fh.write(rows.astype("<f4").tobytes())


@dataclass
class PrefillOutput:
    logits: np.ndarray
    attention: list[np.ndarray]  # per layer, (heads, T, T)


@dataclass
class TokenSequence:
    tokens: list[int]
    instruction_len: int

    def __post_init__(self):
        if self.instruction_len > len(self.tokens):
            raise ValueError("instruction_len exceeds sequence length")

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.instruction_len :]


@dataclass
class RunTrace:
    """Per-generation bookkeeping.

    ``cache_lengths[s]`` is the number of slots attended at decode step ``s``
    (after that step's append, before any removal).
    """

    prefill_len: int = 0
    compressed_len: int = 0
    cache_lengths: list[int] = field(default_factory=list)
    origins: list[list[list[int]]] = field(default_factory=list)

    @property
    def occupancy(self) -> list[int]:
        return [self.compressed_len] + self.cache_lengths


def _ln(x, g, b, eps=1e-5):
    c = x - x.sum() / x.shape[0]
    return c / np.sqrt((c @ c) / c.shape[0] + eps) * g + b


class TinyTransformer:
    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.w = weights
        self.scale = 1.0 / np.sqrt(config.d_head)
        for name, shape in weight_shapes(config):
            if name not in weights or weights[name].shape != shape:
                raise ModelError(f"weight {name} missing or not of shape {shape}")
        self._layers = [{n: weights[f"layers.{i}.{n}"] for n in LAYER_WEIGHTS}
                        for i in range(config.n_layers)]
        for p in self._layers:
            p["wqkv"] = np.concatenate([p["wq"], p["wk"], p["wv"]], axis=1)

    # -- building blocks -------------------------------------------------------

    def _embed(self, tokens, prefix=None) -> np.ndarray:
        cfg = self.config
        tokens = list(tokens)
        if any(not 0 <= t < cfg.vocab_size for t in tokens):
            raise ModelError("token id out of vocabulary")
        x = self.w["tok_emb"][tokens]
        if prefix is not None:
            prefix = np.asarray(prefix, dtype=np.float64)
            if prefix.ndim != 2 or prefix.shape[1] != cfg.d_model:
                raise ModelError(f"prefix embeddings must be (n, {cfg.d_model})")
            x = np.concatenate([prefix, x])
        if x.shape[0] > cfg.max_seq:
            raise ModelError(f"sequence of {x.shape[0]} exceeds max_seq={cfg.max_seq}")
        return x + self.w["pos_emb"][: x.shape[0]]

    def _mlp(self, p, x):
        h = nk.layer_norm(x, p["ln2_g"], p["ln2_b"])
        return nk.matmul(nk.gelu(nk.matmul(h, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]

    def _head(self, x):
        h = nk.layer_norm(x, self.w["lnf_g"], self.w["lnf_b"])
        return nk.matmul(h, self.w["w_out"]) + self.w["b_out"]

    # -- public API ----------------------------------------------------------

    def prefill(self, tokens, cache: CacheSet, prefix=None) -> PrefillOutput:
        """Encode the instruction and store every position's keys/values in ``cache``.

        No compression happens here; call ``cache.compress_prefill`` with the
        returned attention afterwards.
        """
        if not cache.is_empty():
            raise ModelError("prefill needs an empty cache")
        x = self._embed(tokens, prefix)
        t = x.shape[0]
        if t == 0:
            raise ModelError("empty instruction")
        k_heads, dh = self.config.n_heads, self.config.d_head
        attention = []
        for p, layer_cache in zip(self._layers, cache.layers):
            h = nk.layer_norm(x, p["ln1_g"], p["ln1_b"])
            q = nk.matmul(h, p["wq"]).reshape(t, k_heads, dh).transpose(1, 0, 2)
            k = nk.matmul(h, p["wk"]).reshape(t, k_heads, dh).transpose(1, 0, 2)
            v = nk.matmul(h, p["wv"]).reshape(t, k_heads, dh).transpose(1, 0, 2)
            a = nk.row_softmax_causal(nk.matmul(q, k.transpose(0, 2, 1)) * self.scale)
            attention.append(a)
            layer_cache.load(k, v)
            o = nk.matmul(a, v).transpose(1, 0, 2).reshape(t, -1)
            x = x + nk.matmul(o, p["wo"])
            x = x + self._mlp(p, x)
        cache.total_len = t
        return PrefillOutput(logits=self._head(x), attention=attention)

    def decode_step(self, token: int, cache: CacheSet, return_attention: bool = False):
        """Feed one token, attend over the cache and return its logits row.

        The new key/value is appended to every layer before attention, so each
        attention row has one more entry than the cache had before the call.
        The policy's decode rule runs once all layers are done.
        """
        if cache.is_empty():
            raise ModelError("decode_step called before prefill")
        cache.check_consistent()
        pos = cache.total_len
        if pos >= self.config.max_seq:
            raise ModelError(f"position {pos} exceeds max_seq={self.config.max_seq}")
        k_heads, dh, d = self.config.n_heads, self.config.d_head, self.config.d_model
        x = self.w["tok_emb"][token] + self.w["pos_emb"][pos]
        track = cache.tracks_scores
        rows = []
        # hot path: plain numpy on vectors, finiteness is checked on the logits
        for i, (p, layer_cache) in enumerate(zip(self._layers, cache.layers)):
            qkv = _ln(x, p["ln1_g"], p["ln1_b"]) @ p["wqkv"]
            q = qkv[:d].reshape(k_heads, dh, 1)
            layer_cache.append(qkv[d : 2 * d].reshape(k_heads, dh),
                               qkv[2 * d :].reshape(k_heads, dh), pos)
            keys, values = layer_cache.view()
            s = np.matmul(keys, q)[:, :, 0] * self.scale
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            if track:
                cache.observe(i, a)
            if return_attention:
                rows.append(a.copy())
            x = x + np.matmul(a[:, None, :], values).reshape(d) @ p["wo"]
            u = _ln(x, p["ln2_g"], p["ln2_b"]) @ p["w1"] + p["b1"]
            x = x + nk.gelu(u) @ p["w2"] + p["b2"]
        logits = nk._finite(_ln(x, self.w["lnf_g"], self.w["lnf_b"]) @ self.w["w_out"]
                            + self.w["b_out"], "decode step")
        cache.total_len = pos + 1
        cache.last_attended = len(cache)
        cache.finish_step()
        return (logits, rows) if return_attention else logits

    def forward(self, tokens, prefix=None) -> np.ndarray:
        """Logits for every position of a full sequence (single causal pass)."""
        return self.prefill(tokens, CacheSet.for_model(self), prefix).logits


def init_model(config: ModelConfig | None = None, weights_path=None) -> TinyTransformer:
    """Build a model from a weight file, or from ``config.seed`` if no file is given."""
    config = config or ModelConfig()
    if weights_path is None:
        return TinyTransformer(config, random_weights(config))
    file_cfg, weights = load_weights(weights_path)
    for name in ("n_layers", "n_heads", "d_model", "d_head", "vocab_size", "max_seq"):
        if getattr(file_cfg, name) != getattr(config, name):
            raise ModelError(f"weight file {name}={getattr(file_cfg, name)} "
                             f"but config has {getattr(config, name)}")
    return TinyTransformer(config, weights)


# -- generation ----------------------------------------------------------------


def _start(model, instruction, policy, prefix):
    cache = CacheSet.for_model(model, policy)
    out = model.prefill(instruction, cache, prefix)
    trace = RunTrace(prefill_len=cache.total_len)
    cache.compress_prefill(out.attention)
    trace.compressed_len = len(cache)
    return cache, out, trace


def generate(
    model: TinyTransformer,
    instruction,
    policy: PolicyConfig | None = None,
    max_new: int = 64,
    temperature: float = 0.0,
    seed: int | None = None,
    prefix=None,
    stop_at_eos: bool = True,
    record_origins: bool = False,
) -> tuple[TokenSequence, RunTrace]:
    """Autoregressive generation under ``policy``.

    ``temperature == 0`` is greedy; otherwise tokens are sampled from
    ``softmax(logits / temperature)`` with ``numpy.random.default_rng(seed)``.
    Stops after ``max_new`` tokens or at EOS (EOS is not included).
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    policy = policy or PolicyConfig(kind=PolicyKind.FULL)
    instruction = list(instruction)
    cache, out, trace = _start(model, instruction, policy, prefix)
    rng = np.random.default_rng(seed) if temperature > 0 else None
    logits = out.logits[-1]
    generated: list[int] = []
    if record_origins:
        trace.origins.append([c.retained_origins() for c in cache.layers])
    while True:
        if rng is None:
            tok = nk.argmax(logits)
        else:
            probs = nk.softmax_rows(logits / temperature)
            tok = int(rng.choice(len(probs), p=probs))
        if stop_at_eos and tok == EOS:
            break
        generated.append(tok)
        if len(generated) >= max_new:
            break
        logits = model.decode_step(tok, cache)
        trace.cache_lengths.append(cache.last_attended)
        if record_origins:
            trace.origins.append([c.retained_origins() for c in cache.layers])
    return TokenSequence(instruction + generated, len(instruction)), trace


def teacher_force(
    model: TinyTransformer,
    instruction,
    targets,
    policy: PolicyConfig | None = None,
    prefix=None,
) -> tuple[np.ndarray, RunTrace]:
    """Logits predicting each of ``targets`` given the true prefix, through the policy's cache.

    Row 0 comes from the (pre-compression) prefill pass; row ``i`` from the
    decode step that fed ``targets[i - 1]``.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("no target tokens")
    policy = policy or PolicyConfig(kind=PolicyKind.FULL)
    cache, out, trace = _start(model, list(instruction), policy, prefix)
    rows = [out.logits[-1]]
    for tok in targets[:-1]:
        rows.append(model.decode_step(tok, cache))
        trace.cache_lengths.append(cache.last_attended)
    return np.stack(rows), trace

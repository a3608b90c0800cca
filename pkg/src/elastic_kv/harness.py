"""Experiment runner: dataset loading, policy x budget sweeps, benchmarks, CLI.

A sweep writes three files into the output directory:

``report.csv``
    One row per (example, policy, budget), columns ``CSV_COLUMNS``. Only
    deterministic quantities go here, so a rerun with the same seed is
    byte-identical.
``report.json``
    Per-(policy, budget) aggregates, the wall-clock timings and, with
    ``verbose``, the per-step cache-length and FLOP traces.
``plotdata.csv``
    ``policy, budget, mean_ppl, mean_rouge, n_examples``, one row per policy and budget.

Bench mode adds ``bench.csv`` with per-phase timings and throughput.

Config files are INI::

    [experiment]
    dataset = corpus.jsonl          ; default: the bundled corpus
    policies = full; elastic; h2o   ; ';' or newline separated, 'ablation' expands
    budgets = 1.0, 0.5, 0.2
    mode = ppl, rouge               ; any of ppl, rouge, bench
    max_new = 32
    seed = 0
    output = out
    separator = \\n                 ; joins chat history turns
    verbose = false

    [model]                         ; ModelConfig fields, or weights = <path>

    [bench]
    prompt_len = 256
    decode_len = 256
    repeats = 3
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import tokenizer
from .cache import Discard, MergeMode, PolicyConfig, PolicyKind, Scope, Statistic
from .metrics import attention_flops, perplexity, rouge_l_f1
from .model import ModelConfig, generate, init_model, load_prefix, teacher_force
from .policies import CacheSet

DEFAULT_BUDGETS = (1.0, 0.8, 0.6, 0.5, 0.4, 0.2)
DEFAULT_POLICIES = ("full", "local", "h2o", "elastic")
MODES = ("ppl", "rouge", "bench")
CSV_COLUMNS = ("example_id", "policy", "budget", "ppl", "rouge_f1", "peak_kv_bytes",
               "attn_flops", "n_generated", "error")
PLOT_COLUMNS = ("policy", "budget", "mean_ppl", "mean_rouge", "n_examples")
BENCH_COLUMNS = ("policy", "budget", "prompt_len", "decode_len", "prefill_ms", "decode_ms",
                 "tokens_per_s", "attn_flops", "flops_ratio", "kv_bytes_peak")


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# -- dataset -------------------------------------------------------------------------


@dataclass
class Example:
    example_id: str
    instruction: list[int]
    reference: list[int]
    reference_text: str
    image_prefix: Path | None = None


def bundled_corpus() -> Path:
    return Path(str(resources.files("elastic_kv") / "data" / "corpus.jsonl"))


def load_dataset(path=None, separator: str = "\n") -> list[Example]:
    """Read a JSONL corpus.

    Each line needs ``instruction`` and ``reference`` strings; ``id``,
    ``history`` (list of earlier turns, joined with ``separator`` in front of
    the instruction) and ``image_prefix`` (embedding file, relative to the
    corpus) are optional. Instructions are framed ``BOS ... `` and references
    ``... EOS``.
    """
    path = Path(path) if path is not None else bundled_corpus()
    if not path.is_file():
        raise DatasetError(f"{path}: no such dataset")
    examples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DatasetError(f"{path}:{lineno}: expected a JSON object")
        for key in ("instruction", "reference"):
            if not isinstance(obj.get(key), str):
                raise DatasetError(f"{path}:{lineno}: missing or non-string {key!r}")
        history = obj.get("history", [])
        if not isinstance(history, list) or not all(isinstance(h, str) for h in history):
            raise DatasetError(f"{path}:{lineno}: 'history' must be a list of strings")
        text = separator.join(history + [obj["instruction"]])
        prefix = obj.get("image_prefix")
        examples.append(Example(
            example_id=str(obj.get("id", lineno)),
            instruction=tokenizer.encode(text, bos=True),
            reference=tokenizer.encode(obj["reference"], eos=True),
            reference_text=obj["reference"],
            image_prefix=(path.parent / prefix) if prefix else None,
        ))
    if not examples:
        raise DatasetError(f"{path}: empty dataset")
    return examples


# -- configuration ---------------------------------------------------------------------


def ablation_grid() -> list[str]:
    """One elastic policy spec per (discard, merge, scope, statistic) combination."""
    return [f"elastic:discard={d.value},merge={m.value},scope={s.value},statistic={st.value}"
            for d, m, s, st in itertools.product(Discard, MergeMode, Scope, Statistic)]


def expand_policies(specs, **overrides) -> list[PolicyConfig]:
    """Parse policy specs; ``ablation`` expands to the full grid.

    ``overrides`` act as defaults: options written in a spec take precedence.
    """
    out = []
    for spec in specs:
        for s in ablation_grid() if spec.strip().lower() == "ablation" else [spec]:
            out.append(PolicyConfig.parse(s, **overrides))
    return out


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: Path | None = None
    dataset: Path | None = None
    policies: list[str] = field(default_factory=lambda: list(DEFAULT_POLICIES))
    policy_overrides: dict = field(default_factory=dict)
    budgets: list[float] = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    max_new: int = 32
    mode: tuple[str, ...] = ("ppl", "rouge")
    output: Path = Path("out")
    seed: int = 0
    temperature: float = 0.0
    separator: str = "\n"
    verbose: bool = False
    prompt_len: int = 256
    decode_len: int = 256
    repeats: int = 3

    def __post_init__(self):
        self.mode = _split_modes(self.mode)
        self.budgets = [float(b) for b in self.budgets]
        if not self.budgets or any(not 0.0 < b <= 1.0 for b in self.budgets):
            raise ConfigError(f"budgets must all be in (0, 1], got {self.budgets}")
        if not self.policies:
            raise ConfigError("no policies given")
        if self.max_new < 1:
            raise ConfigError("max_new must be >= 1")
        if self.prompt_len < 1 or self.decode_len < 0 or self.repeats < 1:
            raise ConfigError("bench lengths/repeats out of range")
        if self.model.seed != self.seed:
            self.model = replace(self.model, seed=self.seed)
        self.output = Path(self.output)
        # fail early on bad specs
        self.policy_configs()

    def policy_configs(self) -> list[PolicyConfig]:
        try:
            return expand_policies(self.policies, **self.policy_overrides)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad policy: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path):
            raise ConfigError(f"{path}: cannot read config")
        base = Path(path).resolve().parent
        kw: dict = {}
        exp = parser["experiment"] if parser.has_section("experiment") else {}
        for key, value in exp.items():
            opt = _experiment_option(key, value, base)
            if "policy_overrides" in opt:
                kw.setdefault("policy_overrides", {}).update(opt.pop("policy_overrides"))
            kw.update(opt)
        if parser.has_section("model"):
            mkw = {}
            names = {f.name for f in fields(ModelConfig)}
            for key, value in parser["model"].items():
                if key == "weights":
                    kw["weights"] = base / value
                elif key in names:
                    mkw[key] = int(value)
                else:
                    raise ConfigError(f"unknown [model] option {key!r}")
            kw["model"] = ModelConfig(**mkw)
        if parser.has_section("bench"):
            for key, value in parser["bench"].items():
                if key not in ("prompt_len", "decode_len", "repeats"):
                    raise ConfigError(f"unknown [bench] option {key!r}")
                kw[key] = int(value)
        if "seed" in kw and "model" in kw:
            kw["model"] = replace(kw["model"], seed=kw["seed"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _split_modes(mode) -> tuple[str, ...]:
    items = [mode] if isinstance(mode, str) else list(mode)
    out = []
    for item in items:
        out += [m.strip().lower() for m in item.split(",") if m.strip()]
    bad = set(out) - set(MODES)
    if bad or not out:
        raise ConfigError(f"mode must be drawn from {MODES}, got {out}")
    return tuple(m for m in MODES if m in out)


def _experiment_option(key: str, value: str, base: Path) -> dict:
    if key == "dataset":
        return {"dataset": base / value}
    if key == "output":
        return {"output": base / value}
    if key == "policies":
        return {"policies": [p.strip() for p in value.replace("\n", ";").split(";") if p.strip()]}
    if key == "budgets":
        return {"budgets": [float(b) for b in value.replace(";", ",").split(",") if b.strip()]}
    if key == "mode":
        return {"mode": value}
    if key in ("max_new", "seed"):
        return {key: int(value)}
    if key == "temperature":
        return {key: float(value)}
    if key == "separator":
        return {key: value.encode("utf-8").decode("unicode_escape")}
    if key == "verbose":
        return {key: value.strip().lower() in ("1", "true", "yes", "on")}
    if key in ("recent_window", "trunc_offset", "statistic", "scope", "merge_mode"):
        return {"policy_overrides": {key: value}}
    raise ConfigError(f"unknown [experiment] option {key!r}")


# -- sweep -----------------------------------------------------------------------------


@dataclass
class RunReport:
    rows: list[dict]
    aggregates: list[dict]
    timings: list[dict]
    bench: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean ppl / rouge per (policy, budget), in first-seen order; NaNs are skipped."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["policy"], r["budget"]), []).append(r)
    return [{"policy": p, "budget": b, "mean_ppl": _mean(r["ppl"] for r in rs),
             "mean_rouge": _mean(r["rouge_f1"] for r in rs), "n_examples": len(rs)}
            for (p, b), rs in groups.items()]


def _occupancy_cost(trace, cfg: ModelConfig):
    cost = attention_flops(trace.cache_lengths, cfg.d_head, cfg.n_heads, cfg.n_layers)
    peak = max(trace.occupancy) * cfg.n_layers * cfg.n_heads * cfg.d_head * 2 * 8
    return cost, peak


def run_sweep(config: ExperimentConfig, progress=None) -> RunReport:
    """Evaluate every (example, policy, budget) in the configured modes.

    ``ppl`` teacher-forces the reference through the compressed cache;
    ``rouge`` decodes greedily and scores against the full-cache generation of
    the same example. Failures are caught per example and reported in the
    ``error`` column.
    """
    model = init_model(config.model, config.weights)
    examples = load_dataset(config.dataset, config.separator)
    policies = config.policy_configs()
    prefixes: dict[Path, np.ndarray] = {}
    references: dict[str, list[int] | Exception] = {}

    def prefix_of(ex):
        if ex.image_prefix is None:
            return None
        if ex.image_prefix not in prefixes:
            prefixes[ex.image_prefix] = load_prefix(ex.image_prefix)
        return prefixes[ex.image_prefix]

    def gen(ex, policy):
        seq, trace = generate(model, ex.instruction, policy, config.max_new,
                              config.temperature, config.seed, prefix_of(ex))
        return seq.generated, trace

    rows, timings, traces = [], [], []
    for policy in policies:
        for budget in config.budgets:
            pol = policy.with_budget(budget)
            for ex in examples:
                row = {"example_id": ex.example_id, "policy": pol.label, "budget": budget,
                       "ppl": math.nan, "rouge_f1": math.nan, "peak_kv_bytes": 0,
                       "attn_flops": 0, "n_generated": 0, "error": ""}
                t0 = time.perf_counter()
                trace = None
                try:
                    if "ppl" in config.mode:
                        logits, trace = teacher_force(model, ex.instruction, ex.reference, pol,
                                                      prefix_of(ex))
                        row["ppl"] = perplexity(logits, ex.reference).ppl
                    if "rouge" in config.mode:
                        if ex.example_id not in references:
                            try:
                                references[ex.example_id] = gen(ex, PolicyConfig(kind="full"))[0]
                            except Exception as exc:  # noqa: BLE001
                                references[ex.example_id] = exc
                        ref = references[ex.example_id]
                        if isinstance(ref, Exception):
                            raise ref
                        out, trace = gen(ex, pol)
                        row["n_generated"] = len(out)
                        row["rouge_f1"] = rouge_l_f1(out, ref).f1
                    if trace is not None:
                        cost, peak = _occupancy_cost(trace, model.config)
                        row["attn_flops"], row["peak_kv_bytes"] = cost.attn_flops, peak
                except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                    row["error"] = f"{type(exc).__name__}: {exc}"
                wall_ms = (time.perf_counter() - t0) * 1e3
                rows.append(row)
                timings.append({"example_id": ex.example_id, "policy": pol.label,
                                "budget": budget, "wall_ms": wall_ms})
                if config.verbose and trace is not None:
                    traces.append({"example_id": ex.example_id, "policy": pol.label,
                                   "budget": budget, "compressed_len": trace.compressed_len,
                                   "cache_lengths": trace.cache_lengths,
                                   "cumulative_flops": _occupancy_cost(
                                       trace, model.config)[0].cumulative_flops})
                if progress:
                    progress(row)
    report = RunReport(rows=rows, aggregates=aggregate(rows), timings=timings, traces=traces)
    if "bench" in config.mode:
        report.bench = bench_latency(config, model=model)
    return report


# -- benchmark ---------------------------------------------------------------------------


def bench_prompt(length: int, seed: int) -> list[int]:
    """Deterministic pseudo-random printable-byte prompt starting with BOS."""
    rng = np.random.default_rng(seed)
    return [tokenizer.BOS] + rng.integers(32, 127, length - 1).tolist()


def _bench_once(model, prompt, policy, decode_len):
    cache = CacheSet.for_model(model, policy)
    t0 = time.perf_counter()
    out = model.prefill(prompt, cache)
    cache.compress_prefill(out.attention)
    t1 = time.perf_counter()
    lengths = []
    logits = out.logits[-1]
    for _ in range(decode_len):
        logits = model.decode_step(int(np.argmax(logits)), cache)
        lengths.append(cache.last_attended)
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1, lengths


def bench_latency(config: ExperimentConfig, model=None) -> list[dict]:
    """Time prefill and decode separately for every policy and budget.

    Runs are interleaved across policies and the fastest of ``repeats`` is
    kept per phase. A full-cache row is always included so ratios can be
    formed; ``flops_ratio`` is attention FLOPs relative to it.
    """
    model = model or init_model(config.model, config.weights)
    cfg = model.config
    if config.prompt_len + config.decode_len > cfg.max_seq:
        raise ConfigError(f"prompt_len + decode_len exceeds max_seq={cfg.max_seq}")
    prompt = bench_prompt(config.prompt_len, config.seed)
    cells = [(PolicyConfig(kind=PolicyKind.FULL), 1.0)]
    for policy in config.policy_configs():
        for budget in config.budgets:
            if policy.kind is not PolicyKind.FULL:
                cells.append((policy.with_budget(budget), budget))
    best = [[math.inf, math.inf, None] for _ in cells]
    for _ in range(config.repeats):
        for cell, (policy, _) in zip(best, cells):
            pre, dec, lengths = _bench_once(model, prompt, policy, config.decode_len)
            cell[0], cell[1], cell[2] = min(cell[0], pre), min(cell[1], dec), lengths
    full_flops = None
    rows = []
    for (policy, budget), (pre, dec, lengths) in zip(cells, best):
        cost = attention_flops(lengths, cfg.d_head, cfg.n_heads, cfg.n_layers)
        if full_flops is None:
            full_flops = cost.attn_flops
        rows.append({
            "policy": policy.label, "budget": budget, "prompt_len": config.prompt_len,
            "decode_len": config.decode_len, "prefill_ms": pre * 1e3, "decode_ms": dec * 1e3,
            "tokens_per_s": config.decode_len / dec if dec > 0 and config.decode_len else 0.0,
            "attn_flops": cost.attn_flops,
            "flops_ratio": cost.attn_flops / full_flops if full_flops else math.nan,
            "kv_bytes_peak": cost.kv_bytes_peak,
        })
    return rows


# -- output ----------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def write_report(report: RunReport, config: ExperimentConfig) -> Path:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", CSV_COLUMNS, report.rows)
    _write_csv(out / "plotdata.csv", PLOT_COLUMNS, report.aggregates)
    doc = {
        "config": {"policies": [p.label for p in config.policy_configs()],
                   "budgets": config.budgets, "mode": list(config.mode),
                   "max_new": config.max_new, "seed": config.seed,
                   "model": asdict(config.model)},
        "aggregates": report.aggregates,
        "timings": report.timings,
        "bench": report.bench,
        "tokens_per_s": {f"{r['policy']}@{r['budget']}": r["tokens_per_s"]
                         for r in report.bench},
    }
    if config.verbose:
        doc["rows"] = report.rows
        doc["traces"] = report.traces
    (out / "report.json").write_text(json.dumps(_json_safe(doc), indent=1) + "\n")
    if report.bench:
        _write_csv(out / "bench.csv", BENCH_COLUMNS, report.bench)
    return out


# -- CLI -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="elastic-kv", description="KV-cache policy experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a sweep or benchmark")
    run.add_argument("--config", type=Path, help="INI experiment file")
    run.add_argument("--policy", action="append",
                     help="policy spec, e.g. 'elastic:merge=evict' or 'ablation' (repeatable)")
    run.add_argument("--budget", action="append", help="budget(s), comma separated (repeatable)")
    run.add_argument("--mode", help="comma set of ppl, rouge, bench")
    run.add_argument("--recent-window", type=int)
    run.add_argument("--trunc-offset", type=int)
    run.add_argument("--statistic", choices=[s.value for s in Statistic])
    run.add_argument("--scope", choices=[s.value for s in Scope])
    run.add_argument("--merge-mode", choices=[m.value for m in MergeMode])
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--dataset", type=Path)
    run.add_argument("--max-new", type=int)
    run.add_argument("--prompt-len", type=int)
    run.add_argument("--decode-len", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--verbose", action="store_true", help="per-step traces in report.json")
    run.add_argument("--quiet", action="store_true")
    return ap


def config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    kw = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    overrides = dict(base.policy_overrides)
    for name in ("recent_window", "trunc_offset", "statistic", "scope", "merge_mode"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    kw["policy_overrides"] = overrides
    if args.policy:
        kw["policies"] = args.policy
    if args.budget:
        kw["budgets"] = [float(b) for item in args.budget for b in item.split(",") if b.strip()]
    for arg, name in (("mode", "mode"), ("seed", "seed"), ("out", "output"),
                      ("dataset", "dataset"), ("max_new", "max_new"),
                      ("prompt_len", "prompt_len"), ("decode_len", "decode_len"),
                      ("repeats", "repeats")):
        if getattr(args, arg) is not None:
            kw[name] = getattr(args, arg)
    if args.verbose:
        kw["verbose"] = True
    return ExperimentConfig(**kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    modes = set(config.mode)
    if modes == {"bench"}:
        report = RunReport(rows=[], aggregates=[], timings=[], bench=bench_latency(config))
    else:
        def progress(row):
            if not args.quiet:
                status = row["error"] or f"ppl={row['ppl']:.4g} rouge={row['rouge_f1']:.4g}"
                print(f"{row['policy']} @ {row['budget']} {row['example_id']}: {status}",
                      file=sys.stderr)
        try:
            report = run_sweep(config, progress)
        except DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    out = write_report(report, config)
    for r in report.aggregates:
        print(f"{r['policy']:<40} budget={r['budget']:<5} ppl={r['mean_ppl']:.4f} "
              f"rouge={r['mean_rouge']:.4f}")
    for r in report.bench:
        print(f"{r['policy']:<40} budget={r['budget']:<5} prefill={r['prefill_ms']:.1f}ms "
              f"decode={r['decode_ms']:.1f}ms {r['tokens_per_s']:.1f} tok/s "
              f"flops_ratio={r['flops_ratio']:.3f}")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

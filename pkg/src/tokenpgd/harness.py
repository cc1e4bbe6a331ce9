"""Running attacks over datasets, aggregating reports, sweeps and ablations."""

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .attack import AttackConfig, run_attack

REPORT_FORMAT = "tokenpgd-report"
REPORT_VERSION = 1


def _attack_chunk(args):
    method, model, scorer, config, items = args
    return [run_attack(method, ex.seq, ex.cands, model, scorer, config, example_id=idx)
            for idx, ex in items]


def _chunks(items, n):
    size = max(1, math.ceil(len(items) / n))
    return [items[i:i + size] for i in range(0, len(items), size)]


def attack_examples(method, examples, model, scorer, config: AttackConfig, workers=1,
                    id_offset=0, ids=None):
    """Attack every example; results come back in input order whatever ``workers`` is.

    Each example's randomness is keyed on ``ids[i]`` (default ``id_offset + i``).
    """
    if ids is None:
        ids = [id_offset + i for i in range(len(examples))]
    items = [(int(i), ex) for i, ex in zip(ids, examples)]
    if workers <= 1 or len(items) < 2:
        return _attack_chunk((method, model, scorer, config, items))
    tasks = [(method, model, scorer, config, chunk) for chunk in _chunks(items, workers * 4)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_attack_chunk, tasks))
    return [r for part in parts for r in part]


def aggregate(results):
    attacked = [r for r in results if r.clean_correct]
    wins = [r for r in attacked if r.success]
    n = len(attacked)
    asr = 100.0 * len(wins) / n if n else 0.0
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return {
        "total": len(results),
        "attacked": n,
        "skipped": len(results) - n,
        "successes": len(wins),
        "asr": asr,
        "asr_stderr": 100.0 * math.sqrt(asr / 100 * (1 - asr / 100) / n) if n else 0.0,
        "clean_accuracy": 100.0 * n / len(results) if results else 0.0,
        "robust_accuracy": 100.0 * (n - len(wins)) / len(results) if results else 0.0,
        "mean_sites": mean([r.num_sites for r in wins]),
        "mean_fluency_delta": mean([r.fluency_delta for r in wins]),
        "mean_queries": mean([r.queries for r in attacked]),
        "mean_restarts": mean([r.restarts_used for r in attacked]),
    }


def build_report(method, examples, results, config: AttackConfig, wall_clock=None):
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "method": method,
        "config": config.to_dict(),
        "aggregates": aggregate(results),
        "skipped_ids": [ex.id for ex, r in zip(examples, results) if not r.clean_correct],
        "examples": [{"id": ex.id, **r.to_dict()} for ex, r in zip(examples, results)],
    }
    if wall_clock is not None:
        doc["aggregates"]["wall_clock_s"] = wall_clock
    return doc


def dumps_report(doc):
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not an attack report")
    return doc


SWEEP_KINDS = ("budget", "iters", "restarts", "samples")


def sweep_config(base: AttackConfig, kind, value):
    if kind == "budget":
        return replace(base, budget_fraction=float(value))
    if kind == "iters":
        return replace(base, iters=int(value))
    if kind == "restarts":
        return replace(base, max_restarts=int(value))
    if kind == "samples":
        return replace(base, sampler=replace(base.sampler, num_samples=int(value)))
    raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")


def run_sweep(kind, values, method, examples, model, scorer, base: AttackConfig, workers=1):
    """ASR for every swept value: list of ``(x, asr, stderr)`` rows."""
    rows = []
    for v in values:
        agg = aggregate(attack_examples(method, examples, model, scorer,
                                        sweep_config(base, kind, v), workers))
        rows.append((v, agg["asr"], agg["asr_stderr"]))
    return rows


ABLATIONS = ("full", "no_restart", "no_restart_single_sample")


def ablation_config(base: AttackConfig, variant):
    if variant == "full":
        return base
    if variant == "no_restart":
        return replace(base, max_restarts=0)
    if variant == "no_restart_single_sample":
        return replace(base, max_restarts=0, sampler=replace(base.sampler, num_samples=1))
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation(examples, model, scorer, base: AttackConfig, workers=1):
    out = {}
    for variant in ABLATIONS:
        out[variant] = aggregate(attack_examples("pgd", examples, model, scorer,
                                                 ablation_config(base, variant), workers))
    return out


def series_csv(rows, header=("x", "y", "stderr")):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def series_from_reports(docs, key):
    """Plot rows from saved reports, with ``x`` read from the stored config."""
    rows = []
    for doc in docs:
        cfg = doc["config"]
        x = {"budget": cfg["budget_fraction"], "iters": cfg["iters"],
             "restarts": cfg["max_restarts"], "samples": cfg["sampler"]["num_samples"]}[key]
        agg = doc["aggregates"]
        rows.append((x, agg["asr"], agg["asr_stderr"]))
    return sorted(rows)

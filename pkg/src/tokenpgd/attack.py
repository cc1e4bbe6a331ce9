"""PGD attack over relaxed site/replacement variables, plus greedy and exhaustive baselines."""

import itertools
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import sampling
from .core import (CandidateSet, DiscretePerturbation, Instance, RelaxedState, TokenSequence,
                   empty_perturbation)
from .objective import ObjectiveConfig, Problem, cw_loss, estimate_gradient, margin
from .projection import DEFAULT_PARAMS, BisectionParams, project_c1, project_c2, project_c2_rows
from .sampling import SamplerConfig, stream_key


@dataclass(frozen=True)
class AttackConfig:
    iters: int = 20
    lr_sites: float = 0.8
    lr_replace: float = 0.8
    normalize_grads: bool = True
    post_samples: int = 20
    max_restarts: int = 10
    budget_fraction: float = 0.25
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    restart_noise: float = 0.5
    probe_every: int = 5
    projection: BisectionParams = DEFAULT_PARAMS

    def __post_init__(self):
        if self.iters < 1 or self.post_samples < 1:
            raise ValueError("iters and post_samples must be >= 1")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")
        if not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must be in (0, 1]")
        if self.lr_sites <= 0 or self.lr_replace <= 0:
            raise ValueError("learning rates must be positive")

    def budget(self, length: int) -> int:
        # small slack so that e.g. 0.15 * 20 does not floor to 2
        return max(1, math.floor(self.budget_fraction * length + 1e-9))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        nested = {"sampler": SamplerConfig, "objective": ObjectiveConfig,
                  "projection": BisectionParams}
        for key, typ in nested.items():
            if key in doc and isinstance(doc[key], dict):
                doc[key] = typ(**doc[key])
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass
class AttackResult:
    success: bool
    perturbation: DiscretePerturbation
    queries: int
    restarts_used: int
    fluency_delta: float
    final_margin: float
    t0: int
    clean_correct: bool = True
    note: str = ""

    @property
    def num_sites(self) -> int:
        return self.perturbation.num_sites

    def to_dict(self):
        return {
            "success": bool(self.success),
            "clean_correct": bool(self.clean_correct),
            "t0": int(self.t0),
            "queries": int(self.queries),
            "restarts_used": int(self.restarts_used),
            "num_sites": self.num_sites,
            "fluency_delta": _num(self.fluency_delta),
            "final_margin": _num(self.final_margin),
            "note": self.note,
            **self.perturbation.to_dict(),
        }


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


class _Tracker:
    """Collects evaluated discrete candidates; success is a zero margin loss."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.best_success = None  # (fluency, sites, order, pert, margin)
        self.best_failure = None  # (margin, sites, order, pert, fluency)
        self.order = 0

    def add(self, masks, choices, adv_tokens, margins):
        fl = self.problem.fluency_of(masks, choices)
        for r in range(len(margins)):
            self.order += 1
            sites = int(masks[r].sum())
            pert = None
            if margins[r] <= 0.0:
                key = (fl[r], sites, self.order)
                if self.best_success is None or key < self.best_success[:3]:
                    pert = self._pert(masks[r], choices[r], adv_tokens[r])
                    self.best_success = (*key, pert, margins[r])
            else:
                key = (margins[r], sites, self.order)
                if self.best_failure is None or key < self.best_failure[:3]:
                    pert = self._pert(masks[r], choices[r], adv_tokens[r])
                    self.best_failure = (*key, pert, fl[r])

    @staticmethod
    def _pert(mask, choice, adv):
        return DiscretePerturbation(mask.copy(), np.where(mask, choice, -1),
                                    tuple(int(t) for t in adv))

    @property
    def succeeded(self):
        return self.best_success is not None


def _clean_check(model, inst: Instance, seq: TokenSequence):
    logits = model.forward(inst.orig_emb)
    pred = int(np.argmax(logits))
    t0 = int(seq.label) if seq.label is not None else pred
    return logits, t0


def _prune_forbidden(seq, cands, scorer, fluency_weight):
    """Drop infinite-cost candidates when fluency is weighted; they can never be emitted."""
    if scorer is None or fluency_weight <= 0:
        return cands
    kept = []
    for i, (cs, sc) in enumerate(zip(cands.per_position, scorer.candidate_scores(seq, cands))):
        kept.append([c for c, s in zip(cs, sc) if np.isfinite(s)])
    return CandidateSet(tuple(tuple(k) for k in kept))


def init_state(inst: Instance, k: int, noise_key: Optional[int] = None, noise: float = 0.5,
               params: BisectionParams = DEFAULT_PARAMS) -> RelaxedState:
    """Uniform feasible start; with ``noise_key`` add uniform noise and project back."""
    live = inst.perturbable
    n_live = int(live.sum())
    if n_live == 0:
        raise ValueError("no perturbable positions")
    z = np.where(live, min(1.0, k / n_live), 0.0)
    u = [np.full(m, 1.0 / m) if m else np.zeros(0) for m in inst.counts]
    if noise_key is not None:
        L, M = inst.length, inst.width
        draws = sampling.draw_uniforms([noise_key], L + L * M)[0]
        z_noise = (2.0 * draws[:L] - 1.0) * noise
        u_noise = ((2.0 * draws[L:] - 1.0) * noise).reshape(L, M)
        z = np.zeros(L)
        z[live] = project_c1(min(1.0, k / n_live) + z_noise[live], k, params)
        u = [project_c2(ui + u_noise[i, : len(ui)], params) if len(ui) else ui
             for i, ui in enumerate(u)]
    return RelaxedState(z, u, k)


def _unit(g):
    n = float(np.sqrt(np.sum(g * g)))
    return g / n if n > 0 else g


def pgd_step(inst: Instance, state: RelaxedState, g_sites, g_replace, config: AttackConfig):
    """One descent step followed by projection onto C1 and C2 (in place)."""
    live = inst.perturbable
    if config.normalize_grads:
        g_sites = _unit(np.where(live, g_sites, 0.0))
        g_replace = _unit(np.where(inst.cand_mask, g_replace, 0.0))
    z = np.zeros(inst.length)
    z[live] = project_c1(state.site_probs[live] - config.lr_sites * g_sites[live],
                         state.budget, config.projection)
    U = state.padded_replace(inst.width) - config.lr_replace * g_replace
    U = project_c2_rows(U, inst.counts, config.projection)
    state.site_probs = z
    state.replace_probs = [U[i, :m].copy() for i, m in enumerate(inst.counts)]
    return state


def _emit(problem, tracker, state, config, keys):
    batch = sampling.draw_batch(problem.inst, state, keys, sampling.TOPK)
    logits = problem.model.logits_for(batch.adv_tokens)
    tracker.add(batch.masks, batch.choices, batch.adv_tokens, margin(logits, problem.t0))
    return len(keys)


def pgd_attack(seq: TokenSequence, cands: CandidateSet, model, scorer, config: AttackConfig,
               example_id: int = 0, trace=None) -> AttackResult:
    """Projected gradient attack with sampled discretization and random restarts.

    ``trace``, if given, is a list that receives a copy of the relaxed state
    after every iteration (for feasibility checks).
    """
    cands = _prune_forbidden(seq, cands, scorer, config.objective.fluency_weight)
    inst = Instance(model.vocab, seq, cands)
    clean_logits, t0 = _clean_check(model, inst, seq)
    queries = 1
    L = inst.length
    if cw_loss(clean_logits, t0) == 0.0:
        return AttackResult(True, empty_perturbation(seq), queries, 0, 0.0, 0.0, t0,
                            clean_correct=False, note="clean input already misclassified")
    k = config.budget(L)
    if not inst.perturbable.any():
        return AttackResult(False, empty_perturbation(seq), queries, 0, 0.0,
                            float(margin(clean_logits, t0)), t0, note="no perturbable positions")
    problem = Problem.build(inst, model, scorer, t0)
    tracker = _Tracker(problem)
    seed = config.sampler.seed
    sampler = config.sampler
    probing = config.objective.fluency_weight == 0 and config.probe_every > 0
    for restart in range(config.max_restarts + 1):
        noise_key = None if restart == 0 else stream_key(seed, example_id, restart, 0, 0,
                                                          sampling.RESTART)
        state = init_state(inst, k, noise_key, config.restart_noise, config.projection)
        for t in range(config.iters):
            grad, info = estimate_gradient(problem, state, sampler, config.objective,
                                           example_id=example_id, iteration=t, restart=restart)
            queries += info["forward_passes"]
            pgd_step(inst, state, grad.g_sites, grad.g_replace, config)
            if trace is not None:
                trace.append(state.copy())
            if probing and (t + 1) % config.probe_every == 0 and t + 1 < config.iters:
                key = stream_key(seed, example_id, restart, t, 0, sampling.PROBE)
                queries += _emit(problem, tracker, state, config, [key])
                if tracker.succeeded:
                    break
        keys = [stream_key(seed, example_id, restart, config.iters, r, sampling.EMIT)
                for r in range(config.post_samples)]
        queries += _emit(problem, tracker, state, config, keys)
        if tracker.succeeded:
            fl, _, _, pert, m = tracker.best_success
            return AttackResult(True, pert, queries, restart, float(fl), max(float(m), 0.0), t0)
    m, _, _, pert, fl = tracker.best_failure
    return AttackResult(False, pert, queries, config.max_restarts, float(fl), float(m), t0)


def greedy_attack(seq: TokenSequence, cands: CandidateSet, model, scorer, k: int) -> AttackResult:
    """Word-importance-ranked greedy substitution.

    Positions are ranked by how much zeroing their embedding lowers the
    margin of the true class; each ranked position then takes its best
    candidate if that lowers the margin further. Stops on success or after
    ``k`` substitutions.
    """
    inst = Instance(model.vocab, seq, cands)
    clean_logits, t0 = _clean_check(model, inst, seq)
    queries = 1
    if cw_loss(clean_logits, t0) == 0.0:
        return AttackResult(True, empty_perturbation(seq), queries, 0, 0.0, 0.0, t0,
                            clean_correct=False, note="clean input already misclassified")
    problem = Problem.build(inst, model, scorer, t0)
    base = float(margin(clean_logits, t0))
    live = np.flatnonzero(inst.perturbable)
    importance = np.zeros(inst.length)
    if len(live):
        probes = np.repeat(inst.orig_emb[None], len(live), axis=0)
        probes[np.arange(len(live)), live] = 0.0
        importance[live] = base - margin(model.forward(probes), t0)
        queries += len(live)
    order = sorted(live, key=lambda i: (-importance[i], i))

    mask = np.zeros(inst.length, dtype=bool)
    choice = np.full(inst.length, -1)
    current = base
    used = 0
    for i in order:
        if used >= k or current <= 0.0:
            break
        m = inst.counts[i]
        masks = np.repeat(mask[None], m, axis=0)
        masks[:, i] = True
        choices = np.repeat(choice[None], m, axis=0)
        choices[:, i] = np.arange(m)
        margins = margin(model.logits_for(inst.adv_tokens(masks, choices)), t0)
        queries += m
        j = int(np.argmin(margins))
        if margins[j] < current:
            mask, choice, current = masks[j], choices[j], float(margins[j])
            used += 1
    adv = inst.adv_tokens(mask[None], choice[None])[0]
    pert = DiscretePerturbation(mask, choice, tuple(int(t) for t in adv))
    fl = float(problem.fluency_of(mask[None], choice[None])[0])
    return AttackResult(current <= 0.0, pert, queries, 0, fl, max(current, 0.0), t0)


ORACLE_LIMIT = 1_000_000


def count_perturbations(cands: CandidateSet, k: int) -> int:
    """Number of (site subset of size <= k, assignment) pairs, including the empty one."""
    counts = [m for m in cands.counts() if m > 0]
    # elementary symmetric sums of the counts up to degree k
    e = [1] + [0] * k
    for m in counts:
        for d in range(k, 0, -1):
            e[d] += e[d - 1] * m
    return sum(e)


def enumerate_perturbations(cands: CandidateSet, k: int):
    """Yields ``(sites, choices)`` tuples ordered by subset size, then lexicographically."""
    live = [i for i, m in enumerate(cands.counts()) if m > 0]
    counts = cands.counts()
    for size in range(0, min(k, len(live)) + 1):
        for sites in itertools.combinations(live, size):
            for choices in itertools.product(*(range(counts[i]) for i in sites)):
                yield sites, choices


def oracle_attack(seq: TokenSequence, cands: CandidateSet, model, k: int, scorer=None,
                  chunk: int = 4096) -> AttackResult:
    """Exhaustive search over every perturbation within budget ``k``."""
    total = count_perturbations(cands, k)
    if total > ORACLE_LIMIT:
        raise ValueError(f"oracle instance too large: {total} perturbations > {ORACLE_LIMIT}")
    inst = Instance(model.vocab, seq, cands)
    clean_logits, t0 = _clean_check(model, inst, seq)
    if cw_loss(clean_logits, t0) == 0.0:
        return AttackResult(True, empty_perturbation(seq), 1, 0, 0.0, 0.0, t0,
                            clean_correct=False, note="clean input already misclassified")
    problem = Problem.build(inst, model, scorer, t0)
    tracker = _Tracker(problem)
    L = inst.length
    gen = enumerate_perturbations(cands, k)
    queries = 0
    while True:
        block = list(itertools.islice(gen, chunk))
        if not block:
            break
        masks = np.zeros((len(block), L), dtype=bool)
        choices = np.full((len(block), L), -1)
        for r, (sites, ch) in enumerate(block):
            masks[r, list(sites)] = True
            choices[r, list(sites)] = ch
        adv = inst.adv_tokens(masks, choices)
        tracker.add(masks, choices, adv, margin(model.logits_for(adv), t0))
        queries += len(block)
    if tracker.succeeded:
        fl, _, _, pert, m = tracker.best_success
        return AttackResult(True, pert, queries, 0, float(fl), 0.0, t0)
    m, _, _, pert, fl = tracker.best_failure
    return AttackResult(False, pert, queries, 0, float(fl), float(m), t0)


METHODS = ("pgd", "greedy", "oracle")


def run_attack(method, seq, cands, model, scorer, config: AttackConfig, example_id=0):
    if method == "pgd":
        return pgd_attack(seq, cands, model, scorer, config, example_id)
    k = config.budget(len(seq))
    if method == "greedy":
        return greedy_attack(seq, cands, model, scorer, k)
    if method == "oracle":
        return oracle_attack(seq, cands, model, k, scorer)
    raise ValueError(f"unknown attack method {method!r}")

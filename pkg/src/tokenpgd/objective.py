"""Attack objective: margin loss, fluency regularizer and the sampled gradient estimator."""

import itertools
from dataclasses import dataclass

import numpy as np

from . import sampling
from .core import Instance, RelaxedState
from .sampling import SampleBatch, SamplerConfig

RELAXED = "relaxed"
SAMPLED = "sampled"


@dataclass(frozen=True)
class ObjectiveConfig:
    fluency_weight: float = 0.1
    margin_floor: float = 0.0
    fluency_mode: str = RELAXED

    def __post_init__(self):
        if self.fluency_weight < 0:
            raise ValueError("fluency_weight must be non-negative")
        if self.fluency_mode not in (RELAXED, SAMPLED):
            raise ValueError(f"fluency_mode must be {RELAXED!r} or {SAMPLED!r}")


@dataclass
class GradientPair:
    g_sites: np.ndarray    # (L,)
    g_replace: np.ndarray  # (L, M) padded; entries beyond a position's count are 0

    def replace_list(self, counts):
        return [self.g_replace[i, :m].copy() for i, m in enumerate(counts)]


def margin(logits, t0):
    """``Z[t0] - max_{i != t0} Z[i]`` over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("margin loss needs at least two classes")
    others = np.delete(z, t0, axis=-1)
    return z[..., t0] - others.max(axis=-1)


def cw_loss(logits, t0, floor=0.0):
    """``max(Z[t0] - max_{i != t0} Z[i], floor)``; zero once the prediction leaves ``t0``."""
    m = margin(logits, t0)
    out = np.maximum(m, floor)
    return float(out) if np.ndim(out) == 0 else out


def cw_loss_grad(logits, t0, floor=0.0):
    """Gradient of ``cw_loss`` w.r.t. the logits; zero on the flat branch."""
    z = np.asarray(logits, dtype=np.float64)
    masked = z.copy()
    masked[..., t0] = -np.inf
    rival = np.argmax(masked, axis=-1)
    active = margin(z, t0) > floor
    g = np.zeros_like(z)
    g[..., t0] = 1.0
    np.put_along_axis(g, rival[..., None], -1.0, axis=-1)
    return g * active[..., None]


def fluency_deltas(site_scores, cand_scores):
    """Per-candidate cost increments ``cost(s_ij) - cost(x_i)`` as a ragged list."""
    return [np.asarray(cs, dtype=np.float64) - float(site_scores[i])
            for i, cs in enumerate(cand_scores)]


def fluency_reg(z, u, site_scores, cand_scores):
    """``sum_i z_i sum_j u_ij (cost(s_ij) - cost(x_i))``.

    Terms with zero weight are skipped so that forbidden (infinite-cost)
    candidates only matter when they carry mass.
    """
    if len(site_scores) != len(z) or len(cand_scores) != len(z):
        raise ValueError("fluency scores missing for some positions")
    total = 0.0
    for i, deltas in enumerate(fluency_deltas(site_scores, cand_scores)):
        if z[i] == 0:
            continue
        ui = np.asarray(u[i], dtype=np.float64)
        if ui.shape != deltas.shape:
            raise ValueError(f"fluency scores missing for candidates at position {i}")
        w = z[i] * ui
        nz = w != 0
        total += float(np.sum(w[nz] * deltas[nz]))
    return total


def fluency_grad(z, u, site_scores, cand_scores):
    """Exact gradient of ``fluency_reg``: ``(sum_j u_ij d_ij, z_i d_ij)``."""
    deltas = fluency_deltas(site_scores, cand_scores)
    g_z = np.array([float(np.asarray(u[i]) @ d) if len(d) else 0.0 for i, d in enumerate(deltas)])
    g_u = [z[i] * d for i, d in enumerate(deltas)]
    return g_z, g_u


@dataclass
class Problem:
    """An instance bound to a victim model, a target class and fluency costs."""

    inst: Instance
    model: object
    t0: int
    site_cost: np.ndarray   # (L,)
    cand_cost: np.ndarray   # (L, M), 0 in padding

    @classmethod
    def build(cls, inst: Instance, model, scorer, t0):
        site = scorer.site_scores(inst.seq) if scorer is not None else np.zeros(inst.length)
        cand = np.zeros(inst.cand_ids.shape)
        if scorer is not None:
            for i, cs in enumerate(scorer.candidate_scores(inst.seq, inst.cands)):
                cand[i, : len(cs)] = cs
        return cls(inst, model, int(t0), np.asarray(site, dtype=np.float64), cand)

    @property
    def delta(self):
        # an original token without a finite cost gives finite candidates a zero increment
        site = self.site_cost[:, None]
        with np.errstate(invalid="ignore"):
            d = np.where(np.isfinite(site), self.cand_cost - site,
                         np.where(np.isfinite(self.cand_cost), 0.0, np.inf))
        return np.where(self.inst.cand_mask, d, 0.0)

    def fluency_of(self, masks, choices):
        """Fluency regularizer at Boolean points; ``(R, L)`` inputs -> ``(R,)``."""
        d = self.delta
        safe = np.where(masks, choices, 0)
        picked = d[np.arange(self.inst.length), safe]
        return np.where(masks, picked, 0.0).sum(axis=-1)


def _sample_grads(problem: Problem, state: RelaxedState, batch: SampleBatch, floor):
    """Per-sample straight-through gradients of the attack loss at Boolean points.

    Returns ``(g_sites (R, L), g_replace (R, L, M), losses (R,), n_forward)``.
    """
    inst = problem.inst
    emb = inst.embed(batch.adv_tokens)                       # (R, L, d)
    logits = problem.model.forward(emb)
    losses = np.maximum(margin(logits, problem.t0), floor)
    g_logits = cw_loss_grad(logits, problem.t0, floor)
    G = problem.model.backward(emb, g_logits)                # (R, L, d)
    cand_dot = np.einsum("lmd,rld->rlm", inst.cand_emb, G)
    orig_dot = np.einsum("ld,rld->rl", inst.orig_emb, G)
    relaxed_u = state.padded_replace(inst.width)
    onehot = np.zeros_like(cand_dot)
    sel_r, sel_l = np.nonzero(batch.masks)
    onehot[sel_r, sel_l, batch.choices[sel_r, sel_l]] = 1.0
    # unselected sites have no replacement draw; use the relaxed weights
    u_eff = np.where(batch.masks[..., None], onehot, relaxed_u[None])
    g_z = (u_eff * cand_dot).sum(axis=-1) - orig_dot
    g_u = batch.masks[..., None] * cand_dot
    live = inst.perturbable
    g_z = np.where(live, g_z, 0.0)
    g_u = np.where(inst.cand_mask, g_u, 0.0)
    return g_z, g_u, losses, len(batch)


def _fluency_terms(problem: Problem, state: RelaxedState, batch: SampleBatch, weights, mode):
    inst = problem.inst
    d = problem.delta
    if mode == RELAXED:
        u = state.padded_replace(inst.width)
        z = np.where(inst.perturbable, state.site_probs, 0.0)
        return (u * d).sum(axis=-1), z[:, None] * d
    relaxed_u = state.padded_replace(inst.width)
    onehot = np.zeros((len(batch), inst.length, inst.width))
    sel_r, sel_l = np.nonzero(batch.masks)
    onehot[sel_r, sel_l, batch.choices[sel_r, sel_l]] = 1.0
    u_eff = np.where(batch.masks[..., None], onehot, relaxed_u[None])
    g_z = np.tensordot(weights, (u_eff * d).sum(axis=-1), axes=1)
    g_u = np.tensordot(weights, batch.masks[..., None] * d, axes=1)
    return g_z, g_u


def estimate_gradient(problem: Problem, state: RelaxedState, sampler: SamplerConfig,
                      objective: ObjectiveConfig, *, example_id=0, iteration=0, restart=0,
                      exhaustive=False):
    """Monte-Carlo averaged gradient of ``loss_atk + lambda * loss_reg``.

    Returns ``(GradientPair, info)`` where ``info`` carries the per-sample
    losses and the forward-pass count. ``exhaustive=True`` replaces the ``R``
    draws by every Boolean outcome weighted by its probability (the
    infinite-sample limit of the same estimator; small instances only).
    """
    inst = problem.inst
    if exhaustive:
        batch, weights = enumerate_outcomes(inst, state)
    else:
        batch = sampling.sample_batch(inst, state, sampler, example_id=example_id,
                                      iteration=iteration, restart=restart,
                                      purpose=sampling.GRADIENT)
        weights = np.full(len(batch), 1.0 / len(batch))
    g_z, g_u, losses, n_fwd = _sample_grads(problem, state, batch, objective.margin_floor)
    # fixed-order reduction over samples
    g_sites = np.tensordot(weights, g_z, axes=1)
    g_replace = np.tensordot(weights, g_u, axes=1)
    lam = objective.fluency_weight
    if lam > 0:
        f_z, f_u = _fluency_terms(problem, state, batch, weights, objective.fluency_mode)
        g_sites = g_sites + lam * np.where(inst.perturbable, f_z, 0.0)
        g_replace = g_replace + lam * np.where(inst.cand_mask, f_u, 0.0)
    info = {"losses": losses, "forward_passes": n_fwd, "batch": batch}
    return GradientPair(g_sites, g_replace), info


MAX_OUTCOMES = 200_000


def enumerate_outcomes(inst: Instance, state: RelaxedState):
    """Every Boolean ``(z, u)`` outcome with its probability under the relaxed state."""
    L = inst.length
    z = np.where(inst.perturbable, state.site_probs, 0.0)
    per_site = []
    for i in range(L):
        opts = [(False, -1, 1.0 - z[i])]
        if inst.counts[i] > 0:
            u = state.replace_probs[i]
            opts += [(True, j, z[i] * u[j]) for j in range(inst.counts[i])]
        per_site.append(opts)
    total = int(np.prod([len(o) for o in per_site]))
    if total > MAX_OUTCOMES:
        raise ValueError(f"{total} outcomes exceed the enumeration guard {MAX_OUTCOMES}")
    masks, choices, weights = [], [], []
    for combo in itertools.product(*per_site):
        masks.append([c[0] for c in combo])
        choices.append([c[1] for c in combo])
        weights.append(float(np.prod([c[2] for c in combo])))
    masks = np.array(masks, dtype=bool)
    choices = np.array(choices, dtype=int)
    batch = SampleBatch(masks, choices, inst.adv_tokens(masks, choices))
    return batch, np.array(weights)


def expected_loss(problem: Problem, state: RelaxedState, floor=0.0):
    """Exact expectation of the attack loss over all Boolean outcomes."""
    batch, weights = enumerate_outcomes(problem.inst, state)
    logits = problem.model.logits_for(batch.adv_tokens)
    return float(weights @ np.maximum(margin(logits, problem.t0), floor))

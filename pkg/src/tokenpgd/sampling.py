"""Mapping relaxed variables to Boolean site masks and one-hot replacements.

Randomness comes from a counter-based stream: a 64-bit key derived from
``(seed, example, restart, iteration, r, purpose)`` is hashed against a
per-draw counter, so every draw is a pure function of its coordinates and
independent of scheduling or worker count. Within one draw, counter ``i``
decides site ``i`` and counter ``L + i`` picks the replacement at site ``i``.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import FEAS_EPS, DiscretePerturbation, Instance, RelaxedState

RAW = "raw"
TOPK = "topk_enforce"
BUDGET_MODES = (RAW, TOPK)

# stream purposes
GRADIENT = 0
EMIT = 1
RESTART = 2
PROBE = 3


@dataclass(frozen=True)
class SamplerConfig:
    num_samples: int = 20
    seed: int = 0
    budget_mode: str = RAW

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.budget_mode not in BUDGET_MODES:
            raise ValueError(f"budget_mode must be one of {BUDGET_MODES}")


_M64 = 0xFFFFFFFFFFFFFFFF


def stream_key(seed, *parts) -> int:
    """Fold integer coordinates into one 64-bit stream key."""
    h = kernels.splitmix64(int(seed) & _M64)
    for p in parts:
        h = kernels.splitmix64(h ^ (int(p) & _M64))
    return h


def draw_uniforms(keys, n) -> np.ndarray:
    return kernels.uniform_block(np.asarray(keys, dtype=np.uint64), int(n))


def enforce_topk(mask, site_probs, k):
    """Keep the ``k`` set bits with the largest probability (lowest index on ties)."""
    mask = np.array(mask, dtype=bool)
    if mask.ndim == 1:
        return enforce_topk(mask[None, :], site_probs, k)[0]
    order = np.lexsort((np.arange(len(site_probs)), -np.asarray(site_probs)))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    for row in mask:
        on = np.flatnonzero(row)
        if len(on) > k:
            keep = on[np.argsort(rank[on], kind="stable")[:k]]
            row[:] = False
            row[keep] = True
    return mask


def sample_sites(site_probs, uniforms, budget=None, budget_mode=RAW):
    """Bernoulli site mask: bit ``i`` is set iff ``uniforms[..., i] < site_probs[i]``."""
    z = np.asarray(site_probs, dtype=np.float64)
    if np.any(z < -FEAS_EPS) or np.any(z > 1 + FEAS_EPS):
        raise ValueError("site probabilities must lie in [0, 1]")
    mask = np.asarray(uniforms) < z
    if budget_mode == TOPK:
        if budget is None:
            raise ValueError("topk_enforce needs a budget")
        mask = enforce_topk(mask, z, budget)
    return mask


def _check_simplex_rows(probs, counts):
    for i, m in enumerate(counts):
        if m == 0:
            continue
        row = probs[i, :m]
        if np.any(row < -FEAS_EPS):
            raise ValueError(f"replacement probabilities at position {i} are negative")
        total = row.sum()
        if not total > 0:
            raise ValueError(f"replacement probabilities at position {i} are all zero")
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"replacement probabilities at position {i} sum to {total}")


def sample_replacements(replace_probs, counts, sites, uniforms):
    """Categorical draw per selected site; returns ``-1`` where unselected.

    ``replace_probs`` is padded ``(L, M)``; ``uniforms`` has shape ``(..., L)``.
    Index ``j`` is chosen when ``cum[j-1] <= u < cum[j]`` with ``cum`` the
    sequential cumulative sum; rounding overflow falls to the last index with
    positive mass.
    """
    probs = np.asarray(replace_probs, dtype=np.float64)
    counts = np.asarray(counts)
    _check_simplex_rows(probs, counts)
    sites = np.asarray(sites, dtype=bool)
    u = np.asarray(uniforms)
    L, M = probs.shape
    cum = np.cumsum(np.where(np.arange(M) < counts[:, None], probs, 0.0), axis=1)
    idx = (u[..., None] >= cum).sum(axis=-1)
    last = np.array([
        (np.flatnonzero(probs[i, :m] > 0)[-1] if m else 0) for i, m in enumerate(counts)
    ])
    idx = np.minimum(idx, last)
    return np.where(sites & (counts > 0), idx, -1)


@dataclass
class SampleBatch:
    masks: np.ndarray    # (R, L) bool
    choices: np.ndarray  # (R, L) int, -1 where unselected
    adv_tokens: np.ndarray  # (R, L)

    def __len__(self):
        return self.masks.shape[0]

    def perturbations(self):
        return [
            DiscretePerturbation(self.masks[r].copy(), self.choices[r].copy(),
                                 tuple(int(t) for t in self.adv_tokens[r]))
            for r in range(len(self))
        ]


def draw_batch(inst: Instance, state: RelaxedState, keys, budget_mode=RAW) -> SampleBatch:
    """One Boolean realization per key."""
    L = inst.length
    u = draw_uniforms(keys, 2 * L)
    z = np.where(inst.perturbable, state.site_probs, 0.0)
    masks = sample_sites(z, u[:, :L], state.budget, budget_mode)
    probs = state.padded_replace(inst.width)
    choices = sample_replacements(probs, inst.counts, masks, u[:, L:])
    return SampleBatch(masks, choices, inst.adv_tokens(masks, choices))


def sample_batch(inst: Instance, state: RelaxedState, config: SamplerConfig,
                 example_id=0, iteration=0, restart=0, purpose=GRADIENT) -> SampleBatch:
    """``config.num_samples`` independent draws, reproducible from their stream coordinates."""
    keys = [stream_key(config.seed, example_id, restart, iteration, r, purpose)
            for r in range(config.num_samples)]
    return draw_batch(inst, state, keys, config.budget_mode)

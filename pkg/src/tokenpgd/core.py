"""Domain types: vocabulary, token sequences, candidate sets, attack variables."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FEAS_EPS = 1e-9


class Vocabulary:
    """Token embedding table shared by the victim model and the attack."""

    def __init__(self, embeddings):
        emb = np.array(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise ValueError(f"embeddings must be a non-empty 2-D matrix, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings contain non-finite entries")
        emb.setflags(write=False)
        self.embeddings = emb

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    def check_ids(self, ids, what="token"):
        for t in ids:
            if not 0 <= t < self.size:
                raise IndexError(f"{what} id {t} outside vocabulary of size {self.size}")

    def lookup(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise IndexError(f"token ids outside vocabulary of size {self.size}")
        return self.embeddings[ids]


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise ValueError("a token sequence needs at least one token")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class CandidateSet:
    """Per-position substitution inventory; an empty entry freezes the position."""

    per_position: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "per_position", tuple(tuple(int(c) for c in cs) for cs in self.per_position)
        )

    @classmethod
    def build(cls, seq: TokenSequence, raw: Sequence[Sequence[int]], vocab: Optional[Vocabulary] = None):
        """Ingest raw candidate lists, dropping no-op (== original) and repeated entries."""
        if len(raw) != len(seq):
            raise ValueError(f"candidate list length {len(raw)} != sequence length {len(seq)}")
        cleaned = []
        for tok, cs in zip(seq.tokens, raw):
            seen = []
            for c in cs:
                c = int(c)
                if c != tok and c not in seen:
                    seen.append(c)
            if vocab is not None:
                vocab.check_ids(seen, "candidate")
            cleaned.append(seen)
        return cls(tuple(cleaned))

    def __len__(self):
        return len(self.per_position)

    def counts(self) -> np.ndarray:
        return np.array([len(cs) for cs in self.per_position], dtype=np.int_)

    @property
    def max_count(self) -> int:
        return max((len(cs) for cs in self.per_position), default=0)

    def perturbable(self) -> np.ndarray:
        return self.counts() > 0

    def padded(self):
        """``(ids, mask)`` arrays of shape ``(L, max_count)``; padding ids are 0."""
        L, M = len(self), max(self.max_count, 1)
        ids = np.zeros((L, M), dtype=np.intp)
        mask = np.zeros((L, M), dtype=bool)
        for i, cs in enumerate(self.per_position):
            ids[i, : len(cs)] = cs
            mask[i, : len(cs)] = True
        return ids, mask


@dataclass
class RelaxedState:
    """Continuous site-selection and replacement variables owned by one attack run."""

    site_probs: np.ndarray
    replace_probs: list
    budget: int

    def copy(self):
        return RelaxedState(
            self.site_probs.copy(), [u.copy() for u in self.replace_probs], self.budget
        )

    def padded_replace(self, width: int) -> np.ndarray:
        out = np.zeros((len(self.replace_probs), max(width, 1)))
        for i, u in enumerate(self.replace_probs):
            out[i, : len(u)] = u
        return out

    def violations(self, eps: float = FEAS_EPS) -> list:
        msgs = []
        z = self.site_probs
        if np.any(z < -eps) or np.any(z > 1 + eps):
            msgs.append("site_probs outside [0, 1]")
        if z.sum() > self.budget + eps:
            msgs.append(f"site_probs sum {z.sum()} exceeds budget {self.budget}")
        for i, u in enumerate(self.replace_probs):
            if len(u) == 0:
                if z[i] != 0.0:
                    msgs.append(f"frozen position {i} has nonzero site probability")
                continue
            if np.any(u < -eps) or np.any(u > 1 + eps):
                msgs.append(f"replace_probs[{i}] outside [0, 1]")
            if abs(u.sum() - 1.0) > eps:
                msgs.append(f"replace_probs[{i}] sums to {u.sum()}")
        return msgs

    def is_feasible(self, eps: float = FEAS_EPS) -> bool:
        return not self.violations(eps)


@dataclass(frozen=True)
class DiscretePerturbation:
    site_mask: np.ndarray
    replace_choice: np.ndarray  # candidate index per position, -1 where unselected
    adv_tokens: tuple

    @property
    def num_sites(self) -> int:
        return int(np.count_nonzero(self.site_mask))

    def changed_positions(self):
        return [int(i) for i in np.flatnonzero(self.site_mask)]

    def to_dict(self):
        return {
            "sites": self.changed_positions(),
            "choices": [int(self.replace_choice[i]) for i in self.changed_positions()],
            "adv_tokens": list(self.adv_tokens),
        }


def empty_perturbation(seq: TokenSequence) -> DiscretePerturbation:
    L = len(seq)
    return DiscretePerturbation(np.zeros(L, dtype=bool), np.full(L, -1), seq.tokens)


def apply_perturbation(seq: TokenSequence, cands: CandidateSet, z, choice) -> DiscretePerturbation:
    """Substitute ``cands[i][choice[i]]`` at every selected position ``i``.

    ``choice`` may be a sequence aligned with the tokens (entries at
    unselected positions are ignored) or a mapping from position to index.
    """
    z = np.asarray(z).astype(bool)
    L = len(seq)
    if z.shape != (L,):
        raise ValueError(f"site mask has shape {z.shape}, expected ({L},)")
    chosen = np.full(L, -1)
    adv = list(seq.tokens)
    for i in np.flatnonzero(z):
        opts = cands.per_position[i]
        if not opts:
            raise ValueError(f"position {i} has no candidates and cannot be selected")
        try:
            j = int(choice[i])
        except (KeyError, IndexError):
            raise ValueError(f"no replacement choice given for selected position {i}") from None
        if not 0 <= j < len(opts):
            raise IndexError(f"choice {j} at position {i} out of range for {len(opts)} candidates")
        chosen[i] = j
        adv[i] = opts[j]
    return DiscretePerturbation(z.copy(), chosen, tuple(adv))


def one_hot_choices(cands: CandidateSet, z, choice) -> list:
    """Replacement vectors for a Boolean point: one-hot where selected, zeros elsewhere."""
    out = []
    for i, cs in enumerate(cands.per_position):
        u = np.zeros(len(cs))
        if z[i] and cs:
            u[int(choice[i])] = 1.0
        out.append(u)
    return out


def mixture_embedding(vocab: Vocabulary, seq: TokenSequence, cands: CandidateSet, z, u) -> np.ndarray:
    """Row ``i`` is ``(1 - z_i) e(x_i) + z_i * sum_j u_ij e(s_ij)``.

    Works for relaxed ``(z, u)`` and for Boolean ones; in the Boolean case the
    rows equal the embedding of the substituted tokens exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    L = len(seq)
    if z.shape != (L,) or len(u) != L:
        raise ValueError("site/replacement variables do not match the sequence length")
    orig = vocab.lookup(seq.tokens)
    out = np.empty_like(orig)
    for i, cs in enumerate(cands.per_position):
        ui = np.asarray(u[i], dtype=np.float64)
        if ui.shape != (len(cs),):
            raise ValueError(f"replacement vector {i} has shape {ui.shape}, expected ({len(cs)},)")
        if cs:
            sub = ui @ vocab.lookup(cs)
        else:
            sub = np.zeros(vocab.embedding_dim)
        out[i] = (1.0 - z[i]) * orig[i] + z[i] * sub
    return out


@dataclass
class Instance:
    """Precomputed arrays for attacking one sequence; internal fast path."""

    vocab: Vocabulary
    seq: TokenSequence
    cands: CandidateSet
    tokens: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    cand_ids: np.ndarray = field(init=False)
    cand_mask: np.ndarray = field(init=False)
    orig_emb: np.ndarray = field(init=False)
    cand_emb: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.cands) != len(self.seq):
            raise ValueError("candidate set length does not match sequence length")
        self.vocab.check_ids(self.seq.tokens)
        self.tokens = np.array(self.seq.tokens, dtype=np.intp)
        self.counts = self.cands.counts()
        self.cand_ids, self.cand_mask = self.cands.padded()
        self.orig_emb = self.vocab.lookup(self.tokens)
        self.cand_emb = self.vocab.embeddings[self.cand_ids] * self.cand_mask[..., None]

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def width(self) -> int:
        return self.cand_ids.shape[1]

    @property
    def perturbable(self) -> np.ndarray:
        return self.counts > 0

    def adv_tokens(self, masks, choices) -> np.ndarray:
        """Batched substitution: ``masks`` (R, L) bool, ``choices`` (R, L) int."""
        safe = np.where(masks, choices, 0)
        subs = self.cand_ids[np.arange(self.length), safe]
        return np.where(masks, subs, self.tokens)

    def embed(self, token_rows) -> np.ndarray:
        return self.vocab.embeddings[token_rows]

"""Dataset / candidate / vocabulary files and the synthetic benchmark generator.

Dataset and candidate files are JSON Lines. The first line is a header
``{"format": ..., "version": 1}``; every later line is one record:

* dataset:    ``{"id": str, "tokens": [int, ...], "label": int}``
* candidates: ``{"id": str, "candidates": [[int, ...], ...]}`` (one list per token)

The vocabulary file is a single JSON document holding the embedding table and
an optional per-token fluency cost row (``null`` marks a missing entry).
"""

import json
from dataclasses import dataclass

import numpy as np

from .core import CandidateSet, TokenSequence, Vocabulary
from .victim import TableFluencyScorer, unigram_surprisal

DATASET_FORMAT = "tokenpgd-dataset"
CANDIDATE_FORMAT = "tokenpgd-candidates"
VOCAB_FORMAT = "tokenpgd-vocab"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, line, message):
        self.path, self.line = path, line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


@dataclass
class Example:
    id: str
    seq: TokenSequence
    cands: CandidateSet


def _dump_line(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def write_jsonl(path, fmt, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump_line({"format": fmt, "version": FORMAT_VERSION}) + "\n")
        for rec in records:
            fh.write(_dump_line(rec) + "\n")


def _read_jsonl(path, fmt):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(path, 0, f"cannot open: {exc.strerror}") from None
    with fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(path, 1, "empty file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(path, 1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise DataError(path, 1, f"expected header format {fmt!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(path, 1, f"unsupported version {header.get('version')!r}")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(path, n, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise DataError(path, n, "record must be an object")
        out.append((n, rec))
    return out


def _int_list(path, n, value, what):
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool)
                                              for t in value):
        raise DataError(path, n, f"{what} must be a list of integers")
    return value


def read_dataset(path, vocab_size=None):
    seqs = {}
    for n, rec in _read_jsonl(path, DATASET_FORMAT):
        rid = rec.get("id")
        if rid is None:
            raise DataError(path, n, "missing id")
        rid = str(rid)
        if rid in seqs:
            raise DataError(path, n, f"duplicate id {rid!r}")
        tokens = _int_list(path, n, rec.get("tokens"), "tokens")
        if not tokens:
            raise DataError(path, n, "tokens must be non-empty")
        if vocab_size is not None and any(not 0 <= t < vocab_size for t in tokens):
            raise DataError(path, n, f"token id outside vocabulary of size {vocab_size}")
        label = rec.get("label")
        if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
            raise DataError(path, n, "label must be a non-negative integer")
        seqs[rid] = TokenSequence(tokens, label)
    return seqs


def read_candidates(path, seqs, vocab_size=None):
    """Candidate sets keyed by id, validated against the sequences they belong to."""
    out = {}
    for n, rec in _read_jsonl(path, CANDIDATE_FORMAT):
        rid = str(rec.get("id"))
        if rid not in seqs:
            raise DataError(path, n, f"id {rid!r} not present in the dataset")
        if rid in out:
            raise DataError(path, n, f"duplicate id {rid!r}")
        raw = rec.get("candidates")
        if not isinstance(raw, list):
            raise DataError(path, n, "candidates must be a list of lists")
        for i, cs in enumerate(raw):
            _int_list(path, n, cs, f"candidates[{i}]")
            if vocab_size is not None and any(not 0 <= c < vocab_size for c in cs):
                raise DataError(path, n, f"candidate id outside vocabulary at position {i}")
        if len(raw) != len(seqs[rid]):
            raise DataError(path, n, f"{len(raw)} candidate lists for {len(seqs[rid])} tokens")
        out[rid] = CandidateSet.build(seqs[rid], raw)
    return out


def load_examples(data_path, cand_path, vocab_size=None):
    seqs = read_dataset(data_path, vocab_size)
    cands = read_candidates(cand_path, seqs, vocab_size) if cand_path else {}
    examples = []
    for rid, seq in seqs.items():
        cs = cands.get(rid)
        if cs is None:
            if cand_path:
                raise DataError(cand_path, 0, f"no candidates for id {rid!r}")
            cs = CandidateSet(tuple(() for _ in seq.tokens))
        examples.append(Example(rid, seq, cs))
    return examples


def write_dataset(path, examples):
    write_jsonl(path, DATASET_FORMAT, (
        {"id": ex.id, "tokens": list(ex.seq.tokens), "label": ex.seq.label} for ex in examples))


def write_candidates(path, examples):
    write_jsonl(path, CANDIDATE_FORMAT, (
        {"id": ex.id, "candidates": [list(cs) for cs in ex.cands.per_position]}
        for ex in examples))


def write_vocab(path, vocab: Vocabulary, scorer: TableFluencyScorer = None):
    doc = {
        "format": VOCAB_FORMAT,
        "version": FORMAT_VERSION,
        "embeddings": [[float(x) for x in row] for row in vocab.embeddings],
        "fluency": scorer.to_list() if scorer is not None else None,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump_line(doc) + "\n")


def read_vocab(path):
    """Returns ``(Vocabulary, TableFluencyScorer or None)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(path, 0, f"cannot open: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if doc.get("format") != VOCAB_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise DataError(path, 1, f"expected {VOCAB_FORMAT} version {FORMAT_VERSION}")
    try:
        vocab = Vocabulary(doc["embeddings"])
    except (KeyError, ValueError) as exc:
        raise DataError(path, 1, f"bad embeddings: {exc}") from None
    scorer = None
    if doc.get("fluency") is not None:
        table = np.array([[np.nan if x is None else x for x in row] for row in doc["fluency"]],
                         dtype=np.float64)
        scorer = TableFluencyScorer(table)
    return vocab, scorer


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the class-conditional token model.

    Tokens come in synonym groups that share a "meaning" block of the
    embedding and differ in a "style" block. Polar groups lean towards one
    class; within every group the first style coordinate is spuriously
    correlated with the label, which a clean-trained model picks up and a
    within-group swap can undo.
    """

    num_groups: int = 15
    group_size: int = 5
    meaning_dim: int = 4
    style_dim: int = 4
    meaning_scale: float = 2.0
    style_scale: float = 0.2
    group_jitter: float = 0.1
    polar_fraction: float = 0.6
    polar_rate: float = 0.5
    polar_agreement: float = 0.8
    style_bias: float = 0.8
    polar_shift: float = 1.0
    min_len: int = 6
    max_len: int = 10
    num_candidates: int = 3


def _cosine_neighbors(emb, m):
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    # stable ordering: similarity descending, then id ascending
    return [list(np.lexsort((np.arange(len(row)), -row))[:m]) for row in sim]


def make_vocabulary(spec: SyntheticSpec, rng):
    G, S = spec.num_groups, spec.group_size
    centers = rng.normal(size=(G, spec.meaning_dim)) * spec.meaning_scale
    meaning = np.repeat(centers, S, axis=0) + rng.normal(size=(G * S, spec.meaning_dim)) * spec.group_jitter
    style = rng.normal(size=(G * S, spec.style_dim)) * spec.style_scale
    emb = np.concatenate([meaning, style], axis=1)
    n_polar = int(round(spec.polar_fraction * G))
    polarity = np.zeros(G, dtype=int)
    polarity[: n_polar // 2] = 1
    polarity[n_polar // 2: n_polar] = -1
    polarity = rng.permutation(polarity)
    emb[:, 0] += np.repeat(polarity, S) * spec.polar_shift
    return Vocabulary(emb), polarity


def generate(spec: SyntheticSpec, seed: int, n_train: int, n_test: int):
    """Returns ``(vocab, scorer, train_examples, test_examples)``; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    vocab, polarity = make_vocabulary(spec, rng)
    G, S = spec.num_groups, spec.group_size
    style0 = vocab.embeddings[:, spec.meaning_dim]
    groups = {p: np.flatnonzero(polarity == p) for p in (-1, 0, 1)}
    if len(groups[0]) == 0:
        groups[0] = np.arange(G)

    def sentence(label):
        sign = 1 if label == 1 else -1
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = []
        for _ in range(L):
            if rng.random() < spec.polar_rate:
                pol = sign if rng.random() < spec.polar_agreement else -sign
                pool = groups[pol] if len(groups[pol]) else groups[0]
            else:
                pool = groups[0]
            g = int(rng.choice(pool))
            members = np.arange(g * S, (g + 1) * S)
            w = np.exp(spec.style_bias * sign * style0[members] / spec.style_scale)
            toks.append(int(rng.choice(members, p=w / w.sum())))
        return TokenSequence(toks, label)

    seqs = [sentence(int(rng.integers(0, 2))) for _ in range(n_train + n_test)]
    neighbors = _cosine_neighbors(vocab.embeddings, spec.num_candidates)
    examples = []
    for n, seq in enumerate(seqs):
        raw = [neighbors[t] for t in seq.tokens]
        split = "train" if n < n_train else "test"
        examples.append(Example(f"{split}-{n:05d}", seq, CandidateSet.build(seq, raw, vocab)))
    scorer = unigram_surprisal([ex.seq for ex in examples], vocab.size)
    return vocab, scorer, examples[:n_train], examples[n_train:]

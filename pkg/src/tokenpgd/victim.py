"""Differentiable victim classifiers and fluency scorers.

Both reference models mean-pool the input embedding rows and apply a small
head, so the gradient w.r.t. each embedding row is the pooled gradient
divided by the sequence length. Inputs may carry leading batch axes:
``forward`` takes ``(..., L, d)`` and returns ``(..., C)``.
"""

import json
from dataclasses import dataclass

import numpy as np

from .core import TokenSequence, Vocabulary

CHECKPOINT_FORMAT = "tokenpgd-victim"
CHECKPOINT_VERSION = 1


class VictimModel:
    """White-box classifier over embedding rows.

    Subclasses implement ``head``/``head_backward`` on pooled vectors and
    expose ``params`` (a dict of arrays updated in place by the trainer).
    """

    kind = None

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    @property
    def num_classes(self) -> int:
        raise NotImplementedError

    def head(self, pooled):
        raise NotImplementedError

    def head_backward(self, pooled, grad_logits):
        """Returns ``(grad_pooled, param_grads)``; param grads are summed over batch axes."""
        raise NotImplementedError

    def forward(self, emb):
        return self.head(np.asarray(emb).mean(axis=-2))

    def backward(self, emb, grad_logits):
        emb = np.asarray(emb)
        g_pool, _ = self.head_backward(emb.mean(axis=-2), np.asarray(grad_logits))
        L = emb.shape[-2]
        return np.broadcast_to((g_pool / L)[..., None, :], emb.shape).copy()

    def logits_for(self, tokens):
        """Logits for token-id arrays of shape ``(..., L)``."""
        return self.forward(self.vocab.embeddings[np.asarray(tokens, dtype=np.intp)])

    def predict(self, tokens):
        return np.argmax(self.logits_for(tokens), axis=-1)

    def copy(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "arrays": {
                name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
                for name, arr in [("embeddings", self.vocab.embeddings)] + sorted(self.params.items())
            },
        }


class LinearBagModel(VictimModel):
    """``logits = mean(emb) @ weight + bias``."""

    kind = "linear"

    def __init__(self, vocab, weight, bias):
        super().__init__(vocab)
        self.params = {"weight": np.array(weight, dtype=np.float64),
                       "bias": np.array(bias, dtype=np.float64)}
        if self.params["weight"].shape != (vocab.embedding_dim, self.params["bias"].shape[0]):
            raise ValueError("weight must be d x C and bias length C")

    @classmethod
    def random(cls, vocab, num_classes, rng, scale=1.0):
        d = vocab.embedding_dim
        return cls(vocab, rng.normal(scale=scale / np.sqrt(d), size=(d, num_classes)),
                   np.zeros(num_classes))

    @property
    def num_classes(self):
        return self.params["bias"].shape[0]

    def head(self, pooled):
        return pooled @ self.params["weight"] + self.params["bias"]

    def head_backward(self, pooled, grad_logits):
        W = self.params["weight"]
        p2 = pooled.reshape(-1, pooled.shape[-1])
        g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
        grads = {"weight": p2.T @ g2, "bias": g2.sum(axis=0)}
        return grad_logits @ W.T, grads


class MlpModel(VictimModel):
    """``logits = tanh(mean(emb) @ w1 + b1) @ w2 + b2``."""

    kind = "mlp"

    def __init__(self, vocab, w1, b1, w2, b2):
        super().__init__(vocab)
        self.params = {k: np.array(v, dtype=np.float64)
                       for k, v in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2))}
        d, h = self.params["w1"].shape
        if d != vocab.embedding_dim or self.params["b1"].shape != (h,) \
                or self.params["w2"].shape[0] != h \
                or self.params["b2"].shape != (self.params["w2"].shape[1],):
            raise ValueError("inconsistent MLP parameter shapes")

    @classmethod
    def random(cls, vocab, num_classes, rng, hidden=16):
        d = vocab.embedding_dim
        return cls(vocab,
                   rng.normal(scale=1.0 / np.sqrt(d), size=(d, hidden)), np.zeros(hidden),
                   rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, num_classes)),
                   np.zeros(num_classes))

    @property
    def num_classes(self):
        return self.params["b2"].shape[0]

    def head(self, pooled):
        hid = np.tanh(pooled @ self.params["w1"] + self.params["b1"])
        return hid @ self.params["w2"] + self.params["b2"]

    def head_backward(self, pooled, grad_logits):
        p = self.params
        hid = np.tanh(pooled @ p["w1"] + p["b1"])
        d_hid = grad_logits @ p["w2"].T
        d_pre = d_hid * (1.0 - hid**2)
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        grads = {
            "w2": flat(hid).T @ flat(grad_logits),
            "b2": flat(grad_logits).sum(axis=0),
            "w1": flat(pooled).T @ flat(d_pre),
            "b1": flat(d_pre).sum(axis=0),
        }
        return d_pre @ p["w1"].T, grads


MODEL_KINDS = {"linear": LinearBagModel, "mlp": MlpModel}


def model_from_dict(doc) -> VictimModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a victim checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    arrays = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    vocab = Vocabulary(arrays.pop("embeddings"))
    if kind == "linear":
        return LinearBagModel(vocab, arrays["weight"], arrays["bias"])
    return MlpModel(vocab, arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"])


def save_model(model: VictimModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")


def load_model(path) -> VictimModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(model, embeddings, tolerance, step=1e-5, seed=0, backward=None) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``c . forward(emb)``.

    ``c`` is a fixed random direction over the classes. The error is
    ``max|analytic - numeric| / max(max|numeric|, 1e-12)``.
    """
    emb = np.array(embeddings, dtype=np.float64)
    if emb.size > 10_000:
        raise ValueError("grad_check is meant for small inputs (L*d <= 1e4)")
    c = np.random.default_rng(seed).normal(size=model.num_classes)
    backward = backward or model.backward
    analytic = backward(emb, c)
    numeric = np.empty_like(emb)
    for idx in np.ndindex(emb.shape):
        orig = emb[idx]
        emb[idx] = orig + step
        up = float(model.forward(emb) @ c)
        emb[idx] = orig - step
        down = float(model.forward(emb) @ c)
        emb[idx] = orig
        numeric[idx] = (up - down) / (2 * step)
    err = np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
    return GradCheckReport(float(err), tolerance, step)


class FluencyScorer:
    """Per-(position, token) cost; lower is more fluent."""

    def score(self, seq: TokenSequence, position: int, token: int) -> float:
        raise NotImplementedError

    def site_scores(self, seq: TokenSequence) -> np.ndarray:
        return np.array([self.score(seq, i, t) for i, t in enumerate(seq.tokens)])

    def candidate_scores(self, seq: TokenSequence, cands) -> list:
        return [np.array([self.score(seq, i, c) for c in cs], dtype=np.float64)
                for i, cs in enumerate(cands.per_position)]


class TableFluencyScorer(FluencyScorer):
    """Lookup-table scorer.

    ``costs`` is ``(|V|,)`` (one row for every position) or ``(P, |V|)``
    where position ``i`` reads row ``min(i, P - 1)``. NaN marks a missing
    entry and scores ``+inf``.
    """

    def __init__(self, costs):
        table = np.array(costs, dtype=np.float64)
        if table.ndim == 1:
            table = table[None, :]
        if table.ndim != 2:
            raise ValueError("cost table must be 1-D or 2-D")
        table = np.where(np.isnan(table), np.inf, table)
        table.setflags(write=False)
        self.table = table

    def score(self, seq, position, token):
        row = self.table[min(position, self.table.shape[0] - 1)]
        if not 0 <= token < row.shape[0]:
            return float("inf")
        return float(row[token])

    def to_list(self):
        return [[None if not np.isfinite(x) else float(x) for x in row] for row in self.table]


def table_fluency_scorer(table) -> TableFluencyScorer:
    return TableFluencyScorer(table)


def unigram_surprisal(sequences, vocab_size) -> TableFluencyScorer:
    """``-log`` relative token frequency over a corpus; unseen tokens cost ``+inf``."""
    counts = np.zeros(vocab_size)
    for seq in sequences:
        np.add.at(counts, np.asarray(seq.tokens if isinstance(seq, TokenSequence) else seq), 1)
    with np.errstate(divide="ignore"):
        costs = -np.log(counts / counts.sum())
    return TableFluencyScorer(costs)


class UniformScorer(FluencyScorer):
    def score(self, seq, position, token):
        return 0.0

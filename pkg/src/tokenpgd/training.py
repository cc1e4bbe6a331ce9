"""Clean, adversarial (attack-in-the-loop) and TRADES-style training of reference victims."""

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .attack import AttackConfig
from .harness import aggregate, attack_examples

CLEAN = "clean"
STANDARD_AT = "standard_at"
TRADES = "trades"
MODES = (CLEAN, STANDARD_AT, TRADES)

KL_FLOOR = 1e-12


class TrainingDiverged(ArithmeticError):
    pass


def _train_attack():
    return AttackConfig(iters=5, max_restarts=1)


def _eval_attack():
    return AttackConfig(iters=20, max_restarts=10)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 0.5
    mode: str = STANDARD_AT
    trades_beta: float = 1.0
    mix_clean: bool = False
    seed: int = 0
    inner_attack: AttackConfig = field(default_factory=_train_attack)
    eval_attack: AttackConfig = field(default_factory=_eval_attack)
    evaluate_robust: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trades_beta < 0:
            raise ValueError("trades_beta must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("inner_attack", "eval_attack"):
            if isinstance(doc.get(key), dict):
                doc[key] = AttackConfig.from_dict(doc[key])
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean CE and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = len(labels)
    rows = np.arange(n)
    loss = -np.log(np.maximum(p[rows, labels], KL_FLOOR)).mean()
    g = p.copy()
    g[rows, labels] -= 1.0
    return float(loss), g / n


def kl_divergence(clean_logits, adv_logits):
    """Mean ``KL(p_clean || p_adv)`` and gradients w.r.t. both logit batches."""
    p, q = softmax(clean_logits), softmax(adv_logits)
    lp, lq = np.log(np.maximum(p, KL_FLOOR)), np.log(np.maximum(q, KL_FLOOR))
    n = len(p)
    kl = (p * (lp - lq)).sum(axis=-1)
    diff = lp - lq
    g_clean = p * (diff - (p * diff).sum(axis=-1, keepdims=True)) / n
    g_adv = (q - p) / n
    return float(kl.mean()), g_clean, g_adv


def _pooled(model, token_lists):
    emb = model.vocab.embeddings
    return np.stack([emb[np.asarray(t, dtype=np.intp)].mean(axis=0) for t in token_lists])


def batch_loss_and_grads(model, clean_tokens, adv_tokens, labels, config: TrainConfig):
    """Training loss of one batch and its parameter gradients."""
    labels = np.asarray(labels)
    total = {k: np.zeros_like(v) for k, v in model.params.items()}
    loss = 0.0

    def accumulate(pooled, g_logits):
        _, grads = model.head_backward(pooled, g_logits)
        for k in total:
            total[k] += grads[k]

    clean_pool = _pooled(model, clean_tokens)
    clean_logits = model.head(clean_pool)
    if config.mode == CLEAN:
        loss, g = cross_entropy(clean_logits, labels)
        accumulate(clean_pool, g)
    elif config.mode == STANDARD_AT:
        adv_pool = _pooled(model, adv_tokens)
        loss, g = cross_entropy(model.head(adv_pool), labels)
        accumulate(adv_pool, g)
        if config.mix_clean:
            l2, g2 = cross_entropy(clean_logits, labels)
            loss += l2
            accumulate(clean_pool, g2)
    else:
        adv_pool = _pooled(model, adv_tokens)
        loss, g = cross_entropy(clean_logits, labels)
        kl, g_c, g_a = kl_divergence(clean_logits, model.head(adv_pool))
        loss += config.trades_beta * kl
        accumulate(clean_pool, g + config.trades_beta * g_c)
        accumulate(adv_pool, config.trades_beta * g_a)
    return loss, total


def evaluate(model, examples, scorer, config: TrainConfig, workers=1, id_offset=10**9):
    """Clean and robust accuracy (percent) on ``examples``."""
    labels = np.array([ex.seq.label for ex in examples])
    preds = np.array([int(model.predict(np.array(ex.seq.tokens))) for ex in examples])
    out = {"clean_accuracy": float(100.0 * np.mean(preds == labels)) if len(examples) else 0.0}
    if config.evaluate_robust and examples:
        agg = aggregate(attack_examples("pgd", examples, model, scorer, config.eval_attack,
                                        workers, id_offset=id_offset))
        out["robust_accuracy"] = agg["robust_accuracy"]
        out["asr"] = agg["asr"]
    return out


def adv_train(model, train_examples, scorer, config: TrainConfig, eval_examples=None,
              workers=1, log=None):
    """Mini-batch gradient descent with the attack as inner maximizer.

    Updates ``model.params`` in place and returns ``(model, metrics)`` with
    one metrics record per epoch. ``log``, if given, is called with each
    record as soon as the epoch finishes.
    """
    metrics = []
    n = len(train_examples)
    labels_all = [ex.seq.label for ex in train_examples]
    if any(lbl is None for lbl in labels_all):
        raise ValueError("training examples must be labeled")
    needs_adv = config.mode != CLEAN
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [train_examples[i] for i in idx]
            clean_tokens = [ex.seq.tokens for ex in batch]
            adv_tokens = clean_tokens
            if needs_adv:
                # attacks run against a frozen snapshot of the current weights
                snapshot = model.copy()
                results = attack_examples("pgd", batch, snapshot, scorer, config.inner_attack,
                                          workers, ids=[epoch * n + int(i) for i in idx])
                adv_tokens = [r.perturbation.adv_tokens for r in results]
            loss, grads = batch_loss_and_grads(model, clean_tokens, adv_tokens,
                                               [labels_all[i] for i in idx], config)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {start}")
            for k, g in grads.items():
                model.params[k] -= config.learning_rate * g
            if not all(np.all(np.isfinite(p)) for p in model.params.values()):
                raise TrainingDiverged(f"non-finite weights after epoch {epoch}, batch {start}")
            losses.append(loss)
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if eval_examples is not None:
            record.update(evaluate(model, eval_examples, scorer, config, workers))
        metrics.append(record)
        if log is not None:
            log(record)
    return model, metrics


def metrics_jsonl(metrics):
    return "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics)


def with_mode(config: TrainConfig, mode, **kw):
    return replace(config, mode=mode, **kw)

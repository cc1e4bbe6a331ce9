"""Command-line entry point: ``tokenpgd <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .attack import METHODS, AttackConfig
from .data import (DataError, SyntheticSpec, generate, load_examples, read_vocab, write_candidates,
                   write_dataset, write_vocab)
from .harness import (ABLATIONS, SWEEP_KINDS, ablation_config, aggregate, attack_examples,
                      build_report, dumps_report, load_report, run_sweep, series_csv,
                      series_from_reports)
from .projection import BisectionError
from .sampling import BUDGET_MODES
from .training import MODES, TrainConfig, TrainingDiverged, adv_train, evaluate, metrics_jsonl
from .victim import (MODEL_KINDS, LinearBagModel, MlpModel, grad_check, load_model, save_model)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- I/O helpers

def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(path, 0, f"cannot open: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


def _split_paths(args, split):
    d = args.data_dir
    data = args.data or (os.path.join(d, f"{split}.jsonl") if d else None)
    cands = args.cands or (os.path.join(d, f"{split}.cands.jsonl") if d else None)
    vocab = args.vocab or (os.path.join(d, "vocab.json") if d else None)
    if data is None or vocab is None:
        raise UsageError("give --data-dir, or both --vocab and --data")
    return vocab, data, cands


def _load_split(args, split, vocab_size=None):
    vocab_path, data, cands = _split_paths(args, split)
    vocab, scorer = read_vocab(vocab_path)
    return vocab, scorer, load_examples(data, cands, vocab_size or vocab.size)


def _load_victim(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise DataError(path, 0, f"cannot open: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(path, 0, f"bad checkpoint: {exc}") from None


def _check_model_vocab(model, vocab, where):
    if model.vocab.embeddings.shape != vocab.embeddings.shape:
        raise DataError(where, 0, "checkpoint embeddings do not match the vocabulary file")


# ---------------------------------------------------------------- config handling

def _attack_overrides(args):
    """Flag values that override a loaded AttackConfig (None means "not given")."""
    top = {"budget_fraction": args.budget, "iters": args.iters, "max_restarts": args.restarts,
           "post_samples": args.post_samples, "lr_sites": args.lr, "lr_replace": args.lr}
    if args.no_normalize:
        top["normalize_grads"] = False
    nested = {
        "sampler": {"num_samples": args.samples, "seed": args.seed, "budget_mode": args.budget_mode},
        "objective": {"fluency_weight": args.fluency_weight, "fluency_mode": args.fluency_mode},
    }
    return top, nested


def _apply_overrides(doc, top, nested):
    doc = dict(doc)
    doc.update({k: v for k, v in top.items() if v is not None})
    for key, sub in nested.items():
        doc[key] = dict(doc[key])
        doc[key].update({k: v for k, v in sub.items() if v is not None})
    return doc


def _attack_config(args, base=None):
    doc = (base or AttackConfig()).to_dict()
    if getattr(args, "config", None):
        file_doc = _read_json(args.config)
        if not isinstance(file_doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    try:
        if getattr(args, "config", None):
            doc = AttackConfig.from_dict({**doc, **file_doc}).to_dict()
        return AttackConfig.from_dict(_apply_overrides(doc, *_attack_overrides(args)))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"attack config: {exc}") from None


def _add_attack_flags(p, prefix=""):
    g = p.add_argument_group(f"{prefix}attack options (override the config file)")
    g.add_argument("--budget", type=float, help="budget as a fraction of the sequence length")
    g.add_argument("--iters", type=int, help="PGD iterations per run")
    g.add_argument("--restarts", type=int, help="maximum number of restarts (0 disables)")
    g.add_argument("--samples", type=int, help="samples R per gradient estimate")
    g.add_argument("--post-samples", type=int, help="discretization draws after each run")
    g.add_argument("--lr", type=float, help="step size for both variable blocks")
    g.add_argument("--no-normalize", action="store_true", help="skip unit-norm gradient rescaling")
    g.add_argument("--seed", type=int, help="sampler seed")
    g.add_argument("--budget-mode", choices=BUDGET_MODES,
                   help="site sampling during gradient estimation (emission always enforces k)")
    g.add_argument("--lambda", dest="fluency_weight", type=float, help="fluency weight")
    g.add_argument("--fluency-mode", choices=("relaxed", "sampled"))


def _add_data_flags(p, default_split):
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", help="directory written by gen-data")
    g.add_argument("--split", default=default_split, help=f"split name (default {default_split})")
    g.add_argument("--vocab", help="vocabulary file (overrides --data-dir)")
    g.add_argument("--data", help="dataset file (overrides --data-dir)")
    g.add_argument("--cands", help="candidate file (overrides --data-dir)")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    spec = SyntheticSpec(num_candidates=args.candidates, min_len=args.min_len, max_len=args.max_len)
    if spec.min_len < 1 or spec.max_len < spec.min_len or spec.num_candidates < 1:
        raise UsageError("need 1 <= min-len <= max-len and candidates >= 1")
    vocab, scorer, train, test = generate(spec, args.seed, args.n_train, args.n_test)
    os.makedirs(args.out, exist_ok=True)
    write_vocab(os.path.join(args.out, "vocab.json"), vocab, scorer)
    for split, examples in (("train", train), ("test", test)):
        write_dataset(os.path.join(args.out, f"{split}.jsonl"), examples)
        write_candidates(os.path.join(args.out, f"{split}.cands.jsonl"), examples)
    print(f"wrote {len(train)} train / {len(test)} test examples, vocabulary {vocab.size} to {args.out}",
          file=sys.stderr)
    return EXIT_OK


def _train_config(args, mode):
    doc = TrainConfig(mode=mode).to_dict()
    if getattr(args, "config", None):
        file_doc = _read_json(args.config)
        if not isinstance(file_doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        doc.update(file_doc)
    top = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.train_lr,
           "seed": args.train_seed}
    if mode != "clean":
        top.update(mode=args.mode, trades_beta=args.trades_beta)
        if args.mix_clean:
            top["mix_clean"] = True
        top["evaluate_robust"] = bool(args.robust_eval)
    else:
        top["mode"] = "clean"
        top["evaluate_robust"] = False
    doc.update({k: v for k, v in top.items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(doc)
        if mode != "clean":
            inner = _apply_overrides(cfg.inner_attack.to_dict(), *_attack_overrides(args))
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "inner_attack": AttackConfig.from_dict(inner)})
        return cfg
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None


def _fresh_model(args, vocab, num_classes):
    rng = np.random.default_rng(args.init_seed)
    if args.model == "linear":
        return LinearBagModel.random(vocab, num_classes, rng)
    return MlpModel.random(vocab, num_classes, rng, hidden=args.hidden)


def _run_training(args, mode):
    cfg = _train_config(args, mode)
    vocab, scorer, train = _load_split(args, args.split)
    eval_examples = None
    if args.eval_split:
        _, _, eval_examples = _load_split(_with_split(args), args.eval_split, vocab.size)
    labels = [ex.seq.label for ex in train]
    if any(lbl is None for lbl in labels):
        raise DataError(_split_paths(args, args.split)[1], 0, "training data must be labeled")
    if getattr(args, "init", None):
        model = _load_victim(args.init)
        _check_model_vocab(model, vocab, args.init)
    else:
        model = _fresh_model(args, vocab, max(2, max(labels) + 1))
    log_fh = open(args.metrics, "w", encoding="utf-8", newline="\n") if args.metrics else None
    try:
        def log(rec):
            line = metrics_jsonl([rec])
            if log_fh:
                log_fh.write(line)
                log_fh.flush()
            print(line, end="", file=sys.stderr)
        adv_train(model, train, scorer, cfg, eval_examples=eval_examples, workers=args.workers, log=log)
    finally:
        if log_fh:
            log_fh.close()
    save_model(model, args.out)
    return EXIT_OK


def _with_split(args):
    # evaluation split comes from the same directory; explicit file paths only name the train split
    ns = argparse.Namespace(**vars(args))
    ns.data = ns.cands = None
    if not ns.data_dir:
        raise UsageError("--eval-split needs --data-dir")
    return ns


def cmd_train(args):
    return _run_training(args, "clean")


def cmd_adv_train(args):
    return _run_training(args, args.mode)


def cmd_attack(args):
    config = _attack_config(args)
    vocab, scorer, examples = _load_split(args, args.split)
    model = _load_victim(args.model)
    _check_model_vocab(model, vocab, args.model)
    if args.limit is not None:
        examples = examples[: args.limit]
    start = time.perf_counter()
    results = attack_examples(args.method, examples, model, scorer, config, workers=args.workers)
    wall = time.perf_counter() - start if args.timing else None
    doc = build_report(args.method, examples, results, config, wall_clock=wall)
    _write_text(args.out, dumps_report(doc))
    agg = doc["aggregates"]
    print(f"{args.method}: ASR {agg['asr']:.2f}% ({agg['successes']}/{agg['attacked']}, "
          f"{agg['skipped']} skipped)", file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    if args.sweep:
        kind, values = args.sweep
        if kind not in SWEEP_KINDS:
            raise UsageError(f"sweep kind must be one of {SWEEP_KINDS}")
        if not args.model:
            raise UsageError("--sweep needs --model and data flags")
        config = _attack_config(args)
        vocab, scorer, examples = _load_split(args, args.split)
        model = _load_victim(args.model)
        _check_model_vocab(model, vocab, args.model)
        try:
            xs = _floats(values)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(str(exc)) from None
        if kind != "budget":
            xs = [int(x) for x in xs]
        rows = run_sweep(kind, xs, args.method, examples, model, scorer, config, args.workers)
        _write_text(args.out, series_csv(rows))
        return EXIT_OK
    if not args.reports:
        raise UsageError("give report files or --sweep")
    docs = []
    for path in args.reports:
        try:
            docs.append(load_report(path))
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise DataError(path, 0, f"not a readable report: {exc}") from None
    if args.series:
        _write_text(args.out, series_csv(series_from_reports(docs, args.series)))
        return EXIT_OK
    summary = [{"file": p, "method": d["method"], **d["aggregates"]}
               for p, d in zip(args.reports, docs)]
    _write_text(args.out, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_grad_check(args):
    model = _load_victim(args.model)
    rng = np.random.default_rng(args.seed)
    tokens = rng.integers(0, model.vocab.size, size=args.length)
    emb = model.vocab.embeddings[tokens]
    report = grad_check(model, emb, args.tolerance, step=args.step, seed=args.seed)
    status = "PASS" if report.passed else "FAIL"
    print(f"grad-check {model.kind}: max relative error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:.1e}) {status}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_ablate(args):
    base = _attack_config(args)
    vocab, scorer, examples = _load_split(args, args.split)
    model = _load_victim(args.model)
    _check_model_vocab(model, vocab, args.model)
    rows = []
    for variant in ABLATIONS:
        cfg = ablation_config(base, variant)
        agg = aggregate(attack_examples("pgd", examples, model, scorer, cfg, workers=args.workers))
        rows.append((variant, cfg.max_restarts, cfg.sampler.num_samples, agg["asr"],
                     agg["asr_stderr"], agg["mean_restarts"]))
    _write_text(args.out, series_csv(rows, ("variant", "max_restarts", "samples", "asr",
                                            "stderr", "mean_restarts")))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="tokenpgd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a seeded synthetic benchmark")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n-train", type=int, default=400)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--candidates", type=int, default=3, help="neighbors m per position")
    g.add_argument("--min-len", type=int, default=6)
    g.add_argument("--max-len", type=int, default=10)
    g.set_defaults(func=cmd_gen_data)

    for name, func in (("train", cmd_train), ("adv-train", cmd_adv_train)):
        t = sub.add_parser(name, help="clean training" if name == "train" else
                           "adversarial training with the attack in the loop")
        _add_data_flags(t, "train")
        t.add_argument("--out", required=True, help="checkpoint path")
        t.add_argument("--metrics", help="per-epoch metrics log (JSON lines)")
        t.add_argument("--config", help="JSON file with TrainConfig fields")
        t.add_argument("--eval-split", help="split evaluated after every epoch")
        t.add_argument("--model", choices=sorted(MODEL_KINDS), default="mlp")
        t.add_argument("--hidden", type=int, default=16)
        t.add_argument("--init-seed", type=int, default=0, help="weight initialization seed")
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--train-lr", type=float, help="gradient-descent step size")
        t.add_argument("--train-seed", type=int, help="mini-batch order seed")
        t.add_argument("--workers", type=int, default=1)
        if name == "adv-train":
            t.add_argument("--init", help="start from this checkpoint instead of a fresh model")
            t.add_argument("--mode", choices=[m for m in MODES if m != "clean"], default="standard_at")
            t.add_argument("--trades-beta", type=float)
            t.add_argument("--mix-clean", action="store_true", help="add clean CE in standard_at")
            t.add_argument("--robust-eval", action="store_true",
                           help="also report robust accuracy on --eval-split")
            _add_attack_flags(t, "inner ")
        t.set_defaults(func=func)

    a = sub.add_parser("attack", help="attack every example and write a report")
    _add_data_flags(a, "test")
    a.add_argument("--model", required=True, help="victim checkpoint")
    a.add_argument("--method", choices=METHODS, default="pgd")
    a.add_argument("--config", help="JSON file with AttackConfig fields")
    a.add_argument("--out", help="report path (default stdout)")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--limit", type=int, help="attack only the first N examples")
    a.add_argument("--timing", action="store_true",
                   help="record wall-clock time (makes the report non-reproducible)")
    _add_attack_flags(a)
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="summarize reports or run a sweep")
    r.add_argument("reports", nargs="*", help="attack reports")
    r.add_argument("--series", choices=SWEEP_KINDS, help="emit x,y,stderr rows from the reports")
    r.add_argument("--sweep", nargs=2, metavar=("KIND", "VALUES"),
                   help="run a sweep, e.g. --sweep budget 0.05,0.10,0.25")
    r.add_argument("--model", help="victim checkpoint (for --sweep)")
    r.add_argument("--method", choices=METHODS, default="pgd")
    r.add_argument("--config", help="JSON file with AttackConfig fields")
    r.add_argument("--out", help="output path (default stdout)")
    r.add_argument("--workers", type=int, default=1)
    _add_data_flags(r, "test")
    _add_attack_flags(r)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("grad-check", help="finite-difference check of a checkpoint's backward pass")
    c.add_argument("--model", required=True)
    c.add_argument("--length", type=int, default=8)
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("ablate", help="restart / sampling ablation grid")
    _add_data_flags(b, "test")
    b.add_argument("--model", required=True)
    b.add_argument("--config", help="JSON file with AttackConfig fields")
    b.add_argument("--out", help="CSV path (default stdout)")
    b.add_argument("--workers", type=int, default=1)
    _add_attack_flags(b)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tokenpgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tokenpgd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BisectionError, TrainingDiverged, FloatingPointError) as exc:
        print(f"tokenpgd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

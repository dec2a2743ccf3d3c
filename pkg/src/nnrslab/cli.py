"""Command-line surface.

    nnrslab index    --corpus C --embeddings E --out-dir D [--k K] [--tau T]
    nnrslab train    --config F [--resume CKPT] [--stop-after N] [--trace]
    nnrslab trace    --config F        (train with the decision trace on)
    nnrslab eval     --checkpoint CKPT --out R.csv [--metrics bleu,wmd,ppl]
    nnrslab schedule --kind linear --start 0 --end 0.5 --epochs 40 --out S.csv
    nnrslab kl-diag  --p P.csv --q Q.csv --eps 0.5 --gamma 0.5 --out D.csv

Exit codes: 0 success, 2 usage or validation problem, 3 runtime
failure. Training output directories are guarded by a lockfile so two
runs cannot write into the same place, and a manifest.json (config
snapshot, seed, input hashes, output names) is written before training
starts. BLEU-style scores are printed and written x100 in eval output;
every other artifact keeps the internal [0, 1] scale.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .embeddings import load_embeddings
from .metrics import ToyChain, evaluate_model, kl_decomposition
from .neighbors import build_neighbor_table, build_transition_table, default_k, save_table, save_table_csv
from .schedules import KINDS, Schedule
from .trainer import (
    DivergenceError,
    _load_run_inputs,
    config_from_dict,
    config_to_dict,
    make_batches,
    model_from_checkpoint,
    parse_config_file,
    records_to_csv,
    rng_streams,
    run_training,
)
from .vocab import build_vocabulary, read_corpus


class UsageError(Exception):
    """Bad arguments, bad config, missing inputs: exit code 2."""


def _checked(fn, *args, **kwargs):
    """Run a setup-phase callable, converting failures to UsageError."""
    try:
        return fn(*args, **kwargs)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class _DirLock:
    """O_EXCL lockfile; concurrent runs must use distinct out dirs."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                "output directory is locked (%s exists); another run may be active" % self.path
            ) from None
        os.write(fd, ("%d\n" % os.getpid()).encode("ascii"))
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_index(args) -> int:
    k_arg = args.k
    if k_arg is not None and k_arg < 1:
        raise UsageError("--k must be >= 1")
    tokens = _checked(read_corpus, args.corpus)
    vocab = _checked(build_vocabulary, tokens, args.min_count)
    ids = vocab.encode(tokens)
    emb = _checked(load_embeddings, args.embeddings, vocab, args.dim)
    k = k_arg if k_arg is not None else default_k(len(vocab))
    table = _checked(build_neighbor_table, emb, k, args.tau)
    trans = _checked(build_transition_table, ids, vocab, k)

    os.makedirs(args.out_dir, exist_ok=True)
    with _DirLock(args.out_dir):
        base = args.out_dir
        vocab.save(os.path.join(base, "vocab.tsv"))
        save_table(os.path.join(base, "neighbors.bin"), table)
        save_table_csv(os.path.join(base, "neighbors.csv"), table)
        save_table(os.path.join(base, "transitions.bin"), trans)
        save_table_csv(os.path.join(base, "transitions.csv"), trans)
        counts, edges = np.histogram(table.sims, bins=20, range=(-1.0, 1.0))
        _write_json(os.path.join(base, "stats.json"), {
            "k": k,
            "vocab_size": len(vocab),
            "tau": args.tau,
            "flagged_words": len(table.flagged),
            "sim_histogram": {
                "counts": [int(c) for c in counts],
                "edges": [float(e) for e in edges],
            },
        })
    print("indexed %d words, k=%d -> %s" % (len(vocab), k, args.out_dir))
    return 0


def _run_training_command(args, trace: bool) -> int:
    cfg = _checked(parse_config_file, args.config)
    if not cfg.out_dir:
        raise UsageError("config must set out_dir")
    os.makedirs(cfg.out_dir, exist_ok=True)
    records_path = os.path.join(cfg.out_dir, "records.csv")
    checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    trace_path = os.path.join(cfg.out_dir, "decisions.csv") if trace else None

    with _DirLock(cfg.out_dir):
        inputs = {args.config: _sha256(args.config), cfg.corpus: _checked(_sha256, cfg.corpus)}
        for extra in (cfg.embeddings, cfg.val_corpus):
            if extra:
                inputs[extra] = _checked(_sha256, extra)
        outputs = ["records.csv", "checkpoint.bin"] + (["decisions.csv"] if trace else [])
        _write_json(os.path.join(cfg.out_dir, "manifest.json"), {
            "command": "trace" if trace else "train",
            "version": __version__,
            "created_unix": time.time(),
            "seed": cfg.seed,
            "config": config_to_dict(cfg),
            "inputs": inputs,
            "outputs": outputs,
        })
        try:
            _, records = run_training(
                cfg,
                stop_after=getattr(args, "stop_after", None),
                resume_from=getattr(args, "resume", None),
                trace_path=trace_path,
                checkpoint_path=checkpoint_path,
            )
        except DivergenceError as exc:
            records_to_csv(exc.records, records_path)
            raise
        records_to_csv(records, records_path)
    last = records[-1]
    print("trained %d epoch(s), final val perplexity %.4f -> %s"
          % (last.epoch, last.val_loss, cfg.out_dir))
    return 0


def cmd_train(args) -> int:
    return _run_training_command(args, trace=bool(args.trace))


def cmd_trace(args) -> int:
    return _run_training_command(args, trace=True)


_METRIC_NAMES = {
    "ppl": "ppl",
    "bleu": "bleu4",
    "wmd": "wmd",
    "self_bleu": "self_bleu4",
    "self_wmd": "self_wmd",
}
_BLEU_LIKE = ("bleu4", "self_bleu4")


def cmd_eval(args) -> int:
    wanted = []
    for name in args.metrics.split(","):
        name = name.strip()
        if name not in _METRIC_NAMES:
            raise UsageError(
                "unknown metric %r (choose from %s)" % (name, ", ".join(sorted(_METRIC_NAMES)))
            )
        wanted.append(_METRIC_NAMES[name])

    model, ck = _checked(model_from_checkpoint, args.checkpoint)
    cfg = _checked(config_from_dict, ck["meta"]["config"])
    rng_model, _ = rng_streams(cfg.seed)
    vocab, _train_ids, val_ids, emb = _checked(_load_run_inputs, cfg, rng_model)
    if vocab.content_hash() != ck["meta"]["vocab_hash"]:
        raise UsageError("checkpoint vocabulary does not match the config corpus")

    if args.corpus:
        eval_ids = vocab.encode(_checked(read_corpus, args.corpus))
    else:
        eval_ids = val_ids
    batch = args.batch_size if args.batch_size else cfg.batch_size
    windows = _checked(make_batches, eval_ids, batch, cfg.bptt_len)

    reports = []
    exclude = {vocab.unk_id}
    if {"bleu4", "wmd", "ppl"} & set(wanted):
        reports += evaluate_model(model, windows, emb, "quality",
                                  prefix_len=args.prefix_len, split_name=args.split,
                                  config_id=args.checkpoint, exclude=exclude)
    if {"self_bleu4", "self_wmd"} & set(wanted):
        more = evaluate_model(model, windows, emb, "diversity",
                              prefix_len=args.prefix_len, split_name=args.split,
                              config_id=args.checkpoint, exclude=exclude)
        seen = {r.metric for r in reports}
        reports += [r for r in more if r.metric not in seen]

    rows = []
    for rep in reports:
        if rep.metric not in wanted:
            continue
        value = rep.value * 100.0 if rep.metric in _BLEU_LIKE else rep.value
        rows.append((rep.metric, rep.split, value, rep.config_id))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "split", "value", "config_id"])
        for metric, split, value, config_id in rows:
            writer.writerow([metric, split, repr(float(value)), config_id])
            print("%-12s %-6s %.4f" % (metric, split, value))
    return 0


def cmd_schedule(args) -> int:
    schedule = _checked(Schedule, args.kind, args.start, args.end)
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    rates = schedule.table(args.epochs)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "z", "rate"])
        for epoch, rate in enumerate(rates):
            z = epoch / args.epochs
            writer.writerow([epoch, repr(float(z)), repr(float(rate))])
    print("wrote %d rows -> %s" % (len(rates), args.out))
    return 0


def _load_chain(path) -> ToyChain:
    trans = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return ToyChain.from_transitions(trans)


def cmd_kl_diag(args) -> int:
    p_chain = _checked(_load_chain, args.p)
    q_chain = _checked(_load_chain, args.q)
    terms = _checked(kl_decomposition, p_chain, q_chain, args.eps, args.gamma)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "value"])
        for name in ("marginal", "ss_teacher", "ss_model",
                     "nnrs_teacher", "nnrs_neighbor", "total"):
            writer.writerow([name, repr(terms[name])])
            print("%-14s %.6g" % (name, terms[name]))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnrslab",
        description="Nearest-neighbor replacement sampling: tables, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build and save neighbor + transition tables")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=None, help="neighbors per word (default: log2 |V|)")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None)
    p.add_argument("--trace", action="store_true", help="also write decisions.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("trace", help="train with the per-token decision trace enabled")
    p.add_argument("--config", required=True)
    p.add_argument("--stop-after", type=int, default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--split", default="valid", help="label recorded in the report")
    p.add_argument("--metrics", default="ppl,bleu,wmd")
    p.add_argument("--corpus", default=None, help="evaluation text (default: config's validation split)")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--prefix-len", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="emit a rate table for a schedule")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--start", type=float, required=True)
    p.add_argument("--end", type=float, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("kl-diag", help="KL decomposition of two toy chains")
    p.add_argument("--p", required=True, help="CSV transition matrix of the data chain")
    p.add_argument("--q", required=True, help="CSV transition matrix of the model chain")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kl_diag)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:  # anything after validation is a runtime failure
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

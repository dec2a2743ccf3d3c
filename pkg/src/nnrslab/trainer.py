"""Training loop: schedules in, policy-driven inputs, records out.

Per epoch: evaluate the replacement schedules at progress
epoch / total_epochs (so the final epoch sits exactly at the schedule
endpoints), train over contiguous BPTT windows with the per-timestep
source mask deciding teacher / prediction / neighbor inputs, then
compute teacher-forced validation perplexity and run the controller
(temperature update + table renormalization, or the Gumbel logits
update in GSNS mode).

Two independent RNG streams are spawned from the config seed: one for
parameter and embedding initialization, one for every policy draw.
Because the streams are separate, a run at epsilon = gamma = 0 is
float-identical to a plain teacher-forcing loop with the policy layer
absent.
"""

import csv
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .arrayio import load_arrays, save_arrays
from .embeddings import EmbeddingMatrix, load_embeddings
from .model import (
    ForwardCache,
    LstmLm,
    backward,
    cosine_lr,
    forward_cached,
    greedy_or_sample_predict,
    loss_from_cache,
    sgd_step,
    step,
)
from .neighbors import (
    NeighborTable,
    build_neighbor_table,
    build_transition_table,
    clamp_tau,
    default_k,
    renormalize,
    sample_neighbor,
)
from .policy import (
    MODES,
    GumbelLogits,
    PolicyState,
    Source,
    decide_batch_positions,
    gumbel_sample,
    gumbel_update,
    update_temperature,
)
from .schedules import Schedule, rates_for_epoch
from .vocab import build_vocabulary, read_corpus


class DivergenceError(RuntimeError):
    """Validation perplexity blew past 10x vocabulary size.

    Carries the records collected so far as a diagnostic.
    """

    def __init__(self, message: str, records):
        super().__init__(message)
        self.records = records


def _static_zero() -> Schedule:
    return Schedule("static", 0.0, 0.0)


@dataclass
class TrainConfig:
    """One run, fully determined by these fields plus input files."""

    corpus: str
    out_dir: str = ""
    embeddings: str = ""
    val_corpus: str = ""
    epochs: int = 20
    batch_size: int = 8
    bptt_len: int = 35
    mode: str = "MLE"
    ss: Schedule = field(default_factory=_static_zero)
    nnrs: Schedule = field(default_factory=_static_zero)
    base_lr: float = 2.0
    clip: float = 5.0
    momentum: float = 0.0
    seed: int = 0
    k: int = 0  # 0 -> default_k(|V|)
    tau_init: float = 0.1
    gumbel_beta: float = 0.9
    gumbel_tau: float = 0.5
    hidden: int = 128
    dim: int = 64
    min_count: int = 1
    val_fraction: float = 0.1
    predict_sample: bool = False
    freeze_embeddings: bool = False

    def check(self) -> None:
        if not self.corpus:
            raise ValueError("corpus path is required")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("batch_size", "bptt_len", "hidden", "dim", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be >= 1" % name)
        if self.mode not in MODES:
            raise ValueError("unknown mode %r (expected one of %s)" % (self.mode, ", ".join(MODES)))
        if self.base_lr <= 0.0:
            raise ValueError("base_lr must be positive")
        if self.clip < 0.0:
            raise ValueError("clip must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.k < 0:
            raise ValueError("k must be >= 0 (0 selects the default)")
        ss_zero = self.ss.start_rate == 0.0 and self.ss.end_rate == 0.0
        nnrs_zero = self.nnrs.start_rate == 0.0 and self.nnrs.end_rate == 0.0
        if self.mode == "MLE" and not (ss_zero and nnrs_zero):
            raise ValueError("mode MLE requires both schedules at rate 0")
        if self.mode == "SS" and not nnrs_zero:
            raise ValueError("mode SS requires the nnrs schedule at rate 0")
        if self.mode in ("NNRS", "TPRS", "GSNS") and not ss_zero:
            raise ValueError("mode %s requires the ss schedule at rate 0" % self.mode)


_CONFIG_KEYS = {
    "corpus": str, "out_dir": str, "embeddings": str, "val_corpus": str,
    "epochs": int, "batch_size": int, "bptt_len": int, "mode": str,
    "ss_kind": str, "ss_start": float, "ss_end": float,
    "nnrs_kind": str, "nnrs_start": float, "nnrs_end": float,
    "base_lr": float, "clip": float, "momentum": float, "seed": int,
    "k": int, "tau_init": float, "gumbel_beta": float, "gumbel_tau": float,
    "hidden": int, "dim": int, "min_count": int, "val_fraction": float,
    "predict_sample": bool, "freeze_embeddings": bool,
}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % v)


def config_from_dict(raw: dict) -> TrainConfig:
    """Build a TrainConfig from flat string-or-typed values.

    Unknown keys are an error that lists every valid key, so config
    file typos fail loudly.
    """
    unknown = sorted(set(raw) - set(_CONFIG_KEYS))
    if unknown:
        raise ValueError(
            "unknown config key(s) %s; valid keys: %s"
            % (", ".join(unknown), ", ".join(sorted(_CONFIG_KEYS)))
        )
    vals = {}
    for key, value in raw.items():
        typ = _CONFIG_KEYS[key]
        vals[key] = _parse_bool(value) if typ is bool else typ(value)
    sched = {}
    for prefix in ("ss", "nnrs"):
        kind = vals.pop(prefix + "_kind", "static")
        start = vals.pop(prefix + "_start", 0.0)
        end = vals.pop(prefix + "_end", 0.0)
        sched[prefix] = Schedule(kind, start, end)
    cfg = TrainConfig(ss=sched["ss"], nnrs=sched["nnrs"], **vals)
    cfg.check()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name in ("ss", "nnrs"):
            sched = getattr(cfg, f.name)
            out[f.name + "_kind"] = sched.kind
            out[f.name + "_start"] = sched.start_rate
            out[f.name + "_end"] = sched.end_rate
        else:
            out[f.name] = getattr(cfg, f.name)
    return out


def parse_config_file(path) -> TrainConfig:
    """Flat "key = value" lines; # starts a comment; blank lines ok."""
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError("%s:%d: expected 'key = value'" % (path, lineno))
            key, value = (part.strip() for part in text.split("=", 1))
            if key in raw:
                raise ValueError("%s:%d: duplicate key %r" % (path, lineno, key))
            raw[key] = value
    return config_from_dict(raw)


@dataclass
class EpochRecord:
    """One epoch's summary row.

    train_loss and val_loss are perplexities (exp of mean NLL) - the
    controller compares validation perplexity against best, which
    starts at the uniform-model value |V|. tau is the controller state
    after this epoch's update; wall_time is excluded from equality.
    """

    epoch: int
    epsilon: float
    gamma: float
    tau: float
    train_loss: float
    val_loss: float
    best: float
    lr: float
    wall_time: float = field(default=0.0, compare=False)


_RECORD_FIELDS = ("epoch", "epsilon", "gamma", "tau", "train_loss",
                  "val_loss", "best", "lr", "wall_time")


def records_to_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RECORD_FIELDS)
        for rec in records:
            writer.writerow([rec.epoch] + [repr(float(getattr(rec, f)))
                                           for f in _RECORD_FIELDS[1:]])


def records_from_csv(path):
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _RECORD_FIELDS:
            raise ValueError("unexpected records header: %r" % (header,))
        for row in reader:
            records.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:])))
    return records


def rng_streams(seed: int):
    """(model/init stream, policy stream), spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def make_batches(corpus_ids, batch_size: int, bptt_len: int):
    """Contiguous-stream LM batching.

    The id stream is cut into batch_size equal contiguous streams
    (trailing remainder dropped), then sliced into (input, target)
    windows of up to bptt_len steps with target = input shifted by one.
    The final window may be shorter. Hidden state is meant to carry
    across consecutive windows; resets are the caller's business.
    """
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if batch_size < 1 or bptt_len < 1:
        raise ValueError("batch_size and bptt_len must be >= 1")
    stream_len = ids.size // batch_size
    if ids.size < batch_size * bptt_len or stream_len < 2:
        raise ValueError(
            "corpus too short: %d ids for batch_size=%d, bptt_len=%d"
            % (ids.size, batch_size, bptt_len)
        )
    data = ids[: stream_len * batch_size].reshape(batch_size, stream_len)
    batches = []
    for start in range(0, stream_len - 1, bptt_len):
        targets = data[:, start + 1: start + 1 + bptt_len]
        inputs = data[:, start: start + targets.shape[1]]
        batches.append((inputs, targets))
    return batches


def validate(model: LstmLm, val_batches) -> float:
    """Teacher-forced perplexity over a window list, state carried.

    exp(total NLL / total tokens); never touches parameters and never
    applies a sampling policy.
    """
    if not val_batches:
        raise ValueError("empty validation split")
    state = None
    total_nll = 0.0
    total_tokens = 0
    for inputs, targets in val_batches:
        if state is None:
            state = model.zero_state(inputs.shape[0])
        cache = forward_cached(model, inputs, state)
        total_nll += loss_from_cache(cache, targets) * targets.size
        total_tokens += targets.size
        state = cache.final_state
    return float(np.exp(total_nll / total_tokens))


def _load_run_inputs(cfg: TrainConfig, rng_model: np.random.Generator):
    """Corpus, vocab, splits, embeddings - everything data-side."""
    tokens = read_corpus(cfg.corpus)
    vocab = build_vocabulary(tokens, cfg.min_count)
    ids = vocab.encode(tokens)
    if cfg.val_corpus:
        train_ids = ids
        val_ids = vocab.encode(read_corpus(cfg.val_corpus))
    else:
        n_val = max(cfg.bptt_len + 1, int(round(ids.size * cfg.val_fraction)))
        if n_val >= ids.size:
            raise ValueError("corpus too short to split off a validation tail")
        train_ids = ids[:-n_val]
        val_ids = ids[-n_val:]
    if cfg.embeddings:
        emb = load_embeddings(cfg.embeddings, vocab, cfg.dim, fallback_seed=cfg.seed)
    else:
        span = 0.5 / cfg.dim
        emb = EmbeddingMatrix.from_vectors(
            rng_model.uniform(-span, span, (len(vocab), cfg.dim))
        )
    return vocab, train_ids, val_ids, emb


CHECKPOINT_MAGIC = "nnrslab-checkpoint"


def save_checkpoint(path, model: LstmLm, state: PolicyState, records,
                    vocab_hash: str, config: TrainConfig, epoch: int,
                    velocity=None, gumbel=None) -> None:
    """All state needed to continue the run exactly: parameters,
    optimizer velocity, Gumbel logits, controller state, both RNG
    streams, and the records so far."""
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": __version__,
        "vocab_hash": vocab_hash,
        "config": config_to_dict(config),
        "epoch": epoch,
        "mode": state.mode,
        "tau": state.tau,
        "best_val_loss": state.best_val_loss,
        "epsilon": state.epsilon,
        "gamma": state.gamma,
        "records": [[getattr(r, f) for f in _RECORD_FIELDS] for r in records],
        "rng_policy": state.rng.bit_generator.state,
        "has_velocity": velocity is not None,
        "has_gumbel": gumbel is not None,
        "gumbel_beta": gumbel.beta if gumbel is not None else None,
        "vocab_size": model.vocab_size,
        "dim": model.dim,
        "hidden": model.hidden,
    }
    arrays = {"param_" + k: v for k, v in model.params.items()}
    if velocity is not None:
        arrays.update({"vel_" + k: v for k, v in velocity.items()})
    if gumbel is not None:
        arrays["gumbel_log_alpha"] = gumbel.log_alpha
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    save_arrays(path, **arrays)


def load_checkpoint(path, vocab_hash: str = None) -> dict:
    """Read a checkpoint; refuses a vocab-hash mismatch outright."""
    data = load_arrays(path)
    if "meta" not in data:
        raise ValueError("%s is not a checkpoint (no meta entry)" % path)
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError("%s is not a checkpoint" % path)
    if vocab_hash is not None and meta["vocab_hash"] != vocab_hash:
        raise ValueError(
            "checkpoint vocabulary hash %s does not match current vocabulary %s"
            % (meta["vocab_hash"][:12], vocab_hash[:12])
        )
    out = {
        "meta": meta,
        "params": {k[len("param_"):]: v for k, v in data.items() if k.startswith("param_")},
        "velocity": {k[len("vel_"):]: v for k, v in data.items() if k.startswith("vel_")} or None,
        "gumbel_log_alpha": data.get("gumbel_log_alpha"),
        "records": [EpochRecord(int(row[0]), *(float(v) for v in row[1:]))
                    for row in meta["records"]],
    }
    return out


def model_from_checkpoint(path, vocab_hash: str = None):
    """(model, checkpoint dict) for evaluation-style consumers."""
    ck = load_checkpoint(path, vocab_hash)
    meta = ck["meta"]
    model = LstmLm(meta["vocab_size"], meta["dim"], meta["hidden"], ck["params"])
    return model, ck


class _Trace:
    """Optional decision trace: epoch,step,t,source,teacher_id,chosen_id."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["epoch", "step", "t", "source", "teacher_id", "chosen_id"])

    def rows(self, epoch, step_idx, t, source, teachers, chosen):
        label = Source(source).label
        for teach, chose in zip(teachers, chosen):
            self._writer.writerow([epoch, step_idx, t, label, int(teach), int(chose)])

    def close(self):
        self._fh.close()


def _train_epoch(model, state, cfg, table, gumbel, train_batches, lr,
                 velocity, trace, epoch):
    """One pass over the training windows. Returns (train nll, gsns grad parts)."""
    hidden = None
    prev_probs = None  # last step's output distributions, for SS feedback
    total_nll = 0.0
    total_tokens = 0
    gsns_grad = np.zeros_like(gumbel.log_alpha) if gumbel is not None else None
    gsns_rows = set()

    for step_idx, (inputs, targets) in enumerate(train_batches):
        batch, width = inputs.shape
        if hidden is None:
            hidden = model.zero_state(batch)
        mask = decide_batch_positions(state, width)
        caches = []
        gsns_touch = []
        for t in range(width):
            teachers = inputs[:, t]
            src = int(mask[t])
            if src == Source.PREDICTION and prev_probs is None:
                src = int(Source.TEACHER)  # nothing to feed back yet
            if src == Source.TEACHER:
                xs = teachers
            elif src == Source.PREDICTION:
                if cfg.predict_sample:
                    xs = np.array(
                        [greedy_or_sample_predict(prev_probs[b], sample=True, rng=state.rng)
                         for b in range(batch)], dtype=np.int64)
                else:
                    xs = prev_probs.argmax(axis=1).astype(np.int64)
            else:  # Source.NEIGHBOR
                xs = np.empty(batch, dtype=np.int64)
                if gumbel is not None:
                    for b in range(batch):
                        word = int(teachers[b])
                        slot, _soft = gumbel_sample(gumbel, word, cfg.gumbel_tau, state.rng)
                        xs[b] = table.ids[word, slot]
                        gsns_touch.append((t, b, word))
                else:
                    for b in range(batch):
                        xs[b] = sample_neighbor(table, int(teachers[b]), state.rng)
            log_probs, hidden, cache = step(model, xs, hidden)
            if state.epsilon > 0.0:
                prev_probs = np.exp(log_probs)
            caches.append(cache)
            if trace is not None:
                trace.rows(epoch, step_idx, t, src, teachers, xs)

        fcache = ForwardCache(caches, hidden, batch)
        nll = loss_from_cache(fcache, targets)
        total_nll += nll * targets.size
        total_tokens += targets.size
        grads = backward(model, fcache, targets)
        if gsns_touch:
            # straight-through: dL/dsoft_j = dL/dx . embed[neighbor_j]
            embed = model.params["embed"]
            for t, b, word in gsns_touch:
                gsns_grad[word] += fcache.input_grads[t, b] @ embed[table.ids[word]].T
                gsns_rows.add(word)
        if cfg.freeze_embeddings:
            grads["embed"][:] = 0.0
        sgd_step(model, grads, lr, cfg.clip, cfg.momentum, velocity)

    return total_nll / total_tokens, gsns_grad, gsns_rows


def run_training(config: TrainConfig, stop_after: int = None,
                 resume_from: str = None, trace_path: str = None,
                 checkpoint_path: str = None):
    """Run the full curriculum loop. Returns (model, records).

    Epoch i in 1..epochs evaluates the schedules at z = i / epochs (the
    final epoch sits on the schedule endpoints) and the learning rate
    at cosine_lr(base_lr, i - 1, epochs) (the first epoch trains at
    base_lr). A scheduled-sampling position at the very first step of
    an epoch falls back to the teacher token since no prediction
    exists yet. Neighbor tables are (re)built at the clamped
    temperature; TPRS tables are static, so only NNRS-family modes run
    the temperature controller.
    """
    cfg = config
    cfg.check()
    if stop_after is not None and not 1 <= stop_after <= cfg.epochs:
        raise ValueError("stop_after must be in [1, epochs]")

    rng_model, rng_policy = rng_streams(cfg.seed)
    vocab, train_ids, val_ids, emb = _load_run_inputs(cfg, rng_model)
    n_vocab = len(vocab)

    table = None
    gumbel = None
    if cfg.mode in ("NNRS", "SS_NNRS", "GSNS"):
        k = cfg.k or default_k(n_vocab)
        table = build_neighbor_table(emb, k, tau=clamp_tau(cfg.tau_init))
    elif cfg.mode == "TPRS":
        k = cfg.k or default_k(n_vocab)
        table = build_transition_table(train_ids, vocab, k)
    if cfg.mode == "GSNS":
        gumbel = GumbelLogits.from_table(table, beta=cfg.gumbel_beta)

    model = LstmLm.init(n_vocab, cfg.dim, cfg.hidden, rng_model, embed=emb.vectors)
    state = PolicyState(mode=cfg.mode, rng=rng_policy, tau=cfg.tau_init,
                        best_val_loss=float(n_vocab))
    velocity = ({key: np.zeros_like(val) for key, val in model.params.items()}
                if cfg.momentum > 0.0 else None)
    records = []
    start_epoch = 1

    if resume_from:
        ck = load_checkpoint(resume_from, vocab.content_hash())
        meta = ck["meta"]
        if meta["mode"] != cfg.mode:
            raise ValueError("checkpoint mode %s does not match config mode %s"
                             % (meta["mode"], cfg.mode))
        model.params = ck["params"]
        state.tau = meta["tau"]
        state.best_val_loss = meta["best_val_loss"]
        state.rng.bit_generator.state = meta["rng_policy"]
        if ck["velocity"] is not None:
            velocity = ck["velocity"]
        if ck["gumbel_log_alpha"] is not None:
            gumbel = GumbelLogits(ck["gumbel_log_alpha"], beta=meta["gumbel_beta"])
        if isinstance(table, NeighborTable):
            table = renormalize(table, clamp_tau(state.tau))
        records = ck["records"]
        start_epoch = meta["epoch"] + 1

    train_batches = make_batches(train_ids, cfg.batch_size, cfg.bptt_len)
    val_batches = make_batches(val_ids, 1, cfg.bptt_len)

    trace = _Trace(trace_path) if trace_path else None
    try:
        last_epoch = start_epoch - 1
        for epoch in range(start_epoch, cfg.epochs + 1):
            epsilon, gamma = rates_for_epoch(cfg.ss, cfg.nnrs, epoch, cfg.epochs)
            state.set_rates(epsilon, gamma)
            lr = cosine_lr(cfg.base_lr, epoch - 1, cfg.epochs)
            started = time.perf_counter()

            train_nll, gsns_grad, gsns_rows = _train_epoch(
                model, state, cfg, table, gumbel, train_batches, lr,
                velocity, trace, epoch,
            )
            val_ppl = validate(model, val_batches)

            if cfg.mode == "GSNS":
                gumbel = gumbel_update(gumbel, gsns_grad, rows=gsns_rows)
                state.best_val_loss = min(state.best_val_loss, val_ppl)
            elif cfg.mode in ("NNRS", "SS_NNRS"):
                update_temperature(state, val_ppl)
                table = renormalize(table, state.tau)
            else:
                state.best_val_loss = min(state.best_val_loss, val_ppl)

            records.append(EpochRecord(
                epoch=epoch, epsilon=epsilon, gamma=gamma, tau=state.tau,
                train_loss=float(np.exp(train_nll)), val_loss=val_ppl,
                best=state.best_val_loss, lr=lr,
                wall_time=time.perf_counter() - started,
            ))
            last_epoch = epoch
            if val_ppl > 10.0 * n_vocab:
                raise DivergenceError(
                    "validation perplexity %.3g exceeded 10x vocabulary size at epoch %d"
                    % (val_ppl, epoch), records)
            if stop_after is not None and epoch >= stop_after:
                break
    finally:
        if trace is not None:
            trace.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state, records,
                        vocab.content_hash(), cfg, last_epoch,
                        velocity=velocity, gumbel=gumbel)
    return model, records

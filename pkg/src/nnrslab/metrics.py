"""Evaluation suite: BLEU-4, self-BLEU-4, embedding WMD scores, the
KL-decomposition diagnostic on toy Markov chains, and the model-level
evaluation protocol that ties them together.

All scores are kept in [0, 1] internally; the CLI multiplies BLEU-style
numbers by 100 for table-style display.
"""

import csv
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import rel_entr

from .embeddings import EmbeddingMatrix
from .model import step
from .trainer import validate

_BLEU_EPS = 1e-9  # numerator floor for zero n-gram matches
_EXACT_WMD_MAX = 12


def _ngram_counts(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidate, references) -> float:
    """Sentence BLEU with n up to min(4, len(candidate)).

    Modified (clipped) n-gram precision against the reference multiset,
    geometric mean with uniform weights, zero match counts floored at
    1e-9, and the closest-reference-length brevity penalty.
    """
    cand = list(candidate)
    if not cand:
        raise ValueError("empty candidate")
    refs = [list(r) for r in references]
    if not refs or any(not r for r in refs):
        raise ValueError("references must be non-empty")
    c = len(cand)
    n_max = min(4, c)
    log_sum = 0.0
    for n in range(1, n_max + 1):
        counts = _ngram_counts(cand, n)
        total = c - n + 1
        ref_counts = [_ngram_counts(r, n) for r in refs]
        clipped = sum(
            min(cnt, max(rc[gram] for rc in ref_counts))
            for gram, cnt in counts.items()
        )
        numer = clipped if clipped > 0 else _BLEU_EPS
        log_sum += np.log(numer / total) / n_max
    # closest reference length; ties resolve to the shorter reference
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return float(bp * np.exp(log_sum))


def self_bleu4(batch) -> float:
    """Within-batch diversity: mean BLEU-4 of each sequence against
    all the others as references. Lower means more diverse."""
    seqs = [list(s) for s in batch]
    if len(seqs) < 2:
        warnings.warn("self-BLEU needs at least 2 sequences, skipping batch", stacklevel=2)
        return None
    vals = [bleu4(seq, seqs[:i] + seqs[i + 1:]) for i, seq in enumerate(seqs)]
    return float(np.mean(vals))


def _similarity_matrix(pred_ids, target_ids, emb: EmbeddingMatrix) -> np.ndarray:
    pu = emb.vectors[pred_ids] / emb.norms[pred_ids, None]
    tu = emb.vectors[target_ids] / emb.norms[target_ids, None]
    sims = np.clip(pu @ tu.T, -1.0, 1.0)
    # identical tokens are a perfect match by definition, ulp noise aside
    same = np.asarray(pred_ids)[:, None] == np.asarray(target_ids)[None, :]
    sims[same] = 1.0
    return sims


def _exact_transport_similarity(sims: np.ndarray) -> float:
    """Maximum-similarity optimal transport with uniform token mass."""
    n, m = sims.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(-sims.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0.0, None), method="highs")
    if not res.success:
        raise RuntimeError("transport LP failed: %s" % res.message)
    return float(-res.fun)


def wmd_score(pred, target, emb: EmbeddingMatrix, exclude=(), exact: bool = False):
    """Embedding similarity of two token-id sequences, in [0, 1].

    Default is the relaxed word-mover score: every token is matched to
    its cosine-nearest counterpart, both directions averaged. With
    exact=True (sequences of at most 12 tokens) the constrained
    optimal-transport counterpart is solved instead; the relaxed score
    is an upper bound of it. Raw similarity s maps to (s + 1) / 2.
    Ids listed in `exclude` and ids without an embedding are dropped;
    returns None when either side has nothing left (score undefined).
    """
    drop = set(exclude) | emb.zero_rows
    p_ids = [int(i) for i in pred if int(i) not in drop]
    t_ids = [int(i) for i in target if int(i) not in drop]
    if not p_ids or not t_ids:
        return None
    if exact and (len(p_ids) > _EXACT_WMD_MAX or len(t_ids) > _EXACT_WMD_MAX):
        raise ValueError("exact transport is limited to %d tokens per side" % _EXACT_WMD_MAX)
    sims = _similarity_matrix(p_ids, t_ids, emb)
    if exact:
        raw = _exact_transport_similarity(sims)
    else:
        raw = 0.5 * (sims.max(axis=1).mean() + sims.max(axis=0).mean())
    return float((raw + 1.0) / 2.0)


def self_wmd(batch, emb: EmbeddingMatrix, exclude=()):
    """Within-batch mean pairwise WMD score; lower means more diverse."""
    seqs = list(batch)
    if len(seqs) < 2:
        warnings.warn("self-WMD needs at least 2 sequences, skipping batch", stacklevel=2)
        return None
    per_seq = []
    for i, seq in enumerate(seqs):
        vals = [wmd_score(seq, other, emb, exclude)
                for j, other in enumerate(seqs) if j != i]
        vals = [v for v in vals if v is not None]
        if vals:
            per_seq.append(float(np.mean(vals)))
    return float(np.mean(per_seq)) if per_seq else None


@dataclass(frozen=True)
class ToyChain:
    """A small explicit Markov chain: transitions plus its stationary
    marginal, the ground objects the KL diagnostic runs on."""

    trans: np.ndarray
    marginal: np.ndarray

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=np.float64)
        marg = np.asarray(self.marginal, dtype=np.float64)
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "marginal", marg)
        n = trans.shape[0]
        if trans.shape != (n, n) or marg.shape != (n,):
            raise ValueError("need an (n, n) transition matrix and an (n,) marginal")
        if np.any(trans < 0.0) or np.any(marg < 0.0):
            raise ValueError("probabilities must be non-negative")
        if np.abs(trans.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("transition rows must sum to 1")
        if abs(marg.sum() - 1.0) > 1e-9:
            raise ValueError("marginal must sum to 1")
        if np.abs(marg @ trans - marg).max() > 1e-8:
            raise ValueError("marginal is not stationary for these transitions")

    @classmethod
    def from_transitions(cls, trans) -> "ToyChain":
        """Solve pi @ trans = pi, sum(pi) = 1 for the marginal."""
        trans = np.asarray(trans, dtype=np.float64)
        n = trans.shape[0]
        a = trans.T - np.eye(n)
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        return cls(trans, np.linalg.solve(a, b))


def _kl(p, q) -> float:
    return float(rel_entr(p, q).sum())


def kl_decomposition(p_chain: ToyChain, q_chain: ToyChain,
                     epsilon: float, gamma: float) -> dict:
    """Five-term divergence between data chain P and model chain Q.

    marginal        KL between the stationary marginals
    ss_teacher      (1 - eps) * E_{h~Q} KL(P_row_h || Q_row_h)
    ss_model        eps       * E_{h~P} KL(P_row_h || Q_row_h)
    nnrs_teacher    (1 - gam) * E_{h~Q} KL(P_row_h || Q_row_h)
    nnrs_neighbor   gam       * E_{h~P} KL(P_row_h || Q_row_h)

    Every weighted term compares conditional next-token rows at the
    same history h, so the total is non-negative and vanishes exactly
    when P = Q. Requires strictly positive chains.
    """
    for name, v in (("epsilon", epsilon), ("gamma", gamma)):
        if not 0.0 <= v <= 1.0:
            raise ValueError("%s must be in [0, 1]" % name)
    if p_chain.trans.shape != q_chain.trans.shape:
        raise ValueError("chains must share an alphabet size")
    for chain in (p_chain, q_chain):
        if np.any(chain.trans <= 0.0) or np.any(chain.marginal <= 0.0):
            raise ValueError("chains must be strictly positive (smooth them first)")

    row_kl = np.array([_kl(p_chain.trans[h], q_chain.trans[h])
                       for h in range(p_chain.trans.shape[0])])
    under_q = float(q_chain.marginal @ row_kl)
    under_p = float(p_chain.marginal @ row_kl)
    terms = {
        "marginal": _kl(p_chain.marginal, q_chain.marginal),
        "ss_teacher": (1.0 - epsilon) * under_q,
        "ss_model": epsilon * under_p,
        "nnrs_teacher": (1.0 - gamma) * under_q,
        "nnrs_neighbor": gamma * under_p,
    }
    terms["total"] = float(sum(terms.values()))
    return terms


@dataclass(frozen=True)
class ScoreReport:
    metric: str
    split: str
    value: float
    config_id: str = ""


def reports_to_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "split", "value", "config_id"])
        for rep in reports:
            writer.writerow([rep.metric, rep.split, repr(float(rep.value)), rep.config_id])


def reports_from_csv(path):
    reports = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            reports.append(ScoreReport(row[0], row[1], float(row[2]), row[3]))
    return reports


def _greedy_continuations(model, inputs: np.ndarray, prefix_len: int) -> np.ndarray:
    """Teacher-force a prefix, then greedy-decode to the window end."""
    batch, width = inputs.shape
    state = model.zero_state(batch)
    log_probs = None
    for t in range(prefix_len):
        log_probs, state, _ = step(model, inputs[:, t], state)
    out = []
    for i in range(width - prefix_len + 1):
        nxt = log_probs.argmax(axis=1).astype(np.int64)
        out.append(nxt)
        if i + 1 < width - prefix_len + 1:
            log_probs, state, _ = step(model, nxt, state)
    return np.stack(out, axis=1)


def evaluate_model(model, split, emb: EmbeddingMatrix, mode: str,
                   prefix_len: int = None, split_name: str = "valid",
                   config_id: str = "", exclude=()):
    """Score a model on (input, target) windows.

    Each window is continued greedily after a teacher-forced prefix
    (default: half the window). quality mode scores the continuations
    against the true ones (BLEU-4, WMD); diversity mode scores them
    against each other (self-BLEU-4, self-WMD). Teacher-forced
    perplexity is always reported. Metrics left undefined on every
    window (empty WMD intersections, size-1 batches) are omitted
    rather than reported non-finite.
    """
    if mode not in ("diversity", "quality"):
        raise ValueError("mode must be 'diversity' or 'quality'")
    if not split:
        raise ValueError("empty split")

    reports = [ScoreReport("ppl", split_name, validate(model, split), config_id)]
    bleus, wmds, self_bleus, self_wmds = [], [], [], []
    for inputs, targets in split:
        width = inputs.shape[1]
        p = prefix_len if prefix_len is not None else max(1, width // 2)
        p = min(max(1, p), width)
        gen = _greedy_continuations(model, inputs, p)
        refs = targets[:, p - 1:]
        if mode == "quality":
            for b in range(inputs.shape[0]):
                bleus.append(bleu4(list(gen[b]), [list(refs[b])]))
                score = wmd_score(gen[b], refs[b], emb, exclude)
                if score is not None:
                    wmds.append(score)
        else:
            sb = self_bleu4([list(gen[b]) for b in range(gen.shape[0])])
            if sb is not None:
                self_bleus.append(sb)
            sw = self_wmd([gen[b] for b in range(gen.shape[0])], emb, exclude)
            if sw is not None:
                self_wmds.append(sw)

    def _add(metric, values):
        if values:
            reports.append(ScoreReport(metric, split_name, float(np.mean(values)), config_id))

    _add("bleu4", bleus)
    _add("wmd", wmds)
    _add("self_bleu4", self_bleus)
    _add("self_wmd", self_wmds)
    return reports

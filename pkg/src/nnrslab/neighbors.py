"""Top-k embedding-neighbor tables and the bigram-transition alternative.

For every vocabulary word the neighbor table stores the k most
cosine-similar other words, exact by brute force, plus a sampling
distribution over those k slots obtained by a temperature softmax of the
similarities: p(w'|w) = exp(cos(w,w')/tau) / sum_u exp(cos(u,w)/tau).
Low tau concentrates mass on the closest neighbor; high tau flattens
toward uniform. tau is kept inside [0.5, 10] so the distribution is
never degenerate in either direction.

The transition table is the replacement-sampling baseline: per word,
the top-k successors by corpus bigram count, renormalized.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .arrayio import load_arrays, save_arrays
from .embeddings import EmbeddingMatrix

TAU_MIN = 0.5
TAU_MAX = 10.0

_ROW_SUM_TOL = 1e-9


def clamp_tau(tau: float) -> float:
    return min(max(float(tau), TAU_MIN), TAU_MAX)


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def default_k(vocab_size: int) -> int:
    """Sample-efficient neighbor count: round(log2(|V|)), at least 1."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return max(1, round(np.log2(vocab_size)))


@dataclass(frozen=True)
class NeighborTable:
    """Per-word top-k cosine neighbors with a tau-softmax sampling row.

    ids[w] holds the k neighbor word ids (self excluded, similarity
    descending, ties to the smaller id), sims[w] the matching cosine
    similarities, probs[w] the sampling distribution at temperature
    `tau`. Words flagged at embedding time (zero rows) keep placeholder
    self rows and are listed in `flagged`; sampling them is a no-op.
    """

    k: int
    ids: np.ndarray
    sims: np.ndarray
    probs: np.ndarray
    tau: float
    flagged: frozenset[int]

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class TransitionTable:
    """Per-word top-k successors by bigram count, renormalized.

    Words never observed with a successor get a self-loop row with
    probability 1. Slots beyond the number of distinct successors are
    padded with the word itself at probability 0.
    """

    k: int
    ids: np.ndarray
    probs: np.ndarray
    flagged: frozenset[int] = frozenset()

    def __len__(self) -> int:
        return self.ids.shape[0]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def build_neighbor_table(emb: EmbeddingMatrix, k: int, tau: float = 1.0) -> NeighborTable:
    """Exact brute-force top-k cosine neighbors for every word.

    Only words with nonzero embedding rows are neighbor candidates;
    `k` must leave every valid word at least k candidates besides itself.
    """
    n = len(emb)
    valid = np.flatnonzero(emb.norms > 0.0)
    if k < 1 or k >= valid.size:
        raise ValueError(
            "k must satisfy 1 <= k < number of valid rows (%d), got %d" % (valid.size, k)
        )
    if not TAU_MIN <= tau <= TAU_MAX:
        raise ValueError("tau must be in [%g, %g], got %g" % (TAU_MIN, TAU_MAX, tau))

    unit = emb.vectors[valid] / emb.norms[valid, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)

    ids = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, k))
    sims = np.zeros((n, k), dtype=np.float64)
    for row, wid in enumerate(valid):
        cand = np.delete(valid, row)
        scores = np.delete(sim[row], row)
        # lexsort: primary key similarity descending, ties to smaller id
        order = np.lexsort((cand, -scores))[:k]
        ids[wid] = cand[order]
        sims[wid] = scores[order]

    probs = _softmax_rows(sims / tau)
    return NeighborTable(
        k=k, ids=ids, sims=sims, probs=probs, tau=float(tau),
        flagged=emb.zero_rows,
    )


def renormalize(table: NeighborTable, tau: float) -> NeighborTable:
    """New table whose probs are softmax(sims / tau); ids/sims shared."""
    if not TAU_MIN <= tau <= TAU_MAX:
        raise ValueError("tau must be in [%g, %g], got %g" % (TAU_MIN, TAU_MAX, tau))
    return replace(table, probs=_softmax_rows(table.sims / tau), tau=float(tau))


def sample_neighbor(table, word: int, rng: np.random.Generator) -> int:
    """Draw one neighbor id for `word` from its probability row.

    Flagged (zero-embedding) words return themselves, a no-op
    replacement. Works for NeighborTable and TransitionTable alike.
    """
    if word in table.flagged:
        return int(word)
    row = table.probs[word]
    cdf = np.cumsum(row)
    slot = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(table.ids[word, min(slot, table.k - 1)])


def centroid(table: NeighborTable, emb: EmbeddingMatrix, word: int,
             scale_by_k: bool = True) -> np.ndarray:
    """Probability-weighted neighbor average (1/k) * sum_i p_i * e_i.

    The leading 1/k makes this a scaled rather than convex combination;
    pass scale_by_k=False for the plain expectation sum_i p_i * e_i.
    """
    vec = table.probs[word] @ emb.vectors[table.ids[word]]
    return vec / table.k if scale_by_k else vec


def build_transition_table(corpus_ids, vocab, k: int) -> TransitionTable:
    """Top-k bigram successors per word from a training id stream."""
    corpus_ids = np.asarray(corpus_ids, dtype=np.int64)
    if corpus_ids.size == 0:
        raise ValueError("empty corpus")
    if k < 1:
        raise ValueError("k must be >= 1, got %d" % k)
    n = len(vocab)
    successors: list[dict[int, int]] = [dict() for _ in range(n)]
    for prev, nxt in zip(corpus_ids[:-1], corpus_ids[1:]):
        row = successors[prev]
        row[int(nxt)] = row.get(int(nxt), 0) + 1

    ids = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, k))
    probs = np.zeros((n, k), dtype=np.float64)
    for wid, row in enumerate(successors):
        if not row:
            probs[wid, 0] = 1.0  # self-loop fallback
            continue
        top = sorted(row.items(), key=lambda it: (-it[1], it[0]))[:k]
        total = sum(c for _, c in top)
        for slot, (succ, count) in enumerate(top):
            ids[wid, slot] = succ
            probs[wid, slot] = count / total
    return TransitionTable(k=k, ids=ids, probs=probs)


def _check_row_sums(probs: np.ndarray, what: str) -> None:
    sums = probs.sum(axis=1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > _ROW_SUM_TOL:
        raise ValueError("%s row sums off by %.3g (tolerance %g)" % (what, worst, _ROW_SUM_TOL))


def save_table(path, table) -> None:
    """Binary (zip-of-npy) serialization for either table kind."""
    fields = dict(ids=table.ids, probs=table.probs, k=np.int64(table.k),
                  flagged=np.array(sorted(table.flagged), dtype=np.int64))
    if isinstance(table, NeighborTable):
        fields.update(sims=table.sims, tau=np.float64(table.tau))
    save_arrays(path, **fields)


def load_table(path):
    """Load a table saved by :func:`save_table`, validating row sums."""
    data = load_arrays(path)
    _check_row_sums(data["probs"], "table")
    flagged = frozenset(int(i) for i in data["flagged"])
    if "sims" in data:
        return NeighborTable(
            k=int(data["k"]), ids=data["ids"], sims=data["sims"],
            probs=data["probs"], tau=float(data["tau"]), flagged=flagged,
        )
    return TransitionTable(k=int(data["k"]), ids=data["ids"], probs=data["probs"],
                           flagged=flagged)


def save_table_csv(path, table) -> None:
    """Inspection CSV: one "word_id,neighbor_id,sim,prob" row per slot.

    Transition tables have no similarity column and omit it.
    """
    has_sims = isinstance(table, NeighborTable)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if has_sims:
            writer.writerow(["word_id", "neighbor_id", "sim", "prob"])
        else:
            writer.writerow(["word_id", "neighbor_id", "prob"])
        for wid in range(len(table)):
            for slot in range(table.k):
                if has_sims:
                    writer.writerow([wid, table.ids[wid, slot],
                                     repr(float(table.sims[wid, slot])),
                                     repr(float(table.probs[wid, slot]))])
                else:
                    writer.writerow([wid, table.ids[wid, slot],
                                     repr(float(table.probs[wid, slot]))])


def load_table_csv(path, tau: float = 1.0):
    """Rebuild a table from its inspection CSV, validating row sums.

    The CSV does not carry tau; pass the temperature the probs were
    written at (default 1.0).
    """
    rows: dict[int, list[tuple[int, float, float | None]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_sims = "sim" in header
        for rec in reader:
            wid = int(rec[0])
            if has_sims:
                rows.setdefault(wid, []).append((int(rec[1]), float(rec[3]), float(rec[2])))
            else:
                rows.setdefault(wid, []).append((int(rec[1]), float(rec[2]), None))
    n = max(rows) + 1
    k = len(rows[0])
    ids = np.zeros((n, k), dtype=np.int64)
    probs = np.zeros((n, k), dtype=np.float64)
    sims = np.zeros((n, k), dtype=np.float64)
    for wid, slots in rows.items():
        for s, (nid, prob, sim) in enumerate(slots):
            ids[wid, s] = nid
            probs[wid, s] = prob
            if sim is not None:
                sims[wid, s] = sim
    _check_row_sums(probs, "table CSV")
    if has_sims:
        return NeighborTable(k=k, ids=ids, sims=sims, probs=probs, tau=float(tau),
                             flagged=frozenset())
    return TransitionTable(k=k, ids=ids, probs=probs)

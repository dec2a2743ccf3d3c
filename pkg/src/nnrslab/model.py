"""Two-layer LSTM language model in plain numpy (float64).

Parameters live in a flat name -> array dict so optimizer,
serialization, and gradient checks can treat the model as one
parameter set:

    embed              (|V|, d)   input lookup, trainable
    lstm1_Wx, lstm1_Wh, lstm1_b   layer 1 fused gate weights
    lstm2_Wx, lstm2_Wh, lstm2_b   layer 2 fused gate weights
    W_out, b_out       (H, |V|), (|V|,) softmax projection

Fused gate blocks are ordered [input, forget, cell, output] along the
4H axis. Forward accepts either token ids (embedding lookup) or raw
(B, d) vectors per step, the latter carrying centroid-style inputs;
backward then reports the gradient wrt those vectors.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp


@dataclass
class LstmLm:
    vocab_size: int
    dim: int
    hidden: int
    params: dict

    @classmethod
    def init(cls, vocab_size: int, dim: int, hidden: int,
             rng: np.random.Generator, embed=None) -> "LstmLm":
        """Uniform [-1/sqrt(H), 1/sqrt(H)] weights, +1 forget bias.

        Draw order is fixed (embed unless given, then lstm1, lstm2,
        projection) so runs at equal seeds are reproducible.
        """
        s = 1.0 / np.sqrt(hidden)
        h4 = 4 * hidden

        def u(*shape):
            return rng.uniform(-s, s, shape)

        if embed is None:
            embed = u(vocab_size, dim)
        else:
            embed = np.array(embed, dtype=np.float64)
            if embed.shape != (vocab_size, dim):
                raise ValueError(
                    "embed shape %s does not match (%d, %d)" % (embed.shape, vocab_size, dim)
                )
        params = {
            "embed": embed,
            "lstm1_Wx": u(dim, h4), "lstm1_Wh": u(hidden, h4), "lstm1_b": np.zeros(h4),
            "lstm2_Wx": u(hidden, h4), "lstm2_Wh": u(hidden, h4), "lstm2_b": np.zeros(h4),
            "W_out": u(hidden, vocab_size), "b_out": np.zeros(vocab_size),
        }
        for key in ("lstm1_b", "lstm2_b"):
            params[key][hidden:2 * hidden] = 1.0  # forget gate bias
        return cls(vocab_size, dim, hidden, params)

    @classmethod
    def zeros(cls, vocab_size: int, dim: int, hidden: int) -> "LstmLm":
        """All-zero parameters: the output is uniform by symmetry."""
        h4 = 4 * hidden
        params = {
            "embed": np.zeros((vocab_size, dim)),
            "lstm1_Wx": np.zeros((dim, h4)), "lstm1_Wh": np.zeros((hidden, h4)),
            "lstm1_b": np.zeros(h4),
            "lstm2_Wx": np.zeros((hidden, h4)), "lstm2_Wh": np.zeros((hidden, h4)),
            "lstm2_b": np.zeros(h4),
            "W_out": np.zeros((hidden, vocab_size)), "b_out": np.zeros(vocab_size),
        }
        return cls(vocab_size, dim, hidden, params)

    def zero_state(self, batch_size: int):
        return [(np.zeros((batch_size, self.hidden)), np.zeros((batch_size, self.hidden)))
                for _ in range(2)]


def _lookup(model: LstmLm, x):
    """Resolve a step input to (vectors, ids-or-None)."""
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer):
        ids = x.reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
            raise ValueError("token id out of range [0, %d)" % model.vocab_size)
        return model.params["embed"][ids], ids
    vec = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if vec.shape[1] != model.dim:
        raise ValueError("input vector dim %d != %d" % (vec.shape[1], model.dim))
    return vec, None


def step(model: LstmLm, x, state):
    """One timestep. Returns (log_probs (B,|V|), new_state, cache)."""
    p = model.params
    h = model.hidden
    xvec, ids = _lookup(model, x)
    cache = {"x": xvec, "ids": ids, "layers": []}
    inp = xvec
    new_state = []
    for layer, (h_prev, c_prev) in zip((1, 2), state):
        z = inp @ p["lstm%d_Wx" % layer] + h_prev @ p["lstm%d_Wh" % layer] + p["lstm%d_b" % layer]
        i = expit(z[:, :h])
        f = expit(z[:, h:2 * h])
        g = np.tanh(z[:, 2 * h:3 * h])
        o = expit(z[:, 3 * h:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        hh = o * tc
        cache["layers"].append(
            {"inp": inp, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "g": g, "o": o, "c": c, "tc": tc}
        )
        new_state.append((hh, c))
        inp = hh
    logits = inp @ p["W_out"] + p["b_out"]
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    cache["top"] = inp
    cache["log_probs"] = log_probs
    return log_probs, new_state, cache


class ForwardCache:
    """Everything backward needs: per-step caches plus window shape."""

    def __init__(self, steps, final_state, batch_size):
        self.steps = steps
        self.final_state = final_state
        self.batch_size = batch_size
        self.input_grads = None  # filled by backward

    def __len__(self):
        return len(self.steps)

    def log_probs(self) -> np.ndarray:
        return np.stack([s["log_probs"] for s in self.steps])


def _as_step_inputs(inputs):
    """Normalize forward input to (list of per-step arrays, squeeze?)."""
    if isinstance(inputs, (list, tuple)):
        return list(inputs), False
    arr = np.asarray(inputs)
    if arr.ndim == 1:  # single sequence of ids
        return [arr[t:t + 1] for t in range(arr.shape[0])], True
    if arr.ndim == 2 and np.issubdtype(arr.dtype, np.integer):  # (B, T) ids
        return [arr[:, t] for t in range(arr.shape[1])], False
    raise ValueError("inputs must be a 1-D/2-D id array or a per-step list")


def forward_cached(model: LstmLm, inputs, init_state=None) -> ForwardCache:
    steps_in, _ = _as_step_inputs(inputs)
    if not steps_in:
        raise ValueError("need at least one timestep")
    first, _ = _lookup(model, steps_in[0])
    state = model.zero_state(first.shape[0]) if init_state is None else init_state
    caches = []
    for x in steps_in:
        _, state, cache = step(model, x, state)
        caches.append(cache)
    return ForwardCache(caches, state, first.shape[0])


def forward(model: LstmLm, inputs, init_state=None):
    """Probability distributions per step: (T, |V|) for a single
    sequence, (T, B, |V|) for a batch. Also returns the final state."""
    steps_in, squeeze = _as_step_inputs(inputs)
    cache = forward_cached(model, steps_in, init_state)
    probs = np.exp(cache.log_probs())
    if squeeze:
        probs = probs[:, 0, :]
    return probs, cache.final_state


def loss(distributions, targets) -> float:
    """Mean negative log-likelihood; perplexity is exp of this.

    Accepts (T, |V|) with (T,) targets or (T, B, |V|) with (B, T)
    targets. Probabilities are floored at float tiny before the log so
    the result is always finite.
    """
    dists = np.asarray(distributions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if dists.ndim == 2:
        if targets.shape != (dists.shape[0],):
            raise ValueError("targets shape %s does not match %d steps"
                             % (targets.shape, dists.shape[0]))
        picked = dists[np.arange(dists.shape[0]), targets]
    elif dists.ndim == 3:
        t_len, b = dists.shape[0], dists.shape[1]
        if targets.shape != (b, t_len):
            raise ValueError("targets shape %s does not match (B=%d, T=%d)"
                             % (targets.shape, b, t_len))
        picked = np.take_along_axis(
            dists, targets.T[:, :, None], axis=2
        )[:, :, 0]
    else:
        raise ValueError("distributions must be 2-D or 3-D")
    return float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())


def loss_from_cache(cache: ForwardCache, targets) -> float:
    """Mean NLL straight from cached log-probs (no exp/log round trip)."""
    targets = np.asarray(targets, dtype=np.int64)
    total = 0.0
    for t, sc in enumerate(cache.steps):
        lp = sc["log_probs"]
        total += lp[np.arange(lp.shape[0]), targets[:, t]].sum()
    return float(-total / targets.size)


def backward(model: LstmLm, cache: ForwardCache, targets) -> dict:
    """Exact BPTT gradients of the mean NLL wrt every parameter.

    Truncation boundary: the window's initial state is a constant.
    Gradients wrt the raw input vectors land in cache.input_grads
    (T, B, d); steps fed by ids additionally scatter that gradient
    into the embedding rows.
    """
    p = model.params
    h = model.hidden
    targets = np.asarray(targets, dtype=np.int64)
    t_len = len(cache.steps)
    b = cache.batch_size
    n = float(t_len * b)

    grads = {key: np.zeros_like(val) for key, val in p.items()}
    input_grads = np.zeros((t_len, b, model.dim))
    # carried (dh, dc) per layer, from the later timestep
    carry = [(np.zeros((b, h)), np.zeros((b, h))) for _ in range(2)]

    for t in range(t_len - 1, -1, -1):
        sc = cache.steps[t]
        dlogits = np.exp(sc["log_probs"])
        dlogits[np.arange(b), targets[:, t]] -= 1.0
        dlogits /= n
        grads["W_out"] += sc["top"].T @ dlogits
        grads["b_out"] += dlogits.sum(axis=0)
        dh_top = dlogits @ p["W_out"].T

        dinp = dh_top
        for layer in (2, 1):
            lc = sc["layers"][layer - 1]
            dh_carry, dc_carry = carry[layer - 1]
            dh = dinp + dh_carry
            i, f, g, o, tc = lc["i"], lc["f"], lc["g"], lc["o"], lc["tc"]
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_carry
            df = dc * lc["c_prev"]
            di = dc * g
            dg = dc * i
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f),
                 dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1,
            )
            grads["lstm%d_Wx" % layer] += lc["inp"].T @ dz
            grads["lstm%d_Wh" % layer] += lc["h_prev"].T @ dz
            grads["lstm%d_b" % layer] += dz.sum(axis=0)
            carry[layer - 1] = (dz @ p["lstm%d_Wh" % layer].T, dc * f)
            dinp = dz @ p["lstm%d_Wx" % layer].T

        input_grads[t] = dinp
        if sc["ids"] is not None:
            np.add.at(grads["embed"], sc["ids"], dinp)

    cache.input_grads = input_grads
    return grads


def grad_global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def sgd_step(model: LstmLm, grads: dict, lr: float, clip: float,
             momentum: float = 0.0, velocity: dict = None) -> LstmLm:
    """Global-norm clip then theta <- theta - lr * grad, in place.

    Non-finite gradients abort the step before any parameter moves.
    Optional heavy-ball momentum: velocity <- m * velocity + grad.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient in %r, step aborted" % key)
    scale = 1.0
    if clip:
        norm = grad_global_norm(grads)
        if norm > clip:
            scale = clip / norm
    for key, g in grads.items():
        upd = g * scale
        if momentum > 0.0:
            velocity[key] = momentum * velocity[key] + upd
            upd = velocity[key]
        model.params[key] -= lr * upd
    return model


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    """base_lr * (1 + cos(pi * epoch / total)) / 2."""
    if total < 1:
        raise ValueError("total must be >= 1")
    return float(base_lr * (1.0 + np.cos(np.pi * epoch / total)) / 2.0)


def greedy_or_sample_predict(distribution, sample: bool = False,
                             rng: np.random.Generator = None) -> int:
    """Next-token choice from one distribution: argmax (ties to the
    smaller id) or a categorical draw when sample=True."""
    dist = np.asarray(distribution, dtype=np.float64)
    if dist.ndim != 1 or dist.size == 0:
        raise ValueError("distribution must be a 1-D vector")
    if not sample:
        return int(np.argmax(dist))
    if rng is None:
        raise ValueError("rng is required for sampling mode")
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, dist.size - 1)

"""LSTM language model: forward, loss, BPTT gradients, SGD."""

import numpy as np
import pytest

from nnrslab.model import (
    LstmLm,
    backward,
    cosine_lr,
    forward,
    forward_cached,
    grad_global_norm,
    greedy_or_sample_predict,
    loss,
    loss_from_cache,
    sgd_step,
    step,
)
from synth import finite_difference_grads, max_rel_error


def _small_model(rng, vocab=6, dim=3, hidden=4):
    return LstmLm.init(vocab, dim, hidden, rng)


class TestInit:
    def test_shapes_and_forget_bias(self, rng):
        model = LstmLm.init(7, 3, 5, rng)
        p = model.params
        assert p["embed"].shape == (7, 3)
        assert p["lstm1_Wx"].shape == (3, 20) and p["lstm2_Wx"].shape == (5, 20)
        assert p["W_out"].shape == (5, 7) and p["b_out"].shape == (7,)
        for key in ("lstm1_b", "lstm2_b"):
            np.testing.assert_array_equal(p[key][5:10], 1.0)
            np.testing.assert_array_equal(p[key][:5], 0.0)

    def test_bounds(self, rng):
        model = LstmLm.init(10, 4, 16, rng)
        s = 1.0 / 4.0
        for key in ("embed", "lstm1_Wx", "W_out"):
            assert np.abs(model.params[key]).max() <= s

    def test_pretrained_embed(self, rng):
        vecs = rng.normal(size=(5, 3))
        model = LstmLm.init(5, 3, 4, rng, embed=vecs)
        np.testing.assert_array_equal(model.params["embed"], vecs)
        with pytest.raises(ValueError):
            LstmLm.init(5, 3, 4, rng, embed=np.zeros((4, 3)))

    def test_same_seed_same_params(self):
        a = LstmLm.init(6, 3, 4, np.random.default_rng(5))
        b = LstmLm.init(6, 3, 4, np.random.default_rng(5))
        for key in a.params:
            np.testing.assert_array_equal(a.params[key], b.params[key])


class TestForward:
    def test_distributions_normalized(self, rng):
        model = _small_model(rng)
        probs, _ = forward(model, np.array([0, 1, 2, 3]))
        assert probs.shape == (4, 6)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_model_uniform(self):
        model = LstmLm.zeros(8, 3, 4)
        probs, _ = forward(model, np.array([0, 1, 2]))
        np.testing.assert_allclose(probs, 1.0 / 8.0, atol=1e-12)

    def test_deterministic(self, rng):
        model = _small_model(rng)
        ids = np.array([[1, 2, 3], [4, 5, 0]])
        a, _ = forward(model, ids)
        b, _ = forward(model, ids)
        np.testing.assert_array_equal(a, b)

    def test_id_out_of_range(self, rng):
        model = _small_model(rng)
        with pytest.raises(ValueError):
            forward(model, np.array([0, 99]))

    def test_vector_inputs(self, rng):
        # centroid-style raw vectors in place of ids
        model = _small_model(rng)
        vecs = [rng.normal(size=(2, 3)) for _ in range(3)]
        cache = forward_cached(model, vecs)
        assert len(cache) == 3 and cache.steps[0]["ids"] is None
        with pytest.raises(ValueError):
            forward_cached(model, [rng.normal(size=(2, 7))])

    def test_state_carries(self, rng):
        model = _small_model(rng)
        ids = np.array([[1, 2, 3, 4]])
        whole, _ = forward(model, ids)
        first, state = forward(model, ids[:, :2])
        second, _ = forward(model, ids[:, 2:], init_state=state)
        np.testing.assert_allclose(np.concatenate([first, second]), whole, atol=1e-12)


class TestLoss:
    def test_uniform_bound(self):
        dists = np.full((3, 10), 0.1)
        targets = np.array([0, 5, 9])
        assert loss(dists, targets) == pytest.approx(np.log(10))

    def test_one_hot_zero(self):
        dists = np.eye(4)[[1, 2]]
        assert loss(dists, np.array([1, 2])) == pytest.approx(0.0)

    def test_hand_two_step(self):
        dists = np.array([[0.5, 0.5], [0.25, 0.75]])
        got = loss(dists, np.array([0, 0]))
        assert got == pytest.approx(-(np.log(0.5) + np.log(0.25)) / 2, abs=1e-4)
        assert abs(got - 1.0397) < 1e-4

    def test_zero_probability_guarded(self):
        dists = np.array([[1.0, 0.0]])
        assert np.isfinite(loss(dists, np.array([1])))

    def test_batched_matches_cache(self, rng):
        model = _small_model(rng)
        inputs = rng.integers(0, 6, size=(3, 5))
        targets = rng.integers(0, 6, size=(3, 5))
        cache = forward_cached(model, inputs)
        probs = np.exp(cache.log_probs())
        assert loss(probs, targets) == pytest.approx(loss_from_cache(cache, targets))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.full((3, 4), 0.25), np.array([0, 1]))


class TestBackward:
    def test_finite_differences_single_instance(self, rng):
        model = _small_model(rng, vocab=6, dim=3, hidden=4)
        inputs = rng.integers(0, 6, size=(2, 4))
        targets = rng.integers(0, 6, size=(2, 4))
        cache = forward_cached(model, inputs)
        analytic = backward(model, cache, targets)
        fd = finite_difference_grads(model, inputs, targets)
        assert max_rel_error(analytic, fd) < 1e-4

    def test_untouched_embedding_row_zero_grad(self, rng):
        model = _small_model(rng)
        inputs = np.array([[0, 1, 0, 1]])
        targets = np.array([[1, 0, 1, 0]])
        cache = forward_cached(model, inputs)
        grads = backward(model, cache, targets)
        np.testing.assert_array_equal(grads["embed"][3], 0.0)
        np.testing.assert_array_equal(grads["embed"][5], 0.0)
        assert np.any(grads["embed"][0] != 0.0)

    def test_duplicated_batch_same_mean_grads(self, rng):
        # the loss is a mean, so replicating every sequence changes nothing
        model = _small_model(rng)
        one = rng.integers(0, 6, size=(1, 5))
        tgt = rng.integers(0, 6, size=(1, 5))
        g1 = backward(model, forward_cached(model, one), tgt)
        two = np.repeat(one, 2, axis=0)
        g2 = backward(model, forward_cached(model, two), np.repeat(tgt, 2, axis=0))
        for key in g1:
            np.testing.assert_allclose(g2[key], g1[key], atol=1e-12)

    def test_input_grads_shape(self, rng):
        model = _small_model(rng)
        inputs = rng.integers(0, 6, size=(2, 3))
        cache = forward_cached(model, inputs)
        backward(model, cache, rng.integers(0, 6, size=(2, 3)))
        assert cache.input_grads.shape == (3, 2, 3)


class TestSgdStep:
    def test_zero_grads_noop(self, rng):
        model = _small_model(rng)
        before = {k: v.copy() for k, v in model.params.items()}
        sgd_step(model, {k: np.zeros_like(v) for k, v in before.items()},
                 lr=0.5, clip=5.0)
        for key in before:
            np.testing.assert_array_equal(model.params[key], before[key])

    def test_plain_update(self):
        model = LstmLm.zeros(2, 1, 1)
        model.params["b_out"][:] = 1.0
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["b_out"][:] = 2.0
        sgd_step(model, grads, lr=0.1, clip=0.0)
        np.testing.assert_allclose(model.params["b_out"], 0.8)

    def test_clip_scales_global_norm(self, rng):
        model = _small_model(rng)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
        norm = grad_global_norm(grads)
        assert norm > 5.0
        lr = 0.3
        sgd_step(model, grads, lr=lr, clip=5.0)
        delta = {k: before[k] - model.params[k] for k in before}
        assert grad_global_norm(delta) == pytest.approx(5.0 * lr, abs=1e-9)

    def test_non_finite_aborts_untouched(self, rng):
        model = _small_model(rng)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["W_out"][0, 0] = np.nan
        with pytest.raises(ValueError):
            sgd_step(model, grads, lr=0.1, clip=5.0)
        for key in before:
            np.testing.assert_array_equal(model.params[key], before[key])

    def test_momentum_accumulates(self):
        model = LstmLm.zeros(2, 1, 1)
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["b_out"][:] = 1.0
        velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
        sgd_step(model, grads, lr=1.0, clip=0.0, momentum=0.5, velocity=velocity)
        sgd_step(model, grads, lr=1.0, clip=0.0, momentum=0.5, velocity=velocity)
        # steps: v=1 then v=1.5 -> total displacement 2.5
        np.testing.assert_allclose(model.params["b_out"], -2.5)

    def test_lr_positive(self, rng):
        model = _small_model(rng)
        with pytest.raises(ValueError):
            sgd_step(model, {k: np.zeros_like(v) for k, v in model.params.items()},
                     lr=0.0, clip=1.0)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(2.0, 0, 10) == pytest.approx(2.0)
        assert cosine_lr(2.0, 10, 10) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(2.0, 5, 10) == pytest.approx(1.0)

    def test_total_bound(self):
        with pytest.raises(ValueError):
            cosine_lr(1.0, 0, 0)


class TestPredict:
    def test_one_hot_both_modes(self, rng):
        dist = np.zeros(5)
        dist[3] = 1.0
        assert greedy_or_sample_predict(dist) == 3
        assert greedy_or_sample_predict(dist, sample=True, rng=rng) == 3

    def test_uniform_tie_rule(self):
        assert greedy_or_sample_predict(np.full(4, 0.25)) == 0

    def test_sampling_frequencies(self, rng):
        dist = np.array([0.7, 0.3])
        draws = np.array([greedy_or_sample_predict(dist, sample=True, rng=rng)
                          for _ in range(100_000)])
        assert abs(np.mean(draws == 0) - 0.7) < 0.01

    def test_sampling_needs_rng(self):
        with pytest.raises(ValueError):
            greedy_or_sample_predict(np.array([1.0]), sample=True)


class TestOverfitSanity:
    def test_memorizes_five_sentences(self, rng):
        # 200 SGD steps on one tiny batch must push train perplexity < 1.5
        sentences = "the cat sat . a dog ran . birds fly high . fish swim deep . suns set late ."
        words = sentences.split()
        vocab = sorted(set(words))
        ids = np.array([vocab.index(w) for w in words], dtype=np.int64)
        inputs = ids[:-1][None, :]
        targets = ids[1:][None, :]
        model = LstmLm.init(len(vocab), 8, 24, rng)
        nll = None
        for _ in range(200):
            cache = forward_cached(model, inputs)
            nll = loss_from_cache(cache, targets)
            grads = backward(model, cache, targets)
            sgd_step(model, grads, lr=3.0, clip=5.0)
        assert np.exp(nll) < 1.5

    def test_step_outputs_stay_normalized(self, rng):
        model = _small_model(rng)
        state = model.zero_state(2)
        for t in range(4):
            log_probs, state, _ = step(model, np.array([t % 6, (t + 1) % 6]), state)
            np.testing.assert_allclose(np.exp(log_probs).sum(axis=1), 1.0, atol=1e-9)

import math

import numpy as np
import pytest

from conftest import random_set
from fagg import trainer
from fagg.attention import Mode, forward, significance
from fagg.core import avg_pool, l2_normalize
from fagg.grad import GradientBundle
from fagg.synth import SynthConfig, generate
from fagg.trainer import TrainConfig, TrainingDiverged, finetune, init_zero, train


def corpus(**kw):
    base = dict(dim=8, num_identities=4, sets_per_identity=6, frames_min=2, frames_max=6, seed=11)
    base.update(kw)
    return generate(SynthConfig(**base))


def cfg(**kw):
    base = dict(epochs=2, batch_size=5, learning_rate=0.05, frames_min=2, frames_max=5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestInit:
    def test_zero_init_is_average_pooling(self, rng):
        for mode in Mode:
            params, _ = init_zero(6, 3, mode=mode)
            s = random_set(rng, 5, 6)
            np.testing.assert_allclose(forward(s, params), l2_normalize(avg_pool(s)), atol=1e-9)

    def test_head_seeded(self):
        _, a = init_zero(5, 4, seed=9)
        _, b = init_zero(5, 4, seed=9)
        np.testing.assert_array_equal(a.class_weights, b.class_weights)
        np.testing.assert_allclose(np.linalg.norm(a.class_weights, axis=1), 1.0, atol=1e-12)

    def test_one_dimension(self, rng):
        params, _ = init_zero(1, 2)
        t = forward(random_set(rng, 3, 1, unit=False), params)
        assert abs(abs(t[0]) - 1.0) < 1e-15

    def test_fresh_checkpoint_still_average(self, rng):
        c = corpus()
        ck = trainer.fresh_checkpoint(c, cfg())
        assert np.any(ck.params.q1 != 0)
        s = c.sets[0]
        np.testing.assert_allclose(forward(s, ck.params), l2_normalize(avg_pool(s)), atol=1e-9)

    def test_invalid(self):
        with pytest.raises(ValueError):
            init_zero(0, 2)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)


class TestTrain:
    def test_zero_learning_rate_changes_nothing(self):
        c = corpus()
        start = trainer.fresh_checkpoint(c, cfg())
        res = train(c, cfg(learning_rate=0.0, epochs=3))
        for name, arr in start.params.arrays().items():
            np.testing.assert_array_equal(getattr(res.checkpoint.params, name), arr)
        np.testing.assert_array_equal(res.checkpoint.head.class_weights, start.head.class_weights)

    def test_loss_drops_on_separated_pair_of_identities(self):
        c = generate(SynthConfig(dim=8, num_identities=2, sets_per_identity=20, noise_sigma=0.05,
                                 degrade_fraction=0.0, seed=2))
        res = train(c, cfg(epochs=1, batch_size=4))
        losses = [loss for _, _, loss in res.history]
        half = len(losses) // 2
        assert np.mean(losses[half:]) < np.mean(losses[:half])

    def test_deterministic(self):
        c = corpus()
        a, b = train(c, cfg()), train(c, cfg())
        assert a.history == b.history
        for name in ("q1", "b1", "q2", "b2"):
            np.testing.assert_array_equal(getattr(a.checkpoint.params, name), getattr(b.checkpoint.params, name))

    def test_resume_is_bit_identical(self):
        c = corpus()
        full = train(c, cfg(epochs=4))
        half = train(c, cfg(epochs=2))
        rest = train(c, cfg(epochs=4), resume=half.checkpoint)
        assert half.history + rest.history == full.history
        np.testing.assert_array_equal(rest.checkpoint.params.q2, full.checkpoint.params.q2)
        assert rest.checkpoint.epoch == 4

    def test_head_rows_stay_unit(self):
        res = train(corpus(), cfg(learning_rate=0.5))
        np.testing.assert_allclose(np.linalg.norm(res.checkpoint.head.class_weights, axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("mode", list(Mode))
    def test_frame_level_keeps_rows_tied(self, mode):
        res = train(corpus(), cfg(mode=mode, frame_level=True))
        p = res.checkpoint.params
        if mode is Mode.LINEAR:
            assert np.all(p.q1 == p.q1[0])
            assert np.any(p.q1 != 0)
        else:
            assert np.all(p.q2 == p.q2[0]) and np.all(p.b2 == p.b2[0])
            assert np.any(p.q2 != 0)
        sig = significance(corpus().sets[0], p)
        np.testing.assert_allclose(sig, np.tile(sig[0], (sig.shape[0], 1)), atol=1e-12)

    def test_linear_mode_trains_q1_only(self):
        res = train(corpus(), cfg(mode=Mode.LINEAR))
        p = res.checkpoint.params
        assert np.any(p.q1 != 0)
        assert not (p.b1.any() or p.q2.any() or p.b2.any())

    def test_divergence_guard(self, monkeypatch):
        def bad_backward(s, p, head, label):
            m = p.dim
            z = np.zeros((m, m))
            return GradientBundle(z, np.zeros(m), z, np.zeros(m), np.zeros_like(head.class_weights), math.nan)

        monkeypatch.setattr(trainer, "backward", bad_backward)
        with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
            train(corpus(), cfg())

    def test_label_out_of_range(self):
        c = corpus()
        ck = trainer.fresh_checkpoint(corpus(num_identities=2), cfg())
        with pytest.raises(ValueError):
            train(c, cfg(), resume=ck)

    def test_sample_frames_bounds(self, rng):
        s = random_set(rng, 3, 4)
        gen = np.random.default_rng(0)
        for _ in range(20):
            t = trainer.sample_frames(s, cfg(frames_min=2, frames_max=6), gen)
            assert 2 <= t.num_frames <= 6
            assert all(any(np.array_equal(f, g) for g in s.frames) for f in t.frames)


class TestFinetune:
    def test_zero_epochs_keeps_params(self):
        c = corpus()
        ck = train(c, cfg()).checkpoint
        out = finetune(ck, c, cfg(epochs=0)).checkpoint
        for name, arr in ck.params.arrays().items():
            np.testing.assert_array_equal(getattr(out.params, name), arr)

    def test_same_corpus_continues_trajectory(self):
        c = corpus()
        first = train(c, cfg(epochs=2))
        more = finetune(first.checkpoint, c, cfg(epochs=2))
        assert first.history + more.history == train(c, cfg(epochs=4)).history

    def test_new_class_count(self):
        ck = train(corpus(), cfg()).checkpoint
        other = corpus(num_identities=7, seed=12)
        out = finetune(ck, other, cfg(epochs=1)).checkpoint
        assert out.head.class_weights.shape == (7, 8)
        assert all(np.all(np.isfinite(a)) for a in out.params.arrays().values())

    def test_dimension_mismatch(self):
        ck = train(corpus(), cfg()).checkpoint
        with pytest.raises(ValueError):
            finetune(ck, corpus(dim=5), cfg())

import math

import numpy as np
import pytest

from ctcadapters.errors import ConfigError, NumericalAbortError
from ctcadapters.model import AdapterConfig, ModelConfig, build_model
from ctcadapters.synthdata import SynthSpec, Utterance, generate
from ctcadapters.train import (
    Batch,
    Schedule,
    TrainConfig,
    Trainer,
    evaluate,
    lr_at,
    run_training,
)
from ctcadapters.transfer import TransferPolicy, apply_policy


def toy_model(seed=0, layers=2, adapters=False):
    mc = ModelConfig(
        num_layers=layers, d_model=8, num_heads=2, d_ffn=16, vocab_size=3, max_seq_len=64
    )
    return build_model(mc, AdapterConfig(2) if adapters else None, seed=seed)


def toy_data(n=16, seed=0, sigma=0.05):
    return generate(SynthSpec(vocab_size=3, d_in=8, num_utterances=n, seed=seed, noise_sigma=sigma))


class TestSchedules:
    def test_bi_stage_closed_form(self):
        # the adapter recipe scale: 10k steps peaking at 5e-4
        sched = Schedule("bi_stage", 5e-4, 10000, warmup_frac=0.1)
        assert lr_at(sched, 0) == 0.0
        assert lr_at(sched, 1000) == 5e-4  # peak boundary
        assert lr_at(sched, 500) == pytest.approx(2.5e-4, rel=1e-15)
        assert lr_at(sched, 10000) == 0.0
        for step in (1, 137, 999, 1001, 5500, 9000, 9999):
            if step <= 1000:
                expected = 5e-4 * step / 1000
            else:
                expected = 5e-4 * (10000 - step) / 9000
            assert lr_at(sched, step) == pytest.approx(expected, rel=1e-12)

    def test_tri_stage_closed_form(self):
        # the fine-tune recipe scale: 20k steps peaking at 5e-5
        sched = Schedule("tri_stage", 5e-5, 20000, warmup_frac=0.1, hold_frac=0.4, final_scale=0.05)
        for step in (2500, 4000, 7000, 10000):  # hold region [2000, 10000]
            assert lr_at(sched, step) == 5e-5
        assert lr_at(sched, 1000) == pytest.approx(2.5e-5, rel=1e-12)
        assert lr_at(sched, 20000) == pytest.approx(5e-5 * 0.05, rel=1e-12)
        for step in (10001, 14000, 19999):
            expected = 5e-5 * 0.05 ** ((step - 10000) / 10000)
            assert lr_at(sched, step) == pytest.approx(expected, rel=1e-12)

    def test_boundary_continuity(self):
        for sched in (
            Schedule("bi_stage", 1e-3, 1000, warmup_frac=0.25),
            Schedule("tri_stage", 1e-3, 1000, warmup_frac=0.2, hold_frac=0.3, final_scale=0.1),
        ):
            lrs = [lr_at(sched, s) for s in range(1001)]
            jumps = np.abs(np.diff(lrs))
            # one-step moves should never exceed a few peak/total quanta
            assert jumps.max() < 10 * sched.peak_lr / sched.total_steps

    def test_step_out_of_range(self):
        sched = Schedule("bi_stage", 1e-3, 100)
        with pytest.raises(ValueError):
            lr_at(sched, -1)
        with pytest.raises(ValueError):
            lr_at(sched, 101)

    def test_invalid_fractions_rejected(self):
        with pytest.raises(ConfigError):
            Schedule("bi_stage", 1e-3, 100, warmup_frac=0.0)
        with pytest.raises(ConfigError):
            Schedule("tri_stage", 1e-3, 100, warmup_frac=0.7, hold_frac=0.5)
        with pytest.raises(ConfigError):
            Schedule("cosine", 1e-3, 100)


def make_config(policy, peak=1e-2, steps=20, batch=4, seed=0, **kw):
    return TrainConfig(
        policy=policy, schedule=Schedule("bi_stage", peak, steps), batch_size=batch, seed=seed, **kw
    )


class TestTrainStep:
    def test_layernorm_only_leaves_attention_bitwise(self):
        m = toy_model(adapters=False)
        ds = toy_data()
        before = m.params["layer.0.attn.wq.weight"].tensor.data.copy()
        run_training(m, ds.utterances, make_config(TransferPolicy("layernorm_only"), steps=10))
        assert np.array_equal(m.params["layer.0.attn.wq.weight"].tensor.data, before)

    def test_zero_lr_leaves_everything_bitwise(self):
        m = toy_model(adapters=True)
        ds = toy_data()
        snapshot = {p.path: p.tensor.data.copy() for p in m.parameters()}
        # bi-stage at step 0 has lr exactly 0
        cfg = make_config(TransferPolicy("adapter"), steps=100)
        trainer = Trainer(m, cfg)
        batch = Batch.from_utterances(ds.utterances[:4])
        rep = trainer.train_step(batch, 0)
        assert rep.lr == 0.0
        for path, before in snapshot.items():
            assert np.array_equal(m.params[path].tensor.data, before), path

    def test_adam_zero_gradient_is_noop(self):
        # learned positional rows beyond the batch's longest sequence never
        # enter the graph, so their gradient is exactly zero; Adam must leave
        # them bitwise unchanged even while everything else moves
        mc = ModelConfig(
            num_layers=1, d_model=8, num_heads=2, d_ffn=16, vocab_size=3,
            max_seq_len=64, positional="learned",
        )
        m = build_model(mc, None, seed=0)
        ds = toy_data()
        cfg = make_config(TransferPolicy("full_finetune"), steps=10)
        trainer = Trainer(m, cfg)
        pos = m.params["pos.embedding"].tensor
        tail_before = pos.data[40:].copy()
        head_before = pos.data[:4].copy()
        for step in range(5, 8):
            trainer.train_step(Batch.from_utterances(ds.utterances[:4]), step)
        assert np.array_equal(pos.data[40:], tail_before)
        assert not np.array_equal(pos.data[:4], head_before)

    def test_freeze_window_blocks_then_releases_transformer(self):
        m = toy_model()
        ds = toy_data()
        policy = TransferPolicy("full_finetune", freeze_transformer_steps=5)
        cfg = make_config(policy, steps=20, peak=1e-2)
        trainer = Trainer(m, cfg)
        probe = "layer.1.ffn.fc1.weight"
        before = m.params[probe].tensor.data.copy()
        rng = np.random.default_rng(0)
        for step in range(5):
            idx = rng.integers(0, len(ds.utterances), 4)
            trainer.train_step(Batch.from_utterances([ds.utterances[i] for i in idx]), step)
        assert np.array_equal(m.params[probe].tensor.data, before)
        for step in range(5, 10):
            idx = rng.integers(0, len(ds.utterances), 4)
            trainer.train_step(Batch.from_utterances([ds.utterances[i] for i in idx]), step)
        assert not np.array_equal(m.params[probe].tensor.data, before)

    def test_loss_trajectory_deterministic(self):
        losses = []
        for _ in range(2):
            m = toy_model(seed=4, adapters=True)
            ds = toy_data(seed=4)
            reports = run_training(m, ds.utterances, make_config(TransferPolicy("adapter"), steps=8, seed=9))
            losses.append([r.loss for r in reports])
        assert losses[0] == losses[1]

    def test_single_utterance_overfit(self):
        # adapter-mode memorization of one utterance drives the loss to ~0
        m = toy_model(seed=1, adapters=True)
        ds = toy_data(n=1, seed=2, sigma=0.0)
        cfg = make_config(TransferPolicy("adapter"), peak=3e-2, steps=200, batch=1, seed=1)
        reports = run_training(m, ds.utterances, cfg)
        assert reports[-1].loss < 0.01

    def test_non_finite_loss_aborts_with_diagnostics(self, monkeypatch):
        # a -inf logit for the only target token makes the loss +inf while
        # the log-prob rows stay validly normalized
        from ctcadapters.tensor import Tensor

        m = toy_model()
        bad = np.zeros((4, 4))
        bad[:, 0] = -np.inf
        monkeypatch.setattr(m, "forward", lambda frames: Tensor(bad))
        utt = Utterance(frames=np.zeros((4, 8)), labels=[0], true_length=4)
        trainer = Trainer(m, make_config(TransferPolicy("full_finetune"), steps=10))
        with pytest.raises(NumericalAbortError) as excinfo:
            trainer.train_step(Batch.from_utterances([utt]), 1)
        assert excinfo.value.step == 1
        assert math.isfinite(excinfo.value.lr)

    def test_grad_clip_caps_update_scale(self):
        m1 = toy_model(seed=7, adapters=True)
        m2 = toy_model(seed=7, adapters=True)
        ds = toy_data(seed=7)
        batch = Batch.from_utterances(ds.utterances[:4])
        r1 = Trainer(m1, make_config(TransferPolicy("adapter"), steps=10)).train_step(batch, 5)
        clip = r1.grad_norm / 2
        r2 = Trainer(m2, make_config(TransferPolicy("adapter"), steps=10, grad_clip=clip)).train_step(batch, 5)
        assert r2.grad_norm == r1.grad_norm  # reported pre-clip


class TestEvaluate:
    def test_pure_and_deterministic(self):
        m = toy_model(adapters=True)
        ds = toy_data()
        snapshot = {p.path: p.tensor.data.copy() for p in m.parameters()}
        r1 = evaluate(m, ds.utterances)
        r2 = evaluate(m, ds.utterances)
        assert (r1.mean_loss, r1.wer) == (r2.mean_loss, r2.wer)
        for path, before in snapshot.items():
            assert np.array_equal(m.params[path].tensor.data, before)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate(toy_model(), [])

    def test_untrained_model_has_high_error(self):
        m = toy_model(seed=3)
        ds = toy_data(n=32, seed=5)
        assert evaluate(m, ds.utterances).wer > 0.5

    def test_trained_model_reaches_low_wer_on_noiseless_task(self):
        # separable prototypes, sigma=0: a small model must hit WER 0
        mc = ModelConfig(num_layers=1, d_model=8, num_heads=2, d_ffn=16, vocab_size=3, max_seq_len=64)
        m = build_model(mc, None, seed=0)
        ds = generate(SynthSpec(vocab_size=3, d_in=8, num_utterances=40, seed=6, noise_sigma=0.0))
        cfg = make_config(TransferPolicy("full_finetune"), peak=5e-3, steps=300, batch=8, seed=0)
        run_training(m, ds.utterances, cfg)
        assert evaluate(m, ds.utterances).wer == 0.0

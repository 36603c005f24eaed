import json
import math
import os

import numpy as np
import pytest
import torch

import exunet.trainer as trainer_mod
from exunet.corpus import (
    CorpusAudioSource,
    NoiseRecord,
    split_noise_pool,
    synth_noise_pool,
    synth_speaker_corpus,
)
from exunet.frontend import FrontendConfig
from exunet.trainer import (
    TrainConfig,
    TrainingDiverged,
    grad_check,
    lr_schedule,
    sample_minibatch,
    steps_per_epoch,
    train,
)

FAST_FRONTEND = FrontendConfig()


def tiny_corpus(n_speakers=3, utts=3, duration=0.6, seed=11, with_noise=True):
    manifest = synth_speaker_corpus(n_speakers, utts, duration, seed=seed)
    if with_noise:
        records = [
            NoiseRecord(id=f"n{i:03d}", kind=k, duration_s=0.8,
                        seed=[seed, 77, i], path=f"wav/n{i:03d}.wav")
            for i, k in enumerate(["stationary", "babble_like"] * 2)
        ]
        tr, te = split_noise_pool(records, 0.5, seed)
        manifest.noises = records
        manifest.noise_train = [r.id for r in tr]
        manifest.noise_test = [r.id for r in te]
    return CorpusAudioSource(manifest)


def tiny_cfg(**kw):
    defaults = dict(
        mode="baseline",
        n_speakers_per_batch=2,
        epochs=1,
        crop_frames=24,
        seed=3,
        widths=(2, 2, 2, 2, 2),
        emb_dim=8,
        num_threads=1,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestLrSchedule:
    def test_reference_points(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == pytest.approx(0.001)
        assert lr_schedule(10, cfg) == pytest.approx(0.00095)
        assert lr_schedule(25, cfg) == pytest.approx(0.001 * 0.95**2)

    def test_piecewise_constant_non_increasing(self):
        cfg = TrainConfig()
        values = [lr_schedule(e, cfg) for e in range(60)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for start in range(0, 60, 10):
            assert len({values[e] for e in range(start, start + 10)}) == 1

    def test_arithmetic_mode(self):
        cfg = TrainConfig(lr_decay_mode="arithmetic")
        assert lr_schedule(10, cfg) == pytest.approx(0.001 * 0.95)
        assert lr_schedule(20, cfg) == pytest.approx(0.001 * 0.90)
        assert lr_schedule(1000, cfg) == 0.0

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())


class TestTrainConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"lr0": 0.0},
            {"snr_low": -20.0},
            {"snr_high": 50.0},
            {"snr_low": 15.0, "snr_high": 5.0},
            {"crop_frames": 10},
            {"mode": "vae"},
            {"n_speakers_per_batch": 0},
            {"lr_decay_mode": "linear"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSampleMinibatch:
    def test_composition(self):
        source = tiny_corpus()
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        batch = sample_minibatch(source, source.train_noises(), cfg, rng)
        n = cfg.n_speakers_per_batch
        assert batch.x.shape == (2 * n, 1, 64, cfg.crop_frames)
        assert batch.clean_targets.shape == batch.x.shape
        assert batch.labels.shape == (n,)
        assert len(set(batch.labels.tolist())) == n  # distinct speakers
        assert list(batch.all_labels[:n]) == list(batch.all_labels[n:])
        # clean half is its own target; noisy half differs from its target
        torch.testing.assert_close(batch.x[:n], batch.clean_targets[:n])
        assert not torch.allclose(batch.x[n:], batch.clean_targets[n:])
        assert all(s is not None for s in batch.snrs)

    def test_no_augment_keeps_clean(self):
        source = tiny_corpus()
        cfg = tiny_cfg(augment_noise=False)
        batch = sample_minibatch(source, [], cfg, np.random.default_rng(0))
        n = cfg.n_speakers_per_batch
        torch.testing.assert_close(batch.x[n:], batch.clean_targets[n:])
        assert all(s is None for s in batch.snrs)

    def test_deterministic_given_rng(self):
        source = tiny_corpus()
        cfg = tiny_cfg()
        noises = source.train_noises()
        a = sample_minibatch(source, noises, cfg, np.random.default_rng(5))
        b = sample_minibatch(source, noises, cfg, np.random.default_rng(5))
        assert torch.equal(a.x, b.x)
        assert torch.equal(a.labels, b.labels)
        assert a.snrs == b.snrs

    def test_snr_distribution(self):
        source = tiny_corpus()
        cfg = tiny_cfg()
        noises = source.train_noises()
        rng = np.random.default_rng(1)
        cache = {}
        snrs = []
        for _ in range(300):
            batch = sample_minibatch(
                source, noises, cfg, rng, feature_cache=cache
            )
            snrs.extend(batch.snrs)
        assert abs(np.mean(snrs) - 10.0) <= 0.5

    def test_corpus_too_small(self):
        source = tiny_corpus(n_speakers=2)
        cfg = tiny_cfg(n_speakers_per_batch=3)
        with pytest.raises(ValueError):
            sample_minibatch(source, source.train_noises(), cfg,
                             np.random.default_rng(0))

    def test_feature_cache_equivalence(self):
        source = tiny_corpus()
        cfg = tiny_cfg()
        noises = source.train_noises()
        a = sample_minibatch(source, noises, cfg, np.random.default_rng(9))
        b = sample_minibatch(source, noises, cfg, np.random.default_rng(9),
                             feature_cache={})
        assert torch.equal(a.x, b.x)


class TestStepsPerEpoch:
    def test_ceil_rule(self):
        source = tiny_corpus(n_speakers=3, utts=3)  # 9 utterances
        assert steps_per_epoch(source.manifest, tiny_cfg()) == math.ceil(9 / 4)


class TestTrain:
    def test_one_epoch_smoke(self, tmp_path):
        source = tiny_corpus()
        cfg = tiny_cfg(mode="exunet", epochs=1)
        ckpt_path, log_path, model = train(source, cfg, tmp_path)
        assert os.path.exists(ckpt_path)
        records = [json.loads(l) for l in open(log_path)]
        assert len(records) == 1
        rec = records[0]
        assert all(math.isfinite(rec[k]) for k in ("cce", "mse", "apn", "total"))
        assert rec["lr"] == pytest.approx(0.001)
        assert float(model.apn_w.detach()) >= 1e-6

    def test_loss_decreases_over_epochs(self, tmp_path):
        source = tiny_corpus(n_speakers=4, utts=4)
        cfg = tiny_cfg(mode="baseline", epochs=8, n_speakers_per_batch=2,
                       augment_noise=False)
        _, log_path, _ = train(source, cfg, tmp_path)
        records = [json.loads(l) for l in open(log_path)]
        assert records[-1]["total"] < records[0]["total"]

    def test_divergence_guard(self, tmp_path, monkeypatch):
        source = tiny_corpus()
        cfg = tiny_cfg()

        real = trainer_mod.sample_minibatch

        def poisoned(*args, **kw):
            batch = real(*args, **kw)
            batch.x[0, 0, 0, 0] = float("nan")
            return batch

        monkeypatch.setattr(trainer_mod, "sample_minibatch", poisoned)
        with pytest.raises(TrainingDiverged):
            train(source, cfg, tmp_path)

    def test_zero_grad_step_is_identity(self):
        from exunet.netcore import ModelConfig, build_model

        model = build_model(
            ModelConfig(mode="baseline", widths=(2, 2, 2, 2, 2), emb_dim=8,
                        n_speakers=3, asp_hidden=4),
            seed=0,
        )
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = torch.optim.Adam(model.parameters(), lr=0.01)
        opt.zero_grad()
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_resume_replays_bitwise(self, tmp_path):
        source = tiny_corpus(n_speakers=3, utts=3)

        full_cfg = tiny_cfg(mode="unet", epochs=4, checkpoint_every=99)
        _, _, full_model = train(source, full_cfg, tmp_path / "full")

        half_cfg = tiny_cfg(mode="unet", epochs=2, checkpoint_every=99)
        half_path, _, _ = train(source, half_cfg, tmp_path / "half")
        resumed_cfg = tiny_cfg(mode="unet", epochs=4, checkpoint_every=99)
        _, _, resumed_model = train(
            source, resumed_cfg, tmp_path / "resumed", resume_from=half_path
        )

        for (ka, a), (kb, b) in zip(
            full_model.state_dict().items(), resumed_model.state_dict().items()
        ):
            assert ka == kb
            assert torch.equal(a, b), ka

    def test_augment_without_noise_rejected(self, tmp_path):
        source = tiny_corpus(with_noise=False)
        with pytest.raises(ValueError):
            train(source, tiny_cfg(), tmp_path)


class TestGradCheck:
    def test_baseline_quick(self):
        rep = grad_check("baseline", n_params_sampled=8, seed=0)
        assert rep["pass"]
        assert rep["terms"]["cce"]["max_rel_err"] <= 1e-3

    def test_apn_single_speaker_constant(self):
        rep = grad_check("exunet", n_params_sampled=8, seed=0,
                         n_speakers=1, terms=("apn",))
        assert rep["terms"]["apn"]["max_rel_err"] <= 1e-6

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            grad_check("baseline", n_params_sampled=2, terms=("foo",))

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from exunet.corpus import (
    CorpusAudioSource,
    Waveform,
    manifest_to_dict,
    mix_at_snr,
    read_wav,
    save_manifest,
    scale_noise_to_snr,
    split_noise_pool,
    synth_noise_pool,
    synth_speaker_corpus,
    synth_utterance,
    write_wav,
)


def measured_snr_db(clean_samples, noise_samples):
    # independent re-measurement from the two addends
    p_c = float(np.mean(np.square(clean_samples)))
    p_n = float(np.mean(np.square(noise_samples)))
    return 10.0 * np.log10(p_c / p_n)


class TestSpeakerCorpus:
    def test_small_corpus_deterministic(self):
        a = synth_speaker_corpus(2, 2, 1.0, seed=7)
        b = synth_speaker_corpus(2, 2, 1.0, seed=7)
        assert manifest_to_dict(a) == manifest_to_dict(b)
        assert len(a.utterances) == 4
        assert len(a.speakers) == 2
        for spk in a.speakers:
            x = synth_utterance(spk, 0, 1.0, corpus_seed=7).samples
            y = synth_utterance(spk, 0, 1.0, corpus_seed=7).samples
            assert x.tobytes() == y.tobytes()

    def test_counts(self):
        m = synth_speaker_corpus(20, 10, 2.0, seed=1)
        assert len(m.utterances) == 200
        per = {}
        for u in m.utterances:
            per[u.speaker_id] = per.get(u.speaker_id, 0) + 1
        assert all(v == 10 for v in per.values())

    def test_seed_changes_samples(self):
        a = synth_speaker_corpus(2, 2, 1.0, seed=1)
        b = synth_speaker_corpus(2, 2, 1.0, seed=2)
        xa = synth_utterance(a.speakers[0], 0, 1.0, corpus_seed=1).samples
        xb = synth_utterance(b.speakers[0], 0, 1.0, corpus_seed=2).samples
        assert not np.allclose(xa[:100], xb[:100])

    @pytest.mark.parametrize(
        "n_speakers,utts,duration", [(1, 2, 1.0), (2, 1, 1.0), (2, 2, 0.3)]
    )
    def test_invalid_args(self, n_speakers, utts, duration):
        with pytest.raises(ValueError):
            synth_speaker_corpus(n_speakers, utts, duration, seed=0)

    def test_samples_bounded(self):
        m = synth_speaker_corpus(3, 2, 0.6, seed=3)
        for spk in m.speakers:
            w = synth_utterance(spk, 0, 0.6, corpus_seed=3)
            assert np.max(np.abs(w.samples)) <= 1.0


class TestNoisePool:
    def test_single_kind(self):
        clips = synth_noise_pool(4, 1.0, seed=3, kinds={"stationary"})
        assert len(clips) == 4
        assert all(c.noise_kind == "stationary" for c in clips)

    def test_all_kinds_present(self):
        clips = synth_noise_pool(6, 1.0, seed=3)
        kinds = {c.noise_kind for c in clips}
        assert kinds == {"stationary", "babble_like", "impulsive"}

    def test_too_few_clips(self):
        with pytest.raises(ValueError):
            synth_noise_pool(0, 1.0, seed=3)

    def test_empty_kinds(self):
        with pytest.raises(ValueError):
            synth_noise_pool(4, 1.0, seed=3, kinds=set())

    def test_deterministic(self):
        a = synth_noise_pool(4, 0.5, seed=9)
        b = synth_noise_pool(4, 0.5, seed=9)
        for wa, wb in zip(a, b):
            assert wa.samples.tobytes() == wb.samples.tobytes()


class TestSplit:
    def test_seven_three(self):
        pool = list(range(10))
        train, test = split_noise_pool(pool, 0.3, seed=5)
        assert len(train) == 7 and len(test) == 3
        assert set(train) | set(test) == set(pool)
        assert not set(train) & set(test)

    def test_two_clips(self):
        train, test = split_noise_pool([0, 1], 0.5, seed=0)
        assert len(train) == 1 and len(test) == 1

    def test_deterministic(self):
        pool = list(range(9))
        assert split_noise_pool(pool, 0.4, seed=11) == split_noise_pool(
            pool, 0.4, seed=11
        )

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_noise_pool([0], 0.5, seed=0)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_noise_pool([0, 1], 1.0, seed=0)

    @given(
        n=st.integers(2, 40),
        frac=st.floats(0.01, 0.99),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, n, frac, seed):
        pool = list(range(n))
        train, test = split_noise_pool(pool, frac, seed)
        assert len(train) >= 1 and len(test) >= 1
        assert sorted(train + test) == pool


def _tone(freq=220.0, duration=1.0, rate=16000, amp=0.5):
    t = np.arange(int(duration * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def _noise_wave(seed=0, duration=1.0, rate=16000, amp=0.3):
    rng = np.random.default_rng(seed)
    return Waveform(
        amp * rng.standard_normal(int(duration * rate)).clip(-3, 3) / 3.0,
        rate,
        source_kind="noise",
    )


class TestMixAtSnr:
    def test_zero_db_power_ratio(self):
        clean, noise = _tone(), _noise_wave()
        scaled = scale_noise_to_snr(clean, noise, 0.0)
        ratio = np.mean(clean.samples**2) / np.mean(scaled**2)
        assert abs(ratio - 1.0) <= 1e-9

    def test_twenty_db_power_ratio(self):
        clean, noise = _tone(), _noise_wave()
        scaled = scale_noise_to_snr(clean, noise, 20.0)
        assert np.mean(scaled**2) == pytest.approx(
            np.mean(clean.samples**2) / 100.0, rel=1e-9
        )

    @pytest.mark.parametrize("snr", [0.0, 5.0, 10.0, 15.0, 20.0])
    def test_remeasured_snr(self, snr):
        clean, noise = _tone(), _noise_wave(seed=int(snr) + 1)
        scaled = scale_noise_to_snr(clean, noise, snr, noise_offset=123)
        assert abs(measured_snr_db(clean.samples, scaled) - snr) <= 0.01

    def test_mixing_linearity(self):
        clean, noise = _tone(amp=0.3), _noise_wave(amp=0.2)
        mixed = mix_at_snr(clean, noise, 12.0, noise_offset=7)
        scaled = scale_noise_to_snr(clean, noise, 12.0, noise_offset=7)
        assert mixed.gain_applied == 1.0
        np.testing.assert_array_equal(mixed.samples, clean.samples + scaled)

    def test_metadata(self):
        mixed = mix_at_snr(_tone(), _noise_wave(), 7.5)
        assert mixed.source_kind == "mixed"
        assert mixed.snr_db == 7.5

    def test_peak_normalization(self):
        clean = _tone(amp=0.99)
        mixed = mix_at_snr(clean, _noise_wave(amp=0.9), -5.0)
        assert mixed.gain_applied < 1.0
        assert np.max(np.abs(mixed.samples)) <= 1.0 + 1e-12

    def test_zero_power_errors(self):
        silent = Waveform(np.zeros(1000), 16000)
        with pytest.raises(ValueError):
            mix_at_snr(silent, _noise_wave(), 10.0)
        with pytest.raises(ValueError):
            mix_at_snr(_tone(), Waveform(np.zeros(1000), 16000), 10.0)

    def test_rate_mismatch(self):
        with pytest.raises(ValueError):
            mix_at_snr(_tone(rate=16000), _noise_wave(rate=8000), 10.0)

    @given(
        snr_pair=st.tuples(st.floats(-10, 40), st.floats(-10, 40)).filter(
            lambda p: p[0] + 1e-6 < p[1]
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_alpha_decreasing_in_snr(self, snr_pair):
        lo, hi = snr_pair
        clean, noise = _tone(duration=0.2), _noise_wave(duration=0.2)
        a_lo = np.abs(scale_noise_to_snr(clean, noise, lo)).max()
        a_hi = np.abs(scale_noise_to_snr(clean, noise, hi)).max()
        assert a_lo > a_hi


class TestWavIO:
    def test_roundtrip_quantization(self, tmp_path):
        wave = _tone(440.0, 1.0)
        path = tmp_path / "tone.wav"
        write_wav(path, wave)
        back = read_wav(path)
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - wave.samples)) <= 2.0**-15

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "nope.wav")

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        stereo = (np.random.default_rng(0).standard_normal((100, 2)) * 1000).astype(
            np.int16
        )
        wavfile.write(path, 16000, stereo)
        with pytest.raises(ValueError):
            read_wav(path)

    def test_float_wav_rejected(self, tmp_path):
        path = tmp_path / "float.wav"
        wavfile.write(path, 16000, np.zeros(100, dtype=np.float32))
        with pytest.raises(ValueError):
            read_wav(path)


class TestManifest:
    def test_save_is_stable(self, tmp_path):
        m = synth_speaker_corpus(2, 2, 0.6, seed=4)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_manifest(m, p1)
        save_manifest(m, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_and_source(self, tmp_path):
        m = synth_speaker_corpus(2, 2, 0.6, seed=4)
        path = tmp_path / "manifest.json"
        save_manifest(m, path)
        from exunet.corpus import load_manifest

        m2 = load_manifest(path)
        assert manifest_to_dict(m) == manifest_to_dict(m2)
        src = CorpusAudioSource(m2)
        key = src.utterance_keys()[0]
        w = src.utterance(key)
        assert w.speaker_id == src.speaker_of(key)
        assert w.samples.size == int(0.6 * 16000)

    def test_overlapping_noise_split_rejected(self, tmp_path):
        m = synth_speaker_corpus(2, 2, 0.6, seed=4)
        m.noise_train = ["n0"]
        m.noise_test = ["n0"]
        with pytest.raises(ValueError):
            save_manifest(m, tmp_path / "bad.json")

    def test_wav_backed_source_close_to_synth(self, tmp_path):
        m = synth_speaker_corpus(2, 2, 0.6, seed=4)
        (tmp_path / "wav").mkdir()
        virtual = CorpusAudioSource(m)
        for u in m.utterances:
            key = f"s{u.speaker_id:04d}u{u.utterance_index:02d}"
            write_wav(tmp_path / u.path, virtual.utterance(key))
        disk = CorpusAudioSource(m, root=tmp_path)
        key = virtual.utterance_keys()[0]
        a, b = virtual.utterance(key), disk.utterance(key)
        assert np.max(np.abs(a.samples - b.samples)) <= 2.0**-15

"""Synthetic speaker corpus, noise pool, SNR-exact mixing, and WAV I/O.

Speakers are source-filter voices: a speaker-specific fundamental range and a
fixed resonance (formant) filter, with a per-utterance random phrase contour.
Everything is deterministic given (arguments, seed), so corpora can be
regenerated from their manifest instead of shipped.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

DEFAULT_SAMPLE_RATE = 16000

NOISE_KINDS = ("stationary", "babble_like", "impulsive")


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1] plus provenance metadata."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    speaker_id: int | None = None
    source_kind: str = "clean"  # clean | noise | mixed
    snr_db: float | None = None
    noise_kind: str | None = None
    gain_applied: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpeakerSpec:
    id: int
    seed: list[int]
    f0_hz: float
    formants_hz: list[float]
    formant_bw_hz: list[float]


@dataclass
class UtteranceRecord:
    speaker_id: int
    utterance_index: int
    duration_s: float
    path: str


@dataclass
class NoiseRecord:
    id: str
    kind: str
    duration_s: float
    seed: list[int]
    path: str


@dataclass
class CorpusManifest:
    speakers: list[SpeakerSpec]
    utterances: list[UtteranceRecord]
    noises: list[NoiseRecord] = field(default_factory=list)
    noise_train: list[str] = field(default_factory=list)
    noise_test: list[str] = field(default_factory=list)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def validate(self):
        if set(self.noise_train) & set(self.noise_test):
            raise ValueError("noise_train and noise_test overlap")
        per_speaker: dict[int, int] = {}
        for u in self.utterances:
            per_speaker[u.speaker_id] = per_speaker.get(u.speaker_id, 0) + 1
        for spk in self.speakers:
            if per_speaker.get(spk.id, 0) < 2:
                raise ValueError(f"speaker {spk.id} has fewer than 2 utterances")


def utterance_key(speaker_id: int, utterance_index: int) -> str:
    return f"s{speaker_id:04d}u{utterance_index:02d}"


# ---------------------------------------------------------------------------
# synthesis


def _resonator_coeffs(freq_hz, bw_hz, sample_rate):
    r = np.exp(-np.pi * bw_hz / sample_rate)
    theta = 2.0 * np.pi * freq_hz / sample_rate
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def _phrase_contour(rng, n, sample_rate):
    """Slow pitch/energy modulation: a few random low-frequency sinusoids."""
    t = np.arange(n) / sample_rate
    contour = np.zeros(n)
    for _ in range(3):
        f = rng.uniform(0.4, 3.0)
        a = rng.uniform(0.5, 2.0)
        contour += a * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return contour


def _speaker_spec(corpus_seed: int, speaker_id: int) -> SpeakerSpec:
    seed = [int(corpus_seed), int(speaker_id)]
    rng = np.random.default_rng(seed)
    f0 = rng.uniform(85.0, 260.0)
    f1 = rng.uniform(300.0, 900.0)
    f2 = rng.uniform(f1 + 400.0, 2400.0)
    f3 = rng.uniform(f2 + 400.0, 3400.0)
    bws = rng.uniform(60.0, 160.0, size=3)
    return SpeakerSpec(
        id=speaker_id,
        seed=seed,
        f0_hz=round(float(f0), 6),
        formants_hz=[round(float(f), 6) for f in (f1, f2, f3)],
        formant_bw_hz=[round(float(b), 6) for b in bws],
    )


def synth_utterance(
    spec: SpeakerSpec,
    utterance_index: int,
    duration_s: float,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    corpus_seed: int = 0,
) -> Waveform:
    """Render one utterance of a speaker; deterministic per (seed, speaker, index)."""
    rng = np.random.default_rng([int(corpus_seed), int(spec.id), int(utterance_index)])
    n = int(round(duration_s * sample_rate))

    # pitch contour in semitones around the speaker's base f0
    semitones = _phrase_contour(rng, n, sample_rate)
    f0 = spec.f0_hz * np.power(2.0, semitones / 12.0)

    # sawtooth glottal source via phase accumulation, plus breath noise
    phase = np.cumsum(f0 / sample_rate)
    source = 2.0 * (phase - np.floor(phase)) - 1.0
    source += 0.02 * rng.standard_normal(n)

    # syllabic energy envelope (always > 0 so no dead stretches)
    env = 0.35 + 0.65 * np.abs(_phrase_contour(rng, n, sample_rate)) / 3.0
    ramp = min(int(0.02 * sample_rate), max(1, n // 8))
    env[:ramp] *= np.linspace(0.0, 1.0, ramp)
    env[-ramp:] *= np.linspace(1.0, 0.0, ramp)
    source *= env

    out = source
    for f, bw in zip(spec.formants_hz, spec.formant_bw_hz):
        b, a = _resonator_coeffs(f, bw, sample_rate)
        out = lfilter(b, a, out)
    peak = np.max(np.abs(out))
    out = 0.8 * out / peak
    return Waveform(out, sample_rate, speaker_id=spec.id, source_kind="clean")


def synth_speaker_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    duration_s: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    first_utterance_index: int = 0,
) -> CorpusManifest:
    """Build a deterministic corpus manifest (audio is regenerable on demand).

    `first_utterance_index` offsets the utterance indices so that disjoint
    train/eval manifests can be cut from the same virtual speakers.
    """
    if n_speakers < 2 or utts_per_speaker < 2:
        raise ValueError("need at least 2 speakers and 2 utterances per speaker")
    if duration_s < 0.5:
        raise ValueError("duration_s must be at least 0.5")
    speakers = [_speaker_spec(seed, i) for i in range(n_speakers)]
    utterances = [
        UtteranceRecord(
            speaker_id=spk.id,
            utterance_index=j,
            duration_s=duration_s,
            path=f"wav/{utterance_key(spk.id, j)}.wav",
        )
        for spk in speakers
        for j in range(first_utterance_index, first_utterance_index + utts_per_speaker)
    ]
    return CorpusManifest(
        speakers=speakers, utterances=utterances, sample_rate=sample_rate, seed=seed
    )


def _synth_noise_clip(kind, n, rng, sample_rate):
    if kind == "stationary":
        pole = rng.uniform(0.6, 0.95)
        out = lfilter([1.0], [1.0, -pole], rng.standard_normal(n))
    elif kind == "babble_like":
        out = np.zeros(n)
        for _ in range(5):
            f0 = rng.uniform(100.0, 320.0)
            drift = 1.0 + 0.05 * np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
            phase = np.cumsum(f0 * drift / sample_rate)
            voice = 2.0 * (phase - np.floor(phase)) - 1.0
            mod = np.abs(lfilter([1.0], [1.0, -0.999], rng.standard_normal(n)))
            voice *= mod / (np.max(mod) + 1e-12)
            out += voice
    elif kind == "impulsive":
        out = 0.02 * rng.standard_normal(n)
        n_events = max(1, int(rng.poisson(6.0 * n / sample_rate)))
        t = np.arange(n) / sample_rate
        for _ in range(n_events):
            pos = rng.integers(0, n)
            freq = rng.uniform(500.0, 4000.0)
            decay = rng.uniform(0.005, 0.03)
            tail = t[: n - pos]
            out[pos:] += (
                rng.uniform(0.3, 1.0)
                * np.exp(-tail / decay)
                * np.sin(2.0 * np.pi * freq * tail)
            )
    else:
        raise ValueError(f"unknown noise kind: {kind}")
    return 0.9 * out / np.max(np.abs(out))


def synth_noise_pool(
    n_clips: int,
    duration_s: float,
    seed: int,
    kinds=NOISE_KINDS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> list[Waveform]:
    """Deterministic noise clips, cycling through the requested kinds."""
    if n_clips < 2:
        raise ValueError("n_clips must be at least 2")
    kinds = sorted(set(kinds))
    if not kinds:
        raise ValueError("kinds must not be empty")
    for k in kinds:
        if k not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind: {k}")
    n = int(round(duration_s * sample_rate))
    clips = []
    for i in range(n_clips):
        kind = kinds[i % len(kinds)]
        rng = np.random.default_rng([int(seed), 77, i])
        samples = _synth_noise_clip(kind, n, rng, sample_rate)
        clips.append(
            Waveform(samples, sample_rate, source_kind="noise", noise_kind=kind)
        )
    return clips


def split_noise_pool(pool, test_fraction: float, seed: int):
    """Disjoint train/test partition of a noise pool, deterministic per seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    if len(pool) < 2:
        raise ValueError("pool too small to split")
    n_test = int(round(len(pool) * test_fraction))
    n_test = min(max(n_test, 1), len(pool) - 1)
    perm = np.random.default_rng(seed).permutation(len(pool))
    test_idx = sorted(perm[:n_test].tolist())
    train_idx = sorted(perm[n_test:].tolist())
    return [pool[i] for i in train_idx], [pool[i] for i in test_idx]


# ---------------------------------------------------------------------------
# SNR mixing


def _tile(noise: np.ndarray, n: int, offset: int) -> np.ndarray:
    idx = (int(offset) + np.arange(n)) % noise.size
    return noise[idx]


def scale_noise_to_snr(
    clean: Waveform, noise: Waveform, snr_db: float, noise_offset: int = 0
) -> np.ndarray:
    """The additive noise term of `mix_at_snr`: noise tiled to the clean length
    and scaled so that 10*log10(P_clean / P_noise) equals `snr_db` over the
    full mixed region."""
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    tiled = _tile(noise.samples, clean.samples.size, noise_offset)
    p_clean = np.mean(clean.samples**2)
    p_noise = np.mean(tiled**2)
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise ValueError("zero-power signal cannot be mixed at a finite SNR")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return alpha * tiled


def mix_at_snr(
    clean: Waveform, noise: Waveform, snr_db: float, noise_offset: int = 0
) -> Waveform:
    """Additively mix noise into clean speech at an exact SNR.

    The noise is tiled cyclically from `noise_offset` (callers randomize the
    offset; the mix itself stays pure). Peak normalization is applied only if
    the sum leaves [-1, 1], and the applied gain is recorded.
    """
    scaled = scale_noise_to_snr(clean, noise, snr_db, noise_offset)
    mixed = clean.samples + scaled
    peak = np.max(np.abs(mixed))
    gain = 1.0 / peak if peak > 1.0 else 1.0
    return Waveform(
        mixed * gain,
        clean.sample_rate,
        speaker_id=clean.speaker_id,
        source_kind="mixed",
        snr_db=float(snr_db),
        noise_kind=noise.noise_kind,
        gain_applied=float(gain),
    )


# ---------------------------------------------------------------------------
# WAV files (RIFF PCM, 16-bit, mono)


def write_wav(path, wave: Waveform):
    q = np.clip(np.rint(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, wave.sample_rate, q)


def read_wav(path, speaker_id=None, source_kind="clean") -> Waveform:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono WAV files are supported")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: only 16-bit PCM WAV files are supported")
    return Waveform(
        data.astype(np.float64) / 32767.0,
        int(rate),
        speaker_id=speaker_id,
        source_kind=source_kind,
    )


# ---------------------------------------------------------------------------
# manifest persistence (UTF-8 JSON, stable key order)


def manifest_to_dict(m: CorpusManifest) -> dict:
    return {
        "sample_rate": m.sample_rate,
        "seed": m.seed,
        "speakers": [
            {
                "id": s.id,
                "seed": s.seed,
                "f0_hz": s.f0_hz,
                "formants_hz": s.formants_hz,
                "formant_bw_hz": s.formant_bw_hz,
            }
            for s in m.speakers
        ],
        "utterances": [
            {
                "speaker_id": u.speaker_id,
                "utterance_index": u.utterance_index,
                "duration_s": u.duration_s,
                "path": u.path,
            }
            for u in m.utterances
        ],
        "noises": [
            {
                "id": r.id,
                "kind": r.kind,
                "duration_s": r.duration_s,
                "seed": r.seed,
                "path": r.path,
            }
            for r in m.noises
        ],
        "noise_train": list(m.noise_train),
        "noise_test": list(m.noise_test),
    }


def manifest_from_dict(d: dict) -> CorpusManifest:
    m = CorpusManifest(
        speakers=[SpeakerSpec(**s) for s in d["speakers"]],
        utterances=[UtteranceRecord(**u) for u in d["utterances"]],
        noises=[NoiseRecord(**r) for r in d.get("noises", [])],
        noise_train=list(d.get("noise_train", [])),
        noise_test=list(d.get("noise_test", [])),
        sample_rate=d["sample_rate"],
        seed=d["seed"],
    )
    m.validate()
    return m


def save_manifest(m: CorpusManifest, path):
    m.validate()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(m), f, indent=2)
        f.write("\n")


def load_manifest(path) -> CorpusManifest:
    with open(path, encoding="utf-8") as f:
        return manifest_from_dict(json.load(f))


class CorpusAudioSource:
    """Resolves utterance/noise ids to waveforms.

    Reads the materialized WAV file when present under `root`, otherwise
    re-synthesizes from the manifest (identical up to 16-bit quantization).
    """

    def __init__(self, manifest: CorpusManifest, root=None):
        self.manifest = manifest
        self.root = root
        self._specs = {s.id: s for s in manifest.speakers}
        self._utts = {
            utterance_key(u.speaker_id, u.utterance_index): u
            for u in manifest.utterances
        }
        self._noises = {r.id: r for r in manifest.noises}

    def utterance_keys(self):
        return list(self._utts)

    def speaker_of(self, key: str) -> int:
        return self._utts[key].speaker_id

    def _wav_path(self, rel):
        if self.root is None:
            return None
        p = os.path.join(self.root, rel)
        return p if os.path.exists(p) else None

    def utterance(self, key: str) -> Waveform:
        try:
            rec = self._utts[key]
        except KeyError:
            raise KeyError(f"unknown utterance id: {key}") from None
        p = self._wav_path(rec.path)
        if p is not None:
            return read_wav(p, speaker_id=rec.speaker_id)
        return synth_utterance(
            self._specs[rec.speaker_id],
            rec.utterance_index,
            rec.duration_s,
            self.manifest.sample_rate,
            corpus_seed=self.manifest.seed,
        )

    def noise(self, noise_id: str) -> Waveform:
        rec = self._noises[noise_id]
        p = self._wav_path(rec.path)
        if p is not None:
            w = read_wav(p, source_kind="noise")
            w.noise_kind = rec.kind
            return w
        rng = np.random.default_rng(rec.seed)
        n = int(round(rec.duration_s * self.manifest.sample_rate))
        samples = _synth_noise_clip(rec.kind, n, rng, self.manifest.sample_rate)
        return Waveform(
            samples,
            self.manifest.sample_rate,
            source_kind="noise",
            noise_kind=rec.kind,
        )

    def train_noises(self) -> list[Waveform]:
        return [self.noise(i) for i in self.manifest.noise_train]

    def test_noises(self, kind=None) -> list[Waveform]:
        ids = [
            i
            for i in self.manifest.noise_test
            if kind is None or self._noises[i].kind == kind
        ]
        return [self.noise(i) for i in ids]

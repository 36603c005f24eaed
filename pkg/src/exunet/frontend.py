"""Waveform -> 64-bin log-mel spectrogram frontend.

25 ms Hamming frames hopped at 10 ms, zero-padded to a 1024-point FFT,
64 triangular mel filters, log floor 1e-6, then per-utterance per-bin
mean/variance normalization (switchable off).
"""

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Waveform


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    frame_len_s: float = 0.025
    frame_hop_s: float = 0.010
    n_fft: int = 1024
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None  # defaults to Nyquist
    log_floor: float = 1e-6
    normalize: bool = True

    @property
    def win_samples(self) -> int:
        return int(round(self.frame_len_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.frame_hop_s * self.sample_rate))


DEFAULT_FRONTEND = FrontendConfig()


@dataclass
class MelSpec:
    """Log-mel features, `values` shaped [n_mels, frames]."""

    values: np.ndarray
    frame_hop_s: float = 0.010
    frame_len_s: float = 0.025
    n_fft: int = 1024
    sample_rate: int = 16000
    normalized: bool = True

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    f_min: float
    f_max: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def n_frames_for(n_samples: int, cfg: FrontendConfig = DEFAULT_FRONTEND) -> int:
    return 1 + (n_samples - cfg.win_samples) // cfg.hop_samples


def frame_signal(wave: Waveform, cfg: FrontendConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """Slice into overlapping frames and apply a Hamming window.

    Returns [n_frames, win_samples]; raises if the input is shorter than one
    window.
    """
    x = wave.samples
    win, hop = cfg.win_samples, cfg.hop_samples
    if x.size < win:
        raise ValueError(f"input too short: {x.size} samples < window {win}")
    n = n_frames_for(x.size, cfg)
    idx = hop * np.arange(n)[:, None] + np.arange(win)[None, :]
    return x[idx] * np.hamming(win)


def power_spectrum(frames: np.ndarray, cfg: FrontendConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """|FFT|^2 of zero-padded frames, returned as [n_fft//2 + 1, n_frames]."""
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).T


def build_mel_filterbank(
    sample_rate: int = 16000,
    n_fft: int = 1024,
    n_mels: int = 64,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the mel scale."""
    if f_max is None:
        f_max = sample_rate / 2.0
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError("need 0 <= f_min < f_max <= Nyquist")
    pts_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        left, center, right = pts_hz[m], pts_hz[m + 1], pts_hz[m + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(weights=weights, f_min=float(f_min), f_max=float(f_max))


_FBANK_CACHE: dict[tuple, MelFilterbank] = {}


def _filterbank_for(cfg: FrontendConfig) -> MelFilterbank:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = build_mel_filterbank(
            cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max
        )
    return _FBANK_CACHE[key]


def normalize_per_bin(values: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per frequency bin over time; constant bins map
    to all-zero rows instead of dividing by ~0."""
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    out = values - mean
    ok = std[:, 0] > 1e-12
    out[ok] /= std[ok]
    out[~ok] = 0.0
    return out


def log_mel(wave: Waveform, cfg: FrontendConfig = DEFAULT_FRONTEND) -> MelSpec:
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {wave.sample_rate} != frontend rate {cfg.sample_rate}"
        )
    frames = frame_signal(wave, cfg)
    power = power_spectrum(frames, cfg)
    fbank = _filterbank_for(cfg)
    values = np.log(fbank.weights @ power + cfg.log_floor)
    if cfg.normalize:
        values = normalize_per_bin(values)
    return MelSpec(
        values=values,
        frame_hop_s=cfg.frame_hop_s,
        frame_len_s=cfg.frame_len_s,
        n_fft=cfg.n_fft,
        sample_rate=cfg.sample_rate,
        normalized=cfg.normalize,
    )


# ---------------------------------------------------------------------------
# optional on-disk feature cache: one JSON header line, then raw float32 LE


def save_melspec(path, spec: MelSpec):
    header = {
        "shape": list(spec.values.shape),
        "dtype": "<f4",
        "frame_hop_s": spec.frame_hop_s,
        "frame_len_s": spec.frame_len_s,
        "n_fft": spec.n_fft,
        "sample_rate": spec.sample_rate,
        "normalized": spec.normalized,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def load_melspec(path) -> MelSpec:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        data = np.frombuffer(f.read(), dtype=header["dtype"])
    values = data.reshape(header["shape"]).astype(np.float64)
    return MelSpec(
        values=values,
        frame_hop_s=header["frame_hop_s"],
        frame_len_s=header["frame_len_s"],
        n_fft=header["n_fft"],
        sample_rate=header["sample_rate"],
        normalized=header["normalized"],
    )

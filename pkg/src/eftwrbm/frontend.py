"""Audio I/O, STFT magnitude spectrograms, standardization, SNR mixing and a
synthetic speech/noise corpus."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
WINDOW = 512  # 32 ms at 16 kHz
HOP = 256  # 16 ms
N_BINS = WINDOW // 2 + 1
STD_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def load_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: only mono WAV is supported, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if not raw:
        raise ValueError(f"{path}: empty WAV file")
    return Waveform(np.frombuffer(raw, dtype="<i2") / 32768.0, rate)


def save_wav(path, wav: Waveform):
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(wav.sample_rate))
        wf.writeframes(pcm.tobytes())


def resample(wav: Waveform, rate=SAMPLE_RATE) -> Waveform:
    """Polyphase resampling with a Kaiser-windowed sinc low-pass."""
    if wav.sample_rate == rate:
        return wav
    ratio = Fraction(rate, wav.sample_rate)
    out = signal.resample_poly(wav.samples, ratio.numerator, ratio.denominator,
                               window=("kaiser", 8.0))
    return Waveform(out, rate)


def frame_signal(x, window=WINDOW, hop=HOP):
    n_frames = (x.size - window) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Spectrogram:
    """``n_bins x T`` matrix: linear magnitudes, or standardized log-magnitudes
    when ``stats`` is set."""

    values: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    stats: StandardizationStats | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("spectrogram must be a 2-D matrix")

    @property
    def standardized(self):
        return self.stats is not None

    @property
    def n_bins(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]

    def frame_times(self):
        return (np.arange(self.n_frames) * self.hop + WINDOW / 2) / self.sample_rate


def stft_magnitude(wav: Waveform) -> Spectrogram:
    """Hann-windowed (periodic) 512-point STFT magnitude with hop 256."""
    if wav.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {wav.sample_rate}")
    if wav.samples.size < WINDOW:
        raise ValueError("waveform is shorter than one analysis window")
    frames = frame_signal(wav.samples) * signal.get_window("hann", WINDOW)
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    if mags.shape[0] != N_BINS:
        raise AssertionError("STFT must produce 257 bins")
    return Spectrogram(mags, wav.sample_rate, HOP)


def compute_stats(spectrograms) -> StandardizationStats:
    """Per-bin mean/deviation of log(1 + magnitude) over all training frames."""
    logs = np.concatenate([np.log1p(s.values) for s in spectrograms], axis=1)
    mean = logs.mean(axis=1)
    std = np.maximum(logs.std(axis=1), STD_FLOOR)
    return StandardizationStats(mean, std)


def standardize(spec: Spectrogram, stats: StandardizationStats | None = None) -> Spectrogram:
    if spec.standardized:
        raise ValueError("spectrogram is already standardized")
    if stats is None:
        stats = compute_stats([spec])
    values = (np.log1p(spec.values) - stats.mean[:, None]) / stats.std[:, None]
    return Spectrogram(values, spec.sample_rate, spec.hop, stats)


# cap on log-magnitudes: keeps expm1 and later ratios finite, far above any real spectrum
MAX_LOG_MAG = 300.0


def destandardize_values(values, stats):
    logs = np.asarray(values) * stats.std[:, None] + stats.mean[:, None]
    return np.expm1(np.minimum(logs, MAX_LOG_MAG))


def destandardize(spec: Spectrogram) -> Spectrogram:
    if not spec.standardized:
        raise ValueError("spectrogram is not standardized")
    return Spectrogram(destandardize_values(spec.values, spec.stats), spec.sample_rate, spec.hop)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db) -> Waveform:
    """Add ``noise`` (looped or truncated to length) scaled to the requested SNR."""
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    if np.isposinf(snr_db):
        return Waveform(clean.samples.copy(), clean.sample_rate)
    n = np.resize(noise.samples, clean.samples.size)
    p_clean, p_noise = np.sum(clean.samples ** 2), np.sum(n ** 2)
    if p_noise == 0:
        raise ValueError("noise is silent")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * n, clean.sample_rate)


def measured_snr(clean, mixture):
    noise = mixture.samples - clean.samples
    return 10.0 * np.log10(np.sum(clean.samples ** 2) / np.sum(noise ** 2))


# ---------------------------------------------------------------------------
# Synthetic corpus


NOISE_KINDS = ("white", "pink", "babble")


@dataclass
class SyntheticCorpusSpec:
    n_utterances: int = 20
    utterance_seconds: float = 3.0
    f0_range: tuple = (100.0, 250.0)
    n_harmonics: int = 12
    burst_seconds: tuple = (0.25, 0.7)
    gap_seconds: tuple = (0.15, 0.5)
    speech_probability: float = 1.0
    noise_kind: str = "white"
    snr_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be non-negative")


@dataclass
class Utterance:
    clean: Waveform
    noise: Waveform
    envelope: np.ndarray  # boolean per sample: speech active
    labels: np.ndarray  # per STFT frame


def frame_labels(envelope, window=WINDOW, hop=HOP):
    """A frame is speech when at least half its samples are active."""
    active = frame_signal(np.asarray(envelope, dtype=np.float64), window, hop)
    return (active.sum(axis=1) >= window / 2).astype(np.int8)


def _harmonic_burst(rng, n, rate, f0_range, n_harmonics):
    t = np.arange(n) / rate
    f0_start = rng.uniform(*f0_range)
    glide = rng.uniform(-0.2, 0.2)
    f0 = f0_start * (1.0 + glide * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(f0) / rate
    tilt = rng.uniform(0.6, 1.2)
    out = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        # skip harmonics above Nyquist at the highest f0 in the burst
        if k * f0.max() >= rate / 2:
            break
        amp = k ** (-tilt) * rng.uniform(0.5, 1.0)
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out


def _ramp(n, rate, ramp_s=0.01):
    r = min(int(ramp_s * rate), n // 2)
    env = np.ones(n)
    if r > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = edge
        env[n - r:] = edge[::-1]
    return env


def synth_speech(rng, n, rate, spec: SyntheticCorpusSpec):
    """Harmonic bursts separated by silent gaps; returns (signal, active mask)."""
    x = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    pos = int(rng.uniform(*spec.gap_seconds) * rate)
    while pos < n:
        length = int(rng.uniform(*spec.burst_seconds) * rate)
        end = min(pos + length, n)
        if end - pos > 1 and rng.random() < spec.speech_probability:
            burst = _harmonic_burst(rng, end - pos, rate, spec.f0_range, spec.n_harmonics)
            x[pos:end] = burst * _ramp(end - pos, rate) * rng.uniform(0.5, 1.0)
            active[pos:end] = True
        pos = end + int(rng.uniform(*spec.gap_seconds) * rate)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return x, active


def pink_noise(rng, n):
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spectrum / np.sqrt(f), n)


def babble_noise(rng, n, rate, spec: SyntheticCorpusSpec, talkers=6):
    """Surrogate babble: six overlapping random harmonic talkers."""
    talker_spec = SyntheticCorpusSpec(
        f0_range=spec.f0_range, n_harmonics=spec.n_harmonics,
        burst_seconds=spec.burst_seconds, gap_seconds=(0.02, 0.1))
    return sum(synth_speech(rng, n, rate, talker_spec)[0] for _ in range(talkers))


def make_noise(rng, kind, n, rate, spec):
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        return pink_noise(rng, n)
    if kind == "babble":
        return babble_noise(rng, n, rate, spec)
    raise ValueError(f"unknown noise kind {kind!r}")


def generate_corpus(spec: SyntheticCorpusSpec, rate=SAMPLE_RATE):
    """Deterministic clean utterances, matched noise tracks and frame labels.

    Each utterance draws from its own child seed, so any single utterance
    can be regenerated independently of the others.
    """
    n = int(round(spec.utterance_seconds * rate))
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_utterances)
    utterances = []
    for child in children:
        speech_rng, noise_rng = (np.random.default_rng(s) for s in child.spawn(2))
        clean, active = synth_speech(speech_rng, n, rate, spec)
        noise = make_noise(noise_rng, spec.noise_kind, n, rate, spec)
        noise = noise / np.max(np.abs(noise)) * 0.5
        utterances.append(Utterance(Waveform(clean, rate), Waveform(noise, rate), active,
                                    frame_labels(active)))
    return utterances


def noisy_mixture(utt: Utterance, snr_db) -> Waveform:
    if not np.any(utt.clean.samples):
        # silent utterance: there is no speech energy to reference the SNR to
        return Waveform(utt.noise.samples.copy(), utt.noise.sample_rate)
    return mix_at_snr(utt.clean, utt.noise, snr_db)


# ---------------------------------------------------------------------------
# Binary spectrogram container: magic, u32 n_bins, u32 T, f64 row-major
# values, u8 has_stats, then mean and std (f64, n_bins each) when present.

SPEC_MAGIC = b"SPEC1"
SPP_MAGIC = b"SPP1"


def spectrogram_to_bytes(values, stats=None, magic=SPEC_MAGIC):
    values = np.ascontiguousarray(values, dtype="<f8")
    parts = [magic, struct.pack("<2I", *values.shape), values.tobytes()]
    if stats is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", np.asarray(stats.mean, "<f8").tobytes(), np.asarray(stats.std, "<f8").tobytes()]
    return b"".join(parts)


def spectrogram_from_bytes(blob, magic=SPEC_MAGIC):
    if blob[:len(magic)] != magic:
        raise ValueError(f"bad magic, expected {magic!r}")
    off = len(magic)
    n_bins, T = struct.unpack_from("<2I", blob, off)
    off += 8
    values = np.frombuffer(blob, "<f8", n_bins * T, off).reshape(n_bins, T).copy()
    off += 8 * n_bins * T
    stats = None
    if blob[off:off + 1] == b"\x01":
        off += 1
        mean = np.frombuffer(blob, "<f8", n_bins, off).copy()
        std = np.frombuffer(blob, "<f8", n_bins, off + 8 * n_bins).copy()
        stats = StandardizationStats(mean, std)
    return values, stats


def save_spectrogram(path, spec: Spectrogram):
    Path(path).write_bytes(spectrogram_to_bytes(spec.values, spec.stats))


def load_spectrogram(path) -> Spectrogram:
    values, stats = spectrogram_from_bytes(Path(path).read_bytes())
    return Spectrogram(values, stats=stats)

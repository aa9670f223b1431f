"""Waveform and feature processing.

STFT with a periodic Hann window, log-power spectra, context windows,
DC-bin handling, noise-aware features, global-variance equalization,
synthetic noisy/clean data and the two objective scores used in place of
PESQ (segmental SNR and log-spectral distance).
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, ShapeError
from .tensor import Rng


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    fft_size: int = 512
    frame_len: int = 512
    hop: int = 256
    context_m: int = 0
    channels: int = 1
    nat: bool = False
    lps_floor: float = 1e-12
    noise_frames: int = 6

    @property
    def freq_bins(self):
        return self.fft_size // 2 + 1

    def feature_width(self):
        """Width of one DNN input vector."""
        width = self.freq_bins * (2 * self.context_m + 1) * self.channels
        return width + (self.freq_bins if self.nat else 0)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_frames(length, cfg):
    return 1 + (length - cfg.frame_len) // cfg.hop


def stft(wave, cfg=None):
    """One-sided STFT, ``[frames, fft_size // 2 + 1]`` complex."""
    cfg = cfg or FeatureConfig()
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ShapeError(f"stft expects a mono signal, got shape {list(wave.shape)}")
    if len(wave) < cfg.frame_len:
        raise ShapeError(f"signal of {len(wave)} samples is shorter than one frame "
                         f"({cfg.frame_len})")
    T = num_frames(len(wave), cfg)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(T)[:, None]
    frames = wave[idx] * hann(cfg.frame_len)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spectrogram, phase=None, cfg=None, length=None):
    """Weighted overlap-add inverse of :func:`stft`.

    With ``phase`` given, ``spectrogram`` is read as magnitudes.  Each output
    sample is divided by the summed squared window covering it, so the round
    trip is exact wherever that sum is non-zero.
    """
    cfg = cfg or FeatureConfig()
    spec = np.asarray(spectrogram)
    if phase is not None:
        phase = np.asarray(phase)
        if phase.shape != spec.shape:
            raise ShapeError(f"magnitude {list(spec.shape)} and phase {list(phase.shape)} differ")
        spec = spec * np.exp(1j * phase)
    if spec.ndim != 2 or spec.shape[1] != cfg.freq_bins:
        raise ShapeError(f"expected [frames, {cfg.freq_bins}] spectrogram, got {list(spec.shape)}")
    T = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.frame_len]
    win = hann(cfg.frame_len)
    total = cfg.frame_len + cfg.hop * (T - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        s = t * cfg.hop
        out[s:s + cfg.frame_len] += frames[t] * win
        norm[s:s + cfg.frame_len] += win ** 2
    ok = norm > 1e-10
    out[ok] /= norm[ok]
    out[~ok] = 0.0
    if length is not None:
        if length > total:
            out = np.concatenate([out, np.zeros(length - total)])
        out = out[:length]
    return out


def lps(spectrogram, floor=1e-12):
    """Natural-log power spectrum with a power floor."""
    power = np.abs(spectrogram) ** 2
    return np.log(np.maximum(power, floor))


def context_expand(features, m):
    """Concatenate frames ``t-m .. t+m`` for every frame, replicating edges."""
    features = np.asarray(features, dtype=np.float64)
    if m < 0:
        raise ValueError(f"context size must be >= 0, got {m}")
    if m == 0:
        return features.copy()
    T, D = features.shape
    padded = np.concatenate([np.repeat(features[:1], m, axis=0), features,
                             np.repeat(features[-1:], m, axis=0)])
    idx = np.arange(T)[:, None] + np.arange(2 * m + 1)[None, :]
    return padded[idx].reshape(T, (2 * m + 1) * D)


def context_windows(frames, m):
    """Like :func:`context_expand` but keeps ``[T, 2m+1, ...]`` as separate axes."""
    T = frames.shape[0]
    padded = np.concatenate([np.repeat(frames[:1], m, axis=0), frames,
                             np.repeat(frames[-1:], m, axis=0)])
    idx = np.arange(T)[:, None] + np.arange(2 * m + 1)[None, :]
    return padded[idx]


def drop_dc_bin(features):
    """Split ``[T, 257]`` features into the 256 non-DC bins and the DC column."""
    features = np.asarray(features)
    return features[:, 1:].copy(), features[:, 0].copy()


def reattach_dc_bin(output, dc_column):
    output = np.asarray(output)
    dc_column = np.asarray(dc_column)
    if dc_column.shape != (output.shape[0],):
        raise ShapeError(f"DC column of shape {list(dc_column.shape)} does not fit "
                         f"{output.shape[0]} frames")
    return np.concatenate([dc_column[:, None], output], axis=1)


def noise_estimate(lps_frames, n_frames=6):
    """Utterance-level noise estimate: mean of the first ``n_frames`` frames."""
    return np.asarray(lps_frames)[:n_frames].mean(axis=0)


def nat_augment(features, noise_est, bins=257):
    features = np.asarray(features)
    noise_est = np.asarray(noise_est)
    if noise_est.shape != (bins,):
        raise ShapeError(f"noise estimate must have width {bins}, got {list(noise_est.shape)}")
    return np.concatenate([features, np.broadcast_to(noise_est, (features.shape[0], bins))],
                          axis=1)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames, floor=1e-8):
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), floor))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


@dataclass
class GvStats:
    """Per-dimension variances of clean references and of model estimates."""

    ref_var: np.ndarray
    est_var: np.ndarray
    est_mean: np.ndarray
    floor: float = 1e-8

    @classmethod
    def fit(cls, estimates, references):
        estimates = np.asarray(estimates, dtype=np.float64)
        references = np.asarray(references, dtype=np.float64)
        return cls(references.var(axis=0), estimates.var(axis=0), estimates.mean(axis=0))

    def degenerate_dims(self):
        """Dimensions whose estimate variance is too small to rescale."""
        return np.flatnonzero(self.est_var < self.floor)


def gv_equalize(estimates, gv, scalar=False):
    """Rescale estimates about their mean so their variance matches the reference.

    With ``scalar=True`` a single factor (ratio of mean variances) is used for
    every dimension.  Dimensions listed by ``gv.degenerate_dims()`` pass
    through unscaled.
    """
    est = np.asarray(estimates, dtype=np.float64)
    if scalar:
        ev = float(np.mean(gv.est_var))
        factor = np.full(est.shape[1], math.sqrt(np.mean(gv.ref_var) / ev) if ev >= gv.floor else 1.0)
    else:
        safe = gv.est_var >= gv.floor
        factor = np.ones_like(gv.est_var)
        factor[safe] = np.sqrt(gv.ref_var[safe] / gv.est_var[safe])
    return (est - gv.est_mean) * factor + gv.est_mean


# --- objective scores -----------------------------------------------------------

def seg_snr(reference, estimate, cfg=None, low=-10.0, high=35.0):
    """Mean over frames of the per-frame SNR in dB, each clamped to [low, high]."""
    cfg = cfg or FeatureConfig()
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"reference {list(ref.shape)} and estimate {list(est.shape)} differ")
    T = num_frames(len(ref), cfg)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(T)[:, None]
    sig = (ref[idx] ** 2).sum(axis=1)
    err = ((ref - est)[idx] ** 2).sum(axis=1)
    eps = 1e-20
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10((sig + eps) / (err + eps))
    return float(np.mean(np.clip(snr, low, high)))


def log_spectral_distance(ref_lps, est_lps):
    """Mean over frames of the RMS log-spectrum difference, in dB.

    Inputs are natural-log power spectra as produced by :func:`lps`.
    """
    ref_lps = np.asarray(ref_lps)
    est_lps = np.asarray(est_lps)
    if ref_lps.shape != est_lps.shape:
        raise ShapeError(f"LPS shapes differ: {list(ref_lps.shape)} vs {list(est_lps.shape)}")
    diff_db = (10.0 / np.log(10.0)) * (ref_lps - est_lps)
    return float(np.mean(np.sqrt(np.mean(diff_db ** 2, axis=1))))


def snr_db(clean, noisy):
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return float(10 * np.log10(np.sum(clean ** 2) / np.sum(noise ** 2)))


# --- synthetic data ---------------------------------------------------------------

CLEAN_KINDS = ("harmonic", "burst", "chirp")
NOISE_KINDS = ("white", "pink", "babble")


@dataclass
class SynthSpec:
    utterances: int = 20
    snrs: list = field(default_factory=lambda: [15, 10, 5, 0])
    duration: float = 1.0
    sample_rate: int = 16000
    noise_kinds: list = field(default_factory=lambda: list(NOISE_KINDS))
    channels: int = 1
    delays: list = field(default_factory=lambda: [0])
    gains: list = field(default_factory=lambda: [1.0])
    test_fraction: float = 0.2
    valid_fraction: float = 0.1
    clean_floor_db: float = -50.0
    all_snrs: bool = True

    def __post_init__(self):
        if self.utterances < 1:
            raise ConfigError("utterances must be >= 1")
        if not self.snrs:
            raise ConfigError("snrs must be non-empty")
        bad = set(self.noise_kinds) - set(NOISE_KINDS)
        if bad:
            raise ConfigError(f"unknown noise kinds {sorted(bad)}; expected {NOISE_KINDS}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if len(self.delays) != self.channels or len(self.gains) != self.channels:
            raise ConfigError(f"delays and gains need one entry per channel ({self.channels})")

    KEYS = {"utterances": "utterances", "snrs": "snrs", "durationSec": "duration",
            "sampleRate": "sample_rate", "noiseKinds": "noise_kinds", "channels": "channels",
            "delays": "delays", "gains": "gains", "testFraction": "test_fraction",
            "validFraction": "valid_fraction", "cleanFloorDb": "clean_floor_db",
            "allSnrs": "all_snrs"}

    @classmethod
    def from_json(cls, doc):
        unknown = set(doc) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown data spec keys: {sorted(unknown)}")
        return cls(**{cls.KEYS[k]: v for k, v in doc.items()})

    def to_json(self):
        return {k: getattr(self, attr) for k, attr in self.KEYS.items()}


@dataclass
class Utterance:
    uid: str
    clean: np.ndarray      # [samples]
    noisy: np.ndarray      # [samples, channels]
    snr_db: float
    noise_kind: str
    split: str
    clean_index: int


def _envelope(n, sr, rng):
    attack = max(1, int(sr * rng.uniform(0.01, 0.04)))
    release = max(1, int(sr * rng.uniform(0.02, 0.08)))
    env = np.ones(n)
    attack, release = min(attack, n // 2), min(release, n // 2)
    env[:attack] = np.linspace(0, 1, attack)
    env[n - release:] = np.linspace(1, 0, release)
    return env


def _harmonic(n, sr, rng):
    """Voiced-like tone: tilted harmonic source through three formants, plus breath noise."""
    t = np.arange(n) / sr
    f0 = rng.uniform(100, 260)
    vib = 1 + rng.uniform(0.01, 0.04) * np.sin(2 * np.pi * rng.uniform(4, 7) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    formants = rng.uniform([400, 1000, 2200], [900, 2000, 3200])

    def envelope(freq):
        return sum(1.0 / (1 + ((freq - f) / 250.0) ** 2) for f in formants) + 0.1

    out = np.zeros(n)
    for h in range(1, int(min(7000, sr / 2 - 200) // f0) + 1):
        freq = h * f0
        out += envelope(freq) / h ** 0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    spec = np.fft.rfft(rng.normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sr)
    breath = np.fft.irfft(spec * envelope(freqs) / np.sqrt(1 + freqs / 500.0), n)
    breath *= 0.1 * np.sqrt(np.mean(out ** 2)) / (np.sqrt(np.mean(breath ** 2)) + 1e-12)
    return out + breath


def _band_noise(n, sr, rng, lo, hi):
    spec = np.fft.rfft(rng.normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0
    return np.fft.irfft(spec, n)


def _burst(n, sr, rng):
    lo = rng.uniform(1500, 3500)
    return _band_noise(n, sr, rng, lo, lo + rng.uniform(1000, 3000))


def _chirp(n, sr, rng):
    t = np.arange(n) / sr
    f_start, f_end = rng.uniform(300, 800), rng.uniform(1500, 4000)
    dur = n / sr
    phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t ** 2 / (2 * dur))
    return np.sin(phase) + 0.3 * np.sin(2 * phase)


def clean_signal(n, sr, rng, floor_db=None):
    """Speech-like test signal: voiced tones, fricative bursts, chirps and pauses.

    ``floor_db`` adds a white recording floor that many dB below the signal
    RMS, so pauses are quiet rather than exactly zero.
    """
    out = np.zeros(n)
    pos = int(sr * rng.uniform(0.03, 0.08))
    gens = {"harmonic": _harmonic, "burst": _burst, "chirp": _chirp}
    weights = np.array([0.6, 0.2, 0.2])
    while pos < n - int(0.05 * sr):
        seg = min(int(sr * rng.uniform(0.12, 0.35)), n - pos)
        kind = CLEAN_KINDS[int(rng.gen.choice(3, p=weights))]
        piece = gens[kind](seg, sr, rng)
        piece = piece / (np.sqrt(np.mean(piece ** 2)) + 1e-12)
        level = 10 ** (rng.uniform(-6, 0) / 20) * (0.5 if kind == "burst" else 1.0)
        out[pos:pos + seg] += level * piece * _envelope(seg, sr, rng)
        pos += seg + int(sr * rng.uniform(0.02, 0.12))
    out = 0.1 * out / (np.sqrt(np.mean(out ** 2)) + 1e-12)
    if floor_db is not None:
        out += 0.1 * 10 ** (floor_db / 20) * rng.normal(n)
    return out


def noise_signal(kind, n, sr, rng):
    if kind == "white":
        out = rng.normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sr)
        spec[1:] /= np.sqrt(freqs[1:] / freqs[1])
        spec[0] = 0
        out = np.fft.irfft(spec, n)
    elif kind == "babble":
        # several talkers' worth of speech-band noise, each with a syllabic envelope
        t = np.arange(n) / sr
        out = np.zeros(n)
        for _ in range(6):
            band = _band_noise(n, sr, rng, 150, 4000)
            band /= np.sqrt(np.mean(band ** 2)) + 1e-12
            rate = rng.uniform(2, 6)
            out += band * (0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def mix_at_snr(clean, noise, snr):
    """``clean + a * noise`` with ``a`` chosen so the SNR is exactly ``snr`` dB."""
    p_clean = np.mean(clean ** 2)
    p_noise = np.mean(noise ** 2)
    scale = math.sqrt(p_clean / (p_noise * 10 ** (snr / 10)))
    return clean + scale * noise


def apply_channels(signal, delays, gains):
    """Stack delayed, scaled copies of ``signal`` into ``[samples, channels]``."""
    out = np.zeros((len(signal), len(delays)))
    for b, (d, g) in enumerate(zip(delays, gains)):
        d = int(d)
        out[d:, b] = g * signal[:len(signal) - d] if d > 0 else g * signal
    return out


def split_of(index, spec):
    n_test = int(math.ceil(spec.test_fraction * spec.utterances)) if spec.test_fraction > 0 else 0
    n_valid = int(math.ceil(spec.valid_fraction * spec.utterances)) if spec.valid_fraction > 0 else 0
    if index >= spec.utterances - n_test:
        return "test"
    if index >= spec.utterances - n_test - n_valid:
        return "valid"
    return "train"


def utterance_conditions(u, spec):
    """(noise kind, SNR list) for utterance ``u``.

    With ``all_snrs`` off, every utterance gets a single condition and consecutive
    utterances walk the full kind x SNR grid, so any run of
    ``len(kinds) * len(snrs)`` utterances covers every pairing once.
    """
    nk = len(spec.noise_kinds)
    kind = spec.noise_kinds[u % nk]
    if spec.all_snrs:
        return kind, list(spec.snrs)
    return kind, [spec.snrs[(u // nk) % len(spec.snrs)]]


def synth_dataset(spec, seed=0):
    """Paired noisy/clean utterances.

    Each pair draws from its own stream seeded by ``(seed, utterance, snr
    index)`` so generation order does not matter.  Clean signals are rounded
    to float32 up front so that WAV storage does not alter them.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_json(spec)
    root = Rng(seed)
    n = int(round(spec.duration * spec.sample_rate))
    out = []
    for u in range(spec.utterances):
        clean = clean_signal(n, spec.sample_rate, root.spawn(u),
                             spec.clean_floor_db).astype(np.float32)
        c64 = clean.astype(np.float64)
        kind, snrs = utterance_conditions(u, spec)
        for snr in snrs:
            s_idx = list(spec.snrs).index(snr)
            noise = noise_signal(kind, n, spec.sample_rate, root.spawn(u, s_idx + 1))
            noisy = mix_at_snr(c64, noise, float(snr))
            multi = apply_channels(noisy, spec.delays, spec.gains)
            out.append(Utterance(uid=f"u{u:04d}_{kind}_snr{snr:g}", clean=c64, noisy=multi,
                                 snr_db=float(snr), noise_kind=kind,
                                 split=split_of(u, spec), clean_index=u))
    return out


# --- WAV I/O --------------------------------------------------------------------

def write_wav(path, data, sample_rate=16000, fmt="float"):
    data = np.asarray(data, dtype=np.float64)
    if fmt == "float":
        wavfile.write(path, sample_rate, data.astype(np.float32))
    elif fmt == "pcm16":
        wavfile.write(path, sample_rate,
                      np.clip(np.round(data * 32767), -32768, 32767).astype(np.int16))
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")


def read_wav(path):
    """Return ``(sample_rate, float64 samples)``; PCM16 is scaled to [-1, 1)."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    return rate, data

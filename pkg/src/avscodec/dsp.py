"""Deterministic signal-processing core.

Audio I/O (PCM16 mono WAV), STFT/log-mel analysis, Griffin-Lim phase
retrieval, room-impulse-response convolution and SNR-controlled mixing.
Everything here is a pure function of its inputs and safe to call from
multiple threads.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class StftMelConfig:
    """Analysis parameters for the STFT/mel front end.

    The defaults (16 kHz, 1024-sample window/FFT, 256-sample hop, 80 mel
    bands) give 62.5 analysis frames per second.
    """

    fft_size: int = 1024
    window_size: int = 1024
    hop_size: int = 256
    mel_bands: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not (0 < self.hop_size <= self.window_size <= self.fft_size):
            raise ValueError(
                "require 0 < hop_size <= window_size <= fft_size, got "
                f"({self.hop_size}, {self.window_size}, {self.fft_size})"
            )
        if self.mel_bands < 1:
            raise ValueError("mel_bands must be >= 1")
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise ValueError("require 0 <= fmin < fmax <= nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop_size

    @property
    def config_id(self) -> str:
        return (
            f"stftmel-{self.sample_rate_hz}-{self.fft_size}-{self.window_size}"
            f"-{self.hop_size}-{self.mel_bands}-{self.fmin_hz:g}-{self.fmax_hz:g}"
            f"-{self.log_floor:g}"
        )


@dataclass
class Waveform:
    """Mono time-domain audio, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.size and not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class ImpulseResponse:
    """Room impulse response used to simulate reverberation."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("impulse response must be a nonempty 1-D sequence")


@dataclass
class MelSpectrogram:
    """Log-mel representation, shape (frames, mel_bands)."""

    values: np.ndarray
    frame_rate_hz: float
    config_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"mel values must be 2-D, got shape {self.values.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def num_frames(num_samples: int, hop_size: int) -> int:
    """Frame count of the centered analysis: ceil(num_samples / hop)."""
    return -(-num_samples // hop_size)


def _hann(n: int) -> np.ndarray:
    # periodic Hann, exact COLA at hop = n/4
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_FILTERBANK_CACHE: dict[str, np.ndarray] = {}
_PINV_CACHE: dict[str, np.ndarray] = {}


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftMelConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (mel_bands, fft_size//2 + 1).

    Each filter is normalized to unit area (its weights sum to 1).
    """
    key = cfg.config_id
    fb = _FILTERBANK_CACHE.get(key)
    if fb is not None:
        return fb
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate_hz / cfg.fft_size
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.mel_bands + 2)
    )
    fb = np.zeros((cfg.mel_bands, n_bins))
    for m in range(cfg.mel_bands):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bin_hz - lo) / max(mid - lo, 1e-12)
        fall = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
        area = fb[m].sum()
        if area > 0:
            fb[m] /= area
    _FILTERBANK_CACHE[key] = fb
    return fb


def _filterbank_inverse_ops(cfg: StftMelConfig):
    key = cfg.config_id
    ops = _PINV_CACHE.get(key)
    if ops is None:
        fb = mel_filterbank(cfg)
        pinv = np.linalg.pinv(fb)
        lipschitz = float(np.linalg.eigvalsh(fb @ fb.T).max())
        ops = (pinv, lipschitz)
        _PINV_CACHE[key] = ops
    return ops


def stft(samples: np.ndarray, cfg: StftMelConfig) -> np.ndarray:
    """Centered STFT, shape (ceil(len/hop), fft_size//2 + 1), complex."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot analyze an empty waveform")
    t_frames = num_frames(x.size, cfg.hop_size)
    half = cfg.window_size // 2
    need = (t_frames - 1) * cfg.hop_size + cfg.window_size
    pad_right = max(0, need - (x.size + half))
    xp = np.pad(x, (half, pad_right))
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop_size * np.arange(t_frames)[:, None]
    frames = xp[idx] * _hann(cfg.window_size)[None, :]
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: StftMelConfig) -> np.ndarray:
    """Inverse of :func:`stft` via weighted overlap-add; returns T'*hop samples."""
    t_frames = spec.shape[0]
    win = _hann(cfg.window_size)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.window_size]
    frames *= win[None, :]
    total = (t_frames - 1) * cfg.hop_size + cfg.window_size
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for t in range(t_frames):
        start = t * cfg.hop_size
        out[start : start + cfg.window_size] += frames[t]
        norm[start : start + cfg.window_size] += win_sq
    out /= np.maximum(norm, 1e-10)
    half = cfg.window_size // 2
    result = out[half : half + t_frames * cfg.hop_size]
    if result.size < t_frames * cfg.hop_size:
        result = np.pad(result, (0, t_frames * cfg.hop_size - result.size))
    return result


def melspec(wav: Waveform, cfg: StftMelConfig) -> MelSpectrogram:
    """Log-mel power spectrogram: log(max(mel_power, log_floor))."""
    if len(wav) == 0:
        raise ValueError("cannot analyze an empty waveform")
    if wav.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: waveform {wav.sample_rate_hz} Hz, "
            f"config {cfg.sample_rate_hz} Hz"
        )
    spec = stft(wav.samples, cfg)
    power = spec.real**2 + spec.imag**2
    mel_power = power @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel_power, cfg.log_floor))
    return MelSpectrogram(values, cfg.frame_rate_hz, cfg.config_id)


def mel_to_linear_magnitude(mel: MelSpectrogram, cfg: StftMelConfig,
                            nnls_iterations: int = 400) -> np.ndarray:
    """Non-negative least-squares inversion of the mel projection.

    The analysis floor is subtracted first so silent bands invert to exact
    zeros; the NNLS problem is solved by accelerated projected gradient
    (FISTA) from a clipped pseudo-inverse start.
    """
    mel_power = np.clip(np.exp(mel.values) - cfg.log_floor, 0.0, None)
    fb = mel_filterbank(cfg)
    pinv, lipschitz = _filterbank_inverse_ops(cfg)
    p = np.clip(mel_power @ pinv.T, 0.0, None)
    y = p.copy()
    t_k = 1.0
    for _ in range(nnls_iterations):
        grad = (y @ fb.T - mel_power) @ fb
        p_new = np.clip(y - grad / lipschitz, 0.0, None)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
        y = p_new + ((t_k - 1.0) / t_new) * (p_new - p)
        p, t_k = p_new, t_new
    return np.sqrt(p)


def griffin_lim(mel: MelSpectrogram, cfg: StftMelConfig, iterations: int = 60,
                momentum: float = 0.99, refit_warmup: int = 5) -> Waveform:
    """Reconstruct a waveform whose log-mel matches `mel`.

    Momentum-accelerated phase retrieval with zero-phase initialization, so
    the result is deterministic. After a short warm-up, each iteration refits
    the per-band power of the running estimate to the mel target, which keeps
    the reconstruction faithful in the mel domain (the codec's working
    representation) rather than only in the linear spectrogram. Output length
    is exactly frames * hop_size.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    target_power = np.clip(np.exp(mel.values) - cfg.log_floor, 0.0, None)
    fb = mel_filterbank(cfg)
    fb_bin_weight = fb.sum(axis=0) + 1e-30
    magnitude = mel_to_linear_magnitude(mel, cfg)
    angles = np.ones_like(magnitude, dtype=np.complex128)
    rebuilt = np.zeros_like(angles)
    for i in range(iterations):
        previous = rebuilt
        x = istft(magnitude * angles, cfg)
        rebuilt = stft(x, cfg)[: magnitude.shape[0]]
        angles = rebuilt - (momentum / (1.0 + momentum)) * previous
        angles /= np.abs(angles) + 1e-16
        if i >= refit_warmup:
            band_power = (rebuilt.real**2 + rebuilt.imag**2) @ fb.T
            ratio = target_power / np.maximum(band_power, 1e-30)
            gain = (ratio @ fb) / fb_bin_weight
            magnitude = np.abs(rebuilt) * np.sqrt(np.clip(gain, 0.0, None))
    return Waveform(istft(magnitude * angles, cfg), cfg.sample_rate_hz)


def convolve_rir(wav: Waveform, ir: ImpulseResponse) -> Waveform:
    """Full convolution truncated to the input length, peak-matched to the dry signal."""
    if wav.sample_rate_hz != ir.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: waveform {wav.sample_rate_hz} Hz, "
            f"impulse response {ir.sample_rate_hz} Hz"
        )
    if len(wav) == 0:
        raise ValueError("cannot convolve an empty waveform")
    # direct convolution for short kernels keeps the delta-kernel identity exact
    if ir.samples.size <= 256:
        full = np.convolve(wav.samples, ir.samples)
    else:
        full = sps.fftconvolve(wav.samples, ir.samples)
    out = full[: len(wav)]
    in_peak = np.abs(wav.samples).max()
    out_peak = np.abs(out).max()
    if out_peak > 0:
        out = out * (in_peak / out_peak)
    return Waveform(out, wav.sample_rate_hz)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add `noise` scaled so the clean-to-noise power ratio equals `snr_db`.

    `snr_db = math.inf` is the no-noise sentinel and returns the clean signal.
    """
    p_clean = float(np.mean(clean.samples**2))
    if p_clean == 0.0:
        raise ValueError("clean input is silent; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(clean.samples.copy(), clean.sample_rate_hz)
    if len(noise) != len(clean):
        raise ValueError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError("sample rate mismatch between clean and noise")
    p_noise = float(np.mean(noise.samples**2))
    if p_noise == 0.0:
        raise ValueError("noise input is silent; cannot reach a finite SNR")
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + alpha * noise.samples, clean.sample_rate_hz)


def measured_snr_db(signal_part: np.ndarray, noise_part: np.ndarray) -> float:
    """SNR in dB between two already-separated components."""
    p_sig = float(np.mean(np.asarray(signal_part) ** 2))
    p_noise = float(np.mean(np.asarray(noise_part) ** 2))
    if p_noise == 0.0:
        return math.inf
    return 10.0 * math.log10(p_sig / p_noise)


def resample(wav: Waveform, target_rate_hz: int) -> Waveform:
    """Polyphase resampling to `target_rate_hz`."""
    if wav.sample_rate_hz == target_rate_hz:
        return wav
    g = math.gcd(target_rate_hz, wav.sample_rate_hz)
    up, down = target_rate_hz // g, wav.sample_rate_hz // g
    out = sps.resample_poly(wav.samples, up, down)
    return Waveform(out, target_rate_hz)


def read_wav(path) -> Waveform:
    """Read a PCM16 mono RIFF WAV file."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform) -> None:
    """Write a PCM16 mono RIFF WAV file (samples clipped to [-1, 1])."""
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate_hz)
        fh.writeframes(pcm.tobytes())

import numpy as np
import pytest
import torch

from avscodec.dsp import StftMelConfig, Waveform

torch.set_num_threads(1)


def pink_noise(n, rng, amplitude, sample_rate=16000):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate), 20.0)
    x = np.fft.irfft(spectrum / np.sqrt(freqs), n=n)
    return amplitude * x / np.sqrt((x**2).mean())


def speechlike_chirp(seed, n=32000, sample_rate=16000):
    """Harmonic sweep with a pink noise floor; stands in for voiced speech."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    f0 = 160 + 60 * np.sin(2 * np.pi * 0.6 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    x = sum(np.sin(k * phase) * np.exp(-0.4 * k) for k in range(1, 5))
    x = 0.25 * x / np.abs(x).max() + pink_noise(n, rng, 0.02, sample_rate)
    return Waveform(x, sample_rate)


@pytest.fixture(scope="session")
def default_cfg():
    return StftMelConfig()

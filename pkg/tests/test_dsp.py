import math

import numpy as np
import pytest

from avscodec import dsp
from avscodec.dsp import ImpulseResponse, StftMelConfig, Waveform

from conftest import speechlike_chirp


class TestMelspec:
    def test_silence_hits_log_floor(self, default_cfg):
        mel = dsp.melspec(Waveform(np.zeros(16000)), default_cfg)
        assert np.allclose(mel.values, np.log(default_cfg.log_floor))

    def test_three_second_clip_has_188_frames(self, default_cfg):
        wav = Waveform(np.random.default_rng(0).standard_normal(48000) * 0.1)
        mel = dsp.melspec(wav, default_cfg)
        assert mel.values.shape == (188, 80)

    def test_sine_peaks_in_band_containing_440hz(self, default_cfg):
        t = np.arange(16000) / 16000
        mel = dsp.melspec(Waveform(0.3 * np.sin(2 * np.pi * 440 * t)), default_cfg)
        band = int(mel.values.mean(axis=0).argmax())
        fb = dsp.mel_filterbank(default_cfg)
        freqs = np.arange(default_cfg.fft_size // 2 + 1) * 16000 / default_cfg.fft_size
        support = freqs[fb[band] > 0]
        assert support.min() <= 440 <= support.max()

    def test_empty_waveform_rejected(self, default_cfg):
        with pytest.raises(ValueError, match="empty"):
            dsp.melspec(Waveform(np.zeros(0)), default_cfg)

    def test_sample_rate_mismatch_rejected(self, default_cfg):
        with pytest.raises(ValueError, match="sample rate"):
            dsp.melspec(Waveform(np.zeros(8000), sample_rate_hz=8000), default_cfg)

    def test_frame_count_is_length_covariant(self, default_cfg):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = int(rng.integers(300, 50000)), int(rng.integers(300, 50000))
            fa = dsp.num_frames(a, default_cfg.hop_size)
            fb_ = dsp.num_frames(b, default_cfg.hop_size)
            fab = dsp.num_frames(a + b, default_cfg.hop_size)
            assert abs(fa + fb_ - fab) <= 1

    def test_deterministic(self, default_cfg):
        wav = speechlike_chirp(3, n=8000)
        m1 = dsp.melspec(wav, default_cfg)
        m2 = dsp.melspec(wav, default_cfg)
        assert np.array_equal(m1.values, m2.values)


class TestGriffinLim:
    def test_silence_reconstructs_near_zero(self, default_cfg):
        mel = dsp.melspec(Waveform(np.zeros(8000)), default_cfg)
        out = dsp.griffin_lim(mel, default_cfg, 10)
        assert np.abs(out.samples).max() < 1e-3

    def test_roundtrip_error_on_chirp(self, default_cfg):
        wav = speechlike_chirp(0)
        mel = dsp.melspec(wav, default_cfg)
        rec = dsp.griffin_lim(mel, default_cfg, 60)
        err = float(((mel.values - dsp.melspec(rec, default_cfg).values) ** 2).mean())
        assert err < 0.02

    def test_doubling_iterations_never_hurts(self, default_cfg):
        for seed in range(5):
            wav = speechlike_chirp(seed, n=16000)
            mel = dsp.melspec(wav, default_cfg)
            errs = []
            for iters in (10, 20, 40, 80):
                rec = dsp.griffin_lim(mel, default_cfg, iters)
                errs.append(float(((mel.values - dsp.melspec(rec, default_cfg).values) ** 2).mean()))
            for before, after in zip(errs, errs[1:]):
                assert after <= before + 1e-4

    def test_output_length_is_frames_times_hop(self, default_cfg):
        wav = speechlike_chirp(1, n=10000)
        mel = dsp.melspec(wav, default_cfg)
        out = dsp.griffin_lim(mel, default_cfg, 5)
        assert len(out) == mel.num_frames * default_cfg.hop_size
        assert abs(len(out) - len(wav)) < default_cfg.hop_size

    def test_zero_iterations_rejected(self, default_cfg):
        mel = dsp.melspec(Waveform(np.zeros(4000)), default_cfg)
        with pytest.raises(ValueError, match="iterations"):
            dsp.griffin_lim(mel, default_cfg, 0)


class TestConvolveRir:
    def test_unit_impulse_is_identity(self):
        wav = speechlike_chirp(2, n=4000)
        out = dsp.convolve_rir(wav, ImpulseResponse(np.array([1.0])))
        assert np.array_equal(out.samples, wav.samples)

    def test_delayed_impulse_shifts(self):
        wav = speechlike_chirp(2, n=4000)
        k = 7
        ir = np.zeros(k + 1)
        ir[k] = 1.0
        out = dsp.convolve_rir(wav, ImpulseResponse(ir))
        assert np.array_equal(out.samples[k:], wav.samples[:-k])
        assert np.array_equal(out.samples[:k], np.zeros(k))

    def test_two_tap_kernel_matches_direct_convolution(self):
        x = np.zeros(16)
        x[0] = 1.0
        out = dsp.convolve_rir(Waveform(x), ImpulseResponse(np.array([1.0, 0.5])))
        expected = np.zeros(16)
        expected[0], expected[1] = 1.0, 0.5
        assert np.allclose(out.samples, expected)

    def test_long_kernel_matches_direct_convolution(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(2000) * 0.2
        ir = rng.standard_normal(500) * np.exp(-np.arange(500) / 100.0)
        out = dsp.convolve_rir(Waveform(x), ImpulseResponse(ir))
        direct = np.convolve(x, ir)[:2000]
        direct *= np.abs(x).max() / np.abs(direct).max()
        assert np.allclose(out.samples, direct, atol=1e-10)

    def test_sample_rate_mismatch_rejected(self):
        with pytest.raises(ValueError, match="sample rate"):
            dsp.convolve_rir(Waveform(np.zeros(10) + 0.1),
                             ImpulseResponse(np.array([1.0]), sample_rate_hz=8000))


class TestMixAtSnr:
    @pytest.fixture()
    def pair(self):
        t = np.arange(16000) / 16000
        clean = Waveform(0.2 * np.sin(2 * np.pi * 300 * t))
        noise = Waveform(np.random.default_rng(1).standard_normal(16000) * 0.05)
        return clean, noise

    def test_zero_db_equalizes_power(self, pair):
        clean, noise = pair
        mixed = dsp.mix_at_snr(clean, noise, 0.0)
        scaled = mixed.samples - clean.samples
        p_clean = (clean.samples**2).mean()
        p_noise = (scaled**2).mean()
        assert abs(p_noise / p_clean - 1.0) < 1e-6

    def test_forty_db_gives_1e4_power_ratio(self, pair):
        clean, noise = pair
        mixed = dsp.mix_at_snr(clean, noise, 40.0)
        scaled = mixed.samples - clean.samples
        ratio = (scaled**2).mean() / (clean.samples**2).mean()
        assert abs(ratio / 1e-4 - 1.0) < 1e-6

    @pytest.mark.parametrize("snr", [0.0, 10.0, 20.0, 30.0, 40.0])
    def test_measured_snr_within_tenth_db(self, pair, snr):
        clean, noise = pair
        mixed = dsp.mix_at_snr(clean, noise, snr)
        measured = dsp.measured_snr_db(clean.samples, mixed.samples - clean.samples)
        assert abs(measured - snr) < 0.1

    def test_infinite_snr_returns_clean(self, pair):
        clean, noise = pair
        mixed = dsp.mix_at_snr(clean, noise, math.inf)
        assert np.array_equal(mixed.samples, clean.samples)

    def test_silent_clean_rejected(self, pair):
        _, noise = pair
        with pytest.raises(ValueError, match="silent"):
            dsp.mix_at_snr(Waveform(np.zeros(16000)), noise, 10.0)


class TestWavIO:
    def test_roundtrip(self, tmp_path):
        wav = speechlike_chirp(5, n=4800)
        path = tmp_path / "clip.wav"
        dsp.write_wav(path, wav)
        back = dsp.read_wav(path)
        assert back.sample_rate_hz == wav.sample_rate_hz
        assert len(back) == len(wav)
        assert np.abs(back.samples - wav.samples).max() < 1.0 / 32768

    def test_resample_length_scales(self):
        wav = speechlike_chirp(6, n=16000)
        down = dsp.resample(wav, 8000)
        assert abs(len(down) - 8000) <= 1


class TestConfigValidation:
    def test_bad_hop_rejected(self):
        with pytest.raises(ValueError):
            StftMelConfig(hop_size=2048)

    def test_bad_fmax_rejected(self):
        with pytest.raises(ValueError):
            StftMelConfig(fmax_hz=9000.0)

    def test_nonfinite_samples_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Waveform(np.array([0.0, np.nan]))

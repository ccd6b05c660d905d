import json
import math

import numpy as np
import pytest

from avscodec import dsp, noise
from avscodec.dsp import Waveform, write_wav

from conftest import speechlike_chirp


@pytest.fixture(scope="module")
def banks():
    return noise.synthetic_banks(seed=0)


@pytest.fixture(scope="module")
def clean():
    return speechlike_chirp(0)


class TestSimulate:
    def test_empty_banks_passthrough(self, clean):
        recipe = noise.NoiseRecipe(banks=noise.NoiseBanks(), seed=1)
        triple = noise.simulate(clean, recipe)
        assert np.array_equal(triple.noisy.samples, clean.samples)
        assert triple.provenance.snr_db == math.inf
        assert triple.provenance.rir_id is None

    def test_same_seed_is_bit_identical(self, clean, banks):
        recipe = noise.NoiseRecipe(banks=banks, seed=7)
        t1 = noise.simulate(clean, recipe)
        t2 = noise.simulate(clean, recipe)
        assert np.array_equal(t1.noisy.samples, t2.noisy.samples)
        assert t1.provenance == t2.provenance

    def test_lengths_match(self, clean, banks):
        recipe = noise.NoiseRecipe(banks=banks, seed=3)
        triple = noise.simulate(clean, recipe)
        assert len(triple.noisy) == len(clean)

    @pytest.mark.parametrize("snr", [0.0, 10.0, 20.0, 30.0, 40.0])
    def test_background_snr_contract(self, clean, banks, snr):
        bg_only = noise.NoiseBanks(backgrounds=banks.backgrounds)
        recipe = noise.NoiseRecipe(banks=bg_only, snr_range_db=(snr, snr), seed=11)
        triple = noise.simulate(clean, recipe)
        _, comps = noise.regenerate(clean, recipe, triple.provenance)
        assert abs(comps.background_snr_db() - snr) < 0.1
        assert triple.provenance.snr_db == pytest.approx(snr)

    def test_regenerate_is_bit_exact(self, clean, banks):
        recipe = noise.NoiseRecipe(banks=banks, snr_range_db=(0.0, 40.0), seed=23)
        rng = np.random.default_rng(99)
        for _ in range(5):
            triple = noise.simulate(clean, recipe, rng)
            again, comps = noise.regenerate(clean, recipe, triple.provenance)
            assert np.array_equal(again.noisy.samples, triple.noisy.samples)
            rebuilt = comps.reverberant + comps.interferer + comps.background
            assert np.allclose(rebuilt, triple.noisy.samples, atol=1e-12)
            if triple.provenance.background_id is not None:
                assert abs(comps.background_snr_db() - triple.provenance.snr_db) < 0.1

    def test_interferer_mixed_at_zero_db(self, clean, banks):
        int_only = noise.NoiseBanks(interferers=banks.interferers)
        recipe = noise.NoiseRecipe(banks=int_only, p_interferer=1.0, seed=5)
        triple = noise.simulate(clean, recipe)
        _, comps = noise.regenerate(clean, recipe, triple.provenance)
        p_rev = (comps.reverberant**2).mean()
        p_int = (comps.interferer**2).mean()
        assert abs(10 * math.log10(p_rev / p_int)) < 0.1

    def test_interferer_probability_zero_never_fires(self, clean, banks):
        recipe = noise.NoiseRecipe(banks=banks, p_interferer=0.0, seed=6)
        rng = np.random.default_rng(0)
        for _ in range(5):
            triple = noise.simulate(clean, recipe, rng)
            assert triple.provenance.interferer_id is None

    def test_clean_recoverable_at_high_snr(self, clean, banks):
        # cross-correlation peak with the reverberant clean should beat any bank noise
        recipe = noise.NoiseRecipe(banks=noise.NoiseBanks(rirs=banks.rirs,
                                                          backgrounds=banks.backgrounds),
                                   snr_range_db=(20.0, 20.0), seed=13)
        triple = noise.simulate(clean, recipe)
        _, comps = noise.regenerate(clean, recipe, triple.provenance)

        def xcorr_peak(a, b):
            a = (a - a.mean()) / (a.std() + 1e-12)
            b = (b - b.mean()) / (b.std() + 1e-12)
            return np.abs(np.correlate(a, b, mode="same")).max() / len(a)

        target = xcorr_peak(triple.noisy.samples, comps.reverberant)
        others = [
            xcorr_peak(triple.noisy.samples, noise._fit_length(c.samples, len(clean),
                                                               np.random.default_rng(0)))
            for c in banks.backgrounds
        ]
        assert target > max(others)


class TestBanks:
    def test_synthetic_banks_deterministic(self):
        b1 = noise.synthetic_banks(seed=4)
        b2 = noise.synthetic_banks(seed=4)
        for a, b in zip(b1.rirs + b1.interferers + b1.backgrounds,
                        b2.rirs + b2.interferers + b2.backgrounds):
            assert a.clip_id == b.clip_id
            assert np.array_equal(a.samples, b.samples)

    def test_rirs_have_unit_direct_path(self, banks):
        for rir in banks.rirs:
            assert rir.samples[0] == 1.0

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "banks.jsonl"
        path.write_text("")
        built = noise.build_bank(path)
        assert built.rirs == [] and built.interferers == [] and built.backgrounds == []

    def test_manifest_loading_and_resampling(self, tmp_path):
        rng = np.random.default_rng(2)
        records = []
        for i, kind in enumerate(["rir", "interferer", "background"]):
            wav_path = tmp_path / f"{kind}.wav"
            write_wav(wav_path, Waveform(rng.standard_normal(8000) * 0.1, sample_rate_hz=8000))
            records.append({"id": f"{kind}-{i}", "path": str(wav_path), "kind": kind})
        manifest = tmp_path / "banks.jsonl"
        manifest.write_text("\n".join(json.dumps(r) for r in records) + "\n")
        built = noise.build_bank(manifest, target_rate_hz=16000)
        assert len(built.rirs) == len(built.interferers) == len(built.backgrounds) == 1
        # 8 kHz -> 16 kHz doubles the length (within one sample)
        assert abs(built.rirs[0].samples.size - 16000) <= 1

    def test_unknown_kind_rejected(self, tmp_path):
        manifest = tmp_path / "banks.jsonl"
        manifest.write_text(json.dumps({"id": "x", "path": "y.wav", "kind": "huh"}) + "\n")
        with pytest.raises(ValueError, match="kind"):
            noise.build_bank(manifest)

    def test_empty_mandatory_bank_rejected(self, clean):
        recipe = noise.NoiseRecipe(banks=noise.NoiseBanks(), seed=1)
        empty = noise.NoiseBanks().interferers
        with pytest.raises(ValueError, match="empty"):
            noise._fit_length(np.zeros(0), 10, np.random.default_rng(0))

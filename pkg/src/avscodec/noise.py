"""Reproducible corruption pipeline: reverb, interfering clips, SNR-controlled background.

Corruption of one clip is a pure function of (clean, recipe, case seed), so
every generated sample can be regenerated bit-exactly from its provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import (
    DEFAULT_SAMPLE_RATE,
    ImpulseResponse,
    Waveform,
    convolve_rir,
    measured_snr_db,
    mix_at_snr,
    read_wav,
    resample,
)


@dataclass
class BankClip:
    clip_id: str
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE


@dataclass
class NoiseBanks:
    rirs: list[BankClip] = field(default_factory=list)
    interferers: list[BankClip] = field(default_factory=list)
    backgrounds: list[BankClip] = field(default_factory=list)


@dataclass
class NoiseRecipe:
    """Corruption plan: which banks to draw from and at what levels."""

    banks: NoiseBanks
    snr_range_db: tuple[float, float] = (0.0, 40.0)
    p_interferer: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if not (0 <= lo <= hi) and not math.isinf(lo):
            raise ValueError(f"invalid snr range {self.snr_range_db}")
        if not 0.0 <= self.p_interferer <= 1.0:
            raise ValueError("p_interferer must be in [0, 1]")


@dataclass
class Provenance:
    """Everything needed to regenerate one noisy sample bit-exactly."""

    rir_id: str | None
    interferer_id: str | None
    background_id: str | None
    snr_db: float
    seed: int


@dataclass
class NoisyTriple:
    clean: Waveform
    noisy: Waveform
    provenance: Provenance


@dataclass
class SimComponents:
    """The separated parts of one simulation, for SNR re-measurement."""

    reverberant: np.ndarray
    interferer: np.ndarray
    background: np.ndarray

    @property
    def pre_background(self) -> np.ndarray:
        return self.reverberant + self.interferer

    def background_snr_db(self) -> float:
        return measured_snr_db(self.pre_background, self.background)


def _fit_length(samples: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Loop/truncate to n samples starting from a random circular offset."""
    if samples.size == 0:
        raise ValueError("empty bank clip")
    offset = int(rng.integers(samples.size))
    reps = -(-(offset + n) // samples.size)
    return np.tile(samples, reps)[offset : offset + n]


def _simulate_seeded(clean: Waveform, recipe: NoiseRecipe, case_seed: int):
    rng = np.random.default_rng(case_seed)
    banks = recipe.banks
    n = len(clean)

    rir_id = None
    reverberant = clean.samples
    if banks.rirs:
        rir_clip = banks.rirs[int(rng.integers(len(banks.rirs)))]
        rir_id = rir_clip.clip_id
        reverberant = convolve_rir(
            clean, ImpulseResponse(rir_clip.samples, rir_clip.sample_rate_hz)
        ).samples

    interferer_id = None
    interferer = np.zeros(n)
    use_interferer = bool(banks.interferers) and rng.random() < recipe.p_interferer
    if use_interferer:
        clip = banks.interferers[int(rng.integers(len(banks.interferers)))]
        interferer_id = clip.clip_id
        raw = _fit_length(clip.samples, n, rng)
        p_rev = float(np.mean(reverberant**2))
        p_int = float(np.mean(raw**2))
        if p_int > 0 and p_rev > 0:
            # interferers enter at 0 dB relative to the reverberant target
            interferer = raw * math.sqrt(p_rev / p_int)

    signal_part = reverberant + interferer
    background_id = None
    background = np.zeros(n)
    snr_db = math.inf
    if banks.backgrounds:
        clip = banks.backgrounds[int(rng.integers(len(banks.backgrounds)))]
        background_id = clip.clip_id
        raw = _fit_length(clip.samples, n, rng)
        lo, hi = recipe.snr_range_db
        snr_db = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        mixed = mix_at_snr(
            Waveform(signal_part, clean.sample_rate_hz),
            Waveform(raw, clean.sample_rate_hz),
            snr_db,
        )
        background = mixed.samples - signal_part
        noisy = mixed.samples
    else:
        noisy = signal_part

    triple = NoisyTriple(
        clean=clean,
        noisy=Waveform(noisy, clean.sample_rate_hz),
        provenance=Provenance(rir_id, interferer_id, background_id, snr_db, case_seed),
    )
    return triple, SimComponents(reverberant, interferer, background)


def simulate(clean: Waveform, recipe: NoiseRecipe,
             rng: np.random.Generator | None = None) -> NoisyTriple:
    """Corrupt one clean clip according to the recipe.

    noisy = mix_at_snr(reverberant(clean) + interferer, background, snr) with
    the SNR drawn from the recipe range. The case seed drawn from `rng` (or
    the recipe seed) is recorded in the provenance; `regenerate` reproduces
    the sample bit-exactly from it.
    """
    if rng is None:
        rng = np.random.default_rng(recipe.seed)
    case_seed = int(rng.integers(2**32))
    triple, _ = _simulate_seeded(clean, recipe, case_seed)
    return triple


def regenerate(clean: Waveform, recipe: NoiseRecipe,
               provenance: Provenance) -> tuple[NoisyTriple, SimComponents]:
    """Re-run a recorded simulation, returning the separated components too."""
    triple, components = _simulate_seeded(clean, recipe, provenance.seed)
    if triple.provenance != provenance:
        raise ValueError("provenance does not match the given recipe/banks")
    return triple, components


def build_bank(manifest_path, target_rate_hz: int = DEFAULT_SAMPLE_RATE) -> NoiseBanks:
    """Load a line-delimited manifest of {id, path, kind} records into banks.

    kind is one of rir / interferer / background; audio is resampled to the
    target rate.
    """
    banks = NoiseBanks()
    slots = {"rir": banks.rirs, "interferer": banks.interferers, "background": banks.backgrounds}
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind not in slots:
                raise ValueError(f"{manifest_path}:{line_no}: unknown kind {kind!r}")
            wav = read_wav(rec["path"])
            wav = resample(wav, target_rate_hz)
            slots[kind].append(BankClip(str(rec["id"]), wav.samples, target_rate_hz))
    return banks


def synthetic_banks(seed: int = 0, n_rirs: int = 4, n_interferers: int = 4,
                    n_backgrounds: int = 4, sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                    clip_seconds: float = 2.0) -> NoiseBanks:
    """Self-contained fallback banks so the pipeline runs with zero downloads.

    RIRs are exponentially decaying white noise with a unit direct path,
    interferers are sine mixtures, backgrounds are colored noise.
    """
    rng = np.random.default_rng(seed)
    banks = NoiseBanks()
    n = int(clip_seconds * sample_rate_hz)

    for i in range(n_rirs):
        length = int(sample_rate_hz * rng.uniform(0.15, 0.3))
        decay_s = rng.uniform(0.02, 0.08)
        t = np.arange(length) / sample_rate_hz
        tail = rng.standard_normal(length) * np.exp(-t / decay_s) * 0.3
        tail[0] = 1.0
        banks.rirs.append(BankClip(f"rir-{i}", tail, sample_rate_hz))

    t = np.arange(n) / sample_rate_hz
    for i in range(n_interferers):
        mix = np.zeros(n)
        for _ in range(int(rng.integers(2, 5))):
            freq = rng.uniform(200.0, 2000.0)
            phase = rng.uniform(0, 2 * np.pi)
            mix += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * freq * t + phase)
        mix *= 0.1 / max(1e-9, np.abs(mix).max())
        banks.interferers.append(BankClip(f"tone-{i}", mix, sample_rate_hz))

    for i in range(n_backgrounds):
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate_hz), 1.0)
        alpha = [0.0, 1.0, 2.0, 0.5][i % 4]
        shaped = np.fft.irfft(spectrum / freqs ** (alpha / 2.0), n=n)
        rms = float(np.sqrt(np.mean(shaped**2)))
        banks.backgrounds.append(BankClip(f"noise-{i}", shaped * (0.05 / rms), sample_rate_hz))
    return banks

"""Objective speech metrics: STOI, frequency-weighted segmental SNR, MCD, Mel-L2.

All metrics are deterministic and expect time-aligned pairs; no automatic
alignment is attempted. Mel-L2 is the same function used as the training
loss so reported numbers are loss-comparable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct

from .dsp import MelSpectrogram, StftMelConfig, Waveform, mel_filterbank, melspec

MCD_SCALE = 10.0 * math.sqrt(2.0) / math.log(10.0)

_STOI_RATE = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_FFT = 512
_STOI_BANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEGMENT = 30
_STOI_BETA = -15.0
_STOI_DYN_RANGE = 40.0


def mel_l2(ref, deg):
    """Mean squared error over all (frame, band) cells of two log-mel matrices.

    Works on numpy arrays, torch tensors, or MelSpectrogram objects; this is
    the single implementation shared by evaluation and the training losses.
    """
    if isinstance(ref, MelSpectrogram):
        ref = ref.values
    if isinstance(deg, MelSpectrogram):
        deg = deg.values
    if ref.shape != deg.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {deg.shape}")
    diff = ref - deg
    return (diff * diff).mean()


def _check_pair(ref: Waveform, deg: Waveform) -> None:
    if len(ref) != len(deg):
        raise ValueError(f"length mismatch: ref {len(ref)}, deg {len(deg)}")
    if ref.sample_rate_hz != deg.sample_rate_hz:
        raise ValueError("sample rate mismatch between ref and deg")


def _resample_to(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return x
    from scipy.signal import resample_poly

    g = math.gcd(rate_in, rate_out)
    return resample_poly(x, rate_out // g, rate_in // g)


def _frame(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if x.size < size:
        return np.empty((0, size))
    n = 1 + (x.size - size) // hop
    idx = np.arange(size)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _third_octave_bands(fft_size: int, rate: int):
    freqs = np.arange(fft_size // 2 + 1) * rate / fft_size
    centers = _STOI_MIN_FREQ * 2.0 ** (np.arange(_STOI_BANDS) / 3.0)
    mat = np.zeros((_STOI_BANDS, freqs.size))
    for k, cf in enumerate(centers):
        lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        mat[k, (freqs >= lo) & (freqs < hi)] = 1.0
    return mat


def stoi(ref: Waveform, deg: Waveform) -> float:
    """Short-time objective intelligibility, approximately in [0, 1].

    One-third-octave short-time correlation between the reference and the
    normalized, clipped degraded signal, averaged over bands and segments.
    """
    _check_pair(ref, deg)
    x = _resample_to(ref.samples, ref.sample_rate_hz, _STOI_RATE)
    y = _resample_to(deg.samples, deg.sample_rate_hz, _STOI_RATE)

    win = np.hanning(_STOI_FRAME + 2)[1:-1]
    xf = _frame(x, _STOI_FRAME, _STOI_HOP) * win
    yf = _frame(y, _STOI_FRAME, _STOI_HOP) * win
    if xf.shape[0] < _STOI_SEGMENT:
        raise ValueError("clip too short for STOI (need >= 384 ms)")

    # drop frames more than 40 dB below the loudest reference frame
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    keep = energy > energy.max() - _STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    if xf.shape[0] < _STOI_SEGMENT:
        raise ValueError("clip too short for STOI after silence removal")

    spec_x = np.abs(np.fft.rfft(xf, n=_STOI_FFT, axis=1)) ** 2
    spec_y = np.abs(np.fft.rfft(yf, n=_STOI_FFT, axis=1)) ** 2
    bands = _third_octave_bands(_STOI_FFT, _STOI_RATE)
    bx = np.sqrt(spec_x @ bands.T).T  # (bands, frames)
    by = np.sqrt(spec_y @ bands.T).T

    clip_gain = 10.0 ** (-_STOI_BETA / 20.0)
    corrs = []
    for m in range(_STOI_SEGMENT, bx.shape[1] + 1):
        xs = bx[:, m - _STOI_SEGMENT : m]
        ys = by[:, m - _STOI_SEGMENT : m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + 1e-12
        )
        ys = np.minimum(ys * alpha, xs * (1.0 + clip_gain))
        xs = xs - xs.mean(axis=1, keepdims=True)
        ys = ys - ys.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xs, axis=1) * np.linalg.norm(ys, axis=1) + 1e-12
        corrs.append((xs * ys).sum(axis=1) / denom)
    return float(np.mean(corrs))


def _mel_cepstra(wav: Waveform, cfg: StftMelConfig, n_coeffs: int) -> np.ndarray:
    mel = melspec(wav, cfg).values
    ceps = dct(mel, type=2, norm="ortho", axis=1)
    return ceps[:, 1 : n_coeffs + 1]  # energy coefficient 0 excluded


def mcd(ref: Waveform, deg: Waveform, cfg: StftMelConfig | None = None,
        n_coeffs: int = 13) -> float:
    """Mel-cepstral distortion over cepstral coefficients 1..13, in dB-like units."""
    _check_pair(ref, deg)
    cfg = cfg or StftMelConfig(sample_rate_hz=ref.sample_rate_hz)
    c_ref = _mel_cepstra(ref, cfg, n_coeffs)
    c_deg = _mel_cepstra(deg, cfg, n_coeffs)
    dist = np.linalg.norm(c_ref - c_deg, axis=1)
    return float(MCD_SCALE * dist.mean())


def fw_ssnr(ref: Waveform, deg: Waveform, cfg: StftMelConfig | None = None,
            snr_floor_db: float = -10.0, snr_ceil_db: float = 35.0) -> float:
    """Frequency-weighted segmental SNR in dB.

    Per segment and mel band, SNR of the reference magnitude against the
    magnitude error, clamped to [-10, 35] dB, weighted by reference band
    energy and averaged over segments.
    """
    _check_pair(ref, deg)
    cfg = cfg or StftMelConfig(sample_rate_hz=ref.sample_rate_hz)
    if float(np.mean(ref.samples**2)) == 0.0:
        raise ValueError("silent reference; segmental SNR is undefined")
    fb = mel_filterbank(cfg)

    def band_mags(w: Waveform) -> np.ndarray:
        from .dsp import stft

        spec = stft(w.samples, cfg)
        power = spec.real**2 + spec.imag**2
        return np.sqrt(power @ fb.T)

    mag_r = band_mags(ref)
    mag_d = band_mags(deg)
    weights = mag_r**2
    err = (mag_r - mag_d) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(weights / err)
    snr = np.clip(np.nan_to_num(snr, nan=snr_ceil_db, posinf=snr_ceil_db), snr_floor_db, snr_ceil_db)
    seg_weight = weights.sum(axis=1)
    valid = seg_weight > 1e-14
    if not valid.any():
        raise ValueError("silent reference; segmental SNR is undefined")
    seg_snr = (weights * snr).sum(axis=1)[valid] / seg_weight[valid]
    return float(seg_snr.mean())


@dataclass
class MetricReport:
    """One evaluated clip pair; pesq stays None unless an external tool fills it."""

    clip_id: str
    stoi: float
    fw_ssnr_db: float
    mcd: float
    mel_l2: float
    pesq: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


METRIC_COLUMNS = ("stoi", "fw_ssnr_db", "mcd", "mel_l2")
HIGHER_IS_BETTER = {"stoi": True, "fw_ssnr_db": True, "mcd": False, "mel_l2": False, "pesq": True}


def evaluate_pair(ref: Waveform, deg: Waveform, clip_id: str = "",
                  cfg: StftMelConfig | None = None) -> MetricReport:
    """Compute all metrics on one aligned (reference, degraded) pair."""
    cfg = cfg or StftMelConfig(sample_rate_hz=ref.sample_rate_hz)
    return MetricReport(
        clip_id=clip_id,
        stoi=stoi(ref, deg),
        fw_ssnr_db=fw_ssnr(ref, deg, cfg),
        mcd=mcd(ref, deg, cfg),
        mel_l2=float(mel_l2(melspec(ref, cfg), melspec(deg, cfg))),
    )


def aggregate(reports: list[MetricReport]) -> dict[str, float]:
    """Mean of each metric over clips; pesq included only when all rows carry it."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_COLUMNS}
    if all(r.pesq is not None for r in reports):
        out["pesq"] = float(np.mean([r.pesq for r in reports]))
    return out


def write_reports(path, reports: list[MetricReport]) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path) -> list[MetricReport]:
    reports = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                reports.append(MetricReport(**json.loads(line)))
    return reports


def format_table(rows: dict[str, dict[str, float]]) -> str:
    """Render {row_label: aggregate dict} as an aligned summary table."""
    cols = list(METRIC_COLUMNS)
    if any("pesq" in agg for agg in rows.values()):
        cols = ["pesq"] + cols
    header = ["model"] + [c.upper() for c in cols]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for label, agg in rows.items():
        cells = [f"{label:>12}"] + [
            f"{agg[c]:>12.5f}" if c in agg else f"{'-':>12}" for c in cols
        ]
        lines.append("  ".join(cells))
    return "\n".join(lines)

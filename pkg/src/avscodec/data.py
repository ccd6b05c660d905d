"""Dataset plumbing: manifests, the AVSV video container, and the synthetic toy corpus.

The toy corpus stands in for real capture data: "speech" is a sequence of
formant-shaped harmonic tones with a per-speaker fundamental, and "video" is
a rendered bar whose position encodes the current tone's pitch class and
whose width encodes onset recency. The visual stream therefore carries the
content signal on its own, which is the property the audio-visual model is
supposed to exploit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav

VIDEO_MAGIC = b"AVSV"
VIDEO_VERSION = 1
_VIDEO_HEADER = struct.Struct(">4sBIIIIf")


@dataclass
class VideoClip:
    """Frame tensor (T_v, height, width, channels) with values in [0, 1]."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be 4-D (T, H, W, C), got {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.fps


def write_video_container(path, clip: VideoClip) -> None:
    """Serialize a clip as magic/version/dims/fps header plus row-major uint8 frames."""
    t, h, w, c = clip.frames.shape
    payload = np.clip(np.round(clip.frames * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_VIDEO_HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, t, h, w, c, clip.fps))
        fh.write(payload.tobytes())


def read_video_container(path) -> VideoClip:
    with open(path, "rb") as fh:
        header = fh.read(_VIDEO_HEADER.size)
        if len(header) < _VIDEO_HEADER.size:
            raise ValueError(f"{path}: truncated video header")
        magic, version, t, h, w, c, fps = _VIDEO_HEADER.unpack(header)
        if magic != VIDEO_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VIDEO_VERSION:
            raise ValueError(f"{path}: unsupported video container version {version}")
        payload = fh.read()
    expected = t * h * w * c
    if len(payload) != expected:
        raise ValueError(f"{path}: payload size {len(payload)} != {expected}")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, c)
    return VideoClip(frames.astype(np.float32) / 255.0, fps)


@dataclass
class ManifestEntry:
    clip_id: str
    speaker_id: str
    wav_path: str
    video_path: str | None = None
    split: str = "train"


VALID_SPLITS = ("train", "val", "test")


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            rec = {"clip_id": e.clip_id, "speaker_id": e.speaker_id,
                   "wav_path": e.wav_path, "split": e.split}
            if e.video_path is not None:
                rec["video_path"] = e.video_path
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    """Load and validate a line-delimited dataset manifest."""
    entries = []
    seen = set()
    base = Path(path).parent
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            entry = ManifestEntry(
                clip_id=str(rec["clip_id"]),
                speaker_id=str(rec["speaker_id"]),
                wav_path=str(rec["wav_path"]),
                video_path=rec.get("video_path"),
                split=rec.get("split", "train"),
            )
            if entry.clip_id in seen:
                raise ValueError(f"{path}:{line_no}: duplicate clip_id {entry.clip_id!r}")
            seen.add(entry.clip_id)
            if entry.split not in VALID_SPLITS:
                raise ValueError(f"{path}:{line_no}: invalid split {entry.split!r}")
            if check_files:
                for p in filter(None, (entry.wav_path, entry.video_path)):
                    if not (base / p).exists() and not Path(p).exists():
                        raise ValueError(f"{path}:{line_no}: missing file {p}")
            entries.append(entry)
    return entries


def resolve_path(manifest_path, rel_path: str) -> Path:
    p = Path(rel_path)
    return p if p.exists() else Path(manifest_path).parent / rel_path


def load_entry(manifest_path, entry: ManifestEntry) -> tuple[Waveform, VideoClip | None]:
    wav = read_wav(resolve_path(manifest_path, entry.wav_path))
    video = None
    if entry.video_path is not None:
        video = read_video_container(resolve_path(manifest_path, entry.video_path))
    return wav, video


@dataclass
class ToyCorpusSpec:
    """Parameters of the synthetic audio-visual corpus."""

    n_speakers: int = 1
    clips_per_speaker: int = 24
    clip_seconds: float = 0.96
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    video_fps: float = 12.5
    video_size: int = 48
    pitch_classes: int = 8
    base_f0_hz: float = 110.0
    f0_step: float = 2.0 ** 0.5  # per-speaker fundamental ratio
    note_seconds: tuple[float, float] = (0.22, 0.4)
    lead_in_s: float = 0.064
    hop_size: int = 256  # note boundaries snap to this grid
    onset_window_s: float = 0.12
    val_clips_per_speaker: int = 4
    test_clips_per_speaker: int = 0
    seed: int = 0

    def speaker_f0(self, speaker: int) -> float:
        return self.base_f0_hz * self.f0_step**speaker


@dataclass
class ToyNote:
    start_s: float
    duration_s: float
    pitch_class: int


def _snap(spec: ToyCorpusSpec, seconds: float) -> float:
    # note boundaries on the analysis hop grid keep transition patterns repeatable
    hops = max(1, round(seconds * spec.sample_rate_hz / spec.hop_size))
    return hops * spec.hop_size / spec.sample_rate_hz


def _synth_notes(spec: ToyCorpusSpec, rng: np.random.Generator) -> list[ToyNote]:
    notes = []
    t = _snap(spec, spec.lead_in_s)
    while t < spec.clip_seconds:
        dur = _snap(spec, float(rng.uniform(*spec.note_seconds)))
        notes.append(ToyNote(t, dur, int(rng.integers(spec.pitch_classes))))
        t += dur
    return notes


def _render_tone(spec: ToyCorpusSpec, f0: float, note: ToyNote, rng: np.random.Generator) -> np.ndarray:
    rate = spec.sample_rate_hz
    n = int(round(note.duration_s * rate))
    t = np.arange(n) / rate
    formant_hz = 500.0 + 320.0 * note.pitch_class
    x = np.zeros(n)
    k = 1
    while k * f0 < 4000.0:
        weight = math.exp(-((k * f0 - formant_hz) ** 2) / (2 * 260.0**2)) + 0.04 / k
        x += weight * np.sin(2 * np.pi * k * f0 * t)
        k += 1
    # raised-cosine attack/release to avoid clicks
    edge = min(n // 4, int(0.015 * rate))
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        x[:edge] *= ramp
        x[-edge:] *= ramp[::-1]
    rms = math.sqrt(float(np.mean(x**2))) or 1.0
    return x * (0.08 / rms)


def synth_toy_clip(spec: ToyCorpusSpec, speaker: int,
                   rng: np.random.Generator) -> tuple[Waveform, VideoClip, list[ToyNote]]:
    """One synthetic audio-visual clip for the given speaker."""
    notes = _synth_notes(spec, rng)
    total = int(round(spec.clip_seconds * spec.sample_rate_hz))
    samples = np.zeros(total)
    f0 = spec.speaker_f0(speaker)
    for note in notes:
        start = int(round(note.start_s * spec.sample_rate_hz))
        tone = _render_tone(spec, f0, note, rng)
        end = min(start + tone.size, total)
        samples[start:end] += tone[: end - start]
    video = render_toy_video(spec, notes)
    return Waveform(samples, spec.sample_rate_hz), video, notes


def note_at(notes: list[ToyNote], t: float) -> ToyNote | None:
    for note in notes:
        if note.start_s <= t < note.start_s + note.duration_s:
            return note
    if notes and t >= notes[-1].start_s:
        return notes[-1]
    return None  # lead-in silence


def render_toy_video(spec: ToyCorpusSpec, notes: list[ToyNote]) -> VideoClip:
    """Render the bar video: x-position = pitch class, width = onset recency.

    During silence no bar is drawn.
    """
    n_frames = int(round(spec.clip_seconds * spec.video_fps))
    size = spec.video_size
    frames = np.zeros((n_frames, size, size, 1), dtype=np.float32)
    for i in range(n_frames):
        t = i / spec.video_fps
        note = note_at(notes, t)
        if note is None:
            continue
        center = (note.pitch_class + 0.5) / spec.pitch_classes * size
        width = 10 if (t - note.start_s) < spec.onset_window_s else 5
        lo = max(0, int(round(center - width / 2)))
        hi = min(size, int(round(center + width / 2)))
        frames[i, :, lo:hi, 0] = 1.0
    return VideoClip(frames, spec.video_fps)


def bar_positions(video: VideoClip) -> np.ndarray:
    """Horizontal center of mass of each frame; the decoder-free content probe."""
    frames = video.frames[..., 0]
    mass = frames.sum(axis=1)  # (T, W)
    xs = np.arange(video.frames.shape[2])
    total = mass.sum(axis=1)
    total[total == 0] = 1.0
    return (mass * xs).sum(axis=1) / total


def pitch_probe_accuracy(spec: ToyCorpusSpec, videos: list[VideoClip],
                         labels: list[np.ndarray]) -> float:
    """Fit a linear map from bar position to pitch class; return holdout accuracy.

    Silent frames (label -1, no bar) are excluded.
    """
    xs, ys = [], []
    for video, lab in zip(videos, labels):
        pos = bar_positions(video)
        keep = lab >= 0
        xs.append(pos[keep])
        ys.append(lab[keep])
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(float)
    half = x.size // 2
    a = np.polyfit(x[:half], y[:half], 1)
    pred = np.rint(np.polyval(a, x[half:]))
    return float((pred == y[half:]).mean())


def frame_pitch_labels(spec: ToyCorpusSpec, notes: list[ToyNote]) -> np.ndarray:
    n_frames = int(round(spec.clip_seconds * spec.video_fps))
    labels = []
    for i in range(n_frames):
        note = note_at(notes, i / spec.video_fps)
        labels.append(-1 if note is None else note.pitch_class)
    return np.array(labels)


def gen_toy_corpus(spec: ToyCorpusSpec, out_dir) -> Path:
    """Write the synthetic corpus (WAVs, AVSV containers, manifest); returns the manifest path.

    Fixed spec.seed -> byte-identical corpus.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for speaker in range(spec.n_speakers):
        for clip in range(spec.clips_per_speaker):
            wav, video, _ = synth_toy_clip(spec, speaker, rng)
            clip_id = f"s{speaker:02d}c{clip:03d}"
            wav_name = f"{clip_id}.wav"
            vid_name = f"{clip_id}.avsv"
            write_wav(out / wav_name, wav)
            write_video_container(out / vid_name, video)
            n_eval = spec.val_clips_per_speaker + spec.test_clips_per_speaker
            if clip >= spec.clips_per_speaker - spec.test_clips_per_speaker:
                split = "test"
            elif clip >= spec.clips_per_speaker - n_eval:
                split = "val"
            else:
                split = "train"
            entries.append(ManifestEntry(clip_id, f"spk{speaker}", wav_name, vid_name, split))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def make_toy_clips(spec: ToyCorpusSpec, speaker: int, count: int,
                   rng: np.random.Generator) -> list[tuple[Waveform, VideoClip, list[ToyNote]]]:
    """In-memory clips, for tests that do not need files on disk."""
    return [synth_toy_clip(spec, speaker, rng) for _ in range(count)]

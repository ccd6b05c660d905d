"""Conditional auto-regressive enhancement model.

A noisy-audio stream and a visual stream are fused per frame into features
f_av; a PreNet+LSTM head then generates code indices one frame at a time,
conditioned on f_av and the previously generated code vectors. Training is
teacher-forced against the frozen codec's codes with a straight-through mel
reconstruction loss plus an auxiliary per-head cross-entropy.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import CHECKPOINT_FORMAT_VERSION, CodecModel, TrainingDiverged, codec_encode
from .data import VideoClip
from .dsp import MelSpectrogram, StftMelConfig, Waveform, griffin_lim, melspec, num_frames
from .metrics import mel_l2
from .nets import (
    ConvBlock1d,
    ConvBlock2d,
    ResidualBlock1d,
    ResidualBlock2d,
    generator_dropout,
    init_parameters,
    state_fingerprint,
)
from .quantizer import (
    Codebook,
    GumbelConfig,
    anneal_temperature,
    gumbel_sample,
    lookup,
    make_generator,
    straight_through,
)

MODES = ("full", "audio_only", "vision_only", "no_ar")


@dataclass
class EnhancerConfig:
    """Architecture of the audio-visual auto-regressive model."""

    mel_bands: int = 80
    audio_channels: int = 512
    n_audio_residual: int = 3
    kernel_size: int = 5
    vis3d_filters: int = 64
    vis2d_channels: int = 64
    vis2d_blocks: int = 4
    vis1d_channels: int = 512
    n_vis1d_residual: int = 3
    fused_channels: int = 512
    fusion_kernel: int = 5
    fusion_residual_kernel: int = 3
    prenet_hidden: int = 256
    prenet_out: int = 128
    prenet_dropout: float = 0.5
    ar_hidden: int = 512
    speaker_dim: int = 0
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def toy_enhancer_config(**overrides) -> EnhancerConfig:
    """Small configuration for CPU-scale tests and the synthetic corpus."""
    cfg = dict(audio_channels=48, vis3d_filters=12, vis2d_channels=24, vis2d_blocks=2,
               vis1d_channels=48, n_vis1d_residual=1, fused_channels=64,
               prenet_hidden=96, prenet_out=64, ar_hidden=96)
    cfg.update(overrides)
    return EnhancerConfig(**cfg)


@dataclass
class ArTrainConfig:
    steps: int = 400
    batch_size: int = 8
    learning_rate: float = 3e-4
    grad_clip_norm: float = 1.0
    ce_weight: float = 0.5
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_anneal_frac: float = 0.5
    scheduled_sampling_p: float = 0.0  # final own-prediction rate; 0 = pure teacher forcing
    scheduled_sampling_ramp_frac: float = 0.5
    lr_decay_at_frac: float = 0.7
    lr_decay_factor: float = 0.25
    seed: int = 0
    log_every: int = 25


class AudioStreamNet(nn.Module):
    """Noisy mel frames (optionally with a speaker embedding) -> audio features."""

    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        in_dim = cfg.mel_bands + cfg.speaker_dim
        self.stem = ConvBlock1d(in_dim, cfg.audio_channels, cfg.kernel_size)
        self.residual = nn.ModuleList(
            ResidualBlock1d(cfg.audio_channels, cfg.kernel_size)
            for _ in range(cfg.n_audio_residual)
        )

    def forward(self, mel_norm: torch.Tensor) -> torch.Tensor:
        h = self.stem(mel_norm.transpose(1, 2))
        for block in self.residual:
            h = block(h)
        return h.transpose(1, 2)


def resample_hold(features: torch.Tensor, t_out: int) -> torch.Tensor:
    """Temporal resampling by index holding: out[t] = in[floor(t * T_in / T_out)].

    Exactly invariant to frame-duplication refinements of the input, so clips
    at different frame rates produce identical upsampled features.
    """
    t_in = features.shape[1]
    idx = torch.div(torch.arange(t_out) * t_in, t_out, rounding_mode="floor")
    return features[:, idx.clamp(max=t_in - 1)]


class VisualStreamNet(nn.Module):
    """3D conv front end, per-frame 2D residual features, temporal upsampling, 1D stack."""

    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        self.cfg = cfg
        # replicate padding keeps features of a static scene constant in time
        self.conv3d = nn.Conv3d(1, cfg.vis3d_filters, (5, 7, 7), stride=(1, 2, 2),
                                padding=(2, 3, 3), padding_mode="replicate")
        self.norm3d = nn.BatchNorm3d(cfg.vis3d_filters)
        self.pool = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        blocks = [ConvBlock2d(cfg.vis3d_filters, cfg.vis2d_channels)]
        blocks += [ResidualBlock2d(cfg.vis2d_channels) for _ in range(cfg.vis2d_blocks - 1)]
        self.frame_extractor = nn.Sequential(*blocks)
        self.stem1d = ConvBlock1d(cfg.vis2d_channels, cfg.vis1d_channels, cfg.kernel_size,
                                  padding_mode="replicate")
        self.residual1d = nn.ModuleList(
            ResidualBlock1d(cfg.vis1d_channels, cfg.kernel_size, padding_mode="replicate")
            for _ in range(cfg.n_vis1d_residual)
        )

    def forward(self, video: torch.Tensor, t_frames: int) -> torch.Tensor:
        # video: (B, T_v, H, W, C) in [0, 1] -> (B, t_frames, vis1d_channels)
        b, t_v = video.shape[0], video.shape[1]
        x = video.mean(dim=-1, keepdim=True).permute(0, 4, 1, 2, 3)  # grayscale, (B,1,T,H,W)
        h = self.pool(F.relu(self.norm3d(self.conv3d(x))))
        h = h.permute(0, 2, 1, 3, 4).reshape(b * t_v, h.shape[1], h.shape[3], h.shape[4])
        h = self.frame_extractor(h)
        h = h.mean(dim=(2, 3)).reshape(b, t_v, -1)
        h = resample_hold(h, t_frames)
        h = self.stem1d(h.transpose(1, 2))
        for block in self.residual1d:
            h = block(h)
        return h.transpose(1, 2)


class FusionNet(nn.Module):
    """Per-frame concatenation of the streams through a conv + residual stack."""

    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        in_dim = cfg.audio_channels + cfg.vis1d_channels
        self.stem = ConvBlock1d(in_dim, cfg.fused_channels, cfg.fusion_kernel)
        self.residual = ResidualBlock1d(cfg.fused_channels, cfg.fusion_residual_kernel)

    def forward(self, audio_f: torch.Tensor, visual_f: torch.Tensor) -> torch.Tensor:
        if audio_f.shape[1] != visual_f.shape[1]:
            raise ValueError(
                f"stream length mismatch: audio {audio_f.shape[1]}, visual {visual_f.shape[1]}"
            )
        h = torch.cat([audio_f, visual_f], dim=-1).transpose(1, 2)
        return self.residual(self.stem(h)).transpose(1, 2)


class PreNet(nn.Module):
    """Two fully-connected layers with dropout, applied to previous-frame code vectors."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.dropout = dropout

    def forward(self, x, training: bool, generator=None):
        h = generator_dropout(F.relu(self.fc1(x)), self.dropout, training, generator)
        return generator_dropout(F.relu(self.fc2(h)), self.dropout, training, generator)


class ARHead(nn.Module):
    """PreNet + two stacked LSTMs + projection to per-head code logits."""

    def __init__(self, cfg: EnhancerConfig, heads: int, entries_per_head: int, code_dim: int):
        super().__init__()
        self.heads = heads
        self.entries_per_head = entries_per_head
        frame_dim = heads * code_dim
        self.prenet = PreNet(frame_dim, cfg.prenet_hidden, cfg.prenet_out, cfg.prenet_dropout)
        self.lstm1 = nn.LSTM(cfg.fused_channels + cfg.prenet_out, cfg.ar_hidden, batch_first=True)
        self.lstm2 = nn.LSTM(cfg.ar_hidden, cfg.ar_hidden, batch_first=True)
        self.proj = nn.Linear(cfg.ar_hidden, heads * entries_per_head)
        self.start = nn.Parameter(torch.zeros(frame_dim))
        self.prenet_out_dim = cfg.prenet_out

    def _prev_features(self, prev_vecs, use_prev, training, generator):
        if not use_prev:
            shape = prev_vecs.shape[:-1] + (self.prenet_out_dim,)
            return torch.zeros(shape, dtype=prev_vecs.dtype)
        return self.prenet(prev_vecs, training, generator)

    def forward(self, fav: torch.Tensor, prev_vecs: torch.Tensor, use_prev: bool = True,
                training: bool = False, generator=None) -> torch.Tensor:
        # fav: (B, T, fused), prev_vecs: (B, T, heads*code_dim) -> (B, T, heads, entries)
        p = self._prev_features(prev_vecs, use_prev, training, generator)
        h, _ = self.lstm1(torch.cat([fav, p], dim=-1))
        h, _ = self.lstm2(h)
        logits = self.proj(h)
        b, t, _ = logits.shape
        return logits.reshape(b, t, self.heads, self.entries_per_head)

    def step(self, fav_t: torch.Tensor, prev_vec: torch.Tensor, state, use_prev: bool = True):
        # single-frame step for free-running generation; fav_t, prev_vec: (1, dim)
        p = self._prev_features(prev_vec, use_prev, training=False, generator=None)
        x = torch.cat([fav_t, p], dim=-1).unsqueeze(1)
        s1, s2 = state if state is not None else (None, None)
        h, s1 = self.lstm1(x, s1)
        h, s2 = self.lstm2(h, s2)
        logits = self.proj(h[:, 0])
        return logits.reshape(self.heads, self.entries_per_head), (s1, s2)


class EnhancerModel(nn.Module):
    """Audio stream, visual stream, fusion and AR head over a frozen codebook copy."""

    def __init__(self, cfg: EnhancerConfig, codec: CodecModel, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.dsp_cfg = codec.dsp_cfg
        self.mel_mean = codec.cfg.mel_mean
        self.mel_scale = codec.cfg.mel_scale
        self.heads = codec.cfg.heads
        self.entries_per_head = codec.cfg.entries_per_head
        self.code_dim = codec.cfg.code_dim
        self.version = CHECKPOINT_FORMAT_VERSION
        gen = make_generator(seed)
        self.audio_net = AudioStreamNet(cfg) if cfg.mode != "vision_only" else None
        self.visual_net = VisualStreamNet(cfg) if cfg.mode != "audio_only" else None
        self.fusion = FusionNet(cfg)
        self.ar_head = ARHead(cfg, self.heads, self.entries_per_head, self.code_dim)
        for module in (self.audio_net, self.visual_net, self.fusion, self.ar_head):
            if module is not None:
                init_parameters(module, gen)
        # frozen copy of the codec's codebook for feeding back generated codes
        self.codebook = Codebook(self.heads, self.entries_per_head, self.code_dim)
        with torch.no_grad():
            self.codebook.vectors.copy_(codec.codebook.vectors)
        self.codebook.vectors.requires_grad_(False)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.mel_mean) / self.mel_scale

    def audio_features(self, mel_norm: torch.Tensor,
                       speaker: torch.Tensor | None = None) -> torch.Tensor:
        if self.audio_net is None:
            b, t = mel_norm.shape[0], mel_norm.shape[1]
            return torch.zeros(b, t, self.cfg.audio_channels)
        x = mel_norm
        if self.cfg.speaker_dim:
            if speaker is None:
                raise ValueError("model is speaker-conditioned but no embedding was given")
            x = torch.cat([x, speaker.unsqueeze(1).expand(-1, x.shape[1], -1)], dim=-1)
        return self.audio_net(x)

    def visual_features(self, video: torch.Tensor, t_frames: int) -> torch.Tensor:
        if self.visual_net is None:
            return torch.zeros(video.shape[0], t_frames, self.cfg.vis1d_channels)
        return self.visual_net(video, t_frames)

    def fused_features(self, mel_norm, video, speaker=None):
        t_frames = mel_norm.shape[1]
        audio_f = self.audio_features(mel_norm, speaker)
        if video is None:
            visual_f = torch.zeros(mel_norm.shape[0], t_frames, self.cfg.vis1d_channels)
        else:
            visual_f = self.visual_features(video, t_frames)
        return self.fusion(audio_f, visual_f)


def visual_features(net: VisualStreamNet, video: VideoClip,
                    frame_rate_hz: float = 62.5) -> np.ndarray:
    """Inference-mode visual features for one clip, resampled to the audio frame rate."""
    if video.num_frames < 1:
        raise ValueError("empty video clip")
    t_frames = -(-int(round(video.duration_s * frame_rate_hz * 1e6)) // 10**6)
    net.eval()
    with torch.no_grad():
        frames = torch.from_numpy(video.frames).unsqueeze(0)
        return net(frames, t_frames)[0].numpy()


def fuse(model: EnhancerModel, audio_f: np.ndarray, visual_f: np.ndarray) -> np.ndarray:
    """Inference-mode fusion of precomputed per-frame stream features."""
    model.eval()
    with torch.no_grad():
        a = torch.from_numpy(np.asarray(audio_f, dtype=np.float32)).unsqueeze(0)
        v = torch.from_numpy(np.asarray(visual_f, dtype=np.float32)).unsqueeze(0)
        return model.fusion(a, v)[0].numpy()


def _video_tensor(video: VideoClip) -> torch.Tensor:
    return torch.from_numpy(video.frames).unsqueeze(0)


def _check_alignment(model: EnhancerModel, t_audio: int, video: VideoClip | None) -> None:
    if video is None:
        if model.mode not in ("audio_only",):
            raise ValueError(f"mode {model.mode!r} requires a video clip")
        return
    t_video = -(-int(round(video.duration_s * model.dsp_cfg.frame_rate_hz * 1e6)) // 10**6)
    if abs(t_audio - t_video) > 1:
        raise ValueError(
            f"unaligned inputs: audio spans {t_audio} frames, video spans {t_video}"
        )


def ar_generate(model: EnhancerModel, noisy: Waveform, video: VideoClip | None) -> np.ndarray:
    """Free-running generation of (T', heads) code indices for one noisy clip."""
    mel = melspec(noisy, model.dsp_cfg)
    t_frames = mel.num_frames
    _check_alignment(model, t_frames, video)
    model.eval()
    with torch.no_grad():
        mel_norm = model.normalize(torch.from_numpy(mel.values).float()).unsqueeze(0)
        video_t = _video_tensor(video) if video is not None else None
        fav = model.fused_features(mel_norm, video_t)[0]
        use_prev = model.mode != "no_ar"
        prev = model.ar_head.start.unsqueeze(0)
        state = None
        out = torch.empty(t_frames, model.heads, dtype=torch.long)
        for t in range(t_frames):
            logits, state = model.ar_head.step(fav[t].unsqueeze(0), prev, state, use_prev)
            idx = logits.argmax(dim=-1)
            out[t] = idx
            prev = lookup(model.codebook, idx.unsqueeze(0))
    return out.numpy().astype(np.int64)


def _check_codec_match(model: EnhancerModel, codec: CodecModel) -> None:
    same = (
        model.heads == codec.cfg.heads
        and model.entries_per_head == codec.cfg.entries_per_head
        and model.code_dim == codec.cfg.code_dim
        and model.dsp_cfg.config_id == codec.dsp_cfg.config_id
    )
    if not same:
        raise ValueError("codec/enhancer configuration mismatch")


def enhance_mel(model: EnhancerModel, codec: CodecModel, noisy: Waveform,
                video: VideoClip | None) -> MelSpectrogram:
    """Predicted clean log-mels: generate codes, decode through the codec."""
    from .codec import codec_decode

    _check_codec_match(model, codec)
    return codec_decode(codec, ar_generate(model, noisy, video))


def enhance(model: EnhancerModel, codec: CodecModel, noisy: Waveform,
            video: VideoClip | None, gl_iterations: int = 60) -> Waveform:
    """Full enhancement: generate codes, decode, re-synthesize audio."""
    return griffin_lim(enhance_mel(model, codec, noisy, video), codec.dsp_cfg, gl_iterations)


@dataclass
class ArStepRecord:
    step: int
    loss: float
    mel_loss: float
    ce_loss: float
    temperature: float


@dataclass
class ArTrainResult:
    model: EnhancerModel
    history: list[ArStepRecord] = field(default_factory=list)


@dataclass
class _PreparedTriples:
    noisy_mels: torch.Tensor      # (N, T, mel)
    target_mels: torch.Tensor     # (N, T, mel)
    teacher_idx: torch.Tensor     # (N, T, heads)
    videos: torch.Tensor | None   # (N, T_v, H, W, C)
    speakers: torch.Tensor | None  # (N, speaker_dim)


def prepare_triples(triples, codec: CodecModel,
                    speakers: list[np.ndarray] | None = None) -> _PreparedTriples:
    """Precompute mels, teacher codes and video tensors for teacher-forced training."""
    if not triples:
        raise ValueError("empty training dataset")
    t_min = min(num_frames(len(noisy), codec.dsp_cfg.hop_size) for _, noisy, _ in triples)
    noisy_mels, target_mels, teacher, videos = [], [], [], []
    for clean, noisy, video in triples:
        noisy_mels.append(torch.from_numpy(melspec(noisy, codec.dsp_cfg).values[:t_min]).float())
        target_mels.append(torch.from_numpy(melspec(clean, codec.dsp_cfg).values[:t_min]).float())
        teacher.append(torch.from_numpy(codec_encode(codec, clean)[:t_min]))
        videos.append(torch.from_numpy(video.frames) if video is not None else None)
    video_t = None
    if all(v is not None for v in videos):
        t_v = min(v.shape[0] for v in videos)
        video_t = torch.stack([v[:t_v] for v in videos])
    spk = None
    if speakers is not None:
        spk = torch.from_numpy(np.stack(speakers)).float()
    return _PreparedTriples(torch.stack(noisy_mels), torch.stack(target_mels),
                            torch.stack(teacher), video_t, spk)


def train_ar(triples, codec: CodecModel, cfg: ArTrainConfig,
             enh_cfg: EnhancerConfig | None = None,
             model: EnhancerModel | None = None,
             speakers: list[np.ndarray] | None = None) -> ArTrainResult:
    """Teacher-forced training of the enhancer against a frozen codec.

    `triples` is a list of (clean, noisy, video) tuples; video may be None in
    audio_only mode. The codec's weights and buffers are bit-identical before
    and after.
    """
    enh_cfg = enh_cfg or (model.cfg if model is not None else EnhancerConfig())
    if model is None:
        model = EnhancerModel(enh_cfg, codec, seed=cfg.seed)
    codec_before = state_fingerprint(codec)
    codec.eval()  # freeze batch-norm statistics
    frozen_flags = [p.requires_grad for p in codec.parameters()]
    for p in codec.parameters():
        p.requires_grad_(False)
    try:
        prepared = prepare_triples(triples, codec, speakers)
        data_n = prepared.noisy_mels.shape[0]
        gen = make_generator(cfg.seed + 0xA11)
        teacher_vecs = lookup(model.codebook, prepared.teacher_idx)
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
        decay_at = int(cfg.steps * cfg.lr_decay_at_frac)
        ramp_steps = max(1, int(cfg.steps * cfg.scheduled_sampling_ramp_frac))
        history: list[ArStepRecord] = []
        model.train()
        for step in range(cfg.steps):
            if step == decay_at and cfg.lr_decay_factor != 1.0:
                for group in optimizer.param_groups:
                    group["lr"] = cfg.learning_rate * cfg.lr_decay_factor
            tau = anneal_temperature(step, cfg.steps, cfg.tau_start, cfg.tau_end,
                                     cfg.tau_anneal_frac)
            ss_p = cfg.scheduled_sampling_p * min(1.0, step / ramp_steps)
            picks = torch.randint(data_n, (min(cfg.batch_size, data_n),), generator=gen)
            noisy_mel = model.normalize(prepared.noisy_mels[picks])
            target_mel = prepared.target_mels[picks]
            t_idx = prepared.teacher_idx[picks]
            t_vecs = teacher_vecs[picks]
            video = prepared.videos[picks] if prepared.videos is not None else None
            spk = prepared.speakers[picks] if prepared.speakers is not None else None

            fav = model.fused_features(noisy_mel, video, spk)
            start = model.ar_head.start.unsqueeze(0).unsqueeze(0).expand(len(picks), 1, -1)
            prev = torch.cat([start, t_vecs[:, :-1]], dim=1)
            if ss_p > 0:
                with torch.no_grad():
                    first = model.ar_head(fav, prev, model.mode != "no_ar", False, None)
                    own = lookup(model.codebook, first.argmax(dim=-1))
                own_prev = torch.cat([start, own[:, :-1]], dim=1)
                flip = (torch.rand(prev.shape[:2], generator=gen) < ss_p).unsqueeze(-1)
                prev = torch.where(flip, own_prev, prev)
            logits = model.ar_head(fav, prev, use_prev=model.mode != "no_ar",
                                   training=True, generator=gen)

            ce = F.cross_entropy(logits.reshape(-1, model.entries_per_head),
                                 t_idx.reshape(-1)) * model.heads
            soft, _ = gumbel_sample(logits, GumbelConfig(temperature=tau), rng=gen)
            vectors = straight_through(soft, model.codebook)
            if spk is not None:
                pred_mel = codec.decode_vectors(vectors, spk)
            else:
                pred_mel = codec.decode_vectors(vectors)
            mel_loss = ((pred_mel - target_mel) ** 2).mean()
            loss = mel_loss + cfg.ce_weight * ce
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite enhancer loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            optimizer.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                history.append(ArStepRecord(step, float(loss.detach()),
                                            float(mel_loss.detach()), float(ce.detach()), tau))
        model.eval()
    finally:
        for p, flag in zip(codec.parameters(), frozen_flags):
            p.requires_grad_(flag)
    if state_fingerprint(codec) != codec_before:
        raise RuntimeError("frozen codec was modified during enhancer training")
    return ArTrainResult(model=model, history=history)


def eval_enhancer(model: EnhancerModel, codec: CodecModel, triples) -> float:
    """Mean mel_l2 between predicted and ground-truth mels over (clean, noisy, video) triples."""
    errors = []
    for clean, noisy, video in triples:
        pred = enhance_mel(model, codec, noisy, video)
        target = melspec(clean, codec.dsp_cfg)
        t = min(pred.num_frames, target.num_frames)
        errors.append(float(mel_l2(pred.values[:t], target.values[:t])))
    return float(np.mean(errors))


def ar_generate_speaker(model: EnhancerModel, noisy: Waveform, video: VideoClip | None,
                        speaker_emb: np.ndarray) -> np.ndarray:
    """ar_generate for speaker-conditioned models."""
    mel = melspec(noisy, model.dsp_cfg)
    _check_alignment(model, mel.num_frames, video)
    model.eval()
    with torch.no_grad():
        mel_norm = model.normalize(torch.from_numpy(mel.values).float()).unsqueeze(0)
        spk = torch.from_numpy(np.asarray(speaker_emb, dtype=np.float32)).unsqueeze(0)
        video_t = _video_tensor(video) if video is not None else None
        fav = model.fused_features(mel_norm, video_t, spk)[0]
        use_prev = model.mode != "no_ar"
        prev = model.ar_head.start.unsqueeze(0)
        state = None
        out = torch.empty(mel.num_frames, model.heads, dtype=torch.long)
        for t in range(mel.num_frames):
            logits, state = model.ar_head.step(fav[t].unsqueeze(0), prev, state, use_prev)
            idx = logits.argmax(dim=-1)
            out[t] = idx
            prev = lookup(model.codebook, idx.unsqueeze(0))
    return out.numpy().astype(np.int64)


def teacher_forced_indices(model: EnhancerModel, codec: CodecModel, clean: Waveform,
                           noisy: Waveform, video: VideoClip | None) -> np.ndarray:
    """Argmax indices under teacher forcing; equals free running on an overfit model."""
    model.eval()
    with torch.no_grad():
        prepared = prepare_triples([(clean, noisy, video)], codec)
        mel_norm = model.normalize(prepared.noisy_mels)
        fav = model.fused_features(mel_norm, prepared.videos)
        t_vecs = lookup(model.codebook, prepared.teacher_idx)
        start = model.ar_head.start.unsqueeze(0).unsqueeze(0)
        prev = torch.cat([start, t_vecs[:, :-1]], dim=1)
        logits = model.ar_head(fav, prev, use_prev=model.mode != "no_ar")
        return logits.argmax(dim=-1)[0].numpy().astype(np.int64)


def save_enhancer(path, model: EnhancerModel, extra: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "enhancer",
            "enhancer_config": asdict(model.cfg),
            "dsp_config": asdict(model.dsp_cfg),
            "codec_dims": {
                "heads": model.heads,
                "entries_per_head": model.entries_per_head,
                "code_dim": model.code_dim,
                "mel_mean": model.mel_mean,
                "mel_scale": model.mel_scale,
            },
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_enhancer(path, codec: CodecModel) -> tuple[EnhancerModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "enhancer":
        raise ValueError(f"not an enhancer checkpoint: {payload.get('kind')!r}")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    model = EnhancerModel(EnhancerConfig(**payload["enhancer_config"]), codec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def clone_enhancer(model: EnhancerModel) -> EnhancerModel:
    return copy.deepcopy(model)

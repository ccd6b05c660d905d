"""Generative speech codec: conv encoder, multi-head codebook, LSTM spectrogram decoder.

The encoder maps log-mel frames to per-head code logits; codes are selected
by Gumbel-softmax sampling during training and by argmax at inference. The
decoder reconstructs log-mels from the concatenated code vectors and a
Griffin-Lim stage turns them back into audio. Training minimizes the mean
squared log-mel reconstruction error on clean speech.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .dsp import MelSpectrogram, StftMelConfig, Waveform, griffin_lim, melspec, num_frames
from .metrics import mel_l2
from .nets import ConvBlock1d, ResidualBlock1d, init_parameters
from .quantizer import (
    Codebook,
    GumbelConfig,
    anneal_temperature,
    gumbel_sample,
    lookup,
    make_generator,
    straight_through,
)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class CodecConfig:
    """Architecture of the speech codec."""

    mel_bands: int = 80
    channels: int = 512
    n_residual: int = 3
    kernel_size: int = 5
    lstm_modules: int = 3
    lstm_hidden: int = 512
    heads: int = 4
    entries_per_head: int = 256
    code_dim: int = 64
    # fixed affine normalization of log-mel inputs/outputs
    mel_mean: float = -6.0
    mel_scale: float = 5.0


def toy_codec_config(**overrides) -> CodecConfig:
    """Small configuration for CPU-scale tests and the synthetic corpus."""
    cfg = dict(channels=80, lstm_hidden=128, heads=4, entries_per_head=64, code_dim=32)
    cfg.update(overrides)
    return CodecConfig(**cfg)


@dataclass
class CodecTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 3e-4
    grad_clip_norm: float = 1.0
    crop_seconds: float = 3.0
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_anneal_frac: float = 0.5
    # final stretch trains against the exact argmax code assignments used at
    # inference, removing the Gumbel-noise train/eval gap
    noiseless_from_frac: float = 0.5
    lr_decay_at_frac: float = 0.7
    lr_decay_factor: float = 0.25
    seed: int = 0
    log_every: int = 25


@dataclass
class StepRecord:
    step: int
    loss: float
    temperature: float


@dataclass
class CodecTrainResult:
    model: "CodecModel"
    history: list[StepRecord] = field(default_factory=list)
    optimizer_state: dict | None = None


class EncoderNet(nn.Module):
    """Mel frames -> per-head code logits, temporal length preserved."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBlock1d(cfg.mel_bands, cfg.channels, cfg.kernel_size)
        self.residual = nn.ModuleList(
            ResidualBlock1d(cfg.channels, cfg.kernel_size) for _ in range(cfg.n_residual)
        )
        self.proj = nn.Conv1d(cfg.channels, cfg.heads * cfg.entries_per_head, 1)

    def forward(self, mel_norm: torch.Tensor) -> torch.Tensor:
        # (B, T, mel) -> (B, T, heads, entries)
        h = self.stem(mel_norm.transpose(1, 2))
        for block in self.residual:
            h = block(h)
        logits = self.proj(h).transpose(1, 2)
        b, t, _ = logits.shape
        return logits.reshape(b, t, self.cfg.heads, self.cfg.entries_per_head)


class SpectrogramDecoderNet(nn.Module):
    """Code vectors -> normalized mel frames.

    Mirrors the encoder with three LSTM modules after the residual stack.
    Convolutions are causal so decoding can in principle stream.
    """

    def __init__(self, cfg: CodecConfig, conditioning_dim: int = 0):
        super().__init__()
        self.cfg = cfg
        self.conditioning_dim = conditioning_dim
        in_dim = cfg.heads * cfg.code_dim + conditioning_dim
        self.stem = ConvBlock1d(in_dim, cfg.channels, cfg.kernel_size, causal=True)
        self.residual = nn.ModuleList(
            ResidualBlock1d(cfg.channels, cfg.kernel_size, causal=True)
            for _ in range(cfg.n_residual)
        )
        sizes = [cfg.channels] + [cfg.lstm_hidden] * cfg.lstm_modules
        self.lstms = nn.ModuleList(
            nn.LSTM(sizes[i], sizes[i + 1], batch_first=True) for i in range(cfg.lstm_modules)
        )
        self.proj = nn.Linear(cfg.lstm_hidden, cfg.mel_bands)

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        # (B, T, heads*code_dim [+cond]) -> (B, T, mel)
        h = self.stem(vectors.transpose(1, 2))
        for block in self.residual:
            h = block(h)
        h = h.transpose(1, 2)
        for lstm in self.lstms:
            h, _ = lstm(h)
        return self.proj(h)


class CodecModel(nn.Module):
    """Encoder, codebook and spectrogram decoder plus the analysis config."""

    def __init__(self, cfg: CodecConfig | None = None,
                 dsp_cfg: StftMelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        self.dsp_cfg = dsp_cfg or StftMelConfig()
        self.version = CHECKPOINT_FORMAT_VERSION
        gen = make_generator(seed)
        self.encoder = EncoderNet(self.cfg)
        self.codebook = Codebook(self.cfg.heads, self.cfg.entries_per_head,
                                 self.cfg.code_dim, generator=gen)
        self.decoder = SpectrogramDecoderNet(self.cfg)
        init_parameters(self.encoder, gen)
        init_parameters(self.decoder, gen)

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.cfg.mel_mean) / self.cfg.mel_scale

    def denormalize(self, mel_norm: torch.Tensor) -> torch.Tensor:
        return mel_norm * self.cfg.mel_scale + self.cfg.mel_mean

    def encode_logits(self, mel_raw: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.normalize(mel_raw))

    def decode_vectors(self, vectors: torch.Tensor) -> torch.Tensor:
        """Code vectors -> log-mel frames on the raw (denormalized) scale."""
        return self.denormalize(self.decoder(vectors))


def _mel_tensor(wav: Waveform, dsp_cfg: StftMelConfig) -> torch.Tensor:
    return torch.from_numpy(melspec(wav, dsp_cfg).values).float()


def encoder_logits(model: CodecModel, mel: MelSpectrogram) -> np.ndarray:
    """Inference-mode encoder logits for one clip, shape (T', heads, entries)."""
    model.eval()
    with torch.no_grad():
        values = torch.from_numpy(np.asarray(mel.values)).float().unsqueeze(0)
        return model.encode_logits(values)[0].numpy()


def codec_encode(model: CodecModel, wav: Waveform) -> np.ndarray:
    """Deterministic encoding of a waveform into (T', heads) code indices."""
    if len(wav) < model.dsp_cfg.window_size:
        raise ValueError(
            f"clip of {len(wav)} samples is shorter than one analysis window "
            f"({model.dsp_cfg.window_size})"
        )
    mel = melspec(wav, model.dsp_cfg)
    logits = encoder_logits(model, mel)
    return logits.argmax(axis=-1).astype(np.int64)


def codec_decode(model: CodecModel, indices: np.ndarray) -> MelSpectrogram:
    """Decode (T', heads) code indices into a log-mel spectrogram."""
    idx = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    if idx.ndim != 2 or idx.shape[1] != model.cfg.heads:
        raise ValueError(f"indices must have shape (T', {model.cfg.heads})")
    model.eval()
    with torch.no_grad():
        vectors = lookup(model.codebook, idx).unsqueeze(0)
        mel = model.decode_vectors(vectors)[0].double().numpy()
    return MelSpectrogram(mel, model.dsp_cfg.frame_rate_hz, model.dsp_cfg.config_id)


def synthesize(model: CodecModel, indices: np.ndarray, iterations: int = 60) -> Waveform:
    """Decode indices and run Griffin-Lim synthesis."""
    return griffin_lim(codec_decode(model, indices), model.dsp_cfg, iterations)


def _prepare_training_mels(clips: list[Waveform], dsp_cfg: StftMelConfig) -> list[torch.Tensor]:
    if not clips:
        raise ValueError("empty training dataset")
    return [_mel_tensor(c, dsp_cfg) for c in clips]


def _sample_batch(mels: list[torch.Tensor], crop_frames: int, batch_size: int,
                  gen: torch.Generator, floor_value: float):
    """Random crops with a padding mask for clips shorter than the crop.

    A batch size >= the dataset covers every clip once (full-batch steps).
    """
    if batch_size >= len(mels):
        picks = torch.arange(len(mels))
    else:
        picks = torch.randint(len(mels), (batch_size,), generator=gen)
    bands = mels[0].shape[1]
    batch = torch.full((len(picks), crop_frames, bands), floor_value)
    mask = torch.zeros(len(picks), crop_frames)
    for i, pick in enumerate(picks.tolist()):
        mel = mels[pick]
        t = mel.shape[0]
        if t > crop_frames:
            off = int(torch.randint(t - crop_frames + 1, (1,), generator=gen))
            batch[i] = mel[off : off + crop_frames]
            mask[i] = 1.0
        else:
            batch[i, :t] = mel
            mask[i, :t] = 1.0
    return batch, mask


def _masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    diff = (pred - target) ** 2 * mask.unsqueeze(-1)
    return diff.sum() / (mask.sum() * pred.shape[-1])


def train_codec(clips: list[Waveform], train_cfg: CodecTrainConfig,
                codec_cfg: CodecConfig | None = None,
                dsp_cfg: StftMelConfig | None = None,
                model: CodecModel | None = None) -> CodecTrainResult:
    """Train (or continue training) the codec on clean clips.

    Pass `model` to fine-tune an existing codec instead of training from
    scratch; with `train_cfg.steps == 0` the initialized model is returned
    unchanged.
    """
    dsp_cfg = dsp_cfg or (model.dsp_cfg if model is not None else StftMelConfig())
    if model is None:
        model = CodecModel(codec_cfg or CodecConfig(), dsp_cfg, seed=train_cfg.seed)
    mels = _prepare_training_mels(clips, dsp_cfg)
    gen = make_generator(train_cfg.seed + 0x5EED)
    crop_frames = max(1, round(train_cfg.crop_seconds * dsp_cfg.frame_rate_hz))
    floor_value = float(np.log(dsp_cfg.log_floor))

    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    noiseless_from = int(train_cfg.steps * train_cfg.noiseless_from_frac)
    decay_at = int(train_cfg.steps * train_cfg.lr_decay_at_frac)
    history: list[StepRecord] = []
    model.train()
    for step in range(train_cfg.steps):
        if step == decay_at and train_cfg.lr_decay_factor != 1.0:
            for group in optimizer.param_groups:
                group["lr"] = train_cfg.learning_rate * train_cfg.lr_decay_factor
        tau = anneal_temperature(step, train_cfg.steps, train_cfg.tau_start,
                                 train_cfg.tau_end, train_cfg.tau_anneal_frac)
        batch, mask = _sample_batch(mels, crop_frames, train_cfg.batch_size, gen, floor_value)
        logits = model.encode_logits(batch)
        rng = None if step >= noiseless_from else gen
        soft, _ = gumbel_sample(logits, GumbelConfig(temperature=tau), rng=rng)
        vectors = straight_through(soft, model.codebook)
        pred = model.decode_vectors(vectors)
        loss = _masked_mse(pred, batch, mask)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite codec loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip_norm)
        optimizer.step()
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            history.append(StepRecord(step, float(loss.detach()), tau))
    model.eval()
    return CodecTrainResult(model=model, history=history,
                            optimizer_state=optimizer.state_dict() if train_cfg.steps else None)


def eval_codec(model: CodecModel, clips: list[Waveform]) -> float:
    """Mean deterministic round-trip error: mel_l2(decode(encode(x)), melspec(x))."""
    errors = []
    for wav in clips:
        target = melspec(wav, model.dsp_cfg)
        rebuilt = codec_decode(model, codec_encode(model, wav))
        errors.append(float(mel_l2(rebuilt, target)))
    return float(np.mean(errors))


@dataclass
class ProjectionResult:
    indices: np.ndarray
    residual: float
    history: list[float] = field(default_factory=list)


def _hard_residual(model: CodecModel, indices: torch.Tensor, target: torch.Tensor) -> float:
    with torch.no_grad():
        vectors = lookup(model.codebook, indices).unsqueeze(0)
        pred = model.decode_vectors(vectors)[0]
        return float(mel_l2(pred, target))


def project_to_codes(model: CodecModel, target: MelSpectrogram, steps: int,
                     lr: float = 0.1, temperature: float = 1.0, seed: int = 0,
                     eval_every: int = 10, polish: bool = False,
                     max_polish_sweeps: int = 8) -> ProjectionResult:
    """Find code indices whose decoding best matches a target mel-spectrogram.

    Gumbel-relaxed gradient descent over per-frame logits; the best hard
    (argmax) solution seen is kept, so the reported residual is non-increasing
    in the step budget. `polish=True` adds exact per-index coordinate descent,
    affordable only for small codebooks/targets.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model.eval()
    target_t = torch.from_numpy(np.asarray(target.values)).float()
    t_frames = target_t.shape[0]
    was_trainable = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        gen = make_generator(seed)
        logits = torch.zeros(t_frames, model.cfg.heads, model.cfg.entries_per_head,
                             requires_grad=True)
        optimizer = torch.optim.Adam([logits], lr=lr)
        cfg = GumbelConfig(temperature=temperature)
        best_idx = logits.detach().argmax(dim=-1)
        best_residual = _hard_residual(model, best_idx, target_t)
        history = [best_residual]
        for step in range(steps):
            soft, _ = gumbel_sample(logits, cfg, rng=gen)
            vectors = straight_through(soft, model.codebook).unsqueeze(0)
            pred = model.decode_vectors(vectors)[0]
            loss = ((pred - target_t) ** 2).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if (step + 1) % eval_every == 0 or step == steps - 1:
                idx = logits.detach().argmax(dim=-1)
                residual = _hard_residual(model, idx, target_t)
                if residual < best_residual:
                    best_residual, best_idx = residual, idx.clone()
                history.append(best_residual)
        if polish:
            best_idx, best_residual = _polish_codes(model, best_idx, best_residual,
                                                    target_t, max_polish_sweeps)
            history.append(best_residual)
    finally:
        for p, flag in zip(model.parameters(), was_trainable):
            p.requires_grad_(flag)
    return ProjectionResult(best_idx.numpy().astype(np.int64), best_residual, history)


def _polish_codes(model: CodecModel, indices: torch.Tensor, residual: float,
                  target: torch.Tensor, max_sweeps: int):
    """Exact coordinate descent over individual (frame, head) indices."""
    idx = indices.clone()
    for _ in range(max_sweeps):
        improved = False
        for t in range(idx.shape[0]):
            for h in range(idx.shape[1]):
                current = int(idx[t, h])
                best_k, best_r = current, residual
                for k in range(model.cfg.entries_per_head):
                    if k == current:
                        continue
                    idx[t, h] = k
                    r = _hard_residual(model, idx, target)
                    if r < best_r:
                        best_k, best_r = k, r
                idx[t, h] = best_k
                if best_k != current:
                    residual = best_r
                    improved = True
        if not improved:
            break
    return idx, residual


def save_codec(path, model: CodecModel, optimizer_state: dict | None = None,
               extra: dict | None = None) -> None:
    """Single-container checkpoint: named tensors plus the config manifest."""
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "codec",
            "codec_config": asdict(model.cfg),
            "dsp_config": asdict(model.dsp_cfg),
            "state_dict": model.state_dict(),
            "optimizer_state": optimizer_state,
            "extra": extra or {},
        },
        path,
    )


def load_codec(path) -> tuple[CodecModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "codec":
        raise ValueError(f"not a codec checkpoint: {payload.get('kind')!r}")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    model = CodecModel(CodecConfig(**payload["codec_config"]),
                       StftMelConfig(**payload["dsp_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def clone_codec(model: CodecModel) -> CodecModel:
    return copy.deepcopy(model)

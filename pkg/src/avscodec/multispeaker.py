"""Multi-speaker extension: speaker identity encoder, personalization, voice transfer.

A restricted codebook (fewer heads/entries) bottlenecks the content codes
while a separate speaker encoder feeds the decoder through feature-wise
affine (FiLM) conditioning, disentangling what is said from who says it.
Voice transfer then amounts to decoding unchanged content codes under a
different speaker embedding.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .codec import (
    CHECKPOINT_FORMAT_VERSION,
    CodecConfig,
    CodecTrainConfig,
    EncoderNet,
    StepRecord,
    TrainingDiverged,
    codec_encode,
)
from .dsp import MelSpectrogram, StftMelConfig, Waveform, griffin_lim, melspec
from .enhancer import (
    ArTrainConfig,
    EnhancerConfig,
    EnhancerModel,
    ar_generate_speaker,
    train_ar,
)
from .metrics import mel_l2
from .nets import ConvBlock1d, ResidualBlock1d, init_parameters
from .noise import NoiseRecipe, simulate
from .quantizer import (
    Codebook,
    GumbelConfig,
    anneal_temperature,
    gumbel_sample,
    lookup,
    make_generator,
    straight_through,
)


def multispeaker_codec_config(**overrides) -> CodecConfig:
    """Restricted codebook bottleneck used in multi-speaker mode."""
    cfg = dict(heads=2, entries_per_head=64)
    cfg.update(overrides)
    return CodecConfig(**cfg)


@dataclass
class SpeakerEmbedding:
    """Unit-norm identity vector extracted from a reference clip."""

    values: np.ndarray
    speaker_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValueError("embedding must be a vector")

    def cosine(self, other: "SpeakerEmbedding") -> float:
        a, b = self.values, other.values
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


@dataclass
class SpeakerEncoderConfig:
    embedding_dim: int = 64
    channels: int = 64
    n_residual: int = 2
    mel_bands: int = 80
    mel_mean: float = -6.0
    mel_scale: float = 5.0


class SpeakerEncoder(nn.Module):
    """Conv stack over a reference mel, mean-pooled and projected to a unit-norm vector."""

    def __init__(self, embedding_dim: int = 64, channels: int = 64, n_residual: int = 2,
                 mel_bands: int = 80, mel_mean: float = -6.0, mel_scale: float = 5.0):
        super().__init__()
        self.cfg = SpeakerEncoderConfig(embedding_dim, channels, n_residual,
                                        mel_bands, mel_mean, mel_scale)
        self.embedding_dim = embedding_dim
        self.mel_mean = mel_mean
        self.mel_scale = mel_scale
        self.stem = ConvBlock1d(mel_bands, channels, 5)
        self.residual = nn.ModuleList(ResidualBlock1d(channels, 5) for _ in range(n_residual))
        self.proj = nn.Linear(channels, embedding_dim)

    def forward(self, mel_raw: torch.Tensor) -> torch.Tensor:
        # (B, T, mel) -> (B, embedding_dim), unit norm
        h = self.stem(((mel_raw - self.mel_mean) / self.mel_scale).transpose(1, 2))
        for block in self.residual:
            h = block(h)
        pooled = h.mean(dim=2)
        emb = self.proj(pooled)
        return torch.nn.functional.normalize(emb, dim=-1)


def embed_speaker(encoder: SpeakerEncoder, reference: Waveform,
                  dsp_cfg: StftMelConfig, speaker_id: str = "") -> SpeakerEmbedding:
    """Deterministic identity embedding of a reference clip."""
    encoder.eval()
    with torch.no_grad():
        mel = torch.from_numpy(melspec(reference, dsp_cfg).values).float().unsqueeze(0)
        return SpeakerEmbedding(encoder(mel)[0].numpy(), speaker_id)


class FiLM(nn.Module):
    """Feature-wise affine conditioning of a (B, C, T) or (B, T, C) activation."""

    def __init__(self, embedding_dim: int, channels: int):
        super().__init__()
        self.affine = nn.Linear(embedding_dim, 2 * channels)

    def forward(self, h: torch.Tensor, emb: torch.Tensor, channels_last: bool) -> torch.Tensor:
        scale, shift = self.affine(emb).chunk(2, dim=-1)
        if channels_last:
            scale, shift = scale.unsqueeze(1), shift.unsqueeze(1)
        else:
            scale, shift = scale.unsqueeze(-1), shift.unsqueeze(-1)
        return h * (1.0 + scale) + shift


class ConditionedDecoderNet(nn.Module):
    """Spectrogram decoder with FiLM conditioning after every block."""

    def __init__(self, cfg: CodecConfig, speaker_dim: int):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBlock1d(cfg.heads * cfg.code_dim, cfg.channels, cfg.kernel_size,
                                causal=True)
        self.residual = nn.ModuleList(
            ResidualBlock1d(cfg.channels, cfg.kernel_size, causal=True)
            for _ in range(cfg.n_residual)
        )
        sizes = [cfg.channels] + [cfg.lstm_hidden] * cfg.lstm_modules
        self.lstms = nn.ModuleList(
            nn.LSTM(sizes[i], sizes[i + 1], batch_first=True) for i in range(cfg.lstm_modules)
        )
        self.films_conv = nn.ModuleList(
            FiLM(speaker_dim, cfg.channels) for _ in range(cfg.n_residual + 1)
        )
        self.films_lstm = nn.ModuleList(
            FiLM(speaker_dim, cfg.lstm_hidden) for _ in range(cfg.lstm_modules)
        )
        self.proj = nn.Linear(cfg.lstm_hidden, cfg.mel_bands)

    def forward(self, vectors: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.stem(vectors.transpose(1, 2))
        h = self.films_conv[0](h, emb, channels_last=False)
        for block, film in zip(self.residual, self.films_conv[1:]):
            h = film(block(h), emb, channels_last=False)
        h = h.transpose(1, 2)
        for lstm, film in zip(self.lstms, self.films_lstm):
            h, _ = lstm(h)
            h = film(h, emb, channels_last=True)
        return self.proj(h)


class MultiSpeakerCodec(nn.Module):
    """Shared content encoder/codebook with a speaker-conditioned decoder."""

    def __init__(self, cfg: CodecConfig | None = None, dsp_cfg: StftMelConfig | None = None,
                 speaker_dim: int = 64, seed: int = 0):
        super().__init__()
        self.cfg = cfg or multispeaker_codec_config()
        self.dsp_cfg = dsp_cfg or StftMelConfig()
        self.speaker_dim = speaker_dim
        self.version = CHECKPOINT_FORMAT_VERSION
        gen = make_generator(seed)
        self.encoder = EncoderNet(self.cfg)
        self.codebook = Codebook(self.cfg.heads, self.cfg.entries_per_head,
                                 self.cfg.code_dim, generator=gen)
        self.decoder = ConditionedDecoderNet(self.cfg, speaker_dim)
        init_parameters(self.encoder, gen)
        init_parameters(self.decoder, gen)

    def normalize(self, mel):
        return (mel - self.cfg.mel_mean) / self.cfg.mel_scale

    def denormalize(self, mel_norm):
        return mel_norm * self.cfg.mel_scale + self.cfg.mel_mean

    def encode_logits(self, mel_raw: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.normalize(mel_raw))

    def decode_vectors(self, vectors: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        return self.denormalize(self.decoder(vectors, speaker))


def ms_decode(model: MultiSpeakerCodec, indices: np.ndarray,
              embedding: SpeakerEmbedding) -> MelSpectrogram:
    """Decode content indices under a given speaker identity."""
    if embedding.values.shape[0] != model.speaker_dim:
        raise ValueError(
            f"embedding dimension {embedding.values.shape[0]} != {model.speaker_dim}"
        )
    idx = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    if idx.ndim != 2 or idx.shape[1] != model.cfg.heads:
        raise ValueError(f"indices must have shape (T', {model.cfg.heads})")
    model.eval()
    with torch.no_grad():
        vectors = lookup(model.codebook, idx).unsqueeze(0)
        emb = torch.from_numpy(embedding.values).unsqueeze(0)
        mel = model.decode_vectors(vectors, emb)[0].double().numpy()
    return MelSpectrogram(mel, model.dsp_cfg.frame_rate_hz, model.dsp_cfg.config_id)


def transfer_voice(model: MultiSpeakerCodec, content_idx: np.ndarray,
                   target: SpeakerEmbedding, gl_iterations: int = 60) -> Waveform:
    """Re-synthesize unchanged content codes in the target speaker's voice."""
    return griffin_lim(ms_decode(model, content_idx, target), model.dsp_cfg, gl_iterations)


@dataclass
class SpeakerClips:
    speaker_id: str
    clips: list  # (Waveform, VideoClip | None) pairs


@dataclass
class MultiSpeakerBundle:
    codec: MultiSpeakerCodec
    speaker_encoder: SpeakerEncoder
    enhancer: EnhancerModel

    def clone(self) -> "MultiSpeakerBundle":
        return MultiSpeakerBundle(copy.deepcopy(self.codec),
                                  copy.deepcopy(self.speaker_encoder),
                                  copy.deepcopy(self.enhancer))


@dataclass
class MultiSpeakerTrainConfig:
    codec_train: CodecTrainConfig = field(default_factory=lambda: CodecTrainConfig(steps=600))
    ar_train: ArTrainConfig = field(default_factory=lambda: ArTrainConfig(steps=300))
    recipe: NoiseRecipe | None = None
    freeze: tuple[str, ...] = ()  # component names exempt from fine-tuning
    seed: int = 0


def _speaker_mels(corpus: list[SpeakerClips], dsp_cfg: StftMelConfig):
    mels, owner = [], []
    for s, group in enumerate(corpus):
        if not group.clips:
            raise ValueError(f"speaker {group.speaker_id!r} has no clips")
        for wav, _ in group.clips:
            mels.append(torch.from_numpy(melspec(wav, dsp_cfg).values).float())
        owner.extend([s] * len(group.clips))
    return torch.stack(mels), np.array(owner)


def _reference_pools(owner: np.ndarray) -> list[np.ndarray]:
    pools = []
    for i, s in enumerate(owner):
        same = np.flatnonzero(owner == s)
        others = same[same != i]
        pools.append(others if others.size else same)
    return pools


def train_ms_codec(corpus: list[SpeakerClips], model: MultiSpeakerCodec,
                   encoder: SpeakerEncoder, train_cfg: CodecTrainConfig,
                   trainable=None) -> list[StepRecord]:
    """Joint reconstruction training of the conditioned codec and speaker encoder.

    Each clip is decoded under an embedding extracted from a different clip
    of the same speaker, which forces identity information through the
    embedding path rather than the content codes.
    """
    if not corpus:
        raise ValueError("empty multi-speaker corpus")
    mels, owner = _speaker_mels(corpus, model.dsp_cfg)
    pools = _reference_pools(owner)
    gen = make_generator(train_cfg.seed + 0x35EE)
    params = list(model.parameters()) + list(encoder.parameters())
    if trainable is not None:
        params = [p for p in params if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    noiseless_from = int(train_cfg.steps * train_cfg.noiseless_from_frac)
    decay_at = int(train_cfg.steps * train_cfg.lr_decay_at_frac)
    history = []
    model.train()
    encoder.train()
    n = mels.shape[0]
    for step in range(train_cfg.steps):
        if step == decay_at and train_cfg.lr_decay_factor != 1.0:
            for group in optimizer.param_groups:
                group["lr"] = train_cfg.learning_rate * train_cfg.lr_decay_factor
        tau = anneal_temperature(step, train_cfg.steps, train_cfg.tau_start,
                                 train_cfg.tau_end, train_cfg.tau_anneal_frac)
        if train_cfg.batch_size >= n:
            picks = torch.arange(n)
        else:
            picks = torch.randint(n, (train_cfg.batch_size,), generator=gen)
        refs = torch.tensor([
            int(pools[p][int(torch.randint(len(pools[p]), (1,), generator=gen))])
            for p in picks.tolist()
        ])
        batch = mels[picks]
        emb = encoder(mels[refs])
        logits = model.encode_logits(batch)
        rng = None if step >= noiseless_from else gen
        soft, _ = gumbel_sample(logits, GumbelConfig(temperature=tau), rng=rng)
        vectors = straight_through(soft, model.codebook)
        pred = model.decode_vectors(vectors, emb)
        loss = ((pred - batch) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite multi-speaker codec loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, train_cfg.grad_clip_norm)
        optimizer.step()
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            history.append(StepRecord(step, float(loss.detach()), tau))
    model.eval()
    encoder.eval()
    return history


def speaker_reference_embeddings(corpus: list[SpeakerClips], encoder: SpeakerEncoder,
                                 dsp_cfg: StftMelConfig, seed: int = 0):
    """Per-clip embeddings taken from a different clip of the same speaker."""
    rng = np.random.default_rng(seed)
    embeddings = []
    for group in corpus:
        n = len(group.clips)
        for i in range(n):
            choices = [j for j in range(n) if j != i] or [i]
            ref = group.clips[int(rng.choice(choices))][0]
            embeddings.append(embed_speaker(encoder, ref, dsp_cfg, group.speaker_id).values)
    return embeddings


def make_noisy_triples(corpus: list[SpeakerClips], recipe: NoiseRecipe | None, seed: int = 0):
    """(clean, noisy, video) triples; identity corruption when no recipe is given."""
    rng = np.random.default_rng(seed)
    triples = []
    for group in corpus:
        for wav, video in group.clips:
            noisy = simulate(wav, recipe, rng).noisy if recipe is not None else wav
            triples.append((wav, noisy, video))
    return triples


def pretrain_multispeaker(corpus: list[SpeakerClips], cfg: MultiSpeakerTrainConfig,
                          codec_cfg: CodecConfig | None = None,
                          enh_cfg: EnhancerConfig | None = None,
                          dsp_cfg: StftMelConfig | None = None) -> MultiSpeakerBundle:
    """Two-stage multi-speaker pretraining: conditioned codec, then enhancer."""
    if not corpus:
        raise ValueError("empty multi-speaker corpus")
    codec_cfg = codec_cfg or multispeaker_codec_config()
    dsp_cfg = dsp_cfg or StftMelConfig()
    ms = MultiSpeakerCodec(codec_cfg, dsp_cfg, seed=cfg.seed)
    encoder = SpeakerEncoder(embedding_dim=ms.speaker_dim, mel_mean=codec_cfg.mel_mean,
                             mel_scale=codec_cfg.mel_scale)
    init_parameters(encoder, make_generator(cfg.seed + 0xE5C))
    train_ms_codec(corpus, ms, encoder, cfg.codec_train)

    enh_cfg = enh_cfg or EnhancerConfig(speaker_dim=ms.speaker_dim)
    if enh_cfg.speaker_dim != ms.speaker_dim:
        raise ValueError("enhancer speaker_dim must match the codec conditioning")
    triples = make_noisy_triples(corpus, cfg.recipe, cfg.seed)
    embeddings = speaker_reference_embeddings(corpus, encoder, dsp_cfg, cfg.seed)
    result = train_ar(triples, ms, cfg.ar_train, enh_cfg, speakers=embeddings)
    return MultiSpeakerBundle(ms, encoder, result.model)


def _apply_freeze(bundle: MultiSpeakerBundle, freeze: tuple[str, ...]):
    groups = {
        "encoder": bundle.codec.encoder,
        "decoder": bundle.codec.decoder,
        "codebook": bundle.codec.codebook,
        "speaker_encoder": bundle.speaker_encoder,
        "enhancer": bundle.enhancer,
    }
    unknown = set(freeze) - set(groups)
    if unknown:
        raise ValueError(f"unknown freeze targets: {sorted(unknown)}")
    for name in freeze:
        for p in groups[name].parameters():
            p.requires_grad_(False)


def finetune(bundle: MultiSpeakerBundle, new_speaker: SpeakerClips,
             budget_fraction: float, cfg: MultiSpeakerTrainConfig) -> MultiSpeakerBundle:
    """Personalize a pretrained bundle on a fraction of one new speaker's clips.

    All parameters are unfrozen by default (cfg.freeze exempts components).
    budget_fraction = 0 returns an unchanged copy.
    """
    if not 0.0 <= budget_fraction <= 1.0:
        raise ValueError("budget_fraction must be in [0, 1]")
    tuned = bundle.clone()
    n_budget = int(round(budget_fraction * len(new_speaker.clips)))
    if n_budget == 0:
        return tuned
    subset = SpeakerClips(new_speaker.speaker_id, new_speaker.clips[:n_budget])
    for p in tuned.codec.parameters():
        p.requires_grad_(True)
    for p in tuned.speaker_encoder.parameters():
        p.requires_grad_(True)
    _apply_freeze(tuned, cfg.freeze)
    train_ms_codec([subset], tuned.codec, tuned.speaker_encoder, cfg.codec_train,
                   trainable=True)
    if "enhancer" not in cfg.freeze:
        triples = make_noisy_triples([subset], cfg.recipe, cfg.seed)
        embeddings = speaker_reference_embeddings([subset], tuned.speaker_encoder,
                                                  tuned.codec.dsp_cfg, cfg.seed)
        train_ar(triples, tuned.codec, cfg.ar_train, model=tuned.enhancer,
                 speakers=embeddings)
    return tuned


def eval_ms(bundle: MultiSpeakerBundle, speaker: SpeakerClips,
            recipe: NoiseRecipe | None, seed: int = 0) -> float:
    """Mean enhancement mel_l2 for one speaker through the conditioned pipeline."""
    triples = make_noisy_triples([speaker], recipe, seed)
    embeddings = speaker_reference_embeddings([speaker], bundle.speaker_encoder,
                                              bundle.codec.dsp_cfg, seed)
    errors = []
    for (clean, noisy, video), emb in zip(triples, embeddings):
        idx = ar_generate_speaker(bundle.enhancer, noisy, video, emb)
        pred = ms_decode(bundle.codec, idx, SpeakerEmbedding(emb))
        target = melspec(clean, bundle.codec.dsp_cfg)
        t = min(pred.num_frames, target.num_frames)
        errors.append(float(mel_l2(pred.values[:t], target.values[:t])))
    return float(np.mean(errors))


def eval_ms_codec(bundle: MultiSpeakerBundle, speaker: SpeakerClips, seed: int = 0) -> float:
    """Mean reconstruction mel_l2 of the conditioned codec on one speaker's clips."""
    embeddings = speaker_reference_embeddings([speaker], bundle.speaker_encoder,
                                              bundle.codec.dsp_cfg, seed)
    errors = []
    for (wav, _), emb in zip(speaker.clips, embeddings):
        idx = codec_encode(bundle.codec, wav)
        rec = ms_decode(bundle.codec, idx, SpeakerEmbedding(emb))
        target = melspec(wav, bundle.codec.dsp_cfg)
        errors.append(float(mel_l2(rec.values, target.values)))
    return float(np.mean(errors))


def read_speaker_registry(path) -> dict[str, list[str]]:
    """Registry file: one {speaker_id, reference_paths} JSON record per line."""
    registry = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                registry[str(rec["speaker_id"])] = [str(p) for p in rec["reference_paths"]]
    return registry


def save_bundle(path, bundle: MultiSpeakerBundle, extra: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "multispeaker",
            "codec_config": asdict(bundle.codec.cfg),
            "dsp_config": asdict(bundle.codec.dsp_cfg),
            "speaker_dim": bundle.codec.speaker_dim,
            "speaker_encoder_config": asdict(bundle.speaker_encoder.cfg),
            "enhancer_config": asdict(bundle.enhancer.cfg),
            "codec_state": bundle.codec.state_dict(),
            "speaker_encoder_state": bundle.speaker_encoder.state_dict(),
            "enhancer_state": bundle.enhancer.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_bundle(path) -> tuple[MultiSpeakerBundle, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "multispeaker":
        raise ValueError(f"not a multispeaker checkpoint: {payload.get('kind')!r}")
    codec_cfg = CodecConfig(**payload["codec_config"])
    dsp_cfg = StftMelConfig(**payload["dsp_config"])
    ms = MultiSpeakerCodec(codec_cfg, dsp_cfg, speaker_dim=payload["speaker_dim"])
    ms.load_state_dict(payload["codec_state"])
    encoder = SpeakerEncoder(**payload["speaker_encoder_config"])
    encoder.load_state_dict(payload["speaker_encoder_state"])
    enhancer = EnhancerModel(EnhancerConfig(**payload["enhancer_config"]), ms)
    enhancer.load_state_dict(payload["enhancer_state"])
    for module in (ms, encoder, enhancer):
        module.eval()
    return MultiSpeakerBundle(ms, encoder, enhancer), payload

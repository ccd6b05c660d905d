import numpy as np
import pytest
import torch

from avscodec import multispeaker as M
from avscodec.codec import CodecTrainConfig, codec_encode
from avscodec.data import ToyCorpusSpec, synth_toy_clip
from avscodec.dsp import StftMelConfig, Waveform
from avscodec.enhancer import ArTrainConfig, EnhancerModel, toy_enhancer_config
from avscodec.nets import state_fingerprint

from conftest import speechlike_chirp


@pytest.fixture(scope="module")
def dsp_cfg():
    return StftMelConfig()


def toy_ms_codec_config(**overrides):
    cfg = dict(channels=48, lstm_hidden=64, code_dim=32)
    cfg.update(overrides)
    return M.multispeaker_codec_config(**cfg)


@pytest.fixture(scope="module")
def ms_codec(dsp_cfg):
    return M.MultiSpeakerCodec(toy_ms_codec_config(), dsp_cfg, speaker_dim=16, seed=0)


@pytest.fixture(scope="module")
def speaker_encoder():
    enc = M.SpeakerEncoder(embedding_dim=16, channels=32, mel_scale=5.0)
    return enc.eval()


@pytest.fixture(scope="module")
def corpus(dsp_cfg):
    spec = ToyCorpusSpec(seed=0)
    rng = np.random.default_rng(0)
    groups = []
    for s in range(2):
        clips = [synth_toy_clip(spec, s, rng)[:2] for _ in range(4)]
        groups.append(M.SpeakerClips(f"spk{s}", [(w, v) for w, v in clips]))
    return groups


class TestSpeakerEmbedding:
    def test_deterministic(self, speaker_encoder, dsp_cfg):
        wav = speechlike_chirp(0, n=16000)
        e1 = M.embed_speaker(speaker_encoder, wav, dsp_cfg)
        e2 = M.embed_speaker(speaker_encoder, wav, dsp_cfg)
        assert np.array_equal(e1.values, e2.values)

    def test_unit_norm(self, speaker_encoder, dsp_cfg):
        emb = M.embed_speaker(speaker_encoder, speechlike_chirp(1, n=16000), dsp_cfg)
        assert abs(np.linalg.norm(emb.values) - 1.0) < 1e-6

    def test_cosine_helper(self):
        a = M.SpeakerEmbedding(np.array([1.0, 0.0]))
        b = M.SpeakerEmbedding(np.array([0.0, 1.0]))
        assert a.cosine(a) == pytest.approx(1.0)
        assert a.cosine(b) == pytest.approx(0.0)


class TestConditionedDecode:
    def test_shape(self, ms_codec):
        idx = np.zeros((20, 2), dtype=np.int64)
        emb = M.SpeakerEmbedding(np.ones(16, dtype=np.float32) / 4.0)
        mel = M.ms_decode(ms_codec, idx, emb)
        assert mel.values.shape == (20, 80)

    def test_dimension_mismatch_rejected(self, ms_codec):
        idx = np.zeros((5, 2), dtype=np.int64)
        with pytest.raises(ValueError, match="dimension"):
            M.ms_decode(ms_codec, idx, M.SpeakerEmbedding(np.ones(8)))

    def test_distinct_embeddings_give_distinct_output(self, ms_codec):
        idx = np.random.default_rng(0).integers(0, 64, size=(20, 2))
        e1 = M.SpeakerEmbedding(np.eye(16, dtype=np.float32)[0])
        e2 = M.SpeakerEmbedding(np.eye(16, dtype=np.float32)[1])
        m1 = M.ms_decode(ms_codec, idx, e1)
        m2 = M.ms_decode(ms_codec, idx, e2)
        diff = float(((m1.values - m2.values) ** 2).mean())
        assert diff > 1e-5  # well above decoder numerical noise

    def test_transfer_does_not_mutate_content_codes(self, ms_codec):
        idx = np.random.default_rng(1).integers(0, 64, size=(20, 2))
        snapshot = idx.copy()
        emb = M.SpeakerEmbedding(np.eye(16, dtype=np.float32)[2])
        out = M.transfer_voice(ms_codec, idx, emb, gl_iterations=2)
        assert np.array_equal(idx, snapshot)
        assert len(out) == 20 * ms_codec.dsp_cfg.hop_size

    def test_same_embedding_reproduces_plain_decode(self, ms_codec):
        idx = np.random.default_rng(2).integers(0, 64, size=(12, 2))
        emb = M.SpeakerEmbedding(np.eye(16, dtype=np.float32)[3])
        m1 = M.ms_decode(ms_codec, idx, emb)
        m2 = M.ms_decode(ms_codec, idx, emb)
        assert np.array_equal(m1.values, m2.values)


class TestPretrain:
    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            M.pretrain_multispeaker([], M.MultiSpeakerTrainConfig())

    def test_joint_loss_decreases(self, corpus, dsp_cfg):
        cfg = M.MultiSpeakerTrainConfig(
            codec_train=CodecTrainConfig(steps=120, batch_size=8, learning_rate=2e-3,
                                         crop_seconds=0.96, seed=0, log_every=119),
            ar_train=ArTrainConfig(steps=2, batch_size=4, seed=0, log_every=1),
            seed=0,
        )
        ms = M.MultiSpeakerCodec(toy_ms_codec_config(), dsp_cfg, speaker_dim=16, seed=0)
        enc = M.SpeakerEncoder(embedding_dim=16, channels=32, mel_scale=5.0)
        history = M.train_ms_codec(corpus, ms, enc, cfg.codec_train)
        assert history[-1].loss < history[0].loss / 3

    def test_speaker_with_no_clips_rejected(self, dsp_cfg):
        ms = M.MultiSpeakerCodec(toy_ms_codec_config(), dsp_cfg, speaker_dim=16, seed=0)
        enc = M.SpeakerEncoder(embedding_dim=16)
        with pytest.raises(ValueError, match="no clips"):
            M.train_ms_codec([M.SpeakerClips("empty", [])], ms, enc,
                             CodecTrainConfig(steps=1))


class TestFinetune:
    @pytest.fixture(scope="class")
    def bundle(self, ms_codec, speaker_encoder):
        enhancer = EnhancerModel(toy_enhancer_config(speaker_dim=16), ms_codec, seed=4)
        return M.MultiSpeakerBundle(ms_codec, speaker_encoder, enhancer)

    def test_zero_budget_returns_unchanged_copy(self, bundle, corpus):
        tuned = M.finetune(bundle, corpus[0], 0.0, M.MultiSpeakerTrainConfig())
        assert tuned is not bundle
        assert state_fingerprint(tuned.codec) == state_fingerprint(bundle.codec)
        assert state_fingerprint(tuned.enhancer) == state_fingerprint(bundle.enhancer)

    def test_bad_budget_rejected(self, bundle, corpus):
        with pytest.raises(ValueError, match="budget_fraction"):
            M.finetune(bundle, corpus[0], 1.5, M.MultiSpeakerTrainConfig())

    def test_unknown_freeze_target_rejected(self, bundle, corpus):
        cfg = M.MultiSpeakerTrainConfig(freeze=("nonsense",))
        with pytest.raises(ValueError, match="freeze"):
            M.finetune(bundle, corpus[0], 0.5, cfg)

    def test_freeze_mask_keeps_component_fixed(self, bundle, corpus):
        cfg = M.MultiSpeakerTrainConfig(
            codec_train=CodecTrainConfig(steps=3, batch_size=4, crop_seconds=0.96,
                                         seed=0, log_every=1),
            ar_train=ArTrainConfig(steps=2, batch_size=4, seed=0, log_every=1),
            freeze=("speaker_encoder",),
        )
        tuned = M.finetune(bundle, corpus[0], 0.5, cfg)
        assert state_fingerprint(tuned.speaker_encoder) == state_fingerprint(bundle.speaker_encoder)
        assert state_fingerprint(tuned.codec) != state_fingerprint(bundle.codec)


class TestRegistryAndCheckpoint:
    def test_registry_roundtrip(self, tmp_path):
        path = tmp_path / "registry.jsonl"
        path.write_text(
            '{"speaker_id": "a", "reference_paths": ["x.wav", "y.wav"]}\n'
            '{"speaker_id": "b", "reference_paths": ["z.wav"]}\n'
        )
        reg = M.read_speaker_registry(path)
        assert reg == {"a": ["x.wav", "y.wav"], "b": ["z.wav"]}

    def test_bundle_save_load(self, tmp_path, ms_codec, speaker_encoder):
        enhancer = EnhancerModel(toy_enhancer_config(speaker_dim=16), ms_codec, seed=5)
        bundle = M.MultiSpeakerBundle(ms_codec, speaker_encoder, enhancer)
        path = tmp_path / "bundle.pt"
        M.save_bundle(path, bundle)
        loaded, _ = M.load_bundle(path)
        assert state_fingerprint(loaded.codec) == state_fingerprint(bundle.codec)
        assert state_fingerprint(loaded.speaker_encoder) == state_fingerprint(bundle.speaker_encoder)
        assert state_fingerprint(loaded.enhancer) == state_fingerprint(bundle.enhancer)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"kind": "codec", "format_version": 1}, path)
        with pytest.raises(ValueError, match="multispeaker"):
            M.load_bundle(path)

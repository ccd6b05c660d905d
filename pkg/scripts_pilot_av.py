"""Pilot: full AV training pipeline at toy scale, one seed, all criterion comparisons."""
import time
import numpy as np
import torch
torch.set_num_threads(1)
from avscodec import codec as C, data as D, enhancer as E, noise as N
from avscodec.dsp import StftMelConfig, Waveform, melspec
from avscodec.metrics import mel_l2

t_start = time.time()
dsp_cfg = StftMelConfig()
spec = D.ToyCorpusSpec(seed=0)
rng = np.random.default_rng(0)
train_made = [D.synth_toy_clip(spec, 0, rng) for _ in range(24)]
val_made = [D.synth_toy_clip(spec, 0, rng) for _ in range(6)]

# interferer bank from the same speaker (hard case), synthetic RIRs/backgrounds
synth = N.synthetic_banks(seed=1)
interferer_clips = [D.synth_toy_clip(spec, 0, rng)[0] for _ in range(6)]
banks = N.NoiseBanks(
    rirs=synth.rirs,
    interferers=[N.BankClip(f"toy-int-{i}", w.samples) for i, w in enumerate(interferer_clips)],
    backgrounds=synth.backgrounds,
)
recipe_train = N.NoiseRecipe(banks=banks, snr_range_db=(0.0, 15.0), p_interferer=0.5, seed=10)
recipe_interf = N.NoiseRecipe(banks=banks, snr_range_db=(5.0, 5.0), p_interferer=1.0, seed=11)
recipe_bg = N.NoiseRecipe(
    banks=N.NoiseBanks(rirs=synth.rirs, backgrounds=synth.backgrounds),
    snr_range_db=(5.0, 5.0), p_interferer=0.0, seed=12)

train_clean = [m[0] for m in train_made]
print("training codec...", flush=True)
codec_res = C.train_codec(
    train_clean,
    C.CodecTrainConfig(steps=2000, batch_size=24, learning_rate=2e-3, crop_seconds=0.96,
                       seed=0, log_every=500),
    C.toy_codec_config(), dsp_cfg)
codec = codec_res.model
print(f"codec eval: {C.eval_codec(codec, train_clean):.5f} ({time.time()-t_start:.0f}s)", flush=True)

def triples_for(made, recipe, seed):
    rr = np.random.default_rng(seed)
    out = []
    for clean, video, _ in made:
        noisy = N.simulate(clean, recipe, rr).noisy
        out.append((clean, noisy, video))
    return out

train_triples = triples_for(train_made, recipe_train, 100)
val_interf = triples_for(val_made, recipe_interf, 200)
val_bg = triples_for(val_made, recipe_bg, 300)
wn_rng = np.random.default_rng(400)
val_white = [(c, Waveform(0.05 * wn_rng.standard_normal(len(c))), v) for c, v, _ in val_made]

def train_mode(mode, seed):
    t0 = time.time()
    cfg = E.toy_enhancer_config(mode=mode)
    res = E.train_ar(train_triples, codec,
                     E.ArTrainConfig(steps=300, batch_size=6, learning_rate=1e-3, seed=seed,
                                     log_every=100),
                     cfg)
    print(f"  {mode} seed{seed}: {time.time()-t0:.0f}s losses={[round(r.loss,3) for r in res.history]}", flush=True)
    return res.model

for seed in (0,):
    print(f"== seed {seed}", flush=True)
    models = {m: train_mode(m, seed) for m in ("full", "no_ar", "audio_only", "vision_only")}
    # criterion 5a: white-noise audio
    err_white = E.eval_enhancer(models["full"], codec, val_white)
    base_white = np.mean([
        float(mel_l2(C.codec_decode(codec, C.codec_encode(codec, n)).values,
                     melspec(c, dsp_cfg).values))
        for c, n, _ in val_white])
    print(f"white-noise: enhanced={err_white:.4f} baseline={base_white:.4f} ratio={err_white/base_white:.3f} (need < 0.5)", flush=True)
    # criterion 5b: vision vs audio under interferer
    ev = {m: E.eval_enhancer(models[m], codec, val_interf) for m in models}
    print("interferer-cond errors:", {m: round(v, 4) for m, v in ev.items()}, flush=True)
    print("  vision_only < audio_only:", ev["vision_only"] < ev["audio_only"], flush=True)
    # criterion 6: full <= no_ar on both conditions
    ev_bg = {m: E.eval_enhancer(models[m], codec, val_bg) for m in ("full", "no_ar")}
    print("bg-cond errors:", {m: round(v, 4) for m, v in ev_bg.items()}, flush=True)
    print("  full<=no_ar interf:", ev["full"] <= ev["no_ar"], " bg:", ev_bg["full"] <= ev_bg["no_ar"], flush=True)

print(f"total: {time.time()-t_start:.0f}s", flush=True)

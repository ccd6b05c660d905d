"""Pilot 2: does longer training / scheduled sampling make full beat no_ar?"""
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

synth = N.synthetic_banks(seed=1)
interferer_clips = [D.synth_toy_clip(spec, 0, rng)[0] for _ in range(6)]
banks = N.NoiseBanks(
    rirs=synth.rirs,
    interferers=[N.BankClip(f"toy-int-{i}", w.samples) for i, w in enumerate(interferer_clips)],
    backgrounds=synth.backgrounds,
)
recipe_train = N.NoiseRecipe(banks=banks, snr_range_db=(0.0, 15.0), p_interferer=0.5, seed=10)
recipe_interf = N.NoiseRecipe(banks=banks, snr_range_db=(5.0, 5.0), p_interferer=1.0, seed=11)
recipe_bg = N.NoiseRecipe(banks=N.NoiseBanks(rirs=synth.rirs, backgrounds=synth.backgrounds),
                          snr_range_db=(5.0, 5.0), p_interferer=0.0, seed=12)

train_clean = [m[0] for m in train_made]
codec_res = C.train_codec(
    train_clean,
    C.CodecTrainConfig(steps=2000, batch_size=24, learning_rate=2e-3, crop_seconds=0.96,
                       seed=0, log_every=1000),
    C.toy_codec_config(), dsp_cfg)
codec = codec_res.model
print(f"codec eval: {C.eval_codec(codec, train_clean):.5f} ({time.time()-t_start:.0f}s)", flush=True)
C.save_codec("/tmp/pilot_codec.pt", codec)

def triples_for(made, recipe, seed):
    rr = np.random.default_rng(seed)
    return [(c, N.simulate(c, recipe, rr).noisy, v) for c, v, _ in made]

train_triples = triples_for(train_made, recipe_train, 100)
val_interf = triples_for(val_made, recipe_interf, 200)
val_bg = triples_for(val_made, recipe_bg, 300)

def teacher_acc(model, triples):
    import avscodec.codec as cc
    hits = total = 0
    for clean, noisy, video in triples[:6]:
        teach = cc.codec_encode(codec, clean)
        free = E.ar_generate(model, noisy, video)
        hits += (teach == free).sum()
        total += teach.size
    return hits / total

for steps, ss in [(800, 0.0), (800, 0.25)]:
    print(f"== steps={steps} scheduled={ss}", flush=True)
    for mode in ("full", "no_ar"):
        t0 = time.time()
        cfg = E.toy_enhancer_config(mode=mode)
        res = E.train_ar(train_triples, codec,
                         E.ArTrainConfig(steps=steps, batch_size=6, learning_rate=1e-3,
                                         scheduled_sampling_p=ss, seed=0, log_every=200),
                         cfg)
        e_int = E.eval_enhancer(res.model, codec, val_interf)
        e_bg = E.eval_enhancer(res.model, codec, val_bg)
        acc = teacher_acc(res.model, val_interf)
        print(f"  {mode}: {time.time()-t0:.0f}s mel/ce last={res.history[-1].mel_loss:.3f}/{res.history[-1].ce_loss:.3f} "
              f"interf={e_int:.3f} bg={e_bg:.3f} free-run-code-match={acc:.2f}", flush=True)
print(f"total {time.time()-t_start:.0f}s", flush=True)

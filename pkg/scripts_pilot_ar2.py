"""Pilot 3: scheduled-sampling ramp, longer training, gentler eval SNR."""
import time
import numpy as np
import torch
torch.set_num_threads(1)
from avscodec import codec as C, data as D, enhancer as E, noise as N
from avscodec.dsp import StftMelConfig

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
recipe_train = N.NoiseRecipe(banks=banks, snr_range_db=(0.0, 20.0), p_interferer=0.5, seed=10)
recipe_interf = N.NoiseRecipe(banks=banks, snr_range_db=(10.0, 10.0), p_interferer=1.0, seed=11)
recipe_bg = N.NoiseRecipe(banks=N.NoiseBanks(rirs=synth.rirs, backgrounds=synth.backgrounds),
                          snr_range_db=(10.0, 10.0), p_interferer=0.0, seed=12)

codec, _ = C.load_codec("/tmp/pilot_codec.pt")
print(f"codec loaded ({time.time()-t_start:.0f}s)", flush=True)

def triples_for(made, recipe, seed, views=1):
    rr = np.random.default_rng(seed)
    out = []
    for _ in range(views):
        for c, v, _ in made:
            out.append((c, N.simulate(c, recipe, rr).noisy, v))
    return out

train_triples = triples_for(train_made, recipe_train, 100, views=2)
val_interf = triples_for(val_made, recipe_interf, 200)
val_bg = triples_for(val_made, recipe_bg, 300)

def teacher_acc(model, triples):
    import avscodec.codec as cc
    hits = total = 0
    for clean, noisy, video in triples:
        teach = cc.codec_encode(codec, clean)
        free = E.ar_generate(model, noisy, video)
        hits += (teach == free).sum(); total += teach.size
    return hits/total

for steps, ss in [(1500, 0.6)]:
    for mode in ("full", "no_ar"):
        t0 = time.time()
        res = E.train_ar(train_triples, codec,
                         E.ArTrainConfig(steps=steps, batch_size=6, learning_rate=1e-3,
                                         scheduled_sampling_p=ss if mode == "full" else 0.0,
                                         seed=0, log_every=500),
                         E.toy_enhancer_config(mode=mode))
        e_int = E.eval_enhancer(res.model, codec, val_interf)
        e_bg = E.eval_enhancer(res.model, codec, val_bg)
        acc = teacher_acc(res.model, val_interf)
        print(f"steps={steps} ss={ss} {mode}: {time.time()-t0:.0f}s "
              f"mel/ce={res.history[-1].mel_loss:.3f}/{res.history[-1].ce_loss:.3f} "
              f"interf={e_int:.3f} bg={e_bg:.3f} match={acc:.2f}", flush=True)
print(f"total {time.time()-t_start:.0f}s", flush=True)

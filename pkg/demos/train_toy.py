"""Watch the rate-distortion objective fall during a short training run.

Run:  python3 demos/train_toy.py       (about two minutes on one core)

Trains the tiny profile for 600 iterations on a synthetic corpus, then
compares real encoded bits and reconstruction quality against the same
architecture with untrained weights.
"""

import numpy as np

from caecodec import transforms as TR
from caecodec.codec import decode_image, encode_image
from caecodec.data import synth_corpus, synth_image
from caecodec.metrics import psnr
from caecodec.trainer import TrainConfig, smoothed, train

corpus = synth_corpus(7, 24, 64, 64)
held_out = [synth_image(np.random.default_rng(8), 64, 64) for _ in range(2)]

cfg = TrainConfig(profile="tiny", lam=0.2, iterations=600, batch_size=8,
                  crop=64, seed=11)
print(f"training tiny profile, lambda={cfg.lam}, {cfg.iterations} iterations "
      f"on {len(corpus)} synthetic 64x64 images...")
params, model_cfg, history = train(corpus, cfg)

# the loss is noisy batch to batch; a trailing mean shows the trend
losses = smoothed([h["L"] for h in history], 50)
print("\nsmoothed loss:")
for i in range(0, len(losses), 100):
    print(f"  iter {history[i]['iter']:4d}  L={losses[i]:.4f}  "
          f"R={history[i]['R_bits']:7.1f} bits  D={history[i]['D']:8.1f}")
print(f"  final     L={losses[-1]:.4f}")


def real_codec_numbers(p, img):
    blob, info = encode_image(img, p, model_cfg)
    recon, _ = decode_image(blob, p, model_cfg)
    return info["bpp"], psnr(img, recon)


untrained = TR.init_weights(model_cfg, seed=11)
print("\nheld-out images through the real coder:")
print(f"  {'':10s} {'bpp':>8s} {'psnr':>8s}")
for name, p in (("untrained", untrained), ("trained", params)):
    stats = [real_codec_numbers(p, img) for img in held_out]
    bpp = float(np.mean([s[0] for s in stats]))
    quality = float(np.mean([s[1] for s in stats]))
    print(f"  {name:10s} {bpp:8.4f} {quality:8.2f}")
print("\ntraining cut the real bitrate; longer runs and higher lambda "
      "push quality further (see the eval subcommand)")

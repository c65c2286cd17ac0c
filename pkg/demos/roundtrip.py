"""A first tour of the codec: compress one image, get it back, count bits.

Run:  python3 demos/roundtrip.py

The pipeline is analysis transform -> quantize -> hyper analysis ->
arithmetic coding, with a context model predicting each latent's
distribution from its already-decoded neighbors. Everything here uses
fresh random weights; see train_toy.py for what training changes.
"""

import numpy as np

from caecodec import transforms as TR
from caecodec.codec import decode_image, encode_image
from caecodec.data import synth_image
from caecodec.metrics import psnr

# a synthetic 64x64 test card: gradients, edges, and a little noise
img = synth_image(np.random.default_rng(7), 64, 64)

cfg = TR.make_config("tiny")
params = TR.init_weights(cfg, seed=0)
print(f"profile=tiny  N={cfg['N']} M={cfg['M']} (latent channels)")

blob, info = encode_image(img, params, cfg, return_recon=True)
print(f"\nencoded {img.shape[1]}x{img.shape[0]} -> {len(blob)} bytes "
      f"({info['bpp']:.4f} bpp)")
print(f"analytic rate estimate: {info['est_bits']:.1f} bits")
print(f"actual payload:         {info['real_bits']} bits")
print(f"estimate gap:           "
      f"{100 * (info['real_bits'] / info['est_bits'] - 1):+.2f}%")

recon, dinfo = decode_image(blob, params, cfg)

# the decoder rebuilds the very same latents the encoder quantized, so its
# output is bit-identical to the encoder-side reconstruction
assert np.array_equal(recon, info["recon"])
print(f"\ndecoder output matches encoder-side reconstruction exactly")
print(f"psnr vs original: {psnr(img, recon):.2f} dB "
      f"(random weights; training is what buys quality)")

t_enc, t_dec = info["timings"], dinfo["timings"]
print("\nper-stage seconds:")
for side, t in (("encode", t_enc), ("decode", t_dec)):
    parts = "  ".join(f"{k}={v:.4f}" for k, v in sorted(t.items()))
    print(f"  {side}: {parts}")

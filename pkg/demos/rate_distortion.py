"""Build a rate-distortion curve and compare codecs with BD-rate.

Run:  python3 demos/rate_distortion.py     (about five minutes on one core)

Trains the tiny profile at two lambda values, measures (bpp, PSNR) on
held-out images, writes a gnuplot-ready .dat file, and shows what the
BD-rate summary does on a known rate shift.
"""

import numpy as np

from caecodec.codec import decode_image, encode_image, roundtrip_file_bits
from caecodec.data import synth_corpus, synth_image
from caecodec.metrics import RDCurve, RDPoint, bd_rate, psnr, write_rd_dat
from caecodec.trainer import TrainConfig, train

corpus = synth_corpus(7, 24, 64, 64)
held_out = [synth_image(np.random.default_rng(8), 64, 64) for _ in range(2)]

points = []
for lam in (0.02, 0.2):
    print(f"training lambda={lam}...")
    cfg = TrainConfig(profile="tiny", lam=lam, iterations=600, batch_size=8,
                      crop=64, seed=11)
    params, model_cfg, _ = train(corpus, cfg)
    bpps, quals = [], []
    for img in held_out:
        blob, _ = encode_image(img, params, model_cfg)
        recon, _ = decode_image(blob, params, model_cfg)
        bpps.append(roundtrip_file_bits(blob) / (img.shape[0] * img.shape[1]))
        quals.append(psnr(img, recon))
    pt = RDPoint(float(np.mean(bpps)), float(np.mean(quals)))
    points.append(pt)
    print(f"  lambda={lam}: {pt.bpp:.4f} bpp, {pt.quality:.2f} dB")

curve = RDCurve(tuple(points))
write_rd_dat("toy_rd.dat", {"tiny-toy": curve})
print("\nwrote toy_rd.dat  (column 1: bpp, column 2: PSNR dB; plot with "
      "gnuplot or any 2-column reader)")

# BD-rate integrates the horizontal gap between two curves over their
# shared quality range: negative numbers mean the test codec spends fewer
# bits at equal quality. A uniform 10% rate saving reads back exactly.
better = RDCurve(tuple(RDPoint(p.bpp * 0.9, p.quality) for p in points))
print(f"\nBD-rate of an exact 10% rate saving: "
      f"{bd_rate(curve, better):+.2f}%")
print(f"BD-rate of the curve against itself:  "
      f"{bd_rate(curve, curve):+.2f}%")

"""Why the hybrid profiles exist: the context loop is the slow part.

Run:  python3 demos/split_latent_speed.py

Decoding with a spatial context model is inherently sequential: each
latent's distribution depends on its already-decoded neighbors, so the
decoder walks the grid position by position. The hybrid profiles only run
that loop over the first M1 channels and code the rest from the
hyperprior's scales alone, which parallelizes. Same total channel count,
measurably less time in the loop.
"""

import numpy as np

from caecodec import transforms as TR
from caecodec.codec import benchmark_codec
from caecodec.data import synth_image

images = [synth_image(np.random.default_rng(60 + i), 64, 64)
          for i in range(2)]

reports = {}
for profile in ("tiny", "tiny-hybrid"):
    cfg = TR.make_config(profile)
    params = TR.init_weights(cfg, seed=0)
    reports[profile] = benchmark_codec(images, params, cfg, repeats=3)
    m1 = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    print(f"{profile}: M={cfg['M']} channels, {m1} context-coded")

print(f"\nmean seconds per image ({len(images)} images x 3 repeats):")
hdr = f"  {'stage':24s}" + "".join(f"{p:>14s}" for p in reports)
print(hdr)
for side in ("encode", "decode"):
    for stage in ("transforms", "context_loop", "coder", "total"):
        row = f"  {side + '.' + stage:24s}"
        for profile in reports:
            row += f"{reports[profile][side][stage]:14.4f}"
        print(row)

loop = {p: r["encode"]["context_loop"] + r["decode"]["context_loop"]
        for p, r in reports.items()}
saving = 100 * (1 - loop["tiny-hybrid"] / loop["tiny"])
print(f"\ncontext-loop time saved by the split latent: {saving:.0f}%")
print("the production-size profiles (base, hybrid-320, hybrid-400) scale "
      "the same trade-off up")

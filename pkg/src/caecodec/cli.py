"""Command-line surface: train, encode, decode, eval, bench, ablate.

All outputs are written atomically (temp file in the target directory, then
rename), so an interrupted run never leaves a corrupt artifact. Errors exit
nonzero after one machine-readable "error: ..." line on stderr.
"""

import argparse
import glob
import os
import sys

from . import transforms as TR
from .codec import benchmark_codec, decode_image, encode_image
from .data import load_ppm_dir, synth_corpus
from .image_io import read_ppm, write_ppm
from .metrics import evaluate_corpus, write_rd_dat
from .trainer import TrainConfig, read_config, smoothed, train
from .weights_io import load_weights, save_weights

PROFILE_CHOICES = tuple(TR.PROFILES)


def _atomic_write_bytes(path, data: bytes):
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str):
    _atomic_write_bytes(path, text.encode())


def _load_dataset(args):
    if getattr(args, "data", None):
        items, skipped = load_ppm_dir(args.data)
        for name in skipped:
            print("warning: skipping unreadable image %s" % name,
                  file=sys.stderr)
        if not items:
            raise ValueError("no usable PPM images in %s" % args.data)
        return [img for _, img in items]
    size = max(64, getattr(args, "crop", None) or 64)
    return synth_corpus(args.seed, args.synthetic, size, size)


def cmd_train(args) -> int:
    overrides = {}
    for field, attr in (("profile", "profile"), ("lam", "lam"),
                        ("metric", "metric"),
                        ("conditioning", "conditioning"), ("seed", "seed"),
                        ("iterations", "iterations"), ("lr", "lr"),
                        ("batch_size", "batch_size"), ("crop", "crop"),
                        ("rate_points", "rate_points"),
                        ("two_phase_lr", "two_phase_lr"),
                        ("log_every", "log_every"),
                        ("lambda_unchecked", "lambda_unchecked")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides[field] = v
    if args.config:
        cfg = read_config(args.config, overrides)
    else:
        cfg = TrainConfig(**overrides)
    dataset = _load_dataset(argparse.Namespace(
        data=args.data, seed=cfg.seed, synthetic=args.synthetic,
        crop=cfg.crop))
    params, model_cfg, history = train(dataset, cfg, log_path=args.log)
    save_weights(args.out, params, model_cfg)
    if history:
        last = history[-1]
        print("iter=%d L=%.6f R_bits=%.2f D=%.6f" %
              (last["iter"], last["L"], last["R_bits"], last["D"]))
    print("wrote %s" % args.out)
    return 0


def cmd_encode(args) -> int:
    img = read_ppm(args.input)
    params, cfg = load_weights(args.weights)
    blob, info = encode_image(img, params, cfg,
                              deterministic=args.deterministic_math,
                              embed_cdf_crc=args.cdf_checksums)
    _atomic_write_bytes(args.out, blob)
    print("bpp=%.6f est_bits=%.2f real_bits=%d"
          % (info["bpp"], info["est_bits"], info["real_bits"]))
    print("clamped=%d fraction=%.6f"
          % (info["clamp_y"] + info["clamp_z"], info["clamp_fraction"]))
    if info["clamp_fraction"] > 0.01:
        print("warning: %.2f%% of latents hit the quantizer range; "
              "reconstruction may suffer" % (100 * info["clamp_fraction"]),
              file=sys.stderr)
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        blob = fh.read()
    params, cfg = load_weights(args.weights)
    img, info = decode_image(blob, params, cfg)
    write_ppm(args.out, img)
    print("wrote %s (%dx%d)" % (args.out, info["width"], info["height"]))
    return 0


def cmd_eval(args) -> int:
    paths = []
    for pat in args.weights:
        hits = sorted(glob.glob(pat))
        paths.extend(hits if hits else [pat])
    curve, report = evaluate_corpus(paths, args.data,
                                    deterministic=args.deterministic_math,
                                    quality=args.quality, jobs=args.jobs)
    lines = ["# corpus evaluation: %d images, %d skipped"
             % (report["evaluated"], len(report["skipped"]))]
    for lam in report["lambdas"]:
        lines.append("# lambda=%g" % lam)
        lines.extend(report["rows"][lam])
        avg = report["averages"][lam]
        lines.append("average: bpp, %.4f; PSNR, %.4f; MS-SSIM-dB, %.4f"
                     % (avg["bpp"], avg["psnr"], avg["msssim_db"]))
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write_text(args.out, text)
        print("wrote %s" % args.out)
    else:
        sys.stdout.write(text)
    if args.dat:
        if curve is None:
            raise ValueError("need at least 2 weight files for an R-D curve")
        write_rd_dat(args.dat, {"model": curve})
        print("wrote %s" % args.dat)
    return 0


def cmd_bench(args) -> int:
    cfg = TR.make_config(args.profile, lam=args.lam, seed=args.seed)
    if args.weights:
        params, cfg = load_weights(args.weights)
    else:
        params = TR.init_weights(cfg, seed=args.seed)
    images = synth_corpus(args.seed, args.images, args.size, args.size)
    rep = benchmark_codec(images, params, cfg, repeats=args.repeats,
                          deterministic=args.deterministic_math)
    lines = []
    for side in ("encode", "decode"):
        for stage, secs in rep[side].items():
            lines.append("%s.%s=%.6f" % (side, stage, secs))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        _atomic_write_text(args.out, text)
    return 0


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args)
    lines, deltas = [], []
    for seed in range(args.seeds):
        finals = {}
        for mode in ("discrete", "noisy"):
            cfg = TrainConfig(profile=args.profile, lam=args.lam,
                              conditioning=mode, seed=seed,
                              iterations=args.iterations,
                              batch_size=args.batch_size, crop=args.crop)
            _, _, history = train(dataset, cfg)
            lines.append("# seed=%d conditioning=%s" % (seed, mode))
            lines.extend("%d %.6f" % (h["iter"], h["L"]) for h in history)
            tail = smoothed([h["L"] for h in history],
                            max(1, len(history) // 10))
            finals[mode] = float(tail[-1])
        delta = finals["discrete"] - finals["noisy"]
        deltas.append(delta)
        lines.append("final_loss seed=%d discrete=%.6f noisy=%.6f delta=%.6f"
                     % (seed, finals["discrete"], finals["noisy"], delta))
        print(lines[-1])
    wins = sum(1 for d in deltas if d <= 0)
    summary = "discrete_wins=%d/%d" % (wins, args.seeds)
    lines.append(summary)
    print(summary)
    if args.out:
        _atomic_write_text(args.out, "\n".join(lines) + "\n")
        print("wrote %s" % args.out)
    return 0


def _add_det_flag(p):
    p.add_argument("--deterministic-math", default=True,
                   action=argparse.BooleanOptionalAction,
                   help="float64 everywhere (default); disabling switches "
                   "parameter inference to float32 on both codec sides")


def build_parser():
    p = argparse.ArgumentParser(
        prog="caecodec",
        description="learned image codec with a context-adaptive entropy "
                    "model (PPM in, PPM out)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize weights on a corpus")
    t.add_argument("--config", help="key=value config file; flags win")
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--data", help="directory of training PPMs "
                   "(default: synthetic corpus)")
    t.add_argument("--synthetic", type=int, default=24,
                   help="synthetic corpus size when --data is absent")
    t.add_argument("--log", help="JSONL metrics log path")
    t.add_argument("--profile", choices=PROFILE_CHOICES)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--metric", choices=("mse", "msssim"))
    t.add_argument("--conditioning", choices=("discrete", "noisy"))
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--crop", type=int)
    t.add_argument("--rate-points", type=int, dest="rate_points")
    t.add_argument("--two-phase-lr", action="store_const", const=True,
                   dest="two_phase_lr")
    t.add_argument("--log-every", type=int, dest="log_every")
    t.add_argument("--lambda-unchecked", action="store_const", const=True,
                   dest="lambda_unchecked",
                   help="allow lambda outside [0.01, 0.5]")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress one PPM image")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--cdf-checksums", action="store_true",
                   help="embed per-stream CDF CRCs (debug)")
    _add_det_flag(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a PPM from a stream")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--weights", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="R-D evaluation over a corpus")
    ev.add_argument("--weights", nargs="+", required=True,
                    help="weight files or globs, one R-D point each")
    ev.add_argument("--data", required=True, help="directory of PPMs")
    ev.add_argument("--out", help="report path (default stdout)")
    ev.add_argument("--dat", help="gnuplot R-D data file")
    ev.add_argument("--quality", choices=("psnr", "msssim"), default="psnr")
    ev.add_argument("--jobs", type=int, default=1,
                    help="parallel image workers")
    _add_det_flag(ev)
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage codec timing")
    b.add_argument("--profile", choices=PROFILE_CHOICES, default="tiny")
    b.add_argument("--weights", help="time these weights instead of "
                   "freshly initialized ones")
    b.add_argument("--lambda", dest="lam", type=float, default=0.01)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--images", type=int, default=2)
    b.add_argument("--size", type=int, default=128)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", help="also write the key=value report here")
    _add_det_flag(b)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate",
                       help="paired discrete-vs-noisy conditioning runs")
    a.add_argument("--profile", choices=PROFILE_CHOICES, default="tiny")
    a.add_argument("--lambda", dest="lam", type=float, default=0.01)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--iterations", type=int, default=300)
    a.add_argument("--batch-size", type=int, dest="batch_size", default=4)
    a.add_argument("--crop", type=int, default=32)
    a.add_argument("--data", help="directory of training PPMs")
    a.add_argument("--synthetic", type=int, default=12)
    a.add_argument("--seed", type=int, default=0,
                   help="seed for the synthetic corpus itself")
    a.add_argument("--out", help="report path")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line, machine-readable failure
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Quality metrics, R-D curves, and BD-rate comparison.

MS-SSIM uses the standard 5-scale setup: 11x11 Gaussian window (sigma 1.5),
scale weights (0.0448, 0.2856, 0.3001, 0.2363, 0.1333), K1=0.01, K2=0.03 on
the 0..255 range, 2x2 mean-pool between scales, luminance term at the
coarsest scale only. Images below 176px on a side get fewer scales with the
weights renormalized; callers are warned because values at different scale
counts are not comparable.
"""

import dataclasses
import warnings
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import PchipInterpolator

from . import tensor as T

MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
GAUSS_SIZE = 11
GAUSS_SIGMA = 1.5
C1 = (0.01 * 255.0) ** 2
C2 = (0.03 * 255.0) ** 2
MEAN_FLOOR = 1e-6  # keeps the log-space scale product defined


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB between two 8-bit images."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("image shapes differ: %s vs %s" % (a.shape, b.shape))
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def gaussian_kernel1d(n: int = GAUSS_SIZE, sigma: float = GAUSS_SIGMA):
    r = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _blur_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    v = sliding_window_view(x, k.size, axis=0) @ k
    return sliding_window_view(v, k.size, axis=1) @ k


def _pool2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    return x[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def usable_scales(h: int, w: int, max_scales: int = 5) -> int:
    """How many pooling scales keep the image at least one window wide."""
    s = 1
    while s < max_scales and (h // 2) >= GAUSS_SIZE and (w // 2) >= GAUSS_SIZE:
        s += 1
        h //= 2
        w //= 2
    return s


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity on the 0..255 range, in [0, 1].

    Channel statistics are pooled jointly at each scale. Symmetric in its
    arguments.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("image shapes differ: %s vs %s" % (a.shape, b.shape))
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    h, w = x.shape[:2]
    scales = usable_scales(h, w)
    if scales < len(MSSSIM_WEIGHTS):
        warnings.warn("image %dx%d supports only %d of 5 scales; weights "
                      "renormalized" % (h, w, scales), RuntimeWarning,
                      stacklevel=2)
    wts = MSSSIM_WEIGHTS[:scales] / MSSSIM_WEIGHTS[:scales].sum()
    k = gaussian_kernel1d()
    vals = np.empty(scales)
    for j in range(scales):
        mu1, mu2 = _blur_valid(x, k), _blur_valid(y, k)
        s11 = _blur_valid(x * x, k) - mu1 * mu1
        s22 = _blur_valid(y * y, k) - mu2 * mu2
        s12 = _blur_valid(x * y, k) - mu1 * mu2
        cs = (2.0 * s12 + C2) / (s11 + s22 + C2)
        if j < scales - 1:
            vals[j] = max(cs.mean(), MEAN_FLOOR)
            x, y = _pool2(x), _pool2(y)
        else:
            lum = (2.0 * mu1 * mu2 + C1) / (mu1 * mu1 + mu2 * mu2 + C1)
            vals[j] = max((lum * cs).mean(), MEAN_FLOOR)
    return float(np.prod(vals ** wts))


def ms_ssim_tape(tape, a, b):
    """Tape-recorded MS-SSIM between (h, w, c) tensors on the 0..255 scale.

    Mirrors ms_ssim; the scale product runs in log space, with per-scale
    means floored so the log stays finite.
    """
    h, w = a.data.shape[:2]
    scales = usable_scales(h, w)
    wts = MSSSIM_WEIGHTS[:scales] / MSSSIM_WEIGHTS[:scales].sum()
    k = gaussian_kernel1d()
    c1 = T.Tensor(np.float64(C1), name="C1")
    c2 = T.Tensor(np.float64(C2), name="C2")
    two = T.Tensor(np.float64(2.0), name="two")
    acc = None
    x, y = a, b
    for j in range(scales):
        mu1, mu2 = T.blur_valid(tape, x, k), T.blur_valid(tape, y, k)
        mu11 = T.mul(tape, mu1, mu1)
        mu22 = T.mul(tape, mu2, mu2)
        mu12 = T.mul(tape, mu1, mu2)
        s11 = T.sub(tape, T.blur_valid(tape, T.mul(tape, x, x), k), mu11)
        s22 = T.sub(tape, T.blur_valid(tape, T.mul(tape, y, y), k), mu22)
        s12 = T.sub(tape, T.blur_valid(tape, T.mul(tape, x, y), k), mu12)
        cs = T.div(tape,
                   T.add(tape, T.mul(tape, two, s12), c2),
                   T.add(tape, T.add(tape, s11, s22), c2))
        if j < scales - 1:
            m = T.mean_all(tape, cs)
            x, y = T.avg_pool2(tape, x), T.avg_pool2(tape, y)
        else:
            lum = T.div(tape,
                        T.add(tape, T.mul(tape, two, mu12), c1),
                        T.add(tape, T.add(tape, mu11, mu22), c1))
            m = T.mean_all(tape, T.mul(tape, lum, cs))
        term = T.mul(tape, T.log(tape, T.clip_min(tape, m, MEAN_FLOOR)),
                     T.Tensor(np.float64(wts[j]), name="w%d" % j))
        acc = term if acc is None else T.add(tape, acc, term)
    return T.exp(tape, acc)


def ms_ssim_db(v: float) -> float:
    if v >= 1.0:
        return float("inf")
    return float(-10.0 * np.log10(1.0 - v))


def fmt_db(v: float) -> str:
    """Fixed-point dB with an 'inf' sentinel for lossless results."""
    return "inf" if np.isinf(v) else "%.4f" % v


@dataclasses.dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric: str = "psnr"

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive, got %r" % (self.bpp,))


@dataclasses.dataclass(frozen=True)
class RDCurve:
    points: tuple
    metric: str = "psnr"

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        if any(p.metric != self.metric for p in pts):
            raise ValueError("mixed quality metrics in one curve")
        if any(b.bpp <= a.bpp for a, b in zip(pts, pts[1:])):
            raise ValueError("duplicate bpp values in curve")
        object.__setattr__(self, "points", pts)

    @property
    def bpps(self):
        return np.array([p.bpp for p in self.points])

    @property
    def qualities(self):
        return np.array([p.quality for p in self.points])


def _log_rate_integral(curve: RDCurve, lo: float, hi: float):
    q = curve.qualities
    r = np.log(curve.bpps)
    order = np.argsort(q)
    q, r = q[order], r[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("curve has non-increasing quality; cannot fit")
    if len(q) >= 4:
        return float(PchipInterpolator(q, r).integrate(lo, hi)), "pchip"
    anti = np.polyint(np.polyfit(q, r, len(q) - 1))
    return float(np.polyval(anti, hi) - np.polyval(anti, lo)), "polyfit"


def bd_rate(anchor: RDCurve, test: RDCurve, detail: bool = False):
    """Average rate difference of `test` against `anchor`, in percent.

    Integrates log-rate over the common quality interval; negative values
    mean `test` spends fewer bits at equal quality.
    """
    if anchor.metric != test.metric:
        raise ValueError("curves use different quality metrics")
    for c in (anchor, test):
        if len(c.points) < 2:
            raise ValueError("need at least 2 points per curve")
        if not np.all(np.isfinite(c.qualities)):
            raise ValueError("non-finite quality value in curve")
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise ValueError("quality ranges do not overlap "
                         "(anchor %.4g..%.4g, test %.4g..%.4g)"
                         % (anchor.qualities.min(), anchor.qualities.max(),
                            test.qualities.min(), test.qualities.max()))
    ia, ma = _log_rate_integral(anchor, lo, hi)
    it, mt = _log_rate_integral(test, lo, hi)
    pct = 100.0 * (np.exp((it - ia) / (hi - lo)) - 1.0)
    if detail:
        return float(pct), ("pchip" if ma == mt == "pchip" else "polyfit")
    return float(pct)


def _eval_one(task):
    """One (weights, image) evaluation; top-level so process pools can use it."""
    params, cfg, name, img, deterministic = task
    from .codec import decode_image, encode_image, roundtrip_file_bits
    blob, _ = encode_image(img, params, cfg, deterministic=deterministic)
    recon, _ = decode_image(blob, params, cfg)
    bpp = roundtrip_file_bits(blob) / float(img.shape[0] * img.shape[1])
    p = psnr(img, recon)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mdb = ms_ssim_db(ms_ssim(img, recon))
    return name, bpp, p, mdb


def evaluate_corpus(weight_paths, image_dir, deterministic: bool = True,
                    quality: str = "psnr", jobs: int = 1):
    """Encode/decode every image under each weight file; build an R-D curve.

    Returns (curve, report). The report dict carries per-image rows in the
    form "bpp, 0.2040; PSNR, 32.2063; MS-SSIM-dB, ..." plus averages and the
    skipped-file count. jobs > 1 spreads images over processes; results are
    identical to the serial order.
    """
    from .data import load_ppm_dir
    from .weights_io import load_weights

    items, skipped = load_ppm_dir(image_dir)
    for name in skipped:
        warnings.warn("skipping unreadable image %s" % name, RuntimeWarning,
                      stacklevel=2)
    if not items:
        raise ValueError("no decodable images in %s" % image_dir)
    report = {"lambdas": [], "rows": {}, "averages": {},
              "skipped": list(skipped), "evaluated": len(items),
              "quality": quality}
    points = []
    for wpath in weight_paths:
        params, cfg = load_weights(wpath)
        tasks = [(params, cfg, name, img, deterministic)
                 for name, img in items]
        if jobs > 1:
            import concurrent.futures as cf
            with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(_eval_one, tasks))
        else:
            results = [_eval_one(t) for t in tasks]
        rows, bpps, psnrs, msdbs = [], [], [], []
        for name, bpp, p, mdb in results:
            rows.append("%s: bpp, %.4f; PSNR, %s; MS-SSIM-dB, %s"
                        % (name, bpp, fmt_db(p), fmt_db(mdb)))
            bpps.append(bpp)
            psnrs.append(p)
            msdbs.append(mdb)
        lam = cfg["lambda"]
        avg_q = float(np.mean(psnrs)) if quality == "psnr" \
            else float(np.mean(msdbs))
        avg_bpp = float(np.mean(bpps))
        report["lambdas"].append(lam)
        report["rows"][lam] = rows
        report["averages"][lam] = {
            "bpp": avg_bpp,
            "psnr": float(np.mean(psnrs)),
            "msssim_db": float(np.mean(msdbs)),
        }
        points.append(RDPoint(avg_bpp, avg_q, metric=quality))
    curve = RDCurve(tuple(points), metric=quality) if len(points) >= 2 \
        else None
    report["points"] = [(p.bpp, p.quality) for p in points]
    return curve, report


def write_rd_dat(path, curves: dict):
    """Gnuplot data file: one indexed block per named curve, bpp then
    quality columns."""
    lines = []
    for i, (name, curve) in enumerate(curves.items()):
        lines.append("# curve %d: %s (%s)" % (i, name, curve.metric))
        lines.append("# bpp quality")
        for p in curve.points:
            lines.append("%.6f %.6f" % (p.bpp, p.quality))
        lines.append("")
        lines.append("")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines))
    import os
    os.replace(tmp, path)

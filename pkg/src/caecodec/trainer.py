"""Rate-distortion training loop.

The loss couples the estimated code length of the noisy latents with a
reconstruction distortion:

    L = (1 - lam) / (W_y * H_y * 256) * R  +  lam / 1000 * D

so larger lam buys reconstruction quality with a higher rate. R is in bits
per image, D is MSE on the 0..255 scale (or 3000 * (1 - MS-SSIM)).

Noise placement: uniform noise stands in for rounding only where a
probability is evaluated. The conditioning mode decides what the synthesis
and hyper paths see: "discrete" feeds them the actually-quantized latents,
"noisy" feeds them the noise-perturbed ones (the weaker baseline kept for
the ablation).
"""

import dataclasses
import json
import numpy as np

from . import tensor as T
from . import transforms as TR
from .entropy import SIGMA_FLOOR_TRAIN, f_batched
from .metrics import ms_ssim_tape
from .optim import AdamState, TrainingAborted, adam_step, zero_grads
from .data import random_crop
from .image_io import to_signal

LAMBDA_MIN, LAMBDA_MAX = 0.01, 0.5


@dataclasses.dataclass
class TrainConfig:
    profile: str = "tiny"
    lam: float = 0.01
    metric: str = "mse"               # mse | msssim
    conditioning: str = "discrete"    # discrete | noisy
    batch_size: int = 8
    iterations: int = 2000
    lr: float = 1e-4
    crop: int = 32
    rate_points: int = 32             # 16 is the hybrid default
    seed: int = 0
    schedule_frac: float = 0.4        # tail fraction with lr halvings
    schedule_drops: int = 4
    two_phase_lr: bool = False        # constant-lr warm phase, then schedule
    pretrain_frac: float = 0.2
    divergence_patience: int = 1000
    log_every: int = 1
    lambda_unchecked: bool = False

    def __post_init__(self):
        if self.metric not in ("mse", "msssim"):
            raise ValueError("metric must be mse or msssim")
        if self.conditioning not in ("discrete", "noisy"):
            raise ValueError("conditioning must be discrete or noisy")
        if self.crop % 16 != 0 or self.crop <= 0:
            raise ValueError("crop size must be a positive multiple of 16")
        if not self.lambda_unchecked and not \
                (LAMBDA_MIN <= self.lam <= LAMBDA_MAX):
            raise ValueError(
                "lambda %.4g outside [%.2f, %.2f]; pass lambda_unchecked "
                "to override" % (self.lam, LAMBDA_MIN, LAMBDA_MAX))


FULL_PRESET = dict(iterations=1_000_000, lr=5e-5, crop=256, batch_size=8,
                    schedule_frac=0.2, schedule_drops=4)


def _coerce(field, text):
    if field.type == "bool" or isinstance(field.default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    return type(field.default)(text)


def write_config(path, cfg: TrainConfig):
    lines = ["%s=%s" % (f.name, getattr(cfg, f.name))
             for f in dataclasses.fields(cfg)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path, overrides=None) -> TrainConfig:
    """key=value file; later duplicates win, then explicit overrides win."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    vals = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value, got %r"
                                 % (path, ln, raw.rstrip()))
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError("%s:%d: unknown key %r" % (path, ln, key))
            vals[key] = _coerce(fields[key], val)
    if overrides:
        vals.update(overrides)
    return TrainConfig(**vals)


def lr_at(i: int, cfg: TrainConfig) -> float:
    total = cfg.iterations
    if cfg.two_phase_lr:
        warm = int(round(cfg.pretrain_frac * total))
        if i < warm:
            return cfg.lr
        i, total = i - warm, total - warm
    start = total * (1.0 - cfg.schedule_frac)
    if i < start or cfg.schedule_drops == 0:
        return cfg.lr
    step = total * cfg.schedule_frac / cfg.schedule_drops
    drops = min(cfg.schedule_drops, int((i - start) // step) + 1)
    return cfg.lr * 0.5 ** drops


def sample_rate_points(dims, count: int, rng: np.random.Generator):
    """Flat raster indices of `count` distinct latent positions."""
    total = int(dims[0]) * int(dims[1])
    if count > total:
        raise ValueError("asked for %d rate points on a %d-position grid"
                         % (count, total))
    idx = rng.choice(total, size=count, replace=False)
    idx.sort()
    return idx


def forward_train(tape, x, params, cfg, noise_rng=None, noise=None,
                  quant_mode: str = "hard"):
    """One training forward pass; x is an (h, w, 3) signal array.

    Returns a state dict of tape tensors. `noise` can pin the uniform
    perturbations (arrays keyed "y" and "z") and quant_mode="passthrough"
    removes the rounding steps, so finite-difference checks see a smooth
    deterministic function.
    """
    x_t = T.Tensor(np.asarray(x, dtype=np.float64), name="x")
    y = TR.ga_forward(tape, x_t, params, cfg)

    if noise is not None:
        y_noisy = T.Tensor(y.data + noise["y"], name="y_noisy")
        tape.record(y_noisy, lambda g, t=y: T._accum(t, g))
    else:
        y_noisy = T.add_uniform_noise(tape, y, noise_rng)
    y_hat = T.quantize_st(tape, y, mode=quant_mode)
    y_noisy.role, y_hat.role = "noisy", "discrete"
    cond_y = y_hat if cfg["conditioning"] == "discrete" else y_noisy

    z = TR.ha_forward(tape, cond_y, params, cfg)
    if noise is not None:
        z_noisy = T.Tensor(z.data + noise["z"], name="z_noisy")
        tape.record(z_noisy, lambda g, t=z: T._accum(t, g))
    else:
        z_noisy = T.add_uniform_noise(tape, z, noise_rng)
    z_hat = T.quantize_st(tape, z, mode=quant_mode)
    z_noisy.role, z_hat.role = "noisy", "discrete"
    cond_z = z_hat if cfg["conditioning"] == "discrete" else z_noisy

    hy, wy = y.data.shape[:2]
    c_prime, sigma2 = TR.hs_forward(tape, cond_z, params, cfg, hy, wy)

    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    cond_ctx = cond_y if not cfg["hybrid"] \
        else T.slice_last(tape, cond_y, 0, mctx)
    wins = T.concat_last(tape,
                         T.extract_windows(tape, c_prime, causal=False),
                         T.extract_windows(tape, cond_ctx, causal=True))
    mu, sigma = f_batched(tape, wins, params, cfg,
                          sigma_floor=SIGMA_FLOOR_TRAIN)

    x_hat = TR.gs_forward(tape, cond_y, params, cfg)
    return {
        "x": x_t, "y": y, "y_noisy": y_noisy, "y_hat": y_hat,
        "cond_y": cond_y, "z": z, "z_noisy": z_noisy, "z_hat": z_hat,
        "cond_z": cond_z, "c_prime": c_prime, "sigma2": sigma2,
        "mu": mu, "sigma": sigma, "x_hat": x_hat,
        "dims": (hy, wy), "mctx": mctx, "params": params,
    }


def check_noise_contract(state, cfg):
    """Debug assertion: discrete values on the condition paths, noisy values
    only where probabilities get evaluated."""
    want = "discrete" if cfg["conditioning"] == "discrete" else "noisy"
    if getattr(state["cond_y"], "role", None) != want:
        raise AssertionError("synthesis/hyper condition is %r, expected %r"
                             % (getattr(state["cond_y"], "role", None), want))
    if getattr(state["cond_z"], "role", None) != want:
        raise AssertionError("h_s condition is %r, expected %r"
                             % (getattr(state["cond_z"], "role", None), want))
    for key in ("y_noisy", "z_noisy"):
        if getattr(state[key], "role", None) != "noisy":
            raise AssertionError("%s lost its noisy tag" % key)


def combine_loss(R, D, wy: int, hy: int, lam: float):
    """Scalar form of the objective; R in bits, D on the 0..255 scale."""
    return (1.0 - lam) / (wy * hy * 256.0) * R + lam / 1000.0 * D


def loss_total(tape, state, cfg, lam: float, metric: str,
               rate_idx=None, rate_scale: float = 1.0):
    """(L, R, D) tensors for one image.

    R always evaluates the probability model at the noisy latents. When
    `rate_idx` selects a subset of positions for the context-modeled part,
    `rate_scale` (total/count) keeps R an unbiased full-grid estimate; the
    distortion always covers the whole image.
    """
    hy, wy = state["dims"]
    mctx = state["mctx"]
    P = hy * wy

    flat_noisy = T.reshape(tape, state["y_noisy"], (P, cfg["M"]))
    v1 = T.slice_last(tape, flat_noisy, 0, mctx)
    mu, sigma = state["mu"], state["sigma"]
    if rate_idx is not None and len(rate_idx) < P:
        v1 = T.gather_rows(tape, v1, rate_idx)
        mu = T.gather_rows(tape, mu, rate_idx)
        sigma = T.gather_rows(tape, sigma, rate_idx)
    bits_y1 = T.sum_all(tape, T.gaussian_bin_bits(tape, v1, mu, sigma))
    if rate_scale != 1.0:
        bits_y1 = T.mul(tape, bits_y1,
                        T.Tensor(np.float64(rate_scale), name="rate_scale"))

    zero = T.Tensor(np.zeros(()), name="zero_mean")
    sigma_z = T.clip_min(
        tape, T.exp(tape, state["params"]["sigma_z_log"]), SIGMA_FLOOR_TRAIN)
    bits_z = T.sum_all(tape, T.gaussian_bin_bits(
        tape, state["z_noisy"], zero, sigma_z))

    R = T.add(tape, bits_y1, bits_z)
    if cfg["hybrid"]:
        v2 = T.slice_last(tape, flat_noisy, mctx, cfg["M"])
        sig2 = T.clip_min(tape, T.reshape(
            tape, state["sigma2"], (P, cfg["M"] - mctx)), SIGMA_FLOOR_TRAIN)
        bits_y2 = T.sum_all(tape, T.gaussian_bin_bits(tape, v2, zero, sig2))
        R = T.add(tape, R, bits_y2)
    if not np.isfinite(R.data):
        raise TrainingAborted("rate term is not finite")

    diff = T.sub(tape, state["x_hat"], state["x"])
    if metric == "mse":
        D = T.mul(tape, T.mean_all(tape, T.mul(tape, diff, diff)),
                  T.Tensor(np.float64(127.5 ** 2), name="scale255"))
    else:
        half = T.Tensor(np.float64(127.5), name="half_range")
        one = T.Tensor(np.float64(1.0), name="one")
        a = T.mul(tape, T.add(tape, state["x_hat"], one), half)
        b = T.mul(tape, T.add(tape, state["x"], one), half)
        ms = ms_ssim_tape(tape, a, b)
        D = T.mul(tape, T.sub(tape, one, ms),
                  T.Tensor(np.float64(3000.0), name="scale_msssim"))
    if not np.isfinite(D.data):
        raise TrainingAborted("distortion term is not finite")

    lam_r = T.Tensor(np.float64((1.0 - lam) / (wy * hy * 256.0)), name="w_R")
    lam_d = T.Tensor(np.float64(lam / 1000.0), name="w_D")
    L = T.add(tape, T.mul(tape, R, lam_r), T.mul(tape, D, lam_d))
    if not np.isfinite(L.data):
        raise TrainingAborted("total loss is not finite")
    return L, R, D


def _log_record(fh, history, rec):
    history.append(rec)
    if fh is not None:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()


def train(dataset, cfg: TrainConfig, params=None, log_path=None,
          debug_wiring: bool = False, progress=None):
    """Optimize a model on a list of uint8 images.

    Returns (params, model_cfg, history). The three RNG streams (data,
    noise, rate points) all derive from cfg.seed, so a fixed cfg gives a
    fixed trajectory.
    """
    model_cfg = TR.make_config(cfg.profile, lam=cfg.lam, metric=cfg.metric,
                               conditioning=cfg.conditioning, seed=cfg.seed)
    if params is None:
        params = TR.init_weights(model_cfg, seed=cfg.seed)
    if not dataset:
        raise ValueError("empty training set")
    for img in dataset:
        if img.shape[0] < cfg.crop or img.shape[1] < cfg.crop:
            raise ValueError("training image smaller than the %dpx crop"
                             % cfg.crop)

    root = np.random.default_rng(cfg.seed)
    data_rng, noise_rng, rate_rng = root.spawn(3)
    adam = AdamState(lr=cfg.lr)
    history = []
    fh = open(log_path, "w") if log_path else None
    initial = None
    high_streak = 0
    try:
        for it in range(cfg.iterations):
            adam.lr = lr_at(it, cfg)
            zero_grads(params)
            sums = {"L": 0.0, "R": 0.0, "D": 0.0}
            for b in range(cfg.batch_size):
                img = dataset[int(data_rng.integers(len(dataset)))]
                x = to_signal(random_crop(data_rng, img, cfg.crop))
                tape = T.Tape()
                state = forward_train(tape, x, params, model_cfg,
                                      noise_rng=noise_rng)
                if debug_wiring and it == 0 and b == 0:
                    check_noise_contract(state, model_cfg)
                hy, wy = state["dims"]
                total = hy * wy
                count = min(cfg.rate_points, total)
                idx = None if count == total else \
                    sample_rate_points((hy, wy), count, rate_rng)
                L, R, D = loss_total(tape, state, model_cfg, cfg.lam,
                                     cfg.metric, rate_idx=idx,
                                     rate_scale=total / count)
                tape.backward(L)
                sums["L"] += float(L.data)
                sums["R"] += float(R.data)
                sums["D"] += float(D.data)
            for p in params.values():
                if p.grad is not None:
                    p.grad /= cfg.batch_size
            adam_step(params, adam)
            mean_l = sums["L"] / cfg.batch_size
            if initial is None:
                initial = mean_l
            high_streak = high_streak + 1 if mean_l > 10.0 * initial else 0
            if high_streak >= cfg.divergence_patience:
                raise TrainingAborted(
                    "loss above 10x its initial value for %d iterations "
                    "(%.4g vs initial %.4g)"
                    % (high_streak, mean_l, initial))
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iter": it, "L": mean_l,
                       "R_bits": sums["R"] / cfg.batch_size,
                       "D": sums["D"] / cfg.batch_size,
                       "bpp_estimate": sums["R"] / cfg.batch_size
                       / float(cfg.crop * cfg.crop)}
                _log_record(fh, history, rec)
                if progress is not None:
                    progress(rec)
    finally:
        if fh is not None:
            fh.close()
    return params, model_cfg, history


def smoothed(values, k: int = 50):
    """Trailing moving average used for loss-trend checks."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    k = max(1, min(k, v.size))
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    out[k - 1:] = (c[k:] - c[:-k]) / k
    out[:k - 1] = c[1:k] / np.arange(1, k)
    return out

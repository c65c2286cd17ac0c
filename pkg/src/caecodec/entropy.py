"""Probability machinery: quantization to latent grids, the Gaussian-uniform
PMFs, the two context extractors (bit-consuming and bit-free), and the
distribution estimator f.

Conventions: latent grids are (h, w, channels), raster order is row-major
with origin top-left; position (k, l) means column k, row l. The context
window for (k, l) spans columns k-2..k+1 and rows l-3..l; in window
coordinates the current position is (row 3, col 2) and the causal mask
zeroes it and everything after it.
"""

import numpy as np
import warnings
from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor

SIGMA_FLOOR_TRAIN = 1e-6
SIGMA_FLOOR_CODING = 0.01
V_MIN, V_MAX = T.V_MIN, T.V_MAX


@dataclass
class LatentGrid:
    """Integer symbol grid with its value bounds."""
    values: np.ndarray           # int32, (h, w, c)
    v_min: int = V_MIN
    v_max: int = V_MAX
    clamp_count: int = 0

    def __post_init__(self):
        if not (self.v_min <= 0 <= self.v_max):
            raise ValueError("latent bounds must straddle zero")
        if self.values.size and (self.values.min() < self.v_min
                                 or self.values.max() > self.v_max):
            raise ValueError("latent values outside declared bounds")

    def as_float(self, dtype=np.float64):
        return self.values.astype(dtype)

    @property
    def clamp_fraction(self):
        return self.clamp_count / max(self.values.size, 1)


def quantize(y) -> LatentGrid:
    """Round half away from zero and clamp into [V_MIN, V_MAX]."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    q, clamped = T.quantize_array(arr)
    return LatentGrid(values=q.astype(np.int32), clamp_count=clamped)


def add_uniform_noise(y, rng: np.random.Generator):
    """Array-path noise surrogate; the tape op lives in tensor.py."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return arr + rng.uniform(-0.5, 0.5, size=arr.shape)


# ---------------------------------------------------------------------------
# PMFs

def _clamp_sigma(sigma, floor):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < floor):
        warnings.warn(f"sigma below floor {floor:g}; clamped", RuntimeWarning,
                      stacklevel=3)
        sigma = np.maximum(sigma, floor)
    return sigma


def pmf_gaussian_uniform(value, mu, sigma, sigma_floor=SIGMA_FLOOR_TRAIN):
    """Mass of the unit bin around `value` under N(mu, sigma^2) * U(-1/2, 1/2).

    Equals Phi((v+1/2-mu)/sigma) - Phi((v-1/2-mu)/sigma), computed through
    the complementary-error branch form. Broadcasts over all arguments.
    """
    v = np.asarray(value, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = _clamp_sigma(sigma, sigma_floor)
    a = (v - 0.5 - mu) / sigma
    b = (v + 0.5 - mu) / sigma
    return T.gaussian_interval_prob(a, b)


def pmf_zero_mean(value, sigma, sigma_floor=SIGMA_FLOOR_TRAIN):
    """Zero-mean variant used for the second latent's trainable scales."""
    return pmf_gaussian_uniform(value, 0.0, sigma, sigma_floor)


def tail_masses(mu, sigma, v_min=V_MIN, v_max=V_MAX):
    """Probability below v_min - 1/2 and above v_max + 1/2."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    lo = T.gaussian_interval_prob(np.full_like(mu, -np.inf),
                                  (v_min - 0.5 - mu) / sigma)
    hi = T.gaussian_interval_prob((v_max + 0.5 - mu) / sigma,
                                  np.full_like(mu, np.inf))
    return lo, hi


def rate_estimate(values, sigma, mu=None, sigma_floor=SIGMA_FLOOR_TRAIN):
    """Total bits: sum of -log2 p(value), probabilities floored at 2^-16.

    mu=None selects the zero-mean model (sigma broadcasts per channel).
    """
    if mu is None:
        p = pmf_zero_mean(values, sigma, sigma_floor)
    else:
        p = pmf_gaussian_uniform(values, mu, sigma, sigma_floor)
    p = np.maximum(p, T.RATE_P_FLOOR)
    return float(-np.log2(p).sum())


# ---------------------------------------------------------------------------
# context extraction

CAUSAL_MASK = T.CAUSAL_MASK


def extract_ctx_prime(c_prime: np.ndarray, k: int, l: int):
    """Bit-consuming context window: 4 wide x 4 tall ending at col k+1, row l.

    Out-of-grid cells are zero (marginal areas zero-filled).
    """
    h, w, _ = c_prime.shape
    if not (0 <= k < w and 0 <= l < h):
        raise IndexError(f"position (k={k}, l={l}) outside {w}x{h} grid")
    return T.pad_for_windows(c_prime)[l:l + 4, k:k + 4, :].copy()


def extract_ctx_known(y_known: np.ndarray, k: int, l: int):
    """Bit-free context window over already-decoded latents, causally masked.

    Cells at or after (k, l) in raster order contribute exact zeros whatever
    the buffer holds, so decode-order causality is enforced by construction.
    """
    win = extract_ctx_prime(y_known, k, l)
    return win * CAUSAL_MASK[:, :, None]


# ---------------------------------------------------------------------------
# the estimator f

def _f_layers(cfg):
    return cfg["arch"]["f"]


def estimate_params_f(ctx_prime_win, ctx_known_win, arrs, cfg,
                      sigma_floor=SIGMA_FLOOR_CODING):
    """Run f on one position's channel-concatenated context windows.

    Returns (mu, sigma), each a vector over the context-coded channels.
    Shared parameters: the same weights serve every spatial position.
    """
    win = np.concatenate([ctx_prime_win, ctx_known_win], axis=-1)
    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    if win.shape != (4, 4, 2 * mctx):
        raise T.ShapeError(f"f: window shape {win.shape} != (4, 4, {2 * mctx}) "
                           "(dimension 'channels')")
    h = win
    layers = _f_layers(cfg)
    for i, l in enumerate(layers):
        w = arrs[f"f.{i}.w"]
        b = arrs[f"f.{i}.b"]
        so = h.shape[0] - l["k"] + 1
        out = np.broadcast_to(b, (so, so, b.shape[0])).copy()
        for a in range(l["k"]):
            for c in range(l["k"]):
                out += h[a:a + so, c:c + so, :] @ w[a, c]
        h = np.maximum(out, 0.0) if l["act"] == "relu" else out
    raw = h.reshape(-1)
    mu = raw[:mctx]
    sigma = np.exp(np.clip(raw[mctx:], -T.EXP_CLIP, T.EXP_CLIP))
    return mu, np.maximum(sigma, sigma_floor)


def f_batched(tape, wins: Tensor, params, cfg, sigma_floor=SIGMA_FLOOR_TRAIN):
    """Tape-path f over stacked windows (P, 4, 4, 2*mctx) -> mu, sigma (P, mctx)."""
    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    t = wins
    for i, l in enumerate(_f_layers(cfg)):
        t = T.window_conv(tape, t, params[f"f.{i}.w"], params[f"f.{i}.b"])
        if l["act"] == "relu":
            t = T.relu(tape, t)
    p = t.data.shape[0]
    flat = T.reshape(tape, t, (p, 2 * mctx))
    mu = T.slice_last(tape, flat, 0, mctx)
    sigma = T.clip_min(tape, T.exp(tape, T.slice_last(tape, flat, mctx, 2 * mctx)),
                       sigma_floor)
    return mu, sigma


def f_params_grid(y_known: np.ndarray, c_prime: np.ndarray, arrs, cfg,
                  sigma_floor=SIGMA_FLOOR_CODING):
    """Array-path f at every position at once (encoder-side parallel form).

    Valid because the bit-free context uses only already-known values; the
    result is independent of evaluation order. Returns (mu, sigma) grids of
    shape (h, w, mctx).
    """
    h, w, _ = y_known.shape
    wins = np.concatenate([
        T.extract_windows_array(c_prime, causal=False),
        T.extract_windows_array(y_known, causal=True)], axis=-1)
    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    t = wins
    for i, l in enumerate(_f_layers(cfg)):
        t, _ = T.window_conv_fwd(t, arrs[f"f.{i}.w"], arrs[f"f.{i}.b"])
        if l["act"] == "relu":
            t = np.maximum(t, 0.0)
    raw = t.reshape(h, w, 2 * mctx)
    mu = raw[..., :mctx]
    sigma = np.exp(np.clip(raw[..., mctx:], -T.EXP_CLIP, T.EXP_CLIP))
    return mu, np.maximum(sigma, sigma_floor)


# ---------------------------------------------------------------------------
# diagnostics

def _lag1_stats(chan):
    """(covariance, correlation) of horizontally and vertically adjacent cells."""
    pairs = [(chan[:, :-1], chan[:, 1:]), (chan[:-1, :], chan[1:, :])]
    covs, corrs = [], []
    for a, b in pairs:
        a = a.ravel() - a.mean()
        b = b.ravel() - b.mean()
        cov = float((a * b).mean())
        denom = float(np.sqrt((a * a).mean() * (b * b).mean()))
        covs.append(cov)
        corrs.append(cov / denom if denom > 1e-12 else 0.0)
    return float(np.mean(covs)), float(np.mean(corrs))


def normalization_diagnostic(y_hat: np.ndarray, mu: np.ndarray, sigma: np.ndarray):
    """Lag-1 autocorrelation of raw vs normalized latents.

    Measured on the most-correlated channel: the one whose spatially
    adjacent cells have the highest correlation coefficient, i.e. where
    the most linear structure survives quantization. Returns
    (raw_autocorr, norm_autocorr); constant channels report 0.
    """
    y = y_hat.astype(np.float64)
    nch = y.shape[-1]
    corrs = [_lag1_stats(y[..., c])[1] for c in range(nch)]
    c = int(np.argmax(corrs))
    raw = corrs[c]
    norm = (y[..., c] - mu[..., c]) / np.maximum(sigma[..., c], SIGMA_FLOOR_TRAIN)
    return raw, _lag1_stats(norm)[1]

"""Dense (h, w, c) float64 tensors with a linear reverse-mode tape.

The tape is a flat list of recorded closures replayed in reverse by
``Tape.backward``; there is no general graph machinery. Every op takes the
tape as its first argument and records nothing when it is None, so one code
path serves both training (recorded) and inference (unrecorded).

The convolution arithmetic lives in pure array kernels (``conv_down_fwd``
etc.) that preserve the input dtype; the tape ops wrap them in float64.
The coding paths reuse the same kernels directly, in float64 or float32.
"""

import numpy as np
from dataclasses import dataclass
from numpy.lib.stride_tricks import as_strided
from scipy import special

# Finiteness guard over op outputs. Kept on by default; the invariant is
# that no forward or backward pass may produce NaN/Inf.
STRICT_FINITE = True

# exp() inputs are clamped here so random-weight pipelines stay finite.
EXP_CLIP = 60.0


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up; names the dimension."""


def set_strict_finite(flag: bool):
    global STRICT_FINITE
    STRICT_FINITE = bool(flag)


def _check_finite(arr, what):
    if STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    """A float64 ndarray plus a gradient buffer filled in by the tape."""

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


class Tape:
    """Linear record of ops; reverse replay computes gradients."""

    def __init__(self):
        self.nodes = []

    def record(self, out: Tensor, backward_fn):
        self.nodes.append((out, backward_fn))

    def backward(self, loss: Tensor):
        if loss.data.ndim != 0:
            raise ShapeError("backward expects a scalar loss (dimension 'shape')")
        if not any(out is loss for out, _ in self.nodes):
            raise RuntimeError("backward before forward: loss is not on this tape")
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)
                _check_finite(out.grad, "gradient")


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _out(tape, data, inputs_and_fn=None, name=""):
    t = Tensor(data, name=name)
    _check_finite(t.data, name or "op output")
    if tape is not None and inputs_and_fn is not None:
        tape.record(t, inputs_and_fn)
    return t


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise ops

def add(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    y = _out(tape, a.data + b.data, name="add")
    if tape is not None:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        tape.record(y, bwd)
    return y


def sub(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    y = _out(tape, a.data - b.data, name="sub")
    if tape is not None:
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        tape.record(y, bwd)
    return y


def mul(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    y = _out(tape, a.data * b.data, name="mul")
    if tape is not None:
        def bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        tape.record(y, bwd)
    return y


def div(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    y = _out(tape, a.data / b.data, name="div")
    if tape is not None:
        def bwd(g):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        tape.record(y, bwd)
    return y


def relu(tape, x):
    y = _out(tape, np.maximum(x.data, 0.0), name="relu")
    if tape is not None:
        mask = x.data > 0.0
        tape.record(y, lambda g: _accum(x, g * mask))
    return y


def exp(tape, x):
    # clamp keeps random-weight pipelines finite; gradient is exact inside
    clipped = np.clip(x.data, -EXP_CLIP, EXP_CLIP)
    e = np.exp(clipped)
    y = _out(tape, e, name="exp")
    if tape is not None:
        mask = np.abs(x.data) < EXP_CLIP
        tape.record(y, lambda g: _accum(x, g * e * mask))
    return y


def log(tape, x):
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    y = _out(tape, np.log(x.data), name="log")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, g / x.data))
    return y


def pow_const(tape, x, p: float):
    if np.any(x.data <= 0.0):
        raise ValueError("pow_const requires strictly positive input")
    y = _out(tape, x.data ** p, name="pow_const")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, g * p * x.data ** (p - 1.0)))
    return y


def clip_min(tape, x, lo: float):
    y = _out(tape, np.maximum(x.data, lo), name="clip_min")
    if tape is not None:
        mask = x.data > lo
        tape.record(y, lambda g: _accum(x, g * mask))
    return y


def sum_all(tape, x):
    y = _out(tape, np.asarray(x.data.sum()), name="sum_all")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, np.broadcast_to(g, x.data.shape)))
    return y


def mean_all(tape, x):
    n = x.data.size
    y = _out(tape, np.asarray(x.data.mean()), name="mean_all")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, np.broadcast_to(g / n, x.data.shape)))
    return y


# ---------------------------------------------------------------------------
# structural ops

def concat_last(tape, a, b):
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat_last: leading dims {a.data.shape[:-1]} != {b.data.shape[:-1]} "
            "(dimension 'height/width')")
    ca = a.data.shape[-1]
    y = _out(tape, np.concatenate([a.data, b.data], axis=-1), name="concat_last")
    if tape is not None:
        def bwd(g):
            _accum(a, g[..., :ca])
            _accum(b, g[..., ca:])
        tape.record(y, bwd)
    return y


def slice_last(tape, x, c0: int, c1: int):
    y = _out(tape, x.data[..., c0:c1].copy(), name="slice_last")
    if tape is not None:
        def bwd(g):
            full = np.zeros_like(x.data)
            full[..., c0:c1] = g
            _accum(x, full)
        tape.record(y, bwd)
    return y


def crop_hw(tape, x, h: int, w: int):
    y = _out(tape, x.data[:h, :w, :].copy(), name="crop_hw")
    if tape is not None:
        def bwd(g):
            full = np.zeros_like(x.data)
            full[:h, :w, :] = g
            _accum(x, full)
        tape.record(y, bwd)
    return y


def reshape(tape, x, shape):
    y = _out(tape, x.data.reshape(shape), name="reshape")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, g.reshape(x.data.shape)))
    return y


def gather_rows(tape, x, idx):
    idx = np.asarray(idx, dtype=np.intp)
    y = _out(tape, x.data[idx].copy(), name="gather_rows")
    if tape is not None:
        def bwd(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            _accum(x, full)
        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# convolution kernels (pure, dtype-preserving)

def _same_pad(in_len: int, k: int, stride: int):
    out_len = -(-in_len // stride)  # ceil
    pad = max((out_len - 1) * stride + k - in_len, 0)
    return out_len, pad // 2, pad - pad // 2


def _im2col(xp, kh, kw, stride, out_h, out_w):
    """View of all kh x kw patches of padded input xp, shape (oh, ow, kh, kw, c)."""
    sh, sw, sc = xp.strides
    v = as_strided(
        xp,
        shape=(out_h, out_w, kh, kw, xp.shape[2]),
        strides=(sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return v


def conv_down_fwd(x, w, b, stride: int, mode: str = "same"):
    """Strided cross-correlation. x (h,w,ci), w (kh,kw,ci,co), b (co,)."""
    h, wd, ci = x.shape
    kh, kw, wci, co = w.shape
    if ci != wci:
        raise ShapeError(f"conv_down: input channels {ci} != weight channels {wci} "
                         "(dimension 'channels')")
    if mode == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(wd, kw, stride)
        xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    elif mode == "valid":
        if h < kh or wd < kw:
            raise ShapeError(f"conv_down valid: input {h}x{wd} smaller than kernel "
                             f"{kh}x{kw} (dimension 'height/width')")
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
        pt = pl = 0
        xp = x
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    v = _im2col(xp, kh, kw, stride, oh, ow)
    pmat = v.reshape(oh * ow, kh * kw * ci)
    y = pmat @ w.reshape(kh * kw * ci, co)
    y = y.reshape(oh, ow, co) + b.reshape(1, 1, co)
    cache = (xp.shape, pt, pl, pmat)
    return y, cache


def conv_down_bwd(g, x, w, stride, mode, cache):
    """Gradients of conv_down_fwd w.r.t. (x, w, b)."""
    h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    xp_shape, pt, pl, pmat = cache
    oh, ow = g.shape[0], g.shape[1]
    gmat = g.reshape(oh * ow, co)
    gw = (pmat.T @ gmat).reshape(w.shape)
    gb = gmat.sum(axis=0)
    gp = gmat @ w.reshape(kh * kw * ci, co).T
    gv = gp.reshape(oh, ow, kh, kw, ci)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for a in range(kh):
        for c in range(kw):
            gxp[a:a + (oh - 1) * stride + 1:stride,
                c:c + (ow - 1) * stride + 1:stride, :] += gv[:, :, a, c, :]
    gx = gxp[pt:pt + h, pl:pl + wd, :] if mode == "same" else gxp
    return gx, gw, gb


def conv_up_fwd(x, w, b, stride: int, out_h: int, out_w: int):
    """Transposed convolution: exact adjoint of conv_down_fwd("same").

    x (h,w,cin), w (kh,kw,cout,cin), b (cout,) -> (out_h, out_w, cout).
    (h, w) must equal the "same"-padded down-conv output dims of
    (out_h, out_w) at this stride.
    """
    h, wd, cin = x.shape
    kh, kw, cout, wcin = w.shape
    if cin != wcin:
        raise ShapeError(f"conv_up: input channels {cin} != weight channels {wcin} "
                         "(dimension 'channels')")
    oh, pt, pb = _same_pad(out_h, kh, stride)
    ow, pl, pr = _same_pad(out_w, kw, stride)
    if (oh, ow) != (h, wd):
        raise ShapeError(f"conv_up: input dims {(h, wd)} inconsistent with output "
                         f"dims {(out_h, out_w)} at stride {stride} "
                         "(dimension 'height/width')")
    ph = out_h + pt + pb
    pw = out_w + pl + pr
    gv = (x.reshape(h * wd, cin) @ w.reshape(kh * kw * cout, cin).T)
    gv = gv.reshape(h, wd, kh, kw, cout)
    yp = np.zeros((ph, pw, cout), dtype=x.dtype)
    for a in range(kh):
        for c in range(kw):
            yp[a:a + (h - 1) * stride + 1:stride,
               c:c + (wd - 1) * stride + 1:stride, :] += gv[:, :, a, c, :]
    y = yp[pt:pt + out_h, pl:pl + out_w, :] + b.reshape(1, 1, cout)
    return y, (ph, pw, pt, pl)


def conv_up_bwd(g, x, w, stride, cache):
    h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    ph, pw, pt, pl = cache
    gp = np.zeros((ph, pw, cout), dtype=g.dtype)
    gp[pt:pt + g.shape[0], pl:pl + g.shape[1], :] = g
    v = _im2col(gp, kh, kw, stride, h, wd)
    vmat = v.reshape(h * wd, kh * kw * cout)
    gx = (vmat @ w.reshape(kh * kw * cout, cin)).reshape(h, wd, cin)
    gw = (vmat.T @ x.reshape(h * wd, cin)).reshape(w.shape)
    gb = g.sum(axis=(0, 1))
    return gx, gw, gb


def conv_down(tape, x, w, b, stride: int, mode: str = "same"):
    y_data, cache = conv_down_fwd(x.data, w.data, b.data, stride, mode)
    y = _out(tape, y_data, name="conv_down")
    if tape is not None:
        def bwd(g):
            gx, gw, gb = conv_down_bwd(g, x.data, w.data, stride, mode, cache)
            _accum(x, gx)
            _accum(w, gw)
            _accum(b, gb)
        tape.record(y, bwd)
    return y


def conv_up(tape, x, w, b, stride: int, out_h: int, out_w: int):
    y_data, cache = conv_up_fwd(x.data, w.data, b.data, stride, out_h, out_w)
    y = _out(tape, y_data, name="conv_up")
    if tape is not None:
        def bwd(g):
            gx, gw, gb = conv_up_bwd(g, x.data, w.data, stride, cache)
            _accum(x, gx)
            _accum(w, gw)
            _accum(b, gb)
        tape.record(y, bwd)
    return y


@dataclass
class ConvLayerSpec:
    """Declarative description of one conv layer (down or up)."""
    filter_count: int
    filter_h: int
    filter_w: int
    stride: int
    direction: str   # "down" | "up"
    activation: str  # "gdn" | "igdn" | "relu" | "exp" | "linear"

    def __post_init__(self):
        if self.stride < 1 or self.filter_h < 1 or self.filter_w < 1:
            raise ValueError("ConvLayerSpec: stride and filter dims must be >= 1")
        if self.direction not in ("down", "up"):
            raise ValueError(f"ConvLayerSpec: bad direction {self.direction!r}")
        if self.activation not in ("gdn", "igdn", "relu", "exp", "linear"):
            raise ValueError(f"ConvLayerSpec: bad activation {self.activation!r}")


def conv2d(tape, x, w, b, spec: ConvLayerSpec):
    """Spec-driven conv: down = strided same-padded, up = transposed."""
    if spec.direction == "down":
        return conv_down(tape, x, w, b, spec.stride)
    h, wd = x.data.shape[0], x.data.shape[1]
    return conv_up(tape, x, w, b, spec.stride, h * spec.stride, wd * spec.stride)


# ---------------------------------------------------------------------------
# GDN / IGDN

GDN_BETA_EPS = 1e-6


def gdn_ref(x, gamma, beta, inverse: bool = False):
    """Plain-math (I)GDN on raw gamma/beta; validates the documented domain."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0.0):
        raise ValueError("gdn: beta must be strictly positive")
    if np.any(gamma < 0.0):
        raise ValueError("gdn: gamma must be nonnegative")
    s = np.einsum("hwj,ij->hwi", x * x, gamma) + beta.reshape(1, 1, -1)
    return x * np.sqrt(s) if inverse else x / np.sqrt(s)


def gdn(tape, x, gamma_raw, beta_raw, inverse: bool = False):
    """(I)GDN layer, reparameterized: gamma = gamma_raw^2, beta = beta_raw^2 + eps.

    Forward: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), multiplied
    instead of divided when inverse.
    """
    gamma = gamma_raw.data * gamma_raw.data
    beta = beta_raw.data * beta_raw.data + GDN_BETA_EPS
    x2 = x.data * x.data
    s = np.einsum("hwj,ij->hwi", x2, gamma) + beta.reshape(1, 1, -1)
    if inverse:
        root = np.sqrt(s)
        y_data = x.data * root
    else:
        root = 1.0 / np.sqrt(s)
        y_data = x.data * root
    y = _out(tape, y_data, name="igdn" if inverse else "gdn")
    if tape is not None:
        def bwd(g):
            if inverse:
                t = g * x.data / np.sqrt(s)          # G_i x_i s^-1/2
                gx = g * np.sqrt(s) + x.data * np.einsum("hwi,ik->hwk", t, gamma)
                ggamma = 0.5 * np.einsum("hwi,hwj->ij", t, x2)
                gbeta = 0.5 * t.sum(axis=(0, 1))
            else:
                t = g * x.data / (s * np.sqrt(s))    # G_i x_i s^-3/2
                gx = g / np.sqrt(s) - x.data * np.einsum("hwi,ik->hwk", t, gamma)
                ggamma = -0.5 * np.einsum("hwi,hwj->ij", t, x2)
                gbeta = -0.5 * t.sum(axis=(0, 1))
            _accum(x, gx)
            _accum(gamma_raw, ggamma * 2.0 * gamma_raw.data)
            _accum(beta_raw, gbeta * 2.0 * beta_raw.data)
        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# quantization and noise

V_MIN, V_MAX = -128, 127


def quantize_array(x):
    """Round half away from zero, clamp to [V_MIN, V_MAX]. Returns (q, n_clamped)."""
    q = np.copysign(np.floor(np.abs(x) + 0.5), x)
    clamped = int(np.count_nonzero((q < V_MIN) | (q > V_MAX)))
    return np.clip(q, V_MIN, V_MAX), clamped


def quantize_st(tape, x, mode: str = "hard"):
    """Quantizer with straight-through gradient (identity everywhere).

    mode "hard": round + clamp. mode "passthrough": identity forward, for
    finite-difference validation of the training surrogate. The clamp count
    is exposed as .clamp_count on the output tensor's backing array holder.
    """
    if mode == "passthrough":
        y = _out(tape, x.data.copy(), name="quantize_pt")
        clamped = 0
    elif mode == "hard":
        q, clamped = quantize_array(x.data)
        y = _out(tape, q, name="quantize")
    else:
        raise ValueError(f"unknown quantize mode {mode!r}")
    y.clamp_count = clamped  # type: ignore[attr-defined]
    if tape is not None:
        tape.record(y, lambda g: _accum(x, g))
    return y


def add_uniform_noise(tape, x, rng: np.random.Generator):
    """x + u with u ~ U(-1/2, 1/2) i.i.d.; identity gradient."""
    u = rng.uniform(-0.5, 0.5, size=x.data.shape)
    y = _out(tape, x.data + u, name="add_noise")
    if tape is not None:
        tape.record(y, lambda g: _accum(x, g))
    return y


# ---------------------------------------------------------------------------
# context windows

# 4x4 window around raster position (row l, col k): rows l-3..l, cols k-2..k+1.
# In window coordinates the current position is (3, 2); the causal mask keeps
# strictly-past cells only.
WIN_PAD_TOP, WIN_PAD_LEFT, WIN_PAD_RIGHT = 3, 2, 1
CAUSAL_MASK = np.array(
    [[1, 1, 1, 1],
     [1, 1, 1, 1],
     [1, 1, 1, 1],
     [1, 1, 0, 0]], dtype=np.float64)


def pad_for_windows(x):
    """Zero-pad an (h,w,c) array so window (l,k) is padded[l:l+4, k:k+4]."""
    return np.pad(x, ((WIN_PAD_TOP, 0), (WIN_PAD_LEFT, WIN_PAD_RIGHT), (0, 0)))


def extract_windows_array(x, causal: bool):
    """All 4x4 context windows of x, raster order: (h*w, 4, 4, c)."""
    h, w, c = x.shape
    xp = pad_for_windows(x)
    sh, sw, sc = xp.strides
    v = as_strided(xp, shape=(h, w, 4, 4, c), strides=(sh, sw, sh, sw, sc),
                   writeable=False)
    wins = v.reshape(h * w, 4, 4, c).copy()
    if causal:
        wins *= CAUSAL_MASK[None, :, :, None]
    return wins


def extract_windows(tape, x, causal: bool):
    wins = _out(tape, extract_windows_array(x.data, causal), name="extract_windows")
    if tape is not None:
        h, w, c = x.data.shape
        def bwd(g):
            if causal:
                g = g * CAUSAL_MASK[None, :, :, None]
            gg = g.reshape(h, w, 4, 4, c)
            gp = np.zeros((h + 3, w + 3, c), dtype=np.float64)
            for a in range(4):
                for b in range(4):
                    gp[a:a + h, b:b + w, :] += gg[:, :, a, b, :]
            _accum(x, gp[WIN_PAD_TOP:WIN_PAD_TOP + h,
                         WIN_PAD_LEFT:WIN_PAD_LEFT + w, :])
        tape.record(wins, bwd)
    return wins


def window_conv_fwd(wins, w, b):
    """Valid conv inside each window. wins (p,s,s,ci), w (kh,kw,ci,co)."""
    p, s, s2, ci = wins.shape
    kh, kw, wci, co = w.shape
    if ci != wci:
        raise ShapeError(f"window_conv: input channels {ci} != weight channels "
                         f"{wci} (dimension 'channels')")
    so = s - kh + 1
    sp, si, sj, sc = wins.strides
    v = as_strided(wins, shape=(p, so, so, kh, kw, ci),
                   strides=(sp, si, sj, si, sj, sc), writeable=False)
    vmat = v.reshape(p * so * so, kh * kw * ci)
    y = (vmat @ w.reshape(kh * kw * ci, co)).reshape(p, so, so, co)
    return y + b.reshape(1, 1, 1, co), vmat


def window_conv_bwd(g, wins, w, vmat):
    p, s, s2, ci = wins.shape
    kh, kw, _, co = w.shape
    so = s - kh + 1
    gmat = g.reshape(p * so * so, co)
    gw = (vmat.T @ gmat).reshape(w.shape)
    gb = g.sum(axis=(0, 1, 2))
    gv = (gmat @ w.reshape(kh * kw * ci, co).T).reshape(p, so, so, kh, kw, ci)
    gwins = np.zeros_like(wins)
    for a in range(kh):
        for c in range(kw):
            gwins[:, a:a + so, c:c + so, :] += gv[:, :, :, a, c, :]
    return gwins, gw, gb


def window_conv(tape, wins, w, b):
    y_data, vmat = window_conv_fwd(wins.data, w.data, b.data)
    y = _out(tape, y_data, name="window_conv")
    if tape is not None:
        def bwd(g):
            gwins, gw, gb = window_conv_bwd(g, wins.data, w.data, vmat)
            _accum(wins, gwins)
            _accum(w, gw)
            _accum(b, gb)
        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# Gaussian-uniform probability kernels

RATE_P_FLOOR = 2.0 ** -16
SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gaussian_interval_prob(a, b):
    """P(a < X < b) for X ~ N(0,1), complementary-error branch form.

    Stable when both bounds sit far in the same tail: the difference is
    taken between two erfc values of the same sign instead of two
    CDF values saturated near 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    both_pos = a >= 0.0
    both_neg = b <= 0.0
    p_pos = 0.5 * (special.erfc(a / SQRT2) - special.erfc(b / SQRT2))
    p_neg = 0.5 * (special.erfc(-b / SQRT2) - special.erfc(-a / SQRT2))
    p_mid = 0.5 * (special.erf(b / SQRT2) - special.erf(a / SQRT2))
    p = np.where(both_pos, p_pos, np.where(both_neg, p_neg, p_mid))
    return np.maximum(p, 0.0)


def gaussian_pdf(x):
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gaussian_bin_bits(tape, v, mu, sigma):
    """-log2 of the Gaussian-uniform bin mass around v, floored at 2^-16.

    v, mu, sigma broadcast together; gradients flow to all three.
    """
    vd, md, sd = v.data, mu.data, sigma.data
    a = (vd - 0.5 - md) / sd
    b = (vd + 0.5 - md) / sd
    p = gaussian_interval_prob(a, b)
    pf = np.maximum(p, RATE_P_FLOOR)
    bits_data = -np.log2(pf)
    y = _out(tape, np.broadcast_to(bits_data, np.broadcast_shapes(
        vd.shape, md.shape, sd.shape)).copy(), name="gaussian_bin_bits")
    if tape is not None:
        def bwd(g):
            live = p > RATE_P_FLOOR
            dbits_dp = np.where(live, -1.0 / (pf * np.log(2.0)), 0.0)
            pa, pb = gaussian_pdf(a), gaussian_pdf(b)
            common = g * dbits_dp
            gv = common * (pb - pa) / sd
            gm = common * (pa - pb) / sd
            gs = common * (a * pa - b * pb) / sd
            _accum(v, _unbroadcast(gv, vd.shape))
            _accum(mu, _unbroadcast(gm, md.shape))
            _accum(sigma, _unbroadcast(gs, sd.shape))
        tape.record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# pooling and blur (for the multi-scale similarity distortion)

def avg_pool2(tape, x):
    """2x2 mean pooling, stride 2; trailing odd row/col dropped."""
    h, w, c = x.data.shape
    h2, w2 = h // 2, w // 2
    v = x.data[:h2 * 2, :w2 * 2, :].reshape(h2, 2, w2, 2, c)
    y = _out(tape, v.mean(axis=(1, 3)), name="avg_pool2")
    if tape is not None:
        def bwd(g):
            full = np.zeros_like(x.data)
            full[:h2 * 2, :w2 * 2, :] = np.repeat(
                np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
            _accum(x, full)
        tape.record(y, bwd)
    return y


def blur_valid(tape, x, kernel1d):
    """Separable per-channel valid correlation with a fixed 1-D kernel."""
    k = np.asarray(kernel1d, dtype=np.float64)
    n = k.size

    def corr_rows(arr):
        h, w, c = arr.shape
        out = np.zeros((h - n + 1, w, c), dtype=np.float64)
        for i in range(n):
            out += k[i] * arr[i:i + h - n + 1, :, :]
        return out

    def corr_cols(arr):
        h, w, c = arr.shape
        out = np.zeros((h, w - n + 1, c), dtype=np.float64)
        for i in range(n):
            out += k[i] * arr[:, i:i + w - n + 1, :]
        return out

    y = _out(tape, corr_cols(corr_rows(x.data)), name="blur_valid")
    if tape is not None:
        def bwd(g):
            # adjoint of valid correlation = full correlation with the
            # reversed kernel, applied per axis
            gh, gw, c = g.shape
            tmp = np.zeros((gh, gw + n - 1, c), dtype=np.float64)
            for i in range(n):
                tmp[:, i:i + gw, :] += k[i] * g
            full = np.zeros((gh + n - 1, gw + n - 1, c), dtype=np.float64)
            for i in range(n):
                full[i:i + gh, :, :] += k[i] * tmp
            _accum(x, full)
        tape.record(y, bwd)
    return y

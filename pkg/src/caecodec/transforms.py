"""The four parametric transforms (analysis, synthesis, hyper pair), their
profiles, weight initialization, and the hybrid channel split.

The architecture is carried inside the config dict ("arch" key) that is
serialized with the weights; both the tape path (training) and the raw-array
path (coding, optionally float32) are driven by the same layer list.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

PROFILES = {
    "tiny": dict(N=32, M=48, M1=0, M2=0, hybrid=False),
    "base": dict(N=128, M=192, M1=0, M2=0, hybrid=False),
    "tiny-hybrid": dict(N=32, M=48, M1=24, M2=24, hybrid=True),
    "hybrid-320": dict(N=320, M=420, M1=192, M2=228, hybrid=True),
    "hybrid-400": dict(N=400, M=600, M1=192, M2=408, hybrid=True),
}

PROFILE_IDS = {"custom": 0, "tiny": 1, "base": 2, "hybrid-320": 3,
               "hybrid-400": 4, "tiny-hybrid": 5}


def _layer(k, s, cin, cout, act, direction="down"):
    return {"k": k, "s": s, "cin": cin, "cout": cout, "act": act,
            "dir": direction}


def build_arch(N, M, M1, M2, hybrid):
    """Layer lists for all five networks. Filter sizes follow the cited
    convention for this family of codecs; the config is authoritative."""
    mctx = M1 if hybrid else M
    hs_out = (M1 + M2) if hybrid else M
    fw = 2 * mctx
    return {
        "ga": [_layer(5, 2, 3, N, "gdn"), _layer(5, 2, N, N, "gdn"),
               _layer(5, 2, N, N, "gdn"), _layer(5, 2, N, M, "linear")],
        "gs": [_layer(5, 2, M, N, "igdn", "up"), _layer(5, 2, N, N, "igdn", "up"),
               _layer(5, 2, N, N, "igdn", "up"), _layer(5, 2, N, 3, "linear", "up")],
        "ha": [_layer(3, 1, M, N, "relu"), _layer(5, 2, N, N, "relu"),
               _layer(5, 2, N, N, "linear")],
        # exp at the h_s output is applied by hs_forward (base: everywhere,
        # hybrid: sigma slice only), not listed as a layer activation
        "hs": [_layer(5, 2, N, N, "relu", "up"), _layer(5, 2, N, N, "relu", "up"),
               _layer(3, 1, N, hs_out, "linear")],
        "f": [_layer(2, 1, fw, fw, "relu", "win"), _layer(2, 1, fw, fw, "relu", "win"),
              _layer(2, 1, fw, fw, "linear", "win")],
    }


def make_config(profile: str, lam: float = 0.01, metric: str = "mse",
                conditioning: str = "discrete", seed: int = 0):
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; have {sorted(PROFILES)}")
    p = PROFILES[profile]
    cfg = {
        "profile": profile, "hybrid": p["hybrid"],
        "N": p["N"], "M": p["M"], "M1": p["M1"], "M2": p["M2"],
        "lambda": float(lam), "metric": metric,
        "conditioning": conditioning, "seed": int(seed),
        "arch": build_arch(p["N"], p["M"], p["M1"], p["M2"], p["hybrid"]),
    }
    return cfg


def init_weights(cfg, seed=None):
    """Random init: conv weights ~ N(0, 1/fan_in), biases 0, GDN near-identity,
    per-channel z scale exp(0) = 1."""
    rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
    params = {}
    for net, layers in cfg["arch"].items():
        for i, l in enumerate(layers):
            k, cin, cout = l["k"], l["cin"], l["cout"]
            fan_in = k * k * cin
            if l["dir"] == "up":
                shape = (k, k, cout, cin)
            else:
                shape = (k, k, cin, cout)
            params[f"{net}.{i}.w"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
            params[f"{net}.{i}.b"] = Tensor(np.zeros(cout))
            if l["act"] in ("gdn", "igdn"):
                params[f"{net}.{i}.gamma_raw"] = Tensor(
                    np.sqrt(0.1) * np.eye(cout))
                params[f"{net}.{i}.beta_raw"] = Tensor(np.ones(cout))
    params["sigma_z_log"] = Tensor(np.zeros(cfg["N"]))
    return params


def _activate(tape, t, act, prefix, params):
    if act == "linear":
        return t
    if act == "relu":
        return T.relu(tape, t)
    if act == "gdn":
        return T.gdn(tape, t, params[f"{prefix}.gamma_raw"],
                     params[f"{prefix}.beta_raw"], inverse=False)
    if act == "igdn":
        return T.gdn(tape, t, params[f"{prefix}.gamma_raw"],
                     params[f"{prefix}.beta_raw"], inverse=True)
    raise ValueError(f"unknown activation {act!r}")


def _apply_layers(tape, t, params, net, layers):
    for i, l in enumerate(layers):
        w, b = params[f"{net}.{i}.w"], params[f"{net}.{i}.b"]
        if l["dir"] == "down":
            t = T.conv_down(tape, t, w, b, l["s"])
        elif l["dir"] == "up":
            h, wd = t.data.shape[0], t.data.shape[1]
            t = T.conv_up(tape, t, w, b, l["s"], h * l["s"], wd * l["s"])
        else:
            raise ValueError(f"layer direction {l['dir']!r} not valid here")
        t = _activate(tape, t, l["act"], f"{net}.{i}", params)
    return t


def ga_forward(tape, x, params, cfg):
    """Analysis transform: (H, W, 3) in [-1, 1] -> (H/16, W/16, M)."""
    h, w, c = x.data.shape
    if c != 3:
        raise ShapeError(f"ga: input has {c} channels, expected 3 "
                         "(dimension 'channels')")
    if h % 16 or w % 16:
        raise ShapeError(f"ga: input dims {h}x{w} not divisible by 16 "
                         "(dimension 'height/width')")
    y = _apply_layers(tape, x, params, "ga", cfg["arch"]["ga"])
    assert y.data.shape == (h // 16, w // 16, cfg["M"]), "downscale bookkeeping"
    return y


def gs_forward(tape, y, params, cfg):
    """Synthesis transform: (h, w, M) -> (16h, 16w, 3)."""
    h, w, c = y.data.shape
    if c != cfg["M"]:
        raise ShapeError(f"gs: latent has {c} channels, expected M={cfg['M']} "
                         "(dimension 'channels')")
    x = _apply_layers(tape, y, params, "gs", cfg["arch"]["gs"])
    assert x.data.shape == (16 * h, 16 * w, 3), "upscale bookkeeping"
    return x


def ha_forward(tape, y_hat, params, cfg):
    """Hyper analysis: (h, w, M) -> (ceil(h/4), ceil(w/4), N)."""
    h, w, c = y_hat.data.shape
    if c != cfg["M"]:
        raise ShapeError(f"ha: input has {c} channels, expected M={cfg['M']} "
                         "(dimension 'channels')")
    z = _apply_layers(tape, y_hat, params, "ha", cfg["arch"]["ha"])
    assert z.data.shape == (-(-h // 4), -(-w // 4), cfg["N"]), "downscale bookkeeping"
    return z


def hs_forward(tape, z_hat, params, cfg, out_h, out_w):
    """Hyper synthesis to context (and hybrid sigma grid).

    Returns (c_prime, sigma2). Base model: c_prime = exp(raw), sigma2 None.
    Hybrid: c_prime = raw[..., :M1], sigma2 = exp(raw[..., M1:]); the
    exponentiation applies to the sigma part only.
    """
    hs_out = (cfg["M1"] + cfg["M2"]) if cfg["hybrid"] else cfg["M"]
    w_last = params[f"hs.{len(cfg['arch']['hs']) - 1}.w"]
    if w_last.data.shape[-1] != hs_out:
        raise ShapeError(
            f"hs: weight output channels {w_last.data.shape[-1]} do not match "
            f"config ({'hybrid' if cfg['hybrid'] else 'base'} expects {hs_out}) "
            "(dimension 'channels')")
    t = _apply_layers(tape, z_hat, params, "hs", cfg["arch"]["hs"])
    if t.data.shape[0] < out_h or t.data.shape[1] < out_w:
        raise ShapeError(f"hs: output {t.data.shape[:2]} smaller than latent "
                         f"dims {(out_h, out_w)} (dimension 'height/width')")
    t = T.crop_hw(tape, t, out_h, out_w)
    if cfg["hybrid"]:
        c_prime = T.slice_last(tape, t, 0, cfg["M1"])
        sigma2 = T.exp(tape, T.slice_last(tape, t, cfg["M1"], hs_out))
        return c_prime, sigma2
    return T.exp(tape, t), None


def hybrid_split(tape, y, cfg):
    """Channel split y -> (y1, y2) with M1 and M2 channels."""
    if not cfg["hybrid"]:
        raise ValueError("hybrid_split requires a hybrid config")
    c = y.data.shape[-1]
    if c != cfg["M1"] + cfg["M2"]:
        raise ShapeError(f"hybrid_split: {c} channels != M1+M2="
                         f"{cfg['M1'] + cfg['M2']} (dimension 'channels')")
    y1 = T.slice_last(tape, y, 0, cfg["M1"])
    y2 = T.slice_last(tape, y, cfg["M1"], c)
    return y1, y2


# ---------------------------------------------------------------------------
# raw-array forward paths (coding side; dtype follows the inputs)

def params_as_arrays(params, dtype=np.float64):
    return {k: np.asarray(v.data, dtype=dtype) for k, v in params.items()}


def _apply_layers_arrays(x, arrs, net, layers):
    t = x
    for i, l in enumerate(layers):
        w, b = arrs[f"{net}.{i}.w"], arrs[f"{net}.{i}.b"]
        if l["dir"] == "down":
            t, _ = T.conv_down_fwd(t, w, b, l["s"])
        else:
            h, wd = t.shape[0], t.shape[1]
            t, _ = T.conv_up_fwd(t, w, b, l["s"], h * l["s"], wd * l["s"])
        if l["act"] == "relu":
            t = np.maximum(t, 0.0)
        elif l["act"] in ("gdn", "igdn"):
            gamma = arrs[f"{net}.{i}.gamma_raw"] ** 2
            beta = arrs[f"{net}.{i}.beta_raw"] ** 2 + T.GDN_BETA_EPS
            s = np.einsum("hwj,ij->hwi", t * t, gamma) + beta.reshape(1, 1, -1)
            t = t * np.sqrt(s) if l["act"] == "igdn" else t / np.sqrt(s)
    return t


def ga_apply(x, arrs, cfg):
    return _apply_layers_arrays(x, arrs, "ga", cfg["arch"]["ga"])


def gs_apply(y, arrs, cfg):
    return _apply_layers_arrays(y, arrs, "gs", cfg["arch"]["gs"])


def ha_apply(y_hat, arrs, cfg):
    return _apply_layers_arrays(y_hat, arrs, "ha", cfg["arch"]["ha"])


def hs_apply(z_hat, arrs, cfg, out_h, out_w):
    """Array-path hyper synthesis; same split/exp semantics as hs_forward."""
    t = _apply_layers_arrays(z_hat, arrs, "hs", cfg["arch"]["hs"])
    t = t[:out_h, :out_w, :]
    clip = np.clip(t, -T.EXP_CLIP, T.EXP_CLIP)
    if cfg["hybrid"]:
        m1 = cfg["M1"]
        return t[..., :m1].copy(), np.exp(clip[..., m1:])
    return np.exp(clip), None

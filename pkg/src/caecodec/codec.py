"""Full encode/decode pipelines and the container format.

Container layout (little-endian):
    magic "CAE1" (4s), version u8, profile_id u8, flags u8,
    lambda_id u16, W u32, H u32 (original dims),
    z_len u32, y1_len u32, y2_len u32 (payload byte lengths),
    N u16, M u16, M1 u16                                  -> 35 bytes
    then the z, y1, y2 payloads; then, when flags bit2 is set, a debug
    trailer of three u32 CRCs over the CDF tables of each stream.

flags: bit0 hybrid, bit1 float32 inference for h_s/f, bit2 CDF checksums.

Synchronization: every probability entering the coder passes through the
integer CDF quantization on both sides, and in addition the encoder
evaluates h_s and f through the byte-for-byte same sequential code path the
decoder uses, so the i-th CDF built during decode is bit-identical to the
i-th CDF built during encode.
"""

import struct
import time
import zlib
import numpy as np

from . import tensor as T
from . import transforms as TR
from . import entropy as E
from .coder import (ArithmeticDecoder, ArithmeticEncoder, CorruptStreamError,
                    build_cdfs)
from .image_io import from_signal, to_signal

MAGIC = b"CAE1"
VERSION = 1
HEADER_FMT = "<4sBBBHIIIIIHHH"
HEADER_LEN = struct.calcsize(HEADER_FMT)
FLAG_HYBRID = 1
FLAG_F32 = 2
FLAG_CDF_CRC = 4
PAD_MULTIPLE = 64


class StreamFormatError(ValueError):
    pass


def _ceil_to(n, m):
    return -(-n // m) * m


def pad_image(img: np.ndarray):
    """Edge-replicate up to multiples of 64; padding is invisible to users
    because the header keeps the original dims."""
    h, w = img.shape[:2]
    ph, pw = _ceil_to(h, PAD_MULTIPLE), _ceil_to(w, PAD_MULTIPLE)
    if (ph, pw) == (h, w):
        return img
    return np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")


def latent_dims(h: int, w: int):
    """(y dims, z dims) for a padded image of h x w pixels."""
    hy, wy = h // 16, w // 16
    return (hy, wy), (-(-hy // 4), -(-wy // 4))


def _zero_mean_cdfs(params, cfg):
    sigma_z = np.exp(np.clip(params["sigma_z_log"].data, -T.EXP_CLIP, T.EXP_CLIP))
    return build_cdfs(np.zeros(cfg["N"]), sigma_z), sigma_z


class _StageClock:
    def __init__(self):
        self.t = {}

    def add(self, stage, dt):
        self.t[stage] = self.t.get(stage, 0.0) + dt

    def section(self, stage):
        clock = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
            def __exit__(self, *exc):
                clock.add(stage, time.perf_counter() - self.t0)

        return _Ctx()


def _context_code_y1(y1_vals, c_prime, arrs, cfg, mask, clock,
                     decoder: ArithmeticDecoder = None,
                     encoder: ArithmeticEncoder = None,
                     crc_accum=None, poison_hook=None):
    """Shared sequential raster loop for the context-coded channels.

    Encoding when `encoder` is given (y1_vals holds the symbols to write);
    decoding when `decoder` is given (y1_vals is filled in). Both sides run
    the identical window -> f -> CDF sequence, which is what keeps their
    CDF tables bit-exact. Returns (est_bits, crc).
    """
    hy, wy = c_prime.shape[:2]
    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    dtype = c_prime.dtype
    cp_pad = T.pad_for_windows(c_prime)
    y_pad = np.zeros((hy + 3, wy + 3, mctx), dtype=dtype)
    mask_c = mask.astype(dtype)[:, :, None]
    est_bits = 0.0
    crc = 0
    coder = decoder if decoder is not None else encoder
    for l in range(hy):
        for k in range(wy):
            t0 = time.perf_counter()
            cp_win = cp_pad[l:l + 4, k:k + 4, :]
            y_win = y_pad[l:l + 4, k:k + 4, :] * mask_c
            mu, sigma = E.estimate_params_f(cp_win, y_win, arrs, cfg)
            cdfs = build_cdfs(mu, sigma)
            clock.add("context_loop", time.perf_counter() - t0)
            if crc_accum is not None:
                crc = zlib.crc32(cdfs.astype("<u4").tobytes(), crc)
            t0 = time.perf_counter()
            if encoder is not None:
                vals = y1_vals[l, k, :]
                for c in range(mctx):
                    encoder.encode(cdfs[c], int(vals[c]) - T.V_MIN)
            else:
                vals = np.empty(mctx, dtype=np.int32)
                for c in range(mctx):
                    vals[c] = decoder.decode(cdfs[c]) + T.V_MIN
                y1_vals[l, k, :] = vals
            clock.add("coder", time.perf_counter() - t0)
            # analytic estimate from the same (mu, sigma) the coder saw
            p = E.pmf_gaussian_uniform(vals.astype(np.float64),
                                       np.asarray(mu, dtype=np.float64),
                                       np.asarray(sigma, dtype=np.float64),
                                       sigma_floor=E.SIGMA_FLOOR_CODING)
            est_bits += float(-np.log2(np.maximum(p, T.RATE_P_FLOOR)).sum())
            y_pad[l + 3, k + 2, :] = vals
            if poison_hook is not None:
                poison_hook(y_pad, l, k)
    return est_bits, crc


def _inference_arrays(params, deterministic: bool):
    dtype = np.float64 if deterministic else np.float32
    return TR.params_as_arrays(params, dtype=dtype), dtype


def encode_image(img: np.ndarray, params: dict, cfg: dict,
                 deterministic: bool = True, embed_cdf_crc: bool = False,
                 return_recon: bool = False):
    """Compress an (h, w, 3) uint8 image to a self-describing byte blob.

    Returns (blob, info); info carries the analytic bit estimate, real
    payload bits, bpp against the original pixel count, clamp counts and a
    per-stage timing breakdown.
    """
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 image")
    h0, w0 = img.shape[:2]
    clock = _StageClock()

    padded = pad_image(img)
    x = to_signal(padded)
    arrs64 = TR.params_as_arrays(params, dtype=np.float64)
    arrs, inf_dtype = _inference_arrays(params, deterministic)

    with clock.section("transforms"):
        y = TR.ga_apply(x, arrs64, cfg)
    y_grid = E.quantize(y)
    with clock.section("transforms"):
        z = TR.ha_apply(y_grid.as_float(), arrs64, cfg)
    z_grid = E.quantize(z)
    with clock.section("transforms"):
        c_prime, sigma2 = TR.hs_apply(z_grid.values.astype(inf_dtype),
                                      arrs, cfg,
                                      y_grid.values.shape[0],
                                      y_grid.values.shape[1])

    # z stream: factorized zero-mean model, one CDF per channel
    with clock.section("coder"):
        z_cdfs, sigma_z = _zero_mean_cdfs(params, cfg)
        z_crc = zlib.crc32(z_cdfs.astype("<u4").tobytes()) if embed_cdf_crc else 0
        enc = ArithmeticEncoder()
        z_flat = z_grid.values.reshape(-1, cfg["N"])
        for pos in range(z_flat.shape[0]):
            for c in range(cfg["N"]):
                enc.encode(z_cdfs[c], int(z_flat[pos, c]) - T.V_MIN)
        z_bytes = enc.finish()
    est_z = E.rate_estimate(z_grid.as_float(),
                            np.broadcast_to(sigma_z, z_grid.values.shape),
                            sigma_floor=E.SIGMA_FLOOR_CODING)

    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    y1_vals = y_grid.values[:, :, :mctx]
    enc = ArithmeticEncoder()
    est_y1, y1_crc = _context_code_y1(
        y1_vals, c_prime, arrs, cfg, T.CAUSAL_MASK, clock, encoder=enc,
        crc_accum=True if embed_cdf_crc else None)
    with clock.section("coder"):
        y1_bytes = enc.finish()

    y2_bytes = b""
    est_y2 = 0.0
    y2_crc = 0
    if cfg["hybrid"]:
        y2_vals = y_grid.values[:, :, mctx:]
        sig2 = np.asarray(sigma2, dtype=np.float64).reshape(-1)
        with clock.section("coder"):
            y2_cdfs = build_cdfs(np.zeros_like(sig2), sig2)
            if embed_cdf_crc:
                y2_crc = zlib.crc32(y2_cdfs.astype("<u4").tobytes())
            enc = ArithmeticEncoder()
            flat = y2_vals.reshape(-1)
            for i in range(flat.shape[0]):
                enc.encode(y2_cdfs[i], int(flat[i]) - T.V_MIN)
            y2_bytes = enc.finish()
        est_y2 = E.rate_estimate(y2_vals.astype(np.float64),
                                 np.asarray(sigma2, dtype=np.float64),
                                 sigma_floor=E.SIGMA_FLOOR_CODING)

    flags = (FLAG_HYBRID if cfg["hybrid"] else 0) \
        | (0 if deterministic else FLAG_F32) \
        | (FLAG_CDF_CRC if embed_cdf_crc else 0)
    header = struct.pack(
        HEADER_FMT, MAGIC, VERSION, TR.PROFILE_IDS.get(cfg["profile"], 0),
        flags, int(round(cfg["lambda"] * 1000)) & 0xFFFF, w0, h0,
        len(z_bytes), len(y1_bytes), len(y2_bytes),
        cfg["N"], cfg["M"], cfg["M1"] if cfg["hybrid"] else 0)
    blob = header + z_bytes + y1_bytes + y2_bytes
    if embed_cdf_crc:
        blob += struct.pack("<III", z_crc, y1_crc, y2_crc)

    real_bits = 8 * (len(z_bytes) + len(y1_bytes) + len(y2_bytes))
    est_bits = est_z + est_y1 + est_y2
    n_latents = y_grid.values.size + z_grid.values.size
    info = {
        "est_bits": est_bits,
        "real_bits": real_bits,
        "bpp": real_bits / float(h0 * w0),
        "clamp_y": y_grid.clamp_count,
        "clamp_z": z_grid.clamp_count,
        "clamp_fraction": (y_grid.clamp_count + z_grid.clamp_count) / n_latents,
        "timings": dict(clock.t),
        "width": w0,
        "height": h0,
        "padded": padded.shape[:2],
    }
    if return_recon:
        with clock.section("transforms"):
            xr = TR.gs_apply(y_grid.as_float(), arrs64, cfg)
        info["recon"] = from_signal(xr)[:h0, :w0]
        info["timings"] = dict(clock.t)
    return blob, info


def parse_header(blob: bytes):
    if len(blob) < HEADER_LEN:
        raise StreamFormatError("stream shorter than the %d byte header"
                                % HEADER_LEN)
    magic, version, profile_id, flags, lambda_id, w, h, z_len, y1_len, \
        y2_len, n, m, m1 = struct.unpack(HEADER_FMT, blob[:HEADER_LEN])
    if magic != MAGIC:
        raise StreamFormatError("bad magic %r, not a codec stream" % magic)
    if version != VERSION:
        raise StreamFormatError("unsupported stream version %d" % version)
    return {
        "version": version,
        "profile_id": profile_id,
        "hybrid": bool(flags & FLAG_HYBRID),
        "f32": bool(flags & FLAG_F32),
        "cdf_crc": bool(flags & FLAG_CDF_CRC),
        "lambda_id": lambda_id,
        "width": w,
        "height": h,
        "z_len": z_len,
        "y1_len": y1_len,
        "y2_len": y2_len,
        "N": n,
        "M": m,
        "M1": m1,
    }


def decode_image(blob: bytes, params: dict, cfg: dict,
                 poison_hook=None):
    """Reconstruct the image from a blob produced by encode_image.

    The weights and cfg must match the ones used at encode time; the header
    carries enough structure (profile, N, M, M1, hybrid flag) to reject a
    mismatched pair up front instead of desynchronizing mid-stream.
    """
    head = parse_header(blob)
    if head["N"] != cfg["N"] or head["M"] != cfg["M"] \
            or head["hybrid"] != cfg["hybrid"] \
            or (cfg["hybrid"] and head["M1"] != cfg["M1"]):
        raise StreamFormatError(
            "stream was made for N=%d M=%d M1=%d hybrid=%s, the loaded "
            "weights have N=%d M=%d M1=%d hybrid=%s"
            % (head["N"], head["M"], head["M1"], head["hybrid"],
               cfg["N"], cfg["M"], cfg["M1"], cfg["hybrid"]))
    body_len = head["z_len"] + head["y1_len"] + head["y2_len"]
    want = HEADER_LEN + body_len + (12 if head["cdf_crc"] else 0)
    if len(blob) < want:
        raise StreamFormatError("truncated stream: has %d bytes, header "
                                "promises %d" % (len(blob), want))
    clock = _StageClock()
    off = HEADER_LEN
    z_bytes = blob[off:off + head["z_len"]]; off += head["z_len"]
    y1_bytes = blob[off:off + head["y1_len"]]; off += head["y1_len"]
    y2_bytes = blob[off:off + head["y2_len"]]; off += head["y2_len"]
    crcs = struct.unpack("<III", blob[off:off + 12]) if head["cdf_crc"] else None

    h0, w0 = head["height"], head["width"]
    hp, wp = _ceil_to(h0, PAD_MULTIPLE), _ceil_to(w0, PAD_MULTIPLE)
    (hy, wy), (hz, wz) = latent_dims(hp, wp)
    arrs64 = TR.params_as_arrays(params, dtype=np.float64)
    arrs, inf_dtype = _inference_arrays(params, not head["f32"])

    with clock.section("coder"):
        z_cdfs, _ = _zero_mean_cdfs(params, cfg)
        if crcs is not None:
            got = zlib.crc32(z_cdfs.astype("<u4").tobytes())
            if got != crcs[0]:
                raise CorruptStreamError(
                    "z CDF checksum mismatch: stream %08x, decoder %08x"
                    % (crcs[0], got))
        dec = ArithmeticDecoder(z_bytes)
        z_vals = np.empty((hz, wz, cfg["N"]), dtype=np.int32)
        flat = z_vals.reshape(-1, cfg["N"])
        for pos in range(flat.shape[0]):
            for c in range(cfg["N"]):
                flat[pos, c] = dec.decode(z_cdfs[c]) + T.V_MIN
    with clock.section("transforms"):
        c_prime, sigma2 = TR.hs_apply(z_vals.astype(inf_dtype), arrs, cfg,
                                      hy, wy)

    mctx = cfg["M1"] if cfg["hybrid"] else cfg["M"]
    y_vals = np.empty((hy, wy, cfg["M"]), dtype=np.int32)
    dec = ArithmeticDecoder(y1_bytes)
    _, y1_crc = _context_code_y1(
        y_vals[:, :, :mctx], c_prime, arrs, cfg, T.CAUSAL_MASK, clock,
        decoder=dec, crc_accum=True if crcs is not None else None,
        poison_hook=poison_hook)
    if crcs is not None and y1_crc != crcs[1]:
        raise CorruptStreamError(
            "context CDF checksum mismatch: stream %08x, decoder %08x"
            % (crcs[1], y1_crc))

    if cfg["hybrid"]:
        with clock.section("coder"):
            sig2 = np.asarray(sigma2, dtype=np.float64).reshape(-1)
            y2_cdfs = build_cdfs(np.zeros_like(sig2), sig2)
            if crcs is not None:
                got = zlib.crc32(y2_cdfs.astype("<u4").tobytes())
                if got != crcs[2]:
                    raise CorruptStreamError(
                        "scale-only CDF checksum mismatch: stream %08x, "
                        "decoder %08x" % (crcs[2], got))
            dec = ArithmeticDecoder(y2_bytes)
            flat = y_vals[:, :, mctx:].reshape(-1)
            out = np.empty(flat.shape[0], dtype=np.int32)
            for i in range(out.shape[0]):
                out[i] = dec.decode(y2_cdfs[i]) + T.V_MIN
            y_vals[:, :, mctx:] = out.reshape(hy, wy, cfg["M"] - mctx)

    with clock.section("transforms"):
        xr = TR.gs_apply(y_vals.astype(np.float64), arrs64, cfg)
    img = from_signal(xr)[:h0, :w0]
    info = {"timings": dict(clock.t), "width": w0, "height": h0,
            "lambda_id": head["lambda_id"], "profile_id": head["profile_id"],
            "y_hat": y_vals, "z_hat": z_vals}
    return img, info


def roundtrip_file_bits(blob: bytes) -> int:
    """Payload bits used for bpp reporting (header excluded)."""
    head = parse_header(blob)
    return 8 * (head["z_len"] + head["y1_len"] + head["y2_len"])


def benchmark_codec(images, params, cfg, repeats: int = 1,
                    deterministic: bool = True):
    """Encode/decode each image `repeats` times; per-stage mean seconds.

    Stage keys: transforms, context_loop, coder. The coder stage can be
    subtracted out by callers comparing model architectures, since symbol
    coding cost does not depend on how the parameters were produced.
    """
    stages = ("transforms", "context_loop", "coder")
    runs = {"encode": [], "decode": []}
    for img in images:
        for _ in range(repeats):
            blob, einfo = encode_image(img, params, cfg,
                                       deterministic=deterministic)
            _, dinfo = decode_image(blob, params, cfg)
            runs["encode"].append(einfo["timings"])
            runs["decode"].append(dinfo["timings"])
    report = {}
    for side in ("encode", "decode"):
        report[side] = {s: float(np.mean([t.get(s, 0.0) for t in runs[side]]))
                        for s in stages}
        report[side]["total"] = float(sum(report[side].values()))
    report["images"] = len(images)
    report["repeats"] = repeats
    return report

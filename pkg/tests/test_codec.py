"""Container format and end-to-end lossless transport."""

import struct

import numpy as np
import pytest

from caecodec import codec
from caecodec import transforms as TR
from caecodec.coder import CorruptStreamError
from caecodec.data import synth_image
from caecodec.entropy import quantize
from caecodec.image_io import to_signal


# ---------------------------------------------------------------------------
# geometry helpers

def test_pad_image_multiples():
    img = np.zeros((64, 128, 3), dtype=np.uint8)
    assert codec.pad_image(img) is img
    img2 = (np.arange(50 * 70 * 3) % 256).astype(np.uint8).reshape(50, 70, 3)
    padded = codec.pad_image(img2)
    assert padded.shape == (64, 128, 3)
    np.testing.assert_array_equal(padded[:50, :70], img2)
    # edge replication, not zeros
    np.testing.assert_array_equal(padded[49, 70:], np.broadcast_to(
        img2[49, 69], (58, 3)))
    np.testing.assert_array_equal(padded[50:, 30], np.broadcast_to(
        img2[49, 30], (14, 3)))


def test_latent_dims():
    assert codec.latent_dims(64, 64) == ((4, 4), (1, 1))
    assert codec.latent_dims(128, 192) == ((8, 12), (2, 3))


# ---------------------------------------------------------------------------
# header

def test_header_roundtrip(tiny_cfg, tiny_params, image64):
    blob, info = codec.encode_image(image64, tiny_params, tiny_cfg)
    head = codec.parse_header(blob)
    assert head["width"] == 64 and head["height"] == 64
    assert head["hybrid"] is False and head["f32"] is False
    assert head["N"] == 32 and head["M"] == 48
    assert head["lambda_id"] == round(tiny_cfg["lambda"] * 1000)
    assert head["version"] == 1
    total = head["z_len"] + head["y1_len"] + head["y2_len"]
    assert len(blob) == codec.HEADER_LEN + total
    assert codec.roundtrip_file_bits(blob) == 8 * total


def test_header_bad_magic(tiny_cfg, tiny_params, image64):
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    bad = b"XXXX" + blob[4:]
    with pytest.raises(codec.StreamFormatError, match="magic"):
        codec.parse_header(bad)
    with pytest.raises(codec.StreamFormatError):
        codec.parse_header(blob[:10])


def test_header_bad_version(tiny_cfg, tiny_params, image64):
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    bad = bytearray(blob)
    bad[4] = 99
    with pytest.raises(codec.StreamFormatError, match="version"):
        codec.parse_header(bytes(bad))


# ---------------------------------------------------------------------------
# lossless transport

@pytest.mark.parametrize("hw", [(64, 64), (96, 80), (50, 70)])
def test_roundtrip_reconstruction_matches_encoder(tiny_cfg, tiny_params, hw):
    img = synth_image(np.random.default_rng(hash(hw) % 2**32), *hw)
    blob, info = codec.encode_image(img, tiny_params, tiny_cfg,
                                    return_recon=True)
    dec, dinfo = codec.decode_image(blob, tiny_params, tiny_cfg)
    assert dec.shape == img.shape and dec.dtype == np.uint8
    np.testing.assert_array_equal(dec, info["recon"])


def test_roundtrip_hybrid(hybrid_cfg, hybrid_params, image64):
    blob, info = codec.encode_image(image64, hybrid_params, hybrid_cfg,
                                    return_recon=True)
    head = codec.parse_header(blob)
    assert head["hybrid"] is True
    assert head["y2_len"] > 0
    dec, _ = codec.decode_image(blob, hybrid_params, hybrid_cfg)
    np.testing.assert_array_equal(dec, info["recon"])


def test_roundtrip_f32_inference(tiny_cfg, tiny_params, image64):
    blob, info = codec.encode_image(image64, tiny_params, tiny_cfg,
                                    deterministic=False, return_recon=True)
    assert codec.parse_header(blob)["f32"] is True
    dec, _ = codec.decode_image(blob, tiny_params, tiny_cfg)
    np.testing.assert_array_equal(dec, info["recon"])


def test_latents_transported_exactly(tiny_cfg, tiny_params, image64):
    # the decoded latent grids equal the encoder's quantized grids
    arrs = TR.params_as_arrays(tiny_params)
    x = to_signal(codec.pad_image(image64))
    yg = quantize(TR.ga_apply(x, arrs, tiny_cfg))
    zg = quantize(TR.ha_apply(yg.as_float(), arrs, tiny_cfg))
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    _, dinfo = codec.decode_image(blob, tiny_params, tiny_cfg)
    np.testing.assert_array_equal(dinfo["y_hat"], yg.values)
    np.testing.assert_array_equal(dinfo["z_hat"], zg.values)


def test_bpp_uses_original_dims(tiny_cfg, tiny_params):
    img = synth_image(np.random.default_rng(3), 96, 80)
    blob, info = codec.encode_image(img, tiny_params, tiny_cfg)
    payload_bits = codec.roundtrip_file_bits(blob)
    np.testing.assert_allclose(info["bpp"], payload_bits / (96 * 80))
    assert info["padded"] == (128, 128)


def test_estimate_tracks_real_bits(tiny_cfg, tiny_params):
    rng = np.random.default_rng(77)
    for _ in range(3):
        img = synth_image(rng, 64, 64)
        blob, info = codec.encode_image(img, tiny_params, tiny_cfg)
        est, real = info["est_bits"], info["real_bits"]
        assert 0.98 * est - 512 <= real <= 1.02 * est + 512


# ---------------------------------------------------------------------------
# error paths

def test_decode_profile_mismatch(tiny_cfg, tiny_params, hybrid_cfg,
                                 hybrid_params, image64):
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    with pytest.raises(codec.StreamFormatError):
        codec.decode_image(blob, hybrid_params, hybrid_cfg)


def test_decode_truncated(tiny_cfg, tiny_params, image64):
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    with pytest.raises(codec.StreamFormatError, match="truncat"):
        codec.decode_image(blob[:-3], tiny_params, tiny_cfg)


def test_cdf_crc_catches_weight_drift(tiny_cfg, tiny_params, image64):
    blob, _ = codec.encode_image(image64, tiny_params, tiny_cfg,
                                 embed_cdf_crc=True)
    assert codec.parse_header(blob)["cdf_crc"] is True
    # same weights: decodes fine
    dec, _ = codec.decode_image(blob, tiny_params, tiny_cfg)
    # drifted weights: the per-stream CRC check must fire rather than
    # returning silent garbage
    drifted = {k: type(v)(v.data.copy()) for k, v in tiny_params.items()}
    drifted["hs.2.b"].data += 1e-3
    with pytest.raises(CorruptStreamError):
        codec.decode_image(blob, drifted, tiny_cfg)


def test_encode_rejects_bad_input(tiny_cfg, tiny_params):
    with pytest.raises(ValueError):
        codec.encode_image(np.zeros((64, 64, 3), dtype=np.float32),
                           tiny_params, tiny_cfg)
    with pytest.raises(ValueError):
        codec.encode_image(np.zeros((64, 64), dtype=np.uint8),
                           tiny_params, tiny_cfg)


# ---------------------------------------------------------------------------
# deterministic output

def test_encode_is_deterministic(tiny_cfg, tiny_params, image64):
    a, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    b, _ = codec.encode_image(image64, tiny_params, tiny_cfg)
    assert a == b


# ---------------------------------------------------------------------------
# benchmark plumbing

def test_benchmark_codec_keys(tiny_cfg, tiny_params, image64):
    rep = codec.benchmark_codec([image64], tiny_params, tiny_cfg)
    assert rep["images"] == 1 and rep["repeats"] == 1
    for side in ("encode", "decode"):
        stages = rep[side]
        for key in ("transforms", "context_loop", "coder", "total"):
            assert stages[key] >= 0.0
        assert stages["total"] >= stages["context_loop"]

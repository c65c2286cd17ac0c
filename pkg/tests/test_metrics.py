"""Quality metrics and rate-distortion bookkeeping.

The MS-SSIM and BD-rate values are checked against hand-computable cases
(identical inputs, pure rate shifts) rather than published numbers, so the
oracles are exact.
"""

import re
import warnings

import numpy as np
import pytest

from caecodec import tensor as T
from caecodec import transforms as TR
from caecodec.data import synth_image
from caecodec.image_io import write_ppm
from caecodec.metrics import (
    RDCurve,
    RDPoint,
    bd_rate,
    evaluate_corpus,
    fmt_db,
    ms_ssim,
    ms_ssim_db,
    ms_ssim_tape,
    psnr,
    usable_scales,
    write_rd_dat,
)
from caecodec.weights_io import save_weights


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_is_inf():
    img = synth_image(np.random.default_rng(0), 24, 24)
    assert psnr(img, img) == float("inf")


def test_psnr_unit_mse():
    a = np.zeros((10, 10, 3), dtype=np.uint8)
    b = np.ones((10, 10, 3), dtype=np.uint8)
    # mse 1 -> 20 log10(255)
    assert psnr(a, b) == pytest.approx(48.130803608679074, rel=1e-12)


def test_psnr_pixel_loop_oracle(rng):
    a = rng.integers(0, 256, size=(9, 7, 3)).astype(np.uint8)
    b = rng.integers(0, 256, size=(9, 7, 3)).astype(np.uint8)
    acc = 0.0
    for i in range(9):
        for j in range(7):
            for c in range(3):
                acc += (float(a[i, j, c]) - float(b[i, j, c])) ** 2
    mse = acc / (9 * 7 * 3)
    assert psnr(a, b) == pytest.approx(10 * np.log10(255.0 ** 2 / mse),
                                       rel=1e-12)


def test_psnr_decreases_with_noise(rng):
    img = synth_image(rng, 32, 32).astype(np.int16)
    small = np.clip(img + rng.integers(-2, 3, img.shape), 0, 255)
    big = np.clip(img + rng.integers(-40, 41, img.shape), 0, 255)
    assert psnr(img.astype(np.uint8), small.astype(np.uint8)) > \
        psnr(img.astype(np.uint8), big.astype(np.uint8))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# MS-SSIM


def test_usable_scales():
    assert usable_scales(176, 176) == 5
    assert usable_scales(175, 175) == 4
    assert usable_scales(32, 32) == 2
    assert usable_scales(10, 10) == 1
    # the smaller side limits the count
    assert usable_scales(1000, 32) == 2


def test_ms_ssim_identical():
    img = synth_image(np.random.default_rng(3), 176, 176)
    assert ms_ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ms_ssim_symmetric(rng):
    a = synth_image(rng, 176, 176)
    b = np.clip(a.astype(np.int16) + rng.integers(-20, 21, a.shape),
                0, 255).astype(np.uint8)
    assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), rel=1e-12)


def test_ms_ssim_range_and_ordering(rng):
    a = synth_image(rng, 176, 176)
    small = np.clip(a.astype(np.int16) + rng.integers(-5, 6, a.shape),
                    0, 255).astype(np.uint8)
    big = np.clip(a.astype(np.int16) + rng.integers(-60, 61, a.shape),
                  0, 255).astype(np.uint8)
    v_small, v_big = ms_ssim(a, small), ms_ssim(a, big)
    for v in (v_small, v_big):
        assert 0.0 < v <= 1.0
    assert v_small > v_big


def test_ms_ssim_full_scale_no_warning(rng):
    a = synth_image(rng, 176, 176)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ms_ssim(a, a)


def test_ms_ssim_reduced_scale_warns(rng):
    a = synth_image(rng, 64, 64)
    with pytest.warns(RuntimeWarning, match="supports only 3 of 5 scales"):
        ms_ssim(a, a)


def test_ms_ssim_grayscale_input(rng):
    a = synth_image(rng, 176, 176)[:, :, 0]
    b = np.clip(a.astype(np.int16) + rng.integers(-10, 11, a.shape),
                0, 255).astype(np.uint8)
    v = ms_ssim(a, b)
    assert 0.0 < v < 1.0


def test_ms_ssim_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        ms_ssim(np.zeros((64, 64)), np.zeros((64, 65)))


def test_ms_ssim_tape_matches_array(rng):
    a = rng.uniform(0, 255, size=(64, 64, 3))
    b = np.clip(a + rng.normal(0, 12, a.shape), 0, 255)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        want = ms_ssim(a, b)
        got = ms_ssim_tape(T.Tape(), T.Tensor(a), T.Tensor(b))
    assert float(got.data) == pytest.approx(want, abs=1e-9)


def test_ms_ssim_tape_gradient_improves_match(rng):
    # one gradient step on the degraded image should raise the similarity
    a = rng.uniform(40, 215, size=(48, 48, 1))
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
    bt = T.Tensor(b, name="b")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tape = T.Tape()
        v = ms_ssim_tape(tape, T.Tensor(a), bt)
        tape.backward(v)
        b2 = b + 1e3 * bt.grad
        v2 = ms_ssim_tape(T.Tape(), T.Tensor(a), T.Tensor(b2))
    assert float(v2.data) > float(v.data)


def test_ms_ssim_db_values():
    assert ms_ssim_db(0.99) == pytest.approx(20.0, rel=1e-12)
    assert ms_ssim_db(0.9) == pytest.approx(10.0, rel=1e-12)
    assert ms_ssim_db(1.0) == float("inf")


def test_fmt_db():
    assert fmt_db(float("inf")) == "inf"
    assert fmt_db(12.5) == "12.5000"


# ---------------------------------------------------------------------------
# R-D containers and BD-rate


def test_rd_point_validation():
    with pytest.raises(ValueError, match="bpp must be positive"):
        RDPoint(0.0, 30.0)
    with pytest.raises(ValueError, match="bpp must be positive"):
        RDPoint(-1.0, 30.0)


def test_rd_curve_sorts_and_validates():
    c = RDCurve((RDPoint(0.8, 38.0), RDPoint(0.2, 30.0), RDPoint(0.4, 34.0)))
    assert list(c.bpps) == [0.2, 0.4, 0.8]
    assert list(c.qualities) == [30.0, 34.0, 38.0]
    with pytest.raises(ValueError, match="duplicate bpp"):
        RDCurve((RDPoint(0.2, 30.0), RDPoint(0.2, 31.0)))
    with pytest.raises(ValueError, match="mixed quality metrics"):
        RDCurve((RDPoint(0.2, 30.0), RDPoint(0.4, 3.0, metric="msssim")))


def curve_from(bpps, quals, metric="psnr"):
    return RDCurve(tuple(RDPoint(b, q, metric=metric)
                         for b, q in zip(bpps, quals)), metric=metric)


def test_bd_rate_identical_curves_is_zero():
    bpps = [0.1, 0.25, 0.5, 0.9]
    quals = [28.0, 31.5, 34.0, 36.2]
    a = curve_from(bpps, quals)
    b = curve_from(bpps, quals)
    assert bd_rate(a, b) == 0.0


def test_bd_rate_pure_rate_shift_pchip():
    bpps = np.array([0.1, 0.25, 0.5, 0.9, 1.4])
    quals = np.array([28.0, 31.5, 34.0, 36.2, 38.0])
    anchor = curve_from(bpps, quals)
    test = curve_from(bpps * 0.9, quals)
    pct, method = bd_rate(anchor, test, detail=True)
    assert method == "pchip"
    assert pct == pytest.approx(-10.0, abs=1e-9)


def test_bd_rate_pure_rate_shift_polyfit():
    bpps = np.array([0.1, 0.4, 0.9])
    quals = np.array([28.0, 33.0, 36.0])
    anchor = curve_from(bpps, quals)
    test = curve_from(bpps * 0.9, quals)
    pct, method = bd_rate(anchor, test, detail=True)
    assert method == "polyfit"
    assert pct == pytest.approx(-10.0, abs=1e-9)


def test_bd_rate_inverse_direction():
    bpps = np.array([0.1, 0.25, 0.5, 0.9])
    quals = np.array([28.0, 31.5, 34.0, 36.2])
    anchor = curve_from(bpps, quals)
    test = curve_from(bpps * 0.9, quals)
    # swapping roles inverts the rate ratio: 1/0.9 - 1 = +11.11%
    assert bd_rate(test, anchor) == pytest.approx(100.0 * (1 / 0.9 - 1),
                                                  abs=1e-9)


def test_bd_rate_errors():
    a = curve_from([0.1, 0.5], [30.0, 35.0])
    b = curve_from([0.1, 0.5], [40.0, 45.0])
    with pytest.raises(ValueError, match="do not overlap"):
        bd_rate(a, b)
    m = curve_from([0.1, 0.5], [30.0, 35.0], metric="msssim")
    with pytest.raises(ValueError, match="different quality metrics"):
        bd_rate(a, m)
    single = curve_from([0.3], [32.0])
    with pytest.raises(ValueError, match="at least 2 points"):
        bd_rate(a, single)
    # equal qualities leave no interval to integrate over
    flat = curve_from([0.1, 0.5], [30.0, 30.0])
    with pytest.raises(ValueError, match="do not overlap"):
        bd_rate(flat, flat)
    # duplicate quality inside one curve cannot be inverted to rate(quality)
    dup = curve_from([0.1, 0.5, 0.9], [30.0, 30.0, 35.0])
    other = curve_from([0.1, 0.9], [29.0, 36.0])
    with pytest.raises(ValueError, match="non-increasing quality"):
        bd_rate(dup, other)


def test_bd_rate_quality_shift_sign():
    # same rates, test curve 1 dB better -> test needs fewer bits at equal
    # quality, so the figure must come out negative
    bpps = np.array([0.1, 0.25, 0.5, 0.9])
    quals = np.array([28.0, 31.5, 34.0, 36.2])
    anchor = curve_from(bpps, quals)
    test = curve_from(bpps, quals + 1.0)
    assert bd_rate(anchor, test) < -1.0


# ---------------------------------------------------------------------------
# corpus evaluation and data files


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(42)
    for i in range(2):
        write_ppm(d / ("img%d.ppm" % i), synth_image(rng, 16, 16))
    (d / "broken.ppm").write_bytes(b"P6\n16 16\n255\nshort")
    return d


@pytest.fixture(scope="module")
def weight_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("weights")
    paths = []
    for lam, seed in ((0.02, 0), (0.2, 1)):
        cfg = TR.make_config("tiny", lam=lam)
        params = TR.init_weights(cfg, seed=seed)
        p = d / ("w%s.caew" % seed)
        save_weights(p, params, cfg)
        paths.append(p)
    return paths


ROW_RE = re.compile(r"^img\d\.ppm: bpp, \d+\.\d{4}; PSNR, (inf|\d+\.\d{4});"
                    r" MS-SSIM-dB, (inf|-?\d+\.\d{4})$")


def test_evaluate_corpus_report(eval_dir, weight_files):
    with pytest.warns(RuntimeWarning, match="skipping unreadable"):
        curve, report = evaluate_corpus(weight_files, eval_dir)
    assert report["skipped"] == ["broken.ppm"]
    assert report["evaluated"] == 2
    assert report["lambdas"] == [0.02, 0.2]
    for lam in report["lambdas"]:
        rows = report["rows"][lam]
        assert len(rows) == 2
        for row in rows:
            assert ROW_RE.match(row), row
        avg = report["averages"][lam]
        assert avg["bpp"] > 0
        assert np.isfinite(avg["psnr"])
    assert curve is not None and len(curve.points) == 2
    assert curve.metric == "psnr"


def test_evaluate_corpus_msssim_quality(eval_dir, weight_files):
    with pytest.warns(RuntimeWarning):
        curve, report = evaluate_corpus(weight_files[:1] + weight_files[1:],
                                        eval_dir, quality="msssim")
    for lam in report["lambdas"]:
        avg = report["averages"][lam]
        assert report["points"]
    assert curve.metric == "msssim"
    qs = [p.quality for p in curve.points]
    lams = report["lambdas"]
    assert qs[0] == pytest.approx(report["averages"][lams[0]]["msssim_db"])


def test_evaluate_corpus_parallel_matches_serial(eval_dir, weight_files):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, serial = evaluate_corpus(weight_files, eval_dir, jobs=1)
        _, par = evaluate_corpus(weight_files, eval_dir, jobs=2)
    assert par["rows"] == serial["rows"]
    assert par["averages"] == serial["averages"]


def test_evaluate_corpus_empty_dir(tmp_path, weight_files):
    with pytest.raises(ValueError, match="no decodable images"):
        evaluate_corpus(weight_files, tmp_path)


def test_write_rd_dat_round_trip(tmp_path):
    curves = {
        "anchor": curve_from([0.1, 0.5, 0.9], [30.0, 34.0, 36.0]),
        "variant": curve_from([0.08, 0.4], [30.0, 34.0]),
    }
    path = tmp_path / "rd.dat"
    write_rd_dat(path, curves)
    text = path.read_text()
    assert "# curve 0: anchor (psnr)" in text
    assert "# curve 1: variant (psnr)" in text
    rows = [ln.split() for ln in text.splitlines()
            if ln and not ln.startswith("#")]
    vals = [(float(a), float(b)) for a, b in rows]
    assert vals == [(0.1, 30.0), (0.5, 34.0), (0.9, 36.0),
                    (0.08, 30.0), (0.4, 34.0)]
    assert not (tmp_path / "rd.dat.tmp").exists()

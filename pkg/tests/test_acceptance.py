"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; conftest prints them in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import brute_force_period, dense_scan
from scrloc.cli import EXIT_OK, main
from scrloc.codec import (
    PRESETS,
    RationalFrequencySet,
    SearchDomain,
    decode_channels,
    decode_points,
    encode_point,
    exact_period,
    reg_loss,
    scr_loss,
)
from scrloc.compression import storage_report
from scrloc.geometry import CorrespondenceSet, Intrinsics, Pose, RansacParams, pose_error, ransac_pnp, solve_pnp
from scrloc.pipeline import NoiseModel, PipelineConfig, PQSettings, localize, roundtrip_errors

RESULTS: list[str] = []


def record(name: str, ok: bool, detail: str, elapsed: float | None = None) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"
    if elapsed is not None:
        line += f" ({elapsed:.1f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---- 1. storage arithmetic -------------------------------------------------------------------

APPENDIX_KB = {None: 3686, 2: 461, 4: 230, 6: 154, 8: 115, 16: 58, 32: 29, 64: 14, 128: 7}


def test_01_storage_arithmetic():
    t0 = time.perf_counter()
    got = {B: storage_report(1200, 768, B)["kB_per_img"] for B in APPENDIX_KB}
    raw_mb = storage_report(1200, 768, None)["raw_bytes"] / 1e6
    elapsed = time.perf_counter() - t0
    ok = got == APPENDIX_KB and round(raw_mb, 2) == 3.69 and elapsed < 1.0
    record("1 storage", ok, f"raw {raw_mb:.2f} MB/img, kB/img {[got[B] for B in APPENDIX_KB]}", elapsed)


# ---- 2. codec round trip ---------------------------------------------------------------------


def test_02_codec_round_trip():
    fs = PRESETS[6]
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    v = rng.uniform(0, 300, (10_000, 3))
    dom = SearchDomain.interval(0, 300)
    y = encode_point(v, fs)
    err = np.abs(decode_points(y, fs, [dom] * 3) - v)
    # dense-scan oracle on the first channel of every point
    res = 1e-3
    yx = y[:, : 2 * fs.F]
    dec, s = decode_channels(yx, fs, dom, return_objective=True)
    ot, os_ = dense_scan(yx, fs.frequencies, 0, 300, res)
    elapsed = time.perf_counter() - t0
    s_ok = bool(np.all(s <= os_ + 1e-6))
    basin_ok = bool(np.max(np.abs(dec - ot)) <= res / 2 + 1e-9)
    med, mx = float(np.median(err)), float(np.max(err))
    ok = med < 1e-3 and mx < 5e-3 and s_ok and basin_ok and elapsed < 120
    record(
        "2 codec round trip",
        ok,
        f"median {med:.2e} m, max {mx:.2e} m, S <= oracle S + 1e-6: {s_ok}, same basin as oracle: {basin_ok}",
        elapsed,
    )


# ---- 3. noise robustness ordering ------------------------------------------------------------


def test_03_noise_ordering():
    t0 = time.perf_counter()
    med = {F: float(np.median(roundtrip_errors(PRESETS[F], 0.2, 1000, seed=3))) for F in (4, 6)}
    elapsed = time.perf_counter() - t0
    ok = med[6] <= med[4] and elapsed < 300
    record("3 noise ordering", ok, f"sigma 0.2 median d=36 {med[6]:.4g} m <= d=24 {med[4]:.4g} m", elapsed)


# ---- 4. loss analytics -----------------------------------------------------------------------


def test_04_tau_stationarity():
    fs = PRESETS[6]
    rng = np.random.default_rng(4)
    # log-spaced grid; recovery means the argmin sits on a grid node adjacent to 1/L
    grid = np.geomspace(1e-3, 1e3, 60_001)
    step = math.log(grid[1] / grid[0])
    worst = 0.0
    for _ in range(100):
        v = rng.uniform(-50, 50, 3)
        y_hat = encode_point(v, fs) + rng.normal(0, rng.uniform(0.01, 1.0), fs.dim)
        L = reg_loss(v, y_hat, fs)
        losses = grid * L - np.log(grid)
        tau = grid[int(np.argmin(losses))]
        assert math.isclose(scr_loss(v, y_hat, float(tau), fs), float(np.min(losses)), rel_tol=1e-12, abs_tol=1e-12)
        worst = max(worst, abs(math.log(tau * L)))
    ok = worst <= step
    record("4 tau stationarity", ok, f"max |log(tau_grid * L)| {worst:.2e} <= grid step {step:.2e}")


# ---- 5. period law ---------------------------------------------------------------------------


def test_05_period_law():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(50):
        F = int(rng.integers(1, 5))
        pairs = []
        while len(pairs) < F:
            a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            if math.gcd(a, b) == 1:
                pairs.append((a, b))
        rfs = RationalFrequencySet.from_pairs(pairs)
        q = exact_period(rfs)
        mismatches += q != brute_force_period(rfs.fractions)
        # numeric check: the encoding repeats after 2*pi*q and not after any shorter whole number of f1 periods
        f = np.array([float(fr) for fr in rfs.fractions])
        t = rng.uniform(0, 10, 16)
        base = np.concatenate([np.cos(np.outer(t, f)), np.sin(np.outer(t, f))], axis=1)

        def shifted(p):
            ph = np.outer(t + 2 * math.pi * p, f)
            return np.concatenate([np.cos(ph), np.sin(ph)], axis=1)

        repeats = np.max(np.abs(shifted(float(q)) - base)) < 1e-9
        k_star = q * rfs.fractions[0]
        shorter = all(np.max(np.abs(shifted(float(k / rfs.fractions[0])) - base)) > 1e-6 for k in range(1, int(k_star)))
        mismatches += not (repeats and shorter and k_star.denominator == 1)
    record("5 period law", mismatches == 0, f"{50 - mismatches}/50 sets agree with brute force")


# ---- 6. PnP ----------------------------------------------------------------------------------

K640 = Intrinsics.from_fov(640, 480, 60)


def view_in_box(rng, n, outlier_fraction=0.0, noise_px=0.0, size=10.0):
    c = rng.uniform(0, size, 3)
    tgt = rng.uniform(0, size, 3)
    while np.linalg.norm(tgt - c) < 0.3 * size:
        tgt = rng.uniform(0, size, 3)
    pose = Pose.look_at(c, tgt, up=rng.normal(size=3))
    pix = np.stack([rng.uniform(0, K640.width - 1, n), rng.uniform(0, K640.height - 1, n)], 1)
    d = rng.uniform(0.1 * size, size, n)
    Xc = np.stack([(pix[:, 0] - K640.cx) / K640.fx * d, (pix[:, 1] - K640.cy) / K640.fy * d, d], 1)
    X = (Xc - pose.translation) @ pose.rotation
    obs = pix + rng.normal(0, noise_px, pix.shape) if noise_px else pix.copy()
    k = int(round(outlier_fraction * n))
    obs[:k] = np.stack([rng.uniform(0, K640.width, k), rng.uniform(0, K640.height, k)], 1)
    return pose, CorrespondenceSet(obs, X)


def test_06_pnp():
    t0 = time.perf_counter()
    worst_t = worst_r = 0.0
    for i in range(1000):
        rng = np.random.default_rng([6, i])
        pose, cs = view_in_box(rng, int(rng.integers(6, 200)))
        e = pose_error(solve_pnp(cs, K640), pose)
        worst_t, worst_r = max(worst_t, e.translation_error), max(worst_r, e.rotation_error)
    et, er = [], []
    for i in range(100):
        pose, cs = view_in_box(np.random.default_rng([60, i]), 500, outlier_fraction=0.3, noise_px=0.5)
        e = pose_error(ransac_pnp(cs, K640, RansacParams(seed=i)).pose, pose)
        et.append(e.translation_error)
        er.append(e.rotation_error)
    elapsed = time.perf_counter() - t0
    p95_t, p95_r = float(np.percentile(et, 95)), float(np.percentile(er, 95))
    ok = worst_t < 1e-6 and worst_r < 1e-6 and p95_t < 0.05 and p95_r < 0.5 and elapsed < 300
    record(
        "6 pnp",
        ok,
        f"noiseless max ({worst_t:.1e} m, {worst_r:.1e} deg); 30% outliers p95 ({p95_t:.4f} m, {p95_r:.4f} deg)",
        elapsed,
    )


# ---- 7/8. end-to-end localization -----------------------------------------------------------

NOISY = NoiseModel(sigma_enc=0.15, dropout_fraction=0.2)
THRESHOLDS = ("acc@(0.25m,2deg)", "acc@(0.5m,5deg)", "acc@(5m,10deg)")


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(name, **kw):
        if name not in cache:
            t0 = time.perf_counter()
            rep = localize(PipelineConfig(queries=50, **kw))["report"]
            cache[name] = (rep, time.perf_counter() - t0)
        return cache[name]

    return get


def test_07_localization(runs):
    clean, t_clean = runs("clean", fusion_k=4)
    k4, t4 = runs("k4", fusion_k=4, noise=NOISY)
    k1, t1 = runs("k1", fusion_k=1, noise=NOISY)
    elapsed = t_clean + t4 + t1
    fusion_ok = all(k4[k] >= k1[k] for k in THRESHOLDS)
    ok = clean["acc@(0.25m,2deg)"] == 1.0 and fusion_ok and elapsed < 600
    record(
        "7 localization",
        ok,
        f"noiseless acc@(0.25m,2deg) {clean['acc@(0.25m,2deg)']:.2f}; "
        f"noisy K=4 {[k4[k] for k in THRESHOLDS]} >= K=1 {[k1[k] for k in THRESHOLDS]}",
        elapsed,
    )


def test_08_compression_in_the_loop(runs):
    k4, _ = runs("k4", fusion_k=4, noise=NOISY)
    pq, elapsed = runs("pq", fusion_k=4, noise=NOISY, pq=PQSettings(block_size=2))
    drops = [k4[k] - pq[k] for k in THRESHOLDS]
    ok = all(d <= 0.02 + 1e-12 for d in drops)
    record("8 pq in the loop", ok, f"B=2 {[pq[k] for k in THRESHOLDS]} vs raw {[k4[k] for k in THRESHOLDS]}", elapsed)


# ---- 9. determinism --------------------------------------------------------------------------


def test_09_cli_determinism(tmp_path):
    def put(name, doc):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return str(p)

    rng = np.random.default_rng(9)
    np.save(tmp_path / "samples.npy", rng.normal(size=(600, 8)).astype(np.float32))
    np.save(tmp_path / "tokens.npy", rng.normal(size=(20, 8)).astype(np.float32))
    loc = put("loc.json", {"queries": 3, "fusion_k": 2, "ransac": {"iterations": 500},
                           "image": {"width": 40, "height": 30, "hfov_deg": 60.0}, "annotations_per_view": 256})
    S = str(tmp_path)
    # each command writes to {out}; later commands read the first run's artifacts
    commands = {
        "freq-search": ["freq-search", "--config", put("fs.json", {"candidates": 4, "trials": 50})],
        "codec-bench": ["codec-bench", "--config", put("cb.json", {"sigmas": [0.0, 0.2], "trials": 100})],
        "pq report": ["pq", "report"],
        "pq train": ["pq", "train", "--samples", f"{S}/samples.npy", "--block-size", "2"],
        "pq encode": ["pq", "encode", "--codebook", f"{S}/pq train-0", "--tokens", f"{S}/tokens.npy"],
        "pq decode": ["pq", "decode", "--codebook", f"{S}/pq train-0", "--codes", f"{S}/pq encode-0"],
        "scene gen": ["scene", "gen", "--seed", "3"],
        "scene render": ["scene", "render", "--scene", f"{S}/scene gen-0", "--annotations", f"{S}/ann.jsonl"],
        "localize": ["localize", "--config", loc],
        "eval": ["eval", "--input", f"{S}/localize-0"],
    }
    differing = []
    for name, argv in commands.items():
        outs = []
        for k in range(2):
            out = tmp_path / f"{name}-{k}"
            assert main(argv + ["--out", str(out)]) == EXIT_OK, name
            outs.append(out.read_bytes())
        if outs[0] != outs[1]:
            differing.append(name)
    record("9 determinism", not differing, f"{len(commands) - len(differing)}/{len(commands)} commands byte-identical")

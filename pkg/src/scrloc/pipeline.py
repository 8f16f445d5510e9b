"""End-to-end localization on synthetic scenes, plus the benchmark drivers used by the CLI."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import (
    DEFAULT_FREQUENCIES,
    PRESETS,
    FrequencySet,
    SearchDomain,
    decode_channels,
    decode_points,
    encode_channel,
    injectivity_probe,
    sample_frequency_set,
)
from .compression import Codebook, TokenSet, dequantize, quantize, train_codebooks
from .errors import EmptyInputError, InvalidParameterError, ScrlocError
from .fusion import CoordinateMap, fuse_maps, map_to_correspondences, median_confidence_filter
from .geometry import Intrinsics, Pose, RansacParams, accuracy_report, pose_error, ransac_pnp
from .scenegen import (
    DEFAULT_BOUNDS,
    SyntheticScene,
    build_scene,
    jitter_pose,
    oracle_predict,
    render_view,
    sample_query_pose,
    subsample_annotations,
)

log = logging.getLogger(__name__)

_TAG_QUERY, _TAG_DB, _TAG_ORACLE, _TAG_RANSAC, _TAG_PQ = range(5)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def frequencies_from(value) -> FrequencySet:
    """``None`` (default set), a preset size, ``{"preset": F}``, ``{"f1", "gamma", "F"}`` or ``{"file": path}``."""
    if value is None:
        return DEFAULT_FREQUENCIES
    if isinstance(value, FrequencySet):
        return value
    if isinstance(value, int):
        value = {"preset": value}
    if "file" in value:
        with open(value["file"]) as fh:
            return FrequencySet.from_json(fh.read())
    if "preset" in value:
        F = int(value["preset"])
        if F not in PRESETS:
            raise InvalidParameterError(f"no preset frequency set for F={F}")
        return PRESETS[F]
    return FrequencySet.from_dict(value)


@dataclass(frozen=True)
class NoiseModel:
    sigma_enc: float = 0.0
    dropout_fraction: float = 0.0


@dataclass(frozen=True)
class PQSettings:
    block_size: int = 2
    train_views: int = 8
    max_samples: int = 20_000
    n_init: int = 3
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    frequencies: FrequencySet = DEFAULT_FREQUENCIES
    domains: str | tuple = "from-annotations"
    domain_margin: float = 0.1
    fusion_k: int = 4
    ransac: RansacParams = field(default_factory=RansacParams)
    noise: NoiseModel = field(default_factory=NoiseModel)
    pq: PQSettings | None = None
    scene: dict = field(default_factory=lambda: {"seed": 0, "bounds": [list(b) for b in DEFAULT_BOUNDS], "plane_count": 6})
    scene_file: str | None = None
    queries: int = 50
    width: int = 64
    height: int = 48
    hfov_deg: float = 60.0
    annotations_per_view: int = 1024
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.fusion_k < 1:
            raise InvalidParameterError("fusion K must be at least 1")
        if self.queries < 0:
            raise InvalidParameterError("query count must be non-negative")
        if self.domain_margin < 0:
            raise InvalidParameterError("domain margin must be non-negative")
        if self.domains != "from-annotations" and len(self.domains) != 3:
            raise InvalidParameterError('domains must be "from-annotations" or three [lo, hi] intervals')
        if self.scene_file is not None and not os.path.exists(self.scene_file):
            raise FileNotFoundError(self.scene_file)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.hfov_deg)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        kw = {}
        if "frequencies" in d:
            kw["frequencies"] = frequencies_from(d.pop("frequencies"))
        if "ransac" in d:
            kw["ransac"] = RansacParams(**d.pop("ransac"))
        if "noise" in d:
            kw["noise"] = NoiseModel(**d.pop("noise"))
        if "pq" in d:
            pq = d.pop("pq")
            kw["pq"] = None if pq is None else PQSettings(**pq)
        if "domains" in d:
            dom = d.pop("domains")
            kw["domains"] = dom if isinstance(dom, str) else tuple(tuple(map(float, iv)) for iv in dom)
        image = d.pop("image", None)
        if image:
            kw.update(width=int(image["width"]), height=int(image["height"]), hfov_deg=float(image["hfov_deg"]))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path: str) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "frequencies": self.frequencies.to_dict(),
            "domains": self.domains if isinstance(self.domains, str) else [list(iv) for iv in self.domains],
            "domain_margin": self.domain_margin,
            "fusion_k": self.fusion_k,
            "ransac": self.ransac.to_dict(),
            "noise": {"sigma_enc": self.noise.sigma_enc, "dropout_fraction": self.noise.dropout_fraction},
            "pq": None if self.pq is None else self.pq.__dict__.copy(),
            "scene": self.scene,
            "scene_file": self.scene_file,
            "queries": self.queries,
            "image": {"width": self.width, "height": self.height, "hfov_deg": self.hfov_deg},
            "annotations_per_view": self.annotations_per_view,
            "stride": self.stride,
            "seed": self.seed,
        }

    def load_scene(self) -> SyntheticScene:
        if self.scene_file is not None:
            with open(self.scene_file) as fh:
                return SyntheticScene.from_json(fh.read())
        sc = self.scene
        return build_scene(int(sc.get("seed", 0)), sc.get("bounds", DEFAULT_BOUNDS), int(sc.get("plane_count", 6)))


# --------------------------------------------------------------------------------------------
# Localization
# --------------------------------------------------------------------------------------------


@dataclass
class QueryResult:
    index: int
    truth: Pose
    estimate: Pose | None = None
    num_correspondences: int = 0
    num_inliers: int = 0
    failure: str | None = None

    @property
    def error(self):
        return None if self.estimate is None else pose_error(self.estimate, self.truth)

    def to_dict(self) -> dict:
        e = self.error
        return {
            "index": self.index,
            "localized": self.estimate is not None,
            "translation_error": None if e is None else e.translation_error,
            "rotation_error": None if e is None else e.rotation_error,
            "correspondences": self.num_correspondences,
            "inliers": self.num_inliers,
            "failure": self.failure,
            "truth": self.truth.to_dict(),
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
        }


def _decoded_map(enc: np.ndarray, tau: np.ndarray, valid: np.ndarray, fs: FrequencySet, domains) -> CoordinateMap:
    H, W = valid.shape
    coords = np.zeros((H, W, 3))
    coords[valid] = decode_points(enc[valid], fs, domains)
    return CoordinateMap(coords, tau, valid)


def annotation_domains(annotations, margin: float) -> tuple[SearchDomain, SearchDomain, SearchDomain]:
    """Per-axis union of the annotation ranges, each grown by ``margin`` of its length."""
    ranges = [a.ranges() for a in annotations]
    return tuple(SearchDomain.union(r[k] for r in ranges).expanded(margin) for k in range(3))  # type: ignore[return-value]


def train_pq_codebook(cfg: PipelineConfig, scene: SyntheticScene) -> Codebook:
    """Codebook trained on oracle encodings of views disjoint from the query set."""
    assert cfg.pq is not None
    K = cfg.intrinsics
    rows = []
    for v in range(cfg.pq.train_views):
        rng = _rng(cfg.seed, _TAG_PQ, cfg.pq.seed, v)
        view = render_view(scene, sample_query_pose(scene, K, rng), K)
        pred = oracle_predict(
            view, cfg.frequencies, cfg.noise.sigma_enc, cfg.noise.dropout_fraction, _seed(cfg.seed, _TAG_PQ, v)
        )
        rows.append(pred.encodings[pred.valid])
    samples = np.concatenate(rows)
    if len(samples) > cfg.pq.max_samples:
        pick = _rng(cfg.seed, _TAG_PQ, cfg.pq.seed).choice(len(samples), cfg.pq.max_samples, replace=False)
        samples = samples[np.sort(pick)]
    return train_codebooks(samples, cfg.pq.block_size, seed=cfg.pq.seed, n_init=cfg.pq.n_init)


def localize_query(
    cfg: PipelineConfig, scene: SyntheticScene, i: int, codebook: Codebook | None = None
) -> QueryResult:
    K = cfg.intrinsics
    fs = cfg.frequencies
    rng = _rng(cfg.seed, _TAG_QUERY, i)
    truth = sample_query_pose(scene, K, rng)
    res = QueryResult(i, truth)
    query = render_view(scene, truth, K, f"q{i}")

    # shortlist of database views around the query, each with sparse annotations
    annotations = []
    for k in range(cfg.fusion_k):
        db_rng = _rng(cfg.seed, _TAG_DB, i, k)
        for _ in range(100):
            view = render_view(scene, jitter_pose(scene, truth, db_rng), K, f"q{i}-db{k}")
            if view.valid.any():
                break
        annotations.append(subsample_annotations(view, cfg.annotations_per_view, _seed(cfg.seed, _TAG_DB, i, k)))
    if cfg.domains == "from-annotations":
        domains = annotation_domains(annotations, cfg.domain_margin)
    else:
        domains = tuple(SearchDomain.interval(*iv) for iv in cfg.domains)

    try:
        maps = []
        for k in range(cfg.fusion_k):
            pred = oracle_predict(
                query, fs, cfg.noise.sigma_enc, cfg.noise.dropout_fraction, _seed(cfg.seed, _TAG_ORACLE, i, k)
            )
            enc = pred.encodings
            if codebook is not None:
                flat = enc[pred.valid]
                back = dequantize(quantize(TokenSet(flat), codebook), codebook).tokens.astype(np.float64)
                enc = enc.copy()
                enc[pred.valid] = back
            maps.append(_decoded_map(enc, pred.confidence, pred.valid, fs, domains))
        fused = median_confidence_filter(fuse_maps(maps))
        corrs = map_to_correspondences(fused, cfg.stride)
        res.num_correspondences = len(corrs)
        params = replace(cfg.ransac, seed=_seed(cfg.seed, _TAG_RANSAC, cfg.ransac.seed, i))
        out = ransac_pnp(corrs, K, params)
        res.estimate = out.pose
        res.num_inliers = out.num_inliers
    except ScrlocError as exc:
        res.failure = f"{type(exc).__name__}: {exc}"
        log.info("query %d unlocalized: %s", i, res.failure)
    return res


def _finite_or_none(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def localize(cfg: PipelineConfig, threads: int = 1) -> dict:
    """Run every query and return the JSON-ready report."""
    if cfg.queries == 0:
        raise EmptyInputError("no queries to localize")
    scene = cfg.load_scene()
    codebook = train_pq_codebook(cfg, scene) if cfg.pq is not None else None
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda i: localize_query(cfg, scene, i, codebook), range(cfg.queries)))
    else:
        results = [localize_query(cfg, scene, i, codebook) for i in range(cfg.queries)]
    report = {k: _finite_or_none(v) for k, v in accuracy_report([r.error for r in results]).items()}
    report["unlocalized"] = sum(r.estimate is None for r in results)
    return {
        "config": cfg.to_dict(),
        "codebook_sha256": None if codebook is None else codebook.hash.hex(),
        "report": report,
        "queries": [r.to_dict() for r in results],
    }


def evaluate(results: dict) -> dict:
    """Recompute the accuracy report from the per-query poses of a localization output."""
    queries = results.get("queries", [])
    errors = []
    for q in queries:
        if q.get("estimate") is None:
            errors.append(None)
        else:
            errors.append(pose_error(Pose.from_dict(q["estimate"]), Pose.from_dict(q["truth"])))
    report = {k: _finite_or_none(v) for k, v in accuracy_report(errors).items()}
    report["unlocalized"] = sum(e is None for e in errors)
    return report


# --------------------------------------------------------------------------------------------
# Codec benchmarks
# --------------------------------------------------------------------------------------------


def roundtrip_errors(fs: FrequencySet, sigma: float, trials: int, domain=(0.0, 300.0), seed: int = 0) -> np.ndarray:
    """|decoded - true| of single-channel round trips under Gaussian encoding noise.

    Points and noise come from the same seed for every frequency set, so trials are matched
    (the noise draws of a smaller set are a prefix of those of a larger one per row).
    """
    lo, hi = float(domain[0]), float(domain[1])
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, trials)
    noise = rng.normal(size=(trials, 2 * max(PRESETS)))
    width = 2 * fs.F
    if width > noise.shape[1]:
        noise = np.concatenate([noise, rng.normal(size=(trials, width - noise.shape[1]))], axis=1)
    y = encode_channel(x, fs) + sigma * noise[:, :width]
    dec = decode_channels(y, fs, SearchDomain.interval(lo, hi))
    return np.abs(dec - x)


def _summary(err: np.ndarray) -> dict:
    return {
        "median": float(np.median(err)),
        "q90": float(np.quantile(err, 0.9)),
        "q99": float(np.quantile(err, 0.99)),
        "max": float(np.max(err)),
    }


def codec_bench(sigmas, presets=(4, 6, 8), trials: int = 1000, domain=(0.0, 300.0), seed: int = 0) -> dict:
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise EmptyInputError("noise grid is empty")
    rows = []
    for F in presets:
        fs = frequencies_from(int(F))
        for s in sigmas:
            rows.append({"F": int(F), "dim": fs.dim, "sigma": s, **_summary(roundtrip_errors(fs, s, trials, domain, seed))})
    return {"trials": trials, "domain": [float(domain[0]), float(domain[1])], "seed": seed, "results": rows}


def freq_search(
    candidates: int = 100,
    F: int = 6,
    p1_range=(200.0, 500.0),
    pf_range=(0.2, 2.0),
    sigma: float = 0.2,
    trials: int = 200,
    domain=(0.0, 300.0),
    grid_step: float = 0.01,
    min_separation: float = 1.0,
    forced=(),
    seed: int = 0,
) -> dict:
    """Rank random frequency sets by noisy round-trip error, non-injective sets last."""
    cands = [(f"forced-{j}", frequencies_from(value)) for j, value in enumerate(forced)]
    cands += [(f"random-{j}", sample_frequency_set(_seed(seed, j), p1_range, pf_range, F)) for j in range(candidates)]
    rows = []
    for name, fs in cands:
        inj = injectivity_probe(fs, domain, grid_step, min_separation)
        err = roundtrip_errors(fs, sigma, trials, domain, seed)
        rows.append(
            {
                "name": name,
                "f1": fs.f1,
                "gamma": fs.gamma,
                "F": fs.F,
                "P1": fs.lowest_period,
                "PF": fs.highest_period,
                "injectivity": inj.to_dict(),
                "median_error": float(np.median(err)),
                "q90_error": float(np.quantile(err, 0.9)),
            }
        )
    rows.sort(key=lambda r: (not r["injectivity"]["min_distance"] > 1e-3, r["median_error"], r["name"]))
    for rank, r in enumerate(rows):
        r["rank"] = rank
    return {
        "seed": seed,
        "sigma": sigma,
        "trials": trials,
        "domain": [float(domain[0]), float(domain[1])],
        "p1_range": [float(v) for v in p1_range],
        "pf_range": [float(v) for v in pf_range],
        "candidates": rows,
    }

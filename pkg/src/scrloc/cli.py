"""Command-line interface.

Every verb reads an optional JSON ``--config``, writes machine-readable output to ``--out``
and a short human summary to stdout. Exit codes: 0 ok, 1 usage, 2 data error, 3 when more
than half of the localization queries are unlocalized.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import pipeline
from .codec import PRESETS
from .compression import Codebook, QuantizedTokenSet, TokenSet, dequantize, quantize, storage_table, train_codebooks
from .errors import ScrlocError
from .geometry import Intrinsics, Pose
from .scenegen import (
    DEFAULT_BOUNDS,
    SyntheticScene,
    build_scene,
    make_token_samples,
    render_view,
    sample_query_pose,
    subsample_annotations,
)

log = logging.getLogger("scrloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NO_CONSENSUS = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _clean(x):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def dumps(doc) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_json(path: str | None, doc) -> None:
    text = dumps(doc)
    if path is None:
        return
    with open(path, "w") as fh:
        fh.write(text)


def _write_bytes(path: str | None, data: bytes) -> None:
    if path is None:
        raise UsageError("--out is required for this command")
    with open(path, "wb") as fh:
        fh.write(data)


def _read_bytes(path: str | None, what: str) -> bytes:
    if path is None:
        raise UsageError(f"--{what} is required")
    with open(path, "rb") as fh:
        return fh.read()


def _config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ScrlocError("config must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


# --------------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------------


def cmd_freq_search(args) -> int:
    cfg = _config(args)
    forced = cfg.get("forced", [{"preset": 6}])
    rep = pipeline.freq_search(
        candidates=int(cfg.get("candidates", 100)),
        F=int(cfg.get("F", 6)),
        p1_range=cfg.get("p1_range", (200.0, 500.0)),
        pf_range=cfg.get("pf_range", (0.2, 2.0)),
        sigma=float(cfg.get("sigma", 0.2)),
        trials=int(cfg.get("trials", 200)),
        domain=cfg.get("domain", (0.0, 300.0)),
        grid_step=float(cfg.get("grid_step", 0.01)),
        min_separation=float(cfg.get("min_separation", 1.0)),
        forced=forced,
        seed=int(cfg.get("seed", 0)),
    )
    _write_json(args.out, rep)
    best = rep["candidates"][0]
    print(f"{len(rep['candidates'])} candidates; best {best['name']}: f1={best['f1']:.6g} gamma={best['gamma']:.6g} "
          f"median error {best['median_error']:.4g} m")
    return EXIT_OK


def cmd_codec_bench(args) -> int:
    cfg = _config(args)
    rep = pipeline.codec_bench(
        cfg.get("sigmas", [0.0, 0.1, 0.2]),
        presets=cfg.get("presets", sorted(PRESETS)),
        trials=int(cfg.get("trials", 1000)),
        domain=cfg.get("domain", (0.0, 300.0)),
        seed=int(cfg.get("seed", 0)),
    )
    _write_json(args.out, rep)
    for r in rep["results"]:
        print(f"F={r['F']} sigma={r['sigma']:g}: median {r['median']:.3g} m, max {r['max']:.3g} m")
    return EXIT_OK


def cmd_pq(args) -> int:
    cfg = _config(args)
    if args.pq_cmd == "report":
        T = args.tokens_count if args.tokens_count is not None else int(cfg.get("tokens", 1200))
        D = args.dim if args.dim is not None else int(cfg.get("dim", 768))
        rows = storage_table(T, D, cfg.get("block_sizes", (2, 4, 6, 8, 16, 32, 64, 128)))
        _write_json(args.out, {"tokens": T, "dim": D, "rows": rows})
        for r in rows:
            label = "raw" if r["B"] is None else f"B={r['B']}"
            print(f"{label:>6}: {r['kB_per_img']} kB/img (x{r['factor']})")
        return EXIT_OK
    if args.pq_cmd == "train":
        if args.samples:
            samples = np.load(args.samples)
        else:
            syn = cfg.get("synthetic", {})
            samples = make_token_samples(
                int(cfg.get("seed", 0)),
                int(syn.get("count", 30_000)),
                int(syn.get("dim", 768)),
                int(syn.get("modes", 256)),
                float(syn.get("sigma", 0.1)),
            )
        B = args.block_size if args.block_size is not None else int(cfg.get("block_size", 8))
        cb = train_codebooks(samples, B, seed=int(cfg.get("seed", 0)), n_init=int(cfg.get("n_init", 3)))
        _write_bytes(args.out, cb.to_bytes())
        print(f"trained {cb.num_blocks} codebooks of 256x{B} on {len(samples)} samples; sha256 {cb.hash.hex()}")
        return EXIT_OK
    cb = Codebook.from_bytes(_read_bytes(args.codebook, "codebook"))
    if args.pq_cmd == "encode":
        if args.tokens is None:
            raise UsageError("--tokens is required")
        q = quantize(TokenSet(np.load(args.tokens)), cb)
        _write_bytes(args.out, q.to_bytes())
        print(f"encoded {q.codes.shape[0]} tokens into {q.nbytes} bytes")
        return EXIT_OK
    q = QuantizedTokenSet.from_bytes(_read_bytes(args.codes, "codes"))
    ts = dequantize(q, cb)
    if args.out is None:
        raise UsageError("--out is required for this command")
    with open(args.out, "wb") as fh:
        np.save(fh, ts.tokens)
    print(f"decoded {ts.tokens.shape[0]} tokens of dimension {ts.dim}")
    return EXIT_OK


def cmd_scene(args) -> int:
    cfg = _config(args)
    if args.scene_cmd == "gen":
        sc = cfg.get("scene", {})
        scene = build_scene(
            int(cfg.get("seed", sc.get("seed", 0))), sc.get("bounds", DEFAULT_BOUNDS), int(sc.get("plane_count", 6))
        )
        text = scene.to_json() + "\n"
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        print(f"scene with {len(scene.planes)} planes, bounds {scene.bounds}")
        return EXIT_OK
    if args.scene is None:
        raise UsageError("--scene is required")
    with open(args.scene) as fh:
        scene = SyntheticScene.from_json(fh.read())
    img = cfg.get("image", {"width": 64, "height": 48, "hfov_deg": 60.0})
    K = Intrinsics.from_fov(int(img["width"]), int(img["height"]), float(img["hfov_deg"]))
    seed = int(cfg.get("seed", 0))
    pose = Pose.from_dict(cfg["pose"]) if "pose" in cfg else sample_query_pose(scene, K, np.random.default_rng(seed))
    view = render_view(scene, pose, K)
    _write_bytes(args.out, view.gt_coords.to_bytes())
    if args.annotations:
        ann = subsample_annotations(view, int(cfg.get("annotations_per_view", 1024)), seed)
        with open(args.annotations, "w") as fh:
            fh.write(ann.to_jsonl())
    print(f"rendered {K.width}x{K.height} view, {view.gt_coords.valid_count} valid pixels")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = pipeline.PipelineConfig.from_dict(_config(args))
    out = pipeline.localize(cfg, threads=args.threads)
    _write_json(args.out, out)
    rep = out["report"]
    print(
        f"{rep['count']} queries, {rep['unlocalized']} unlocalized; "
        + ", ".join(f"{k}={v:.3f}" for k, v in rep.items() if k.startswith("acc@"))
    )
    return EXIT_NO_CONSENSUS if 2 * rep["unlocalized"] > rep["count"] else EXIT_OK


def cmd_eval(args) -> int:
    if args.input is None:
        raise UsageError("--input is required")
    with open(args.input) as fh:
        rep = pipeline.evaluate(json.load(fh))
    _write_json(args.out, rep)
    print(", ".join(f"{k}={v:.3f}" for k, v in rep.items() if k.startswith("acc@")))
    return EXIT_NO_CONSENSUS if 2 * rep["unlocalized"] > rep["count"] else EXIT_OK


# --------------------------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------------------------


def _common(suppress: bool) -> argparse.ArgumentParser:
    # sub-commands must not reset flags given before the verb, hence SUPPRESS defaults there
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file", **kw)
    common.add_argument("--seed", type=int, help="override the configuration seed", **kw)
    common.add_argument("--out", metavar="PATH", help="output file", **kw)
    common.add_argument("--threads", type=int, help="worker threads (localize)", **(kw or {"default": 1}))
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scrloc", description="Scene-coordinate localization toolkit", parents=[_common(False)])
    common = _common(True)
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("freq-search", parents=[common], help="rank random frequency sets").set_defaults(fn=cmd_freq_search)
    sub.add_parser("codec-bench", parents=[common], help="round-trip error vs. noise").set_defaults(fn=cmd_codec_bench)

    pq = sub.add_parser("pq", parents=[common], help="product quantization")
    pq_sub = pq.add_subparsers(dest="pq_cmd", required=True)
    t = pq_sub.add_parser("train", parents=[common])
    t.add_argument("--samples", metavar="NPY")
    t.add_argument("--block-size", type=int)
    e = pq_sub.add_parser("encode", parents=[common])
    e.add_argument("--codebook", metavar="PATH")
    e.add_argument("--tokens", metavar="NPY")
    d = pq_sub.add_parser("decode", parents=[common])
    d.add_argument("--codebook", metavar="PATH")
    d.add_argument("--codes", metavar="PATH")
    r = pq_sub.add_parser("report", parents=[common])
    r.add_argument("--tokens-count", type=int)
    r.add_argument("--dim", type=int)
    pq.set_defaults(fn=cmd_pq)

    sc = sub.add_parser("scene", parents=[common], help="synthetic scenes")
    sc_sub = sc.add_subparsers(dest="scene_cmd", required=True)
    sc_sub.add_parser("gen", parents=[common])
    rd = sc_sub.add_parser("render", parents=[common])
    rd.add_argument("--scene", metavar="PATH")
    rd.add_argument("--annotations", metavar="JSONL")
    sc.set_defaults(fn=cmd_scene)

    sub.add_parser("localize", parents=[common], help="end-to-end localization").set_defaults(fn=cmd_localize)
    ev = sub.add_parser("eval", parents=[common], help="accuracy of a localization output")
    ev.add_argument("--input", metavar="PATH")
    ev.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"scrloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScrlocError, OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"scrloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

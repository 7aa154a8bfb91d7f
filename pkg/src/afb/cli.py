"""Command-line entry point.

Subcommands: ``generate`` (synthetic dataset), ``run`` (segment a dataset),
``eval`` (score predictions), ``bench`` (feature-bank micro-benchmark),
``ablate`` (memory-policy / refinement sweep), ``train-scorer`` (fit the
refinement scorer).  Exit codes: 0 success, 1 usage error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench import StreamSpec, compare_backends, run_bank_bench
from .config import build_pipeline_config, load_config
from .errors import DataError, InvariantError, UsageError
from .feature_bank import BankConfig
from .metrics import evaluate_sequence, report_dict
from .pipeline import MEMORY_POLICIES, segment_video
from .refinement import RefineConfig, Scorer, TrainItem, scorer_loss_grad, train_scorer
from .synthgen import (
    MOTIONS,
    SceneSpec,
    VideoSequence,
    frame_name,
    load_dataset,
    read_pgm,
    save_dataset_stream,
    write_pgm,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="afb", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--objects", type=int, default=2)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--drift", type=float, default=0.0)
    g.add_argument("--motion", choices=MOTIONS, default="linear")
    g.add_argument("--occlusion", action="store_true")

    r = sub.add_parser("run", help="segment a dataset from its first-frame annotation")
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--policy", choices=MEMORY_POLICIES)
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--scorer-params", help="JSON file from train-scorer")

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report")

    b = sub.add_parser("bench", help="feature-bank micro-benchmark")
    b.add_argument("--stream", choices=("clustered", "drifting", "uniform"), default="clustered")
    b.add_argument("--features-per-frame", type=int, default=50)
    b.add_argument("--frames", type=int, default=200)
    b.add_argument("--budget", type=int, default=None)
    b.add_argument("--config")
    b.add_argument("--clusters", type=int, default=8)
    b.add_argument("--sigma", type=float, default=0.05)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--queries", type=int, default=256)
    b.add_argument("--compare-backends", action="store_true")
    b.add_argument("--report")

    a = sub.add_parser("ablate", help="memory-policy x refinement sweep on one dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--policies", default=",".join(MEMORY_POLICIES))
    a.add_argument("--urr", choices=("on", "off", "both"), default="both")
    a.add_argument("--threads", type=int, default=None)

    t = sub.add_parser("train-scorer", help="fit the trainable refinement scorer")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--out", required=True)
    t.add_argument("--max-frames", type=int, default=8)
    t.add_argument("--check-grad", action="store_true")
    return p


def _threads(value) -> int:
    if value is not None:
        if value < 1:
            raise UsageError("--threads must be >= 1")
        return value
    env = os.environ.get("AFB_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"AFB_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise UsageError("AFB_THREADS must be >= 1")
        return n
    return 1


def _load_scorer(path) -> Scorer:
    try:
        params = json.loads(Path(path).read_text())
        return Scorer(kind=params["kind"], w=float(params["w"]), b=float(params["b"]))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot load scorer params from {path}: {exc}")


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# -- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.objects < 1:
        raise UsageError("--objects must be >= 1")
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    try:
        spec = SceneSpec(
            width=args.width,
            height=args.height,
            num_objects=args.objects,
            frames=args.frames,
            seed=args.seed,
            motion=args.motion,
            drift=args.drift,
            occlusion=args.occlusion,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    save_dataset_stream(spec, args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    values = load_config(args.config)
    scorer = _load_scorer(args.scorer_params) if args.scorer_params else None
    cfg = build_pipeline_config(
        values,
        scorer=scorer,
        threads=_threads(args.threads),
        memory_policy=args.policy,
    )
    video = load_dataset(args.data)
    out = Path(args.out)
    masks_dir = out / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out / "stats.jsonl"

    with open(stats_path, "w") as stats:
        def emit(fr):
            write_pgm(masks_dir / f"{frame_name(fr.frame)}.pgm", fr.labels.astype(np.uint8))
            line = json.dumps(
                {
                    "frame": fr.frame,
                    "per_object_bank_size": fr.bank_sizes,
                    "merges": fr.merges,
                    "appends": fr.appends,
                    "evictions": fr.evictions,
                    "mean_u": round(fr.mean_u, 10),
                    "runtime_ms": round(fr.runtime_ms, 3),
                },
                sort_keys=True,
            )
            stats.write(line + "\n")
            print(line)

        segment_video(video, cfg, progress=emit)
    return EXIT_OK


def _masks_dir(path) -> Path:
    p = Path(path)
    if (p / "masks").is_dir():
        return p / "masks"
    if p.is_dir():
        return p
    raise DataError(f"{path}: not a directory")


def cmd_eval(args) -> int:
    pred_dir = _masks_dir(args.pred)
    gt_dir = _masks_dir(args.gt)
    pred_files = sorted(pred_dir.glob("*.pgm"))
    if not pred_files:
        raise DataError(f"{pred_dir}: no predicted masks found")
    pred, gt = [], []
    for pf in pred_files:
        gf = gt_dir / pf.name
        if not gf.exists():
            raise DataError(f"{gt_dir}: no ground-truth mask pairs with {pf.name}")
        pred.append(read_pgm(pf))
        gt.append(read_pgm(gf))
    num_objects = int(max(int(g.max()) for g in gt))
    if num_objects < 1:
        raise DataError("ground truth annotates no objects")
    scores = evaluate_sequence(pred, gt, num_objects)
    _dump_json(report_dict(scores), args.report)
    return EXIT_OK


def cmd_bench(args) -> int:
    values = load_config(args.config)
    spec = StreamSpec(
        kind=args.stream,
        frames=args.frames,
        features_per_frame=args.features_per_frame,
        dim=values["d_k"],
        clusters=args.clusters,
        sigma=args.sigma,
        seed=args.seed,
    )
    budget = args.budget if args.budget is not None else values["budget"]
    bank_config = BankConfig(
        key_dim=spec.dim,
        value_dim=spec.dim,
        epsilon_h=values["epsilon_h"],
        lambda_p=values["lambda_p"],
        epsilon_l=values["epsilon_l"],
        budget=budget,
    )
    if args.compare_backends:
        result = compare_backends(spec, bank_config, queries=args.queries)
    else:
        result = run_bank_bench(spec, bank_config, queries=args.queries)
    _dump_json(result, args.report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    values = load_config(args.config)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in MEMORY_POLICIES:
            raise UsageError(f"unknown policy {p!r}")
    urr_modes = {"on": [True], "off": [False], "both": [True, False]}[args.urr]
    threads = _threads(args.threads)

    video = load_dataset(args.data)
    gt = [np.asarray(g) for g in video.gt]
    num_objects = int(max(int(g.max()) for g in gt))

    rows = []
    for policy in policies:
        for urr in urr_modes:
            cfg = build_pipeline_config(
                values,
                threads=threads,
                memory_policy=policy,
                # u_threshold 1.0 gates refinement off: U never exceeds 1.
                u_threshold=values["u_threshold"] if urr else 1.0,
            )
            results = segment_video(video, cfg)
            pred = [fr.labels for fr in results]
            scores = evaluate_sequence(pred, gt[1:], num_objects)
            rows.append(
                {
                    "policy": policy,
                    "urr": "on" if urr else "off",
                    "JF_M": scores.jf_mean,
                    "J_M": scores.j_agg.mean,
                    "F_M": scores.f_agg.mean,
                }
            )
    table = {"variants": rows}
    _dump_json(table, args.out)
    return EXIT_OK


def _scorer_training_items(video: VideoSequence, values: dict, max_frames: int):
    """Replay the matching stages with ground-truth absorption and capture the
    pre-refinement (masks, U, features, labels) tuples the scorer trains on."""
    from . import pipeline as pl
    from .uncertainty import uncertainty_map

    cfg = build_pipeline_config(values)
    frames = video.frames
    gt = [np.asarray(g) for g in video.gt]
    gt1 = gt[0]
    n_objects = int(gt1.max())
    policy = pl.make_policy(cfg.memory_policy, cfg.bank_config())
    for i in range(n_objects + 1):
        keys, vals = pl.extract_reference(frames[0], gt1 == i, cfg.extractor)
        if keys.shape[0] == 0:
            raise DataError(f"object {i} yields no first-frame features")
        policy.init_object(i, keys, vals, frame=1)

    items = []
    last = min(len(frames), max_frames + 1)
    for t in range(2, last + 1):
        frame = frames[t - 1]
        query, pix = pl.extract_query(frame, cfg.extractor)
        mrs = [pl.match(query, policy.store(i), cfg.epsilon_l) for i in range(n_objects + 1)]
        for i, mr in enumerate(mrs):
            policy.record_usage(i, mr.usage_counts)
        maps = pl.decode(mrs, query, cfg, frame.shape[:2])
        items.append(TrainItem(masks=maps, u=uncertainty_map(maps), feats=pix, gt_labels=gt[t - 1]))
        for i in range(n_objects + 1):
            keys, vals = pl.extract_reference(frame, gt[t - 1] == i, cfg.extractor)
            policy.update_object(i, keys, vals, frame=t)
    return items


def cmd_train_scorer(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    values = load_config(args.config)
    video = load_dataset(args.data)
    items = _scorer_training_items(video, values, args.max_frames)
    if not items:
        raise DataError("dataset too short to build training items")

    cfg = RefineConfig(
        radius=values["radius"],
        u_threshold=values["u_threshold"],
        scorer=Scorer(kind="trainable-affine", w=1.0, b=0.0),
    )

    if args.check_grad:
        ok, rel = _grad_check(items, cfg, values["lambda_u"])
        print(f"gradient check: max relative error {rel:.3e} -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            raise InvariantError("scorer gradient check failed")

    fitted, curve = train_scorer(items, cfg, lambda_u=values["lambda_u"], steps=args.steps, lr=args.lr)
    params = {"kind": fitted.kind, "w": fitted.w, "b": fitted.b, "loss_curve": curve}
    Path(args.out).write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    for i, loss in enumerate(curve):
        print(f"step {i:3d}  loss {loss:.6f}")
    print(f"fitted w={fitted.w:.6f} b={fitted.b:.6f} -> {args.out}")
    return EXIT_OK


def _grad_check(items, cfg, lambda_u, h=1e-4):
    worst = 0.0
    for w0, b0 in ((1.0, 0.0), (0.7, -0.2), (1.5, 0.3)):
        _, gw, gb = scorer_loss_grad(items, cfg, w0, b0, lambda_u)
        for which, analytic in (("w", gw), ("b", gb)):
            if which == "w":
                lp, _, _ = scorer_loss_grad(items, cfg, w0 + h, b0, lambda_u)
                lm, _, _ = scorer_loss_grad(items, cfg, w0 - h, b0, lambda_u)
            else:
                lp, _, _ = scorer_loss_grad(items, cfg, w0, b0 + h, lambda_u)
                lm, _, _ = scorer_loss_grad(items, cfg, w0, b0 - h, lambda_u)
            fd = (lp - lm) / (2 * h)
            rel = abs(analytic - fd) / max(abs(analytic) + abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst < 1e-4, worst


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "generate": cmd_generate,
            "run": cmd_run,
            "eval": cmd_eval,
            "bench": cmd_bench,
            "ablate": cmd_ablate,
            "train-scorer": cmd_train_scorer,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

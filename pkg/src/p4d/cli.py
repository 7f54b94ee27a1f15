"""Command-line entry point.

Verbs: gen-data, train, eval, ablate, density, grad-check. Every command
is reproducible from its flags plus --seed; sub-streams derive from the
master seed through a splittable counter scheme (numpy SeedSequence spawn
keys), and artifacts embed the fully resolved configuration. Exit codes:
0 success, 1 flag/validation failure, 2 runtime failure. Set P4D_LOG to
error, info, or debug to control logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("p4d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); remap to exit 1
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="p4d",
        description=(
            "Multi-modal 3D vehicle detection on synthetic driving scenes: "
            "dataset generation, training, evaluation, comparative studies, "
            "temporal density profiling, and gradient verification. "
            "All randomness flows from --seed; per-scene and per-step "
            "sub-seeds are derived with a splittable counter scheme "
            "(SeedSequence spawn keys), so every artifact regenerates "
            "exactly from the recorded flags."
        ),
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("gen-data", help="write synthetic scene JSONs and a manifest")
    gen.add_argument("--scenes", type=int, required=True, help="training scene count")
    gen.add_argument("--test-scenes", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--frames", type=int, default=16)
    gen.add_argument("--actors-min", type=int, default=1)
    gen.add_argument("--actors-max", type=int, default=10)
    gen.add_argument("--spawn-min", type=float, default=6.0)
    gen.add_argument("--spawn-max", type=float, default=72.0)
    gen.add_argument("--ground-points", type=int, default=4500)

    tr = sub.add_parser("train", help="train one model variant")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--variant", default="dynamic",
                    help="named study variant (see `ablate --help`)")
    tr.add_argument("--model-config", default=None,
                    help="model config JSON overriding --variant")
    tr.add_argument("--train-config", default=None,
                    help="train config JSON; flags below override its fields")
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--frames", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--run-dir", required=True,
                    help="directory written by `train` (checkpoint + configs)")
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", default=None, help="report CSV path")
    ev.add_argument("--limit", type=int, default=None)

    ab = sub.add_parser("ablate", help="train and evaluate the study grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--steps", type=int, default=400)
    ab.add_argument("--jobs", type=int, default=1)
    ab.add_argument("--variants", default=None,
                    help="comma list; default runs the full grid")
    ab.add_argument("--test-limit", type=int, default=None)

    de = sub.add_parser("density", help="points-per-cell by range, per sweep count")
    de.add_argument("--frames", type=int, action="append", required=True,
                    help="sweep count; repeat the flag to compare")
    de.add_argument("--scenes", type=int, default=20)
    de.add_argument("--seed", type=int, default=0)
    de.add_argument("--out", default=None, help="CSV path (default stdout)")

    gc = sub.add_parser("grad-check", help="finite-difference gate for every op kind")
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_gen_data(args) -> int:
    from .simworld import SceneParameters, write_dataset

    if args.scenes <= 0:
        raise UsageError("--scenes must be a positive integer")
    if args.test_scenes < 0:
        raise UsageError("--test-scenes must be non-negative")
    params = SceneParameters(
        actor_count=(args.actors_min, args.actors_max),
        spawn_range=(args.spawn_min, args.spawn_max),
        frame_count=args.frames,
        ground_points_per_frame=args.ground_points,
    )
    splits = {"train": args.scenes}
    if args.test_scenes:
        splits["test"] = args.test_scenes
    manifest = write_dataset(args.out, params, args.seed, splits)
    log.info("wrote %s scenes to %s", sum(map(len, manifest.values())), args.out)
    print(f"wrote {sum(map(len, manifest.values()))} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .ablation import build_variant, study_train_config
    from .fusion import Model, ModelConfig
    from .training import TrainConfig, load_split_scenes, train_loop

    out = Path(args.out)
    if args.model_config:
        model_config = ModelConfig.load(args.model_config)
        frames = args.frames or 16
        name = Path(args.model_config).stem
    else:
        variant = build_variant(args.variant)
        model_config = variant.model_config
        frames = args.frames or variant.frames
        name = variant.name
    if args.train_config:
        config = TrainConfig.load(args.train_config)
        config = TrainConfig(**{**config.to_dict(), "seed": args.seed, "frames": frames})
    else:
        config = study_train_config(args.steps or 400, args.seed, frames)
    if args.steps:
        config = TrainConfig(**{**config.to_dict(), "steps": args.steps,
                                "warmup_steps": max(args.steps // 10, 1)})
    if args.batch_size:
        config = TrainConfig(**{**config.to_dict(), "batch_size": args.batch_size})

    scenes = load_split_scenes(args.data, config.split)
    model = Model(model_config, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    model_config.save(out / "model_config.json")
    config.save(out / "train_config.json")
    (out / "variant.json").write_text(json.dumps({"name": name, "frames": frames}))
    result = train_loop(model, config, scenes, out)
    log.info("final loss %.4f after %d steps", result.final_loss(), config.steps)
    print(f"trained {name}: final loss {result.final_loss():.4f} "
          f"({result.train_seconds:.1f}s); artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    from .ablation import evaluate_model
    from .autodiff import load_checkpoint
    from .fusion import Model, ModelConfig
    from .evaluation import write_report_csv
    from .training import load_split_scenes

    run_dir = Path(args.run_dir)
    model_config = ModelConfig.load(run_dir / "model_config.json")
    meta = json.loads((run_dir / "variant.json").read_text())
    model = Model(model_config, seed=0)
    model.params.load_arrays(load_checkpoint(run_dir / "model.ckpt"))
    scenes = load_split_scenes(args.data, args.split)
    if args.limit:
        scenes = scenes[: args.limit]
    report, infer_ms = evaluate_model(model, scenes, meta["frames"])
    row = {
        "config_name": meta["name"], "seed": 0,
        "ap_all": round(report.ap_overall, 4),
        "ap_lt30": round(report.ap_under_30m, 4),
        "ap_30_50": round(report.ap_30_to_50m, 4),
        "ap_gt50": round(report.ap_over_50m, 4),
        "train_seconds": 0.0, "infer_ms_per_frame": round(infer_ms, 1),
    }
    print(json.dumps(row))
    if args.out:
        write_report_csv(args.out, [row])
    return 0


def _cmd_ablate(args) -> int:
    from .ablation import STUDY_VARIANTS, ablation_report, build_variant, mean_by_variant

    names = args.variants.split(",") if args.variants else list(STUDY_VARIANTS)
    for n in names:
        build_variant(n)  # validate early
    if args.seeds <= 0:
        raise UsageError("--seeds must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_report(
        names, args.data, seeds=list(range(args.seeds)), steps=args.steps,
        jobs=args.jobs, test_limit=args.test_limit, out_csv=out / "report.csv",
    )
    means = mean_by_variant(rows)
    for name in names:
        m = means[name]
        print(f"{name:12s} ap_all {m['ap_all']:.3f}  <30m {m['ap_lt30']:.3f}  "
              f"30-50m {m['ap_30_50']:.3f}  >50m {m['ap_gt50']:.3f}  "
              f"(spread {m['spread']:.3f})")
    print(f"report: {out / 'report.csv'}")
    return 0


def _cmd_density(args) -> int:
    from .pillars import accumulate, density_profile, write_density_csv
    from .simworld import SceneParameters, generate_scene, rng_for, simulate_lidar_frame

    frame_counts = sorted(set(args.frames))
    max_frames = max(frame_counts)
    if max_frames < 1:
        raise UsageError("--frames must be >= 1")
    edges = list(np.arange(0.0, 84.0, 4.0))
    params = SceneParameters(frame_count=max_frames)
    totals = {t: np.zeros(len(edges) - 1) for t in frame_counts}
    for i in range(args.scenes):
        seed = int(rng_for(args.seed, 5, i).integers(0, 2**63 - 1))
        scene = generate_scene(params, seed)
        sweeps = [simulate_lidar_frame(scene, f) for f in range(max_frames)]
        for t in frame_counts:
            cloud = accumulate(sweeps[-t:], sweeps[-1].ego_pose)
            totals[t] += density_profile(cloud, edges)
    profiles = {t: v / args.scenes for t, v in totals.items()}
    if args.out:
        write_density_csv(args.out, profiles, edges)
        print(f"density profile written to {args.out}")
    else:
        print("range_bin_low,range_bin_high,frames_accumulated,mean_points_per_cell")
        for t in frame_counts:
            for lo, hi, v in zip(edges[:-1], edges[1:], profiles[t]):
                print(f"{lo},{hi},{t},{v:.6f}")
    return 0


def _cmd_grad_check(args) -> int:
    from .autodiff import OP_KINDS, PASS_THRESHOLD, finite_diff_check
    from .fusion import fusion_layer_gradient_check

    worst_name, worst = None, -1.0
    failed = False
    for i, kind in enumerate(OP_KINDS):
        err = finite_diff_check(kind, trial_count=args.trials, seed=args.seed + i)
        status = "ok" if err < PASS_THRESHOLD else "FAIL"
        print(f"{kind:28s} {err:.3e}  {status}")
        failed |= err >= PASS_THRESHOLD
        if err > worst:
            worst_name, worst = kind, err
    err = fusion_layer_gradient_check(trials=max(args.trials // 4, 1), seed=args.seed)
    status = "ok" if err < PASS_THRESHOLD else "FAIL"
    print(f"{'fusion_layer (composed)':28s} {err:.3e}  {status}")
    failed |= err >= PASS_THRESHOLD
    if err > worst:
        worst_name, worst = "fusion_layer", err
    print(f"worst: {worst_name} at {worst:.3e} (threshold {PASS_THRESHOLD:.0e})")
    return 2 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "density": _cmd_density,
    "grad-check": _cmd_grad_check,
}


def run(argv: list[str] | None = None) -> int:
    level = os.environ.get("P4D_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
            level, logging.ERROR
        ),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.verb](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

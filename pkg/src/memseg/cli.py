"""Command-line entry point: ``memseg <command> ...``.

Failures print a single ``error: <Kind>: <message>`` line to stderr and exit
with status 2 (usage) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .errors import MemsegError
from .keyframes import dedup
from .pipeline import DEFAULT_K_LIST, load_scene_frames, parse_config, run_ablation, run_eval, run_segment
from .raster import load_mask
from .segmenter import SegmenterConfig, TrainState, init_weights, load_weights, save_weights, train_step


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--scene", help="scene directory holding frames/*.ppm")
    p.add_argument("--weights", help="segmenter weights (default: freshly initialised from --seed)")
    p.add_argument("-k", "--k", type=int, help="number of seed frames")
    p.add_argument("--hamming-threshold", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stm-cap", type=int)
    p.add_argument("--ltm-stride", type=int)
    p.add_argument("--ltm-cap", type=int)
    p.add_argument("--similarity", choices=("l2", "dot"))
    p.add_argument("--value-mode", choices=("mask", "read"))
    p.add_argument("--seed", type=int)


def _run_config(args, **extra) -> pipeline.RunConfig:
    keys = ("scene", "weights", "k", "hamming_threshold", "patch_size", "stm_cap", "ltm_stride", "ltm_cap",
            "similarity", "value_mode", "seed")
    overrides = {key: getattr(args, key) for key in keys}
    overrides.update(extra)
    return parse_config(args.config, overrides)


def cmd_segment(args) -> int:
    result = run_segment(_run_config(args, output=args.out))
    t = result.timing
    print(f"frames={t.frame_count} seeds={','.join(map(str, result.seeds))} "
          + " ".join(f"{name}_ms={t.stages[name]:.1f}" for name in pipeline.STAGES))
    return 0


def cmd_eval(args) -> int:
    report = run_eval(args.pred, args.gt, args.out, binary_ap=args.binary_ap)
    print(" ".join(f"{m}={'NA' if v is None else f'{v:.4f}'}" for m, v in report.overall.items()))
    return 0


def cmd_ablate(args) -> int:
    rows = run_ablation(_run_config(args), args.out, k_list=args.k_list, repeats=args.repeats)
    for r in rows:
        print(f"k={r.k} seeds={r.seeds} wall_ms={r.wall_ms:.1f}")
    return 0


def cmd_keyframes(args) -> int:
    _, frames = load_scene_frames(args.scene)
    selection = dedup(frames, args.hamming_threshold)
    for t in selection.kept:
        print(t, selection.hashes[t])
    return 0


def cmd_weights_init(args) -> int:
    config = SegmenterConfig(
        patch_size=args.patch_size, embed_dim=args.embed_dim, layers=args.layers,
        heads=args.heads, classes=args.classes, seed=args.seed,
    )
    save_weights(init_weights(config, args.grid_w, args.grid_h), args.out)
    return 0


def cmd_train(args) -> int:
    weights = load_weights(args.weights)
    names, frames = load_scene_frames(args.scene)
    masks = [load_mask(Path(args.scene) / "masks" / f"{n}.pgm") for n in names]
    state = TrainState.for_weights(weights, args.iters, base_lr=args.lr)
    for it in range(args.iters):
        t = it % len(frames)
        _, _, loss = train_step(weights, state, frames[t], masks[t])
        if args.log_every and (it + 1) % args.log_every == 0:
            print(f"iter={it + 1} loss={loss:.6f}")
    save_weights(weights, args.out or args.weights)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment every frame of a scene")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--binary-ap", action="store_true", help="score AP as region precision of hard masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="rerun segment + eval for several seed counts")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", type=lambda s: [int(x) for x in s.split(",")], default=list(DEFAULT_K_LIST))
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("keyframes", help="list the frames kept by hash dedup")
    p.add_argument("--scene", required=True)
    p.add_argument("--hamming-threshold", type=int, default=12)
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("train", help="fine-tune weights on a scene's frames and masks")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", help="where to write the result (default: overwrite --weights)")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("weights-init", help="write freshly initialised weights")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--classes", type=int, default=103)
    p.add_argument("--grid-w", type=int, default=8)
    p.add_argument("--grid-h", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_weights_init)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MemsegError, OSError, ValueError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end runs: keyframe dedup, seed segmentation, memory propagation,
evaluation and the seed-count ablation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, DimensionError, EmptyInputError, PairingError
from .keyframes import dedup
from .memory import SIMILARITIES, VALUE_MODES, MemoryParams, propagate
from .metrics import MetricReport, aggregate, emit_report, score_image
from .raster import Frame, MaskMap, load_frame, load_mask, save_mask
from .segmenter import SegmenterConfig, SegmenterWeights, init_weights, load_weights, segment

STAGES = ("dedup", "seed_segmentation", "propagation")
DEFAULT_K_LIST = (1, 3, 6, 9)


@dataclass(frozen=True)
class RunConfig:
    scene: str = ""
    output: str = ""
    weights: str = ""
    k: int = 1
    hamming_threshold: int = 12
    patch_size: int = 8
    stm_cap: int = 5
    ltm_stride: int = 5
    ltm_cap: int = 64
    similarity: str = "l2"
    value_mode: str = "mask"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.hamming_threshold <= 64:
            raise ConfigError(f"hamming_threshold must lie in [0, 64], got {self.hamming_threshold}")
        for name in ("patch_size", "stm_cap", "ltm_stride", "ltm_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}")
        if self.value_mode not in VALUE_MODES:
            raise ConfigError(f"value_mode must be one of {VALUE_MODES}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def memory(self) -> MemoryParams:
        return MemoryParams(self.stm_cap, self.ltm_stride, self.ltm_cap, self.similarity, self.value_mode)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if _FIELD_TYPES[key] in ("int", int):
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    return raw


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``key = value`` lines (``#`` starts a comment); ``overrides``
    (e.g. CLI flags, ``None`` meaning unset) win over file values."""
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values)


def select_seed_frames(kept: Sequence[int], k: int) -> list[int]:
    """K frames spread uniformly over the kept keyframes (fewer when there
    are fewer keyframes than K)."""
    if not kept:
        raise EmptyInputError("no keyframes to choose seeds from")
    if k < 1:
        raise ConfigError("k must be >= 1")
    m = len(kept)
    if k == 1:
        return [kept[0]]
    positions = {math.floor(j * (m - 1) / (k - 1) + 0.5) for j in range(k)}
    return sorted(kept[p] for p in positions)


# --------------------------------------------------------------------------- segment


@dataclass
class TimingReport:
    stages: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    frames: list[tuple[int, float]] = field(default_factory=list)
    frame_count: int = 0
    seed_count: int = 0

    @property
    def seed_ms_per_frame(self) -> float:
        return self.stages["seed_segmentation"] / max(self.seed_count, 1)

    @property
    def propagation_ms_per_frame(self) -> float:
        """Propagation stage time over the frames it actually propagated."""
        return self.stages["propagation"] / max(self.frame_count - self.seed_count, 1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "name", "value"])
            for name in STAGES:
                w.writerow(["stage", name, f"{self.stages[name]:.3f}"])
            w.writerow(["count", "frames", self.frame_count])
            w.writerow(["count", "seeds", self.seed_count])
            for t, ms in self.frames:
                w.writerow(["frame", t, f"{ms:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TimingReport":
        rep = cls()
        with open(path, newline="") as fh:
            for kind, name, value in list(csv.reader(fh))[1:]:
                if kind == "stage":
                    rep.stages[name] = float(value)
                elif kind == "count":
                    setattr(rep, f"{'frame' if name == 'frames' else 'seed'}_count", int(value))
                elif kind == "frame":
                    rep.frames.append((int(name), float(value)))
        return rep


@dataclass
class SegmentResult:
    names: list[str]
    masks: list[MaskMap]
    keyframes: list[int]
    seeds: list[int]
    timing: TimingReport


def load_scene_frames(scene) -> tuple[list[str], list[Frame]]:
    paths = sorted((Path(scene) / "frames").glob("*.ppm"))
    if not paths:
        raise EmptyInputError(f"no frames under {Path(scene) / 'frames'}")
    return [p.stem for p in paths], [load_frame(p) for p in paths]


def resolve_weights(config: RunConfig) -> SegmenterWeights:
    if config.weights:
        weights = load_weights(config.weights)
    else:
        weights = init_weights(SegmenterConfig(patch_size=config.patch_size, seed=config.seed))
    if weights.config.patch_size != config.patch_size:
        raise DimensionError(
            f"weights use patch size {weights.config.patch_size}, config asks for {config.patch_size}"
        )
    return weights


def segment_frames(
    frames: Sequence[Frame], weights: SegmenterWeights, config: RunConfig
) -> tuple[list[MaskMap], list[int], list[int], TimingReport]:
    timing = TimingReport(frame_count=len(frames))

    start = time.perf_counter()
    selection = dedup(frames, config.hamming_threshold)
    timing.stages["dedup"] = (time.perf_counter() - start) * 1000.0

    seed_idx = select_seed_frames(selection.kept, config.k)
    timing.seed_count = len(seed_idx)
    start = time.perf_counter()
    seeds = {t: segment(frames[t], weights)[1] for t in seed_idx}
    timing.stages["seed_segmentation"] = (time.perf_counter() - start) * 1000.0

    start = time.perf_counter()
    masks = propagate(
        frames, seeds, weights, config.memory, on_frame=lambda t, ms: timing.frames.append((t, ms))
    )
    timing.stages["propagation"] = (time.perf_counter() - start) * 1000.0
    return masks, selection.kept, seed_idx, timing


def run_segment(config: RunConfig, weights: SegmenterWeights | None = None) -> SegmentResult:
    """Segment a scene directory and write ``<output>/masks/<name>.pgm`` plus
    ``<output>/timing.csv``."""
    names, frames = load_scene_frames(config.scene)
    if weights is None:
        weights = resolve_weights(config)
    elif weights.config.patch_size != config.patch_size:
        raise DimensionError("weights and config disagree on patch size")
    masks, kept, seed_idx, timing = segment_frames(frames, weights, config)
    if config.output:
        out = Path(config.output) / "masks"
        out.mkdir(parents=True, exist_ok=True)
        for name, mask in zip(names, masks):
            save_mask(mask, out / f"{name}.pgm")
        timing.write_csv(Path(config.output) / "timing.csv")
    return SegmentResult(names, masks, kept, seed_idx, timing)


# --------------------------------------------------------------------------- eval


def _mask_files(root: Path) -> dict[Path, Path]:
    return {p.relative_to(root): p for p in sorted(root.rglob("*.pgm"))}


def _scene_of(rel: Path, default: str) -> str:
    parts = list(rel.parts[:-1])
    if parts and parts[-1] == "masks":
        parts.pop()
    return "/".join(parts) or default


def run_eval(pred_dir, gt_dir, out_path=None, binary_ap: bool = False) -> MetricReport:
    """Pair masks by relative path, score each image, average per scene
    (the directory above ``masks/``) and then across scenes."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    if not gts:
        raise EmptyInputError(f"no ground-truth masks under {gt_dir}")
    if not preds:
        raise EmptyInputError(f"no predicted masks under {pred_dir}")
    missing = sorted(str(r) for r in gts.keys() - preds.keys())
    extra = sorted(str(r) for r in preds.keys() - gts.keys())
    if missing or extra:
        detail = []
        if missing:
            detail.append("missing predictions: " + ", ".join(missing))
        if extra:
            detail.append("no ground truth for: " + ", ".join(extra))
        raise PairingError("; ".join(detail))
    scores: dict[str, list] = {}
    for rel in sorted(gts):
        scene = _scene_of(rel, gt_dir.name)
        s = score_image(load_mask(preds[rel]), load_mask(gts[rel]), image_id=rel.stem, scene=scene, binary_ap=binary_ap)
        scores.setdefault(scene, []).append(s)
    report = aggregate(scores)
    if out_path is not None:
        emit_report(report, out_path)
    return report


# --------------------------------------------------------------------------- ablation


def format_elapsed(ms: float) -> str:
    seconds = ms / 1000.0
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{int(h):02d}:{int(m):02d}:{s:06.3f}"


@dataclass
class AblationRow:
    k: int
    seeds: int
    map: float | None
    recall: float | None
    wall_ms: float


def run_ablation(
    config: RunConfig,
    out_dir,
    k_list: Sequence[int] = DEFAULT_K_LIST,
    repeats: int = 3,
) -> list[AblationRow]:
    """Rerun segmentation per seed count K and score it against
    ``<scene>/masks``. Wall time per K is the fastest of ``repeats`` runs.

    Writes ``ablation.csv`` (quality per K) and ``ablation_time.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = resolve_weights(config)
    scene_name = Path(config.scene).name or "scene"
    configs = {k: replace(config, k=k, output=str(out_dir / f"k{k}")) for k in k_list}
    best = dict.fromkeys(k_list, math.inf)
    seeds = {}
    # round-robin over K so slow drift on the host does not masquerade as a trend
    for _ in range(max(repeats, 1)):
        for k, cfg in configs.items():
            start = time.perf_counter()
            result = run_segment(cfg, weights)
            best[k] = min(best[k], (time.perf_counter() - start) * 1000.0)
            seeds[k] = len(result.seeds)
    rows = []
    for k, cfg in configs.items():
        report = run_eval(Path(cfg.output) / "masks", Path(config.scene) / "masks")
        rows.append(AblationRow(k, seeds[k], report.overall["map"], report.overall["recall"], best[k]))

    def fmt(v):
        return "NA" if v is None else f"{v:.4f}"

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seeds", f"map_{scene_name}", f"recall_{scene_name}"])
        for r in rows:
            w.writerow([r.k, r.seeds, fmt(r.map), fmt(r.recall)])
    with open(out_dir / "ablation_time.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "wall_ms", "elapsed"])
        for r in rows:
            w.writerow([r.k, f"{r.wall_ms:.3f}", format_elapsed(r.wall_ms)])
    return rows

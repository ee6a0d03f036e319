"""Deterministic synthetic benchmark scenes for visual-query segmentation.

Each scene is an untrimmed video in which a colored target shape appears in
one or more disjoint temporal occurrences, moving on a linear-plus-sinusoid
path with scale drift, among same-shape distractors of perturbed hue and
scale. The query is rendered on its own background (never a video frame)
with an exact rasterized mask. All rasterization uses a pixel-center-inside
test with no anti-aliasing, so ground-truth masks reproduce bit-exactly
from the stored trajectory states.

Per-scene seeds derive from the master seed with a splitmix64-style mixer
(constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB).
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .masks import (
    MaskError,
    Masklet,
    ResponseSet,
    RleMask,
    annotation_from_dict,
    annotation_to_dict,
    rle_encode,
)

MANIFEST_FORMAT = "vqs-dataset-v1"
MANIFEST_NAME = "manifest.json"

SHAPES = ("disk", "rectangle", "triangle")

_MIX_GAMMA = 0x9E3779B97F4A7C15
_MIX_M1 = 0xBF58476D1CE4E5B9
_MIX_M2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1

_QUERY_SALT = 0xA5C3
_SAMPLER_SALT = 0x51D7


class SceneConfigError(ValueError):
    """Raised when a scene configuration cannot be realized."""


def mix_seed(master_seed: int, index: int) -> int:
    """splitmix64 of (master_seed + (index+1) * golden gamma)."""
    z = (master_seed + (index + 1) * _MIX_GAMMA) & _MASK64
    z ^= z >> 30
    z = (z * _MIX_M1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX_M2) & _MASK64
    z ^= z >> 31
    return z


# --- PPM (binary P6) ---------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 HxWx3 image, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos, count=h * w * 3)
    if data.size != h * w * 3:
        raise ValueError(f"{path}: pixel payload truncated")
    return data.reshape(h, w, 3).copy()


# --- Shapes -------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeState:
    """Pose of one shape in one frame; sufficient to re-rasterize exactly."""

    shape: str
    cx: float
    cy: float
    size: float
    aspect: float        # rectangle half-height / half-width ratio carrier
    color: tuple[int, int, int]


def rasterize_shape(state: ShapeState, height: int, width: int) -> np.ndarray:
    """Boolean foreground grid via a pixel-center-inside test."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    if state.shape == "disk":
        return (px - state.cx) ** 2 + (py - state.cy) ** 2 <= state.size**2
    if state.shape == "rectangle":
        hx = state.size
        hy = state.size * state.aspect
        return (np.abs(px - state.cx) <= hx) & (np.abs(py - state.cy) <= hy)
    if state.shape == "triangle":
        # isoceles triangle pointing up, listed counter-clockwise in image coords
        ax, ay = state.cx, state.cy - state.size
        bx, by = state.cx - 0.9 * state.size, state.cy + 0.8 * state.size
        cx_, cy_ = state.cx + 0.9 * state.size, state.cy + 0.8 * state.size

        def half_plane(x0, y0, x1, y1):
            return (px - x0) * (y1 - y0) - (py - y0) * (x1 - x0)

        s1 = half_plane(ax, ay, bx, by)
        s2 = half_plane(bx, by, cx_, cy_)
        s3 = half_plane(cx_, cy_, ax, ay)
        return (s1 >= 0) & (s2 >= 0) & (s3 >= 0)
    raise SceneConfigError(f"unknown shape {state.shape!r}")


def _shape_reach(state: ShapeState) -> float:
    """Maximum distance from center to any foreground pixel."""
    if state.shape == "rectangle":
        return state.size * max(1.0, state.aspect)
    return state.size


def _hsv_color(hue: float, sat: float = 0.85, val: float = 0.95) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue % 1.0, sat, val)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


# --- Scene configuration and generation ---------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    """One scene's generation parameters.

    appearance_drift scales every per-frame change at once (motion, scale,
    hue), so drift 0 yields a perfectly static target. full_timeline forces
    the single occurrence to cover every frame.
    """

    frame_size: tuple[int, int] = (64, 64)     # (height, width)
    num_frames: int = 60
    num_occurrences: int = 3                   # dataset mean is ~2.9
    distractor_count: int = 2
    target_shape: str = "disk"
    appearance_drift: float = 0.3
    target_scale: float = 0.22                 # base size as fraction of min dim
    seed: int = 0
    fps: int = 6
    full_timeline: bool = False

    def __post_init__(self) -> None:
        h, w = self.frame_size
        if h < 8 or w < 8:
            raise SceneConfigError(f"frame size too small: {self.frame_size}")
        if self.num_frames < 1:
            raise SceneConfigError("num_frames must be >= 1")
        if self.num_occurrences < 1:
            raise SceneConfigError("num_occurrences must be >= 1")
        if self.target_shape not in SHAPES:
            raise SceneConfigError(f"unknown target shape {self.target_shape!r}")
        if not 0.0 <= self.appearance_drift <= 1.0:
            raise SceneConfigError("appearance_drift must lie in [0, 1]")
        if not 0.02 <= self.target_scale <= 0.49:
            raise SceneConfigError("target_scale must lie in [0.02, 0.49]")
        # every occurrence needs >= 1 frame, separated by >= 1 empty frame
        if 2 * self.num_occurrences - 1 > self.num_frames:
            raise SceneConfigError(
                f"{self.num_occurrences} disjoint occurrences cannot fit in "
                f"{self.num_frames} frames"
            )
        if self.full_timeline and self.num_occurrences != 1:
            raise SceneConfigError("full_timeline requires exactly one occurrence")


@dataclass
class Trajectory:
    """Linear + sinusoidal motion with sinusoidal scale drift."""

    x0: float
    y0: float
    vx: float
    vy: float
    amp_x: float
    amp_y: float
    omega: float
    phase: float
    base_size: float
    scale_amp: float
    scale_omega: float
    scale_phase: float
    base_hue: float
    hue_amp: float
    aspect: float
    shape: str

    def state_at(self, step: int, height: int, width: int) -> ShapeState:
        t = float(step)
        size = self.base_size * (1.0 + self.scale_amp * math.sin(self.scale_omega * t + self.scale_phase))
        size = max(1.5, size)
        cx = self.x0 + self.vx * t + self.amp_x * math.sin(self.omega * t + self.phase)
        cy = self.y0 + self.vy * t + self.amp_y * math.sin(self.omega * t + self.phase + 1.3)
        probe = ShapeState(self.shape, cx, cy, size, self.aspect, (0, 0, 0))
        reach = _shape_reach(probe) + 1.0
        cx = min(max(cx, reach), width - reach) if width > 2 * reach else width / 2.0
        cy = min(max(cy, reach), height - reach) if height > 2 * reach else height / 2.0
        hue = self.base_hue + self.hue_amp * math.sin(0.37 * t + self.phase)
        return ShapeState(self.shape, cx, cy, size, self.aspect, _hsv_color(hue))


@dataclass
class SceneRecord:
    config: SceneConfig
    frames: list[np.ndarray]
    query_frame: np.ndarray
    query_mask: RleMask
    gt: ResponseSet
    target_states: list[list[ShapeState]]       # per occurrence, per frame
    query_state: Optional[ShapeState]           # None when loaded from disk
    video_id: str = "scene"


def _sample_timeline(rng: np.random.Generator, cfg: SceneConfig) -> list[tuple[int, int]]:
    """Disjoint [start, end] occurrence spans separated by >= 1 empty frame."""
    n = cfg.num_occurrences
    if cfg.full_timeline:
        return [(0, cfg.num_frames - 1)]
    slack = cfg.num_frames - (2 * n - 1)
    # distribute slack over n lengths and n+1 gaps (outer gaps may be zero)
    parts = 2 * n + 1
    extra = rng.multinomial(slack, [1.0 / parts] * parts)
    spans = []
    cursor = int(extra[0])  # leading gap
    for i in range(n):
        length = 1 + int(extra[1 + 2 * i])
        spans.append((cursor, cursor + length - 1))
        inner_gap = 1 + int(extra[2 + 2 * i]) if i < n - 1 else 0
        cursor += length + inner_gap
    return spans


def _sample_trajectory(
    rng: np.random.Generator,
    cfg: SceneConfig,
    shape: str,
    base_hue: float,
    scale_factor: float = 1.0,
) -> Trajectory:
    h, w = cfg.frame_size
    min_dim = min(h, w)
    base_size = max(2.0, cfg.target_scale * min_dim * scale_factor)
    margin = base_size * 1.6 + 1.0
    drift = cfg.appearance_drift
    return Trajectory(
        x0=float(rng.uniform(margin, max(margin + 1e-6, w - margin))),
        y0=float(rng.uniform(margin, max(margin + 1e-6, h - margin))),
        vx=float(rng.uniform(-0.035, 0.035)) * min_dim * drift,
        vy=float(rng.uniform(-0.035, 0.035)) * min_dim * drift,
        amp_x=float(rng.uniform(0.0, 0.1)) * min_dim * drift,
        amp_y=float(rng.uniform(0.0, 0.1)) * min_dim * drift,
        omega=float(rng.uniform(0.2, 0.8)),
        phase=float(rng.uniform(0.0, 2 * math.pi)),
        base_size=base_size,
        scale_amp=0.35 * drift,
        scale_omega=float(rng.uniform(0.1, 0.5)),
        scale_phase=float(rng.uniform(0.0, 2 * math.pi)),
        base_hue=base_hue,
        hue_amp=0.06 * drift,
        aspect=float(rng.uniform(0.6, 1.0)),
        shape=shape,
    )


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth low-frequency color field from a 4x4 random grid."""
    grid = rng.uniform(30, 110, size=(4, 4, 3))
    gy = np.linspace(0, 3, height)
    gx = np.linspace(0, 3, width)
    y0 = np.floor(gy).astype(int).clip(0, 2)
    x0 = np.floor(gx).astype(int).clip(0, 2)
    fy = (gy - y0)[:, None, None]
    fx = (gx - x0)[None, :, None]
    tl = grid[y0][:, x0]
    tr = grid[y0][:, x0 + 1]
    bl = grid[y0 + 1][:, x0]
    br = grid[y0 + 1][:, x0 + 1]
    mix = tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx
    return np.rint(mix).astype(np.uint8)


def _paint(image: np.ndarray, mask: np.ndarray, color: tuple[int, int, int]) -> None:
    image[mask] = np.array(color, dtype=np.uint8)


def generate_scene(cfg: SceneConfig, video_id: str = "scene") -> SceneRecord:
    """Render one scene deterministically from its config and seed."""
    h, w = cfg.frame_size
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    spans = _sample_timeline(rng, cfg)
    target_hue = float(rng.uniform(0.0, 1.0))
    occurrence_trajectories = [
        _sample_trajectory(rng, cfg, cfg.target_shape, target_hue) for _ in spans
    ]
    distractors = []
    for _ in range(cfg.distractor_count):
        hue = target_hue + float(rng.choice((-1.0, 1.0))) * float(rng.uniform(0.12, 0.45))
        scale_factor = float(rng.uniform(0.6, 1.4))
        distractors.append(_sample_trajectory(rng, cfg, cfg.target_shape, hue, scale_factor))

    background = _background(rng, h, w)

    frames: list[np.ndarray] = []
    occ_masklets: list[Masklet] = []
    target_states: list[list[ShapeState]] = []
    span_lookup = {}
    for occ_idx, (start, end) in enumerate(spans):
        for t in range(start, end + 1):
            span_lookup[t] = occ_idx
        target_states.append([])

    occ_masks: dict[int, list[RleMask]] = {i: [] for i in range(len(spans))}
    for t in range(cfg.num_frames):
        frame = background.copy()
        for d in distractors:
            st = d.state_at(t, h, w)
            _paint(frame, rasterize_shape(st, h, w), st.color)
        if t in span_lookup:
            occ_idx = span_lookup[t]
            start = spans[occ_idx][0]
            st = occurrence_trajectories[occ_idx].state_at(t - start, h, w)
            fg = rasterize_shape(st, h, w)
            _paint(frame, fg, st.color)
            occ_masks[occ_idx].append(rle_encode(fg.astype(np.uint8)))
            target_states[occ_idx].append(st)
        frames.append(frame)

    for occ_idx, (start, end) in enumerate(spans):
        occ_masklets.append(Masklet(start, end, tuple(occ_masks[occ_idx])))

    # the query lives outside the video: its own background stream and pose
    qrng = np.random.default_rng(np.random.PCG64(mix_seed(cfg.seed, _QUERY_SALT)))
    query_traj = _sample_trajectory(qrng, cfg, cfg.target_shape, target_hue)
    qstate = query_traj.state_at(0, h, w)
    query = _background(qrng, h, w)
    qmask_grid = rasterize_shape(qstate, h, w)
    _paint(query, qmask_grid, qstate.color)

    return SceneRecord(
        config=cfg,
        frames=frames,
        query_frame=query,
        query_mask=rle_encode(qmask_grid.astype(np.uint8)),
        gt=ResponseSet(video_id, tuple(occ_masklets)),
        target_states=target_states,
        query_state=qstate,
        video_id=video_id,
    )


# --- Dataset generation --------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    """Per-scene sampling ranges for generate_dataset (all bounds inclusive)."""

    frame_sizes: tuple[tuple[int, int], ...] = ((64, 64),)
    num_frames: tuple[int, int] = (48, 96)
    num_occurrences: tuple[int, int] = (1, 5)
    distractor_count: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = SHAPES
    appearance_drift: tuple[float, float] = (0.0, 0.6)
    target_scale: tuple[float, float] = (0.12, 0.30)
    fps: int = 6

    def sample_scene(self, scene_seed: int) -> SceneConfig:
        rng = np.random.default_rng(np.random.PCG64(mix_seed(scene_seed, _SAMPLER_SALT)))
        frame_size = self.frame_sizes[int(rng.integers(0, len(self.frame_sizes)))]
        num_frames = int(rng.integers(self.num_frames[0], self.num_frames[1] + 1))
        max_occ = min(self.num_occurrences[1], (num_frames + 1) // 2)
        num_occ = int(rng.integers(self.num_occurrences[0], max(self.num_occurrences[0], max_occ) + 1))
        num_occ = max(1, min(num_occ, (num_frames + 1) // 2))
        return SceneConfig(
            frame_size=tuple(frame_size),
            num_frames=num_frames,
            num_occurrences=num_occ,
            distractor_count=int(rng.integers(self.distractor_count[0], self.distractor_count[1] + 1)),
            target_shape=self.shapes[int(rng.integers(0, len(self.shapes)))],
            appearance_drift=float(rng.uniform(*self.appearance_drift)),
            target_scale=float(rng.uniform(*self.target_scale)),
            seed=scene_seed,
            fps=self.fps,
        )


def scene_gt_dict(record: SceneRecord) -> dict:
    h, w = record.config.frame_size
    obj = annotation_to_dict(record.gt, h, w)
    obj["query_mask"] = record.query_mask.to_runs_csv()
    obj["num_frames"] = record.config.num_frames
    obj["fps"] = record.config.fps
    return obj


def _write_scene(out_dir: Path, scene_id: str, record: SceneRecord) -> dict:
    scene_dir = out_dir / "scenes" / scene_id
    frames_dir = scene_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    frame_paths = []
    for t, frame in enumerate(record.frames):
        rel = f"scenes/{scene_id}/frames/{t:04d}.ppm"
        write_ppm(out_dir / rel, frame)
        frame_paths.append(rel)
    query_rel = f"scenes/{scene_id}/query.ppm"
    write_ppm(out_dir / query_rel, record.query_frame)
    gt_rel = f"scenes/{scene_id}/gt.json"
    with open(out_dir / gt_rel, "w") as fh:
        json.dump(scene_gt_dict(record), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    h, w = record.config.frame_size
    return {
        "id": scene_id,
        "seed": record.config.seed,
        "height": h,
        "width": w,
        "num_frames": record.config.num_frames,
        "fps": record.config.fps,
        "frames": frame_paths,
        "query": query_rel,
        "gt": gt_rel,
    }


def _dataset_files(manifest: dict) -> list[str]:
    files: list[str] = []
    for scene in manifest["scenes"]:
        files.extend(scene["frames"])
        files.append(scene["query"])
        files.append(scene["gt"])
    return sorted(files)


def compute_digest(root: str | Path, files: Iterable[str]) -> str:
    """sha256 over sorted relative paths and their bytes."""
    root = Path(root)
    digest = hashlib.sha256()
    for rel in sorted(files):
        digest.update(rel.encode("utf-8"))
        digest.update(b"\0")
        digest.update((root / rel).read_bytes())
    return digest.hexdigest()


def _build_scene(args: tuple[int, int, DatasetConfig, str]) -> dict:
    index, master_seed, dist_cfg, out_dir = args
    scene_seed = mix_seed(master_seed, index)
    scene_id = f"scene_{index:04d}"
    cfg = dist_cfg.sample_scene(scene_seed)
    record = generate_scene(cfg, video_id=scene_id)
    return _write_scene(Path(out_dir), scene_id, record)


def generate_dataset(
    n_scenes: int,
    dist_cfg: DatasetConfig,
    seed: int,
    out_dir: str | Path,
    jobs: int = 1,
) -> dict:
    """Generate n_scenes scenes plus a digest-carrying manifest; returns it."""
    if n_scenes < 1:
        raise SceneConfigError("n_scenes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(i, seed, dist_cfg, str(out)) for i in range(n_scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_build_scene, work))
    else:
        entries = [_build_scene(item) for item in work]
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "config": asdict(dist_cfg),
        "scenes": entries,
    }
    manifest["digest"] = compute_digest(out, _dataset_files(manifest))
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    with open(path) as fh:
        return json.load(fh)


def load_scene_gt(dataset_dir: str | Path, scene_entry: dict) -> tuple[ResponseSet, int, int, RleMask]:
    """gt annotation plus the query mask for one manifest scene entry."""
    with open(Path(dataset_dir) / scene_entry["gt"]) as fh:
        obj = json.load(fh)
    response, h, w = annotation_from_dict(obj)
    qmask = RleMask.from_runs_csv(obj["query_mask"], h, w)
    return response, h, w, qmask


def load_scene_record(dataset_dir: str | Path, scene_entry: dict) -> SceneRecord:
    """Rehydrate a scene from disk (for training/inference on stored data).

    Trajectory states are not persisted, so the returned record carries the
    rendered frames, query, and annotations only.
    """
    root = Path(dataset_dir)
    response, h, w, qmask = load_scene_gt(root, scene_entry)
    frames = [read_ppm(root / rel) for rel in scene_entry["frames"]]
    cfg = SceneConfig(
        frame_size=(h, w),
        num_frames=len(frames),
        num_occurrences=max(1, len(response.occurrences)),
        seed=scene_entry.get("seed", 0),
        fps=scene_entry.get("fps", 6),
    )
    return SceneRecord(
        config=cfg,
        frames=frames,
        query_frame=read_ppm(root / scene_entry["query"]),
        query_mask=qmask,
        gt=response,
        target_states=[],
        query_state=None,
        video_id=scene_entry["id"],
    )


# --- Statistics ----------------------------------------------------------------


def _histogram(values: Sequence[float], bins: int = 10) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"count": 0, "bin_edges": [], "counts": [], "mean": None, "min": None, "max": None}
    counts, edges = np.histogram(arr, bins=bins)
    return {
        "count": int(arr.size),
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def compute_stats(dataset_dir: str | Path, bins: int = 10) -> dict:
    """Dataset distributions: lengths, occurrences, areas, motion statistics."""
    from .masks import mask_iou  # local import keeps module load light

    manifest = load_manifest(dataset_dir)
    video_lengths = []
    response_lengths = []
    occurrence_counts = []
    mask_areas = []
    relative_areas = []
    adjacent_ious = []
    for entry in manifest["scenes"]:
        response, _, _, _ = load_scene_gt(dataset_dir, entry)
        fps = entry.get("fps", 6)
        video_lengths.append(entry["num_frames"] / fps)
        occurrence_counts.append(len(response.occurrences))
        first_area = None
        for occ in response.occurrences:
            response_lengths.append(len(occ.masks) / fps)
            for mask in occ.masks:
                area = mask.area()
                mask_areas.append(float(area))
                if first_area is None:
                    first_area = float(area) if area else None
                if first_area:
                    relative_areas.append(area / first_area)
            for a, b in zip(occ.masks, occ.masks[1:]):
                adjacent_ious.append(mask_iou(a, b))
    return {
        "scenes": len(manifest["scenes"]),
        "video_length_sec": _histogram(video_lengths, bins),
        "response_length_sec": _histogram(response_lengths, bins),
        "occurrence_count": _histogram(occurrence_counts, bins),
        "mask_area": _histogram(mask_areas, bins),
        "relative_area": _histogram(relative_areas, bins),
        "adjacent_frame_iou": _histogram(adjacent_ious, bins),
    }


# --- Validation ----------------------------------------------------------------


def validate_manifest(dataset_dir: str | Path) -> list[str]:
    """All invariant violations in a dataset directory; empty list when clean.

    Unreadable or missing files are reported as violations, never raised.
    """
    root = Path(dataset_dir)
    violations: list[str] = []
    try:
        manifest = load_manifest(root)
    except (OSError, json.JSONDecodeError) as exc:
        return [f"manifest: unreadable ({exc})"]
    if manifest.get("format") != MANIFEST_FORMAT:
        violations.append(f"manifest: unknown format {manifest.get('format')!r}")
    scenes = manifest.get("scenes", [])
    missing_files = False
    for entry in scenes:
        sid = entry.get("id", "<missing id>")
        for rel in [*entry.get("frames", []), entry.get("query"), entry.get("gt")]:
            if rel is None or not (root / rel).is_file():
                violations.append(f"{sid}: missing file {rel}")
                missing_files = True
    if not missing_files and "digest" in manifest:
        try:
            actual = compute_digest(root, _dataset_files(manifest))
            if actual != manifest["digest"]:
                violations.append("manifest: digest does not match dataset content")
        except OSError as exc:
            violations.append(f"manifest: digest recompute failed ({exc})")

    for entry in scenes:
        sid = entry.get("id", "<missing id>")
        gt_rel = entry.get("gt")
        if gt_rel is None or not (root / gt_rel).is_file():
            continue
        try:
            with open(root / gt_rel) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            violations.append(f"{sid}: gt unreadable ({exc})")
            continue
        try:
            response, h, w = annotation_from_dict(obj)
        except MaskError as exc:
            violations.append(f"{sid}: {exc}")
            continue
        if (h, w) != (entry.get("height"), entry.get("width")):
            violations.append(f"{sid}: gt dimensions {h}x{w} do not match manifest entry")
        if response.occurrences and entry.get("num_frames") is not None:
            last = response.occurrences[-1].end_frame
            if last >= entry["num_frames"]:
                violations.append(f"{sid}: occurrence ends at frame {last} beyond video length")
        try:
            qmask = RleMask.from_runs_csv(obj["query_mask"], h, w)
            if qmask.area() == 0:
                violations.append(f"{sid}: query mask is empty")
        except (KeyError, MaskError) as exc:
            violations.append(f"{sid}: bad query mask ({exc})")

        query_rel = entry.get("query")
        if query_rel and (root / query_rel).is_file():
            try:
                qbytes = (root / query_rel).read_bytes()
                for frame_rel in entry.get("frames", []):
                    if (root / frame_rel).is_file() and (root / frame_rel).read_bytes() == qbytes:
                        violations.append(f"{sid}: query frame identical to video frame {frame_rel}")
                        break
            except OSError as exc:
                violations.append(f"{sid}: query unreadable ({exc})")
        for frame_rel in entry.get("frames", []):
            path = root / frame_rel
            if not path.is_file():
                continue
            try:
                img = read_ppm(path)
            except ValueError as exc:
                violations.append(f"{sid}: {exc}")
                continue
            if img.shape[:2] != (entry.get("height"), entry.get("width")):
                violations.append(f"{sid}: frame {frame_rel} has shape {img.shape[:2]}")
    return violations

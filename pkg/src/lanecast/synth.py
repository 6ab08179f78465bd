"""Synthetic highway clips for desk-scale experiments.

A textured road with dashed lane markings scrolls downwards (ego-motion) while
a rectangular rear-view "vehicle" either keeps its lane or drifts across a
marking with a raised-cosine lateral profile. The annotated event frame is the
frame at which the vehicle's bottom-centre sits exactly on the marking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .dataset import Clip, ManeuverClass, VehicleTrack, write_annotations
from .roi import Contour

LANE_WIDTH = 80.0
INDICATOR_LEAD = 25  # frames before the event at which the blinker starts
INDICATOR_PERIOD = 8


@dataclass(frozen=True)
class SceneConfig:
    height: int = 160
    width: int = 240
    lanes: int = 3


@dataclass
class Trajectory:
    """Per-frame bottom-centre position and size of the synthetic vehicle."""

    x: np.ndarray
    bottom: np.ndarray
    width: float
    height: float
    markings: np.ndarray
    event_frame: int | None
    scenario: ManeuverClass

    def contour(self, t: int) -> Contour:
        cx = self.x[t]
        top = self.bottom[t] - self.height
        return Contour(
            np.array(
                [
                    [cx - self.width / 2, top],
                    [cx + self.width / 2, top],
                    [cx + self.width / 2, self.bottom[t]],
                    [cx - self.width / 2, self.bottom[t]],
                ]
            ),
            t,
        )


def clip_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed derived from a base seed and arbitrary labels."""
    text = ":".join(str(p) for p in (seed, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def _coverage(lo: float, hi: float, start: int, stop: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1), start <= i < stop, covered by [lo, hi)."""
    edges = np.arange(start, stop, dtype=np.float64)
    return np.clip(np.minimum(hi, edges + 1) - np.maximum(lo, edges), 0.0, 1.0)


def _paint_rect(img: np.ndarray, x0, x1, y0, y1, color) -> None:
    """Anti-aliased axis-aligned rectangle, blended by pixel coverage."""
    _, H, W = img.shape
    r0, r1 = max(int(np.floor(y0)), 0), min(int(np.ceil(y1)), H)
    c0, c1 = max(int(np.floor(x0)), 0), min(int(np.ceil(x1)), W)
    if r0 >= r1 or c0 >= c1:
        return
    cov = np.outer(_coverage(y0, y1, r0, r1), _coverage(x0, x1, c0, c1)).astype(img.dtype)
    color = np.asarray(color, dtype=img.dtype).reshape(3, 1, 1)
    region = img[:, r0:r1, c0:c1]
    region *= 1 - cov
    region += cov * color


def plan_trajectory(scenario: ManeuverClass, length: int, rng: np.random.Generator, scene: SceneConfig) -> Trajectory:
    markings = np.arange(1, scene.lanes) * LANE_WIDTH + (scene.width - scene.lanes * LANE_WIDTH) / 2
    centres = np.concatenate([[markings[0] - LANE_WIDTH / 2], markings + LANE_WIDTH / 2])
    if scenario == ManeuverClass.LLC:
        lane = int(rng.integers(1, scene.lanes))
        target = lane - 1
    elif scenario == ManeuverClass.RLC:
        lane = int(rng.integers(0, scene.lanes - 1))
        target = lane + 1
    else:
        lane = int(rng.integers(0, scene.lanes))
        target = lane
    width = float(rng.uniform(30, 40))
    height = float(rng.uniform(22, 30))
    base_bottom = float(rng.uniform(0.55, 0.75) * scene.height)
    t = np.arange(length, dtype=np.float64)
    bottom = base_bottom + rng.uniform(-3, 3) * np.sin(2 * np.pi * t / rng.uniform(40, 90) + rng.uniform(0, 6.3))

    x = np.full(length, centres[lane])
    event = None
    if scenario == ManeuverClass.NLC:
        x = x + 0.8 * np.sin(2 * np.pi * t / rng.uniform(30, 60) + rng.uniform(0, 6.3))
    else:
        half = int(rng.integers(20, 31))  # half of the maneuver duration, frames
        event = int(rng.integers(max(length - 20, half + 1), length - 11))
        tau = np.clip((t - (event - half)) / (2 * half), 0.0, 1.0)
        profile = (1 - np.cos(np.pi * tau)) / 2
        x = centres[lane] + (centres[target] - centres[lane]) * profile
    return Trajectory(x, bottom, width, height, markings, event, scenario)


def _road_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.random((h, w)), 1.5, mode="wrap")
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    return 0.40 + 0.06 * noise


def render_frames(traj: Trajectory, rng: np.random.Generator, scene: SceneConfig) -> list[np.ndarray]:
    H, W = scene.height, scene.width
    length = len(traj.x)
    period = 2 * H
    texture = _road_texture(rng, period, W)
    speed = float(rng.uniform(3.0, 6.0))  # px per frame of ego-motion
    dash, gap = 18.0, 22.0
    body = rng.uniform(0.1, 0.9, size=3)
    phase0 = int(rng.integers(0, INDICATOR_PERIOD))
    side = {ManeuverClass.LLC: -1, ManeuverClass.RLC: 1}.get(traj.scenario, 0)

    frames = []
    for t in range(length):
        offset = speed * t
        rows = (np.arange(H) - int(round(offset))) % period
        img = np.repeat(texture[rows][None], 3, axis=0).astype(np.float32)
        for mx in traj.markings:
            start = -((gap + dash) - (offset % (gap + dash)))
            y = start
            while y < H:
                _paint_rect(img, mx - 2, mx + 2, y, y + dash, (0.92, 0.92, 0.92))
                y += gap + dash
        for edge in (traj.markings[0] - LANE_WIDTH + 4, traj.markings[-1] + LANE_WIDTH - 4):
            _paint_rect(img, edge - 2, edge + 2, 0, H, (0.9, 0.9, 0.85))

        cx, bottom = traj.x[t], traj.bottom[t]
        x0, x1 = cx - traj.width / 2, cx + traj.width / 2
        y0 = bottom - traj.height
        _paint_rect(img, x0, x1, y0, bottom, body)
        _paint_rect(img, x0 + 4, x1 - 4, y0 + 2, y0 + traj.height * 0.4, (0.12, 0.14, 0.18))
        lamp_y0, lamp_y1 = bottom - traj.height * 0.45, bottom - traj.height * 0.25
        for lx in (x0 + 1, x1 - 6):
            _paint_rect(img, lx, lx + 5, lamp_y0, lamp_y1, (0.75, 0.05, 0.05))
        if side and traj.event_frame is not None:
            active = traj.event_frame - INDICATOR_LEAD <= t <= traj.event_frame + 10
            if active and ((t + phase0) % INDICATOR_PERIOD) < INDICATOR_PERIOD // 2:
                lx = x0 - 1 if side < 0 else x1 - 6
                _paint_rect(img, lx, lx + 7, lamp_y0 - 3, lamp_y1 + 3, (1.0, 0.65, 0.0))
        frames.append(np.clip(img, 0.0, 1.0))
    return frames


def _track(traj: Trajectory, clip_id: str) -> VehicleTrack:
    length = len(traj.x)
    events = [] if traj.event_frame is None else [(traj.event_frame, traj.scenario)]
    return VehicleTrack(
        track_id="0",
        frames=list(range(length)),
        contours=[traj.contour(t) for t in range(length)],
        events=events,
        clip_id=clip_id,
    )


def _plan(scenario, length: int, seed: int, scene: SceneConfig):
    if isinstance(scenario, str):
        scenario = ManeuverClass.parse(scenario)
    if length < 60:
        raise ValueError("synthetic clips need at least 60 frames")
    rng = np.random.default_rng(seed)
    return scenario, rng, plan_trajectory(scenario, length, rng, scene)


def synthetic_track(
    scenario: ManeuverClass | str, length: int = 80, seed: int = 0, scene: SceneConfig = SceneConfig(), clip_id: str | None = None
) -> VehicleTrack:
    """The annotated track ``synthesize_clip`` would produce, without rendering pixels."""
    scenario, _, traj = _plan(scenario, length, seed, scene)
    return _track(traj, clip_id or f"{scenario.name.lower()}-{seed}")


def synthesize_clip(
    scenario: ManeuverClass | str,
    length: int = 80,
    seed: int = 0,
    scene: SceneConfig = SceneConfig(),
    clip_id: str | None = None,
) -> tuple[list[np.ndarray], VehicleTrack]:
    """Render one clip and the annotated track of its vehicle."""
    scenario, rng, traj = _plan(scenario, length, seed, scene)
    frames = render_frames(traj, rng, scene)
    return frames, _track(traj, clip_id or f"{scenario.name.lower()}-{seed}")


@dataclass(frozen=True)
class SyntheticConfig:
    clips_per_class: int = 100
    length: int = 60
    seed: int = 0
    height: int = 160
    width: int = 240


def synthetic_clips(config: SyntheticConfig) -> Iterator[Clip]:
    """Lazily render ``clips_per_class`` clips of every class, interleaved by class."""
    scene = SceneConfig(config.height, config.width)
    for i in range(config.clips_per_class):
        for cls in ManeuverClass:
            clip_id = f"{cls.name.lower()}-{i:04d}"
            frames, track = synthesize_clip(cls, config.length, clip_seed(config.seed, clip_id), scene, clip_id)
            yield Clip(clip_id, [track], frames.__getitem__)


def write_clip(directory, frames: list[np.ndarray], track: VehicleTrack) -> Path:
    """PNG frame directory plus annotation CSVs."""
    from PIL import Image

    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        arr = (np.transpose(f, (1, 2, 0)) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(directory / "frames" / f"{i:06d}.png")
    write_annotations(directory, [track])
    return directory

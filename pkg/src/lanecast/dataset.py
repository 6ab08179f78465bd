"""Annotated tracks to labelled observation windows.

A window of ``N`` frames ending at ``end_frame`` is labelled with the maneuver
whose event happens exactly ``tte`` frames later. Windows far from every event
(outside a guard band) are labelled NLC; anything in between is ambiguous and
skipped.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import AnnotationError, ConfigurationError, ContractError, CoverageError
from .flow import FlowField, dense_flow, flow_to_channels, to_gray
from .roi import Contour, RoiSpec, extract_roi, NORM_MEAN, NORM_STD

log = logging.getLogger(__name__)

DEFAULT_GUARD = 10
DEFAULT_FLOW_PAIRS = 10
DEFAULT_APPEARANCE_FRAMES = 5
PREVENTION_FRAME_RATE = 10.0


class ManeuverClass(IntEnum):
    NLC = 0
    LLC = 1
    RLC = 2

    @classmethod
    def parse(cls, text: str) -> "ManeuverClass":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown maneuver class {text!r}") from None


@dataclass
class VehicleTrack:
    track_id: str
    frames: list[int]
    contours: list[Contour]
    events: list[tuple[int, ManeuverClass]] = field(default_factory=list)
    clip_id: str = ""
    frame_rate: float = PREVENTION_FRAME_RATE

    def __post_init__(self):
        self.validate()
        self._index = {f: i for i, f in enumerate(self.frames)}

    def validate(self) -> None:
        if len(self.frames) != len(self.contours):
            raise AnnotationError(f"track {self.track_id}: {len(self.frames)} frames but {len(self.contours)} contours")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise AnnotationError(f"track {self.track_id}: frame indices must be strictly increasing")
        for frame, cls in self.events:
            if cls == ManeuverClass.NLC:
                raise AnnotationError(f"track {self.track_id}: events must be LLC or RLC")
            if not self.frames or not self.frames[0] <= frame <= self.frames[-1]:
                raise AnnotationError(f"track {self.track_id}: event frame {frame} outside track range")

    @property
    def key(self) -> tuple[str, str]:
        return (self.clip_id, self.track_id)

    def __len__(self) -> int:
        return len(self.frames)

    def contour_at(self, frame: int) -> Contour:
        try:
            return self.contours[self._index[frame]]
        except KeyError:
            raise CoverageError(f"track {self.track_id} has no frame {frame}") from None

    def covers(self, start: int, end: int) -> bool:
        if start not in self._index or end not in self._index:
            return False
        return self._index[end] - self._index[start] == end - start


@dataclass(frozen=True)
class WindowSpec:
    observation_horizon: int
    tte: int

    def __post_init__(self):
        if self.observation_horizon < 1:
            raise ValueError("observation horizon must be >= 1")
        if self.tte < 0:
            raise ValueError("tte must be >= 0")

    def span(self, end_frame: int) -> tuple[int, int]:
        return end_frame - self.observation_horizon + 1, end_frame


@dataclass(frozen=True)
class WindowRef:
    """A labelled window before its tensors are materialized."""

    clip_id: str
    track_id: str
    end_frame: int
    spec: WindowSpec
    label: ManeuverClass


@dataclass
class SampleWindow:
    appearance: np.ndarray  # T_s x 3 x S x S, standardized
    flow: np.ndarray  # 2L x S x S in [-1, 1]
    label: ManeuverClass
    provenance: tuple  # (clip_id, track_id, end_frame, WindowSpec, RoiSpec)

    @property
    def track_key(self) -> tuple[str, str]:
        return self.provenance[0], self.provenance[1]


# ---------------------------------------------------------------- labelling


def label_window(
    track: VehicleTrack, end_frame: int, spec: WindowSpec, guard: int = DEFAULT_GUARD
) -> Optional[ManeuverClass]:
    """Label of the window ending at ``end_frame``, or ``None`` if ambiguous."""
    start, end = spec.span(end_frame)
    if not track.covers(start, end):
        raise CoverageError(f"track {track.track_id} does not cover frames {start}..{end}")
    target = end + spec.tte
    for frame, cls in track.events:
        if frame == target:
            return cls
    lo, hi = start - guard, target + guard
    if any(lo <= frame <= hi for frame, _ in track.events):
        return None
    return ManeuverClass.NLC


def enumerate_windows(
    tracks: Iterable[VehicleTrack],
    spec: WindowSpec,
    stride: int,
    guard: int = DEFAULT_GUARD,
    max_nlc_per_track: Optional[int] = None,
    nlc_from_event_tracks: bool = True,
) -> list[WindowRef]:
    """All labelable windows: one per event plus NLC windows on a stride grid.

    ``max_nlc_per_track`` keeps the last ``k`` NLC windows of each track;
    ``nlc_from_event_tracks=False`` draws NLC windows only from tracks without
    events. Both exist to build class-balanced synthetic sets.
    """
    if stride < 1:
        raise ContractError("stride must be >= 1")
    refs: list[WindowRef] = []
    for track in tracks:
        if len(track) < spec.observation_horizon:
            continue
        found: list[WindowRef] = []
        for frame, cls in sorted(track.events):
            end = frame - spec.tte
            start, _ = spec.span(end)
            if track.covers(start, end) and label_window(track, end, spec, guard) == cls:
                found.append(WindowRef(track.clip_id, track.track_id, end, spec, cls))
        if nlc_from_event_tracks or not track.events:
            nlc = []
            first = track.frames[0] + spec.observation_horizon - 1
            for end in range(first, track.frames[-1] + 1, stride):
                start, _ = spec.span(end)
                if track.covers(start, end) and label_window(track, end, spec, guard) == ManeuverClass.NLC:
                    nlc.append(WindowRef(track.clip_id, track.track_id, end, spec, ManeuverClass.NLC))
            if max_nlc_per_track is not None:
                nlc = nlc[len(nlc) - max_nlc_per_track :] if max_nlc_per_track > 0 else []
            found.extend(nlc)
        refs.extend(sorted(found, key=lambda r: r.end_frame))
    return refs


# ---------------------------------------------------------------- materialization


@dataclass
class Clip:
    """Frames plus the tracks annotated on them. ``load_frame(i)`` returns 3 x H x W in [0, 1]."""

    clip_id: str
    tracks: list[VehicleTrack]
    load_frame: Callable[[int], np.ndarray]


def appearance_indices(start: int, end: int, count: int) -> np.ndarray:
    return np.round(np.linspace(start, end, count)).astype(int)


def flow_pair_starts(start: int, end: int, count: int) -> np.ndarray:
    """Frames ``t`` of the pairs ``(t, t+1)`` uniformly subsampled inside the window."""
    pairs = end - start
    if pairs < 1:
        raise ContractError("a window needs at least two frames for a flow pair")
    return start + np.round(np.linspace(0, pairs - 1, count)).astype(int)


@dataclass
class SampleBuilder:
    """Materializes WindowRefs into tensors, caching ROIs and flows per track."""

    roi: RoiSpec
    appearance_frames: int = DEFAULT_APPEARANCE_FRAMES
    flow_pairs: int = DEFAULT_FLOW_PAIRS
    flow_options: dict = field(default_factory=dict)
    dtype: type = np.float16

    def samples_for_clip(self, clip: Clip, refs: Sequence[WindowRef]) -> list[SampleWindow]:
        tracks = {t.track_id: t for t in clip.tracks}

        @lru_cache(maxsize=None)
        def frame(i: int) -> np.ndarray:
            return clip.load_frame(i)

        @lru_cache(maxsize=None)
        def roi_at(track_id: str, i: int) -> np.ndarray:
            return extract_roi(frame(i), tracks[track_id].contour_at(i), self.roi)

        @lru_cache(maxsize=None)
        def gray_at(track_id: str, i: int) -> np.ndarray:
            return to_gray(roi_at(track_id, i))

        @lru_cache(maxsize=None)
        def flow_at(track_id: str, i: int) -> FlowField:
            return dense_flow(gray_at(track_id, i), gray_at(track_id, i + 1), **self.flow_options)

        out = []
        for ref in refs:
            start, end = ref.spec.span(ref.end_frame)
            app = np.stack(
                [roi_at(ref.track_id, int(i)) for i in appearance_indices(start, end, self.appearance_frames)]
            )
            flows = [flow_at(ref.track_id, int(t)) for t in flow_pair_starts(start, end, self.flow_pairs)]
            out.append(
                SampleWindow(
                    appearance=((app - NORM_MEAN) / NORM_STD).astype(self.dtype),
                    flow=flow_to_channels(flows).astype(self.dtype),
                    label=ref.label,
                    provenance=(ref.clip_id, ref.track_id, ref.end_frame, ref.spec, self.roi),
                )
            )
        return out


def enumerate_samples(
    clips: Iterable[Clip],
    spec: WindowSpec,
    roi: RoiSpec,
    stride: int,
    builder: Optional[SampleBuilder] = None,
    **window_options,
) -> Iterator[SampleWindow]:
    builder = builder or SampleBuilder(roi)
    for clip in clips:
        refs = enumerate_windows(clip.tracks, spec, stride, **window_options)
        if refs:
            yield from builder.samples_for_clip(clip, refs)


# ---------------------------------------------------------------- splits & batches


def split_train_val(samples: Sequence, fraction: float = 0.85, seed: int = 0, key=None) -> tuple[list, list]:
    """Split by source track so no track lands on both sides."""
    if not samples:
        raise ContractError("cannot split an empty sample list")
    if not 0 < fraction < 1:
        raise ContractError("fraction must lie strictly between 0 and 1")
    key = key or (lambda s: s.track_key)
    groups: dict = {}
    for s in samples:
        groups.setdefault(key(s), []).append(s)
    if len(groups) == 1:
        warnings.warn("only one track available; validation split is empty", UserWarning, stacklevel=2)
        return list(samples), []
    order = sorted(groups)
    perm = np.random.default_rng(seed).permutation(len(order))
    target = fraction * len(samples)
    train_keys, count = set(), 0
    for idx in perm:
        k = order[idx]
        n = len(groups[k])
        if abs(count + n - target) <= abs(count - target):
            train_keys.add(k)
            count += n
    train = [s for s in samples if key(s) in train_keys]
    val = [s for s in samples if key(s) not in train_keys]
    return train, val


def class_counts(labels: Iterable[int]) -> np.ndarray:
    return np.bincount(np.asarray(list(labels), dtype=int), minlength=len(ManeuverClass))


def class_sampling_weights(counts: Sequence[int]) -> np.ndarray:
    """Per-class weights proportional to 1/count, normalized to sum 1."""
    counts = np.asarray(counts, dtype=float)
    for cls, n in zip(ManeuverClass, counts):
        if n <= 0:
            raise ConfigurationError(f"class {cls.name} has no samples")
    w = 1.0 / counts
    return w / w.sum()


def balanced_batches(
    train: Sequence[SampleWindow],
    batch_size: int,
    seed: int = 0,
    num_batches: Optional[int] = None,
    labels: Optional[Sequence[int]] = None,
) -> Iterator[list]:
    """Batches drawn with replacement, each sample weighted by 1/count of its class.

    One epoch is ``len(train) // batch_size`` batches unless ``num_batches`` is given.
    """
    if batch_size < 3:
        raise ContractError("batch_size must be >= 3")
    labels = np.asarray(labels if labels is not None else [int(s.label) for s in train])
    counts = class_counts(labels)
    # per-sample weight 1/count makes every class equally likely per draw
    p = class_sampling_weights(counts)[labels]
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    n = num_batches if num_batches is not None else max(1, len(train) // batch_size)
    for _ in range(n):
        idx = rng.choice(len(train), size=batch_size, replace=True, p=p)
        yield [train[i] for i in idx]


# ---------------------------------------------------------------- annotation files


CONTOUR_FILE = "contours.csv"
EVENT_FILE = "events.csv"


def _fmt(values: Iterable[float]) -> str:
    return ";".join(f"{v:.4f}".rstrip("0").rstrip(".") for v in values)


def write_annotations(directory, tracks: Sequence[VehicleTrack]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / CONTOUR_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "frame", "xs", "ys"])
        for t in tracks:
            for frame, c in zip(t.frames, t.contours):
                w.writerow([t.track_id, frame, _fmt(c.vertices[:, 0]), _fmt(c.vertices[:, 1])])
    with open(directory / EVENT_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "frame", "class"])
        for t in tracks:
            for frame, cls in t.events:
                w.writerow([t.track_id, frame, cls.name])


def _read_rows(path: Path, columns: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != columns:
            raise AnnotationError(f"{path}:1: expected header {','.join(columns)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise AnnotationError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            yield lineno, row


def load_annotations(path, frame_rate: float = PREVENTION_FRAME_RATE) -> list[VehicleTrack]:
    """Read ``contours.csv`` (+ optional sibling ``events.csv``) into validated tracks.

    ``path`` may be a clip directory or the contour file itself. The clip id is
    the directory name.
    """
    path = Path(path)
    contour_path = path / CONTOUR_FILE if path.is_dir() else path
    events_path = contour_path.with_name(EVENT_FILE)
    clip_id = contour_path.parent.name
    if contour_path.stat().st_size == 0:
        warnings.warn(f"{contour_path} is empty", UserWarning, stacklevel=2)
        return []

    frames: dict[str, list[tuple[int, Contour]]] = {}
    for lineno, (tid, frame, xs, ys) in _read_rows(contour_path, ["track_id", "frame", "xs", "ys"]):
        try:
            f = int(frame)
            x = [float(v) for v in xs.split(";")]
            y = [float(v) for v in ys.split(";")]
        except ValueError as exc:
            raise AnnotationError(f"{contour_path}:{lineno}: {exc}") from None
        if len(x) != len(y):
            raise AnnotationError(f"{contour_path}:{lineno}: {len(x)} x values but {len(y)} y values")
        try:
            contour = Contour(np.column_stack([x, y]), f)
        except ValueError as exc:
            raise AnnotationError(f"{contour_path}:{lineno}: {exc}") from None
        frames.setdefault(tid.strip(), []).append((f, contour))

    events: dict[str, list[tuple[int, ManeuverClass]]] = {}
    if events_path.exists() and events_path.stat().st_size > 0:
        for lineno, (tid, frame, cls) in _read_rows(events_path, ["track_id", "frame", "class"]):
            try:
                events.setdefault(tid.strip(), []).append((int(frame), ManeuverClass.parse(cls)))
            except ValueError as exc:
                raise AnnotationError(f"{events_path}:{lineno}: {exc}") from None
    unknown = set(events) - set(frames)
    if unknown:
        raise AnnotationError(f"{events_path}: events reference unknown tracks {sorted(unknown)}")

    if not frames:
        warnings.warn(f"{contour_path} contains no tracks", UserWarning, stacklevel=2)
    tracks = []
    for tid, rows in frames.items():
        tracks.append(
            VehicleTrack(
                track_id=tid,
                frames=[f for f, _ in rows],
                contours=[c for _, c in rows],
                events=sorted(events.get(tid, [])),
                clip_id=clip_id,
                frame_rate=frame_rate,
            )
        )
    return tracks


# ---------------------------------------------------------------- statistics


def dataset_statistics(tracks: Iterable[VehicleTrack]) -> dict[str, dict[str, float]]:
    """Per-class sequence counts and mean track length (frames).

    A track counts once for each distinct event class it carries, or as NLC when
    it has none.
    """
    lengths: dict[ManeuverClass, list[int]] = {c: [] for c in ManeuverClass}
    for t in tracks:
        classes = {cls for _, cls in t.events} or {ManeuverClass.NLC}
        for cls in classes:
            lengths[cls].append(len(t))
    return {
        c.name: {"sequences": len(v), "avg_frames": float(np.mean(v)) if v else 0.0}
        for c, v in lengths.items()
    }

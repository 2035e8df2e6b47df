"""Open-vocabulary detection stage: frame scanning, selection, cropping.

Frame indices here count positions in the episode's frame list. Dataset mode
scans the first frame plus every ``frame_stride``-th frame up to
``max_candidates`` and keeps the globally best detection; first-frame mode
(used when relabeling rollouts) queries only frame 0.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .backends import Backend
from .episode import Episode
from .errors import ObjectNotFound
from .geometry import Box, box_area, box_valid, pad_box
from .images import encode_png, letterbox, provenance, write_content_addressed


@dataclass(frozen=True)
class DetectionConfig:
    score_threshold: float = 0.3
    frame_stride: int = 10
    max_candidates: int = 8

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if self.frame_stride < 1 or self.max_candidates < 1:
            raise ValueError("frame_stride and max_candidates must be >= 1")


@dataclass(frozen=True)
class CropConfig:
    pad_fraction: float = 0.1
    resolution: tuple[int, int] = (224, 224)
    fill: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self):
        if self.pad_fraction < 0:
            raise ValueError("pad_fraction must be >= 0")
        if min(self.resolution) < 1:
            raise ValueError("resolution must be positive")


@dataclass(frozen=True)
class Detection:
    phrase: str
    frame_index: int
    bbox: Box
    score: float

    def __post_init__(self):
        if not (self.bbox[0] < self.bbox[2] and self.bbox[1] < self.bbox[3]):
            raise ValueError(f"degenerate detection bbox {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class CropArtifact:
    phrase: str
    image_ref: Path           # stored crop file
    source_bbox: Box          # padded box in source-frame coordinates
    source_frame: int
    resolution: tuple[int, int]
    data: bytes | None = field(default=None, repr=False, compare=False)

    def read_bytes(self) -> bytes:
        return self.data if self.data is not None else Path(self.image_ref).read_bytes()


@dataclass(frozen=True)
class StageRecord:
    stage: str
    outcome: str
    ms: float


@dataclass(frozen=True)
class FrameImage:
    """Raw PNG bytes of one frame plus its provenance."""

    episode_id: str
    frame_index: int
    data: bytes
    width: int
    height: int


def load_frame(
    images_root: str | Path,
    episode: Episode,
    position: int,
    cache: dict[int, "FrameImage"] | None = None,
) -> FrameImage:
    """Load the primary-camera image of the frame at the given list position."""
    if cache is not None and position in cache:
        return cache[position]
    frame = episode.frames[position]
    data = Path(images_root, frame.image_refs[0]).read_bytes()
    with Image.open(io.BytesIO(data)) as img:
        width, height = img.size
    loaded = FrameImage(
        episode_id=episode.id, frame_index=position, data=data, width=width, height=height
    )
    if cache is not None:
        cache[position] = loaded
    return loaded


def candidate_positions(n_frames: int, mode: str, cfg: DetectionConfig) -> list[int]:
    if mode == "first-frame":
        return [0]
    if mode != "dataset":
        raise ValueError(f"unknown detection mode {mode!r}")
    positions = list(range(0, n_frames, cfg.frame_stride))
    return positions[: cfg.max_candidates]


def _better(candidate: Detection, best: Detection | None) -> bool:
    if best is None:
        return True
    if candidate.score != best.score:
        return candidate.score > best.score
    if box_area(candidate.bbox) != box_area(best.bbox):
        return box_area(candidate.bbox) < box_area(best.bbox)
    return candidate.frame_index < best.frame_index


def locate_object(
    episode: Episode,
    phrase: str,
    backend: Backend,
    images_root: str | Path,
    mode: str = "dataset",
    cfg: DetectionConfig | None = None,
    trail: list[StageRecord] | None = None,
    frame_cache: dict[int, FrameImage] | None = None,
) -> Detection:
    """Best detection for the phrase across the candidate frame set.

    Ties break toward higher score, then smaller box area, then earlier frame.
    Raises ObjectNotFound when nothing reaches the score threshold.
    """
    cfg = cfg or DetectionConfig()
    best: Detection | None = None
    for position in candidate_positions(len(episode.frames), mode, cfg):
        frame = load_frame(images_root, episode, position, cache=frame_cache)
        start = time.perf_counter()
        raw = backend.detect(frame.data, [phrase])
        elapsed = (time.perf_counter() - start) * 1000.0
        hits = 0
        for det in raw:
            if det.phrase != phrase or det.score < cfg.score_threshold:
                continue
            if not box_valid(det.bbox, frame.width, frame.height):
                continue
            hits += 1
            candidate = Detection(phrase=phrase, frame_index=position, bbox=det.bbox, score=det.score)
            if _better(candidate, best):
                best = candidate
        if trail is not None:
            trail.append(StageRecord(stage="detect", outcome=f"frame={position} hits={hits}", ms=elapsed))
    if best is None:
        raise ObjectNotFound(f"no detection for {phrase!r} reached threshold {cfg.score_threshold}")
    return best


def crop_region(
    frame: FrameImage,
    bbox: Box,
    cfg: CropConfig,
    out_dir: str | Path,
    phrase: str = "",
    trail: list[StageRecord] | None = None,
) -> CropArtifact:
    """Pad, clamp, letterbox, and store the crop under a content-addressed name.

    The padded source box is recorded in the artifact and inside the PNG
    itself so later stages can reason about where the crop came from.
    """
    if not box_valid(bbox, frame.width, frame.height):
        raise ValueError(f"bbox {bbox} outside frame {frame.width}x{frame.height}")
    start = time.perf_counter()
    padded = pad_box(bbox, cfg.pad_fraction, frame.width, frame.height)
    x0, y0 = math.floor(padded[0]), math.floor(padded[1])
    x1, y1 = math.ceil(padded[2]), math.ceil(padded[3])
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise ValueError(f"bbox {bbox} degenerate after padding and clamping")
    with Image.open(io.BytesIO(frame.data)) as img:
        region = img.convert("RGB").crop((x0, y0, x1, y1))
    boxed = letterbox(region, cfg.resolution, cfg.fill)
    data = encode_png(boxed, provenance(frame.episode_id, frame.frame_index, padded))
    path = write_content_addressed(data, Path(out_dir))
    elapsed = (time.perf_counter() - start) * 1000.0
    if trail is not None:
        trail.append(StageRecord(stage="crop", outcome=f"box={x0},{y0},{x1},{y1}", ms=elapsed))
    return CropArtifact(
        phrase=phrase,
        image_ref=path,
        source_bbox=padded,
        source_frame=frame.frame_index,
        resolution=cfg.resolution,
        data=data,
    )

"""Verification stage and the per-object resolution pipeline.

An object resolves through detect -> crop -> verify. On a mismatch the
verifier's keypoints drive a segmentation fallback (segment -> re-crop ->
re-verify); a detector miss routes the full first frame to the verifier to
obtain keypoints the same way. An object is REJECTED only after both the
detector path and the segmenter path have failed, which is what makes the
combined failure rate the product of the per-path rates when they are
independent.
"""

from __future__ import annotations

import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from .backends import Backend
from .detect import (
    CropArtifact,
    CropConfig,
    Detection,
    DetectionConfig,
    FrameImage,
    StageRecord,
    crop_region,
    load_frame,
    locate_object,
)
from .episode import Episode
from .errors import ObjectNotFound, SegmentEmpty
from .geometry import Box

ACCEPTED_DETECTOR = "ACCEPTED_DETECTOR"
ACCEPTED_SEGMENTER = "ACCEPTED_SEGMENTER"
REJECTED = "REJECTED"
STATUSES = (ACCEPTED_DETECTOR, ACCEPTED_SEGMENTER, REJECTED)


@dataclass(frozen=True)
class VerificationOutcome:
    match: bool
    confidence: float
    keypoints: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.match and self.keypoints is not None:
            raise ValueError("keypoints may only accompany a mismatch")


@dataclass(frozen=True)
class ObjectResolution:
    phrase: str
    status: str
    crop: CropArtifact | None
    trail: tuple[StageRecord, ...]
    bbox: Box | None = None   # accepted unpadded box in frame coordinates

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.crop is None) != (self.status == REJECTED):
            raise ValueError("crop must be present exactly when the object was accepted")
        if not self.trail:
            raise ValueError("resolution trail is empty")
        if self.status == ACCEPTED_SEGMENTER and not any(r.stage == "segment" for r in self.trail):
            raise ValueError("segmenter acceptance without a segment step in the trail")


def verify_crop(
    crop: CropArtifact,
    phrase: str,
    backend: Backend,
    trail: list[StageRecord] | None = None,
) -> VerificationOutcome:
    """Ask the verification backend whether the stored crop shows the phrase."""
    data = crop.read_bytes()
    start = time.perf_counter()
    reply = backend.verify(data, phrase)
    elapsed = (time.perf_counter() - start) * 1000.0
    outcome = VerificationOutcome(match=reply.match, confidence=reply.confidence, keypoints=reply.keypoints)
    if trail is not None:
        trail.append(StageRecord(stage="verify", outcome="match" if outcome.match else "mismatch", ms=elapsed))
    return outcome


def segment_from_keypoints(
    frame: FrameImage,
    keypoints: Sequence[tuple[float, float]],
    backend: Backend,
    trail: list[StageRecord] | None = None,
) -> Box:
    """Tight bbox of the mask the segmentation backend grows from the keypoints."""
    in_frame = [
        (x, y) for x, y in keypoints if 0 <= x < frame.width and 0 <= y < frame.height
    ]
    if not in_frame:
        raise ValueError("no keypoint lies within the frame")
    start = time.perf_counter()
    bbox = backend.segment(frame.data, in_frame)
    elapsed = (time.perf_counter() - start) * 1000.0
    if trail is not None:
        trail.append(
            StageRecord(stage="segment", outcome="empty" if bbox is None else "mask", ms=elapsed)
        )
    if bbox is None:
        raise SegmentEmpty(f"segmentation mask empty for keypoints {list(in_frame)}")
    x0 = max(0.0, bbox[0])
    y0 = max(0.0, bbox[1])
    x1 = min(float(frame.width), bbox[2])
    y1 = min(float(frame.height), bbox[3])
    if not (x0 < x1 and y0 < y1):
        raise SegmentEmpty(f"segmentation bbox {bbox} degenerate after clamping")
    return (x0, y0, x1, y1)


def resolve_object(
    episode: Episode,
    phrase: str,
    backend: Backend,
    images_root: str | Path,
    crops_dir: str | Path,
    detection_cfg: DetectionConfig | None = None,
    crop_cfg: CropConfig | None = None,
    mode: str = "dataset",
) -> ObjectResolution:
    """Run the full per-object pipeline and compose the final resolution.

    StageUnavailable propagates to the caller; every other failure terminates
    in a REJECTED resolution carrying the complete trail.
    """
    detection_cfg = detection_cfg or DetectionConfig()
    crop_cfg = crop_cfg or CropConfig()
    trail: list[StageRecord] = []
    frames: dict[int, FrameImage] = {}

    try:
        detection = locate_object(
            episode, phrase, backend, images_root,
            mode=mode, cfg=detection_cfg, trail=trail, frame_cache=frames,
        )
    except ObjectNotFound:
        detection = None
        trail.append(StageRecord(stage="detect", outcome="not_found", ms=0.0))

    if detection is not None:
        frame = load_frame(images_root, episode, detection.frame_index, cache=frames)
        crop = crop_region(frame, detection.bbox, crop_cfg, crops_dir, phrase, trail)
        outcome = verify_crop(crop, phrase, backend, trail)
        if outcome.match:
            return ObjectResolution(
                phrase=phrase, status=ACCEPTED_DETECTOR, crop=crop, trail=tuple(trail), bbox=detection.bbox
            )
    else:
        # Ask the verifier about the whole first frame purely to obtain
        # keypoints for the segmentation fallback.
        frame = load_frame(images_root, episode, 0, cache=frames)
        full = (0.0, 0.0, float(frame.width), float(frame.height))
        crop = crop_region(frame, full, crop_cfg, crops_dir, phrase, trail)
        outcome = verify_crop(crop, phrase, backend, trail)
        if outcome.match:
            return ObjectResolution(
                phrase=phrase, status=ACCEPTED_DETECTOR, crop=crop, trail=tuple(trail), bbox=full
            )

    if outcome.keypoints:
        try:
            seg_box = segment_from_keypoints(frame, outcome.keypoints, backend, trail)
            seg_crop = crop_region(frame, seg_box, crop_cfg, crops_dir, phrase, trail)
            seg_outcome = verify_crop(seg_crop, phrase, backend, trail)
            if seg_outcome.match:
                return ObjectResolution(
                    phrase=phrase,
                    status=ACCEPTED_SEGMENTER,
                    crop=seg_crop,
                    trail=tuple(trail),
                    bbox=seg_box,
                )
        except (SegmentEmpty, ValueError):
            pass

    return ObjectResolution(phrase=phrase, status=REJECTED, crop=None, trail=tuple(trail))

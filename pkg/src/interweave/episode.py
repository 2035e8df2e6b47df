"""Episode data model, line-delimited manifest IO, and 7D action normalization.

Manifest format (UTF-8, one JSON record per line):

* line 1 — header: ``{"format_version", "euler_convention", "image_root"}``
  plus an optional ``"stats"`` record;
* every other line — one episode:
  ``{"id", "source_dataset", "instruction", "frames", "meta"}`` where each
  frame is ``{"index", "image_refs", "proprio", "action"}``.

Serialization is canonical: keys in the order above, compact separators,
episodes in input order. Reading a canonical file and writing it back is
byte-identical.

Actions and proprioception share one fixed 7D layout: xyz position (meters),
roll-pitch-yaw intrinsic Euler orientation (radians), gripper state in [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
EULER_CONVENTION = "rpy-intrinsic-radians"
ACTION_DIM = 7


def check_vector7(values: Sequence[float], what: str) -> tuple[float, ...]:
    """Single chokepoint for the 7D layout; everything routes through here."""
    vec = tuple(float(v) for v in values)
    if len(vec) != ACTION_DIM:
        raise ManifestError(f"{what} has {len(vec)} entries, expected {ACTION_DIM}")
    if any(math.isnan(v) or math.isinf(v) for v in vec):
        raise ManifestError(f"{what} contains non-finite values")
    return vec


@dataclass(frozen=True)
class Frame:
    """One timestep: observation image refs, 7D proprioception, 7D action."""

    index: int
    image_refs: tuple[str, ...]
    proprio: tuple[float, ...]
    action: tuple[float, ...]

    def __post_init__(self):
        if self.index < 0:
            raise ManifestError(f"frame index {self.index} is negative")
        if not self.image_refs:
            raise ManifestError(f"frame {self.index} has no image refs")
        object.__setattr__(self, "proprio", check_vector7(self.proprio, f"frame {self.index} proprio"))
        object.__setattr__(self, "action", check_vector7(self.action, f"frame {self.index} action"))


@dataclass(frozen=True)
class Episode:
    """One demonstration trajectory with its text instruction."""

    id: str
    source_dataset: str
    instruction: str
    frames: tuple[Frame, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ManifestError("episode id is empty")
        if not self.frames:
            raise ManifestError(f"episode {self.id!r} has no frames")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ManifestError(f"episode {self.id!r} frame indices are not strictly increasing")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension min/max over one source dataset (actions and proprio)."""

    minimum: tuple[float, ...]
    maximum: tuple[float, ...]
    dataset_label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "minimum", check_vector7(self.minimum, "stats minimum"))
        object.__setattr__(self, "maximum", check_vector7(self.maximum, "stats maximum"))
        for i, (lo, hi) in enumerate(zip(self.minimum, self.maximum)):
            if lo > hi:
                raise ManifestError(f"stats dimension {i}: min {lo} > max {hi}")


@dataclass
class DatasetManifest:
    version: str
    episodes: list[Episode]
    image_root: str = "images"
    euler_convention: str = EULER_CONVENTION
    stats: NormalizationStats | None = None

    def episode_by_id(self, episode_id: str) -> Episode:
        for ep in self.episodes:
            if ep.id == episode_id:
                return ep
        raise KeyError(episode_id)


# -- serialization ------------------------------------------------------------

def _frame_record(frame: Frame) -> dict:
    return {
        "index": frame.index,
        "image_refs": list(frame.image_refs),
        "proprio": list(frame.proprio),
        "action": list(frame.action),
    }


def _episode_record(ep: Episode) -> dict:
    return {
        "id": ep.id,
        "source_dataset": ep.source_dataset,
        "instruction": ep.instruction,
        "frames": [_frame_record(f) for f in ep.frames],
        "meta": dict(sorted(ep.meta.items())),
    }


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def parse_episode_record(record: dict) -> Episode:
    try:
        frames = tuple(
            Frame(
                index=int(f["index"]),
                image_refs=tuple(str(r) for r in f["image_refs"]),
                proprio=f["proprio"],
                action=f["action"],
            )
            for f in record["frames"]
        )
        return Episode(
            id=str(record["id"]),
            source_dataset=str(record["source_dataset"]),
            instruction=str(record["instruction"]),
            frames=frames,
            meta={str(k): str(v) for k, v in record.get("meta", {}).items()},
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"episode record missing or malformed field: {exc}") from exc


def read_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Read and fully validate a manifest.

    Image references are resolved against the header's image_root (relative to
    the manifest's directory) and checked for existence when ``check_images``;
    pixel data is never loaded here.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        try:
            header_line = next(fh)
        except StopIteration:
            raise ManifestError("empty manifest: missing header line", line=1) from None
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed header: {exc}", line=1) from exc
        version = str(header.get("format_version", ""))
        if version != FORMAT_VERSION:
            raise ManifestError(f"unrecognized format_version {version!r}", line=1)

        stats = None
        if header.get("stats") is not None:
            s = header["stats"]
            stats = NormalizationStats(
                minimum=s["min"], maximum=s["max"], dataset_label=str(s.get("dataset_label", ""))
            )

        episodes: list[Episode] = []
        seen_ids: set[str] = set()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed episode record: {exc}", line=lineno) from exc
            try:
                episode = parse_episode_record(record)
            except ManifestError as exc:
                raise ManifestError(str(exc), line=lineno) from exc
            if episode.id in seen_ids:
                raise ManifestError(f"duplicate episode id {episode.id!r}", line=lineno)
            seen_ids.add(episode.id)
            episodes.append(episode)

    manifest = DatasetManifest(
        version=version,
        episodes=episodes,
        image_root=str(header.get("image_root", "images")),
        euler_convention=str(header.get("euler_convention", EULER_CONVENTION)),
        stats=stats,
    )
    if check_images:
        root = image_root_dir(path, manifest)
        for ep in manifest.episodes:
            for frame in ep.frames:
                for ref in frame.image_refs:
                    if not (root / ref).is_file():
                        raise ManifestError(
                            f"episode {ep.id!r} frame {frame.index} references missing image {ref!r}"
                        )
    return manifest


def image_root_dir(manifest_path: str | Path, manifest: DatasetManifest) -> Path:
    root = Path(manifest.image_root)
    if root.is_absolute():
        return root
    return Path(manifest_path).parent / root


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the canonical serialization atomically (temp file + rename)."""
    path = Path(path)
    header: dict[str, object] = {
        "format_version": manifest.version,
        "euler_convention": manifest.euler_convention,
        "image_root": manifest.image_root,
    }
    if manifest.stats is not None:
        header["stats"] = {
            "min": list(manifest.stats.minimum),
            "max": list(manifest.stats.maximum),
            "dataset_label": manifest.stats.dataset_label,
        }
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    tmp = Path(tmp_name)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(_dump_line(header) + "\n")
            for ep in manifest.episodes:
                fh.write(_dump_line(_episode_record(ep)) + "\n")
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# -- normalization -------------------------------------------------------------

def compute_norm_stats(episodes: Iterable[Episode], dataset_label: str = "") -> NormalizationStats:
    """Per-dimension min/max over all actions and proprioception vectors.

    Both vector families feed the statistics so either can be normalized with
    one table; degenerate dimensions (min == max) are recorded as-is.
    """
    lo = np.full(ACTION_DIM, np.inf)
    hi = np.full(ACTION_DIM, -np.inf)
    seen = False
    for ep in episodes:
        for frame in ep.frames:
            for vec in (frame.action, frame.proprio):
                arr = np.asarray(vec)
                np.minimum(lo, arr, out=lo)
                np.maximum(hi, arr, out=hi)
            seen = True
    if not seen:
        raise ValueError("cannot compute normalization stats from zero frames")
    return NormalizationStats(minimum=tuple(lo), maximum=tuple(hi), dataset_label=dataset_label)


def normalize_action(
    values: Sequence[float],
    stats: NormalizationStats,
    direction: str = "forward",
    on_clamp: Callable[[int], None] | None = None,
) -> np.ndarray:
    """Map a 7D vector to [-1, 1] per dimension (``forward``) or back (``inverse``).

    Forward input outside [min, max] is clamped with a warning (counted via
    ``on_clamp``); degenerate dimensions map to 0 and invert to their single
    value. forward∘inverse is the identity to within 1e-9.
    """
    vec = np.asarray(check_vector7(values, "normalize input"), dtype=np.float64)
    lo = np.asarray(stats.minimum)
    hi = np.asarray(stats.maximum)
    span = hi - lo
    degenerate = span == 0.0

    if direction == "forward":
        clipped = np.clip(vec, lo, hi)
        n_clamped = int(np.sum(clipped != vec))
        if n_clamped:
            logger.warning("clamped %d out-of-range dimensions during normalization", n_clamped)
            if on_clamp is not None:
                on_clamp(n_clamped)
        out = np.zeros(ACTION_DIM)
        np.divide(2.0 * (clipped - lo), span, out=out, where=~degenerate)
        out[~degenerate] -= 1.0
        return out
    if direction == "inverse":
        if np.any(vec < -1.0 - 1e-12) or np.any(vec > 1.0 + 1e-12):
            raise ValueError("inverse normalization input outside [-1, 1]")
        out = lo + (vec + 1.0) * span / 2.0
        out[degenerate] = lo[degenerate]
        return out
    raise ValueError(f"unknown direction {direction!r}")

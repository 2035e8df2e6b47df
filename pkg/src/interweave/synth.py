"""Deterministic toy-episode generator with ground-truth annotations.

Scenes are flat-colored primitive shapes on a textured background; a gray
"arm" rectangle sweeps in from the bottom edge after frame 0, which makes the
first frame the least occluded. Every object in a scene has a distinct shape
noun, so each instruction phrase names exactly one ground-truth object. That
is all the fidelity the bbox/crop/IoU logic under test needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .episode import (
    DatasetManifest,
    Episode,
    FORMAT_VERSION,
    Frame,
    write_manifest,
)
from .geometry import Box, box_center, iou
from .images import encode_png, provenance
from .lexicon import SHAPE_NOUNS
from .rng import stable_rng

COLOR_RGB = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 200),
    "yellow": (220, 200, 40),
    "purple": (140, 60, 180),
    "orange": (230, 140, 30),
    "cyan": (40, 190, 190),
    "magenta": (200, 40, 160),
    "pink": (240, 150, 190),
    "brown": (130, 90, 50),
    "white": (240, 240, 240),
    "black": (25, 25, 25),
}

# Shapes the renderer knows how to draw; a subset of the lexicon shape nouns.
DRAWABLE_SHAPES = tuple(s for s in SHAPE_NOUNS if s not in ("block", "cube"))

# Color names must stay within the lexicon adjective list so instructions parse.
_PALETTE = tuple(COLOR_RGB)

ARM_COLOR = (70, 70, 70)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 320
    height: int = 240
    frames: int = 20
    distractors: int = 2
    min_object_px: int = 24
    max_object_px: int = 64
    layout_margin: int = 6
    layout_retries: int = 80

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.distractors < 1:
            raise ValueError("scenes need at least one distractor")
        if 2 + self.distractors > len(DRAWABLE_SHAPES):
            raise ValueError("not enough distinct shapes for the requested object count")


@dataclass(frozen=True)
class SceneObject:
    category: str            # the shape noun; unique within a scene
    color: str
    shape: str
    bbox: Box
    centroid: tuple[float, float]


@dataclass(frozen=True)
class SyntheticScene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]   # [target, destination, distractors...]
    distractor_count: int
    seed: int

    @property
    def target(self) -> SceneObject:
        return self.objects[0]

    @property
    def destination(self) -> SceneObject:
        return self.objects[1]

    def instruction(self) -> str:
        t, d = self.target, self.destination
        return f"put the {t.color} {t.shape} on the {d.color} {d.shape}"


def _place_boxes(rng: np.random.Generator, count: int, cfg: SceneConfig) -> list[Box]:
    boxes: list[Box] = []
    margin = cfg.layout_margin
    for _ in range(count):
        for attempt in range(cfg.layout_retries):
            w = int(rng.integers(cfg.min_object_px, cfg.max_object_px + 1))
            h = int(rng.integers(cfg.min_object_px, cfg.max_object_px + 1))
            max_x0 = cfg.width - w - margin
            max_y0 = cfg.height - h - margin
            if max_x0 < margin or max_y0 < margin:
                continue  # object does not fit the canvas; counts as a retry
            x0 = int(rng.integers(margin, max_x0 + 1))
            y0 = int(rng.integers(margin, max_y0 + 1))
            candidate = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            expanded = (candidate[0] - margin, candidate[1] - margin, candidate[2] + margin, candidate[3] + margin)
            if all(iou(expanded, b) == 0.0 for b in boxes):
                boxes.append(candidate)
                break
        else:
            raise ValueError("unsatisfiable scene layout after bounded retries")
    return boxes


def generate_scene(episode_seed: int, cfg: SceneConfig) -> SyntheticScene:
    rng = np.random.default_rng(episode_seed)
    n_objects = 2 + cfg.distractors
    shapes = [str(s) for s in rng.choice(DRAWABLE_SHAPES, size=n_objects, replace=False)]
    colors = [_PALETTE[i] for i in rng.integers(0, len(_PALETTE), size=n_objects)]
    boxes = _place_boxes(rng, n_objects, cfg)
    objects = tuple(
        SceneObject(category=shape, color=color, shape=shape, bbox=box, centroid=box_center(box))
        for shape, color, box in zip(shapes, colors, boxes)
    )
    return SyntheticScene(
        width=cfg.width,
        height=cfg.height,
        objects=objects,
        distractor_count=cfg.distractors,
        seed=episode_seed,
    )


def _draw_shape(draw: ImageDraw.ImageDraw, obj: SceneObject) -> None:
    x0, y0, x1, y1 = obj.bbox
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rgb = COLOR_RGB[obj.color]
    if obj.shape == "circle":
        draw.ellipse(obj.bbox, fill=rgb)
    elif obj.shape == "square":
        draw.rectangle(obj.bbox, fill=rgb)
    elif obj.shape == "triangle":
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=rgb)
    elif obj.shape == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=rgb)
    elif obj.shape == "star":
        outer = [(cx, y0), (x1, y1 - (y1 - y0) * 0.2), (x0, y1 - (y1 - y0) * 0.2)]
        inner = [(cx, y1), (x0, y0 + (y1 - y0) * 0.3), (x1, y0 + (y1 - y0) * 0.3)]
        draw.polygon(outer, fill=rgb)
        draw.polygon(inner, fill=rgb)
    elif obj.shape == "pentagon":
        draw.polygon(
            [(cx, y0), (x1, cy - (cy - y0) * 0.2), (cx + (x1 - cx) * 0.6, y1), (cx - (x1 - cx) * 0.6, y1), (x0, cy - (cy - y0) * 0.2)],
            fill=rgb,
        )
    elif obj.shape == "hexagon":
        third = (x1 - x0) / 3
        draw.polygon(
            [(x0 + third, y0), (x1 - third, y0), (x1, cy), (x1 - third, y1), (x0 + third, y1), (x0, cy)],
            fill=rgb,
        )
    elif obj.shape == "cross":
        third_x = (x1 - x0) / 3
        third_y = (y1 - y0) / 3
        draw.rectangle((x0 + third_x, y0, x1 - third_x, y1), fill=rgb)
        draw.rectangle((x0, y0 + third_y, x1, y1 - third_y), fill=rgb)
    elif obj.shape == "ring":
        width = max(3, int((x1 - x0) / 5))
        draw.ellipse(obj.bbox, outline=rgb, width=width)
    else:
        draw.rectangle(obj.bbox, fill=rgb)


def _background(rng: np.random.Generator, cfg: SceneConfig) -> Image.Image:
    """Low-contrast 8px block noise; compresses well and is obviously textured."""
    bw = (cfg.width + 7) // 8
    bh = (cfg.height + 7) // 8
    blocks = rng.integers(84, 116, size=(bh, bw, 3), dtype=np.uint8)
    noise = np.kron(blocks, np.ones((8, 8, 1), dtype=np.uint8))[: cfg.height, : cfg.width]
    return Image.fromarray(noise, "RGB")


def render_base(scene: SyntheticScene, cfg: SceneConfig) -> Image.Image:
    rng = np.random.default_rng(scene.seed + 1)
    img = _background(rng, cfg)
    draw = ImageDraw.Draw(img)
    for obj in scene.objects:
        _draw_shape(draw, obj)
    return img


def render_frame(base: Image.Image, scene: SyntheticScene, t: int, total_frames: int) -> Image.Image:
    """Frame t of the episode; the arm occludes progressively for t >= 1."""
    frame = base.copy()
    if t > 0 and total_frames > 1:
        reach = t / (total_frames - 1)
        arm_h = int(scene.height * 0.55 * reach)
        if arm_h > 0:
            cx = scene.width // 2
            draw = ImageDraw.Draw(frame)
            draw.rectangle((cx - 18, scene.height - arm_h, cx + 18, scene.height), fill=ARM_COLOR)
    return frame


def _spline(rng: np.random.Generator, frames: int, lows: np.ndarray, highs: np.ndarray) -> np.ndarray:
    """Smooth random trajectory: cubic smoothstep between control points,
    clamped to the declared per-dimension ranges."""
    knots = 4
    control = rng.uniform(lows, highs, size=(knots, len(lows)))
    out = np.empty((frames, len(lows)))
    for t in range(frames):
        u = 0.0 if frames == 1 else t / (frames - 1)
        s = u * (knots - 1)
        i = min(int(s), knots - 2)
        local = s - i
        w = local * local * (3 - 2 * local)
        out[t] = control[i] * (1 - w) + control[i + 1] * w
    return np.clip(out, lows, highs)


_RANGE_LOW = np.array([-0.5, -0.5, -0.5, -np.pi, -np.pi, -np.pi, 0.0])
_RANGE_HIGH = np.array([0.5, 0.5, 0.5, np.pi, np.pi, np.pi, 1.0])


def generate_episode_set(
    count: int,
    cfg: SceneConfig,
    seed: int,
    out_dir: str | Path,
    source_dataset: str = "synthetic",
) -> tuple[DatasetManifest, Path]:
    """Render ``count`` episodes under ``out_dir`` and return the manifest
    plus the path of the ground-truth sidecar.

    Layout: ``manifest.jsonl``, ``truth.jsonl``, ``images/<episode>/frame_<t>.png``.
    Fully deterministic in (count, cfg, seed): rerunning produces byte-identical
    trees.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    episodes = []
    truth_path = out_dir / "truth.jsonl"
    with truth_path.open("w", encoding="utf-8") as truth:
        for index in range(count):
            episode_id = f"ep{index:06d}"
            rng = stable_rng(seed, "episode", index)
            scene = generate_scene(int(rng.integers(0, 2**63)), cfg)
            base = render_base(scene, cfg)

            ep_dir = images_dir / episode_id
            ep_dir.mkdir(exist_ok=True)
            refs = []
            for t in range(cfg.frames):
                frame_img = render_frame(base, scene, t, cfg.frames)
                data = encode_png(frame_img, provenance(episode_id, t))
                ref = f"{episode_id}/frame_{t:03d}.png"
                (images_dir / ref).write_bytes(data)
                refs.append(ref)

            proprio = _spline(rng, cfg.frames, _RANGE_LOW, _RANGE_HIGH)
            action = _spline(rng, cfg.frames, _RANGE_LOW, _RANGE_HIGH)
            frames = tuple(
                Frame(index=t, image_refs=(refs[t],), proprio=tuple(proprio[t]), action=tuple(action[t]))
                for t in range(cfg.frames)
            )
            episodes.append(
                Episode(
                    id=episode_id,
                    source_dataset=source_dataset,
                    instruction=scene.instruction(),
                    frames=frames,
                    meta={"distractors": str(cfg.distractors)},
                )
            )

            objects = [
                {"category": o.category, "bbox": list(o.bbox), "centroid": list(o.centroid)}
                for o in scene.objects
            ]
            for t in range(cfg.frames):
                truth.write(
                    json.dumps(
                        {"episode_id": episode_id, "frame": t, "objects": objects},
                        separators=(",", ":"),
                    )
                    + "\n"
                )

    manifest = DatasetManifest(version=FORMAT_VERSION, episodes=episodes, image_root="images")
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest, truth_path


@dataclass(frozen=True)
class TruthObject:
    category: str
    bbox: Box
    centroid: tuple[float, float]


class TruthIndex:
    """In-memory view of a ground-truth sidecar keyed by (episode, frame)."""

    def __init__(self, records: dict[tuple[str, int], tuple[TruthObject, ...]]):
        self._records = records

    @classmethod
    def load(cls, path: str | Path) -> "TruthIndex":
        records: dict[tuple[str, int], tuple[TruthObject, ...]] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                objs = tuple(
                    TruthObject(
                        category=o["category"],
                        bbox=tuple(float(v) for v in o["bbox"]),
                        centroid=tuple(float(v) for v in o["centroid"]),
                    )
                    for o in rec["objects"]
                )
                records[(rec["episode_id"], int(rec["frame"]))] = objs
        return cls(records)

    def objects(self, episode_id: str, frame: int) -> tuple[TruthObject, ...]:
        try:
            return self._records[(episode_id, frame)]
        except KeyError:
            raise KeyError(f"no ground truth for episode {episode_id!r} frame {frame}") from None

    def find(self, episode_id: str, frame: int, category: str) -> TruthObject | None:
        for obj in self.objects(episode_id, frame):
            if obj.category == category:
                return obj
        return None

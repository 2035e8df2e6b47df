"""Web-image augmentation: mixing pool images into instruction image slots.

The pool is a directory tree ``<root>/<category>/<image files>`` indexed once
and cached in a sidecar file; the cache is rebuilt whenever the tree changes.
Draws are pure functions of (policy seed, draw key) so a choice never depends
on worker scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .errors import AugmentUnavailable
from .lexicon import DEFAULT_LEXICON, Lexicon, naive_singular
from .parsing import head_noun, normalize_ws
from .rng import stable_choice_index, stable_uniform

logger = logging.getLogger(__name__)

TASK_ONLY = "task-only"
INTERNET_ONLY = "internet-only"
MIXED = "mixed"
MODES = (TASK_ONLY, INTERNET_ONLY, MIXED)

_INDEX_FILE = ".pool-index.json"
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str = TASK_ONLY
    mix_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown augment mode {self.mode!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")

    @classmethod
    def preset(cls, name: str, seed: int = 0, mix_ratio: float = 0.5) -> "AugmentPolicy":
        """The three ablation presets by name."""
        key = normalize_ws(name.lower()).replace(" ", "-")
        if key in ("task-specific-only", TASK_ONLY):
            return cls(mode=TASK_ONLY, seed=seed)
        if key == INTERNET_ONLY:
            return cls(mode=INTERNET_ONLY, seed=seed)
        if key == MIXED:
            return cls(mode=MIXED, mix_ratio=mix_ratio, seed=seed)
        raise ValueError(f"unknown augment preset {name!r}")


def normalize_category(text: str) -> str:
    return naive_singular(normalize_ws(text).lower())


class WebImagePool:
    """Read-only index over a category-per-directory image tree."""

    def __init__(self, root: str | Path, validate: bool = True):
        self.root = Path(root)
        if not self.root.is_dir():
            raise AugmentUnavailable(f"pool root {self.root} is not a directory")
        self.index = self._load_or_build(validate)

    def _signature(self) -> str:
        entries = []
        for path in sorted(self.root.glob("*/*")):
            if path.suffix.lower() in _IMAGE_SUFFIXES and path.is_file():
                stat = path.stat()
                entries.append(f"{path.relative_to(self.root)}:{stat.st_size}:{stat.st_mtime_ns}")
        return hashlib.sha256("\n".join(entries).encode("utf-8")).hexdigest()

    def _load_or_build(self, validate: bool) -> dict[str, list[str]]:
        signature = self._signature()
        cache_path = self.root / _INDEX_FILE
        if cache_path.is_file():
            try:
                cached = json.loads(cache_path.read_text(encoding="utf-8"))
                if cached.get("signature") == signature:
                    return {k: list(v) for k, v in cached["index"].items()}
            except (json.JSONDecodeError, KeyError):
                logger.warning("pool index cache unreadable; rebuilding")
        index: dict[str, list[str]] = {}
        for path in sorted(self.root.glob("*/*")):
            if path.suffix.lower() not in _IMAGE_SUFFIXES or not path.is_file():
                continue
            if validate:
                try:
                    with Image.open(path) as img:
                        img.verify()
                except (UnidentifiedImageError, OSError) as exc:
                    logger.warning("skipping undecodable pool image %s: %s", path, exc)
                    continue
            category = normalize_category(path.parent.name)
            index.setdefault(category, []).append(str(path.relative_to(self.root)))
        try:
            cache_path.write_text(
                json.dumps({"signature": signature, "index": index}, sort_keys=True), encoding="utf-8"
            )
        except OSError as exc:
            logger.warning("could not cache pool index: %s", exc)
        return index

    def bucket(self, phrase: str, lexicon: Lexicon = DEFAULT_LEXICON) -> tuple[str, list[str]] | None:
        """Fallback chain: exact normalized phrase, then head noun."""
        exact = normalize_category(phrase)
        if self.index.get(exact):
            return exact, self.index[exact]
        noun = head_noun(phrase, lexicon)
        if noun is not None:
            key = normalize_category(noun)
            if self.index.get(key):
                logger.debug("pool fallback %r -> %r", phrase, key)
                return key, self.index[key]
        logger.debug("pool has no bucket for %r", phrase)
        return None


def choose_instruction_image(
    phrase: str,
    crop_ref: str | Path | None,
    pool: WebImagePool | None,
    policy: AugmentPolicy,
    draw_key: str,
) -> tuple[Path, str]:
    """Pick the image that fills this instruction slot.

    Returns (absolute path, source tag) with source one of ``crop``/``web``.
    Mixed mode draws a web image with probability ``mix_ratio``; either mode
    falls back to the other source when its own is unavailable, and raises
    AugmentUnavailable when nothing is left.
    """
    bucket = pool.bucket(phrase) if pool is not None else None

    def pick_web() -> tuple[Path, str]:
        category, files = bucket
        choice = files[stable_choice_index(len(files), policy.seed, draw_key, "pick")]
        return pool.root / choice, "web"

    def pick_crop() -> tuple[Path, str]:
        return Path(crop_ref), "crop"

    if policy.mode == TASK_ONLY:
        if crop_ref is None:
            raise AugmentUnavailable(f"no crop available for {phrase!r}")
        return pick_crop()
    if policy.mode == INTERNET_ONLY:
        if bucket is not None:
            return pick_web()
        if crop_ref is not None:
            logger.debug("empty pool bucket for %r; falling back to crop", phrase)
            return pick_crop()
        raise AugmentUnavailable(f"no pool image and no crop for {phrase!r}")
    # mixed
    want_web = stable_uniform(policy.seed, draw_key, "mix") < policy.mix_ratio
    if want_web and bucket is not None:
        return pick_web()
    if crop_ref is not None:
        return pick_crop()
    if bucket is not None:
        return pick_web()
    raise AugmentUnavailable(f"no pool image and no crop for {phrase!r}")

"""PNG handling: provenance text chunks, letterbox resize, content addressing.

Frames and crops travel through the pipeline (and over the wire, base64
encoded) as raw PNG bytes. Provenance rides along in tEXt chunks under
``iw:``-prefixed keys, which downstream stages and the seeded mock backends
read back without decoding pixel data.
"""

from __future__ import annotations

import hashlib
import io
import json
import uuid
from pathlib import Path

from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .geometry import Box

META_PREFIX = "iw:"
KEY_EPISODE = META_PREFIX + "episode"
KEY_FRAME = META_PREFIX + "frame"
KEY_BOX = META_PREFIX + "source_box"


def encode_png(image: Image.Image, meta: dict[str, object] | None = None) -> bytes:
    """Serialize the image to PNG with provenance text chunks."""
    info = PngInfo()
    for key, value in (meta or {}).items():
        if not key.startswith(META_PREFIX):
            key = META_PREFIX + key
        info.add_text(key, json.dumps(value))
    buf = io.BytesIO()
    image.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def read_png_header(data: bytes) -> tuple[dict[str, object], tuple[int, int]]:
    """Provenance chunks and image size from PNG bytes.

    Our text chunks precede the pixel data, so opening the header is enough;
    pixel data is never decoded (``.text`` would force a full decode).
    """
    with Image.open(io.BytesIO(data)) as img:
        size = img.size
        raw = {k: v for k, v in img.info.items() if isinstance(v, str)}
    meta: dict[str, object] = {}
    for key, value in raw.items():
        if key.startswith(META_PREFIX):
            meta[key[len(META_PREFIX):]] = json.loads(value)
    return meta, size


def read_png_meta(data: bytes) -> dict[str, object]:
    """Read provenance chunks from PNG bytes. Pixel data is not decoded."""
    return read_png_header(data)[0]


def provenance(episode_id: str, frame_index: int, source_box: Box | None = None) -> dict[str, object]:
    meta: dict[str, object] = {"episode": episode_id, "frame": frame_index}
    if source_box is not None:
        meta["source_box"] = list(source_box)
    return meta


def letterbox(image: Image.Image, resolution: tuple[int, int], fill: tuple[int, int, int]) -> Image.Image:
    """Resize preserving aspect ratio, centered on a fill-colored canvas."""
    target_w, target_h = resolution
    scale = min(target_w / image.width, target_h / image.height)
    new_w = max(1, round(image.width * scale))
    new_h = max(1, round(image.height * scale))
    resized = image.resize((new_w, new_h), Image.BILINEAR)
    canvas = Image.new("RGB", (target_w, target_h), fill)
    canvas.paste(resized, ((target_w - new_w) // 2, (target_h - new_h) // 2))
    return canvas


def content_address(data: bytes) -> str:
    """Hex digest used as the storage filename of an artifact."""
    return hashlib.sha256(data).hexdigest()[:32]


def write_content_addressed(data: bytes, directory: Path, suffix: str = ".png") -> Path:
    """Store bytes under their content hash. Re-writing the same content is a no-op."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / (content_address(data) + suffix)
    if not path.exists():
        # Unique temp name so concurrent workers storing identical content
        # cannot interleave writes; the final rename is atomic.
        tmp = directory / f".{uuid.uuid4().hex}.tmp"
        tmp.write_bytes(data)
        tmp.replace(path)
    return path

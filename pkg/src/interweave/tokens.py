"""Interleaved token sequences with <BOI>/<EOI> image-span separators.

An image segment expands to ``<BOI> <image>_i ... <image>_{i+P-1} <EOI>`` with
1-based ordinals that keep counting across spans, so the second image of a
P=256 sequence starts at ``<image>_257``. Image tokens are positional
placeholders: the artifact pins the layout and leaves patch embedding to the
consuming model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .parsing import Segment

TEXT = "TEXT"
IMAGE = "IMAGE"
BOI = "BOI"
EOI = "EOI"

DEFAULT_PATCH_COUNT = 256
_IMAGE_LITERAL_RE = re.compile(r"^<image>_(\d+)$")


@dataclass(frozen=True)
class TokenizerConfig:
    patch_count: int = DEFAULT_PATCH_COUNT
    text_tokenizer: str = "whitespace"   # "whitespace" | "byte"
    boi_literal: str = "<BOI>"
    eoi_literal: str = "<EOI>"

    def __post_init__(self):
        if self.patch_count < 1:
            raise ValueError("patch_count must be >= 1")
        if self.text_tokenizer not in ("whitespace", "byte"):
            raise ValueError(f"unknown text tokenizer {self.text_tokenizer!r}")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str | None = None           # TEXT: the literal token
    text_id: int | None = None        # TEXT: vocabulary id
    image_ordinal: int | None = None  # IMAGE: 1-based global index

    def __post_init__(self):
        if self.kind == TEXT:
            ok = self.text is not None and self.text_id is not None and self.image_ordinal is None
        elif self.kind == IMAGE:
            ok = self.text is None and self.text_id is None and self.image_ordinal is not None
        elif self.kind in (BOI, EOI):
            ok = self.text is None and self.text_id is None and self.image_ordinal is None
        else:
            ok = False
        if not ok:
            raise ValueError(f"inconsistent payload for token kind {self.kind!r}")


@dataclass(frozen=True)
class InterleavedSequence:
    tokens: tuple[Token, ...]
    segments: tuple[tuple[str, int, int], ...]  # (kind, start, length) spans
    patch_count: int


@dataclass(frozen=True)
class ValidationVerdict:
    ok: bool
    violations: tuple[str, ...] = ()


def _escape_byte(b: int) -> str:
    if 0x21 <= b <= 0x7E and b != 0x5C:  # printable, not backslash
        return chr(b)
    return f"\\x{b:02x}"


def _tokenize_text(text: str, cfg: TokenizerConfig) -> list[str]:
    if cfg.text_tokenizer == "whitespace":
        return text.split()
    return [_escape_byte(b) for b in text.encode("utf-8")]


def assemble_sequence(segments: list[Segment], cfg: TokenizerConfig | None = None) -> InterleavedSequence:
    """Expand a segment list into tokens.

    Total token count is ``P*k + |text tokens| + 2k`` for k image segments.
    Text tokens get vocabulary ids in order of first appearance; a text token
    colliding with a separator or image literal is rejected because it would
    make the canonical rendering ambiguous.
    """
    cfg = cfg or TokenizerConfig()
    if not segments:
        raise ValueError("segment list is empty")
    tokens: list[Token] = []
    spans: list[tuple[str, int, int]] = []
    vocab: dict[str, int] = {}
    ordinal = 0
    for seg in segments:
        start = len(tokens)
        if seg.kind == "text":
            for word in _tokenize_text(seg.text, cfg):
                if word in (cfg.boi_literal, cfg.eoi_literal) or _IMAGE_LITERAL_RE.match(word):
                    raise ValueError(f"text token {word!r} collides with a reserved literal")
                token_id = vocab.setdefault(word, len(vocab))
                tokens.append(Token(kind=TEXT, text=word, text_id=token_id))
            if len(tokens) > start:
                spans.append(("text", start, len(tokens) - start))
        elif seg.kind == "image":
            tokens.append(Token(kind=BOI))
            for _ in range(cfg.patch_count):
                ordinal += 1
                tokens.append(Token(kind=IMAGE, image_ordinal=ordinal))
            tokens.append(Token(kind=EOI))
            spans.append(("image", start, cfg.patch_count + 2))
        else:
            raise ValueError(f"unknown segment kind {seg.kind!r}")
    return InterleavedSequence(tokens=tuple(tokens), segments=tuple(spans), patch_count=cfg.patch_count)


def validate_sequence(seq: InterleavedSequence) -> ValidationVerdict:
    """Check the layout invariants; violations are data, not exceptions."""
    violations: list[str] = []
    open_at: int | None = None
    patches_in_span = 0
    expected_ordinal = 0
    for pos, tok in enumerate(seq.tokens):
        if tok.kind == BOI:
            if open_at is not None:
                violations.append(f"nested separator at position {pos}")
            open_at = pos
            patches_in_span = 0
        elif tok.kind == EOI:
            if open_at is None:
                violations.append(f"unbalanced separator at position {pos}")
            else:
                if patches_in_span != seq.patch_count:
                    violations.append(
                        f"image span at position {open_at} has {patches_in_span} image tokens,"
                        f" expected {seq.patch_count}"
                    )
                open_at = None
        elif tok.kind == IMAGE:
            if open_at is None:
                violations.append(f"image token outside image span at position {pos}")
            patches_in_span += 1
            expected_ordinal += 1
            if tok.image_ordinal != expected_ordinal:
                violations.append(
                    f"image ordinal {tok.image_ordinal} at position {pos}, expected {expected_ordinal}"
                )
        elif tok.kind == TEXT:
            if open_at is not None:
                violations.append(f"text token inside image span at position {pos}")
        else:
            violations.append(f"unknown token kind {tok.kind!r} at position {pos}")
    if open_at is not None:
        violations.append(f"unbalanced separator at position {open_at}")
    return ValidationVerdict(ok=not violations, violations=tuple(violations))


def render_canonical(seq: InterleavedSequence, cfg: TokenizerConfig | None = None) -> str:
    """Single-space-separated surface form; the interchange string embedded in
    output records."""
    cfg = cfg or TokenizerConfig(patch_count=seq.patch_count)
    verdict = validate_sequence(seq)
    if not verdict.ok:
        raise ValueError(f"cannot render invalid sequence: {verdict.violations[0]}")
    out = []
    for tok in seq.tokens:
        if tok.kind == BOI:
            out.append(cfg.boi_literal)
        elif tok.kind == EOI:
            out.append(cfg.eoi_literal)
        elif tok.kind == IMAGE:
            out.append(f"<image>_{tok.image_ordinal}")
        else:
            out.append(tok.text)
    return " ".join(out)


def parse_canonical(text: str, cfg: TokenizerConfig | None = None) -> InterleavedSequence:
    """Inverse of render_canonical (whitespace text tokenizer only)."""
    cfg = cfg or TokenizerConfig()
    tokens: list[Token] = []
    spans: list[tuple[str, int, int]] = []
    vocab: dict[str, int] = {}
    text_start: int | None = None

    def close_text(end: int):
        nonlocal text_start
        if text_start is not None:
            spans.append(("text", text_start, end - text_start))
            text_start = None

    in_image = False
    image_start = 0
    for word in text.split():
        pos = len(tokens)
        if word == cfg.boi_literal:
            close_text(pos)
            in_image = True
            image_start = pos
            tokens.append(Token(kind=BOI))
        elif word == cfg.eoi_literal:
            tokens.append(Token(kind=EOI))
            spans.append(("image", image_start, len(tokens) - image_start))
            in_image = False
        elif in_image and (m := _IMAGE_LITERAL_RE.match(word)):
            tokens.append(Token(kind=IMAGE, image_ordinal=int(m.group(1))))
        else:
            if text_start is None:
                text_start = pos
            tokens.append(Token(kind=TEXT, text=word, text_id=vocab.setdefault(word, len(vocab))))
    close_text(len(tokens))
    return InterleavedSequence(tokens=tuple(tokens), segments=tuple(spans), patch_count=cfg.patch_count)

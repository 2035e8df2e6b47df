"""Key-object extraction and template rendering (pipeline stage 1).

The rule backend runs a small noun-phrase grammar over the bundled lexicon and
exists so the whole pipeline is testable without a language model; the service
backend forwards to ``/v1/parse`` and only enforces the reconstruction
invariant on whatever the remote model returns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any

from .errors import InstructionTooLong, ParseRejected
from .lexicon import DEFAULT_LEXICON, Lexicon

PLACEHOLDER_RE = re.compile(r"\{(\d+)\}")
RULE_WORD_LIMIT = 64
_TRAILING_PUNCT = ".,;:!?"


@dataclass(frozen=True)
class Segment:
    """One piece of a rendered instruction: inline text or an image slot."""

    kind: str                     # "text" | "image"
    text: str | None = None
    image: Any = None             # opaque marker supplied by the caller

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.kind == "text" and not isinstance(self.text, str):
            raise ValueError("text segment requires text")
        if self.kind == "image" and self.image is None:
            raise ValueError("image segment requires a marker")


@dataclass(frozen=True)
class ParsedInstruction:
    """Hole-bearing template plus the extracted key-object phrases.

    Substituting ``phrases`` back into ``template`` reproduces the original
    instruction up to whitespace normalization.
    """

    template: str
    phrases: tuple[str, ...]
    backend: str = "rule"

    def __post_init__(self):
        slots = [int(m.group(1)) for m in PLACEHOLDER_RE.finditer(self.template)]
        if slots != list(range(len(self.phrases))):
            raise ValueError(
                f"template placeholders {slots} do not match {len(self.phrases)} phrases"
            )

    def substitute(self, fillers: list[str] | tuple[str, ...] | None = None) -> str:
        values = list(self.phrases) if fillers is None else list(fillers)
        return normalize_ws(PLACEHOLDER_RE.sub(lambda m: values[int(m.group(1))], self.template))


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class _Word:
    raw: str        # token as it appears, trailing punctuation kept
    core: str       # lowercased, trailing punctuation stripped
    start: int      # offset of raw in the instruction
    core_end: int   # offset just past the core


def _tokenize(text: str) -> list[_Word]:
    words = []
    for m in re.finditer(r"\S+", text):
        raw = m.group(0)
        core = raw.rstrip(_TRAILING_PUNCT)
        words.append(_Word(raw=raw, core=core.lower(), start=m.start(), core_end=m.start() + len(core)))
    return words


def _match_bare(words: list[_Word], i: int, lex: Lexicon) -> int | None:
    """Longest prefix of words[i:] matching adjective* noun+; returns end index."""
    j = i
    while j < len(words) and (words[j].core in lex.adjectives or words[j].core in lex.nouns):
        j += 1
    for end in range(j, i, -1):
        for split in range(i, end):
            if all(w.core in lex.adjectives for w in words[i:split]) and all(
                w.core in lex.nouns for w in words[split:end]
            ):
                return end
    return None


def _match_np(words: list[_Word], i: int, lex: Lexicon) -> int | None:
    """Longest noun phrase starting at i: det? adj* noun+ (pprep adj* noun+)?"""
    j = i
    if j < len(words) and words[j].core in lex.determiners:
        j += 1
    end = _match_bare(words, j, lex)
    if end is None:
        return None
    # Postmodifier attaches only when the preposition is followed by a bare
    # noun phrase; a determiner there signals a separate object instead.
    if end < len(words) and words[end].core in lex.postmodifier_prepositions:
        post_end = _match_bare(words, end + 1, lex)
        if post_end is not None:
            return post_end
    return end


def _scan_phrases(instruction: str, lex: Lexicon) -> list[tuple[int, int]]:
    """Non-overlapping phrase spans ordered by start offset, longest match first."""
    words = _tokenize(instruction)
    spans = []
    i = 0
    while i < len(words):
        end = _match_np(words, i, lex)
        if end is not None:
            spans.append((words[i].start, words[end - 1].core_end))
            i = end
        else:
            i += 1
    return spans


def _template_from_spans(instruction: str, spans: list[tuple[int, int]]) -> str:
    parts = []
    cursor = 0
    for slot, (start, end) in enumerate(spans):
        parts.append(instruction[cursor:start])
        parts.append(f"{{{slot}}}")
        cursor = end
    parts.append(instruction[cursor:])
    return "".join(parts)


def extract_key_objects(
    instruction: str,
    backend: str = "rule",
    lexicon: Lexicon = DEFAULT_LEXICON,
    client: Any = None,
) -> ParsedInstruction:
    """Extract key-object phrases and the hole-bearing template.

    The rule backend is deterministic and rejects instructions over
    ``RULE_WORD_LIMIT`` words (summarizing long instructions is the service
    backend's job). The service backend forwards to ``client.parse`` and
    validates that substituting the returned objects into the returned
    template reconstructs the instruction.
    """
    if not instruction or not instruction.strip():
        raise ValueError("instruction is empty")
    if backend == "rule":
        if len(instruction.split()) > RULE_WORD_LIMIT:
            raise InstructionTooLong(
                f"instruction has more than {RULE_WORD_LIMIT} words; route to the service backend"
            )
        spans = _scan_phrases(instruction, lexicon)
        parsed = ParsedInstruction(
            template=_template_from_spans(instruction, spans),
            phrases=tuple(instruction[a:b] for a, b in spans),
            backend="rule",
        )
    elif backend == "service":
        if client is None:
            raise ValueError("service backend requires a client")
        reply = client.parse(instruction)
        parsed = ParsedInstruction(
            template=str(reply["template"]),
            phrases=tuple(str(p) for p in reply["objects"]),
            backend="service",
        )
    else:
        raise ValueError(f"unknown parse backend {backend!r}")

    if parsed.substitute() != normalize_ws(instruction):
        raise ParseRejected(
            f"substituting phrases into template does not reconstruct the instruction: "
            f"{parsed.substitute()!r} != {normalize_ws(instruction)!r}"
        )
    return parsed


def head_noun(phrase: str, lexicon: Lexicon = DEFAULT_LEXICON) -> str | None:
    """Last noun of the core noun run, skipping any postmodifier."""
    words = _tokenize(phrase)
    i = 0
    if i < len(words) and words[i].core in lexicon.determiners:
        i += 1
    end = _match_bare(words, i, lexicon)
    if end is None:
        return None
    for w in reversed(words[i:end]):
        if w.core in lexicon.nouns:
            return w.core
    return None


def render_template(parsed: ParsedInstruction, fillers: list[Any]) -> list[Segment]:
    """Splice fillers into the template, producing an ordered segment list.

    String fillers merge into the surrounding text; any other filler becomes
    an image segment carrying the filler as its marker.
    """
    if len(fillers) != len(parsed.phrases):
        raise ValueError(f"expected {len(parsed.phrases)} fillers, got {len(fillers)}")
    pieces: list[Segment] = []
    text_parts: list[str] = []

    def flush():
        # Template fragments carry their own whitespace; concatenate raw so
        # punctuation stays attached, then normalize the flushed chunk.
        text = normalize_ws("".join(text_parts))
        text_parts.clear()
        if text:
            pieces.append(Segment(kind="text", text=text))

    cursor = 0
    for m in PLACEHOLDER_RE.finditer(parsed.template):
        text_parts.append(parsed.template[cursor:m.start()])
        filler = fillers[int(m.group(1))]
        if isinstance(filler, str):
            text_parts.append(filler)
        else:
            flush()
            pieces.append(Segment(kind="image", image=filler))
        cursor = m.end()
    text_parts.append(parsed.template[cursor:])
    flush()
    return pieces

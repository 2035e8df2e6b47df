"""Seeded mock model backends driven by the synthetic ground-truth sidecar.

Every stochastic outcome is a pure function of (seed, episode id, phrase,
purpose), so replays are identical regardless of call order, thread
scheduling, or how many times a stage is retried. Failure semantics:

* detect — with probability ``p_detect_fail`` the detector is wrong for this
  object (returns another object's box at score 0.6, or nothing at all);
  otherwise it returns the true box at score 0.9, in every frame.
* verify — matches iff the received crop's source box has IoU >= 0.5 with the
  true object. On mismatch it supplies the true centroid as a keypoint,
  except with probability ``p_verify_fail`` the keypoint lands on another
  object, which poisons the whole segmentation fallback for this object.
* segment — tight bbox of the object containing the first keypoint.

``correlation`` mixes a shared per-object difficulty draw into both failure
decisions: at 1.0 both stages fail on exactly the hard objects, making the
combined failure rate min(p_detect_fail, p_verify_fail) instead of the
independent product.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass

from .backends import Backend, ParseReply, RawDetection, VerifyReply
from .errors import ProtocolError
from .geometry import Box, contains_point, iou
from .images import read_png_header
from .lexicon import DEFAULT_LEXICON, Lexicon
from .parsing import head_noun
from .rng import stable_choice_index, stable_uniform
from .synth import TruthIndex

_SYNTH_INSTRUCTION = re.compile(r"^put (the \w+ \w+) on (the \w+ \w+)$")

TRUE_BOX_SCORE = 0.9
WRONG_BOX_SCORE = 0.6
VERIFY_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class MockBackendConfig:
    p_detect_fail: float = 0.0
    p_verify_fail: float = 0.0
    correlation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_detect_fail", "p_verify_fail", "correlation"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def preset_error_free(seed: int = 0) -> MockBackendConfig:
    return MockBackendConfig(seed=seed)


def preset_independent(seed: int = 0) -> MockBackendConfig:
    """Stage failure rates 17.4% / 22.1% with independent draws; the combined
    failure rate is their product, about 3.85%."""
    return MockBackendConfig(p_detect_fail=0.174, p_verify_fail=0.221, correlation=0.0, seed=seed)


def preset_correlated(seed: int = 0) -> MockBackendConfig:
    """Same stage rates with the correlation tuned so the combined failure
    rate lands at 4.4% instead of the independent product."""
    p1, p2, target = 0.174, 0.221, 0.044
    c = (target - p1 * p2) / (min(p1, p2) - p1 * p2)
    return MockBackendConfig(p_detect_fail=p1, p_verify_fail=p2, correlation=c, seed=seed)


class MockBackend(Backend):
    def __init__(
        self,
        truth: TruthIndex,
        cfg: MockBackendConfig | None = None,
        lexicon: Lexicon = DEFAULT_LEXICON,
    ):
        self._truth = truth
        self._cfg = cfg or MockBackendConfig()
        self._lexicon = lexicon

    # -- seeded failure draws -------------------------------------------------

    def _fails(self, episode_id: str, phrase: str, stage: str, probability: float) -> bool:
        if probability <= 0.0:
            return False
        cfg = self._cfg
        coupled = stable_uniform(cfg.seed, episode_id, phrase, "couple") < cfg.correlation
        key = "shared" if coupled else stage
        return stable_uniform(cfg.seed, episode_id, phrase, key) < probability

    def _detect_fails(self, episode_id: str, phrase: str) -> bool:
        return self._fails(episode_id, phrase, "detect", self._cfg.p_detect_fail)

    def _keypoint_poisoned(self, episode_id: str, phrase: str) -> bool:
        return self._fails(episode_id, phrase, "verify", self._cfg.p_verify_fail)

    # -- image provenance -----------------------------------------------------

    def _locate_request(self, image: bytes) -> tuple[str, int, Box]:
        """Episode id, frame, and source box of a request image; a frame image
        without an explicit source box stands for the whole frame."""
        meta, size = read_png_header(image)
        if "episode" not in meta or "frame" not in meta:
            raise ProtocolError("request image carries no provenance; not a pipeline artifact")
        episode_id = str(meta["episode"])
        frame = int(meta["frame"])
        if "source_box" in meta:
            box = tuple(float(v) for v in meta["source_box"])
        else:
            box = (0.0, 0.0, float(size[0]), float(size[1]))
        return episode_id, frame, box

    def _phrase_object(self, episode_id: str, frame: int, phrase: str):
        category = head_noun(phrase, self._lexicon)
        if category is None:
            return None
        return self._truth.find(episode_id, frame, category)

    def _other_object(self, episode_id: str, frame: int, phrase: str, purpose: str):
        objects = self._truth.objects(episode_id, frame)
        category = head_noun(phrase, self._lexicon)
        others = [o for o in objects if o.category != category]
        if not others:
            return None
        return others[stable_choice_index(len(others), self._cfg.seed, episode_id, phrase, purpose)]

    # -- Backend interface ----------------------------------------------------

    def parse(self, instruction: str) -> ParseReply:
        m = _SYNTH_INSTRUCTION.match(instruction.strip())
        if m:
            return ParseReply(objects=(m.group(1), m.group(2)), template="put {0} on {1}")
        return ParseReply(objects=(), template=instruction)

    def detect(self, image: bytes, phrases: Sequence[str]) -> list[RawDetection]:
        episode_id, frame, _ = self._locate_request(image)
        detections = []
        for phrase in phrases:
            target = self._phrase_object(episode_id, frame, phrase)
            if target is None:
                continue
            if self._detect_fails(episode_id, phrase):
                if stable_uniform(self._cfg.seed, episode_id, phrase, "miss") < 0.5:
                    continue  # detector finds nothing for this phrase
                wrong = self._other_object(episode_id, frame, phrase, "wrong-box")
                if wrong is None:
                    continue
                detections.append(RawDetection(phrase=phrase, bbox=wrong.bbox, score=WRONG_BOX_SCORE))
            else:
                detections.append(RawDetection(phrase=phrase, bbox=target.bbox, score=TRUE_BOX_SCORE))
        return detections

    def verify(self, image: bytes, phrase: str) -> VerifyReply:
        episode_id, frame, source_box = self._locate_request(image)
        target = self._phrase_object(episode_id, frame, phrase)
        if target is None:
            return VerifyReply(match=False, confidence=0.2)
        overlap = iou(source_box, target.bbox)
        if overlap >= VERIFY_IOU_THRESHOLD:
            return VerifyReply(match=True, confidence=round(0.5 + 0.5 * overlap, 6))
        if self._keypoint_poisoned(episode_id, phrase):
            wrong = self._other_object(episode_id, frame, phrase, "wrong-keypoint")
            point = wrong.centroid if wrong is not None else target.centroid
        else:
            point = target.centroid
        return VerifyReply(match=False, confidence=round(0.5 + 0.5 * (1.0 - overlap), 6), keypoints=(point,))

    def segment(self, image: bytes, keypoints: Sequence[tuple[float, float]]) -> Box | None:
        if not keypoints:
            raise ProtocolError("segment request without keypoints")
        episode_id, frame, _ = self._locate_request(image)
        x, y = keypoints[0]
        for obj in self._truth.objects(episode_id, frame):
            if contains_point(obj.bbox, x, y):
                return obj.bbox
        return None

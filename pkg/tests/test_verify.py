"""Verification stage and the resolve pipeline composition."""

import pytest

from interweave.detect import CropConfig, crop_region, load_frame
from interweave.errors import SegmentEmpty, StageUnavailable
from interweave.geometry import iou
from interweave.mocks import MockBackend, MockBackendConfig
from interweave.parsing import extract_key_objects
from interweave.verify import (
    ACCEPTED_DETECTOR,
    ACCEPTED_SEGMENTER,
    REJECTED,
    ObjectResolution,
    VerificationOutcome,
    resolve_object,
    segment_from_keypoints,
    verify_crop,
)


def _episode_and_phrase(synth_corpus, index=0, slot=0):
    ep = synth_corpus["manifest"].episodes[index]
    return ep, extract_key_objects(ep.instruction).phrases[slot]


def _truth_box(synth_corpus, ep, phrase, frame=0):
    return synth_corpus["truth"].find(ep.id, frame, phrase.split()[-1]).bbox


class TestVerifyCrop:
    def test_accurate_crop_matches(self, synth_corpus, perfect_backend, tmp_path):
        ep, phrase = _episode_and_phrase(synth_corpus)
        frame = load_frame(synth_corpus["images"], ep, 0)
        crop = crop_region(frame, _truth_box(synth_corpus, ep, phrase), CropConfig(), tmp_path, phrase)
        outcome = verify_crop(crop, phrase, perfect_backend)
        assert outcome.match
        assert outcome.keypoints is None

    def test_bad_crop_mismatches_with_centroid_keypoints(self, synth_corpus, perfect_backend, tmp_path):
        ep, phrase = _episode_and_phrase(synth_corpus)
        truth = synth_corpus["truth"].find(ep.id, 0, phrase.split()[-1])
        frame = load_frame(synth_corpus["images"], ep, 0)
        # A crop far away from the object: IoU with truth is far below 0.5.
        other = next(
            o for o in synth_corpus["truth"].objects(ep.id, 0) if o.category != truth.category
        )
        crop = crop_region(frame, other.bbox, CropConfig(), tmp_path, phrase)
        outcome = verify_crop(crop, phrase, perfect_backend)
        assert not outcome.match
        assert outcome.keypoints == (truth.centroid,)

    def test_perfect_crop_always_matches_across_seeds(self, synth_corpus, tmp_path):
        # Zero verifier failure probability: a perfect crop matches in every
        # one of 1000 seeded trials.
        ep, phrase = _episode_and_phrase(synth_corpus, index=1)
        frame = load_frame(synth_corpus["images"], ep, 0)
        crop = crop_region(frame, _truth_box(synth_corpus, ep, phrase), CropConfig(), tmp_path, phrase)
        for seed in range(1000):
            backend = MockBackend(synth_corpus["truth"], MockBackendConfig(seed=seed))
            assert verify_crop(crop, phrase, backend).match

    def test_outcome_invariant(self):
        with pytest.raises(ValueError):
            VerificationOutcome(match=True, confidence=0.9, keypoints=((1.0, 2.0),))


class TestSegment:
    def test_truth_mask_bbox(self, synth_corpus, perfect_backend):
        ep, phrase = _episode_and_phrase(synth_corpus)
        truth = synth_corpus["truth"].find(ep.id, 0, phrase.split()[-1])
        frame = load_frame(synth_corpus["images"], ep, 0)
        bbox = segment_from_keypoints(frame, [truth.centroid], perfect_backend)
        assert bbox == truth.bbox

    def test_keypoint_outside_objects_is_empty(self, synth_corpus, perfect_backend):
        ep, _ = _episode_and_phrase(synth_corpus)
        frame = load_frame(synth_corpus["images"], ep, 0)
        # Corners are margin territory; no object bbox contains them.
        corner = (1.0, 1.0)
        assert not any(
            o.bbox[0] <= 1 < o.bbox[2] and o.bbox[1] <= 1 < o.bbox[3]
            for o in synth_corpus["truth"].objects(ep.id, 0)
        )
        with pytest.raises(SegmentEmpty):
            segment_from_keypoints(frame, [corner], perfect_backend)

    def test_keypoint_count_invariant(self, synth_corpus, perfect_backend):
        ep, phrase = _episode_and_phrase(synth_corpus)
        truth = synth_corpus["truth"].find(ep.id, 0, phrase.split()[-1])
        frame = load_frame(synth_corpus["images"], ep, 0)
        one = segment_from_keypoints(frame, [truth.centroid], perfect_backend)
        jitter = (truth.centroid[0] + 1.0, truth.centroid[1] + 1.0)
        two = segment_from_keypoints(frame, [truth.centroid, jitter], perfect_backend)
        assert one == two

    def test_no_keypoint_in_frame(self, synth_corpus, perfect_backend):
        ep, _ = _episode_and_phrase(synth_corpus)
        frame = load_frame(synth_corpus["images"], ep, 0)
        with pytest.raises(ValueError):
            segment_from_keypoints(frame, [(-5.0, -5.0)], perfect_backend)


class TestResolve:
    def test_happy_path_trail(self, synth_corpus, perfect_backend, tmp_path):
        ep, phrase = _episode_and_phrase(synth_corpus)
        res = resolve_object(
            ep, phrase, perfect_backend, synth_corpus["images"], tmp_path, mode="first-frame"
        )
        assert res.status == ACCEPTED_DETECTOR
        assert [t.stage for t in res.trail] == ["detect", "crop", "verify"]
        assert iou(res.bbox, _truth_box(synth_corpus, ep, phrase)) >= 0.99

    def test_detector_failure_recovers_via_segmenter(self, synth_corpus, tmp_path):
        # Detector always wrong, keypoints always good: every object should
        # land on the segmenter path.
        backend = MockBackend(synth_corpus["truth"], MockBackendConfig(p_detect_fail=1.0, seed=2))
        ep, phrase = _episode_and_phrase(synth_corpus, index=4)
        res = resolve_object(ep, phrase, backend, synth_corpus["images"], tmp_path, mode="first-frame")
        assert res.status == ACCEPTED_SEGMENTER
        assert any(t.stage == "segment" for t in res.trail)
        assert iou(res.bbox, _truth_box(synth_corpus, ep, phrase)) >= 0.99

    def test_both_paths_fail_rejected(self, synth_corpus, tmp_path):
        backend = MockBackend(
            synth_corpus["truth"],
            MockBackendConfig(p_detect_fail=1.0, p_verify_fail=1.0, seed=3),
        )
        ep, phrase = _episode_and_phrase(synth_corpus, index=5)
        res = resolve_object(ep, phrase, backend, synth_corpus["images"], tmp_path, mode="first-frame")
        assert res.status == REJECTED
        assert res.crop is None
        # REJECTED requires that both the detector path and segmenter path ran.
        stages = [t.stage for t in res.trail]
        assert "verify" in stages and stages.count("verify") == 2

    def test_monotone_fallback_p2_zero_never_rejects(self, synth_corpus, tmp_path):
        backend = MockBackend(
            synth_corpus["truth"], MockBackendConfig(p_detect_fail=0.8, p_verify_fail=0.0, seed=4)
        )
        for index in range(10):
            ep = synth_corpus["manifest"].episodes[index]
            for phrase in extract_key_objects(ep.instruction).phrases:
                res = resolve_object(
                    ep, phrase, backend, synth_corpus["images"], tmp_path, mode="first-frame"
                )
                assert res.status != REJECTED

    def test_monotone_fallback_p1_zero_never_uses_segmenter(self, synth_corpus, tmp_path):
        backend = MockBackend(
            synth_corpus["truth"], MockBackendConfig(p_detect_fail=0.0, p_verify_fail=0.9, seed=5)
        )
        for index in range(10):
            ep = synth_corpus["manifest"].episodes[index]
            for phrase in extract_key_objects(ep.instruction).phrases:
                res = resolve_object(
                    ep, phrase, backend, synth_corpus["images"], tmp_path, mode="first-frame"
                )
                assert res.status == ACCEPTED_DETECTOR

    def test_trail_matches_service_calls(self, synth_corpus, tmp_path):
        # Every backend call must appear exactly once in the trail with timing.
        class Recorder:
            def __init__(self, inner):
                self.inner = inner
                self.calls = []

            def parse(self, instruction):
                return self.inner.parse(instruction)

            def detect(self, image, phrases):
                self.calls.append("detect")
                return self.inner.detect(image, phrases)

            def verify(self, image, phrase):
                self.calls.append("verify")
                return self.inner.verify(image, phrase)

            def segment(self, image, keypoints):
                self.calls.append("segment")
                return self.inner.segment(image, keypoints)

        backend = Recorder(
            MockBackend(synth_corpus["truth"], MockBackendConfig(p_detect_fail=1.0, seed=6))
        )
        ep, phrase = _episode_and_phrase(synth_corpus, index=6)
        res = resolve_object(ep, phrase, backend, synth_corpus["images"], tmp_path, mode="first-frame")
        service_stages = [t for t in res.trail if t.stage in ("detect", "verify", "segment")]
        recorded = [t.stage for t in service_stages if t.outcome != "not_found"]
        assert recorded == backend.calls
        assert all(t.ms >= 0.0 for t in res.trail)

    def test_stage_unavailable_propagates(self, synth_corpus, tmp_path):
        class DownBackend:
            def parse(self, instruction):
                raise StageUnavailable("parse", "down")

            def detect(self, image, phrases):
                raise StageUnavailable("detect", "down")

            def verify(self, image, phrase):
                raise StageUnavailable("verify", "down")

            def segment(self, image, keypoints):
                raise StageUnavailable("segment", "down")

        ep, phrase = _episode_and_phrase(synth_corpus)
        with pytest.raises(StageUnavailable):
            resolve_object(ep, phrase, DownBackend(), synth_corpus["images"], tmp_path)

    def test_resolution_invariants(self, synth_corpus, perfect_backend, tmp_path):
        with pytest.raises(ValueError):
            ObjectResolution(phrase="x", status=REJECTED, crop="something", trail=())

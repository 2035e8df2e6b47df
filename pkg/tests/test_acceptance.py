"""Acceptance suite: one test per release criterion, each printing a pass line
with its measured quantities and asserting its stated runtime budget.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from interweave.augment import AugmentPolicy, WebImagePool, choose_instruction_image
from interweave.episode import NormalizationStats, normalize_action
from interweave.geometry import iou, pad_box
from interweave.metrics import aggregate_report, sample_audit
from interweave.parsing import Segment
from interweave.pipeline import build_config, plan_mixture, run_convert
from interweave.synth import SceneConfig, TruthIndex, generate_episode_set
from interweave.tokens import TokenizerConfig, assemble_sequence, render_canonical, validate_sequence
from interweave.verify import ACCEPTED_DETECTOR, REJECTED


def _pass(name: str, detail: str, started: float, budget_s: float) -> None:
    elapsed = time.perf_counter() - started
    assert elapsed < budget_s, f"{name} exceeded runtime budget: {elapsed:.1f}s > {budget_s}s"
    print(f"PASS {name}: {detail} [{elapsed:.1f}s]")


@pytest.fixture(scope="session")
def corpus_1k(tmp_path_factory):
    # 12 frames puts two candidate frames (0 and 10) in reach of the default
    # dataset-mode stride, so the conversion exercises multi-frame scanning.
    started = time.perf_counter()
    root = tmp_path_factory.mktemp("acc1k")
    manifest, truth_path = generate_episode_set(
        1000, SceneConfig(frames=12), seed=2024, out_dir=root
    )
    return {"root": root, "manifest": manifest, "truth_path": truth_path,
            "elapsed": time.perf_counter() - started}


@pytest.fixture(scope="session")
def error_free_runs(corpus_1k, tmp_path_factory):
    """Three error-free conversions of the same corpus: twice with one worker,
    once with eight."""
    out = tmp_path_factory.mktemp("acc1k-runs")

    def config(workers):
        return build_config({
            "mock_in_process": True,
            "truth": str(corpus_1k["truth_path"]),
            "workers": workers,
            "seed": 11,
            "mode": "dataset",
        })

    started = time.perf_counter()
    manifest = corpus_1k["root"] / "manifest.jsonl"
    for name, workers in (("a", 1), ("b", 1), ("parallel", 8)):
        run_convert(config(workers), manifest, out / name)
    return {"dir": out, "elapsed": time.perf_counter() - started}


def _records(run_dir: Path) -> dict[str, dict]:
    lines = (run_dir / "records.jsonl").read_text().splitlines()
    return {json.loads(line)["id"]: json.loads(line) for line in lines}


def _crops(run_dir: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in (run_dir / "crops").iterdir() if p.suffix == ".png"}


class TestCriterion1ErrorRateComposition:
    BUDGET_S = 300.0

    def test_composition_over_20k_objects(self, tmp_path_factory):
        started = time.perf_counter()
        root = tmp_path_factory.mktemp("acc10k")
        manifest_path = root / "manifest.jsonl"
        generate_episode_set(10_000, SceneConfig(frames=1), seed=7, out_dir=root)

        config = build_config({
            "mock_in_process": True,
            "truth": str(root / "truth.jsonl"),
            "mock": {"detect_fail": 0.174, "verify_fail": 0.221, "correlation": 0.0},
            "workers": 8,
            "seed": 42,
            "mode": "first-frame",
        })
        run_convert(config, manifest_path, root / "run")
        report = aggregate_report(root / "run")

        assert report.objects_total == 20_000
        combined = report.combined_error_rate
        detector_only = report.detector_error_rate
        expected_combined = 0.174 * 0.221  # independent-path product, 3.85%
        assert abs(combined - expected_combined) <= 0.005, combined
        assert abs(detector_only - 0.174) <= 0.010, detector_only
        _pass(
            "criterion 1 (error-rate composition)",
            f"combined {100 * combined:.2f}% (target 3.85±0.5pp), "
            f"detector-only {100 * detector_only:.2f}% (target 17.4±1.0pp), "
            f"n={report.objects_total}",
            started,
            self.BUDGET_S,
        )


class TestCriterion2AuditProtocol:
    BUDGET_S = 120.0

    def test_interval_coverage(self, tmp_path):
        started = time.perf_counter()
        population, failures = 5000, 220  # engineered failure rate 4.4%
        true_rate = failures / population
        lines = []
        for i in range(population):
            status = REJECTED if i < failures else ACCEPTED_DETECTOR
            lines.append(json.dumps({
                "episode_id": f"ep{i:05d}",
                "status": "FAILURE" if i < failures else "SUCCESS",
                "zero_object": False,
                "flags": [],
                "resolutions": [{
                    "phrase": "the thing",
                    "status": status,
                    "bbox": None,
                    "crop_ref": None,
                    "trail": [{"stage": "verify", "outcome": "mismatch", "ms": 1.0}],
                }],
            }))
        (tmp_path / "trails.jsonl").write_text("\n".join(lines) + "\n")

        covered = 0
        for seed in range(100):
            sample = sample_audit(tmp_path, n=200, seed=seed)
            if sample.ci_low <= true_rate <= sample.ci_high:
                covered += 1
        assert covered >= 93, f"coverage {covered}/100"
        _pass(
            "criterion 2 (audit protocol)",
            f"95% interval covered the true 4.4% rate in {covered}/100 seeded samples of n=200",
            started,
            self.BUDGET_S,
        )


class TestCriterion3TokenLayout:
    BUDGET_S = 30.0

    def test_fuzzed_layout_and_rendering(self):
        started = time.perf_counter()
        rng = np.random.default_rng(99)
        words = ["put", "the", "red", "block", "on", "towel", "near", "pot"]
        checked = 0
        for patch_count in (1, 4, 256):
            cfg = TokenizerConfig(patch_count=patch_count)
            for k in range(0, 9):
                for _ in range(8):
                    segments = [Segment(kind="image", image="m") for _ in range(k)]
                    for _ in range(int(rng.integers(1, 4))):
                        text = " ".join(rng.choice(words, size=rng.integers(1, 5)))
                        segments.insert(int(rng.integers(0, len(segments) + 1)),
                                        Segment(kind="text", text=text))
                    seq = assemble_sequence(segments, cfg)
                    assert validate_sequence(seq).ok
                    n_text = sum(len(s.text.split()) for s in segments if s.kind == "text")
                    assert len(seq.tokens) == patch_count * k + n_text + 2 * k
                    checked += 1

        cfg = TokenizerConfig(patch_count=256)
        seq = assemble_sequence(
            [Segment(kind="text", text="put"), Segment(kind="image", image="a"),
             Segment(kind="text", text="on"), Segment(kind="image", image="b")],
            cfg,
        )
        tokens = render_canonical(seq, cfg).split(" ")
        boi_positions = [i for i, t in enumerate(tokens) if t == "<BOI>"]
        assert len(boi_positions) == 2
        assert tokens[boi_positions[1] + 1] == "<image>_257"
        _pass(
            "criterion 3 (token layout)",
            f"{checked} fuzzed sequences valid with exact token counts; "
            "second image span opens at <image>_257 for k=2, P=256",
            started,
            self.BUDGET_S,
        )


class TestCriterion4Normalization:
    BUDGET_S = 10.0

    def test_range_inverse_endpoints(self):
        started = time.perf_counter()
        rng = np.random.default_rng(4)
        checked = 0
        for _ in range(5):
            lo = rng.uniform(-10, 10, 7)
            hi = lo + rng.uniform(1e-3, 20, 7)
            stats = NormalizationStats(minimum=tuple(lo), maximum=tuple(hi))
            vectors = rng.uniform(lo, hi, size=(10_000, 7))
            for vec in vectors:
                forward = normalize_action(vec, stats)
                assert np.all(forward >= -1.0) and np.all(forward <= 1.0)
                back = normalize_action(forward, stats, "inverse")
                assert np.max(np.abs(back - vec)) < 1e-9
                checked += 1
            assert normalize_action(lo, stats) == pytest.approx([-1.0] * 7)
            assert normalize_action(hi, stats) == pytest.approx([1.0] * 7)
        _pass(
            "criterion 4 (normalization)",
            f"{checked} random in-range vectors stayed in [-1,1] and inverted within 1e-9; "
            "endpoints mapped to ±1 for every stats draw",
            started,
            self.BUDGET_S,
        )


class TestCriterion5Determinism:
    BUDGET_S = 600.0

    def test_byte_identical_and_parallel_equivalent(self, corpus_1k, error_free_runs):
        # charge corpus generation and the three conversion runs to this
        # criterion's clock, not just the comparisons
        started = time.perf_counter() - corpus_1k["elapsed"] - error_free_runs["elapsed"]
        a, b, parallel = (error_free_runs["dir"] / n for n in ("a", "b", "parallel"))
        assert (a / "records.jsonl").read_bytes() == (b / "records.jsonl").read_bytes()
        assert _crops(a) == _crops(b)
        assert _records(a) == _records(parallel)
        assert _crops(a) == _crops(parallel)
        n = len(_records(a))
        assert n == 1000
        _pass(
            "criterion 5 (determinism and parallel equivalence)",
            f"two 1-worker runs byte-identical over {n} records; "
            "8-worker run emitted the identical record set and crop store",
            started,
            self.BUDGET_S,
        )


class TestCriterion6DetectionGeometry:
    BUDGET_S = 300.0

    def test_iou_against_ground_truth(self, corpus_1k, error_free_runs):
        started = time.perf_counter()
        truth = TruthIndex.load(corpus_1k["truth_path"])
        checked = 0
        worst = 1.0
        with (error_free_runs["dir"] / "a" / "trails.jsonl").open() as fh:
            for line in fh:
                record = json.loads(line)
                for res in record["resolutions"]:
                    assert res["status"] == ACCEPTED_DETECTOR
                    category = res["phrase"].split()[-1]
                    expected = truth.find(record["episode_id"], 0, category)
                    overlap = iou(tuple(res["bbox"]), expected.bbox)
                    worst = min(worst, overlap)
                    assert overlap >= 0.99
                    checked += 1
        assert checked == 2000

        assert pad_box((40.0, 60.0, 120.0, 160.0), 0.1, 320, 240) == (32.0, 50.0, 128.0, 170.0)
        _pass(
            "criterion 6 (detection geometry)",
            f"worst IoU {worst:.4f} over {checked} objects (threshold 0.99); "
            "padding example (40,60,120,160)@0.1 -> (32,50,128,170) exact",
            started,
            self.BUDGET_S,
        )


class TestCriterion7AugmentationPresets:
    BUDGET_S = 60.0

    def test_ablation_ratios(self, web_pool_dir, tmp_path):
        started = time.perf_counter()
        pool = WebImagePool(web_pool_dir)
        crop = tmp_path / "crop.png"
        crop.touch()

        def web_fraction(policy, draws=10_000):
            web = sum(
                choose_instruction_image("the red circle", crop, pool, policy, f"d{i}")[1] == "web"
                for i in range(draws)
            )
            return web / draws

        zero = web_fraction(AugmentPolicy(mode="mixed", mix_ratio=0.0, seed=1))
        one = web_fraction(AugmentPolicy(mode="mixed", mix_ratio=1.0, seed=1))
        half = web_fraction(AugmentPolicy(mode="mixed", mix_ratio=0.5, seed=1))
        assert zero == 0.0
        assert one == 1.0
        assert abs(half - 0.5) <= 0.02

        task_only = web_fraction(AugmentPolicy.preset("Task-specific Only", seed=1), draws=500)
        internet_only = web_fraction(AugmentPolicy.preset("Internet Only", seed=1), draws=500)
        assert task_only == 0.0
        assert internet_only == 1.0
        _pass(
            "criterion 7 (augmentation presets)",
            f"web fraction r=0: {zero:.0%}, r=1: {one:.0%}, r=0.5: {half:.1%} over 10000 draws; "
            "named presets behave as their modes",
            started,
            self.BUDGET_S,
        )


class TestCriterion8MixturePlanning:
    BUDGET_S = 1.0

    # Composition of the eleven-source robot-episode corpus, in percent.
    WEIGHTS = {
        "RT-1": 41.01,
        "Bridge": 28.25,
        "BC-Z": 20.34,
        "Language Table": 7.81,
        "UTAustin Mutex": 0.71,
        "Jaco Play": 0.51,
        "Berkeley Autolab UR5": 0.47,
        "IAMLab CMU Pickup Insert": 0.30,
        "Stanford Hydra": 0.27,
        "UTAustin Sirius": 0.26,
        "UCSD Kitchen": 0.07,
    }

    def test_allocation(self):
        started = time.perf_counter()
        allocation = plan_mixture(self.WEIGHTS, 10_000)
        assert sum(allocation.values()) == 10_000
        assert allocation["RT-1"] == 4101
        _pass(
            "criterion 8 (mixture planning)",
            f"allocations sum to 10000; RT-1 -> {allocation['RT-1']}",
            started,
            self.BUDGET_S,
        )

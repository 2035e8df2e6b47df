"""End-to-end conversion runs: determinism, parallel equivalence, resume,
failure policies, mixture planning, config loading."""

import json
import time
from pathlib import Path

import pytest

from interweave.errors import ManifestError, ResumableAbort, StageUnavailable
from interweave.metrics import aggregate_report, sample_audit
from interweave.pipeline import build_config, load_config, plan_mixture, run_convert
from interweave.tokens import TokenizerConfig, parse_canonical, validate_sequence


def _mock_config(synth_corpus, **kwargs):
    defaults = dict(
        mock_in_process=True,
        truth=str(synth_corpus["truth_path"]),
        workers=1,
        seed=0,
        mode="first-frame",
    )
    defaults.update(kwargs)
    return build_config(defaults)


def _records(out_dir: Path) -> dict[str, dict]:
    out = {}
    for line in (out_dir / "records.jsonl").read_text().splitlines():
        record = json.loads(line)
        out[record["id"]] = record
    return out


def _crop_files(out_dir: Path) -> dict[str, bytes]:
    crops = out_dir / "crops"
    if not crops.is_dir():
        return {}
    return {p.name: p.read_bytes() for p in crops.iterdir() if p.suffix == ".png"}


class TestConvert:
    def test_error_free_run(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus)
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_total == 40
        assert report.episodes_success == 40
        assert report.combined_error_rate == 0.0
        records = _records(tmp_path / "run")
        assert len(records) == 40
        for record in records.values():
            assert record["status"] == "interleaved"
            image_segments = [s for s in record["segments"] if s["kind"] == "image"]
            assert len(image_segments) == 2
            for seg in image_segments:
                assert (tmp_path / "run" / seg["image_ref"]).is_file()
                assert seg["source"] == "crop"

    def test_rendering_round_trips(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus)
        run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        cfg = TokenizerConfig()
        for record in _records(tmp_path / "run").values():
            seq = parse_canonical(record["rendering"], cfg)
            assert validate_sequence(seq).ok
            kinds = [k for k, _, _ in seq.segments]
            expected = [s["kind"] for s in record["segments"]]
            assert kinds == expected

    def test_single_worker_reruns_byte_identical(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus)
        manifest = synth_corpus["root"] / "manifest.jsonl"
        run_convert(config, manifest, tmp_path / "a")
        run_convert(config, manifest, tmp_path / "b")
        assert (tmp_path / "a" / "records.jsonl").read_bytes() == (
            tmp_path / "b" / "records.jsonl"
        ).read_bytes()
        assert _crop_files(tmp_path / "a") == _crop_files(tmp_path / "b")

    def test_worker_count_does_not_change_record_set(self, synth_corpus, tmp_path):
        manifest = synth_corpus["root"] / "manifest.jsonl"
        run_convert(_mock_config(synth_corpus, workers=1), manifest, tmp_path / "serial")
        run_convert(_mock_config(synth_corpus, workers=8), manifest, tmp_path / "parallel")
        assert _records(tmp_path / "serial") == _records(tmp_path / "parallel")
        assert _crop_files(tmp_path / "serial") == _crop_files(tmp_path / "parallel")

    def test_keep_text_only_policy(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus, mock={"detect_fail": 1.0, "verify_fail": 1.0})
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_failure == 40
        records = _records(tmp_path / "run")
        assert len(records) == 40
        assert all(r["status"] == "text-only-fallback" for r in records.values())
        assert all(
            s["kind"] == "text" for r in records.values() for s in r["segments"]
        )

    def test_drop_policy(self, synth_corpus, tmp_path):
        config = _mock_config(
            synth_corpus,
            mock={"detect_fail": 1.0, "verify_fail": 1.0},
            failure_policy="drop",
        )
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_dropped == 40
        assert not (tmp_path / "run" / "records.jsonl").read_text().strip()

    def test_mixed_augmentation_sources(self, synth_corpus, web_pool_dir, tmp_path):
        config = _mock_config(
            synth_corpus,
            augment={"mode": "mixed", "mix_ratio": 0.5, "pool": str(web_pool_dir)},
        )
        run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        sources = [
            seg["source"]
            for record in _records(tmp_path / "run").values()
            for seg in record["segments"]
            if seg["kind"] == "image"
        ]
        assert "web" in sources and "crop" in sources

    def test_service_parse_backend(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus, parse_backend="service")
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_success == 40

    def test_report_files_written(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus)
        run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        run = tmp_path / "run"
        report = json.loads((run / "report.json").read_text())
        assert report["episodes_total"] == 40
        assert (run / "report.txt").read_text()
        assert (run / "config.json").is_file()
        stats = json.loads((run / "norm_stats.json").read_text())
        assert "synthetic" in stats
        recomputed = aggregate_report(run)
        assert recomputed.objects_total == report["objects_total"]

    def test_audit_on_run_dir(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus)
        run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        sample = sample_audit(tmp_path / "run", n=10, seed=3)
        assert sample.estimate == 0.0
        assert sample.n == 10

    def test_conservation(self, synth_corpus, tmp_path):
        config = _mock_config(synth_corpus, mock={"detect_fail": 0.4, "verify_fail": 0.4})
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_total == report.episodes_success + report.episodes_failure + report.episodes_pending


class _FlakyBackend:
    """Delegates to a mock backend, then goes down permanently after a budget
    of detect calls."""

    def __init__(self, inner, budget):
        self.inner = inner
        self.budget = budget

    def parse(self, instruction):
        return self.inner.parse(instruction)

    def detect(self, image, phrases):
        self.budget -= 1
        if self.budget < 0:
            raise StageUnavailable("detect", "injected outage")
        return self.inner.detect(image, phrases)

    def verify(self, image, phrase):
        return self.inner.verify(image, phrase)

    def segment(self, image, keypoints):
        return self.inner.segment(image, keypoints)


class TestResume:
    def test_abort_then_resume_matches_uninterrupted(self, synth_corpus, tmp_path, monkeypatch):
        manifest = synth_corpus["root"] / "manifest.jsonl"
        config = _mock_config(synth_corpus)

        run_convert(config, manifest, tmp_path / "clean")

        import interweave.pipeline as pipeline_module

        real_build = pipeline_module._build_backend

        def flaky_build(cfg):
            return _FlakyBackend(real_build(cfg), budget=24)

        monkeypatch.setattr(pipeline_module, "_build_backend", flaky_build)
        with pytest.raises(ResumableAbort):
            run_convert(config, manifest, tmp_path / "resumed")
        journaled = (tmp_path / "resumed" / "journal.jsonl").read_text().splitlines()
        assert 0 < len(journaled) < 40

        monkeypatch.setattr(pipeline_module, "_build_backend", real_build)
        report = run_convert(config, manifest, tmp_path / "resumed")
        assert report.episodes_total == 40
        assert report.episodes_pending == 0
        assert _records(tmp_path / "resumed") == _records(tmp_path / "clean")
        assert _crop_files(tmp_path / "resumed") == _crop_files(tmp_path / "clean")

    def test_resume_tolerates_torn_record_line(self, synth_corpus, tmp_path, monkeypatch):
        manifest = synth_corpus["root"] / "manifest.jsonl"
        config = _mock_config(synth_corpus)

        import interweave.pipeline as pipeline_module

        real_build = pipeline_module._build_backend
        monkeypatch.setattr(
            pipeline_module, "_build_backend", lambda cfg: _FlakyBackend(real_build(cfg), budget=30)
        )
        with pytest.raises(ResumableAbort):
            run_convert(config, manifest, tmp_path / "run")
        # simulate a crash that tore the last record line after journaling
        records_path = tmp_path / "run" / "records.jsonl"
        records_path.write_bytes(records_path.read_bytes()[:-20])

        monkeypatch.setattr(pipeline_module, "_build_backend", real_build)
        report = run_convert(config, manifest, tmp_path / "run")
        assert report.episodes_total == 40
        run_convert(config, manifest, tmp_path / "clean")
        assert _records(tmp_path / "run") == _records(tmp_path / "clean")


class TestValidation:
    def test_broken_episode_does_not_abort_run(self, synth_corpus, tmp_path, monkeypatch):
        # An unexpected per-episode exception (corrupt image, library bug)
        # marks the episode failed and the run continues.
        import interweave.pipeline as pipeline_module

        original = pipeline_module._Converter.process_episode

        def sometimes_broken(self, episode):
            if episode.id == "ep000003":
                raise RuntimeError("injected per-episode failure")
            return original(self, episode)

        monkeypatch.setattr(pipeline_module._Converter, "process_episode", sometimes_broken)
        config = _mock_config(synth_corpus)
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        assert report.episodes_total == 40
        assert report.episodes_failure == 1
        assert report.episodes_success == 39
        assert "ep000003" not in _records(tmp_path / "run")

    def test_empty_instruction_rejected(self, synth_corpus, tmp_path):
        manifest_path = synth_corpus["root"] / "manifest.jsonl"
        lines = manifest_path.read_text().splitlines()
        record = json.loads(lines[1])
        record["instruction"] = "   "
        broken = tmp_path / "broken.jsonl"
        images = tmp_path / "images"
        images.symlink_to(synth_corpus["images"])
        broken.write_text("\n".join([lines[0], json.dumps(record, separators=(",", ":"))]) + "\n")
        config = _mock_config(synth_corpus)
        with pytest.raises(ManifestError, match="empty instruction"):
            run_convert(config, broken, tmp_path / "run")


class TestPlanMixture:
    def test_single_dataset_identity(self):
        assert plan_mixture({"only": 1.0}, 7) == {"only": 7}

    def test_tie_break_lexicographic(self):
        assert plan_mixture({"a": 1.0, "b": 1.0}, 3) == {"a": 2, "b": 1}

    def test_allocations_sum_to_total(self):
        weights = {"x": 0.37, "y": 2.1, "z": 0.003, "w": 1.0}
        for total in (1, 10, 997, 10_000):
            alloc = plan_mixture(weights, total)
            assert sum(alloc.values()) == total

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            plan_mixture({"a": 0.0}, 10)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            plan_mixture({"a": -1.0, "b": 2.0}, 10)


class TestConfig:
    def test_yaml_env_and_override_precedence(self, tmp_path):
        config_file = tmp_path / "config.yaml"
        config_file.write_text(
            "mock_in_process: true\ntruth: /tmp/truth.jsonl\nworkers: 2\nseed: 1\n"
            "detection:\n  score_threshold: 0.4\n"
        )
        env = {"INTERWEAVE_WORKERS": "6", "INTERWEAVE_DETECTION__SCORE_THRESHOLD": "0.6"}
        config = load_config(config_file, env=env, seed=9)
        assert config.workers == 6            # env beats file
        assert config.detection.score_threshold == 0.6
        assert config.seed == 9               # explicit override beats both
        assert config.mock_in_process is True

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            build_config({"mock_in_process": True, "truth": "t", "typo_key": 1})

    def test_endpoints_required_without_mocks(self):
        with pytest.raises(ValueError, match="endpoints"):
            build_config({})

    def test_single_endpoint_string_expands(self):
        config = build_config({"endpoints": "http://127.0.0.1:9000"})
        assert config.endpoints["segment"] == "http://127.0.0.1:9000"

    def test_digest_stable_and_sensitive(self, synth_corpus):
        a = _mock_config(synth_corpus)
        b = _mock_config(synth_corpus)
        c = _mock_config(synth_corpus, seed=123)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()


class TestThroughput:
    def test_smoke_rate(self, synth_corpus, tmp_path):
        # Regression guard: synthetic frames per minute through the full
        # pipeline with in-process mocks, extrapolated from the corpus run.
        config = _mock_config(synth_corpus, workers=8, mode="dataset")
        started = time.perf_counter()
        report = run_convert(config, synth_corpus["root"] / "manifest.jsonl", tmp_path / "run")
        elapsed = time.perf_counter() - started
        frames = sum(len(ep.frames) for ep in synth_corpus["manifest"].episodes)
        rate_per_minute = frames / elapsed * 60.0
        assert report.episodes_success == 40
        assert rate_per_minute > 10_000, f"pipeline too slow: {rate_per_minute:.0f} frames/min"

"""Orchestrator: configuration, stage wiring, bounded-parallel conversion runs.

A run directory contains::

    records.jsonl     one interleaved episode record per line (the dataset)
    crops/            content-addressed stage artifacts
    trails.jsonl      per-episode resolution trails with timings (run log)
    journal.jsonl     append-only checkpoint of completed episodes
    config.json       config snapshot for reproducibility
    norm_stats.json   per-source action normalization statistics
    report.json/.txt  aggregated pipeline report

Records and crops are pure functions of (config, seed, input), so repeating a
run with one worker is byte-identical and any worker count yields the same
record set. Trails and reports carry timings and are excluded from that
guarantee. Aborting on a backend outage leaves a resumable journal; resuming
compacts the output files to the journaled episodes and continues.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import CancelledError, ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .augment import (
    AugmentPolicy,
    MODES as AUGMENT_MODES,
    TASK_ONLY,
    WebImagePool,
    choose_instruction_image,
)
from .backends import Backend, ClientPolicy, HttpBackend
from .detect import CropConfig, DetectionConfig
from .episode import (
    DatasetManifest,
    Episode,
    NormalizationStats,
    compute_norm_stats,
    image_root_dir,
    normalize_action,
    read_manifest,
)
from .errors import (
    InstructionTooLong,
    ManifestError,
    ParseRejected,
    ProtocolError,
    ResumableAbort,
    StageUnavailable,
)
from .metrics import (
    FAILURE,
    PipelineReport,
    REPORT_JSON,
    REPORT_TEXT,
    TRAILS_FILENAME,
    fold_trail,
    iter_trail_lines,
    trail_record,
)
from .mocks import MockBackend, MockBackendConfig
from .parsing import ParsedInstruction, Segment, extract_key_objects, normalize_ws, render_template
from .synth import TruthIndex
from .tokens import TokenizerConfig, assemble_sequence, render_canonical, validate_sequence
from .verify import REJECTED, ObjectResolution, resolve_object

logger = logging.getLogger(__name__)

ENV_PREFIX = "INTERWEAVE_"
RECORDS_FILENAME = "records.jsonl"
JOURNAL_FILENAME = "journal.jsonl"

KEEP_TEXT_ONLY = "keep-text-only"
DROP = "drop"


@dataclass(frozen=True)
class MockSettings:
    detect_fail: float = 0.0
    verify_fail: float = 0.0
    correlation: float = 0.0


@dataclass(frozen=True)
class AugmentSettings:
    mode: str = TASK_ONLY
    mix_ratio: float = 0.5
    pool: str | None = None

    def __post_init__(self):
        if self.mode not in AUGMENT_MODES:
            raise ValueError(f"unknown augment mode {self.mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    endpoints: dict[str, str] | None = None
    mock_in_process: bool = False
    truth: str | None = None
    mock: MockSettings = field(default_factory=MockSettings)
    workers: int = 4
    seed: int = 0
    mode: str = "dataset"
    failure_policy: str = KEEP_TEXT_ONLY
    parse_backend: str = "rule"
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    client: ClientPolicy = field(default_factory=ClientPolicy)
    normalize_actions: bool = True
    stats_path: str | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode not in ("dataset", "first-frame"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.failure_policy not in (KEEP_TEXT_ONLY, DROP):
            raise ValueError(f"unknown failure policy {self.failure_policy!r}")
        if self.parse_backend not in ("rule", "service"):
            raise ValueError(f"unknown parse backend {self.parse_backend!r}")
        if not self.mock_in_process and self.endpoints is None:
            raise ValueError("endpoints are required unless mock_in_process is set")
        if self.mock_in_process and self.truth is None:
            raise ValueError("mock_in_process requires a ground-truth sidecar path")

    def snapshot(self) -> dict:
        data = asdict(self)
        data["tool_version"] = __version__
        return data

    def digest(self) -> str:
        """Digest of the dataset-defining configuration. Runtime wiring that
        cannot change record content (worker count, client retry policy,
        endpoint URLs) stays out so reruns remain byte-identical."""
        data = self.snapshot()
        for runtime_key in ("workers", "client", "endpoints"):
            data.pop(runtime_key, None)
        return hashlib.sha256(
            json.dumps(data, sort_keys=True, default=str).encode("utf-8")
        ).hexdigest()[:16]


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _env_overrides(env: dict[str, str]) -> dict:
    """INTERWEAVE_WORKERS=8 sets workers; nesting via double underscores, e.g.
    INTERWEAVE_DETECTION__SCORE_THRESHOLD=0.5."""
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def build_config(data: dict) -> PipelineConfig:
    data = dict(data)

    def pop_section(name, cls):
        section = data.pop(name, {}) or {}
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be a mapping")
        return cls(**section)

    endpoints = data.pop("endpoints", None)
    if isinstance(endpoints, str):
        endpoints = {stage: endpoints for stage in ("parse", "detect", "verify", "segment")}
    crop_section = data.pop("crop", {}) or {}
    if "resolution" in crop_section:
        crop_section["resolution"] = tuple(crop_section["resolution"])
    if "fill" in crop_section:
        crop_section["fill"] = tuple(crop_section["fill"])
    known = set(PipelineConfig.__dataclass_fields__)
    config_kwargs = dict(
        endpoints=endpoints,
        mock=pop_section("mock", MockSettings),
        detection=pop_section("detection", DetectionConfig),
        crop=CropConfig(**crop_section),
        tokenizer=pop_section("tokenizer", TokenizerConfig),
        augment=pop_section("augment", AugmentSettings),
        client=pop_section("client", ClientPolicy),
    )
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        config_kwargs[key] = value
    return PipelineConfig(**config_kwargs)


def load_config(
    path: str | Path | None = None,
    env: dict[str, str] | None = None,
    **overrides,
) -> PipelineConfig:
    """Config file, then environment, then explicit overrides."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ValueError("config file must contain a mapping")
            data = _merge(data, loaded)
    data = _merge(data, _env_overrides(env if env is not None else dict(os.environ)))
    data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    return build_config(data)


# -- mixture planning ----------------------------------------------------------

def plan_mixture(weights: dict[str, float], total: int) -> dict[str, int]:
    """Integer allocation of ``total`` across datasets by largest-remainder
    rounding of the normalized weights; remainder ties break toward the
    lexicographically smaller label."""
    if total < 0:
        raise ValueError("total must be >= 0")
    if not weights:
        raise ValueError("no weights given")
    if any(w < 0 for w in weights.values()):
        raise ValueError("weights must be nonnegative")
    norm = sum(weights.values())
    if norm <= 0:
        raise ValueError("at least one weight must be positive")
    shares = {label: w / norm * total for label, w in weights.items()}
    alloc = {label: math.floor(s) for label, s in shares.items()}
    remaining = total - sum(alloc.values())
    for label in sorted(shares, key=lambda k: (-(shares[k] - alloc[k]), k))[:remaining]:
        alloc[label] += 1
    return alloc


# -- journal and resume ---------------------------------------------------------

def _read_jsonl_ids(path: Path, key: str) -> dict[str, int]:
    """id -> count of valid lines carrying it (tolerates a torn final line)."""
    ids: dict[str, int] = {}
    if not path.is_file():
        return ids
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            try:
                record = json.loads(line)
                ids[str(record[key])] = ids.get(str(record[key]), 0) + 1
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
    return ids


def _compact_jsonl(path: Path, key: str, keep: set[str]) -> None:
    """Keep the first valid line per id in ``keep``; drop everything else."""
    if not path.is_file():
        return
    kept: list[str] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            try:
                record = json.loads(line)
                record_id = str(record[key])
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
            if record_id in keep and record_id not in seen:
                seen.add(record_id)
                kept.append(line if line.endswith("\n") else line + "\n")
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(kept), encoding="utf-8")
    tmp.replace(path)


def _resume_state(out_dir: Path) -> set[str]:
    """Journaled episodes whose outputs are intact; output files are compacted
    to exactly that set so a resumed run cannot duplicate lines."""
    journal = _read_jsonl_ids(out_dir / JOURNAL_FILENAME, "episode_id")
    if not journal:
        # No usable journal: any stray records/trails are stale garbage from
        # an unrelated run and would pollute the fresh output.
        for name in (JOURNAL_FILENAME, TRAILS_FILENAME, RECORDS_FILENAME):
            (out_dir / name).unlink(missing_ok=True)
        return set()
    trails = _read_jsonl_ids(out_dir / TRAILS_FILENAME, "episode_id")
    records = _read_jsonl_ids(out_dir / RECORDS_FILENAME, "id")
    needs_record: dict[str, bool] = {}
    with (out_dir / JOURNAL_FILENAME).open("r", encoding="utf-8") as fh:
        for line in fh:
            try:
                entry = json.loads(line)
                needs_record[str(entry["episode_id"])] = bool(entry.get("record", True))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
    done = {
        ep
        for ep in journal
        if ep in trails and (not needs_record.get(ep, True) or ep in records)
    }
    _compact_jsonl(out_dir / JOURNAL_FILENAME, "episode_id", done)
    _compact_jsonl(out_dir / TRAILS_FILENAME, "episode_id", done)
    _compact_jsonl(out_dir / RECORDS_FILENAME, "id", {ep for ep in done if needs_record.get(ep, True)})
    return done


# -- conversion ----------------------------------------------------------------

@dataclass
class _EpisodeResult:
    episode_id: str
    record: dict | None
    trail: dict
    clamps: int


def _build_backend(config: PipelineConfig) -> Backend:
    if config.mock_in_process:
        truth = TruthIndex.load(config.truth)
        return MockBackend(
            truth,
            MockBackendConfig(
                p_detect_fail=config.mock.detect_fail,
                p_verify_fail=config.mock.verify_fail,
                correlation=config.mock.correlation,
                seed=config.seed,
            ),
        )
    backend = HttpBackend(config.endpoints, config.client)
    if not backend.available():
        raise StageUnavailable("preflight", "health check failed for configured endpoints")
    return backend


def _load_stats(config: PipelineConfig, manifest: DatasetManifest) -> dict[str, NormalizationStats]:
    if config.stats_path is not None:
        raw = json.loads(Path(config.stats_path).read_text(encoding="utf-8"))
        return {
            label: NormalizationStats(minimum=s["min"], maximum=s["max"], dataset_label=label)
            for label, s in raw.items()
        }
    by_source: dict[str, list[Episode]] = {}
    for ep in manifest.episodes:
        by_source.setdefault(ep.source_dataset, []).append(ep)
    return {label: compute_norm_stats(eps, label) for label, eps in sorted(by_source.items())}


def _parse_instruction(episode: Episode, config: PipelineConfig, backend: Backend) -> ParsedInstruction | None:
    """None means the parse was rejected and the episode goes to the rejected pool."""
    if config.parse_backend == "service":
        try:
            return extract_key_objects(episode.instruction, "service", client=backend)
        except (ParseRejected, ProtocolError) as exc:
            logger.warning("service parse rejected for %s: %s", episode.id, exc)
            return None
    try:
        return extract_key_objects(episode.instruction, "rule")
    except InstructionTooLong:
        try:
            return extract_key_objects(episode.instruction, "service", client=backend)
        except (ParseRejected, ProtocolError) as exc:
            logger.warning("long-instruction service parse rejected for %s: %s", episode.id, exc)
            return None
    except ParseRejected as exc:  # defensive; the rule backend reconstructs by construction
        logger.warning("rule parse rejected for %s: %s", episode.id, exc)
        return None


def _text_only_record(episode: Episode, status: str, config: PipelineConfig) -> dict:
    segment = Segment(kind="text", text=normalize_ws(episode.instruction))
    seq = assemble_sequence([segment], config.tokenizer)
    return {
        "id": episode.id,
        "status": status,
        "segments": [{"kind": "text", "text": segment.text}],
        "rendering": render_canonical(seq, config.tokenizer),
        "normalized_actions": config.normalize_actions,
        "provenance": {"config_digest": config.digest(), "version": __version__},
    }


def _record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class _Converter:
    def __init__(self, config: PipelineConfig, manifest: DatasetManifest, manifest_path: Path, out_dir: Path):
        self.config = config
        self.manifest = manifest
        self.images_root = image_root_dir(manifest_path, manifest)
        self.out_dir = out_dir
        self.crops_dir = out_dir / "crops"
        self.backend = _build_backend(config)
        self.pool = WebImagePool(config.augment.pool) if config.augment.pool else None
        self.policy = AugmentPolicy(
            mode=config.augment.mode, mix_ratio=config.augment.mix_ratio, seed=config.seed
        )
        self.stats = _load_stats(config, manifest) if config.normalize_actions else {}

    def _image_ref(self, path: Path) -> str:
        return os.path.relpath(path, self.out_dir)

    def _check_normalization(self, episode: Episode) -> int:
        stats = self.stats.get(episode.source_dataset)
        if stats is None:
            return 0
        clamps = 0

        def count(n):
            nonlocal clamps
            clamps += n

        for frame in episode.frames:
            normalize_action(frame.action, stats, "forward", on_clamp=count)
            normalize_action(frame.proprio, stats, "forward", on_clamp=count)
        return clamps

    def process_episode(self, episode: Episode) -> _EpisodeResult:
        config = self.config
        clamps = self._check_normalization(episode) if config.normalize_actions else 0
        parsed = _parse_instruction(episode, config, self.backend)
        if parsed is None:
            trail = trail_record(episode.id, [], flags=["parse_rejected"])
            trail["status"] = FAILURE
            record = None
            if config.failure_policy == KEEP_TEXT_ONLY:
                record = _text_only_record(episode, "text-only-fallback", config)
            else:
                trail["flags"].append("dropped")
            return _EpisodeResult(episode.id, record, trail, clamps)

        resolutions: list[ObjectResolution] = []
        for phrase in parsed.phrases:
            resolutions.append(
                resolve_object(
                    episode,
                    phrase,
                    self.backend,
                    self.images_root,
                    self.crops_dir,
                    detection_cfg=config.detection,
                    crop_cfg=config.crop,
                    mode=config.mode,
                )
            )

        flags: list[str] = []
        if not parsed.phrases:
            flags.append("zero_object")
        rejected = any(r.status == REJECTED for r in resolutions)
        if rejected:
            if config.failure_policy == DROP:
                flags.append("dropped")
                trail = trail_record(episode.id, resolutions, flags=flags)
                return _EpisodeResult(episode.id, None, trail, clamps)
            flags.append("fallback_text_only")
            trail = trail_record(episode.id, resolutions, flags=flags)
            return _EpisodeResult(
                episode.id, _text_only_record(episode, "text-only-fallback", config), trail, clamps
            )

        if not parsed.phrases:
            trail = trail_record(episode.id, resolutions, flags=flags)
            return _EpisodeResult(episode.id, _text_only_record(episode, "text-only", config), trail, clamps)

        fillers = []
        for phrase, res in zip(parsed.phrases, resolutions):
            image_path, source = self._choose(phrase, res, episode.id)
            fillers.append(
                {
                    "kind": "image",
                    "image_ref": self._image_ref(image_path),
                    "phrase": phrase,
                    "bbox": list(res.bbox) if source == "crop" and res.bbox is not None else None,
                    "source": source,
                    "status": res.status,
                }
            )
        segments = render_template(parsed, fillers)
        seq = assemble_sequence(segments, config.tokenizer)
        verdict = validate_sequence(seq)
        if not verdict.ok:  # pragma: no cover - assembly guarantees validity
            raise RuntimeError(f"assembled sequence invalid: {verdict.violations}")
        record = {
            "id": episode.id,
            "status": "interleaved",
            "segments": [
                {"kind": "text", "text": s.text} if s.kind == "text" else s.image for s in segments
            ],
            "rendering": render_canonical(seq, config.tokenizer),
            "normalized_actions": config.normalize_actions,
            "provenance": {"config_digest": config.digest(), "version": __version__},
        }
        trail = trail_record(episode.id, resolutions, flags=flags)
        return _EpisodeResult(episode.id, record, trail, clamps)

    def _choose(self, phrase: str, res: ObjectResolution, episode_id: str):
        crop_ref = res.crop.image_ref if res.crop is not None else None
        return choose_instruction_image(
            phrase, crop_ref, self.pool, self.policy, draw_key=f"{episode_id}:{phrase}"
        )


def run_convert(config: PipelineConfig, input_manifest: str | Path, out_dir: str | Path) -> PipelineReport:
    """Convert a manifest into an interleaved dataset under ``out_dir``.

    Per-episode failures never abort the run; a backend outage checkpoints and
    raises ResumableAbort. Rerunning with the same arguments resumes.
    """
    started = time.perf_counter()
    input_manifest = Path(input_manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = read_manifest(input_manifest)
    for episode in manifest.episodes:
        if not episode.instruction.strip():
            raise ManifestError(f"episode {episode.id!r} has an empty instruction")

    converter = _Converter(config, manifest, input_manifest, out_dir)

    (out_dir / "config.json").write_text(
        json.dumps(config.snapshot(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )
    if config.normalize_actions:
        stats_json = {
            label: {"min": list(s.minimum), "max": list(s.maximum)}
            for label, s in sorted(converter.stats.items())
        }
        (out_dir / "norm_stats.json").write_text(
            json.dumps(stats_json, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    done = _resume_state(out_dir)
    if done:
        logger.info("resuming: %d episodes already journaled", len(done))
    pending = [ep for ep in manifest.episodes if ep.id not in done]

    report = PipelineReport(config=config.snapshot())
    for _, line in iter_trail_lines(out_dir):
        fold_trail(report, json.loads(line))

    abort: StageUnavailable | None = None
    with (out_dir / RECORDS_FILENAME).open("a", encoding="utf-8") as records_fh, (
        out_dir / TRAILS_FILENAME
    ).open("a", encoding="utf-8") as trails_fh, (out_dir / JOURNAL_FILENAME).open(
        "a", encoding="utf-8"
    ) as journal_fh:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            futures = {executor.submit(converter.process_episode, ep): ep.id for ep in pending}
            for future in as_completed(futures):
                if abort is not None:
                    continue
                try:
                    result = future.result()
                except CancelledError:
                    continue
                except StageUnavailable as exc:
                    abort = exc
                    for f in futures:
                        f.cancel()
                    continue
                except Exception:
                    # Per-episode failures never abort the run; record the
                    # episode as failed and move on.
                    episode_id = futures[future]
                    logger.exception("episode %s failed", episode_id)
                    trail = {
                        "episode_id": episode_id,
                        "status": FAILURE,
                        "zero_object": False,
                        "flags": ["error"],
                        "resolutions": [],
                    }
                    result = _EpisodeResult(episode_id, None, trail, 0)
                if result.record is not None:
                    records_fh.write(_record_line(result.record) + "\n")
                    records_fh.flush()
                trails_fh.write(json.dumps(result.trail, sort_keys=True) + "\n")
                trails_fh.flush()
                journal_fh.write(
                    json.dumps({"episode_id": result.episode_id, "record": result.record is not None})
                    + "\n"
                )
                journal_fh.flush()
                fold_trail(report, result.trail)
                report.clamp_count += result.clamps

    report.episodes_pending = len(manifest.episodes) - report.episodes_processed
    report.episodes_total = len(manifest.episodes)
    report.wall_clock_s = time.perf_counter() - started
    report.check()
    (out_dir / REPORT_JSON).write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )
    (out_dir / REPORT_TEXT).write_text(report.summary() + "\n", encoding="utf-8")
    if abort is not None:
        raise ResumableAbort(f"run aborted, resume from journal: {abort}") from abort
    return report

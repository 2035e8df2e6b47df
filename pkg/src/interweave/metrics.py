"""Success accounting, run reports, and the sampled audit protocol.

Stage metrics use per-object denominators (detector-only accuracy counts
objects whose first verification matched; combined accuracy counts objects
not REJECTED). The audit uses per-episode denominators: an episode fails if
any of its key objects was not resolved. Intervals are exact binomial
(Clopper-Pearson) because audited rates sit in the few-percent range where
the normal approximation is poor at n=200.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import beta as beta_dist

from .verify import REJECTED, ObjectResolution, STATUSES

logger = logging.getLogger(__name__)

SUCCESS = "SUCCESS"
FAILURE = "FAILURE"

REPORT_SCHEMA_VERSION = 1
TRAILS_FILENAME = "trails.jsonl"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"

_HITS_RE = re.compile(r"\bhits=(\d+)\b")


def episode_status(resolutions: list[ObjectResolution] | list[str]) -> str:
    """SUCCESS iff no resolution was REJECTED; zero-object episodes are
    vacuously successful (callers flag them separately)."""
    for res in resolutions:
        status = res if isinstance(res, str) else res.status
        if status == REJECTED:
            return FAILURE
    return SUCCESS


# -- trail records -------------------------------------------------------------

def trail_record(
    episode_id: str,
    resolutions: list[ObjectResolution],
    flags: list[str] | None = None,
) -> dict:
    """The per-episode line persisted to trails.jsonl."""
    return {
        "episode_id": episode_id,
        "status": episode_status(resolutions),
        "zero_object": not resolutions,
        "flags": list(flags or []),
        "resolutions": [
            {
                "phrase": r.phrase,
                "status": r.status,
                "bbox": list(r.bbox) if r.bbox is not None else None,
                "crop_ref": str(r.crop.image_ref) if r.crop is not None else None,
                "trail": [{"stage": t.stage, "outcome": t.outcome, "ms": t.ms} for t in r.trail],
            }
            for r in resolutions
        ],
    }


def iter_trail_lines(run_dir: str | Path):
    path = Path(run_dir) / TRAILS_FILENAME
    if not path.is_file():
        return
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


# -- report --------------------------------------------------------------------

@dataclass
class PipelineReport:
    schema_version: int = REPORT_SCHEMA_VERSION
    object_counts: dict = field(default_factory=lambda: {s: 0 for s in STATUSES})
    objects_total: int = 0
    detector_first_match: int = 0
    episodes_total: int = 0
    episodes_success: int = 0
    episodes_failure: int = 0
    episodes_pending: int = 0
    episodes_zero_object: int = 0
    episodes_parse_rejected: int = 0
    episodes_dropped: int = 0
    multi_instance_objects: int = 0
    clamp_count: int = 0
    stage_timings: dict = field(default_factory=dict)
    wall_clock_s: float | None = None
    corrupt_lines: list = field(default_factory=list)
    config: dict | None = None

    @property
    def episodes_processed(self) -> int:
        return self.episodes_success + self.episodes_failure

    @property
    def detector_error_rate(self) -> float | None:
        if self.objects_total == 0:
            return None
        return 1.0 - self.detector_first_match / self.objects_total

    @property
    def combined_error_rate(self) -> float | None:
        if self.objects_total == 0:
            return None
        return self.object_counts.get(REJECTED, 0) / self.objects_total

    def check(self) -> None:
        assert self.objects_total == sum(self.object_counts.values())
        assert self.episodes_total == self.episodes_processed + self.episodes_pending
        for rate in (self.detector_error_rate, self.combined_error_rate):
            assert rate is None or 0.0 <= rate <= 1.0

    def to_json(self) -> dict:
        data = asdict(self)
        data["episodes_processed"] = self.episodes_processed
        data["detector_error_rate"] = self.detector_error_rate
        data["combined_error_rate"] = self.combined_error_rate
        return data

    def summary(self) -> str:
        def pct(x):
            return "n/a" if x is None else f"{100.0 * x:.2f}%"

        lines = [
            f"episodes: {self.episodes_total} total, {self.episodes_processed} processed "
            f"({self.episodes_success} success, {self.episodes_failure} failure, "
            f"{self.episodes_pending} pending)",
            f"  zero-object: {self.episodes_zero_object}  parse-rejected: {self.episodes_parse_rejected}"
            f"  dropped: {self.episodes_dropped}",
            f"objects: {self.objects_total} total over {self.episodes_processed} episodes",
        ]
        for status in STATUSES:
            lines.append(f"  {status}: {self.object_counts.get(status, 0)}")
        lines += [
            f"detector-only error: {pct(self.detector_error_rate)} of {self.objects_total} objects",
            f"combined error:      {pct(self.combined_error_rate)} of {self.objects_total} objects",
            f"multi-instance objects: {self.multi_instance_objects}",
            f"normalization clamps: {self.clamp_count}",
        ]
        for stage, t in sorted(self.stage_timings.items()):
            lines.append(f"timing {stage}: {t['calls']} calls, {t['total_ms']:.1f} ms total")
        if self.wall_clock_s is not None:
            lines.append(f"wall clock: {self.wall_clock_s:.2f} s")
        if self.corrupt_lines:
            lines.append(f"corrupt trail lines: {len(self.corrupt_lines)}")
        return "\n".join(lines)


def fold_trail(report: PipelineReport, record: dict) -> None:
    """Accumulate one episode trail record into the report (pure fold step)."""
    report.episodes_total += 1
    if record["status"] == SUCCESS:
        report.episodes_success += 1
    else:
        report.episodes_failure += 1
    if record.get("zero_object"):
        report.episodes_zero_object += 1
    flags = record.get("flags", [])
    if "parse_rejected" in flags:
        report.episodes_parse_rejected += 1
    if "dropped" in flags:
        report.episodes_dropped += 1
    for res in record.get("resolutions", []):
        report.objects_total += 1
        report.object_counts[res["status"]] = report.object_counts.get(res["status"], 0) + 1
        first_verify = next((t for t in res["trail"] if t["stage"] == "verify"), None)
        if first_verify is not None and first_verify["outcome"] == "match":
            report.detector_first_match += 1
        if any(
            (m := _HITS_RE.search(t.get("outcome", ""))) and int(m.group(1)) > 1
            for t in res["trail"]
            if t["stage"] == "detect"
        ):
            report.multi_instance_objects += 1
        for t in res["trail"]:
            slot = report.stage_timings.setdefault(t["stage"], {"calls": 0, "total_ms": 0.0})
            slot["calls"] += 1
            slot["total_ms"] += float(t.get("ms", 0.0))


def merge_reports(a: PipelineReport, b: PipelineReport) -> PipelineReport:
    """Associative merge of shard reports; folding shards then merging equals
    one monolithic fold."""
    merged = PipelineReport(config=a.config or b.config)
    for report in (a, b):
        for status, count in report.object_counts.items():
            merged.object_counts[status] = merged.object_counts.get(status, 0) + count
        merged.objects_total += report.objects_total
        merged.detector_first_match += report.detector_first_match
        merged.episodes_total += report.episodes_total
        merged.episodes_success += report.episodes_success
        merged.episodes_failure += report.episodes_failure
        merged.episodes_pending += report.episodes_pending
        merged.episodes_zero_object += report.episodes_zero_object
        merged.episodes_parse_rejected += report.episodes_parse_rejected
        merged.episodes_dropped += report.episodes_dropped
        merged.multi_instance_objects += report.multi_instance_objects
        merged.clamp_count += report.clamp_count
        merged.corrupt_lines.extend(report.corrupt_lines)
        for stage, t in report.stage_timings.items():
            slot = merged.stage_timings.setdefault(stage, {"calls": 0, "total_ms": 0.0})
            slot["calls"] += t["calls"]
            slot["total_ms"] += t["total_ms"]
    return merged


def aggregate_report(run_dir: str | Path) -> PipelineReport:
    """Rebuild the report from a run directory's persisted trails.

    Corrupt lines are listed in the report, not fatal. The config snapshot is
    attached when the run directory carries one.
    """
    report = PipelineReport()
    for lineno, line in iter_trail_lines(run_dir):
        try:
            record = json.loads(line)
            fold_trail(report, record)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            report.corrupt_lines.append(f"line {lineno}: {exc}")
    config_path = Path(run_dir) / "config.json"
    if config_path.is_file():
        try:
            report.config = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            report.corrupt_lines.append("config.json unreadable")
    report.check()
    return report


# -- audit ---------------------------------------------------------------------

@dataclass(frozen=True)
class AuditSample:
    episode_ids: tuple[str, ...]
    verdicts: dict                      # episode id -> all key objects detected?
    estimate: float                     # failure fraction in the sample
    ci_low: float
    ci_high: float
    n: int
    population: int
    seed: int

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "population": self.population,
            "seed": self.seed,
            "failure_estimate": self.estimate,
            "ci95": [self.ci_low, self.ci_high],
            "episode_ids": list(self.episode_ids),
            "verdicts": dict(self.verdicts),
        }


def clopper_pearson(x: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact binomial confidence interval for x successes in n trials."""
    if not 0 <= x <= n or n <= 0:
        raise ValueError(f"invalid counts x={x} n={n}")
    low = 0.0 if x == 0 else float(beta_dist.ppf(alpha / 2, x, n - x + 1))
    high = 1.0 if x == n else float(beta_dist.ppf(1 - alpha / 2, x + 1, n - x))
    return low, high


def audit_from_verdicts(
    population: list[tuple[str, bool]],
    n: int,
    seed: int,
) -> AuditSample:
    """Sample n episodes uniformly without replacement; verdict True means all
    key objects were detected."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if n > len(population):
        raise ValueError(f"sample size {n} exceeds population {len(population)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(population), size=n, replace=False)
    ids = tuple(population[i][0] for i in chosen)
    verdicts = {population[i][0]: bool(population[i][1]) for i in chosen}
    failures = sum(1 for i in chosen if not population[i][1])
    low, high = clopper_pearson(failures, n)
    return AuditSample(
        episode_ids=ids,
        verdicts=verdicts,
        estimate=failures / n,
        ci_low=low,
        ci_high=high,
        n=n,
        population=len(population),
        seed=seed,
    )


def sample_audit(run_dir: str | Path, n: int, seed: int) -> AuditSample:
    """Audit a run directory per the sampled protocol."""
    population: list[tuple[str, bool]] = []
    for lineno, line in iter_trail_lines(run_dir):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            logger.warning("skipping corrupt trail line %d: %s", lineno, exc)
            continue
        detected = all(r["status"] != REJECTED for r in record.get("resolutions", []))
        population.append((record["episode_id"], detected))
    return audit_from_verdicts(population, n, seed)

"""interweave: convert text-instructed robot episode datasets into
interleaved image-text instruction datasets."""

__version__ = "0.1.0"

from .episode import (  # noqa: E402
    DatasetManifest,
    Episode,
    Frame,
    NormalizationStats,
    compute_norm_stats,
    normalize_action,
    read_manifest,
    write_manifest,
)
from .parsing import ParsedInstruction, Segment, extract_key_objects, render_template  # noqa: E402
from .detect import CropArtifact, CropConfig, Detection, DetectionConfig, crop_region, locate_object  # noqa: E402
from .verify import (  # noqa: E402
    ACCEPTED_DETECTOR,
    ACCEPTED_SEGMENTER,
    REJECTED,
    ObjectResolution,
    VerificationOutcome,
    resolve_object,
    segment_from_keypoints,
    verify_crop,
)
from .tokens import (  # noqa: E402
    InterleavedSequence,
    Token,
    TokenizerConfig,
    assemble_sequence,
    parse_canonical,
    render_canonical,
    validate_sequence,
)
from .augment import AugmentPolicy, WebImagePool, choose_instruction_image  # noqa: E402
from .metrics import (  # noqa: E402
    AuditSample,
    PipelineReport,
    aggregate_report,
    clopper_pearson,
    episode_status,
    sample_audit,
)
from .synth import SceneConfig, SyntheticScene, TruthIndex, generate_episode_set  # noqa: E402
from .mocks import MockBackend, MockBackendConfig, preset_correlated, preset_error_free, preset_independent  # noqa: E402
from .backends import Backend, BackendServer, ClientPolicy, HttpBackend  # noqa: E402
from .pipeline import PipelineConfig, load_config, plan_mixture, run_convert  # noqa: E402

__all__ = [
    "__version__",
    "DatasetManifest", "Episode", "Frame", "NormalizationStats",
    "compute_norm_stats", "normalize_action", "read_manifest", "write_manifest",
    "ParsedInstruction", "Segment", "extract_key_objects", "render_template",
    "CropArtifact", "CropConfig", "Detection", "DetectionConfig", "crop_region", "locate_object",
    "ACCEPTED_DETECTOR", "ACCEPTED_SEGMENTER", "REJECTED",
    "ObjectResolution", "VerificationOutcome", "resolve_object", "segment_from_keypoints", "verify_crop",
    "InterleavedSequence", "Token", "TokenizerConfig",
    "assemble_sequence", "parse_canonical", "render_canonical", "validate_sequence",
    "AugmentPolicy", "WebImagePool", "choose_instruction_image",
    "AuditSample", "PipelineReport", "aggregate_report", "clopper_pearson", "episode_status", "sample_audit",
    "SceneConfig", "SyntheticScene", "TruthIndex", "generate_episode_set",
    "MockBackend", "MockBackendConfig", "preset_correlated", "preset_error_free", "preset_independent",
    "Backend", "BackendServer", "ClientPolicy", "HttpBackend",
    "PipelineConfig", "load_config", "plan_mixture", "run_convert",
]

"""Exception hierarchy shared across the pipeline stages."""


class InterweaveError(Exception):
    """Base class for all package errors."""


class ManifestError(InterweaveError):
    """Manifest file is missing, malformed, or violates an invariant."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InstructionTooLong(InterweaveError):
    """Rule parser refuses instructions over its word limit; use the service backend."""


class ParseRejected(InterweaveError):
    """Service parse response failed the reconstruction check."""


class ObjectNotFound(InterweaveError):
    """No detection reached the score threshold in any candidate frame."""


class SegmentEmpty(InterweaveError):
    """Segmentation returned an empty mask for the given keypoints."""


class AugmentUnavailable(InterweaveError):
    """No web image available for the category and no crop to fall back to."""


class StageUnavailable(InterweaveError):
    """A backend stayed unreachable after retries; the run should checkpoint and abort."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"{stage} backend unavailable: {detail}")
        self.stage = stage


class ResumableAbort(InterweaveError):
    """Run aborted on a backend outage; the journal allows resuming it."""


class ProtocolError(InterweaveError):
    """Malformed request or response on the backend wire protocol."""

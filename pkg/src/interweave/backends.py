"""Model-backend interface and the HTTP client that speaks the /v1/* protocol.

All four backends (parse, detect, verify, segment) are POST endpoints
exchanging JSON bodies; images travel base64-encoded. Every request and
response carries the protocol version header. Keypoints and boxes are always
in source-frame pixel coordinates.
"""

from __future__ import annotations

import base64
import http.server
import json
import logging
import random
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field

import requests

from .errors import ProtocolError, StageUnavailable
from .geometry import Box

logger = logging.getLogger(__name__)

PROTOCOL_HEADER = "X-Interweave-Protocol"
PROTOCOL_VERSION = "1"
STAGES = ("parse", "detect", "verify", "segment")


@dataclass(frozen=True)
class RawDetection:
    phrase: str
    bbox: Box
    score: float


@dataclass(frozen=True)
class VerifyReply:
    match: bool
    confidence: float
    keypoints: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.match and self.keypoints is not None:
            raise ProtocolError("verify reply carries keypoints despite a match")


@dataclass(frozen=True)
class ParseReply:
    objects: tuple[str, ...]
    template: str

    def __getitem__(self, key: str):
        return {"objects": list(self.objects), "template": self.template}[key]


class Backend(ABC):
    """One object answering all four stages; implementations must tolerate
    concurrent callers."""

    @abstractmethod
    def parse(self, instruction: str) -> ParseReply: ...

    @abstractmethod
    def detect(self, image: bytes, phrases: Sequence[str]) -> list[RawDetection]: ...

    @abstractmethod
    def verify(self, image: bytes, phrase: str) -> VerifyReply: ...

    @abstractmethod
    def segment(self, image: bytes, keypoints: Sequence[tuple[float, float]]) -> Box | None: ...


def encode_image(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def decode_image(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"invalid base64 image payload: {exc}") from exc


@dataclass(frozen=True)
class ClientPolicy:
    timeout_s: float = 30.0
    retries: int = 3
    backoff_s: float = 0.5
    max_inflight: int = 8


class HttpBackend(Backend):
    """Backend adapter over HTTP with bounded in-flight requests per stage and
    exponential backoff with jitter on connection failures and 5xx replies."""

    def __init__(self, endpoints: dict[str, str], policy: ClientPolicy | None = None):
        missing = [s for s in STAGES if s not in endpoints]
        if missing:
            raise ValueError(f"missing endpoints for stages: {missing}")
        self._endpoints = {s: endpoints[s].rstrip("/") for s in STAGES}
        self._policy = policy or ClientPolicy()
        self._semaphores = {s: threading.Semaphore(self._policy.max_inflight) for s in STAGES}
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, stage: str, payload: dict) -> dict:
        url = f"{self._endpoints[stage]}/v1/{stage}"
        last_error = "no attempt made"
        for attempt in range(self._policy.retries + 1):
            if attempt:
                delay = self._policy.backoff_s * (2 ** (attempt - 1))
                time.sleep(delay * (0.5 + random.random()))
            try:
                with self._semaphores[stage]:
                    resp = self._session().post(
                        url,
                        json=payload,
                        headers={PROTOCOL_HEADER: PROTOCOL_VERSION},
                        timeout=self._policy.timeout_s,
                    )
            except requests.RequestException as exc:
                last_error = str(exc)
                logger.warning("%s request failed (attempt %d): %s", stage, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("%s returned %d (attempt %d)", stage, resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{stage} rejected request: HTTP {resp.status_code} {resp.text[:200]}")
            if resp.headers.get(PROTOCOL_HEADER) != PROTOCOL_VERSION:
                raise ProtocolError(f"{stage} response missing protocol version header")
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"{stage} returned invalid JSON: {exc}") from exc
        raise StageUnavailable(stage, last_error)

    def available(self) -> bool:
        """Liveness probe: every endpoint answers HTTP at /v1/health."""
        for stage, base in self._endpoints.items():
            try:
                self._session().get(f"{base}/v1/health", timeout=min(5.0, self._policy.timeout_s))
            except requests.RequestException:
                return False
        return True

    def parse(self, instruction: str) -> ParseReply:
        reply = self._post("parse", {"instruction": instruction})
        try:
            return ParseReply(objects=tuple(str(o) for o in reply["objects"]), template=str(reply["template"]))
        except KeyError as exc:
            raise ProtocolError(f"parse reply missing field {exc}") from exc

    def detect(self, image: bytes, phrases: Sequence[str]) -> list[RawDetection]:
        reply = self._post("detect", {"image_b64": encode_image(image), "phrases": list(phrases)})
        out = []
        for det in reply.get("detections", []):
            try:
                out.append(
                    RawDetection(
                        phrase=str(det["phrase"]),
                        bbox=tuple(float(v) for v in det["bbox"]),
                        score=float(det["score"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed detection record: {det!r}") from exc
        return out

    def verify(self, image: bytes, phrase: str) -> VerifyReply:
        reply = self._post("verify", {"image_b64": encode_image(image), "phrase": phrase})
        keypoints = reply.get("keypoints")
        return VerifyReply(
            match=bool(reply.get("match")),
            confidence=float(reply.get("confidence", 0.0)),
            keypoints=tuple((float(x), float(y)) for x, y in keypoints) if keypoints else None,
        )

    def segment(self, image: bytes, keypoints: Sequence[tuple[float, float]]) -> Box | None:
        reply = self._post(
            "segment",
            {"image_b64": encode_image(image), "keypoints": [[float(x), float(y)] for x, y in keypoints]},
        )
        bbox = reply.get("bbox")
        if bbox is None:
            return None
        return tuple(float(v) for v in bbox)


class BackendServer:
    """Threaded HTTP server exposing any Backend over the /v1/* protocol."""

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self._backend = backend
        handler = _make_handler(backend)
        self._httpd = http.server.ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def endpoints(self) -> dict[str, str]:
        return {stage: self.base_url for stage in STAGES}

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()


def _make_handler(backend: Backend):
    class Handler(http.server.BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("mock-serve: " + fmt, *args)

        def _reply(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header(PROTOCOL_HEADER, PROTOCOL_VERSION)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/health":
                self._reply(200, {"ok": True})
            else:
                self._reply(404, {"error": "not found"})

        def do_POST(self):
            stage = self.path.rsplit("/", 1)[-1]
            if self.path != f"/v1/{stage}" or stage not in STAGES:
                self._reply(404, {"error": "not found"})
                return
            if self.headers.get(PROTOCOL_HEADER) != PROTOCOL_VERSION:
                self._reply(400, {"error": f"missing or wrong {PROTOCOL_HEADER} header"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                request = json.loads(self.rfile.read(length))
                self._reply(200, self._dispatch(stage, request))
            except (ProtocolError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                self._reply(400, {"error": str(exc)})
            except Exception as exc:  # pragma: no cover - defensive
                logger.exception("backend failure serving %s", stage)
                self._reply(500, {"error": str(exc)})

        def _dispatch(self, stage: str, request: dict) -> dict:
            if stage == "parse":
                reply = backend.parse(str(request["instruction"]))
                return {"objects": list(reply.objects), "template": reply.template}
            if stage == "detect":
                detections = backend.detect(
                    decode_image(request["image_b64"]),
                    [str(p) for p in request["phrases"]],
                )
                return {
                    "detections": [
                        {"phrase": d.phrase, "bbox": list(d.bbox), "score": d.score} for d in detections
                    ]
                }
            if stage == "verify":
                reply = backend.verify(decode_image(request["image_b64"]), str(request["phrase"]))
                out: dict = {"match": reply.match, "confidence": reply.confidence}
                if reply.keypoints is not None:
                    out["keypoints"] = [[x, y] for x, y in reply.keypoints]
                return out
            bbox = backend.segment(
                decode_image(request["image_b64"]),
                [(float(x), float(y)) for x, y in request["keypoints"]],
            )
            return {"bbox": list(bbox) if bbox is not None else None}

    return Handler

"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 backends unavailable at startup,
4 resumable abort (rerun the same command to resume from the journal).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .errors import InterweaveError, ManifestError, ResumableAbort, StageUnavailable
from .metrics import aggregate_report, sample_audit
from .mocks import MockBackend, MockBackendConfig
from .backends import BackendServer
from .pipeline import load_config, plan_mixture, run_convert
from .synth import SceneConfig, TruthIndex, generate_episode_set

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BACKEND_UNAVAILABLE = 3
EXIT_RESUMABLE = 4


def _add_convert(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("convert", help="convert a manifest into an interleaved dataset")
    p.add_argument("--input", required=True, help="input manifest path")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--config", help="YAML config file mirroring the pipeline config")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["dataset", "first-frame"])
    p.add_argument("--mock-in-process", action="store_true", default=None,
                   help="use in-process mock backends instead of HTTP services")
    p.add_argument("--truth", help="ground-truth sidecar for the mock backends")


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic episode dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=SceneConfig.frames)
    p.add_argument("--canvas", default=f"{SceneConfig.width}x{SceneConfig.height}",
                   help="WxH in pixels")
    p.add_argument("--distractors", type=int, default=SceneConfig.distractors)


def _add_mock_serve(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("mock-serve", help="serve the mock backends over HTTP")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--truth", required=True, help="ground-truth sidecar")
    p.add_argument("--detector-error", type=float, default=0.0)
    p.add_argument("--verifier-error", type=float, default=0.0)
    p.add_argument("--correlation", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)


def _add_report(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("report", help="aggregate the report of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of the text summary")


def _add_audit(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("audit", help="sampled audit of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)


def _add_mixture(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("mixture", help="plan dataset mixture allocations")
    p.add_argument("--weights", required=True, help="YAML/JSON file of label -> weight")
    p.add_argument("--total", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interweave", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_convert, _add_synth, _add_mock_serve, _add_report, _add_audit, _add_mixture):
        add(sub)
    return parser


def _cmd_convert(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        workers=args.workers,
        seed=args.seed,
        mode=args.mode,
        mock_in_process=args.mock_in_process,
        truth=args.truth,
    )
    report = run_convert(config, args.input, args.out)
    print(report.summary())
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    width, _, height = args.canvas.partition("x")
    cfg = SceneConfig(
        width=int(width), height=int(height), frames=args.frames, distractors=args.distractors
    )
    manifest, truth_path = generate_episode_set(args.count, cfg, args.seed, args.out)
    print(f"wrote {len(manifest.episodes)} episodes under {args.out} (truth: {truth_path})")
    return EXIT_OK


def _cmd_mock_serve(args: argparse.Namespace) -> int:
    backend = MockBackend(
        TruthIndex.load(args.truth),
        MockBackendConfig(
            p_detect_fail=args.detector_error,
            p_verify_fail=args.verifier_error,
            correlation=args.correlation,
            seed=args.seed,
        ),
    )
    server = BackendServer(backend, host=args.host, port=args.port)
    print(f"serving mock backends on {server.base_url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    report = aggregate_report(args.run)
    if args.json:
        print(json.dumps(report.to_json(), indent=2, sort_keys=True, default=str))
    else:
        print(report.summary())
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    sample = sample_audit(args.run, args.n, args.seed)
    print(json.dumps(sample.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_mixture(args: argparse.Namespace) -> int:
    weights = yaml.safe_load(Path(args.weights).read_text(encoding="utf-8"))
    if not isinstance(weights, dict):
        raise ValueError("weights file must map labels to weights")
    allocation = plan_mixture({str(k): float(v) for k, v in weights.items()}, args.total)
    print(json.dumps(allocation, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "convert": _cmd_convert,
    "synth": _cmd_synth,
    "mock-serve": _cmd_mock_serve,
    "report": _cmd_report,
    "audit": _cmd_audit,
    "mixture": _cmd_mixture,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ResumableAbort as exc:
        logger.error("%s", exc)
        return EXIT_RESUMABLE
    except StageUnavailable as exc:
        logger.error("%s", exc)
        return EXIT_BACKEND_UNAVAILABLE
    except (ManifestError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except InterweaveError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ingest, generate, present, evaluate, compare, render."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence
from xml.etree import ElementTree

from slidecast.errors import SlidecastError
from slidecast.evaluation import JudgeConfig, evaluate_corpus, report_json
from slidecast.export import render_html, render_markdown, write_assets
from slidecast.gateway import DEFAULT_API_BASE_ENV, DEFAULT_API_KEY_ENV, BackendConfig, BackendKind, Gateway
from slidecast.ingest import extract_text_and_images, load_document
from slidecast.presentation import AudioManifest, TtsBackend, TtsKind, decode_wav, present_deck
from slidecast.prompts import AudienceLevel
from slidecast.slides import SLIDE_CAP, BaselineMode, Deck, GenerationConfig, generate_baseline_deck, run_pipeline

logger = logging.getLogger("slidecast")

DEFAULT_API_BASE = "https://api.openai.com/v1"
METHODS = ("pass", "flat", "cot", "cons")


class UsageError(Exception):
    pass


class OperationalError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class RunConfig:
    backend: BackendConfig = field(default_factory=lambda: BackendConfig(BackendKind.HTTP, base_url=DEFAULT_API_BASE))
    model_id: str = "gpt-4o"
    audience: AudienceLevel = AudienceLevel.TECHNICAL
    min_slides: int = 1
    max_slides: int = 10
    max_bullets: int = 7
    jaccard_threshold: float = 0.6
    images_per_slide: int = 2
    multimodal: bool = False
    workers: int = 4
    tts: TtsBackend = field(default_factory=TtsBackend)
    output_dir: Path = Path("out")
    prompts_dir: Optional[str] = None
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    judge_backend: Optional[BackendConfig] = None

    def __post_init__(self) -> None:
        for knob in ("min_slides", "max_slides", "max_bullets", "jaccard_threshold", "images_per_slide", "workers"):
            if getattr(self, knob) <= 0:
                raise UsageError(f"config value {knob} must be positive")
        if self.max_slides > SLIDE_CAP:
            raise UsageError(f"max_slides may not exceed {SLIDE_CAP}")

    def generation(self) -> GenerationConfig:
        try:
            return GenerationConfig(
                model_id=self.model_id,
                min_slides=self.min_slides,
                max_slides=self.max_slides,
                max_bullets=self.max_bullets,
                jaccard_threshold=self.jaccard_threshold,
                images_per_slide=self.images_per_slide,
                multimodal=self.multimodal,
                workers=self.workers,
                prompts_dir=self.prompts_dir,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def _backend_from(data: dict[str, Any]) -> BackendConfig:
    kind = BackendKind(data.get("kind", BackendKind.HTTP.value))
    base_url = data.get("base_url")
    if kind is BackendKind.HTTP and not base_url:
        base_url = os.environ.get(DEFAULT_API_BASE_ENV) or DEFAULT_API_BASE
    mock_script = data.get("mock_script")
    return BackendConfig(
        kind=kind,
        base_url=base_url if kind is BackendKind.HTTP else None,
        api_key_env=data.get("api_key_env", DEFAULT_API_KEY_ENV),
        timeout=float(data.get("timeout", 120.0)),
        max_in_flight=int(data.get("max_in_flight", 4)),
        mock_script=Path(mock_script) if mock_script else None,
        json_mode=bool(data.get("json_mode", True)),
    )


def load_config(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _backend_overrides(base: dict[str, Any], kind: Optional[str], script: Optional[str],
                       api_base: Optional[str], max_in_flight: Optional[int]) -> dict[str, Any]:
    data = dict(base)
    if kind:
        data["kind"] = BackendKind.MOCK.value if kind == "mock" else BackendKind.HTTP.value
    if script:
        data["mock_script"] = script
    if api_base:
        data["base_url"] = api_base
    if max_in_flight:
        data["max_in_flight"] = max_in_flight
    if data.get("kind") == BackendKind.MOCK.value and not data.get("mock_script"):
        raise UsageError("the mock backend needs --mock-script")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    data = load_config(args.config)
    try:
        backend_data = _backend_overrides(data.get("backend", {}), args.backend, args.mock_script,
                                          args.api_base, args.max_in_flight)
        backend = _backend_from(backend_data)

        tts_data = dict(data.get("tts", {}))
        tts_flag = getattr(args, "tts", None)
        if tts_flag:
            tts_data["kind"] = {"http": TtsKind.HTTP, "command": TtsKind.COMMAND, "stub": TtsKind.STUB}[tts_flag].value
        if getattr(args, "tts_endpoint", None):
            tts_data["endpoint_or_command"] = args.tts_endpoint
        if getattr(args, "tts_command", None):
            tts_data["endpoint_or_command"] = args.tts_command
        if getattr(args, "voice", None):
            tts_data["voice_id"] = args.voice
        tts = TtsBackend(
            kind=TtsKind(tts_data.get("kind", TtsKind.STUB.value)),
            endpoint_or_command=tts_data.get("endpoint_or_command", ""),
            voice_id=tts_data.get("voice_id"),
            timeout=float(tts_data.get("timeout", 120.0)),
        )

        judge_data = dict(data.get("judge", {}))
        for flag, key in (("judge_model", "model_id"), ("spread", "spread")):
            if getattr(args, flag, None):
                judge_data[key] = getattr(args, flag)
        if getattr(args, "deck_only", False):
            judge_data["include_document"] = False
        if getattr(args, "per_dimension", False):
            judge_data["per_dimension"] = True
        judge_backend_data = judge_data.pop("backend", None)
        prompts_dir = args.prompts_dir or data.get("prompts_dir")
        judge = JudgeConfig(prompts_dir=prompts_dir, **judge_data)

        judge_backend = None
        if judge_backend_data or getattr(args, "judge_backend", None):
            judge_backend = _backend_from(_backend_overrides(
                judge_backend_data or {}, getattr(args, "judge_backend", None),
                getattr(args, "judge_mock_script", None) or args.mock_script, None, args.max_in_flight,
            ))

        knobs = {k: data[k] for k in ("min_slides", "max_slides", "max_bullets", "jaccard_threshold",
                                      "images_per_slide", "workers") if k in data}
        audience = getattr(args, "audience", None) or data.get("audience", AudienceLevel.TECHNICAL.value)
        return RunConfig(
            backend=backend,
            model_id=args.model or data.get("model_id", "gpt-4o"),
            audience=AudienceLevel(audience),
            multimodal=bool(getattr(args, "multimodal", False) or data.get("multimodal", False)),
            tts=tts,
            output_dir=Path(args.out or data.get("output_dir", "out")),
            prompts_dir=prompts_dir,
            judge=judge,
            judge_backend=judge_backend,
            **knobs,
        )
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# -- plumbing -------------------------------------------------------------------------


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except SlidecastError as exc:
        raise OperationalError(exc.stage or name, f"{type(exc).__name__}: {Exception.__str__(exc)}") from exc
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise OperationalError(name, f"{type(exc).__name__}: {exc}") from exc


def _gateway(backend: BackendConfig) -> Gateway:
    with stage("gateway"):
        return Gateway(backend)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _check_parses(path: Path) -> None:
    if path.suffix == ".json":
        json.loads(path.read_text(encoding="utf-8"))
    elif path.suffix == ".wav":
        decode_wav(path.read_bytes())
    elif path.suffix == ".html":
        # the renderer emits XHTML-compatible markup, so a strict XML parse checks well-formedness
        text = path.read_text(encoding="utf-8").removeprefix("<!DOCTYPE html>")
        try:
            ElementTree.fromstring(text)
        except ElementTree.ParseError as exc:
            raise ValueError(str(exc)) from None
    elif path.stat().st_size == 0:
        raise ValueError("empty file")


def verify_artifacts(paths: Sequence[Path]) -> None:
    """Exit 0 only when every declared artifact exists and parses."""
    for path in paths:
        if not path.is_file():
            raise OperationalError("verify", f"missing artifact {path}")
        try:
            _check_parses(path)
        except ValueError as exc:
            raise OperationalError("verify", f"artifact {path} does not parse: {exc}") from None


# -- subcommands --------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    with stage("ingest"):
        doc = load_document(args.file)
    out = _write(cfg.output_dir / "source.json", json.dumps(doc.to_dict(), ensure_ascii=False, indent=2) + "\n")
    return [out]


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    with stage("ingest"):
        doc = load_document(args.file)
    gateway = _gateway(cfg.backend)
    gen = cfg.generation()
    with stage("generate"):
        if args.method == "pass":
            deck = run_pipeline(doc, cfg.audience, gateway, gen)
        else:
            with stage("extract_text_and_images"):
                text, _ = extract_text_and_images(doc)
            deck = generate_baseline_deck(text, BaselineMode(args.method), gateway, gen,
                                          doc=doc, audience=cfg.audience)
    out = cfg.output_dir
    with stage("export"):
        paths = [
            _write(out / f"deck.{deck.method_tag}.json", deck.to_json()),
            _write(out / "deck.md", render_markdown(deck)),
            _write(out / "deck.html", render_html(deck)),
        ]
        paths += write_assets(doc, deck, out)
    for w in deck.warnings:
        logger.info("deck warning: %s", w)
    return paths


def _read_deck(path: str) -> Deck:
    with stage("load_deck"):
        try:
            return Deck.from_json(Path(path).read_text(encoding="utf-8"))
        except (KeyError, TypeError, ValueError) as exc:
            raise OperationalError("load_deck", f"invalid deck file {path}: {exc}") from None


def cmd_present(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    deck = _read_deck(args.deck)
    gateway = _gateway(cfg.backend)
    with stage("present"):
        _, clips, manifest = present_deck(deck, gateway, cfg.generation(), cfg.tts, cfg.output_dir)
    with stage("export"):
        page = _write(cfg.output_dir / "presentation.html", render_html(deck, manifest))
    return [Path(c.file_ref) for c in clips] + [cfg.output_dir / "manifest.json", page]


def _evaluate(args: argparse.Namespace, cfg: RunConfig, methods: Optional[list[str]]) -> list[Path]:
    gateway = _gateway(cfg.judge_backend or cfg.backend)
    with stage("evaluate"):
        report = evaluate_corpus(args.corpus, methods, gateway, cfg.judge)
    for failure in report.failures:
        logger.warning("%s/%s failed at %s: %s", failure.doc_id, failure.method_tag, failure.stage, failure.message)
    table = report.table
    sys.stdout.write(table)
    return [
        _write(cfg.output_dir / "report.json", report_json(report)),
        _write(cfg.output_dir / "report.txt", table),
    ]


def _methods(value: Optional[str]) -> Optional[list[str]]:
    if not value:
        return None
    methods = [m.strip() for m in value.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods needs at least one method tag")
    return methods


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    return _evaluate(args, cfg, _methods(args.methods))


def cmd_compare(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    return _evaluate(args, cfg, _methods(args.methods))


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    deck = _read_deck(args.deck)
    manifest = None
    if args.manifest:
        with stage("load_manifest"):
            try:
                manifest = AudioManifest.load(args.manifest)
            except (KeyError, TypeError, ValueError) as exc:
                raise OperationalError("load_manifest", f"invalid manifest: {exc}") from None
    with stage("render"):
        return [
            _write(cfg.output_dir / "deck.md", render_markdown(deck)),
            _write(cfg.output_dir / "deck.html", render_html(deck, manifest)),
        ]


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--out", help="artifact directory (default: out)")
    common.add_argument("--backend", choices=("http", "mock"), help="chat backend")
    common.add_argument("--mock-script", help="scripted mock response table (JSON)")
    common.add_argument("--api-base", help=f"OpenAI-compatible base URL (default: ${DEFAULT_API_BASE_ENV})")
    common.add_argument("--model", help="model id sent to the backend")
    common.add_argument("--max-in-flight", type=int, help="concurrent request limit")
    common.add_argument("--prompts-dir", help="directory overriding the bundled prompt templates")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slidecast", description="Document to slides, narration and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="dump the parsed document as JSON")
    p.add_argument("file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate", parents=[common], help="generate a deck from a document")
    p.add_argument("file")
    p.add_argument("--audience", choices=[a.value for a in AudienceLevel])
    p.add_argument("--method", choices=METHODS, default="pass")
    p.add_argument("--multimodal", action="store_true", help="send images to the model for mapping")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("present", parents=[common], help="write narration scripts, audio and manifest")
    p.add_argument("deck")
    p.add_argument("--tts", choices=("http", "command", "stub"))
    p.add_argument("--tts-endpoint")
    p.add_argument("--tts-command")
    p.add_argument("--voice")
    p.set_defaults(func=cmd_present)

    for name, func, help_text in (
        ("evaluate", cmd_evaluate, "judge every deck in a corpus"),
        ("compare", cmd_compare, "comparison table across methods"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("corpus")
        p.add_argument("--methods", required=name == "compare", help="comma-separated method tags")
        p.add_argument("--judge-model")
        p.add_argument("--judge-backend", choices=("http", "mock"))
        p.add_argument("--judge-mock-script")
        p.add_argument("--deck-only", action="store_true", help="do not show the judge the source document")
        p.add_argument("--per-dimension", action="store_true", help="one judge call per dimension")
        p.add_argument("--spread", choices=("stderr", "sd"))
        p.set_defaults(func=func)

    p = sub.add_parser("render", parents=[common], help="render a deck JSON to Markdown and HTML")
    p.add_argument("deck")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_render)
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        paths = args.func(args, cfg)
        with stage("verify"):
            verify_artifacts(paths)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"slidecast: error: {exc}", file=sys.stderr)
        return 2
    except OperationalError as exc:
        print(f"slidecast: error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        logger.info("wrote %s", path)
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

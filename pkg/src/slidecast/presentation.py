"""Presenter scripts, speech synthesis and the slide-synchronized audio manifest."""

from __future__ import annotations

import io
import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence

import httpx

from slidecast.errors import (
    DuplicateClip,
    MissingClip,
    PreconditionError,
    SlidecastError,
    TtsFailed,
    TtsUnavailable,
)
from slidecast.gateway import Gateway
from slidecast.prompts import PromptName
from slidecast.slides import Deck, GenerationConfig, Slide

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
CHANNELS = 1
SAMPLE_WIDTH = 2
MAX_CHUNK_CHARS = 400
STUB_SECONDS_PER_CHUNK = 1.0

AUDIO_FORMAT = {
    "container": "WAV",
    "encoding": "pcm_s16le",
    "channels": CHANNELS,
    "sample_rate": SAMPLE_RATE,
}


@dataclass(frozen=True)
class SpeakerScript:
    slide_index: int
    raw: str
    refined: str
    chunks: tuple[str, ...]


@dataclass(frozen=True)
class AudioClip:
    slide_index: int
    file_ref: Path
    duration: float
    frames: int


@dataclass(frozen=True)
class ManifestEntry:
    slide_index: int
    script_ref: str
    clip_ref: str
    duration: float


@dataclass
class AudioManifest:
    doc_id: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "doc_id": self.doc_id,
            "audio_format": dict(AUDIO_FORMAT),
            "entries": [
                {
                    "slide_index": e.slide_index,
                    "script_ref": e.script_ref,
                    "clip_ref": e.clip_ref,
                    "duration": e.duration,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AudioManifest":
        return cls(
            doc_id=data["doc_id"],
            entries=[
                ManifestEntry(int(e["slide_index"]), e["script_ref"], e["clip_ref"], float(e["duration"]))
                for e in data["entries"]
            ],
        )

    @classmethod
    def load(cls, path: str | Path) -> "AudioManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class TtsKind(str, Enum):
    HTTP = "http"
    COMMAND = "external_command"
    STUB = "stub_silence"


@dataclass(frozen=True)
class TtsBackend:
    kind: TtsKind = TtsKind.STUB
    endpoint_or_command: str = ""
    voice_id: Optional[str] = None
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.kind is not TtsKind.STUB and not self.endpoint_or_command:
            raise ValueError(f"{self.kind.value} TTS backend needs an endpoint or command")


# -- scripts ----------------------------------------------------------------------


def _script_shape(value: Any) -> bool:
    return isinstance(value, dict) and isinstance(value.get("script"), str) and bool(value["script"].strip())


def generate_script(slide: Slide, gateway: Gateway, config: GenerationConfig) -> str:
    if not slide.content.strip():
        raise PreconditionError(f"slide {slide.index} has no content to narrate")
    prompt = config.prompts.render(
        PromptName.SPEAKER_NOTES,
        slide_title=slide.title,
        slide_bullets="\n".join(f"- {b}" for b in slide.bullets),
        slide_content=slide.content,
    )
    try:
        return config.ask(gateway, prompt, _script_shape)["script"].strip()
    except SlidecastError as exc:
        exc.stage = exc.stage or "generate_script"
        raise


_ABBREVIATIONS = [
    (re.compile(r"\be\.g\.,?", re.IGNORECASE), "for example"),
    (re.compile(r"\bi\.e\.,?", re.IGNORECASE), "that is"),
    (re.compile(r"\betc\.", re.IGNORECASE), "et cetera."),
    (re.compile(r"\bvs\.", re.IGNORECASE), "versus"),
    (re.compile(r"\s*&\s*"), " and "),
    (re.compile(r"(\d)\s*%"), r"\1 percent"),
]


def speakable(text: str) -> str:
    """Strip markup, citations and URLs so a TTS voice can read the text."""
    text = re.sub(r"!\[[^\]]*\]\([^)]*\)", " ", text)
    text = re.sub(r"\[([^\]]+)\]\((?:[^)]*)\)", r"\1", text)
    text = re.sub(r"(?:https?|ftp)://\S+|\bwww\.\S+", " ", text)
    text = re.sub(r"\[[^\]]*\]", " ", text)
    text = re.sub(r"<[^>]+>", " ", text)
    text = re.sub(r"^\s{0,3}#{1,6}\s*", "", text, flags=re.MULTILINE)
    text = re.sub(r"^\s*(?:[-*+•]|\d+[.)])\s+", "", text, flags=re.MULTILINE)
    text = re.sub(r"(\*\*|__|`+|~~)", "", text)
    text = re.sub(r"(?<!\w)[*_](\S(?:.*?\S)?)[*_](?!\w)", r"\1", text)
    for pattern, repl in _ABBREVIATIONS:
        text = pattern.sub(repl, text)
    text = re.sub(r"\(\s*\)", " ", text)
    text = " ".join(text.split())
    text = re.sub(r"\s+([,.;:!?])", r"\1", text)
    text = re.sub(r"([,;:])(?:[,;:])+", r"\1", text)
    text = text.strip(" ,;:")
    if text and text[-1] not in ".!?":
        text += "."
    return text


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_END.split(text) if s]


def chunk_text(text: str, limit: int = MAX_CHUNK_CHARS) -> list[str]:
    """Greedily pack whole sentences into chunks of at most ``limit`` characters.

    A sentence longer than the limit is split between words.
    """
    pieces: list[str] = []
    for sentence in split_sentences(text):
        if len(sentence) <= limit:
            pieces.append(sentence)
            continue
        current = ""
        for word in sentence.split(" "):
            while len(word) > limit:
                if current:
                    pieces.append(current)
                    current = ""
                pieces.append(word[:limit])
                word = word[limit:]
            candidate = f"{current} {word}" if current else word
            if len(candidate) > limit:
                pieces.append(current)
                current = word
            else:
                current = candidate
        if current:
            pieces.append(current)

    chunks: list[str] = []
    for piece in pieces:
        if chunks and len(chunks[-1]) + 1 + len(piece) <= limit:
            chunks[-1] = f"{chunks[-1]} {piece}"
        else:
            chunks.append(piece)
    return chunks


def refine_script(raw: str, gateway: Gateway, config: GenerationConfig) -> tuple[str, list[str]]:
    """Have the model polish the notes, then normalize and chunk them for TTS."""
    if not raw.strip():
        raise PreconditionError("cannot refine an empty script")
    prompt = config.prompts.render(PromptName.SPEAKER_NOTES_REFINE, script=raw)
    try:
        polished = config.ask(gateway, prompt, _script_shape)["script"]
    except SlidecastError as exc:
        exc.stage = exc.stage or "refine_script"
        raise
    refined = speakable(polished)
    if not refined:
        refined = speakable(raw)
    if not refined:
        raise PreconditionError("script has no speakable text")
    return refined, chunk_text(refined)


def write_script(slide: Slide, gateway: Gateway, config: GenerationConfig) -> SpeakerScript:
    raw = generate_script(slide, gateway, config)
    refined, chunks = refine_script(raw, gateway, config)
    return SpeakerScript(slide.index, raw, refined, tuple(chunks))


# -- synthesis ----------------------------------------------------------------------


def silence(seconds: float) -> bytes:
    frames = round(seconds * SAMPLE_RATE)
    return wav_bytes(b"\x00\x00" * frames)


def wav_bytes(pcm: bytes) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(CHANNELS)
        w.setsampwidth(SAMPLE_WIDTH)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm)
    return buf.getvalue()


def decode_wav(data: bytes) -> bytes:
    """Return the PCM frames of a WAV payload in the clip format, else raise ValueError."""
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            params = (w.getnchannels(), w.getsampwidth(), w.getframerate())
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"invalid WAV data: {exc}") from None
    if params != (CHANNELS, SAMPLE_WIDTH, SAMPLE_RATE):
        raise ValueError(
            f"WAV format {params[0]} channel(s), {8 * params[1]}-bit, {params[2]} Hz; "
            f"expected mono 16-bit {SAMPLE_RATE} Hz"
        )
    return frames


def _speak_http(backend: TtsBackend, text: str, index: int, client: httpx.Client) -> bytes:
    try:
        resp = client.post(backend.endpoint_or_command, json={"text": text, "voice_id": backend.voice_id})
    except httpx.TransportError as exc:
        raise TtsUnavailable(f"TTS endpoint unreachable: {type(exc).__name__}") from None
    if resp.status_code != 200:
        raise TtsFailed(index, f"status {resp.status_code}: {resp.text[:200]}")
    return resp.content


def _speak_command(backend: TtsBackend, text: str, index: int) -> bytes:
    argv = shlex.split(backend.endpoint_or_command)
    if backend.voice_id:
        env = {**os.environ, "SLIDECAST_VOICE": backend.voice_id}
    else:
        env = None
    try:
        proc = subprocess.run(argv, input=text.encode("utf-8"), capture_output=True,
                              timeout=backend.timeout, env=env, check=False)
    except FileNotFoundError:
        raise TtsUnavailable(f"TTS command not found: {argv[0]!r}") from None
    except subprocess.TimeoutExpired:
        raise TtsFailed(index, f"command timed out after {backend.timeout} s") from None
    if proc.returncode != 0:
        raise TtsFailed(index, f"exit status {proc.returncode}: {proc.stderr.decode(errors='replace')[:200]}")
    return proc.stdout


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def clip_name(slide_index: int) -> str:
    return f"slide_{slide_index:03d}.wav"


def synthesize(
    script: SpeakerScript,
    backend: TtsBackend,
    out_dir: str | Path,
    transport: Optional[httpx.BaseTransport] = None,
) -> AudioClip:
    """Synthesize every chunk and join them sample-wise into one clip per slide."""
    if not script.chunks:
        raise PreconditionError(f"script for slide {script.slide_index} has no chunks")
    out_dir = Path(out_dir)
    pcm = bytearray()
    client = httpx.Client(timeout=backend.timeout, transport=transport) if backend.kind is TtsKind.HTTP else None
    try:
        for i, chunk in enumerate(script.chunks):
            if backend.kind is TtsKind.STUB:
                payload = silence(STUB_SECONDS_PER_CHUNK)
            elif backend.kind is TtsKind.HTTP:
                payload = _speak_http(backend, chunk, i, client)
            else:
                payload = _speak_command(backend, chunk, i)
            try:
                pcm += decode_wav(payload)
            except ValueError as exc:
                raise TtsFailed(i, str(exc)) from None
    finally:
        if client is not None:
            client.close()

    path = out_dir / clip_name(script.slide_index)
    write_atomic(path, wav_bytes(bytes(pcm)))
    frames = len(pcm) // (SAMPLE_WIDTH * CHANNELS)
    return AudioClip(script.slide_index, path, frames / SAMPLE_RATE, frames)


# -- manifest -----------------------------------------------------------------------


def _check_cover(kind: str, indices: Sequence[int], n: int) -> None:
    seen: set[int] = set()
    for idx in indices:
        if idx in seen:
            if kind == "clip":
                raise DuplicateClip(idx)
            raise PreconditionError(f"more than one script for slide {idx}")
        if not 0 <= idx < n:
            raise PreconditionError(f"{kind} for slide {idx}, but the deck has {n} slides")
        seen.add(idx)
    for idx in range(n):
        if idx not in seen:
            if kind == "clip":
                raise MissingClip(idx)
            raise PreconditionError(f"no script for slide {idx}")


def build_manifest(
    deck: Deck,
    clips: Sequence[AudioClip],
    scripts: Sequence[SpeakerScript],
    out_dir: str | Path,
) -> AudioManifest:
    """Write per-slide script files and ``manifest.json`` next to the clips."""
    n = len(deck.slides)
    _check_cover("clip", [c.slide_index for c in clips], n)
    _check_cover("script", [s.slide_index for s in scripts], n)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_by = {c.slide_index: c for c in clips}
    script_by = {s.slide_index: s for s in scripts}

    entries = []
    for idx in range(n):
        script_ref = f"slide_{idx:03d}.txt"
        write_atomic(out_dir / script_ref, (script_by[idx].refined + "\n").encode("utf-8"))
        clip = clip_by[idx]
        clip_path = Path(clip.file_ref)
        try:
            clip_ref = clip_path.resolve().relative_to(out_dir.resolve()).as_posix()
        except ValueError:
            clip_ref = str(clip_path)
        entries.append(ManifestEntry(idx, script_ref, clip_ref, clip.duration))

    manifest = AudioManifest(deck.doc_id, entries)
    write_atomic(out_dir / "manifest.json",
                 (json.dumps(manifest.to_dict(), indent=2) + "\n").encode("utf-8"))
    return manifest


def present_deck(
    deck: Deck,
    gateway: Gateway,
    config: GenerationConfig,
    backend: TtsBackend,
    out_dir: str | Path,
    workers: Optional[int] = None,
) -> tuple[list[SpeakerScript], list[AudioClip], AudioManifest]:
    """Scripts, audio and manifest for every slide; slides are processed concurrently."""

    def one(slide: Slide) -> tuple[SpeakerScript, AudioClip]:
        script = write_script(slide, gateway, config)
        try:
            clip = synthesize(script, backend, out_dir)
        except SlidecastError as exc:
            exc.stage = exc.stage or "synthesize"
            raise
        return script, clip

    with ThreadPoolExecutor(max_workers=workers or config.workers) as pool:
        results = list(pool.map(one, deck.slides))
    scripts = [r[0] for r in results]
    clips = [r[1] for r in results]
    try:
        manifest = build_manifest(deck, clips, scripts, out_dir)
    except SlidecastError as exc:
        exc.stage = exc.stage or "build_manifest"
        raise
    return scripts, clips, manifest

from __future__ import annotations

import json
import shlex
import sys
import wave
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from conftest import js, responder_gateway
from slidecast.errors import (
    DuplicateClip,
    MissingClip,
    PreconditionError,
    TransportError,
    TtsFailed,
    TtsUnavailable,
)
from slidecast.gateway import BackendConfig, BackendKind, Gateway
from slidecast.prompts import AudienceLevel
from slidecast.presentation import (
    MAX_CHUNK_CHARS,
    SAMPLE_RATE,
    AudioClip,
    AudioManifest,
    SpeakerScript,
    TtsBackend,
    TtsKind,
    build_manifest,
    chunk_text,
    generate_script,
    present_deck,
    refine_script,
    silence,
    speakable,
    synthesize,
    wav_bytes,
)
from slidecast.slides import Deck, Slide


def slide(i=0, title="Introduction to Similarity Search", content="Similarity search finds documents.") -> Slide:
    return Slide(i, title, content, ("Finds similar documents.",))


def deck_of(n: int) -> Deck:
    return Deck("doc1", AudienceLevel.TECHNICAL, [slide(i, f"Slide {i}") for i in range(n)])


def script(i: int, chunks=("Hello there.",)) -> SpeakerScript:
    return SpeakerScript(i, " ".join(chunks), " ".join(chunks), tuple(chunks))


def wav_info(path: Path) -> tuple[int, int, int, int]:
    with wave.open(str(path), "rb") as w:
        return w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()


# -- scripts ----------------------------------------------------------------------------


def test_generate_script_returns_narration(config):
    gw, mock = responder_gateway(lambda t: js({"script": "Welcome. Today we look at similarity search."}))
    assert generate_script(slide(), gw, config) == "Welcome. Today we look at similarity search."
    prompt = mock.calls[0].messages[-1].text
    assert "Introduction to Similarity Search" in prompt and "- Finds similar documents." in prompt


def test_generate_script_needs_content(config):
    gw, _ = responder_gateway(lambda t: js({"script": "x"}))
    with pytest.raises(PreconditionError):
        generate_script(slide(content="  "), gw, config)


def test_generate_script_transport_failure_is_staged(config, monkeypatch):
    monkeypatch.setenv("PASS_API_KEY", "k")
    gw = Gateway(
        BackendConfig(BackendKind.HTTP, base_url="http://llm.local/v1"),
        transport=httpx.MockTransport(lambda r: httpx.Response(502)),
        sleep=lambda s: None,
    )
    with pytest.raises(TransportError) as info:
        generate_script(slide(), gw, config)
    assert info.value.stage == "generate_script"


def test_speakable_removes_citation_and_url():
    assert speakable("e.g. [1] visit https://x.y") == "for example visit."


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("**Bold** and _italic_ text", "Bold and italic text."),
        ("- first point\n- second point", "first point second point."),
        ("See [the docs](http://a.b) now!", "See the docs now!"),
        ("Accuracy rose 5% <b>fast</b>", "Accuracy rose 5 percent fast."),
        ("Already clean.", "Already clean."),
    ],
)
def test_speakable_rules(raw, expected):
    assert speakable(raw) == expected


def test_three_long_sentences_make_three_chunks():
    sentences = [("word " * 60)[:299] + "." for _ in range(3)]
    assert all(len(s) == 300 for s in sentences)
    chunks = chunk_text(" ".join(sentences))
    assert chunks == sentences


def test_short_clean_script_is_one_chunk(config):
    gw, _ = responder_gateway(lambda t: js({"script": "This is short and clean."}))
    refined, chunks = refine_script("this is short and clean", gw, config)
    assert refined == "This is short and clean."
    assert chunks == [refined]


def test_refine_normalizes_model_output(config):
    gw, mock = responder_gateway(lambda t: js({"script": "**Now** see [1] at https://example.org today"}))
    refined, _ = refine_script("raw notes", gw, config)
    assert refined == "Now see at today."
    assert "raw notes" in mock.calls[0].messages[-1].text


_sentence = st.builds(
    lambda words, end: " ".join(words) + end,
    st.lists(st.text(alphabet="abcdefghij", min_size=1, max_size=12), min_size=1, max_size=60),
    st.sampled_from([".", "!", "?"]),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(_sentence, min_size=1, max_size=12))
def test_chunks_reassemble_and_respect_limit(sentences):
    text = " ".join(sentences)
    chunks = chunk_text(text)
    assert all(0 < len(c) <= MAX_CHUNK_CHARS for c in chunks)
    assert " ".join(chunks).split() == text.split()
    for c in chunks:
        # chunks made of whole sentences end at a sentence boundary
        if all(len(s) <= MAX_CHUNK_CHARS for s in sentences):
            assert c[-1] in ".!?"


# -- synthesis --------------------------------------------------------------------------


def test_stub_three_chunks_three_seconds(tmp_path):
    clip = synthesize(script(0, ("A.", "B.", "C.")), TtsBackend(), tmp_path)
    assert abs(clip.duration - 3.0) <= 0.001
    assert wav_info(clip.file_ref) == (1, 2, SAMPLE_RATE, 3 * SAMPLE_RATE)


def test_stub_is_deterministic(tmp_path):
    a = synthesize(script(0, ("A.", "B.")), TtsBackend(), tmp_path / "a")
    b = synthesize(script(0, ("A.", "B.")), TtsBackend(), tmp_path / "b")
    assert a.file_ref.read_bytes() == b.file_ref.read_bytes()


def test_empty_chunks_rejected(tmp_path):
    with pytest.raises(PreconditionError):
        synthesize(SpeakerScript(0, "x", "x", ()), TtsBackend(), tmp_path)


def test_http_invalid_wav(tmp_path):
    backend = TtsBackend(TtsKind.HTTP, "http://tts.local/speak")
    transport = httpx.MockTransport(lambda r: httpx.Response(200, content=b"RIFFjunk"))
    with pytest.raises(TtsFailed) as info:
        synthesize(script(0, ("One.", "Two.")), backend, tmp_path, transport)
    assert info.value.chunk_index == 0
    assert not list(tmp_path.glob("*.wav"))


def test_http_backend_contract(tmp_path):
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(200, content=silence(0.5))

    backend = TtsBackend(TtsKind.HTTP, "http://tts.local/speak", voice_id="v1")
    clip = synthesize(script(2, ("One.", "Two.")), backend, tmp_path, httpx.MockTransport(handler))
    assert bodies == [{"text": "One.", "voice_id": "v1"}, {"text": "Two.", "voice_id": "v1"}]
    assert abs(clip.duration - 1.0) <= 0.001
    assert clip.file_ref.name == "slide_002.wav"


def test_http_wrong_sample_rate_rejected(tmp_path):
    import io

    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\x00\x00" * 100)
    backend = TtsBackend(TtsKind.HTTP, "http://tts.local/speak")
    transport = httpx.MockTransport(lambda r: httpx.Response(200, content=buf.getvalue()))
    with pytest.raises(TtsFailed):
        synthesize(script(0), backend, tmp_path, transport)


def test_http_unreachable(tmp_path):
    def handler(request):
        raise httpx.ConnectError("down")

    backend = TtsBackend(TtsKind.HTTP, "http://tts.local/speak")
    with pytest.raises(TtsUnavailable):
        synthesize(script(0), backend, tmp_path, httpx.MockTransport(handler))


TTS_SCRIPT = (
    "import sys, wave; text = sys.stdin.read(); "
    "w = wave.open(sys.stdout.buffer, 'wb'); w.setnchannels(1); w.setsampwidth(2); "
    "w.setframerate(22050); w.writeframes(b'\\x00\\x00' * (100 * len(text))); w.close()"
)


def test_command_backend(tmp_path):
    cmd = f"{shlex.quote(sys.executable)} -c {shlex.quote(TTS_SCRIPT)}"
    clip = synthesize(script(0, ("abc.", "de.")), TtsBackend(TtsKind.COMMAND, cmd), tmp_path)
    assert clip.frames == 100 * (4 + 3)


def test_command_missing(tmp_path):
    with pytest.raises(TtsUnavailable):
        synthesize(script(0), TtsBackend(TtsKind.COMMAND, "no-such-tts-binary-xyz"), tmp_path)


def test_command_failure(tmp_path):
    cmd = f"{shlex.quote(sys.executable)} -c 'import sys; sys.exit(3)'"
    with pytest.raises(TtsFailed):
        synthesize(script(0), TtsBackend(TtsKind.COMMAND, cmd), tmp_path)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4000), min_size=1, max_size=5))
def test_clip_duration_is_sum_of_chunk_durations(frame_counts):
    import tempfile

    payloads = iter([wav_bytes(b"\x01\x00" * n) for n in frame_counts])
    transport = httpx.MockTransport(lambda r: httpx.Response(200, content=next(payloads)))
    backend = TtsBackend(TtsKind.HTTP, "http://tts.local/speak")
    chunks = tuple(f"Chunk {i}." for i in range(len(frame_counts)))
    with tempfile.TemporaryDirectory() as d:
        clip = synthesize(script(0, chunks), backend, d, transport)
        assert abs(clip.duration - sum(n / SAMPLE_RATE for n in frame_counts)) <= 0.001
        assert wav_info(clip.file_ref)[3] == sum(frame_counts)


# -- manifest ---------------------------------------------------------------------------


def clips_for(tmp_path, indices) -> list[AudioClip]:
    return [synthesize(script(i), TtsBackend(), tmp_path) for i in indices]


def test_manifest_four_slides(tmp_path):
    manifest = build_manifest(deck_of(4), clips_for(tmp_path, [3, 1, 0, 2]), [script(i) for i in range(4)], tmp_path)
    assert [e.slide_index for e in manifest.entries] == [0, 1, 2, 3]
    assert [e.clip_ref for e in manifest.entries] == [f"slide_00{i}.wav" for i in range(4)]
    assert AudioManifest.load(tmp_path / "manifest.json") == manifest
    assert (tmp_path / "slide_000.txt").read_text() == "Hello there.\n"


def test_manifest_missing_clip(tmp_path):
    with pytest.raises(MissingClip) as info:
        build_manifest(deck_of(4), clips_for(tmp_path, [0, 1, 3]), [script(i) for i in range(4)], tmp_path)
    assert info.value.slide_index == 2


def test_manifest_duplicate_clip(tmp_path):
    with pytest.raises(DuplicateClip) as info:
        build_manifest(deck_of(4), clips_for(tmp_path, [0, 1, 2, 2, 3]), [script(i) for i in range(4)], tmp_path)
    assert info.value.slide_index == 2


def test_present_deck_end_to_end(tmp_path, config):
    gw, _ = responder_gateway(lambda t: js({"script": "Short narration for this slide."}))
    scripts, clips, manifest = present_deck(deck_of(3), gw, config, TtsBackend(), tmp_path)
    assert len(manifest.entries) == 3
    for i, entry in enumerate(manifest.entries):
        assert entry.slide_index == i
        assert wav_info(tmp_path / entry.clip_ref)[:3] == (1, 2, SAMPLE_RATE)
        assert entry.duration == pytest.approx(len(scripts[i].chunks) * 1.0, abs=0.001)

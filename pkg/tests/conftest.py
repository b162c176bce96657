from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from xml.sax.saxutils import escape

import pytest

from slidecast.gateway import ChatRequest, Gateway, ScriptedMock, request_text
from slidecast.slides import GenerationConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def config() -> GenerationConfig:
    return GenerationConfig(model_id="test-model", workers=2)


def js(value) -> str:
    return json.dumps(value)


def responder_gateway(fn) -> tuple[Gateway, ScriptedMock]:
    """Gateway whose mock answers through ``fn(prompt_text) -> str``."""
    mock = ScriptedMock(responder=lambda req: fn(request_text(req)))
    return Gateway.mock(mock), mock


def user_prompt(request: ChatRequest) -> str:
    return next(m.text for m in request.messages if m.role.value == "user")


# -- DOCX builder ---------------------------------------------------------------------

W_NS = "http://schemas.openxmlformats.org/wordprocessingml/2006/main"
NSDECL = (
    f'xmlns:w="{W_NS}" '
    'xmlns:r="http://schemas.openxmlformats.org/officeDocument/2006/relationships" '
    'xmlns:wp="http://schemas.openxmlformats.org/drawingml/2006/wordprocessingDrawing" '
    'xmlns:a="http://schemas.openxmlformats.org/drawingml/2006/main" '
    'xmlns:pic="http://schemas.openxmlformats.org/drawingml/2006/picture"'
)


def para(text: str, style: str | None = None) -> str:
    ppr = f'<w:pPr><w:pStyle w:val="{style}"/></w:pPr>' if style else ""
    return f'<w:p>{ppr}<w:r><w:t xml:space="preserve">{escape(text)}</w:t></w:r></w:p>'


def image_para(rel_id: str, descr: str | None = None) -> str:
    descr_attr = f' descr="{escape(descr)}"' if descr else ""
    return (
        "<w:p><w:r><w:drawing><wp:inline>"
        f'<wp:docPr id="1" name="Picture 1"{descr_attr}/>'
        '<a:graphic><a:graphicData><pic:pic><pic:blipFill>'
        f'<a:blip r:embed="{rel_id}"/>'
        "</pic:blipFill></pic:pic></a:graphicData></a:graphic>"
        "</wp:inline></w:drawing></w:r></w:p>"
    )


STYLES = (
    f'<w:styles {NSDECL}>'
    '<w:style w:type="paragraph" w:styleId="Heading1"><w:name w:val="heading 1"/></w:style>'
    '<w:style w:type="paragraph" w:styleId="Heading2"><w:name w:val="heading 2"/></w:style>'
    '<w:style w:type="paragraph" w:styleId="Caption"><w:name w:val="caption"/></w:style>'
    "</w:styles>"
)


def build_docx(body: str, media: dict[str, bytes] | None = None, styles: str | None = STYLES,
               extra_parts: dict[str, str] | None = None) -> bytes:
    """Minimal WordprocessingML package; ``media`` maps rId -> PNG bytes."""
    media = media or {}
    rels = "".join(
        f'<Relationship Id="{rid}" Type="http://schemas.openxmlformats.org/officeDocument/2006/'
        f'relationships/image" Target="media/{rid}.png"/>'
        for rid in media
    )
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("[Content_Types].xml", '<?xml version="1.0"?><Types/>')
        zf.writestr("word/document.xml", f'<w:document {NSDECL}><w:body>{body}</w:body></w:document>')
        zf.writestr(
            "word/_rels/document.xml.rels",
            f'<Relationships xmlns="http://schemas.openxmlformats.org/package/2006/relationships">{rels}</Relationships>',
        )
        if styles:
            zf.writestr("word/styles.xml", styles)
        for rid, data in media.items():
            zf.writestr(f"word/media/{rid}.png", data)
        for name, xml in (extra_parts or {}).items():
            zf.writestr(name, xml)
    return buf.getvalue()


@pytest.fixture
def png_bytes() -> bytes:
    return (FIXTURES / "fig1.png").read_bytes()


# -- acceptance summary -----------------------------------------------------------

_ACCEPTANCE: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict}  {label}")


# -- evaluation corpus ------------------------------------------------------------


def write_corpus(root: Path, docs: dict[str, dict[str, list[str]]]) -> Path:
    """``docs`` maps doc id -> {method: slide titles}; each deck gets one bullet per slide."""
    from slidecast.prompts import AudienceLevel
    from slidecast.slides import Deck, Slide

    for doc_id, methods in docs.items():
        d = root / doc_id
        d.mkdir(parents=True)
        (d / "source.md").write_text(f"# {doc_id}\n\nSource text of document {doc_id}.\n")
        for method, titles in methods.items():
            slides = [Slide(i, t, f"content {t}", (f"point {t}",)) for i, t in enumerate(titles)]
            (d / f"deck.{method}.json").write_text(Deck(doc_id, AudienceLevel.TECHNICAL, slides, method).to_json())
    return root


def judge_by_marker(table: dict[tuple[str, str], object]):
    """Judge responder: ``table`` maps (doc id, slide title) found in the prompt -> reply."""

    def answer(text: str) -> str:
        for (doc_id, title), reply in table.items():
            if f"document {doc_id}." in text and f"{title}\n" in text:
                return reply if isinstance(reply, str) else js(reply)
        raise AssertionError("judge prompt matched no scripted deck")

    return answer

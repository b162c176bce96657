from __future__ import annotations

import zipfile
import io

import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_docx, image_para, para
from slidecast.errors import EmptyDocument, MalformedArchive, MalformedXml, MissingDocumentPart, UnsupportedFormat
from slidecast.ingest import (
    BlockKind,
    DocumentFormat,
    ImageAsset,
    SourceDocument,
    TextBlock,
    detect_format,
    extract_text_and_images,
    load_document,
    parse_docx,
    parse_markdown,
    parse_plain_text,
)


# -- detect_format ------------------------------------------------------------------


def test_detect_docx_by_magic():
    assert detect_format("talk.docx", b"PK\x03\x04rest") is DocumentFormat.DOCX


@pytest.mark.parametrize("name", ["notes.md", "NOTES.MARKDOWN", "dir/x.md"])
def test_detect_markdown(name):
    assert detect_format(name, b"") is DocumentFormat.MARKDOWN


def test_detect_plain_text():
    assert detect_format("a.txt", b"hello") is DocumentFormat.PLAIN_TEXT


@pytest.mark.parametrize(
    "name,data",
    [("image.png", b"\x89PNG\r\n\x1a\n"), ("talk.docx", b"not a zip"), ("report.pdf", b"%PDF"), ("noext", b"")],
)
def test_detect_rejects(name, data):
    with pytest.raises(UnsupportedFormat):
        detect_format(name, data)


# -- markdown -------------------------------------------------------------------------


def test_markdown_heading_and_paragraph():
    doc = parse_markdown("# Intro\nBody text.")
    assert doc.blocks == [TextBlock(BlockKind.HEADING, "Intro", 1), TextBlock(BlockKind.PARAGRAPH, "Body text.")]
    assert doc.images == []


def test_markdown_image_only():
    doc = parse_markdown("![Pipeline overview](fig1.png)", lambda target: b"x" * 1024)
    assert doc.blocks == []
    assert len(doc.images) == 1
    img = doc.images[0]
    assert img.caption == "Pipeline overview"
    assert img.byte_length == 1024
    assert img.content_ref == "fig1.png"
    assert len(img.id) == 16


def test_markdown_unresolvable_image_warns():
    doc = parse_markdown("![x](missing.png)", lambda target: None)
    assert doc.images == []
    assert len(doc.warnings) == 1


def test_markdown_heading_levels_lists_and_code():
    text = "## Two\n### Three ###\n- item one\n2. item two\n\n```\ncode # not heading\n```\n"
    doc = parse_markdown(text)
    kinds = [(b.kind, b.level, b.text) for b in doc.blocks]
    assert kinds == [
        (BlockKind.HEADING, 2, "Two"),
        (BlockKind.HEADING, 3, "Three"),
        (BlockKind.LIST_ITEM, 0, "item one"),
        (BlockKind.LIST_ITEM, 0, "item two"),
        (BlockKind.OTHER, 0, "code # not heading"),
    ]


def test_markdown_image_origin_is_interrupted_block_position():
    text = "# A\n\npara one\n\n![c](a.png)\n\npara two ![d](b.png) continues\n"
    doc = parse_markdown(text, lambda t: t.encode())
    assert [i.origin_index for i in doc.images] == [2, 2]
    assert doc.blocks[2].text == "para two continues"
    assert all(0 <= i.origin_index <= len(doc.blocks) for i in doc.images)


def test_markdown_empty_alt_has_no_caption():
    doc = parse_markdown("![](a.png)", lambda t: b"data")
    assert doc.images[0].caption is None


def test_markdown_duplicate_images_get_distinct_ids():
    doc = parse_markdown("![a](x.png)\n\n![b](x.png)", lambda t: b"same bytes")
    assert len({i.id for i in doc.images}) == 2


def test_plain_text_paragraphs():
    doc = parse_plain_text("one\nstill one\n\n\ntwo\n")
    assert [b.text for b in doc.blocks] == ["one\nstill one", "two"]


# -- docx -----------------------------------------------------------------------------


def test_docx_heading_and_body():
    doc = parse_docx(build_docx(para("Results", "Heading1") + para("Accuracy improved.")))
    assert doc.format is DocumentFormat.DOCX
    assert doc.blocks == [
        TextBlock(BlockKind.HEADING, "Results", 1),
        TextBlock(BlockKind.PARAGRAPH, "Accuracy improved."),
    ]


def test_docx_caption_follows_image(png_bytes):
    body = image_para("rId5", descr="alt text") + para("Figure 1: accuracy", "Caption")
    doc = parse_docx(build_docx(body, {"rId5": png_bytes}))
    assert len(doc.images) == 1
    img = doc.images[0]
    assert img.caption == "Figure 1: accuracy"
    assert img.media_type == "image/png"
    assert img.byte_length == len(png_bytes)
    assert img.content_ref == "word/media/rId5.png"
    assert doc.blocks == [TextBlock(BlockKind.CAPTION, "Figure 1: accuracy")]


def test_docx_alt_text_fallback_and_absent_caption(png_bytes):
    body = image_para("rId1", descr="A bar chart") + para("Plain text") + image_para("rId2")
    doc = parse_docx(build_docx(body, {"rId1": png_bytes, "rId2": png_bytes + b"2"}))
    assert [i.caption for i in doc.images] == ["A bar chart", None]
    assert [i.origin_index for i in doc.images] == [0, 1]


def test_docx_caption_not_taken_across_a_paragraph(png_bytes):
    body = image_para("rId1") + para("Unrelated") + para("Figure 9", "Caption")
    doc = parse_docx(build_docx(body, {"rId1": png_bytes}))
    assert doc.images[0].caption is None


def test_docx_style_name_resolution_without_styles_part():
    doc = parse_docx(build_docx(para("Deep", "Heading3"), styles=None))
    assert doc.blocks[0].kind is BlockKind.HEADING
    assert doc.blocks[0].level == 3


def test_docx_tables_and_notes_flatten_to_other():
    table = (
        "<w:tbl><w:tr><w:tc>" + para("a") + "</w:tc><w:tc>" + para("b") + "</w:tc></w:tr></w:tbl>"
    )
    footer = f'<w:ftr xmlns:w="{W}">' + para("Page footer") + "</w:ftr>"
    doc = parse_docx(build_docx(para("Intro") + table, extra_parts={"word/footer1.xml": footer}))
    assert [(b.kind, b.text) for b in doc.blocks] == [
        (BlockKind.PARAGRAPH, "Intro"),
        (BlockKind.OTHER, "a | b"),
        (BlockKind.OTHER, "Page footer"),
    ]


W = "http://schemas.openxmlformats.org/wordprocessingml/2006/main"


def test_docx_unreferenced_media_still_counted(png_bytes):
    data = build_docx(para("Body"), extra_parts={})
    buf = io.BytesIO(data)
    with zipfile.ZipFile(buf, "a") as zf:
        zf.writestr("word/media/orphan.png", png_bytes)
    doc = parse_docx(buf.getvalue())
    assert len(doc.images) == 1
    assert doc.images[0].origin_index == 1


def test_docx_missing_relationship_warns():
    doc = parse_docx(build_docx(image_para("rId404") + para("x")))
    assert doc.images == []
    assert len(doc.warnings) == 1


def test_docx_truncated_archive():
    data = build_docx(para("x"))
    with pytest.raises(MalformedArchive):
        parse_docx(data[: len(data) // 2])


def test_docx_missing_document_part():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("word/other.xml", "<x/>")
    with pytest.raises(MissingDocumentPart):
        parse_docx(buf.getvalue())


def test_docx_malformed_xml():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("word/document.xml", "<w:document><unclosed>")
    with pytest.raises(MalformedXml) as info:
        parse_docx(buf.getvalue())
    assert info.value.part_name == "word/document.xml"


def test_docx_idempotent(png_bytes):
    data = build_docx(para("T", "Heading1") + image_para("rId1") + para("Cap", "Caption"), {"rId1": png_bytes})
    assert parse_docx(data) == parse_docx(data)


def test_load_document_markdown_resolves_relative_images(fixtures_dir):
    doc = load_document(fixtures_dir / "doc.md")
    captions = [i.caption for i in doc.images]
    assert captions == [None, "Figure 1: model architecture of the binary autoencoder"]
    assert any("missing.png" in w for w in doc.warnings)


# -- extract_text_and_images ----------------------------------------------------------


def test_extract_text_heading_markers():
    doc = SourceDocument("d", DocumentFormat.MARKDOWN,
                         [TextBlock(BlockKind.HEADING, "A", 1), TextBlock(BlockKind.PARAGRAPH, "b")])
    assert extract_text_and_images(doc) == ("# A\n\nb", [])


def test_extract_images_in_origin_order():
    blocks = [TextBlock(BlockKind.PARAGRAPH, t) for t in "abc"]
    late = ImageAsset("i2", None, "image/png", "x", 3, 3)
    early = ImageAsset("i1", None, "image/png", "y", 3, 0)
    _, images = extract_text_and_images(SourceDocument("d", DocumentFormat.MARKDOWN, blocks, [late, early]))
    assert [i.origin_index for i in images] == [0, 3]


def test_extract_empty_document():
    with pytest.raises(EmptyDocument):
        extract_text_and_images(SourceDocument("d", DocumentFormat.PLAIN_TEXT, []))


# -- properties -----------------------------------------------------------------------

_word = st.text(alphabet="abcdefghij KLMN.,", min_size=1, max_size=30).filter(lambda s: s.strip())


@settings(max_examples=100, deadline=None)
@given(st.lists(_word, min_size=1, max_size=8))
def test_every_markdown_paragraph_appears_once(paragraphs):
    paragraphs = [" ".join(p.split()) for p in paragraphs]
    full, _ = extract_text_and_images(parse_markdown("\n\n".join(paragraphs)))
    for p in paragraphs:
        assert p in full
    assert full.split("\n\n") == paragraphs


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(_word, st.booleans()), min_size=1, max_size=6))
def test_docx_paragraph_preservation_and_image_accounting(items):
    png = b"\x89PNG\r\n\x1a\n" + b"\x00" * 8
    body, media = "", {}
    for i, (text, with_image) in enumerate(items):
        body += para(text.strip())
        if with_image:
            media[f"rId{i}"] = png + bytes([i])
            body += image_para(f"rId{i}")
    doc = parse_docx(build_docx(body, media))
    full, images = extract_text_and_images(doc)
    assert full.split("\n\n") == [t.strip() for t, _ in items]
    assert len(images) == len(media)
    assert len({i.id for i in images}) == len(images)

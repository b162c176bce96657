"""Document ingestion: DOCX, Markdown and plain text into a SourceDocument.

Text and images are separated here so later stages can feed text to a
language model and hand the images to the mapping step.
"""

from __future__ import annotations

import hashlib
import io
import logging
import mimetypes
import re
import zipfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Callable, Iterator, Optional

from slidecast.errors import (
    EmptyDocument,
    MalformedArchive,
    MalformedXml,
    MissingDocumentPart,
    UnsupportedFormat,
)

logger = logging.getLogger(__name__)

ZIP_MAGIC = b"PK\x03\x04"

AssetResolver = Callable[[str], Optional[bytes]]


class DocumentFormat(str, Enum):
    PLAIN_TEXT = "plain_text"
    MARKDOWN = "markdown"
    DOCX = "docx"


class BlockKind(str, Enum):
    HEADING = "heading"
    PARAGRAPH = "paragraph"
    LIST_ITEM = "list_item"
    CAPTION = "caption"
    OTHER = "other"


@dataclass(frozen=True)
class TextBlock:
    kind: BlockKind
    text: str
    level: int = 0

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("TextBlock text must be non-empty")
        if self.level >= 1 and self.kind is not BlockKind.HEADING:
            raise ValueError("only headings carry a level")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "level": self.level, "text": self.text}


@dataclass(frozen=True)
class ImageAsset:
    id: str
    caption: Optional[str]
    media_type: str
    content_ref: str
    byte_length: int
    origin_index: int
    data: bytes = field(default=b"", repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "caption": self.caption,
            "media_type": self.media_type,
            "content_ref": self.content_ref,
            "byte_length": self.byte_length,
            "origin_index": self.origin_index,
        }


@dataclass
class SourceDocument:
    id: str
    format: DocumentFormat
    blocks: list[TextBlock] = field(default_factory=list)
    images: list[ImageAsset] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def image(self, image_id: str) -> ImageAsset:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "format": self.format.value,
            "blocks": [b.to_dict() for b in self.blocks],
            "images": [i.to_dict() for i in self.images],
            "warnings": list(self.warnings),
        }


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _unique_asset_id(data: bytes, taken: set[str]) -> str:
    candidate = content_id(data)
    n = 1
    while candidate in taken:
        candidate = content_id(data + f"#{n}".encode())
        n += 1
    taken.add(candidate)
    return candidate


_MAGIC_TYPES = [
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8\xff", "image/jpeg"),
    (b"GIF87a", "image/gif"),
    (b"GIF89a", "image/gif"),
    (b"BM", "image/bmp"),
]


def guess_media_type(name: str, data: bytes) -> str:
    for magic, mime in _MAGIC_TYPES:
        if data.startswith(magic):
            return mime
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    mime, _ = mimetypes.guess_type(name)
    if mime is None:
        ext = PurePosixPath(name).suffix.lower()
        mime = {".emf": "image/emf", ".wmf": "image/wmf"}.get(ext, "application/octet-stream")
    return mime


# -- format detection ---------------------------------------------------------


def detect_format(path_or_name: str, leading_bytes: bytes) -> DocumentFormat:
    """Pick a parser from the file name, checking the zip magic for DOCX."""
    suffix = PurePosixPath(str(path_or_name).replace("\\", "/")).suffix.lower()
    if suffix == ".docx":
        if leading_bytes.startswith(ZIP_MAGIC):
            return DocumentFormat.DOCX
        raise UnsupportedFormat(str(path_or_name))
    if suffix in (".md", ".markdown"):
        return DocumentFormat.MARKDOWN
    if suffix == ".txt":
        return DocumentFormat.PLAIN_TEXT
    raise UnsupportedFormat(str(path_or_name))


# -- plain text -----------------------------------------------------------------


def parse_plain_text(text: str, doc_id: Optional[str] = None) -> SourceDocument:
    blocks = [
        TextBlock(BlockKind.PARAGRAPH, para.strip())
        for para in re.split(r"\n[ \t]*\n", text.replace("\r\n", "\n"))
        if para.strip()
    ]
    return SourceDocument(
        id=doc_id or content_id(text.encode("utf-8")),
        format=DocumentFormat.PLAIN_TEXT,
        blocks=blocks,
    )


# -- markdown -------------------------------------------------------------------

_HEADING_RE = re.compile(r"^ {0,3}(#{1,6})(?:[ \t]+(.*?))?(?:[ \t]+#+)?[ \t]*$")
_LIST_RE = re.compile(r"^ {0,3}(?:[-*+]|\d{1,9}[.)])[ \t]+(.*)$")
_FENCE_RE = re.compile(r"^ {0,3}(`{3,}|~{3,})")
_IMAGE_RE = re.compile(
    r"!\[(?P<alt>[^\]]*)\]\(\s*<?(?P<target>[^)\s>]+)>?(?:\s+(?:\"[^\"]*\"|'[^']*'|\([^)]*\)))?\s*\)"
)


class _MarkdownBuilder:
    def __init__(self, resolver: AssetResolver):
        self.resolver = resolver
        self.blocks: list[TextBlock] = []
        self.images: list[ImageAsset] = []
        self.warnings: list[str] = []
        self._ids: set[str] = set()
        self._para: list[str] = []
        self._para_images: list[tuple[str, str]] = []

    def strip_images(self, line: str) -> tuple[str, list[tuple[str, str]]]:
        found = [(m.group("alt"), m.group("target")) for m in _IMAGE_RE.finditer(line)]
        if not found:
            return line, []
        stripped = _IMAGE_RE.sub("", line)
        stripped = re.sub(r"(?<=\S) {2,}(?=\S)", " ", stripped)
        return stripped, found

    def add_images(self, found: list[tuple[str, str]]) -> None:
        origin = len(self.blocks)
        for alt, target in found:
            try:
                data = self.resolver(target)
            except OSError as exc:
                logger.debug("resolver failed for %s: %s", target, exc)
                data = None
            if not data:
                self.warnings.append(f"image target {target!r} could not be resolved; excluded")
                continue
            self.images.append(
                ImageAsset(
                    id=_unique_asset_id(data, self._ids),
                    caption=alt.strip() or None,
                    media_type=guess_media_type(target, data),
                    content_ref=target,
                    byte_length=len(data),
                    origin_index=origin,
                    data=data,
                )
            )

    def emit(self, kind: BlockKind, text: str, level: int = 0,
             found: Optional[list[tuple[str, str]]] = None) -> None:
        # images are registered against the index the block is about to take
        if found:
            self.add_images(found)
        if text.strip():
            self.blocks.append(TextBlock(kind, text.strip(), level))

    def paragraph_line(self, line: str) -> None:
        stripped, found = self.strip_images(line)
        self._para_images.extend(found)
        if stripped.strip():
            self._para.append(stripped.strip())

    def flush(self) -> None:
        if self._para or self._para_images:
            self.emit(BlockKind.PARAGRAPH, "\n".join(self._para), found=self._para_images)
        self._para = []
        self._para_images = []


def parse_markdown(
    text: str,
    asset_resolver: Optional[AssetResolver] = None,
    doc_id: Optional[str] = None,
) -> SourceDocument:
    """Parse CommonMark-style Markdown into blocks and image assets.

    Only ATX headings, list items, fenced code and paragraphs are
    distinguished. Image links are lifted out of the text; targets the
    resolver cannot supply are dropped with a warning.
    """
    resolver = asset_resolver or (lambda _target: None)
    b = _MarkdownBuilder(resolver)
    lines = text.replace("\r\n", "\n").split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        fence = _FENCE_RE.match(line)
        if fence:
            b.flush()
            marker = fence.group(1)
            body: list[str] = []
            i += 1
            while i < len(lines) and not lines[i].lstrip().startswith(marker):
                body.append(lines[i])
                i += 1
            b.emit(BlockKind.OTHER, "\n".join(body))
            i += 1
            continue
        if not line.strip():
            b.flush()
        elif m := _HEADING_RE.match(line):
            b.flush()
            stripped, found = b.strip_images(m.group(2) or "")
            b.emit(BlockKind.HEADING, stripped, len(m.group(1)), found)
        elif m := _LIST_RE.match(line):
            b.flush()
            stripped, found = b.strip_images(m.group(1))
            b.emit(BlockKind.LIST_ITEM, stripped, found=found)
        else:
            b.paragraph_line(line)
        i += 1
    b.flush()
    return SourceDocument(
        id=doc_id or content_id(text.encode("utf-8")),
        format=DocumentFormat.MARKDOWN,
        blocks=b.blocks,
        images=b.images,
        warnings=b.warnings,
    )


# -- docx -----------------------------------------------------------------------

W = "http://schemas.openxmlformats.org/wordprocessingml/2006/main"
R = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"
A = "http://schemas.openxmlformats.org/drawingml/2006/main"
WP = "http://schemas.openxmlformats.org/drawingml/2006/wordprocessingDrawing"
V = "urn:schemas-microsoft-com:vml"
MC = "http://schemas.openxmlformats.org/markup-compatibility/2006"
PKG_REL = "http://schemas.openxmlformats.org/package/2006/relationships"


def _w(tag: str) -> str:
    return f"{{{W}}}{tag}"


_SKIP_TAGS = {_w("txbxContent"), f"{{{MC}}}Fallback"}


def _walk(elem: ET.Element) -> Iterator[ET.Element]:
    """Depth-first iteration that skips text boxes and compatibility fallbacks."""
    yield elem
    for child in elem:
        if child.tag in _SKIP_TAGS:
            continue
        yield from _walk(child)


def _paragraph_text(p: ET.Element) -> str:
    parts: list[str] = []
    for el in _walk(p):
        if el.tag == _w("t"):
            parts.append(el.text or "")
        elif el.tag == _w("tab"):
            parts.append("\t")
        elif el.tag in (_w("br"), _w("cr")):
            parts.append("\n")
        elif el.tag == _w("noBreakHyphen"):
            parts.append("-")
    return "".join(parts)


def _read_xml(zf: zipfile.ZipFile, part: str) -> ET.Element:
    try:
        raw = zf.read(part)
    except (zipfile.BadZipFile, OSError, EOFError) as exc:
        raise MalformedArchive(f"cannot read {part}: {exc}") from exc
    try:
        return ET.fromstring(raw)
    except ET.ParseError as exc:
        raise MalformedXml(part, str(exc)) from exc


def _style_names(zf: zipfile.ZipFile) -> dict[str, str]:
    if "word/styles.xml" not in zf.namelist():
        return {}
    root = _read_xml(zf, "word/styles.xml")
    names = {}
    for style in root.iter(_w("style")):
        sid = style.get(_w("styleId"))
        name_el = style.find(_w("name"))
        if sid:
            names[sid] = name_el.get(_w("val"), sid) if name_el is not None else sid
    return names


def _relationships(zf: zipfile.ZipFile, rels_part: str) -> dict[str, tuple[str, bool]]:
    if rels_part not in zf.namelist():
        return {}
    root = _read_xml(zf, rels_part)
    rels = {}
    for rel in root.iter(f"{{{PKG_REL}}}Relationship"):
        external = rel.get("TargetMode", "").lower() == "external"
        rels[rel.get("Id", "")] = (rel.get("Target", ""), external)
    return rels


@dataclass
class _PendingImage:
    part: str
    alt: Optional[str]
    origin_index: int
    caption: Optional[str] = None


class _DocxBuilder:
    def __init__(self, zf: zipfile.ZipFile):
        self.zf = zf
        self.styles = _style_names(zf)
        self.rels = _relationships(zf, "word/_rels/document.xml.rels")
        self.blocks: list[TextBlock] = []
        self.pending: list[_PendingImage] = []
        self.warnings: list[str] = []
        # images from the most recent paragraph, eligible for a following caption
        self._last_images: list[_PendingImage] = []

    def style_name(self, p: ET.Element) -> str:
        ps = p.find(f"{_w('pPr')}/{_w('pStyle')}")
        if ps is None:
            return ""
        sid = ps.get(_w("val"), "")
        return self.styles.get(sid, sid)

    def _resolve(self, rel_id: str) -> Optional[str]:
        target = self.rels.get(rel_id)
        if target is None:
            self.warnings.append(f"image relationship {rel_id!r} not found; excluded")
            return None
        path, external = target
        if external:
            self.warnings.append(f"linked external image {path!r} not embedded; excluded")
            return None
        part = str(PurePosixPath("word") / path) if not path.startswith("/") else path.lstrip("/")
        part = _normalize_part(part)
        if part not in self.zf.namelist():
            self.warnings.append(f"image part {part!r} missing from archive; excluded")
            return None
        return part

    def images_in(self, elem: ET.Element) -> list[tuple[str, Optional[str]]]:
        found: list[tuple[str, Optional[str]]] = []
        for el in _walk(elem):
            if el.tag in (f"{{{WP}}}inline", f"{{{WP}}}anchor"):
                doc_pr = el.find(f"{{{WP}}}docPr")
                alt = None
                if doc_pr is not None:
                    alt = (doc_pr.get("descr") or doc_pr.get("title") or "").strip() or None
                for blip in el.iter(f"{{{A}}}blip"):
                    rid = blip.get(f"{{{R}}}embed") or blip.get(f"{{{R}}}link")
                    if rid:
                        found.append((rid, alt))
            elif el.tag == f"{{{V}}}imagedata":
                rid = el.get(f"{{{R}}}id")
                if rid:
                    alt = (el.get("{urn:schemas-microsoft-com:office:office}title") or "").strip()
                    found.append((rid, alt or None))
        return found

    def register_images(self, elem: ET.Element, origin: int) -> list[_PendingImage]:
        regs = []
        for rid, alt in self.images_in(elem):
            part = self._resolve(rid)
            if part is not None:
                img = _PendingImage(part=part, alt=alt, origin_index=origin)
                self.pending.append(img)
                regs.append(img)
        return regs

    def paragraph(self, p: ET.Element) -> None:
        style = self.style_name(p)
        lowered = style.lower()
        text = _paragraph_text(p).strip()
        if "caption" in lowered and text:
            for img in self._last_images:
                img.caption = text
        images = self.register_images(p, len(self.blocks))
        if text:
            if "heading" in lowered:
                m = re.search(r"(\d+)\s*$", style)
                self.blocks.append(TextBlock(BlockKind.HEADING, text, int(m.group(1)) if m else 1))
            elif "caption" in lowered:
                self.blocks.append(TextBlock(BlockKind.CAPTION, text))
            elif p.find(f"{_w('pPr')}/{_w('numPr')}") is not None or "list" in lowered:
                self.blocks.append(TextBlock(BlockKind.LIST_ITEM, text))
            else:
                self.blocks.append(TextBlock(BlockKind.PARAGRAPH, text))
        self._last_images = images

    def table(self, tbl: ET.Element) -> None:
        for tr in tbl.iter(_w("tr")):
            cells = []
            for tc in tr.findall(_w("tc")):
                cell = " ".join(
                    _paragraph_text(p).strip() for p in tc.iter(_w("p")) if _paragraph_text(p).strip()
                )
                cells.append(cell)
            self.register_images(tr, len(self.blocks))
            row = " | ".join(cells)
            if row.replace("|", "").strip():
                self.blocks.append(TextBlock(BlockKind.OTHER, row))
        self._last_images = []

    def container(self, parent: ET.Element) -> None:
        for child in parent:
            if child.tag == _w("p"):
                self.paragraph(child)
            elif child.tag == _w("tbl"):
                self.table(child)
            elif child.tag == _w("sdt"):
                content = child.find(_w("sdtContent"))
                if content is not None:
                    self.container(content)

    def flat_part(self, part: str) -> None:
        """Headers, footers and notes become ``other`` blocks after the body."""
        root = _read_xml(self.zf, part)
        for note in list(root):
            if note.get(_w("type")) in ("separator", "continuationSeparator", "continuationNotice"):
                continue
            for p in note.iter(_w("p")) if note.tag != _w("p") else [note]:
                text = _paragraph_text(p).strip()
                if text:
                    self.blocks.append(TextBlock(BlockKind.OTHER, text))


def _normalize_part(part: str) -> str:
    out: list[str] = []
    for seg in part.split("/"):
        if seg == "..":
            if out:
                out.pop()
        elif seg and seg != ".":
            out.append(seg)
    return "/".join(out)


def parse_docx(data: bytes, doc_id: Optional[str] = None) -> SourceDocument:
    """Parse a Word document from its raw bytes.

    Paragraphs keep body order; tables, notes, headers and footers are
    flattened into ``other`` blocks. Each image takes its caption from an
    immediately following Caption-styled paragraph, else from its alt text.
    """
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        names = zf.namelist()
    except (zipfile.BadZipFile, OSError, EOFError, ValueError) as exc:
        raise MalformedArchive(f"not a readable zip archive: {exc}") from exc
    if "word/document.xml" not in names:
        raise MissingDocumentPart("archive has no word/document.xml")

    with zf:
        root = _read_xml(zf, "word/document.xml")
        body = root.find(_w("body"))
        builder = _DocxBuilder(zf)
        if body is not None:
            builder.container(body)

        extra = sorted(n for n in names if re.fullmatch(r"word/(header|footer)\d*\.xml", n))
        extra += [n for n in ("word/footnotes.xml", "word/endnotes.xml") if n in names]
        for part in extra:
            builder.flat_part(part)

        referenced = {img.part for img in builder.pending}
        for name in sorted(names):
            if name.startswith("word/media/") and not name.endswith("/") and name not in referenced:
                builder.pending.append(_PendingImage(part=name, alt=None, origin_index=len(builder.blocks)))

        taken: set[str] = set()
        images = []
        for img in builder.pending:
            try:
                payload = zf.read(img.part)
            except (zipfile.BadZipFile, OSError, EOFError) as exc:
                raise MalformedArchive(f"cannot read {img.part}: {exc}") from exc
            if not payload:
                builder.warnings.append(f"image part {img.part!r} is empty; excluded")
                continue
            images.append(
                ImageAsset(
                    id=_unique_asset_id(payload, taken),
                    caption=img.caption or img.alt,
                    media_type=guess_media_type(img.part, payload),
                    content_ref=img.part,
                    byte_length=len(payload),
                    origin_index=img.origin_index,
                    data=payload,
                )
            )

    return SourceDocument(
        id=doc_id or content_id(data),
        format=DocumentFormat.DOCX,
        blocks=builder.blocks,
        images=images,
        warnings=builder.warnings,
    )


# -- entry points ---------------------------------------------------------------


def file_resolver(base_dir: Path) -> AssetResolver:
    """Resolve relative image links against ``base_dir``; remote URLs are not fetched."""
    base = base_dir.resolve()

    def resolve(target: str) -> Optional[bytes]:
        if re.match(r"^[a-zA-Z][a-zA-Z0-9+.-]*://", target) or target.startswith("data:"):
            return None
        path = (base / target).resolve()
        if not path.is_file():
            return None
        return path.read_bytes()

    return resolve


def load_document(path: str | Path) -> SourceDocument:
    path = Path(path)
    data = path.read_bytes()
    fmt = detect_format(path.name, data[:8])
    if fmt is DocumentFormat.DOCX:
        return parse_docx(data)
    text = data.decode("utf-8")
    if fmt is DocumentFormat.MARKDOWN:
        return parse_markdown(text, file_resolver(path.parent), doc_id=content_id(data))
    return parse_plain_text(text, doc_id=content_id(data))


def extract_text_and_images(doc: SourceDocument) -> tuple[str, list[ImageAsset]]:
    """Flatten blocks to model-ready text; headings keep their ``#`` markers."""
    parts = []
    for block in doc.blocks:
        if not block.text.strip():
            continue
        if block.kind is BlockKind.HEADING:
            parts.append("#" * max(block.level, 1) + " " + block.text)
        else:
            parts.append(block.text)
    if not parts:
        raise EmptyDocument(f"document {doc.id} has no text")
    images = sorted(doc.images, key=lambda img: img.origin_index)
    return "\n\n".join(parts), images

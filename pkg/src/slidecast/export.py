"""Derived views of a deck: Markdown and a standalone HTML slide page."""

from __future__ import annotations

import html
from pathlib import Path
from typing import Optional

from slidecast.errors import ManifestMismatch
from slidecast.ingest import SourceDocument
from slidecast.presentation import AudioManifest
from slidecast.slides import Deck

ASSET_DIR = "assets"


def render_markdown(deck: Deck, asset_dir: str = ASSET_DIR) -> str:
    sections = []
    for slide in deck.slides:
        lines = [f"## {slide.title}", ""]
        lines += [f"- {b}" for b in slide.bullets]
        if slide.image_ids:
            lines.append("")
            lines += [f"![]({asset_dir}/{image_id})" for image_id in slide.image_ids]
        sections.append("\n".join(lines) + "\n")
    return "\n".join(sections)


_STYLE = """
body { margin: 0; font-family: system-ui, sans-serif; background: #f2f2f2; }
section.slide { box-sizing: border-box; width: 960px; min-height: 540px; margin: 24px auto;
  padding: 40px 56px; background: #fff; box-shadow: 0 2px 8px rgba(0,0,0,.15); }
section.slide h2 { margin-top: 0; font-size: 32px; }
section.slide li { font-size: 22px; margin: 8px 0; }
section.slide img { max-height: 220px; max-width: 45%; margin-right: 12px; }
section.slide audio { display: block; margin-top: 16px; }
""".strip()


def render_html(deck: Deck, manifest: Optional[AudioManifest] = None, asset_dir: str = ASSET_DIR,
                audio_base: str = "") -> str:
    """One ``<section>`` per slide; each gets an ``<audio>`` element when a manifest is given."""
    clips: dict[int, str] = {}
    if manifest is not None:
        indices = [e.slide_index for e in manifest.entries]
        if sorted(indices) != list(range(len(deck.slides))) or len(set(indices)) != len(indices):
            raise ManifestMismatch(
                f"manifest covers slides {indices}, deck has {len(deck.slides)} slides"
            )
        clips = {e.slide_index: e.clip_ref for e in manifest.entries}

    esc = lambda s: html.escape(s, quote=True)
    out = [
        "<!DOCTYPE html>",
        '<html lang="en">',
        "<head>",
        '<meta charset="utf-8"/>',
        f"<title>{esc(deck.slides[0].title if deck.slides else deck.doc_id)}</title>",
        f"<style>\n{_STYLE}\n</style>",
        "</head>",
        f'<body data-doc-id="{esc(deck.doc_id)}" data-method="{esc(deck.method_tag)}">',
    ]
    for slide in deck.slides:
        out.append(f'<section class="slide" id="slide-{slide.index}">')
        out.append(f"<h2>{esc(slide.title)}</h2>")
        out.append("<ul>")
        out += [f"<li>{esc(b)}</li>" for b in slide.bullets]
        out.append("</ul>")
        for image_id in slide.image_ids:
            out.append(f'<img src="{esc(asset_dir)}/{esc(image_id)}" alt="{esc(image_id)}"/>')
        if slide.index in clips:
            src = f"{audio_base}{clips[slide.index]}"
            out.append(f'<audio controls="controls" preload="none" src="{esc(src)}"></audio>')
        out.append("</section>")
    out += ["</body>", "</html>"]
    return "\n".join(out) + "\n"


def write_assets(doc: SourceDocument, deck: Deck, out_dir: str | Path) -> list[Path]:
    """Copy the bytes of every placed image to ``out_dir/assets/<id>``."""
    written = []
    target = Path(out_dir) / ASSET_DIR
    placed = {i for s in deck.slides for i in s.image_ids}
    for img in doc.images:
        if img.id in placed and img.data:
            target.mkdir(parents=True, exist_ok=True)
            path = target / img.id
            path.write_bytes(img.data)
            written.append(path)
    return written

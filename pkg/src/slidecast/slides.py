"""Slide generation: titles, per-title content, bullet summaries, image placement.

The steps run in that order and are joined by :func:`assemble_deck`.
:func:`generate_baseline_deck` produces the single-call comparison decks.
"""

from __future__ import annotations

import json
import logging
import re
import textwrap
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Any, Iterable, Mapping, Optional, Sequence

from slidecast.errors import (
    AllContentEmpty,
    EmptyTitleList,
    GatewayError,
    InvariantViolation,
    PreconditionError,
    SlidecastError,
)
from slidecast.gateway import Gateway, is_str_list, prompt_request
from slidecast.ingest import (
    DocumentFormat,
    ImageAsset,
    SourceDocument,
    content_id,
    extract_text_and_images,
)
from slidecast.prompts import AudienceLevel, PromptLibrary, PromptName, load_library

logger = logging.getLogger(__name__)

SLIDE_CAP = 10
SCHEMA_VERSION = 1

SYSTEM_PROMPT = (
    "You turn documents into clear presentation slides. "
    "Answer with valid JSON only, exactly in the requested shape."
)


@dataclass(frozen=True)
class GenerationConfig:
    model_id: str = "gpt-4o"
    min_slides: int = 1
    max_slides: int = 10
    max_bullets: int = 7
    max_bullet_chars: int = 200
    jaccard_threshold: float = 0.6
    images_per_slide: int = 2
    multimodal: bool = False
    temperature: float = 0.0
    max_tokens: int = 2048
    max_repair_attempts: int = 2
    workers: int = 4
    prompts_dir: Optional[str] = None

    def __post_init__(self) -> None:
        for knob in ("min_slides", "max_slides", "max_bullets", "max_bullet_chars", "images_per_slide", "workers", "max_tokens"):
            if getattr(self, knob) <= 0:
                raise ValueError(f"{knob} must be positive")
        if self.max_slides > SLIDE_CAP:
            raise ValueError(f"max_slides may not exceed {SLIDE_CAP}")
        if self.min_slides > self.max_slides:
            raise ValueError("min_slides may not exceed max_slides")
        if not 0 < self.jaccard_threshold <= 1:
            raise ValueError("jaccard_threshold must lie in (0, 1]")

    @property
    def prompts(self) -> PromptLibrary:
        return load_library(self.prompts_dir)

    def ask(self, gateway: Gateway, prompt: str, shape_check, attachments: Sequence[ImageAsset] = ()) -> Any:
        request = prompt_request(
            self.model_id,
            prompt,
            system=SYSTEM_PROMPT,
            attachments=attachments,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )
        return gateway.complete_json(request, shape_check, self.max_repair_attempts)


@dataclass(frozen=True)
class Slide:
    index: int
    title: str
    content: str
    bullets: tuple[str, ...]
    image_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "title": self.title,
            "content": self.content,
            "bullets": list(self.bullets),
            "image_ids": list(self.image_ids),
        }


@dataclass(frozen=True)
class ImagePlacement:
    image_id: str
    slide_index: int
    rationale: str = ""
    confidence: float = 1.0


@dataclass
class Deck:
    doc_id: str
    audience: AudienceLevel
    slides: list[Slide]
    method_tag: str = "pass"
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "doc_id": self.doc_id,
            "audience": self.audience.value,
            "method_tag": self.method_tag,
            "slides": [s.to_dict() for s in self.slides],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Deck":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported deck schema_version {version}")
        slides = [
            Slide(
                index=int(s["index"]),
                title=s["title"],
                content=s.get("content", ""),
                bullets=tuple(s.get("bullets", [])),
                image_ids=tuple(s.get("image_ids", [])),
            )
            for s in data["slides"]
        ]
        return cls(
            doc_id=data["doc_id"],
            audience=AudienceLevel(data.get("audience", AudienceLevel.TECHNICAL.value)),
            slides=slides,
            method_tag=data.get("method_tag", "pass"),
            warnings=list(data.get("warnings", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "Deck":
        return cls.from_dict(json.loads(text))


def _note(sink: Optional[list[str]], message: str) -> None:
    logger.warning(message)
    if sink is not None:
        sink.append(message)


# -- titles -----------------------------------------------------------------------


def _titles_shape(value: Any) -> bool:
    if isinstance(value, dict):
        value = value.get("titles")
    return is_str_list(value)


def clean_titles(raw: Iterable[str], max_slides: int, warnings: Optional[list[str]] = None) -> list[str]:
    """Trim, drop blanks and case-insensitive duplicates, then cap the count."""
    titles: list[str] = []
    seen: set[str] = set()
    for title in raw:
        title = " ".join(title.split())
        if not title:
            continue
        key = title.casefold()
        if key in seen:
            _note(warnings, f"duplicate title {title!r} dropped")
            continue
        seen.add(key)
        titles.append(title)
    if len(titles) > max_slides:
        _note(warnings, f"model proposed {len(titles)} titles; kept the first {max_slides}")
        titles = titles[:max_slides]
    return titles


def generate_titles(
    full_text: str,
    audience: AudienceLevel,
    gateway: Gateway,
    config: GenerationConfig,
    warnings: Optional[list[str]] = None,
) -> list[str]:
    if not full_text.strip():
        raise PreconditionError("cannot generate titles for empty text")
    prompt = config.prompts.render(
        PromptName.TOPIC_EXTRACTION, audience,
        document_text=full_text, max_titles=str(config.max_slides),
    )
    value = config.ask(gateway, prompt, _titles_shape)
    if isinstance(value, dict):
        value = value["titles"]
    titles = clean_titles(value, config.max_slides, warnings)
    if not titles:
        raise EmptyTitleList("the model produced no usable slide titles")
    return titles


# -- content ------------------------------------------------------------------------


def _content_shape(value: Any) -> bool:
    return isinstance(value, dict)


def extract_content(
    full_text: str,
    titles: Sequence[str],
    audience: AudienceLevel,
    gateway: Gateway,
    config: GenerationConfig,
    warnings: Optional[list[str]] = None,
) -> dict[str, str]:
    """One call carrying every title, so the model can keep slides from overlapping.

    Titles that come back without content are dropped.
    """
    if not titles:
        raise PreconditionError("no titles to extract content for")
    prompt = config.prompts.render(
        PromptName.CONTENT_EXTRACTION, audience,
        document_text=full_text,
        titles="\n".join(f"{i + 1}. {t}" for i, t in enumerate(titles)),
    )
    value = config.ask(gateway, prompt, _content_shape)
    by_key = {str(k).strip().casefold(): v for k, v in value.items()}
    content: dict[str, str] = {}
    for title in titles:
        passage = value.get(title, by_key.get(title.casefold()))
        if isinstance(passage, list):
            passage = " ".join(str(p) for p in passage)
        if not isinstance(passage, str) or not passage.strip():
            _note(warnings, f"no content extracted for title {title!r}; slide dropped")
            continue
        content[title] = passage.strip()
    if not content:
        raise AllContentEmpty("no title received any content")
    return content


# -- summaries ----------------------------------------------------------------------

_BULLET_PREFIX = re.compile(r"^(?:[-*•▪–]+|\d+[.)])\s+")


def _bullets_shape(value: Any) -> bool:
    if isinstance(value, dict):
        value = value.get("bullets")
    return is_str_list(value) and any(v.strip() for v in value)


def shorten_bullet(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    cut = textwrap.shorten(text, width=limit, placeholder="…")
    if cut == "…":
        # a single word longer than the limit
        cut = text[: limit - 1] + "…"
    return cut


def clean_bullets(
    raw: Iterable[str], max_bullets: int, max_chars: int, warnings: Optional[list[str]] = None,
    title: str = "",
) -> list[str]:
    bullets = []
    for item in raw:
        text = _BULLET_PREFIX.sub("", " ".join(item.split()))
        if not text:
            continue
        if len(text) > max_chars:
            _note(warnings, f"bullet on {title!r} longer than {max_chars} characters; truncated")
            text = shorten_bullet(text, max_chars)
        bullets.append(text)
    if len(bullets) > max_bullets:
        _note(warnings, f"{len(bullets)} bullets for {title!r}; kept the first {max_bullets}")
        bullets = bullets[:max_bullets]
    return bullets


def summarize(
    title: str,
    content: str,
    gateway: Gateway,
    config: GenerationConfig,
    warnings: Optional[list[str]] = None,
) -> list[str]:
    if not content.strip():
        raise PreconditionError(f"slide {title!r} has no content to summarize")
    prompt = config.prompts.render(PromptName.SUMMARIZATION, slide_title=title, slide_content=content)
    value = config.ask(gateway, prompt, _bullets_shape)
    if isinstance(value, dict):
        value = value["bullets"]
    return clean_bullets(value, config.max_bullets, config.max_bullet_chars, warnings, title)


# -- image mapping ----------------------------------------------------------------


def _placement_shape(value: Any) -> bool:
    if not isinstance(value, dict) or "slide_index" not in value:
        return False
    idx = value["slide_index"]
    return idx is None or (isinstance(idx, int) and not isinstance(idx, bool))


def _slides_digest(deck: Deck) -> str:
    lines = []
    for s in deck.slides:
        lines.append(f"[{s.index}] {s.title}")
        lines.extend(f"    - {b}" for b in s.bullets)
    return "\n".join(lines)


def _confidence(value: Any) -> float:
    try:
        conf = float(value)
    except (TypeError, ValueError):
        return 0.0
    return min(max(conf, 0.0), 1.0)


def map_images(
    images: Sequence[ImageAsset],
    deck: Deck,
    gateway: Gateway,
    config: GenerationConfig,
    multimodal: Optional[bool] = None,
    warnings: Optional[list[str]] = None,
) -> list[ImagePlacement]:
    """Ask the model where each eligible image belongs; unplaced images are fine.

    Without a multimodal model only captioned images are eligible. Each
    slide keeps at most ``config.images_per_slide`` images, highest
    confidence first.
    """
    multimodal = config.multimodal if multimodal is None else multimodal
    if not deck.slides:
        return []
    eligible = []
    for img in images:
        if multimodal or (img.caption and img.caption.strip()):
            eligible.append(img)
        else:
            logger.info("image %s has no caption and the model is text-only; skipped", img.id)
    digest = _slides_digest(deck)

    def place(img: ImageAsset) -> tuple[Optional[ImagePlacement], Optional[str]]:
        prompt = config.prompts.render(
            PromptName.IMAGE_MAPPING, deck.audience,
            slides=digest, image_id=img.id, image_caption=img.caption or "(no caption)",
        )
        attachments = (img,) if multimodal else ()
        try:
            value = config.ask(gateway, prompt, _placement_shape, attachments)
        except GatewayError as exc:
            return None, f"image {img.id} could not be mapped: {exc}"
        idx = value["slide_index"]
        if idx is None:
            return None, None
        if not 0 <= idx < len(deck.slides):
            return None, f"image {img.id} mapped to nonexistent slide {idx}; left unplaced"
        rationale = value.get("rationale")
        return ImagePlacement(
            image_id=img.id,
            slide_index=idx,
            rationale=rationale if isinstance(rationale, str) else "",
            confidence=_confidence(value.get("confidence", 1.0)),
        ), None

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(place, eligible))

    placements: list[ImagePlacement] = []
    seen: set[str] = set()
    for placement, problem in results:
        if problem:
            _note(warnings, problem)
        if placement is not None and placement.image_id not in seen:
            seen.add(placement.image_id)
            placements.append(placement)

    kept: list[ImagePlacement] = []
    order = {p.image_id: i for i, p in enumerate(placements)}
    for slide in deck.slides:
        here = [p for p in placements if p.slide_index == slide.index]
        here.sort(key=lambda p: (-p.confidence, order[p.image_id]))
        for dropped in here[config.images_per_slide:]:
            _note(warnings, f"slide {slide.index} already has {config.images_per_slide} images; "
                            f"dropped image {dropped.image_id} (confidence {dropped.confidence:.2f})")
        kept.extend(here[: config.images_per_slide])
    kept.sort(key=lambda p: order[p.image_id])
    return kept


# -- assembly -----------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+")


def bullet_tokens(bullets: Iterable[str]) -> frozenset[str]:
    return frozenset(t.casefold() for b in bullets for t in _TOKEN_RE.findall(b))


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    """Token-set Jaccard similarity of two bullet lists; two empty lists score 0."""
    ta, tb = bullet_tokens(a), bullet_tokens(b)
    union = ta | tb
    if not union:
        return 0.0
    return len(ta & tb) / len(union)


def redundancy_warnings(slides: Sequence[Slide], threshold: float) -> list[str]:
    out = []
    for a, b in combinations(slides, 2):
        sim = jaccard(a.bullets, b.bullets)
        if sim > threshold:
            out.append(
                f"redundant slides {a.index} ({a.title!r}) and {b.index} ({b.title!r}): "
                f"bullet similarity {sim:.2f} > {threshold}"
            )
    return out


def validate_deck(deck: Deck, doc: Optional[SourceDocument] = None,
                  max_bullets: int = 7, max_bullet_chars: int = 200) -> None:
    if not 1 <= len(deck.slides) <= SLIDE_CAP:
        raise InvariantViolation("slide count", f"{len(deck.slides)} slides, expected 1..{SLIDE_CAP}")
    seen_titles: set[str] = set()
    seen_images: set[str] = set()
    known = {img.id for img in doc.images} if doc is not None else None
    for i, slide in enumerate(deck.slides):
        if slide.index != i:
            raise InvariantViolation("slide order", f"slide at position {i} has index {slide.index}")
        if not slide.title.strip():
            raise InvariantViolation("slide title", f"slide {i} has an empty title")
        if slide.title.casefold() in seen_titles:
            raise InvariantViolation("distinct titles", f"title {slide.title!r} repeats")
        seen_titles.add(slide.title.casefold())
        if not 1 <= len(slide.bullets) <= max_bullets:
            raise InvariantViolation("bullet count", f"slide {i} has {len(slide.bullets)} bullets")
        for bullet in slide.bullets:
            if not bullet.strip() or len(bullet) > max_bullet_chars:
                raise InvariantViolation("bullet length", f"slide {i} bullet of {len(bullet)} characters")
        for image_id in slide.image_ids:
            if known is not None and image_id not in known:
                raise InvariantViolation("image reference", f"slide {i} references unknown image {image_id}")
            if image_id in seen_images:
                raise InvariantViolation("unique image placement", f"image {image_id} appears twice")
            seen_images.add(image_id)


def assemble_deck(
    doc: SourceDocument,
    audience: AudienceLevel,
    titles: Sequence[str],
    content_map: Mapping[str, str],
    summaries: Mapping[str, Sequence[str]],
    placements: Sequence[ImagePlacement] = (),
    *,
    method_tag: str = "pass",
    warnings: Sequence[str] = (),
    config: GenerationConfig = GenerationConfig(),
) -> Deck:
    if set(content_map) != set(titles):
        missing = [t for t in titles if t not in content_map]
        raise InvariantViolation("content per title", f"no content for {missing or 'extra titles'}")
    if set(summaries) != set(titles):
        missing = [t for t in titles if t not in summaries]
        raise InvariantViolation("summary per title", f"no summary for {missing or 'extra titles'}")

    by_slide: dict[int, list[str]] = {}
    for p in placements:
        if not 0 <= p.slide_index < len(titles):
            raise InvariantViolation("placement bounds", f"image {p.image_id} targets slide {p.slide_index}")
        by_slide.setdefault(p.slide_index, []).append(p.image_id)

    slides = [
        Slide(
            index=i,
            title=title,
            content=content_map[title],
            bullets=tuple(summaries[title]),
            image_ids=tuple(by_slide.get(i, ())),
        )
        for i, title in enumerate(titles)
    ]
    deck = Deck(doc.id, AudienceLevel(audience), slides, method_tag, list(warnings))
    validate_deck(deck, doc, config.max_bullets, config.max_bullet_chars)
    if len(slides) < config.min_slides:
        # short decks are reported, never padded
        _note(deck.warnings, f"deck has {len(slides)} slides, fewer than the configured minimum {config.min_slides}")
    for w in redundancy_warnings(slides, config.jaccard_threshold):
        _note(deck.warnings, w)
    return deck


def attach_placements(deck: Deck, placements: Sequence[ImagePlacement]) -> Deck:
    by_slide: dict[int, list[str]] = {}
    for p in placements:
        by_slide.setdefault(p.slide_index, []).append(p.image_id)
    slides = [replace(s, image_ids=s.image_ids + tuple(by_slide.get(s.index, ()))) for s in deck.slides]
    return replace(deck, slides=slides)


# -- pipeline -----------------------------------------------------------------------


def _staged(stage: str):
    def wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SlidecastError as exc:
            if exc.stage is None:
                exc.stage = stage
            raise
    return wrap


def run_pipeline(
    doc: SourceDocument,
    audience: AudienceLevel,
    gateway: Gateway,
    config: GenerationConfig = GenerationConfig(),
) -> Deck:
    """Document to deck: titles, content, per-slide summaries, assembly, image mapping."""
    warnings: list[str] = list(doc.warnings)
    full_text, images = _staged("extract_text_and_images")(extract_text_and_images, doc)
    titles = _staged("generate_titles")(generate_titles, full_text, audience, gateway, config, warnings)
    content = _staged("extract_content")(extract_content, full_text, titles, audience, gateway, config, warnings)
    titles = [t for t in titles if t in content]

    def summarize_one(title: str) -> tuple[list[str], list[str]]:
        local: list[str] = []
        bullets = summarize(title, content[title], gateway, config, local)
        return bullets, local

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = _staged("summarize")(lambda: list(pool.map(summarize_one, titles)))
    summaries = {}
    for title, (bullets, local) in zip(titles, results):
        warnings.extend(local)
        summaries[title] = bullets

    deck = _staged("assemble_deck")(
        assemble_deck, doc, audience, titles, content, summaries,
        method_tag="pass", warnings=warnings, config=config,
    )
    placements = _staged("map_images")(map_images, images, deck, gateway, config, None, deck.warnings)
    return attach_placements(deck, placements)


# -- baselines ----------------------------------------------------------------------


class BaselineMode(str, Enum):
    FLAT = "flat"
    COT = "cot"
    CONS = "cons"


_BASELINE_PROMPTS = {
    BaselineMode.FLAT: PromptName.BASELINE_FLAT,
    BaselineMode.COT: PromptName.BASELINE_COT,
    BaselineMode.CONS: PromptName.BASELINE_CONS,
}


def _baseline_shape(value: Any) -> bool:
    if not isinstance(value, dict) or not isinstance(value.get("slides"), list):
        return False
    return any(
        isinstance(s, dict) and isinstance(s.get("title"), str) and is_str_list(s.get("bullets"))
        for s in value["slides"]
    )


def generate_baseline_deck(
    full_text: str,
    mode: BaselineMode,
    gateway: Gateway,
    config: GenerationConfig = GenerationConfig(),
    *,
    doc: Optional[SourceDocument] = None,
    audience: AudienceLevel = AudienceLevel.TECHNICAL,
) -> Deck:
    """Single-call comparison deck from the flat, chain-of-thought or constrained prompt."""
    mode = BaselineMode(mode)
    if not full_text.strip():
        raise PreconditionError("cannot generate a deck from empty text")
    prompt = config.prompts.render(
        _BASELINE_PROMPTS[mode], document_text=full_text, max_slides=str(config.max_slides)
    )
    value = config.ask(gateway, prompt, _baseline_shape)
    warnings: list[str] = []
    raw_slides = [
        s for s in value["slides"]
        if isinstance(s, dict) and isinstance(s.get("title"), str) and is_str_list(s.get("bullets"))
    ]
    if len(raw_slides) < len(value["slides"]):
        _note(warnings, f"{len(value['slides']) - len(raw_slides)} malformed baseline slides skipped")

    bullets_by_title: dict[str, list[str]] = {}
    ordered: list[str] = []
    for s in raw_slides:
        title = " ".join(s["title"].split())
        if not title:
            continue
        if title.casefold() in {t.casefold() for t in ordered}:
            _note(warnings, f"duplicate title {title!r} dropped")
            continue
        bullets = clean_bullets(s["bullets"], config.max_bullets, config.max_bullet_chars, warnings, title)
        if not bullets:
            _note(warnings, f"baseline slide {title!r} has no bullets; dropped")
            continue
        ordered.append(title)
        bullets_by_title[title] = bullets
    if len(ordered) > config.max_slides:
        _note(warnings, f"model produced {len(ordered)} slides; kept the first {config.max_slides}")
        ordered = ordered[: config.max_slides]
    if not ordered:
        raise EmptyTitleList("baseline output held no usable slides")

    source = doc or SourceDocument(id=content_id(full_text.encode("utf-8")), format=DocumentFormat.PLAIN_TEXT)
    summaries = {t: bullets_by_title[t] for t in ordered}
    content = {t: "\n".join(bullets_by_title[t]) for t in ordered}
    return assemble_deck(
        source, audience, ordered, content, summaries,
        method_tag=mode.value, warnings=warnings, config=config,
    )

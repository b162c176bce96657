"""Prompt templates for every model call, loaded from plain-text resources.

Templates use ``${name}`` placeholders (``$$`` for a literal dollar sign).
File naming: ``<prompt_name>.txt`` or ``<prompt_name>.<audience>.txt``.
"""

from __future__ import annotations

import functools
import string
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

from slidecast.errors import MissingVariable, MissingVariant, PromptError, UnknownVariable


class AudienceLevel(str, Enum):
    TECHNICAL = "technical"
    NON_TECHNICAL = "non_technical"


class PromptName(str, Enum):
    TOPIC_EXTRACTION = "topic_extraction"
    CONTENT_EXTRACTION = "content_extraction"
    SUMMARIZATION = "summarization"
    IMAGE_MAPPING = "image_mapping"
    SPEAKER_NOTES = "speaker_notes"
    SPEAKER_NOTES_REFINE = "speaker_notes_refine"
    LLM_EVAL = "llm_eval"
    BASELINE_FLAT = "baseline_flat"
    BASELINE_COT = "baseline_cot"
    BASELINE_CONS = "baseline_cons"


AUDIENCE_VARIANTS = frozenset(
    {PromptName.TOPIC_EXTRACTION, PromptName.CONTENT_EXTRACTION, PromptName.IMAGE_MAPPING}
)


class _Template(string.Template):
    # placeholders must be braced so prose like "$5" stays literal
    pattern = r"""
    \$(?:
      (?P<escaped>\$) |
      (?P<named>(?!)) |
      {(?P<braced>[_a-z][_a-z0-9]*)} |
      (?P<invalid>{[^}]*})
    )
    """


def placeholders(body: str) -> frozenset[str]:
    names = set()
    for m in _Template.pattern.finditer(body):
        if m.group("invalid") is not None:
            raise PromptError(f"malformed placeholder {m.group(0)!r}")
        if m.group("braced"):
            names.add(m.group("braced"))
    return frozenset(names)


@dataclass(frozen=True)
class PromptTemplate:
    name: PromptName
    audience: Optional[AudienceLevel]
    body: str
    required_vars: frozenset[str]

    @classmethod
    def from_body(cls, name: PromptName, audience: Optional[AudienceLevel], body: str) -> "PromptTemplate":
        return cls(name, audience, body, placeholders(body))


def render(template: PromptTemplate, bindings: Mapping[str, str], strict: bool = True) -> str:
    """Substitute every placeholder; missing names always fail, extra names fail when strict."""
    for name in sorted(template.required_vars):
        if name not in bindings:
            raise MissingVariable(name)
    if strict:
        for name in sorted(bindings):
            if name not in template.required_vars:
                raise UnknownVariable(name)
    return _Template(template.body).substitute({k: str(v) for k, v in bindings.items()})


class PromptLibrary:
    """Immutable registry of templates read from one directory."""

    def __init__(self, templates: Mapping[tuple[PromptName, Optional[AudienceLevel]], PromptTemplate],
                 version: str = ""):
        self._templates = dict(templates)
        self.version = version

    @classmethod
    def from_dir(cls, directory: Path | str | None = None) -> "PromptLibrary":
        root = Path(directory) if directory is not None else resources.files("slidecast.prompts") / "templates"
        templates = {}
        for name in PromptName:
            audiences = list(AudienceLevel) if name in AUDIENCE_VARIANTS else [None]
            for audience in audiences:
                filename = f"{name.value}.{audience.value}.txt" if audience else f"{name.value}.txt"
                path = root / filename
                if not path.is_file():
                    raise PromptError(f"prompt directory {root} lacks {filename}")
                body = path.read_text(encoding="utf-8")
                templates[(name, audience)] = PromptTemplate.from_body(name, audience, body)
        version_file = root / "VERSION"
        version = version_file.read_text(encoding="utf-8").strip() if version_file.is_file() else ""
        return cls(templates, version)

    def get(self, name: PromptName, audience: Optional[AudienceLevel] = None) -> PromptTemplate:
        name = PromptName(name)
        if name in AUDIENCE_VARIANTS:
            if audience is None:
                raise MissingVariant(f"{name.value} requires an audience level")
            key = (name, AudienceLevel(audience))
        else:
            # audience-free prompts ignore the level
            key = (name, None)
        try:
            return self._templates[key]
        except KeyError:
            raise MissingVariant(f"no template registered for {name.value} ({audience})") from None

    def render(self, name: PromptName, audience: Optional[AudienceLevel] = None, **bindings: str) -> str:
        return render(self.get(name, audience), bindings)


@functools.lru_cache(maxsize=8)
def load_library(directory: Optional[str] = None) -> PromptLibrary:
    return PromptLibrary.from_dir(directory)


def get_template(name: PromptName, audience: Optional[AudienceLevel] = None,
                 prompts_dir: Optional[str] = None) -> PromptTemplate:
    return load_library(prompts_dir).get(name, audience)

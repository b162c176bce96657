"""Turn documents into slide decks with narration, and score decks with a model judge."""

from slidecast.gateway import BackendConfig, BackendKind, Gateway, ScriptedMock
from slidecast.ingest import SourceDocument, extract_text_and_images, load_document
from slidecast.prompts import AudienceLevel
from slidecast.slides import Deck, GenerationConfig, generate_baseline_deck, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AudienceLevel",
    "BackendConfig",
    "BackendKind",
    "Deck",
    "Gateway",
    "GenerationConfig",
    "ScriptedMock",
    "SourceDocument",
    "extract_text_and_images",
    "generate_baseline_deck",
    "load_document",
    "run_pipeline",
]

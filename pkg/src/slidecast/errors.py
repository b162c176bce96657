"""Exception hierarchy shared by every slidecast stage."""

from __future__ import annotations


class SlidecastError(Exception):
    """Base class. ``stage`` is filled in by the orchestrator that caught it."""

    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class PreconditionError(SlidecastError, ValueError):
    pass


# -- ingestion ---------------------------------------------------------------


class IngestError(SlidecastError):
    pass


class UnsupportedFormat(IngestError):
    def __init__(self, name: str):
        super().__init__(f"unsupported document format: {name!r}")
        self.name = name


class MalformedArchive(IngestError):
    pass


class MissingDocumentPart(IngestError):
    pass


class MalformedXml(IngestError):
    def __init__(self, part_name: str, detail: str = ""):
        super().__init__(f"malformed XML in {part_name}: {detail}".rstrip(": "))
        self.part_name = part_name


class EmptyDocument(IngestError):
    pass


# -- gateway -----------------------------------------------------------------


class GatewayError(SlidecastError):
    pass


class AuthError(GatewayError):
    pass


class TransportError(GatewayError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class BackendRefused(GatewayError):
    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"backend refused request with status {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt


class UnparseableOutput(GatewayError):
    def __init__(self, last_raw_text: str, attempts: int = 0):
        excerpt = last_raw_text if len(last_raw_text) <= 200 else last_raw_text[:200] + "..."
        super().__init__(f"no valid JSON after {attempts} attempt(s); last output: {excerpt!r}")
        self.last_raw_text = last_raw_text
        self.attempts = attempts


class MockScriptMiss(GatewayError):
    def __init__(self, fingerprint: str):
        super().__init__(f"scripted mock has no response for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


# -- prompts -----------------------------------------------------------------


class PromptError(SlidecastError):
    pass


class MissingVariant(PromptError):
    pass


class MissingVariable(PromptError):
    def __init__(self, name: str):
        super().__init__(f"missing binding for template variable {name!r}")
        self.name = name


class UnknownVariable(PromptError):
    def __init__(self, name: str):
        super().__init__(f"binding {name!r} is not a variable of this template")
        self.name = name


# -- slide generation --------------------------------------------------------


class EmptyTitleList(SlidecastError):
    pass


class AllContentEmpty(SlidecastError):
    pass


class InvariantViolation(SlidecastError):
    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


# -- presentation ------------------------------------------------------------


class TtsUnavailable(SlidecastError):
    pass


class TtsFailed(SlidecastError):
    def __init__(self, chunk_index: int, detail: str):
        super().__init__(f"TTS failed on chunk {chunk_index}: {detail}")
        self.chunk_index = chunk_index
        self.detail = detail


class MissingClip(SlidecastError):
    def __init__(self, slide_index: int):
        super().__init__(f"no audio clip for slide {slide_index}")
        self.slide_index = slide_index


class DuplicateClip(SlidecastError):
    def __init__(self, slide_index: int):
        super().__init__(f"more than one audio clip for slide {slide_index}")
        self.slide_index = slide_index


# -- evaluation --------------------------------------------------------------


class EmptyScoreList(SlidecastError):
    pass


class EmptyCorpus(SlidecastError):
    pass


class CorpusFailed(SlidecastError):
    pass


# -- export ------------------------------------------------------------------


class ManifestMismatch(SlidecastError):
    pass

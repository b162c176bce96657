"""Model-as-judge scoring of decks and per-method aggregation into a comparison table."""

from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from slidecast.errors import (
    CorpusFailed,
    EmptyCorpus,
    EmptyScoreList,
    PreconditionError,
    SlidecastError,
)
from slidecast.gateway import Gateway, prompt_request
from slidecast.ingest import extract_text_and_images, load_document
from slidecast.prompts import PromptName, load_library
from slidecast.slides import Deck

logger = logging.getLogger(__name__)

DIMENSIONS = ("coherence", "redundancy", "relevance")
COLUMNS = DIMENSIONS + ("average",)
SCORE_MIN, SCORE_MAX = 1.0, 10.0

DIMENSION_GUIDE = {
    "coherence": "does each slide lead naturally into the next, so the deck reads as one logical story?",
    "redundancy": "is the deck free of information repeated across slides? "
                  "10 means nothing is repeated, 1 means slides largely restate each other.",
    "relevance": "does the content of every slide support that slide's title and the source document?",
}

JUDGE_SYSTEM = "You grade presentation slides. Answer with valid JSON only."
DOCUMENT_WITHHELD = "(The source document is not provided; judge the slides on their own.)"
SOURCE_NAMES = ("source.md", "source.markdown", "source.docx", "source.txt")


@dataclass(frozen=True)
class JudgeConfig:
    model_id: str = "llama-3-70b-instruct"
    include_document: bool = True
    per_dimension: bool = False
    spread: str = "stderr"
    temperature: float = 0.0
    max_tokens: int = 512
    max_repair_attempts: int = 2
    workers: int = 4
    prompts_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.spread not in ("stderr", "sd"):
            raise ValueError("spread must be 'stderr' or 'sd'")


@dataclass
class DeckScores:
    doc_id: str
    method_tag: str
    coherence: float
    redundancy: float
    relevance: float
    warnings: list[str] = field(default_factory=list)

    def get(self, dimension: str) -> float:
        return getattr(self, dimension)


@dataclass(frozen=True)
class DimensionStats:
    mean: float
    stderr: float
    n: int


@dataclass
class MethodSummary:
    method_tag: str
    dimensions: dict[str, DimensionStats]
    average_mean: float
    average_stderr: float
    warnings: list[str] = field(default_factory=list)

    def column(self, name: str) -> tuple[float, float]:
        if name == "average":
            return self.average_mean, self.average_stderr
        stats = self.dimensions[name]
        return stats.mean, stats.stderr

    def to_dict(self) -> dict:
        return {
            "method_tag": self.method_tag,
            **{d: {"mean": s.mean, "stderr": s.stderr, "n": s.n} for d, s in self.dimensions.items()},
            "average": {"mean": self.average_mean, "stderr": self.average_stderr},
        }


@dataclass(frozen=True)
class CorpusFailure:
    doc_id: str
    method_tag: str
    stage: str
    message: str


@dataclass
class CorpusReport:
    rows: list[MethodSummary]
    corpus_id: str
    judge_model: str
    failures: list[CorpusFailure] = field(default_factory=list)
    documents: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def table(self) -> str:
        return compare(self.rows)[0]

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "judge_model": self.judge_model,
            "documents": self.documents,
            "comparison": compare(self.rows)[1],
            "failures": [vars(f) for f in self.failures],
            "failure_count": len(self.failures),
            "warnings": list(self.warnings),
        }


# -- judging ------------------------------------------------------------------------


def deck_outline(deck: Deck) -> str:
    parts = []
    for s in deck.slides:
        lines = [f"Slide {s.index + 1}: {s.title}"] + [f"- {b}" for b in s.bullets]
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def _as_score(value: Any) -> Optional[float]:
    if isinstance(value, dict):
        value = value.get("score")
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        score = float(value)
    elif isinstance(value, str):
        try:
            score = float(value.strip())
        except ValueError:
            return None
    else:
        return None
    return score if math.isfinite(score) else None


def _scores_in(value: Any, dims: Sequence[str]) -> Optional[dict[str, float]]:
    if not isinstance(value, dict):
        return None
    lowered = {str(k).strip().lower(): v for k, v in value.items()}
    out = {}
    for dim in dims:
        score = _as_score(lowered.get(dim))
        if score is None:
            return None
        out[dim] = score
    return out


def _ask_judge(document_text: str, deck: Deck, dims: Sequence[str], gateway: Gateway,
               config: JudgeConfig) -> dict[str, float]:
    prompt = load_library(config.prompts_dir).render(
        PromptName.LLM_EVAL,
        document_text=document_text if config.include_document else DOCUMENT_WITHHELD,
        slides=deck_outline(deck),
        dimensions="\n".join(f"- {d}: {DIMENSION_GUIDE[d]}" for d in dims),
    )
    request = prompt_request(config.model_id, prompt, system=JUDGE_SYSTEM,
                             temperature=config.temperature, max_tokens=config.max_tokens)
    value = gateway.complete_json(request, lambda v: _scores_in(v, dims) is not None,
                                  config.max_repair_attempts)
    return _scores_in(value, dims)


def judge_deck(
    document_text: str,
    deck: Deck,
    gateway: Gateway,
    config: JudgeConfig = JudgeConfig(),
    doc_id: Optional[str] = None,
) -> DeckScores:
    """Score one deck on all three dimensions, clamping each score into 1..10."""
    if not deck.slides:
        raise PreconditionError("cannot judge an empty deck")
    if not document_text.strip():
        raise PreconditionError("cannot judge without the source text")
    if config.per_dimension:
        raw: dict[str, float] = {}
        for dim in DIMENSIONS:
            raw.update(_ask_judge(document_text, deck, (dim,), gateway, config))
    else:
        raw = _ask_judge(document_text, deck, DIMENSIONS, gateway, config)

    warnings = []
    scores = {}
    for dim in DIMENSIONS:
        clamped = min(max(raw[dim], SCORE_MIN), SCORE_MAX)
        if clamped != raw[dim]:
            msg = f"judge gave {dim} {raw[dim]:g}, outside {SCORE_MIN:g}..{SCORE_MAX:g}; clamped to {clamped:g}"
            logger.warning(msg)
            warnings.append(msg)
        scores[dim] = clamped
    return DeckScores(doc_id or deck.doc_id, deck.method_tag, warnings=warnings, **scores)


# -- aggregation ----------------------------------------------------------------------


def average_of(values: Sequence[float]) -> float:
    """Average column: plain mean of the per-dimension values."""
    return math.fsum(values) / len(values)


def dimension_stats(values: Sequence[float], spread: str = "stderr") -> DimensionStats:
    n = len(values)
    mean = statistics.fmean(values)
    if n < 2:
        return DimensionStats(mean, 0.0, n)
    sd = statistics.stdev(values)
    return DimensionStats(mean, sd / math.sqrt(n) if spread == "stderr" else sd, n)


def aggregate(scores: Sequence[DeckScores], method_tag: Optional[str] = None,
              spread: str = "stderr") -> MethodSummary:
    """Mean and standard error per dimension; the average column averages both."""
    if not scores:
        raise EmptyScoreList("no scores to aggregate")
    tags = {s.method_tag for s in scores}
    if method_tag is None:
        if len(tags) != 1:
            raise PreconditionError(f"scores mix methods {sorted(tags)}")
        method_tag = tags.pop()
    ordered = sorted(scores, key=lambda s: s.doc_id)
    warnings = []
    if len(ordered) == 1:
        warnings.append(f"method {method_tag!r} has a single score; spread reported as 0")
    dims = {d: dimension_stats([s.get(d) for s in ordered], spread) for d in DIMENSIONS}
    return MethodSummary(
        method_tag=method_tag,
        dimensions=dims,
        average_mean=average_of([dims[d].mean for d in DIMENSIONS]),
        average_stderr=average_of([dims[d].stderr for d in DIMENSIONS]),
        warnings=warnings,
    )


# -- comparison ---------------------------------------------------------------------


def column_ranks(values: Sequence[float], decimals: int = 2) -> list[Optional[int]]:
    """Competition ranks on displayed values; only ranks 1 and 2 are reported."""
    shown = [round(v, decimals) for v in values]
    ranks = []
    for v in shown:
        rank = 1 + sum(1 for other in shown if other > v)
        ranks.append(rank if rank <= 2 else None)
    return ranks


def _cell(mean: float, spread: float, rank: Optional[int]) -> str:
    text = f"{mean:.2f} ± {spread:.2f}"
    if rank == 1:
        return f"**{text}**"
    if rank == 2:
        return f"_{text}_"
    return text


def compare(rows: Sequence[MethodSummary]) -> tuple[str, dict]:
    """Render rows in the given order; best per column in ``**``, runner-up in ``_``."""
    ranks = {col: column_ranks([r.column(col)[0] for r in rows]) for col in COLUMNS}
    machine_rows = []
    cells = []
    for i, row in enumerate(rows):
        entry: dict[str, Any] = {"method_tag": row.method_tag}
        line = [row.method_tag]
        for col in COLUMNS:
            mean, spread = row.column(col)
            entry[col] = {"mean": mean, "stderr": spread, "rank": ranks[col][i]}
            if col != "average":
                entry[col]["n"] = row.dimensions[col].n
            line.append(_cell(mean, spread, ranks[col][i]))
        machine_rows.append(entry)
        cells.append(line)

    header = ["Method"] + [c.capitalize() for c in COLUMNS]
    widths = [max(len(r[j]) for r in [header] + cells) for j in range(len(header))]
    fmt = lambda r: " | ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in cells]
    return "\n".join(lines) + "\n", {"columns": list(COLUMNS), "rows": machine_rows}


# -- corpus -----------------------------------------------------------------------


def _find_source(doc_dir: Path) -> Path:
    for name in SOURCE_NAMES:
        if (doc_dir / name).is_file():
            return doc_dir / name
    raise FileNotFoundError(f"{doc_dir.name} has no source document")


def discover_methods(corpus_dir: Path) -> list[str]:
    tags = set()
    for deck_file in corpus_dir.glob("*/deck.*.json"):
        tags.add(deck_file.name[len("deck."):-len(".json")])
    return sorted(tags)


def evaluate_corpus(
    corpus_dir: str | Path,
    methods: Optional[Sequence[str]],
    gateway: Gateway,
    config: JudgeConfig = JudgeConfig(),
) -> CorpusReport:
    """Judge every (document, method) deck under ``corpus_dir`` and aggregate per method.

    Layout: ``<corpus>/<doc_id>/source.(md|docx|txt)`` plus
    ``deck.<method>.json`` for each method. Failed pairs are recorded and
    left out of the aggregates.
    """
    corpus_dir = Path(corpus_dir)
    doc_dirs = sorted(p for p in corpus_dir.iterdir() if p.is_dir()) if corpus_dir.is_dir() else []
    if not doc_dirs:
        raise EmptyCorpus(f"no document directories under {corpus_dir}")
    methods = list(methods) if methods else discover_methods(corpus_dir)
    if not methods:
        raise EmptyCorpus(f"no deck files under {corpus_dir}")

    failures: list[CorpusFailure] = []
    jobs = []
    for doc_dir in doc_dirs:
        try:
            text, _ = extract_text_and_images(load_document(_find_source(doc_dir)))
        except (SlidecastError, OSError, UnicodeDecodeError) as exc:
            failures.extend(CorpusFailure(doc_dir.name, m, "ingest", str(exc)) for m in methods)
            continue
        for method in methods:
            jobs.append((doc_dir, text, method))

    def judge_one(job) -> tuple[Optional[DeckScores], Optional[CorpusFailure]]:
        doc_dir, text, method = job
        deck_path = doc_dir / f"deck.{method}.json"
        try:
            deck = Deck.from_json(deck_path.read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            return None, CorpusFailure(doc_dir.name, method, "load_deck", f"{type(exc).__name__}: {exc}")
        deck.method_tag = method
        try:
            return judge_deck(text, deck, gateway, config, doc_id=doc_dir.name), None
        except SlidecastError as exc:
            return None, CorpusFailure(doc_dir.name, method, "judge_deck", f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(judge_one, jobs))

    by_method: dict[str, list[DeckScores]] = {m: [] for m in methods}
    warnings: list[str] = []
    for scores, failure in results:
        if failure is not None:
            failures.append(failure)
        else:
            by_method[scores.method_tag].append(scores)
            warnings.extend(f"{scores.doc_id}/{scores.method_tag}: {w}" for w in scores.warnings)

    rows = []
    for method in methods:
        if by_method[method]:
            summary = aggregate(by_method[method], method, config.spread)
            warnings.extend(summary.warnings)
            rows.append(summary)
        else:
            warnings.append(f"method {method!r} has no successfully judged decks; row omitted")
    if not rows:
        first = failures[0]
        raise CorpusFailed(
            f"every document failed; first cause ({first.doc_id}/{first.method_tag}, "
            f"{first.stage}): {first.message}"
        )
    failures.sort(key=lambda f: (f.doc_id, f.method_tag))
    return CorpusReport(
        rows=rows,
        corpus_id=corpus_dir.name,
        judge_model=config.model_id,
        failures=failures,
        documents=len(doc_dirs),
        warnings=warnings,
    )


def report_json(report: CorpusReport) -> str:
    return json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n"


def summaries_from_means(triples: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Average column for already-aggregated (coherence, redundancy, relevance) means."""
    return {method: average_of(list(t)) for method, t in triples.items()}

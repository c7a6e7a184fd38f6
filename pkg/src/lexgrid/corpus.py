"""Corpus store: segmentation of legal documents into articles and a
newline-delimited persistent record format.

A document arrives as pre-extracted raw text plus standardized metadata
(jurisdiction, ban topic, text type, institution, dates). It is split into
articles at French-style heading lines ("Article 12", "Art. 3", case
insensitive, optional trailing punctuation); anything before the first
heading becomes a "Preamble" article. Articles are the retrieval unit for
the whole pipeline.

The persisted corpus is one UTF-8 file of newline-delimited JSON records:
a manifest record first, then one record per article carrying exactly the
Article field names. Writes are atomic (tmp file + rename) and guarded by
a file lock; corpora are immutable once written, so readers need no
coordination.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from filelock import FileLock

from .errors import DuplicateSourceId, EmptyDocument, InvalidDocument

logger = logging.getLogger(__name__)

CORPUS_FORMAT_VERSION = 1

# Heading family: "Article <n>" / "Art. <n>", case-insensitive. The group
# captures the canonical heading; trailing separator punctuation after the
# number is consumed by the match but excluded from the heading.
DEFAULT_HEADING_PATTERNS = (
    r"\b(?P<heading>(?:article|art\.)\s+\d+)\s*(?:[.:;)\-–—]\s*|(?=\s)|$)",
)

PREAMBLE_HEADING = "Preamble"


class TextType(str, Enum):
    LAW = "law"
    DECREE = "decree"
    REGULATION = "regulation"
    DIRECTIVE = "directive"
    ORDER = "order"
    OTHER = "other"

    @classmethod
    def coerce(cls, value) -> "TextType":
        """Map a free-form value onto the enum; unknown values become OTHER
        rather than failing, because real scans carry noisy metadata."""
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            return cls.OTHER


def parse_date(value) -> date | None:
    """Lenient ISO-8601 date parsing: unparseable or absent dates become None."""
    if value is None or isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value).strip())
    except ValueError:
        return None


@dataclass(frozen=True)
class ArticleMetadata:
    """The standardized metadata block copied from a source onto each article."""

    source_id: str
    country: str
    ban_topic: str
    text_type: TextType
    institution: str
    publication_date: date | None = None
    revision_date: date | None = None

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "country": self.country,
            "ban_topic": self.ban_topic,
            "text_type": self.text_type.value,
            "institution": self.institution,
            "publication_date": self.publication_date.isoformat() if self.publication_date else None,
            "revision_date": self.revision_date.isoformat() if self.revision_date else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArticleMetadata":
        return cls(
            source_id=d["source_id"],
            country=d["country"],
            ban_topic=d["ban_topic"],
            text_type=TextType.coerce(d.get("text_type", "other")),
            institution=d.get("institution", ""),
            publication_date=parse_date(d.get("publication_date")),
            revision_date=parse_date(d.get("revision_date")),
        )


@dataclass
class DocumentSource:
    """One pre-extracted legal document, prior to segmentation."""

    source_id: str
    country: str
    ban_topic: str
    text_type: TextType
    institution: str
    raw_text: str
    publication_date: date | None = None
    revision_date: date | None = None

    def __post_init__(self):
        if not self.source_id or not self.source_id.strip():
            raise InvalidDocument("source_id must be non-empty")
        if not self.raw_text or not self.raw_text.strip():
            raise EmptyDocument(self.source_id)
        self.text_type = TextType.coerce(self.text_type)
        self.publication_date = parse_date(self.publication_date)
        self.revision_date = parse_date(self.revision_date)
        if (
            self.publication_date is not None
            and self.revision_date is not None
            and self.revision_date < self.publication_date
        ):
            raise InvalidDocument(
                f"{self.source_id}: revision_date {self.revision_date} precedes "
                f"publication_date {self.publication_date}"
            )

    @property
    def metadata(self) -> ArticleMetadata:
        return ArticleMetadata(
            source_id=self.source_id,
            country=self.country,
            ban_topic=self.ban_topic,
            text_type=self.text_type,
            institution=self.institution,
            publication_date=self.publication_date,
            revision_date=self.revision_date,
        )


@dataclass(frozen=True)
class Article:
    """One segmented legal provision; the unit of retrieval and citation."""

    article_id: str
    ordinal: int
    heading: str
    body: str
    metadata: ArticleMetadata

    def to_dict(self) -> dict:
        return {
            "article_id": self.article_id,
            "ordinal": self.ordinal,
            "heading": self.heading,
            "body": self.body,
            "metadata": self.metadata.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Article":
        return cls(
            article_id=d["article_id"],
            ordinal=int(d["ordinal"]),
            heading=d["heading"],
            body=d["body"],
            metadata=ArticleMetadata.from_dict(d["metadata"]),
        )


@dataclass
class Corpus:
    name: str
    articles: list[Article] = field(default_factory=list)
    created_at: str = ""

    def __post_init__(self):
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat()
        seen = set()
        for a in self.articles:
            if a.article_id in seen:
                raise InvalidDocument(f"duplicate article_id in corpus: {a.article_id!r}")
            seen.add(a.article_id)

    def __len__(self) -> int:
        return len(self.articles)

    def get(self, article_id: str) -> Article | None:
        return self._by_id().get(article_id)

    def article_ids(self) -> set[str]:
        return set(self._by_id())

    def _by_id(self) -> dict[str, Article]:
        # Recomputed lazily; corpora are immutable after ingest.
        cache = getattr(self, "_id_cache", None)
        if cache is None or len(cache) != len(self.articles):
            cache = {a.article_id: a for a in self.articles}
            object.__setattr__(self, "_id_cache", cache)
        return cache


@dataclass(frozen=True)
class MetadataFilter:
    """Conjunction of optional metadata clauses; absent clauses are unconstrained.

    Date clauses constrain the publication date; an article with no parseable
    publication date cannot satisfy a date clause.
    """

    country: str | None = None
    ban_topic: str | None = None
    text_types: frozenset[TextType] | None = None
    date_from: date | None = None
    date_to: date | None = None

    @classmethod
    def build(cls, country=None, ban_topic=None, text_types=None, date_from=None, date_to=None):
        tt = None
        if text_types:
            tt = frozenset(TextType.coerce(t) for t in text_types)
        return cls(
            country=country,
            ban_topic=ban_topic,
            text_types=tt,
            date_from=parse_date(date_from),
            date_to=parse_date(date_to),
        )

    def matches(self, meta: ArticleMetadata) -> bool:
        if self.country is not None and meta.country != self.country:
            return False
        if self.ban_topic is not None and meta.ban_topic != self.ban_topic:
            return False
        if self.text_types is not None and meta.text_type not in self.text_types:
            return False
        if self.date_from is not None or self.date_to is not None:
            pub = meta.publication_date
            if pub is None:
                return False
            if self.date_from is not None and pub < self.date_from:
                return False
            if self.date_to is not None and pub > self.date_to:
                return False
        return True

    def merged_with(self, other: "MetadataFilter") -> "MetadataFilter":
        """Fill clauses absent here from `other`; clauses set here win."""
        return MetadataFilter(
            country=self.country if self.country is not None else other.country,
            ban_topic=self.ban_topic if self.ban_topic is not None else other.ban_topic,
            text_types=self.text_types if self.text_types is not None else other.text_types,
            date_from=self.date_from if self.date_from is not None else other.date_from,
            date_to=self.date_to if self.date_to is not None else other.date_to,
        )

    def to_dict(self) -> dict:
        return {
            "country": self.country,
            "ban_topic": self.ban_topic,
            "text_types": sorted(t.value for t in self.text_types) if self.text_types else None,
            "date_from": self.date_from.isoformat() if self.date_from else None,
            "date_to": self.date_to.isoformat() if self.date_to else None,
        }


def normalize_text(text: str) -> str:
    """Collapse every whitespace run (incl. normalized line endings) to one
    space and strip the ends. This is the equivalence used by the
    segmentation totality check."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return re.sub(r"\s+", " ", text).strip()


def _compile_heading_re(patterns: Sequence[str] | None) -> re.Pattern:
    pats = tuple(patterns) if patterns else DEFAULT_HEADING_PATTERNS
    return re.compile("|".join(f"(?:{p})" for p in pats), re.IGNORECASE)


def _canonical_heading(match: re.Match) -> str:
    heading = match.groupdict().get("heading") or match.group(0)
    return normalize_text(heading)


def segment_document(
    source: DocumentSource,
    heading_patterns: Sequence[str] | None = None,
) -> list[Article]:
    """Split a document into articles at heading matches.

    Every character of the raw text lands in exactly one article: heading
    matches open a new article, the text up to the next match is its body,
    and text before the first heading becomes a "Preamble" article. A
    heading with an empty body is folded back into the preceding article
    rather than emitted (bodies must be non-empty).
    """
    text = source.raw_text
    if not text or not text.strip():
        raise EmptyDocument(source.source_id)

    heading_re = _compile_heading_re(heading_patterns)
    matches = list(heading_re.finditer(text))

    # (heading, body) segments in document order; heading "" marks the preamble.
    segments: list[list[str]] = []
    preamble = text[: matches[0].start()] if matches else text
    if preamble.strip():
        segments.append(["", preamble.strip()])

    for i, m in enumerate(matches):
        body_end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[m.end(): body_end].strip()
        if not body:
            # Fold the bare heading text into the previous segment.
            if segments:
                segments[-1][1] = (segments[-1][1] + " " + _canonical_heading(m)).strip()
            else:
                segments.append(["", _canonical_heading(m)])
            continue
        segments.append([_canonical_heading(m), body])

    articles = []
    meta = source.metadata
    for ordinal, (heading, body) in enumerate(segments, start=1):
        articles.append(
            Article(
                article_id=f"{source.source_id}:{ordinal}",
                ordinal=ordinal,
                heading=heading or PREAMBLE_HEADING,
                body=body,
                metadata=meta,
            )
        )
    return articles


def reconstruct_source_text(articles: Iterable[Article]) -> str:
    """Join headings and bodies back together (preamble contributes only its
    body) under normalize_text. Compare against canonicalize_source_text."""
    parts = []
    for a in sorted(articles, key=lambda a: a.ordinal):
        if a.heading != PREAMBLE_HEADING:
            parts.append(a.heading)
        parts.append(a.body)
    return normalize_text(" ".join(parts))


def canonicalize_source_text(
    raw_text: str, heading_patterns: Sequence[str] | None = None
) -> str:
    """Normalize a raw document for reconstruction comparison: each heading
    match is replaced by its canonical heading (separator punctuation
    dropped), then whitespace is normalized. Segmentation loses exactly the
    separator characters, so this is the text it must preserve."""
    heading_re = _compile_heading_re(heading_patterns)
    replaced = heading_re.sub(lambda m: _canonical_heading(m) + " ", raw_text)
    return normalize_text(replaced)


def ingest(
    sources: Sequence[DocumentSource],
    corpus_name: str,
    path: str | Path | None = None,
    heading_patterns: Sequence[str] | None = None,
) -> Corpus:
    """Segment a batch of sources into one corpus and optionally persist it.

    Source ids must be pairwise distinct. Persisting is idempotent: the
    corpus file is atomically replaced, and re-ingesting the same sources
    yields a byte-identical file except for the created_at stamp.
    """
    seen: set[str] = set()
    for s in sources:
        if s.source_id in seen:
            raise DuplicateSourceId(s.source_id)
        seen.add(s.source_id)

    articles: list[Article] = []
    for s in sources:
        articles.extend(segment_document(s, heading_patterns))

    corpus = Corpus(name=corpus_name, articles=articles)
    logger.info("ingested %d articles from %d sources into corpus %r",
                len(articles), len(sources), corpus_name)
    if path is not None:
        write_corpus(corpus, path)
    return corpus


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Atomically write the newline-delimited corpus file (manifest record
    first, then one record per article), holding an exclusive file lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "record_type": "manifest",
        "format_version": CORPUS_FORMAT_VERSION,
        "name": corpus.name,
        "created_at": corpus.created_at,
        "article_count": len(corpus.articles),
    }
    lock = FileLock(str(path) + ".lock")
    with lock:
        fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(json.dumps(manifest, ensure_ascii=False, sort_keys=True) + "\n")
                for a in corpus.articles:
                    fh.write(json.dumps(a.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise


def read_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise InvalidDocument(f"corpus file {path} is empty")
    manifest = json.loads(lines[0])
    if manifest.get("record_type") != "manifest":
        raise InvalidDocument(f"corpus file {path} does not start with a manifest record")
    articles = [Article.from_dict(json.loads(line)) for line in lines[1:]]
    corpus = Corpus(
        name=manifest["name"],
        articles=articles,
        created_at=manifest.get("created_at", ""),
    )
    declared = manifest.get("article_count")
    if declared is not None and declared != len(articles):
        raise InvalidDocument(
            f"corpus file {path}: manifest declares {declared} articles, found {len(articles)}"
        )
    return corpus


def filter_articles(corpus: Corpus, predicate: MetadataFilter) -> list[Article]:
    """All articles whose metadata satisfies every clause of the filter."""
    return [a for a in corpus.articles if predicate.matches(a.metadata)]


def load_source_directory(
    input_dir: str | Path, metadata_path: str | Path
) -> list[DocumentSource]:
    """Build sources from a directory of plain-text files plus a sidecar JSON
    file mapping filename -> DocumentSource metadata fields."""
    input_dir = Path(input_dir)
    with open(metadata_path, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    sources = []
    for filename in sorted(sidecar):
        fields = sidecar[filename]
        raw_text = (input_dir / filename).read_text(encoding="utf-8")
        sources.append(
            DocumentSource(
                source_id=fields.get("source_id", Path(filename).stem),
                country=fields["country"],
                ban_topic=fields["ban_topic"],
                text_type=TextType.coerce(fields.get("text_type", "other")),
                institution=fields.get("institution", ""),
                publication_date=fields.get("publication_date"),
                revision_date=fields.get("revision_date"),
                raw_text=raw_text,
            )
        )
    return sources

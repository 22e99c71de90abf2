"""Corpus ingestion, moderation, splitting and profiling.

Documents travel as UTF-8 line-delimited JSON with fields
{id, text, label, domain, subfield, source}. "Token" throughout means a
whitespace-delimited word. Moderation mirrors the shipped default policy
(editable JSON asset): length floor, split-specific keyword lists,
generation-identifier stripping for machine text, and per-symbol count
limits; rejections are results, not errors, and get logged as CSV rows
(id, rule, detail).
"""

import csv
import json
import math
import random
import re
from dataclasses import dataclass, field, asdict
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .util import DataError, derive_seed

HUMAN_LABEL = "human"
DOMAINS = ("STEM", "Humanities", "SocialScience")
SOURCE_KINDS = ("wiki", "arxiv", "gutenberg")


@dataclass
class Document:
    id: str
    text: str
    label: str                     # "human" or a generator name
    domain: str = ""
    subfield: str = ""
    source_kind: str = ""

    def is_human(self) -> bool:
        return self.label == HUMAN_LABEL

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "label": self.label,
                "domain": self.domain, "subfield": self.subfield,
                "source": self.source_kind}


def words(text: str) -> List[str]:
    return text.split()


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

@dataclass
class IngestResult:
    documents: List[Document]
    errors: List[Tuple[int, str]]    # (1-based line number, message)


_DEFAULT_SCHEMA = {"id": "id", "text": "text", "label": "label",
                   "domain": "domain", "subfield": "subfield",
                   "source": "source"}


def ingest(stream: Iterable[str], schema: Optional[Dict[str, str]] = None) -> IngestResult:
    """Parse line-delimited JSON records into Documents.

    `schema` maps canonical field names to the names used in the stream.
    text and label are required; id is synthesized from the line number when
    absent. Unparseable or incomplete lines are reported with their line
    number, never silently dropped.
    """
    fmap = dict(_DEFAULT_SCHEMA)
    if schema:
        fmap.update(schema)
    docs: List[Document] = []
    errors: List[Tuple[int, str]] = []
    seen_ids = set()
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append((lineno, f"malformed JSON: {exc.msg}"))
            continue
        if not isinstance(rec, dict):
            errors.append((lineno, "record is not an object"))
            continue
        missing = [canon for canon in ("text", "label") if fmap[canon] not in rec]
        if missing:
            errors.append((lineno, "missing required field(s): "
                           + ", ".join(fmap[m] for m in missing)))
            continue
        doc_id = str(rec.get(fmap["id"], f"line{lineno:06d}"))
        if doc_id in seen_ids:
            errors.append((lineno, f"duplicate id {doc_id!r}"))
            continue
        seen_ids.add(doc_id)
        docs.append(Document(
            id=doc_id,
            text=_normalize_ws(str(rec[fmap["text"]])),
            label=str(rec[fmap["label"]]),
            domain=str(rec.get(fmap["domain"], "")),
            subfield=str(rec.get(fmap["subfield"], "")),
            source_kind=str(rec.get(fmap["source"], ""))))
    return IngestResult(docs, errors)


def read_jsonl(path: str) -> IngestResult:
    with open(path, "r", encoding="utf-8") as f:
        return ingest(f)


def write_jsonl(docs: Sequence[Document], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Moderation policy
# ---------------------------------------------------------------------------

# default keyword lists mirror the shipped policy asset; order matters for
# identifier stripping (first listed identifier wins)
MACHINE_GENERATION_IDENTIFIERS = [
    "revised book", "revised content", "revised version", "title",
    "after editing", "revised section",
]

MACHINE_SPECIAL_KEYWORDS = [
    "book editor", "clarity", "revisions", "I apologize", "I am sorry",
    "Unfortunately", "complex language", "revised content", "revised version",
    "language model", "accuracy of", "project gutenberg",
    "reliable information", "ISBN", "PMID", "doi:", "Sure,", "Retrieved from",
    "Category", "http", "As an editor", "As an expert",
]

HUMAN_SPECIAL_KEYWORDS = [
    "ISBN", "PMID", "doi", "vol.", "p.", "https:", "http:",
    "References", "External links",
]


@dataclass
class ModerationPolicy:
    min_tokens: int = 50
    human_keywords: List[str] = field(
        default_factory=lambda: list(HUMAN_SPECIAL_KEYWORDS))
    machine_keywords: List[str] = field(
        default_factory=lambda: list(MACHINE_SPECIAL_KEYWORDS))
    generation_identifiers: List[str] = field(
        default_factory=lambda: list(MACHINE_GENERATION_IDENTIFIERS))
    # symbol -> max allowed count; anything above rejects
    human_symbol_limits: Dict[str, int] = field(
        default_factory=lambda: {"$": 500, "&": 150, "\\": 1000})
    machine_symbol_limits: Dict[str, int] = field(
        default_factory=lambda: {"&": 50, "$": 50, "**": 0, "##": 0,
                                 "====": 0, "---": 0})

    def validate(self) -> "ModerationPolicy":
        if self.min_tokens < 0:
            raise DataError("min_tokens must be non-negative")
        for limits in (self.human_symbol_limits, self.machine_symbol_limits):
            for sym, cap in limits.items():
                if cap < 0:
                    raise DataError(f"negative limit for symbol {sym!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModerationPolicy":
        return ModerationPolicy(
            min_tokens=int(d.get("min_tokens", 50)),
            human_keywords=list(d.get("human_keywords", HUMAN_SPECIAL_KEYWORDS)),
            machine_keywords=list(d.get("machine_keywords",
                                        MACHINE_SPECIAL_KEYWORDS)),
            generation_identifiers=list(d.get("generation_identifiers",
                                              MACHINE_GENERATION_IDENTIFIERS)),
            human_symbol_limits={str(k): int(v) for k, v in
                                 d.get("human_symbol_limits",
                                       {"$": 500, "&": 150, "\\": 1000}).items()},
            machine_symbol_limits={str(k): int(v) for k, v in
                                   d.get("machine_symbol_limits",
                                         {"&": 50, "$": 50, "**": 0, "##": 0,
                                          "====": 0, "---": 0}).items()},
        ).validate()


def default_policy() -> ModerationPolicy:
    return ModerationPolicy()


def load_policy(path: Optional[str] = None) -> ModerationPolicy:
    """Load a policy JSON; with no path, the shipped default asset."""
    if path is None:
        blob = resources.files("mgtlab").joinpath(
            "data/moderation_policy.json").read_text(encoding="utf-8")
        return ModerationPolicy.from_dict(json.loads(blob))
    with open(path, "r", encoding="utf-8") as f:
        return ModerationPolicy.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Moderation
# ---------------------------------------------------------------------------

@dataclass
class ModerationResult:
    kept: bool
    document: Optional[Document]   # cleaned document when kept
    rule: str = ""                 # rejection rule name when not kept
    detail: str = ""


@dataclass
class Rejection:
    id: str
    rule: str
    detail: str


def _keyword_regex(kw: str) -> re.Pattern:
    # word-boundary anchors only on alphanumeric edges, so punctuated
    # entries ("doi:", "Sure,", "p.") act as anchored literal substrings
    pat = re.escape(kw)
    if kw and (kw[0].isalnum() or kw[0] == "_"):
        pat = r"\b" + pat
    if kw and (kw[-1].isalnum() or kw[-1] == "_"):
        pat = pat + r"\b"
    return re.compile(pat, re.IGNORECASE)


_KEYWORD_CACHE: Dict[str, re.Pattern] = {}


def _find_keyword(text: str, keywords: Sequence[str]) -> Optional[str]:
    for kw in keywords:
        rx = _KEYWORD_CACHE.get(kw)
        if rx is None:
            rx = _KEYWORD_CACHE[kw] = _keyword_regex(kw)
        if rx.search(text):
            return kw
    return None


def _symbol_violation(text: str, limits: Dict[str, int]) -> Optional[Tuple[str, int]]:
    for sym, cap in limits.items():
        n = text.count(sym)
        if n > cap:
            return sym, n
    return None


def moderate_human(doc: Document, policy: Optional[ModerationPolicy] = None) -> ModerationResult:
    """Keep/reject a human-split document. Rejection is a result, not an error."""
    policy = policy or default_policy()
    if doc.label != HUMAN_LABEL:
        raise DataError(f"moderate_human on non-human document {doc.id!r}")
    text = _normalize_ws(doc.text)
    n = len(words(text))
    if n < policy.min_tokens:
        return ModerationResult(False, None, "min_tokens",
                                f"{n} < {policy.min_tokens}")
    kw = _find_keyword(text, policy.human_keywords)
    if kw is not None:
        return ModerationResult(False, None, "keyword", kw)
    hit = _symbol_violation(text, policy.human_symbol_limits)
    if hit is not None:
        sym, count = hit
        return ModerationResult(False, None, "format_symbol",
                                f"{sym!r} x{count}")
    return ModerationResult(True, Document(doc.id, text, doc.label, doc.domain,
                                           doc.subfield, doc.source_kind))


def strip_generation_identifier(text: str,
                                identifiers: Sequence[str]) -> Tuple[str, Optional[str]]:
    """Remove everything up to and including the colon nearest after the
    first matching identifier. Identifiers are scanned in list order; the
    first match wins. No following colon leaves the text unchanged."""
    low = text.lower()
    for ident in identifiers:
        idx = low.find(ident.lower())
        if idx < 0:
            continue
        colon = text.find(":", idx)
        if colon < 0:
            return text, None
        return text[colon + 1:].lstrip(), ident
    return text, None


def moderate_machine(doc: Document, policy: Optional[ModerationPolicy] = None,
                     max_tokens: Optional[int] = None) -> ModerationResult:
    """Clean or reject a machine-split document.

    In order: length floor; generation-identifier stripping; special-keyword
    rejection; format-symbol limits; then, when max_tokens is given,
    sentence-safe truncation (no period in the prefix rejects).
    """
    policy = policy or default_policy()
    if doc.label == HUMAN_LABEL:
        raise DataError(f"moderate_machine on human document {doc.id!r}")
    text = _normalize_ws(doc.text)
    n = len(words(text))
    if n < policy.min_tokens:
        return ModerationResult(False, None, "min_tokens",
                                f"{n} < {policy.min_tokens}")
    text, stripped = strip_generation_identifier(
        text, policy.generation_identifiers)
    kw = _find_keyword(text, policy.machine_keywords)
    if kw is not None:
        return ModerationResult(False, None, "keyword", kw)
    hit = _symbol_violation(text, policy.machine_symbol_limits)
    if hit is not None:
        sym, count = hit
        return ModerationResult(False, None, "format_symbol",
                                f"{sym!r} x{count}")
    if max_tokens is not None:
        truncated = truncate_to_sentence(text, max_tokens)
        if truncated is None:
            return ModerationResult(False, None, "truncation",
                                    f"no period within first {max_tokens} tokens")
        text = truncated
    cleaned = Document(doc.id, text, doc.label, doc.domain, doc.subfield,
                       doc.source_kind)
    detail = f"stripped identifier {stripped!r}" if stripped else ""
    return ModerationResult(True, cleaned, detail=detail)


def moderate_corpus(docs: Sequence[Document], policy: Optional[ModerationPolicy],
                    split: str, max_tokens: Optional[int] = None
                    ) -> Tuple[List[Document], List[Rejection]]:
    """Batch moderation for one split; returns kept documents + rejection log."""
    if split not in ("human", "machine"):
        raise DataError(f"split must be 'human' or 'machine', got {split!r}")
    kept: List[Document] = []
    rejections: List[Rejection] = []
    for doc in docs:
        if split == "human":
            res = moderate_human(doc, policy)
        else:
            res = moderate_machine(doc, policy, max_tokens=max_tokens)
        if res.kept:
            kept.append(res.document)
        else:
            rejections.append(Rejection(doc.id, res.rule, res.detail))
    return kept, rejections


def write_rejections_csv(rejections: Sequence[Rejection], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "rule", "detail"])
        for r in rejections:
            writer.writerow([r.id, r.rule, r.detail])


def truncate_to_sentence(text: str, max_tokens: int) -> Optional[str]:
    """Cut to at most max_tokens whitespace tokens, then back-trace to the
    last period so the result ends on a sentence. None means no period was
    found in the prefix (caller should reject the text)."""
    if max_tokens < 1:
        raise DataError("max_tokens must be >= 1")
    toks = words(text)
    prefix = " ".join(toks[:max_tokens])
    cut = prefix.rfind(".")
    if cut < 0:
        return None
    return prefix[: cut + 1]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class CorpusSplit:
    train: List[Document]
    test: List[Document]
    seed: int
    ratio: float


def split_train_test(corpus: Sequence[Document], ratio: float,
                     seed: int) -> CorpusSplit:
    """Deterministic stratified split: per class, shuffle under a derived
    seed and take floor(ratio * n) for train, remainder for test."""
    if not (0.0 < ratio < 1.0):
        raise DataError(f"ratio must be in (0,1), got {ratio}")
    by_label: Dict[str, List[Document]] = {}
    for doc in corpus:
        by_label.setdefault(doc.label, []).append(doc)
    for label, docs in sorted(by_label.items()):
        if len(docs) < 2:
            raise DataError(f"class {label!r} has fewer than 2 documents")
    train: List[Document] = []
    test: List[Document] = []
    for label in sorted(by_label):
        docs = sorted(by_label[label], key=lambda d: d.id)
        rng = random.Random(derive_seed(seed, f"split:{label}"))
        rng.shuffle(docs)
        n_train = math.floor(ratio * len(docs))
        train.extend(docs[:n_train])
        test.extend(docs[n_train:])
    return CorpusSplit(train, test, seed, ratio)


# ---------------------------------------------------------------------------
# Profiling and prompts
# ---------------------------------------------------------------------------

def keyword_profile(corpus: Sequence[Document],
                    keywords: Sequence[str]) -> Dict[str, int]:
    """Case-insensitive whole-word occurrence counts summed over the corpus.

    Every requested keyword is present in the result, zero when absent.
    Additive over corpus concatenation by construction.
    """
    if not keywords:
        raise DataError("keyword list is empty")
    patterns = {kw: _keyword_regex(kw) for kw in keywords}
    counts = {kw: 0 for kw in keywords}
    for doc in corpus:
        for kw, rx in patterns.items():
            counts[kw] += len(rx.findall(doc.text))
    return counts


def build_polish_prompt(source_kind: str, text: str) -> str:
    """Fill the shipped polish-prompt template for a source with the text."""
    if source_kind not in SOURCE_KINDS:
        raise DataError(
            f"unknown source kind {source_kind!r}; expected one of {SOURCE_KINDS}")
    template = resources.files("mgtlab").joinpath(
        f"data/prompts/{source_kind}.txt").read_text(encoding="utf-8")
    return template.replace("<text>", text)

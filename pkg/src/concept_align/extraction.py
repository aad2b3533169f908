"""Dictionary-based concept linking for caption text.

Captions are lowercased and split on every non-alphanumeric code point. A
token-level trie over the vocabulary synonyms is then walked greedily from
left to right, always taking the longest synonym that starts at the current
token. Matching is exact, so the similarity threshold that a fuzzy linker
would apply is kept only as a validated no-op argument.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

from .errors import ConflictingSynonym, MalformedLine, MalformedRow

_END = ""  # trie key marking the end of a synonym; never a real token


def _lower_char(ch: str) -> str:
    # str.lower applies full case mapping, which can expand a character
    # (U+0130 -> "i" + combining dot); keep the first code point instead
    lc = ch.lower()
    return lc if len(lc) == 1 else lc[0]


def tokenize_with_offsets(text: str) -> List[Tuple[str, int, int]]:
    """(token, start, end) triples; offsets index characters of ``text``."""
    out = []
    start = None
    buf = []
    for i, ch in enumerate(text):
        if ch.isalnum():
            if start is None:
                start = i
            buf.append(_lower_char(ch))
        elif start is not None:
            out.append(("".join(buf), start, i))
            start, buf = None, []
    if start is not None:
        out.append(("".join(buf), start, len(text)))
    return out


def tokenize(text: str) -> List[str]:
    return [t for t, _, _ in tokenize_with_offsets(text)]


@dataclass
class ConceptVocab:
    trie: dict = field(default_factory=dict)
    canonical: Dict[str, str] = field(default_factory=dict)
    n_synonyms: int = 0

    def add(self, synonym_tokens, cui: str):
        node = self.trie
        for tok in synonym_tokens:
            node = node.setdefault(tok, {})
        old = node.get(_END)
        if old is not None and old != cui:
            raise ConflictingSynonym(f"{' '.join(synonym_tokens)!r} maps to both {old} and {cui}")
        if old is None:
            self.n_synonyms += 1
        node[_END] = cui

    def lookup(self, tokens) -> str:
        node = self.trie
        for tok in tokens:
            node = node.get(tok)
            if node is None:
                return None
        return node.get(_END)


def load_vocab(path) -> ConceptVocab:
    """Read ``cui<TAB>canonical name<TAB>synonym`` rows.

    The canonical name is registered as a synonym too. Blank lines and lines
    starting with ``#`` are skipped.
    """
    vocab = ConceptVocab()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedRow(line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            cui, name, syn = (p.strip() for p in parts)
            if not cui:
                raise MalformedRow(line_no, "empty cui")
            for surface in (name, syn):
                toks = tokenize(surface)
                if not toks:
                    raise MalformedRow(line_no, f"synonym {surface!r} has no tokens")
                try:
                    vocab.add(toks, cui)
                except ConflictingSynonym as exc:
                    raise ConflictingSynonym(f"line {line_no}: {exc}") from None
            vocab.canonical.setdefault(cui, name)
    return vocab


@dataclass(frozen=True)
class Span:
    start: int  # token index, inclusive
    end: int  # token index, exclusive
    cui: str
    surface: str


@dataclass
class ExtractionResult:
    id: str
    tokens: List[str]
    spans: List[Span]

    def to_json(self) -> str:
        doc = {
            "id": self.id,
            "tokens": self.tokens,
            "spans": [{"start": s.start, "end": s.end, "cui": s.cui, "surface": s.surface} for s in self.spans],
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=False)


def extract(caption: str, vocab: ConceptVocab, caption_id: str = "", threshold: float = 0.8) -> ExtractionResult:
    """Greedy left-to-right longest-match linking of ``caption``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    toks = tokenize_with_offsets(caption)
    words = [t for t, _, _ in toks]
    spans = []
    i = 0
    while i < len(words):
        node = vocab.trie
        best = None
        j = i
        while j < len(words):
            node = node.get(words[j])
            if node is None:
                break
            j += 1
            if _END in node:
                best = (j, node[_END])
        if best is None:
            i += 1
            continue
        end, cui = best
        spans.append(Span(i, end, cui, caption[toks[i][1]:toks[end - 1][2]]))
        i = end
    return ExtractionResult(caption_id, words, spans)


def read_captions(path) -> List[Tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((str(rec["id"]), str(rec["caption"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedLine(line_no, str(exc)) from None
    return out


def extract_all(captions: Iterable[Tuple[str, str]], vocab: ConceptVocab, threshold: float = 0.8):
    return [extract(text, vocab, cid, threshold) for cid, text in captions]


def write_extractions(results: Iterable[ExtractionResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def read_extractions(path) -> List[ExtractionResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                spans = [Span(int(s["start"]), int(s["end"]), s["cui"], s["surface"]) for s in rec["spans"]]
                out.append(ExtractionResult(rec["id"], list(rec["tokens"]), spans))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedLine(line_no, str(exc)) from None
    return out


def corpus_stats(stream) -> List[Tuple[str, int]]:
    """Per-CUI occurrence counts, most frequent first, ties by cui.

    Accepts extraction results or manifest triplets (their concept spans).
    """
    counts = Counter()
    for item in stream:
        if hasattr(item, "spans"):
            counts.update(s.cui for s in item.spans)
        else:
            counts.update(c.cui for c in item.concepts)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))

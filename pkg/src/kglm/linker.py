"""Dictionary entity linking: align token spans with KG entities.

Matching is greedy left-to-right longest-match over normalized token
strings; ambiguous surface forms resolve to the lowest entity id. Matching
works on the surface text (not vocab ids), so tokens the LM maps to [UNK]
still link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import IngestError
from .kg import KnowledgeGraph
from .text import TokenizedSequence, normalize


class EntityLexicon:
    """Normalized surface form (token tuple) -> sorted entity ids."""

    def __init__(self, forms: dict[tuple[str, ...], set[int]]):
        self._forms = {f: tuple(sorted(ids)) for f, ids in sorted(forms.items())}
        self.max_len = max((len(f) for f in self._forms), default=0)
        by_entity: dict[int, set[str]] = {}
        for form, ids in self._forms.items():
            for e in ids:
                by_entity.setdefault(e, set()).add(" ".join(form))
        self._by_entity = by_entity

    def __len__(self) -> int:
        return len(self._forms)

    def lookup(self, form: tuple[str, ...]) -> tuple[int, ...]:
        return self._forms.get(form, ())

    def surfaces(self, entity: int) -> frozenset[str]:
        """All registered surface strings for an entity."""
        return frozenset(self._by_entity.get(entity, ()))


@dataclass
class LinkedSequence:
    seq: TokenizedSequence
    alignments: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.seq.ids)
        prev_end = 0
        for start, end, _ in self.alignments:
            assert 0 <= start < end <= n and start >= prev_end
            prev_end = end

    @property
    def entity_ids(self) -> tuple[int, ...]:
        return tuple(sorted({e for _, _, e in self.alignments}))


def build_lexicon(g: KnowledgeGraph, extra_path: str | None = None,
                  strict: bool = False) -> EntityLexicon:
    """Every entity label is a surface form; an alias TSV adds more.

    Alias rows: ``entity_id<TAB>surface form``. Unknown entity ids raise in
    strict mode and are skipped otherwise.
    """
    forms: dict[tuple[str, ...], set[int]] = {}

    def register(surface: str, e: int) -> None:
        toks = tuple(normalize(surface).split())
        if toks:
            forms.setdefault(toks, set()).add(e)

    for e in range(g.n_entities):
        register(g.entity_label(e), e)
    if extra_path:
        with open(extra_path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 2 or not fields[0].strip() or not fields[1].strip():
                    if strict:
                        raise IngestError(f"{extra_path}:{lineno}: malformed alias")
                    continue
                canonical = fields[0].strip()
                if canonical not in g.entities:
                    if strict:
                        raise IngestError(
                            f"{extra_path}:{lineno}: unknown entity {canonical!r}")
                    continue
                register(fields[1], g.entity_id(canonical))
    return EntityLexicon(forms)


def link(seq: TokenizedSequence, lex: EntityLexicon) -> LinkedSequence:
    """Greedy longest-match scan; resumes after each match."""
    words = [seq.text[s:e] for s, e in seq.spans]
    alignments: list[tuple[int, int, int]] = []
    pos = 0
    n = len(words)
    while pos < n:
        matched = 0
        for length in range(min(lex.max_len, n - pos), 0, -1):
            ids = lex.lookup(tuple(words[pos:pos + length]))
            if ids:
                alignments.append((pos, pos + length, ids[0]))
                matched = length
                break
        pos += matched or 1
    return LinkedSequence(seq, alignments)

"""Knowledge graph of (subject, relation, object) triples with indexes.

Graphs are immutable once built. Entities and relations get dense 0-based
integer handles; each handle carries a canonical string identifier and a
human-readable label (defaulting to the identifier with underscores turned
into spaces). Iteration order is deterministic everywhere — triples sort as
plain int tuples.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import GraphError, IngestError, SaturatedGraphError

_CORRUPT_ATTEMPTS = 1000


class Triple(NamedTuple):
    subject: int
    relation: int
    object: int


def _default_label(canonical: str) -> str:
    return canonical.replace("_", " ")


class KnowledgeGraph:
    """Immutable triple set plus dictionaries and lookup indexes."""

    def __init__(self, entities: Sequence[str], relations: Sequence[str],
                 triples: Iterable[Triple],
                 entity_labels: Sequence[str] | None = None,
                 relation_labels: Sequence[str] | None = None,
                 skipped_lines: int = 0):
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        if len(set(self.entities)) != len(self.entities):
            raise GraphError("duplicate entity identifiers")
        if len(set(self.relations)) != len(self.relations):
            raise GraphError("duplicate relation identifiers")
        self.entity_labels = tuple(entity_labels) if entity_labels is not None \
            else tuple(_default_label(e) for e in self.entities)
        self.relation_labels = tuple(relation_labels) if relation_labels is not None \
            else tuple(_default_label(r) for r in self.relations)
        if any(not lab for lab in self.entity_labels + self.relation_labels):
            raise GraphError("empty label text")
        self._entity_index = {c: i for i, c in enumerate(self.entities)}
        self._relation_index = {c: i for i, c in enumerate(self.relations)}
        self.triples = frozenset(Triple(*t) for t in triples)
        for t in self.triples:
            if not (0 <= t.subject < len(self.entities)
                    and 0 <= t.object < len(self.entities)
                    and 0 <= t.relation < len(self.relations)):
                raise GraphError(f"triple {t} does not resolve")
        self.triple_list = tuple(sorted(self.triples))
        self.skipped_lines = skipped_lines

        by_subject: dict[int, list[Triple]] = {}
        by_subject_relation: dict[tuple[int, int], list[Triple]] = {}
        by_object: dict[int, list[Triple]] = {}
        for t in self.triple_list:
            by_subject.setdefault(t.subject, []).append(t)
            by_subject_relation.setdefault((t.subject, t.relation), []).append(t)
            by_object.setdefault(t.object, []).append(t)
        self.by_subject = {k: tuple(v) for k, v in by_subject.items()}
        self.by_subject_relation = {k: tuple(v) for k, v in by_subject_relation.items()}
        self.by_object = {k: tuple(v) for k, v in by_object.items()}

    # --- dictionary access -------------------------------------------------

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    def entity_id(self, canonical: str) -> int:
        try:
            return self._entity_index[canonical]
        except KeyError:
            raise GraphError(f"unknown entity {canonical!r}") from None

    def relation_id(self, canonical: str) -> int:
        try:
            return self._relation_index[canonical]
        except KeyError:
            raise GraphError(f"unknown relation {canonical!r}") from None

    def entity_label(self, e: int) -> str:
        return self.entity_labels[e]

    def relation_label(self, r: int) -> str:
        return self.relation_labels[r]

    def __contains__(self, t: Triple) -> bool:
        return t in self.triples

    def __eq__(self, other) -> bool:
        """Semantic equality: same labelled dictionaries and facts, ids aside."""
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (dict(zip(self.entities, self.entity_labels))
                == dict(zip(other.entities, other.entity_labels))
                and dict(zip(self.relations, self.relation_labels))
                == dict(zip(other.relations, other.relation_labels))
                and {(self.entities[t.subject], self.relations[t.relation],
                      self.entities[t.object]) for t in self.triples}
                == {(other.entities[t.subject], other.relations[t.relation],
                     other.entities[t.object]) for t in other.triples})

    def __hash__(self):
        raise TypeError("KnowledgeGraph is not hashable")

    # --- queries -----------------------------------------------------------

    def neighbors(self, e: int, radius: int) -> tuple[Triple, ...]:
        """Triples within ``radius`` hops of ``e``, sorted by ids.

        A triple is included when either endpoint lies within radius-1 hops
        of ``e`` (hops counted over undirected edges), i.e. the triple's far
        endpoint is reachable within ``radius`` hops.
        """
        if not 0 <= e < self.n_entities:
            raise GraphError(f"unknown entity id {e}")
        if radius < 1:
            raise GraphError(f"radius must be >= 1, got {radius}")
        frontier = {e}
        seen = {e}
        out: set[Triple] = set()
        for _ in range(radius):
            nxt: set[int] = set()
            for node in frontier:
                for t in self.by_subject.get(node, ()) + self.by_object.get(node, ()):
                    out.add(t)
                    for endpoint in (t.subject, t.object):
                        if endpoint not in seen:
                            seen.add(endpoint)
                            nxt.add(endpoint)
            frontier = nxt
        return tuple(sorted(out))

    def corrupt_triple(self, t: Triple, side: str, rng: np.random.Generator) -> Triple:
        """Replace one side of ``t`` uniformly such that the result is absent."""
        if t not in self.triples:
            raise GraphError(f"triple {t} not in graph")
        if self.n_entities < 2:
            raise GraphError("need >= 2 entities to corrupt")
        if side not in ("head", "tail"):
            raise GraphError(f"side must be head or tail, got {side!r}")
        if side == "tail":
            taken = {x.object for x in self.by_subject_relation.get((t.subject, t.relation), ())}
        else:
            taken = {x.subject for x in self.by_object.get(t.object, ())
                     if x.relation == t.relation}
        if len(taken) >= self.n_entities:
            raise SaturatedGraphError(
                f"every entity already completes {t} on the {side} side")
        for _ in range(_CORRUPT_ATTEMPTS):
            candidate = int(rng.integers(self.n_entities))
            if candidate in taken:
                continue
            return Triple(candidate, t.relation, t.object) if side == "head" \
                else Triple(t.subject, t.relation, candidate)
        raise SaturatedGraphError(
            f"no valid {side} corruption for {t} after {_CORRUPT_ATTEMPTS} attempts")

    # --- serialization -----------------------------------------------------

    def to_tsv(self) -> str:
        """Canonical text form; feeding it back through ingest_tsv is identity."""
        lines = []
        for t in sorted(self.triples, key=lambda t: (
                self.entities[t.subject], self.relations[t.relation], self.entities[t.object])):
            s, r, o = self.entities[t.subject], self.relations[t.relation], self.entities[t.object]
            overrides = [
                self.entity_labels[t.subject] if self.entity_labels[t.subject] != _default_label(s) else "",
                self.relation_labels[t.relation] if self.relation_labels[t.relation] != _default_label(r) else "",
                self.entity_labels[t.object] if self.entity_labels[t.object] != _default_label(o) else "",
            ]
            if any(overrides):
                lines.append(f"{s}\t{r}\t{o}\t{'|'.join(overrides)}")
            else:
                lines.append(f"{s}\t{r}\t{o}")
        return "\n".join(lines) + ("\n" if lines else "")


def ingest_tsv(path: str, strict: bool = False) -> KnowledgeGraph:
    """Parse a triple TSV into a graph.

    Lines: ``subject<TAB>relation<TAB>object[<TAB>label-override]`` where the
    override field holds pipe-separated subject|relation|object label texts
    (empty segments keep the default). ``#`` lines and blank lines are
    ignored. Malformed lines raise in strict mode (with the line number) and
    are skipped-and-counted otherwise.
    """
    entities: list[str] = []
    relations: list[str] = []
    entity_index: dict[str, int] = {}
    relation_index: dict[str, int] = {}
    entity_labels: list[str] = []
    relation_labels: list[str] = []
    triples: list[Triple] = []
    skipped = 0

    def intern_entity(canonical: str) -> int:
        if canonical not in entity_index:
            entity_index[canonical] = len(entities)
            entities.append(canonical)
            entity_labels.append(_default_label(canonical))
        return entity_index[canonical]

    def intern_relation(canonical: str) -> int:
        if canonical not in relation_index:
            relation_index[canonical] = len(relations)
            relations.append(canonical)
            relation_labels.append(_default_label(canonical))
        return relation_index[canonical]

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 4) or any(not f.strip() for f in fields[:3]):
                if strict:
                    raise IngestError(f"{path}:{lineno}: malformed line {line!r}")
                skipped += 1
                continue
            s = intern_entity(fields[0].strip())
            r = intern_relation(fields[1].strip())
            o = intern_entity(fields[2].strip())
            if len(fields) == 4:
                parts = fields[3].split("|")
                if len(parts) != 3:
                    if strict:
                        raise IngestError(
                            f"{path}:{lineno}: override needs 3 |-separated parts")
                    skipped += 1
                    continue
                for idx, labels, part in ((s, entity_labels, parts[0]),
                                          (r, relation_labels, parts[1]),
                                          (o, entity_labels, parts[2])):
                    if part:
                        labels[idx] = part
            triples.append(Triple(s, r, o))

    return KnowledgeGraph(entities, relations, triples,
                          entity_labels, relation_labels, skipped_lines=skipped)

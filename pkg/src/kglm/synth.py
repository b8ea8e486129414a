"""Synthetic KGs, training corpora, and QA sets.

Graphs are built with latent structure so triple plausibility is learnable
from labels alone: entities belong to implicit clusters (round-robin by
id), every relation draws its objects from one cluster, and functional
graphs give each (subject, relation) a unique object. A corruption then
usually lands outside the relation's object cluster or collides with the
functional constraint — which is what a label-based scorer can detect.

The holdout mechanism removes a fraction of triples from the rendered
corpus while keeping them in the KG: exactly the facts where fusion has
information the LM's pretraining text lacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GraphError
from .kg import KnowledgeGraph, Triple

_FALLBACK_ATTEMPTS = 200


@dataclass
class SynthSpec:
    n_entities: int = 50
    n_relations: int = 5
    triples_per_entity: int = 5
    functional: bool = True
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 2 or self.n_relations < 1:
            raise ConfigError("need >= 2 entities and >= 1 relation")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout fraction must be in [0,1), got {self.holdout_fraction}")
        if self.functional and self.triples_per_entity > self.n_relations:
            raise ConfigError(
                f"functional graph cannot host {self.triples_per_entity} "
                f"triples per entity over {self.n_relations} relations")


@dataclass
class QaExample:
    question: str
    answer: str
    triple: Triple


def _n_clusters(n_entities: int) -> int:
    return max(2, n_entities // 5)


def generate_kg(spec: SynthSpec) -> KnowledgeGraph:
    """Random clustered graph, a pure function of the spec."""
    rng = np.random.default_rng([spec.seed, 11])
    n, k = spec.n_entities, _n_clusters(spec.n_entities)
    width = len(str(n - 1))
    entities = [f"e{i:0{width}d}" for i in range(n)]
    relations = [f"r{j}" for j in range(spec.n_relations)]
    members = {c: [e for e in range(n) if e % k == c] for c in range(k)}

    def draw_object(subject: int, relation: int) -> int:
        pool = [e for e in members[relation % k] if e != subject]
        if not pool:  # degenerate cluster (tiny graphs): any other entity
            pool = [e for e in range(n) if e != subject]
        return int(pool[rng.integers(len(pool))])

    triples: set[Triple] = set()
    for s in range(n):
        if spec.functional:
            chosen = sorted(rng.permutation(spec.n_relations)[:spec.triples_per_entity])
            for r in chosen:
                triples.add(Triple(s, int(r), draw_object(s, int(r))))
        else:
            mine: set[Triple] = set()
            for _ in range(_FALLBACK_ATTEMPTS * spec.triples_per_entity):
                if len(mine) == spec.triples_per_entity:
                    break
                r = int(rng.integers(spec.n_relations))
                mine.add(Triple(s, r, draw_object(s, r)))
            else:
                raise GraphError(
                    f"could not place {spec.triples_per_entity} distinct "
                    f"triples for entity {s}")
            triples.update(mine)
    return KnowledgeGraph(entities, relations, triples)


# --- templates ---------------------------------------------------------------


def default_templates(g: KnowledgeGraph) -> dict[int, tuple[str, str]]:
    """Per relation: a statement template and a cloze question template."""
    out = {}
    for r in range(g.n_relations):
        label = g.relation_label(r)
        out[r] = (f"{{SUBJ}} {label} {{OBJ}}", f"{{SUBJ}} {label}")
    return out


def write_templates(path: str, g: KnowledgeGraph,
                    templates: dict[int, tuple[str, str]]) -> None:
    lines = [f"{g.relations[r]}\t{s}\t{q}" for r, (s, q) in sorted(templates.items())]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_templates(path: str, g: KnowledgeGraph) -> dict[int, tuple[str, str]]:
    out: dict[int, tuple[str, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            out[g.relation_id(fields[0])] = (fields[1], fields[2])
    return out


def _fill(template: str, subj: str, obj: str | None = None) -> str:
    text = template.replace("{SUBJ}", subj)
    return text if obj is None else text.replace("{OBJ}", obj)


# --- corpus and QA -----------------------------------------------------------


def render_corpus(g: KnowledgeGraph, templates: dict[int, tuple[str, str]],
                  holdout: set[Triple] = frozenset()) -> list[str]:
    """One sentence per non-holdout triple, in sorted triple order."""
    sentences = []
    for t in g.triple_list:
        if t in holdout:
            continue
        if t.relation not in templates:
            raise ConfigError(f"relation {g.relations[t.relation]!r} has no template")
        sentences.append(_fill(templates[t.relation][0],
                               g.entity_label(t.subject), g.entity_label(t.object)))
    return sentences


def make_qa(g: KnowledgeGraph, templates: dict[int, tuple[str, str]],
            targets: list[Triple]) -> list[QaExample]:
    """One cloze question per target triple; the object label is the gold."""
    out = []
    for t in targets:
        if t not in g.triples:
            raise GraphError(f"target {t} not in graph")
        if len({x.object for x in g.by_subject_relation[(t.subject, t.relation)]}) > 1:
            raise GraphError(
                f"relation {g.relations[t.relation]!r} is not functional at "
                f"subject {g.entities[t.subject]!r}; no unique answer")
        if t.relation not in templates:
            raise ConfigError(f"relation {g.relations[t.relation]!r} has no template")
        out.append(QaExample(_fill(templates[t.relation][1], g.entity_label(t.subject)),
                             g.entity_label(t.object), t))
    return out


def holdout_split(g: KnowledgeGraph, fraction: float, seed: int,
                  ) -> tuple[list[Triple], list[Triple]]:
    """Deterministic (kept, holdout) partition of the triple list."""
    rng = np.random.default_rng([seed, 13])
    order = rng.permutation(g.n_triples)
    n_hold = int(round(fraction * g.n_triples))
    held = {g.triple_list[i] for i in order[:n_hold]}
    return ([t for t in g.triple_list if t not in held],
            [t for t in g.triple_list if t in held])


def write_qa(path: str, g: KnowledgeGraph, examples: list[QaExample]) -> None:
    lines = []
    for ex in examples:
        t = ex.triple
        ref = "|".join((g.entities[t.subject], g.relations[t.relation],
                        g.entities[t.object]))
        lines.append(f"{ex.question}\t{ex.answer}\t{ref}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_qa(path: str, g: KnowledgeGraph) -> list[QaExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            s, r, o = fields[2].split("|")
            out.append(QaExample(fields[0], fields[1],
                                 Triple(g.entity_id(s), g.relation_id(r),
                                        g.entity_id(o))))
    return out

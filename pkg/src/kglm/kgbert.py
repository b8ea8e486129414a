"""Triple plausibility scoring with a bidirectional encoder.

A triple is rendered as text — ``[CLS] subject [SEP] relation [SEP] object
[SEP]`` — and scored by a sigmoid over a linear read-out of the [CLS]
hidden state. Training is binary cross-entropy on graph triples vs. 1:1
corruption negatives. The trained encoder also exports per-entity and
per-relation vectors (the [CLS] encoding of each label alone, or averaged
over the triples an id appears in).

``train_translational_table`` is the odd one out: a distance-based table
fit directly on the graph, no encoder involved. It exists because the
[CLS] exports score triples fine but do not make an entity's outgoing
edges recoverable from its vector, and the injection-style fusion modes
have no other channel to the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, GraphError
from .kg import KnowledgeGraph, Triple
from .text import CLS, PAD, SEP, Vocab
from .transformer import ModelConfig, TransformerModel


@dataclass
class SerializedTriple:
    ids: list[int]
    segments: list[int]  # 0 subject span, 1 relation, 2 object; [SEP]s carry
                         # the span they close, [CLS] belongs to the subject

    def __post_init__(self):
        assert self.ids[0] == CLS and self.ids.count(CLS) == 1
        assert self.ids.count(SEP) == 3
        assert all(a <= b for a, b in zip(self.segments, self.segments[1:]))


def serialize_triple(g: KnowledgeGraph, t: Triple, vocab: Vocab) -> SerializedTriple:
    ids = [CLS]
    segments = [0]
    labels = (g.entity_label(t.subject), g.relation_label(t.relation),
              g.entity_label(t.object))
    for marker, label in enumerate(labels):
        toks = vocab.encode(label).ids
        ids.extend(toks + [SEP])
        segments.extend([marker] * (len(toks) + 1))
    return SerializedTriple(ids, segments)


class KgBertScorer:
    """Bidirectional encoder plus a scalar scoring head on [CLS]."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.mode != "bidirectional":
            raise ConfigError("scorer requires a bidirectional encoder")
        self.config = config
        self.model = TransformerModel(config, seed=seed)
        head_rng = np.random.default_rng([seed, 1])
        # one shared dict: the head rides along in the encoder's registry
        self.params = self.model.params
        self.params["score.w"] = Tensor(head_rng.normal(0.0, 0.02, size=(config.d_model, 1)))
        self.params["score.b"] = Tensor(np.zeros(1))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def score_logits(self, ids: np.ndarray) -> Tensor:
        """Raw plausibility logits for a padded (batch, seq) id array."""
        _, h = self.model.forward(ids)
        return ad.reshape(h[:, 0, :] @ self.params["score.w"] + self.params["score.b"],
                          (ids.shape[0],))

    def score(self, ids: np.ndarray) -> np.ndarray:
        return ad.sigmoid(self.score_logits(ids)).data

    def score_triple(self, g: KnowledgeGraph, t: Triple, vocab: Vocab) -> float:
        s = serialize_triple(g, t, vocab)
        return float(self.score(np.array([s.ids]))[0])


def pad_batch(id_lists: list[list[int]]) -> np.ndarray:
    width = max(len(ids) for ids in id_lists)
    out = np.full((len(id_lists), width), PAD, dtype=np.int64)
    for row, ids in enumerate(id_lists):
        out[row, :len(ids)] = ids
    return out


def make_training_set(g: KnowledgeGraph, vocab: Vocab, rng: np.random.Generator,
                      sides: tuple[str, ...] = ("head", "tail"),
                      ) -> list[tuple[list[int], float]]:
    """One positive per graph triple plus one corruption negative (1:1)."""
    examples: list[tuple[list[int], float]] = []
    for t in g.triple_list:
        side = sides[int(rng.integers(len(sides)))]
        neg = g.corrupt_triple(t, side, rng)
        examples.append((serialize_triple(g, t, vocab).ids, 1.0))
        examples.append((serialize_triple(g, neg, vocab).ids, 0.0))
    return examples


def scorer_loss(scorer: KgBertScorer, batch: list[tuple[list[int], float]]) -> Tensor:
    ids = pad_batch([ex[0] for ex in batch])
    labels = np.array([ex[1] for ex in batch])
    return ad.bce_with_logits(scorer.score_logits(ids), labels)


def train_scorer(g: KnowledgeGraph, scorer: KgBertScorer, vocab: Vocab,
                 epochs: int = 5, batch_size: int = 16, lr: float = 1e-3,
                 seed: int = 0, sides: tuple[str, ...] = ("head", "tail"),
                 ) -> list[float]:
    """BCE training on positives + 1:1 corruptions; returns per-step losses.

    Corruption negatives are redrawn every epoch (the usual KG-BERT move):
    with a fixed negative set this model just memorizes the 200-odd fake
    strings and held-out accuracy stays near chance.
    """
    from .trainer import run_training  # deferred: trainer composes this module

    if epochs == 0:
        return []
    rng = np.random.default_rng([seed, 2])
    first = make_training_set(g, vocab, rng, sides)
    return run_training(lambda batch: scorer_loss(scorer, batch),
                        [t for _, t in scorer.named_parameters()],
                        first, epochs, batch_size, lr, seed,
                        resample_fn=lambda _epoch, r: make_training_set(g, vocab, r, sides))


# --- embedding export -------------------------------------------------------


@dataclass
class KgEmbeddingTable:
    d_kg: int
    entity_vectors: np.ndarray  # (n_entities, d_kg)
    relation_vectors: np.ndarray  # (n_relations, d_kg)

    def __post_init__(self):
        assert self.entity_vectors.shape[1] == self.d_kg
        assert self.relation_vectors.shape[1] == self.d_kg
        assert np.isfinite(self.entity_vectors).all()
        assert np.isfinite(self.relation_vectors).all()

    def entity_vec(self, e: int) -> np.ndarray:
        if not 0 <= e < len(self.entity_vectors):
            raise GraphError(f"entity id {e} not covered by embedding table")
        return self.entity_vectors[e]

    def relation_vec(self, r: int) -> np.ndarray:
        if not 0 <= r < len(self.relation_vectors):
            raise GraphError(f"relation id {r} not covered by embedding table")
        return self.relation_vectors[r]

    def save(self, path: str, g: KnowledgeGraph) -> None:
        lines = [f"d_kg={self.d_kg}"]
        for kind, names, vecs in (("E", g.entities, self.entity_vectors),
                                  ("R", g.relations, self.relation_vectors)):
            for name, vec in zip(names, vecs):
                lines.append(f"{kind}\t{name}\t" + ",".join(f"{x:.9g}" for x in vec))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str, g: KnowledgeGraph) -> "KgEmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header.startswith("d_kg="):
                raise CheckpointError(f"{path}: missing d_kg header")
            d_kg = int(header.split("=", 1)[1])
            ent = np.zeros((g.n_entities, d_kg))
            rel = np.zeros((g.n_relations, d_kg))
            seen_e, seen_r = set(), set()
            for lineno, raw in enumerate(fh, start=2):
                if not raw.strip():
                    continue
                kind, name, csv = raw.rstrip("\n").split("\t")
                vec = np.array([float(x) for x in csv.split(",")])
                if len(vec) != d_kg:
                    raise CheckpointError(f"{path}:{lineno}: expected {d_kg} floats")
                if kind == "E":
                    ent[g.entity_id(name)] = vec
                    seen_e.add(name)
                elif kind == "R":
                    rel[g.relation_id(name)] = vec
                    seen_r.add(name)
                else:
                    raise CheckpointError(f"{path}:{lineno}: unknown row kind {kind!r}")
        if len(seen_e) != g.n_entities or len(seen_r) != g.n_relations:
            raise CheckpointError(f"{path}: table does not cover the graph")
        return cls(d_kg, ent, rel)


def train_translational_table(g: KnowledgeGraph, d_kg: int = 64,
                              epochs: int = 500, lr: float = 1.0,
                              seed: int = 0) -> KgEmbeddingTable:
    """Structure-trained vectors: subject + relation lands near the object.

    Full-batch gradient descent on a softmax over squared distances to every
    entity (the margin-SGD variant collapses on clustered functional graphs,
    where many subjects share each object). Deterministic given the seed —
    the only randomness is the init. This is the table the fusion layer
    wants: which object a (subject, relation) pair points at is linearly
    present in the subject's vector, unlike the [CLS] exports, where probing
    for the object of a held-out edge stays at chance.
    """
    if g.n_triples == 0:
        raise GraphError("cannot fit translational vectors on an empty graph")
    rng = np.random.default_rng([seed, 11])
    ent = rng.normal(0.0, 0.5, (g.n_entities, d_kg))
    rel = rng.normal(0.0, 0.5, (g.n_relations, d_kg))
    subs = np.array([t.subject for t in g.triple_list])
    rels = np.array([t.relation for t in g.triple_list])
    objs = np.array([t.object for t in g.triple_list])
    n = len(subs)
    for _ in range(epochs):
        q = ent[subs] + rel[rels]                      # (n, d)
        diff = q[:, None, :] - ent[None, :, :]         # (n, E, d)
        logits = -(diff ** 2).sum(-1)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), objs] -= 1.0
        p /= n
        gq = (p[:, :, None] * (-2.0 * diff)).sum(axis=1)
        g_ent = (p[:, :, None] * (2.0 * diff)).sum(axis=0)
        np.add.at(g_ent, subs, gq)
        g_rel = np.zeros_like(rel)
        np.add.at(g_rel, rels, gq)
        ent -= lr * g_ent
        rel -= lr * g_rel
    return KgEmbeddingTable(d_kg, ent, rel)


def encode_labels_cls(scorer: KgBertScorer, labels: list[str], vocab: Vocab) -> np.ndarray:
    """[CLS] hidden state of each ``[CLS] label [SEP]`` sequence."""
    ids = pad_batch([[CLS] + vocab.encode(lab).ids + [SEP] for lab in labels])
    _, h = scorer.model.forward(ids)
    return h.data[:, 0, :]


def export_embeddings(g: KnowledgeGraph, scorer: KgBertScorer, vocab: Vocab,
                      mode: str = "cls-label") -> KgEmbeddingTable:
    """Entity/relation vectors from the trained encoder.

    ``cls-label``: [CLS] state of each label encoded alone — cheap,
    label-identical entities share a vector. ``cls-context``: mean [CLS]
    state over the serializations of every graph triple the entity (or
    relation) appears in, falling back to the label encoding for ids with
    no triples. Context vectors carry an entity's neighborhood — the only
    channel through which a memory-free fusion mode can see facts whose
    sentences were held out of the LM corpus.
    """
    if mode not in ("cls-label", "cls-context"):
        raise ConfigError(f"unknown embedding export mode {mode!r}")
    d = scorer.config.d_model
    ent = encode_labels_cls(scorer, list(g.entity_labels), vocab) \
        if g.n_entities else np.zeros((0, d))
    rel = encode_labels_cls(scorer, list(g.relation_labels), vocab) \
        if g.n_relations else np.zeros((0, d))
    if mode == "cls-context" and g.n_triples:
        ids = pad_batch([serialize_triple(g, t, vocab).ids for t in g.triple_list])
        _, h = scorer.model.forward(ids)
        cls = h.data[:, 0, :]
        ent_rows: dict[int, list[int]] = {}
        rel_rows: dict[int, list[int]] = {}
        for i, t in enumerate(g.triple_list):
            ent_rows.setdefault(t.subject, []).append(i)
            if t.object != t.subject:
                ent_rows.setdefault(t.object, []).append(i)
            rel_rows.setdefault(t.relation, []).append(i)
        ent = ent.copy()
        rel = rel.copy()
        for e, rows in ent_rows.items():
            ent[e] = cls[rows].mean(axis=0)
        for r, rows in rel_rows.items():
            rel[r] = cls[rows].mean(axis=0)
    return KgEmbeddingTable(d, ent, rel)

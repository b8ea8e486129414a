"""Inject KG knowledge into the causal LM's hidden states.

Four mechanisms, all gated behind a learned scalar alpha initialized to 0,
so every fused model starts out functionally identical to its base LM:

- gated-injection: per aligned token, a sigmoid gate blends the projected
  entity vector into the hidden state (no memory matrix involved).
- kg-attention-layer: a multi-head cross-attention + feed-forward block
  over the KG memory, residual-added after the site layer.
- cross-layer-adapter: single-head cross-attention over memory, mean-pooled
  to one context vector per sequence, broadcast back through a tanh
  bottleneck. The pool spans all positions, so this mode is the one
  deliberately non-causal mechanism (see module tests).
- dedicated-head: the final attention block gains one extra head whose
  keys/values are the memory rows; its output projection is added to the
  standard heads' (algebraically the concat-then-project layout, computed
  as a sum so the alpha=0 path stays bit-identical).

Memory rows are the distinct linked entities' vectors plus their neighbor
triples' vectors (mean of subject/relation/object), all projected by W_k.
Empty memory makes every mechanism an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, GraphError
from .kg import KnowledgeGraph, Triple
from .kgbert import KgEmbeddingTable
from .linker import LinkedSequence
from .transformer import NEG_MASK, TransformerModel

MODES = ("gated-injection", "kg-attention-layer", "cross-layer-adapter",
         "dedicated-head")


@dataclass
class FusionConfig:
    mode: str
    layer: int
    radius: int = 1
    d_kg: int = 32
    cotrain_kg: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")


@dataclass
class KgMemory:
    rows: Tensor | None  # (n_rows, d_model), already W_k-projected
    provenance: list[tuple[str, object]]  # ("entity", id) / ("triple", Triple)

    @property
    def n_rows(self) -> int:
        return 0 if self.rows is None else self.rows.shape[0]


def memory_items(ls_alignments: list[tuple[int, int, int]], g: KnowledgeGraph,
                 radius: int) -> tuple[list[int], list[Triple]]:
    """Distinct linked entities (sorted) and their neighbor triples (sorted)."""
    entities = sorted({e for _, _, e in ls_alignments})
    triples: set[Triple] = set()
    for e in entities:
        triples.update(g.neighbors(e, radius))
    return entities, sorted(triples)


class FusedModel:
    """A causal LM plus fusion parameters and the KG embedding tables."""

    def __init__(self, base: TransformerModel, cfg: FusionConfig,
                 table: KgEmbeddingTable, g: KnowledgeGraph, seed: int = 0):
        if base.config.mode != "causal":
            raise ConfigError("fusion wraps a causal LM")
        if not 0 <= cfg.layer < base.config.n_layers:
            raise ConfigError(
                f"site layer {cfg.layer} outside 0..{base.config.n_layers - 1}")
        if cfg.mode == "dedicated-head" and cfg.layer != base.config.n_layers - 1:
            raise ConfigError("dedicated-head fuses in the final attention block")
        if cfg.d_kg != table.d_kg:
            raise ConfigError(f"config d_kg {cfg.d_kg} != table d_kg {table.d_kg}")
        self.base = base
        self.cfg = cfg
        self.graph = g
        d, dk, dh = base.config.d_model, table.d_kg, base.config.d_head
        rng = np.random.default_rng([seed, 3])
        f: dict[str, Tensor] = {"fuse.alpha": Tensor(np.zeros(()))}

        def normal(name: str, *shape: int) -> None:
            f[name] = Tensor(rng.normal(0.0, 0.02, size=shape))

        def ortho(name: str, rows: int, cols: int) -> None:
            # semi-orthogonal: the key/value path starts as a rotation, so
            # whatever structure the KG table has survives into the memory
            # rows instead of being scrambled by a small random matrix
            q, _ = np.linalg.qr(rng.normal(size=(max(rows, cols), min(rows, cols))))
            f[name] = Tensor(np.ascontiguousarray(q if rows >= cols else q.T))

        ortho("fuse.w_k", dk, d)
        if cfg.mode == "gated-injection":
            f["fuse.b_k"] = Tensor(np.zeros(d))
            normal("fuse.w_g", 2 * d, 1)
            f["fuse.b_g"] = Tensor(np.zeros(1))
        elif cfg.mode == "kg-attention-layer":
            normal("fuse.attn.wo", d, d)
            for w in ("wq", "wk", "wv"):
                ortho("fuse.attn." + w, d, d)
            normal("fuse.ffn.w1", d, base.config.d_ff)
            f["fuse.ffn.b1"] = Tensor(np.zeros(base.config.d_ff))
            normal("fuse.ffn.w2", base.config.d_ff, d)
            f["fuse.ffn.b2"] = Tensor(np.zeros(d))
        elif cfg.mode == "cross-layer-adapter":
            for w in ("wq", "wa"):
                normal("fuse.ad." + w, d, d)
            for w in ("wk", "wv"):
                ortho("fuse.ad." + w, d, d)
        else:  # dedicated-head
            normal("fuse.head.wq", d, dh)
            for w in ("wk", "wv"):
                ortho("fuse.head." + w, d, dh)
            normal("fuse.head.wo", dh, d)
        self.fusion_params = f
        self.kg_params = {"kg.ent_emb": Tensor(table.entity_vectors.copy()),
                          "kg.rel_emb": Tensor(table.relation_vectors.copy())}
        self.last_gates: np.ndarray | None = None
        self.last_attention: np.ndarray | None = None

    # --- parameter registry --------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        every = {**self.base.params, **self.fusion_params, **self.kg_params}
        return sorted(every.items())

    def trainable_parameters(self) -> list[Tensor]:
        trained: dict[str, Tensor] = {**self.base.params, **self.fusion_params}
        if self.cfg.cotrain_kg:
            trained.update(self.kg_params)
        return [t for _, t in sorted(trained.items())]

    # --- memory construction --------------------------------------------

    def build_memory(self, alignments: list[tuple[int, int, int]]) -> KgMemory:
        entities, triples = memory_items(alignments, self.graph, self.cfg.radius)
        if not entities:
            return KgMemory(None, [])
        ent_emb, rel_emb = self.kg_params["kg.ent_emb"], self.kg_params["kg.rel_emb"]
        for e in entities:
            if e >= ent_emb.shape[0]:
                raise GraphError(f"entity {e} missing from embedding table")
        parts = [ad.embedding_lookup(ent_emb, np.array(entities))]
        if triples:
            subs = np.array([t.subject for t in triples])
            rels = np.array([t.relation for t in triples])
            objs = np.array([t.object for t in triples])
            summed = ad.embedding_lookup(ent_emb, subs) \
                + ad.embedding_lookup(rel_emb, rels) \
                + ad.embedding_lookup(ent_emb, objs)
            parts.append(summed / Tensor(3.0))
        raw = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        provenance = [("entity", e) for e in entities] \
            + [("triple", t) for t in triples]
        return KgMemory(raw @ self.fusion_params["fuse.w_k"], provenance)

    def _batched_memory(self, memories: list[KgMemory],
                        ) -> tuple[Tensor, np.ndarray, np.ndarray] | None:
        """Stack per-sequence memories: (B,R,d) rows, key mask, row indicator."""
        r_max = max(m.n_rows for m in memories)
        if r_max == 0:
            return None
        d = self.base.config.d_model
        stacked = []
        for m in memories:
            rows = m.rows if m.rows is not None else Tensor(np.zeros((0, d)))
            if m.n_rows < r_max:
                rows = ad.concat([rows, Tensor(np.zeros((r_max - m.n_rows, d)))], axis=0) \
                    if m.n_rows else Tensor(np.zeros((r_max, d)))
            stacked.append(ad.reshape(rows, (1, r_max, d)))
        mem = stacked[0] if len(stacked) == 1 else ad.concat(stacked, axis=0)
        counts = np.array([m.n_rows for m in memories])
        key_mask = np.where(np.arange(r_max)[None, :] < counts[:, None], 0.0, NEG_MASK)
        indicator = (counts > 0).astype(float)[:, None, None]
        return mem, key_mask, indicator

    # --- the four mechanisms ----------------------------------------------

    def _gated_hook(self, alignments: list[list[tuple[int, int, int]]]):
        f = self.fusion_params
        ent_emb = self.kg_params["kg.ent_emb"]
        per_seq: list[dict[int, int]] = []  # position -> entity id
        for al in alignments:
            pos_map = {}
            for start, end, e in al:
                for pos in range(start, end):
                    pos_map[pos] = e
            per_seq.append(pos_map)

        def hook(h: Tensor) -> Tensor:
            b, t, d = h.shape
            # gather distinct (entity) projections once, then index per position
            used = sorted({e for pm in per_seq for e in pm.values()})
            if not used:
                return h
            row_of = {e: i + 1 for i, e in enumerate(used)}
            proj = ad.embedding_lookup(ent_emb, np.array(used)) @ f["fuse.w_k"] \
                + f["fuse.b_k"]
            padded = ad.concat([Tensor(np.zeros((1, d))), proj], axis=0)
            index = np.zeros((b, t), dtype=np.int64)
            aligned = np.zeros((b, t, 1))
            for row, pm in enumerate(per_seq):
                for pos, e in pm.items():
                    if pos < t:
                        index[row, pos] = row_of[e]
                        aligned[row, pos, 0] = 1.0
            p = ad.embedding_lookup(padded, index)
            gate = ad.sigmoid(ad.concat([h, p], axis=-1) @ f["fuse.w_g"] + f["fuse.b_g"])
            self.last_gates = gate.data
            blend = f["fuse.alpha"] * (Tensor(1.0) - gate) * (p - h)
            return h + Tensor(aligned) * blend

        return hook

    def _cross_attention(self, h: Tensor, mem: Tensor, key_mask: np.ndarray,
                         n_heads: int, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
        b, t, d = h.shape
        r = mem.shape[1]
        dh = d // n_heads

        def heads(m: Tensor, length: int) -> Tensor:
            return ad.transpose(ad.reshape(m, (b, length, n_heads, dh)), (0, 2, 1, 3))

        q = heads(h @ wq, t)
        k = heads(mem @ wk, r)
        v = heads(mem @ wv, r)
        scores = (q @ ad.transpose(k)) * Tensor(1.0 / np.sqrt(dh)) \
            + Tensor(key_mask[:, None, None, :])
        weights = ad.softmax(scores)
        self.last_attention = weights.data
        return ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, t, d))

    def _attention_layer_hook(self, batched):
        f = self.fusion_params
        mem, key_mask, indicator = batched

        def hook(h: Tensor) -> Tensor:
            ctx = self._cross_attention(h, mem, key_mask, self.base.config.n_heads,
                                        f["fuse.attn.wq"], f["fuse.attn.wk"],
                                        f["fuse.attn.wv"])
            ctx = ctx @ f["fuse.attn.wo"]
            out = ad.gelu(ctx @ f["fuse.ffn.w1"] + f["fuse.ffn.b1"]) \
                @ f["fuse.ffn.w2"] + f["fuse.ffn.b2"]
            return h + f["fuse.alpha"] * (Tensor(indicator) * out)

        return hook

    def _adapter_hook(self, batched):
        f = self.fusion_params
        mem, key_mask, indicator = batched

        def hook(h: Tensor) -> Tensor:
            ctx = self._cross_attention(h, mem, key_mask, 1, f["fuse.ad.wq"],
                                        f["fuse.ad.wk"], f["fuse.ad.wv"])
            pooled = ad.tmean(ctx, axis=1, keepdims=True)  # (B,1,d)
            out = ad.tanh(pooled @ f["fuse.ad.wa"])
            return h + f["fuse.alpha"] * (Tensor(indicator) * out)

        return hook

    def _dedicated_head_extra(self, batched):
        f = self.fusion_params
        mem, key_mask, indicator = batched
        dh = self.base.config.d_head

        def extra(x: Tensor) -> Tensor:
            b, t, _ = x.shape
            r = mem.shape[1]
            q = x @ f["fuse.head.wq"]  # (B,T,dh), a single head
            k = mem @ f["fuse.head.wk"]
            v = mem @ f["fuse.head.wv"]
            scores = (q @ ad.transpose(k)) * Tensor(1.0 / np.sqrt(dh)) \
                + Tensor(key_mask[:, None, :])
            weights = ad.softmax(scores)
            self.last_attention = weights.data
            head_out = (weights @ v) @ f["fuse.head.wo"]
            return f["fuse.alpha"] * (Tensor(indicator) * head_out)

        return extra

    # --- forward / generate -----------------------------------------------

    def _hooks_for(self, alignments: list[list[tuple[int, int, int]]]):
        """Returns (hooks dict, attn_extra) for a batch of alignments."""
        if self.cfg.mode == "gated-injection":
            return {self.cfg.layer: self._gated_hook(alignments)}, None
        memories = [self.build_memory(al) for al in alignments]
        self.last_memories = memories
        batched = self._batched_memory(memories)
        if batched is None:
            return {}, None
        if self.cfg.mode == "kg-attention-layer":
            return {self.cfg.layer: self._attention_layer_hook(batched)}, None
        if self.cfg.mode == "cross-layer-adapter":
            return {self.cfg.layer: self._adapter_hook(batched)}, None
        return {}, (self.cfg.layer, self._dedicated_head_extra(batched))

    def forward(self, ids: np.ndarray,
                alignments: list[list[tuple[int, int, int]]],
                dropout_rng: np.random.Generator | None = None,
                ) -> tuple[Tensor, Tensor]:
        if len(alignments) != ids.shape[0]:
            raise ConfigError("one alignment list per batch row required")
        hooks, attn_extra = self._hooks_for(alignments)
        return self.base.forward(ids, hooks=hooks, attn_extra=attn_extra,
                                 dropout_rng=dropout_rng)

    def generate(self, prompt: list[int], alignments: list[tuple[int, int, int]],
                 max_new: int) -> list[int]:
        """Greedy decoding with memory fixed from the prompt's alignments."""
        hooks, attn_extra = self._hooks_for([alignments])
        return self.base.generate(prompt, max_new, hooks=hooks, attn_extra=attn_extra)


def fused_forward(fm: FusedModel, linked: list[LinkedSequence]) -> Tensor:
    """Convenience wrapper: pad linked sequences and run the fused stack."""
    from .kgbert import pad_batch

    ids = pad_batch([ls.seq.ids for ls in linked])
    logits, _ = fm.forward(ids, [ls.alignments for ls in linked])
    return logits

"""Small pre-LN transformer usable as a bidirectional encoder or causal LM.

One weight set serves both the triple scorer (bidirectional) and the toy
causal LM that stands in for a hosted model. Hidden states between layers
are exposed to hooks so knowledge fusion can rewrite them, and the last
layer's attention supports an extra additive head for the head-merge mode.

Masking is additive with a large negative constant (never -inf, so a fully
masked row degrades to a uniform distribution instead of NaN). [PAD] keys
are always masked; causal mode adds the upper-triangular mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .text import EOS, PAD

NEG_MASK = -1e30


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64
    mode: str = "causal"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class TransformerModel:
    """Token + learned positional embeddings, pre-LN blocks, tied LM head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.d_ff
        p: dict[str, Tensor] = {}

        def normal(name: str, *shape: int) -> None:
            p[name] = Tensor(rng.normal(0.0, 0.02, size=shape))

        normal("tok_emb", config.vocab_size, d)
        normal("pos_emb", config.max_seq_len, d)
        for i in range(config.n_layers):
            pre = f"layer{i:02d}."
            for w in ("wq", "wk", "wv", "wo"):
                normal(pre + "attn." + w, d, d)
            normal(pre + "ffn.w1", d, ff)
            p[pre + "ffn.b1"] = Tensor(np.zeros(ff))
            normal(pre + "ffn.w2", ff, d)
            p[pre + "ffn.b2"] = Tensor(np.zeros(d))
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = Tensor(np.ones(d))
                p[pre + ln + ".b"] = Tensor(np.zeros(d))
        p["ln_f.g"] = Tensor(np.ones(d))
        p["ln_f.b"] = Tensor(np.zeros(d))
        self.params = p

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def _attend(self, x: Tensor, mask: np.ndarray, layer: int,
                extra: Callable[[Tensor], Tensor] | None) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        h, dh = cfg.n_heads, cfg.d_head
        pre = f"layer{layer:02d}.attn."

        def split_heads(m: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(m, (b, t, h, dh)), (0, 2, 1, 3))

        q = split_heads(x @ self.params[pre + "wq"])
        k = split_heads(x @ self.params[pre + "wk"])
        v = split_heads(x @ self.params[pre + "wv"])
        scores = (q @ ad.transpose(k)) * Tensor(1.0 / np.sqrt(dh))
        weights = ad.softmax(scores + Tensor(mask))
        ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, t, d))
        out = ctx @ self.params[pre + "wo"]
        if extra is not None:
            # additive extra-head output, already scaled by its own alpha;
            # exact zero contribution keeps the base path bit-identical
            out = out + extra(x)
        return out

    def forward(self, ids: np.ndarray,
                hooks: dict[int, Callable[[Tensor], Tensor]] | None = None,
                attn_extra: tuple[int, Callable[[Tensor], Tensor]] | None = None,
                dropout_rng: np.random.Generator | None = None,
                ) -> tuple[Tensor, Tensor]:
        """Run the stack; returns (logits, final hidden states).

        ``hooks[i]`` rewrites the hidden state after block ``i``;
        ``attn_extra = (layer, fn)`` adds ``fn(x)`` to that layer's
        attention output before the residual.
        """
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError("forward", ids.shape)
        b, t = ids.shape
        if t > cfg.max_seq_len or t == 0:
            raise ShapeError("forward", ids.shape, (b, cfg.max_seq_len))
        hooks = hooks or {}
        for site in hooks:
            if not 0 <= site < cfg.n_layers:
                raise ConfigError(f"hook site {site} outside 0..{cfg.n_layers - 1}")

        mask = np.where((ids == PAD)[:, None, None, :], NEG_MASK, 0.0)
        if cfg.mode == "causal":
            mask = mask + np.where(np.triu(np.ones((t, t)), k=1)[None, None], NEG_MASK, 0.0)

        h = ad.embedding_lookup(self.params["tok_emb"], ids) \
            + ad.embedding_lookup(self.params["pos_emb"], np.arange(t))
        for i in range(cfg.n_layers):
            pre = f"layer{i:02d}."
            extra = attn_extra[1] if attn_extra is not None and attn_extra[0] == i else None
            x1 = ad.layer_norm(h, self.params[pre + "ln1.g"], self.params[pre + "ln1.b"])
            h = h + self._dropout(self._attend(x1, mask, i, extra), dropout_rng)
            x2 = ad.layer_norm(h, self.params[pre + "ln2.g"], self.params[pre + "ln2.b"])
            ff = ad.gelu(x2 @ self.params[pre + "ffn.w1"] + self.params[pre + "ffn.b1"]) \
                @ self.params[pre + "ffn.w2"] + self.params[pre + "ffn.b2"]
            h = h + self._dropout(ff, dropout_rng)
            if i in hooks:
                replaced = hooks[i](h)
                if not isinstance(replaced, Tensor) or replaced.shape != h.shape:
                    raise ShapeError("hook", h.shape,
                                     getattr(replaced, "shape", type(replaced)))
                h = replaced
        h_final = ad.layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])
        logits = h_final @ ad.transpose(self.params["tok_emb"])
        return logits, h_final

    def _dropout(self, t: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return t
        keep = rng.random(t.shape) >= rate
        return t * Tensor(keep / (1.0 - rate))

    def generate(self, prompt: list[int], max_new: int,
                 hooks=None, attn_extra=None) -> list[int]:
        """Greedy decoding; ties break toward the lowest token id."""
        if self.config.mode != "causal":
            raise ConfigError("generate requires a causal model")
        if not prompt:
            raise ShapeError("generate", (0,))
        if len(prompt) > self.config.max_seq_len:
            raise ShapeError("generate", (len(prompt),), (self.config.max_seq_len,))
        ids = list(prompt)
        for _ in range(max_new):
            if len(ids) >= self.config.max_seq_len:
                break
            logits, _ = self.forward(np.array([ids]), hooks=hooks, attn_extra=attn_extra)
            nxt = int(np.argmax(logits.data[0, -1]))
            ids.append(nxt)
            if nxt == EOS:
                break
        return ids

"""Evaluation metrics and the baseline-vs-fused comparison harness.

All metrics are pure functions of text or token ids. Comparison runs both
models over one shared task set and attaches a seeded paired-bootstrap
p-value to the factual-accuracy difference, so "fused beats baseline" is
a statistical claim, not a point estimate.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EvalError
from .kg import KnowledgeGraph
from .linker import EntityLexicon, build_lexicon, link
from .synth import QaExample
from .text import CLS, EOS, PAD, Vocab, normalize


def _tokens(text: str) -> list[str]:
    return normalize(text).split()


# --- token overlap ------------------------------------------------------------


def token_prf(prediction: str, gold: str) -> tuple[float, float, float]:
    """Multiset token precision/recall/F1; both empty scores (1, 1, 1)."""
    pred, ref = _tokens(prediction), _tokens(gold)
    if not pred and not ref:
        return (1.0, 1.0, 1.0)
    if not pred or not ref:
        return (0.0, 0.0, 0.0)
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return (0.0, 0.0, 0.0)
    p = overlap / len(pred)
    r = overlap / len(ref)
    return (p, r, 2 * p * r / (p + r))


def exact_match(prediction: str, gold: str) -> bool:
    return normalize(prediction) == normalize(gold)


# --- BLEU ---------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, ref_lens: list[int]) -> int:
    # ties break toward the shorter reference
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _bleu_counts(cand: list[str], refs: list[list[str]], max_n: int,
                 ) -> tuple[list[int], list[int]]:
    clipped, totals = [], []
    for n in range(1, max_n + 1):
        got = _ngrams(cand, n)
        best = Counter()
        for ref in refs:
            for gram, k in _ngrams(ref, n).items():
                best[gram] = max(best[gram], k)
        clipped.append(sum(min(k, best[gram]) for gram, k in got.items()))
        totals.append(max(0, len(cand) - n + 1))
    return clipped, totals


def _bleu_from_counts(clipped: list[int], totals: list[int],
                      r: int, c: int) -> float:
    used = [(k, t) for k, t in zip(clipped, totals) if t > 0]
    if not used or any(k == 0 for k, _ in used):
        return 0.0  # no smoothing: a zero precision zeroes the score
    log_mean = sum(math.log(k / t) for k, t in used) / len(used)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_mean)


def bleu(candidate: str, references: list[str], max_n: int = 4) -> float:
    """Unsmoothed BLEU; n runs 1..min(max_n, candidate length)."""
    if not references:
        raise EvalError("bleu needs at least one reference")
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    refs = [_tokens(r) for r in references]
    n_max = min(max_n, len(cand))
    clipped, totals = _bleu_counts(cand, refs, n_max)
    r = _closest_ref_len(len(cand), [len(x) for x in refs])
    return _bleu_from_counts(clipped, totals, r, len(cand))


def corpus_bleu(candidates: list[str], references: list[list[str]],
                max_n: int = 4) -> float:
    """Aggregate clipped counts over the corpus, then one geometric mean.

    Count pooling (rather than averaging sentence scores) keeps short
    outputs from zeroing the corpus and is permutation-invariant.
    """
    if len(candidates) != len(references):
        raise EvalError("candidate/reference list length mismatch")
    if not candidates:
        raise EvalError("empty evaluation set")
    clipped = [0] * max_n
    totals = [0] * max_n
    r_sum = c_sum = 0
    for candidate, refs in zip(candidates, references):
        if not refs:
            raise EvalError("bleu needs at least one reference")
        cand = _tokens(candidate)
        if not cand:
            continue
        ref_tok = [_tokens(x) for x in refs]
        got_c, got_t = _bleu_counts(cand, ref_tok, max_n)
        for i in range(max_n):
            clipped[i] += got_c[i]
            totals[i] += got_t[i]
        r_sum += _closest_ref_len(len(cand), [len(x) for x in ref_tok])
        c_sum += len(cand)
    if c_sum == 0:
        return 0.0
    return _bleu_from_counts(clipped, totals, r_sum, c_sum)


# --- ROUGE-L ------------------------------------------------------------------


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1; both sides empty scores 1, one side empty scores 0."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def corpus_rouge_l(candidates: list[str], references: list[str]) -> float:
    if len(candidates) != len(references):
        raise EvalError("candidate/reference list length mismatch")
    if not candidates:
        raise EvalError("empty evaluation set")
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


# --- perplexity ---------------------------------------------------------------


def _model_logits(model, ids: np.ndarray, alignments=None) -> np.ndarray:
    if hasattr(model, "base"):  # fused stack
        return model.forward(ids, alignments)[0].data
    return model.forward(ids)[0].data


def _causal_config(model):
    return model.base.config if hasattr(model, "base") else model.config


def perplexity(model, sequences: list[list[int]],
               alignments: list[list[tuple[int, int, int]]] | None = None,
               batch_size: int = 16) -> float:
    """exp(mean NLL) over non-pad, non-first positions of every sequence."""
    if _causal_config(model).mode != "causal":
        raise EvalError("perplexity needs a causal model")
    if alignments is None:
        alignments = [[] for _ in sequences]
    if len(alignments) != len(sequences):
        raise EvalError("sequence/alignment list length mismatch")
    total = 0.0
    count = 0
    for at in range(0, len(sequences), batch_size):
        chunk = sequences[at:at + batch_size]
        width = max((len(s) for s in chunk), default=0)
        if width == 0:
            continue
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for i, s in enumerate(chunk):
            ids[i, :len(s)] = s
        logits = _model_logits(model, ids, alignments[at:at + batch_size])
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        for i, s in enumerate(chunk):
            for t in range(1, len(s)):
                if s[t] == PAD:
                    continue
                total += -log_probs[i, t - 1, s[t]]
                count += 1
    if count == 0:
        raise EvalError("no scorable positions (corpus empty after exclusions)")
    return float(math.exp(total / count))


# --- KG-verified generation -----------------------------------------------------


def qa_prompt(vocab: Vocab, question: str, lexicon: EntityLexicon,
              ) -> tuple[list[int], list[tuple[int, int, int]]]:
    """[CLS]-framed prompt ids plus entity alignments shifted past [CLS]."""
    seq = vocab.encode(question)
    ids = [CLS] + list(seq.ids)
    linked = link(seq, lexicon)
    return ids, [(s + 1, e + 1, ent) for s, e, ent in linked.alignments]


def generate_answer(model, question: str, vocab: Vocab,
                    lexicon: EntityLexicon, max_new: int = 8) -> str:
    """Greedy continuation of the question prompt, decoded up to [EOS]."""
    ids, alignments = qa_prompt(vocab, question, lexicon)
    if hasattr(model, "base"):
        out = model.generate(ids, alignments, max_new)
    else:
        out = model.generate(ids, max_new)
    answer = out[len(ids):]
    if EOS in answer:
        answer = answer[:answer.index(EOS)]
    return vocab.decode(answer)


def factual_accuracy(model, qa: list[QaExample], g: KnowledgeGraph,
                     vocab: Vocab, lexicon: EntityLexicon | None = None,
                     ) -> tuple[float, list[bool]]:
    """Share of answers that exactly match a surface form of the gold entity."""
    if not qa:
        raise EvalError("empty QA set")
    lexicon = lexicon or build_lexicon(g)
    flags = []
    for ex in qa:
        answer = generate_answer(model, ex.question, vocab, lexicon)
        flags.append(normalize(answer) in lexicon.surfaces(ex.triple.object))
    return float(np.mean(flags)), flags


# --- pairwise comparison --------------------------------------------------------


@dataclass
class ModelReport:
    name: str
    precision: float
    recall: float
    f1: float
    exact: float
    bleu: float
    rouge_l: float
    perplexity: float
    factual: float
    factual_flags: list[bool] = field(repr=False, default_factory=list)

    def __post_init__(self):
        rates = (self.precision, self.recall, self.f1, self.exact,
                 self.bleu, self.rouge_l, self.factual)
        assert all(0.0 <= x <= 1.0 for x in rates)
        assert self.perplexity >= 1.0


@dataclass
class EvalTasks:
    """One shared task set: QA pairs, completion prompts, PPL sequences."""
    qa: list[QaExample]
    gen: list[tuple[str, str]]          # (prompt text, reference text)
    ppl_sequences: list[list[int]]
    ppl_alignments: list[list[tuple[int, int, int]]] | None = None


def paired_bootstrap_p(baseline_flags: list[bool], fused_flags: list[bool],
                       n_resamples: int = 10_000, seed: int = 0) -> float:
    """One-sided p for 'fused is no better', by paired resampling."""
    if len(baseline_flags) != len(fused_flags) or not baseline_flags:
        raise EvalError("flag vectors must be non-empty and aligned")
    b = np.asarray(baseline_flags, dtype=np.float64)
    f = np.asarray(fused_flags, dtype=np.float64)
    rng = np.random.default_rng([seed, 29])
    idx = rng.integers(0, len(b), size=(n_resamples, len(b)))
    deltas = f[idx].mean(axis=1) - b[idx].mean(axis=1)
    return float(np.mean(deltas <= 0.0))


def evaluate_model(model, tasks: EvalTasks, g: KnowledgeGraph, vocab: Vocab,
                   name: str, lexicon: EntityLexicon | None = None) -> ModelReport:
    lexicon = lexicon or build_lexicon(g)
    if not tasks.qa:
        raise EvalError("empty QA set")
    ps, rs, f1s, ems, flags = [], [], [], [], []
    for ex in tasks.qa:
        answer = generate_answer(model, ex.question, vocab, lexicon)
        p, r, f1 = token_prf(answer, ex.answer)
        ps.append(p); rs.append(r); f1s.append(f1)
        ems.append(exact_match(answer, ex.answer))
        flags.append(normalize(answer) in lexicon.surfaces(ex.triple.object))

    candidates, references = [], []
    for prompt, reference in tasks.gen:
        completion = generate_answer(model, prompt, vocab, lexicon)
        candidates.append(normalize(prompt + " " + completion))
        references.append(reference)
    bleu_score = corpus_bleu(candidates, [[r] for r in references]) \
        if candidates else 0.0
    rouge_score = corpus_rouge_l(candidates, references) if candidates else 0.0

    ppl = perplexity(model, tasks.ppl_sequences, tasks.ppl_alignments)
    return ModelReport(name=name, precision=float(np.mean(ps)),
                       recall=float(np.mean(rs)), f1=float(np.mean(f1s)),
                       exact=float(np.mean(ems)), bleu=bleu_score,
                       rouge_l=rouge_score, perplexity=ppl,
                       factual=float(np.mean(flags)), factual_flags=flags)


RATE_METRICS = ("precision", "recall", "f1", "exact", "bleu", "rouge_l", "factual")


@dataclass
class PairReport:
    baseline: ModelReport
    fused: ModelReport
    gains: dict[str, float]             # percentage points, fused - baseline
    p_value: float
    n_resamples: int
    seed: int


def evaluate_pair(baseline, fused, tasks: EvalTasks, g: KnowledgeGraph,
                  vocab: Vocab, *, seed: int = 0, n_resamples: int = 10_000,
                  baseline_name: str = "baseline", fused_name: str = "fused",
                  ) -> PairReport:
    """Evaluate both models on one task set; bootstrap the factual delta."""
    if _causal_config(baseline).vocab_size != _causal_config(fused).vocab_size:
        raise EvalError("models do not share a vocabulary; task set cannot match")
    lexicon = build_lexicon(g)
    base_report = evaluate_model(baseline, tasks, g, vocab, baseline_name, lexicon)
    fused_report = evaluate_model(fused, tasks, g, vocab, fused_name, lexicon)
    gains = {m: 100.0 * (getattr(fused_report, m) - getattr(base_report, m))
             for m in RATE_METRICS}
    p = paired_bootstrap_p(base_report.factual_flags, fused_report.factual_flags,
                           n_resamples, seed)
    return PairReport(baseline=base_report, fused=fused_report, gains=gains,
                      p_value=p, n_resamples=n_resamples, seed=seed)

"""Result rendering: aligned plain-text tables plus a machine TSV.

The QA table prints percentage strings (94.7%) with a signed gain column;
the generation table prints BLEU/ROUGE scaled by 100 and raw perplexity.
Gains are against the named un-augmented baseline — the comparison target
is stated in the header because the convention is an assumption, not a
given. The TSV is byte-deterministic: sorted rows, repr() floats.
"""

from __future__ import annotations

from .errors import EvalError
from .metrics import ModelReport, PairReport, RATE_METRICS


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}%"


def _gain_pct(points: float) -> str:
    return f"{points:+.1f}%"


def _scaled(x: float) -> str:
    return f"{100.0 * x:.1f}"


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])]
        cells += [r[i].rjust(widths[i]) for i in range(1, len(r))]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out)


def qa_table(baseline: ModelReport, fused: list[ModelReport]) -> str:
    """Five columns as in the QA results table; gain is on F1."""
    rows = [["Model", "Prec.", "Rec.", "F1", "Gain"],
            [baseline.name, _pct(baseline.precision), _pct(baseline.recall),
             _pct(baseline.f1), "-"]]
    for m in fused:
        rows.append([m.name, _pct(m.precision), _pct(m.recall), _pct(m.f1),
                     _gain_pct(100.0 * (m.f1 - baseline.f1))])
    return _aligned(rows)


def gen_table(baseline: ModelReport, fused: list[ModelReport]) -> str:
    """Five columns as in the generation results table; gain is on BLEU."""
    rows = [["Model", "BLEU", "ROUGE", "PPL", "Gain"],
            [baseline.name, _scaled(baseline.bleu), _scaled(baseline.rouge_l),
             f"{baseline.perplexity:.1f}", "-"]]
    for m in fused:
        rows.append([m.name, _scaled(m.bleu), _scaled(m.rouge_l),
                     f"{m.perplexity:.1f}",
                     _gain_pct(100.0 * (m.bleu - baseline.bleu))])
    return _aligned(rows)


def significance_lines(pairs: list[PairReport]) -> str:
    out = []
    for p in pairs:
        out.append(
            f"factual accuracy: {p.baseline.name} {_pct(p.baseline.factual)} "
            f"vs {p.fused.name} {_pct(p.fused.factual)} "
            f"({p.gains['factual']:+.1f} pp, paired bootstrap "
            f"p={p.p_value:.4f}, n={p.n_resamples})")
    return "\n".join(out)


def full_report(pairs: list[PairReport]) -> str:
    """Both tables plus significance, for one shared baseline."""
    if not pairs:
        raise EvalError("nothing to report")
    baseline = pairs[0].baseline
    if any(p.baseline.name != baseline.name for p in pairs):
        raise EvalError("pair reports disagree on the baseline")
    fused = [p.fused for p in pairs]
    parts = [
        f"QA performance (gain vs. {baseline.name}, the un-augmented baseline)",
        qa_table(baseline, fused),
        "",
        f"Text generation performance (gain vs. {baseline.name}, "
        "the un-augmented baseline)",
        gen_table(baseline, fused),
        "",
        significance_lines(pairs),
    ]
    return "\n".join(parts) + "\n"


# --- machine-readable output ---------------------------------------------------


def machine_rows(pairs: list[PairReport]) -> list[str]:
    """``model<TAB>metric<TAB>value`` rows, sorted, repr-exact floats."""
    if not pairs:
        raise EvalError("nothing to report")
    rows: set[tuple[str, str, str]] = set()
    for p in pairs:
        for m in (p.baseline, p.fused):
            for metric in RATE_METRICS:
                rows.add((m.name, metric, repr(getattr(m, metric))))
            rows.add((m.name, "perplexity", repr(m.perplexity)))
        rows.add((p.fused.name, "factual_p_value", repr(p.p_value)))
        rows.add((p.fused.name, "bootstrap_resamples", repr(p.n_resamples)))
    return [f"{m}\t{k}\t{v}" for m, k, v in sorted(rows)]


def write_machine_tsv(path: str, pairs: list[PairReport]) -> None:
    from .trainer import atomic_write

    atomic_write(path, ("\n".join(machine_rows(pairs)) + "\n").encode())

import pytest

from kglm.errors import EvalError
from kglm.metrics import ModelReport, PairReport
from kglm.report import (full_report, gen_table, machine_rows, qa_table,
                         significance_lines, write_machine_tsv)


def report_fixture(name="toy-lm", f1=0.902, bleu=0.287, factual=0.88):
    return ModelReport(name=name, precision=0.925, recall=0.912, f1=f1,
                       exact=0.9, bleu=bleu, rouge_l=0.331, perplexity=25.8,
                       factual=factual, factual_flags=[True, False])


def pair_fixture():
    base = report_fixture("toy-lm", f1=0.868, bleu=0.287, factual=0.80)
    fused = report_fixture("toy-lm + gated-injection", f1=0.947, bleu=0.381,
                           factual=0.88)
    gains = {"f1": 100 * (fused.f1 - base.f1),
             "factual": 100 * (fused.factual - base.factual)}
    return PairReport(baseline=base, fused=fused, gains=gains,
                      p_value=0.0042, n_resamples=10_000, seed=0)


def test_qa_table_renders_rates_as_percent_strings():
    table = qa_table(report_fixture(f1=0.947), [])
    assert "94.7%" in table
    assert "92.5%" in table and "91.2%" in table


def test_qa_table_columns_and_gain():
    pair = pair_fixture()
    table = qa_table(pair.baseline, [pair.fused])
    lines = table.splitlines()
    assert lines[0].split() == ["Model", "Prec.", "Rec.", "F1", "Gain"]
    assert lines[1].endswith("-")            # baseline row has no gain
    assert "+7.9%" in lines[2]               # 94.7 - 86.8
    assert lines[2].startswith("toy-lm + gated-injection")


def test_gen_table_scaling_and_columns():
    pair = pair_fixture()
    table = gen_table(pair.baseline, [pair.fused])
    lines = table.splitlines()
    assert lines[0].split() == ["Model", "BLEU", "ROUGE", "PPL", "Gain"]
    assert "28.7" in lines[1] and "33.1" in lines[1]   # x100, no percent sign
    assert "25.8" in lines[1]                          # perplexity unscaled
    assert "+9.4%" in lines[2]                         # BLEU gain


def test_significance_line_contents():
    text = significance_lines([pair_fixture()])
    assert "p=0.0042" in text
    assert "+8.0 pp" in text
    assert "n=10000" in text


def test_full_report_names_the_baseline_in_headers():
    text = full_report([pair_fixture()])
    assert "gain vs. toy-lm, the un-augmented baseline" in text
    assert "QA performance" in text and "Text generation performance" in text


def test_full_report_rejects_mixed_baselines():
    a = pair_fixture()
    b = pair_fixture()
    b.baseline.name = "other"
    with pytest.raises(EvalError):
        full_report([a, b])
    with pytest.raises(EvalError):
        full_report([])


def test_machine_rows_sorted_and_repr_exact():
    rows = machine_rows([pair_fixture()])
    assert rows == sorted(rows)
    parsed = [r.split("\t") for r in rows]
    assert all(len(p) == 3 for p in parsed)
    by_key = {(m, k): v for m, k, v in parsed}
    assert float(by_key[("toy-lm + gated-injection", "f1")]) == 0.947
    assert float(by_key[("toy-lm", "perplexity")]) == 25.8
    assert float(by_key[("toy-lm + gated-injection", "factual_p_value")]) == 0.0042


def test_machine_rows_cover_every_rate_metric():
    rows = machine_rows([pair_fixture()])
    metrics = {r.split("\t")[1] for r in rows if r.startswith("toy-lm\t")}
    assert {"precision", "recall", "f1", "exact", "bleu", "rouge_l",
            "factual", "perplexity"} <= metrics


def test_write_machine_tsv_roundtrip(tmp_path):
    path = tmp_path / "out" / "metrics.tsv"
    path.parent.mkdir()
    pairs = [pair_fixture()]
    write_machine_tsv(str(path), pairs)
    write_machine_tsv(str(path), pairs)  # idempotent overwrite
    body = path.read_text()
    assert body == "\n".join(machine_rows(pairs)) + "\n"
    assert not list(path.parent.glob(".tmp-*"))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kglm.errors import ConfigError, GraphError
from kglm.kg import Triple
from kglm.synth import (QaExample, SynthSpec, default_templates, generate_kg,
                        holdout_split, make_qa, read_qa, read_templates,
                        render_corpus, write_qa, write_templates)


def test_minimal_spec_counts():
    g = generate_kg(SynthSpec(n_entities=2, n_relations=1, triples_per_entity=1))
    assert g.n_triples == 2
    assert g.n_entities == 2


def test_generation_deterministic():
    spec = SynthSpec(n_entities=12, n_relations=3, triples_per_entity=3, seed=7)
    assert generate_kg(spec) == generate_kg(spec)


def test_seed_changes_graph():
    a = generate_kg(SynthSpec(n_entities=12, n_relations=3, seed=0,
                              triples_per_entity=3))
    b = generate_kg(SynthSpec(n_entities=12, n_relations=3, seed=1,
                              triples_per_entity=3))
    assert a != b


def test_functional_constraint():
    g = generate_kg(SynthSpec(n_entities=20, n_relations=4, triples_per_entity=4))
    pairs = [(t.subject, t.relation) for t in g.triple_list]
    assert len(pairs) == len(set(pairs))


def test_no_self_loops():
    g = generate_kg(SynthSpec(n_entities=15, n_relations=3, triples_per_entity=3))
    assert all(t.subject != t.object for t in g.triple_list)


def test_unsatisfiable_spec_rejected():
    with pytest.raises(ConfigError):
        SynthSpec(n_entities=10, n_relations=2, triples_per_entity=3, functional=True)
    with pytest.raises(ConfigError):
        SynthSpec(n_entities=1, n_relations=1)
    with pytest.raises(ConfigError):
        SynthSpec(holdout_fraction=1.0)


def test_nonfunctional_graphs_allowed():
    g = generate_kg(SynthSpec(n_entities=10, n_relations=2, triples_per_entity=4,
                              functional=False))
    assert g.n_triples == 40


def test_relation_objects_stay_in_cluster():
    # objects of one relation come from a single residue class mod n_clusters
    spec = SynthSpec(n_entities=50, n_relations=5, triples_per_entity=5)
    g = generate_kg(spec)
    for r in range(5):
        objs = {t.object for t in g.triple_list if t.relation == r}
        assert len({o % 10 for o in objs}) == 1


def test_corpus_bijection_and_labels():
    g = generate_kg(SynthSpec(n_entities=10, n_relations=2, triples_per_entity=2))
    tpl = default_templates(g)
    sentences = render_corpus(g, tpl)
    assert len(sentences) == g.n_triples
    t = g.triple_list[0]
    assert g.entity_label(t.subject) in sentences[0]
    assert g.entity_label(t.object) in sentences[0]


def test_corpus_respects_holdout():
    g = generate_kg(SynthSpec(n_entities=10, n_relations=2, triples_per_entity=2))
    tpl = default_templates(g)
    assert render_corpus(g, tpl, holdout=set(g.triple_list)) == []
    held = set(g.triple_list[:3])
    sentences = render_corpus(g, tpl, holdout=held)
    assert len(sentences) == g.n_triples - 3
    for t in held:
        gone = tpl[t.relation][0].replace("{SUBJ}", g.entity_label(t.subject)) \
            .replace("{OBJ}", g.entity_label(t.object))
        assert gone not in sentences


def test_missing_template_rejected():
    g = generate_kg(SynthSpec(n_entities=6, n_relations=2, triples_per_entity=2))
    tpl = default_templates(g)
    del tpl[1]
    with pytest.raises(ConfigError):
        render_corpus(g, tpl)


def test_qa_bijection_and_gold():
    g = generate_kg(SynthSpec(n_entities=10, n_relations=2, triples_per_entity=2))
    targets = list(g.triple_list[:5])
    qa = make_qa(g, default_templates(g), targets)
    assert len(qa) == 5
    for ex, t in zip(qa, targets):
        assert ex.answer == g.entity_label(t.object)
        assert g.entity_label(t.subject) in ex.question
        assert ex.triple in g.triples


def test_question_never_contains_answer():
    g = generate_kg(SynthSpec(n_entities=30, n_relations=5, triples_per_entity=5))
    qa = make_qa(g, default_templates(g), list(g.triple_list))
    for ex in qa:
        assert ex.answer not in ex.question


def test_qa_rejects_nonfunctional_target():
    from kglm.kg import KnowledgeGraph

    g = KnowledgeGraph(["a", "b", "c"], ["r"],
                       [Triple(0, 0, 1), Triple(0, 0, 2)])
    with pytest.raises(GraphError):
        make_qa(g, {0: ("{SUBJ} r {OBJ}", "{SUBJ} r")}, [Triple(0, 0, 1)])


def test_holdout_split_fraction_and_partition():
    g = generate_kg(SynthSpec(n_entities=20, n_relations=5, triples_per_entity=5))
    kept, held = holdout_split(g, 0.2, seed=3)
    assert len(held) == round(0.2 * g.n_triples)
    assert set(kept) | set(held) == g.triples
    assert not set(kept) & set(held)
    again = holdout_split(g, 0.2, seed=3)
    assert (kept, held) == again


def test_template_file_round_trip(tmp_path):
    g = generate_kg(SynthSpec(n_entities=6, n_relations=3, triples_per_entity=2))
    tpl = default_templates(g)
    path = tmp_path / "templates.tsv"
    write_templates(str(path), g, tpl)
    assert read_templates(str(path), g) == tpl


def test_qa_file_round_trip(tmp_path):
    g = generate_kg(SynthSpec(n_entities=8, n_relations=2, triples_per_entity=2))
    qa = make_qa(g, default_templates(g), list(g.triple_list[:4]))
    path = tmp_path / "qa.tsv"
    write_qa(str(path), g, qa)
    assert read_qa(str(path), g) == qa


@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 2 ** 16))
@settings(max_examples=40)
def test_generation_always_satisfies_spec(n_ent, n_rel, seed):
    tpe = min(n_rel, 2)
    g = generate_kg(SynthSpec(n_entities=n_ent, n_relations=n_rel,
                              triples_per_entity=tpe, seed=seed))
    assert g.n_triples == n_ent * tpe
    assert all(t.subject != t.object for t in g.triple_list)
    pairs = [(t.subject, t.relation) for t in g.triple_list]
    assert len(set(pairs)) == len(pairs)

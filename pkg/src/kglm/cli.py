"""Command-line front end for the KG-fusion pipeline.

Command tree::

    kglm kg ingest       --triples FILE [--out DIR]
    kglm kg stats        --triples FILE
    kglm synth gen       [--out DIR]
    kglm kgbert train    --triples FILE [--out DIR]
    kglm kgbert score    --triples FILE --checkpoint CKPT [--graph FILE] [--out DIR]
    kglm lm pretrain     --corpus FILE [--vocab FILE] [--out DIR]
    kglm fuse train      --graph FILE --base CKPT --qa FILE --vocab FILE [--out DIR]
    kglm eval qa         --qa FILE --checkpoint CKPT --graph FILE --vocab FILE [--out DIR]
    kglm eval gen        --qa FILE --templates FILE --checkpoint CKPT --graph FILE
                         --vocab FILE [--out DIR]
    kglm report compare  --baseline CKPT --fused CKPT [--fused CKPT ...] --qa FILE
                         --templates FILE --graph FILE --vocab FILE [--out DIR]

Every subcommand accepts ``--config <path>`` (flat ``key=value`` lines; see
``trainer.parse_config``) and ``--seed <int>`` (overrides the config seed).
A ``preset=gpt4like|mistrallike`` line pulls in one of the hosted-recipe
batch sizes; explicit keys beat the preset.

Training defaults: lr 3e-4 for LM and scorer work, 1e-4 for fusion
fine-tuning (``fuse train``); both yield to an explicit ``train.lr``.

Exit codes: 0 success, 1 usage error (bad flags, unknown subcommand),
2 runtime failure (bad data, shape conflicts, I/O). Artifacts land under
``--out`` (default from the config's ``out`` key) and are written via
rename, so a crash never leaves a partial file.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from .errors import KglmError, UsageError
from .fusion import FusedModel, FusionConfig
from .kg import KnowledgeGraph, ingest_tsv
from .kgbert import (KgBertScorer, KgEmbeddingTable, export_embeddings,
                     train_scorer, train_translational_table)
from .linker import build_lexicon, link
from .metrics import (EvalTasks, evaluate_model, evaluate_pair,
                      factual_accuracy)
from .pipeline import graph_vocab, qa_sequences, subgraph
from .report import full_report, write_machine_tsv
from .synth import (SynthSpec, default_templates, generate_kg, holdout_split,
                    make_qa, read_qa, read_templates, render_corpus, write_qa,
                    write_templates)
from .text import CLS, EOS, Vocab, build_vocab, load_vocab, normalize, save_vocab
from .trainer import (RunConfig, atomic_write, fused_lm_loss, lm_examples,
                      lm_loss, load_checkpoint, parse_config, restore_params,
                      run_training, save_checkpoint, write_loss_log)
from .transformer import ModelConfig, TransformerModel


# ---------------------------------------------------------------------------
# shared plumbing


def _atomic_via(path: str, writer) -> None:
    """Run ``writer(tmp_path)`` then rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(args, default_lr: float | None = None) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.from_file(args.config, seed_override=args.seed)
        if default_lr is not None and "train.lr" not in parse_config(args.config):
            cfg.lr = default_lr
    else:
        cfg = RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if default_lr is not None:
            cfg.lr = default_lr
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out if getattr(args, "out", None) else cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _model_config(cfg: RunConfig, vocab_size: int, mode: str) -> ModelConfig:
    keys = {k: v for k, v in cfg.model.items()
            if k in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
                     "dropout")}
    return ModelConfig(vocab_size=vocab_size, mode=mode, **keys)


def _load_model(ckpt_path: str, g: KnowledgeGraph | None = None):
    """Rebuild a model from a checkpoint; fused kinds need the graph."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind == "lm":
        model = TransformerModel(ModelConfig(**ckpt.config), seed=ckpt.seed)
        restore_params(sorted(model.params.items()), ckpt)
        return model
    if ckpt.kind == "scorer":
        scorer = KgBertScorer(ModelConfig(**ckpt.config), seed=ckpt.seed)
        restore_params(scorer.named_parameters(), ckpt)
        return scorer
    if ckpt.kind == "fused":
        if g is None:
            raise UsageError("a fused checkpoint needs --graph to rebuild "
                             "its memory bank")
        fcfg = FusionConfig(**ckpt.config["fusion"])
        base = TransformerModel(ModelConfig(**ckpt.config["model"]),
                                seed=ckpt.seed)
        table = KgEmbeddingTable(
            fcfg.d_kg, np.zeros((g.n_entities, fcfg.d_kg)),
            np.zeros((g.n_relations, fcfg.d_kg)))  # overwritten by restore
        fused = FusedModel(base, fcfg, table, g, seed=ckpt.seed)
        restore_params(fused.named_parameters(), ckpt)
        return fused
    raise UsageError(f"cannot load checkpoint kind {ckpt.kind!r} here")


def _require_causal(model, what: str):
    base_cfg = model.base.config if hasattr(model, "base") else \
        getattr(model, "config", None)
    if base_cfg is None or base_cfg.mode != "causal":
        raise UsageError(f"{what} needs a causal LM or fused checkpoint")
    return model


def _build_tasks(g: KnowledgeGraph, templates, qa, vocab: Vocab,
                 lexicon) -> EvalTasks:
    """QA + generation + holdout-statement perplexity from one QA set."""
    gen = []
    for ex in qa:
        stmt, question = templates[ex.triple.relation]
        subj = g.entity_label(ex.triple.subject)
        obj = g.entity_label(ex.triple.object)
        gen.append((question.replace("{SUBJ}", subj),
                    normalize(stmt.replace("{SUBJ}", subj).replace("{OBJ}", obj))))
    stmts = render_corpus(subgraph(g, [ex.triple for ex in qa]), templates)
    ppl_sequences = [[CLS] + list(vocab.encode(s).ids) + [EOS] for s in stmts]
    ppl_alignments = [[(s + 1, e + 1, ent) for s, e, ent
                       in link(vocab.encode(stmt), lexicon).alignments]
                      for stmt in stmts]
    return EvalTasks(qa=qa, gen=gen, ppl_sequences=ppl_sequences,
                     ppl_alignments=ppl_alignments)


def _write_metrics_tsv(path: str, rows: dict) -> None:
    atomic_write(path, "".join(f"{k}\t{v!r}\n" for k, v in sorted(rows.items())))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_kg_ingest(args) -> None:
    cfg = _load_config(args)
    strict = str(cfg.data.get("strict", "")).lower() in ("1", "true", "yes")
    g = ingest_tsv(args.triples, strict=strict)
    out = _out_dir(args, cfg)
    atomic_write(os.path.join(out, "graph.tsv"), g.to_tsv())
    print(f"entities\t{g.n_entities}")
    print(f"relations\t{g.n_relations}")
    print(f"triples\t{g.n_triples}")


def _cmd_kg_stats(args) -> None:
    _load_config(args)  # validates the config even though nothing is used
    g = ingest_tsv(args.triples)
    print(f"entities\t{g.n_entities}")
    print(f"relations\t{g.n_relations}")
    print(f"triples\t{g.n_triples}")


def _cmd_synth_gen(args) -> None:
    cfg = _load_config(args)
    d = cfg.data
    spec = SynthSpec(
        n_entities=int(d.get("n_entities", 50)),
        n_relations=int(d.get("n_relations", 5)),
        triples_per_entity=int(d.get("triples_per_entity", 5)),
        functional=str(d.get("functional", "true")).lower() in ("1", "true", "yes"),
        holdout_fraction=float(d.get("holdout_fraction", 0.2)),
        seed=cfg.seed)
    g = generate_kg(spec)
    templates = default_templates(g)
    kept, held = holdout_split(g, spec.holdout_fraction, spec.seed)
    corpus = render_corpus(g, templates, holdout=set(held))
    vocab = graph_vocab(g)
    out = _out_dir(args, cfg)
    atomic_write(os.path.join(out, "graph.tsv"), g.to_tsv())
    _atomic_via(os.path.join(out, "templates.tsv"),
                lambda p: write_templates(p, g, templates))
    atomic_write(os.path.join(out, "corpus.txt"), "\n".join(corpus) + "\n")
    _atomic_via(os.path.join(out, "qa_holdout.tsv"),
                lambda p: write_qa(p, g, make_qa(g, templates, held)))
    _atomic_via(os.path.join(out, "vocab.txt"),
                lambda p: save_vocab(vocab, p))
    print(f"graph\t{g.n_entities} entities, {g.n_relations} relations, "
          f"{g.n_triples} triples")
    print(f"corpus\t{len(corpus)} sentences ({len(held)} held out)")


def _cmd_kgbert_train(args) -> None:
    cfg = _load_config(args, default_lr=3e-4)
    g = ingest_tsv(args.triples)
    vocab = graph_vocab(g)
    config = _model_config(cfg, len(vocab), "bidirectional")
    scorer = KgBertScorer(config, seed=cfg.seed)
    sides = tuple(s.strip() for s in
                  str(cfg.data.get("corruption_sides", "head,tail")).split(","))
    losses = train_scorer(g, scorer, vocab, epochs=cfg.epochs,
                          batch_size=cfg.batch_size, lr=cfg.lr,
                          seed=cfg.seed, sides=sides)
    out = _out_dir(args, cfg)
    save_checkpoint(os.path.join(out, "scorer.ckpt"), "scorer", asdict(config),
                    [(n, t.data) for n, t in scorer.named_parameters()],
                    step=len(losses), seed=cfg.seed)
    write_loss_log(os.path.join(out, "loss.tsv"), losses)
    _atomic_via(os.path.join(out, "vocab.txt"), lambda p: save_vocab(vocab, p))
    source = str(cfg.fusion.get("source", ""))
    if source in ("cls-label", "cls-context"):
        table = export_embeddings(g, scorer, vocab, mode=source)
        _atomic_via(os.path.join(out, "embeddings.tsv"),
                    lambda p: table.save(p, g))
    print(f"trained scorer for {len(losses)} steps; final loss "
          f"{losses[-1]:.4f}" if losses else "trained scorer (0 steps)")


def _cmd_kgbert_score(args) -> None:
    _load_config(args)
    g = ingest_tsv(args.graph if args.graph else args.triples)
    vocab = graph_vocab(g)
    scorer = _load_model(args.checkpoint)
    if not isinstance(scorer, KgBertScorer):
        raise UsageError("kgbert score needs a scorer checkpoint")
    if scorer.config.vocab_size != len(vocab):
        raise UsageError("checkpoint vocabulary does not match this graph")
    lines = []
    to_score = ingest_tsv(args.triples)
    for t in to_score.triple_list:
        mapped = t._replace(
            subject=g.entity_id(to_score.entities[t.subject]),
            relation=g.relation_id(to_score.relations[t.relation]),
            object=g.entity_id(to_score.entities[t.object]))
        p = scorer.score_triple(g, mapped, vocab)
        lines.append(f"{to_score.entities[t.subject]}\t"
                     f"{to_score.relations[t.relation]}\t"
                     f"{to_score.entities[t.object]}\t{p!r}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "scores.tsv"),
                     "".join(line + "\n" for line in lines))
    for line in lines:
        print(line)


def _read_corpus(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [normalize(line) for line in fh if line.strip()]


def _cmd_lm_pretrain(args) -> None:
    cfg = _load_config(args, default_lr=3e-4)
    corpus = _read_corpus(args.corpus)
    vocab = load_vocab(args.vocab) if args.vocab else build_vocab(corpus)
    config = _model_config(cfg, len(vocab), "causal")
    model = TransformerModel(config, seed=cfg.seed)
    sequences = [[CLS] + list(vocab.encode(s).ids) + [EOS] for s in corpus]
    examples = lm_examples(sequences)
    losses = run_training(lambda b: lm_loss(model, b),
                          [t for _, t in sorted(model.params.items())],
                          examples, cfg.epochs, cfg.batch_size, cfg.lr,
                          cfg.seed)
    out = _out_dir(args, cfg)
    save_checkpoint(os.path.join(out, "lm.ckpt"), "lm", asdict(config),
                    [(n, t.data) for n, t in sorted(model.params.items())],
                    step=len(losses), seed=cfg.seed)
    write_loss_log(os.path.join(out, "loss.tsv"), losses)
    _atomic_via(os.path.join(out, "vocab.txt"), lambda p: save_vocab(vocab, p))
    print(f"pretrained LM for {len(losses)} steps on {len(corpus)} sentences")


def _cmd_fuse_train(args) -> None:
    cfg = _load_config(args, default_lr=1e-4)
    g = ingest_tsv(args.graph)
    vocab = load_vocab(args.vocab)
    base_ckpt = load_checkpoint(args.base)
    if base_ckpt.kind != "lm":
        raise UsageError("--base must point at a causal LM checkpoint")
    base = TransformerModel(ModelConfig(**base_ckpt.config), seed=base_ckpt.seed)
    restore_params(sorted(base.params.items()), base_ckpt)
    if base.config.vocab_size != len(vocab):
        raise UsageError("base checkpoint vocabulary does not match --vocab")

    f = cfg.fusion
    fcfg = FusionConfig(
        mode=str(f.get("mode", "gated-injection")),
        # default injection site: the middle of the stack
        layer=int(f.get("layer", base.config.n_layers // 2)),
        radius=int(f.get("radius", 1)),
        d_kg=int(f.get("d_kg", 32)),
        cotrain_kg=bool(f.get("cotrain_kg", False)))
    source = str(f.get("source", "translational"))
    if source == "translational":
        table = train_translational_table(g, d_kg=fcfg.d_kg, seed=cfg.seed)
    elif source in ("cls-label", "cls-context"):
        if not args.scorer:
            raise UsageError(f"embedding source {source!r} needs --scorer")
        scorer = _load_model(args.scorer)
        if not isinstance(scorer, KgBertScorer):
            raise UsageError("--scorer must point at a scorer checkpoint")
        table = export_embeddings(g, scorer, graph_vocab(g), mode=source)
        if table.d_kg != fcfg.d_kg:
            fcfg = FusionConfig(fcfg.mode, fcfg.layer, fcfg.radius,
                                table.d_kg, fcfg.cotrain_kg)
    elif source == "file":
        table = KgEmbeddingTable.load(args.embeddings, g) if args.embeddings \
            else None
        if table is None:
            raise UsageError("embedding source 'file' needs --embeddings")
        if table.d_kg != fcfg.d_kg:
            fcfg = FusionConfig(fcfg.mode, fcfg.layer, fcfg.radius,
                                table.d_kg, fcfg.cotrain_kg)
    else:
        raise UsageError(f"unknown embedding source {source!r}")

    fused = FusedModel(base, fcfg, table, g, seed=cfg.seed)
    lexicon = build_lexicon(g)
    qa = read_qa(args.qa, g)
    examples = qa_sequences(qa, vocab, lexicon, True)
    losses = run_training(lambda b: fused_lm_loss(fused, b),
                          fused.trainable_parameters(), examples,
                          cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed)
    out = _out_dir(args, cfg)
    save_checkpoint(
        os.path.join(out, "fused.ckpt"), "fused",
        {"model": asdict(base.config), "fusion": asdict(fcfg)},
        [(n, t.data) for n, t in fused.named_parameters()],
        step=len(losses), seed=cfg.seed)
    write_loss_log(os.path.join(out, "loss.tsv"), losses)
    print(f"fine-tuned {fcfg.mode} at layer {fcfg.layer} for "
          f"{len(losses)} steps on {len(qa)} QA pairs")


def _cmd_eval_qa(args) -> None:
    cfg = _load_config(args)
    g = ingest_tsv(args.graph)
    vocab = load_vocab(args.vocab)
    model = _require_causal(_load_model(args.checkpoint, g), "eval qa")
    qa = read_qa(args.qa, g)
    lexicon = build_lexicon(g)
    templates = read_templates(args.templates, g) if args.templates \
        else default_templates(g)
    tasks = _build_tasks(g, templates, qa, vocab, lexicon)
    report = evaluate_model(model, tasks, g, vocab, "model", lexicon)
    rows = {"precision": report.precision, "recall": report.recall,
            "f1": report.f1, "exact": report.exact, "factual": report.factual,
            "n": len(qa), "seed": cfg.seed}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_metrics_tsv(os.path.join(args.out, "qa_metrics.tsv"), rows)
    for k in sorted(rows):
        print(f"{k}\t{rows[k]!r}")


def _cmd_eval_gen(args) -> None:
    cfg = _load_config(args)
    g = ingest_tsv(args.graph)
    vocab = load_vocab(args.vocab)
    model = _require_causal(_load_model(args.checkpoint, g), "eval gen")
    qa = read_qa(args.qa, g)
    lexicon = build_lexicon(g)
    templates = read_templates(args.templates, g)
    tasks = _build_tasks(g, templates, qa, vocab, lexicon)
    report = evaluate_model(model, tasks, g, vocab, "model", lexicon)
    rows = {"bleu": report.bleu, "rouge_l": report.rouge_l,
            "perplexity": report.perplexity, "n": len(qa), "seed": cfg.seed}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_metrics_tsv(os.path.join(args.out, "gen_metrics.tsv"), rows)
    for k in sorted(rows):
        print(f"{k}\t{rows[k]!r}")


def _cmd_report_compare(args) -> None:
    cfg = _load_config(args)
    g = ingest_tsv(args.graph)
    vocab = load_vocab(args.vocab)
    baseline = _require_causal(_load_model(args.baseline, g), "report compare")
    qa = read_qa(args.qa, g)
    lexicon = build_lexicon(g)
    templates = read_templates(args.templates, g)
    tasks = _build_tasks(g, templates, qa, vocab, lexicon)
    n_resamples = int(cfg.data.get("n_resamples", 10_000))
    pairs = []
    for i, path in enumerate(args.fused):
        candidate = _require_causal(_load_model(path, g), "report compare")
        ckpt = load_checkpoint(path)
        name = ckpt.config["fusion"]["mode"] if ckpt.kind == "fused" \
            else f"candidate-{i + 1}"
        pairs.append(evaluate_pair(baseline, candidate, tasks, g, vocab,
                                   seed=cfg.seed, n_resamples=n_resamples,
                                   baseline_name="baseline", fused_name=name))
    text = full_report(pairs)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "report.txt"), text)
        write_machine_tsv(os.path.join(args.out, "report.tsv"), pairs)
    print(text, end="")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """argparse, but usage mistakes exit 1 instead of 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p) -> None:
    p.add_argument("--config", metavar="PATH", default=None)
    p.add_argument("--seed", metavar="INT", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="kglm", description=__doc__.splitlines()[0])
    groups = root.add_subparsers(dest="group", required=True,
                                 parser_class=_Parser)

    def sub(group, name, run, **flags):
        p = group.add_parser(name)
        _add_common(p)
        for flag, kw in flags.items():
            p.add_argument("--" + flag.replace("_", "-"), **kw)
        p.set_defaults(run=run)
        return p

    kg = groups.add_parser("kg").add_subparsers(dest="cmd", required=True,
                                                parser_class=_Parser)
    sub(kg, "ingest", _cmd_kg_ingest,
        triples={"required": True}, out={"default": None})
    sub(kg, "stats", _cmd_kg_stats, triples={"required": True})

    synth = groups.add_parser("synth").add_subparsers(dest="cmd", required=True,
                                                      parser_class=_Parser)
    sub(synth, "gen", _cmd_synth_gen, out={"default": None})

    kgbert = groups.add_parser("kgbert").add_subparsers(
        dest="cmd", required=True, parser_class=_Parser)
    sub(kgbert, "train", _cmd_kgbert_train,
        triples={"required": True}, out={"default": None})
    sub(kgbert, "score", _cmd_kgbert_score,
        triples={"required": True}, checkpoint={"required": True},
        graph={"default": None}, out={"default": None})

    lm = groups.add_parser("lm").add_subparsers(dest="cmd", required=True,
                                                parser_class=_Parser)
    sub(lm, "pretrain", _cmd_lm_pretrain,
        corpus={"required": True}, vocab={"default": None},
        out={"default": None})

    fuse = groups.add_parser("fuse").add_subparsers(dest="cmd", required=True,
                                                    parser_class=_Parser)
    sub(fuse, "train", _cmd_fuse_train,
        graph={"required": True}, base={"required": True},
        qa={"required": True}, vocab={"required": True},
        scorer={"default": None}, embeddings={"default": None},
        out={"default": None})

    ev = groups.add_parser("eval").add_subparsers(dest="cmd", required=True,
                                                  parser_class=_Parser)
    sub(ev, "qa", _cmd_eval_qa,
        qa={"required": True}, checkpoint={"required": True},
        graph={"required": True}, vocab={"required": True},
        templates={"default": None}, out={"default": None})
    sub(ev, "gen", _cmd_eval_gen,
        qa={"required": True}, templates={"required": True},
        checkpoint={"required": True}, graph={"required": True},
        vocab={"required": True}, out={"default": None})

    rep = groups.add_parser("report").add_subparsers(dest="cmd", required=True,
                                                     parser_class=_Parser)
    sub(rep, "compare", _cmd_report_compare,
        baseline={"required": True},
        fused={"required": True, "action": "append"},
        qa={"required": True}, templates={"required": True},
        graph={"required": True}, vocab={"required": True},
        out={"default": None})
    return root


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        args.run(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except KglmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

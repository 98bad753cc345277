"""Command-line entry point: ``ppked {synth,index,train,generate,evaluate,gates}``.

Every command reads one YAML run config (``--config``); artifacts live under
``paths.workdir``. Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from . import train as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (CorpusRecord, FeatureSet, ReportEmbedder, SplitManifest, SynthConfig, build_vocab,
                   derive_topic_labels, load_features, read_jsonl, synth_corpus, tokenize,
                   write_corpus_jsonl, write_features)
from .errors import ConfigError, DataError, PpkedError
from .mkd import format_gate_table, gate_statistics
from .model import PpkedModel
from .poke import TOPICS
from .prke import KnowledgeGraph, RetrievalIndex, parse_grouping

log = logging.getLogger("ppked")


# -- shared loading ----------------------------------------------------------
def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _need(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found at {path}; {hint}")
    return path


def load_records(cfg: RunConfig) -> tuple[list[CorpusRecord], SplitManifest]:
    paths = cfg.paths
    hint = "run `ppked synth` or point paths.* at your data"
    rows = read_jsonl(_need(paths.resolve("corpus"), "corpus", hint))
    feats = load_features(_need(paths.resolve("features"), "feature file", hint),
                          cfg.model.n_patches, cfg.model.feature_dim).by_id()
    embs = load_features(_need(paths.resolve("embeddings"), "image embedding file", hint), n_patches=1).by_id()
    manifest = SplitManifest.load(_need(paths.resolve("manifest"), "split manifest", hint))
    records = []
    for row in rows:
        rid = row.get("id")
        if rid is None or "report" not in row:
            raise DataError("corpus rows need 'id' and 'report' fields")
        if rid not in feats or rid not in embs:
            raise DataError(f"record {rid} has no image features")
        records.append(CorpusRecord(rid, row["report"], feats[rid], embs[rid][0],
                                    derive_topic_labels(tokenize(row["report"])), row.get("patient_id")))
    return records, manifest


def split_records(records, manifest: SplitManifest, split: str) -> list[CorpusRecord]:
    by_id = {r.id: r for r in records}
    ids = manifest.ids(split)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"manifest lists ids absent from the corpus: {missing[:10]}")
    return [by_id[i] for i in ids]


def load_graph(cfg: RunConfig) -> KnowledgeGraph:
    if cfg.paths.graph is None:
        return KnowledgeGraph.default(TOPICS)
    path = _need(cfg.paths.resolve("graph"), "graph grouping", "fix paths.graph")
    return KnowledgeGraph.from_groups(TOPICS, parse_grouping(path.read_text()))


def load_index(cfg: RunConfig) -> RetrievalIndex:
    path = _need(cfg.paths.resolve("index"), "retrieval index", "run `ppked index` first")
    index = RetrievalIndex.load(path)
    if index.d != cfg.model.d:
        raise ConfigError(f"index stores report embeddings of width {index.d}, model.d is {cfg.model.d}")
    return index


def _checkpoint_dir(cfg: RunConfig) -> Path:
    return cfg.paths.resolve("checkpoints")


# -- commands ----------------------------------------------------------------
def cmd_synth(cfg: RunConfig, args) -> None:
    m, d = cfg.model, cfg.data
    corpus = synth_corpus(SynthConfig(num_records=d.num_records, seed=cfg.train.seed,
                                      abnormality_rate=d.abnormality_rate, n_patches=m.n_patches,
                                      feature_dim=m.feature_dim, noise=d.noise, signal=d.signal,
                                      styles=d.styles, max_topics=d.max_topics,
                                      records_per_patient=d.records_per_patient))
    Path(cfg.paths.workdir).mkdir(parents=True, exist_ok=True)
    ids = [r.id for r in corpus.records]
    write_corpus_jsonl(cfg.paths.resolve("corpus"), corpus.records)
    write_features(cfg.paths.resolve("features"),
                   FeatureSet(ids, np.stack([r.patch_features for r in corpus.records]), m.feature_kind))
    write_features(cfg.paths.resolve("embeddings"),
                   FeatureSet(ids, np.stack([r.image_embedding[None] for r in corpus.records]), "embedding"))
    corpus.manifest.save(cfg.paths.resolve("manifest"))
    print(f"wrote {len(ids)} records to {cfg.paths.workdir} "
          f"(train {len(corpus.manifest.train)}, val {len(corpus.manifest.val)}, test {len(corpus.manifest.test)})")


def cmd_index(cfg: RunConfig, args) -> None:
    records, manifest = load_records(cfg)
    train = split_records(records, manifest, "train")
    if cfg.model.n_retrieved + 1 > len(train):
        raise ConfigError(f"model.n_retrieved={cfg.model.n_retrieved} needs at least "
                          f"{cfg.model.n_retrieved + 1} training records; the train split has {len(train)}")
    index = tr.build_training_index(train, ReportEmbedder(cfg.model.d, cfg.data.embed_seed), cfg.model.n_retrieved)
    index.save(cfg.paths.resolve("index"))
    print(f"indexed {len(index)} training reports -> {cfg.paths.resolve('index')}")


def cmd_train(cfg: RunConfig, args) -> None:
    records, manifest = load_records(cfg)
    index = load_index(cfg)
    train_recs = split_records(records, manifest, "train")
    val_recs = split_records(records, manifest, "val")
    t, k = cfg.train, cfg.model.n_retrieved
    ckdir = _checkpoint_dir(cfg)
    ckdir.mkdir(parents=True, exist_ok=True)
    runlog = tr.RunLog(cfg.paths.resolve("log"))

    state = {"best_bleu4": -1.0, "bad_epochs": 0, "epoch": -1}
    if args.checkpoint:
        model, adam_state, extra = load_checkpoint(args.checkpoint, cfg.model)
        state.update({key: extra[key] for key in state if key in extra})
        opt = tr.adam_from_state(model, adam_state, t.lr)
        log.info("resuming after epoch %d", state["epoch"])
    else:
        vocab = build_vocab((r.tokens for r in train_recs), cfg.data.vocab_top_k, cfg.data.vocab_min_freq)
        model = PpkedModel(cfg.model, vocab, load_graph(cfg), seed=t.seed)
        opt = None
    train_ex = tr.make_examples(train_recs, index, model.vocab, k, held_out=False, max_len=cfg.model.max_len)
    val_ex = tr.make_examples(val_recs, index, model.vocab, k, held_out=True, max_len=cfg.model.max_len)

    if t.pretrain_epochs and not args.checkpoint:
        def pre_log(epoch, loss):
            runlog.write(stage="pretrain", epoch=epoch, bce=loss)
        tr.pretrain_topics(model, train_ex, t.pretrain_epochs, t.pretrain_lr, t.batch_size, t.seed, pre_log)
        if val_ex:
            runlog.write(stage="pretrain", epoch=t.pretrain_epochs - 1, val_auc=tr.topic_aucs(model, val_ex))

    def on_epoch(epoch, loss, optimizer):
        state["epoch"] = epoch
        row = {"stage": "train", "epoch": epoch, "train_loss": loss}
        stop = False
        if val_ex and (epoch + 1) % t.eval_every == 0:
            row["val_loss"] = tr.teacher_forced_loss(model, val_ex)
            scores = tr.score_generations(tr.generate(model, val_ex, beam_width=t.beam_width), val_ex)
            row["val_metrics"] = scores
            if scores["bleu4"] > state["best_bleu4"]:
                state["best_bleu4"], state["bad_epochs"] = scores["bleu4"], 0
                save_checkpoint(ckdir / "best.npz", model, extra=dict(state))
            else:
                state["bad_epochs"] += 1
                stop = state["bad_epochs"] >= t.patience
        elif not val_ex:
            save_checkpoint(ckdir / "best.npz", model, extra=dict(state))
        save_checkpoint(ckdir / "last.npz", model, optimizer.state, extra=dict(state))
        runlog.write(**row)
        if stop:
            log.info("early stop: no validation BLEU-4 gain for %d epochs", t.patience)
        return stop

    start = state["epoch"] + 1
    losses = tr.fit(model, train_ex, max(t.epochs - start, 0), t.lr, t.batch_size, t.seed,
                    opt=opt, start_epoch=start, on_epoch=on_epoch)
    final = losses[-1] if losses else float("nan")
    print(json.dumps({"epochs_run": len(losses), "final_train_loss": final, "best_val_bleu4": state["best_bleu4"]}))


def cmd_generate(cfg: RunConfig, args) -> None:
    split = args.split or "test"
    ckpt = args.checkpoint or _checkpoint_dir(cfg) / "best.npz"
    model, _, _ = load_checkpoint(_need(Path(ckpt), "checkpoint", "train a model or pass --checkpoint"), cfg.model)
    records, manifest = load_records(cfg)
    index = load_index(cfg)
    recs = split_records(records, manifest, split)
    # the leakage guard lives in make_examples: held-out ids must not be indexed
    examples = tr.make_examples(recs, index, model.vocab, cfg.model.n_retrieved, held_out=split != "train")
    results = tr.generate(model, examples, beam_width=cfg.train.beam_width)
    scores = tr.topic_scores(model, examples) if examples else np.zeros((0, len(model.topics)))
    out = Path(args.out) if args.out else cfg.paths.resolve("generations")
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for ex, res, sc in zip(examples, results, scores):
        lines.append(json.dumps({
            "id": ex.id, "text": res.text, "token_ids": res.token_ids,
            "tokens": [model.vocab.itos[i] for i in res.token_ids],
            "per_step_gates": res.gate_means(), "log_prob": res.log_prob,
            "topic_scores": {name: float(s) for name, s in zip(model.topics, sc)},
        }))
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(out)
    print(f"wrote {len(lines)} generations for split {split!r} -> {out}")


def _reference_texts(path: Path) -> dict[str, str]:
    refs = {}
    for row in read_jsonl(path):
        text = row.get("report", row.get("text"))
        if "id" not in row or text is None:
            raise DataError(f"{path}: reference rows need 'id' and 'report' or 'text'")
        refs[row["id"]] = text
    return refs


def cmd_evaluate(cfg: RunConfig, args) -> None:
    gen_path = Path(args.generations) if args.generations else cfg.paths.resolve("generations")
    ref_path = Path(args.references) if args.references else cfg.paths.resolve("corpus")
    gens = read_jsonl(_need(gen_path, "generations", "run `ppked generate` first"))
    refs = _reference_texts(_need(ref_path, "references", "pass --references"))
    ids = [g.get("id") for g in gens]
    missing = [i for i in ids if i not in refs]
    if missing:
        raise DataError(f"generations have no reference for ids: {missing}")
    if args.split:
        expected = SplitManifest.load(cfg.paths.resolve("manifest")).ids(args.split)
        absent = sorted(set(expected) - set(ids))
        if absent:
            raise DataError(f"split {args.split!r} ids missing from generations: {absent}")
    cands = [tokenize(g.get("text", "")) for g in gens]
    gold = [tokenize(refs[i]) for i in ids]
    result = metrics.evaluate_all(cands, gold)
    if gens and all("topic_scores" in g for g in gens):
        topics = list(gens[0]["topic_scores"])
        labels = np.stack([derive_topic_labels(toks, topics) for toks in gold])
        aucs = {}
        for j, name in enumerate(topics):
            if 0 < labels[:, j].sum() < len(labels):
                aucs[name] = metrics.roc_auc([g["topic_scores"][name] for g in gens], labels[:, j])
        result["auc_per_topic"] = aucs
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    print(metrics.format_table(result))


def cmd_gates(cfg: RunConfig, args) -> None:
    gen_path = Path(args.generations) if args.generations else cfg.paths.resolve("generations")
    items = []
    for g in read_jsonl(_need(gen_path, "generations", "run `ppked generate` first")):
        tokens = g.get("tokens") or tokenize(g.get("text", ""))
        gates = np.asarray(g.get("per_step_gates", []), dtype=np.float64).reshape(-1, 2)
        if len(gates) != len(tokens):
            raise DataError(f"{g.get('id')}: {len(tokens)} tokens but {len(gates)} gate rows")
        items.append((tokens, gates))
    table = gate_statistics(items)
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=1) + "\n")
    print(format_gate_table(table))


COMMANDS = {"synth": cmd_synth, "index": cmd_index, "train": cmd_train,
            "generate": cmd_generate, "evaluate": cmd_evaluate, "gates": cmd_gates}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--split", choices=("train", "val", "test"))
    common.add_argument("--checkpoint", help="checkpoint to resume from or generate with")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ppked", description="Report generation with posterior and prior knowledge.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a planted-signal synthetic corpus")
    sub.add_parser("index", parents=[common], help="build the retrieval index over the train split")
    sub.add_parser("train", parents=[common], help="optional topic pretraining, then report training")
    p = sub.add_parser("generate", parents=[common], help="decode reports for a split (default test)")
    p.add_argument("--out")
    p = sub.add_parser("evaluate", parents=[common], help="caption metrics for a generations file")
    p.add_argument("--generations")
    p.add_argument("--references", help="JSONL with id and report/text (default: the corpus)")
    p.add_argument("--out")
    p = sub.add_parser("gates", parents=[common], help="mean distilling gates per sentence class")
    p.add_argument("--generations")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except PpkedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # anything unexpected is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

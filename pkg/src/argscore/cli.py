"""Command-line entry points.

Every subcommand is deterministic under --seed: reruns on read-only
inputs produce byte-identical output files. Errors derived from
ArgscoreError exit 1 with a message on stderr; argparse handles unknown
flags and subcommands with usage text and exit code 2.
"""

import argparse
import os
import sys

from . import corpus as C
from . import ensemble as E
from . import evaluate as V
from . import model as M
from . import training as T
from .errors import ArgscoreError, ContractError


def _add_encoding_args(p):
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--no-markers", action="store_true",
                   help="skip discourse marker insertion")
    p.add_argument("--keep-gap-text", action="store_true")
    p.add_argument("--exclude-marker-labels", action="store_true")


def _add_model_args(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--window", type=int, default=8)


def _add_train_args(p):
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None,
                   help="micro-batch size")
    p.add_argument("--accum-steps", type=int, default=None)
    p.add_argument("--precision", choices=["full64", "half16"], default=None)
    p.add_argument("--checkpoint-activations", action="store_true",
                   default=None)
    p.add_argument("--checkpoint-segment", type=int, default=None)
    p.add_argument("--awp", action="store_true", default=None)
    p.add_argument("--awp-threshold", type=float, default=None)
    p.add_argument("--awp-scale", type=float, default=None)
    p.add_argument("--sift", action="store_true", default=None)
    p.add_argument("--sift-scale", type=float, default=None)
    p.add_argument("--sift-weight", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)


_TRAIN_FLAG_FIELDS = [
    ("epochs", "epochs"), ("lr", "learning_rate"),
    ("batch", "micro_batch_size"), ("accum_steps", "accumulation_steps"),
    ("precision", "precision"),
    ("checkpoint_activations", "checkpoint_activations"),
    ("checkpoint_segment", "checkpoint_segment"), ("awp", "awp_enabled"),
    ("awp_threshold", "awp_loss_threshold"), ("awp_scale", "awp_perturb_scale"),
    ("sift", "sift_enabled"), ("sift_scale", "sift_perturb_scale"),
    ("sift_weight", "sift_consistency_weight"),
    ("warmup_steps", "lr_warmup_steps"),
]


def _train_config(args) -> T.TrainConfig:
    if args.config:
        cfg = T.parse_train_config(args.config)
    else:
        cfg = T.TrainConfig()
    overrides = {"seed": args.seed}
    for flag, fieldname in _TRAIN_FLAG_FIELDS:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fieldname] = value
    from dataclasses import fields
    current = {f.name: getattr(cfg, f.name) for f in fields(T.TrainConfig)}
    current.update(overrides)
    return T.TrainConfig(**current)


def _model_config(args, vocab) -> M.ModelConfig:
    return M.ModelConfig(vocab_size=len(vocab), num_layers=args.layers,
                         hidden_size=args.hidden, num_heads=args.heads,
                         relative_window=args.window, max_len=args.max_len,
                         seed=args.seed)


def _encode_corpus(essays, vocab, args):
    return [C.encode(e, vocab, max_len=args.max_len,
                     keep_gap_text=args.keep_gap_text,
                     exclude_markers_from_labels=args.exclude_marker_labels,
                     use_markers=not args.no_markers)
            for e in essays]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_preprocess(args):
    essays = C.load_corpus(args.corpus)
    if args.vocab:
        vocab = C.Vocab.load(args.vocab)
    else:
        vocab = C.build_vocab(essays, args.vocab_size,
                              include_mask=args.include_mask,
                              keep_gap_text=args.keep_gap_text)
        if args.vocab_out:
            vocab.save(args.vocab_out)
    encoded = _encode_corpus(essays, vocab, args)
    C.write_encoded(encoded, args.out)
    truncated = sum(1 for e in encoded if e.truncated)
    print(f"encoded {len(encoded)} essays ({truncated} truncated) "
          f"with vocab of {len(vocab)}")
    return 0


def _cmd_pretrain(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    if vocab.mask_id is None:
        raise ContractError("vocabulary has no [MASK] token; rebuild it with "
                            "--include-mask")
    encoded = _encode_corpus(essays, vocab, args)
    cfg = _model_config(args, vocab)
    tc = _train_config(args)
    if args.mode == "rtd":
        gen, disc = M.make_pretrain_pair(cfg)
        hist = T.train_pretrainer(gen, disc, encoded, tc, args.mask_rate,
                                  vocab.mask_id, rtd_weight=args.rtd_weight,
                                  mode="rtd", log=print)
        M.save_checkpoint(disc, args.out)
        if args.gen_out:
            M.save_checkpoint(gen, args.gen_out)
    else:
        gen = M.Model(cfg)
        hist = T.train_pretrainer(gen, None, encoded, tc, args.mask_rate,
                                  vocab.mask_id, mode="mlm", log=print)
        M.save_checkpoint(gen, args.out)
    print(f"pretrained ({args.mode}) for {len(hist)} steps -> {args.out}")
    return 0


def _cmd_train(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    encoded = _encode_corpus(essays, vocab, args)
    tc = _train_config(args)
    if args.init:
        model = M.load_checkpoint(args.init)
        if model.config.vocab_size != len(vocab):
            raise ContractError(
                f"checkpoint vocab size {model.config.vocab_size} != "
                f"vocabulary size {len(vocab)}")
    else:
        model = M.Model(_model_config(args, vocab))
    sink = [print]
    log_fh = open(args.log_file, "w", encoding="utf-8") if args.log_file else None
    try:
        if log_fh:
            sink.append(lambda s: log_fh.write(s + "\n"))
        hist = T.train_classifier(model, encoded, tc,
                                  log=lambda s: [f(s) for f in sink])
    finally:
        if log_fh:
            log_fh.close()
    M.save_checkpoint(model, args.out)
    print(f"trained {len(hist)} steps -> {args.out}")
    return 0


def _load_members(manifest):
    return [M.load_checkpoint(p) for p in manifest.member_paths]


def _cmd_predict(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    encoded = _encode_corpus(essays, vocab, args)
    if args.manifest:
        bundle = E.load_manifest(args.manifest)
        members = _load_members(bundle)
        if args.stacked:
            if not (bundle.meta_path and bundle.bow_path):
                raise ContractError("manifest lacks a meta-model or BoW model; "
                                    "run 'ensemble stack' first")
            meta = E.load_meta(bundle.meta_path)
            bow = E.load_bow(bundle.bow_path)
            member_records = [V.predict_corpus(m, encoded) for m in members]
            bow_rows = _bow_prediction_rows(essays, encoded, vocab, bow)
            records = E.stack_predict(meta, member_records, bow_rows)
        else:
            records = E.bag_predict(members, encoded,
                                    average_logits=args.average_logits)
    else:
        if not args.model:
            raise ContractError("predict needs --model or --manifest")
        model = M.load_checkpoint(args.model)
        records = V.predict_corpus(model, encoded,
                                   average_logits=args.average_logits)
    V.write_predictions(records, args.out)
    print(f"wrote {len(records)} element predictions -> {args.out}")
    return 0


def _bow_prediction_rows(essays, encoded, vocab, bow):
    """BoW-model probability rows aligned with the encoded element order."""
    by_id = {e.essay_id: e for e in essays}
    rows = []
    for enc in encoded:
        feats = E.bow_features(by_id[enc.essay_id], vocab)
        rows.extend(E.gbm_predict(bow, feats))
    return rows


def _cmd_evaluate(args):
    records = V.read_predictions(args.pred)
    gold = C.load_corpus(args.gold)
    scored = V.attach_truth(records, gold)
    if not scored:
        raise ContractError("no rated elements to score")
    value = V.log_loss(scored)
    print(f"log_loss={value:.4f}")
    print(f"records={len(scored)}")
    return 0


def _cmd_heatmap(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    model = M.load_checkpoint(args.model)
    by_id = {e.essay_id: e for e in essays}
    if args.essay_id not in by_id:
        raise ContractError(f"essay {args.essay_id!r} not found in corpus")
    enc = C.encode(by_id[args.essay_id], vocab, max_len=args.max_len,
                   keep_gap_text=args.keep_gap_text,
                   exclude_markers_from_labels=args.exclude_marker_labels,
                   use_markers=not args.no_markers)
    V.export_heatmap(model, enc, vocab, layer=args.layer, path=args.out,
                     aggregation=args.aggregation)
    print(f"wrote heatmap -> {args.out} (+ .csv sidecar)")
    return 0


def _cmd_memest(args):
    est = T.estimate_memory(args.params, args.precision, args.optimizer)
    for key in ("weights", "gradients", "moments", "total"):
        print(f"{key}={est[key] / 10**9:g} GB")
    return 0


def _cmd_fold_train(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    encoded = _encode_corpus(essays, vocab, args)
    by_id = {e.essay_id: e for e in encoded}
    assignment = E.assign_folds(essays, args.folds, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    bundle = E.fold_train(essays, by_id, assignment,
                          _model_config(args, vocab), _train_config(args),
                          args.out_dir, log=print if args.verbose else None)
    manifest = os.path.join(args.out_dir, "manifest.json")
    E.save_manifest(bundle, manifest)
    print(f"trained {len(bundle.member_paths)} members -> {manifest}")
    return 0


def _cmd_bag(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    encoded = _encode_corpus(essays, vocab, args)
    bundle = E.load_manifest(args.manifest)
    members = _load_members(bundle)
    records = E.bag_predict(members, encoded,
                            average_logits=args.average_logits)
    V.write_predictions(records, args.out)
    print(f"bagged {len(members)} members over {len(records)} elements "
          f"-> {args.out}")
    return 0


def _cmd_gbm(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    feats, labels = [], []
    for essay in essays:
        rows = E.bow_features(essay, vocab)
        for el, row in zip(essay.elements, rows):
            if el.rating is not None:
                feats.append(row)
                labels.append(el.rating)
    cfg = E.GbmConfig(num_rounds=args.rounds, learning_rate=args.lr,
                      max_depth=args.depth)
    model = E.gbm_train(feats, labels, cfg)
    E.save_bow(model, args.out)
    if args.manifest:
        bundle = E.load_manifest(args.manifest)
        bundle.bow_path = args.out
        E.save_manifest(bundle, args.manifest)
    print(f"boosted {len(feats)} elements, final train loss "
          f"{model.train_losses[-1]:.4f} -> {args.out}")
    return 0


def _cmd_stack(args):
    essays = C.load_corpus(args.corpus)
    vocab = C.Vocab.load(args.vocab)
    encoded = _encode_corpus(essays, vocab, args)
    bundle = E.load_manifest(args.manifest)
    if not bundle.bow_path:
        raise ContractError("manifest lacks a BoW model; run 'ensemble gbm' "
                            "with --manifest first")
    members = _load_members(bundle)
    bow = E.load_bow(bundle.bow_path)
    member_records = [V.predict_corpus(m, encoded) for m in members]
    bow_rows = _bow_prediction_rows(essays, encoded, vocab, bow)
    labels = []
    for rec in member_records[0]:
        if rec.y is None:
            raise ContractError(f"element {rec.element_id} is unrated; the "
                                f"stacking corpus must be fully rated")
        labels.append(rec.y.index(1))
    meta = E.stack_train(member_records, bow_rows, labels,
                         num_members=len(members), epochs=args.epochs,
                         lr=args.lr, l1=args.l1, seed=args.seed,
                         assignment=bundle.assignment)
    E.save_meta(meta, args.out)
    bundle.meta_path = args.out
    E.save_manifest(bundle, args.manifest)
    print(f"stacked {len(members)}+1 blocks on {len(labels)} elements "
          f"-> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="argscore",
        description="Discourse-element effectiveness scoring pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="encode a corpus to token ids")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="existing vocabulary file")
    p.add_argument("--vocab-out", help="where to save a freshly built vocabulary")
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--include-mask", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_encoding_args(p)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked-LM or replaced-token pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--mode", choices=["mlm", "rtd"], default="rtd")
    p.add_argument("--out", required=True)
    p.add_argument("--gen-out", help="also save the generator (rtd mode)")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--rtd-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_encoding_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a token classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--log-file")
    p.add_argument("--seed", type=int, default=0)
    _add_encoding_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="per-element probabilities to CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--stacked", action="store_true",
                   help="use the manifest's stacking meta-model")
    p.add_argument("--average-logits", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_encoding_args(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="log loss of predictions vs gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("heatmap", help="attention salience HTML export")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--essay-id", required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--aggregation", choices=["column", "row"], default="column")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_encoding_args(p)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("memest", help="optimizer memory estimate")
    p.add_argument("--params", type=int, required=True)
    p.add_argument("--precision", choices=["fp32", "native64"], default="fp32")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.set_defaults(func=_cmd_memest)

    p = sub.add_parser("ensemble", help="fold training, bagging, boosting, stacking")
    esub = p.add_subparsers(dest="ensemble_command", required=True)

    q = esub.add_parser("fold-train", help="train one member per fold")
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", required=True)
    q.add_argument("--folds", type=int, default=5)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--verbose", action="store_true")
    _add_encoding_args(q)
    _add_model_args(q)
    _add_train_args(q)
    q.set_defaults(func=_cmd_fold_train)

    q = esub.add_parser("bag", help="average member predictions")
    q.add_argument("--manifest", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--average-logits", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    _add_encoding_args(q)
    q.set_defaults(func=_cmd_bag)

    q = esub.add_parser("gbm", help="train the bag-of-words boosted trees")
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--manifest", help="register the model in this manifest")
    q.add_argument("--rounds", type=int, default=100)
    q.add_argument("--depth", type=int, default=3)
    q.add_argument("--lr", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=_cmd_gbm)

    q = esub.add_parser("stack", help="train the stacking meta-model")
    q.add_argument("--manifest", required=True)
    q.add_argument("--corpus", required=True,
                   help="holdout corpus disjoint from the fold map")
    q.add_argument("--vocab", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--epochs", type=int, default=1500)
    q.add_argument("--lr", type=float, default=0.05)
    q.add_argument("--l1", type=float, default=0.02)
    q.add_argument("--seed", type=int, default=0)
    _add_encoding_args(q)
    q.set_defaults(func=_cmd_stack)

    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ArgscoreError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

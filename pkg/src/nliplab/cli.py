"""Command-line entry point.

Subcommands: gen-data, train, diagnose-noise, caption, evaluate, report.
Human-readable progress goes to stderr; machine output goes to files
(stdout stays parseable). Exit codes: 0 success, 1 usage error, 2
data/config error, 3 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import captioner, concepts, data_synth, encoders, evaluation, pipeline
from .alignment import itc_per_sample, similarity_block
from .config import KEY_TO_ATTR, RunConfig, load_config, render_config
from .diffcore import load_checkpoint
from .errors import (ContractError, DataError, NumericalError,
                     UndefinedMetricError, UsageError)
from .noise_model import LossLedger, refresh_epoch, write_diagnostics

SEED_ENV_VAR = "NLIP_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _typed(value: str, target: type, key: str):
    from .config import _parse_value
    return _parse_value(key, value, target)


def _add_config_flags(parser: _Parser) -> None:
    """One flag per config key; unset flags leave the file value alone.

    Keys whose option string a command already defines (e.g. --corpus on
    the read-only commands) keep the explicit definition.
    """
    from dataclasses import fields
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    for key, attr in sorted(KEY_TO_ATTR.items()):
        if f"--{key}" in parser._option_string_actions:
            continue
        parser.add_argument(f"--{key}", dest=attr, default=None, metavar="V",
                            help=f"override config key {key}")
    parser._config_types = types  # type: ignore[attr-defined]


def _merged_config(args, parser: _Parser) -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get(SEED_ENV_VAR)
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if env_seed is not None:
        cfg.seed = _typed(env_seed, int, "seed")
    types = parser._config_types  # type: ignore[attr-defined]
    for attr in set(KEY_TO_ATTR.values()):
        raw = getattr(args, attr, None)
        if raw is not None:
            setattr(cfg, attr, _typed(raw, types[attr], attr))
    return cfg.validate()


def _restore(args, parser) -> tuple[RunConfig, "encoders.ModelConfig", object, data_synth.Corpus]:
    """Config + checkpoint + corpus shared by the read-only commands."""
    cfg = _merged_config(args, parser)
    if getattr(args, "corpus", None):
        corpus = data_synth.load_corpus(args.corpus)
        world = data_synth.generate_world(cfg.num_concepts, cfg.d_img, cfg.seed)
        vocab = corpus.vocab if corpus.vocab else world.token_vocab
    else:
        _, corpus, _, _ = pipeline.build_corpora(cfg)
        vocab = corpus.vocab
    mcfg = pipeline.model_config(cfg, vocab)
    store = load_checkpoint(args.checkpoint)
    return cfg, mcfg, store, corpus


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else \
        int(os.environ.get(SEED_ENV_VAR, "1"))
    world = data_synth.generate_world(args.num_concepts, args.d_img, seed)
    corpus = data_synth.generate_corpus(
        world, args.n, args.concepts_per_image, args.patch_count,
        args.noise_std, start_id=0)
    spec = data_synth.NoiseSpec(mismatch_rate=args.mismatch,
                                incomplete_rate=args.incomplete,
                                drop_fraction=args.drop_fraction, seed=seed)
    corpus = data_synth.inject_noise(corpus, spec)
    data_synth.save_corpus(corpus, args.out)
    flags = [r.noise_flag for r in corpus.records]
    _log(f"wrote {len(corpus)} records to {args.out} "
         f"({flags.count(data_synth.MISMATCHED)} mismatched, "
         f"{flags.count(data_synth.INCOMPLETE)} incomplete)")
    return 0


def _cmd_train(args, parser) -> int:
    cfg = _merged_config(args, parser)
    pipeline.run_all(cfg, args.out)
    _log(f"run complete; manifest at {os.path.join(args.out, 'manifest.json')}")
    return 0


def _diagnose_ledger(cfg, mcfg, store, corpus) -> LossLedger:
    """Per-sample contrastive losses, unmasked, batched in pair-id order."""
    records = sorted(data_synth.training_view(corpus), key=lambda r: r.pair_id)
    ledger = LossLedger()
    ledger.start_epoch(0)
    tau = float(store.params["tau"])
    for lo in range(0, len(records), cfg.batch_size):
        part = records[lo:lo + cfg.batch_size]
        img, txt = pipeline.embed_records(part, mcfg, store)
        block = similarity_block(img, txt, tau,
                                 tuple(r.pair_id for r in part))
        for rec, value in zip(part, itc_per_sample(block)):
            ledger.record(rec.pair_id, float(value))
    return ledger


def _cmd_diagnose(args, parser) -> int:
    cfg, mcfg, store, corpus = _restore(args, parser)
    ledger = _diagnose_ledger(cfg, mcfg, store, corpus)
    estimates = refresh_epoch(ledger, cfg.lam, cfg.gmm_max_iters, cfg.gmm_tol)
    flags = {r.pair_id: r.noise_flag for r in corpus.records}
    write_diagnostics(args.out, ledger, estimates, flags)
    try:
        auc = evaluation.noise_auc(
            [estimates.epsilon[pid] for pid, _ in ledger.items()],
            [flags[pid] for pid, _ in ledger.items()])
        _log(f"noise_auc = {auc:.6f}")
    except UndefinedMetricError:
        _log("noise_auc undefined (single noise class)")
    _log(f"wrote per-pair diagnostics to {args.out}")
    return 0


def _cmd_caption(args, parser) -> int:
    cfg, mcfg, store, corpus = _restore(args, parser)
    vocab = concepts.build_vocabulary(
        (r.caption for r in corpus.records), cfg.min_frequency)
    cache: dict[int, tuple[str, ...]] = {}
    if len(vocab) > 0:
        k = min(cfg.top_k, len(vocab))
        query = concepts.ConceptQuery(k=k)
        for rec in corpus.records:
            picked = concepts.retrieve_concepts(rec.patch_grid, vocab, query,
                                                mcfg, store)
            cache[rec.pair_id] = tuple(name for name, _ in picked)
    captions = {}
    for rec in corpus.records:
        captions[rec.pair_id] = captioner.generate_caption(
            rec.patch_grid, cache.get(rec.pair_id, ()), mcfg, store,
            strategy="greedy", max_len=cfg.max_caption_len,
            source_pair_id=rec.pair_id)
    captioner.save_captions(captions, args.out)
    _log(f"wrote {len(captions)} synthetic captions to {args.out}")
    return 0


def _cmd_evaluate(args, parser) -> int:
    cfg, mcfg, store, corpus = _restore(args, parser)
    records = data_synth.training_view(corpus)
    img, txt = pipeline.embed_records(records, mcfg, store)
    recall = evaluation.retrieval_recall(img, txt, [1, 5, 10])
    names = data_synth.concept_tokens(corpus.vocab)
    truth_names = [set(names[c] for c in r.true_concepts)
                   for r in corpus.records]
    caption_recall = evaluation.concept_recall(
        [r.caption for r in corpus.records], truth_names)
    hits = 0
    for rec in corpus.records:
        pred = evaluation.zero_shot_classify(rec.patch_grid, names, mcfg, store)
        hits += int(pred in rec.true_concepts)
    metrics = {
        "retrieval_i2t_R1": recall["image_to_text"][1],
        "retrieval_i2t_R5": recall["image_to_text"][5],
        "retrieval_i2t_R10": recall["image_to_text"][10],
        "retrieval_t2i_R1": recall["text_to_image"][1],
        "retrieval_t2i_R5": recall["text_to_image"][5],
        "retrieval_t2i_R10": recall["text_to_image"][10],
        "concept_recall": caption_recall.recall,
        "concept_recall_skipped": caption_recall.skipped,
        "zero_shot_hit_rate": hits / len(corpus.records),
    }
    if args.json:
        payload = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    else:
        lines = ["metric,value"]
        for key in sorted(metrics):
            value = metrics[key]
            lines.append(f"{key},{value:.4f}" if isinstance(value, float)
                         else f"{key},{value}")
        payload = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
    _log(f"wrote metrics to {args.out}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh if line.strip()]
        if len(lines) < 2:
            raise DataError(f"{path}: no metric rows")
        header = lines[0].split(",")
        if header != list(pipeline.METRIC_COLUMNS):
            raise DataError(f"{path}: unexpected metrics schema")
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        rows.append((label, lines[-1]))
    out_lines = ["run," + ",".join(pipeline.METRIC_COLUMNS)]
    for label, last in rows:
        out_lines.append(f"{label},{last}")
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out_lines) + "\n")
    _log(f"wrote comparison table over {len(rows)} runs to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nlip",
                     description="noise-robust language-image training lab")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    gen = sub.add_parser("gen-data", help="write a synthetic noisy corpus")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--mismatch", type=float, default=0.0)
    gen.add_argument("--incomplete", type=float, default=0.0)
    gen.add_argument("--drop-fraction", type=float, default=0.5)
    gen.add_argument("--num-concepts", type=int, default=8)
    gen.add_argument("--concepts-per-image", type=int, default=3)
    gen.add_argument("--d-img", type=int, default=16)
    gen.add_argument("--patch-count", type=int, default=32)
    gen.add_argument("--noise-std", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="run the three-stage pipeline")
    train.add_argument("--config", default=None)
    train.add_argument("--out", required=True)
    _add_config_flags(train)

    for name in ("diagnose-noise", "caption", "evaluate"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None)
        cmd.add_argument("--checkpoint", required=True)
        cmd.add_argument("--corpus", default=None)
        cmd.add_argument("--out", required=True)
        if name == "evaluate":
            cmd.add_argument("--json", action="store_true")
        _add_config_flags(cmd)

    report = sub.add_parser("report", help="merge metric CSVs into one table")
    report.add_argument("inputs", nargs="+")
    report.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args, _subparser(parser, "train"))
        if args.command == "diagnose-noise":
            return _cmd_diagnose(args, _subparser(parser, "diagnose-noise"))
        if args.command == "caption":
            return _cmd_caption(args, _subparser(parser, "caption"))
        if args.command == "evaluate":
            return _cmd_evaluate(args, _subparser(parser, "evaluate"))
        if args.command == "report":
            return _cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


def _subparser(parser: _Parser, name: str) -> _Parser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise UsageError(f"no such command {name!r}")


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: clean, make-data, pretrain, finetune, eval, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The MARKUP_PRETRAIN_THREADS environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline as P
from .features import CharTokenizer
from .dom import DEFAULT_KEEP_TAGS, EmptyDocument, MalformedRecord
from .metrics import EvalReport, aggregate, swde_splits, BadSiteCount
from .model import CheckpointMismatch, MarkupModel, ModelConfig
from .objectives import SamplerConfig
from .tasks import IERecord, QARecord, evaluate_ie, evaluate_qa, prepare_ie, prepare_qa
from .train import (
    FinetuneConfig,
    NonFiniteGradient,
    NonFiniteLoss,
    OptimConfig,
    TrainConfig,
    finetune_qa,
    finetune_tokcls,
    train,
)

log = logging.getLogger("markup_pretrain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "MARKUP_PRETRAIN_THREADS"

# values from the large-scale setup, echoed into manifests for reference
FULL_SCALE = {
    "pretrain": {"batch_size": 256, "steps": 300_000, "lr": 5e-5, "d_h": 768, "n_layers": 12, "n_heads": 12, "max_len": 512},
    "finetune_qa": {"epochs": 5, "lr": 1e-5, "batch_size": 64, "warmup_ratio": 0.1, "max_len": 384},
    "finetune_ie": {"epochs": 10, "lr": 2e-5, "batch_size": 64, "warmup_ratio": 0.1, "max_len": 384},
}


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="markup-pretrain", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("clean", help="language-filter and tag-clean a directory of HTML files")
    c.add_argument("in_dir", type=Path, help="directory of .html files (searched recursively)")
    c.add_argument("out_dir", type=Path, help="output directory for corpus.jsonl")
    c.add_argument("--keep-tags", type=Path, help="file of whitespace-separated tag names to keep")
    c.add_argument("--lang-scores", type=Path, help="lines of '<relative path><TAB><score>'; pages scoring <= threshold are dropped")
    c.add_argument("--threshold", type=float, default=0.6, help="language score threshold (strict >) [0.6]")

    m = sub.add_parser("make-data", help="build vocabularies and pre-training instances")
    m.add_argument("corpus", type=Path, help="directory written by 'clean'")
    m.add_argument("out", type=Path, help="output directory")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--mlm-rate", type=float, default=0.15, help="token selection probability [0.15]")
    m.add_argument("--tpm-rate", type=float, default=0.15, help="title replacement probability [0.15]")
    m.add_argument("--max-pairs", type=int, default=1000, help="node pairs per instance [1000]")
    m.add_argument("--non-others", type=float, default=0.8, help="max share of non-Others pairs [0.8]")
    m.add_argument("--max-len", type=int, default=128, help="sequence length [128]")
    m.add_argument("--tokenizer", choices=("word", "char"), default="word")
    m.add_argument("--max-text-vocab", type=int, default=30000)
    m.add_argument("--max-skip-frac", type=float, default=0.5, help="fail when more pages than this are skipped")

    t = sub.add_parser("pretrain", help="pre-train on instances from 'make-data'")
    t.add_argument("data", type=Path)
    t.add_argument("out", type=Path)
    t.add_argument("--objectives", default="mmlm,nrp,tpm", help="comma list of mmlm,nrp,tpm")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=5e-5)
    t.add_argument("--batch", type=int, default=8, help="batch size (large-scale setup used 256)")
    t.add_argument("--warmup-ratio", type=float, default=0.06)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--d-hidden", type=int, default=64)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=2)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--no-xpath", action="store_true", help="drop the XPath embedding")
    t.add_argument("--nrp-pairing", choices=("concat", "bilinear"), default="concat")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--paper-config", action="store_true", help="768 hidden, 12 layers, 12 heads (slow)")

    f = sub.add_parser("finetune", help="fine-tune for QA or attribute extraction")
    f.add_argument("--task", choices=("qa", "ie"), required=True)
    f.add_argument("data", type=Path, help="JSONL of task records")
    f.add_argument("checkpoint", type=Path)
    f.add_argument("out", type=Path)
    _finetune_flags(f)

    e = sub.add_parser("eval", help="evaluate QA (EM/F1) or run the seed-site extraction protocol")
    e.add_argument("--task", choices=("qa", "ie"), required=True)
    e.add_argument("data", type=Path, help="JSONL of task records")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--out", type=Path, help="directory for report.json (+ table.csv / predictions.jsonl)")
    e.add_argument("--k", type=_csv_ints, default=[1, 2, 3, 4, 5], help="ie: seed-site counts [1,2,3,4,5]")
    e.add_argument("--rotations", type=int, default=10, help="ie: seed-site rotations per vertical [10]")
    _finetune_flags(e)

    s = sub.add_parser("synth", help="write a bundled synthetic corpus")
    s.add_argument("kind", choices=("pretrain", "qa", "ie"))
    s.add_argument("out", type=Path)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    return ap


def _finetune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="default: 5 (qa) / 10 (ie)")
    p.add_argument("--lr", type=float, help="default: 1e-5 (qa) / 2e-5 (ie)")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-encoder", action="store_true")


def _finetune_config(args) -> FinetuneConfig:
    base = FinetuneConfig.qa_defaults() if args.task == "qa" else FinetuneConfig.tokcls_defaults()
    return FinetuneConfig(
        epochs=args.epochs if args.epochs is not None else base.epochs,
        lr=args.lr if args.lr is not None else base.lr,
        warmup_ratio=args.warmup_ratio,
        batch_size=args.batch,
        max_seq_len=args.max_len,
        seed=args.seed,
        freeze_encoder=args.freeze_encoder,
    )


def _load_checkpoint(path: Path) -> tuple[MarkupModel, object, object]:
    if not (path / "params.bin").exists():
        raise DataError(f"{path} is not a checkpoint directory (params.bin missing)")
    try:
        model = MarkupModel.load(path)
        tag_vocab, text_vocab = P.load_vocabs(path)
    except CheckpointMismatch as exc:
        raise DataError(f"checkpoint {path} does not match its config: {exc}") from exc
    if model.config.text_vocab != len(text_vocab):
        raise DataError(f"checkpoint vocabulary size {model.config.text_vocab} != {len(text_vocab)} tokens on disk")
    return model, tag_vocab, text_vocab


def _tokenizer_of(path: Path, text_vocab):
    kind = "word"
    mf = path / P.MANIFEST_FILE
    if mf.exists():
        kind = json.loads(mf.read_text()).get("extra", {}).get("tokenizer", "word")
    return P.make_tokenizer(kind, text_vocab)


def _copy_vocabs(src: Path, dst: Path) -> None:
    for name in (P.TAG_VOCAB_FILE, P.TEXT_VOCAB_FILE):
        shutil.copyfile(src / name, dst / name)


# ---------------------------------------------------------------- commands


def cmd_clean(args) -> int:
    if not args.in_dir.is_dir():
        raise DataError(f"input directory {args.in_dir} not found")
    keep = DEFAULT_KEEP_TAGS
    if args.keep_tags:
        keep = frozenset(args.keep_tags.read_text().split())
    scores = P.read_lang_scores(args.lang_scores) if args.lang_scores else None
    records, counts = P.clean_corpus(args.in_dir, keep, scores, args.threshold)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    P.write_jsonl(args.out_dir / P.CORPUS_FILE, records)
    inputs = [args.in_dir] + ([args.lang_scores] if args.lang_scores else [])
    man = P.new_manifest("clean", {"keep_tags": sorted(keep), "threshold": args.threshold}, None, inputs)
    man.outputs = [P.CORPUS_FILE]
    man.extra = {"counts": counts}
    man.write(args.out_dir)
    print(f"kept {counts['kept']} dropped {counts['seen'] - counts['kept']} "
          f"(language {counts['dropped_language']}, empty {counts['dropped_empty']})")
    return EXIT_OK


def cmd_make_data(args) -> int:
    corpus_file = args.corpus / P.CORPUS_FILE
    if not corpus_file.exists():
        raise DataError(f"{corpus_file} not found; run 'clean' first")
    pages = P.load_corpus(args.corpus)
    if not pages:
        raise DataError("corpus is empty")
    cfg = SamplerConfig(
        mlm_rate=args.mlm_rate,
        tpm_rate=args.tpm_rate,
        max_pairs=args.max_pairs,
        max_non_others_ratio=args.non_others,
        rng_seed=args.seed,
        max_len=args.max_len,
    )
    tag_vocab, text_vocab = P.build_vocabs([t for _, t in pages], args.max_text_vocab)
    tokenizer = P.make_tokenizer(args.tokenizer, text_vocab)
    instances, stats = P.make_instances(pages, cfg, tag_vocab, tokenizer)
    args.out.mkdir(parents=True, exist_ok=True)
    P.save_vocabs(args.out, tag_vocab, text_vocab)
    P.write_jsonl(args.out / P.INSTANCES_FILE, (i.to_json() for i in instances))
    man = P.new_manifest("make-data", asdict(cfg), args.seed, [corpus_file])
    man.outputs = [P.INSTANCES_FILE, P.TAG_VOCAB_FILE, P.TEXT_VOCAB_FILE]
    man.extra = {"stats": stats, "tokenizer": args.tokenizer}
    man.write(args.out)
    print(f"instances {stats['instances']} skipped {stats['skipped']} (tpm skipped {stats['tpm_skipped']})")
    if stats["skipped"] > args.max_skip_frac * stats["pages"]:
        print(f"error: {stats['skipped']} of {stats['pages']} pages skipped", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_pretrain(args) -> int:
    if not (args.data / P.INSTANCES_FILE).exists():
        raise DataError(f"{args.data / P.INSTANCES_FILE} not found; run 'make-data' first")
    objectives = {o.strip() for o in args.objectives.split(",") if o.strip()}
    unknown = objectives - {"mmlm", "nrp", "tpm"}
    if unknown:
        print(f"error: unknown objectives {sorted(unknown)}", file=sys.stderr)
        return EXIT_USAGE
    data = P.load_instances(args.data)
    if not data:
        raise DataError("no instances")
    tag_vocab, text_vocab = P.load_vocabs(args.data)
    seq_len = data[0].inputs.seq_len
    if args.paper_config:
        mcfg = ModelConfig.full_scale(len(text_vocab))
    else:
        mcfg = ModelConfig(text_vocab=len(text_vocab), d_h=args.d_hidden, n_layers=args.layers, n_heads=args.heads)
    mcfg.max_positions = max(mcfg.max_positions, seq_len)
    mcfg.dropout = args.dropout
    mcfg.use_xpath = not args.no_xpath
    mcfg.nrp_pairing = args.nrp_pairing
    mcfg.tag_vocab = max(mcfg.tag_vocab, len(tag_vocab))
    mcfg.mmlm, mcfg.nrp, mcfg.tpm = ("mmlm" in objectives), ("nrp" in objectives), ("tpm" in objectives)
    model = MarkupModel(mcfg, seed=args.seed)
    optim = OptimConfig(lr_peak=args.lr, warmup_ratio=args.warmup_ratio, total_steps=args.steps, batch_size=args.batch)
    args.out.mkdir(parents=True, exist_ok=True)
    tcfg = TrainConfig(
        optim=optim,
        steps=args.steps,
        seed=args.seed,
        log_path=str(args.out / "metrics.jsonl"),
        checkpoint_dir=str(args.out),
        checkpoint_every=args.checkpoint_every,
    )
    man = P.new_manifest(
        "pretrain",
        {"model": asdict(mcfg), "optim": asdict(optim), "objectives": sorted(objectives)},
        args.seed,
        [args.data / P.INSTANCES_FILE],
    )
    history = train(data, model, tcfg)
    _copy_vocabs(args.data, args.out)
    data_manifest = args.data / P.MANIFEST_FILE
    tokenizer = json.loads(data_manifest.read_text()).get("extra", {}).get("tokenizer", "word") if data_manifest.exists() else "word"
    man.outputs = ["params.bin", "config.json", "metrics.jsonl"]
    man.extra = {"full_scale": FULL_SCALE["pretrain"], "tokenizer": tokenizer, "final": history[-1] if history else {}}
    man.write(args.out)
    last = history[-1]
    print(f"step {last['step']} loss {last['loss_total']:.4f} "
          f"(mmlm {last['loss_mmlm']:.4f} nrp {last['loss_nrp']:.4f} tpm {last['loss_tpm']:.4f})")
    return EXIT_OK


def _read_records(path: Path, cls):
    if not path.exists():
        raise DataError(f"{path} not found")
    try:
        return [cls.from_dict(d) for d in P.read_jsonl(path)]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed record ({exc})") from exc


def _ie_attrs(records) -> list[str]:
    return sorted({a for r in records for a in r.attributes})


def cmd_finetune(args) -> int:
    model, tag_vocab, text_vocab = _load_checkpoint(args.checkpoint)
    tokenizer = _tokenizer_of(args.checkpoint, text_vocab)
    fcfg = _finetune_config(args)
    model.config.max_positions = max(model.config.max_positions, args.max_len)
    _check_positions(model, args.max_len)
    args.out.mkdir(parents=True, exist_ok=True)
    fcfg.log_path = str(args.out / "metrics.jsonl")
    if args.task == "qa":
        records = _read_records(args.data, QARecord)
        feats = [f for r in records for f in prepare_qa(r, tokenizer, tag_vocab, args.max_len)[1]]
        history = finetune_qa(feats, model, fcfg)
        extra = {}
    else:
        records = _read_records(args.data, IERecord)
        attrs = _ie_attrs(records)
        feats = [f for r in records for f in prepare_ie(r, attrs, tokenizer, tag_vocab, args.max_len)[1]]
        history = finetune_tokcls(feats, model, fcfg, len(attrs))
        extra = {"attributes": attrs}
        (args.out / "attributes.json").write_text(json.dumps(attrs) + "\n")
    model.save(args.out)
    _copy_vocabs(args.checkpoint, args.out)
    man = P.new_manifest(f"finetune-{args.task}", asdict(fcfg), args.seed, [args.data, args.checkpoint / "params.bin"])
    man.extra = {
        "full_scale": FULL_SCALE["finetune_qa" if args.task == "qa" else "finetune_ie"],
        "tokenizer": "char" if isinstance(tokenizer, CharTokenizer) else "word",
        **extra,
    }
    man.write(args.out)
    print(f"fine-tuned {len(history)} steps, final loss {history[-1]['loss_total']:.4f}")
    return EXIT_OK


def _check_positions(model: MarkupModel, max_len: int) -> None:
    have = model.params["emb.position"].shape[0]
    if max_len > have:
        raise DataError(f"--max-len {max_len} exceeds the checkpoint's {have} positions")


def cmd_eval(args) -> int:
    model, tag_vocab, text_vocab = _load_checkpoint(args.checkpoint)
    tokenizer = _tokenizer_of(args.checkpoint, text_vocab)
    max_len = min(args.max_len, model.params["emb.position"].shape[0])
    if args.task == "qa":
        if "qa.weight" not in model.params:
            raise DataError("checkpoint has no QA head; run 'finetune --task qa' first")
        records = _read_records(args.data, QARecord)
        pages = [prepare_qa(r, tokenizer, tag_vocab, max_len)[0] for r in records]
        report, rows = evaluate_qa(model, pages, tokenizer)
        print(f"EM {100 * report.em:.2f} F1 {100 * report.f1:.2f} over {report.n_examples} questions")
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            P.write_jsonl(args.out / "predictions.jsonl", rows)
            (args.out / "report.json").write_text(report.to_json() + "\n")
        return EXIT_OK
    report = _ie_grid(args, tag_vocab, tokenizer, max_len)
    print(report.to_csv(), end="")
    print(f"mean page-level F1 {100 * report.f1:.2f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(report.to_json() + "\n")
        (args.out / "table.csv").write_text(report.to_csv())
    return EXIT_OK


def _ie_grid(args, tag_vocab, tokenizer, max_len) -> EvalReport:
    """Fine-tune a fresh head per (vertical, k, rotation) and score unseen sites."""
    records = _read_records(args.data, IERecord)
    by_vertical: dict[str, list[IERecord]] = {}
    for r in records:
        by_vertical.setdefault(r.vertical, []).append(r)
    fcfg = _finetune_config(args)
    runs = []
    for vertical, recs in sorted(by_vertical.items()):
        sites = sorted({r.site for r in recs})
        attrs = _ie_attrs(recs)
        prepared = {r.id: prepare_ie(r, attrs, tokenizer, tag_vocab, max_len) for r in recs}
        for k in args.k:
            try:
                splits = swde_splits(sites, k, vertical)
            except BadSiteCount as exc:
                raise DataError(f"vertical {vertical}: {exc}") from exc
            for split in splits[: args.rotations]:
                train_sites = set(split.train_sites)
                model = MarkupModel.load(args.checkpoint)
                feats = [f for r in recs if r.site in train_sites for f in prepared[r.id][1]]
                finetune_tokcls(feats, model, fcfg, len(attrs))
                test_pages = [prepared[r.id][0] for r in recs if r.site not in train_sites]
                f1 = evaluate_ie(model, test_pages, attrs)
                log.info("%s k=%d rotation=%d page-F1 %.4f", vertical, k, split.rotation, f1)
                runs.append(EvalReport(f1=f1, per_vertical={vertical: {k: f1}}, n_examples=len(test_pages)))
    return aggregate(runs)


def cmd_synth(args) -> int:
    from . import synthetic

    args.out.mkdir(parents=True, exist_ok=True)
    if args.kind == "pretrain":
        for pid, html in synthetic.pretrain_corpus(args.n, seed=args.seed):
            (args.out / f"{pid}.html").write_text(html)
        rows = [f"{pid}.html\t{0.9 if i % 5 else 0.3}" for i, (pid, _) in enumerate(synthetic.pretrain_corpus(args.n, seed=args.seed))]
        (args.out.parent / f"{args.out.name}.scores.tsv").write_text("\n".join(rows) + "\n")
    elif args.kind == "qa":
        train_rows, test_rows = synthetic.structure_qa_corpus(args.n, max(1, args.n // 4), seed=args.seed)
        P.write_jsonl(args.out / "train.jsonl", train_rows)
        P.write_jsonl(args.out / "test.jsonl", test_rows)
    else:
        P.write_jsonl(args.out / "records.jsonl", synthetic.swde_like_corpus(pages_per_site=max(1, args.n // 20), seed=args.seed))
    return EXIT_OK


COMMANDS = {
    "clean": cmd_clean,
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (DataError, MalformedRecord, EmptyDocument, CheckpointMismatch, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

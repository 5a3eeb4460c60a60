"""Corpus-level stages shared by the command line and the tests."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .dom import DomTree, EmptyDocument, MalformedRecord, clean_tree, language_score_filter, parse_html, tree_from_dict
from .features import CharTokenizer, TagVocab, TextVocab, WordTokenizer, build_tag_vocab
from .objectives import NoTitle, PretrainInstance, SamplerConfig, make_pretrain_instance, page_rng

CORPUS_FILE = "corpus.jsonl"
INSTANCES_FILE = "instances.jsonl"
TAG_VOCAB_FILE = "tag_vocab.json"
TEXT_VOCAB_FILE = "text_vocab.json"
MANIFEST_FILE = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    input_hash: str = ""
    started: str = ""
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, directory) -> None:
        self.finished = _now()
        path = Path(directory) / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def new_manifest(command: str, config: dict, seed: int | None, inputs: Sequence[Path]) -> RunManifest:
    return RunManifest(command, config, seed, [str(p) for p in inputs], input_hash=content_hash(inputs), started=_now())


def content_hash(paths: Iterable[Path]) -> str:
    """sha256 over the sorted files (recursively for directories), names included."""
    h = hashlib.sha256()
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST_FILE))
        elif p.exists():
            files.append(p)
    for f in sorted(files):
        h.update(f.name.encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- cleaning


def read_lang_scores(path) -> dict[str, float]:
    scores: dict[str, float] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t") if "\t" in line else line.split()
            if len(parts) < 2 or not parts[1].strip():
                raise MalformedRecord(f"{path}:{lineno}: missing language score")
            try:
                scores[parts[0].strip()] = float(parts[1])
            except ValueError:
                raise MalformedRecord(f"{path}:{lineno}: bad score {parts[1]!r}") from None
    return scores


def clean_corpus(
    in_dir, keep_tags, lang_scores: dict[str, float] | None = None, threshold: float = 0.6
) -> tuple[list[dict], dict]:
    """Filter by language score, parse, clean; returns records and counts."""
    in_dir = Path(in_dir)
    files = sorted(p for p in in_dir.rglob("*") if p.suffix.lower() in (".html", ".htm") and p.is_file())
    counts = {"seen": len(files), "kept": 0, "dropped_language": 0, "dropped_empty": 0}
    rels = [p.relative_to(in_dir).as_posix() for p in files]
    if lang_scores is not None:
        rows = ((rel, lang_scores.get(rel, 0.0)) for rel in rels)
        passing = set(language_score_filter(rows, threshold))
    else:
        passing = set(rels)
    records = []
    for path, rel in zip(files, rels):
        if rel not in passing:
            counts["dropped_language"] += 1
            continue
        try:
            tree = clean_tree(parse_html(path.read_bytes()), keep_tags)
        except EmptyDocument:
            counts["dropped_empty"] += 1
            continue
        records.append({"id": rel, "title": tree.title_text, "dom": tree.to_dict()})
        counts["kept"] += 1
    return records, counts


def write_jsonl(path, rows: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write((row if isinstance(row, str) else json.dumps(row, separators=(",", ":"), ensure_ascii=False)) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def load_corpus(corpus_dir) -> list[tuple[str, DomTree]]:
    return [(r["id"], tree_from_dict(r["dom"])) for r in read_jsonl(Path(corpus_dir) / CORPUS_FILE)]


# ---------------------------------------------------------------- vocabularies / instances


def make_tokenizer(kind: str, vocab: TextVocab):
    if kind == "word":
        return WordTokenizer(vocab)
    if kind == "char":
        return CharTokenizer(vocab)
    raise ValueError(f"unknown tokenizer {kind!r}")


def build_vocabs(trees: Sequence[DomTree], max_text_vocab: int = 30000) -> tuple[TagVocab, TextVocab]:
    tag_vocab = build_tag_vocab(trees)
    texts = (chunk for t in trees for n in t.nodes for chunk, _ in n.text_chunks)
    return tag_vocab, TextVocab.build(texts, max_size=max_text_vocab)


def make_instances(
    pages: Sequence[tuple[str, DomTree]],
    cfg: SamplerConfig,
    tag_vocab: TagVocab,
    tokenizer,
) -> tuple[list[PretrainInstance], dict]:
    """One instance per page with a per-page RNG stream derived from the seed."""
    pool = sorted({t.title_text for _, t in pages if t.title_text})
    out = []
    stats = {"pages": len(pages), "instances": 0, "skipped": 0, "tpm_skipped": 0}
    for i, (pid, tree) in enumerate(pages):
        rng = page_rng(cfg.rng_seed, i)
        try:
            inst = make_pretrain_instance(tree, cfg, tag_vocab, tokenizer, pool, rng, page_id=pid)
        except (EmptyDocument, NoTitle):
            stats["skipped"] += 1
            continue
        if not inst.inputs.token_map.max(initial=-1) >= 0:
            stats["skipped"] += 1
            continue
        stats["tpm_skipped"] += int(inst.tpm_skip)
        out.append(inst)
    stats["instances"] = len(out)
    return out, stats


def load_instances(data_dir) -> list[PretrainInstance]:
    return [PretrainInstance.from_dict(d) for d in read_jsonl(Path(data_dir) / INSTANCES_FILE)]


def load_vocabs(directory) -> tuple[TagVocab, TextVocab]:
    d = Path(directory)
    return (
        TagVocab.from_json((d / TAG_VOCAB_FILE).read_text()),
        TextVocab.from_json((d / TEXT_VOCAB_FILE).read_text()),
    )


def save_vocabs(directory, tag_vocab: TagVocab, text_vocab: TextVocab) -> None:
    d = Path(directory)
    (d / TAG_VOCAB_FILE).write_text(tag_vocab.to_json() + "\n")
    (d / TEXT_VOCAB_FILE).write_text(text_vocab.to_json() + "\n")

"""Fine-tuning data: extractive QA over pages and per-token attribute tagging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dom import DomTree, clean_tree, parse_html
from .features import (
    NO,
    YES,
    EncodedExample,
    TagVocab,
    TokenizedPage,
    Tokenizer,
    encode_example,
    tokenize_page,
)
from .metrics import EvalReport, best_over_golds, normalize_answer, page_f1
from .model import MarkupModel, NoValidSpan, collate, decode_span, qa_allowed_positions
from .objectives import IGNORE
from .train import QAFeature, TokclsFeature

ANSWER_PREFIX = (YES, NO)


@dataclass
class QARecord:
    id: str
    html: str
    question: str
    answers: list[str]

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        answers = d.get("answers")
        if answers is None:
            answers = [d["answer"]]
        return cls(str(d["id"]), d["html"], d["question"], list(answers))


def detokenize(ids: Sequence[int], tokenizer: Tokenizer) -> str:
    return " ".join(tokenizer.vocab.id_to_token[i] for i in ids)


def canonical_answer(text: str, tokenizer: Tokenizer) -> str:
    """Gold answers pass through the same tokenize/detokenize path as predictions."""
    norm = normalize_answer(text)
    if norm in ("yes", "no"):
        return norm
    return detokenize(tokenizer.encode(text), tokenizer)


def _find_sublist(hay: Sequence[int], needle: Sequence[int]) -> int:
    n = len(needle)
    for i in range(len(hay) - n + 1):
        if list(hay[i : i + n]) == list(needle):
            return i
    return -1


@dataclass
class QAPage:
    record: QARecord
    page: TokenizedPage
    windows: list[EncodedExample]


def prepare_qa(
    record: QARecord,
    tokenizer: Tokenizer,
    tag_vocab: TagVocab,
    max_len: int,
    stride: int | None = None,
    keep_tags=None,
) -> tuple[QAPage, list[QAFeature]]:
    """Windows for one record plus their training targets.

    Windows that do not contain the answer point both targets at [CLS].
    """
    tree = parse_html(record.html)
    if keep_tags is not None:
        tree = clean_tree(tree, keep_tags)
    page = tokenize_page(tree, tokenizer)
    q = tokenizer.encode(record.question)
    windows = encode_example(page, tag_vocab, max_len, question=q, stride=stride, prefix=ANSWER_PREFIX)
    feats = []
    gold = record.answers[0] if record.answers else ""
    norm = normalize_answer(gold)
    span = None
    if norm not in ("yes", "no"):
        ids = tokenizer.encode(gold)
        at = _find_sublist(page.tokens, ids) if ids else -1
        if at >= 0:
            span = (at, at + len(ids) - 1)
    for w in windows:
        prefix_pos = 1 + len(q) + 1
        if norm == "yes":
            s = e = prefix_pos
        elif norm == "no":
            s = e = prefix_pos + 1
        elif span is not None and span[0] in w.token_map and span[1] in w.token_map:
            s = int(np.nonzero(w.token_map == span[0])[0][0])
            e = int(np.nonzero(w.token_map == span[1])[0][0])
        else:
            s = e = 0
        feats.append(QAFeature(w, s, e, record.id))
    return QAPage(record, page, windows), feats


def predict_qa(
    model: MarkupModel,
    qa_page: QAPage,
    tokenizer: Tokenizer,
    max_answer_length: int = 30,
) -> str:
    best = None
    batch = collate(qa_page.windows)
    start, end = model.qa_forward(batch)
    allowed = qa_allowed_positions(batch)
    for b, w in enumerate(qa_page.windows):
        try:
            i, j, score = decode_span(start.data[b], end.data[b], allowed[b], max_answer_length)
        except NoValidSpan:
            continue
        if best is None or score > best[0]:
            best = (score, b, i, j)
    if best is None:
        return ""
    _, b, i, j = best
    w = qa_page.windows[b]
    if w.token_map[i] < 0:
        tok = int(w.token_ids[i])
        return "yes" if tok == YES else "no" if tok == NO else ""
    ti, tj = int(w.token_map[i]), int(w.token_map[j])
    if tj < ti:
        return ""
    return detokenize(qa_page.page.tokens[ti : tj + 1], tokenizer)


def evaluate_qa(
    model: MarkupModel, pages: Sequence[QAPage], tokenizer: Tokenizer
) -> tuple[EvalReport, list[dict]]:
    ems, f1s, rows = [], [], []
    for qp in pages:
        pred = predict_qa(model, qp, tokenizer)
        golds = [canonical_answer(a, tokenizer) for a in qp.record.answers]
        em, f1 = best_over_golds(pred, golds)
        ems.append(em)
        f1s.append(f1)
        rows.append({"id": qp.record.id, "prediction": pred, "answers": golds, "em": em, "f1": f1})
    n = len(pages)
    report = EvalReport(em=sum(ems) / n if n else 0.0, f1=sum(f1s) / n if n else 0.0, n_examples=n)
    return report, rows


# ---------------------------------------------------------------- attribute extraction


@dataclass
class IERecord:
    id: str
    vertical: str
    site: str
    html: str
    attributes: dict[str, list[str]]

    @classmethod
    def from_dict(cls, d: dict) -> "IERecord":
        return cls(str(d["id"]), d["vertical"], str(d["site"]), d["html"],
                   {k: list(v) for k, v in d["attributes"].items()})


@dataclass
class IEPage:
    record: IERecord
    tree: DomTree
    page: TokenizedPage
    windows: list[EncodedExample]


def node_labels(tree: DomTree, gold: Mapping[str, Sequence[str]], attrs: Sequence[str]) -> dict[int, int]:
    """Node id -> attribute index for nodes whose text equals a gold value."""
    lookup = {}
    for a, values in gold.items():
        if a not in attrs:
            continue
        for v in values:
            lookup.setdefault(normalize_answer(v), attrs.index(a))
    out = {}
    for n in tree.nodes:
        key = normalize_answer(n.text)
        if key and key in lookup:
            out[n.id] = lookup[key]
    return out


def prepare_ie(
    record: IERecord,
    attrs: Sequence[str],
    tokenizer: Tokenizer,
    tag_vocab: TagVocab,
    max_len: int,
    keep_tags=None,
) -> tuple[IEPage, list[TokclsFeature]]:
    tree = parse_html(record.html)
    if keep_tags is not None:
        tree = clean_tree(tree, keep_tags)
    page = tokenize_page(tree, tokenizer)
    windows = encode_example(page, tag_vocab, max_len)
    by_node = node_labels(tree, record.attributes, attrs)
    none = len(attrs)
    feats = []
    for w in windows:
        labels = np.full(w.seq_len, IGNORE, dtype=np.int64)
        ctx = w.token_map >= 0
        labels[ctx] = [by_node.get(page.token_node[t], none) for t in w.token_map[ctx]]
        feats.append(TokclsFeature(w, labels, record.id))
    return IEPage(record, tree, page, windows), feats


def predict_ie(model: MarkupModel, ie_page: IEPage, attrs: Sequence[str]) -> dict[str, list[str]]:
    """Each node takes the class predicted on its first token; its text is the value."""
    batch = collate(ie_page.windows)
    pred = model.tokcls_forward(batch)
    token_pred: dict[int, int] = {}
    for b, w in enumerate(ie_page.windows):
        for pos, t in enumerate(w.token_map):
            if t >= 0 and t not in token_pred:
                token_pred[int(t)] = int(pred[b, pos])
    out: dict[str, list[str]] = {}
    for t, cls in sorted(token_pred.items()):
        if not ie_page.page.first_of_node[t] or cls >= len(attrs):
            continue
        text = ie_page.tree.nodes[ie_page.page.token_node[t]].text
        out.setdefault(attrs[cls], []).append(text)
    return out


def evaluate_ie(model: MarkupModel, pages: Sequence[IEPage], attrs: Sequence[str]) -> float:
    scores = [page_f1(predict_ie(model, p, attrs), p.record.attributes) for p in pages]
    return sum(scores) / len(scores) if scores else 0.0

"""Tokenization, token-to-node alignment and XPath unit encoding."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .dom import DomTree, XPathExpr, all_xpaths

TAG_VOCAB = 216
SUBS_VOCAB = 1001
MAX_DEPTH = 50
MAX_SUBSCRIPT = SUBS_VOCAB - 1

PAD_TAG_TOKEN = "<pad>"
UNK_TAG_TOKEN = "<unk>"
PAD_TAG = 0
UNK_TAG = 1

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[YES]", "[NO]")
PAD, CLS, SEP, MASK, UNK, YES, NO = range(len(SPECIAL_TOKENS))


class QuestionTooLong(ValueError):
    pass


# ---------------------------------------------------------------- tag vocab


@dataclass(frozen=True)
class TagVocab:
    tag_to_id: dict[str, int]

    def __len__(self) -> int:
        return len(self.tag_to_id)

    def lookup(self, tag: str) -> int:
        return self.tag_to_id.get(tag, UNK_TAG)

    def to_json(self) -> str:
        return json.dumps(self.tag_to_id, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "TagVocab":
        mapping = json.loads(text)
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))) or mapping.get(PAD_TAG_TOKEN) != PAD_TAG:
            raise ValueError("tag vocabulary ids must be dense and start with PAD")
        return cls(mapping)


def build_tag_vocab(trees: Iterable[DomTree], capacity: int = TAG_VOCAB) -> TagVocab:
    """Keep the ``capacity - 2`` most frequent tags; ties break lexicographically."""
    counts: Counter[str] = Counter()
    for tree in trees:
        counts.update(n.tag for n in tree.nodes)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: capacity - 2]
    mapping = {PAD_TAG_TOKEN: PAD_TAG, UNK_TAG_TOKEN: UNK_TAG}
    for tag, _ in ranked:
        mapping[tag] = len(mapping)
    return TagVocab(mapping)


# ---------------------------------------------------------------- text vocab / tokenizers


_WORD_RE = re.compile(r"\w+|[^\w\s]")


class TextVocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must begin with the special tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(self.id_to_token, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "TextVocab":
        return cls(json.loads(text))

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 30000, min_count: int = 1) -> "TextVocab":
        """Words by frequency plus every character seen (for the character fallback)."""
        words: Counter[str] = Counter()
        chars: set[str] = set()
        for text in texts:
            for w in _WORD_RE.findall(text.lower()):
                words[w] += 1
                chars.update(w)
        tokens = list(SPECIAL_TOKENS)
        tokens += sorted(chars)
        seen = set(tokens)
        for w, c in sorted(words.items(), key=lambda kv: (-kv[1], kv[0])):
            if len(tokens) >= max_size:
                break
            if c >= min_count and w not in seen:
                tokens.append(w)
                seen.add(w)
        return cls(tokens)


class Tokenizer(Protocol):
    vocab: TextVocab

    def encode(self, text: str) -> list[int]: ...


class WordTokenizer:
    """Whitespace/punctuation split; out-of-vocabulary words fall back to characters."""

    def __init__(self, vocab: TextVocab):
        self.vocab = vocab

    def pieces(self, text: str) -> list[str]:
        out = []
        for w in _WORD_RE.findall(text.lower()):
            if w in self.vocab:
                out.append(w)
            else:
                out.extend(w)
        return out

    def encode(self, text: str) -> list[int]:
        return [self.vocab.id(p) for p in self.pieces(text)]


class CharTokenizer:
    def __init__(self, vocab: TextVocab):
        self.vocab = vocab

    def encode(self, text: str) -> list[int]:
        return [self.vocab.id(c) for c in text if not c.isspace()]


# ---------------------------------------------------------------- page tokenization


@dataclass
class TokenizedPage:
    tokens: list[int]
    token_node: list[int]
    first_of_node: list[bool]
    title_span: tuple[int, int] | None
    node_xpaths: list[XPathExpr]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def xpaths(self) -> list[XPathExpr]:
        return [self.node_xpaths[n] for n in self.token_node]

    def first_token_positions(self) -> dict[int, int]:
        """node id -> index of the first token it contributed."""
        return {self.token_node[i]: i for i, f in enumerate(self.first_of_node) if f}


def tokenize_page(tree: DomTree, tokenizer: Tokenizer) -> TokenizedPage:
    tokens: list[int] = []
    owner: list[int] = []
    first: list[bool] = []
    started: set[int] = set()
    title = tree.title_node
    title_start = title_end = None
    for nid, text in tree.iter_reading_order():
        ids = tokenizer.encode(text)
        if not ids:
            continue
        if nid == title and title_start is None:
            title_start = len(tokens)
        for t in ids:
            tokens.append(t)
            owner.append(nid)
            first.append(nid not in started)
            started.add(nid)
        if nid == title:
            title_end = len(tokens)
    span = (title_start, title_end) if title_start is not None else None
    return TokenizedPage(tokens, owner, first, span, all_xpaths(tree))


def replace_title_tokens(page: TokenizedPage, new_title: list[int]) -> TokenizedPage:
    """Swap the title span for ``new_title``; all other tokens stay identical."""
    if page.title_span is None:
        raise ValueError("page has no title span")
    s, e = page.title_span
    title_node = page.token_node[s]
    n = len(new_title)
    return TokenizedPage(
        tokens=page.tokens[:s] + list(new_title) + page.tokens[e:],
        token_node=page.token_node[:s] + [title_node] * n + page.token_node[e:],
        first_of_node=page.first_of_node[:s] + [i == 0 for i in range(n)] + page.first_of_node[e:],
        title_span=(s, s + n) if n else None,
        node_xpaths=page.node_xpaths,
    )


# ---------------------------------------------------------------- xpath units


@dataclass(frozen=True)
class XPathUnitSeq:
    tag_ids: np.ndarray
    sub_ids: np.ndarray


def encode_xpath(
    xp: XPathExpr | None, vocab: TagVocab, max_depth: int = MAX_DEPTH
) -> XPathUnitSeq:
    """Fixed-length unit ids; over-deep paths lose their leaf-side units."""
    tags = np.full(max_depth, PAD_TAG, dtype=np.int64)
    subs = np.zeros(max_depth, dtype=np.int64)
    if xp is not None:
        for j, (tag, sub) in enumerate(xp.units[:max_depth]):
            tags[j] = vocab.lookup(tag)
            subs[j] = min(sub, MAX_SUBSCRIPT)
    return XPathUnitSeq(tags, subs)


def decode_xpath(seq: XPathUnitSeq, vocab: TagVocab) -> XPathExpr:
    id_to_tag = {i: t for t, i in vocab.tag_to_id.items()}
    units = [
        (id_to_tag[int(t)], int(s))
        for t, s in zip(seq.tag_ids, seq.sub_ids)
        if t != PAD_TAG
    ]
    return XPathExpr(tuple(units))


# ---------------------------------------------------------------- model inputs


@dataclass
class EncodedExample:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    xpath_tags: np.ndarray  # [S, L]
    xpath_subs: np.ndarray  # [S, L]
    attention_mask: np.ndarray  # bool [S]
    # page token index for context positions, -1 for specials/question/padding
    token_map: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.token_map is None:
            self.token_map = np.full(len(self.token_ids), -1, dtype=np.int64)

    @property
    def position_ids(self) -> np.ndarray:
        return np.arange(len(self.token_ids), dtype=np.int64)

    @property
    def seq_len(self) -> int:
        return len(self.token_ids)

    def to_dict(self) -> dict:
        return {
            "token_ids": self.token_ids.tolist(),
            "segment_ids": self.segment_ids.tolist(),
            "xpath_tags": self.xpath_tags.tolist(),
            "xpath_subs": self.xpath_subs.tolist(),
            "attention_mask": self.attention_mask.tolist(),
            "token_map": self.token_map.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodedExample":
        return cls(
            token_ids=np.asarray(d["token_ids"], dtype=np.int64),
            segment_ids=np.asarray(d["segment_ids"], dtype=np.int64),
            xpath_tags=np.asarray(d["xpath_tags"], dtype=np.int64),
            xpath_subs=np.asarray(d["xpath_subs"], dtype=np.int64),
            attention_mask=np.asarray(d["attention_mask"], dtype=bool),
            token_map=np.asarray(d.get("token_map", [-1] * len(d["token_ids"])), dtype=np.int64),
        )

    def copy(self) -> "EncodedExample":
        return EncodedExample(
            self.token_ids.copy(),
            self.segment_ids.copy(),
            self.xpath_tags.copy(),
            self.xpath_subs.copy(),
            self.attention_mask.copy(),
            self.token_map.copy(),
        )


def window_starts(n_context: int, budget: int, stride: int) -> list[int]:
    if n_context <= budget:
        return [0]
    stride = max(1, min(stride, budget))
    n = math.ceil((n_context - budget) / stride) + 1
    return [i * stride for i in range(n)]


def encode_example(
    page: TokenizedPage,
    tag_vocab: TagVocab,
    max_len: int,
    question: Sequence[int] | None = None,
    stride: int | None = None,
    max_depth: int = MAX_DEPTH,
    prefix: Sequence[int] = (),
) -> list[EncodedExample]:
    """Lay out ``[CLS] question [SEP] context [SEP]`` windows over the page.

    ``prefix`` tokens (e.g. reserved yes/no answers) lead every context window
    and carry an empty XPath.
    """
    if max_len < 16:
        raise ValueError("max_len must be at least 16")
    question = list(question or [])
    if len(question) > max_len - 3:
        raise QuestionTooLong(f"question of {len(question)} tokens does not fit in {max_len}")
    head = [CLS] + (question + [SEP] if question else [])
    budget = max_len - len(head) - 1 - len(prefix)
    if budget < 1:
        raise QuestionTooLong("no room left for context")
    stride = max_len // 2 if stride is None else stride
    ctx_seg = 1 if question else 0

    unit_cache: dict[int, XPathUnitSeq] = {}

    def units(node: int) -> XPathUnitSeq:
        if node not in unit_cache:
            unit_cache[node] = encode_xpath(page.node_xpaths[node], tag_vocab, max_depth)
        return unit_cache[node]

    out = []
    for start in window_starts(len(page.tokens), budget, stride):
        ctx = range(start, min(start + budget, len(page.tokens)))
        ids = np.full(max_len, PAD, dtype=np.int64)
        seg = np.zeros(max_len, dtype=np.int64)
        tags = np.full((max_len, max_depth), PAD_TAG, dtype=np.int64)
        subs = np.zeros((max_len, max_depth), dtype=np.int64)
        tmap = np.full(max_len, -1, dtype=np.int64)
        pos = 0
        for t in head:
            ids[pos] = t
            pos += 1
        for t in prefix:
            ids[pos] = t
            seg[pos] = ctx_seg
            pos += 1
        for i in ctx:
            ids[pos] = page.tokens[i]
            seg[pos] = ctx_seg
            u = units(page.token_node[i])
            tags[pos] = u.tag_ids
            subs[pos] = u.sub_ids
            tmap[pos] = i
            pos += 1
        ids[pos] = SEP
        pos += 1
        mask = np.zeros(max_len, dtype=bool)
        mask[:pos] = True
        out.append(EncodedExample(ids, seg, tags, subs, mask, tmap))
    return out

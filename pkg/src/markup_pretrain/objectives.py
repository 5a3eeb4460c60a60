"""Pre-training instance construction: masked tokens, node-pair relations, title swaps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dom import DomTree, NodeRelation, clean_tree, node_relation
from .features import (
    CLS,
    MASK,
    PAD,
    SEP,
    SPECIAL_TOKENS,
    EncodedExample,
    TagVocab,
    TokenizedPage,
    Tokenizer,
    encode_example,
    replace_title_tokens,
    tokenize_page,
)

IGNORE = -100


class NoTitle(ValueError):
    pass


@dataclass
class SamplerConfig:
    mlm_rate: float = 0.15
    tpm_rate: float = 0.15
    max_pairs: int = 1000
    max_non_others_ratio: float = 0.80
    rng_seed: int = 0
    # share of selected tokens replaced by [MASK]; of the rest, half random, half kept
    mask_token_frac: float = 0.8
    random_token_frac: float = 0.1
    max_len: int = 128

    def __post_init__(self) -> None:
        for name in ("mlm_rate", "tpm_rate", "max_non_others_ratio", "mask_token_frac", "random_token_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mask_token_frac + self.random_token_frac > 1.0:
            raise ValueError("mask_token_frac + random_token_frac exceeds 1")


@dataclass
class PretrainInstance:
    inputs: EncodedExample
    mlm_labels: np.ndarray
    nrp_pairs: list[tuple[int, int, int]] = field(default_factory=list)
    tpm_label: int = 0
    tpm_skip: bool = False
    page_id: str = ""

    def to_dict(self) -> dict:
        d = self.inputs.to_dict()
        d["mlm_labels"] = self.mlm_labels.tolist()
        d["nrp_pairs"] = [list(p) for p in self.nrp_pairs]
        d["tpm_label"] = int(self.tpm_label)
        d["tpm_skip"] = bool(self.tpm_skip)
        d["id"] = self.page_id
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainInstance":
        return cls(
            inputs=EncodedExample.from_dict(d),
            mlm_labels=np.asarray(d["mlm_labels"], dtype=np.int64),
            nrp_pairs=[tuple(p) for p in d["nrp_pairs"]],  # type: ignore[misc]
            tpm_label=int(d["tpm_label"]),
            tpm_skip=bool(d["tpm_skip"]),
            page_id=d.get("id", ""),
        )


def page_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per page so instances can be built in any order."""
    return np.random.default_rng([seed, index])


def mlm_eligible(example: EncodedExample, page: TokenizedPage) -> np.ndarray:
    """Context positions outside the title span."""
    tmap = example.token_map
    ok = tmap >= 0
    ok &= ~np.isin(example.token_ids, (PAD, CLS, SEP))
    if page.title_span is not None:
        s, e = page.title_span
        ok &= ~((tmap >= s) & (tmap < e))
    return ok


def apply_mmlm(
    example: EncodedExample,
    page: TokenizedPage,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[EncodedExample, np.ndarray]:
    eligible = mlm_eligible(example, page)
    out = example.copy()
    labels = np.full(example.seq_len, IGNORE, dtype=np.int64)
    if cfg.mlm_rate <= 0:
        return out, labels
    # one uniform per position keeps the stream length independent of eligibility
    select = (rng.random(example.seq_len) < cfg.mlm_rate) & eligible
    how = rng.random(example.seq_len)
    random_ids = rng.integers(len(SPECIAL_TOKENS), max(vocab_size, len(SPECIAL_TOKENS) + 1), size=example.seq_len)
    labels[select] = example.token_ids[select]
    to_mask = select & (how < cfg.mask_token_frac)
    to_rand = select & (how >= cfg.mask_token_frac) & (how < cfg.mask_token_frac + cfg.random_token_frac)
    out.token_ids[to_mask] = MASK
    out.token_ids[to_rand] = random_ids[to_rand]
    return out, labels


def _pair_counts(n_non: int, n_oth: int, max_pairs: int, ratio: float) -> tuple[int, int]:
    """How many non-Others / Others pairs to emit.

    The non-Others share is held at ``ratio`` up to one pair of rounding slack,
    i.e. ``k_non <= ratio * total + 1``.
    """
    r = Fraction(str(ratio))
    k_oth = min(n_oth, max_pairs - min(n_non, int(r * max_pairs)))
    if r >= 1:
        return min(n_non, max_pairs - k_oth), k_oth
    bound = (r * k_oth + 1) / (1 - r)
    k_non = min(n_non, max_pairs - k_oth, int(bound))
    return k_non, k_oth


def candidate_pairs(
    page: TokenizedPage, tree: DomTree, example: EncodedExample | None = None
) -> list[tuple[int, int, int]]:
    """All ordered first-token pairs ``(pos_a, pos_b, relation)`` in the window."""
    firsts: list[tuple[int, int]] = []  # (position, node)
    if example is None:
        firsts = [(i, page.token_node[i]) for i, f in enumerate(page.first_of_node) if f]
    else:
        for pos, ti in enumerate(example.token_map):
            if ti >= 0 and page.first_of_node[ti]:
                firsts.append((pos, page.token_node[ti]))
    out = []
    for pa, na in firsts:
        for pb, nb in firsts:
            out.append((pa, pb, int(node_relation(tree, na, nb))))
    return out


def sample_nrp_pairs(
    page: TokenizedPage,
    tree: DomTree,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    example: EncodedExample | None = None,
) -> list[tuple[int, int, int]]:
    cands = candidate_pairs(page, tree, example)
    non = [c for c in cands if c[2] != NodeRelation.OTHERS]
    oth = [c for c in cands if c[2] == NodeRelation.OTHERS]
    k_non, k_oth = _pair_counts(len(non), len(oth), cfg.max_pairs, cfg.max_non_others_ratio)
    picked = [non[i] for i in rng.permutation(len(non))[:k_non]]
    picked += [oth[i] for i in rng.permutation(len(oth))[:k_oth]]
    return [picked[i] for i in rng.permutation(len(picked))]


def apply_tpm(
    page: TokenizedPage,
    title_text: str | None,
    title_pool: Sequence[str],
    tokenizer: Tokenizer,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[TokenizedPage, int]:
    """Maybe replace the page title by a foreign one; returns (page, replaced?)."""
    if page.title_span is None or title_text is None:
        raise NoTitle("page has no title")
    pool = [t for t in title_pool if t != title_text]
    swap = rng.random() < cfg.tpm_rate
    if not swap or not pool:
        return page, 0
    new_title = pool[int(rng.integers(len(pool)))]
    ids = tokenizer.encode(new_title)
    if not ids:
        return page, 0
    return replace_title_tokens(page, ids), 1


def make_pretrain_instance(
    tree: DomTree,
    cfg: SamplerConfig,
    tag_vocab: TagVocab,
    tokenizer: Tokenizer,
    title_pool: Sequence[str],
    rng: np.random.Generator,
    keep_tags=None,
    page_id: str = "",
) -> PretrainInstance:
    """clean -> tokenize -> title swap -> encode (first window) -> mask -> pair sampling."""
    if keep_tags is not None:
        tree = clean_tree(tree, keep_tags)
    page = tokenize_page(tree, tokenizer)
    tpm_skip = False
    try:
        page, tpm_label = apply_tpm(page, tree.title_text, title_pool, tokenizer, cfg, rng)
    except NoTitle:
        tpm_label, tpm_skip = 0, True
    example = encode_example(page, tag_vocab, cfg.max_len)[0]
    masked, labels = apply_mmlm(example, page, cfg, rng, len(tokenizer.vocab))
    pairs = sample_nrp_pairs(page, tree, cfg, rng, example)
    return PretrainInstance(masked, labels, pairs, tpm_label, tpm_skip, page_id)

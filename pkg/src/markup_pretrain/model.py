"""Encoder with text, XPath, position and segment embeddings plus task heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .features import SEP, EncodedExample, MAX_DEPTH, SUBS_VOCAB, TAG_VOCAB
from .objectives import IGNORE, PretrainInstance
from .tensor import ParamStore, Tensor

N_RELATIONS = 7


class NoValidSpan(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    text_vocab: int
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_u: int = 32
    max_depth: int = MAX_DEPTH
    tag_vocab: int = TAG_VOCAB
    subs_vocab: int = SUBS_VOCAB
    max_positions: int = 512
    n_segments: int = 2
    n_relations: int = N_RELATIONS
    d_ff: int | None = None
    dropout: float = 0.1
    use_xpath: bool = True
    nrp_pairing: str = "concat"  # or "bilinear"
    mmlm: bool = True
    nrp: bool = True
    tpm: bool = True
    n_attrs: int | None = None  # token-classification head width is n_attrs + 1
    qa_head: bool = False

    def __post_init__(self) -> None:
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_h
        if self.nrp_pairing not in ("concat", "bilinear"):
            raise ValueError(f"unknown nrp_pairing {self.nrp_pairing!r}")

    @classmethod
    def full_scale(cls, text_vocab: int) -> "ModelConfig":
        return cls(text_vocab=text_vocab, d_h=768, n_layers=12, n_heads=12, max_positions=512)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_h
    shapes: dict[str, tuple[int, ...]] = {
        "emb.word": (cfg.text_vocab, d),
        "emb.position": (cfg.max_positions, d),
        "emb.segment": (cfg.n_segments, d),
        "emb.ln.gain": (d,),
        "emb.ln.bias": (d,),
    }
    if cfg.use_xpath:
        shapes.update(
            {
                "xpath.tag_tables": (cfg.max_depth, cfg.tag_vocab, cfg.d_u),
                "xpath.subs_tables": (cfg.max_depth, cfg.subs_vocab, cfg.d_u),
                "xpath.ffn_in.weight": (4 * d, cfg.max_depth * cfg.d_u),
                "xpath.ffn_in.bias": (4 * d,),
                "xpath.ffn_out.weight": (d, 4 * d),
                "xpath.ffn_out.bias": (d,),
            }
        )
    for i in range(cfg.n_layers):
        for k, s in T.encoder_layer_shapes(d, cfg.d_ff).items():
            shapes[f"encoder.{i}.{k}"] = s
    shapes["mlm.weight"] = (cfg.text_vocab, d)
    shapes["mlm.bias"] = (cfg.text_vocab,)
    if cfg.nrp_pairing == "concat":
        shapes["nrp.weight"] = (cfg.n_relations, 2 * d)
    else:
        shapes["nrp.weight"] = (cfg.n_relations, d, d)
    shapes["nrp.bias"] = (cfg.n_relations,)
    shapes["tpm.weight"] = (2, d)
    shapes["tpm.bias"] = (2,)
    if cfg.qa_head:
        shapes["qa.weight"] = (2, d)
        shapes["qa.bias"] = (2,)
    if cfg.n_attrs is not None:
        shapes["tokcls.weight"] = (cfg.n_attrs + 1, d)
        shapes["tokcls.bias"] = (cfg.n_attrs + 1,)
    return shapes


def collate(examples: Sequence[EncodedExample]) -> dict[str, np.ndarray]:
    return {
        "token_ids": np.stack([e.token_ids for e in examples]),
        "segment_ids": np.stack([e.segment_ids for e in examples]),
        "xpath_tags": np.stack([e.xpath_tags for e in examples]),
        "xpath_subs": np.stack([e.xpath_subs for e in examples]),
        "attention_mask": np.stack([e.attention_mask for e in examples]),
        "token_map": np.stack([e.token_map for e in examples]),
    }


def collate_pretrain(instances: Sequence[PretrainInstance]) -> dict[str, np.ndarray]:
    batch = collate([i.inputs for i in instances])
    batch["mlm_labels"] = np.stack([i.mlm_labels for i in instances])
    rows = [(b, a, c, lab) for b, inst in enumerate(instances) for a, c, lab in inst.nrp_pairs]
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    batch["nrp_batch"], batch["nrp_a"], batch["nrp_b"], batch["nrp_labels"] = arr.T
    batch["tpm_labels"] = np.asarray(
        [IGNORE if i.tpm_skip else i.tpm_label for i in instances], dtype=np.int64
    )
    return batch


class MarkupModel:
    def __init__(
        self,
        config: ModelConfig,
        params: ParamStore | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = param_shapes(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            for name, shape in shapes.items():
                params.add(name, T.init_param(name, shape, rng, self.dtype))
        else:
            params.astype(self.dtype)
            for name, shape in shapes.items():
                if name not in params:
                    raise CheckpointMismatch(f"checkpoint lacks parameter {name!r}")
                if params[name].shape != shape:
                    raise CheckpointMismatch(
                        f"{name}: checkpoint shape {params[name].shape} != config shape {shape}"
                    )
        self.params = params

    # ------------------------------------------------------------ heads

    def add_qa_head(self, seed: int = 0) -> None:
        self.config.qa_head = True
        self._add_missing(seed)

    def add_tokcls_head(self, n_attrs: int, seed: int = 0) -> None:
        if n_attrs < 1:
            raise ValueError("need at least one attribute")
        if "tokcls.weight" in self.params:
            raise ValueError("token-classification head already present")
        self.config.n_attrs = n_attrs
        self._add_missing(seed)

    def _add_missing(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for name, shape in param_shapes(self.config).items():
            if name not in self.params:
                self.params.add(name, T.init_param(name, shape, rng, self.dtype))

    # ------------------------------------------------------------ embeddings

    def xpath_embedding(self, tag_ids, sub_ids) -> Tensor:
        """Per-level unit embeddings summed, concatenated, then a ReLU FFN.

        Tokens of one node (and all padding) share a unit sequence, so the FFN
        runs once per distinct sequence and the rows are gathered back.
        """
        p = self.params
        tag_ids = np.asarray(tag_ids, dtype=np.int64)
        sub_ids = np.asarray(sub_ids, dtype=np.int64)
        lead, L = tag_ids.shape[:-1], tag_ids.shape[-1]
        keys = np.concatenate([tag_ids, sub_ids], axis=-1).reshape(-1, 2 * L)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        units = T.add(
            T.level_embedding_lookup(p["xpath.tag_tables"], uniq[:, :L]),
            T.level_embedding_lookup(p["xpath.subs_tables"], uniq[:, L:]),
        )
        r = T.reshape(units, (len(uniq), self.config.max_depth * self.config.d_u))
        hidden = T.relu(T.affine(r, p["xpath.ffn_in.weight"], p["xpath.ffn_in.bias"]))
        xe = T.affine(hidden, p["xpath.ffn_out.weight"], p["xpath.ffn_out.bias"])
        return T.embedding_lookup(xe, inverse.reshape(lead))

    def embedding_sum(self, batch: dict[str, np.ndarray]) -> Tensor:
        """The four input terms added together, before normalization."""
        p = self.params
        ids = batch["token_ids"]
        S = ids.shape[-1]
        if S > self.config.max_positions:
            raise ValueError(f"sequence length {S} exceeds max_positions")
        h = T.embedding_lookup(p["emb.word"], ids)
        h = T.add(h, T.embedding_lookup(p["emb.position"], np.arange(S)))
        h = T.add(h, T.embedding_lookup(p["emb.segment"], batch["segment_ids"]))
        if self.config.use_xpath:
            h = T.add(h, self.xpath_embedding(batch["xpath_tags"], batch["xpath_subs"]))
        return h

    def input_embedding(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        h = T.layer_norm(self.embedding_sum(batch), p["emb.ln.gain"], p["emb.ln.bias"])
        return T.dropout(h, self.config.dropout, rng)

    def encode(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        """Final hidden states [B, S, d_h]; dropout only when ``rng`` is given."""
        h = self.input_embedding(batch, rng)
        mask = batch["attention_mask"]
        for i in range(self.config.n_layers):
            h = T.encoder_layer(
                h, self.params.prefixed(f"encoder.{i}."), mask, self.config.n_heads, self.config.dropout, rng
            )
        return h

    # ------------------------------------------------------------ pre-training

    def pretrain_forward(
        self,
        batch: dict[str, np.ndarray],
        rng: np.random.Generator | None = None,
        hidden: Tensor | None = None,
    ) -> tuple[Tensor, dict[str, float]]:
        cfg = self.config
        p = self.params
        zero = Tensor(np.zeros((), dtype=self.dtype))
        parts: dict[str, Tensor] = {"mmlm": zero, "nrp": zero, "tpm": zero}
        if not (cfg.mmlm or cfg.nrp or cfg.tpm):
            return zero, {k: 0.0 for k in parts}
        h = self.encode(batch, rng) if hidden is None else hidden
        if cfg.mmlm:
            labels = batch["mlm_labels"]
            bi, si = np.nonzero(labels != IGNORE)
            if len(bi):
                rows = T.gather_rows(h, bi, si)
                logits = T.affine(rows, p["mlm.weight"], p["mlm.bias"])
                parts["mmlm"], _ = T.softmax_cross_entropy(logits, labels[bi, si])
        if cfg.nrp and len(batch["nrp_labels"]):
            fa = T.gather_rows(h, batch["nrp_batch"], batch["nrp_a"])
            fb = T.gather_rows(h, batch["nrp_batch"], batch["nrp_b"])
            logits = self._nrp_logits(fa, fb)
            parts["nrp"], _ = T.softmax_cross_entropy(logits, batch["nrp_labels"])
        if cfg.tpm:
            cls = T.gather_rows(h, np.arange(h.shape[0]), np.zeros(h.shape[0], dtype=np.int64))
            logits = T.affine(cls, p["tpm.weight"], p["tpm.bias"])
            parts["tpm"], _ = T.softmax_cross_entropy(logits, batch["tpm_labels"])
        total = T.add(T.add(parts["mmlm"], parts["nrp"]), parts["tpm"])
        return total, {k: float(v.data) for k, v in parts.items()}

    def _nrp_logits(self, fa: Tensor, fb: Tensor) -> Tensor:
        p = self.params
        if self.config.nrp_pairing == "concat":
            return T.affine(T.concat([fa, fb], axis=-1), p["nrp.weight"], p["nrp.bias"])
        return T.bilinear(fa, fb, p["nrp.weight"], p["nrp.bias"])

    def pretrain_predictions(self, batch) -> dict[str, np.ndarray]:
        """Eval-mode argmax predictions for each objective (no graph kept)."""
        h = self.encode(batch)
        p = self.params
        out = {}
        bi, si = np.nonzero(batch["mlm_labels"] != IGNORE)
        logits = h.data[bi, si] @ p["mlm.weight"].data.T + p["mlm.bias"].data
        out["mmlm_pred"] = logits.argmax(axis=-1)
        out["mmlm_gold"] = batch["mlm_labels"][bi, si]
        cls = h.data[:, 0]
        out["tpm_pred"] = (cls @ p["tpm.weight"].data.T + p["tpm.bias"].data).argmax(axis=-1)
        out["tpm_gold"] = batch["tpm_labels"]
        if len(batch["nrp_labels"]):
            fa = Tensor(h.data[batch["nrp_batch"], batch["nrp_a"]])
            fb = Tensor(h.data[batch["nrp_batch"], batch["nrp_b"]])
            out["nrp_pred"] = self._nrp_logits(fa, fb).data.argmax(axis=-1)
        else:
            out["nrp_pred"] = np.zeros(0, dtype=np.int64)
        out["nrp_gold"] = batch["nrp_labels"]
        return out

    # ------------------------------------------------------------ fine-tuning heads

    def qa_forward(self, batch, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Start and end logits, each [B, S]."""
        h = self.encode(batch, rng)
        p = self.params
        logits = T.affine(h, p["qa.weight"], p["qa.bias"])  # B,S,2
        B, S = batch["token_ids"].shape
        start = T.reshape(T.take_last(logits, 0), (B, S))
        end = T.reshape(T.take_last(logits, 1), (B, S))
        return start, end

    def qa_loss(self, batch, starts, ends, rng: np.random.Generator | None = None) -> Tensor:
        start, end = self.qa_forward(batch, rng)
        # padding cannot be an answer boundary
        pad = np.where(batch["attention_mask"], 0.0, T.ATTN_MASK_VALUE).astype(self.dtype)
        ls, _ = T.softmax_cross_entropy(T.add(start, pad), starts)
        le, _ = T.softmax_cross_entropy(T.add(end, pad), ends)
        return T.scale(T.add(ls, le), 0.5)

    def tokcls_logits(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        if self.config.n_attrs is None:
            raise ValueError("model has no token-classification head")
        h = self.encode(batch, rng)
        return T.affine(h, self.params["tokcls.weight"], self.params["tokcls.bias"])

    def tokcls_forward(self, batch) -> np.ndarray:
        """Per-token class ids; index ``n_attrs`` means no attribute."""
        return argmax_lowest(self.tokcls_logits(batch).data)

    # ------------------------------------------------------------ persistence

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.params.save(d / "params.bin")
        (d / "config.json").write_text(self.config.to_json() + "\n")

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "MarkupModel":
        d = Path(directory)
        cfg = ModelConfig.from_json((d / "config.json").read_text())
        return cls(cfg, ParamStore.load(d / "params.bin", dtype=dtype), dtype=dtype)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


def qa_allowed_positions(example_or_batch) -> np.ndarray:
    """Context-segment positions (including reserved answer tokens)."""
    if isinstance(example_or_batch, EncodedExample):
        seg, mask, ids = example_or_batch.segment_ids, example_or_batch.attention_mask, example_or_batch.token_ids
    else:
        seg, mask, ids = (
            example_or_batch["segment_ids"],
            example_or_batch["attention_mask"],
            example_or_batch["token_ids"],
        )
    return (seg == 1) & mask & (ids != SEP)


def decode_span(
    start_logits: np.ndarray,
    end_logits: np.ndarray,
    allowed: np.ndarray,
    max_answer_length: int = 30,
) -> tuple[int, int, float]:
    """Best ``(i, j)`` with i <= j, j - i < max_answer_length, both allowed.

    Ties resolve to the smallest start, then the smallest end.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if not allowed.any():
        raise NoValidSpan("no position may start an answer")
    S = len(start_logits)
    i = np.arange(S)[:, None]
    j = np.arange(S)[None, :]
    ok = (j >= i) & (j - i < max_answer_length) & allowed[:, None] & allowed[None, :]
    scores = np.where(ok, start_logits[:, None] + end_logits[None, :], -np.inf)
    flat = int(np.argmax(scores))
    bi, bj = divmod(flat, S)
    return bi, bj, float(scores[bi, bj])

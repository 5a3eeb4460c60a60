"""QA and extraction metrics, seed-site splits and report aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
import re
import string
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

SWDE_VERTICALS = ("auto", "book", "camera", "job", "movie", "nbaplayer", "restaurant", "university")
N_SITES = 10

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


class BadSiteCount(ValueError):
    pass


def normalize_answer(text: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def token_f1(pred: str, gold: str) -> float:
    p = normalize_answer(pred).split()
    g = normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def best_over_golds(pred: str, golds: Sequence[str]) -> tuple[int, float]:
    """(EM, F1) against the best-matching gold answer."""
    if not golds:
        golds = [""]
    return max(exact_match(pred, g) for g in golds), max(token_f1(pred, g) for g in golds)


def _value_set(values: Mapping[str, Iterable[str]]) -> set[tuple[str, str]]:
    return {(attr, normalize_answer(v)) for attr, vs in values.items() for v in vs if normalize_answer(v)}


def page_f1(pred_values: Mapping[str, Iterable[str]], gold_values: Mapping[str, Iterable[str]]) -> float:
    """F1 of one page over normalized (attribute, value) pairs."""
    pred = _value_set(pred_values)
    gold = _value_set(gold_values)
    if not pred and not gold:
        return 1.0
    hits = len(pred & gold)
    if hits == 0:
        return 0.0
    p = hits / len(pred)
    r = hits / len(gold)
    return 2 * p * r / (p + r)


def mean_page_f1(pages: Iterable[tuple[Mapping[str, Iterable[str]], Mapping[str, Iterable[str]]]]) -> float:
    scores = [page_f1(p, g) for p, g in pages]
    return sum(scores) / len(scores) if scores else 0.0


@dataclass(frozen=True)
class SwdeSplit:
    vertical: str
    websites: tuple[str, ...]
    k: int
    rotation: int

    @property
    def train_sites(self) -> tuple[str, ...]:
        n = len(self.websites)
        return tuple(self.websites[(self.rotation + i) % n] for i in range(self.k))

    @property
    def test_sites(self) -> tuple[str, ...]:
        train = set(self.train_sites)
        return tuple(s for s in self.websites if s not in train)


def swde_splits(vertical_sites: Sequence[str], k: int, vertical: str = "") -> list[SwdeSplit]:
    """The ten cyclic seed-site rotations of one vertical."""
    sites = tuple(vertical_sites)
    if len(sites) != N_SITES or len(set(sites)) != N_SITES:
        raise BadSiteCount(f"expected {N_SITES} distinct sites, got {len(sites)}")
    if not 1 <= k <= 5:
        raise ValueError("k must lie in 1..5")
    return [SwdeSplit(vertical, sites, k, r) for r in range(N_SITES)]


@dataclass
class EvalReport:
    em: float = 0.0
    f1: float = 0.0
    per_vertical: dict[str, dict[int, float]] = field(default_factory=dict)
    n_examples: int = 0

    def __post_init__(self) -> None:
        for name in ("em", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def per_k(self) -> dict[int, float]:
        """Average over verticals for each seed-site count."""
        cols: dict[int, list[float]] = defaultdict(list)
        for row in self.per_vertical.values():
            for k, v in row.items():
                cols[k].append(v)
        return {k: math.fsum(v) / len(v) for k, v in sorted(cols.items())}

    def to_json(self) -> str:
        d = asdict(self)
        d["per_vertical"] = {v: {str(k): f for k, f in row.items()} for v, row in self.per_vertical.items()}
        d["per_k"] = {str(k): v for k, v in self.per_k.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Vertical x k grid with an Average row."""
        ks = sorted({k for row in self.per_vertical.values() for k in row})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["vertical"] + [f"k={k}" for k in ks])
        order = [v for v in SWDE_VERTICALS if v in self.per_vertical]
        order += sorted(v for v in self.per_vertical if v not in SWDE_VERTICALS)
        for v in order:
            w.writerow([v] + [_fmt(self.per_vertical[v].get(k)) for k in ks])
        per_k = self.per_k
        w.writerow(["Average"] + [_fmt(per_k.get(k)) for k in ks])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{100 * x:.2f}"


def aggregate(reports: Iterable[EvalReport]) -> EvalReport:
    """Unweighted mean across verticals of the means across runs (rotations)."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    cells: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in reports:
        for v, row in r.per_vertical.items():
            for k, f in row.items():
                cells[v][int(k)].append(f)
    per_vertical = {v: {k: math.fsum(fs) / len(fs) for k, fs in sorted(row.items())} for v, row in sorted(cells.items())}
    em = math.fsum(r.em for r in reports) / len(reports)
    if per_vertical:
        vert_means = [math.fsum(row.values()) / len(row) for row in per_vertical.values()]
        f1 = math.fsum(vert_means) / len(vert_means)
    else:
        f1 = math.fsum(r.f1 for r in reports) / len(reports)
    return EvalReport(em=em, f1=f1, per_vertical=per_vertical, n_examples=sum(r.n_examples for r in reports))

"""Small generated corpora with known structure, for smoke runs and tests."""

from __future__ import annotations

import itertools
import random
from html import escape

STORE_MENU_HTML = """<html>
<body>
  <div>
    <li>
      <div>
        <span>Add store to favorites</span>
        <span>Products</span>
      </div>
      Store directory
    </li>
    <li>
      <div><span>Contact us</span></div>
    </li>
  </div>
</body>
</html>"""
STORE_MENU_TARGET_XPATH = "/html/body/div/li[1]/div/span[2]"

_ONSETS = ["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CODAS = ["", "n", "r", "s", "l"]


def word_list(n: int = 300, seed: int = 7) -> list[str]:
    """Deterministic pronounceable pseudo-words."""
    pool = sorted(
        {a + v + c + b + w for a, v, c, b, w in itertools.product(_ONSETS, _VOWELS, _CODAS, _ONSETS, _VOWELS)}
    )
    rng = random.Random(seed)
    rng.shuffle(pool)
    return sorted(pool[:n])


def _words(rng: random.Random, vocab: list[str], k: int) -> str:
    return " ".join(rng.choice(vocab) for _ in range(k))


def pretrain_corpus(n_pages: int, seed: int = 0, vocab_size: int = 200) -> list[tuple[str, str]]:
    """Product-style pages whose title repeats the page heading.

    Returns ``(page_id, html)`` pairs. Pages carry script/style noise so the
    cleaning stage has something to strip.
    """
    rng = random.Random(seed)
    vocab = word_list(vocab_size)
    pages = []
    for i in range(n_pages):
        name = _words(rng, vocab, rng.randint(2, 3))
        rows = []
        for _ in range(rng.randint(2, 4)):
            rows.append(f"<li><span>{_words(rng, vocab, 1)}</span><span>{_words(rng, vocab, rng.randint(1, 2))}</span></li>")
        paras = "".join(f"<p>{_words(rng, vocab, rng.randint(3, 6))}</p>" for _ in range(rng.randint(1, 2)))
        html = (
            f"<html><head><title>{name}</title><style>p {{color: red}}</style></head>"
            f"<body><script>var n = {i};</script>"
            f"<div><h1>{name}</h1></div>"
            f"<div><ul>{''.join(rows)}</ul></div>"
            f"<div>{paras}</div>"
            "</body></html>"
        )
        pages.append((f"page-{i:05d}", html))
    return pages


# ---------------------------------------------------------------- structure-determined QA

QA_QUESTION = "what is the second item of the list ?"


def _qa_templates():
    for n_before, n_after, n_li, n_spans in itertools.product(range(4), range(4), range(2, 6), (2, 3)):
        for target in range(n_li):
            yield (n_before, n_after, n_li, target, n_spans)


def qa_template_split(test_fraction: float = 0.3, seed: int = 0):
    """Disjoint (train, test) page templates."""
    templates = list(_qa_templates())
    rng = random.Random(seed)
    rng.shuffle(templates)
    n_test = int(len(templates) * test_fraction)
    return sorted(templates[n_test:]), sorted(templates[:n_test])


def structure_qa_page(template, rng: random.Random, vocab: list[str], idx: int) -> dict:
    """One page whose answer is the second span of the only multi-span list item.

    Decoy blocks put a second span at the same depth under a non-list parent,
    and the text itself is uninformative, so only markup locates the answer.
    """
    n_before, n_after, n_li, target, n_spans = template
    words = iter(rng.sample(vocab, 60))

    def w(k=1):
        return " ".join(next(words) for _ in range(k))

    def block():
        kind = rng.choice(("decoy", "para", "plain"))
        if kind == "decoy":
            return f"<div><ul><p><span>{w()}</span><span>{w()}</span></p></ul></div>"
        if kind == "para":
            return f"<div><p>{w(rng.randint(2, 4))}</p></div>"
        return f"<div><span>{w(rng.randint(1, 3))}</span></div>"

    items = []
    answer = None
    for li in range(n_li):
        if li == target:
            spans = []
            for s in range(n_spans):
                # one word: tokens of a multi-word answer share an XPath, so
                # only a single-token answer is fixed by its position alone
                text = w(1) if s == 1 else w(rng.randint(1, 2))
                if s == 1:
                    answer = text
                spans.append(f"<span>{escape(text)}</span>")
            items.append(f"<li>{''.join(spans)}</li>")
        else:
            items.append(f"<li><span>{w(rng.randint(1, 2))}</span></li>")
    body = "".join(block() for _ in range(n_before))
    body += f"<div><ul>{''.join(items)}</ul></div>"
    body += "".join(block() for _ in range(n_after))
    html = f"<html><head><title>{w(2)}</title></head><body>{body}</body></html>"
    return {"id": f"qa-{idx:05d}", "html": html, "question": QA_QUESTION, "answers": [answer], "template": list(template)}


def structure_qa_corpus(n_train: int, n_test: int, seed: int = 0, vocab_size: int = 300):
    """Train pages and held-out pages drawn from disjoint template sets."""
    rng = random.Random(seed)
    vocab = word_list(vocab_size)
    train_t, test_t = qa_template_split(seed=seed)
    train = [structure_qa_page(rng.choice(train_t), rng, vocab, i) for i in range(n_train)]
    test = [structure_qa_page(rng.choice(test_t), rng, vocab, n_train + i) for i in range(n_test)]
    return train, test


# ---------------------------------------------------------------- attribute extraction

VERTICAL_ATTRS = {
    "auto": ["model", "price", "engine"],
    "book": ["title", "author", "publisher"],
    "camera": ["model", "price", "manufacturer"],
    "job": ["title", "company", "location"],
}


def swde_like_corpus(verticals=("auto", "book"), pages_per_site: int = 4, seed: int = 0) -> list[dict]:
    """Ten sites per vertical; each site renders attributes with its own layout."""
    rng = random.Random(seed)
    vocab = word_list(300)
    records = []
    for vertical in verticals:
        attrs = VERTICAL_ATTRS[vertical]
        for s in range(10):
            site = f"{vertical}-site{s}"
            order = attrs[:]
            rng.shuffle(order)
            wrap = rng.randint(0, 2)
            container = rng.choice(("table", "ul", "div"))
            for p in range(pages_per_site):
                values = {a: _words(rng, vocab, rng.randint(1, 2)) for a in attrs}
                rows = []
                for a in order:
                    if container == "table":
                        rows.append(f"<tr><td>{a}</td><td>{values[a]}</td></tr>")
                    elif container == "ul":
                        rows.append(f"<li><b>{a}</b><span>{values[a]}</span></li>")
                    else:
                        rows.append(f"<div><label>{a}</label><em>{values[a]}</em></div>")
                inner = {"table": "<table>{}</table>", "ul": "<ul>{}</ul>", "div": "<div>{}</div>"}[container]
                inner = inner.format("".join(rows))
                for _ in range(wrap):
                    inner = f"<div>{inner}</div>"
                noise = f"<div><p>{_words(rng, vocab, rng.randint(3, 6))}</p></div>"
                html = f"<html><head><title>{values[attrs[0]]}</title></head><body>{noise}{inner}</body></html>"
                records.append(
                    {
                        "id": f"{site}-{p}",
                        "vertical": vertical,
                        "site": site,
                        "html": html,
                        "attributes": {a: [values[a]] for a in attrs},
                    }
                )
    return records

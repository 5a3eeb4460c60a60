"""DOM construction, XPath units, node relations and corpus cleaning.

Trees are immutable arenas of :class:`DomNode`; node ids are dense preorder
indices so ``tree.nodes[i].id == i`` always holds.
"""

from __future__ import annotations

import enum
import operator
import re
from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Iterable, Iterator, Sequence


class EmptyDocument(ValueError):
    """Raised when no element node can be produced from the input."""


class UnknownNode(KeyError):
    pass


class MalformedRecord(ValueError):
    pass


VOID_TAGS = frozenset(
    "area base br col embed hr img input link meta param source track wbr".split()
)
# opening one of these while the same tag is the current node closes the old one
SELF_NESTING_BREAKERS = frozenset("li p option tr td th dt dd".split())
ALWAYS_KEPT = frozenset({"html", "head", "body", "title"})

# Tags whose content is (or may be) visible text. Configurable; treat as a default.
DEFAULT_KEEP_TAGS = frozenset(
    """
    a abbr address article aside b bdi bdo big blockquote body caption center cite code
    dd del details dfn div dl dt em figcaption figure font footer h1 h2 h3 h4 h5 h6
    head header html i ins kbd label legend li main mark nav ol option p pre q s samp
    section small span strike strong sub summary sup table tbody td tfoot th thead time
    title tr tt u ul var
    """.split()
)

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class DomNode:
    id: int
    tag: str
    parent: int | None
    children: tuple[int, ...]
    # (text, position): position counts the element children preceding the chunk
    text_chunks: tuple[tuple[str, int], ...]
    is_title: bool = False

    @property
    def text(self) -> str:
        return " ".join(t for t, _ in self.text_chunks)


@dataclass(frozen=True)
class DomTree:
    nodes: tuple[DomNode, ...]
    root: int = 0
    title_text: str | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> DomNode:
        try:
            idx = operator.index(node_id)
        except TypeError:
            raise UnknownNode(node_id) from None
        if idx < 0 or idx >= len(self.nodes):
            raise UnknownNode(node_id)
        return self.nodes[idx]

    @property
    def title_node(self) -> int | None:
        for n in self.nodes:
            if n.is_title:
                return n.id
        return None

    def depth(self, node_id: int) -> int:
        d = 0
        n = self.node(node_id)
        while n.parent is not None:
            d += 1
            n = self.nodes[n.parent]
        return d

    def iter_reading_order(self) -> Iterator[tuple[int, str]]:
        """Yield ``(node_id, text_chunk)`` in source reading order."""
        stack: list[tuple[int, int]] = [(self.root, 0)]
        # explicit stack of (node, next child index) so deep trees don't recurse
        while stack:
            nid, ci = stack.pop()
            node = self.nodes[nid]
            for text, pos in node.text_chunks:
                if pos == ci:
                    yield nid, text
            if ci < len(node.children):
                stack.append((nid, ci + 1))
                stack.append((node.children[ci], 0))

    def to_dict(self, node_id: int | None = None) -> dict:
        """Nested JSON-friendly form, the inverse of :func:`tree_from_dict`."""
        nid = self.root if node_id is None else node_id
        out: dict[int, dict] = {}
        for i in reversed(subtree_ids(self, nid)):
            n = self.nodes[i]
            out[i] = {
                "tag": n.tag,
                "text": [[t, p] for t, p in n.text_chunks],
                "children": [out.pop(c) for c in n.children],
            }
        return out[nid]


class _Builder:
    """Mutable scaffold used while parsing; frozen into a DomTree at the end."""

    def __init__(self) -> None:
        self.tags: list[str] = []
        self.parents: list[int | None] = []
        self.children: list[list[int]] = []
        self.texts: list[list[tuple[str, int]]] = []

    def add(self, tag: str, parent: int | None) -> int:
        nid = len(self.tags)
        self.tags.append(tag)
        self.parents.append(parent)
        self.children.append([])
        self.texts.append([])
        if parent is not None:
            self.children[parent].append(nid)
        return nid

    def add_text(self, nid: int, text: str) -> None:
        text = _WS.sub(" ", text).strip()
        if not text:
            return
        pos = len(self.children[nid])
        chunks = self.texts[nid]
        if chunks and chunks[-1][1] == pos:
            chunks[-1] = (chunks[-1][0] + " " + text, pos)
        else:
            chunks.append((text, pos))

    def freeze(self, root: int) -> DomTree:
        # renumber the subtree under `root` in preorder
        order: list[int] = []
        stack = [root]
        while stack:
            nid = stack.pop()
            order.append(nid)
            stack.extend(reversed(self.children[nid]))
        remap = {old: new for new, old in enumerate(order)}
        nodes = []
        title_seen = False
        title_text = None
        for old in order:
            is_title = False
            if self.tags[old] == "title" and not title_seen:
                is_title = title_seen = True
                title_text = " ".join(t for t, _ in self.texts[old])
            parent = self.parents[old]
            nodes.append(
                DomNode(
                    id=remap[old],
                    tag=self.tags[old],
                    parent=None if old == root else remap[parent],
                    children=tuple(remap[c] for c in self.children[old]),
                    text_chunks=tuple(self.texts[old]),
                    is_title=is_title,
                )
            )
        return DomTree(nodes=tuple(nodes), root=0, title_text=title_text)


class _TreeParser(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.b = _Builder()
        self.doc = self.b.add("#document", None)
        self.stack = [self.doc]

    def handle_starttag(self, tag, attrs):
        tag = tag.lower()
        if tag in SELF_NESTING_BREAKERS and self.b.tags[self.stack[-1]] == tag:
            self.stack.pop()
        nid = self.b.add(tag, self.stack[-1])
        if tag not in VOID_TAGS:
            self.stack.append(nid)

    def handle_startendtag(self, tag, attrs):
        self.b.add(tag.lower(), self.stack[-1])

    def handle_endtag(self, tag):
        tag = tag.lower()
        # close up to the nearest matching open element; stray end tags are ignored
        for i in range(len(self.stack) - 1, 0, -1):
            if self.b.tags[self.stack[i]] == tag:
                del self.stack[i:]
                return

    def handle_data(self, data):
        if self.stack[-1] != self.doc:
            self.b.add_text(self.stack[-1], data)


def parse_html(source: str | bytes) -> DomTree:
    """Parse (possibly malformed) HTML into a :class:`DomTree`.

    Unclosed elements are closed when an enclosing end tag or the end of input
    is reached. Several top-level elements are wrapped in a synthetic ``html``
    root.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8", errors="replace")
    p = _TreeParser()
    try:
        p.feed(source)
        p.close()
    except Exception as exc:  # HTMLParser can still trip on pathological markup
        raise EmptyDocument(f"unparseable document: {exc}") from exc
    b = p.b
    top = b.children[p.doc]
    if not top:
        raise EmptyDocument("no element nodes in document")
    if len(top) == 1:
        return b.freeze(top[0])
    root = b.add("html", None)
    b.children[root] = list(top)
    for c in top:
        b.parents[c] = root
    return b.freeze(root)


def tree_from_dict(d: dict) -> DomTree:
    b = _Builder()
    stack: list[tuple[dict, int | None]] = [(d, None)]
    while stack:
        item, parent = stack.pop()
        nid = b.add(item["tag"], parent)
        b.texts[nid] = [(t, int(p)) for t, p in item.get("text", [])]
        stack.extend((c, nid) for c in reversed(item.get("children", [])))
    return b.freeze(0)


@dataclass(frozen=True)
class XPathExpr:
    units: tuple[tuple[str, int], ...]

    @property
    def depth(self) -> int:
        return len(self.units) - 1

    def render(self) -> str:
        return "".join(f"/{t}[{s}]" if s else f"/{t}" for t, s in self.units)

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "XPathExpr":
        units = []
        for part in text.strip("/").split("/"):
            m = re.fullmatch(r"([^\[\]]+)(?:\[(\d+)\])?", part)
            if m is None:
                raise ValueError(f"bad xpath step {part!r}")
            units.append((m.group(1), int(m.group(2) or 0)))
        return cls(tuple(units))


def _subscript(tree: DomTree, node: DomNode) -> int:
    if node.parent is None:
        return 0
    same = [c for c in tree.nodes[node.parent].children if tree.nodes[c].tag == node.tag]
    if len(same) == 1:
        return 0
    return same.index(node.id) + 1


def xpath_of(tree: DomTree, node_id: int) -> XPathExpr:
    """Root-to-node (tag, subscript) units for ``node_id``."""
    node = tree.node(node_id)
    units = []
    while True:
        units.append((node.tag, _subscript(tree, node)))
        if node.parent is None:
            break
        node = tree.nodes[node.parent]
    return XPathExpr(tuple(reversed(units)))


def all_xpaths(tree: DomTree) -> list[XPathExpr]:
    """XPaths for every node in one top-down pass."""
    out: list[XPathExpr | None] = [None] * len(tree.nodes)
    out[tree.root] = XPathExpr(((tree.nodes[tree.root].tag, 0),))
    for node in tree.nodes:  # preorder: parents precede children
        base = out[node.id].units
        counts: dict[str, int] = {}
        for c in node.children:
            counts[tree.nodes[c].tag] = counts.get(tree.nodes[c].tag, 0) + 1
        seen: dict[str, int] = {}
        for c in node.children:
            tag = tree.nodes[c].tag
            seen[tag] = seen.get(tag, 0) + 1
            sub = seen[tag] if counts[tag] > 1 else 0
            out[c] = XPathExpr(base + ((tag, sub),))
    return out  # type: ignore[return-value]


class NodeRelation(enum.IntEnum):
    """Role of node ``b`` relative to node ``a``; values are NRP class ids."""

    SELF = 0
    PARENT = 1
    CHILD = 2
    SIBLING = 3
    ANCESTOR = 4
    DESCENDANT = 5
    OTHERS = 6


def node_relation(tree: DomTree, a: int, b: int) -> NodeRelation:
    na, nb = tree.node(a), tree.node(b)
    if a == b:
        return NodeRelation.SELF
    if na.parent == b:
        return NodeRelation.PARENT
    if nb.parent == a:
        return NodeRelation.CHILD
    if na.parent is not None and na.parent == nb.parent:
        return NodeRelation.SIBLING
    da, db = tree.depth(a), tree.depth(b)
    if db < da and _ancestor_at(tree, a, da - db) == b:
        return NodeRelation.ANCESTOR
    if da < db and _ancestor_at(tree, b, db - da) == a:
        return NodeRelation.DESCENDANT
    return NodeRelation.OTHERS


def _ancestor_at(tree: DomTree, node_id: int, steps: int) -> int:
    for _ in range(steps):
        node_id = tree.nodes[node_id].parent  # type: ignore[assignment]
    return node_id


def clean_tree(tree: DomTree, keep_tags: Iterable[str] = DEFAULT_KEEP_TAGS) -> DomTree:
    """Drop every node whose tag is not kept, together with its subtree."""
    keep = set(keep_tags) | ALWAYS_KEPT
    b = _Builder()
    # preorder walk; each surviving node is added before its children
    stack: list[tuple[int, int | None]] = [(tree.root, None)]
    while stack:
        nid, parent = stack.pop()
        node = tree.nodes[nid]
        new = b.add(node.tag, parent)
        kept = [c for c in node.children if tree.nodes[c].tag in keep]
        # text positions are renumbered against the surviving children
        kept_before = [0]
        for c in node.children:
            kept_before.append(kept_before[-1] + (tree.nodes[c].tag in keep))
        merged: list[tuple[str, int]] = []
        for text, pos in node.text_chunks:
            pos = kept_before[pos]
            if merged and merged[-1][1] == pos:
                merged[-1] = (merged[-1][0] + " " + text, pos)
            else:
                merged.append((text, pos))
        b.texts[new] = merged
        stack.extend((c, new) for c in reversed(kept))
    return b.freeze(0)


def language_score_filter(
    pages: Iterable[tuple[str, float | None]], threshold: float = 0.6
) -> Iterator[str]:
    """Pass pages whose language score is strictly above ``threshold``."""
    for row in pages:
        if len(row) < 2 or row[1] is None:
            raise MalformedRecord(f"record without a language score: {row!r}")
        source, score = row[0], float(row[1])
        if score > threshold:
            yield source


def structurally_equal(a: DomTree, b: DomTree) -> bool:
    return a.to_dict() == b.to_dict()


def subtree_ids(tree: DomTree, node_id: int) -> Sequence[int]:
    out = []
    stack = [node_id]
    while stack:
        n = stack.pop()
        out.append(n)
        stack.extend(tree.nodes[n].children)
    return out

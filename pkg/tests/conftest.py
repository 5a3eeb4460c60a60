import random

import pytest

from markup_pretrain.dom import DomTree, tree_from_dict

TAGS = ["div", "span", "li", "ul", "p", "a", "b", "td", "tr", "table", "em"]


def random_tree_dict(rng: random.Random, max_nodes: int = 200, tags=TAGS, text_prob: float = 0.5) -> dict:
    """Random nested dict tree rooted at html/body with up to ``max_nodes`` nodes."""
    n_target = rng.randint(3, max_nodes)
    root = {"tag": "html", "text": [], "children": []}
    body = {"tag": "body", "text": [], "children": []}
    root["children"].append(body)
    all_nodes = [body]
    count = 2
    while count < n_target:
        parent = rng.choice(all_nodes)
        child = {"tag": rng.choice(tags), "text": [], "children": []}
        parent["children"].append(child)
        all_nodes.append(child)
        count += 1
    for node in all_nodes:
        if rng.random() < text_prob:
            pos = rng.randint(0, len(node["children"]))
            node["text"].append([f"w{rng.randint(0, 99)}", pos])
    return root


def random_tree(rng: random.Random, max_nodes: int = 200, **kw) -> DomTree:
    return tree_from_dict(random_tree_dict(rng, max_nodes, **kw))


@pytest.fixture
def rng():
    return random.Random(1234)

import numpy as np
import pytest

from markup_pretrain import synthetic
from markup_pretrain.dom import parse_html, xpath_of
from markup_pretrain.features import NO, YES, TextVocab, build_tag_vocab
from markup_pretrain.model import MarkupModel, ModelConfig
from markup_pretrain.objectives import IGNORE
from markup_pretrain.pipeline import make_tokenizer
from markup_pretrain.tasks import (
    IERecord,
    QARecord,
    canonical_answer,
    node_labels,
    predict_ie,
    predict_qa,
    prepare_ie,
    prepare_qa,
)

HTML = "<html><head><title>t</title></head><body><p>alpha beta</p><ul><li>gamma delta</li></ul></body></html>"


@pytest.fixture
def tooling():
    tree = parse_html(HTML)
    vocab = TextVocab.build(["t alpha beta gamma delta what is it"])
    return make_tokenizer("word", vocab), build_tag_vocab([tree])


def test_qa_targets_point_at_answer(tooling):
    tok, tv = tooling
    rec = QARecord("r", HTML, "what is it", ["gamma delta"])
    qp, feats = prepare_qa(rec, tok, tv, 32)
    assert len(feats) == 1
    f = feats[0]
    pos = f.example.token_map
    tokens = [qp.page.tokens[t] for t in pos[f.start : f.end + 1]]
    assert tokens == tok.encode("gamma delta")


def test_qa_yes_no_targets(tooling):
    tok, tv = tooling
    for ans, special in (("Yes", YES), ("no", NO)):
        _, feats = prepare_qa(QARecord("r", HTML, "what is it", [ans]), tok, tv, 32)
        f = feats[0]
        assert f.start == f.end and f.example.token_ids[f.start] == special


def test_qa_windows_without_answer_target_cls(tooling):
    tok, tv = tooling
    long_html = HTML.replace("alpha beta", " ".join(["alpha", "beta"] * 12))
    qp, feats = prepare_qa(QARecord("r", long_html, "what", ["gamma"]), tok, tv, 16)
    at = qp.page.tokens.index(tok.encode("gamma")[0])
    assert len(feats) > 1
    has_answer = [bool((f.example.token_map == at).any()) for f in feats]
    assert any(has_answer) and not all(has_answer)
    for f, has in zip(feats, has_answer):
        assert (f.start > 0) == has
        if not has:
            assert f.start == f.end == 0


def test_predict_qa_returns_text(tooling):
    tok, tv = tooling
    qp, _ = prepare_qa(QARecord("r", HTML, "what is it", ["alpha"]), tok, tv, 32)
    m = MarkupModel(ModelConfig(text_vocab=len(tok.vocab), d_h=8, n_layers=1, n_heads=2))
    m.add_qa_head()
    pred = predict_qa(m, qp, tok)
    assert pred in ("yes", "no") or set(pred.split()) <= set("t alpha beta gamma delta".split())


def test_canonical_answer(tooling):
    tok, _ = tooling
    assert canonical_answer("YES", tok) == "yes"
    assert canonical_answer("Alpha  beta", tok) == "alpha beta"


def test_node_labels_and_ie_features(tooling):
    tok, tv = tooling
    tree = parse_html(HTML)
    attrs = ["name", "kind"]
    labels = node_labels(tree, {"kind": ["Gamma delta"], "other": ["alpha beta"]}, attrs)
    assert len(labels) == 1
    (nid, cls), = labels.items()
    assert xpath_of(tree, nid).render() == "/html/body/ul/li" and cls == 1
    rec = IERecord("p", "v", "s", HTML, {"kind": ["gamma delta"]})
    page, feats = prepare_ie(rec, attrs, tok, tv, 32)
    lab = feats[0].labels
    ctx = feats[0].example.token_map >= 0
    assert np.all(lab[~ctx] == IGNORE)
    assert sorted(lab[ctx].tolist()) == [1, 1, 2, 2, 2]


def test_predict_ie_first_token_per_node():
    rows = synthetic.swde_like_corpus(("auto",), pages_per_site=1, seed=0)
    recs = [IERecord.from_dict(r) for r in rows]
    trees = [parse_html(r.html) for r in recs]
    vocab = TextVocab.build([c for t in trees for n in t.nodes for c, _ in n.text_chunks])
    tok = make_tokenizer("word", vocab)
    attrs = sorted(recs[0].attributes)
    page, _ = prepare_ie(recs[0], attrs, tok, build_tag_vocab(trees), 64)
    m = MarkupModel(ModelConfig(text_vocab=len(vocab), d_h=8, n_layers=1, n_heads=2))
    m.add_tokcls_head(len(attrs))
    # bias every token toward attribute 0: every text node becomes one value
    m.params["tokcls.bias"].data[:] = [5.0] + [0.0] * len(attrs)
    m.params["tokcls.weight"].data[:] = 0
    out = predict_ie(m, page, attrs)
    texts = [n.text for n in page.tree.nodes if n.text]
    assert list(out) == [attrs[0]] and out[attrs[0]] == texts

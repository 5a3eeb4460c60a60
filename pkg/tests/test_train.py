import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from markup_pretrain import pipeline as P
from markup_pretrain import synthetic
from markup_pretrain.dom import clean_tree, parse_html
from markup_pretrain.model import MarkupModel, ModelConfig
from markup_pretrain.objectives import SamplerConfig
from markup_pretrain.tasks import QARecord, prepare_qa
from markup_pretrain.train import (
    BatchSampler,
    FinetuneConfig,
    NonFiniteGradient,
    NonFiniteLoss,
    OptimConfig,
    OptimState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    decays,
    finetune_qa,
    lr_at,
    train,
)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_reference_points():
    cfg = OptimConfig()
    assert cfg.warmup_steps == 18_000
    assert lr_at(0, cfg) == 0.0
    assert lr_at(18_000, cfg) == pytest.approx(5e-5, abs=1e-15)
    assert lr_at(9_000, cfg) == pytest.approx(2.5e-5, abs=1e-15)
    assert lr_at(300_000, cfg) == 0.0


@given(st.integers(10, 5000), st.floats(0.01, 0.9))
@settings(max_examples=60, deadline=None)
def test_lr_schedule_shape(total, ratio):
    cfg = OptimConfig(total_steps=total, warmup_ratio=ratio, lr_peak=1.0)
    lrs = np.array([lr_at(s, cfg) for s in range(total + 1)])
    assert lrs[0] == 0.0 and lrs[-1] == 0.0
    assert lrs.max() == pytest.approx(1.0)
    # one peak: non-decreasing up to the argmax, non-increasing after
    top = int(lrs.argmax())
    assert np.all(np.diff(lrs[: top + 1]) >= 0) and np.all(np.diff(lrs[top:]) <= 0)
    # continuity: no jump larger than one step of either slope
    warm = max(cfg.warmup_steps, 1)
    assert np.abs(np.diff(lrs)).max() <= max(1 / warm, 1 / max(total - cfg.warmup_steps, 1)) + 1e-12


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(warmup_ratio=0.0)
    with pytest.raises(ValueError):
        OptimConfig(beta2=1.0)


# ---------------------------------------------------------------- AdamW


def test_adamw_scalar_example():
    p = {"w": np.array([1.0])}
    cfg = OptimConfig(weight_decay=0.01)
    adamw_step(p, {"w": np.array([1.0])}, OptimState(), cfg, 1, lr=0.1)
    hand = 1.0 - 0.1 * (1.0 / (1.0 + 1e-6)) - 0.1 * 0.01 * 1.0
    assert abs(p["w"][0] - hand) < 1e-12
    assert abs(p["w"][0] - 0.8990) < 1e-4


def test_adamw_zero_gradient_no_decay_is_identity():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4))
    p = {"w": w.copy()}
    state = OptimState()
    cfg = OptimConfig(weight_decay=0.0)
    for step in range(1, 6):
        adamw_step(p, {"w": np.zeros_like(w)}, state, cfg, step, lr=0.1)
    assert np.array_equal(p["w"], w)


def test_adamw_decay_exemptions():
    assert decays("layer0.attn.q.weight")
    assert not decays("layer0.ln1.gain") and not decays("mlm.bias")
    p = {"a.weight": np.ones(2), "a.bias": np.ones(2), "ln.gain": np.ones(2)}
    adamw_step(p, {k: np.zeros(2) for k in p}, OptimState(), OptimConfig(weight_decay=0.5), 1, lr=0.1)
    assert np.allclose(p["a.weight"], 0.95)
    assert np.array_equal(p["a.bias"], np.ones(2)) and np.array_equal(p["ln.gain"], np.ones(2))


def reference_adam(p, grads_seq, lr, b1, b2, eps):
    """Plain bias-corrected Adam, written out per element."""
    p = p.copy().ravel()
    m = [0.0] * p.size
    v = [0.0] * p.size
    for t, g in enumerate(grads_seq, 1):
        g = g.ravel()
        for i in range(p.size):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
    return p


def test_adamw_without_decay_matches_adam():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=(2, 3))
    grads = [rng.normal(size=(2, 3)) for _ in range(25)]
    cfg = OptimConfig(weight_decay=0.0)
    p = {"w": w0.copy()}
    state = OptimState()
    for t, g in enumerate(grads, 1):
        adamw_step(p, {"w": g.copy()}, state, cfg, t, lr=0.01)
    ref = reference_adam(w0, grads, 0.01, cfg.beta1, cfg.beta2, cfg.eps)
    assert np.allclose(p["w"].ravel(), ref, atol=1e-13)


def test_adamw_convex_quadratic_converges():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(6, 6))
    H = A @ A.T + 0.5 * np.eye(6)
    b = rng.normal(size=6)
    x = {"x": np.zeros(6)}
    cfg = OptimConfig(weight_decay=0.0, total_steps=200, warmup_ratio=0.05, lr_peak=0.3)
    state = OptimState()
    for t in range(1, 201):
        adamw_step(x, {"x": H @ x["x"] - b}, state, cfg, t)
    assert np.linalg.norm(H @ x["x"] - b) < 1e-3


def test_adamw_rejects_non_finite():
    p = {"w": np.ones(3)}
    with pytest.raises(NonFiniteGradient):
        adamw_step(p, {"w": np.array([1.0, np.nan, 0.0])}, OptimState(), OptimConfig(), 1, lr=0.1)
    assert np.array_equal(p["w"], np.ones(3))
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(3)}, OptimState(), OptimConfig(), 0)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0]), "c": None}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.sqrt((g["a"] ** 2).sum() + (g["b"] ** 2).sum()) == pytest.approx(1.0, abs=1e-6)
    g = {"a": np.array([0.3, 0.4])}
    clip_grad_norm(g, 1.0)
    assert np.array_equal(g["a"], [0.3, 0.4])


def test_batch_sampler_epochs():
    s = BatchSampler(10, 4, np.random.default_rng(0))
    assert s.batches_per_epoch == 2
    first = np.concatenate([s.next(), s.next()])
    assert len(set(first.tolist())) == 8  # partial batch dropped, no repeats in an epoch
    assert BatchSampler(3, 8, np.random.default_rng(0)).next().size == 3
    with pytest.raises(ValueError):
        BatchSampler(0, 4, np.random.default_rng(0))


# ---------------------------------------------------------------- pre-training loop


@pytest.fixture(scope="module")
def toy():
    pages = [(pid, clean_tree(parse_html(h))) for pid, h in synthetic.pretrain_corpus(16, seed=3)]
    tv, xv = P.build_vocabs([t for _, t in pages])
    tok = P.make_tokenizer("word", xv)
    insts, _ = P.make_instances(pages, SamplerConfig(max_len=32, rng_seed=1), tv, tok)
    return insts, len(xv)


def toy_run(toy, steps=10, seed=0, dtype=np.float32, **switches):
    insts, vsize = toy
    cfg = ModelConfig(text_vocab=vsize, d_h=16, n_layers=1, n_heads=2, dropout=0.1, **switches)
    model = MarkupModel(cfg, seed=seed, dtype=dtype)
    tc = TrainConfig(OptimConfig(lr_peak=1e-3, total_steps=steps, batch_size=4), seed=seed)
    return model, train(insts, model, tc)


def test_first_steps_deterministic(toy):
    _, a = toy_run(toy)
    _, b = toy_run(toy)
    assert a == b
    _, c = toy_run(toy, seed=1)
    assert a != c


def test_logged_total_equals_parts(toy):
    _, hist = toy_run(toy, steps=5, dtype=np.float64)
    for e in hist:
        assert abs(e["loss_total"] - (e["loss_mmlm"] + e["loss_nrp"] + e["loss_tpm"])) <= 1e-12
        assert set(e) == {"step", "lr", "loss_total", "loss_mmlm", "loss_nrp", "loss_tpm"}


@pytest.mark.parametrize("nrp,tpm", [(False, False), (True, False), (False, True), (True, True)])
def test_switch_grid_runs(toy, nrp, tpm):
    model, hist = toy_run(toy, steps=4, nrp=nrp, tpm=tpm)
    for e in hist:
        assert e["loss_mmlm"] > 0
        assert (e["loss_nrp"] > 0) == nrp and (e["loss_nrp"] == 0.0) == (not nrp)
        assert (e["loss_tpm"] > 0) == tpm and (e["loss_tpm"] == 0.0) == (not tpm)
    fresh = MarkupModel(model.config, seed=0)
    for head, on in (("nrp.", nrp), ("tpm.", tpm)):
        for n, t in model.params.items():
            if n.startswith(head) and not on:
                assert np.array_equal(t.data, fresh.params[n].data)


def test_non_finite_loss_names_instances(toy):
    insts, vsize = toy
    model = MarkupModel(ModelConfig(text_vocab=vsize, d_h=16, n_layers=1, n_heads=2))
    model.params["mlm.bias"].data[:] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train(insts, model, TrainConfig(OptimConfig(total_steps=3, batch_size=4)))
    assert info.value.step == 1
    assert set(info.value.instance_ids) <= {i.page_id for i in insts} and len(info.value.instance_ids) == 4


def test_checkpoints_and_log(toy, tmp_path):
    insts, vsize = toy
    model = MarkupModel(ModelConfig(text_vocab=vsize, d_h=16, n_layers=1, n_heads=2))
    tc = TrainConfig(OptimConfig(total_steps=4, batch_size=4), log_path=str(tmp_path / "log.jsonl"),
                     checkpoint_dir=str(tmp_path / "ck"), checkpoint_every=2)
    hist = train(insts, model, tc)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 4
    assert (tmp_path / "ck" / "step-2").is_dir() and (tmp_path / "ck" / "step-4").is_dir()
    back = MarkupModel.load(tmp_path / "ck")
    assert np.array_equal(back.params["mlm.bias"].data, model.params["mlm.bias"].data)
    assert hist[-1]["lr"] == 0.0


# ---------------------------------------------------------------- fine-tuning


def test_finetune_defaults():
    qa = FinetuneConfig.qa_defaults()
    assert (qa.epochs, qa.lr, qa.warmup_ratio, qa.max_seq_len) == (5, 1e-5, 0.1, 384)
    ie = FinetuneConfig.tokcls_defaults()
    assert (ie.epochs, ie.lr, ie.warmup_ratio, ie.max_seq_len) == (10, 2e-5, 0.1, 384)
    tc = qa.train_config(130)
    assert tc.optim.batch_size == 64 and tc.total_steps == 10


def _qa_features(n):
    train_rows, _ = synthetic.structure_qa_corpus(n, 1, seed=0)
    recs = [QARecord.from_dict(r) for r in train_rows]
    trees = [parse_html(r.html) for r in recs]
    from markup_pretrain.features import TextVocab, build_tag_vocab

    tv = build_tag_vocab(trees)
    xv = TextVocab.build([c for t in trees for nd in t.nodes for c, _ in nd.text_chunks] + [synthetic.QA_QUESTION])
    tok = P.make_tokenizer("word", xv)
    return [f for r in recs for f in prepare_qa(r, tok, tv, 64)[1]], len(xv)


def test_frozen_encoder_probe_learns():
    feats, vsize = _qa_features(32)
    model = MarkupModel(ModelConfig(text_vocab=vsize, d_h=32, n_layers=1, n_heads=2, dropout=0.0), seed=0)
    before = {n: t.data.copy() for n, t in model.params.items()}
    hist = finetune_qa(feats, model, FinetuneConfig(epochs=30, lr=1e-2, batch_size=8, freeze_encoder=True))
    for n, t in model.params.items():
        if not n.startswith("qa."):
            assert np.array_equal(t.data, before[n]), n
    first = np.mean([h["loss_total"] for h in hist[:8]])
    last = np.mean([h["loss_total"] for h in hist[-8:]])
    assert last < 0.8 * first

import numpy as np
import pytest

from markup_pretrain import tensor as T
from markup_pretrain.tensor import IndexOutOfRange, ParamStore, ShapeMismatch, Tensor

from gradcheck import check, param, rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- forward values


def test_affine_values():
    out = T.affine(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [[1.0, 0.0]]
    out = T.affine(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
    assert out.data.tolist() == [[16.0]]
    with pytest.raises(ShapeMismatch):
        T.affine(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0, 5.0]]))
    with pytest.raises(ShapeMismatch):
        T.affine(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([1.0, 2.0]))


def test_elementwise_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    g = T.gelu(Tensor([0.0, 1.0, -1.0])).data
    assert np.allclose(g, [0.0, 0.8413447460685429, -0.15865525393145707])
    ln = T.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert abs(ln.mean()) < 1e-12 and abs(ln.var() - 1.0) < 1e-9
    # epsilon guard on a constant row
    flat = T.layer_norm(Tensor([[2.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.all(np.isfinite(flat)) and np.allclose(flat, 0.0)


def test_softmax_extreme_inputs():
    p = T.softmax(Tensor([[1000.0, 0.0], [-1000.0, 1000.0]])).data
    assert np.allclose(p, [[1.0, 0.0], [0.0, 1.0]])


def test_embedding_lookup_values():
    table = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    out = T.embedding_lookup(table, [1, 0])
    assert out.data.tolist() == [[3.0, 4.0], [1.0, 2.0]]
    out = T.embedding_lookup(table, [0, 0])
    out.backward(np.ones((2, 2)))
    assert table.grad.tolist() == [[2.0, 2.0], [0.0, 0.0]]
    with pytest.raises(IndexOutOfRange):
        T.embedding_lookup(table, [2])
    with pytest.raises(IndexOutOfRange):
        T.embedding_lookup(table, [-1])


def test_scatter_add_matches_add_at(rng):
    idx = rng.integers(0, 7, size=200)
    rows = rng.normal(size=(200, 3))
    ref = np.zeros((7, 3))
    np.add.at(ref, idx, rows)
    assert np.allclose(T.scatter_add_rows(7, idx, rows), ref, atol=1e-12)
    assert T.scatter_add_rows(4, np.zeros(0, dtype=np.int64), np.zeros((0, 3))).shape == (4, 3)


def test_level_lookup_uses_own_tables(rng):
    tables = Tensor(rng.normal(size=(3, 4, 2)))
    ids = np.array([[1, 2, 3]])
    out = T.level_embedding_lookup(tables, ids).data
    for j in range(3):
        assert np.array_equal(out[0, j], tables.data[j, ids[0, j]])
    with pytest.raises(ShapeMismatch):
        T.level_embedding_lookup(tables, np.array([[1, 2]]))
    with pytest.raises(IndexOutOfRange):
        T.level_embedding_lookup(tables, np.array([[1, 2, 4]]))


def test_cross_entropy_values():
    loss, ign = T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
    assert loss.item() < 1e-12 and not ign
    loss, _ = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert abs(loss.item() - np.log(2)) < 1e-12
    loss, ign = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [-100])
    assert ign and loss.item() == 0.0
    with pytest.raises(IndexOutOfRange):
        T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_ignores_rows(rng):
    logits = rng.normal(size=(6, 4))
    labels = np.array([0, -100, 3, -100, 1, 2])
    x = Tensor(logits.copy(), requires_grad=True)
    loss, _ = T.softmax_cross_entropy(x, labels)
    keep = labels != -100
    sub = logits[keep]
    ref = np.mean(np.log(np.exp(sub).sum(1)) - sub[np.arange(keep.sum()), labels[keep]])
    assert abs(loss.item() - ref) < 1e-12
    loss.backward()
    assert np.all(x.grad[~keep] == 0.0)


def test_attention_single_position_is_value_projection(rng):
    d = 4
    p = {f"{n}.weight": Tensor(rng.normal(size=(d, d))) for n in "qkvo"}
    p.update({f"{n}.bias": Tensor(rng.normal(size=d)) for n in "qkvo"})
    x = Tensor(rng.normal(size=(1, 1, d)))
    out = T.multi_head_attention(x, p, np.ones((1, 1), bool), 2).data
    v = x.data @ p["v.weight"].data.T + p["v.bias"].data
    ref = v @ p["o.weight"].data.T + p["o.bias"].data
    assert np.allclose(out, ref)


def test_attention_rows_sum_to_one(rng):
    q, k = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    probs = T.attention_probs(q, k, mask, 2)
    assert np.allclose(probs.sum(-1), 1.0)
    assert np.all(probs[0, :, :, 3:] < 1e-300 + 1e-12)
    with pytest.raises(ShapeMismatch):
        T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(k), mask, 3)


def _layer_params(rng, d, d_ff, dtype=np.float64):
    return {n: Tensor(T.init_param(n, s, rng, dtype) + (rng.normal(scale=0.3, size=s) if not n.endswith("gain") else 0), requires_grad=True)
            for n, s in T.encoder_layer_shapes(d, d_ff).items()}


def test_encoder_pad_invariance(rng):
    d = 8
    p = _layer_params(rng, d, 16)
    x = rng.normal(size=(1, 5, d))
    mask = np.array([[1, 1, 1, 0, 0]], bool)
    a = T.encoder_layer(Tensor(x), p, mask, 2).data
    x2 = x.copy()
    x2[0, 3:] = rng.normal(size=(2, d)) * 100
    b = T.encoder_layer(Tensor(x2), p, mask, 2).data
    assert np.allclose(a[0, :3], b[0, :3], atol=1e-12)


def test_encoder_deterministic(rng):
    p = _layer_params(rng, 8, 16)
    x = rng.normal(size=(2, 4, 8))
    m = np.ones((2, 4), bool)
    assert np.array_equal(T.encoder_layer(Tensor(x), p, m, 2).data, T.encoder_layer(Tensor(x), p, m, 2).data)


# ---------------------------------------------------------------- gradient checks


def test_grad_affine(rng):
    x, W, b = param(rng, 3, 4), param(rng, 5, 4), param(rng, 5)
    assert check(lambda: T.affine(x, W, b), [x, W, b]) < 1e-6
    x3 = param(rng, 2, 3, 4)
    assert check(lambda: T.affine(x3, W, b), [x3, W, b]) < 1e-6


def test_grad_relu(rng):
    x = param(rng, 4, 5)
    x.data[np.abs(x.data) < 1e-3] = 0.5  # keep away from the kink
    assert check(lambda: T.relu(x), [x]) < 1e-6


def test_grad_gelu(rng):
    x = param(rng, 4, 5, scale=2.0)
    assert check(lambda: T.gelu(x), [x]) < 1e-6


def test_grad_softmax(rng):
    x = param(rng, 3, 6)
    assert check(lambda: T.softmax(x, axis=-1), [x]) < 1e-6
    assert check(lambda: T.softmax(x, axis=0), [x]) < 1e-6


def test_grad_layer_norm(rng):
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    assert check(lambda: T.layer_norm(x, g, b), [x, g, b]) < 1e-6


def test_grad_embedding(rng):
    table = param(rng, 5, 3)
    ids = np.array([[0, 4, 4], [2, 0, 1]])
    assert check(lambda: T.embedding_lookup(table, ids), [table]) < 1e-6


def test_grad_level_embedding(rng):
    tables = param(rng, 3, 4, 2)
    ids = np.array([[0, 1, 3], [0, 1, 2], [3, 3, 3]])
    assert check(lambda: T.level_embedding_lookup(tables, ids), [tables]) < 1e-6


def test_grad_cross_entropy(rng):
    x = param(rng, 5, 4)
    labels = np.array([1, -100, 3, 0, 0])
    assert check(lambda: T.softmax_cross_entropy(x, labels)[0], [x]) < 1e-6


def test_grad_bilinear(rng):
    a, b, W, bias = param(rng, 3, 4), param(rng, 3, 5), param(rng, 2, 4, 5), param(rng, 2)
    assert check(lambda: T.bilinear(a, b, W, bias), [a, b, W, bias]) < 1e-6


def test_grad_shape_ops(rng):
    a, b = param(rng, 2, 3), param(rng, 2, 4)
    assert check(lambda: T.concat([a, b], axis=-1), [a, b]) < 1e-6
    assert check(lambda: T.reshape(b, (4, 2)), [b]) < 1e-6
    c = param(rng, 1, 3)
    assert check(lambda: T.add(a, c), [a, c]) < 1e-6
    assert check(lambda: T.mul(a, c), [a, c]) < 1e-6
    assert check(lambda: T.scale(a, 0.5), [a]) < 1e-6
    assert check(lambda: T.take_last(a, 1), [a]) < 1e-6
    assert check(lambda: T.sum_all(a), [a]) < 1e-6
    x = param(rng, 2, 3, 4)
    assert check(lambda: T.gather_rows(x, np.array([0, 1, 1, 0]), np.array([2, 0, 0, 2])), [x]) < 1e-6


def test_grad_dropout_fixed_mask(rng):
    x = param(rng, 4, 4)
    assert check(lambda: T.dropout(x, 0.3, np.random.default_rng(7)), [x]) < 1e-6


def test_grad_attention_core(rng):
    q, k, v = param(rng, 2, 3, 4), param(rng, 2, 3, 4), param(rng, 2, 3, 4)
    mask = np.array([[1, 1, 0], [1, 1, 1]], bool)
    assert check(lambda: T.scaled_dot_attention(q, k, v, mask, 2), [q, k, v]) < 1e-6


def test_grad_encoder_layer(rng):
    d = 8
    p = _layer_params(rng, d, 16)
    x = param(rng, 1, 3, d)
    mask = np.ones((1, 3), bool)
    assert check(lambda: T.encoder_layer(x, p, mask, 2), [x] + list(p.values())) < 1e-5


def test_backward_accumulates_shared_inputs(rng):
    x = param(rng, 3)
    y = T.add(T.mul(x, x), x)
    y.backward(np.ones(3))
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_deep_graph_backward():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    y.backward(np.ones(2))
    assert x.grad.tolist() == [1.0, 1.0]


# ---------------------------------------------------------------- parameters


def test_init_conventions(rng):
    w = T.init_param("a.weight", (200, 200), rng)
    assert abs(w.std() - 0.02 * 0.88) < 0.002 and np.abs(w).max() <= 0.04
    assert (T.init_param("a.bias", (3,), rng) == 0).all()
    assert (T.init_param("a.gain", (3,), rng) == 1).all()


def test_param_store_round_trip(tmp_path, rng):
    s = ParamStore()
    s.add("a.weight", rng.normal(size=(3, 4)).astype(np.float32))
    s.add("b.bias", rng.normal(size=(5,)).astype(np.float32))
    s.add("c.tables", rng.normal(size=(2, 3, 4)).astype(np.float32))
    blob = s.to_bytes()
    back = ParamStore.from_bytes(blob)
    assert list(back) == list(s)
    for name in s:
        assert np.array_equal(back[name].data, s[name].data)
    assert back.to_bytes() == blob
    s.save(tmp_path / "p.bin")
    assert (tmp_path / "p.bin").read_bytes() == blob
    with pytest.raises(KeyError):
        s.add("a.weight", np.zeros(1))
    with pytest.raises(ValueError):
        ParamStore.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        ParamStore.from_bytes(blob + b"\0")
    # payload is little-endian fp32 at the tail
    tail = np.frombuffer(blob[-4 * 24:], dtype="<f4")
    assert np.array_equal(tail, s["c.tables"].data.reshape(-1))

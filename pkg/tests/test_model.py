import numpy as np
import pytest

from xmc import autodiff as ad
from xmc.model import (
    ModelConfig,
    ModelError,
    ModelParameters,
    batch_probs,
    decode,
    dumps,
    encode,
    forward,
    init_params,
    load_model,
    loads,
    pad_batch,
    predict,
    save_model,
)


def small(seed=0, **kw):
    cfg = ModelConfig(vocab_size=kw.pop("V", 12), num_classes=kw.pop("J", 3), embed_dim=kw.pop("D", 8),
                      layers=kw.pop("L", 2), heads=kw.pop("h", 2), max_len=16, dropout=0.0, **kw)
    return init_params(cfg, seed)


# ---------------------------------------------------------------- numpy oracle

def np_ln(x, g=None, b=None, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    return y if g is None else y * g + b


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def np_forward(p: ModelParameters, ids):
    w, c = p.arrays, p.config
    N, D, h = len(ids), c.embed_dim, c.heads
    dh = D // h
    x = w["tok_emb"][ids] + w["pos_emb"][:N]
    for l in range(c.layers):
        q = f"enc{l}."
        a = np_ln(x, w[q + "ln1.g"], w[q + "ln1.b"])
        Q, K, V = (a @ w[q + k] + w[q + b] for k, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")))
        out = np.zeros_like(x)
        for hd in range(h):
            sl = slice(hd * dh, (hd + 1) * dh)
            P = np_softmax(Q[:, sl] @ K[:, sl].T / np.sqrt(dh))
            out[:, sl] = P @ V[:, sl]
        x = x + out @ w[q + "wo"] + w[q + "bo"]
        a2 = np_ln(x, w[q + "ln2.g"], w[q + "ln2.b"])
        x = x + np_gelu(a2 @ w[q + "w1"] + w[q + "b1"]) @ w[q + "w2"] + w[q + "b2"]
    H = np_ln(x, w["lnf.g"], w["lnf.b"])
    return H, np_decode(p, H)


def np_decode(p, H):
    w = p.arrays
    K, V = H @ w["dec.w_key"], H @ w["dec.w_value"]
    A = np_softmax(w["dec.class_emb"] @ K.T)
    ctx = np_ln(A @ V, w["dec.ln.g"], w["dec.ln.b"])
    return 1 / (1 + np.exp(-(ctx @ w["dec.w_out"]))), A


def test_forward_matches_numpy_oracle():
    p = small(1)
    ids = np.array([2, 7, 5, 9, 3])
    H, (probs, A) = np_forward(p, ids)
    fr = predict(ids, p)
    assert np.max(np.abs(fr.hidden - H)) < 1e-9
    assert np.max(np.abs(fr.probs - probs)) < 1e-12
    assert np.max(np.abs(fr.attention - A)) < 1e-12


def test_handcrafted_one_layer_encoder_two_tokens():
    p = small(2, D=4, L=1, h=1)
    ids = np.array([5, 6])
    H, _ = encode(ids, p)
    assert np.max(np.abs(H - np_forward(p, ids)[0])) < 1e-9


def test_handcrafted_decoder():
    cfg = ModelConfig(vocab_size=6, num_classes=1, embed_dim=2, layers=0, heads=1, max_len=4, dropout=0.0)
    p = init_params(cfg, 0)
    p.arrays["dec.w_key"][:] = [[1.0, 0.5], [-0.5, 2.0]]
    p.arrays["dec.w_value"][:] = [[0.3, -1.0], [1.2, 0.4]]
    p.arrays["dec.class_emb"][:] = [[0.7, -0.2]]
    p.arrays["dec.w_out"][:] = [1.5, -0.5]
    H = np.array([[0.1, 0.2], [-1.0, 0.5], [0.3, -0.7]])
    probs, A = decode(H, p)
    s = np.array([0.7, -0.2]) @ (H @ p.arrays["dec.w_key"]).T
    a = np.exp(s) / np.exp(s).sum()
    v = a @ (H @ p.arrays["dec.w_value"])
    z = (v - v.mean()) / np.sqrt(((v - v.mean()) ** 2).mean() + 1e-5)
    y = 1 / (1 + np.exp(-(z @ np.array([1.5, -0.5]))))
    assert abs(probs[0] - y) < 1e-9 and np.max(np.abs(A[0] - a)) < 1e-9


def test_zero_encoder_weights_give_embeddings_plus_positions():
    cfg = ModelConfig(vocab_size=8, num_classes=2, embed_dim=4, layers=1, heads=2, max_len=8, dropout=0.0)
    p = init_params(cfg, 3)
    for k in p.arrays:
        if k.startswith("enc0.") and not k.endswith(".g"):
            p.arrays[k][:] = 0.0
    ids = np.array([1, 4, 6])
    w = p.tensors()
    with ad.no_record():
        out = forward(w, cfg, ids[None])
    X = p.arrays["tok_emb"][ids] + p.arrays["pos_emb"][:3]
    assert np.allclose(out.H.data[0], np_ln(X, p.arrays["lnf.g"], p.arrays["lnf.b"]), atol=1e-12)


def test_w_out_zero_gives_half():
    p = small(4)
    p.arrays["dec.w_out"][:] = 0.0
    assert np.all(predict(np.array([1, 2, 3]), p).probs == 0.5)


def test_constant_scores_give_uniform_attention():
    p = small(5)
    p.arrays["dec.class_emb"][:] = 0.0
    fr = predict(np.array([2, 3, 4, 5]), p)
    assert np.allclose(fr.attention, 0.25, atol=1e-15)


def test_attention_rows_stochastic():
    fr = predict(np.array([1, 5, 3, 7, 2, 2]), small(6))
    assert np.allclose(fr.attention.sum(-1), 1.0, atol=1e-9)
    for P in fr.self_attention:
        assert np.allclose(P.sum(-1), 1.0, atol=1e-9)
    assert np.all((fr.probs > 0) & (fr.probs < 1))


def test_class_permutation_equivariance():
    p = small(7, J=4)
    q = p.copy()
    perm = np.array([2, 0, 3, 1])
    q.arrays["dec.class_emb"] = p.arrays["dec.class_emb"][perm]
    ids = np.array([1, 4, 9, 2])
    a, b = predict(ids, p), predict(ids, q)
    assert np.allclose(b.probs, a.probs[perm], atol=1e-14)
    assert np.allclose(b.attention, a.attention[perm], atol=1e-14)
    assert np.array_equal(a.hidden, b.hidden)


def test_predict_deterministic():
    p = small(8)
    ids = np.array([3, 1, 4, 1, 5])
    a, b = predict(ids, p), predict(ids, p)
    assert np.array_equal(a.probs, b.probs) and np.array_equal(a.gradients(1)[0], b.gradients(1)[0])


@pytest.mark.parametrize("seed", range(5))
def test_input_and_attention_gradients_vs_finite_differences(seed):
    p = small(seed, D=8)
    ids = np.random.default_rng(seed).integers(0, 12, size=6)
    fr = predict(ids, p)
    j = seed % 3
    gX, gA = fr.gradients(j)
    w = p.tensors()
    X0 = p.arrays["tok_emb"][ids]

    def fX(X):
        return ad.sum_(forward(w, p.config, ids[None], X=ad.reshape(X, (1, 6, 8))).probs[:, j])

    fd = ad.finite_diff_grad(fX, {"X": X0})["X"]
    assert np.max(np.abs(gX - fd)) / np.max(np.abs(fd)) < 1e-4

    H = fr.hidden
    V = H @ p.arrays["dec.w_value"]

    def fA(a):
        ctx = ad.layernorm(ad.matmul(ad.reshape(a, (1, -1)), V))
        z = ad.add(ad.mul(ctx, p.arrays["dec.ln.g"]), p.arrays["dec.ln.b"])
        return ad.sigmoid(ad.sum_(ad.mul(z, p.arrays["dec.w_out"])))

    fdA = ad.finite_diff_grad(fA, {"a": fr.attention[j]})["a"]
    assert np.max(np.abs(gA - fdA)) / np.max(np.abs(fdA)) < 1e-4


def test_padding_does_not_change_predictions():
    p = small(9)
    seqs = [np.array([2, 3, 4]), np.array([5, 6, 7, 8, 9, 10])]
    batched = batch_probs(p, seqs)
    for s, row in zip(seqs, batched):
        assert np.allclose(predict(s, p).probs, row, atol=1e-12)
    ids, mask = pad_batch(seqs)
    assert ids.shape == (2, 6) and mask.sum() == 9


def test_token_errors():
    p = small(10)
    with pytest.raises(ModelError, match="position 2"):
        predict(np.array([1, 2, 99]), p)
    with pytest.raises(ModelError, match="exceeds max_len"):
        predict(np.ones(17, dtype=int), p)


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=10, num_classes=2, embed_dim=5, heads=2)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=10, num_classes=2, max_len=2)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=10, num_classes=2, dropout=1.0)


def test_serialization_round_trip_and_validation(tmp_path):
    p = small(11, labels=("a", "b", "c"))
    save_model(tmp_path / "m.xmc", p)
    q = load_model(tmp_path / "m.xmc")
    assert q.config == p.config
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)
    blob = dumps(p)
    assert blob[:4] == b"XMC1"
    with pytest.raises(ModelError, match="magic"):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(ModelError, match="bytes"):
        loads(blob[:-8])
    with pytest.raises(ModelError, match="version"):
        loads(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_dropout_only_with_rng():
    cfg = ModelConfig(vocab_size=12, num_classes=3, embed_dim=8, layers=2, heads=2, max_len=16, dropout=0.5)
    p = init_params(cfg, 0)
    w = p.tensors()
    ids = np.array([[1, 2, 3, 4]])
    with ad.no_record():
        a = forward(w, cfg, ids).probs.data
        b = forward(w, cfg, ids, rng=np.random.default_rng(0)).probs.data
        c = forward(w, cfg, ids, rng=np.random.default_rng(0)).probs.data
    assert np.array_equal(a, predict(ids[0], p).probs[None])
    assert not np.array_equal(a, b) and np.array_equal(b, c)

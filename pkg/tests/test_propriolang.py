"""Joint softmax codec, feed-forward heads, language rollout, sentence codec."""

import numpy as np
import pytest

from visuolang import propriolang as pl
from visuolang.diffcore import Rng, Tensor
from visuolang.gradcheck import check_gradients
from visuolang.propriolang import (Vocabulary, decode_joints, encode_joints,
                                   init_language_weights, init_proprio_heads,
                                   joint_bin_centers, language_rollout,
                                   layer_norm, proprio_heads)


# -- joint codec ----------------------------------------------------------------

def test_encode_peaks_on_nearest_center():
    centers = joint_bin_centers()
    soft = encode_joints(np.array([centers[3], centers[7]]))
    assert soft[0].argmax() == 3
    assert soft[1].argmax() == 7


def test_encode_rows_sum_to_one():
    rng = Rng(0)
    soft = encode_joints(rng.uniform(0, 1, (4, 6)))
    np.testing.assert_allclose(soft.sum(axis=-1), 1.0, atol=1e-12)
    assert (soft >= 0).all()


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        encode_joints(np.array([0.5, 1.2]))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        encode_joints(np.array([-0.01]))


def test_decode_one_hot_returns_center_exactly():
    k = 10
    centers = joint_bin_centers(k)
    rows = np.eye(k)
    np.testing.assert_array_equal(decode_joints(rows), centers)


def test_decode_uniform_is_midpoint():
    assert decode_joints(np.full((1, 10), 0.1))[0] == pytest.approx(0.5, abs=1e-12)


def test_decode_matches_dot_product_oracle():
    rng = Rng(1)
    raw = rng.uniform(0, 1, (5, 10))
    simplex = raw / raw.sum(axis=-1, keepdims=True)
    got = decode_joints(simplex)
    centers = joint_bin_centers(10)
    for j in range(5):
        ref = sum(simplex[j, b] * centers[b] for b in range(10))
        assert abs(got[j] - ref) < 1e-12


def test_decode_rejects_non_simplex():
    with pytest.raises(ValueError, match="simplex"):
        decode_joints(np.full((1, 10), 0.2))


def test_round_trip_interior_angles():
    k = 10
    bin_width = 1.0 / (k - 1)
    angles = np.linspace(0.05, 0.95, 181)
    back = decode_joints(encode_joints(angles, k))
    assert np.abs(back - angles).max() < bin_width / 10


def test_decode_is_differentiable():
    soft = Tensor(encode_joints(np.array([0.3, 0.8])), requires_grad=True)
    out = decode_joints(soft)
    out.sum().backward()
    np.testing.assert_allclose(soft.grad,
                               np.broadcast_to(joint_bin_centers(10), (2, 10)))


# -- feed-forward heads ---------------------------------------------------------

def test_layer_norm_matches_numpy_oracle():
    rng = Rng(2)
    x = rng.normal((3, 8))
    gain = rng.normal((8,))
    bias = rng.normal((8,))
    got = layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * gain + bias
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_heads_zero_weights_zero_outputs():
    w = {k: Tensor(np.zeros_like(v.data))
         for k, v in init_proprio_heads(8, 3, 10, Rng(3)).items()}
    logits, raw_att, raw_m2 = proprio_heads(Tensor(np.zeros(8)), w, 3, 10)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_array_equal(raw_att.data, 0.0)
    np.testing.assert_array_equal(raw_m2.data, 0.0)
    # raw zeros put the attention window at the frame center
    from visuolang.vision import attention_params_from_raw
    p = attention_params_from_raw(raw_att)
    assert p.center_x.item() == pytest.approx(0.5)
    assert p.center_y.item() == pytest.approx(0.5)


def test_heads_shapes_and_batching():
    rng = Rng(4)
    w = init_proprio_heads(8, 4, 10, rng)
    logits, raw_att, raw_m2 = proprio_heads(Tensor(rng.normal((8,))), w, 4, 10)
    assert logits.shape == (4, 10)
    assert raw_att.shape == (4,)
    assert raw_m2.shape == (6,)
    xb = rng.normal((3, 8))
    lb, ab, mb = proprio_heads(Tensor(xb), w, 4, 10)
    assert lb.shape == (3, 4, 10) and ab.shape == (3, 4) and mb.shape == (3, 6)
    l0, a0, m0 = proprio_heads(Tensor(xb[1]), w, 4, 10)
    np.testing.assert_allclose(lb.data[1], l0.data, atol=1e-13)
    np.testing.assert_allclose(ab.data[1], a0.data, atol=1e-13)


def test_heads_have_disjoint_parameters():
    rng = Rng(5)
    w = init_proprio_heads(6, 2, 5, rng)
    x = Tensor(rng.normal((6,)))
    _, att0, m20 = proprio_heads(x, w, 2, 5)
    w2 = dict(w)
    for key in w:
        if key.startswith("head.joint."):
            w2[key] = Tensor(w[key].data + 1.0)
    _, att1, m21 = proprio_heads(x, w2, 2, 5)
    np.testing.assert_array_equal(att0.data, att1.data)
    np.testing.assert_array_equal(m20.data, m21.data)


def test_heads_gradcheck():
    rng = Rng(6)
    w = init_proprio_heads(5, 2, 4, rng)
    x = Tensor(rng.normal((5,)))
    names = sorted(w)

    def fn(xx, *params):
        ww = dict(zip(names, params))
        logits, raw_att, raw_m2 = proprio_heads(xx, ww, 2, 4)
        return logits.sum() + (raw_att * raw_att).sum() + raw_m2.sum()

    err = check_gradients(fn, [x] + [w[n] for n in names])
    assert err < 1e-5


# -- language network -----------------------------------------------------------

def test_language_rollout_rows_sum_to_one():
    rng = Rng(7)
    w = init_language_weights(10, rng)
    out = language_rollout(Tensor(rng.uniform(-1, 1, (10,))), w)
    assert out.shape == (5, 20)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_language_rollout_deterministic():
    rng = Rng(8)
    w = init_language_weights(10, rng)
    pb = Tensor(rng.uniform(-1, 1, (10,)))
    a = language_rollout(pb, w).data
    b = language_rollout(pb, w).data
    np.testing.assert_array_equal(a, b)


def test_language_rollout_matches_loop_oracle():
    from test_cells import lstm_reference
    rng = Rng(9)
    w = init_language_weights(3, rng, vocab=4, hidden=5)
    pb = rng.uniform(-1, 1, (3,))
    got = language_rollout(Tensor(pb), w).data

    h, c = np.zeros(5), np.zeros(5)
    word = np.zeros(4)
    for t in range(5):
        x = np.concatenate([pb, word])
        h, c = lstm_reference(x, h, c, w["lang.W_x"].data, w["lang.W_h"].data,
                              w["lang.b"].data)
        logits = h @ w["lang.W_out"].data + w["lang.b_out"].data
        e = np.exp(logits - logits.max())
        word = e / e.sum()
        np.testing.assert_allclose(got[t], word, atol=1e-12)


def test_language_rollout_batched_matches_single():
    rng = Rng(10)
    w = init_language_weights(6, rng)
    pbs = rng.uniform(-1, 1, (3, 6))
    batch = language_rollout(Tensor(pbs), w).data
    assert batch.shape == (3, 5, 20)
    for b in range(3):
        single = language_rollout(Tensor(pbs[b]), w).data
        np.testing.assert_allclose(batch[b], single, atol=1e-13)


def test_language_rollout_gradcheck_wrt_pb():
    rng = Rng(11)
    w = init_language_weights(4, rng, vocab=5, hidden=6)
    pb = Tensor(rng.uniform(-1, 1, (4,)))
    target = rng.uniform(0, 1, (5, 5))

    def fn(p):
        out = language_rollout(p, w)
        diff = out - Tensor(target)
        return (diff * diff).sum()

    assert check_gradients(fn, [pb]) < 1e-5


# -- sentence codec -------------------------------------------------------------

@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.load()


def test_vocabulary_has_twenty_entries(vocab):
    assert len(vocab.tokens) == 20
    assert "." in vocab.tokens


def test_encode_short_sentence_pads_with_zeros(vocab):
    rows = vocab.encode_sentence(["grasp", "red", "."])
    assert rows.shape == (5, 20)
    for i, word in enumerate(["grasp", "red", "."]):
        assert rows[i].sum() == 1.0
        assert rows[i, vocab.index(word)] == 1.0
    np.testing.assert_array_equal(rows[3:], 0.0)


def test_encode_full_length_sentence(vocab):
    rows = vocab.encode_sentence(["put", "red", "on", "green", "."])
    assert (rows.sum(axis=-1) == 1.0).all()
    assert rows[4, vocab.index(".")] == 1.0


def test_codec_round_trip(vocab):
    for words in (["grasp", "red", "."],
                  ["move", "blue", "left", "."],
                  ["put", "yellow", "on", "purple", "."],
                  ["."]):
        assert vocab.decode_sentence(vocab.encode_sentence(words)) == words


def test_decode_stops_at_terminator(vocab):
    rows = vocab.encode_sentence(["grasp", "red", "."])
    rows[3, 0] = 1.0  # junk after the terminator must be ignored
    assert vocab.decode_sentence(rows) == ["grasp", "red", "."]


def test_encode_rejects_unknown_token(vocab):
    with pytest.raises(ValueError, match="grasp"):  # message lists vocabulary
        vocab.encode_sentence(["banana", "."])


def test_encode_rejects_missing_terminator(vocab):
    with pytest.raises(ValueError, match=r"\."):
        vocab.encode_sentence(["grasp", "red"])


def test_encode_rejects_overlong_sentence(vocab):
    with pytest.raises(ValueError, match="longer"):
        vocab.encode_sentence(["put", "red", "on", "green", "now", "."])


def test_vocabulary_rejects_wrong_size(tmp_path):
    p = tmp_path / "vocab.txt"
    p.write_text("a\nb\n.\n")
    with pytest.raises(ValueError, match="20"):
        Vocabulary.load(p)

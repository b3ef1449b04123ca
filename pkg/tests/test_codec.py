import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentfs.codec import (
    CodecConfig, EmptyReconstruction, MAB, PMA, SubsetEmbedding, build_codec, count_flops, decode, encode,
    encode_batch, export_embeddings, ids_from_logits, isab, isab_matmul_flops, load_checkpoint, mab, pma,
    reconstruction_accuracy, reconstruction_loss, save_checkpoint, train_codec,
)
from latentfs.data import Performance
from latentfs.records import FeatureSubset, RecordStore, SelectionRecord
from oracles import linear, layer_norm, mab_oracle


def small(universe=10, **kw):
    kw = {"d": 16, "heads": 2, "M": 4, "pool_width": 8, **kw}
    return CodecConfig(universe_size=universe, **kw)


def store_of(subsets, n):
    return RecordStore(n, [SelectionRecord(FeatureSubset(tuple(s), n), Performance("f1", 0.5, 5, 0))
                           for s in subsets])


@pytest.fixture(scope="module")
def codec64():
    return build_codec(small(12), seed=1, dtype=torch.float64)


def test_config_defaults_and_validation():
    c = CodecConfig(universe_size=20)
    assert (c.d, c.heads, c.M, c.lr, c.batch, c.augment) == (128, 4, 32, 1e-3, 64, 25)
    assert c.vocab == 22 and c.pad == 20 and c.K == c.n_max == 20
    with pytest.raises(ValueError):
        CodecConfig(universe_size=5, d=10, heads=4)
    with pytest.raises(ValueError):
        CodecConfig(universe_size=5, M=0)


def test_decoder_shapes(codec64):
    c = codec64.config
    assert codec64.pma.seeds.shape == (c.K, c.d)
    assert codec64.isab1.inducing.shape == (c.M, c.d)
    assert codec64.embed.weight.shape == (c.vocab, c.d)


# ---------------------------------------------------------------- mab

def test_mab_shape_and_kv_symmetry():
    torch.manual_seed(0)
    block = MAB(8, 2).double()
    Q, K = torch.randn(3, 8, dtype=torch.float64), torch.randn(5, 8, dtype=torch.float64)
    out = mab(Q, K, K, block)
    assert out.shape == (3, 8)
    perm = torch.randperm(5)
    assert torch.allclose(mab(Q, K[perm], K[perm], block), out, atol=1e-6)


def test_mab_rejects_bad_inputs():
    block = MAB(8, 2).double()
    x = torch.randn(3, 8, dtype=torch.float64)
    with pytest.raises(ValueError):
        mab(x, torch.randn(3, 6, dtype=torch.float64), x, block)
    bad = x.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(ValueError):
        mab(bad, x, x, block)


def test_mab_hand_fixed_two_by_two():
    block = MAB(2, 1).double()
    with torch.no_grad():
        for lin, w in ((block.attn.q, [[1, 0], [0, 1]]), (block.attn.k, [[0.5, 0], [0, 2]]),
                       (block.attn.v, [[1, 1], [0, 1]]), (block.attn.o, [[1, 0], [0, 1]])):
            lin.weight.copy_(torch.tensor(w, dtype=torch.float64))
            lin.bias.zero_()
    Q = np.array([[1.0, 0.0], [0.0, 1.0]])
    K = np.array([[2.0, 1.0], [-1.0, 3.0]])
    # hand computation of the attention term for this instance
    q, k, v = Q, K @ np.array([[0.5, 0], [0, 2]]).T, K @ np.array([[1, 1], [0, 1]]).T
    s = q @ k.T / math.sqrt(2)
    a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    H = layer_norm(Q + a @ v, [1, 1], [0, 0], 1e-5)
    expected = layer_norm(H + linear(np.maximum(linear(H, block.ff.fc1), 0), block.ff.fc2), [1, 1], [0, 0], 1e-5)
    got = mab(torch.tensor(Q), torch.tensor(K), torch.tensor(K), block).detach().numpy()
    np.testing.assert_allclose(got, expected, atol=1e-10)
    np.testing.assert_allclose(got, mab_oracle(Q, K, K, block), atol=1e-10)


# ---------------------------------------------------------------- isab / pma

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 1000))
def test_isab_equivariance(codec64, n, seed):
    g = torch.Generator().manual_seed(seed)
    X = torch.randn(n, codec64.config.d, generator=g, dtype=torch.float64)
    perm = torch.randperm(n, generator=g)
    out = isab(X, codec64.isab1)
    assert out.shape == X.shape
    assert torch.allclose(isab(X[perm], codec64.isab1), out[perm], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 1000))
def test_pma_invariance(codec64, n, seed):
    g = torch.Generator().manual_seed(seed)
    E = torch.randn(n, codec64.config.d, generator=g, dtype=torch.float64)
    perm = torch.randperm(n, generator=g)
    out = pma(E, codec64.pma)
    assert out.shape == (codec64.config.K, codec64.config.d)
    assert (pma(E[perm], codec64.pma) - out).abs().max() <= 1e-10


def test_pma_single_key_closed_form():
    torch.manual_seed(3)
    block = PMA(4, 1, K=3, pool_width=5).double()
    E = torch.randn(1, 4, dtype=torch.float64)
    z = block.rff(E).detach().numpy()
    # with one key the softmax weight is 1: every seed row attends fully to the projected value
    attn = linear(linear(z, block.mab.attn.v), block.mab.attn.o)
    S = block.seeds.detach().numpy()
    H = layer_norm(S + attn, block.mab.ln1.weight.detach().numpy(), block.mab.ln1.bias.detach().numpy(), 1e-5)
    ff = linear(np.maximum(linear(H, block.mab.ff.fc1), 0), block.mab.ff.fc2)
    expected = layer_norm(H + ff, block.mab.ln2.weight.detach().numpy(), block.mab.ln2.bias.detach().numpy(), 1e-5)
    np.testing.assert_allclose(pma(E, block).detach().numpy(), expected, atol=1e-10)


# ---------------------------------------------------------------- encode / decode

def test_encode_equivariance_and_singleton():
    codec = build_codec(small(10), seed=0)
    a, b = encode([3, 1, 7], codec), encode([7, 3, 1], codec)
    # row i of b corresponds to row perm[i] of a
    assert torch.allclose(b.E, a.E[[2, 0, 1]], atol=1e-5)
    assert torch.allclose(a.pooled, b.pooled, atol=1e-5)
    s = encode([4], codec)
    assert s.E.shape == (1, 16) and s.source_length == 1


def test_encode_errors():
    codec = build_codec(small(10, n_max=3), seed=0)
    with pytest.raises(ValueError):
        encode([10], codec)
    with pytest.raises(ValueError):
        encode([0, 1, 2, 3], codec)
    with pytest.raises(ValueError):
        encode([], codec)


def test_disjoint_subsets_embed_differently():
    codec = build_codec(small(20), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 11))
        ids = rng.permutation(20)
        a, b = encode(ids[:k].tolist(), codec), encode(ids[k: 2 * k].tolist(), codec)
        assert (a.E - b.E).abs().max() > 1e-3


@settings(max_examples=20, deadline=None)
@given(ids=st.lists(st.integers(0, 9), min_size=1, max_size=10, unique=True), seed=st.integers(0, 100))
def test_decode_is_order_free(ids, seed):
    codec = build_codec(small(10), seed=seed % 3)
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(ids).tolist()
    try:
        a = decode(encode(ids, codec), codec)
    except EmptyReconstruction:
        with pytest.raises(EmptyReconstruction):
            decode(encode(shuffled, codec), codec)
        return
    assert decode(encode(shuffled, codec), codec) == a


def test_empty_reconstruction():
    cfg = small(5)
    logits = torch.zeros(cfg.K, cfg.vocab)
    logits[:, cfg.pad] = 10.0
    with pytest.raises(EmptyReconstruction, match="empty reconstruction"):
        ids_from_logits(logits, cfg)


def test_ids_from_logits_dedups_and_sorts():
    cfg = small(5)
    logits = torch.zeros(cfg.K, cfg.vocab)
    for pos, tok in enumerate([4, 1, 4, cfg.pad, 1]):
        logits[pos, tok] = 1.0
    assert ids_from_logits(logits, cfg) == (1, 4)


def test_decode_rejects_bad_shape():
    codec = build_codec(small(5), seed=0)
    with pytest.raises(ValueError):
        decode(SubsetEmbedding(torch.zeros(1, 16), torch.zeros(2, 16), 1), codec)


# ---------------------------------------------------------------- loss

def test_loss_zero_for_certain_logits():
    cfg = small(6)
    f = FeatureSubset((4, 2), 6)
    logits = torch.full((cfg.K, cfg.vocab), -1e4, dtype=torch.float64)
    for pos, tok in enumerate([2, 4] + [cfg.pad] * (cfg.K - 2)):
        logits[pos, tok] = 0.0
    assert reconstruction_loss(f, logits, cfg).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform():
    cfg = small(6)
    loss = reconstruction_loss(FeatureSubset((1,), 6), torch.zeros(cfg.K, cfg.vocab, dtype=torch.float64), cfg)
    assert loss.item() == pytest.approx(cfg.K * math.log(cfg.vocab), abs=1e-12)


def test_loss_matches_softmax_oracle():
    cfg = small(4)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(cfg.K, cfg.vocab))
    target = [0, 3] + [cfg.pad] * (cfg.K - 2)
    expected = 0.0
    for pos, tok in enumerate(target):
        row = logits[pos]
        expected -= row[tok] - math.log(sum(math.exp(x) for x in row))
    got = reconstruction_loss(FeatureSubset((3, 0), 4), torch.tensor(logits), cfg).item()
    assert got == pytest.approx(expected, abs=1e-10)


def test_loss_rejects_long_target():
    cfg = small(6, n_max=2)
    with pytest.raises(ValueError):
        reconstruction_loss(FeatureSubset((0, 1, 2), 6), torch.zeros(2, cfg.vocab), cfg)


# ---------------------------------------------------------------- training

def test_one_record_memorized():
    cfg = CodecConfig(universe_size=20, epochs=200)
    store = store_of([[2, 9, 4, 17]], 20)
    codec, losses = train_codec(store, cfg, seed=0)
    assert min(losses) < 0.01
    assert decode(encode([17, 2, 4, 9], codec), codec).canonical == (2, 4, 9, 17)


def test_training_curve_trends_down():
    rng = np.random.default_rng(0)
    subsets = [rng.choice(12, size=int(rng.integers(1, 8)), replace=False).tolist() for _ in range(50)]
    cfg = small(12, epochs=15, augment=4)
    _, losses = train_codec(store_of(subsets, 12), cfg, seed=0)
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    subsets = [[0, 1], [2, 5, 7], [3]]
    cfg = small(8, epochs=5, augment=3)
    _, a = train_codec(store_of(subsets, 8), cfg, seed=5)
    _, b = train_codec(store_of(subsets, 8), cfg, seed=5)
    assert a == b


def test_divergence_reports_epoch():
    cfg = small(6, epochs=3, augment=1)
    codec = build_codec(cfg, seed=0)
    with torch.no_grad():
        codec.embed.weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train_codec(store_of([[1, 2]], 6), cfg, codec=codec)


def test_training_errors():
    with pytest.raises(ValueError):
        train_codec(RecordStore(6), small(6))
    with pytest.raises(ValueError):
        train_codec(store_of([[0, 1, 2]], 6), small(6, n_max=2))


def test_tokens_conditioning_variant_trains():
    cfg = small(8, epochs=300, augment=5, condition_on="tokens")
    store = store_of([[1, 5], [0, 3, 6]], 8)
    codec, losses = train_codec(store, cfg, seed=0)
    assert losses[-1] < losses[0]
    assert decode(encode([5, 1], codec), codec).canonical == (1, 5)


def test_record_weighting_flag_changes_training():
    recs = [SelectionRecord(FeatureSubset((0, 1), 6), Performance("f1", 0.5, 5, 0), 0, 10),
            SelectionRecord(FeatureSubset((2,), 6), Performance("f1", 0.5, 5, 0), 1, 90)]
    store = RecordStore(6, recs)
    _, plain = train_codec(store, small(6, epochs=3, augment=2), seed=0)
    _, weighted = train_codec(store, small(6, epochs=3, augment=2, record_weighting=True), seed=0)
    assert plain != weighted


# ---------------------------------------------------------------- persistence and accounting

def test_checkpoint_roundtrip(tmp_path):
    codec = build_codec(small(9), seed=2)
    path = tmp_path / "c.pt"
    save_checkpoint(codec, path)
    back = load_checkpoint(path)
    assert back.config == codec.config
    for (k, v), (k2, v2) in zip(codec.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    blob = torch.load(path, weights_only=True)
    assert blob["format_version"] == 1 and blob["shapes"]["pma.seeds"] == [9, 16]


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "c.pt"
    save_checkpoint(build_codec(small(4), seed=0), path)
    blob = torch.load(path, weights_only=True)
    blob["format_version"] = 99
    torch.save(blob, path)
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)


def test_export_embeddings(tmp_path):
    codec = build_codec(small(6), seed=0)
    store = store_of([[0, 3], [5]], 6)
    assert export_embeddings(codec, store, tmp_path / "e.jsonl") == 2
    rows = [json.loads(line) for line in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert rows[1]["ids"] == [5] and np.array(rows[0]["pooled"]).shape == (6, 16)


def test_reconstruction_accuracy_range():
    codec = build_codec(small(6), seed=0)
    acc = reconstruction_accuracy(codec, [[0, 1], [2], [3, 4, 5]])
    assert 0.0 <= acc <= 1.0


def test_encode_batch_matches_single():
    codec = build_codec(small(8), seed=0)
    P = encode_batch([[1, 2, 3], [7]], codec)
    assert torch.allclose(P[1], encode([7], codec).pooled, atol=1e-5)
    assert torch.allclose(P[0], encode([3, 1, 2], codec).pooled, atol=1e-5)


def test_flop_counter_matches_closed_form():
    cfg = CodecConfig(universe_size=64, d=32, heads=4, M=8)
    codec = build_codec(cfg, seed=0)
    X = torch.randn(1, 64, 32)
    counted = count_flops(codec.isab1, X)
    assert counted == isab_matmul_flops(64, 8, 32)

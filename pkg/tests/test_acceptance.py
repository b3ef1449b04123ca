"""Acceptance checks, one test per criterion, run at the stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import json
import math
import os
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import torch

from latentfs.codec import (
    CodecConfig, EmptyReconstruction, build_codec, count_flops, decode, encode, encode_batch, isab, pad_batch,
    reconstruction_loss, train_codec, training_examples, decode_pooled,
)
from latentfs.collector import CollectorConfig, collect_random
from latentfs.data import ClientDataset, SubsetEvaluator, load_dataset, make_synthetic, partition_clients
from latentfs.federation import (
    Federation, audit_messages, centralized_search, client_weights, federated_search, load_schema,
    weighted_global_performance,
)
from latentfs.experiment import DatasetSpec, ExperimentConfig, run_experiment
from latentfs.search import SearchConfig, actor_objective, critic_loss, discounted_returns
from oracles import brute_returns, dot, finite_difference_grads, mab_oracle, mse

criterion = pytest.mark.criterion
INFORMATIVE = {0, 1, 2, 3, 4}  # make_synthetic keeps informative columns first


# ---------------------------------------------------------------- 1

@criterion(1, "permutation invariance of pooling, decoding and ISAB")
def test_permutation_invariance():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    subsets = [sorted(rng.choice(20, size=int(rng.integers(2, 9)), replace=False).tolist()) for _ in range(5)]
    cfg = CodecConfig(universe_size=20, epochs=30)
    store_subsets = [s for s in subsets]
    from latentfs.records import FeatureSubset, RecordStore, SelectionRecord
    from latentfs.data import Performance
    store = RecordStore(20, [SelectionRecord(FeatureSubset(tuple(s), 20), Performance("f1", 0.5, 5, 0))
                             for s in store_subsets])
    codec, _ = train_codec(store, cfg, seed=0)
    for s in subsets:
        ref = encode(s, codec)
        try:
            ref_set = decode(ref, codec).canonical
        except EmptyReconstruction:
            ref_set = None
        for _ in range(20):
            perm = rng.permutation(len(s))
            shuffled = [s[i] for i in perm]
            emb = encode(shuffled, codec)
            assert (emb.pooled - ref.pooled).abs().max().item() <= 1e-5
            assert (emb.E - ref.E[perm]).abs().max().item() <= 1e-5
            try:
                got = decode(emb, codec).canonical
            except EmptyReconstruction:
                got = None
            assert got == ref_set
    # ISAB equivariance on raw fp32 inputs
    for _ in range(20):
        n = int(rng.integers(2, 20))
        X = torch.from_numpy(rng.normal(size=(n, cfg.d)).astype(np.float32))
        perm = torch.from_numpy(rng.permutation(n))
        with torch.no_grad():
            diff = (isab(X[perm], codec.isab1) - isab(X, codec.isab1)[perm]).abs().max().item()
        assert diff <= 1e-5
    assert time.perf_counter() - start < 60


# ---------------------------------------------------------------- 2

@criterion(2, "single-head 2x2 MAB matches the hand-coded oracle at fp64")
def test_mab_oracle():
    from latentfs.codec import MAB, mab
    for seed in range(5):
        torch.manual_seed(seed)
        block = MAB(2, 1).double()
        for p in block.parameters():
            torch.nn.init.normal_(p, std=0.7)
        rng = np.random.default_rng(seed)
        Q, K, V = (rng.normal(size=(2, 2)) for _ in range(3))
        got = mab(torch.tensor(Q), torch.tensor(K), torch.tensor(V), block).detach().numpy()
        assert np.abs(got - mab_oracle(Q, K, V, block)).max() <= 1e-10


# ---------------------------------------------------------------- 3

@criterion(3, "codec memorizes 500 augmented records (>= 95% exact recovery)")
def test_codec_memorization():
    start = time.perf_counter()
    ds = make_synthetic(n_samples=200, n_features=20, n_informative=5, seed=0)
    ev = SubsetEvaluator(ds, cv_folds=5, n_estimators=10)
    store = collect_random(ds, 20, evaluator=ev, seed=0)
    cfg = CodecConfig(universe_size=20, d=128, heads=4, M=32, batch=64, lr=1e-3, epochs=50, augment=25)
    codec, losses = train_codec(store, cfg, seed=0)
    seqs, _ = training_examples(store, cfg, 0)
    assert len(seqs) == 500
    P = encode_batch(seqs, codec)
    hits = 0
    for s, p in zip(seqs, P):
        try:
            hits += decode_pooled(p, codec).canonical == tuple(sorted(s))
        except EmptyReconstruction:
            pass
    assert hits / len(seqs) >= 0.95
    assert time.perf_counter() - start < 600


# ---------------------------------------------------------------- 4

@criterion(4, "reconstruction-loss gradients match central finite differences")
def test_gradient_check():
    cfg = CodecConfig(universe_size=3, d=4, heads=1, M=2, pool_width=4, ff_width=4)
    codec = build_codec(cfg, seed=0, dtype=torch.float64)
    tokens, mask = pad_batch([[2, 0]], cfg)
    tokens, mask = tokens[:, :2], mask[:, :2]
    target = (2, 0)

    def loss_fn():
        return reconstruction_loss(target, codec(tokens, mask)[0], cfg)

    codec.zero_grad()
    loss_fn().backward()
    names, params = zip(*codec.named_parameters())
    analytic = [p.grad.detach().clone() for p in params]
    numeric = finite_difference_grads(loss_fn, [p.data for p in params], h=1e-5)
    worst = {}
    for name, a, n in zip(names, analytic, numeric):
        scale = max(a.norm().item(), n.norm().item(), 1e-6)
        worst[name] = (a - n).norm().item() / scale
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad


# ---------------------------------------------------------------- 5

@criterion(5, "PPO math: returns, clipping cases, critic loss")
def test_ppo_oracles():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rewards = rng.integers(-5, 6, size=int(rng.integers(1, 30))).astype(float).tolist()
        gamma = float(rng.choice([0.5, 0.9, 0.99, 1.0, 0.25]))
        # dyadic gammas keep both computations exact
        if gamma in (0.5, 1.0, 0.25):
            assert discounted_returns(rewards, gamma).tolist() == brute_returns(rewards, gamma)
        else:
            np.testing.assert_allclose(discounted_returns(rewards, gamma), brute_returns(rewards, gamma),
                                       rtol=1e-13)
    assert actor_objective([1.5], [1.0], 0.2) == pytest.approx(1.2, abs=1e-12)
    assert actor_objective([0.5], [-1.0], 0.2) == pytest.approx(-0.8, abs=1e-12)
    assert actor_objective([1.0], [0.42], 0.2) == pytest.approx(0.42, abs=1e-12)
    for r, a in ((1.5, 1.0), (2.5, 0.3), (0.5, -1.0), (0.05, -2.0)):
        ratio = torch.tensor([r], dtype=torch.float64, requires_grad=True)
        actor_objective(ratio, torch.tensor([a], dtype=torch.float64), 0.2).backward()
        assert ratio.grad.item() == 0.0
    for _ in range(200):
        n = int(rng.integers(1, 50))
        v, g = rng.normal(size=n), rng.normal(size=n)
        assert abs(critic_loss(v, g) - mse(v, g)) <= 1e-12


# ---------------------------------------------------------------- 6

@criterion(6, "sample-aware weights and weighted global performance")
def test_aggregation_oracles():
    np.testing.assert_allclose(client_weights([100, 200, 700]), [0.1, 0.2, 0.7], rtol=0, atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(1, 20))
        w = client_weights(rng.integers(1, 10_000, size=c))
        v = rng.uniform(0, 1, size=c)
        g = weighted_global_performance(w, v)
        assert abs(g - dot(w, v)) <= 1e-12
        assert v.min() - 1e-12 <= g <= v.max() + 1e-12


# ---------------------------------------------------------------- 7

@criterion(7, "1-client federation with calibration every query equals the centralized search")
def test_degenerate_federation():
    ds = make_synthetic(n_samples=150, n_features=10, n_informative=3, seed=1)
    coll = CollectorConfig(epochs=30, n_estimators=10)
    codec_cfg = CodecConfig(universe_size=10, d=32, heads=4, M=8, epochs=15, augment=5)
    search_cfg = SearchConfig(steps=60, epochs=2, n_seeds=6)
    central, crep, _, _ = centralized_search(ds, codec_cfg, search_cfg, coll, seed=11)
    fed = Federation(partition_clients(ds, 1), n_estimators=10)
    assert fed.weights.tolist() == [1.0]
    federated, frep, _ = federated_search(fed, codec_cfg, search_cfg, coll, seed=11, calibration_interval=1)
    assert federated == central
    assert frep["global"] == crep["best_perf"]


# ---------------------------------------------------------------- 8 and 10

@pytest.fixture(scope="module")
def e2e_run():
    ds = make_synthetic(n_samples=300, n_features=20, n_informative=5, seed=0)
    fed = Federation(partition_clients(ds, 3, "iid", seed=0), n_estimators=20)
    start = time.perf_counter()
    best, report, _ = federated_search(
        fed, CodecConfig(universe_size=20, epochs=20, augment=10), SearchConfig(steps=200, epochs=3, n_seeds=10),
        CollectorConfig(epochs=100, n_estimators=20), seed=0, calibration_interval=50)
    return fed, best, report, time.perf_counter() - start


@criterion(8, "end-to-end recovery of informative features on 3 IID clients")
def test_end_to_end_recovery(e2e_run):
    fed, best, report, elapsed = e2e_run
    ids = set(best.canonical)
    print(f"f* = {sorted(ids)}; global {report['global']:.4f} vs full {report['full_set_global']:.4f}; "
          f"{elapsed:.0f}s")
    assert len(ids) < 20
    assert len(ids & INFORMATIVE) >= 4
    assert report["global"] >= report["full_set_global"] - 0.01
    assert elapsed < 15 * 60


@criterion(10, "every server-bound message passes the records-only schema audit")
def test_privacy_audit(e2e_run):
    fed = e2e_run[0]
    assert audit_messages(fed.ledger) == []
    schemas = {name: load_schema(name) for name in ("records_v1", "evaluations_v1")}
    raw_values = {float(x) for c in fed.clients for x in c.data.features.ravel()}
    up = [(s, json.loads(t)) for d, s, t in fed.ledger.messages if d == "up"]
    assert up and {s for s, _ in up} == {"records_v1", "evaluations_v1"}
    for schema, msg in up:
        jsonschema.validate(msg, schemas[schema])
        numbers = msg["perfs"] if schema == "evaluations_v1" else [r["perf"] for r in msg["records"]]
        assert not raw_values.intersection(numbers)


# ---------------------------------------------------------------- 9

def _spectf_path():
    for candidate in (os.environ.get("LATENTFS_SPECTF"), Path(__file__).resolve().parents[1] / "data" / "spectf.csv"):
        if candidate and Path(candidate).exists():
            return Path(candidate)
    return None


@criterion(9, "SpectF: selected-subset F1 >= full-feature F1 (direction only)")
def test_spectf_direction(tmp_path):
    path = _spectf_path()
    assert path is not None, (
        "SpectF data not found: run scripts/fetch_spectf.py (needs network access) or set LATENTFS_SPECTF")
    ds = load_dataset(path, target="label", task="binary", name="spectf")
    assert (ds.n_samples, ds.n_features) == (267, 44)
    cfg = ExperimentConfig(dataset=DatasetSpec(path=str(path), target="label", task="binary", name="spectf"),
                           output_dir=str(tmp_path / "spectf"))
    summary = run_experiment(cfg)
    assert summary["metrics_selected"]["f1"] >= summary["metrics_full"]["f1"]


# ---------------------------------------------------------------- 11

@criterion(11, "encoder cost per layer grows linearly in set length for fixed M")
def test_linear_complexity():
    cfg = CodecConfig(universe_size=1024, d=128, heads=4, M=32)
    torch.manual_seed(0)
    from latentfs.codec import ISAB
    layer = ISAB(cfg.d, cfg.heads, cfg.M, cfg.ff_width)
    sizes = [64, 256, 1024]
    flops = [count_flops(layer, torch.randn(1, n, cfg.d)) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(flops), 1)[0]
    print(f"ISAB flops {dict(zip(sizes, flops))}, log-log slope {slope:.3f}")
    assert 0.8 <= slope <= 1.2

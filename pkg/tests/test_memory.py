import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstream.backbone import FeatureMap
from splatstream.errors import DimensionError, StateError
from splatstream.memory import MemoryBank, MemoryConfig, MemoryNet
from splatstream.tensor import Tensor

P, DK, DD, DO = 4, 6, 5, 7


def net(depth=1, seed=0):
    return MemoryNet(np.random.default_rng(seed), DK, DD, DO, depth)


def kv(rng, n=P):
    return Tensor(rng.normal(size=(n, DK))), Tensor(rng.normal(size=(n, DO)))


def fill(bank, rng, frames):
    for f in frames:
        bank.insert(*kv(rng), frame=f)


def query(rng, n=P):
    return FeatureMap(Tensor(rng.normal(size=(n, DK))), "query")


def test_constant_values_readout_is_the_value(rng):
    m = net()
    bank = MemoryBank(MemoryConfig(), P)
    v0 = rng.normal(size=DO)
    bank.insert(Tensor(rng.normal(size=(P, DK))), Tensor(np.tile(v0, (P, 1))), 0)
    q = query(rng)
    out = m.query(q, bank).tokens.data
    np.testing.assert_allclose(out - m.res(q.tokens).data, np.tile(v0, (P, 1)), atol=1e-5)


def test_equidistant_keys_split_evenly():
    m = net()
    m.wq[0].w.data = np.eye(DK, dtype=np.float32)
    m.wq[0].b.data[:] = 0
    bank = MemoryBank(MemoryConfig(), 1)
    q = np.zeros(DK)
    q[0] = 1.0
    k = np.zeros((1, DK))
    k[0, 1] = 2.0  # orthogonal to q, so q.k1 = q.k2 = 0
    bank.insert(Tensor(k), Tensor(np.ones((1, DO))), 0)
    bank.insert(Tensor(-k), Tensor(np.ones((1, DO))), 1)
    _, w = m.query(FeatureMap(Tensor(q[None]), "query"), bank, return_weights=True)
    np.testing.assert_allclose(w[0], [[0.5, 0.5]], atol=1e-6)


def test_dense_reference_three_frames(rng):
    m = net()
    bank = MemoryBank(MemoryConfig(n_working=None, attn_threshold=None), P)
    fill(bank, rng, range(3))
    q = query(rng)
    out = m.query(q, bank).tokens.data.astype(np.float64)
    K = np.concatenate([e.key.data for e in bank.working]).astype(np.float64)
    V = np.concatenate([e.value.data for e in bank.working]).astype(np.float64)
    x = q.tokens.data.astype(np.float64)
    Q = x @ m.wq[0].w.data + m.wq[0].b.data
    s = Q @ K.T / np.sqrt(DK)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    ref = a @ V + x @ m.res.w.data + m.res.b.data
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_fifo_demotion(rng):
    bank = MemoryBank(MemoryConfig(n_working=2, attn_threshold=None), P)
    fill(bank, rng, [1, 2, 3])
    assert [e.frame for e in bank.working] == [2, 3]
    assert bank.n_longterm == P
    assert bank.lt_frame.tolist() == [1] * P
    assert bank.lt_token.tolist() == list(range(P))


def test_demoted_tokens_keep_working_attention(rng):
    m = net()
    bank = MemoryBank(MemoryConfig(n_working=1, attn_threshold=None), P)
    fill(bank, rng, [0])
    m.query(query(rng), bank)
    acc = bank.working[0].acc.copy()
    assert acc.sum() == pytest.approx(P, rel=1e-5)
    fill(bank, rng, [1])
    np.testing.assert_array_equal(bank.lt_acc, acc)


def test_sparsify_keeps_top_k(rng):
    bank = MemoryBank(MemoryConfig(n_working=0, attn_threshold=None, top_k=4), 10)
    bank.insert(*kv(rng, 10), frame=0)
    bank.lt_acc = rng.uniform(0.1, 1.0, 10)
    top = set(np.argsort(-bank.lt_acc)[:4].tolist())
    bank.cfg.attn_threshold = 1.0
    bank.sparsify()
    assert set(bank.lt_token.tolist()) == top
    assert bank.n_longterm == 4


def test_sparsify_tie_break_lowest_frame_then_token(rng):
    bank = MemoryBank(MemoryConfig(n_working=0, attn_threshold=None, top_k=4), 3)
    for f in (5, 2, 7):
        bank.insert(*kv(rng, 3), frame=f)
    bank.lt_acc = np.ones(9)
    bank.cfg.attn_threshold = 1.0
    bank.sparsify()
    assert sorted(zip(bank.lt_frame.tolist(), bank.lt_token.tolist())) == [(2, 0), (2, 1), (2, 2), (5, 0)]


def test_sparsify_below_threshold_is_noop(rng):
    bank = MemoryBank(MemoryConfig(n_working=0, attn_threshold=100.0, top_k=2), P)
    fill(bank, rng, [0, 1])
    bank.lt_acc = np.full(2 * P, 0.5)
    bank.sparsify()
    assert bank.n_longterm == 2 * P


def test_sparsify_row_alignment(rng):
    bank = MemoryBank(MemoryConfig(n_working=0, attn_threshold=None, top_k=3), P)
    fill(bank, rng, [0, 1])
    keys = bank.lt_key.data.copy()
    bank.lt_acc = np.arange(2 * P, dtype=float)
    bank.cfg.attn_threshold = 0.5
    bank.sparsify()
    np.testing.assert_array_equal(bank.lt_key.data, keys[[5, 6, 7]])


def test_reset_empties_bank(rng):
    bank = MemoryBank(MemoryConfig(n_working=1), P)
    fill(bank, rng, [0, 1, 2])
    bank.reset()
    assert len(bank) == 0 and bank.n_longterm == 0 and not bank.working


def test_query_before_bootstrap(rng):
    with pytest.raises(StateError, match="query before bootstrap"):
        net().query(query(rng), MemoryBank(MemoryConfig(), P))


def test_insert_dim_mismatch(rng):
    bank = MemoryBank(MemoryConfig(), P)
    with pytest.raises(DimensionError):
        bank.insert(Tensor(np.ones((P, DK))), Tensor(np.ones((P + 1, DO))), 0)
    bank.insert(Tensor(np.ones((P, DK))), Tensor(np.ones((P, DO))), 0)
    with pytest.raises(DimensionError):
        bank.insert(Tensor(np.ones((P, DK + 1))), Tensor(np.ones((P, DO))), 1)


@settings(max_examples=25)
@given(st.integers(1, 4), st.integers(1, 10), st.integers(1, 12), st.integers(0, 2**16))
def test_capacity_invariant(n_working, top_k, n_frames, seed):
    rng = np.random.default_rng(seed)
    m = net()
    bank = MemoryBank(MemoryConfig(n_working=n_working, attn_threshold=0.0, top_k=top_k), P)
    for f in range(n_frames):
        bank.insert(*kv(rng), frame=f)
        assert len(bank.working) <= n_working
        assert bank.n_longterm <= max(top_k, P)
        m.query(query(rng), bank)


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(0, 2**16))
def test_weights_convex(n_frames, seed):
    rng = np.random.default_rng(seed)
    bank = MemoryBank(MemoryConfig(n_working=2), P)
    fill(bank, rng, range(n_frames))
    _, ws = net(depth=2).query(query(rng), bank, return_weights=True)
    for w in ws:
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-5)


def test_accumulated_attention_monotone(rng):
    m = net()
    bank = MemoryBank(MemoryConfig(n_working=2, attn_threshold=None), P)
    seen = {}
    for f in range(6):
        fill(bank, rng, [f])
        m.query(query(rng), bank)
        for t in bank.dump()["tokens"]:
            k = (t["frame"], t["token"])
            assert t["accumulated_attention"] >= seen.get(k, 0.0) - 1e-7
            seen[k] = t["accumulated_attention"]


def test_no_sparsify_equals_dense(rng):
    m = net(depth=2)
    a = MemoryBank(MemoryConfig(n_working=2, attn_threshold=None), P)
    b = MemoryBank(MemoryConfig(n_working=None, attn_threshold=None), P)
    for f in range(5):
        k, v = kv(rng)
        a.insert(k, v, f)
        b.insert(k, v, f)
        q = query(rng)
        np.testing.assert_allclose(m.query(q, a).tokens.data, m.query(q, b).tokens.data, atol=1e-6)


def test_query_deterministic(rng):
    m = net(depth=2)
    bank = MemoryBank(MemoryConfig(n_working=None, attn_threshold=None), P)
    fill(bank, rng, range(3))
    q = query(rng)
    assert m.query(q, bank).tokens.data.tobytes() == m.query(q, bank).tokens.data.tobytes()


def test_dump_json(tmp_path, rng):
    bank = MemoryBank(MemoryConfig(n_working=1, attn_threshold=None), P)
    fill(bank, rng, [0, 1])
    net().query(query(rng), bank)
    p = tmp_path / "mem.json"
    bank.dump_json(p)
    d = json.loads(p.read_text())
    assert d["working_frames"] == [1] and d["n_longterm"] == P
    assert len(d["tokens"]) == 2 * P
    assert {t["store"] for t in d["tokens"]} == {"working", "longterm"}

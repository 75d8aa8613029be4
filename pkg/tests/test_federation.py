from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcba import federation as F
from fcba import nn
from fcba.data import SynthParams, dirichlet_partition, synth_dataset
from fcba.defense import DefenseConfig
from fcba.errors import AggregationError, ConfigurationError, RoundError
from fcba.metrics import asr
from fcba.trigger import LocalTriggerPattern, apply_trigger, trigger_mask

DIMS = (12, 12, 1)


def _tiny_arch():
    return nn.cnn_arch(DIMS, 4, conv1=4, conv2=8, kernel=3, hidden=16)


@pytest.fixture(scope="module")
def tiny():
    sp = SynthParams(margin=3, blob_sigma=1.5)
    train = synth_dataset(4, 150, DIMS, seed=0, params=sp)
    test = synth_dataset(4, 50, DIMS, seed=0, split="test", params=sp)
    part = dirichlet_partition(train, 10, 0.5, seed=0)
    return F.FederatedData(train, test, part)


def _fed(**kw):
    base = dict(n_total=10, n_round=4, eta=0.4, total_rounds=6, master_seed=0, lr=0.1)
    base.update(kw)
    return F.FederationConfig(**base)


def _layout(n=10):
    return nn.ModelArch((n,), (nn.Dense(n, 2), nn.SoftmaxCrossEntropy())).layout


# ---------------------------------------------------------------- configs


def test_config_validation():
    with pytest.raises(ConfigurationError):
        F.FederationConfig(n_total=5, n_round=6)
    with pytest.raises(ConfigurationError):
        F.FederationConfig(eta=0)
    with pytest.raises(ConfigurationError):
        F.AttackConfig(r=65)
    with pytest.raises(ConfigurationError):
        F.AttackConfig(gamma=0)
    with pytest.raises(ConfigurationError):
        F.AttackConfig(interval=0)
    with pytest.raises(ConfigurationError):
        F.AttackConfig(malicious_client_ids=(1, 2, 3))
    assert F.FederationConfig().replacement_gamma == pytest.approx(100.0)
    assert F.AttackConfig().M == 14
    assert F.AttackConfig(strategy="SD").M == 4


# --------------------------------------------------------------- schedule


def test_schedule_examples():
    fed = F.FederationConfig(total_rounds=400)
    atk = F.resolve_attackers(F.AttackConfig(start_round=314), fed)
    sched = F.attack_schedule(atk, 400)
    assert sorted(sched) == list(range(314, 328))
    assert [sched[r] for r in sorted(sched)] == list(atk.malicious_client_ids)

    atk2 = F.AttackConfig(m=2, interval=2, start_round=10, malicious_client_ids=(5, 6))
    assert F.attack_schedule(atk2) == {10: 5, 12: 6}

    atk3 = F.resolve_attackers(F.AttackConfig(strategy="SD", start_round=2), fed)
    assert sorted(F.attack_schedule(atk3)) == [2, 3, 4, 5]


def test_schedule_overflow_and_unresolved():
    atk = F.AttackConfig(start_round=90, malicious_client_ids=tuple(range(14)))
    with pytest.raises(ConfigurationError):
        F.attack_schedule(atk, 100)
    with pytest.raises(ConfigurationError):
        F.attack_schedule(F.AttackConfig())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.sampled_from(["FC", "SD"]), st.integers(0, 20), st.integers(1, 3), st.integers(0, 99))
def test_single_shot_schedule(m, strategy, start, interval, seed):
    fed = F.FederationConfig(total_rounds=200, master_seed=seed)
    atk = F.resolve_attackers(F.AttackConfig(strategy=strategy, m=m, start_round=start, interval=interval), fed)
    sched = F.attack_schedule(atk, fed.total_rounds)
    assert sorted(sched.values()) == sorted(atk.malicious_client_ids)
    assert len(sched) == atk.M
    assert max(sched) == atk.attack_end
    # every malicious id appears in exactly one round plan
    plans = [F.select_clients(t, fed, sched, seed) for t in range(fed.total_rounds)]
    for cid in atk.malicious_client_ids:
        assert sum(p.malicious == cid for p in plans) == 1


def test_dispersed_controls():
    fed = F.FederationConfig(total_rounds=100)
    tdp = F.resolve_attackers(F.AttackConfig(strategy="SD", n_injections=14), fed)
    sched = F.attack_schedule(tdp)
    assert len(sched) == 14 and len(set(sched.values())) == 4
    sdp = F.resolve_attackers(F.AttackConfig(strategy="SD", n_attackers=14), fed)
    assert len(set(F.attack_schedule(sdp).values())) == 14
    assert [p.label() for p in sdp.patterns()[:5]] == ["1", "2", "3", "4", "1"]


def test_select_clients():
    fed = F.FederationConfig()
    plan = F.select_clients(3, fed, {}, seed=1)
    assert len(plan.selected) == 10 and len(set(plan.selected)) == 10
    assert plan.malicious is None
    assert F.select_clients(3, fed, {}, seed=1) == plan
    for t in range(20):
        p = F.select_clients(t, fed, {t: 77}, seed=1)
        assert 77 in p.selected and p.malicious == 77 and len(p.selected) == 10


# ------------------------------------------------------- local training


def test_benign_trivial_cases(tiny):
    arch = _tiny_arch()
    G = nn.init_params(arch, np.random.default_rng(0))
    idx = tiny.partition.client_indices[0]
    assert F.local_train_benign(arch, G, tiny.train, idx, 0.0, 1, 0).norm() == 0
    assert F.local_train_benign(arch, G, tiny.train, idx, 0.1, 0, 0).norm() == 0
    assert F.local_train_benign(arch, G, tiny.train, [], 0.1, 1, 0).norm() == 0


def test_benign_training_reduces_local_loss(tiny):
    arch = _tiny_arch()
    G = nn.init_params(arch, np.random.default_rng(0))
    idx = np.arange(200)
    d = F.local_train_benign(arch, G, tiny.train, idx, 0.1, 3, seed=1)
    before, _ = nn.loss_and_grad(arch, G, tiny.train.images[idx], tiny.train.labels[idx])
    after, _ = nn.loss_and_grad(arch, G + d, tiny.train.images[idx], tiny.train.labels[idx])
    assert after < before


def test_poison_count_and_batch():
    assert F.poison_count(3, 64, 64) == 3
    assert F.poison_count(3, 10, 64) == 0
    assert F.poison_count(3, 32, 64) == 2
    assert F.poison_count(21, 5, 64) == 2
    spec = F.AttackConfig().trigger_spec((28, 28, 1))
    pat = LocalTriggerPattern((0, 3))
    mask = trigger_mask(spec, pat)
    imgs = np.random.default_rng(0).random((64, 28, 28, 1)).astype(np.float32) * 0.5
    labels = np.zeros(64, dtype=np.int64)
    pi, pl = F.poison_batch(imgs, labels, 3, mask, 1.0, 2)
    changed = np.any(pi != imgs, axis=(1, 2, 3))
    assert changed.sum() == 3 and changed[:3].all()
    assert (pl == 2).sum() == 3 and (pl[:3] == 2).all()
    assert np.array_equal(pi[:3], apply_trigger(imgs[:3], pat, spec))
    assert labels.sum() == 0  # input untouched


def test_malicious_r0_equals_benign(tiny):
    arch = _tiny_arch()
    G = nn.init_params(arch, np.random.default_rng(0))
    idx = tiny.partition.client_indices[1]
    atk = F.AttackConfig(r=0, lr_poison=0.07, epochs_poison=2, malicious_client_ids=tuple(range(14)))
    spec = atk.trigger_spec(DIMS)
    mal = F.local_train_malicious(arch, G, tiny.train, idx, LocalTriggerPattern((0,)), spec, atk, seed=5)
    ben = F.local_train_benign(arch, G, tiny.train, idx, 0.07, 2, seed=5)
    assert mal.values.tobytes() == ben.values.tobytes()


def test_malicious_r_exceeding_batch_raises(tiny):
    arch = _tiny_arch()
    G = nn.init_params(arch, np.random.default_rng(0))
    atk = F.AttackConfig(r=10)
    with pytest.raises(ConfigurationError):
        F.local_train_malicious(arch, G, tiny.train, [0, 1], LocalTriggerPattern((0,)), atk.trigger_spec(DIMS), atk,
                                seed=0, batch_size=8)


def test_local_backdoor_fit(tiny):
    # a malicious client with a few hundred samples learns its own local trigger
    arch = _tiny_arch()
    G = nn.init_params(arch, np.random.default_rng(0))
    G = G + F.local_train_benign(arch, G, tiny.train, np.arange(600), 0.1, 3, seed=0)
    atk = F.AttackConfig(r=3, malicious_client_ids=tuple(range(14)), target=1)
    spec = atk.trigger_spec(DIMS)
    pat = LocalTriggerPattern((0, 2))
    d = F.local_train_malicious(arch, G, tiny.train, np.arange(600), pat, spec, atk, seed=3, momentum=0.9)
    keep = tiny.test.labels != 1
    own = apply_trigger(tiny.test.images[keep], pat, spec)
    rate = (nn.predict(arch, G + d, own) == 1).mean()
    assert rate >= 0.9


# ----------------------------------------------------- scale / aggregate


def test_scale_update():
    v = nn.ParamVector(np.random.default_rng(0).normal(size=22), _layout())
    assert np.array_equal(F.scale_update(v, 1.0).values, v.values)
    assert F.scale_update(v, 100.0).norm() == pytest.approx(100 * v.norm(), rel=1e-6)
    with pytest.raises(ConfigurationError):
        F.scale_update(v, 0.0)


def test_aggregate_examples():
    layout = _layout()
    rng = np.random.default_rng(0)
    G = nn.ParamVector(rng.normal(size=22).astype(np.float32), layout)
    zeros = [G.zeros_like() for _ in range(10)]
    assert F.aggregate(G, zeros, F.FederationConfig()).values.tobytes() == G.values.tobytes()
    L = nn.ParamVector(rng.normal(size=22).astype(np.float32), layout)
    # eta = 1 makes the coefficient 1/n, i.e. plain mean substitution
    fed = F.FederationConfig(eta=1.0)
    np.testing.assert_allclose(F.aggregate(G, [L - G] * 10, fed).values, L.values, rtol=1e-5, atol=1e-6)
    with pytest.raises(AggregationError):
        F.aggregate(G, [nn.ParamVector.zeros(_layout(3))], fed)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_replacement_identity(seed):
    rng = np.random.default_rng(seed)
    layout = _layout(60)
    fed = F.FederationConfig()
    G = nn.ParamVector(rng.normal(size=layout.size).astype(np.float32), layout)
    X = nn.ParamVector(rng.normal(size=layout.size).astype(np.float32), layout)
    updates = [F.scale_update(X - G, fed.replacement_gamma)] + [G.zeros_like() for _ in range(9)]
    out = F.aggregate(G, updates, fed)
    rel = np.linalg.norm(out.values.astype(np.float64) - X.values) / np.linalg.norm(X.values)
    assert rel < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_aggregation_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    layout = _layout()
    fed = F.FederationConfig()
    G = nn.ParamVector(rng.normal(size=22), layout)
    u, v = (nn.ParamVector(rng.normal(size=22), layout) for _ in range(2))
    lhs = F.aggregate(G, [u * a + v * b], fed) - G
    rhs = (F.aggregate(G, [u], fed) - G) * a + (F.aggregate(G, [v], fed) - G) * b
    np.testing.assert_allclose(lhs.values, rhs.values, atol=1e-12)


# ----------------------------------------------------------- experiment


def _attack(**kw):
    base = dict(m=2, start_round=2, target=1, r=4, epochs_poison=3, gamma=10.0)
    base.update(kw)
    return F.AttackConfig(**base)


def test_run_is_deterministic_and_parallel_equivalent(tiny):
    arch = _tiny_arch()
    ev = F.EvalConfig(offsets=(0, 2), cadence_pre=1, feature_samples=20)
    a = F.run_experiment(_fed(), _attack(), None, tiny, arch, ev)
    b = F.run_experiment(_fed(), _attack(), None, tiny, arch, ev)
    c = F.run_experiment(_fed(workers=3), _attack(), None, tiny, arch, ev)
    assert [r.to_dict() | {"wall_time": 0} for r in a.records] == [r.to_dict() | {"wall_time": 0} for r in b.records]
    assert a.params.values.tobytes() == b.params.values.tobytes() == c.params.values.tobytes()
    phases = {r.round: r.phase for r in a.records}
    assert phases[0] == "pre-attack" and phases[2] == "attacking" and phases[5] == "post-attack"
    assert a.attack_end == 3


def test_clean_run_has_no_asr_and_stays_at_baseline(tiny):
    arch = _tiny_arch()
    res = F.run_experiment(_fed(total_rounds=8), None, None, tiny, arch)
    assert all(r.asr is None and r.feat_dist is None for r in res.records)
    assert res.attack_end is None
    spec = _attack().trigger_spec(DIMS)
    assert asr(arch, res.params, tiny.test, spec, 1) <= 0.25 + 0.1


def test_tiny_attack_reaches_high_asr(tiny):
    arch = _tiny_arch()
    fed = _fed(total_rounds=8, warmup_rounds=10)
    atk = _attack(gamma=fed.replacement_gamma, r=8, epochs_poison=5)
    res = F.run_experiment(fed, atk, None, tiny, arch, F.EvalConfig(offsets=(0,), feature_samples=20))
    by_round = {r.round: r for r in res.records}
    assert by_round[res.attack_end].asr >= 0.9


def test_exact_replacement_yields_attacker_model(tiny):
    arch = _tiny_arch()
    fed = _fed(total_rounds=1)
    G0 = nn.init_params(arch, np.random.default_rng(9))
    atk = F.resolve_attackers(_attack(start_round=0, replacement="exact", gamma=fed.replacement_gamma,
                                         n_injections=1), fed)
    res = F.run_experiment(fed, atk, None, tiny, arch, F.EvalConfig(offsets=(0,), feature_samples=10), init=G0)
    cid = atk.malicious_client_ids[0]
    X = G0 + F.local_train_malicious(arch, G0, tiny.train, tiny.partition.client_indices[cid], atk.patterns()[0],
                                     atk.trigger_spec(DIMS), atk, F.client_seed(0, cid, 0), fed.batch_size,
                                     fed.momentum)
    rel = np.linalg.norm(res.params.values - X.values) / np.linalg.norm(X.values)
    assert rel < 1e-5


def test_defense_is_applied_and_logged(tiny):
    arch = _tiny_arch()
    fed = _fed(total_rounds=4)
    d = DefenseConfig(clip=0.5, sigma=0.0, start_round=1)
    res = F.run_experiment(fed, None, d, tiny, arch, F.EvalConfig(cadence_pre=1))
    assert [r.clip_S for r in res.records] == [None, 0.5, 0.5, 0.5]
    # sigma = 0 and S = inf reproduce the undefended run exactly
    base = F.run_experiment(fed, None, None, tiny, arch)
    same = F.run_experiment(fed, None, DefenseConfig(clip=float("inf"), sigma=0.0), tiny, arch)
    assert base.params.values.tobytes() == same.params.values.tobytes()


def test_clip_aware_attacker_reaches_threshold(tiny, monkeypatch):
    seen = []
    real = F.aggregate

    def spy(G, updates, fed):
        seen.append([u.norm() for u in updates])
        return real(G, updates, fed)

    monkeypatch.setattr(F, "aggregate", spy)
    arch = _tiny_arch()
    F.run_experiment(_fed(total_rounds=3), _attack(start_round=1, clip_aware=True, gamma=1000.0),
                     DefenseConfig(clip=0.3), tiny, arch, F.EvalConfig(offsets=(0,), feature_samples=10))
    assert max(seen[1]) == pytest.approx(0.3, rel=1e-5)
    assert all(n <= 0.3 + 1e-6 for row in seen for n in row)


def test_round_errors_carry_round_index(tiny):
    arch = _tiny_arch()
    fed = _fed(batch_size=2)
    with pytest.raises(RoundError) as info:
        F.run_experiment(fed, _attack(r=3), None, tiny, arch)
    assert info.value.round_index == 2


def test_warmup_disk_cache(tiny, tmp_path):
    arch = _tiny_arch()
    fed = _fed(warmup_rounds=2, master_seed=123)
    F._WARMUP_CACHE.clear()
    a = F.warmup(arch, fed, tiny, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("warmup-*.npy"))) == 1
    F._WARMUP_CACHE.clear()
    b = F.warmup(arch, fed, tiny, cache_dir=tmp_path)
    assert a.values.tobytes() == b.values.tobytes()
    # the key ignores total_rounds but not the seed
    c = F.warmup(arch, dataclasses.replace(fed, total_rounds=99), tiny)
    assert c.values.tobytes() == a.values.tobytes()
    d = F.warmup(arch, dataclasses.replace(fed, master_seed=124), tiny)
    assert d.values.tobytes() != a.values.tobytes()

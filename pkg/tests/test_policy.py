import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import clusters, small_config
from oracles import gradient_check, log_prob_and_value, randomize
from vmresched.cluster import ClusterState, VirtualMachine, migration_violations
from vmresched.datasets import generate_cluster, toy_config
from vmresched.features import (NormStats, FeatureTensor, encode_features, pm_features,
                                vm_features)
from vmresched.policy import (Batch, NoLegalAction, PolicyConfig, TwoStagePolicy, checkpoint_bytes,
                              critic_forward, load_checkpoint, make_batch, pm_actor_forward,
                              sample_two_stage_action, save_checkpoint, vm_actor_forward)
from vmresched.simulator import pair_mask

TINY = PolicyConfig(d_model=16, n_blocks=1, n_heads=2, d_ff=32, critic_hidden=16)


@pytest.fixture(scope="module")
def norm():
    return NormStats.fit([generate_cluster(toy_config(s)) for s in range(20)])


@pytest.fixture(scope="module")
def policy(norm):
    torch.manual_seed(0)
    return randomize(TwoStagePolicy(norm=norm).double(), 0)


def _permute_features(f: FeatureTensor, vm_perm, pm_perm):
    """Reorder VM rows by ``vm_perm`` and PM rows by ``pm_perm`` (new position -> old index)."""
    new_of_old = np.empty_like(pm_perm)
    new_of_old[pm_perm] = np.arange(len(pm_perm))
    return FeatureTensor(f.vm[vm_perm], f.pm[pm_perm], new_of_old[f.tree_index[vm_perm]])


# --- features ---------------------------------------------------------------------------

def test_empty_numa_features():
    s = ClusterState([[64, 64]], [[128, 128]], [VirtualMachine.of_type(0, "4xlarge")], [0], [1])
    p = pm_features(s, 16)
    assert p[0, :4].tolist() == [64, 128, 0, 0]
    assert p[0, 4:].tolist() == [48, 96, 0, 0]


def test_single_numa_vm_fills_its_own_slot():
    s = ClusterState([[64, 64]], [[128, 128]], [VirtualMachine.of_type(0, "4xlarge")], [0], [1])
    v = vm_features(s, None, 16)[0]
    assert v[0:2].tolist() == [0, 16]
    assert v[2:4].tolist() == [0, 32]
    assert v[4:6].tolist() == [0, 0]
    assert v[6:].tolist() == pm_features(s, 16)[0].tolist()


def test_double_numa_vm_splits_demand():
    s = ClusterState([[64, 64]], [[128, 128]], [VirtualMachine(0, 40, 80, 2)], [0], [2])
    v = vm_features(s, None, 16)[0]
    assert v[0:6].tolist() == [20, 20, 40, 40, 4, 4]
    # 64 - 20 = 44 free per NUMA, fragment 12
    assert pm_features(s, 16)[0].tolist() == [44, 88, 12 / 44, 12, 44, 88, 12 / 44, 12]


def test_normalised_features_in_unit_range(norm):
    for seed in range(100):
        f = encode_features(generate_cluster(toy_config(10_000 + seed)), norm)
        assert f.vm.min() >= 0 and f.vm.max() <= 1
        assert f.pm.min() >= 0 and f.pm.max() <= 1


def test_norm_stats_round_trip(norm):
    back = NormStats.from_dict(norm.to_dict())
    for k in ("vm_min", "vm_max", "pm_min", "pm_max"):
        assert np.array_equal(getattr(back, k), getattr(norm, k))


# --- VM actor ---------------------------------------------------------------------------

@given(clusters())
def test_vm_probs_form_masked_distribution(state):
    pol = _tiny_policy()
    legal = pair_mask(state)
    mask = legal.any(axis=1)
    if not mask.any():
        with pytest.raises(NoLegalAction):
            vm_actor_forward(pol.encode(state), pol, mask)
        return
    with torch.no_grad():
        probs = vm_actor_forward(pol.encode(state), pol, mask)[0].numpy()
    assert abs(probs.sum() - 1) < 1e-12
    assert np.all(probs[~mask] == 0)
    assert np.all(probs[mask] > 0)


def test_single_legal_vm_gets_probability_one(policy):
    s = generate_cluster(toy_config(3))
    mask = np.zeros(s.n_vms, dtype=bool)
    mask[2] = True
    with torch.no_grad():
        probs = vm_actor_forward(policy.encode(s), policy, mask)[0]
    assert probs[2].item() == 1.0
    assert probs.sum().item() == 1.0


def test_permutation_equivariance(policy):
    s = generate_cluster(toy_config(7))
    f = policy.encode(s)
    rng = np.random.default_rng(0)
    vp, pp = rng.permutation(s.n_vms), rng.permutation(s.n_pms)
    legal = pair_mask(s)
    with torch.no_grad():
        a, vm_a, pm_a, sc_a = vm_actor_forward(f, policy, legal.any(axis=1))
        b, vm_b, pm_b, sc_b = vm_actor_forward(_permute_features(f, vp, pp), policy,
                                               legal.any(axis=1)[vp])
        assert torch.allclose(a[vp], b, atol=1e-12)
        k = int(np.argmax(legal.any(axis=1)[vp]))
        pa = pm_actor_forward(int(vp[k]), vm_a, pm_a, sc_a, policy, legal[vp[k]])
        pb = pm_actor_forward(k, vm_b, pm_b, sc_b, policy, legal[vp[k]][pp])
        assert torch.allclose(pa[pp], pb, atol=1e-12)
        va = critic_forward(vm_a, pm_a, policy)
        vb = critic_forward(vm_b, pm_b, policy)
        assert abs(va.item() - vb.item()) < 1e-12


def test_sparse_local_attention_matches_dense(policy):
    states = [generate_cluster(toy_config(s)) for s in range(3)]
    states.append(generate_cluster(toy_config(5, vm_count=20, pm_count=6)))
    for feats in ([policy.encode(s)] for s in states):
        _check_sparse_dense(policy, make_batch(feats, torch.float64))
    _check_sparse_dense(policy, make_batch([policy.encode(s) for s in states], torch.float64))


def _check_sparse_dense(policy, batch):
    with torch.no_grad():
        vm, pm = policy.vm_embed(batch.vm), policy.pm_embed(batch.pm)
        for blk in policy.blocks:
            sv, sp = blk.local_sparse(vm, pm, batch)
            dv, dp = blk.local_dense(vm, pm, batch)
            assert ((sv - dv).abs() * batch.vm_valid[..., None]).max().item() < 1e-9
            assert ((sp - dp).abs() * batch.pm_valid[..., None]).max().item() < 1e-9
            vm, pm, _ = blk(vm, pm, batch)
        a = policy.trunk(batch)
        b = policy.trunk(batch, dense_local=True)
        assert ((a[2] - b[2]).abs() * batch.vm_valid).max().item() < 1e-9


def test_dedup_matches_plain_self_attention(policy):
    s = generate_cluster(toy_config(11))
    f = policy.encode(s)
    with torch.no_grad():
        a = policy.trunk(make_batch([f], torch.float64, dedup=True))[2]
        b = policy.trunk(make_batch([f], torch.float64, dedup=False))[2]
    assert (a - b).abs().max().item() < 1e-9


def test_batched_trunk_matches_single(policy):
    states = [generate_cluster(toy_config(s)) for s in (1, 2)]
    states.append(generate_cluster(toy_config(3, pm_count=5, vm_count=9)))
    feats = [policy.encode(s) for s in states]
    with torch.no_grad():
        joint = policy.trunk(make_batch(feats, torch.float64))[2]
        for r, f in enumerate(feats):
            alone = policy.trunk(make_batch([f], torch.float64, dedup=False))[2][0]
            assert (joint[r, :len(f.vm)] - alone).abs().max().item() < 1e-9


# --- PM actor and critic ----------------------------------------------------------------

def test_pm_probs_respect_mask(policy):
    s = generate_cluster(toy_config(4))
    legal = pair_mask(s)
    with torch.no_grad():
        _, vm, pm, sc = vm_actor_forward(policy.encode(s), policy, legal.any(axis=1))
        for k in np.flatnonzero(legal.any(axis=1))[:5]:
            p = pm_actor_forward(int(k), vm, pm, sc, policy, legal[k]).numpy()
            assert np.all(p[~legal[k]] == 0)
            assert abs(p.sum() - 1) < 1e-12
        one = np.zeros(s.n_pms, dtype=bool)
        one[3] = True
        p = pm_actor_forward(0, vm, pm, sc, policy, one)
        assert p[3].item() == 1.0
        with pytest.raises(NoLegalAction):
            pm_actor_forward(0, vm, pm, sc, policy, np.zeros(s.n_pms, dtype=bool))


def test_cross_scores_shift_pm_logits(policy):
    s = generate_cluster(toy_config(4))
    legal = pair_mask(s)
    k = int(np.flatnonzero(legal.any(axis=1))[0])
    with torch.no_grad():
        _, vm, pm, sc = vm_actor_forward(policy.encode(s), policy, legal.any(axis=1))
        base = pm_actor_forward(k, vm, pm, sc, policy, legal[k])
        bumped = sc.clone()
        j = int(np.flatnonzero(legal[k])[0])
        bumped[0, k, j] += 1.0
        after = pm_actor_forward(k, vm, pm, bumped, policy, legal[k])
    assert after[j] > base[j]
    # adding 1 to one logit multiplies its odds against every other PM by e
    o = int(np.flatnonzero(legal[k])[1])
    ratio = (after[j] / after[o]) / (base[j] / base[o])
    assert abs(ratio.item() - np.e) < 1e-9


def test_zero_critic_outputs_zero(norm):
    pol = randomize(TwoStagePolicy(norm=norm).double(), 1)
    with torch.no_grad():
        for p in pol.critic.parameters():
            p.zero_()
        s = generate_cluster(toy_config(2))
        b = make_batch([pol.encode(s)], torch.float64)
        vm, pm, _, _ = pol.trunk(b)
        assert critic_forward(vm, pm, pol, b).item() == 0.0


def test_critic_ignores_padding(policy):
    states = [generate_cluster(toy_config(1)), generate_cluster(toy_config(2, pm_count=4, vm_count=6))]
    with torch.no_grad():
        b = make_batch([policy.encode(s) for s in states], torch.float64)
        vm, pm, _, _ = policy.trunk(b)
        joint = policy.value(vm, pm, b)
        b1 = make_batch([policy.encode(states[1])], torch.float64, dedup=False)
        v1, p1, _, _ = policy.trunk(b1)
        assert abs(joint[1].item() - critic_forward(v1, p1, policy, b1).item()) < 1e-9


# --- sampling ---------------------------------------------------------------------------

def _tiny_policy(seed=0):
    return randomize(TwoStagePolicy(TINY, NormStats.fit([generate_cluster(toy_config(0))])).double(), seed)


def test_sampled_actions_are_legal_and_match_probabilities():
    """10^4 draws: every action legal; joint frequencies pass a chi-square test."""
    s = generate_cluster(small_config(3, 3, 5))
    pol = _tiny_policy(4)
    legal = pair_mask(s)
    with torch.no_grad():
        probs, vm, pm, sc = vm_actor_forward(pol.encode(s), pol, legal.any(axis=1))
        joint = np.zeros(legal.shape)
        for k in np.flatnonzero(legal.any(axis=1)):
            joint[k] = probs[k].item() * pm_actor_forward(int(k), vm, pm, sc, pol, legal[k]).numpy()
    rng = np.random.default_rng(0)
    counts = np.zeros(legal.shape)
    n = 10_000
    for _ in range(n):
        a, logp, _ = sample_two_stage_action(s, pol, rng)
        assert legal[a.vm, a.dest_pm]
        if a.dest_numa is not None:
            assert migration_violations(s, a.vm, a.dest_pm, a.dest_numa) == []
        assert abs(logp - np.log(joint[a.vm, a.dest_pm])) < 1e-9
        counts[a.vm, a.dest_pm] += 1
    assert counts[~legal].sum() == 0
    exp = joint[legal] * n
    assert exp.min() >= 5
    assert stats.chisquare(counts[legal], exp).pvalue > 1e-3


@settings(max_examples=15)
@given(clusters())
def test_sampling_only_returns_legal_actions(state):
    pol = _tiny_policy(1)
    legal = pair_mask(state)
    rng = np.random.default_rng(0)
    if not legal.any():
        with pytest.raises(NoLegalAction):
            sample_two_stage_action(state, pol, rng)
        return
    for _ in range(20):
        a, _, v = sample_two_stage_action(state, pol, rng)
        assert legal[a.vm, a.dest_pm]
        assert np.isfinite(v)


def test_greedy_is_deterministic(policy):
    s = generate_cluster(toy_config(9))
    a = [sample_two_stage_action(s, policy, np.random.default_rng(i), greedy=True)[0] for i in range(3)]
    assert a[0] == a[1] == a[2]


def test_filters_change_the_sampled_distribution(policy):
    s = generate_cluster(toy_config(9))
    only_max = lambda p: (p == p.max()).astype(float)
    greedy = sample_two_stage_action(s, policy, np.random.default_rng(0), greedy=True)[0]
    for i in range(5):
        a, logp, _ = sample_two_stage_action(s, policy, np.random.default_rng(i), vm_filter=only_max,
                                             pm_filter=only_max)
        assert a == greedy
        assert logp == 0.0


# --- size, gradients, checkpoints -------------------------------------------------------

def test_parameter_count_independent_of_cluster_size(norm):
    pol = TwoStagePolicy(norm=norm)
    count = pol.n_params()
    for pms in (4, 40):
        s = generate_cluster(small_config(1, pms, 2 * pms))
        with torch.no_grad():
            sample_two_stage_action(s, pol, np.random.default_rng(0))
        assert pol.n_params() == count


def test_gradients_match_finite_differences(norm):
    for draw in range(3):
        s = generate_cluster(toy_config(50 + draw, pm_count=4, vm_count=10))
        pol = randomize(TwoStagePolicy(norm=norm).double(), draw)
        legal = pair_mask(s)
        k = int(np.flatnonzero(legal.any(axis=1))[-1])
        i = int(np.flatnonzero(legal[k])[0])
        for which in (0, 1):
            errs = gradient_check(pol, lambda p: log_prob_and_value(p, s, k, i)[which], seed=draw)
            assert max(errs.values()) < 1e-3, errs


def test_checkpoint_round_trip_is_bit_exact(tmp_path, norm):
    pol = randomize(TwoStagePolicy(norm=norm), 5)
    path = tmp_path / "policy.pt"
    save_checkpoint(pol, path)
    back = load_checkpoint(path)
    assert back.cfg == pol.cfg
    for (n1, a), (n2, b) in zip(pol.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype and torch.equal(a, b)
    s = generate_cluster(toy_config(2))
    with torch.no_grad():
        x = pol.trunk(make_batch([pol.encode(s)]))[2]
        y = back.trunk(make_batch([back.encode(s)]))[2]
    assert torch.equal(x, y)
    assert path.stat().st_size < 2 * 1024 * 1024
    assert checkpoint_bytes(pol) < 2 * 1024 * 1024


def test_checkpoint_rejects_unknown_version(tmp_path, norm):
    path = tmp_path / "bad.pt"
    torch.save({"version": 99}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)

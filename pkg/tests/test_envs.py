import math

import numpy as np
import pytest
from scipy import stats

from latentcert import constants as C
from latentcert.core import episode_returns, rollout
from latentcert.envs import LiftedChainSpec, heuristic_policy, make_env, tabular_policy


def test_cartpole_labels():
    env = make_env("cartpole")
    assert env.label(np.zeros(4)).tolist() == [1, 1]
    assert env.label(np.array([1.6, 0, 0.2, 0])).tolist() == [0, 0]


def test_mountaincar_labels():
    env = make_env("mountaincar")
    assert env.label(np.array([0.5, 0.0])).tolist()[0] == 1
    assert env.label(np.array([-0.6, -0.01])).tolist() == [0, 0, 0]
    assert env.label(np.array([-0.5, 0.0])).tolist() == [0, 1, 1]


def test_pendulum_labels():
    env = make_env("pendulum")
    # observation is (cos, sin, omega)
    assert env.label(np.array([1.0, 0.0, 0.0])).tolist()[:3] == [1, 1, 1]
    th = 2.0
    assert env.label(np.array([math.cos(th), math.sin(th), -1.0])).tolist() == [0, 0, 1, 0]


def test_label_threshold_override():
    env = make_env("cartpole", {"labels": {env_name: 0.5 for env_name in make_env("cartpole").label_spec.names[:1]}})
    assert env.label(np.array([0.7, 0, 0, 0])).tolist()[0] == 0
    with pytest.raises(ValueError):
        make_env("cartpole", {"labels": {"nope": 1.0}})


def test_unknown_env():
    with pytest.raises(ValueError):
        make_env("acrobot")


def test_labels_are_pure():
    env = make_env("pendulum")
    s = np.array([0.3, -0.95, 0.2])
    assert env.label(s).tobytes() == env.label(s.copy()).tobytes()


def test_cartpole_at_rest_kinematics():
    env = make_env("cartpole")
    c = env.constants
    s = np.array([0.0, 0.0, 0.05, 0.0])
    nxt, _, _ = env.raw_step(s, 1, None)
    # position and angle integrate the old velocities, which are zero
    assert nxt[0] == 0.0 and nxt[2] == 0.05
    assert abs(nxt[0] - s[0]) <= c["tau"] * abs(s[1])
    # pushing right tips the pole left relative to pushing left
    nxt0, _, _ = env.raw_step(s, 0, None)
    assert nxt[3] < nxt0[3]


def test_cartpole_matches_gym_reference_step():
    # one step of the canonical equations evaluated by hand
    env = make_env("cartpole")
    s = np.array([0.01, -0.02, 0.03, 0.04])
    g, mc, mp, l, f, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    tm, pml = mc + mp, mp * l
    temp = (f + pml * 0.04**2 * math.sin(0.03)) / tm
    thacc = (g * math.sin(0.03) - math.cos(0.03) * temp) / (l * (4 / 3 - mp * math.cos(0.03) ** 2 / tm))
    xacc = temp - pml * thacc * math.cos(0.03) / tm
    want = [0.01 + tau * -0.02, -0.02 + tau * xacc, 0.03 + tau * 0.04, 0.04 + tau * thacc]
    got, raw, done = env.raw_step(s, 1, None)
    assert np.allclose(got, want, rtol=0, atol=1e-15)
    assert raw == 1.0 and not done


def test_cartpole_heuristic_return():
    env = make_env("cartpole")
    tr = rollout(env, heuristic_policy(env), 30 * C.CARTPOLE["max_episode_steps"], 0)
    rets = episode_returns(tr, raw=True, env=env)
    assert len(rets) >= 30
    assert np.mean(rets[:30]) >= 195


def test_mountaincar_heuristic_reaches_goal():
    env = make_env("mountaincar")
    tr = rollout(env, heuristic_policy(env), 200, 0)
    assert tr.resets.any()
    first = int(np.argmax(tr.resets))
    assert first < 200
    assert tr.labels[: first + 1, 1].any()


def test_pendulum_swing_up_reaches_top():
    env = make_env("pendulum")
    tr = rollout(env, heuristic_policy(env), 200, 1)
    assert tr.labels[100:, 0].mean() > 0.5


def test_chain_transition_frequencies_chi_square():
    env = make_env("lifted_chain")
    spec = env.spec
    rng = np.random.default_rng(0)
    n = 100_000
    i, a = 2, 1
    s = env.observe(i, rng)
    counts = np.zeros(spec.n_nodes)
    for _ in range(n):
        nxt, r, _ = env.step(s, a, rng)
        counts[env.node_of(nxt)] += 1
    p = spec.transition_matrix[a, i]
    nz = p > 0
    assert counts[~nz].sum() == 0
    chi = stats.chisquare(counts[nz], n * p[nz])
    assert chi.pvalue > 0.001


def test_chain_observations_stay_in_disc():
    env = make_env("lifted_chain")
    rng = np.random.default_rng(1)
    for node in range(env.spec.n_nodes):
        for _ in range(200):
            x = env.observe(node, rng)
            assert np.linalg.norm(x - env.spec.centers[node]) <= env.spec.observation_radius + 1e-12
            assert env.node_of(x) == node


def test_tabular_policy_frequencies():
    env = make_env("lifted_chain")
    table = np.array([[0.3, 0.7]] * env.spec.n_nodes)
    pol = tabular_policy(table, env.node_of)
    rng = np.random.default_rng(5)
    s = env.observe(0, rng)
    acts = np.array([pol.act(s, rng) for _ in range(100_000)])
    assert abs(acts.mean() - 0.7) <= 0.01


def test_chain_spec_validation():
    P = np.full((1, 3, 3), 1 / 3)
    ok = dict(n_nodes=3, transition_matrix=P, node_rewards=np.zeros(3), observation_radius=0.5, node_labels=np.zeros((3, 1)))
    LiftedChainSpec(**ok)
    with pytest.raises(ValueError):
        LiftedChainSpec(**dict(ok, observation_radius=0.9))
    with pytest.raises(ValueError):
        LiftedChainSpec(**dict(ok, transition_matrix=np.full((1, 3, 3), 0.3)))
    with pytest.raises(ValueError):
        LiftedChainSpec(**dict(ok, node_rewards=np.full(3, 0.6)))


def test_unknown_config_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        make_env("cartpole", {"gravity": 1.0})
    with pytest.raises(ValueError, match="unknown"):
        make_env("lifted_chain", {"labels": None, "nodes": 3})


import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentcert.checker import (
    Objective,
    ReducibleChainError,
    bisim_pseudometric,
    chain_from_dense,
    close_deadlocks,
    discrete_metric,
    evaluate_chain,
    export_prism,
    import_prism,
    induce_chain,
    lipschitz_constants,
    stationary_distribution,
    total_variation,
    transform_for_objective,
    value_constant,
    value_iteration,
    wasserstein_exact,
)
from latentcert.cli import load_bisim_fixture
from latentcert.latent import LatentMdp, LatentPolicyTable, UnsupportedPairError

from oracles import lp_bisim, lp_transport, random_chain
from prism_grammar import parse_explicit


def _mdp(rows, rewards, n_bits=2, n_ap=1, n_actions=1):
    rows = {k: sorted(v) for k, v in rows.items()}
    r = {k: (np.array([x for x, _ in v], dtype=np.int64), np.array([p for _, p in v])) for k, v in rows.items()}
    return LatentMdp(n_bits, n_ap, n_actions, r, rewards)


def _det_chain():
    # s0 = 0b00 -> s1 = 0b10 -> t = 0b01 (label bit 0 marks the target)
    return _mdp({(0, 0): [(2, 1.0)], (2, 0): [(1, 1.0)], (1, 0): [(0, 1.0)]}, {(0, 0): 0.1, (2, 0): 0.2, (1, 0): 0.3})


def prob_vectors(n):
    return st.lists(st.floats(0, 1), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.array(v) / sum(v)
    )


# -- objectives and value iteration ----------------------------------------


def test_transform_for_reach():
    m = _det_chain()
    t = transform_for_objective(m, Objective("reach", 0.9, T=(0,)))
    for a in range(m.n_actions):
        assert t.prob(1, a, 1) == 1.0
        assert t.reward(1, a) == pytest.approx(0.1)
    assert t.row(0, 0)[0].tolist() == [2] and t.reward(0, 0) == 0.0
    with pytest.raises(ValueError):
        transform_for_objective(m, Objective("discounted_return", 0.9))


def test_transform_constrained_reach_absorbs_outside_c():
    # bit 0 = target, bit 1 = constraint
    m = _mdp({(0, 0): [(2, 1.0)], (2, 0): [(1, 0.5), (0, 0.5)], (1, 0): [(1, 1.0)]}, {(0, 0): 0, (2, 0): 0, (1, 0): 0}, n_ap=2)
    t = transform_for_objective(m, Objective("constrained_reach", 0.9, T=(0,), C=(1,)))
    assert t.row(0, 0)[0].tolist() == [0] and t.reward(0, 0) == 0.0
    assert t.row(2, 0)[0].tolist() == [0, 1]
    v = value_iteration(m, None, Objective("constrained_reach", 0.9, T=(0,), C=(1,)), tol=1e-12)
    assert v.values[2] == pytest.approx(0.9 * 0.5)


def test_objective_validation():
    with pytest.raises(ValueError):
        Objective("reach", 0.9)
    with pytest.raises(ValueError):
        Objective("discounted_return", 1.0)


@pytest.mark.parametrize("gamma,v0", [(0.9, 0.81), (0.999, 0.998001)])
def test_reach_chain_values(gamma, v0):
    v = value_iteration(_det_chain(), None, Objective("reach", gamma, T=(0,)), tol=1e-12)
    assert v.values[1] == pytest.approx(1.0, abs=1e-9)
    assert v.values[2] == pytest.approx(gamma, abs=1e-9)
    assert v.values[0] == pytest.approx(v0, abs=1e-9)


def test_value_iteration_matches_linear_solve():
    rng = np.random.default_rng(0)
    for _ in range(20):
        P, R = random_chain(rng, 8)
        chain = chain_from_dense(P, R)
        V, res = evaluate_chain(chain, 0.9, tol=1e-9)
        exact = np.linalg.solve(np.eye(8) - 0.9 * P, R)
        assert np.max(np.abs(V - exact)) <= 1e-6
        res = np.array(res)
        keep = res[:-1] > 1e-8  # below this the ratio measures roundoff
        assert np.all(res[1:][keep] / res[:-1][keep] <= 0.9 + 1e-6)


def test_value_iteration_q_values_and_policy():
    m = _mdp(
        {(0, 0): [(0, 1.0)], (0, 1): [(1, 1.0)], (1, 0): [(1, 1.0)]},
        {(0, 0): 0.0, (0, 1): 0.5, (1, 0): 0.1},
        n_actions=2,
    )
    pol = LatentPolicyTable({0: np.array([0.0, 1.0]), 1: np.array([1.0, 0.0])}, 2)
    v = value_iteration(m, pol, Objective("discounted_return", 0.5), tol=1e-12)
    assert v.values[1] == pytest.approx(0.2)
    assert v.values[0] == pytest.approx(0.6)
    assert v.qvalues[(0, 0)] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        value_iteration(m, None, Objective("discounted_return", 0.5))


def test_value_iteration_unsupported_pair():
    m = _mdp({(0, 0): [(2, 1.0)]}, {(0, 0): 0.0})
    with pytest.raises(UnsupportedPairError):
        value_iteration(m, None, Objective("discounted_return", 0.5))


@given(st.integers(0, 10_000))
def test_reach_values_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    P, _ = random_chain(rng, 5)
    lab = rng.integers(0, 2, 5)
    lab[0] = 1
    R = (1 - 0.8) * lab
    for i in np.nonzero(lab)[0]:
        P[i] = 0
        P[i, i] = 1
    chain = chain_from_dense(P, R, lab[:, None])
    V = np.zeros(5)
    for _ in range(50):
        V_new = chain.R + 0.8 * (chain.P @ V)
        assert np.all(V_new >= V - 1e-15)
        V = V_new
    assert np.all(V <= 1 + 1e-12) and np.all(V[lab == 1] == pytest.approx(1 - 0.8**50))


# -- stationary distributions ----------------------------------------------


def test_stationary_examples():
    assert np.allclose(stationary_distribution(chain_from_dense([[0, 1], [1, 0]], [0, 0])), [0.5, 0.5])
    assert np.allclose(stationary_distribution(chain_from_dense([[1.0]], [0])), [1.0])


def test_stationary_matches_eigensolve():
    rng = np.random.default_rng(3)
    P, R = random_chain(rng, 5, sparsity=0.0)
    xi = stationary_distribution(chain_from_dense(P, R))
    w, vecs = np.linalg.eig(P.T)
    v = np.real(vecs[:, np.argmin(np.abs(w - 1))])
    v /= v.sum()
    assert np.max(np.abs(xi - v)) <= 1e-8


def test_stationary_transient_states_get_zero_mass():
    P = [[0.5, 0.5, 0], [0, 0, 1], [0, 1, 0]]
    xi = stationary_distribution(chain_from_dense(P, [0, 0, 0]))
    assert np.allclose(xi, [0, 0.5, 0.5])


def test_reducible_chain_rejected():
    with pytest.raises(ReducibleChainError, match="ergodic"):
        stationary_distribution(chain_from_dense(np.eye(2), [0, 0]))


# -- distances --------------------------------------------------------------


def test_total_variation_examples():
    assert total_variation([0.2, 0.8], [0.2, 0.8]) == 0
    assert total_variation([0.5, 0.5], [1, 0]) == 0.5
    assert total_variation([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        total_variation([0.5, 0.6], [1, 0])


def test_wasserstein_examples():
    d = np.array([[0, 2, 3], [2, 0, 1], [3, 1, 0.0]])
    p = np.array([0.2, 0.3, 0.5])
    assert wasserstein_exact(p, p, d) == 0
    assert wasserstein_exact([1, 0, 0], [0, 0, 1], d) == 3
    with pytest.raises(ValueError):
        wasserstein_exact([1, 0, 0], [0.5, 0, 0], d)


@given(prob_vectors(6), prob_vectors(6))
def test_wasserstein_discrete_metric_is_tv(p, q):
    assert abs(wasserstein_exact(p, q, discrete_metric(6)) - total_variation(p, q)) <= 1e-12


@given(st.integers(0, 100_000), st.integers(2, 9))
def test_wasserstein_matches_lp(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    p = rng.dirichlet(np.ones(n)) * (rng.random(n) > 0.3)
    q = rng.dirichlet(np.ones(n))
    if p.sum() == 0:
        p[0] = 1
    p /= p.sum()
    assert wasserstein_exact(p, q, d) == pytest.approx(lp_transport(p, q, d), abs=1e-9)


# -- Lipschitz constants ----------------------------------------------------


def test_lipschitz_examples():
    c = lipschitz_constants(chain_from_dense(np.full((3, 3), 1 / 3), [0.2] * 3), 0.9)
    assert c.KR == 0 and c.KP == 0
    c = lipschitz_constants(chain_from_dense([[1, 0], [0, 1]], [0, 0.1]), 0.9)
    assert c.KP == 1 and c.KR == pytest.approx(0.1)
    kv, warn = value_constant(0.5, 0.2, 1.0, 0.9)
    assert kv == pytest.approx(2.0) and warn is None


def test_value_constant_fallback_branch_warns():
    kv, warn = value_constant(0.5, 0.2, 1.25, 0.9)
    assert kv == pytest.approx(5.0) and "falls back" in warn


def test_lipschitz_ties_pick_smallest_pair():
    P = np.eye(3)
    c = lipschitz_constants(chain_from_dense(P, [0.0, 0.2, 0.0]), 0.5)
    assert c.KR_pair == (0, 1) and c.KP_pair == (0, 1)


@given(st.integers(0, 100_000))
def test_lipschitz_constants_are_tight(seed):
    rng = np.random.default_rng(seed)
    P, R = random_chain(rng, 6)
    c = lipschitz_constants(chain_from_dense(P, R), 0.9)
    tv = np.array([[total_variation(P[i], P[j]) for j in range(6)] for i in range(6)])
    dr = np.abs(R[:, None] - R[None])
    assert np.all(dr <= c.KR + 1e-15) and np.all(tv <= c.KP + 1e-12)
    i, j = c.KR_pair
    assert dr[i, j] == c.KR
    i, j = c.KP_pair
    assert tv[i, j] == pytest.approx(c.KP, abs=1e-12)
    want = min(c.Rmax / 0.1, c.KR / (1 - 0.9 * c.KP)) if 0.9 * c.KP < 1 else c.Rmax / 0.1
    assert c.KV == pytest.approx(want)


# -- bisimulation pseudometric ----------------------------------------------


def test_bisim_identical_states_at_zero():
    P = np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0.5, 0.5]])
    d, _ = bisim_pseudometric(chain_from_dense(P, [0.1, 0.1, 0.3]), "reward", 0.9)
    assert d[0, 1] == 0 and d[0, 2] > 0


def test_bisim_label_variant_lower_bound():
    P = np.full((3, 3), 1 / 3)
    d, _ = bisim_pseudometric(chain_from_dense(P, [0, 0, 0], [[0], [1], [0]]), "label", 0.9)
    assert d[0, 1] >= 1 and d[1, 2] >= 1 and d[0, 2] == 0


@pytest.mark.parametrize("variant", ["reward", "label"])
def test_bisim_matches_bundled_fixture(variant):
    fx = load_bisim_fixture()
    chain = chain_from_dense(fx["P"], fx["R"], fx["labels"])
    d, _ = bisim_pseudometric(chain, variant, fx["gamma"], tol=1e-13)
    assert np.max(np.abs(d - np.array(fx["distances"][variant]))) <= 1e-9


@pytest.mark.parametrize("variant", ["reward", "label"])
def test_bisim_matches_lp_iteration(variant):
    rng = np.random.default_rng(11)
    P, R = random_chain(rng, 5)
    lab = rng.integers(0, 2, (5, 1))
    d, _ = bisim_pseudometric(chain_from_dense(P, R, lab), variant, 0.8, tol=1e-13)
    ref = lp_bisim(P, R, lab, 0.8, variant)
    assert np.max(np.abs(d - ref)) <= 1e-9


@given(st.integers(0, 100_000))
def test_bisim_bounds_value_gap_and_is_pseudometric(seed):
    rng = np.random.default_rng(seed)
    P, R = random_chain(rng, 6)
    g = 0.9
    d, _ = bisim_pseudometric(chain_from_dense(P, R), "reward", g, tol=1e-10)
    V = np.linalg.solve(np.eye(6) - g * P, R)
    assert np.all(np.abs(V[:, None] - V[None]) <= d / (1 - g) + 1e-8)
    assert np.allclose(d, d.T) and np.all(np.diag(d) == 0)
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-8)


# -- PRISM export -----------------------------------------------------------


def _mdp_for_export():
    return _mdp(
        {(0, 0): [(1, 0.25), (3, 0.75)], (0, 1): [(0, 1.0)], (1, 0): [(0, 0.1), (1, 0.9)], (3, 1): [(3, 1.0)]},
        {(0, 0): 0.1, (0, 1): -0.2, (1, 0): 1 / 3, (3, 1): 0.0},
        n_bits=2,
        n_ap=2,
        n_actions=2,
    )


def test_two_state_deterministic_export(tmp_path):
    m = _mdp({(0, 0): [(1, 1.0)], (1, 0): [(0, 1.0)]}, {(0, 0): 0.0, (1, 0): 0.5})
    export_prism(m, tmp_path / "m")
    tra = (tmp_path / "m.tra").read_text().splitlines()
    assert tra[0] == "2 2 2"
    assert [line.split()[3] for line in tra[1:]] == ["1.0", "1.0"]


def test_export_round_trip_is_bit_identical(tmp_path):
    m = _mdp_for_export()
    first = export_prism(m, tmp_path / "a" / "m")
    back = import_prism(tmp_path / "a" / "m")
    assert back.to_json() == m.to_json()
    second = export_prism(back, tmp_path / "b" / "m")
    for x, y in zip(first, second):
        assert x.read_bytes() == y.read_bytes()


def test_label_file_marks_exact_states(tmp_path):
    m = _mdp_for_export()
    export_prism(m, tmp_path / "m")
    lab = (tmp_path / "m.lab").read_text().splitlines()
    marks = {int(k): set(map(int, v.split())) for k, v in (line.split(":") for line in lab[1:])}
    # states 0, 1, 3 are renumbered 0, 1, 2; proposition p_k has id k + 2
    assert marks == {0: {0}, 1: {2}, 2: {2, 3}}


def test_export_with_policy_writes_chain(tmp_path):
    m = _mdp_for_export()
    pol = LatentPolicyTable({0: np.array([0.5, 0.5]), 1: np.array([1.0, 0.0]), 3: np.array([0.0, 1.0])}, 2)
    export_prism(m, tmp_path / "m", policy=pol)
    mc = (tmp_path / "m_mc.tra").read_text().splitlines()
    assert mc[0] == "3 6"
    first = [line.split() for line in mc[1:] if line.startswith("0 ")]
    assert sum(float(x[2]) for x in first) == pytest.approx(1.0)


def test_close_deadlocks():
    m = _mdp({(0, 0): [(1, 1.0)]}, {(0, 0): 0.2})
    with pytest.raises(UnsupportedPairError):
        export_prism(m, "/tmp/never")
    c = close_deadlocks(m)
    assert c.prob(1, 0, 1) == 1.0 and c.metadata["closed_deadlocks"] == [1]
    assert close_deadlocks(c) is c


# A grammar-level reader for the PRISM explicit formats (.tra/.lab/.srew)
# following the published file syntax, independent of import_prism.

def test_fixture_model_parses_with_explicit_grammar(tmp_path):
    fx = load_bisim_fixture()
    P = np.array(fx["P"])
    rows = {(s, 0): [(x, P[s, x]) for x in np.nonzero(P[s])[0]] for s in range(4)}
    # encode the fixture as a one-proposition latent model: bit 0 = label, bit 1.. = index
    code = [int(fx["labels"][s][0]) + 2 * s for s in range(4)]
    rows = {(code[s], 0): sorted((code[x], p) for x, p in v) for (s, _), v in rows.items()}
    m = _mdp(rows, {(code[s], 0): fx["R"][s] for s in range(4)}, n_bits=3, n_ap=1)
    export_prism(m, tmp_path / "fx")
    assert parse_explicit(tmp_path / "fx") == (4, 4, int((P > 0).sum()))
    assert parse_explicit(tmp_path / "fx") and import_prism(tmp_path / "fx").to_json() == m.to_json()


def test_grammar_rejects_broken_files(tmp_path):
    m = _mdp_for_export()
    export_prism(m, tmp_path / "m")
    tra = tmp_path / "m.tra"
    lines = tra.read_text().splitlines()
    lines[1] = lines[1].replace("0.25", "0.5")
    tra.write_text("\n".join(lines) + "\n")
    with pytest.raises(AssertionError):
        parse_explicit(tmp_path / "m")

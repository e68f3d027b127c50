import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otafl.channel import ChannelEnv
from otafl.data import ClientShard, generate_synthetic_quadratic
from otafl.metrics import MetricsRow, RunTrace
from otafl.models import QUADRATIC, ModelSpec, initial_params, quadratic_constants_and_optimum
from otafl.protocols import LearningRate, Problem, ProtocolConfig, run_cwfl
from otafl.theory import (check_bound_dominance, estimate_gradient_bound, fit_convergence_slope,
                          theorem_constants)
from otafl.topology import mixing_uniform_complete, random_clusters


def consts(**over):
    kw = dict(L=3.0, mu=1.0, G=2.0, Gamma=0.5, alpha2=[0.1, 0.2, 0.3], E=2, P1=1.0, P2=2.0, d=4,
              mixing=mixing_uniform_complete(3), sigma2=[0.01, 0.02, 0.03], head=0, delta0=1.0)
    kw.update(over)
    return theorem_constants(**kw)


def test_gamma_and_first_step():
    c = consts()
    assert c.gamma == 36
    assert c.eta(0) == pytest.approx(1 / 18)
    assert consts(L=0.1, E=5).gamma == 5


def test_rejects_nonpositive_mu():
    with pytest.raises(ValueError):
        consts(mu=0.0)


def test_bound_scales_as_one_over_t():
    c = consts()
    assert c.bound(2e7) / c.bound(1e7) == pytest.approx(0.5, rel=1e-5)


def test_bound_monotone_decreasing():
    b = consts().bound(np.arange(0, 5000))
    assert np.all(np.diff(b) < 0)


def test_q1_reduces_without_noise_or_neighbours():
    c = consts(mixing=np.zeros((1, 1)), sigma2=[0.0], alpha2=[0.4, 0.6])
    E, G, L, Gamma = 2, 2.0, 3.0, 0.5
    assert c.Q1 == pytest.approx(8 * E**2 * G**2 + 6 * L * Gamma + 1.0 / 4)


def test_q1_term_by_term():
    # recompute the printed expression by hand for head 1 of a ring-free 3-head setup
    W = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    s2 = np.array([0.1, 0.2, 0.4])
    E, G, P1, P2, d, L, Gamma = 3, 1.5, 1.0, 2.0, 5, 2.0, 0.3
    alpha2 = [0.05, 0.07]
    c = theorem_constants(L=L, mu=0.5, G=G, Gamma=Gamma, alpha2=alpha2, E=E, P1=P1, P2=P2, d=d,
                          mixing=W, sigma2=s2, head=1, delta0=2.0)
    kappa = [0.5 * 0.2 + 0.5 * 0.4, 0.5 * 0.1 + 0.5 * 0.4, 0.5 * 0.1 + 0.5 * 0.2]
    A = 8 * E**2 * G**2 / (P1 * P2) * (3 * P2 * 0.5 + d * max(kappa) + P1 + 1 / 4)
    Q1 = (3 * 3 * 0.5 * P2 * A + 8 * E**2 * G**2 + 6 * L * Gamma + 0.12 / 4
          + 4 * d * 0.2 * E**2 * G**2 / (P1 * 4) + d * kappa[1] * A)
    assert c.A == pytest.approx(A, rel=1e-12)
    assert c.Q1 == pytest.approx(Q1, rel=1e-12)


def test_doubling_q1_doubles_bound():
    c = consts(delta0=1e-9)
    from dataclasses import replace
    c2 = replace(c, Q1=2 * c.Q1)
    assert c2.bound(100.0) == pytest.approx(2 * c.bound(100.0), rel=1e-12)


def test_pure_function():
    assert consts() == consts()


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(0.01, 10), ratio=st.floats(1, 100), E=st.integers(1, 20))
def test_step_size_conditions(mu, ratio, E):
    L = mu * ratio
    c = consts(mu=mu, L=L, E=E)
    t = np.arange(0, 2000)
    assert np.all(c.eta(t) <= 2 * c.eta(t + E) * (1 + 1e-12))
    assert np.all(c.eta(t) <= 1 / (6 * L) * (1 + 1e-12))


def _trace(values, ts, node=0, rows=None):
    tr = rows or RunTrace("x", 0)
    for t, v in zip(ts, values):
        tr.rows.append(MetricsRow(t=int(t), node=node, distance=float(v)))
    return tr


def test_slope_exact_power_law():
    ts = np.arange(10, 1000, 7)
    assert fit_convergence_slope(_trace(5 / ts, ts), 10, 1000) == pytest.approx(-1.0, abs=1e-6)


def test_slope_constant():
    ts = np.arange(1, 100)
    assert fit_convergence_slope(_trace(np.full(len(ts), 3.0), ts), 1, 100) == pytest.approx(0.0, abs=1e-12)


def test_slope_averages_nodes():
    ts = np.arange(10, 500, 10)
    tr = _trace(1 / ts, ts, node=0)
    _trace(1 / ts**2, ts, node=1, rows=tr)
    assert fit_convergence_slope(tr, 10, 500) == pytest.approx(-1.5, abs=1e-9)


def test_slope_rejects_nonpositive():
    ts = np.arange(1, 10)
    vals = np.ones(9)
    vals[4] = 0.0
    with pytest.raises(ValueError, match="t=5"):
        fit_convergence_slope(_trace(vals, ts), 1, 10)


def test_gradient_bound_zero_variance():
    x = np.array([[0.5, -1.0, 2.0]])
    shards = [ClientShard(k, np.repeat(x, 6, axis=0), np.full(6, 0.3 * k)) for k in range(3)]
    model = ModelSpec(QUADRATIC, 3, l2_coeff=0.1)
    G, alpha2 = estimate_gradient_bound(model, shards, np.ones(3), batch_size=2, seed=0)
    assert max(alpha2) < 1e-12
    assert G > 0


def test_gradient_bound_dominates_full_gradient():
    from otafl.models import local_gradient
    shards = generate_synthetic_quadratic(0, 5, 20, 3, 0.5)
    model = ModelSpec(QUADRATIC, 3, l2_coeff=0.1)
    theta = initial_params(3, 0)
    G, alpha2 = estimate_gradient_bound(model, shards, theta, batch_size=4, seed=0)
    assert G >= max(np.linalg.norm(local_gradient(model, theta, s)) for s in shards)
    assert all(a > 0 for a in alpha2)


def test_gradient_bound_grows_with_feature_scale():
    shards = generate_synthetic_quadratic(0, 5, 20, 3, 0.5)
    doubled = [ClientShard(s.client_id, 2 * s.features, s.labels) for s in shards]
    model = ModelSpec(QUADRATIC, 3, l2_coeff=0.1)
    theta = initial_params(3, 0)
    G1, _ = estimate_gradient_bound(model, shards, theta, 4, 0)
    G2, _ = estimate_gradient_bound(model, doubled, theta, 4, 0)
    assert G2 > G1


def test_bound_dominance_noiseless_iid():
    # sigma = 0, identical shards (Gamma = 0): the bound holds at desk scale
    base = generate_synthetic_quadratic(2, 1, 40, 3, 0.0)[0]
    shards = [ClientShard(k, base.features, base.labels) for k in range(8)]
    model = ModelSpec(QUADRATIC, 3, l2_coeff=0.1)
    qc = quadratic_constants_and_optimum(shards, 0.1)
    C, E = 2, 3
    W = mixing_uniform_complete(C)
    layout = random_clusters(8, C, 0)
    theta0 = initial_params(3, 0)
    G, alpha2 = estimate_gradient_bound(model, shards, theta0, 4, 0)
    lr = LearningRate.theorem(qc.mu, qc.L, E)
    traces = [run_cwfl(ProtocolConfig("cwfl", model, Problem(shards, theta_star=qc.theta_star),
                                      ChannelEnv(1, 2, [0.0], noise_seed=s), 600, E, layout=layout,
                                      mixing=W, lr=lr, batch_size=4, seed=s, theta0=theta0))
              for s in range(5)]
    mean = RunTrace("cwfl", 0)
    for node in range(C):
        ts = traces[0].series("distance", node)[0]
        vals = np.mean([tr.series("distance", node)[1] for tr in traces], axis=0)
        _trace(vals, ts, node=node, rows=mean)
    delta0 = float((theta0 - qc.theta_star) @ (theta0 - qc.theta_star))
    per_head = [theorem_constants(L=qc.L, mu=qc.mu, G=G, Gamma=qc.Gamma,
                                  alpha2=[alpha2[k] for k in layout.members(c)], E=E, P1=1, P2=2,
                                  d=3, mixing=W, sigma2=[0.0, 0.0], head=c, delta0=delta0)
                for c in range(C)]
    report = check_bound_dominance(mean, per_head)
    assert report.ok, report.violations[:3]
    assert report.max_ratio < 1


def test_bound_report_flags_violations():
    c = consts(delta0=1.0)
    ts = np.array([0, 10, 20])
    tr = _trace(c.bound(ts) * np.array([0.5, 2.0, 0.5]), ts)
    rep = check_bound_dominance(tr, c)
    assert not rep.ok
    assert [v[0] for v in rep.violations] == [10]
    assert rep.max_ratio == pytest.approx(2.0)

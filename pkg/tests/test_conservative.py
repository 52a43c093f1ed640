import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from countmorl.conservative import (PenaltySpec, build_conservative_mdp, conservative_from_transition, penalty,
                                    penalty_table, save_penalty_audit)
from countmorl.counting import ExactCountOracle
from countmorl.dataset import exact_counts, generate_dataset
from countmorl.estimation import ErrorBoundConfig, error_bound, fit_ensemble, fit_mle
from countmorl.counting import ingest_dataset, make_count_ensemble
from countmorl.mdp import (discounted_visitation, policy_evaluation, random_mdp, scalar_return, uniform_policy,
                           value_iteration)

GAMMA, R_MAX = 0.9, 1.0


class TestPenalty:
    def test_practical_values(self):
        spec = PenaltySpec(beta=2.0)
        assert penalty(0.5, 16, spec, GAMMA, R_MAX) == (0.0, 0.5)
        assert penalty(0.5, 0, spec, GAMMA, R_MAX) == (-1.5, 2.0)
        # negative LC counts are treated as unobserved
        assert penalty(0.5, -3.2, spec, GAMMA, R_MAX)[1] == 2.0

    def test_theory_values(self):
        cfg = ErrorBoundConfig(0.1, 2.0)
        spec = PenaltySpec(mode="theory", bound_cfg=cfg)
        r, amount = penalty(1.0, 100, spec, GAMMA, R_MAX)
        assert amount == pytest.approx(9.0 * 0.293345703666989, abs=1e-12)
        assert r == pytest.approx(1.0 - amount)
        assert penalty(0.0, 0, spec, GAMMA, R_MAX)[1] == pytest.approx(9.0)

    def test_fractional_counts_never_exceed_beta(self):
        spec = PenaltySpec(beta=1.5)
        assert penalty(0.0, 0.25, spec, GAMMA, R_MAX)[1] == 1.5
        assert penalty(0.0, 1.0, spec, GAMMA, R_MAX)[1] == 1.5

    def test_zero_beta_is_unpenalized(self):
        spec = PenaltySpec(beta=0.0)
        np.testing.assert_array_equal(penalty_table(np.array([0.0, 3.0]), spec, GAMMA, R_MAX), [0.0, 0.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            PenaltySpec(mode="optimistic")
        with pytest.raises(ValueError):
            PenaltySpec(beta=-1.0)
        with pytest.raises(ValueError):
            PenaltySpec(alpha=-0.1)

    @settings(max_examples=80)
    @given(st.floats(-5, 1e6), st.sampled_from(["practical", "theory"]), st.floats(0, 5))
    def test_table_matches_scalar_and_is_bounded(self, n, mode, beta):
        spec = PenaltySpec(mode=mode, beta=beta)
        table = penalty_table(np.array([n]), spec, GAMMA, R_MAX)[0]
        assert table == pytest.approx(penalty(0.0, n, spec, GAMMA, R_MAX)[1], rel=1e-12, abs=1e-15)
        assert 0.0 <= table <= spec.max_penalty(GAMMA, R_MAX) + 1e-12

    @settings(max_examples=60)
    @given(st.floats(0.5, 1e6), st.floats(0.5, 1e6), st.sampled_from(["practical", "theory"]))
    def test_non_increasing_in_count(self, n1, n2, mode):
        spec = PenaltySpec(mode=mode)
        lo, hi = sorted((n1, n2))
        assert penalty(0, hi, spec, GAMMA, R_MAX)[1] <= penalty(0, lo, spec, GAMMA, R_MAX)[1]


class TestConservativeMdp:
    @pytest.fixture
    def setup(self):
        mdp = random_mdp(4, 2, gamma=GAMMA, seed=3)
        pi = np.array([[1.0, 0.0]] * 3 + [[0.5, 0.5]])
        data = generate_dataset(mdp, pi, 400, seed=0)
        return mdp, data

    def test_reward_and_transition(self, setup):
        mdp, data = setup
        ens = fit_ensemble(data, 1, include_plain=True)
        counts = exact_counts(data)
        spec = PenaltySpec(beta=1.0)
        cmdp = build_conservative_mdp(ens, ExactCountOracle(counts), mdp.reward, spec, GAMMA, R_MAX,
                                      mdp.initial_dist)
        expected_pen = np.where(counts > 0, 1 / np.sqrt(np.maximum(counts, 1)), 1.0)
        np.testing.assert_allclose(cmdp.penalty_table, expected_pen)
        np.testing.assert_allclose(cmdp.rtilde, mdp.reward - expected_pen)
        np.testing.assert_allclose(cmdp.base.transition, fit_mle(data).completed())
        assert cmdp.base.r_max >= np.abs(cmdp.rtilde).max()

    def test_unobserved_pairs_are_penalized_sinks(self, setup):
        mdp, data = setup
        counts = exact_counts(data)
        assert (counts == 0).any()
        cmdp = build_conservative_mdp(fit_ensemble(data, 3, seed=1), ExactCountOracle(counts), mdp.reward,
                                      PenaltySpec(beta=0.7), GAMMA, R_MAX, mdp.initial_dist)
        for s, a in np.argwhere(counts == 0):
            assert cmdp.base.transition[s, a, s] == 1.0
            assert cmdp.penalty_table[s, a] == 0.7

    def test_theory_identity(self, setup):
        # V_tilde = V_hat - gamma R_max / (1 - gamma) * E_{d_hat}[C_hat] / (1 - gamma)
        mdp, data = setup
        model = fit_mle(data)
        counts = model.source_counts.astype(float)
        cfg = ErrorBoundConfig(0.1, 1.0)
        cmdp = conservative_from_transition(model.completed(), mdp.reward, counts,
                                            PenaltySpec(mode="theory", bound_cfg=cfg), GAMMA, R_MAX,
                                            mdp.initial_dist)
        m_hat = mdp.replace(transition=model.completed())
        pi = uniform_policy(4, 2)
        d = discounted_visitation(m_hat, pi)
        c_hat = np.vectorize(lambda n: error_bound(n, cfg))(counts)
        v_hat = mdp.initial_dist @ policy_evaluation(m_hat, pi, 1e-12)
        v_tilde = mdp.initial_dist @ policy_evaluation(cmdp.base, pi, 1e-12)
        coef = GAMMA * R_MAX / (1 - GAMMA) ** 2
        assert v_tilde == pytest.approx(v_hat - coef * (d * c_hat).sum(), abs=1e-9)

    def test_huge_counts_vanishing_penalty(self, setup):
        mdp, _ = setup
        counts = np.full((4, 2), 1e14)
        cmdp = conservative_from_transition(mdp.transition, mdp.reward, counts, PenaltySpec(mode="theory"),
                                            GAMMA, R_MAX, mdp.initial_dist)
        v1, _ = value_iteration(cmdp.base)
        v0, _ = value_iteration(mdp)
        np.testing.assert_allclose(v1, v0, atol=1e-4)

    def test_terminal_states_are_unpenalized_self_loops(self, setup):
        mdp, data = setup
        terminal = np.array([False, False, True, False])
        cmdp = conservative_from_transition(fit_mle(data).completed(), mdp.reward, np.zeros((4, 2)),
                                            PenaltySpec(beta=1.0), GAMMA, R_MAX, mdp.initial_dist, "t", terminal)
        assert np.all(cmdp.penalty_table[2] == 0.0)
        assert np.all(cmdp.base.transition[2, :, 2] == 1.0)
        assert np.all(cmdp.penalty_table[[0, 1, 3]] == 1.0)
        with pytest.raises(ValueError, match="terminal"):
            conservative_from_transition(mdp.transition, mdp.reward, np.zeros((4, 2)), PenaltySpec(), GAMMA,
                                         R_MAX, mdp.initial_dist, terminal=np.ones(3, bool))

    def test_shape_checks(self, setup):
        mdp, data = setup
        with pytest.raises(ValueError):
            conservative_from_transition(mdp.transition, mdp.reward, np.zeros((3, 2)), PenaltySpec(), GAMMA,
                                         R_MAX, mdp.initial_dist)
        with pytest.raises(ValueError):
            build_conservative_mdp(fit_ensemble(data, 1), ExactCountOracle(np.zeros((5, 2))), mdp.reward,
                                   PenaltySpec(), GAMMA, R_MAX, mdp.initial_dist)

    def test_penalty_audit_csv(self, setup, tmp_path):
        mdp, data = setup
        cmdp = build_conservative_mdp(fit_ensemble(data, 2), ExactCountOracle(exact_counts(data)), mdp.reward,
                                      PenaltySpec(), GAMMA, R_MAX, mdp.initial_dist)
        save_penalty_audit(cmdp, mdp.reward, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "s,a,r,nhat,penalty,rtilde"
        assert len(lines) == 9
        s, a, r, n, pen, rt = lines[3].split(",")
        assert float(r) - float(pen) == pytest.approx(float(rt))
        assert float(pen) == (1.0 if float(n) == 0 else pytest.approx(1 / math.sqrt(float(n))))


@pytest.fixture(scope="module")
def hashed():
    mdp = random_mdp(6, 3, gamma=GAMMA, seed=11)
    data = generate_dataset(mdp, uniform_policy(6, 3), 800, seed=1)
    counts = make_count_ensemble(6, 3, 5, 4, feature_map="noisy_onehot", alpha=0.8, seed=2)
    ingest_dataset(counts, data)
    return mdp, fit_ensemble(data, 3, seed=0), counts


class TestModeAndBetaOrdering:
    @pytest.mark.parametrize("mode", ["practical", "theory"])
    def test_lc_penalties_dominate(self, hashed, mode):
        mdp, ens, counts = hashed
        pens = [build_conservative_mdp(ens, counts, mdp.reward, PenaltySpec(mode=mode, count_mode=m, alpha=0.8),
                                       GAMMA, R_MAX, mdp.initial_dist).penalty_table for m in ("LC", "AVG", "UC")]
        assert np.all(pens[0] >= pens[1]) and np.all(pens[1] >= pens[2])
        assert np.any(pens[0] > pens[2])

    def test_beta_monotone_returns(self, hashed):
        mdp, ens, counts = hashed
        pi = uniform_policy(6, 3)
        returns = [scalar_return(build_conservative_mdp(ens, counts, mdp.reward, PenaltySpec(beta=b), GAMMA, R_MAX,
                                                        mdp.initial_dist).base, pi) for b in (0.0, 0.5, 1.0, 3.0)]
        assert all(x >= y for x, y in zip(returns, returns[1:]))

    def test_zero_beta_is_the_estimated_mdp(self, hashed):
        mdp, ens, counts = hashed
        cmdp = build_conservative_mdp(ens, counts, mdp.reward, PenaltySpec(beta=0.0), GAMMA, R_MAX, mdp.initial_dist)
        assert np.array_equal(cmdp.rtilde, mdp.reward)
        assert np.array_equal(cmdp.base.transition, ens.mean_transition())

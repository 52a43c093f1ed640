import numpy as np
import pytest

from countmorl.dataset import exact_counts
from countmorl.gridworld import (GOAL_REWARD, LAVA_REWARD, LAYOUT_KINDS, STEP_REWARD, BehaviorTrainConfig,
                                 build_gridworld, epsilon_greedy, gridworld, load_layout, parse_layout,
                                 q_learning, reachable_pairs, train_behavior)
from countmorl.mdp import scalar_return, value_iteration

UP, DOWN, LEFT, RIGHT = range(4)


@pytest.fixture(scope="module")
def grids():
    return {k: gridworld(k) for k in LAYOUT_KINDS}


class TestLayouts:
    @pytest.mark.parametrize("kind", LAYOUT_KINDS)
    def test_shape_and_validity(self, grids, kind):
        mdp = grids[kind]
        assert (mdp.num_states, mdp.num_actions) == (64, 4)
        assert mdp.gamma == 0.99 and mdp.r_max == 1.0
        assert set(np.unique(mdp.transition)) == {0.0, 1.0}
        assert mdp.initial_dist.sum() == 1.0

    def test_lava_counts(self):
        lava = {k: len(load_layout(k).lava_cells) for k in LAYOUT_KINDS}
        assert lava["empty"] == 0
        assert lava["cliff"] == 6
        assert lava["zigzag"] == 12
        assert lava["bridge"] > 0

    def test_walls_clamp(self, grids):
        mdp = grids["empty"]
        assert mdp.transition[0, UP, 0] == 1.0
        assert mdp.transition[0, LEFT, 0] == 1.0
        assert mdp.transition[0, RIGHT, 1] == 1.0
        assert mdp.transition[0, DOWN, 8] == 1.0

    def test_rewards_and_absorption(self, grids):
        mdp = grids["cliff"]
        layout = load_layout("cliff")
        start = layout.index(layout.start)
        goal = layout.index(layout.goal)
        assert mdp.reward[start, RIGHT] == LAVA_REWARD
        assert mdp.reward[start, UP] == STEP_REWARD
        assert mdp.reward[goal - 8, DOWN] == GOAL_REWARD
        absorbing = mdp.absorbing_states()
        assert absorbing[goal] and absorbing[start + 1] and not absorbing[start]
        assert np.all(mdp.reward[absorbing] == 0.0)
        assert absorbing.sum() == 1 + len(layout.lava_cells)

    @pytest.mark.parametrize("kind", ["bridge", "cliff", "zigzag"])
    def test_goal_reachable_without_lava(self, grids, kind):
        mdp = grids[kind]
        v, _ = value_iteration(mdp)
        assert mdp.initial_dist @ v > 0

    def test_parse_errors(self):
        with pytest.raises(ValueError, match="equal length"):
            parse_layout("S.\n...G")
        with pytest.raises(ValueError, match="exactly one"):
            parse_layout("S.\n..")
        with pytest.raises(ValueError, match="unknown cell"):
            parse_layout("SX\n.G")

    def test_custom_layout(self):
        mdp = build_gridworld(parse_layout("SLG\n..."), gamma=0.9)
        assert mdp.num_states == 6
        assert mdp.transition[0, RIGHT, 1] == 1.0 and mdp.reward[0, RIGHT] == LAVA_REWARD


class TestBehavior:
    def test_deterministic(self, grids):
        cfg = BehaviorTrainConfig(episodes=50, seed=3)
        q1, d1 = q_learning(grids["bridge"], cfg)
        q2, d2 = q_learning(grids["bridge"], cfg)
        assert np.array_equal(q1, q2) and d1 == d2

    def test_replay_never_acts_in_absorbing_states(self, grids):
        mdp = grids["zigzag"]
        _, data = train_behavior(mdp, BehaviorTrainConfig(episodes=200, seed=1))
        assert not np.any(mdp.absorbing_states()[data.states])

    def test_min_transitions_extends_training(self, grids):
        _, data = q_learning(grids["empty"], BehaviorTrainConfig(episodes=1, min_transitions=5000))
        assert len(data) >= 5000

    def test_learns_to_reach_goal(self, grids):
        mdp = grids["cliff"]
        policy, _ = train_behavior(mdp, BehaviorTrainConfig(episodes=1500, seed=0))
        assert scalar_return(mdp, policy) > 0.5

    def test_epsilon_greedy_mixture(self):
        pi = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(epsilon_greedy(pi, 0.2), [[0.1, 0.9], [0.9, 0.1]])

    def test_empty_coverage_matches_reachability(self, grids):
        # the only pairs missing from a large replay buffer are those at absorbing states
        mdp = grids["empty"]
        _, data = train_behavior(mdp, BehaviorTrainConfig(episodes=1000, min_transitions=30_000, seed=0))
        observed = exact_counts(data) > 0
        assert np.array_equal(observed, reachable_pairs(mdp))
        assert observed.sum() == 4 * 63

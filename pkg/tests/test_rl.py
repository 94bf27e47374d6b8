import math

import pytest
import torch

from estinet.config import RewardFormula, RLConfig
from estinet.data_utils.utils import read_jsonl
from estinet.rl import (
    AgentNet,
    EpisodeSpec,
    MnistEpisodeEnv,
    Trajectory,
    accuracy_curve,
    actor_critic_loss,
    compare_learning_efficiency,
    curve_to_run_log,
    reward,
    run_episode,
    train_agent,
)
from tests.conftest import fake_mnist_split


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)


def test_reward():
    assert reward([3, 9], [3, 5]) == -4.0
    assert reward([4, 9], [5, 8], RewardFormula.SIGNED_SUM) == 0.0
    assert reward([4, 9], [5, 8], RewardFormula.ABSOLUTE) == -2.0
    assert reward([7], [7]) == 0.0
    with pytest.raises(ValueError):
        reward([1, 2], [1])


def test_episode_spec_validation():
    assert EpisodeSpec(2, "signed_sum").reward_formula == RewardFormula.SIGNED_SUM
    with pytest.raises(ValueError):
        EpisodeSpec(0)


def test_env_rewards_only_the_last_step():
    split = fake_mnist_split(20, seed=0)
    env = MnistEpisodeEnv(split, EpisodeSpec(2), seed=0)

    with pytest.raises(RuntimeError, match="reset"):
        env.step(0)

    state = env.reset()
    labels = env.labels
    assert state.shape == (28, 28)
    with pytest.raises(ValueError):
        env.step(10)

    next_state, first_reward, done = env.step(labels[0])
    assert next_state.shape == (28, 28)
    assert (first_reward, done) == (0.0, False)

    next_state, last_reward, done = env.step(labels[1])
    assert next_state is None
    assert (last_reward, done) == (0.0, True)
    with pytest.raises(RuntimeError):
        env.step(0)


def test_agent_net_heads():
    agent = AgentNet()
    logits, values = agent(torch.rand(3, 28, 28))

    assert logits.shape == (3, 10)
    assert values.shape == (3,)
    assert torch.allclose(agent.policy(torch.rand(2, 28, 28)).sum(-1), torch.ones(2), atol=1e-5)


def test_agent_net_has_no_unused_parameters():
    agent = AgentNet()
    logits, values = agent(torch.rand(3, 28, 28))
    (logits.sum() + values.sum()).backward()

    assert all(p.grad is not None for p in agent.parameters())


def test_trajectory_returns():
    trajectory = Trajectory(rewards=[0.0, 0.0, -3.0])

    assert trajectory.episode_reward == -3.0
    assert trajectory.returns().tolist() == [-3.0, -3.0, -3.0]


def test_run_episode():
    env = MnistEpisodeEnv(fake_mnist_split(20, seed=0), EpisodeSpec(3), seed=0)

    trajectory = run_episode(AgentNet(), env, generator=torch.Generator().manual_seed(0))

    assert len(trajectory.states) == len(trajectory.actions) == len(trajectory.rewards) == 3
    assert trajectory.rewards[:2] == [0.0, 0.0]
    assert trajectory.episode_reward == reward(trajectory.actions, trajectory.labels)


def test_actor_critic_loss_baseline_subtracts_values():
    logits = torch.zeros(2, 10)
    values = torch.tensor([1.0, 1.0], requires_grad=True)
    actions = torch.tensor([0, 1])
    returns = torch.tensor([1.0, 1.0])

    __, with_baseline = actor_critic_loss(logits, values, actions, returns)
    __, without_baseline = actor_critic_loss(logits, values, actions, returns, use_baseline=False)

    # the advantage is zero when the critic predicts the return exactly
    assert with_baseline["policy_loss"] == 0.0
    assert without_baseline["policy_loss"] == pytest.approx(2 * math.log(10))
    assert with_baseline["value_loss"] == 0.0
    assert with_baseline["entropy"] == pytest.approx(2 * math.log(10))


def test_actor_critic_loss_raises_probability_of_rewarded_action():
    logits = torch.zeros(1, 10, requires_grad=True)
    values = torch.zeros(1, requires_grad=True)

    loss, __ = actor_critic_loss(logits, values, torch.tensor([4]), torch.tensor([2.0]))
    loss.backward()

    assert logits.grad[0, 4] < 0
    assert (logits.grad[0, torch.arange(10) != 4] > 0).all()


def _per_episode_policy_gradients(actions, returns, use_baseline):
    # one row of logits per one-step episode, so each row's grad is that episode's gradient
    logits = torch.zeros(len(actions), 2, requires_grad=True)
    values = torch.full((len(actions),), 1.5, requires_grad=True)
    loss, __ = actor_critic_loss(logits, values, actions, returns, use_baseline=use_baseline)
    loss.backward()
    return logits.grad


def test_value_baseline_leaves_expected_policy_gradient_unchanged():
    n_episodes = 10000
    generator = torch.Generator().manual_seed(0)
    actions = torch.multinomial(torch.tensor([0.5, 0.5]), n_episodes, True, generator=generator)
    returns = torch.tensor([1.0, 3.0])[actions]

    with_baseline = _per_episode_policy_gradients(actions, returns, use_baseline=True)
    without_baseline = _per_episode_policy_gradients(actions, returns, use_baseline=False)

    # E[-R * grad log pi] at uniform logits is [0.5, -0.5]
    for grads in (with_baseline, without_baseline):
        standard_error = grads.std(dim=0) / math.sqrt(n_episodes)
        assert torch.all((grads.mean(dim=0) - torch.tensor([0.5, -0.5])).abs() < 3 * standard_error)
    difference = with_baseline - without_baseline
    standard_error = difference.std(dim=0) / math.sqrt(n_episodes)
    assert torch.all(difference.mean(dim=0).abs() < 3 * standard_error)
    assert with_baseline.var(dim=0).sum() < without_baseline.var(dim=0).sum()


@pytest.mark.slow
def test_train_agent_writes_run_log(tmp_path):
    log_path = tmp_path / "rl_run_log.jsonl"
    config = RLConfig(updates=4, eval_every=2, eval_images=10)

    agent, run_log = train_agent(
        fake_mnist_split(50, seed=0),
        fake_mnist_split(10, seed=1),
        k=2,
        rl_config=config,
        seed=0,
        log_path=str(log_path),
    )

    assert [r["update"] for r in run_log] == [0, 1, 2, 3, 4]
    assert [u for u, __ in accuracy_curve(run_log)] == [0, 2, 4]
    assert all(r["reward"] <= 0 for r in run_log[1:])
    assert read_jsonl(str(log_path)) == run_log
    assert isinstance(agent, AgentNet)


def test_compare_learning_efficiency():
    estinet_log = curve_to_run_log([(0, 0.1), (100, 0.95), (200, 0.97)])
    rl_log = curve_to_run_log([(0, 0.1), (150, 0.5), (300, 0.6)])

    report = compare_learning_efficiency(estinet_log, rl_log, threshold=0.9)

    assert report.estinet_updates_to_threshold == 100
    assert report.rl_updates_to_threshold is None
    assert report.estinet_updates_to_best == 200
    assert report.rl_updates_to_best == 300
    assert report.estinet_dominates
    assert report.aligned[:3] == [(0, 0.1, 0.1), (100, 0.95, 0.1), (150, 0.95, 0.5)]
    assert report.rows()[1] == ("rl", None, 300)


def test_compare_learning_efficiency_without_threshold_uses_best():
    estinet_log = curve_to_run_log([(0, 0.1), (50, 0.4)])
    rl_log = curve_to_run_log([(0, 0.1), (500, 0.3)])

    assert compare_learning_efficiency(estinet_log, rl_log).estinet_dominates


def test_compare_learning_efficiency_rl_reaching_threshold_wins():
    estinet_log = curve_to_run_log([(0, 0.1), (100, 0.8)])
    rl_log = curve_to_run_log([(0, 0.1), (500, 0.95)])

    report = compare_learning_efficiency(estinet_log, rl_log, threshold=0.9)

    assert report.estinet_updates_to_threshold is None
    assert report.rl_updates_to_threshold == 500
    # reaching its best sooner does not make up for never reaching the threshold
    assert report.estinet_updates_to_best < report.rl_updates_to_best
    assert report.estinet_dominates is False


@pytest.mark.parametrize("estinet_update, expected", [(200, True), (600, False)])
def test_compare_learning_efficiency_both_reach_threshold(estinet_update, expected):
    estinet_log = curve_to_run_log([(0, 0.1), (estinet_update, 0.92)])
    rl_log = curve_to_run_log([(0, 0.1), (400, 0.91)])

    report = compare_learning_efficiency(estinet_log, rl_log, threshold=0.9)

    assert report.estinet_dominates is expected


def test_compare_learning_efficiency_needs_accuracy_records():
    with pytest.raises(ValueError, match="EstiNet"):
        compare_learning_efficiency([], curve_to_run_log([(0, 0.1)]))
    with pytest.raises(ValueError, match="RL"):
        compare_learning_efficiency(curve_to_run_log([(0, 0.1)]), [{"update": 1, "reward": -1}])

"""
Advantage actor-critic agent for the image-addition task: each episode shows k MNIST
images, the agent answers one digit per image, and the terminal reward is the negated
error of its answers. Used as the reinforcement-learning point of comparison for the
extractor's learning efficiency.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
from tqdm.auto import trange

from .autodiff import forward_op
from .config import RewardFormula, RLConfig
from .data_utils.utils import read_jsonl, write_jsonl
from .estinet import DivergenceError
from .evaluation import NOT_REACHED, updates_to_threshold
from .models import DigitFeatures
from .monitors import digit_accuracy

logger = logging.getLogger(__name__)

N_ACTIONS = 10


@dataclass
class EpisodeSpec:
    k: int
    reward_formula: RewardFormula = RewardFormula.ABSOLUTE

    def __post_init__(self):
        self.reward_formula = RewardFormula(self.reward_formula)
        if self.k < 1:
            raise ValueError(f"Invalid k={self.k}. Must be >= 1")


def reward(actions, labels, formula=RewardFormula.ABSOLUTE):
    """Negated answer error: sum of absolute errors, or the absolute value of the summed error."""
    if len(actions) != len(labels):
        raise ValueError(f"Got {len(actions)} actions for {len(labels)} labels")
    errors = [int(a) - int(y) for a, y in zip(actions, labels)]
    if RewardFormula(formula) == RewardFormula.SIGNED_SUM:
        return -float(abs(sum(errors)))
    return -float(sum(abs(e) for e in errors))


class MnistEpisodeEnv:
    """Fixed-length episodes over random MNIST images; only the last step is rewarded."""

    def __init__(self, mnist_split, spec, seed=0):
        self.mnist_split = mnist_split
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self._indices = None
        self._actions = None

    @property
    def labels(self):
        return [int(self.mnist_split.labels[i]) for i in self._indices]

    def _state(self):
        image = self.mnist_split.images[self._indices[len(self._actions)]]
        return torch.from_numpy(np.ascontiguousarray(image))

    def reset(self):
        self._indices = self.rng.integers(0, len(self.mnist_split), size=self.spec.k)
        self._actions = []
        return self._state()

    def step(self, action):
        if self._actions is None or len(self._actions) >= self.spec.k:
            raise RuntimeError("Episode is over; call reset()")
        if not 0 <= int(action) < N_ACTIONS:
            raise ValueError(f"Invalid action={action}. Must be in [0, {N_ACTIONS})")
        self._actions.append(int(action))
        done = len(self._actions) == self.spec.k
        if not done:
            return self._state(), 0.0, False
        return None, reward(self._actions, self.labels, self.spec.reward_formula), True


class AgentNet(nn.Module):
    """Digit-classifier convolutions, a 256-wide ELU layer, then policy and value heads."""

    def __init__(self, hidden_size=256):
        super().__init__()
        self.features = DigitFeatures()
        self.hidden = nn.Linear(DigitFeatures.WIDTH, hidden_size)
        self.policy_head = nn.Linear(hidden_size, N_ACTIONS)
        self.value_head = nn.Linear(hidden_size, 1)

    def _hidden(self, images):
        return forward_op("elu", self.hidden(self.features(images)))

    def forward(self, images):
        h = self._hidden(images)
        return self.policy_head(h), self.value_head(h).squeeze(-1)

    def policy_logits(self, images):
        return self.policy_head(self._hidden(images))

    def policy(self, images):
        return forward_op("softmax", self.policy_logits(images))


@dataclass
class Trajectory:
    states: List[torch.Tensor] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)

    @property
    def episode_reward(self):
        return sum(self.rewards)

    def returns(self):
        """Undiscounted return-to-go at every step."""
        returns, total = [], 0.0
        for r in reversed(self.rewards):
            total += r
            returns.append(total)
        return torch.tensor(returns[::-1], dtype=torch.float32)


def run_episode(agent, env, generator=None):
    state = env.reset()
    trajectory = Trajectory(labels=env.labels)
    done = False
    with torch.no_grad():
        while not done:
            probabilities = agent.policy(state.unsqueeze(0))[0]
            action = int(torch.multinomial(probabilities, 1, generator=generator))
            trajectory.states.append(state)
            trajectory.actions.append(action)
            state, step_reward, done = env.step(action)
            trajectory.rewards.append(step_reward)
    return trajectory


def policy_loss(taken_log_probs, advantages):
    return -(taken_log_probs * advantages.detach()).sum()


def value_loss(values, returns):
    return 0.5 * ((returns - values) ** 2).sum()


def actor_critic_loss(
    logits, values, actions, returns, entropy_coefficient=0.0, use_baseline=True
):
    log_probs = torch.log_softmax(logits, dim=-1)
    taken = log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    advantages = returns - values.detach() if use_baseline else returns
    policy_term = policy_loss(taken, advantages)
    value_term = value_loss(values, returns)
    entropy = -(log_probs.exp() * log_probs).sum()
    loss = policy_term + value_term - entropy_coefficient * entropy
    return loss, {
        "policy_loss": float(policy_term),
        "value_loss": float(value_term),
        "entropy": float(entropy),
    }


def actor_critic_update(agent, trajectory, optimizer, entropy_coefficient=0.0, use_baseline=True):
    logits, values = agent(torch.stack(trajectory.states))
    actions = torch.tensor(trajectory.actions, dtype=torch.long)
    loss, parts = actor_critic_loss(
        logits, values, actions, trajectory.returns(), entropy_coefficient, use_baseline
    )
    if not torch.isfinite(loss):
        logger.error(f"Actor-critic loss diverged: {parts}")
        raise DivergenceError("Actor-critic loss is not finite", parts)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return parts


def policy_accuracy(agent, images, labels):
    return digit_accuracy(agent.policy_logits, images, labels, module=agent)


def train_agent(
    mnist_train,
    mnist_eval,
    k=2,
    rl_config=None,
    seed=0,
    log_path=None,
    show_progress=False,
):
    """
    Runs one actor-critic update per episode and returns the run log: one record per
    update with the episode reward, plus the policy's digit accuracy every
    ``eval_every`` updates.
    """
    rl_config = rl_config or RLConfig()
    torch.manual_seed(seed)
    agent = AgentNet()
    optimizer = torch.optim.Adam(agent.parameters(), lr=rl_config.learning_rate)
    env = MnistEpisodeEnv(mnist_train, EpisodeSpec(k, rl_config.reward_formula), seed=seed)
    generator = torch.Generator().manual_seed(seed)
    eval_images = torch.from_numpy(mnist_eval.images[: rl_config.eval_images])
    eval_labels = torch.from_numpy(mnist_eval.labels[: rl_config.eval_images])

    initial_accuracy = policy_accuracy(agent, eval_images, eval_labels)
    run_log = [{"update": 0, "reward": None, "accuracy": initial_accuracy}]
    for update in trange(1, rl_config.updates + 1, desc="# update", disable=not show_progress):
        trajectory = run_episode(agent, env, generator=generator)
        actor_critic_update(agent, trajectory, optimizer, rl_config.entropy_coefficient)
        record = {"update": update, "reward": trajectory.episode_reward, "accuracy": None}
        if update % rl_config.eval_every == 0:
            record["accuracy"] = policy_accuracy(agent, eval_images, eval_labels)
            logger.info(f"update={update} policy_accuracy={record['accuracy']:.4f}")
        run_log.append(record)

    if log_path:
        write_jsonl(log_path, run_log)
        logger.info(f"Wrote RL run log to {log_path}")
    return agent, run_log


def curve_to_run_log(curve):
    return [{"update": int(u), "reward": None, "accuracy": float(a)} for u, a in curve]


def load_run_log(path):
    return read_jsonl(path)


def accuracy_curve(run_log):
    return [(r["update"], r["accuracy"]) for r in run_log if r.get("accuracy") is not None]


@dataclass
class EfficiencyReport:
    threshold: float
    # (update, estinet accuracy, rl accuracy), last measured value carried forward
    aligned: List[tuple]
    estinet_updates_to_threshold: Optional[int]
    rl_updates_to_threshold: Optional[int]
    estinet_updates_to_best: int
    rl_updates_to_best: int

    @property
    def estinet_dominates(self):
        estinet_reached = self.estinet_updates_to_threshold is not NOT_REACHED
        rl_reached = self.rl_updates_to_threshold is not NOT_REACHED
        if estinet_reached and rl_reached:
            return self.estinet_updates_to_threshold < self.rl_updates_to_threshold
        if estinet_reached or rl_reached:
            return estinet_reached
        # neither run reached the threshold
        return self.estinet_updates_to_best < self.rl_updates_to_best

    def rows(self):
        return [
            ("estinet", self.estinet_updates_to_threshold, self.estinet_updates_to_best),
            ("rl", self.rl_updates_to_threshold, self.rl_updates_to_best),
        ]


def _updates_to_best(curve):
    best = max(value for __, value in curve)
    return updates_to_threshold(curve, best)


def _aligned_curves(first, second):
    updates = sorted({u for u, __ in first} | {u for u, __ in second})
    aligned, i, j, a, b = [], 0, 0, None, None
    for update in updates:
        while i < len(first) and first[i][0] <= update:
            a = first[i][1]
            i += 1
        while j < len(second) and second[j][0] <= update:
            b = second[j][1]
            j += 1
        aligned.append((update, a, b))
    return aligned


def compare_learning_efficiency(estinet_log, rl_log, threshold=0.9):
    estinet_curve = sorted(accuracy_curve(estinet_log or []))
    rl_curve = sorted(accuracy_curve(rl_log or []))
    if not estinet_curve:
        raise ValueError("EstiNet run log has no accuracy records")
    if not rl_curve:
        raise ValueError("RL run log has no accuracy records")
    return EfficiencyReport(
        threshold=threshold,
        aligned=_aligned_curves(estinet_curve, rl_curve),
        estinet_updates_to_threshold=updates_to_threshold(estinet_curve, threshold),
        rl_updates_to_threshold=updates_to_threshold(rl_curve, threshold),
        estinet_updates_to_best=_updates_to_best(estinet_curve),
        rl_updates_to_best=_updates_to_best(rl_curve),
    )

"""Randomized point-mass task families and the MDP stepping interface.

Three families, each hiding a per-task parameter the agent must identify:

* ``random-dynamics-point``: hidden gain/friction, fixed goal, distance
  reward (inferable from observations, so the loss never sees rewards).
* ``directional-point``: hidden direction sign rewarding displacement along
  the first axis; the sign is invisible in observations, so this family is
  reward-observing.
* ``goal-point``: hidden goal on the positive x half-axis, observed as part
  of the state; distance reward stays hidden from the loss. The mirror flag
  flips the goal support to the negative half-axis for out-of-distribution
  evaluation, and no-reset mode ends an episode only when the goal is
  reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 2
ACTION_DIM = 2
DEFAULT_HORIZON = 64
DEFAULT_DISCOUNT = 0.99
GOAL_TOLERANCE = 0.1
INIT_SPREAD = 0.1

FAMILY_DEFAULTS = {
    "random-dynamics-point": {
        "reward_observing": False,
        "ranges": {"gain": (0.5, 2.0), "friction": (0.0, 0.5)},
    },
    "directional-point": {
        "reward_observing": True,
        "ranges": {},
    },
    "goal-point": {
        "reward_observing": False,
        "ranges": {"goal_x": (0.5, 1.5)},
    },
}

FIXED_GOAL = np.array([1.0, 0.0])


@dataclass
class TaskDistribution:
    """A family of MDPs with per-task randomization ranges."""

    family: str
    reward_observing: bool
    ranges: dict = field(default_factory=dict)
    mirror: bool = False
    no_reset: bool = False
    horizon: int = DEFAULT_HORIZON
    discount: float = DEFAULT_DISCOUNT


def make_distribution(family: str, mirror: bool = False, no_reset: bool = False,
                      reward_observing: bool | None = None,
                      ranges: dict | None = None,
                      horizon: int = DEFAULT_HORIZON,
                      discount: float = DEFAULT_DISCOUNT) -> TaskDistribution:
    """Build a TaskDistribution from the registry defaults plus overrides."""
    if family not in FAMILY_DEFAULTS:
        raise ValueError(f"unknown task family {family!r}; "
                         f"known: {sorted(FAMILY_DEFAULTS)}")
    defaults = FAMILY_DEFAULTS[family]
    merged = dict(defaults["ranges"])
    if ranges:
        merged.update(ranges)
    return TaskDistribution(
        family=family,
        reward_observing=defaults["reward_observing"] if reward_observing is None
        else reward_observing,
        ranges=merged,
        mirror=mirror,
        no_reset=no_reset,
        horizon=horizon,
        discount=discount,
    )


class MdpInstance:
    """One sampled task: hidden parameters plus episodic stepping state."""

    def __init__(self, dist: TaskDistribution, hidden: dict):
        self.family = dist.family
        self.hidden = hidden
        self.reward_observing = dist.reward_observing
        self.no_reset = dist.no_reset
        self.horizon = dist.horizon
        self.discount = dist.discount
        self.action_dim = ACTION_DIM
        self.observation_dim = STATE_DIM + (2 if dist.family == "goal-point" else 0)
        self.state = np.zeros(STATE_DIM)
        self.steps_in_episode = 0
        self.total_steps = 0
        self.needs_reset = True

    def _observe(self) -> np.ndarray:
        if self.family == "goal-point":
            return np.concatenate([self.state, self.hidden["goal"]])
        return self.state.copy()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = rng.uniform(-INIT_SPREAD, INIT_SPREAD, STATE_DIM)
        self.steps_in_episode = 0
        self.needs_reset = False
        return self._observe()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.needs_reset and not self.no_reset:
            raise RuntimeError("step() called on a finished episode; reset first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.action_dim,):
            raise ValueError(f"action shape {action.shape} != ({self.action_dim},)")
        a = np.minimum(np.maximum(action, -1.0), 1.0)
        x = self.state

        if self.family == "random-dynamics-point":
            # Distance penalty is evaluated at the pre-transition state.
            reward = -float(np.linalg.norm(x - FIXED_GOAL))
            new_x = x + self.hidden["gain"] * a - self.hidden["friction"] * x
        elif self.family == "directional-point":
            new_x = x + a
            reward = float(self.hidden["sign"] * (new_x[0] - x[0]))
        elif self.family == "goal-point":
            new_x = x + a
            reward = -float(np.linalg.norm(new_x - self.hidden["goal"]))
        else:
            raise ValueError(f"unknown family {self.family!r}")

        self.state = new_x
        self.steps_in_episode += 1
        self.total_steps += 1
        if self.no_reset:
            done = (self.family == "goal-point"
                    and float(np.linalg.norm(new_x - self.hidden["goal"])) < GOAL_TOLERANCE)
        else:
            done = self.steps_in_episode >= self.horizon
        if done:
            self.needs_reset = True
        return self._observe(), reward, done


def sample_task(dist: TaskDistribution, seed) -> MdpInstance:
    """Draw one MDP from the distribution; identical seeds give identical tasks."""
    rng = np.random.default_rng(seed)
    if dist.family == "random-dynamics-point":
        lo, hi = dist.ranges["gain"]
        gain = rng.uniform(lo, hi)
        lo, hi = dist.ranges["friction"]
        friction = rng.uniform(lo, hi)
        hidden = {"gain": gain, "friction": friction}
    elif dist.family == "directional-point":
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        if dist.mirror:
            sign = -sign
        hidden = {"sign": sign}
    elif dist.family == "goal-point":
        lo, hi = dist.ranges["goal_x"]
        gx = rng.uniform(lo, hi)
        if dist.mirror:
            gx = -gx
        hidden = {"goal": np.array([gx, 0.0])}
    else:
        raise ValueError(f"unknown task family {dist.family!r}")
    return MdpInstance(dist, hidden)


def episodic_return(rewards, gamma: float) -> float:
    """Discounted sum of a reward sequence."""
    total = 0.0
    g = 1.0
    for r in rewards:
        total += g * float(r)
        g *= gamma
    return total

"""Level-based foraging on a small grid.

Agents walk a grid and pick up food by issuing ``load`` while standing next
to it.  A pick-up succeeds when the summed level of the loading agents is at
least the food level.  The team reward is the collected food level divided by
the initial total food level, so an episode's undiscounted return lies in
[0, 1].
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .base import DecPomdpSpec, Env, StepResult

NONE, NORTH, SOUTH, EAST, WEST, LOAD = range(6)
ACTION_NAMES = ("none", "north", "south", "east", "west", "load")
MOVES = {NORTH: (-1, 0), SOUTH: (1, 0), EAST: (0, 1), WEST: (0, -1)}
# order in which a loader looks for adjacent food
_ADJ = ((-1, 0), (1, 0), (0, 1), (0, -1))
MAX_PLAYER_LEVEL = 2
DEFAULT_EPISODE_LIMIT = 50


class TemplateError(ValueError):
    def __init__(self, template: str, pos: int, expected: str):
        self.template, self.pos = template, pos
        super().__init__(f"bad foraging template {template!r} at position {pos}: expected {expected}")


@dataclass(frozen=True)
class ForagingConfig:
    rows: int
    cols: int
    n_agents: int
    n_food: int
    sight: int | None  # None: full observability
    coop: bool

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise ValueError("grid sides must be at least 3")
        if self.n_agents < 1 or self.n_food < 1:
            raise ValueError("need at least one agent and one food item")


def parse_template(template: str) -> ForagingConfig:
    """Parse ``Foraging{obs}-{x}x{y}-{n}p-{f}f{-coop}-v2`` (prefix optional)."""
    s = template
    pos = 0

    def expect_int(what):
        nonlocal pos
        m = re.match(r"\d+", s[pos:])
        if not m:
            raise TemplateError(template, pos, what)
        pos += m.end()
        return int(m.group())

    def expect_lit(lit):
        nonlocal pos
        if not s.startswith(lit, pos):
            raise TemplateError(template, pos, repr(lit))
        pos += len(lit)

    if s.startswith("Foraging", pos):
        pos += len("Foraging")
        if s.startswith("-", pos):
            pos += 1
    sight = None
    m = re.match(r"(\d+)s-", s[pos:])
    if m:
        sight = int(m.group(1))
        pos += m.end()
    rows = expect_int("grid rows")
    expect_lit("x")
    cols = expect_int("grid columns")
    expect_lit("-")
    n_agents = expect_int("number of players")
    expect_lit("p-")
    n_food = expect_int("number of food items")
    expect_lit("f")
    coop = False
    if s.startswith("-coop", pos):
        coop = True
        pos += len("-coop")
    expect_lit("-v2")
    if pos != len(s):
        raise TemplateError(template, pos, "end of template")
    try:
        return ForagingConfig(rows, cols, n_agents, n_food, sight, coop)
    except ValueError as exc:
        raise TemplateError(template, 0, str(exc)) from None


class Foraging(Env):
    def __init__(self, cfg: ForagingConfig, episode_limit: int = DEFAULT_EPISODE_LIMIT, gamma: float = 0.99,
                 name: str | None = None):
        self.cfg = cfg
        self.name = name or "foraging"
        n, f = cfg.n_agents, cfg.n_food
        self.spec = DecPomdpSpec(
            n_agents=n,
            obs_dim=3 * f + 3 * (n - 1) + 1,
            state_dim=3 * n + 3 * f,
            n_actions=len(ACTION_NAMES),
            episode_limit=episode_limit,
            gamma=gamma,
        )
        self.agent_pos = np.zeros((n, 2), dtype=np.int64)
        self.agent_level = np.ones(n, dtype=np.int64)
        self.food_pos = np.zeros((f, 2), dtype=np.int64)
        self.food_level = np.ones(f, dtype=np.int64)
        self.food_alive = np.ones(f, dtype=bool)
        self.total_food_level = 1.0
        self._t = 0

    # -- layout ------------------------------------------------------------
    def set_layout(self, agent_pos, agent_level, food_pos, food_level) -> StepResult:
        """Place everything explicitly (used by tests and replays)."""
        self.agent_pos = np.array(agent_pos, dtype=np.int64).reshape(self.cfg.n_agents, 2)
        self.agent_level = np.array(agent_level, dtype=np.int64).reshape(self.cfg.n_agents)
        self.food_pos = np.array(food_pos, dtype=np.int64).reshape(self.cfg.n_food, 2)
        self.food_level = np.array(food_level, dtype=np.int64).reshape(self.cfg.n_food)
        self.food_alive = np.ones(self.cfg.n_food, dtype=bool)
        self.total_food_level = float(self.food_level.sum())
        self._t = 0
        return self._result(0.0, False, False)

    def reset(self, seed=None) -> StepResult:
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        levels = rng.integers(1, MAX_PLAYER_LEVEL + 1, size=cfg.n_agents)
        total = int(levels.sum())
        if cfg.coop:
            food_levels = np.full(cfg.n_food, total)
        else:
            food_levels = rng.integers(1, total + 1, size=cfg.n_food)
        interior = [(r, c) for r in range(1, cfg.rows - 1) for c in range(1, cfg.cols - 1)]
        food = []
        for _ in range(cfg.n_food):
            free = [p for p in interior if all(max(abs(p[0] - q[0]), abs(p[1] - q[1])) > 1 for q in food)]
            if not free:
                raise RuntimeError("grid too small for the requested number of food items")
            food.append(free[rng.integers(len(free))])
        cells = [(r, c) for r in range(cfg.rows) for c in range(cfg.cols) if (r, c) not in food]
        picks = rng.choice(len(cells), size=cfg.n_agents, replace=False)
        agents = [cells[i] for i in picks]
        return self.set_layout(agents, levels, food, food_levels)

    # -- dynamics ----------------------------------------------------------
    def _occupied(self):
        occ = {tuple(p) for p in self.agent_pos}
        occ |= {tuple(p) for p, alive in zip(self.food_pos, self.food_alive) if alive}
        return occ

    def _in_bounds(self, r, c):
        return 0 <= r < self.cfg.rows and 0 <= c < self.cfg.cols

    def _adjacent_food(self, pos):
        for dr, dc in _ADJ:
            q = (pos[0] + dr, pos[1] + dc)
            for j in range(self.cfg.n_food):
                if self.food_alive[j] and tuple(self.food_pos[j]) == q:
                    return j
        return None

    def avail_actions(self) -> np.ndarray:
        n = self.cfg.n_agents
        avail = np.zeros((n, len(ACTION_NAMES)), dtype=bool)
        occ = self._occupied()
        for i in range(n):
            r, c = self.agent_pos[i]
            avail[i, NONE] = True
            for a, (dr, dc) in MOVES.items():
                q = (r + dr, c + dc)
                avail[i, a] = self._in_bounds(*q) and q not in occ
            avail[i, LOAD] = self._adjacent_food((r, c)) is not None
        return avail

    def step(self, joint_action) -> StepResult:
        acts = self._check_actions(joint_action, self.avail_actions())
        n = self.cfg.n_agents
        # movement: contested cells go to the lowest agent index
        claimed = {}
        for i in range(n):
            a = int(acts[i])
            if a in MOVES:
                dr, dc = MOVES[a]
                target = (int(self.agent_pos[i, 0] + dr), int(self.agent_pos[i, 1] + dc))
                claimed.setdefault(target, i)
        for target, i in claimed.items():
            self.agent_pos[i] = target
        # loading
        loaders = {}
        for i in range(n):
            if acts[i] == LOAD:
                j = self._adjacent_food(self.agent_pos[i])
                if j is not None:
                    loaders.setdefault(j, []).append(i)
        agent_rewards = np.zeros(n)
        for j, group in sorted(loaders.items()):
            group_level = float(self.agent_level[group].sum())
            if group_level >= self.food_level[j]:
                self.food_alive[j] = False
                for i in group:
                    agent_rewards[i] += self.food_level[j] * self.agent_level[i] / (group_level * self.total_food_level)
        self._t += 1
        terminated = not self.food_alive.any()
        truncated = (not terminated) and self._t >= self.spec.episode_limit
        res = self._result(float(agent_rewards.sum()), terminated, truncated)
        res.info["agent_rewards"] = agent_rewards
        return res

    # -- observations ------------------------------------------------------
    def _visible(self, a, b):
        if self.cfg.sight is None:
            return True
        return max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))) <= self.cfg.sight

    def observation(self, i: int) -> np.ndarray:
        me = self.agent_pos[i]
        parts = []
        for j in range(self.cfg.n_food):
            if self.food_alive[j] and self._visible(me, self.food_pos[j]):
                d = self.food_pos[j] - me
                parts.extend((d[0], d[1], self.food_level[j]))
            else:
                parts.extend((-1, -1, -1))
        for k in range(self.cfg.n_agents):
            if k == i:
                continue
            if self._visible(me, self.agent_pos[k]):
                d = self.agent_pos[k] - me
                parts.extend((d[0], d[1], self.agent_level[k]))
            else:
                parts.extend((-1, -1, -1))
        parts.append(self.agent_level[i])
        return np.asarray(parts, dtype=np.float64)

    def global_state(self) -> np.ndarray:
        parts = []
        for i in range(self.cfg.n_agents):
            parts.extend((*self.agent_pos[i], self.agent_level[i]))
        for j in range(self.cfg.n_food):
            parts.extend((*self.food_pos[j], self.food_level[j]) if self.food_alive[j] else (-1, -1, -1))
        return np.asarray(parts, dtype=np.float64)

    def _result(self, reward, terminated, truncated):
        obs = np.stack([self.observation(i) for i in range(self.cfg.n_agents)])
        return StepResult(
            observations=obs,
            global_state=self.global_state(),
            reward=reward,
            terminated=terminated,
            truncated=truncated,
            avail_actions=self.avail_actions(),
        )


def foraging_from_template(template: str, episode_limit: int = DEFAULT_EPISODE_LIMIT, gamma: float = 0.99) -> Foraging:
    return Foraging(parse_template(template), episode_limit=episode_limit, gamma=gamma, name=template)

"""Desk-scale Dec-POMDP environments."""
from .base import ContractViolation, DecPomdpSpec, Env, StepResult, UnsupportedEnvError, discounted_return
from .foraging import (
    ACTION_NAMES,
    Foraging,
    ForagingConfig,
    TemplateError,
    foraging_from_template,
    parse_template,
)
from .matrix import CLIMBING, COORDINATION, MatrixGame, climbing_game, coordination_game, enumerate_joint_returns
from .tabular import (
    TabularDecPomdp,
    TabularEnv,
    TabularFormatError,
    dump_tabular,
    load_tabular,
    parse_tabular,
    random_tabular,
)


def make_env(name: str, episode_limit: int | None = None, gamma: float = 0.99) -> Env:
    """Build an environment from its config name.

    ``coordination`` and ``climbing`` are the matrix games, ``tabular:PATH``
    loads a table file, anything else is read as a foraging template.
    """
    if name == "coordination":
        return coordination_game(gamma=gamma)
    if name == "climbing":
        return climbing_game(gamma=gamma)
    if name.startswith("tabular:"):
        return TabularEnv(load_tabular(name[len("tabular:"):]), name=name)
    kw = {} if episode_limit is None else {"episode_limit": episode_limit}
    return foraging_from_template(name, gamma=gamma, **kw)

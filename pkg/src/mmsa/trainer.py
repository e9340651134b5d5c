"""Centralised training loop.

One gradient step per collected episode once the buffer holds a batch.  The
loss is ``L_KL + L_REC + L_TD + L_sale`` with a single backward pass; each
parameter group is clipped and stepped with RMSProp on its own.
"""
from __future__ import annotations

import copy
import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agentnet import AgentNetwork, EpsilonSchedule, masked_argmax, select_actions
from .config import Config, ablation_flags
from .envsuite import Env, discounted_return, make_env
from .mixer import Mixer, td_loss, td_target
from .sale import PassthroughEncoders, SaleEncoders, assert_decoupled
from .tensorcore import (
    ParamGroup,
    Tape,
    Tensor,
    backward,
    clip_grad_norm,
    no_grad,
    one_hot,
    rmsprop_step,
    save_checkpoint,
    take,
)
from .worldmodel import WorldModel, pack_transitions, rollout, world_model_loss_packed


@dataclass
class EpisodeBatch:
    """One stored episode (T transitions, T+1 observations)."""

    obs: np.ndarray  # (T+1, N, O)
    state: np.ndarray  # (T+1, S)
    actions: np.ndarray  # (T, N)
    reward: np.ndarray  # (T,)
    terminated: np.ndarray  # (T,)
    avail: np.ndarray  # (T+1, N, A)

    @property
    def length(self) -> int:
        return len(self.reward)

    def discounted_return(self, gamma: float) -> float:
        return discounted_return(self.reward, gamma)


class ReplayBuffer:
    """FIFO ring of episodes with uniform sampling without replacement."""

    def __init__(self, capacity: int = 5000):
        self.capacity = capacity
        self.episodes: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.episodes)

    def add(self, ep: EpisodeBatch):
        self.episodes.append(ep)

    def can_sample(self, batch_size: int) -> bool:
        return len(self) >= batch_size

    def sample(self, batch_size: int, rng) -> list:
        if not self.can_sample(batch_size):
            raise ValueError(f"buffer holds {len(self)} episodes, need {batch_size}")
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return [self.episodes[i] for i in idx]


def collate(episodes) -> dict:
    """Time-major padded arrays plus a ``(T, B)`` validity mask."""
    b = len(episodes)
    t_max = max(ep.length for ep in episodes)
    e0 = episodes[0]
    n, o = e0.obs.shape[1:]
    a = e0.avail.shape[2]
    out = {
        "obs": np.zeros((t_max + 1, b, n, o)),
        "state": np.zeros((t_max + 1, b, e0.state.shape[1])),
        "actions": np.zeros((t_max, b, n), dtype=np.int64),
        "reward": np.zeros((t_max, b)),
        "terminated": np.zeros((t_max, b)),
        "avail": np.ones((t_max + 1, b, n, a), dtype=bool),
        "mask": np.zeros((t_max, b)),
    }
    for j, ep in enumerate(episodes):
        t = ep.length
        out["obs"][: t + 1, j] = ep.obs
        out["state"][: t + 1, j] = ep.state
        out["actions"][:t, j] = ep.actions
        out["reward"][:t, j] = ep.reward
        out["terminated"][:t, j] = ep.terminated
        out["avail"][: t + 1, j] = ep.avail
        out["mask"][:t, j] = 1.0
    return out


@dataclass
class LossReport:
    l_kl: float
    l_rec: float
    l_td: float
    l_sale: float
    l_total: float
    grad_norms: dict = field(default_factory=dict)
    # which loss terms were allowed to write into each group
    provenance: dict = field(default_factory=dict)


class Learner:
    """All networks, target copies and optimiser state for one run."""

    def __init__(self, cfg: Config, env: Env, rng: np.random.Generator):
        self.cfg = cfg
        self.spec = sp = env.spec
        self.flags = ablation_flags(cfg)
        z = cfg["sale.z_dim"]
        norm = cfg["sale.normalizer"]
        self.encoders = ParamGroup("encoders", grad_sources=("sale",))
        if cfg["sale.enabled"]:
            self.obs_enc = SaleEncoders(self.encoders, rng, "obs", sp.obs_dim, sp.n_actions, 1, z_dim=z,
                                        action_embed=cfg["sale.action_embed"], normalizer=norm)
            self.lat_enc = SaleEncoders(self.encoders, rng, "latent", cfg["wm.latent_dim"], sp.n_actions,
                                        sp.n_agents, z_dim=z, action_embed=cfg["sale.action_embed"], normalizer=norm)
        else:
            self.obs_enc = PassthroughEncoders(sp.obs_dim, sp.n_actions, 1, z_dim=z, normalizer=norm)
            self.lat_enc = PassthroughEncoders(cfg["wm.latent_dim"], sp.n_actions, sp.n_agents, z_dim=z,
                                               normalizer=norm)
        self.agent = AgentNetwork(sp, self.obs_enc, rng, hidden=cfg["agent.hidden"])
        self.agent.group.grad_sources = frozenset(("td",))
        self.wm = WorldModel(sp.n_agents, sp.n_actions, self.lat_enc, self.agent, rng,
                             latent=cfg["wm.latent_dim"], agent_hidden=cfg["agent.hidden"])
        self.wm.group.grad_sources = frozenset(("kl", "rec"))
        self.horizon = cfg["wm.rollout_horizon"]
        self.rollout_dim = (self.horizon + 1) * cfg["wm.latent_dim"]
        self.mixer = Mixer(sp.n_agents, sp.state_dim, self.rollout_dim, rng, embed_dim=cfg["mixer.embed_dim"],
                           hypernet_embed=cfg["mixer.hypernet_embed"])
        self.mixer.group.grad_sources = frozenset(("td",))
        self.target_agent = self.agent.clone()
        self.target_mixer = self.mixer.clone()
        self.train_steps = 0

    @property
    def groups(self) -> list[ParamGroup]:
        return [self.agent.group, self.mixer.group, self.encoders, self.wm.group]

    def policy_snapshot(self) -> AgentNetwork:
        """Deep copy of the acting network (agent and observation encoders)."""
        return copy.deepcopy(self.agent)

    def sync_target(self):
        self.target_agent.group.copy_from(self.agent.group)
        self.target_mixer.group.copy_from(self.mixer.group)


def sync_target(learner: Learner, step_counter: int, interval: int = 200) -> bool:
    """Hard-copy agent and mixer parameters into the targets at multiples of ``interval``."""
    if step_counter > 0 and step_counter % interval == 0:
        learner.sync_target()
        return True
    return False


# -- acting ----------------------------------------------------------------


def run_episode(env: Env, agent: AgentNetwork, schedule: EpsilonSchedule, rng, greedy: bool = False,
                env_seed=None) -> EpisodeBatch:
    """Play one episode; training episodes advance ``schedule`` by one per env step."""
    res = env.reset(seed=env_seed)
    n = env.spec.n_agents
    h = agent.init_hidden()
    last = np.full(n, -1)
    obs, states, acts, rewards, terms, avails = [res.observations], [res.global_state], [], [], [], [res.avail_actions]
    with no_grad():
        while True:
            q, h_t = agent.forward_step(res.observations, last, h)
            h = h_t.data
            a = select_actions(q.data, res.avail_actions, schedule.value(), rng, greedy=greedy)
            res = env.step(a)
            if not greedy:
                schedule.current_step += 1
            acts.append(a)
            rewards.append(res.reward)
            terms.append(float(res.terminated))
            obs.append(res.observations)
            states.append(res.global_state)
            avails.append(res.avail_actions)
            last = a
            if res.done:
                break
    return EpisodeBatch(np.array(obs), np.array(states), np.array(acts, dtype=np.int64), np.array(rewards),
                        np.array(terms), np.array(avails, dtype=bool))


def evaluate(env: Env, agent: AgentNetwork, n_episodes: int = 32, rng=None, seeds=None):
    """Greedy episodes on a deep copy of ``agent``; returns ``(mean, per-episode returns)``."""
    snap = copy.deepcopy(agent)
    rng = np.random.default_rng(0) if rng is None else rng
    if seeds is None:
        seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    sched = EpsilonSchedule(0.0, 0.0, 1)
    returns = []
    for s in seeds:
        ep = run_episode(env, snap, sched, rng, greedy=True, env_seed=int(s))
        returns.append(float(ep.reward.sum()))
    return float(np.mean(returns)), returns


# -- losses ----------------------------------------------------------------


@dataclass
class LossTerms:
    l_kl: Tensor
    l_rec: Tensor
    l_td: Tensor
    l_sale: Tensor

    @property
    def total(self) -> Tensor:
        return self.l_kl + self.l_rec + self.l_td + self.l_sale


def compute_losses(learner: Learner, batch: dict, rng) -> LossTerms:
    """Build every loss term on the current tape.

    Recurrent unrolls run on the padded time-major batch; everything after
    them works on packed rows (stored steps of real episodes only).
    """
    cfg = learner.cfg
    agent, wm, mixer = learner.agent, learner.wm, learner.mixer
    obs, actions, avail, mask = batch["obs"], batch["actions"], batch["avail"], batch["mask"]
    steps, b, n = actions.shape
    rows, cur, nxt, prev = pack_transitions(mask)
    vrows = np.flatnonzero(mask > 0)
    n_rows = (steps + 1) * b

    def state_rows(x):
        return x.reshape((n_rows,) + x.shape[2:])[rows]

    def trans_rows(x):
        return x.reshape((steps * b,) + x.shape[2:])[vrows]

    obs_r, avail_r, state_r = state_rows(obs), state_rows(avail), state_rows(batch["state"])
    act_v = trans_rows(actions)
    zero = Tensor(0.0)

    h_full = agent.unroll(obs, actions)  # (T+1, B, N, H)
    h = take(h_full.reshape(n_rows, n, agent.hidden), rows)
    emb = agent.embeddings(obs_r)
    q_all = agent.q_values(h, *emb)  # (R, N, A)
    q_taken = (take(q_all, cur) * Tensor(one_hot(act_v, learner.spec.n_actions))).sum(axis=-1)

    l_kl = l_rec = zero
    if cfg["wm.enabled"]:
        h_joint = h.reshape(len(rows), n * agent.hidden)
        wml = world_model_loss_packed(wm, h_joint, act_v, cur, nxt, prev, rng, kl_balance=cfg["wm.kl_balance"],
                                      alpha=cfg["wm.kl_balance_alpha"])
        l_kl, l_rec = wml.l_kl, wml.l_rec
        a0 = masked_argmax(q_all.data, avail_r)
        ro = rollout(wm, h_joint.data, learner.horizon, rng, s_hat=wml.s_hat, a0=a0, obs_emb=emb, avail=avail_r)
        roll = ro.aggregated
    else:
        roll = np.zeros((len(rows), learner.rollout_dim))
    ctx = mixer.context(state_r, roll, cfg["mixer.use_global_state"], cfg["mixer.use_rollout"])
    q_tot = mixer(q_taken, ctx[cur])

    with no_grad():
        ht = learner.target_agent.unroll(obs, actions)
        ht = state_rows(ht.data)[nxt]
        qt = learner.target_agent.q_values(ht, *(e[nxt] for e in emb)).data
    greedy_next = masked_argmax(qt, avail_r[nxt])
    q_next = np.take_along_axis(qt, greedy_next[..., None], axis=-1)[..., 0]
    y = td_target(learner.target_mixer, q_next, ctx[nxt], trans_rows(batch["reward"]),
                  trans_rows(batch["terminated"]), cfg["train.gamma"])
    l_td = td_loss(q_tot, y)

    l_sale = zero
    if cfg["sale.enabled"]:
        l_sale = learner.obs_enc.sale_loss(obs_r[cur], act_v[..., None], obs_r[nxt])
        if cfg["wm.enabled"]:
            s_hat = wml.s_hat
            l_sale = l_sale + learner.lat_enc.sale_loss(s_hat[cur], act_v, s_hat[nxt])
    return LossTerms(l_kl, l_rec, l_td, l_sale)


def audit_decoupling(learner: Learner, batch: dict, rng) -> None:
    """Backpropagate everything except the embedding loss and check the encoders stay untouched."""
    for g in learner.groups:
        g.zero_grad()
    with Tape():
        terms = compute_losses(learner, batch, rng)
        loss = terms.l_kl + terms.l_rec + terms.l_td
        if loss.requires_grad:
            backward(loss)
    assert_decoupled(learner.groups, "L_TD + L_KL + L_REC")
    for g in learner.groups:
        g.zero_grad()


def train_step(learner: Learner, buffer: ReplayBuffer, rng, batch=None, audit: bool = False) -> LossReport:
    cfg = learner.cfg
    if batch is None:
        batch = collate(buffer.sample(min(cfg["train.batch_size"], len(buffer)), rng))
    if audit:
        audit_decoupling(learner, batch, np.random.default_rng(rng.integers(2**63)))
    for g in learner.groups:
        g.zero_grad()
    with Tape():
        terms = compute_losses(learner, batch, rng)
        total = terms.total
        backward(total)
    norms = {}
    for g in learner.groups:
        if not any(t.grad is not None for t in g):
            continue
        for t in g:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        norms[g.name] = clip_grad_norm(g, cfg["train.grad_clip"])
        rmsprop_step(g, cfg["train.lr"], cfg["optim.alpha"], cfg["optim.eps"])
    learner.train_steps += 1
    sync_target(learner, learner.train_steps, cfg["train.target_update_interval"])
    return LossReport(
        l_kl=terms.l_kl.item(),
        l_rec=terms.l_rec.item(),
        l_td=terms.l_td.item(),
        l_sale=terms.l_sale.item(),
        l_total=total.item(),
        grad_norms=norms,
        provenance={g.name: sorted(g.grad_sources) for g in learner.groups},
    )


# -- the loop ----------------------------------------------------------------


class MetricsWriter:
    """Serialises metric records as JSON lines."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records = []
        self._fh = None if self.path is None else open(self.path, "w", encoding="utf-8")

    def write(self, record: dict):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class RunResult:
    learner: Learner
    evals: list
    env_steps: int
    train_steps: int
    stopped_early: bool
    timed_out: bool = False


def _rngs(seed: int):
    root = np.random.default_rng(seed)
    names = ("init", "act", "env", "sample", "noise", "eval")
    return dict(zip(names, root.spawn(len(names))))


def train(cfg: Config, out_dir=None, writer: MetricsWriter | None = None, env: Env | None = None,
          progress=None, deadline: float | None = None) -> RunResult:
    """Run the full loop described by ``cfg``; writes metrics and checkpoints when ``out_dir`` is set.

    ``deadline`` is a ``time.monotonic()`` value; past it the run stops after
    the current episode and finishes with a last evaluation.
    """
    rngs = _rngs(cfg["train.seed"])
    env = env or make_env(cfg["env.name"], cfg["env.episode_limit"], cfg["train.gamma"])
    eval_env = copy.deepcopy(env)
    learner = Learner(cfg, env, rngs["init"])
    buffer = ReplayBuffer(cfg["train.buffer_size"])
    schedule = EpsilonSchedule(cfg["explore.start"], cfg["explore.finish"], cfg["explore.anneal_steps"])
    own_writer = writer is None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    if writer is None:
        writer = MetricsWriter(None if out_dir is None else out_dir / "metrics.jsonl")
    variant = cfg["train.variant"]
    interval = cfg["train.test_interval"]
    ckpt_every = cfg["train.checkpoint_interval"]
    stop_at = cfg["train.stop_return"]
    evals = []
    t_env = 0
    next_test = interval
    stopped = timed_out = False

    def run_eval():
        mean, rets = evaluate(eval_env, learner.agent, cfg["train.test_episodes"], rngs["eval"])
        rec = {"kind": "eval", "step": t_env, "train_step": learner.train_steps, "mean_return": mean,
               "returns": rets, "variant": variant}
        writer.write(rec)
        evals.append(rec)
        if progress:
            progress(rec)
        return mean

    try:
        while t_env < cfg["train.total_steps"]:
            ep = run_episode(env, learner.agent, schedule, rngs["act"], env_seed=int(rngs["env"].integers(2**31 - 1)))
            buffer.add(ep)
            t_env += ep.length
            if buffer.can_sample(cfg["train.batch_size"]):
                rep = train_step(learner, buffer, rngs["noise"],
                                 batch=collate(buffer.sample(cfg["train.batch_size"], rngs["sample"])))
                writer.write({
                    "kind": "train", "step": learner.train_steps, "env_steps": t_env,
                    "l_kl": rep.l_kl, "l_rec": rep.l_rec, "l_td": rep.l_td, "l_sale": rep.l_sale,
                    "l_total": rep.l_total, "epsilon": schedule.value(), "grad_norms": rep.grad_norms,
                })
                if out_dir is not None and ckpt_every and learner.train_steps % ckpt_every == 0:
                    save_checkpoint(out_dir / f"checkpoint_{learner.train_steps}.bin", learner.groups)
            if t_env >= next_test:
                while next_test <= t_env:
                    next_test += interval
                mean = run_eval()
                if stop_at is not None and mean >= stop_at:
                    stopped = True
                    break
            if deadline is not None and time.monotonic() >= deadline:
                timed_out = True
                break
        if not evals or evals[-1]["step"] != t_env:
            run_eval()
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.bin", learner.groups)
    finally:
        if own_writer:
            writer.close()
    return RunResult(learner, evals, t_env, learner.train_steps, stopped, timed_out)

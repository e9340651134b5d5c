"""Brute-force oracles and the verification suite.

Exact evidence of small tabular Dec-POMDPs (forward algorithm, cross-checked by
naive path enumeration), Monte-Carlo ELBO estimates under Markov posteriors,
finite-difference gradient audits, and the named invariant checks that
``mmsa verify`` runs.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .envsuite import TabularDecPomdp, coordination_game, random_tabular
from .mixer import Mixer, joint_greedy_max, mix
from .tensorcore import (
    GaussianDiag,
    Tape,
    Tensor,
    action_value_head,
    avg_l1_norm,
    backward,
    concat,
    elu,
    exp,
    gru_cell,
    kl_diag_gaussian,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    maximum,
    mlp2,
    mse,
    no_grad,
    relu,
    reparam_sample,
    sigmoid,
    square,
    stack,
    take,
    tanh,
)
from .tensorcore.tensor import clip, tabs

MAX_STATES = 16
MAX_STEPS = 8
MAX_PATHS = 2_000_000
FD_STEP = 1e-5
GRAD_TOL = 1e-4
# gradients smaller than this (in norm) are compared absolutely
GRAD_FLOOR = 1e-6


class EvidenceSizeError(ValueError):
    pass


# -- exact evidence ------------------------------------------------------------


def _check_record(model: TabularDecPomdp, actions, observations):
    actions = np.asarray(actions, dtype=np.int64)
    observations = np.asarray(observations, dtype=np.int64).reshape(-1, model.n_agents)
    steps = len(observations)
    if actions.shape != (steps + 1, model.n_agents):
        raise ValueError(f"expected actions of shape {(steps + 1, model.n_agents)}, got {actions.shape}")
    return actions, observations, steps


def policy_log_likelihood(model: TabularDecPomdp, actions, observations) -> float:
    """sum_t log p(a_t | o_t); state-independent, so it shifts evidence and ELBO alike."""
    actions, observations, steps = _check_record(model, actions, observations)
    total = model.log_policy(None, actions[0])
    for t in range(1, steps + 1):
        total += model.log_policy(observations[t - 1], actions[t])
    return float(total)


def exact_evidence(model: TabularDecPomdp, actions, observations) -> float:
    """log p(a_{0:T}, o_{1:T}) by the scaled forward algorithm.

    The latent path is ``s_0 .. s_T``; ``a_{t-1}`` drives ``s_{t-1} -> s_t``
    and ``o_t`` is emitted from ``s_t``.
    """
    actions, observations, steps = _check_record(model, actions, observations)
    if model.n_states > MAX_STATES or steps > MAX_STEPS:
        raise EvidenceSizeError(
            f"exact evidence limited to {MAX_STATES} states and {MAX_STEPS} steps "
            f"(got {model.n_states} states, {steps} steps)"
        )
    alpha = model.init.copy()
    log_z = 0.0
    for t in range(1, steps + 1):
        alpha = (alpha @ model.T[:, model.joint_index(actions[t - 1]), :]) * model.obs_likelihood(observations[t - 1])
        c = alpha.sum()
        if c <= 0.0:
            return -np.inf
        log_z += np.log(c)
        alpha /= c
    return log_z + policy_log_likelihood(model, actions, observations)


def naive_evidence(model: TabularDecPomdp, actions, observations) -> float:
    """Same quantity by summing every latent path explicitly (exponential cost)."""
    actions, observations, steps = _check_record(model, actions, observations)
    n_paths = model.n_states ** (steps + 1)
    if n_paths > MAX_PATHS:
        raise EvidenceSizeError(f"{n_paths} paths exceed the enumeration limit {MAX_PATHS}")
    joints = [model.joint_index(a) for a in actions]
    lik = [model.obs_likelihood(o) for o in observations]
    total = 0.0
    for path in itertools.product(range(model.n_states), repeat=steps + 1):
        p = model.init[path[0]]
        for t in range(1, steps + 1):
            p *= model.T[path[t - 1], joints[t - 1], path[t]] * lik[t - 1][path[t]]
        total += p
    if total <= 0.0:
        return -np.inf
    return float(np.log(total)) + policy_log_likelihood(model, actions, observations)


# -- posteriors and the bound -------------------------------------------------------


@dataclass
class MarkovPosterior:
    """q(s_0) q(s_1 | s_0) ... q(s_T | s_{T-1}) over the tabular state space."""

    q0: np.ndarray  # (S,)
    qt: np.ndarray  # (T, S, S), row s_{t-1} -> distribution over s_t

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=np.float64)
        self.qt = np.asarray(self.qt, dtype=np.float64).reshape(-1, len(self.q0), len(self.q0))
        if np.any(self.q0 < 0) or abs(self.q0.sum() - 1) > 1e-9 or np.any(np.abs(self.qt.sum(-1) - 1) > 1e-9):
            raise ValueError("posterior tables must hold probability vectors")

    @property
    def steps(self):
        return len(self.qt)

    @classmethod
    def from_logits(cls, logits0, logits_t) -> "MarkovPosterior":
        def softmax(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        return cls(softmax(np.asarray(logits0, dtype=np.float64)), softmax(np.asarray(logits_t, dtype=np.float64)))

    def sample(self, rng, n: int) -> np.ndarray:
        paths = np.empty((n, self.steps + 1), dtype=np.int64)
        paths[:, 0] = _draw(rng, np.broadcast_to(self.q0, (n, len(self.q0))))
        for t in range(self.steps):
            paths[:, t + 1] = _draw(rng, self.qt[t][paths[:, t]])
        return paths

    def log_prob(self, paths) -> np.ndarray:
        paths = np.asarray(paths)
        with np.errstate(divide="ignore"):
            out = np.log(self.q0[paths[:, 0]])
            for t in range(self.steps):
                out = out + np.log(self.qt[t][paths[:, t], paths[:, t + 1]])
        return out


def _draw(rng, probs) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(len(probs)) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=-1), probs.shape[-1] - 1)


def exact_posterior(model: TabularDecPomdp, actions, observations) -> MarkovPosterior:
    """The true posterior over latent paths, built from backward messages.

    Rows for states the posterior never visits are set uniform.
    """
    actions, observations, steps = _check_record(model, actions, observations)
    s = model.n_states
    beta = np.ones(s)
    qt = np.zeros((steps, s, s))
    for t in range(steps, 0, -1):
        w = model.T[:, model.joint_index(actions[t - 1]), :] * (model.obs_likelihood(observations[t - 1]) * beta)
        rows = w.sum(axis=1)
        qt[t - 1] = np.where(rows[:, None] > 0, w / np.where(rows > 0, rows, 1.0)[:, None], 1.0 / s)
        beta = rows / max(rows.max(), 1e-300)
    q0 = model.init * beta
    return MarkovPosterior(q0 / q0.sum(), qt)


def random_posterior(rng, n_states: int, steps: int, scale: float | None = None) -> MarkovPosterior:
    """Softmax-parameterised tables with random logits."""
    scale = rng.uniform(0.5, 3.0) if scale is None else scale
    return MarkovPosterior.from_logits(rng.normal(0, scale, n_states), rng.normal(0, scale, (steps, n_states, n_states)))


@dataclass
class EvidenceResult:
    log_evidence: float
    elbo_estimate: float
    n_samples: int
    gap: float
    mc_sigma: float

    def within_bound(self, tol: float = 1e-6, n_sigma: float = 3.0) -> bool:
        return self.elbo_estimate <= self.log_evidence + tol + n_sigma * self.mc_sigma


def elbo_samples(model: TabularDecPomdp, q: MarkovPosterior, actions, observations, n_samples: int, rng) -> np.ndarray:
    """Per-sample ELBO terms ``log p(path, a, o) - log q(path)`` for paths drawn from ``q``.

    Each sample is the sum over steps of ``log p(a_t|o_t) + log p(o_t|s_t)``
    minus the single-sample estimate of ``KL(q_t || p(s_t | s_{t-1}, a_{t-1}))``.
    """
    actions, observations, steps = _check_record(model, actions, observations)
    if q.steps != steps or len(q.q0) != model.n_states:
        raise ValueError("posterior does not match the record length or state count")
    paths = q.sample(rng, n_samples)
    with np.errstate(divide="ignore"):
        log_p = np.log(model.init[paths[:, 0]])
        for t in range(1, steps + 1):
            j = model.joint_index(actions[t - 1])
            lik = model.obs_likelihood(observations[t - 1])
            log_p = log_p + np.log(model.T[paths[:, t - 1], j, paths[:, t]]) + np.log(lik[paths[:, t]])
    return log_p - q.log_prob(paths) + policy_log_likelihood(model, actions, observations)


def elbo_estimate(model: TabularDecPomdp, q: MarkovPosterior, actions, observations, n_samples: int = 10_000,
                  rng=None, return_sigma: bool = False):
    """Monte-Carlo ELBO; with ``return_sigma`` also the standard error of the mean."""
    rng = np.random.default_rng(0) if rng is None else rng
    vals = elbo_samples(model, q, actions, observations, n_samples, rng)
    mean = float(vals.mean())
    if not return_sigma:
        return mean
    sigma = float(vals.std(ddof=1) / np.sqrt(n_samples)) if np.all(np.isfinite(vals)) and n_samples > 1 else 0.0
    return mean, sigma


def evidence_check(model, q, actions, observations, n_samples: int = 10_000, rng=None) -> EvidenceResult:
    ev = exact_evidence(model, actions, observations)
    elbo, sigma = elbo_estimate(model, q, actions, observations, n_samples, rng, return_sigma=True)
    return EvidenceResult(ev, elbo, n_samples, ev - elbo, sigma)


# -- finite differences ---------------------------------------------------------


def gradcheck(fn, arrays, rng=None, h: float = FD_STEP) -> float:
    """Worst relative error between tape gradients and central differences.

    The output is reduced with fixed random weights.  Error per input is
    ``|g - g_fd| / max(|g|, |g_fd|, GRAD_FLOOR)`` in Euclidean norm.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        shape = np.shape(fn(*[Tensor(a) for a in arrays]).data)
    weights = rng.standard_normal(shape)

    with Tape():
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = (fn(*ts) * Tensor(weights)).sum()
        backward(loss)
        analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ts)]

    def value(vals):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * weights))

    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        for j in range(a.size):
            vals = list(arrays)
            bumped = a.copy()
            bumped.flat[j] += h
            vals[i] = bumped
            up = value(vals)
            bumped.flat[j] -= 2 * h
            down = value(vals)
            num.flat[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic[i]), np.linalg.norm(num), GRAD_FLOOR)
        worst = max(worst, float(np.linalg.norm(analytic[i] - num) / denom))
    return worst


def _away(rng, shape, margin=0.05, kink=0.0):
    """Normals pushed at least ``margin`` away from ``kink``."""
    x = rng.standard_normal(shape)
    return kink + np.sign(x) * (margin + np.abs(x))


def _gauss(m, s):
    return GaussianDiag(m, s)


def _op_cases():
    """name -> builder(rng) returning ``(fn, arrays)``."""
    n = lambda rng, *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda rng, *s: rng.uniform(0.3, 2.0, s)  # noqa: E731
    cases = {
        "add": lambda r: (lambda a, b: a + b, [n(r, 3, 4), n(r, 4)]),
        "sub": lambda r: (lambda a, b: a - b, [n(r, 3, 4), n(r, 3, 1)]),
        "mul": lambda r: (lambda a, b: a * b, [n(r, 2, 3), n(r, 2, 3)]),
        "div": lambda r: (lambda a, b: a / b, [n(r, 2, 3), pos(r, 2, 3) * np.sign(n(r, 2, 3))]),
        "neg": lambda r: (lambda a: -a, [n(r, 5)]),
        "power": lambda r: (lambda a: a ** 1.5, [pos(r, 2, 3)]),
        "square": lambda r: (square, [n(r, 2, 4)]),
        "exp": lambda r: (exp, [n(r, 2, 3)]),
        "log": lambda r: (log, [pos(r, 2, 3)]),
        "tanh": lambda r: (tanh, [n(r, 2, 3)]),
        "sigmoid": lambda r: (sigmoid, [n(r, 2, 3)]),
        "relu": lambda r: (relu, [_away(r, (2, 4))]),
        "elu": lambda r: (elu, [_away(r, (2, 4))]),
        "abs": lambda r: (tabs, [_away(r, (2, 4))]),
        "clip": lambda r: (lambda a: clip(a, -0.5, 0.5), [_away(r, (8,), 0.02, 0.5) * np.sign(n(r, 8))]),
        "maximum": lambda r: (lambda a, b: maximum(a, b), [n(r, 3, 2), n(r, 3, 2) + 0.2]),
        "sum": lambda r: (lambda a: a.sum(axis=1), [n(r, 2, 3, 2)]),
        "mean": lambda r: (lambda a: a.mean(axis=0, keepdims=True), [n(r, 3, 2)]),
        "reshape": lambda r: (lambda a: a.reshape(3, 4) * a.reshape(3, 4), [n(r, 2, 6)]),
        "getitem": lambda r: (lambda a: a[:, ::2] + a[np.array([0, 2, 0])][:, 1:3], [n(r, 3, 4)]),
        "take": lambda r: (lambda a: take(a, np.array([2, 0, 2, 1])), [n(r, 3, 2)]),
        "concat": lambda r: (lambda a, b: concat([a, b], axis=-1) ** 2, [n(r, 2, 3), n(r, 2, 1)]),
        "stack": lambda r: (lambda a, b: stack([a, b], axis=1) ** 2, [n(r, 2, 3), n(r, 2, 3)]),
        "matmul": lambda r: (matmul, [n(r, 2, 3, 4), n(r, 2, 4, 2)]),
        "linear": lambda r: (linear, [n(r, 3, 4), n(r, 4, 2), n(r, 2)]),
        "mlp2_elu": lambda r: (mlp2, [n(r, 3, 4), n(r, 4, 5), n(r, 5), n(r, 5, 3), n(r, 3)]),
        "mlp2_relu": lambda r: (lambda *a: mlp2(*a, activation="relu"),
                                [n(r, 3, 4), n(r, 4, 5), n(r, 5), n(r, 5, 3), n(r, 3)]),
        "action_value_head": lambda r: (action_value_head, [
            n(r, 2, 3), n(r, 2, 2), n(r, 2, 3, 2), n(r, 2, 3, 2), n(r, 2, 4), n(r, 2, 4), n(r, 2, 4), n(r, 3, 4),
            n(r, 4), n(r, 4, 1), n(r, 1)]),
        "gru_cell": lambda r: (gru_cell, [n(r, 2, 3), n(r, 2, 4), n(r, 3, 12) * 0.5, n(r, 4, 12) * 0.5, n(r, 12),
                                          n(r, 12)]),
        "avg_l1_norm": lambda r: (avg_l1_norm, [_away(r, (3, 5))]),
        "layer_norm": lambda r: (layer_norm, [n(r, 3, 5)]),
        "log_softmax": lambda r: (log_softmax, [n(r, 3, 4)]),
        "mse": lambda r: (mse, [n(r, 3, 4), n(r, 3, 4)]),
        "kl_diag_gaussian": lambda r: (lambda a, b, c, d: kl_diag_gaussian(_gauss(a, b), _gauss(c, d)),
                                       [n(r, 3, 4), n(r, 3, 4) * 0.5, n(r, 3, 4), n(r, 3, 4) * 0.5]),
        "reparam_sample": lambda r: ((lambda noise: lambda m, s: reparam_sample(GaussianDiag.from_raw(m, s), noise))(
            n(r, 3, 4)), [n(r, 3, 4), r.uniform(-4.5, 1.5, (3, 4))]),
    }
    return cases


GRAD_OPS = tuple(_op_cases())


def gradient_audit(instances: int = 100, seed: int = 0, ops=None) -> dict:
    """Worst FD relative error per operation over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    cases = _op_cases()
    out = {}
    for name in ops or cases:
        worst = 0.0
        for _ in range(instances):
            fn, arrays = cases[name](rng)
            worst = max(worst, gradcheck(fn, arrays, rng))
        out[name] = worst
    return out


# -- mixer invariants ---------------------------------------------------------------


def _random_mixer(rng, n_agents, ctx_dim, inject=None):
    m = Mixer(n_agents, ctx_dim, 0, rng, embed_dim=8, hypernet_embed=16)
    for t in m.group:
        t.data = t.data * rng.uniform(0.5, 3.0)
    if inject == "mixer.sign_flip":
        m.weight_fn = lambda w: -tabs(w)
    return m


def monotonicity_violations(draws: int = 1000, seed: int = 0, inject=None, delta: float = 1e-3) -> dict:
    """Count negative dQ_tot/dQ_i, by tape gradient and by forward perturbation."""
    rng = np.random.default_rng(seed)
    analytic = perturb = 0
    min_grad = np.inf
    for _ in range(draws):
        n = int(rng.integers(2, 5))
        c = int(rng.integers(1, 6))
        m = _random_mixer(rng, n, c, inject)
        q = rng.normal(0, 3, n)
        ctx = rng.normal(0, 2, c)
        with Tape():
            qt = Tensor(q, requires_grad=True)
            backward(mix(m, qt, ctx))
            g = qt.grad
        min_grad = min(min_grad, float(g.min()))
        analytic += int(np.sum(g < 0))
        with no_grad():
            base = mix(m, q, ctx).data
            bumped = q[None, :] + delta * np.eye(n)
            up = mix(m, bumped, np.broadcast_to(ctx, (n, c))).data
        perturb += int(np.sum(up - base < -1e-12))
    return {"analytic": analytic, "perturbation": perturb, "min_gradient": min_grad}


def igm_violations(draws: int = 100, seed: int = 0, n_agents: int = 2, n_actions: int = 3, inject=None) -> int:
    """Per-agent greedy tuple vs exhaustive joint argmax of Q_tot."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(draws):
        c = int(rng.integers(1, 6))
        m = _random_mixer(rng, n_agents, c, inject)
        table = rng.normal(0, 2, (n_agents, n_actions))
        ctx = rng.normal(0, 2, c)
        best, _ = joint_greedy_max(m, table, ctx)
        if tuple(int(a) for a in table.argmax(axis=1)) != best:
            bad += 1
    return bad


# -- KL balancing -----------------------------------------------------------------


def kl_balance_errors(pairs: int = 200, seed: int = 0, alpha: float = 0.8) -> dict:
    """Worst value and gradient-share errors of the balanced KL against the plain one."""
    from .worldmodel import kl_balanced

    rng = np.random.default_rng(seed)
    worst_val = worst_post = worst_prior = 0.0
    for _ in range(pairs):
        d = int(rng.integers(1, 9))
        lead = (int(rng.integers(1, 4)),)
        arrays = [rng.normal(0, 1, lead + (d,)), rng.uniform(-2, 1, lead + (d,)),
                  rng.normal(0, 1, lead + (d,)), rng.uniform(-2, 1, lead + (d,))]

        def grads(balanced):
            with Tape():
                ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
                q, p = GaussianDiag(ts[0], ts[1]), GaussianDiag(ts[2], ts[3])
                val = kl_balanced(q, p, alpha) if balanced else kl_diag_gaussian(q, p)
                backward(val.sum())
                return val.data, [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ts)]

        vb, gb = grads(True)
        vu, gu = grads(False)
        worst_val = max(worst_val, float(np.max(np.abs(vb - vu))))
        for k, share in ((0, alpha), (1, alpha), (2, 1 - alpha), (3, 1 - alpha)):
            ref = share * gu[k]
            rel = np.linalg.norm(gb[k] - ref) / max(np.linalg.norm(ref), 1e-300)
            if k < 2:
                worst_post = max(worst_post, float(rel))
            else:
                worst_prior = max(worst_prior, float(rel))
    return {"value": worst_val, "posterior_share": worst_post, "prior_share": worst_prior}


# -- decoupling ---------------------------------------------------------------------


def _small_learner(seed: int):
    from .config import Config
    from .trainer import Learner, collate, run_episode
    from .agentnet import EpsilonSchedule

    env = coordination_game()
    cfg = Config({"agent.hidden": 16, "train.seed": seed})
    rng = np.random.default_rng(seed)
    learner = Learner(cfg, env, rng)
    sched = EpsilonSchedule()
    eps = [run_episode(env, learner.agent, sched, rng, env_seed=i) for i in range(6)]
    return learner, collate(eps), rng


def _encoder_grads(groups):
    out = {}
    for g in groups:
        if g.name == "encoders":
            for t in g:
                out[t.name] = None if t.grad is None else t.grad.copy()
    return out


def _max_abs(grads) -> float:
    vals = [float(np.abs(g).max()) for g in grads.values() if g is not None and g.size]
    return max(vals, default=0.0)


def decoupling_report(seed: int = 0, inject=None) -> dict:
    """Encoder gradients after each loss family, and the next-state branch of L(f, g)."""
    from .trainer import compute_losses

    learner, batch, rng = _small_learner(seed)
    res = {}
    for label, pick in (("td", lambda t: t.l_td), ("kl_rec", lambda t: t.l_kl + t.l_rec)):
        for g in learner.groups:
            g.zero_grad()
        with Tape():
            loss = pick(compute_losses(learner, batch, np.random.default_rng(seed)))
            backward(loss)
        res[label] = _max_abs(_encoder_grads(learner.groups))

    # L(f, g): the target embedding of the next observation must not pass gradient
    enc = learner.obs_enc
    obs = batch["obs"][:, 0]  # (T+1, N, O)
    x, x_next = obs[:-1], obs[1:]
    acts = batch["actions"][:, 0][..., None]
    target_fn = (lambda t: t) if inject == "sale.no_stop_gradient" else None
    kw = {} if target_fn is None else {"target_fn": target_fn}

    learner.encoders.zero_grad()
    with Tape():
        xn = Tensor(x_next, requires_grad=True)
        backward(enc.sale_loss(x, acts, xn, **kw))
        g_full = _encoder_grads(learner.groups)
        branch_input = 0.0 if xn.grad is None else float(np.abs(xn.grad).max())
    learner.encoders.zero_grad()
    with Tape():
        with no_grad():
            tgt = enc.encode_state(x_next).data
        z_sa = enc.encode_state_action(enc.encode_state(x), acts)
        d = z_sa - Tensor(tgt)
        backward((d * d).sum(axis=-1).mean())
        g_ref = _encoder_grads(learner.groups)
    learner.encoders.zero_grad()
    branch_params = max(
        (float(np.abs(g_full[k] - g_ref[k]).max()) for k in g_full if g_full[k] is not None and g_ref[k] is not None),
        default=0.0,
    )
    res["next_state_input"] = branch_input
    res["next_state_params"] = branch_params
    return res


# -- the suite ------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float
    metrics: dict = field(default_factory=dict)


def _check_gradients(seed, inject, quick):
    worst = gradient_audit(10 if quick else 100, seed)
    bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    detail = f"{len(worst)} ops, worst {max(worst.values()):.2e}" + (f"; failing {sorted(bad)}" if bad else "")
    return not bad, detail, worst


def _check_monotonicity(seed, inject, quick):
    r = monotonicity_violations(100 if quick else 1000, seed, inject)
    ok = r["analytic"] == 0 and r["perturbation"] == 0
    return ok, f"negative partials: {r['analytic']} analytic, {r['perturbation']} by perturbation", r


def _check_igm(seed, inject, quick):
    bad = igm_violations(20 if quick else 100, seed, inject=inject)
    return bad == 0, f"{bad} mismatches", {"violations": bad}


def _check_kl(seed, inject, quick):
    r = kl_balance_errors(50 if quick else 200, seed)
    ok = r["value"] <= 1e-12 and r["posterior_share"] <= 1e-9 and r["prior_share"] <= 1e-9
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in r.items()), r


def _check_decoupling(seed, inject, quick):
    r = decoupling_report(seed, inject)
    ok = all(v == 0.0 for v in r.values())
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in r.items()), r


def _check_evidence_oracle(seed, inject, quick):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10 if quick else 50):
        model = random_tabular(rng, n_states=3, n_agents=2, n_actions=2, n_obs=2, horizon=int(rng.integers(1, 6)))
        acts, obs = model.sample_record(rng)
        worst = max(worst, abs(exact_evidence(model, acts, obs) - naive_evidence(model, acts, obs)))
    return worst <= 1e-12, f"forward vs path enumeration, worst {worst:.1e}", {"worst": worst}


def random_bound_case(rng, deterministic_obs=False):
    model = random_tabular(rng, n_states=int(rng.integers(1, 9)), n_agents=2, n_actions=2,
                           n_obs=int(rng.integers(2, 4)), horizon=int(rng.integers(1, 7)),
                           deterministic_obs=deterministic_obs)
    acts, obs = model.sample_record(rng)
    return model, acts, obs


def _check_elbo(seed, inject, quick):
    rng = np.random.default_rng(seed)
    n_models, n_samples = (10, 2000) if quick else (100, 10_000)
    violations = tight_bad = 0
    worst_gap_sigma = 0.0
    for i in range(n_models):
        model, acts, obs = random_bound_case(rng)
        q = random_posterior(rng, model.n_states, len(obs))
        r = evidence_check(model, q, acts, obs, n_samples, rng)
        violations += not r.within_bound()
        # tightness, alternating stochastic and deterministic observation models
        model2, acts2, obs2 = random_bound_case(rng, deterministic_obs=bool(i % 2))
        r2 = evidence_check(model2, exact_posterior(model2, acts2, obs2), acts2, obs2, n_samples, rng)
        noise = 1e-9 + 3 * r2.mc_sigma
        tight_bad += abs(r2.gap) > noise
        worst_gap_sigma = max(worst_gap_sigma, abs(r2.gap))
    ok = violations == 0 and tight_bad == 0
    return ok, (f"{violations} bound violations over {n_models} models; exact posterior gap outside noise "
                f"{tight_bad} times (worst |gap| {worst_gap_sigma:.1e})"), {
        "bound_violations": violations, "tightness_failures": tight_bad}


CHECKS = {
    "tensorcore.gradients": _check_gradients,
    "sale.decoupling": _check_decoupling,
    "mixer.monotonicity": _check_monotonicity,
    "mixer.igm": _check_igm,
    "worldmodel.kl_balancing": _check_kl,
    "verify.evidence_oracle": _check_evidence_oracle,
    "verify.elbo_bound": _check_elbo,
}

FAULTS = ("mixer.sign_flip", "sale.no_stop_gradient")


def run_verification_suite(seed: int = 0, only=None, inject=None, quick: bool = False) -> dict:
    """Run the named checks; the report is JSON-serialisable.

    ``only`` filters by name prefix (e.g. ``"mixer"``).  ``inject`` plants one
    of ``FAULTS`` to demonstrate that the matching check catches it.
    """
    if inject is not None and inject not in FAULTS:
        raise ValueError(f"unknown fault {inject!r}; expected one of {', '.join(FAULTS)}")
    names = [n for n in CHECKS if not only or any(n == o or n.startswith(o + ".") or n.startswith(o) for o in _as_list(only))]
    if not names:
        raise ValueError(f"no check matches {only!r}; available: {', '.join(CHECKS)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            ok, detail, metrics = CHECKS[name](seed, inject, quick)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail, metrics = False, f"{type(exc).__name__}: {exc}", {}
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0, _jsonable(metrics)))
    failed = [r.name for r in results if not r.passed]
    return {"passed": not failed, "failed": failed, "seed": seed, "inject": inject,
            "checks": [asdict(r) for r in results]}


def _as_list(x):
    return [x] if isinstance(x, str) else list(x)


def _jsonable(d):
    return json.loads(json.dumps(d, default=float))


def format_report(report: dict) -> str:
    lines = [f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<26} {c['detail']}  ({c['seconds']:.1f}s)"
             for c in report["checks"]]
    lines.append("all checks passed" if report["passed"] else f"failed: {', '.join(report['failed'])}")
    return "\n".join(lines)

"""Two-stage learner: behavioral cloning, then critic/generator alternation
with a Wasserstein-divergence gradient penalty.

The D step ascends mean[D(agent) - D(expert) - k*||grad D at interpolants||^p]
over the critic parameters; the G step descends mean[D(state, policy(state))]
over the policy parameters with the sampled states held constant, which is the
deterministic policy-gradient estimator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .autodiff import Tensor
from .mdp import EpisodeConfig
from .nets import batch_frames

__all__ = [
    "BcConfig",
    "GailConfig",
    "TrainLog",
    "DivergenceError",
    "bc_loss",
    "bc_batch_loss",
    "bc_train",
    "interpolate_pairs",
    "grad_penalty",
    "agent_rollout",
    "d_objective",
    "d_step",
    "g_objective",
    "g_step",
    "wgail_train",
]


class DivergenceError(Exception):
    def __init__(self, iteration, phase, positions, cause):
        self.iteration = iteration
        self.phase = phase
        self.positions = positions
        super().__init__(
            f"non-finite loss in {phase} step at iteration {iteration}; "
            f"batch windows (sequence, offset): {positions}; cause: {cause}"
        )


@dataclass
class BcConfig:
    iters: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoder_feed: str = "autoregressive"  # or "ground_truth_during_bc"
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0 or self.batch_size < 1:
            raise ValueError("bc: iteration and batch counts must be positive")
        if self.decoder_feed not in ("autoregressive", "ground_truth_during_bc"):
            raise ValueError(f"unknown decoder_feed {self.decoder_feed!r}")


@dataclass
class GailConfig:
    iters: int = 2000  # T, outer iterations
    d_batch: int = 16  # N_D
    g_batch: int = 16  # N_G
    penalty_k: float = 2.0
    penalty_p: float = 6.0
    d_lr: float = 1e-4
    g_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0 or self.d_batch < 1 or self.g_batch < 1:
            raise ValueError("gail: iteration and batch counts must be positive")
        if self.penalty_k < 0:
            raise ValueError("penalty coefficient k must be nonnegative")
        if self.penalty_p <= 1:
            raise ValueError("penalty exponent p must exceed 1")


@dataclass
class LogRecord:
    iteration: int
    phase: str
    loss: float
    penalty: float | None
    wasserstein_gap: float | None
    seconds: float


class TrainLog:
    """Per-iteration records, optionally mirrored to an append-only CSV."""

    HEADER = "iteration,phase,loss,penalty,wasserstein_gap,seconds"

    def __init__(self, csv_path=None):
        self.records: list[LogRecord] = []
        self._csv_path = csv_path
        if csv_path is not None:
            with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(self.HEADER + "\n")

    @staticmethod
    def _fmt(v):
        return "" if v is None else f"{v:.17g}"

    def add(self, iteration, phase, loss, penalty, wasserstein_gap, seconds):
        rec = LogRecord(iteration, phase, float(loss),
                        None if penalty is None else float(penalty),
                        None if wasserstein_gap is None else float(wasserstein_gap),
                        float(seconds))
        self.records.append(rec)
        if self._csv_path is not None:
            with open(self._csv_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(self._row(rec) + "\n")
        return rec

    def _row(self, r: LogRecord):
        return ",".join([
            str(r.iteration), r.phase, self._fmt(r.loss), self._fmt(r.penalty),
            self._fmt(r.wasserstein_gap), f"{r.seconds:.6f}",
        ])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.records:
                fh.write(self._row(r) + "\n")


# ---------------------------------------------------------------------------
# Stage 1: behavioral cloning.
# ---------------------------------------------------------------------------


def bc_loss(predicted, expert) -> Tensor:
    """Mean absolute difference over every entry of the action windows."""
    p = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    e = expert if isinstance(expert, Tensor) else Tensor(np.asarray(expert, dtype=p.dtype))
    if p.shape != e.shape:
        raise ad.ShapeError(f"bc_loss: shapes {p.shape} and {e.shape} differ")
    return ad.mean_all(ad.abs_pow(p - e, 1.0))


def bc_batch_loss(policy, batch: np.ndarray, ep: EpisodeConfig,
                  decoder_feed: str = "autoregressive") -> Tensor:
    """Teacher-forced cloning loss of a (B, t+l, d) expert batch.

    States are the expert prefixes; the encoder runs once per trajectory and
    is snapshotted at each window boundary, which matches restarting it from
    scratch for every state.
    """
    B, span, d = batch.shape
    if span != ep.span:
        raise ValueError(f"batch span {span} != episode span {ep.span}")
    frames = batch_frames(batch, policy.dtype)
    enc_frames = frames[: ep.t + (ep.K - 1) * ep.m]
    hs = policy.encode(enc_frames)
    total = None
    for i in range(1, ep.K + 1):
        cut = ep.t + (i - 1) * ep.m
        teacher = None
        if decoder_feed == "ground_truth_during_bc":
            teacher = frames[cut : cut + ep.m - 1]
        outs = policy.decode(hs[cut - 1], enc_frames[cut - 1], ep.m, teacher=teacher)
        for j, out in enumerate(outs):
            term = ad.sum_all(ad.abs_pow(out - frames[cut + j], 1.0))
            total = term if total is None else total + term
    return ad.scale(total, 1.0 / (B * ep.l * d))


def bc_train(dataset, policy, ep: EpisodeConfig, cfg: BcConfig,
             log: TrainLog | None = None, checkpoint_hook=None,
             checkpoint_interval: int = 0):
    """Sample expert batches, decompose, clone the actions with an l1 loss,
    one Adam step per iteration.  Returns (policy, TrainLog).

    checkpoint_hook(iteration) is invoked every checkpoint_interval
    iterations when both are given.
    """
    if log is None:
        log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    params = policy.param_tensors()
    adam = ad.adam_init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    for it in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        batch, positions = data_mod.sample_trajectories(
            dataset, ep.span, cfg.batch_size, rng, return_positions=True
        )
        try:
            with ad.Tape():
                loss = bc_batch_loss(policy, batch, ep, cfg.decoder_feed)
                grads = ad.gradient(loss, params, create_graph=False, missing="zeros")
        except ad.NumericError as exc:
            raise DivergenceError(it, "bc", positions, exc) from exc
        gv = ad.clip_gradients(grads, cfg.grad_clip)
        new_vals, adam = ad.adam_step(params, gv, adam)
        for p, v in zip(params, new_vals):
            p.values = v
        log.add(it, "bc", loss.item(), None, None, time.perf_counter() - t0)
        if checkpoint_hook is not None and checkpoint_interval > 0 and it % checkpoint_interval == 0:
            checkpoint_hook(it)
    return policy, log


# ---------------------------------------------------------------------------
# Stage 2: WGAIL-div.
# ---------------------------------------------------------------------------


def interpolate_pairs(expert_pair, agent_pair, alpha: float):
    """Elementwise alpha * expert + (1 - alpha) * agent for a (state, action)."""
    (s, a), (s2, a2) = expert_pair, agent_pair
    s, a, s2, a2 = (np.asarray(x, dtype=np.float64) for x in (s, a, s2, a2))
    if s.shape != s2.shape or a.shape != a2.shape:
        raise ValueError("interpolate_pairs: expert and agent shapes differ")
    return alpha * s + (1.0 - alpha) * s2, alpha * a + (1.0 - alpha) * a2


def grad_penalty(critic, s_hat, a_hat, k: float, p: float) -> Tensor:
    """k * ||grad of the critic score w.r.t. every (state, action) entry||^p,
    as a graph node that still supports a further gradient in the critic
    parameters.  The norm power is computed as (sum of squares)^(p/2), which
    is smooth at zero for p >= 2.
    """
    if k < 0 or p <= 1:
        raise ValueError("grad_penalty requires k >= 0 and p > 1")
    s_leaf = s_hat if isinstance(s_hat, Tensor) else Tensor(np.asarray(s_hat, dtype=critic.dtype))
    a_leaf = a_hat if isinstance(a_hat, Tensor) else Tensor(np.asarray(a_hat, dtype=critic.dtype))
    score = critic.forward(s_leaf, a_leaf)
    gs, ga = ad.gradient(score, [s_leaf, a_leaf], create_graph=True)
    sq = ad.sum_all(ad.mul(gs, gs)) + ad.sum_all(ad.mul(ga, ga))
    return ad.scale(ad.abs_pow(sq, p / 2.0), k)


def agent_rollout(policy, batch: np.ndarray, ep: EpisodeConfig) -> np.ndarray:
    """Compound the policy from the batch's observed prefixes; returns the
    (B, t+l, d) prefix-plus-predictions array whose growing slices are the
    agent states."""
    pred = policy.rollout_values(batch[:, : ep.t], ep.K, ep.m)
    return np.concatenate([batch[:, : ep.t], pred], axis=1)


def d_objective(batch: np.ndarray, agent_full: np.ndarray, policy, critic,
                ep: EpisodeConfig, cfg: GailConfig, alphas: np.ndarray):
    """The critic's objective on one batch: (gap - penalty, penalty, gap)
    graph nodes.  Must run inside an active tape."""
    B, _, d = batch.shape
    exp_state = critic.state_embeddings(batch, ep)
    agt_state = critic.state_embeddings(agent_full, ep)
    gap_sum = None
    pen_sum = None
    for i in range(1, ep.K + 1):
        cut = ep.t + (i - 1) * ep.m
        exp_act = batch_frames(batch[:, cut : cut + ep.m], critic.dtype)
        agt_act = batch_frames(agent_full[:, cut : cut + ep.m], critic.dtype)
        d_exp = critic.head(exp_state[i - 1], critic.action_embedding(exp_act))
        d_agt = critic.head(agt_state[i - 1], critic.action_embedding(agt_act))
        term = ad.sum_all(d_agt) - ad.sum_all(d_exp)
        gap_sum = term if gap_sum is None else gap_sum + term

        # One alpha per (trajectory, step) pair, shared across its entries.
        a_col = alphas[:, i - 1][:, None, None]
        s_hat = a_col * batch[:, :cut] + (1.0 - a_col) * agent_full[:, :cut]
        a_hat = a_col * batch[:, cut : cut + ep.m] + (1.0 - a_col) * agent_full[:, cut : cut + ep.m]
        s_leaf = Tensor(s_hat.reshape(B, cut * d).astype(critic.dtype))
        a_leaf = Tensor(a_hat.reshape(B, ep.m * d).astype(critic.dtype))
        s_frames = [s_leaf[:, j * d : (j + 1) * d] for j in range(cut)]
        a_frames = [a_leaf[:, j * d : (j + 1) * d] for j in range(ep.m)]
        d_hat = critic.score_steps(s_frames, a_frames)
        gs, ga = ad.gradient(ad.sum_all(d_hat), [s_leaf, a_leaf],
                             create_graph=True, missing="zeros")
        sq = ad.rowsum(ad.mul(gs, gs)) + ad.rowsum(ad.mul(ga, ga))
        pen_i = ad.sum_all(ad.abs_pow(sq, cfg.penalty_p / 2.0))
        pen_sum = pen_i if pen_sum is None else pen_sum + pen_i

    n = float(B * ep.K)
    gap = ad.scale(gap_sum, 1.0 / n)
    penalty = ad.scale(pen_sum, cfg.penalty_k / n)
    return gap - penalty, penalty, gap


def d_step(batch: np.ndarray, policy, critic, ep: EpisodeConfig, cfg: GailConfig,
           rng: np.random.Generator, adam: ad.AdamState):
    """One critic ascent step on a (N_D, t+l, d) expert batch; the policy is
    read only.  Returns a stats dict.
    """
    agent_full = agent_rollout(policy, batch, ep)
    alphas = rng.uniform(0.0, 1.0, size=(batch.shape[0], ep.K))

    params = critic.param_tensors()
    with ad.Tape():
        objective, penalty, gap = d_objective(batch, agent_full, policy, critic, ep, cfg, alphas)
        grads = ad.gradient(ad.scale(objective, -1.0), params,
                            create_graph=False, missing="zeros")

    gv = ad.clip_gradients(grads, cfg.grad_clip)
    new_vals, _ = ad.adam_step(params, gv, adam)
    for p, v in zip(params, new_vals):
        p.values = v
    return {
        "objective": objective.item(),
        "penalty": penalty.item(),
        "wasserstein_gap": gap.item(),
    }


def g_objective(agent_full: np.ndarray, policy, critic, ep: EpisodeConfig):
    """mean D(state, policy(state)) over the compounded states, as a graph
    node differentiable in the policy parameters.  Must run inside a tape."""
    windows = policy.agent_windows_graph(agent_full, ep)
    state_emb = critic.state_embeddings(agent_full, ep)
    obj_sum = None
    for i in range(1, ep.K + 1):
        score = critic.head(state_emb[i - 1], critic.action_embedding(windows[i - 1]))
        term = ad.sum_all(score)
        obj_sum = term if obj_sum is None else obj_sum + term
    return ad.scale(obj_sum, 1.0 / (agent_full.shape[0] * ep.K))


def g_step(batch: np.ndarray, policy, critic, ep: EpisodeConfig, cfg: GailConfig,
           rng: np.random.Generator, adam: ad.AdamState):
    """One generator descent step: gradient of mean D(state, policy(state))
    over the policy parameters, with the compounded states held constant and
    the critic frozen.
    """
    agent_full = agent_rollout(policy, batch, ep)

    params = policy.param_tensors()
    with ad.Tape():
        objective = g_objective(agent_full, policy, critic, ep)
        grads = ad.gradient(objective, params, create_graph=False, missing="zeros")

    gv = ad.clip_gradients(grads, cfg.grad_clip)
    new_vals, _ = ad.adam_step(params, gv, adam)
    for p, v in zip(params, new_vals):
        p.values = v
    return {"expected_score": objective.item()}


def wgail_train(dataset, policy, critic, ep: EpisodeConfig, cfg: GailConfig,
                log: TrainLog | None = None, checkpoint_hook=None,
                checkpoint_interval: int = 0):
    """Alternate one D step and one G step per iteration for cfg.iters
    iterations.  The policy arrives BC-initialized; the critic arrives
    freshly initialized.  Returns (policy, critic, TrainLog).
    """
    if log is None:
        log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    d_adam = ad.adam_init(critic.param_tensors(), lr=cfg.d_lr,
                          beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    g_adam = ad.adam_init(policy.param_tensors(), lr=cfg.g_lr,
                          beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    for it in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        batch_d, pos_d = data_mod.sample_trajectories(
            dataset, ep.span, cfg.d_batch, rng, return_positions=True
        )
        try:
            stats = d_step(batch_d, policy, critic, ep, cfg, rng, d_adam)
        except ad.NumericError as exc:
            raise DivergenceError(it, "d", pos_d, exc) from exc
        log.add(it, "d", stats["objective"], stats["penalty"],
                stats["wasserstein_gap"], time.perf_counter() - t0)

        t0 = time.perf_counter()
        batch_g, pos_g = data_mod.sample_trajectories(
            dataset, ep.span, cfg.g_batch, rng, return_positions=True
        )
        try:
            stats = g_step(batch_g, policy, critic, ep, cfg, rng, g_adam)
        except ad.NumericError as exc:
            raise DivergenceError(it, "g", pos_g, exc) from exc
        log.add(it, "g", stats["expected_score"], None, None, time.perf_counter() - t0)
        if checkpoint_hook is not None and checkpoint_interval > 0 and it % checkpoint_interval == 0:
            checkpoint_hook(it)
    return policy, critic, log

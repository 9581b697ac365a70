"""Two-phase actor-critic training: local pre-training, then global fine-tuning.

Phase 1 trains every port agent on its own (local) reward with a shared
EncGAT embedding, a shared actor header and a local critic header.  Phase 2
keeps the embedding and local critic, draws a fresh actor header, adds a
global critic over the mean port embedding and optimises

    L = w_local * sum(local TD^2) + w_global * sum(global TD^2)
        - sum_t (sum_i log pi_i) * stop_gradient(global advantage_t)

Decisions are synchronous per simulator tick.  An agent's transition runs
from one of its decisions to its next decision at a strictly later tick (or
to the end of the episode).  Bootstrap targets use the current parameters
and are treated as constants, so the update can be split into chunks of
snapshots without changing the gradient.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractError, ParameterSet, Tape
from .network import (
    NetConfig,
    actor_log_probs,
    actor_prefixes,
    critic_header,
    encgat_forward_batch,
    global_critic_input,
    init_actor,
    init_critic,
    init_encgat,
)
from .observation import FeatureRecorder, GraphSnapshot, build_structure, stack_snapshots, take_snapshot
from .seeding import derive_int, derive_rng
from .sim import N_ACTIONS, advance, apply_action, fulfillment_ratio, reset
from .topology import Topology

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "iteration", "phase", "seed", "fulfillment_ratio", "mean_local_return",
    "loss", "loss_local_critic", "loss_global_critic", "loss_actor", "grad_norm",
)


@dataclass
class LossWeights:
    gamma: float = 0.99
    local_pretrain: float = 0.5
    local: float = 0.25
    global_critic: float = 0.5
    # both act on the fine-tune phase only
    entropy: float = 0.01
    normalize_advantage: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        for k in ("local_pretrain", "local", "global_critic", "entropy"):
            if getattr(self, k) < 0:
                raise ContractError(f"loss weight {k} must be >= 0")


@dataclass
class TrainConfig:
    pretrain_iterations: int = 100
    finetune_iterations: int = 200
    episodes_per_iteration: int = 1
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    chunk_size: int = 0
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)


@dataclass
class Transition:
    """One agent decision and what followed until its next decision.

    ``snapshot``/``next_snapshot`` index the episode's graph snapshots;
    ``next_snapshot`` is None for terminal transitions.
    """

    agent: int
    vessel: int
    tick: int
    snapshot: int
    action: int
    log_prob: float
    k: int
    local_return: float
    global_return: float
    next_snapshot: int | None
    terminal: bool


@dataclass
class GlobalStep:
    """All decisions taken at one tick, with the global reward until the next decision tick."""

    tick: int
    snapshot: int
    k: int
    global_return: float
    next_snapshot: int | None
    terminal: bool
    members: list[int]


@dataclass
class Episode:
    seed: int
    snapshots: list[GraphSnapshot]
    transitions: list[Transition]
    steps: list[GlobalStep]
    local_rewards: np.ndarray  # [E + 1, P], row t holds tick t
    global_rewards: np.ndarray  # [E + 1]
    fulfillment_ratio: float
    fulfilled: np.ndarray
    shortage: np.ndarray
    port_embeddings: list[np.ndarray]
    vessel_embeddings: list[np.ndarray]
    structure: object = None


class ExperiencePool:
    """Episodes gathered with the current parameters; emptied after every update."""

    def __init__(self):
        self.episodes: list[Episode] = []

    def add(self, ep: Episode) -> None:
        self.episodes.append(ep)

    def __len__(self) -> int:
        return len(self.episodes)

    def n_transitions(self) -> int:
        return sum(len(e.transitions) for e in self.episodes)

    def clear(self) -> None:
        self.episodes = []


# ---------------------------------------------------------------------------
# returns and advantages


def discounted_sum(rewards, start: int, k: int, gamma: float) -> float:
    """sum_{j=1..k} gamma^(j-1) * rewards[start + j]."""
    total, g = 0.0, 1.0
    for j in range(1, k + 1):
        total += g * float(rewards[start + j])
        g *= gamma
    return total


def build_transitions(
    decisions: list[tuple[int, int, int, int, int, float]],
    local_rewards: np.ndarray,
    global_rewards: np.ndarray,
    episode_length: int,
    gamma: float,
) -> tuple[list[Transition], list[GlobalStep]]:
    """Pair decisions with their successors.

    ``decisions`` rows are (snapshot, tick, port, vessel, action, log_prob),
    ordered by tick.
    """
    ticks_by_port: dict[int, list[tuple[int, int]]] = {}
    for snap, tick, port, *_ in decisions:
        lst = ticks_by_port.setdefault(port, [])
        if not lst or lst[-1][0] != tick:
            lst.append((tick, snap))
    transitions = []
    for snap, tick, port, vessel, action, logp in decisions:
        later = [x for x in ticks_by_port[port] if x[0] > tick]
        if later:
            nt, ns = later[0]
            terminal = False
        else:
            nt, ns, terminal = episode_length, None, True
        k = nt - tick
        transitions.append(
            Transition(
                agent=port, vessel=vessel, tick=tick, snapshot=snap, action=action, log_prob=logp, k=k,
                local_return=discounted_sum(local_rewards[:, port], tick, k, gamma),
                global_return=discounted_sum(global_rewards, tick, k, gamma),
                next_snapshot=ns, terminal=terminal,
            )
        )
    steps: list[GlobalStep] = []
    by_tick: dict[int, list[int]] = {}
    snap_of: dict[int, int] = {}
    for idx, tr in enumerate(transitions):
        by_tick.setdefault(tr.tick, []).append(idx)
        snap_of[tr.tick] = tr.snapshot
    ticks = sorted(by_tick)
    for n, t in enumerate(ticks):
        if n + 1 < len(ticks):
            nt, ns, terminal = ticks[n + 1], snap_of[ticks[n + 1]], False
        else:
            nt, ns, terminal = episode_length, None, True
        steps.append(GlobalStep(t, snap_of[t], nt - t, discounted_sum(global_rewards, t, nt - t, gamma), ns, terminal, by_tick[t]))
    return transitions, steps


def local_advantage(tr: Transition, v_current: float, v_next: float, gamma: float) -> float:
    """R_loc + gamma^k V(next) - V(current); no bootstrap at terminal."""
    boot = 0.0 if tr.terminal else gamma**tr.k * v_next
    return tr.local_return + boot - v_current


def global_advantage(step: GlobalStep, v_current: float, v_next: float, gamma: float) -> float:
    boot = 0.0 if step.terminal else gamma**step.k * v_next
    return step.global_return + boot - v_current


# ---------------------------------------------------------------------------
# rollouts


def actor_prefix(cfg: NetConfig, agent: int) -> str:
    return f"actor/{agent}" if cfg.separate_actors else "actor"


def request_log_probs(pe: np.ndarray, ve: np.ndarray, ports: list[int], vessels: list[int], params: ParameterSet, cfg: NetConfig) -> np.ndarray:
    """Action log-probabilities [R, 22] for requests at one snapshot (no tape)."""
    out = np.zeros((len(ports), cfg.n_actions))
    mask = np.ones(cfg.n_actions, dtype=bool)
    groups: dict[str, list[int]] = {}
    for r, p in enumerate(ports):
        groups.setdefault(actor_prefix(cfg, p), []).append(r)
    for prefix, rows in groups.items():
        lp = actor_log_probs(pe[[ports[r] for r in rows]], ve[[vessels[r] for r in rows]], mask, params, prefix)
        out[rows] = lp.data
    return out


def sample_action(log_probs: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(log_probs)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def rollout(
    top: Topology,
    params: ParameterSet,
    cfg: NetConfig,
    episode_seed: int,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
    gamma: float = 0.99,
    structure=None,
) -> Episode:
    """Play one episode with the current policy; ``mode`` is 'sample' or 'greedy'."""
    if mode not in ("sample", "greedy"):
        raise ContractError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ContractError("sample mode needs an rng")
    structure = structure or build_structure(top)
    state = reset(top, episode_seed)
    rec = FeatureRecorder(top, cfg.n_lookback)
    state.tick_listeners.append(rec.record_tick)
    E, P = top.episode_length, top.n_ports
    loc = np.zeros((E + 1, P))
    glob = np.zeros(E + 1)
    snaps: list[GraphSnapshot] = []
    pes, ves = [], []
    decisions = []
    while True:
        res = advance(state)
        for t, g, lr in zip(res.ticks, res.global_rewards, res.local_rewards):
            loc[t] = lr
            glob[t] = g
        if res.done:
            break
        snap = take_snapshot(state, rec, structure)
        out = encgat_forward_batch(stack_snapshots([snap], structure), params, cfg)
        pe, ve = out.ports.data[0], out.vessels.data[0]
        s = len(snaps)
        snaps.append(snap)
        pes.append(pe)
        ves.append(ve)
        ports = [q.port for q in res.requests]
        vessels = [q.vessel for q in res.requests]
        lps = request_log_probs(pe, ve, ports, vessels, params, cfg)
        for q, lp in zip(res.requests, lps):
            a = int(np.argmax(lp)) if mode == "greedy" else sample_action(lp, rng)
            apply_action(state, q, a)
            decisions.append((s, state.tick, q.port, q.vessel, a, float(lp[a])))
    transitions, steps = build_transitions(decisions, loc, glob, E, gamma)
    return Episode(
        seed=episode_seed, snapshots=snaps, transitions=transitions, steps=steps,
        local_rewards=loc, global_rewards=glob, fulfillment_ratio=fulfillment_ratio(state),
        fulfilled=state.fulfilled_total.copy(), shortage=state.shortage_total.copy(),
        port_embeddings=pes, vessel_embeddings=ves, structure=structure,
    )


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    total: float = 0.0
    local_critic: float = 0.0
    global_critic: float = 0.0
    actor: float = 0.0


def _select_logp(pe, ve, rows_t, rows_p, rows_v, actions, params, cfg, agents) -> ad.Tensor:
    """Log-probabilities of the taken actions, one entry per transition row."""
    parts, order = [], []
    groups: dict[str, list[int]] = {}
    for n, a in enumerate(agents):
        groups.setdefault(actor_prefix(cfg, a), []).append(n)
    mask = np.ones(cfg.n_actions, dtype=bool)
    for prefix, idx in groups.items():
        idx_a = np.array(idx)
        p = ad.index_select(pe, (rows_t[idx_a], rows_p[idx_a]))
        v = ad.index_select(ve, (rows_t[idx_a], rows_v[idx_a]))
        lp = actor_log_probs(p, v, mask, params, prefix)
        onehot = np.eye(cfg.n_actions)[actions[idx_a]]
        parts.append(ad.sum(ad.mul(lp, onehot), axis=-1))
        order.extend(idx)
    cat = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inv = np.argsort(np.array(order), kind="stable")
    return ad.index_select(cat, inv)


def _entropy(pe, ve, rows_t, rows_p, rows_v, params, cfg, agents) -> ad.Tensor:
    mask = np.ones(cfg.n_actions, dtype=bool)
    terms = []
    groups: dict[str, list[int]] = {}
    for n, a in enumerate(agents):
        groups.setdefault(actor_prefix(cfg, a), []).append(n)
    for prefix, idx in groups.items():
        idx_a = np.array(idx)
        p = ad.index_select(pe, (rows_t[idx_a], rows_p[idx_a]))
        v = ad.index_select(ve, (rows_t[idx_a], rows_v[idx_a]))
        lp = actor_log_probs(p, v, mask, params, prefix)
        terms.append(ad.sum(ad.mul(ad.exp(lp), lp)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0)


def pretrain_loss(batch: dict, params: ParameterSet, weights: LossWeights, cfg: NetConfig) -> tuple[ad.Tensor, LossBreakdown]:
    """Local actor-critic loss over one batch of transitions.

    ``batch`` holds tensors ``pe`` [S, P, d] and ``ve`` [S, V, d] plus integer
    arrays ``t``, ``port``, ``vessel``, ``action`` and float arrays
    ``target`` (detached TD target) and ``advantage`` (detached), one entry per
    transition.
    """
    n = len(batch["t"])
    if n == 0:
        raise ContractError("pretrain_loss: empty batch")
    pe, ve = batch["pe"], batch["ve"]
    v = critic_header(pe, params, "local")
    v_sel = ad.index_select(v, (batch["t"], batch["port"]))
    delta = ad.sum(ad.square(ad.sub(batch["target"], v_sel)))
    logp = _select_logp(pe, ve, batch["t"], batch["port"], batch["vessel"], batch["action"], params, cfg, batch["port"])
    phi = ad.scale(ad.sum(ad.mul(logp, ad.stop_gradient(batch["advantage"]))), -1.0)
    loss = ad.add(ad.scale(delta, weights.local_pretrain), phi)
    bd = LossBreakdown(float(loss.data), float(delta.data), 0.0, float(phi.data))
    return loss, bd


def finetune_loss(batch: dict, params: ParameterSet, weights: LossWeights, cfg: NetConfig) -> tuple[ad.Tensor, LossBreakdown]:
    """Combined local-critic, global-critic and global-advantage actor loss.

    Besides the per-transition entries of :func:`pretrain_loss`, ``batch``
    carries ``step`` (global step of each transition), ``g_t`` (snapshot of
    each global step), ``g_target`` and ``g_advantage`` (detached).
    """
    n = len(batch["t"])
    if n == 0:
        raise ContractError("finetune_loss: empty batch")
    if "critic_global/fc1/w" not in params:
        raise ContractError("finetune_loss needs a global critic header")
    pe, ve = batch["pe"], batch["ve"]
    v = critic_header(pe, params, "local")
    v_sel = ad.index_select(v, (batch["t"], batch["port"]))
    delta_loc = ad.sum(ad.square(ad.sub(batch["target"], v_sel)))
    vg = critic_header(global_critic_input(pe), params, "global")
    vg_sel = ad.index_select(vg, batch["g_t"])
    delta_g = ad.sum(ad.square(ad.sub(batch["g_target"], vg_sel)))
    logp = _select_logp(pe, ve, batch["t"], batch["port"], batch["vessel"], batch["action"], params, cfg, batch["port"])
    adv = np.asarray(batch["g_advantage"])[batch["step"]]
    phi = ad.scale(ad.sum(ad.mul(logp, ad.stop_gradient(adv))), -1.0)
    loss = ad.add(ad.add(ad.scale(delta_loc, weights.local), ad.scale(delta_g, weights.global_critic)), phi)
    if weights.entropy > 0:
        ent = _entropy(pe, ve, batch["t"], batch["port"], batch["vessel"], params, cfg, batch["port"])
        loss = ad.sub(loss, ad.scale(ent, weights.entropy))
    return loss, LossBreakdown(float(loss.data), float(delta_loc.data), float(delta_g.data), float(phi.data))


# ---------------------------------------------------------------------------
# updates


def _values(ep: Episode, params: ParameterSet, global_critic: bool) -> tuple[np.ndarray, np.ndarray | None]:
    pe = np.stack(ep.port_embeddings)
    vloc = critic_header(pe, params, "local").data
    vg = critic_header(global_critic_input(pe), params, "global").data if global_critic else None
    return vloc, vg


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy; a single entry or a constant vector maps to zeros."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return np.zeros_like(x)
    sd = float(x.std())
    return (x - x.mean()) / sd if sd > 1e-12 else np.zeros_like(x)


def _episode_targets(ep: Episode, params: ParameterSet, gamma: float, global_critic: bool, normalize: bool = False) -> dict:
    vloc, vg = _values(ep, params, global_critic)
    tr = ep.transitions
    nxt = [0.0 if t.terminal else vloc[t.next_snapshot, t.agent] for t in tr]
    cur = np.array([vloc[t.snapshot, t.agent] for t in tr])
    target = np.array([t.local_return + (0.0 if t.terminal else gamma**t.k * n) for t, n in zip(tr, nxt)])
    out = {
        "snap": np.array([t.snapshot for t in tr], dtype=np.int64),
        "port": np.array([t.agent for t in tr], dtype=np.int64),
        "vessel": np.array([t.vessel for t in tr], dtype=np.int64),
        "action": np.array([t.action for t in tr], dtype=np.int64),
        "target": target,
        "advantage": target - cur,
    }
    if global_critic:
        step_of = np.zeros(len(tr), dtype=np.int64)
        for si, st in enumerate(ep.steps):
            step_of[st.members] = si
        g_target = np.array([s.global_return + (0.0 if s.terminal else gamma**s.k * vg[s.next_snapshot]) for s in ep.steps])
        out.update(
            step=step_of,
            g_snap=np.array([s.snapshot for s in ep.steps], dtype=np.int64),
            g_target=g_target,
            g_advantage=g_target - vg[[s.snapshot for s in ep.steps]],
        )
    if normalize and global_critic:
        out["g_advantage"] = standardize(out["g_advantage"])
    return out


def update(
    params: ParameterSet, adam: AdamState, pool: ExperiencePool, weights: LossWeights, cfg: NetConfig,
    phase: str, chunk_size: int = 0,
) -> tuple[LossBreakdown, float]:
    """One Adam step on all transitions in the pool, then clear the pool."""
    if phase not in ("pretrain", "finetune"):
        raise ContractError(f"unknown phase {phase!r}")
    glob = phase == "finetune"
    loss_fn = finetune_loss if glob else pretrain_loss
    params.zero_grad()
    total = LossBreakdown()
    for ep in pool.episodes:
        if not ep.transitions:
            continue
        tg = _episode_targets(ep, params, weights.gamma, glob, weights.normalize_advantage)
        S = len(ep.snapshots)
        size = chunk_size if chunk_size > 0 else S
        for s0 in range(0, S, size):
            s1 = min(S, s0 + size)
            sel = (tg["snap"] >= s0) & (tg["snap"] < s1)
            if not sel.any():
                continue
            batch = {
                "t": tg["snap"][sel] - s0, "port": tg["port"][sel], "vessel": tg["vessel"][sel],
                "action": tg["action"][sel], "target": tg["target"][sel], "advantage": tg["advantage"][sel],
            }
            if glob:
                gsel = (tg["g_snap"] >= s0) & (tg["g_snap"] < s1)
                remap = -np.ones(len(gsel), dtype=np.int64)
                remap[gsel] = np.arange(int(gsel.sum()))
                batch.update(
                    step=remap[tg["step"][sel]], g_t=tg["g_snap"][gsel] - s0,
                    g_target=tg["g_target"][gsel], g_advantage=tg["g_advantage"][gsel],
                )
            with Tape() as tape:
                out = encgat_forward_batch(stack_snapshots(ep.snapshots[s0:s1], ep.structure), params, cfg)
                batch["pe"], batch["ve"] = out.ports, out.vessels
                loss, bd = loss_fn(batch, params, weights, cfg)
                ad.backward(loss, tape)
            total.total += bd.total
            total.local_critic += bd.local_critic
            total.global_critic += bd.global_critic
            total.actor += bd.actor
    norm = ad.adam_step(params, adam)
    pool.clear()
    return total, norm


# ---------------------------------------------------------------------------
# phases


@dataclass
class PhaseResult:
    params: ParameterSet
    metrics: list[dict]


def _metric_row(it: int, phase: str, seed: int, eps: list[Episode], bd: LossBreakdown, norm: float) -> dict:
    ratio = float(np.mean([e.fulfillment_ratio for e in eps]))
    mlr = float(np.mean([e.local_rewards.sum(axis=0).mean() for e in eps]))
    return {
        "iteration": it, "phase": phase, "seed": seed, "fulfillment_ratio": ratio, "mean_local_return": mlr,
        "loss": bd.total, "loss_local_critic": bd.local_critic, "loss_global_critic": bd.global_critic,
        "loss_actor": bd.actor, "grad_norm": norm,
    }


def _run_phase(
    top: Topology, params: ParameterSet, cfg: TrainConfig, seed: int, phase: str, iterations: int,
    out_dir: Path | None, weights: LossWeights,
) -> PhaseResult:
    adam = AdamState(learning_rate=cfg.learning_rate, clip_norm=cfg.clip_norm)
    structure = build_structure(top)
    pool = ExperiencePool()
    metrics = []
    for it in range(iterations):
        eps = []
        for e in range(cfg.episodes_per_iteration):
            ep_seed = derive_int(seed, f"{phase}/episode", it, e)
            rng = derive_rng(seed, f"{phase}/sample", it, e)
            ep = rollout(top, params, cfg.net, ep_seed, "sample", rng, weights.gamma, structure)
            pool.add(ep)
            eps.append(ep)
        bd, norm = update(params, adam, pool, weights, cfg.net, phase, cfg.chunk_size)
        row = _metric_row(it, phase, seed, eps, bd, norm)
        metrics.append(row)
        log.info("%s it=%d seed=%d ratio=%.4f loss=%.4f", phase, it, seed, row["fulfillment_ratio"], bd.total)
        if out_dir is not None and cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
            ad.save_checkpoint(out_dir / f"{phase}_iter{it + 1:04d}.npz", params)
    return PhaseResult(params, metrics)


def pretrain(top: Topology, cfg: TrainConfig, seed: int, out_dir: Path | None = None, params: ParameterSet | None = None) -> PhaseResult:
    """Local actor-critic pre-training from fresh (or given) parameters."""
    if params is None:
        rng = derive_rng(seed, "init")
        params = init_encgat(cfg.net, rng)
        init_actor(cfg.net, rng, params)
        init_critic(cfg.net, rng, params, "local")
    return _run_phase(top, params, cfg, seed, "pretrain", cfg.pretrain_iterations, out_dir, cfg.weights)


INHERITED_PREFIXES = ("temporal/", "block", "critic_local/")


def inherit(pretrained: ParameterSet, cfg: NetConfig, seed: int) -> ParameterSet:
    """Copy embedding and local critic; fresh actor header(s) and global critic."""
    ref = init_encgat(cfg, np.random.default_rng(0))
    init_critic(cfg, np.random.default_rng(0), ref, "local")
    missing = [k for k in ref if k not in pretrained]
    if missing:
        raise ContractError(f"pre-trained parameters lack {missing}")
    params = ParameterSet({k: ad.Tensor(pretrained[k].data.copy()) for k in ref})
    rng = derive_rng(seed, "finetune-init")
    init_actor(cfg, rng, params)
    init_critic(cfg, rng, params, "global")
    return params


def finetune(
    top: Topology, pretrained: ParameterSet | None, cfg: TrainConfig, seed: int, out_dir: Path | None = None,
    weights: LossWeights | None = None,
) -> PhaseResult:
    """Global fine-tuning.  ``pretrained=None`` starts from scratch."""
    weights = weights or cfg.weights
    if pretrained is None:
        rng = derive_rng(seed, "init")
        base = init_encgat(cfg.net, rng)
        init_actor(cfg.net, rng, base)
        init_critic(cfg.net, rng, base, "local")
        pretrained = base
    params = inherit(pretrained, cfg.net, seed)
    return _run_phase(top, params, cfg, seed, "finetune", cfg.finetune_iterations, out_dir, weights)


@dataclass
class TrainResult:
    params: ParameterSet
    pretrained: ParameterSet | None
    metrics: list[dict]


def train(
    top: Topology, cfg: TrainConfig, seed: int, out_dir: str | Path | None = None, skip_pretrain: bool = False,
) -> TrainResult:
    """Pre-train then fine-tune; ``skip_pretrain`` gives the Normal-GC ablation (no local critic term)."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    pre = None
    weights = cfg.weights
    if skip_pretrain:
        weights = replace(weights, local=0.0)
    else:
        res = pretrain(top, cfg, seed, out)
        pre = res.params.copy()
        metrics.extend(res.metrics)
        if out is not None:
            ad.save_checkpoint(out / "pretrain_final.npz", pre)
    res = finetune(top, pre, cfg, seed, out, weights)
    metrics.extend(res.metrics)
    if out is not None:
        ad.save_checkpoint(out / "final.npz", res.params)
        write_metrics(metrics, out / "metrics.csv")
    return TrainResult(res.params, pre, metrics)


def write_metrics(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def curve_area(metrics: list[dict], phase: str = "finetune") -> float:
    """Trapezoid area under the fulfilment curve of one phase (iteration spacing 1)."""
    y = [float(r["fulfillment_ratio"]) for r in metrics if r["phase"] == phase]
    if len(y) < 2:
        return float(sum(y))
    return float(math.fsum((a + b) / 2 for a, b in zip(y[:-1], y[1:])))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

"""Reference policies, the evaluation harness, embedding export and transfer evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, ParameterSet
from .network import NetConfig, encgat_forward_batch
from .observation import PORT_FEATURES, VESSEL_FEATURES, FeatureRecorder, build_structure, stack_snapshots, take_snapshot
from .seeding import derive_rng
from .sim import N_ACTIONS, NOOP_ACTION, DecisionRequest, SimState, advance, apply_action, fulfillment_ratio, reset
from .topology import Topology
from .trainer import request_log_probs, rollout


class Policy:
    """Maps the decision requests of one tick to actions in 0..21."""

    name = "policy"

    def begin_episode(self, state: SimState, seed: int) -> None:
        pass

    def decide(self, state: SimState, requests: list[DecisionRequest]) -> list[int]:
        raise NotImplementedError


class NoRepositioning(Policy):
    name = "none"

    def decide(self, state, requests):
        return [NOOP_ACTION] * len(requests)


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = derive_rng(seed, "random-policy")

    def begin_episode(self, state, seed):
        self.rng = derive_rng(self.seed, "random-policy", seed)

    def decide(self, state, requests):
        return [int(self.rng.integers(N_ACTIONS)) for _ in requests]


class ProportionalHeuristic(Policy):
    """Keep each port's stock inside [threshold, 1 - threshold] of capacity.

    Below the band the vessel discharges enough empties to cover the
    shortfall (rounded up to the next 10% step); above it the port loads its
    excess the same way.
    """

    name = "heuristic"

    def __init__(self, threshold: float = 0.3):
        if not 0.0 <= threshold <= 0.5:
            raise ContractError(f"heuristic threshold must lie in [0, 0.5], got {threshold}")
        self.threshold = threshold

    def action(self, port_empty: int, capacity: int, vessel_empty: int) -> int:
        low, high = self.threshold * capacity, (1.0 - self.threshold) * capacity
        if port_empty < low and vessel_empty > 0:
            steps = math.ceil(10 * min(1.0, (low - port_empty) / vessel_empty))
            return NOOP_ACTION - steps
        if port_empty > high:
            steps = math.ceil(10 * (port_empty - high) / port_empty)
            return NOOP_ACTION + steps
        return NOOP_ACTION

    def decide(self, state, requests):
        top = state.topology
        return [
            self.action(int(state.port_empty[q.port]), top.ports[q.port].capacity, int(state.vessel_empty[q.vessel]))
            for q in requests
        ]


class LearnedPolicy(Policy):
    """Greedy (or sampled) actions from trained parameters."""

    name = "learned"

    def __init__(self, params: ParameterSet, cfg: NetConfig, greedy: bool = True, seed: int = 0):
        self.params, self.cfg, self.greedy, self.seed = params, cfg, greedy, seed
        self.structure = None
        self.recorder = None

    def begin_episode(self, state, seed):
        self.structure = build_structure(state.topology)
        self.recorder = FeatureRecorder(state.topology, self.cfg.n_lookback)
        state.tick_listeners.append(self.recorder.record_tick)
        self.rng = derive_rng(self.seed, "learned-policy", seed)

    def decide(self, state, requests):
        snap = take_snapshot(state, self.recorder, self.structure)
        out = encgat_forward_batch(stack_snapshots([snap], self.structure), self.params, self.cfg)
        lps = request_log_probs(
            out.ports.data[0], out.vessels.data[0], [q.port for q in requests], [q.vessel for q in requests],
            self.params, self.cfg,
        )
        if self.greedy:
            return [int(np.argmax(lp)) for lp in lps]
        from .trainer import sample_action

        return [sample_action(lp, self.rng) for lp in lps]


def no_repositioning_policy() -> Policy:
    return NoRepositioning()


def random_policy(seed: int = 0) -> Policy:
    return RandomPolicy(seed)


def proportional_heuristic_policy(threshold: float = 0.3) -> Policy:
    return ProportionalHeuristic(threshold)


POLICIES = {"none": no_repositioning_policy, "random": random_policy, "heuristic": proportional_heuristic_policy}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    policy: str
    topology: str
    seeds: list[int]
    ratios: list[float]
    fulfilled: np.ndarray  # [n_seeds, P]
    shortage: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.ratios))

    @property
    def std(self) -> float:
        return float(np.std(self.ratios, ddof=1)) if len(self.ratios) > 1 else 0.0

    @property
    def episodes(self) -> int:
        return len(self.ratios)

    def summary(self) -> str:
        return f"{self.policy} on {self.topology}: {100 * self.mean:.2f} +- {100 * self.std:.2f} % over {self.episodes} seed(s)"


def run_episode(policy: Policy, top: Topology, seed: int) -> SimState:
    state = reset(top, seed)
    policy.begin_episode(state, seed)
    while True:
        res = advance(state)
        if res.done:
            return state
        for q, a in zip(res.requests, policy.decide(state, res.requests)):
            apply_action(state, q, a)


def evaluate(policy: Policy, top: Topology, seeds: list[int]) -> EvalReport:
    if not seeds:
        raise ContractError("evaluate needs at least one seed")
    states = [run_episode(policy, top, s) for s in seeds]
    return EvalReport(
        policy=policy.name, topology=top.name, seeds=list(seeds),
        ratios=[fulfillment_ratio(s) for s in states],
        fulfilled=np.stack([s.fulfilled_total for s in states]),
        shortage=np.stack([s.shortage_total for s in states]),
    )


def seed_label(seeds: list[int]) -> str:
    if len(seeds) > 1 and seeds == list(range(seeds[0], seeds[-1] + 1)):
        return f"{seeds[0]}-{seeds[-1]}"
    return "_".join(str(s) for s in seeds)


def report_filename(report: EvalReport) -> str:
    return f"eval_{report.topology}_{report.policy}_seeds{seed_label(report.seeds)}.csv"


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    """Per-seed rows plus a per-port breakdown file next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / report_filename(report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "fulfillment_ratio", "fulfilled", "shortage"])
        for s, r, f, sh in zip(report.seeds, report.ratios, report.fulfilled, report.shortage):
            w.writerow([s, repr(float(r)), int(f.sum()), int(sh.sum())])
    with open(path.with_name(path.stem + "_ports.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "port", "fulfilled", "shortage"])
        for s, f, sh in zip(report.seeds, report.fulfilled, report.shortage):
            for p in range(len(f)):
                w.writerow([s, p, int(f[p]), int(sh[p])])
    return path


# ---------------------------------------------------------------------------
# embedding projection


def _power_top(c: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    v = rng.standard_normal(c.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ c @ v)
    for _ in range(max_iter):
        w = c @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
        lam = float(v @ c @ v)
        if np.linalg.norm(c @ v - lam * v) < tol:
            break
    return lam, v


def pca(x: np.ndarray, n_components: int = 2, tol: float = 1e-9, max_iter: int = 200_000, seed: int = 0):
    """Top principal directions of the rows of ``x`` by power iteration with deflation.

    Returns (components [k, f], eigenvalues [k], projection [n, k]); each
    component's largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"pca needs at least 2 rows, got shape {x.shape}")
    k = min(n_components, x.shape[1])
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    work = c.copy()
    for _ in range(k):
        lam, v = _power_top(work, rng, tol, max_iter)
        for u in comps:  # deflation leaves a tol-sized overlap; remove it
            v = v - (v @ u) * u
        v = v / np.linalg.norm(v)
        lam = float(v @ c @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    comps = np.array(comps)
    return comps, np.array(vals), xc @ comps.T


def collect_embeddings(params: ParameterSet, cfg: NetConfig, top: Topology, seed: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Port embeddings at every decision over one greedy episode."""
    ep = rollout(top, params, cfg, seed, "greedy")
    rows, keys = [], []
    for tr in ep.transitions:
        rows.append(ep.port_embeddings[tr.snapshot][tr.agent])
        keys.append((tr.agent, tr.tick))
    return (np.array(rows) if rows else np.zeros((0, cfg.d_model))), keys


def export_embeddings(params: ParameterSet, cfg: NetConfig, top: Topology, seed: int) -> list[dict]:
    emb, keys = collect_embeddings(params, cfg, top, seed)
    if len(emb) < 2:
        raise ContractError(f"need at least 2 embeddings for a projection, got {len(emb)}")
    _, _, proj = pca(emb, 2)
    return [{"port": p, "tick": t, "pc1": float(a), "pc2": float(b)} for (p, t), (a, b) in zip(keys, proj)]


def write_projection(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["port", "tick", "pc1", "pc2"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# transfer


def check_feature_widths(params: ParameterSet) -> None:
    got = (params["temporal/port/wq"].shape[0], params["temporal/vessel/wq"].shape[0])
    if got != (PORT_FEATURES, VESSEL_FEATURES):
        raise ContractError(f"checkpoint expects feature widths {got}, observations have {(PORT_FEATURES, VESSEL_FEATURES)}")


def transfer_evaluate(params: ParameterSet, cfg: NetConfig, derived: Topology, seeds: list[int]) -> EvalReport:
    """Evaluate trained parameters on another topology without any update."""
    check_feature_widths(params)
    before = params.digest()
    report = evaluate(LearnedPolicy(params, cfg), derived, seeds)
    after = params.digest()
    if before != after:
        raise ContractError("parameters changed during transfer evaluation")
    report.extra["digest"] = before
    return report

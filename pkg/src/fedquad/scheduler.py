"""Configuration scheduling: feasible-set enumeration, reward maximization,
and the baseline policies used for comparison.

The adaptive policy walks depths d = 1..L per device. For each d it finds the
minimal quantized count a (carrying a lower bound across depths, since the
required a never decreases in d) such that

    m_f + m_o * d - m_q * a <= M,    a <= d - 1,

breaking out of the inner search as soon as the pair fits, and stopping the
depth walk when even a = d - 1 does not fit. Each feasible (d, a_min) is
scored by expected marginal utility per unit of straggling:

    R(d, a) = G(d) / max(t(d, a) - t_avg + c, floor)

with G(d) the summed gain estimate of the d trainable layers, t_avg the
previous round's mean completion time, and the floor keeping fast devices
from dividing by ~zero. Ties take the larger d, then the smaller a. Because
R is non-increasing in a at fixed d (c_a >= 0) and the tie-break prefers
small a, maximizing over the minimal-a list equals maximizing over the full
feasible set; the acceptance suite checks that equivalence exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import median

import numpy as np

from fedquad import model as model_mod
from fedquad.model import LayerAssignment, assignment_from_configuration
from fedquad.resource import (
    Configuration,
    CostModel,
    DeviceStatus,
    estimate_latency,
    is_feasible,
    max_feasible_depth,
)
from fedquad.rng import RngStream


class SchedulingError(RuntimeError):
    """No device can be scheduled this round."""


@dataclass
class GainProfile:
    """Per-layer utility estimates g_l >= 0 driving the depth reward."""

    g: np.ndarray  # (L,)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.ndim != 1 or self.g.shape[0] < 1:
            raise ValueError("gain profile must be a non-empty vector")
        if np.any(self.g < 0) or not np.all(np.isfinite(self.g)):
            raise ValueError("gains must be finite and non-negative")

    @property
    def n_layers(self) -> int:
        return int(self.g.shape[0])

    @staticmethod
    def ones(n_layers: int) -> "GainProfile":
        return GainProfile(np.ones(n_layers, dtype=np.float64))


def gain(profile: GainProfile, d: int) -> float:
    """G(d): total estimated utility of training the top d layers."""
    if not 1 <= d <= profile.n_layers:
        raise ValueError(f"d={d} out of range 1..{profile.n_layers}")
    return float(np.sum(profile.g[profile.n_layers - d :]))


@dataclass(frozen=True)
class RewardParams:
    c: float = 1.0
    floor_fraction: float = 0.1
    theta: float | None = None  # optional straggler pre-filter, off by default

    def __post_init__(self):
        if self.c <= 0 or not 0 < self.floor_fraction <= 1:
            raise ValueError("need c > 0 and 0 < floor_fraction <= 1")
        if self.theta is not None and self.theta < 0:
            raise ValueError("theta must be non-negative")

    @property
    def floor(self) -> float:
        return self.floor_fraction * self.c


def reward(
    profile: GainProfile,
    cm: CostModel,
    cfg: Configuration,
    throughput: float,
    t_avg: float,
    params: RewardParams,
) -> float:
    """R = G(d) / max(t - t_avg + c, floor)."""
    t = estimate_latency(cm, cfg, throughput)
    denom = max(t - t_avg + params.c, params.floor)
    return gain(profile, cfg.d) / denom


def enumerate_feasible(
    cm: CostModel, memory_mb: float, n_layers: int
) -> list[Configuration]:
    """Minimal-a feasible configurations in ascending depth order.

    Walks d upward carrying the previous depth's minimal a as the new lower
    bound, breaks the inner scan at the first fit, and stops the walk at the
    first depth where no a <= d - 1 fits. Result may be empty.
    """
    out: list[Configuration] = []
    a_floor = 0
    for d in range(1, n_layers + 1):
        found = None
        for a in range(a_floor, d):
            if is_feasible(cm, Configuration(d, a), memory_mb):
                found = Configuration(d, a)
                break
        if found is None:
            break
        out.append(found)
        a_floor = found.a
    return out


def _filtered(
    feasible: list[Configuration],
    cm: CostModel,
    throughput: float,
    t_avg: float,
    params: RewardParams,
) -> list[Configuration]:
    """Apply the optional theta straggler pre-filter, never emptying the set."""
    if params.theta is None:
        return feasible
    kept = [
        cfg
        for cfg in feasible
        if max(estimate_latency(cm, cfg, throughput) - t_avg, 0.0) <= params.theta
    ]
    return kept if kept else feasible[:1]


def select_configs(
    statuses: list[DeviceStatus],
    cm: CostModel,
    profile: GainProfile,
    t_avg_prev: float,
    params: RewardParams,
) -> dict[int, Configuration]:
    """Adaptive per-device choice: argmax reward over the feasible list.

    Devices with an empty feasible set are omitted; raises SchedulingError
    when nothing can run at all. Ties prefer larger d, then smaller a.
    """
    if t_avg_prev <= 0:
        raise ValueError("t_avg_prev must be positive (seed round 1 explicitly)")
    chosen: dict[int, Configuration] = {}
    for status in statuses:
        feasible = enumerate_feasible(cm, status.memory_mb, profile.n_layers)
        feasible = _filtered(feasible, cm, status.throughput, t_avg_prev, params)
        best = None
        best_key = None
        for cfg in feasible:
            r = reward(profile, cm, cfg, status.throughput, t_avg_prev, params)
            key = (r, cfg.d, -cfg.a)
            if best_key is None or key > best_key:
                best_key = key
                best = cfg
        if best is not None:
            chosen[status.device_id] = best
    if not chosen:
        raise SchedulingError("no device has a feasible configuration")
    return chosen


def bootstrap_t_avg(statuses: list[DeviceStatus], cm: CostModel, n_layers: int) -> float:
    """Round-1 seed: median minimal-config latency across schedulable devices."""
    lats = []
    for status in statuses:
        feasible = enumerate_feasible(cm, status.memory_mb, n_layers)
        if feasible:
            lats.append(estimate_latency(cm, feasible[0], status.throughput))
    if not lats:
        raise SchedulingError("no device has a feasible configuration")
    return float(median(lats))


def update_gain_profile(
    profile: GainProfile,
    prev_global: dict[int, model_mod.LayerAdapters],
    new_global: dict[int, model_mod.LayerAdapters],
    updated_layers: set[int],
) -> GainProfile:
    """Refresh g_l from aggregated movement; stale layers keep their value.

    g_l = ||delta_l||_F for layers that received at least one contribution
    this round (`updated_layers`); other layers retain the previous estimate
    rather than decaying toward zero.
    """
    g = profile.g.copy()
    for idx in sorted(updated_layers):
        prev = prev_global[idx]
        new = new_global[idx]
        sq = 0.0
        for name in model_mod.ADAPTER_FIELDS:
            diff = getattr(new, name) - getattr(prev, name)
            sq += float(np.sum(diff * diff))
        g[idx] = float(np.sqrt(sq))
    return GainProfile(g)


# ---------------------------------------------------------------------------
# policies


@dataclass
class SchedulingContext:
    """Everything a policy may look at for one round (immutable snapshots)."""

    statuses: list[DeviceStatus]
    cost_model: CostModel
    n_layers: int
    round_index: int
    gain_profile: GainProfile | None
    t_avg_prev: float | None
    reward_params: RewardParams
    rng: RngStream
    model_rank: int = 1
    fixed_depth: int | None = None


POLICY_NAMES = ("acs", "max_depth", "uniform_fixed", "from_input", "random_subset", "rank_scaled")


def assign_acs(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    profile = ctx.gain_profile
    t_avg = ctx.t_avg_prev
    if profile is None:
        profile = GainProfile.ones(ctx.n_layers)
    if t_avg is None or t_avg <= 0:
        t_avg = bootstrap_t_avg(ctx.statuses, ctx.cost_model, ctx.n_layers)
    configs = select_configs(
        ctx.statuses, ctx.cost_model, profile, t_avg, ctx.reward_params
    )
    return {
        dev: assignment_from_configuration(cfg, ctx.n_layers)
        for dev, cfg in configs.items()
    }


def _max_depths(ctx: SchedulingContext) -> dict[int, int]:
    out = {}
    for status in ctx.statuses:
        d = max_feasible_depth(ctx.cost_model, status.memory_mb, ctx.n_layers)
        if d >= 1:
            out[status.device_id] = d
    if not out:
        raise SchedulingError("no device has a feasible configuration")
    return out


def assign_max_depth(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """Greedy depth: deepest unquantized suffix that fits, per device."""
    return {
        dev: assignment_from_configuration(Configuration(d, 0), ctx.n_layers)
        for dev, d in _max_depths(ctx).items()
    }


def assign_uniform_fixed(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """One fixed depth everywhere, clamped down to what each device fits."""
    if ctx.fixed_depth is None or not 1 <= ctx.fixed_depth <= ctx.n_layers:
        raise ValueError("uniform_fixed needs fixed_depth in 1..L")
    out = {}
    for dev, dmax in _max_depths(ctx).items():
        d = min(ctx.fixed_depth, dmax)
        out[dev] = assignment_from_configuration(Configuration(d, 0), ctx.n_layers)
    return out


def assign_from_input(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """Sub-model from the input side: first k layers active and trainable."""
    out = {}
    for dev, k in _max_depths(ctx).items():
        layers = tuple(range(k))
        out[dev] = LayerAssignment(active=layers, trainable=layers, quantized=())
    return out


def assign_random_subset(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """Sub-model of k uniformly chosen layers, all trainable."""
    out = {}
    for dev, k in sorted(_max_depths(ctx).items()):
        picked = tuple(sorted(ctx.rng.sample_without_replacement(ctx.n_layers, k)))
        out[dev] = LayerAssignment(active=picked, trainable=picked, quantized=())
    return out


def assign_rank_scaled(ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """Full feasible depth with adapter rank capped in proportion to it."""
    out = {}
    for dev, d in _max_depths(ctx).items():
        cap = max(1, round(ctx.model_rank * d / ctx.n_layers))
        asg = assignment_from_configuration(Configuration(d, 0), ctx.n_layers)
        out[dev] = LayerAssignment(
            active=asg.active,
            trainable=asg.trainable,
            quantized=asg.quantized,
            rank_cap=cap,
        )
    return out


_POLICY_FNS = {
    "acs": assign_acs,
    "max_depth": assign_max_depth,
    "uniform_fixed": assign_uniform_fixed,
    "from_input": assign_from_input,
    "random_subset": assign_random_subset,
    "rank_scaled": assign_rank_scaled,
}


def assign(policy: str, ctx: SchedulingContext) -> dict[int, LayerAssignment]:
    """Dispatch a policy by name."""
    if policy not in _POLICY_FNS:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICY_NAMES}")
    return _POLICY_FNS[policy](ctx)

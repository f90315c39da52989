"""Federated round loop: local training, layer-wise aggregation, evaluation.

Each round: device resources fluctuate, a policy assigns per-device layer
sets, every scheduled device trains its adapters locally from the current
global state, and the server averages updates layer by layer,

    new_l = (1 / n_l) * sum over the n_l devices that trained layer l,

leaving untouched layers at their previous value (stale retention applies to
the gain profile too). The simulated round time is the slowest device's
latency; waiting time is the mean idle gap to that maximum. Communication
time is not modeled. Everything is sequential and deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedquad import model as model_mod
from fedquad import scheduler as sched_mod
from fedquad.model import (
    AdamWState,
    LayerAdapters,
    LayeredModel,
    LayerAssignment,
    adamw_step,
    apply_assignment,
    backward,
    cross_entropy,
    export_head,
    export_updates,
    forward,
    import_global,
    sgd_step,
)
from fedquad.resource import (
    Configuration,
    CostModel,
    DeviceProfile,
    estimate_latency,
    status_of,
    waiting_time,
)
from fedquad.rng import RngStream
from fedquad.scheduler import GainProfile, RewardParams, SchedulingContext
from fedquad.workload import Dataset


@dataclass
class TrainParams:
    lr: float = 1e-3
    batch_size: int = 32
    local_epochs: int = 1
    optimizer: str = "adamw"  # or "sgd"
    weight_decay: float = 0.01
    cosine_lr: bool = True
    total_rounds: int = 50  # cosine horizon

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.lr <= 0 or self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("bad training parameters")


LR_FLOOR_FRACTION = 0.1


def cosine_lr(base_lr: float, round_index: int, total_rounds: int) -> float:
    """Cosine decay from base_lr toward a 10% floor over the round budget.

    The floor keeps late-round update magnitudes (and with them the server's
    gain estimates) from collapsing to zero, which would make any layer whose
    gain estimate is a round or two old look arbitrarily attractive.
    """
    if total_rounds <= 1:
        return base_lr
    frac = (round_index - 1) / (total_rounds - 1)
    frac = min(max(frac, 0.0), 1.0)
    shape = 0.5 * (1.0 + math.cos(math.pi * frac))
    return base_lr * (LR_FLOOR_FRACTION + (1.0 - LR_FLOOR_FRACTION) * shape)


@dataclass
class SimDevice:
    """A simulated participant: profile, data shard, and private streams."""

    profile: DeviceProfile
    model: LayeredModel
    data: Dataset
    train_rng: RngStream  # batch shuffling
    quant_rng: RngStream  # stochastic rounding

    @property
    def device_id(self) -> int:
        return self.profile.device_id


@dataclass
class DeviceReport:
    """What one device sends back after local training."""

    device_id: int
    assignment: LayerAssignment
    adapters: dict[int, LayerAdapters]
    head: tuple[np.ndarray, np.ndarray]
    latency_s: float
    peak_bytes: int
    n_samples: int
    mean_loss: float


@dataclass
class ServerState:
    global_adapters: dict[int, LayerAdapters]
    global_head: tuple[np.ndarray, np.ndarray]
    gain_profile: GainProfile
    eval_model: LayeredModel
    round_index: int = 0
    t_avg_prev: float | None = None
    clock_s: float = 0.0


@dataclass
class DeviceRoundStats:
    device_id: int
    device_class: str
    d: int
    a: int
    latency_s: float
    memory_mb: float
    peak_mb: float
    mean_loss: float


@dataclass
class RoundRecord:
    round_index: int
    t_round_s: float
    waiting_s: float
    t_avg_s: float
    clock_s: float
    accuracy: float
    mean_loss: float
    devices: list[DeviceRoundStats]
    oom_device_ids: list[int] = field(default_factory=list)


def init_server(model: LayeredModel) -> ServerState:
    """Start global state from a freshly initialized model."""
    apply_assignment(
        model,
        LayerAssignment(
            active=tuple(range(model.depth)),
            trainable=tuple(range(model.depth)),
            quantized=(),
        ),
    )
    return ServerState(
        global_adapters=export_updates(model),
        global_head=export_head(model),
        gain_profile=GainProfile.ones(model.depth),
        eval_model=model,
    )


def _batches(n: int, batch_size: int, order: list[int]):
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def local_train(
    device: SimDevice,
    assignment: LayerAssignment,
    params: TrainParams,
    round_index: int,
    cm: CostModel,
) -> DeviceReport:
    """One device's local pass; returns its update report."""
    mdl = device.model
    apply_assignment(mdl, assignment)
    lr = cosine_lr(params.lr, round_index, params.total_rounds) if params.cosine_lr else params.lr
    opt = AdamWState(weight_decay=params.weight_decay) if params.optimizer == "adamw" else None
    peak_bytes = 0
    losses = []
    n = len(device.data)
    for _ in range(params.local_epochs):
        order = device.train_rng.permutation(n)
        for idx in _batches(n, params.batch_size, order):
            xb = device.data.x[idx]
            yb = device.data.y[idx]
            logits, store = forward(mdl, xb, rng=device.quant_rng)
            loss, grads = backward(mdl, store, logits, yb)
            if params.optimizer == "adamw":
                adamw_step(mdl, opt, grads, lr)
            else:
                sgd_step(mdl, grads, lr)
            peak_bytes = max(peak_bytes, store.measured_bytes)
            losses.append(loss)
    latency = estimate_latency(
        cm, Configuration(assignment.d, assignment.a), device.profile.throughput
    )
    return DeviceReport(
        device_id=device.device_id,
        assignment=assignment,
        adapters=export_updates(mdl),
        head=export_head(mdl),
        latency_s=latency,
        peak_bytes=peak_bytes,
        n_samples=n,
        mean_loss=float(np.mean(losses)),
    )


def aggregate_layerwise(
    reports: list[DeviceReport],
    prev_global: dict[int, LayerAdapters],
    weighting: str = "uniform",
):
    """Per-layer mean of contributed adapters; returns (new_global, counts).

    Layers nobody trained keep their previous value. weighting="samples"
    weights each contribution by the device's sample count instead of 1.
    """
    if weighting not in ("uniform", "samples"):
        raise ValueError("weighting must be 'uniform' or 'samples'")
    new_global: dict[int, LayerAdapters] = {}
    counts: dict[int, int] = {}
    for idx in sorted(prev_global.keys()):
        contribs = [r for r in reports if idx in r.adapters]
        counts[idx] = len(contribs)
        if not contribs:
            new_global[idx] = prev_global[idx].copy()
            continue
        ref = contribs[0].adapters[idx]
        merged = {}
        for name in model_mod.ADAPTER_FIELDS:
            ref_shape = getattr(ref, name).shape
            acc = np.zeros(ref_shape, dtype=np.float64)
            wsum = 0.0
            for r in contribs:
                mat = getattr(r.adapters[idx], name)
                if mat.shape != ref_shape:
                    raise ValueError(
                        f"layer {idx} update shape mismatch: {mat.shape} vs {ref_shape}"
                    )
                w = float(r.n_samples) if weighting == "samples" else 1.0
                acc += w * mat
                wsum += w
            merged[name] = acc / wsum
        new_global[idx] = LayerAdapters(**merged)
    return new_global, counts


def aggregate_heads(reports: list[DeviceReport], weighting: str = "uniform"):
    ws, bs, weights = [], [], []
    for r in reports:
        ws.append(r.head[0])
        bs.append(r.head[1])
        weights.append(float(r.n_samples) if weighting == "samples" else 1.0)
    wsum = sum(weights)
    new_w = sum(w * m for w, m in zip(weights, ws)) / wsum
    new_b = sum(w * m for w, m in zip(weights, bs)) / wsum
    return new_w, new_b


def evaluate_global(server: ServerState, testset: Dataset, chunk: int = 256) -> float:
    """Top-1 accuracy of the full-depth global model."""
    mdl = server.eval_model
    apply_assignment(
        mdl,
        LayerAssignment(
            active=tuple(range(mdl.depth)),
            trainable=tuple(range(mdl.depth)),
            quantized=(),
        ),
    )
    import_global(mdl, server.global_adapters, server.global_head)
    hits = 0
    for lo in range(0, len(testset), chunk):
        xb = testset.x[lo : lo + chunk]
        yb = testset.y[lo : lo + chunk]
        logits, _ = forward(mdl, xb, collect=False)
        hits += int(np.sum(np.argmax(logits, axis=1) == yb))
    return hits / len(testset)


def run_round(
    server: ServerState,
    devices: list[SimDevice],
    policy: str,
    cm: CostModel,
    params: TrainParams,
    testset: Dataset,
    reward_params: RewardParams | None = None,
    policy_rng: RngStream | None = None,
    fixed_depth: int | None = None,
    weighting: str = "uniform",
    model_rank: int | None = None,
) -> RoundRecord:
    """Advance the federation by one synchronized round."""
    h = server.round_index + 1
    devices = sorted(devices, key=lambda dv: dv.device_id)
    for dev in devices:
        dev.profile.fluctuate(h)
    statuses = [status_of(dev.profile) for dev in devices]
    ctx = SchedulingContext(
        statuses=statuses,
        cost_model=cm,
        n_layers=server.eval_model.depth,
        round_index=h,
        gain_profile=server.gain_profile,
        t_avg_prev=server.t_avg_prev,
        reward_params=reward_params if reward_params is not None else RewardParams(),
        rng=policy_rng if policy_rng is not None else RngStream(0),
        model_rank=model_rank
        if model_rank is not None
        else server.eval_model.layers[0].adapter_in.rank,
        fixed_depth=fixed_depth,
    )
    assignments = sched_mod.assign(policy, ctx)

    budget = {s.device_id: s.memory_mb for s in statuses}
    reports: list[DeviceReport] = []
    for dev in devices:
        if dev.device_id not in assignments:
            continue
        import_global(dev.model, server.global_adapters, server.global_head)
        reports.append(
            local_train(dev, assignments[dev.device_id], params, h, cm)
        )
    if not reports:
        raise sched_mod.SchedulingError("no device trained this round")

    new_global, counts = aggregate_layerwise(reports, server.global_adapters, weighting)
    new_head = aggregate_heads(reports, weighting)
    updated = {idx for idx, nl in counts.items() if nl >= 1}
    server.gain_profile = sched_mod.update_gain_profile(
        server.gain_profile, server.global_adapters, new_global, updated
    )
    server.global_adapters = new_global
    server.global_head = new_head

    latencies = [r.latency_s for r in reports]
    t_round = max(latencies)
    waiting = waiting_time(latencies)
    t_avg = float(np.mean(latencies))
    server.t_avg_prev = t_avg
    server.round_index = h
    server.clock_s += t_round

    mb = float(2**20)
    oom = [
        r.device_id for r in reports if r.peak_bytes / mb > budget[r.device_id] + 1e-9
    ]
    acc = evaluate_global(server, testset)
    class_of = {dev.device_id: dev.profile.device_class for dev in devices}
    stats = [
        DeviceRoundStats(
            device_id=r.device_id,
            device_class=class_of[r.device_id],
            d=r.assignment.d,
            a=r.assignment.a,
            latency_s=r.latency_s,
            memory_mb=budget[r.device_id],
            peak_mb=r.peak_bytes / mb,
            mean_loss=r.mean_loss,
        )
        for r in reports
    ]
    return RoundRecord(
        round_index=h,
        t_round_s=t_round,
        waiting_s=waiting,
        t_avg_s=t_avg,
        clock_s=server.clock_s,
        accuracy=acc,
        mean_loss=float(np.mean([r.mean_loss for r in reports])),
        devices=stats,
        oom_device_ids=oom,
    )

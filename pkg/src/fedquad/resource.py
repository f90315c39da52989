"""Device resource model: training configurations, memory/latency laws,
device profiles with per-round fluctuation, and waiting time.

A configuration (d, a) trains LoRA adapters on the top d of L layers and
quantizes saved activations on the bottom a of those trainable layers
(a <= d - 1: the head-adjacent layer always stays full precision). Peak
training memory is affine in the pair:

    mem(d, a) = m_f + m_o * d - m_q * a        (MB)

and per-round latency is affine work over device throughput:

    t(d, a) = (c_base + c_d * d + c_a * a) / q  (seconds)

Device memory budgets fluctuate between rounds by resampling an integer
depth-equivalent level within the device class's range; throughput switches
to a random mode-table entry every 10 rounds. Both draws come from the
profile's own stream, so trajectories replay exactly per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from fedquad.rng import RngStream


@dataclass(frozen=True)
class Configuration:
    """A (depth, quantized-count) pair; a is capped one below d."""

    d: int
    a: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.a < 0:
            raise ValueError(f"a must be >= 0, got {self.a}")
        if self.a > self.d - 1:
            raise ValueError(f"a must be <= d - 1, got (d={self.d}, a={self.a})")


@dataclass(frozen=True)
class CostModel:
    """Affine memory/latency coefficients shared by all devices."""

    m_f: float  # fixed MB: always-resident activations
    m_o: float  # MB per trainable layer
    m_q: float  # MB saved per quantized layer
    c_base: float  # work units per batch, depth-independent
    c_d: float  # work units per trainable layer
    c_a: float  # extra work units per quantized layer

    def __post_init__(self):
        if min(self.m_f, self.m_o, self.m_q, self.c_base, self.c_d, self.c_a) < 0:
            raise ValueError("cost coefficients must be non-negative")
        if not self.m_q < self.m_o:
            raise ValueError("quantization saving must stay below the layer cost")


def estimate_memory(cm: CostModel, cfg: Configuration) -> float:
    """Peak training memory in MB for a configuration."""
    return cm.m_f + cm.m_o * cfg.d - cm.m_q * cfg.a


def is_feasible(cm: CostModel, cfg: Configuration, memory_mb: float) -> bool:
    """Whether the configuration fits the device's current budget."""
    return estimate_memory(cm, cfg) <= memory_mb


def estimate_latency(cm: CostModel, cfg: Configuration, throughput: float) -> float:
    """Per-round completion time in seconds at the device's throughput."""
    if throughput <= 0:
        raise ValueError(f"throughput must be positive, got {throughput}")
    return (cm.c_base + cm.c_d * cfg.d + cm.c_a * cfg.a) / throughput


def waiting_time(latencies: list[float]) -> float:
    """Mean idle time: average of (max latency - each latency)."""
    if not latencies:
        raise ValueError("waiting_time needs at least one latency")
    t_max = max(latencies)
    return sum(t_max - t for t in latencies) / len(latencies)


@dataclass
class DeviceProfile:
    """One simulated device's resource state and fluctuation process."""

    device_id: int
    device_class: str
    memory_levels: list[float]  # MB budgets for integer depth-equivalents
    mode_table: list[float]  # throughput modes (work units / second)
    rng: RngStream
    memory_mb: float = field(init=False)
    throughput: float = field(init=False)

    def __post_init__(self):
        if not self.memory_levels:
            raise ValueError("memory_levels must be non-empty")
        if not self.mode_table or min(self.mode_table) <= 0:
            raise ValueError("mode_table must be non-empty and positive")
        self.memory_mb = self.memory_levels[self.rng.randint(len(self.memory_levels))]
        self.throughput = self.mode_table[self.rng.randint(len(self.mode_table))]

    @property
    def memory_range(self) -> tuple[float, float]:
        return (min(self.memory_levels), max(self.memory_levels))

    def fluctuate(self, round_index: int) -> None:
        """Advance to round `round_index`: resample M; switch q every 10 rounds."""
        if round_index < 1:
            raise ValueError("round_index starts at 1")
        self.memory_mb = self.memory_levels[self.rng.randint(len(self.memory_levels))]
        if round_index % 10 == 0:
            self.throughput = self.mode_table[self.rng.randint(len(self.mode_table))]


@dataclass(frozen=True)
class DeviceStatus:
    """Immutable per-round snapshot the scheduler sees."""

    device_id: int
    memory_mb: float
    throughput: float


def status_of(profile: DeviceProfile) -> DeviceStatus:
    return DeviceStatus(profile.device_id, profile.memory_mb, profile.throughput)


def max_feasible_depth(cm: CostModel, memory_mb: float, n_layers: int) -> int:
    """Largest d with mem(d, 0) <= budget; 0 if even d=1 does not fit."""
    for d in range(n_layers, 0, -1):
        if is_feasible(cm, Configuration(d, 0), memory_mb):
            return d
    return 0

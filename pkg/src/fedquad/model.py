"""Frozen residual MLP stack with trainable LoRA adapters and a task head.

Each of the L blocks computes, for batch x (N, h):

    u = x @ W_in  + s * (x @ A_in^T) @ B_in^T
    g = gelu(u)
    v = g @ W_out + s * (g @ A_out^T) @ B_out^T
    z = x + v
    y = layer_norm(z) * gain + bias

with W_in, W_out, gain, bias frozen and s = alpha / rank. Only the adapter
pairs of layers marked trainable, plus the linear classifier head, receive
gradients. The forward pass always computes in float64; quantization affects
only what the activation store *saves* for the backward pass (x, u, g, z per
trainable layer, plus full-precision norm stats and the head input), so
quantization error enters gradients but never the forward outputs.

Backward runs over the trainable suffix only and stops below it. Layers can
also be deactivated entirely (identity bypass) for sub-model baselines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from fedquad import tensor
from fedquad.quant import QuantSpec, QuantizedTensor, full_bytes, quantize
from fedquad.resource import Configuration
from fedquad.rng import RngStream

LN_EPS = 1e-5
ADAPTER_FIELDS = ("a_in", "b_in", "a_out", "b_out")


@dataclass
class LoraAdapter:
    """Low-rank pair: contribution = (alpha/rank) * (x @ a^T) @ b^T."""

    a: np.ndarray  # (rank, in_dim), uniform init
    b: np.ndarray  # (out_dim, rank), zero init
    rank: int
    alpha: float

    def __post_init__(self):
        in_dim = self.a.shape[1]
        out_dim = self.b.shape[0]
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError("adapter matrices disagree with rank")
        if self.rank > min(in_dim, out_dim) // 2:
            raise ValueError(
                f"rank {self.rank} too large for dims ({in_dim}, {out_dim})"
            )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class ModelLayer:
    w_in: np.ndarray  # (h, h), frozen
    w_out: np.ndarray  # (h, h), frozen
    adapter_in: LoraAdapter
    adapter_out: LoraAdapter
    gain: np.ndarray  # (h,), frozen
    bias: np.ndarray  # (h,), frozen
    trainable: bool = False
    quantize_acts: bool = False
    active: bool = True
    rank_cap: int | None = None


@dataclass
class LayeredModel:
    layers: list[ModelLayer]
    head_w: np.ndarray  # (h, classes)
    head_b: np.ndarray  # (1, classes)
    hidden: int
    classes: int
    quant_spec: QuantSpec = field(default_factory=QuantSpec)

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class LayerAssignment:
    """What a device trains this round: active/trainable/quantized layers.

    ``trainable`` must be a suffix of the active sequence (backward walks top
    down and stops below the last trainable layer), ``quantized`` a subset of
    trainable that excludes the topmost trainable layer. ``rank_cap`` masks
    adapter gradient rows/cols at and above the cap without touching values.
    """

    active: tuple[int, ...]
    trainable: tuple[int, ...]
    quantized: tuple[int, ...]
    rank_cap: int | None = None

    def __post_init__(self):
        if len(self.trainable) < 1:
            raise ValueError("at least one trainable layer is required")
        if list(self.active) != sorted(set(self.active)):
            raise ValueError("active layers must be sorted and unique")
        if not set(self.trainable) <= set(self.active):
            raise ValueError("trainable layers must be active")
        if not set(self.quantized) <= set(self.trainable):
            raise ValueError("quantized layers must be trainable")
        k = len(self.trainable)
        if list(self.trainable) != list(self.active[-k:]):
            raise ValueError("trainable layers must form a suffix of the active order")
        if self.quantized and max(self.quantized) == max(self.trainable):
            raise ValueError("the topmost trainable layer cannot be quantized")
        if self.rank_cap is not None and self.rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")

    @property
    def d(self) -> int:
        return len(self.trainable)

    @property
    def a(self) -> int:
        return len(self.quantized)


def assignment_from_configuration(cfg: Configuration, n_layers: int) -> LayerAssignment:
    """Suffix assignment: train the top d layers, quantize the bottom a of them."""
    if cfg.d > n_layers:
        raise ValueError(f"d={cfg.d} exceeds model depth {n_layers}")
    lo = n_layers - cfg.d
    return LayerAssignment(
        active=tuple(range(n_layers)),
        trainable=tuple(range(lo, n_layers)),
        quantized=tuple(range(lo, lo + cfg.a)),
    )


def apply_assignment(model: LayeredModel, asg: LayerAssignment) -> None:
    """Set the per-layer training flags (idempotent; clears previous state)."""
    if asg.active and max(asg.active) >= model.depth:
        raise ValueError("assignment refers to layers beyond model depth")
    active = set(asg.active)
    trainable = set(asg.trainable)
    quantized = set(asg.quantized)
    for idx, layer in enumerate(model.layers):
        layer.active = idx in active
        layer.trainable = idx in trainable
        layer.quantize_acts = idx in quantized
        layer.rank_cap = asg.rank_cap if idx in trainable else None


def apply_configuration(model: LayeredModel, cfg: Configuration) -> None:
    apply_assignment(model, assignment_from_configuration(cfg, model.depth))


def _normal_matrix(rng: RngStream, rows: int, cols: int, std: float) -> np.ndarray:
    vals = [rng.normal() * std for _ in range(rows * cols)]
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def _uniform_matrix(rng: RngStream, rows: int, cols: int, bound: float) -> np.ndarray:
    vals = [rng.uniform_in(-bound, bound) for _ in range(rows * cols)]
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def _fresh_adapter(rng: RngStream, dim: int, rank: int, alpha: float) -> LoraAdapter:
    bound = 1.0 / np.sqrt(dim)
    return LoraAdapter(
        a=_uniform_matrix(rng, rank, dim, bound),
        b=np.zeros((dim, rank), dtype=np.float64),
        rank=rank,
        alpha=alpha,
    )


def init_model(
    rng: RngStream,
    n_layers: int,
    hidden: int,
    classes: int,
    rank: int,
    alpha: float | None = None,
    base_scale: float = 2.6,
    depth_taper: float = 0.7,
    quant_spec: QuantSpec | None = None,
) -> LayeredModel:
    """Build a model with frozen random base weights and zero-effect adapters.

    Layer l's frozen weights get std base_scale * depth_taper^(L-1-l) /
    sqrt(hidden): the output-adjacent layer mixes (and damages) its input the
    most and the input-adjacent layer is nearly pass-through. Training the
    top-d suffix therefore repairs most of the recoverable signal first, so
    accuracy grows in d with diminishing marginal gain. depth_taper=1 gives
    a uniform stack.
    """
    if n_layers < 1 or hidden < 2 or classes < 2 or rank < 1:
        raise ValueError("bad model dimensions")
    if not 0 < depth_taper <= 1:
        raise ValueError("depth_taper must lie in (0, 1]")
    if alpha is None:
        alpha = 2.0 * rank
    layers = []
    for idx in range(n_layers):
        std = base_scale * depth_taper ** (n_layers - 1 - idx) / np.sqrt(hidden)
        layers.append(
            ModelLayer(
                w_in=_normal_matrix(rng, hidden, hidden, std),
                w_out=_normal_matrix(rng, hidden, hidden, std),
                adapter_in=_fresh_adapter(rng, hidden, rank, alpha),
                adapter_out=_fresh_adapter(rng, hidden, rank, alpha),
                gain=np.ones(hidden, dtype=np.float64),
                bias=np.zeros(hidden, dtype=np.float64),
            )
        )
    head_w = _normal_matrix(rng, hidden, classes, 0.02)
    head_b = np.zeros((1, classes), dtype=np.float64)
    return LayeredModel(
        layers=layers,
        head_w=head_w,
        head_b=head_b,
        hidden=hidden,
        classes=classes,
        quant_spec=quant_spec if quant_spec is not None else QuantSpec(),
    )


# ---------------------------------------------------------------------------
# activation store


@dataclass
class StoredActs:
    """Saved tensors for one trainable layer's backward pass."""

    x: np.ndarray | QuantizedTensor
    u: np.ndarray | QuantizedTensor
    g: np.ndarray | QuantizedTensor
    z: np.ndarray | QuantizedTensor
    mean: np.ndarray  # (N,), always full precision
    invstd: np.ndarray


def _slot_bytes(slot) -> int:
    if isinstance(slot, QuantizedTensor):
        return slot.stored_bytes
    return full_bytes(slot.shape)


def _entry_bytes(acts: StoredActs) -> int:
    total = 0
    for slot in (acts.x, acts.u, acts.g, acts.z):
        total += _slot_bytes(slot)
    total += full_bytes((acts.mean.shape[0], 1)) * 2
    return total


class ActivationStore:
    """Per-batch saved activations, with incremental byte accounting."""

    def __init__(self):
        self.entries: dict[int, StoredActs] = {}
        self.head_input: np.ndarray | None = None
        self.measured_bytes: int = 0

    def add(self, layer_idx: int, acts: StoredActs) -> None:
        if layer_idx in self.entries:
            raise ValueError(f"layer {layer_idx} stored twice")
        self.entries[layer_idx] = acts
        self.measured_bytes += _entry_bytes(acts)

    def set_head_input(self, x: np.ndarray) -> None:
        if self.head_input is not None:
            raise ValueError("head input stored twice")
        self.head_input = x
        self.measured_bytes += full_bytes(x.shape)

    def recount_bytes(self) -> int:
        """Recompute the total from scratch (invariant check helper)."""
        total = sum(_entry_bytes(a) for a in self.entries.values())
        if self.head_input is not None:
            total += full_bytes(self.head_input.shape)
        return total


def _fetch(slot) -> np.ndarray:
    if isinstance(slot, QuantizedTensor):
        return slot.dequantize()
    return slot


# ---------------------------------------------------------------------------
# forward / backward


def _lora_term(x: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    p = tensor.matmul(x, np.ascontiguousarray(adapter.a.T))
    return adapter.scale * tensor.matmul(p, np.ascontiguousarray(adapter.b.T))


def _layer_forward(layer: ModelLayer, x: np.ndarray):
    u = tensor.matmul(x, layer.w_in) + _lora_term(x, layer.adapter_in)
    g = tensor.gelu(u)
    v = tensor.matmul(g, layer.w_out) + _lora_term(g, layer.adapter_out)
    z = x + v
    y, mean, invstd = tensor.layer_norm(z, layer.gain, layer.bias, LN_EPS)
    return u, g, z, y, mean, invstd


def forward(
    model: LayeredModel,
    batch: np.ndarray,
    rng: RngStream | None = None,
    collect: bool = True,
):
    """Run the active stack; returns (logits, store) or (logits, None).

    With collect=True, each trainable layer's x/u/g/z land in the store
    (quantized when the layer is flagged, consuming rng for stochastic
    rounding); the head input is always saved in full.
    """
    x = tensor.as_matrix(batch, "batch")
    if x.shape[1] != model.hidden:
        raise tensor.ShapeError(
            f"batch width {x.shape[1]} != model hidden {model.hidden}"
        )
    store = ActivationStore() if collect else None
    spec = model.quant_spec
    for idx, layer in enumerate(model.layers):
        if not layer.active:
            continue
        u, g, z, y, mean, invstd = _layer_forward(layer, x)
        if collect and layer.trainable:

            def keep(mat):
                if layer.quantize_acts:
                    return quantize(mat, spec, rng)
                return mat

            store.add(idx, StoredActs(keep(x), keep(u), keep(g), keep(z), mean, invstd))
        x = y
    if collect:
        store.set_head_input(x)
    logits = tensor.matmul(x, model.head_w) + model.head_b
    return logits, store


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns (loss, dlogits)."""
    n = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise tensor.ShapeError(f"labels shape {labels.shape} != ({n},)")
    zmax = np.max(logits, axis=1, keepdims=True)
    zs = logits - zmax
    ez = np.exp(zs)
    se = np.sum(ez, axis=1, keepdims=True)
    logp = zs - np.log(se)
    loss = float(np.mean(-logp[np.arange(n), labels]))
    probs = ez / se
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    dlogits = (probs - onehot) / n
    return loss, dlogits


@dataclass
class LayerGrads:
    a_in: np.ndarray
    b_in: np.ndarray
    a_out: np.ndarray
    b_out: np.ndarray


@dataclass
class LoraGradients:
    layers: dict[int, LayerGrads]
    head_w: np.ndarray
    head_b: np.ndarray


def _mask_rank(grads: LayerGrads, cap: int | None) -> LayerGrads:
    if cap is None:
        return grads
    for name in ("a_in", "a_out"):
        getattr(grads, name)[cap:, :] = 0.0
    for name in ("b_in", "b_out"):
        getattr(grads, name)[:, cap:] = 0.0
    return grads


def _layer_backward(layer: ModelLayer, acts: StoredActs, dy: np.ndarray):
    """Gradient through one block from saved (possibly dequantized) tensors."""
    x = _fetch(acts.x)
    u = _fetch(acts.u)
    g = _fetch(acts.g)
    z = _fetch(acts.z)
    s_in = layer.adapter_in.scale
    s_out = layer.adapter_out.scale

    dz, _, _ = tensor.layer_norm_backward(dy, z, layer.gain, acts.mean, acts.invstd)
    dv = dz

    p_out = tensor.matmul(g, np.ascontiguousarray(layer.adapter_out.a.T))
    db_out = s_out * tensor.matmul(np.ascontiguousarray(dv.T), p_out)
    dp_out = tensor.matmul(dv, layer.adapter_out.b)
    da_out = s_out * tensor.matmul(np.ascontiguousarray(dp_out.T), g)
    dg = tensor.matmul(dv, np.ascontiguousarray(layer.w_out.T)) + s_out * tensor.matmul(
        dp_out, layer.adapter_out.a
    )

    du = tensor.gelu_backward(u, dg)

    p_in = tensor.matmul(x, np.ascontiguousarray(layer.adapter_in.a.T))
    db_in = s_in * tensor.matmul(np.ascontiguousarray(du.T), p_in)
    dp_in = tensor.matmul(du, layer.adapter_in.b)
    da_in = s_in * tensor.matmul(np.ascontiguousarray(dp_in.T), x)
    dx = (
        tensor.matmul(du, np.ascontiguousarray(layer.w_in.T))
        + s_in * tensor.matmul(dp_in, layer.adapter_in.a)
        + dz
    )
    grads = LayerGrads(a_in=da_in, b_in=db_in, a_out=da_out, b_out=db_out)
    return dx, _mask_rank(grads, layer.rank_cap)


def backward(
    model: LayeredModel,
    store: ActivationStore,
    logits: np.ndarray,
    labels: np.ndarray,
):
    """Loss + gradients for head and all trainable-layer adapters."""
    if store.head_input is None:
        raise ValueError("store has no head input; run forward with collect=True")
    loss, dlogits = cross_entropy(logits, labels)
    head_w = tensor.matmul(np.ascontiguousarray(store.head_input.T), dlogits)
    head_b = np.sum(dlogits, axis=0, keepdims=True)
    dcur = tensor.matmul(dlogits, np.ascontiguousarray(model.head_w.T))

    per_layer: dict[int, LayerGrads] = {}
    trainable = sorted(store.entries.keys())
    for idx in reversed(trainable):
        layer = model.layers[idx]
        dcur, grads = _layer_backward(layer, store.entries[idx], dcur)
        per_layer[idx] = grads
    return loss, LoraGradients(layers=per_layer, head_w=head_w, head_b=head_b)


# ---------------------------------------------------------------------------
# parameter updates


def _trainable_param_pairs(model: LayeredModel, grads: LoraGradients):
    """Yields (key, param_array, grad_array) for every updated tensor."""
    for idx in sorted(grads.layers.keys()):
        layer = model.layers[idx]
        g = grads.layers[idx]
        yield (idx, "a_in"), layer.adapter_in.a, g.a_in
        yield (idx, "b_in"), layer.adapter_in.b, g.b_in
        yield (idx, "a_out"), layer.adapter_out.a, g.a_out
        yield (idx, "b_out"), layer.adapter_out.b, g.b_out
    yield ("head", "w"), model.head_w, grads.head_w
    yield ("head", "b"), model.head_b, grads.head_b


def sgd_step(model: LayeredModel, grads: LoraGradients, lr: float) -> None:
    for _, param, grad in _trainable_param_pairs(model, grads):
        param -= lr * grad


class AdamWState:
    """Per-parameter first/second moments with a shared step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}


def adamw_step(
    model: LayeredModel, state: AdamWState, grads: LoraGradients, lr: float
) -> None:
    """Decoupled-weight-decay Adam update on every trainable tensor."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, param, grad in _trainable_param_pairs(model, grads):
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        else:
            v = state.v[key]
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * (grad * grad)
        state.m[key] = m
        state.v[key] = v
        mhat = m / bc1
        vhat = v / bc2
        param -= lr * state.weight_decay * param
        param -= lr * (mhat / (np.sqrt(vhat) + state.eps))


# ---------------------------------------------------------------------------
# adapter exchange


@dataclass
class LayerAdapters:
    """The four exchanged matrices of one layer's adapter pair."""

    a_in: np.ndarray
    b_in: np.ndarray
    a_out: np.ndarray
    b_out: np.ndarray

    def copy(self) -> "LayerAdapters":
        return LayerAdapters(*(getattr(self, f).copy() for f in ADAPTER_FIELDS))


def export_updates(model: LayeredModel) -> dict[int, LayerAdapters]:
    """Adapter values of the currently trainable layers (copies)."""
    out = {}
    for idx, layer in enumerate(model.layers):
        if layer.trainable:
            out[idx] = LayerAdapters(
                a_in=layer.adapter_in.a.copy(),
                b_in=layer.adapter_in.b.copy(),
                a_out=layer.adapter_out.a.copy(),
                b_out=layer.adapter_out.b.copy(),
            )
    return out


def export_head(model: LayeredModel) -> tuple[np.ndarray, np.ndarray]:
    return model.head_w.copy(), model.head_b.copy()


def import_global(
    model: LayeredModel,
    adapters: dict[int, LayerAdapters],
    head: tuple[np.ndarray, np.ndarray] | None = None,
) -> None:
    """Overwrite every layer's adapters (and optionally the head) in place."""
    if sorted(adapters.keys()) != list(range(model.depth)):
        raise ValueError("global adapter set must cover every layer exactly once")
    for idx, layer in enumerate(model.layers):
        vals = adapters[idx]
        if vals.a_in.shape != layer.adapter_in.a.shape:
            raise ValueError(f"layer {idx} adapter shape mismatch")
        layer.adapter_in.a[...] = vals.a_in
        layer.adapter_in.b[...] = vals.b_in
        layer.adapter_out.a[...] = vals.a_out
        layer.adapter_out.b[...] = vals.b_out
    if head is not None:
        w, b = head
        if w.shape != model.head_w.shape or b.shape != model.head_b.shape:
            raise ValueError("head shape mismatch")
        model.head_w[...] = w
        model.head_b[...] = b


def clone_model(model: LayeredModel) -> LayeredModel:
    """Independent copy (fresh arrays for base, adapters, head)."""
    layers = []
    for layer in model.layers:
        layers.append(
            ModelLayer(
                w_in=layer.w_in.copy(),
                w_out=layer.w_out.copy(),
                adapter_in=LoraAdapter(
                    layer.adapter_in.a.copy(),
                    layer.adapter_in.b.copy(),
                    layer.adapter_in.rank,
                    layer.adapter_in.alpha,
                ),
                adapter_out=LoraAdapter(
                    layer.adapter_out.a.copy(),
                    layer.adapter_out.b.copy(),
                    layer.adapter_out.rank,
                    layer.adapter_out.alpha,
                ),
                gain=layer.gain.copy(),
                bias=layer.bias.copy(),
            )
        )
    return LayeredModel(
        layers=layers,
        head_w=model.head_w.copy(),
        head_b=model.head_b.copy(),
        hidden=model.hidden,
        classes=model.classes,
        quant_spec=model.quant_spec,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _mat_to_json(m: np.ndarray) -> dict:
    return {"shape": list(m.shape), "data": np.asarray(m, dtype=np.float64).ravel().tolist()}


def _mat_from_json(obj: dict) -> np.ndarray:
    arr = np.array(obj["data"], dtype=np.float64)
    return arr.reshape(obj["shape"])


def save_model(model: LayeredModel, path) -> None:
    """Write a JSON checkpoint (row-major flat data with shape headers)."""
    doc = {
        "format": "fedquad-model-v1",
        "hidden": model.hidden,
        "classes": model.classes,
        "quant_block": model.quant_spec.block,
        "quant_rounding": model.quant_spec.rounding,
        "head_w": _mat_to_json(model.head_w),
        "head_b": _mat_to_json(model.head_b),
        "layers": [],
    }
    for layer in model.layers:
        doc["layers"].append(
            {
                "w_in": _mat_to_json(layer.w_in),
                "w_out": _mat_to_json(layer.w_out),
                "gain": _mat_to_json(layer.gain.reshape(1, -1)),
                "bias": _mat_to_json(layer.bias.reshape(1, -1)),
                "rank": layer.adapter_in.rank,
                "alpha": layer.adapter_in.alpha,
                "a_in": _mat_to_json(layer.adapter_in.a),
                "b_in": _mat_to_json(layer.adapter_in.b),
                "a_out": _mat_to_json(layer.adapter_out.a),
                "b_out": _mat_to_json(layer.adapter_out.b),
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> LayeredModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "fedquad-model-v1":
        raise ValueError("unrecognized checkpoint format")
    layers = []
    for spec in doc["layers"]:
        rank = spec["rank"]
        alpha = spec["alpha"]
        layers.append(
            ModelLayer(
                w_in=_mat_from_json(spec["w_in"]),
                w_out=_mat_from_json(spec["w_out"]),
                adapter_in=LoraAdapter(
                    _mat_from_json(spec["a_in"]), _mat_from_json(spec["b_in"]), rank, alpha
                ),
                adapter_out=LoraAdapter(
                    _mat_from_json(spec["a_out"]), _mat_from_json(spec["b_out"]), rank, alpha
                ),
                gain=_mat_from_json(spec["gain"]).ravel(),
                bias=_mat_from_json(spec["bias"]).ravel(),
            )
        )
    return LayeredModel(
        layers=layers,
        head_w=_mat_from_json(doc["head_w"]),
        head_b=_mat_from_json(doc["head_b"]),
        hidden=doc["hidden"],
        classes=doc["classes"],
        quant_spec=QuantSpec(block=doc["quant_block"], rounding=doc["quant_rounding"]),
    )

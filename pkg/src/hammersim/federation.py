"""Federated learning core: model state, sparse updates, aggregation.

The server holds a flat parameter vector theta.  Each round, every client
runs local gradient descent on its (possibly perturbed) shard, keeps the
top-k entries of its delta by magnitude, and sends them up.  The server
accumulates contributions per index, averages, and writes the result back
into theta.  Aggregation also emits the logical memory-access script that
the server-side buffer layout turns into a physical access trace.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from . import channel as channel_mod
from . import metrics
from .seeding import generator

__all__ = [
    "LayerSpec",
    "ModelSpec",
    "make_mlp_spec",
    "ParameterStore",
    "SparseUpdate",
    "RoundRecord",
    "ScriptOp",
    "UpdateMessage",
    "AccessScript",
    "FederationState",
    "init_federation",
    "local_train",
    "sparsify_topk",
    "aggregate",
    "run_round",
    "RoundResult",
    "write_round_records",
    "read_round_records",
]

VALID_PRECISIONS = (4, 8, 32)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    element_count: int
    precision_bits: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("layer name must be nonempty")
        if self.element_count <= 0:
            raise ValueError(f"layer {self.name}: element_count must be positive")
        if self.precision_bits not in VALID_PRECISIONS:
            raise ValueError(f"layer {self.name}: precision {self.precision_bits} not in {VALID_PRECISIONS}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list; the flat parameter space concatenates them."""

    layers: tuple[LayerSpec, ...]
    tensor_count: int | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("model needs at least one layer")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    @cached_property
    def total_params(self) -> int:
        return sum(l.element_count for l in self.layers)

    @cached_property
    def layer_offsets(self) -> tuple[int, ...]:
        offsets = [0]
        for l in self.layers:
            offsets.append(offsets[-1] + l.element_count)
        return tuple(offsets)

    @property
    def uniform_precision_bits(self) -> int:
        bits = {l.precision_bits for l in self.layers}
        if len(bits) != 1:
            raise ValueError(f"mixed layer precisions {sorted(bits)}")
        return bits.pop()

    def layer_of(self, index: int) -> int:
        """Layer number containing flat index."""
        if not 0 <= index < self.total_params:
            raise ValueError(f"index {index} out of range")
        return bisect.bisect_right(self.layer_offsets, index) - 1


def make_mlp_spec(in_dim: int, hidden_dim: int, out_dim: int) -> ModelSpec:
    """Two-layer perceptron laid out as w1, b1, w2, b2 (row-major w's)."""
    if min(in_dim, hidden_dim, out_dim) <= 0:
        raise ValueError("all dimensions must be positive")
    return ModelSpec(
        layers=(
            LayerSpec("w1", in_dim * hidden_dim, 32),
            LayerSpec("b1", hidden_dim, 32),
            LayerSpec("w2", hidden_dim * out_dim, 32),
            LayerSpec("b2", out_dim, 32),
        ),
        tensor_count=4,
    )


class ParameterStore:
    """Flat float64 parameter vector bound to a ModelSpec."""

    def __init__(self, spec: ModelSpec, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (spec.total_params,):
            raise ValueError(f"values shape {values.shape} != ({spec.total_params},)")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite parameter values")
        self.spec = spec
        self.values = values

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.spec, self.values.copy())

    def layer_view(self, name: str) -> np.ndarray:
        offsets = self.spec.layer_offsets
        for i, l in enumerate(self.spec.layers):
            if l.name == name:
                return self.values[offsets[i]: offsets[i + 1]]
        raise KeyError(name)


@dataclass(frozen=True)
class SparseUpdate:
    """Top-k slice of one client's round delta. Indices sorted ascending."""

    round_number: int
    client_id: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be matching 1-D arrays")
        if idx.size == 0:
            raise ValueError("empty sparse update")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("non-finite update values")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def k(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class RoundRecord:
    """Union of the round's client index sets, sorted ascending."""

    round_number: int
    indices: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise ValueError("record indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)

    def index_set(self) -> frozenset[int]:
        return frozenset(int(i) for i in self.indices)

    def mask(self, total_params: int) -> np.ndarray:
        m = np.zeros(total_params, dtype=np.float64)
        m[self.indices] = 1.0
        return m


# Logical memory operations produced by aggregation.  Offsets and counts
# are in elements of the named region; the layout module resolves them to
# physical byte ranges.
@dataclass(frozen=True)
class ScriptOp:
    region: str  # "ingress" | "accumulator" | "writeback" | "values"
    layer: int  # -1 for the global ingress queue
    offset: int
    count: int
    kind: str  # "R" | "W"

    def __post_init__(self) -> None:
        if self.region not in ("ingress", "accumulator", "writeback", "values"):
            raise ValueError(f"unknown region {self.region!r}")
        if self.kind not in ("R", "W"):
            raise ValueError(f"kind must be 'R' or 'W', got {self.kind!r}")
        if self.offset < 0 or self.count <= 0:
            raise ValueError("offset must be >= 0 and count positive")


@dataclass(frozen=True)
class UpdateMessage:
    client_id: int
    size_bytes: int
    ops: tuple[ScriptOp, ...]


@dataclass(frozen=True)
class AccessScript:
    """Ordered per-message ops plus round-end writeback ops."""

    round_number: int
    messages: tuple[UpdateMessage, ...]
    writeback_ops: tuple[ScriptOp, ...]


@dataclass
class FederationState:
    spec: ModelSpec
    params: ParameterStore
    shards: list[tuple[np.ndarray, np.ndarray]]
    sparsity: str
    learning_rate: float
    seed: int
    round_number: int = 0
    hidden_dim: int = 0
    in_dim: int = 0
    out_dim: int = 0

    @property
    def n_clients(self) -> int:
        return len(self.shards)


def init_federation(
    model_spec: ModelSpec,
    n_clients: int,
    seed: int,
    *,
    in_dim: int,
    hidden_dim: int,
    out_dim: int,
    shard_size: int = 32,
    sparsity: str = "0.01",
    learning_rate: float = 0.05,
) -> FederationState:
    """Server state plus per-client synthetic shards.

    Shard features are standard normal; labels come from a shared teacher
    projection so clients learn a common task.  Every client's shard uses
    its own named sub-seed, so shards are pairwise distinct by
    construction.
    """
    if n_clients <= 0:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if shard_size <= 0:
        raise ValueError(f"shard_size must be positive, got {shard_size}")
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    expected = make_mlp_spec(in_dim, hidden_dim, out_dim)
    if tuple(l.element_count for l in model_spec.layers) != tuple(
        l.element_count for l in expected.layers
    ):
        raise ValueError("model_spec does not match the given mlp dimensions")

    init_rng = generator(seed, "model-init")
    scale = 1.0 / np.sqrt(in_dim)
    w1 = init_rng.normal(0.0, scale, size=in_dim * hidden_dim)
    b1 = np.zeros(hidden_dim)
    w2 = init_rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=hidden_dim * out_dim)
    b2 = np.zeros(out_dim)
    params = ParameterStore(model_spec, np.concatenate([w1, b1, w2, b2]))

    teacher_rng = generator(seed, "teacher")
    teacher = teacher_rng.normal(0.0, 1.0, size=(in_dim, out_dim))
    shards = []
    for c in range(n_clients):
        rng = generator(seed, "shard", c)
        x = rng.normal(0.0, 1.0, size=(shard_size, in_dim))
        logits = x @ teacher + rng.normal(0.0, 0.5, size=(shard_size, out_dim))
        y = np.argmax(logits, axis=1).astype(np.int64)
        shards.append((x, y))

    return FederationState(
        spec=model_spec,
        params=params,
        shards=shards,
        sparsity=str(sparsity),
        learning_rate=float(learning_rate),
        seed=int(seed),
        in_dim=in_dim,
        hidden_dim=hidden_dim,
        out_dim=out_dim,
    )


def _unpack(fed: FederationState, theta: np.ndarray):
    offsets = fed.spec.layer_offsets
    w1 = theta[offsets[0]: offsets[1]].reshape(fed.in_dim, fed.hidden_dim)
    b1 = theta[offsets[1]: offsets[2]]
    w2 = theta[offsets[2]: offsets[3]].reshape(fed.hidden_dim, fed.out_dim)
    b2 = theta[offsets[3]: offsets[4]]
    return w1, b1, w2, b2


def model_loss(fed: FederationState, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy of the MLP on a batch."""
    w1, b1, w2, b2 = _unpack(fed, theta)
    h = np.maximum(x @ w1 + b1, 0.0)
    logits = h @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(log_z - logits[np.arange(x.shape[0]), y]))


def local_train(
    fed: FederationState,
    client_id: int,
    global_params: ParameterStore,
    input_batch: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """One full-batch gradient step; returns the dense delta (-lr * grad)."""
    if not 0 <= client_id < fed.n_clients:
        raise ValueError(f"client_id {client_id} out of range")
    x, y = input_batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != fed.in_dim or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad batch shapes {x.shape}, {y.shape}")
    theta = global_params.values
    w1, b1, w2, b2 = _unpack(fed, theta)

    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    logits = h @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = x.shape[0]
    d_logits = probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    g_w2 = h.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_h = (d_logits @ w2.T) * (pre > 0.0)
    g_w1 = x.T @ d_h
    g_b1 = d_h.sum(axis=0)

    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    if not np.all(np.isfinite(grad)):
        raise ValueError(f"client {client_id}: non-finite gradient")
    return -fed.learning_rate * grad


def sparsify_topk(delta: np.ndarray, sparsity: str | float | Fraction, round_number: int, client_id: int) -> SparseUpdate:
    """Keep the k = ceil(sparsity * M) largest-magnitude entries.

    Ties in magnitude resolve to the lower index; the returned indices are
    sorted ascending.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 1 or delta.size == 0:
        raise ValueError("delta must be a nonempty 1-D array")
    k = metrics.topk_count(sparsity, delta.size)
    av = np.abs(delta)
    if k >= delta.size:
        chosen = np.arange(delta.size, dtype=np.int64)
    else:
        # partition instead of a full sort; ties at the cut value resolve
        # to the lowest indices, same as a stable descending sort
        part = np.argpartition(-av, k - 1)[:k]
        cut = av[part].min()
        greater = np.flatnonzero(av > cut)
        ties = np.flatnonzero(av == cut)[: k - greater.size]
        chosen = np.sort(np.concatenate([greater, ties]))
    return SparseUpdate(round_number, client_id, chosen, delta[chosen])


def _runs(sorted_indices: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers as (start, count)."""
    idx = np.asarray(sorted_indices, dtype=np.int64)
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [idx.size]))
    return list(zip(idx[starts].tolist(), (ends - starts).tolist()))


def _per_layer_runs(spec: ModelSpec, indices: np.ndarray) -> list[tuple[int, int, int]]:
    """(layer, offset within layer, count) runs, split at layer borders."""
    offsets = spec.layer_offsets
    out = []
    for start, count in _runs(indices):
        while count > 0:
            layer = spec.layer_of(start)
            room = offsets[layer + 1] - start
            take = min(count, room)
            out.append((layer, start - offsets[layer], take))
            start += take
            count -= take
    return out


def aggregate(
    store: ParameterStore,
    updates: list[SparseUpdate],
    metadata_bytes_per_entry: int = 0,
) -> tuple[ParameterStore, AccessScript]:
    """Mean-of-contributions aggregation; returns new params and the script.

    Updates are consumed in ascending client_id order regardless of input
    order.  Per touched index: accumulated sum / contribution count is
    added to theta.  The script records, per message, the ingress-queue
    write and the accumulator read+write per entry run, then the round-end
    writeback (accumulator read, writeback-buffer write, values write).
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    rounds = {u.round_number for u in updates}
    if len(rounds) != 1:
        raise ValueError(f"updates span rounds {sorted(rounds)}")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id in round updates")
    round_number = rounds.pop()
    spec = store.spec
    m = spec.total_params
    precision = spec.uniform_precision_bits

    sums = np.zeros(m)
    counts = np.zeros(m, dtype=np.int64)
    messages = []
    ingress_offset = 0
    for u in sorted(updates, key=lambda u: u.client_id):
        if u.indices[-1] >= m:
            raise ValueError(f"client {u.client_id}: index out of range")
        sums[u.indices] += u.values
        counts[u.indices] += 1
        size_bytes = -(-(u.k * precision) // 8) + u.k * metadata_bytes_per_entry
        ops = [ScriptOp("ingress", -1, ingress_offset, size_bytes, "W")]
        for layer, off, count in _per_layer_runs(spec, u.indices):
            ops.append(ScriptOp("accumulator", layer, off, count, "R"))
            ops.append(ScriptOp("accumulator", layer, off, count, "W"))
        messages.append(UpdateMessage(u.client_id, size_bytes, tuple(ops)))
        ingress_offset += size_bytes

    touched = np.flatnonzero(counts)
    new_values = store.values.copy()
    new_values[touched] += sums[touched] / counts[touched]

    wb_ops = []
    for layer, off, count in _per_layer_runs(spec, touched):
        wb_ops.append(ScriptOp("accumulator", layer, off, count, "R"))
        wb_ops.append(ScriptOp("writeback", layer, off, count, "W"))
        wb_ops.append(ScriptOp("values", layer, off, count, "W"))

    script = AccessScript(round_number, tuple(messages), tuple(wb_ops))
    return ParameterStore(spec, new_values), script


@dataclass
class RoundResult:
    record: RoundRecord
    script: AccessScript
    updates: list[SparseUpdate] = field(repr=False, default_factory=list)


def run_round(
    fed: FederationState,
    perturbations: dict[int, np.ndarray] | None = None,
    channel_cfg: channel_mod.ChannelConfig | None = None,
    metadata_bytes_per_entry: int = 0,
) -> RoundResult:
    """One communication round; advances fed.round_number and theta.

    perturbations maps client_id to an input-space delta added to every
    sample of that client's shard through the channel model.  Clients run
    in ascending id order.
    """
    t = fed.round_number
    updates = []
    for c in range(fed.n_clients):
        x, y = fed.shards[c]
        delta = None if perturbations is None else perturbations.get(c)
        if channel_cfg is not None:
            # batched form of emulate_audio_channel over the shard rows;
            # one generator per (round, client) keeps the noise stream
            # identical to calling the per-row path in row order
            rng = generator(fed.seed, "channel", t, c)
            d = np.zeros(fed.in_dim) if delta is None else np.asarray(delta, dtype=np.float64)
            sig = x + d[None, :]
            if channel_cfg.noise_std > 0:
                sig = sig + rng.normal(0.0, channel_cfg.noise_std, size=sig.shape)
            if channel_cfg.source_rate_hz != channel_cfg.target_rate_hz:
                sig = np.stack(
                    [
                        channel_mod._resample_linear(
                            row, channel_cfg.source_rate_hz, channel_cfg.target_rate_hz
                        )
                        for row in sig
                    ]
                )
            x_in = sig
        elif delta is not None:
            x_in = x + np.asarray(delta, dtype=np.float64)[None, :]
        else:
            x_in = x
        dense = local_train(fed, c, fed.params, (x_in, y))
        updates.append(sparsify_topk(dense, fed.sparsity, t, c))

    new_params, script = aggregate(fed.params, updates, metadata_bytes_per_entry)
    fed.params = new_params
    fed.round_number = t + 1

    union = np.unique(np.concatenate([u.indices for u in updates]))
    record = RoundRecord(t, union)
    return RoundResult(record, script, updates)


def write_round_records(path, records: list[RoundRecord], header: dict[str, str] | None = None) -> None:
    """One record per line: round number then the sorted index list."""
    with open(path, "w", encoding="ascii") as f:
        for key, value in (header or {}).items():
            f.write(f"# {key}={value}\n")
        for r in records:
            f.write(str(r.round_number))
            f.write(" ")
            f.write(" ".join(str(int(i)) for i in r.indices))
            f.write("\n")


def read_round_records(path) -> tuple[list[RoundRecord], dict[str, str]]:
    records = []
    header: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
                continue
            parts = line.split()
            try:
                numbers = [int(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: bad record line") from exc
            if len(numbers) < 2:
                raise ValueError(f"{path}:{line_no}: record needs a round and at least one index")
            records.append(RoundRecord(numbers[0], np.array(sorted(set(numbers[1:])), dtype=np.int64)))
    return records, header

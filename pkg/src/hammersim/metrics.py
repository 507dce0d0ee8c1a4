"""Update-repetition metrics and DRAM-side feasibility arithmetic.

Two groups of functionality live here:

* Metrics over round index-set traces: repeated-update ratio (RUR) and
  cluster diameter (CD).
* The feasibility chain that turns a memory-bus bandwidth and a sparse
  update size into an activation budget per refresh window, and an
  expected activation count for an attacker with a given RUR.

All feasibility arithmetic is exact (integers and rationals); rounding
happens only when formatting values for display against published-style
tables, which truncate to the nearest 1K below.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "topk_count",
    "compute_rur",
    "compute_cd",
    "BandwidthModel",
    "update_size",
    "h_max",
    "expected_activations",
    "feasibility_verdict",
    "FeasibilityRow",
    "ModelPreset",
    "REFERENCE_MODELS",
    "to_kilo",
]

# Activation budget cap: one ACT per effective row-cycle time, per bank,
# per refresh window.
ACT_CAP_DEFAULT = 1_306_122  # floor(0.064 s / 49 ns)


def _as_fraction(x: float | int | str | Fraction) -> Fraction:
    """Exact rational from a value that was written as a decimal literal.

    Floats are routed through ``str`` so that a config value like 0.001
    means exactly 1/1000 rather than its binary approximation.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(str(x).strip())


def topk_count(sparsity: float | str | Fraction, total_params: int) -> int:
    """Number of retained entries k = ceil(sparsity * total_params)."""
    if total_params <= 0:
        raise ValueError(f"total_params must be positive, got {total_params}")
    p = _as_fraction(sparsity)
    if p <= 0 or p > 1:
        raise ValueError(f"sparsity must be in (0, 1], got {p}")
    num = p.numerator * total_params
    den = p.denominator
    return -(-num // den)


def compute_rur(index_sets: Sequence[Iterable[int]]) -> float:
    """Repeated-update ratio over a trace of round index sets.

    Sum over consecutive pairs of |U_t intersect U_{t+1}| divided by the
    sum of |U_t| for t = 1 .. T-1 (the earlier set of each pair).
    """
    sets = [frozenset(int(i) for i in u) for u in index_sets]
    if len(sets) < 2:
        raise ValueError("RUR needs at least two rounds")
    for t, u in enumerate(sets):
        if not u:
            raise ValueError(f"round {t} has an empty index set")
    repeated = 0
    total = 0
    for prev, curr in zip(sets[:-1], sets[1:]):
        repeated += len(prev & curr)
        total += len(prev)
    return repeated / total


def compute_cd(indices: Iterable[int], total_params: int, coverage: float = 0.9) -> float:
    """Cluster diameter: span of the tightest window holding 90% of the set.

    With k indices and m = ceil(0.9 k), CD is the minimum over all m-subsets
    of (max - min + 1), divided by total_params.  The minimizing subset is
    always m consecutive elements of the sorted index list, so a sliding
    window suffices.
    """
    idx = np.array(sorted(set(int(i) for i in indices)), dtype=np.int64)
    k = idx.size
    if k == 0:
        raise ValueError("empty index set")
    if total_params <= 0 or (idx[-1] >= total_params) or idx[0] < 0:
        raise ValueError("indices out of range for total_params")
    if coverage == 0.9:
        m = (9 * k + 9) // 10
    else:
        m = topk_count(coverage, k)
    spans = idx[m - 1:] - idx[: k - m + 1] + 1
    return int(spans.min()) / total_params


@dataclass(frozen=True)
class BandwidthModel:
    """Memory-bus bandwidth from transfer rate and bus width.

    data_rate_mts is calibrated in units of 2^20 transfers per second, so
    a DDR4-2400 x64 module comes out at 18.75 binary GB/s.  That is the
    interpretation under which the published per-window activation budgets
    reproduce exactly.
    """

    data_rate_mts: int = 2400
    bit_width: int = 64

    def __post_init__(self) -> None:
        if self.data_rate_mts <= 0:
            raise ValueError(f"data_rate_mts must be positive, got {self.data_rate_mts}")
        if self.bit_width <= 0 or self.bit_width % 8 != 0:
            raise ValueError(f"bit_width must be a positive multiple of 8, got {self.bit_width}")

    @property
    def bytes_per_second(self) -> int:
        return self.data_rate_mts * (1 << 20) * (self.bit_width // 8)

    def window_bytes(self, refresh_period_s: float | str | Fraction = "0.064") -> Fraction:
        """Bytes transferable in one refresh window (exact rational)."""
        dt = _as_fraction(refresh_period_s)
        if dt <= 0:
            raise ValueError(f"refresh period must be positive, got {dt}")
        return Fraction(self.bytes_per_second) * dt


def update_size(
    total_params: int,
    sparsity: float | str | Fraction,
    precision_bits: int,
    metadata_bytes_per_entry: int = 0,
) -> Fraction:
    """Bytes on the wire for one sparse update (exact rational).

    Value payload only by default: k entries at the model precision.  Real
    encodings add per-entry index metadata; the knob adds a flat
    metadata_bytes_per_entry on top when a caller wants that accounted.
    """
    if precision_bits not in (4, 8, 32):
        raise ValueError(f"unsupported precision {precision_bits}")
    if metadata_bytes_per_entry < 0:
        raise ValueError("metadata_bytes_per_entry must be >= 0")
    k = topk_count(sparsity, total_params)
    return Fraction(k * precision_bits, 8) + Fraction(k * metadata_bytes_per_entry)


def h_max(
    bw: BandwidthModel,
    size_bytes: Fraction | int,
    refresh_period_s: float | str | Fraction = "0.064",
    act_cap: int = ACT_CAP_DEFAULT,
) -> tuple[int, bool]:
    """Max update deliveries per refresh window, and a cap-exceeded flag.

    Returns floor(window_bytes / size_bytes).  The flag reports whether
    that delivery count exceeds the per-bank activation budget act_cap,
    in which case the activation rate, not the bus, is the binding limit.
    """
    size = _as_fraction(size_bytes)
    if size <= 0:
        raise ValueError(f"update size must be positive, got {size}")
    n = int(bw.window_bytes(refresh_period_s) / size)
    return n, n > act_cap


def expected_activations(rur: float | str | Fraction, hmax: int) -> int:
    """Expected aggressor-row activations per window: floor(RUR * H_max)."""
    r = _as_fraction(rur)
    if not 0 <= r <= 1:
        raise ValueError(f"RUR must be in [0, 1], got {r}")
    if hmax < 0:
        raise ValueError(f"hmax must be >= 0, got {hmax}")
    return int(r * hmax)


def feasibility_verdict(e_act: int, min_threshold: int, mean_threshold: int) -> str:
    """Classify an expected activation count against flip thresholds.

    feasible  : e_act >= mean single-sided threshold
    marginal  : min single-sided threshold <= e_act < mean
    infeasible: below the minimum single-sided threshold
    """
    if min_threshold <= 0 or mean_threshold < min_threshold:
        raise ValueError("need 0 < min_threshold <= mean_threshold")
    if e_act >= mean_threshold:
        return "feasible"
    if e_act >= min_threshold:
        return "marginal"
    return "infeasible"


def to_kilo(n: int) -> int:
    """Display convention for table comparisons: truncate to 1K units."""
    return int(n) // 1000


@dataclass(frozen=True)
class ModelPreset:
    """A published model's footprint, as used in the feasibility tables."""

    name: str
    total_params: int
    tensor_count: int
    precision_bits: int


# Reference speech/vision models used for the feasibility arithmetic.
REFERENCE_MODELS: tuple[ModelPreset, ...] = (
    ModelPreset("Conformer-CTC-S", 8_700_000, 480, 4),
    ModelPreset("Squeezeformer-XS", 9_000_000, 480, 4),
    ModelPreset("QuartzNet-5x5", 6_700_000, 130, 8),
    ModelPreset("MobileNetV3-Small", 2_900_000, 142, 8),
)

# Measured repeated-update ratios for the reference models at the two
# sparsity levels exercised in the tables, keyed by (model name, sparsity).
REFERENCE_RUR: dict[tuple[str, str], str] = {
    ("Conformer-CTC-S", "0.001"): "0.695",
    ("Conformer-CTC-S", "0.0005"): "0.605",
    ("Squeezeformer-XS", "0.001"): "0.631",
    ("Squeezeformer-XS", "0.0005"): "0.537",
    ("QuartzNet-5x5", "0.001"): "0.760",
    ("QuartzNet-5x5", "0.0005"): "0.608",
    ("MobileNetV3-Small", "0.001"): "0.633",
    ("MobileNetV3-Small", "0.0005"): "0.583",
}

SPARSITY_LEVELS: tuple[str, str] = ("0.001", "0.0005")


@dataclass
class FeasibilityRow:
    """One (model, sparsity) line of the feasibility report."""

    model: str
    sparsity: str
    total_params: int
    tensor_count: int
    precision_bits: int
    k: int
    update_bytes: Fraction
    hmax: int
    cap_exceeded: bool
    rur: str | None = None
    e_act: int | None = None
    verdict: str | None = None
    pattern_verdicts: dict[str, bool] = field(default_factory=dict)


def feasibility_rows(
    bw: BandwidthModel,
    models: Sequence[ModelPreset] = REFERENCE_MODELS,
    sparsities: Sequence[str] = SPARSITY_LEVELS,
    refresh_period_s: float | str | Fraction = "0.064",
    metadata_bytes_per_entry: int = 0,
    rur_table: dict[tuple[str, str], str] | None = None,
    act_cap: int = ACT_CAP_DEFAULT,
) -> list[FeasibilityRow]:
    """Feasibility chain for every (model, sparsity) pair, in table order."""
    if rur_table is None:
        rur_table = REFERENCE_RUR
    rows = []
    for preset in models:
        for p in sparsities:
            k = topk_count(p, preset.total_params)
            size = update_size(preset.total_params, p, preset.precision_bits,
                               metadata_bytes_per_entry)
            hm, capped = h_max(bw, size, refresh_period_s, act_cap)
            row = FeasibilityRow(
                model=preset.name,
                sparsity=str(p),
                total_params=preset.total_params,
                tensor_count=preset.tensor_count,
                precision_bits=preset.precision_bits,
                k=k,
                update_bytes=size,
                hmax=hm,
                cap_exceeded=capped,
            )
            rur = rur_table.get((preset.name, str(p)))
            if rur is not None:
                row.rur = rur
                row.e_act = expected_activations(rur, hm)
            rows.append(row)
    return rows

"""Core data types, validation, and shared numeric conventions.

Units: all power quantities are pre-multiplied by the interval length and
stored as MWh per interval; prices are $/MWh. Every type here is an
immutable value object (frozen dataclass with read-only arrays), safe to
share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

LOOKBACK_INTERVALS = 24

__all__ = [
    "LOOKBACK_INTERVALS",
    "ValidationError",
    "StorageParams",
    "PriceSeries",
    "FeatureWindow",
    "ArbSolution",
    "BidCurve",
    "SensitivityModel",
    "Sample",
    "validate_storage_params",
    "soc_grid",
    "discharge_cost",
    "marginal_discharge_cost",
    "params_to_json",
    "params_from_json",
    "read_price_csv",
    "write_price_csv",
]


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StorageParams:
    """Physical storage description.

    power_rating    max charge/discharge energy per interval (MWh)
    capacity        energy capacity (MWh)
    efficiency      one-way efficiency, in (0, 1]
    cost_linear     $/MWh discharged
    cost_quadratic  $/MWh^2 discharged
    num_segments    bid curve segments per direction
    initial_soc     stored energy entering the first interval (MWh)
    """

    power_rating: float = 0.5
    capacity: float = 1.0
    efficiency: float = 0.9
    cost_linear: float = 10.0
    cost_quadratic: float = 0.0
    num_segments: int = 10
    initial_soc: float = 0.5


def validate_storage_params(params: StorageParams) -> StorageParams:
    """Return ``params`` unchanged, or raise naming the first violated invariant."""
    if not 0.0 < params.efficiency <= 1.0:
        raise ValidationError("efficiency out of range (must satisfy 0 < eta <= 1)")
    if params.power_rating <= 0.0:
        raise ValidationError("power_rating must be positive")
    if params.capacity <= 0.0:
        raise ValidationError("capacity must be positive")
    if not 0.0 <= params.initial_soc <= params.capacity:
        raise ValidationError("initial_soc outside [0, capacity]")
    if params.cost_linear < 0.0:
        raise ValidationError("cost_linear must be nonnegative")
    if params.cost_quadratic < 0.0:
        raise ValidationError("cost_quadratic must be nonnegative")
    if params.num_segments < 1:
        raise ValidationError("num_segments must be at least 1")
    return params


def soc_grid(params: StorageParams) -> np.ndarray:
    """Segment-midpoint SoC levels, ascending: e_j = (j - 1/2) * E / N.

    Midpoints rather than endpoints keep the grid clear of the SoC bounds,
    where the transition dual degenerates.
    """
    n = params.num_segments
    return (np.arange(n) + 0.5) * params.capacity / n


def discharge_cost(params: StorageParams, p) -> np.ndarray | float:
    """Operating cost of discharging p MWh in one interval."""
    return params.cost_linear * p + params.cost_quadratic * np.square(p)


def marginal_discharge_cost(params: StorageParams, p=0.0) -> float:
    """d(cost)/dp. Bids evaluate this at p = 0, the margin of starting to discharge."""
    return params.cost_linear + 2.0 * params.cost_quadratic * p


@dataclass(frozen=True)
class SensitivityModel:
    """Price impact of the storage's net dispatch y: cleared price is lambda - f(y).

    kind is one of price_taker (f = 0), linear (f = alpha * y) or cubic
    (f = alpha * y^3). f is monotone increasing with f(0) = 0.
    """

    kind: str = "price_taker"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("price_taker", "linear", "cubic"):
            raise ValidationError(f"unknown sensitivity kind {self.kind!r}")
        if self.kind != "price_taker" and self.alpha <= 0.0:
            raise ValidationError("sensitivity alpha must be positive")

    def f(self, y):
        if self.kind == "linear":
            return self.alpha * y
        if self.kind == "cubic":
            return self.alpha * y**3
        return 0.0 * y

    def fprime(self, y):
        if self.kind == "linear":
            return self.alpha + 0.0 * y
        if self.kind == "cubic":
            return 3.0 * self.alpha * y**2
        return 0.0 * y

    def revenue_gradient(self, price, y):
        """d/dy of (price - f(y)) * y."""
        return price - self.f(y) - self.fprime(y) * y


PRICE_TAKER = SensitivityModel("price_taker")


@dataclass(frozen=True)
class PriceSeries:
    """Time-indexed market data at a fixed resolution.

    rtp is required; dap and load are optional and, when present, align 1:1
    with rtp. Timestamps must be strictly increasing with a constant step.
    """

    timestamps: tuple[datetime, ...]
    rtp: np.ndarray
    dap: np.ndarray | None = None
    load: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "rtp", _frozen(self.rtp))
        if self.dap is not None:
            object.__setattr__(self, "dap", _frozen(self.dap))
        if self.load is not None:
            object.__setattr__(self, "load", _frozen(self.load))
        n = len(self.timestamps)
        if n < 2:
            raise ValidationError("price series needs at least two intervals")
        if self.rtp.shape != (n,):
            raise ValidationError("rtp length does not match timestamps")
        if not np.all(np.isfinite(self.rtp)):
            bad = int(np.flatnonzero(~np.isfinite(self.rtp))[0])
            raise ValidationError(f"rtp has a missing or non-finite entry at row {bad + 1}")
        step = self.timestamps[1] - self.timestamps[0]
        if step <= timedelta(0):
            raise ValidationError("timestamps not strictly increasing at row 2")
        for i in range(1, n):
            if self.timestamps[i] - self.timestamps[i - 1] != step:
                raise ValidationError(f"timestamp gap or irregular step at row {i + 1}")
        for name, col in (("dap", self.dap), ("load", self.load)):
            if col is not None:
                if col.shape != (n,):
                    raise ValidationError(f"{name} length does not match rtp")
                if not np.all(np.isfinite(col)):
                    bad = int(np.flatnonzero(~np.isfinite(col))[0])
                    raise ValidationError(f"{name} has a missing entry at row {bad + 1}")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def step(self) -> timedelta:
        return self.timestamps[1] - self.timestamps[0]

    @property
    def channels(self) -> tuple[str, ...]:
        names = ["rtp"]
        if self.dap is not None:
            names.append("dap")
        if self.load is not None:
            names.append("load")
        return tuple(names)

    def channel(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if arr is None:
            raise KeyError(name)
        return arr


@dataclass(frozen=True)
class FeatureWindow:
    """Predictor input: the trailing lookback of each enabled channel, flattened
    channel-major, plus the forward rtp vector it should predict."""

    x: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x))
        object.__setattr__(self, "target", _frozen(self.target))
        if self.x.ndim != 1 or self.target.ndim != 1:
            raise ValidationError("feature window arrays must be 1-D")
        if self.x.size % LOOKBACK_INTERVALS != 0:
            raise ValidationError(
                f"feature length must be a multiple of {LOOKBACK_INTERVALS}"
            )

    @property
    def num_channels(self) -> int:
        return self.x.size // LOOKBACK_INTERVALS


@dataclass(frozen=True)
class ArbSolution:
    """Primal trajectory and all duals of a horizon arbitrage solve.

    theta[t] is the multiplier on the SoC transition entering interval t; for
    nonnegative prices it equals the marginal value of stored energy and is
    nonnegative. u/v/w pairs are the lower/upper bound duals on discharge,
    charge, and SoC respectively.
    """

    p: np.ndarray
    b: np.ndarray
    e: np.ndarray
    theta: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    objective: float

    def __post_init__(self):
        for name in ("p", "b", "e", "theta", "u_lo", "u_hi", "v_lo", "v_hi", "w_lo", "w_hi"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def horizon(self) -> int:
        return self.p.size


@dataclass(frozen=True)
class BidCurve:
    """Segmented charge/discharge price-quantity pairs for one interval.

    Each of the N segments offers seg_quantity MWh in both directions at
    discharge price S_j and charge price D_j. soc_levels records the SoC at
    which each segment's opportunity value was evaluated; charge_levels is set
    when the two directions were valued at different SoC levels (bids anchored
    at the live SoC) and is None for symmetric grid curves.
    """

    discharge_prices: np.ndarray
    charge_prices: np.ndarray
    seg_quantity: float
    soc_levels: np.ndarray
    charge_levels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "discharge_prices", _frozen(self.discharge_prices))
        object.__setattr__(self, "charge_prices", _frozen(self.charge_prices))
        object.__setattr__(self, "soc_levels", _frozen(self.soc_levels))
        if self.charge_levels is not None:
            object.__setattr__(self, "charge_levels", _frozen(self.charge_levels))
        n = self.discharge_prices.size
        if self.charge_prices.size != n or self.soc_levels.size != n:
            raise ValidationError("bid curve vectors must share one length")
        if self.seg_quantity <= 0.0:
            raise ValidationError("segment quantity must be positive")

    @property
    def num_segments(self) -> int:
        return self.discharge_prices.size

    def to_json(self) -> str:
        payload = {
            "soc_levels": list(self.soc_levels),
            "S": list(self.discharge_prices),
            "D": list(self.charge_prices),
            "seg_qty": self.seg_quantity,
        }
        if self.charge_levels is not None:
            payload["charge_levels"] = list(self.charge_levels)
        return json.dumps(payload)

    @staticmethod
    def from_json(text: str) -> "BidCurve":
        d = json.loads(text)
        return BidCurve(
            discharge_prices=np.array(d["S"], dtype=float),
            charge_prices=np.array(d["D"], dtype=float),
            seg_quantity=float(d["seg_qty"]),
            soc_levels=np.array(d["soc_levels"], dtype=float),
            charge_levels=(
                np.array(d["charge_levels"], dtype=float) if "charge_levels" in d else None
            ),
        )


@dataclass(frozen=True)
class Sample:
    """One training sample: features, horizon prices, and hindsight labels.

    label_p/label_b are the hindsight-optimal dispatch over the horizon given
    actual prices, starting from label_e_prev (the SoC the hindsight chain
    carries into the horizon's first interval).
    """

    features: FeatureWindow
    label_p: np.ndarray
    label_b: np.ndarray
    label_e_prev: float
    actual_prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "label_p", _frozen(self.label_p))
        object.__setattr__(self, "label_b", _frozen(self.label_b))
        object.__setattr__(self, "actual_prices", _frozen(self.actual_prices))


# --- serialization ----------------------------------------------------------

_PARAM_FIELDS = (
    "power_rating",
    "capacity",
    "efficiency",
    "cost_linear",
    "cost_quadratic",
    "num_segments",
    "initial_soc",
)


def params_to_json(params: StorageParams) -> str:
    return json.dumps({k: getattr(params, k) for k in _PARAM_FIELDS})


def params_from_json(text: str) -> StorageParams:
    d = json.loads(text)
    unknown = set(d) - set(_PARAM_FIELDS)
    if unknown:
        raise ValidationError(f"unknown storage parameter {sorted(unknown)[0]!r}")
    return validate_storage_params(StorageParams(**d))


CSV_HEADER = "timestamp,rtp,dap,load"


def write_price_csv(series: PriceSeries, path) -> None:
    """Write the canonical CSV form: ISO-8601 timestamps, blank cells for
    absent optional channels."""
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        dap = series.dap
        load = series.load
        for i, ts in enumerate(series.timestamps):
            row = [
                ts.isoformat(),
                repr(float(series.rtp[i])),
                repr(float(dap[i])) if dap is not None else "",
                repr(float(load[i])) if load is not None else "",
            ]
            fh.write(",".join(row) + "\n")


def read_price_csv(path) -> PriceSeries:
    """Parse the canonical CSV form; rejects gaps and malformed rows, naming
    the first bad row."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValidationError(f"bad CSV header, expected {CSV_HEADER!r}")
    stamps: list[datetime] = []
    cols: dict[str, list[float | None]] = {"rtp": [], "dap": [], "load": []}
    for row_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"malformed row {row_no}: expected 4 columns")
        try:
            stamps.append(datetime.fromisoformat(parts[0]))
        except ValueError as exc:
            raise ValidationError(f"bad timestamp at row {row_no}: {exc}") from exc
        for name, cell in zip(("rtp", "dap", "load"), parts[1:]):
            if cell.strip() == "":
                cols[name].append(None)
            else:
                try:
                    cols[name].append(float(cell))
                except ValueError as exc:
                    raise ValidationError(f"bad {name} value at row {row_no}") from exc
    if cols["rtp"] and any(v is None for v in cols["rtp"]):
        bad = next(i for i, v in enumerate(cols["rtp"]) if v is None)
        raise ValidationError(f"rtp has a missing entry at row {bad + 2}")
    if len(stamps) >= 2:
        step = stamps[1] - stamps[0]
        for i in range(1, len(stamps)):
            if stamps[i] - stamps[i - 1] != step or step <= timedelta(0):
                raise ValidationError(f"timestamp gap or irregular step at row {i + 2}")

    def _optional(name: str):
        vals = cols[name]
        if all(v is None for v in vals):
            return None
        if any(v is None for v in vals):
            bad = next(i for i, v in enumerate(vals) if v is None)
            raise ValidationError(f"{name} has a missing entry at row {bad + 2}")
        return np.array(vals, dtype=float)

    return PriceSeries(
        timestamps=tuple(stamps),
        rtp=np.array(cols["rtp"], dtype=float),
        dap=_optional("dap"),
        load=_optional("load"),
    )

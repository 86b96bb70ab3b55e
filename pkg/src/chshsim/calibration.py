"""Source and channel estimation from low-power coincidence data.

In the low-power regime a window rarely holds more than one pair, so with
rates in counts per second

    N_A = mu tau_A / T_int,   N_B = mu tau_B / T_int,   N_par = mu tau_A tau_B / T_int,

which inverts to ``tau_B = N_par / N_A``, ``tau_A = N_par / N_B`` and
``mu = T_int N_A N_B / N_par``.  Here ``mu`` is the total mean pair number
per window (:attr:`MuConvention.TOTAL_PAIRS`).  The gain then follows the
pump power as ``gamma = C_gamma sqrt(P)``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import DegeneracyError, DomainError, RegimeError
from .model import db_to_tau, tau_to_db
from .montecarlo import CountRecord
from .oracle import SquashedCounts, pattern_label

__all__ = [
    "DEFAULT_REGIME_THRESHOLD",
    "LossyInputWarning",
    "PowerPoint",
    "ChannelEstimate",
    "CalibrationResult",
    "estimate_channel",
    "estimate_c_gamma",
    "mu_at_power",
    "power_for_mu",
    "db_to_tau",
    "tau_to_db",
    "read_counts_csv",
    "parse_counts_csv",
    "format_counts_csv",
    "power_points",
    "write_counts_csv",
    "PATTERN_COLUMNS",
    "PAIRWISE_COLUMNS",
    "BASE_COLUMNS",
]

DEFAULT_REGIME_THRESHOLD = 0.02

BASE_COLUMNS = ("power_mw", "loss_db", "phi_a_deg", "phi_b_deg", "t_acq_s", "n_a", "n_b")
PATTERN_COLUMNS = tuple(f"c_{pattern_label(k)}" for k in range(16))
PAIRWISE_COLUMNS = ("n_pp", "n_pm", "n_mp", "n_mm")


class LossyInputWarning(UserWarning):
    """Counts arrived as pairwise coincidences; click patterns are unavailable."""


@dataclass(frozen=True)
class PowerPoint:
    power: float
    record: CountRecord

    def __post_init__(self) -> None:
        if not self.power > 0:
            raise DomainError(f"pump power must be > 0 mW, got {self.power!r}")


@dataclass(frozen=True)
class ChannelEstimate:
    tau_a: float
    tau_b: float
    mu: float
    perp_ratio: float

    def __iter__(self):
        return iter((self.tau_a, self.tau_b, self.mu))


@dataclass(frozen=True)
class CalibrationResult:
    tau_a: float
    tau_b: float
    c_gamma: float
    residuals: tuple[float, ...]
    powers: tuple[float, ...] = ()
    mu_values: tuple[float, ...] = ()
    excluded: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if not (0 < self.tau_a < 1 and 0 < self.tau_b < 1):
            raise DegeneracyError(
                f"estimated transmittances ({self.tau_a:.4g}, {self.tau_b:.4g}) fall outside (0, 1)"
            )
        if not self.c_gamma > 0:
            raise DegeneracyError(f"estimated C_gamma {self.c_gamma!r} is not positive")

    def to_dict(self) -> dict:
        return {
            "tau_a": self.tau_a,
            "tau_b": self.tau_b,
            "loss_a_db": tau_to_db(self.tau_a),
            "loss_b_db": tau_to_db(self.tau_b),
            "c_gamma": self.c_gamma,
            "points": [
                {"power_mw": p, "mu": m, "residual": r}
                for p, m, r in zip(self.powers, self.mu_values, self.residuals)
            ],
            "excluded_powers_mw": list(self.excluded),
        }


def _rates(record: CountRecord) -> tuple[float, float, float, float]:
    c = record.squashed()
    t = record.t_acq
    return record.singles_a / t, record.singles_b / t, c.n_par / t, c.n_perp / t


def _check_regime(n_par: float, n_perp: float, threshold: float) -> float:
    if not n_par > 0:
        raise DegeneracyError("no parallel coincidences recorded")
    ratio = n_perp / n_par
    if ratio > threshold:
        raise RegimeError(
            f"N_perp/N_par = {ratio:.4g} exceeds the low-power threshold {threshold:.4g}"
        )
    return ratio


def estimate_channel(
    record: CountRecord,
    t_int: Optional[float] = None,
    threshold: float = DEFAULT_REGIME_THRESHOLD,
) -> ChannelEstimate:
    """Transmittances and total mean pair number from one low-power record."""
    t_int = record.t_int if t_int is None else t_int
    if not t_int > 0:
        raise DomainError(f"coincidence window must be > 0, got {t_int!r}")
    n_a, n_b, n_par, n_perp = _rates(record)
    ratio = _check_regime(n_par, n_perp, threshold)
    if not (n_a > 0 and n_b > 0):
        raise DegeneracyError("singles rates must be positive")
    return ChannelEstimate(
        tau_a=n_par / n_b, tau_b=n_par / n_a, mu=t_int * n_a * n_b / n_par, perp_ratio=ratio
    )


def estimate_c_gamma(
    points: Sequence[PowerPoint],
    threshold: float = DEFAULT_REGIME_THRESHOLD,
    min_points: int = 2,
) -> CalibrationResult:
    """Fit ``gamma = C_gamma sqrt(P)`` through the origin.

    Points failing the regime gate are left out.  The transmittances are
    pooled over the remaining points as ratios of summed rates, and each
    point's ``mu`` comes from its singles through those pooled values,
    which is far less noisy than the per-point coincidence ratio.
    """
    if min_points < 1:
        raise DomainError(f"min_points must be >= 1, got {min_points!r}")
    kept, excluded = [], []
    for point in points:
        n_a, n_b, n_par, n_perp = _rates(point.record)
        try:
            _check_regime(n_par, n_perp, threshold)
        except (RegimeError, DegeneracyError):
            excluded.append(point.power)
            continue
        kept.append((point, n_a, n_b, n_par))
    if len(kept) < min_points:
        raise DomainError(
            f"need at least {min_points} low-power points, got {len(kept)} "
            f"({len(excluded)} rejected by the regime gate)"
        )
    sum_a = sum(k[1] for k in kept)
    sum_b = sum(k[2] for k in kept)
    sum_par = sum(k[3] for k in kept)
    tau_a, tau_b = sum_par / sum_b, sum_par / sum_a

    powers = np.array([k[0].power for k in kept])
    # Average of the two singles-based estimates.
    mu = np.array(
        [k[0].record.t_int * 0.5 * (k[1] / tau_a + k[2] / tau_b) for k in kept]
    )
    gamma = np.arcsinh(np.sqrt(mu))
    x = np.sqrt(powers)
    c_gamma = float(x @ gamma / (x @ x))
    residuals = gamma - c_gamma * x
    return CalibrationResult(
        tau_a=tau_a,
        tau_b=tau_b,
        c_gamma=c_gamma,
        residuals=tuple(float(r) for r in residuals),
        powers=tuple(float(p) for p in powers),
        mu_values=tuple(float(m) for m in mu),
        excluded=tuple(excluded),
    )


def mu_at_power(power: float, c_gamma: float) -> float:
    """``sinh^2(C_gamma sqrt(P))`` with ``P`` in mW."""
    if not power >= 0:
        raise DomainError(f"pump power must be >= 0 mW, got {power!r}")
    if not c_gamma > 0:
        raise DomainError(f"C_gamma must be > 0, got {c_gamma!r}")
    return math.sinh(c_gamma * math.sqrt(power)) ** 2


def power_for_mu(mu: float, c_gamma: float) -> float:
    """Pump power in mW at which the mean photon number reaches ``mu``."""
    if not mu >= 0:
        raise DomainError(f"mean photon number must be >= 0, got {mu!r}")
    if not c_gamma > 0:
        raise DomainError(f"C_gamma must be > 0, got {c_gamma!r}")
    return (math.asinh(math.sqrt(mu)) / c_gamma) ** 2


# --- CSV ----------------------------------------------------------------------


def _data_lines(lines: Iterable[str]) -> Iterable[str]:
    for line in lines:
        if line.lstrip().startswith("#") or not line.strip():
            continue
        yield line


def _as_count(value: str, column: str, row: int) -> int:
    try:
        number = float(value)
    except ValueError:
        raise DomainError(f"row {row}: column {column!r} is not a number: {value!r}") from None
    if number < 0 or number != int(number):
        raise DomainError(f"row {row}: column {column!r} must be a nonnegative integer")
    return int(number)


def _as_float(value: str, column: str, row: int) -> float:
    try:
        number = float(value)
    except ValueError:
        raise DomainError(f"row {row}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(number):
        raise DomainError(f"row {row}: column {column!r} is not finite")
    return number


def _optional_float(value: str, column: str, row: int) -> Optional[float]:
    return None if value == "" else _as_float(value, column, row)


def parse_counts_csv(text: str, t_int: float) -> list[CountRecord]:
    """Parse count records; see :data:`BASE_COLUMNS` for the schema."""
    reader = csv.DictReader(_data_lines(io.StringIO(text)))
    header = reader.fieldnames
    if not header:
        raise DomainError("count file is empty or has no header")
    header = [h.strip() for h in header]
    reader.fieldnames = header
    missing = [c for c in BASE_COLUMNS if c not in header]
    if missing:
        raise DomainError(f"count file lacks required columns: {', '.join(missing)}")
    if all(c in header for c in PATTERN_COLUMNS):
        lossy = False
    elif all(c in header for c in PAIRWISE_COLUMNS):
        lossy = True
    else:
        raise DomainError(
            "count file needs either the 16 pattern columns c_0000..c_1111 "
            "or the pairwise columns n_pp, n_pm, n_mp, n_mm"
        )

    records = []
    for row_no, row in enumerate(reader, start=1):
        if None in row or any(v is None for v in row.values()):
            raise DomainError(f"row {row_no}: wrong number of fields")
        vals = {k: v.strip() for k, v in row.items()}
        kwargs = dict(
            phi_a=_as_float(vals["phi_a_deg"], "phi_a_deg", row_no),
            phi_b=_as_float(vals["phi_b_deg"], "phi_b_deg", row_no),
            t_acq=_as_float(vals["t_acq_s"], "t_acq_s", row_no),
            t_int=t_int,
            singles_a=_as_count(vals["n_a"], "n_a", row_no),
            singles_b=_as_count(vals["n_b"], "n_b", row_no),
            power_mw=_optional_float(vals["power_mw"], "power_mw", row_no),
            loss_db=_optional_float(vals["loss_db"], "loss_db", row_no),
        )
        if lossy:
            kwargs["pairwise"] = SquashedCounts(
                *(float(_as_count(vals[c], c, row_no)) for c in PAIRWISE_COLUMNS)
            )
        else:
            kwargs["pattern_counts"] = np.array(
                [_as_count(vals[c], c, row_no) for c in PATTERN_COLUMNS], dtype=np.int64
            )
        records.append(CountRecord(**kwargs))
    if not records:
        raise DomainError("count file holds no data rows")
    if lossy:
        warnings.warn(
            "pairwise coincidence columns only: click patterns cannot be re-squashed",
            LossyInputWarning,
            stacklevel=2,
        )
    return records


def power_points(records: Iterable[CountRecord]) -> list[PowerPoint]:
    """Pair each record with its pump power; every record must carry one."""
    points = []
    for k, record in enumerate(records, start=1):
        if record.power_mw is None:
            raise DomainError(f"record {k} has no pump power")
        points.append(PowerPoint(record.power_mw, record))
    return points


def read_counts_csv(path: str | Path, t_int: float) -> list[CountRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DomainError(f"{path}: not UTF-8 text") from exc
    return parse_counts_csv(text, t_int)


def format_counts_csv(records: Sequence[CountRecord], comments: Sequence[str] = ()) -> str:
    """CSV text in the canonical pattern form (or pairwise if any record is lossy)."""
    lossy = any(r.lossy for r in records)
    buf = io.StringIO()
    for line in comments:
        for part in str(line).splitlines() or [""]:
            buf.write(f"# {part}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BASE_COLUMNS + (PAIRWISE_COLUMNS if lossy else PATTERN_COLUMNS))
    for r in records:
        base = [
            "" if r.power_mw is None else repr(float(r.power_mw)),
            "" if r.loss_db is None else repr(float(r.loss_db)),
            repr(float(r.phi_a)),
            repr(float(r.phi_b)),
            repr(float(r.t_acq)),
            int(r.singles_a),
            int(r.singles_b),
        ]
        if lossy:
            c = r.squashed()
            tail = [repr(float(v)) for v in (c.n_pp, c.n_pm, c.n_mp, c.n_mm)]
        else:
            tail = [int(v) for v in r.pattern_counts]
        writer.writerow(base + tail)
    return buf.getvalue()


def write_counts_csv(
    records: Sequence[CountRecord], path: str | Path, comments: Sequence[str] = ()
) -> Path:
    return atomic_write_text(path, format_counts_csv(records, comments))

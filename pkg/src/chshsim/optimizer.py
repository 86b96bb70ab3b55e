"""Figure-of-merit sweeps and maximisation over the mean photon number."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NoViolationError, NumericalError
from .model import (
    DEFAULT_G_MODEL,
    DEFAULT_MU_CONVENTION,
    TSIRELSON,
    AngleSet,
    ChannelParams,
    GModel,
    MuConvention,
    SourceParams,
    chsh,
)

MU_MAX_DEFAULT = 0.9
PRESWEEP_POINTS = 64
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

FLAG_OK = "ok"


@dataclass(frozen=True)
class SweepPoint:
    mu: float
    s: float
    delta_s: float
    fom: float
    flag: str = FLAG_OK

    @property
    def ok(self) -> bool:
        return self.flag == FLAG_OK


@dataclass(frozen=True)
class EvalConfig:
    """Everything but ``mu`` that the figure of merit depends on."""

    channel: ChannelParams
    t_int: float = 3e-9
    t_acq: float = 1.0
    alpha: float = 1.0
    angles: AngleSet = AngleSet()
    g_model: GModel = DEFAULT_G_MODEL
    mu_convention: MuConvention = DEFAULT_MU_CONVENTION

    def __post_init__(self) -> None:
        if not self.t_int > 0:
            raise DomainError(f"coincidence window must be > 0, got {self.t_int!r}")
        if not self.t_acq > 0:
            raise DomainError(f"acquisition time must be > 0, got {self.t_acq!r}")
        if not self.alpha > 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha!r}")
        object.__setattr__(self, "g_model", GModel(self.g_model))
        object.__setattr__(self, "mu_convention", MuConvention(self.mu_convention))

    def evaluate(self, mu: float) -> SweepPoint:
        source = SourceParams.from_mu(
            mu, t_int=self.t_int, g_model=self.g_model, mu_convention=self.mu_convention
        )
        try:
            r = chsh(source, self.channel, self.angles, self.alpha, self.t_acq)
        except NumericalError as exc:
            return SweepPoint(mu, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}")
        return SweepPoint(mu, r.s, r.delta_s, r.fom)

    def to_dict(self) -> dict:
        return {
            "tau_a": self.channel.tau_a,
            "tau_b": self.channel.tau_b,
            "t_int": self.t_int,
            "t_acq": self.t_acq,
            "alpha": self.alpha,
            "angles": asdict(self.angles),
            "g_model": self.g_model.value,
            "mu_convention": self.mu_convention.value,
        }


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]
    config: EvalConfig

    @property
    def mu(self) -> np.ndarray:
        return np.array([p.mu for p in self.points])

    @property
    def s(self) -> np.ndarray:
        return np.array([p.s for p in self.points])

    @property
    def fom(self) -> np.ndarray:
        return np.array([p.fom for p in self.points])

    def best(self) -> SweepPoint:
        ok = [p for p in self.points if p.ok]
        if not ok:
            raise NoViolationError("no sweep point evaluated cleanly")
        return max(ok, key=lambda p: p.fom)

    def classical_crossing(self) -> Optional[float]:
        """First ``mu`` where S falls to 2, by linear interpolation; None if it never does."""
        pts = [p for p in self.points if p.ok]
        for a, b in zip(pts, pts[1:]):
            if a.s > 2.0 >= b.s:
                return a.mu + (2.0 - a.s) * (b.mu - a.mu) / (b.s - a.s)
        return None

    def to_csv(self, comments: tuple[str, ...] = ()) -> str:
        buf = io.StringIO()
        for line in comments:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mu", "s", "delta_s", "fom", "flag"])
        for p in self.points:
            w.writerow([repr(p.mu), repr(p.s), repr(p.delta_s), repr(p.fom), p.flag])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "points": [
                {
                    "mu": p.mu,
                    "s": _json_float(p.s),
                    "delta_s": _json_float(p.delta_s),
                    "fom": _json_float(p.fom),
                    "flag": p.flag,
                }
                for p in self.points
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _json_float(x: float):
    return x if math.isfinite(x) else None


def mu_grid(mu_range: tuple[float, float], n_points: int, scale: str = "log") -> np.ndarray:
    lo, hi = mu_range
    if not (0 < lo < hi) or not math.isfinite(hi):
        raise DomainError(f"mu range must satisfy 0 < min < max, got {mu_range!r}")
    if n_points < 2:
        raise DomainError(f"need at least 2 sweep points, got {n_points!r}")
    if scale == "log":
        grid = np.geomspace(lo, hi, n_points)
    elif scale == "linear":
        grid = np.linspace(lo, hi, n_points)
    else:
        raise DomainError(f"scale must be 'log' or 'linear', got {scale!r}")
    grid[0], grid[-1] = lo, hi
    if np.any(np.diff(grid) <= 0):
        raise DomainError("mu range too narrow for the requested number of points")
    return grid


def sweep_mu(
    channel: ChannelParams,
    t_int: float = 3e-9,
    t_acq: float = 1.0,
    alpha: float = 1.0,
    mu_range: tuple[float, float] = (1e-4, MU_MAX_DEFAULT),
    n_points: int = 200,
    scale: str = "log",
    **model_kwargs,
) -> SweepResult:
    """Evaluate the CHSH report over a grid of ``mu``.

    Points where the closed form degenerates are kept with a flag
    describing the failure and NaN values.
    """
    config = EvalConfig(channel, t_int, t_acq, alpha, **model_kwargs)
    return SweepResult(
        tuple(config.evaluate(float(mu)) for mu in mu_grid(mu_range, n_points, scale)), config
    )


@dataclass(frozen=True)
class Optimum:
    mu_star: float
    fom_star: float
    s_at_star: float
    delta_s_at_star: float
    bracket: tuple[float, float]
    evaluations: int
    method: str
    config: Optional[EvalConfig] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        out = {
            "mu_star": self.mu_star,
            "fom_star": self.fom_star,
            "s_at_star": self.s_at_star,
            "delta_s_at_star": self.delta_s_at_star,
            "bracket": list(self.bracket),
            "evaluations": self.evaluations,
            "method": self.method,
        }
        if self.config is not None:
            out["config"] = self.config.to_dict()
        return out


def is_unimodal(values: np.ndarray) -> bool:
    """Nondecreasing then nonincreasing, with every value finite."""
    if not np.all(np.isfinite(values)):
        return False
    d = np.diff(values)
    peak = int(np.argmax(values))
    return bool(np.all(d[:peak] >= 0) and np.all(d[peak:] <= 0))


class _Counter:
    def __init__(self, fn: Callable[[float], SweepPoint]):
        self.fn = fn
        self.calls = 0

    def __call__(self, mu: float) -> SweepPoint:
        self.calls += 1
        return self.fn(mu)


def _score(p: SweepPoint) -> float:
    return p.fom if p.ok else -math.inf


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float):
    """Maximise a unimodal ``f`` on ``[a, b]`` until ``b - a <= tol``."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a, b)


def optimize_mu(
    channel: ChannelParams,
    t_int: float = 3e-9,
    t_acq: float = 1.0,
    alpha: float = 1.0,
    bracket: tuple[float, float] = (1e-4, MU_MAX_DEFAULT),
    tol: float = 1e-4,
    **model_kwargs,
) -> Optimum:
    """Brightness maximising ``(S - 2)/dS``.

    A 64-point log pre-sweep locates the peak and checks unimodality.  A
    unimodal curve is refined by golden section inside the two grid cells
    around the best point; otherwise the grid is refined around its best
    point until the bracket is below ``tol``.
    """
    if not tol > 0:
        raise DomainError(f"tolerance must be > 0, got {tol!r}")
    config = EvalConfig(channel, t_int, t_acq, alpha, **model_kwargs)
    evaluate = _Counter(config.evaluate)
    grid = mu_grid(bracket, PRESWEEP_POINTS, "log")
    pre = [evaluate(float(mu)) for mu in grid]
    scores = np.array([_score(p) for p in pre])
    if not np.any(scores > 0):
        raise NoViolationError(
            "(S - 2)/dS is not positive anywhere on the pre-sweep: no Bell violation "
            f"for mu in [{bracket[0]:.4g}, {bracket[1]:.4g}]"
        )
    k = int(np.argmax(scores))
    lo, hi = float(grid[max(k - 1, 0)]), float(grid[min(k + 1, len(grid) - 1)])

    cache: dict[float, SweepPoint] = {}

    def point(mu: float) -> SweepPoint:
        if mu not in cache:
            cache[mu] = evaluate(mu)
        return cache[mu]

    if is_unimodal(scores):
        method = "golden-section"
        lo, hi = golden_section(lambda m: _score(point(m)), lo, hi, tol)
    else:
        method = "grid-refine"
        while hi - lo > tol:
            sub = np.linspace(lo, hi, 9)
            sub_scores = [_score(point(float(m))) for m in sub]
            j = int(np.argmax(sub_scores))
            lo, hi = float(sub[max(j - 1, 0)]), float(sub[min(j + 1, 8)])

    candidates = [point(lo), point(hi), point(0.5 * (lo + hi))] + [
        p for mu, p in cache.items() if lo <= mu <= hi
    ]
    best = max(candidates, key=_score)
    if not best.ok:
        raise NoViolationError("the peak region failed to evaluate")
    return Optimum(
        mu_star=best.mu,
        fom_star=best.fom,
        s_at_star=best.s,
        delta_s_at_star=best.delta_s,
        bracket=(lo, hi),
        evaluations=evaluate.calls,
        method=method,
        config=config,
    )


__all__ = [
    "MU_MAX_DEFAULT",
    "PRESWEEP_POINTS",
    "SweepPoint",
    "EvalConfig",
    "SweepResult",
    "Optimum",
    "mu_grid",
    "sweep_mu",
    "optimize_mu",
    "golden_section",
    "is_unimodal",
    "TSIRELSON",
]

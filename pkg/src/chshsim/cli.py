"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 invalid input or domain error,
3 numerical degeneracy or no Bell violation, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import itertools
import json
import math
import sys
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .calibration import (
    DEFAULT_REGIME_THRESHOLD,
    estimate_c_gamma,
    estimate_channel,
    format_counts_csv,
    power_points,
    read_counts_csv,
)
from .errors import ChshError, DomainError, NumericalError, StateError
from .model import (
    DEFAULT_G_MODEL,
    DEFAULT_MU_CONVENTION,
    AngleSet,
    ChannelParams,
    GModel,
    MuConvention,
    SourceParams,
    chsh,
    db_to_tau,
)
from .montecarlo import RNG_ALGORITHM, chsh_from_counts, run_experiment
from .optimizer import MU_MAX_DEFAULT, optimize_mu, sweep_mu
from .oracle import IDENTIFY_TOLERANCE, MAX_IDENTIFY_GAMMA, identify_g

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- option tables ------------------------------------------------------------
# Every option defaults to None on the command line so that values from a
# config file can be told apart from explicit flags.  Real defaults live here.

_MODEL_DEFAULTS = {
    "t_int_ns": 3.0,
    "g_model": DEFAULT_G_MODEL.value,
    "mu_convention": DEFAULT_MU_CONVENTION.value,
}
_TIMING_DEFAULTS = {"t_acq": 1.0, "alpha": 1.0}

DEFAULTS: dict[str, dict[str, Any]] = {
    "sweep": {
        **_MODEL_DEFAULTS,
        **_TIMING_DEFAULTS,
        "mu_min": 1e-4,
        "mu_max": MU_MAX_DEFAULT,
        "points": 200,
        "scale": "log",
    },
    "optimize": {
        **_MODEL_DEFAULTS,
        **_TIMING_DEFAULTS,
        "mu_min": 1e-4,
        "mu_max": MU_MAX_DEFAULT,
        "tol": 1e-4,
    },
    "validate": {
        "gamma_min": None,
        "gamma_max": 0.5,
        "gamma_points": 10,
        "tau_grid": "0.1,0.5,0.9",
        "theta_points": 16,
        "candidates": ",".join(m.value for m in GModel),
        "tolerance": IDENTIFY_TOLERANCE,
        "mu_convention": DEFAULT_MU_CONVENTION.value,
    },
    "mc": {
        **_MODEL_DEFAULTS,
        **_TIMING_DEFAULTS,
        "mu": None,
        "gamma": None,
        "seed": 0,
        "shards": 1,
        "angles": "0,45,22.5,67.5",
    },
    "calibrate": {
        "t_int_ns": 3.0,
        "threshold": DEFAULT_REGIME_THRESHOLD,
        "min_points": 1,
    },
}

# Keys that never enter the resolved config.
_NON_CONFIG = {"command", "config", "output", "json_only", "func"}


def _add_channel(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("channel (dB flags take precedence over linear ones)")
    g.add_argument("--tau-a-db", type=float, help="Alice arm loss in dB (sign ignored)")
    g.add_argument("--tau-b-db", type=float, help="Bob arm loss in dB (sign ignored)")
    g.add_argument("--tau-a", type=float, help="Alice arm transmittance in (0, 1]")
    g.add_argument("--tau-b", type=float, help="Bob arm transmittance in (0, 1]")


def _add_model(p: argparse.ArgumentParser, timing: bool = True) -> None:
    p.add_argument("--t-int-ns", type=float, help="coincidence window in ns (default 3)")
    p.add_argument("--g-model", choices=[m.value for m in GModel])
    p.add_argument("--mu-convention", choices=[m.value for m in MuConvention])
    if timing:
        p.add_argument("--t-acq", type=float, help="acquisition time per setting in s (default 1)")
        p.add_argument("--alpha", type=float, help="count-noise scale (default 1)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument(
        "-o", "--output", help="output prefix; writes PREFIX.json, PREFIX.meta.json and any tables"
    )
    p.add_argument(
        "--json", dest="json_only", action="store_true", help="print only the JSON report"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="chshsim",
        description="CHSH statistics for high-brightness entangled photon pairs under loss.",
        epilog="exit codes: 1 usage, 2 domain/input, 3 numerical degeneracy, 4 I/O",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("sweep", help="S, dS and (S-2)/dS over a grid of mu")
    _add_channel(p)
    _add_model(p)
    p.add_argument("--mu-min", type=float)
    p.add_argument("--mu-max", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--scale", choices=["log", "linear"])
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize", help="brightness maximising (S-2)/dS")
    _add_channel(p)
    _add_model(p)
    p.add_argument("--mu-min", type=float, help="lower end of the search bracket")
    p.add_argument("--mu-max", type=float, help="upper end of the search bracket")
    p.add_argument("--tol", type=float, help="bracket width at which the search stops")
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("validate", help="fit the G mapping against the Gaussian oracle")
    p.add_argument("--gamma-min", type=float, help="default gamma-max / 10")
    p.add_argument("--gamma-max", type=float)
    p.add_argument("--gamma-points", type=int)
    p.add_argument("--tau-grid", help="comma-separated transmittances, used for both arms")
    p.add_argument("--theta-points", type=int, help="points on [0, pi/2]")
    p.add_argument("--candidates", help="comma-separated G models")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--mu-convention", choices=[m.value for m in MuConvention])
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("mc", help="simulate counts at the four CHSH settings")
    _add_channel(p)
    _add_model(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mu", type=float, help="mean photon number")
    src.add_argument("--gamma", type=float, help="nonlinear gain")
    p.add_argument("--seed", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--angles", help="phi_A1,phi_A2,phi_B1,phi_B2 in degrees")
    _add_common(p)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("calibrate", help="channel and C_gamma from a count file")
    p.add_argument("input", nargs="?", help="count CSV")
    p.add_argument("--t-int-ns", type=float)
    p.add_argument("--threshold", type=float, help="largest accepted N_perp/N_par")
    p.add_argument("--min-points", type=int, help="points required for the C_gamma fit")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)
    return parser


# --- config resolution --------------------------------------------------------


def load_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise DomainError(f"{path}: config must be a JSON object")
    # An output artifact can be fed back as a config.
    if isinstance(data.get("config"), dict):
        data = data["config"]
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    command = args.command
    resolved = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    if args.config:
        file_cfg = load_config_file(args.config)
        if file_cfg.get("command", command) != command:
            raise DomainError(
                f"config was written for '{file_cfg['command']}', not '{command}'"
            )
        unknown = set(file_cfg) - set(flags) - set(resolved) - {"command", "version"}
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in flags:
            if key in file_cfg:
                resolved[key] = file_cfg[key]
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
        else:
            resolved.setdefault(key, None)
    resolved["command"] = command
    return dict(sorted(resolved.items()))


def channel_from(cfg: dict) -> ChannelParams:
    taus = []
    for side in ("a", "b"):
        db, lin = cfg.get(f"tau_{side}_db"), cfg.get(f"tau_{side}")
        if db is not None:
            taus.append(db_to_tau(float(db)))
        elif lin is not None:
            taus.append(float(lin))
        else:
            raise UsageError(f"missing required option: --tau-{side}-db (or --tau-{side})")
    return ChannelParams(*taus)


def _t_int(cfg: dict) -> float:
    t = float(cfg["t_int_ns"])
    if not (t > 0 and math.isfinite(t)):
        raise DomainError(f"--t-int-ns must be > 0, got {t!r}")
    return t * 1e-9


def _model_kwargs(cfg: dict) -> dict:
    return {"g_model": GModel(cfg["g_model"]), "mu_convention": MuConvention(cfg["mu_convention"])}


def _float_list(text: str, name: str) -> list[float]:
    try:
        values = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise DomainError(f"malformed {name}: {text!r}") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise DomainError(f"malformed {name}: {text!r}")
    return values


# --- output -------------------------------------------------------------------


def jsonable(obj: Any) -> Any:
    """Make nested data strict-JSON safe: non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


class Outputs:
    """Collects artifacts and writes them atomically alongside a metadata file."""

    def __init__(self, prefix: Optional[str], cfg: dict):
        self.prefix = prefix
        self.cfg = cfg
        self.written: list[str] = []

    def path(self, suffix: str) -> Path:
        return Path(f"{self.prefix}{suffix}")

    def write(self, suffix: str, text: str) -> None:
        if self.prefix is None:
            return
        path = self.path(suffix)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, text)
        self.written.append(str(path))

    def finish(self, warnings_seen: list[str]) -> None:
        if self.prefix is None:
            return
        files = {
            p: hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in self.written
        }
        meta = {
            "command": self.cfg["command"],
            "version": __version__,
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "argv": sys.argv[1:],
            "config": self.cfg,
            "files_sha256": files,
            "warnings": warnings_seen,
        }
        atomic_write_text(self.path(".meta.json"), dumps(meta))


def _report(cfg: dict, body: dict) -> dict:
    return {"command": cfg["command"], "version": __version__, "config": cfg, **body}


# --- commands -----------------------------------------------------------------


def cmd_sweep(cfg: dict, out: Outputs, say: Callable[[str], None]) -> dict:
    channel = channel_from(cfg)
    if int(cfg["points"]) < 2:
        raise DomainError("--points must be >= 2")
    result = sweep_mu(
        channel,
        t_int=_t_int(cfg),
        t_acq=float(cfg["t_acq"]),
        alpha=float(cfg["alpha"]),
        mu_range=(float(cfg["mu_min"]), float(cfg["mu_max"])),
        n_points=int(cfg["points"]),
        scale=cfg["scale"],
        **_model_kwargs(cfg),
    )
    crossing = result.classical_crossing()
    flagged = sum(1 for p in result.points if not p.ok)
    try:
        best = result.best()
        peak = {"mu": best.mu, "s": best.s, "delta_s": best.delta_s, "fom": best.fom}
    except NumericalError:
        peak = None
    summary = {"classical_crossing_mu": crossing, "peak": peak, "flagged_points": flagged}
    out.write(".csv", result.to_csv(comments=("config: " + json.dumps(jsonable(cfg), sort_keys=True),)))
    report = _report(cfg, {"summary": summary, "points": result.to_dict()["points"]})
    say(f"{len(result.points)} points, {flagged} flagged")
    say(f"S crosses 2 at mu = {crossing:.6g}" if crossing else "S stays above 2 on this range")
    if peak:
        say(f"best sampled (S-2)/dS = {peak['fom']:.6g} at mu = {peak['mu']:.6g}")
    return report


def cmd_optimize(cfg: dict, out: Outputs, say: Callable[[str], None]) -> dict:
    channel = channel_from(cfg)
    opt = optimize_mu(
        channel,
        t_int=_t_int(cfg),
        t_acq=float(cfg["t_acq"]),
        alpha=float(cfg["alpha"]),
        bracket=(float(cfg["mu_min"]), float(cfg["mu_max"])),
        tol=float(cfg["tol"]),
        **_model_kwargs(cfg),
    )
    body = opt.to_dict()
    body.pop("config", None)
    say(f"mu* = {opt.mu_star:.6g}, (S-2)/dS = {opt.fom_star:.6g}, S = {opt.s_at_star:.6g} ({opt.method})")
    return _report(cfg, {"optimum": body})


def _validate_grids(cfg: dict):
    gamma_max = float(cfg["gamma_max"])
    gamma_min = float(cfg["gamma_min"]) if cfg.get("gamma_min") is not None else gamma_max / 10.0
    n_gamma, n_theta = int(cfg["gamma_points"]), int(cfg["theta_points"])
    if not (0 < gamma_min <= gamma_max <= MAX_IDENTIFY_GAMMA):
        raise DomainError(f"gain grid must satisfy 0 < min <= max <= {MAX_IDENTIFY_GAMMA}")
    if n_gamma < 1 or n_theta < 1:
        raise DomainError("grid point counts must be >= 1")
    taus = _float_list(cfg["tau_grid"], "--tau-grid")
    if any(not (0 < t <= 1) for t in taus):
        raise DomainError("--tau-grid values must lie in (0, 1]")
    try:
        candidates = [GModel(c.strip()) for c in str(cfg["candidates"]).split(",") if c.strip()]
    except ValueError as exc:
        raise DomainError(f"unknown G model in --candidates: {exc}") from None
    if not candidates:
        raise DomainError("--candidates is empty")
    return (
        np.linspace(gamma_min, gamma_max, n_gamma),
        [ChannelParams(a, b) for a, b in itertools.product(taus, repeat=2)],
        np.linspace(0.0, math.pi / 2, n_theta),
        candidates,
    )


def cmd_validate(cfg: dict, out: Outputs, say: Callable[[str], None]) -> dict:
    gammas, channels, thetas, candidates = _validate_grids(cfg)
    report = identify_g(
        gammas, channels, thetas, candidates, float(cfg["tolerance"]), cfg["mu_convention"]
    )
    for message in report.warnings:
        warnings.warn(message, stacklevel=1)
    say(f"{'candidate':<15}{'max |dE|':>14}{'singular':>10}  pass")
    for fit in report.candidates:
        say(f"{fit.name:<15}{fit.max_deviation:>14.3e}{fit.singular_points:>10}  {'yes' if fit.passed else 'no'}")
    say(f"selected: {report.selected}" if report.selected else "selected: none (model mismatch)")
    return _report(cfg, {"fit": report.to_dict()})


def _source_for_mc(cfg: dict) -> SourceParams:
    kwargs = dict(t_int=_t_int(cfg), **_model_kwargs(cfg))
    if cfg.get("mu") is not None and cfg.get("gamma") is not None:
        raise UsageError("give either --mu or --gamma, not both")
    if cfg.get("mu") is not None:
        return SourceParams.from_mu(float(cfg["mu"]), **kwargs)
    if cfg.get("gamma") is not None:
        return SourceParams.from_gain(float(cfg["gamma"]), **kwargs)
    raise UsageError("missing required option: --mu (or --gamma)")


def cmd_mc(cfg: dict, out: Outputs, say: Callable[[str], None]) -> dict:
    channel = channel_from(cfg)
    source = _source_for_mc(cfg)
    angle_values = _float_list(cfg["angles"], "--angles")
    if len(angle_values) != 4:
        raise DomainError("--angles needs exactly four values")
    angles = AngleSet(*angle_values)
    t_acq = float(cfg["t_acq"])
    seed, shards = int(cfg["seed"]), int(cfg["shards"])
    if seed < 0:
        raise DomainError("--seed must be >= 0")
    records = [
        run_experiment(source, channel, setting, t_acq, seed + k, shards)
        for k, setting in enumerate(angles.settings())
    ]
    body: dict[str, Any] = {"rng": RNG_ALGORITHM}
    try:
        body["empirical"] = chsh_from_counts(records, angles, float(cfg["alpha"])).to_dict()
    except NumericalError as exc:
        body["empirical"] = None
        body["empirical_error"] = str(exc)
    try:
        body["model"] = chsh(source, channel, angles, float(cfg["alpha"]), t_acq).to_dict()
    except NumericalError as exc:
        body["model"] = None
        body["model_error"] = str(exc)
    body["records"] = [
        {
            "phi_a_deg": r.phi_a,
            "phi_b_deg": r.phi_b,
            "windows": r.windows,
            "singles_a": r.singles_a,
            "singles_b": r.singles_b,
            "squashed": asdict(r.squashed()),
        }
        for r in records
    ]
    out.write(
        ".csv",
        format_counts_csv(records, ("config: " + json.dumps(jsonable(cfg), sort_keys=True),)),
    )
    emp = body["empirical"]
    if emp:
        say(f"empirical S = {emp['s']:.6g} +/- {emp['delta_s']:.3g}")
    if body["model"]:
        say(f"model     S = {body['model']['s']:.6g} +/- {body['model']['delta_s']:.3g}")
    if emp is None:
        raise NumericalError(body["empirical_error"])
    return _report(cfg, body)


def cmd_calibrate(cfg: dict, out: Outputs, say: Callable[[str], None]) -> dict:
    if not cfg.get("input"):
        raise UsageError("missing required argument: input CSV")
    records = read_counts_csv(cfg["input"], _t_int(cfg))
    threshold = float(cfg["threshold"])
    per_record = []
    for r in records:
        est = estimate_channel(r, threshold=threshold)
        per_record.append(
            {"power_mw": r.power_mw, "tau_a": est.tau_a, "tau_b": est.tau_b, "mu": est.mu,
             "perp_ratio": est.perp_ratio}
        )
        say(f"P = {r.power_mw} mW: tau_A = {est.tau_a:.5g}, tau_B = {est.tau_b:.5g}, mu = {est.mu:.5g}")
    result = estimate_c_gamma(
        power_points(records), threshold=threshold, min_points=int(cfg["min_points"])
    )
    say(f"C_gamma = {result.c_gamma:.6g} mW^-1/2, pooled tau_A = {result.tau_a:.5g}, tau_B = {result.tau_b:.5g}")
    return _report(
        cfg,
        {"records": per_record, "calibration": result.to_dict(), "lossy_input": any(r.lossy for r in records)},
    )


# --- entry point --------------------------------------------------------------


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NumericalError, StateError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ChshError, ValueError)):
        return EXIT_DOMAIN
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    subparser_usage = parser._subparsers._group_actions[0].choices[args.command].format_usage()
    warnings_seen: list[str] = []

    def say(line: str) -> None:
        if not args.json_only:
            print(line)

    try:
        cfg = resolve_config(args)
        out = Outputs(args.output, cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = args.func(cfg, out, say)
        for w in caught:
            warnings_seen.append(str(w.message))
            print(f"warning: {w.message}", file=sys.stderr)
        if warnings_seen:
            report["warnings"] = warnings_seen
        text = dumps(report)
        out.write(".json", text)
        out.finish(warnings_seen)
        if args.json_only:
            sys.stdout.write(text)
        elif args.output:
            say("wrote " + ", ".join(out.written + [str(out.path(".meta.json"))]))
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = _exit_code(exc)
        if code == EXIT_USAGE:
            sys.stderr.write(subparser_usage)
        print(f"chshsim {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

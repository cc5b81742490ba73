"""Command-line front end: ``estimate``, ``simulate`` and ``seb``.

Settings can come from a JSON config file (``--config``); flags given on the
command line override file values. Errors are written to stderr as a JSON
record and mapped to exit codes 2 (configuration), 3 (data) and
4 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .basis import parse_basis
from .clp import ClpBasis, seb_monte_carlo
from .data import Dataset, one_hot
from .estimators import dr, gipw, oaxaca_blinder, plm
from .exceptions import (
    ClpError,
    ConfigError,
    EmptyData,
    MissingColumn,
    NonNumericCell,
    ParseError,
)
from .gps import CLI_NAMES, GpsFamily, fit_mle
from .simulate import Design, default_threads, get_design, run_study

ESTIMATOR_CHOICES = ("ob", "gipw", "dr", "plm")


@dataclass
class RunConfig:
    subcommand: str = ""
    data_path: str | None = None
    outcome: str | None = None
    treatments: list[str] = field(default_factory=list)
    controls: list[str] = field(default_factory=list)
    gps: str = "poisson"
    gps_basis: str | None = None
    clp_basis: str | None = None
    interactions: bool = True
    estimators: list[str] = field(default_factory=lambda: ["dr"])
    se_method: str | None = None
    output: str | None = None
    json_output: str | None = None
    markdown: str | None = None
    seed: int = 0
    n: int = 1000
    reps: int = 5000
    draws: int = 1_000_000
    threads: int | None = None
    design: str | None = None
    design_params: dict | None = None

    def validate(self):
        if self.subcommand == "estimate":
            if not self.data_path:
                raise ConfigError("estimate needs --data")
            if not self.outcome or not self.treatments:
                raise ConfigError("estimate needs --outcome and --treatments")
            roles = [self.outcome, *self.treatments, *self.controls]
            if len(set(roles)) != len(roles):
                raise ConfigError("outcome, treatment and control columns must be disjoint")
            if self.gps not in CLI_NAMES:
                raise ConfigError(f"--gps must be one of {sorted(CLI_NAMES)}")
        bad = [e for e in self.estimators if e not in ESTIMATOR_CHOICES]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}; choose from {ESTIMATOR_CHOICES}")
        if self.subcommand in ("simulate", "seb") and self.design is None and not self.design_params:
            raise ConfigError(f"{self.subcommand} needs --design or design_params")
        return self


def _split_list(value):
    if value is None or isinstance(value, list):
        return value
    return [v.strip() for v in str(value).split(",") if v.strip()]


def load_csv(path, outcome, treatments, controls=()):
    """Read a CSV with a header row into a :class:`Dataset`.

    Raises
    ------
    MissingColumn
        A declared column is absent from the header.
    NonNumericCell
        A cell in a used column cannot be parsed as a finite number; the
        message names the 1-based data row and the column.
    ParseError
        The file is unreadable or has a ragged row.
    EmptyData
        No data rows.
    """
    treatments = list(treatments)
    controls = list(controls)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise EmptyData(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    for col in [outcome, *treatments, *controls]:
        if col not in header:
            raise MissingColumn(f"column {col!r} not found in header of {path}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyData(f"{path} has no data rows")
    idx = [header.index(c) for c in [outcome, *treatments, *controls]]
    out = np.empty((len(body), len(idx)))
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise ParseError(f"row {i} has {len(r)} fields, header has {len(header)}")
        for j, c in enumerate(idx):
            cell = r[c].strip()
            try:
                v = float(cell)
            except ValueError:
                v = np.nan
            if not np.isfinite(v):
                raise NonNumericCell(f"row {i}, column {header[c]!r}: {cell!r} is not a finite number")
            out[i - 1, j] = v
    k = len(treatments)
    return Dataset(
        out[:, 0], out[:, 1:1 + k], out[:, 1 + k:],
        outcome, tuple(treatments), tuple(controls),
    )


def _fmt(v):
    return f"{v:.6g}"


def _write_records(records, path, columns):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    finally:
        if path:
            fh.close()


def _write_json(obj, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2)


def run_estimate(cfg: RunConfig):
    data = load_csv(cfg.data_path, cfg.outcome, cfg.treatments, cfg.controls)
    if cfg.gps == "multinomial":
        if data.k != 1:
            raise ConfigError("multinomial GPS takes one treatment column of category labels 0..K")
        X = one_hot(data.X[:, 0])
        name = cfg.treatments[0]
        data = Dataset(data.y, X, data.W, data.outcome_name,
                       tuple(f"{name}={k + 1}" for k in range(X.shape[1])), data.control_names)
    names = data.control_names
    gps_expr = cfg.gps_basis or ", ".join(["1", *names])
    clp_expr = cfg.clp_basis if cfg.clp_basis is not None else ", ".join(names)
    gps_basis = parse_basis(gps_expr, names)
    clp = ClpBasis(parse_basis(clp_expr, names).without_constant() if clp_expr else
                   parse_basis("1", names).without_constant(), cfg.interactions).fitted(data.W)
    fit = None
    if any(e != "ob" for e in cfg.estimators):
        fit = fit_mle(GpsFamily(cfg.gps, gps_basis, data.k), data.X, data.W)
    se_method = cfg.se_method or "sandwich"
    records = []
    for name in cfg.estimators:
        if name == "ob":
            est = oaxaca_blinder(data, clp)
        elif name == "gipw":
            est = gipw(data, fit)
        elif name == "dr" and cfg.interactions:
            est = dr(data, fit, clp, se_method=se_method)
        else:
            est = plm(data, fit, clp, se_method=se_method)
        records.extend(est.to_records())
    cols = ["estimator", "treatment", "beta", "stderr", "ci_low", "ci_high", "n", "gps", "basis"]
    _write_records(records, cfg.output, cols)
    _write_json(records, cfg.json_output)
    return records


def _design_from(cfg):
    if cfg.design_params:
        base = get_design(cfg.design) if cfg.design is not None else Design()
        params = {**asdict(base), **cfg.design_params}
        known = {f.name for f in fields(Design)}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"unknown design parameter(s) {sorted(unknown)}")
        return Design(**params)
    return get_design(cfg.design)


def run_simulate(cfg: RunConfig):
    design = _design_from(cfg)
    threads = cfg.threads if cfg.threads is not None else default_threads()
    summary = run_study(design, cfg.n, cfg.reps, cfg.seed, cfg.estimators, threads=threads,
                        dr_se=cfg.se_method or "influence")
    text = summary.to_csv()
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if cfg.markdown:
        with open(cfg.markdown, "w", encoding="utf-8") as fh:
            fh.write(summary.to_markdown())
    _write_json(summary.to_dict(), cfg.json_output)
    return summary


def run_seb(cfg: RunConfig):
    design = _design_from(cfg)
    res = seb_monte_carlo(design, cfg.draws, cfg.seed)
    closed = design.seb_closed_form()
    record = {
        "design": design.name,
        "n_draws": res.n_draws,
        "bound_inv": float(res.bound_inv[0, 0]),
        "omega_term": float(res.omega_term[0, 0]),
        "var_b_term": float(res.var_b_term[0, 0]),
        "closed_form": float(closed),
        "n": cfg.n,
        "se_at_n": float(res.se_at(cfg.n)[0]),
    }
    _write_records([record], cfg.output, list(record))
    _write_json(record, cfg.json_output)
    return record


def build_parser():
    p = argparse.ArgumentParser(prog="clpest", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--output", "-o", default=S, help="CSV output path (default stdout)")
        sp.add_argument("--json", dest="json_output", default=S, help="full-precision JSON sidecar")
        sp.add_argument("--seed", type=int, default=S)

    est = sub.add_parser("estimate", help="estimate the average slope from a CSV file")
    common(est)
    est.add_argument("--data", dest="data_path", default=S)
    est.add_argument("--outcome", default=S)
    est.add_argument("--treatments", default=S, help="comma-separated treatment columns")
    est.add_argument("--controls", default=S, help="comma-separated control columns")
    est.add_argument("--gps", choices=sorted(CLI_NAMES), default=S)
    est.add_argument("--gps-basis", default=S, help='e.g. "1, w, w^2"')
    est.add_argument("--clp-basis", default=S, help='e.g. "w, w^2, w1*w2"')
    est.add_argument("--no-interactions", dest="interactions", action="store_false", default=S)
    est.add_argument("--estimator", "--estimators", dest="estimators", default=S,
                     help="comma-separated subset of ob,gipw,dr,plm")
    est.add_argument("--se-method", choices=("sandwich", "influence"), default=S)

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    common(sim)
    sim.add_argument("--design", default=S, help="preset 1-4")
    sim.add_argument("--design-params", default=S, help='JSON object overriding design fields')
    sim.add_argument("--n", type=int, default=S)
    sim.add_argument("--reps", type=int, default=S)
    sim.add_argument("--estimators", "--estimator", dest="estimators", default=S)
    sim.add_argument("--threads", type=int, default=S)
    sim.add_argument("--markdown", default=S, help="also write a markdown table here")
    sim.add_argument("--se-method", choices=("sandwich", "influence"), default=S)

    seb = sub.add_parser("seb", help="Monte Carlo efficiency bound for a design")
    common(seb)
    seb.add_argument("--design", default=S)
    seb.add_argument("--design-params", default=S)
    seb.add_argument("--draws", type=int, default=S)
    seb.add_argument("--n", type=int, default=S, help="sample size for the implied SE (default 1000)")
    return p


def config_from_args(argv=None):
    args = vars(build_parser().parse_args(argv))
    values = {}
    path = args.pop("config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(args)
    for key in ("treatments", "controls", "estimators"):
        if key in values:
            values[key] = _split_list(values[key])
    if isinstance(values.get("design_params"), str):
        try:
            values["design_params"] = json.loads(values["design_params"])
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--design-params is not valid JSON: {exc}") from None
    if values.get("design") is not None:
        values["design"] = str(values["design"])
    if values.get("subcommand") == "simulate" and "estimators" not in values:
        values["estimators"] = ["ob", "gipw", "dr"]
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    return RunConfig(**values).validate()


def run(cfg: RunConfig):
    return {"estimate": run_estimate, "simulate": run_simulate, "seb": run_seb}[cfg.subcommand](cfg)


def main(argv=None):
    try:
        cfg = config_from_args(argv)
        run(cfg)
    except ClpError as exc:
        sys.stderr.write(json.dumps(exc.to_record()) + "\n")
        return exc.exit_status
    return 0


if __name__ == "__main__":
    sys.exit(main())

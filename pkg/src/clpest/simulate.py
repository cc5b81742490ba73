"""Monte Carlo study of the three estimators.

The designs draw ``W, U ~ N(0, 1)`` independently,
``X | W ~ Poisson(exp(phi0 + phi1 W + phi2 W^2))`` and
``Y = a(W) + b(W) X + sigma_u U`` with

    a(W) = alpha0 + gamma1 W + gamma2 (W^2 - 1)
    b(W) = beta0  + delta1 W + delta2 (W^2 - 1)

(the population moments ``E[W] = 0`` and ``E[W^2] = 1`` do the centering).
Estimation always uses a Poisson GPS with basis ``(1, W)`` and a CLP basis
linear in ``W``, so designs 2 and 4 misspecify the GPS and designs 3 and 4
misspecify the CLP.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import BasisSpec
from .clp import ClpBasis
from .data import Dataset
from .estimators import dr, gipw, oaxaca_blinder, plm
from .exceptions import ClpError, ConfigError, TooManyFailures
from .gps import GpsFamily, fit_mle
from .rng import stream

ESTIMATOR_ORDER = ("ob", "gipw", "dr", "plm")
LABELS = {"ob": "Oaxaca-Blinder", "gipw": "GIPW", "dr": "DR", "plm": "PLM"}
THREADS_ENV = "CLPEST_THREADS"


@dataclass(frozen=True)
class Design:
    alpha0: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 0.0
    beta0: float = 2.0
    delta1: float = 1.22
    delta2: float = 0.0
    phi0: float = 0.1
    phi1: float = 0.5
    phi2: float = 0.0
    sigma_u: float = 1.0
    name: str = "custom"

    # -- population functions -------------------------------------------------

    def a0(self, W):
        return self.alpha0 + self.gamma1 * W + self.gamma2 * (W**2 - 1.0)

    def b0(self, W):
        return self.beta0 + self.delta1 * W + self.delta2 * (W**2 - 1.0)

    def treatment_mean_var(self, W):
        e = np.exp(self.phi0 + self.phi1 * W + self.phi2 * W**2)
        return e, e

    def draw_controls(self, n, rng):
        return rng.standard_normal(n)

    def draw_treatment(self, W, rng):
        return rng.poisson(self.treatment_mean_var(W)[0]).astype(float)

    @property
    def gps_truth_basis(self):
        return "1, w, w^2" if self.phi2 else "1, w"

    def seb_closed_form(self):
        """``sigma^2 E[exp(-k(W)'phi)] + Var(b(W))`` from the Gaussian MGF.

        ``E[exp(tW + sW^2)] = (1 - 2s)^{-1/2} exp(t^2 / (2 (1 - 2s)))`` for
        ``s < 1/2``; ``Var(b(W)) = delta1^2 + 2 delta2^2``.
        """
        s, t = -self.phi2, -self.phi1
        if s >= 0.5:
            raise ConfigError("closed form needs phi2 > -1/2")
        mgf = (1 - 2 * s) ** -0.5 * np.exp(t**2 / (2 * (1 - 2 * s)))
        return self.sigma_u**2 * np.exp(-self.phi0) * mgf + self.delta1**2 + 2 * self.delta2**2


DESIGNS = {
    1: Design(1.0, 1.0, 0.0, 2.0, 1.22, 0.0, 0.1, 0.5, 0.0, name="1"),
    2: Design(1.0, 1.0, 0.0, 2.0, 1.26, 0.0, 0.1, 0.5, 0.1, name="2"),
    3: Design(1.5, 1.0, 0.5, 2.5, 1.0, 0.5, 0.1, 0.5, 0.0, name="3"),
    4: Design(1.5, 1.0, 0.5, 2.5, 1.05, 0.5, 0.1, 0.5, 0.1, name="4"),
}


def get_design(design):
    if isinstance(design, Design):
        return design
    try:
        return DESIGNS[int(design)]
    except (KeyError, ValueError):
        raise ConfigError(f"unknown design {design!r}; presets are 1-4") from None


def draw_sample(design: Design, n, rng):
    """One dataset from the design. Draw order: W, U, then X."""
    if n < 1:
        raise ConfigError("sample size must be at least 1")
    W = design.draw_controls(n, rng)
    U = rng.standard_normal(n)
    X = design.draw_treatment(W, rng)
    y = design.a0(W) + design.b0(W) * X + design.sigma_u * U
    return Dataset(y, X[:, None], W[:, None])


def write_dataset_csv(data: Dataset, path):
    """Export with full round-trip precision (``repr`` of each float)."""
    header = [data.outcome_name, *data.treatment_names, *data.control_names]
    rows = np.column_stack([data.y, data.X, data.W])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


GPS_BASIS = BasisSpec(((), (0,)), 1, ("w",))
CLP_BASIS = BasisSpec(((0,),), 1, ("w",))


def estimate_replicate(data: Dataset, estimators, dr_se="influence"):
    """Run the requested estimators with the study's working models.

    DR and PLM standard errors default to the plug-in influence function,
    the construction the published study reports; pass ``dr_se="sandwich"``
    for the stacked sandwich. Returns ``{name: (beta, se)}`` and raises
    ClpError on a failed replicate.
    """
    out = {}
    clp = ClpBasis(CLP_BASIS).fitted(data.W)
    fit = None
    if any(e in ("gipw", "dr", "plm") for e in estimators):
        fit = fit_mle(GpsFamily("poisson_log", GPS_BASIS), data.X, data.W)
    for name in estimators:
        if name == "ob":
            est = oaxaca_blinder(data, clp)
        elif name == "gipw":
            est = gipw(data, fit)
        elif name == "dr":
            est = dr(data, fit, clp, se_method=dr_se)
        elif name == "plm":
            est = plm(data, fit, clp, se_method=dr_se)
        else:
            raise ConfigError(f"unknown estimator {name!r}")
        out[name] = (float(est.beta[0]), float(est.stderr[0]))
    return out


def _run_chunk(args):
    from threadpoolctl import threadpool_limits

    design, n, seed, estimators, reps, dr_se = args
    results = []
    with threadpool_limits(1):
        for r in reps:
            data = draw_sample(design, n, stream(seed, r))
            try:
                results.append((r, estimate_replicate(data, estimators, dr_se)))
            except ClpError as exc:
                results.append((r, exc.code))
    return results


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    median_bias: float
    sd: float
    median_se: float
    coverage: float
    coverage_mcse: float
    n_ok: int
    fail_rate: float


def summarize(beta, se, truth, estimator="", n_failed=0):
    """Table-style summary of replicate estimates.

    Coverage is the fraction of replicates with ``|beta - truth| <= 1.96 se``;
    ``coverage_mcse`` is the Monte Carlo standard error ``sqrt(0.05*0.95/B)``
    of a nominal 95% coverage estimate.
    """
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    if beta.size == 0:
        raise ValueError("no replicates to summarize")
    err = beta - truth
    b = beta.size
    sd = float(np.std(beta, ddof=1)) if b > 1 else 0.0
    return SummaryRow(
        estimator=estimator,
        median_bias=float(np.median(err)),
        sd=sd,
        median_se=float(np.median(se)),
        coverage=float(np.mean(np.abs(err) <= 1.96 * se)),
        coverage_mcse=float(np.sqrt(0.05 * 0.95 / b)),
        n_ok=b,
        fail_rate=n_failed / (b + n_failed),
    )


@dataclass
class StudySummary:
    design: str
    n: int
    reps: int
    seed: int
    rows: list[SummaryRow]
    estimates: dict = field(default_factory=dict, repr=False)

    def row(self, estimator):
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design", "estimator", "N", "B", "median_bias", "sd", "median_se", "coverage", "fail_rate"])
        for r in self.rows:
            w.writerow([
                self.design, r.estimator, self.n, self.reps,
                f"{r.median_bias:.6g}", f"{r.sd:.6g}", f"{r.median_se:.6g}",
                f"{r.coverage:.6g}", f"{r.fail_rate:.6g}",
            ])
        return buf.getvalue()

    def to_markdown(self):
        lines = [
            f"Design {self.design}, N={self.n:,}, B={self.reps:,}",
            "",
            "| | Bias | Std. Dev. | Std. Err. | Coverage |",
            "|---|---|---|---|---|",
        ]
        for r in self.rows:
            lines.append(
                f"| {LABELS.get(r.estimator, r.estimator)} | {r.median_bias:.4f} | {r.sd:.4f} "
                f"| {r.median_se:.4f} | {r.coverage:.4f} |"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "design": self.design, "n": self.n, "reps": self.reps, "seed": self.seed,
            "rows": [asdict(r) for r in self.rows],
        }


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def run_study(design, n, reps, seed=0, estimators=("ob", "gipw", "dr"), threads=None,
              max_fail_rate=0.01, chunk_size=250, dr_se="influence"):
    """Replicate the study ``reps`` times and summarize each estimator.

    Replicate ``r`` draws from stream ``(seed, r)``, so results are identical
    for any ``threads``. Failed replicates are dropped and counted; more than
    ``max_fail_rate`` of them raises TooManyFailures.
    """
    design = get_design(design)
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    estimators = tuple(e for e in ESTIMATOR_ORDER if e in set(estimators))
    if not estimators:
        raise ConfigError("no estimators selected")
    threads = default_threads() if threads is None else threads
    chunks = [
        (design, n, seed, estimators, range(s, min(s + chunk_size, reps)), dr_se)
        for s in range(0, reps, chunk_size)
    ]
    if threads > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    results = sorted((r for part in parts for r in part), key=lambda t: t[0])
    ok = [res for _, res in results if isinstance(res, dict)]
    n_failed = reps - len(ok)
    if n_failed > max_fail_rate * reps:
        codes = sorted({res for _, res in results if not isinstance(res, dict)})
        raise TooManyFailures(f"{n_failed} of {reps} replicates failed ({', '.join(codes)})")
    if not ok:
        raise TooManyFailures("every replicate failed")
    rows = []
    estimates = {}
    for name in estimators:
        beta = np.array([res[name][0] for res in ok])
        se = np.array([res[name][1] for res in ok])
        estimates[name] = (beta, se)
        rows.append(summarize(beta, se, design.beta0, name, n_failed))
    return StudySummary(design.name, n, reps, seed, rows, estimates)

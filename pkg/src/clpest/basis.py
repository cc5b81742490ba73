"""Polynomial bases over control columns.

A basis is an ordered list of monomials in the raw controls. Each monomial is
stored as a sorted tuple of column indices, so ``()`` is the constant,
``(0,)`` is the first control, ``(0, 0)`` its square and ``(0, 1)`` the
product of the first two controls.

The string grammar accepted by :func:`parse_basis` is a comma-separated list
of terms built from column names, ``^`` powers and ``*`` products::

    "1, w, w^2"          # constant, w, w squared
    "w1, w2, w1*w2"      # two controls and their interaction
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


@dataclass(frozen=True)
class BasisSpec:
    """Ordered monomial basis k(W) over ``n_controls`` raw control columns."""

    terms: tuple[tuple[int, ...], ...]
    n_controls: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        canon = tuple(tuple(sorted(t)) for t in self.terms)
        object.__setattr__(self, "terms", canon)
        if len(set(canon)) != len(canon):
            raise ConfigError(f"duplicate basis terms in {self.describe()}")
        for t in canon:
            for j in t:
                if not 0 <= j < self.n_controls:
                    raise ConfigError(
                        f"basis term references control {j}, "
                        f"only {self.n_controls} available"
                    )
        if self.names is not None and len(self.names) != self.n_controls:
            raise ConfigError("names must have one entry per control column")

    def __len__(self):
        return len(self.terms)

    @property
    def has_constant(self):
        return () in self.terms

    def evaluate(self, W):
        """Evaluate the basis on an ``(N, n_controls)`` array, returning ``(N, L)``."""
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if W.shape[1] != self.n_controls:
            raise ConfigError(
                f"basis expects {self.n_controls} control columns, got {W.shape[1]}"
            )
        out = np.empty((W.shape[0], len(self.terms)))
        for col, term in enumerate(self.terms):
            v = np.ones(W.shape[0])
            for j in term:
                v = v * W[:, j]
            out[:, col] = v
        return out

    def without_constant(self):
        return BasisSpec(tuple(t for t in self.terms if t), self.n_controls, self.names)

    def term_name(self, term):
        if not term:
            return "1"
        names = self.names or tuple(f"w{j}" for j in range(self.n_controls))
        parts = []
        for j in sorted(set(term)):
            p = term.count(j)
            parts.append(names[j] if p == 1 else f"{names[j]}^{p}")
        return "*".join(parts)

    def describe(self):
        return ", ".join(self.term_name(t) for t in self.terms)


def constant_basis(n_controls=0):
    return BasisSpec(((),), n_controls)


def linear_basis(n_controls, constant=True, names=None):
    terms = ([()] if constant else []) + [(j,) for j in range(n_controls)]
    return BasisSpec(tuple(terms), n_controls, names)


def polynomial_basis(n_controls, degree, constant=True, interactions=True, names=None):
    """All monomials up to ``degree``; without ``interactions`` only pure powers."""
    from itertools import combinations_with_replacement

    terms = [()] if constant else []
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_controls), d):
            if interactions or len(set(combo)) == 1:
                terms.append(combo)
    return BasisSpec(tuple(terms), n_controls, names)


def parse_basis(expr: str, names: Sequence[str]) -> BasisSpec:
    """Parse a basis expression over the given control column names."""
    names = tuple(names)
    index = {n: i for i, n in enumerate(names)}
    terms = []
    for raw in expr.split(","):
        raw = raw.strip()
        if not raw:
            raise ConfigError(f"empty term in basis expression {expr!r}")
        if raw == "1":
            terms.append(())
            continue
        term = []
        for factor in raw.split("*"):
            factor = factor.strip()
            base, _, power = factor.partition("^")
            base = base.strip()
            if not _NAME.match(base):
                raise ConfigError(f"bad factor {factor!r} in basis term {raw!r}")
            if base not in index:
                raise ConfigError(f"basis term {raw!r} references unknown control {base!r}")
            try:
                p = int(power) if power else 1
            except ValueError:
                raise ConfigError(f"bad power in basis term {raw!r}") from None
            if p < 1:
                raise ConfigError(f"power must be >= 1 in basis term {raw!r}")
            term.extend([index[base]] * p)
        terms.append(tuple(term))
    return BasisSpec(tuple(terms), len(names), names)

"""Mixture-polynomial algebra for multi-species spherical spin models.

A model is a species layout (block sizes N_s with limiting proportions
lambda_s) together with a mixture polynomial

    xi(x) = sum_p Delta_p^2 * prod_s x(s)^p(s),

where p runs over nonzero multi-degrees and x is a per-species overlap
vector.  Coefficients are stored as the variances Delta_p^2.  Everything
here is exact floating-point algebra: evaluation, gradients, the shifted
mixtures around an overlap q, and the scalar Onsager / log-volume terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SpeciesLayout",
    "OverlapVector",
    "Mixture",
    "as_overlap_array",
    "require_shell_overlap",
    "require_measured_overlap",
    "eval_mixture",
    "grad_mixture",
    "shifted_coefficients",
    "xi_q",
    "nesting_compose",
    "onsager_term",
    "log_volume_term",
    "scale_mixture",
    "mixture_to_json",
    "mixture_from_json",
    "random_mixture",
]


@dataclass(frozen=True)
class SpeciesLayout:
    """Block structure of coordinate space: labels, sizes N_s, proportions lambda_s.

    proportions defaults to N_s / N.  A single-species layout carries
    proportion 1.0.
    """

    species: tuple[str, ...]
    sizes: tuple[int, ...]
    proportions: tuple[float, ...] | None = None

    def __post_init__(self):
        species = tuple(str(s) for s in self.species)
        sizes = tuple(int(n) for n in self.sizes)
        if len(species) == 0:
            raise ValueError("layout needs at least one species")
        if len(set(species)) != len(species):
            raise ValueError(f"duplicate species labels: {species}")
        if len(sizes) != len(species):
            raise ValueError("sizes and species length mismatch")
        if any(n < 1 for n in sizes):
            raise ValueError(f"all block sizes must be >= 1, got {sizes}")
        total = sum(sizes)
        if self.proportions is None:
            props = tuple(n / total for n in sizes)
        else:
            props = tuple(float(x) for x in self.proportions)
            if len(props) != len(species):
                raise ValueError("proportions and species length mismatch")
        if any(not (0.0 < lam <= 1.0) for lam in props):
            raise ValueError(f"proportions must lie in (0, 1], got {props}")
        if abs(sum(props) - 1.0) > 1e-12:
            raise ValueError(f"proportions must sum to 1 within 1e-12, got {sum(props)!r}")
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "proportions", props)

    @property
    def n(self) -> int:
        """Total number of coordinates N."""
        return sum(self.sizes)

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def slices(self) -> tuple[slice, ...]:
        """Coordinate slice of each species block, in species order."""
        out, start = [], 0
        for n in self.sizes:
            out.append(slice(start, start + n))
            start += n
        return tuple(out)

    def species_of_coordinate(self) -> np.ndarray:
        """Length-N integer array mapping coordinate index -> species index."""
        return np.repeat(np.arange(self.n_species), self.sizes)

    def index(self, label: str) -> int:
        return self.species.index(label)

    def scaled(self, factor: int) -> "SpeciesLayout":
        """Same species and proportions with every block size multiplied."""
        if factor < 1:
            raise ValueError("factor must be >= 1")
        return SpeciesLayout(self.species, tuple(n * factor for n in self.sizes), self.proportions)


@dataclass(frozen=True)
class OverlapVector:
    """Per-species real values: shell parameters or measured overlaps."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


def as_overlap_array(q, n_species: int) -> np.ndarray:
    """Coerce an OverlapVector / sequence / scalar-per-species array to a float vector."""
    vals = q.as_array() if isinstance(q, OverlapVector) else np.asarray(q, dtype=float)
    if vals.shape != (n_species,):
        raise ValueError(f"expected {n_species} per-species values, got shape {vals.shape}")
    return vals


def require_shell_overlap(q, n_species: int) -> np.ndarray:
    """Validate a shell parameter: every q(s) in [0, 1)."""
    vals = as_overlap_array(q, n_species)
    if np.any(vals < 0.0) or np.any(vals >= 1.0):
        raise ValueError(f"shell overlap must lie in [0, 1) per species, got {vals}")
    return vals


def require_measured_overlap(q, n_species: int) -> np.ndarray:
    """Validate a measured overlap: every value in [-1-1e-9, 1+1e-9]."""
    vals = as_overlap_array(q, n_species)
    if np.any(np.abs(vals) > 1.0 + 1e-9):
        raise ValueError(f"measured overlap outside [-1-1e-9, 1+1e-9]: {vals}")
    return vals


@dataclass(frozen=True)
class Mixture:
    """Sparse mixture polynomial: multi-degree p -> coefficient Delta_p^2 > 0.

    terms are kept sorted lexicographically by multi-degree for canonical
    serialization.  Exact zeros are pruned; negative coefficients rejected.
    An empty mixture (H identically 0) is allowed.
    """

    terms: tuple[tuple[tuple[int, ...], float], ...]
    n_species: int
    max_total_degree: int = 0

    def __post_init__(self):
        seen = {}
        for p, c in self.terms:
            p = tuple(int(d) for d in p)
            c = float(c)
            if len(p) != self.n_species:
                raise ValueError(f"degree key {p} does not match {self.n_species} species")
            if any(d < 0 for d in p):
                raise ValueError(f"negative degree in {p}")
            if sum(p) < 1:
                raise ValueError("every mixture term needs total degree |p| >= 1")
            if c < 0.0:
                raise ValueError(f"coefficient for {p} must be >= 0, got {c}")
            if c == 0.0:
                continue  # prune exact zeros only
            if p in seen:
                raise ValueError(f"duplicate degree key {p}")
            seen[p] = c
        ordered = tuple(sorted(seen.items()))
        degree = max((sum(p) for p, _ in ordered), default=0)
        max_deg = self.max_total_degree if self.max_total_degree else degree
        if max_deg < degree:
            raise ValueError(f"max_total_degree {max_deg} below realized degree {degree}")
        object.__setattr__(self, "terms", ordered)
        object.__setattr__(self, "max_total_degree", max_deg)

    @classmethod
    def from_terms(cls, terms: Mapping[tuple[int, ...], float] | Iterable, n_species: int | None = None,
                   max_total_degree: int = 0) -> "Mixture":
        items = list(terms.items()) if isinstance(terms, Mapping) else list(terms)
        if n_species is None:
            if not items:
                raise ValueError("n_species required for an empty mixture")
            n_species = len(items[0][0])
        return cls(tuple((tuple(p), float(c)) for p, c in items), n_species, max_total_degree)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return dict(self.terms)

    def coefficient(self, p: Sequence[int]) -> float:
        return self.as_dict().get(tuple(int(d) for d in p), 0.0)

    @property
    def degrees(self) -> tuple[tuple[int, ...], ...]:
        return tuple(p for p, _ in self.terms)

    def __len__(self) -> int:
        return len(self.terms)


def eval_mixture(xi: Mixture, x) -> float:
    """xi(x) = sum_p Delta_p^2 prod_s x(s)^p(s), by repeated multiplication."""
    vals = as_overlap_array(x, xi.n_species)
    total = 0.0
    for p, c in xi.terms:
        term = c
        for s, d in enumerate(p):
            for _ in range(d):  # integer powers kept exact
                term *= vals[s]
        total += term
    return total


def grad_mixture(xi: Mixture, x) -> np.ndarray:
    """Per-species partial derivatives of xi at x."""
    vals = as_overlap_array(x, xi.n_species)
    out = np.zeros(xi.n_species)
    for p, c in xi.terms:
        for s, d in enumerate(p):
            if d == 0:
                continue
            term = c * d
            for t, e in enumerate(p):
                power = e - 1 if t == s else e
                for _ in range(power):
                    term *= vals[t]
            out[s] += term
    return out


def shifted_coefficients(xi: Mixture, q) -> Mixture:
    """The recentered mixture xi-tilde around shell overlap q.

    Coefficients for |p| >= 1:

        Delta_{q,p}^2 = sum_{p' >= p} Delta_{p'}^2
                        * prod_s C(p'(s), p(s)) (1-q(s))^p(s) q(s)^(p'(s)-p(s)),

    which satisfies xi-tilde_q(x) = xi((1-q)x + q) - xi(q) identically.
    """
    qv = require_shell_overlap(q, xi.n_species)
    out: dict[tuple[int, ...], float] = {}
    for p_src, c in xi.terms:
        # expand ((1-q)x + q)^p'(s) binomially per species
        per_species = []
        for s, d in enumerate(p_src):
            col = [math.comb(d, j) * (1.0 - qv[s]) ** j * qv[s] ** (d - j) for j in range(d + 1)]
            per_species.append(col)
        for p in np.ndindex(*[d + 1 for d in p_src]):
            if sum(p) < 1:
                continue
            w = c
            for s, j in enumerate(p):
                w *= per_species[s][j]
            key = tuple(int(j) for j in p)
            out[key] = out.get(key, 0.0) + w
    return Mixture.from_terms(out, n_species=xi.n_species, max_total_degree=xi.max_total_degree)


def xi_q(xi: Mixture, q) -> Mixture:
    """xi_q: the recentered mixture with all |p| = 1 terms removed.

    The linear correction term -(1-q)grad xi(q) x of the defining display
    cancels the |p| = 1 coefficients of xi-tilde_q exactly.
    """
    tilde = shifted_coefficients(xi, q)
    kept = {p: c for p, c in tilde.terms if sum(p) >= 2}
    return Mixture.from_terms(kept, n_species=xi.n_species, max_total_degree=xi.max_total_degree)


def nesting_compose(q, q_prime) -> OverlapVector:
    """q-hat with q-hat(s) = q(s) + (1-q(s)) q'(s); satisfies 1-q-hat = (1-q)(1-q')."""
    n = len(q.values) if isinstance(q, OverlapVector) else len(np.atleast_1d(q))
    qv = require_shell_overlap(q, n)
    qp = require_shell_overlap(q_prime, n)
    return OverlapVector(tuple(qv + (1.0 - qv) * qp))


def onsager_term(xi: Mixture, q) -> float:
    """One half of xi_q evaluated at the all-ones overlap."""
    ones = np.ones(xi.n_species)
    return 0.5 * eval_mixture(xi_q(xi, q), ones)


def log_volume_term(layout: SpeciesLayout, q) -> float:
    """(1/2) sum_s lambda_s log(1 - q(s)); the shell entropy term, <= 0."""
    qv = require_shell_overlap(q, layout.n_species)
    return 0.5 * float(np.dot(layout.proportions, np.log1p(-qv)))


def scale_mixture(xi: Mixture, beta: float) -> Mixture:
    """Multiply every Delta_p^2 by beta^2 so the Hamiltonian scales linearly by beta."""
    beta = float(beta)
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return Mixture.from_terms({p: beta * beta * c for p, c in xi.terms},
                              n_species=xi.n_species, max_total_degree=xi.max_total_degree)


def mixture_to_json(xi: Mixture, species: Sequence[str]) -> dict:
    """JSON-ready dict {"species": [...], "terms": [{"p": [...], "delta_sq": ...}]}."""
    species = list(species)
    if len(species) != xi.n_species:
        raise ValueError("species labels do not match mixture arity")
    return {
        "species": species,
        "terms": [{"p": list(p), "delta_sq": c} for p, c in xi.terms],
    }


def mixture_from_json(obj: Mapping) -> tuple[Mixture, tuple[str, ...]]:
    """Inverse of mixture_to_json; returns the mixture and its species labels."""
    species = tuple(str(s) for s in obj["species"])
    terms = {}
    for entry in obj["terms"]:
        p = tuple(int(d) for d in entry["p"])
        terms[p] = float(entry["delta_sq"])
    return Mixture.from_terms(terms, n_species=len(species)), species


def random_mixture(rng: np.random.Generator, n_species: int, max_total_degree: int = 4,
                   n_terms: int = 4, scale: float = 1.0,
                   min_total_degree: int = 1) -> Mixture:
    """Random finite mixture for property suites: positive coefficients."""
    terms: dict[tuple[int, ...], float] = {}
    tries = 0
    while len(terms) < n_terms and tries < 100 * n_terms:
        tries += 1
        p = tuple(int(d) for d in rng.integers(0, max_total_degree + 1, size=n_species))
        if not min_total_degree <= sum(p) <= max_total_degree:
            continue
        terms[p] = scale * float(rng.uniform(0.1, 1.0))
    return Mixture.from_terms(terms, n_species=n_species, max_total_degree=max_total_degree)

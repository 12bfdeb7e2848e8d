"""Gaussian Hamiltonian realization with covariance N·xi(R(sigma, sigma')).

Two backends share one instance type.  The coefficient-tensor backend draws
the disorder arrays explicitly (one dense array of i.i.d. standard normals
per mixture term, weighted by the per-pattern scalar of the coefficient
identity), so the energy and its Euclidean gradient are evaluable anywhere.
The covariance-factor backend never materializes coefficients; it samples
exact joint values on finite point sets from the covariance matrix.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np

from .geometry import Configuration, overlap
from .mixture import (
    Mixture,
    SpeciesLayout,
    eval_mixture,
    grad_mixture,
    mixture_from_json,
    mixture_to_json,
    require_shell_overlap,
)

__all__ = [
    "TENSOR_BACKEND",
    "COVARIANCE_BACKEND",
    "DEFAULT_MEMORY_BUDGET",
    "ExternalField",
    "HamiltonianInstance",
    "build_instance",
    "energy",
    "energy_many",
    "gradient",
    "realize_on_points",
    "factor_covariance",
    "attach_external_field",
    "lipschitz_ratio",
    "sample_in_ball",
    "save_instance",
    "load_instance",
]

TENSOR_BACKEND = "coefficient-tensor"
COVARIANCE_BACKEND = "covariance-factor"
DEFAULT_MEMORY_BUDGET = 2**28  # dense disorder entries across all terms

# chunk staged batch contractions so intermediates stay below ~2^24 floats
_BATCH_ELEMENT_CAP = 2**24


@lru_cache(maxsize=256)
def _pattern_mask(sizes: tuple[int, ...], p: tuple[int, ...]) -> np.ndarray:
    """0/1 tensor over index tuples marking those whose species pattern is p."""
    n = sum(sizes)
    indicators = []
    start = 0
    for d in sizes:
        e = np.zeros(n)
        e[start:start + d] = 1.0
        indicators.append(e)
        start += d
    slots = [s for s, c in enumerate(p) for _ in range(c)]
    mask = np.zeros((n,) * len(slots))
    for order in sorted(set(itertools.permutations(slots))):
        mask += reduce(np.multiply.outer, [indicators[s] for s in order])
    mask.setflags(write=False)
    return mask


def _tuple_scalar(layout: SpeciesLayout, p: tuple[int, ...], delta_sq: float) -> float:
    """Per-tuple coefficient: sqrt(Delta_p^2 (prod_s p(s)!)/k! prod_s N_s^-p(s))."""
    val = delta_sq / math.factorial(sum(p))
    for s, c in enumerate(p):
        val *= math.factorial(c) / float(layout.sizes[s]) ** c
    return math.sqrt(val)


@dataclass(frozen=True, eq=False)
class ExternalField:
    """Independent one-spin term sum_s sqrt(N/N_s) D_s sum_{i in I_s} J_i sigma_i."""

    seed: int
    q: tuple[float, ...]
    delta_coeffs: tuple[float, ...]  # D_s >= 0 per species
    normals: np.ndarray  # J, i.i.d. standard normal, length N
    vector: np.ndarray  # energy coefficient of sigma_i, length N


@dataclass(frozen=True, eq=False)
class HamiltonianInstance:
    """One realized disorder sample of the Gaussian process.

    mixture holds the terms backed by disorder tensors; when an external
    field is attached the full covariance corresponds to law_mixture, which
    adds the field's one-spin coefficients.  Instances are immutable, and
    energy/gradient evaluation is pure, so concurrent use is safe.
    """

    mixture: Mixture
    layout: SpeciesLayout
    backend: str
    seed: int
    tensors: tuple[np.ndarray, ...] = ()  # scaled arrays, aligned with mixture.terms
    raw_disorder: tuple[np.ndarray, ...] = ()  # the i.i.d. normals, same alignment
    field: ExternalField | None = None

    @property
    def law_mixture(self) -> Mixture:
        """Mixture whose covariance matches this instance, field included."""
        if self.field is None:
            return self.mixture
        terms = dict(self.mixture.terms)
        for s, d in enumerate(self.field.delta_coeffs):
            if d > 0.0:
                key = tuple(1 if t == s else 0 for t in range(self.layout.n_species))
                terms[key] = terms.get(key, 0.0) + d * d
        return Mixture.from_terms(terms, n_species=self.layout.n_species)

    def memory_entries(self) -> int:
        return sum(self.layout.n ** sum(p) for p, _ in self.mixture.terms)


def build_instance(xi: Mixture, layout: SpeciesLayout, seed: int,
                   backend: str = TENSOR_BACKEND,
                   budget: int = DEFAULT_MEMORY_BUDGET) -> HamiltonianInstance:
    """Draw the disorder for mixture xi on the given layout.

    The tensor backend draws, per mixture term and in the fixed lexicographic
    term order, a dense array of i.i.d. standard normals indexed by the k
    coordinates, and scales it by the per-pattern coefficient (zero off the
    term's species pattern).  The covariance backend stores only (xi, layout,
    seed) and realizes values lazily on point sets.
    """
    if xi.n_species != layout.n_species:
        raise ValueError(f"mixture has {xi.n_species} species, layout {layout.n_species}")
    if backend == COVARIANCE_BACKEND:
        return HamiltonianInstance(xi, layout, backend, int(seed))
    if backend != TENSOR_BACKEND:
        raise ValueError(f"unknown backend {backend!r}")
    cost = sum(layout.n ** sum(p) for p, _ in xi.terms)
    if cost > budget:
        raise ValueError(
            f"disorder needs {cost} dense entries, over the budget of {budget}")
    rng = np.random.default_rng(int(seed))
    raw, scaled = [], []
    for p, delta_sq in xi.terms:
        k = sum(p)
        j = rng.standard_normal((layout.n,) * k)
        a = _tuple_scalar(layout, p, delta_sq) * _pattern_mask(layout.sizes, p) * j
        j.setflags(write=False)
        a.setflags(write=False)
        raw.append(j)
        scaled.append(a)
    return HamiltonianInstance(xi, layout, backend, int(seed), tuple(scaled), tuple(raw))


def _require_tensor(h: HamiltonianInstance):
    if h.backend != TENSOR_BACKEND:
        raise ValueError(
            "covariance backend has no pointwise form; use realize_on_points")


def energy(h: HamiltonianInstance, sigma: Configuration) -> float:
    """H(sigma) = sqrt(N) sum over terms and index tuples, plus any field."""
    _require_tensor(h)
    if sigma.layout != h.layout:
        raise ValueError("configuration layout does not match instance")
    total = 0.0
    for (p, _), a in zip(h.mixture.terms, h.tensors):
        t = a
        for _ in range(sum(p)):
            t = t @ sigma.coords
        total += float(t)
    total *= math.sqrt(h.layout.n)
    if h.field is not None:
        total += float(h.field.vector @ sigma.coords)
    return total


def energy_many(h: HamiltonianInstance, coords: np.ndarray) -> np.ndarray:
    """Energies of a batch of configurations, rows of coords, via staged
    chunked contractions (same values as energy on each row)."""
    _require_tensor(h)
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != h.layout.n:
        raise ValueError(f"expected (batch, {h.layout.n}) coordinates")
    n = h.layout.n
    n_batch = coords.shape[0]
    out = np.zeros(n_batch)
    for (p, _), a in zip(h.mixture.terms, h.tensors):
        k = sum(p)
        if k == 1:
            out += coords @ a
            continue
        chunk = max(1, _BATCH_ELEMENT_CAP // n ** (k - 1))
        flat = a.reshape(-1, n)
        for lo in range(0, n_batch, chunk):
            block = coords[lo:lo + chunk]
            v = flat @ block.T
            for _ in range(k - 1):
                v = np.einsum("inb,bn->ib", v.reshape(-1, n, v.shape[-1]), block)
            out[lo:lo + chunk] += v[0]
    out *= math.sqrt(n)
    if h.field is not None:
        out += coords @ h.field.vector
    return out


def gradient(h: HamiltonianInstance, sigma: Configuration) -> np.ndarray:
    """Euclidean gradient of the energy, accumulated one index slot at a time."""
    _require_tensor(h)
    if sigma.layout != h.layout:
        raise ValueError("configuration layout does not match instance")
    g = np.zeros(h.layout.n)
    for (p, _), a in zip(h.mixture.terms, h.tensors):
        k = sum(p)
        for slot in range(k):
            t = np.moveaxis(a, slot, 0)
            for _ in range(k - 1):
                t = t @ sigma.coords
            g += t
    g *= math.sqrt(h.layout.n)
    if h.field is not None:
        g = g + h.field.vector
    return g


def factor_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetric-PSD square root with eigenvalue clipping at -1e-10 * trace.

    Eigenvalues below the clip tolerance mean the matrix is not a model
    covariance (invalid mixture or overlap input) and raise.
    """
    w, vecs = np.linalg.eigh(cov)
    tol = 1e-10 * max(float(np.trace(cov)), 0.0)
    if w.size and float(w.min()) < -tol:
        raise ValueError(
            f"covariance not PSD (min eigenvalue {w.min():.3e}); invalid mixture or overlaps")
    return vecs * np.sqrt(np.clip(w, 0.0, None))


def _realize(h: HamiltonianInstance, points) -> np.ndarray:
    """Joint Gaussian values on the point set from the exact covariance."""
    pts = list(points)
    m = len(pts)
    cov = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            r = overlap(pts[i], pts[j])
            cov[i, j] = cov[j, i] = h.layout.n * eval_mixture(h.mixture, r)
    factor = factor_covariance(cov)
    z = np.random.default_rng(int(h.seed)).standard_normal(m)
    values = factor @ z
    if h.field is not None:
        values = values + np.array([h.field.vector @ p.coords for p in pts])
    return values


def realize_on_points(xi: Mixture, layout: SpeciesLayout, points, seed: int) -> np.ndarray:
    """Sample (H(sigma_1)...H(sigma_M)) jointly with covariance N·xi(R)."""
    return _realize(build_instance(xi, layout, seed, backend=COVARIANCE_BACKEND), points)


def _base_coefficients(shifted: Mixture, q: np.ndarray) -> dict[tuple[int, ...], float]:
    """Invert the overlap-shift map on the |p| >= 2 block.

    Solves for base coefficients c_p (all |p| >= 2) such that shifting them
    to center q reproduces the given mixture's terms; the map is triangular
    in the componentwise partial order with diagonal prod_s (1-q_s)^p(s) > 0.
    Base one-spin coefficients are taken to be zero (they leave no trace in
    the shifted |p| >= 2 block).
    """
    targets = shifted.as_dict()
    if any(sum(p) < 2 for p in targets):
        raise ValueError("shifted mixture must not carry one-spin terms")
    solved: dict[tuple[int, ...], float] = {}
    for p in sorted(targets, key=lambda t: (-sum(t), t)):
        acc = targets[p]
        for pp, c in solved.items():
            if pp == p or any(a < b for a, b in zip(pp, p)):
                continue
            w = c
            for s in range(len(p)):
                w *= math.comb(pp[s], p[s]) * (1.0 - q[s]) ** p[s] * q[s] ** (pp[s] - p[s])
            acc -= w
        diag = 1.0
        for s in range(len(p)):
            diag *= (1.0 - q[s]) ** p[s]
        val = acc / diag
        if val < -1e-9:
            raise ValueError(
                f"mixture is not a recentering of a nonnegative mixture (degree {p})")
        if val > 0.0:
            solved[p] = val
    return solved


def attach_external_field(hq: HamiltonianInstance, q, seed: int) -> HamiltonianInstance:
    """Add the independent one-spin Gaussian term restoring the full
    recentered covariance.

    hq must hold the recentered mixture with one-spin terms removed; the
    per-species field coefficients D_s are the one-spin coefficients of the
    full recentered mixture, recovered from hq.mixture and q.  The returned
    instance shares hq's disorder and evaluates H_hq(sigma) + field. sigma.
    """
    layout = hq.layout
    qv = require_shell_overlap(q, layout.n_species)
    base = _base_coefficients(hq.mixture, qv)
    if base:
        base_mix = Mixture.from_terms(base, n_species=layout.n_species)
        slope = grad_mixture(base_mix, qv)
    else:
        slope = np.zeros(layout.n_species)
    delta = np.sqrt((1.0 - qv) * slope)
    rng = np.random.default_rng(int(seed))
    normals = rng.standard_normal(layout.n)
    vector = np.array(normals)
    for s, sl in enumerate(layout.slices):
        vector[sl] *= math.sqrt(layout.n / layout.sizes[s]) * delta[s]
    normals.setflags(write=False)
    vector.setflags(write=False)
    field = ExternalField(int(seed), tuple(float(v) for v in qv),
                          tuple(float(d) for d in delta), normals, vector)
    return HamiltonianInstance(hq.mixture, layout, hq.backend, hq.seed,
                               hq.tensors, hq.raw_disorder, field)


def sample_in_ball(layout: SpeciesLayout, rng: np.random.Generator) -> Configuration:
    """Uniform draw from the closed ball R_s(sigma, sigma) <= 1 per species."""
    coords = np.empty(layout.n)
    for s, sl in enumerate(layout.slices):
        d = layout.sizes[s]
        g = rng.standard_normal(d)
        norm = np.linalg.norm(g)
        while norm == 0.0:
            g = rng.standard_normal(d)
            norm = np.linalg.norm(g)
        radius = rng.uniform() ** (1.0 / d)
        coords[sl] = g * (radius * math.sqrt(d) / norm)
    return Configuration(coords, layout)


def _clip_to_ball(coords: np.ndarray, layout: SpeciesLayout) -> np.ndarray:
    out = np.array(coords)
    for s, sl in enumerate(layout.slices):
        r = float(out[sl] @ out[sl]) / layout.sizes[s]
        if r > 1.0:
            out[sl] /= math.sqrt(r)
    return out


def lipschitz_ratio(h: HamiltonianInstance, pairs: int, rng: np.random.Generator) -> float:
    """Max over sampled ball pairs of |H(a)-H(b)| / (N max_s sqrt(R_s(a-b,a-b))).

    Independent uniform pairs are nearly orthogonal to the slope in high
    dimension and their ratio shrinks with N, so alternate draws take a short
    step along the local gradient; the resulting maximum tracks the slope
    bound, which is what stays size-independent.
    """
    _require_tensor(h)
    layout = h.layout
    best = 0.0
    done = 0
    while done < pairs:
        a = sample_in_ball(layout, rng)
        b = None
        if done % 2 == 0:
            g = gradient(h, a)
            norm = float(np.linalg.norm(g))
            if norm > 0.0:
                step = math.exp(rng.uniform(math.log(1e-3), 0.0))
                coords = a.coords + step * math.sqrt(layout.n) * g / norm
                b = Configuration(_clip_to_ball(coords, layout), layout)
        if b is None:
            b = sample_in_ball(layout, rng)
        diff = Configuration(a.coords - b.coords, layout)
        gap = float(np.max(diff.self_overlap().as_array()))
        if gap <= 0.0:
            continue  # coincident draw carries no ratio information
        ratio = abs(energy(h, a) - energy(h, b)) / (layout.n * math.sqrt(gap))
        best = max(best, ratio)
        done += 1
    return best


def save_instance(h: HamiltonianInstance, path) -> None:
    """Checkpoint header only: mixture, layout, seed, backend, field metadata.

    Disorder is always regenerated from the seed on load, never serialized.
    """
    header = {
        "schema": 1,
        "backend": h.backend,
        "seed": int(h.seed),
        "mixture": mixture_to_json(h.mixture, h.layout.species),
        "layout": {
            "species": list(h.layout.species),
            "sizes": list(h.layout.sizes),
            "proportions": list(h.layout.proportions),
        },
    }
    if h.field is not None:
        header["field"] = {"seed": int(h.field.seed), "q": list(h.field.q)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")


def load_instance(path, budget: int = DEFAULT_MEMORY_BUDGET) -> HamiltonianInstance:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    lay = header["layout"]
    layout = SpeciesLayout(tuple(lay["species"]), tuple(lay["sizes"]),
                           tuple(lay["proportions"]))
    mixture, _ = mixture_from_json(header["mixture"])
    h = build_instance(mixture, layout, header["seed"], header["backend"], budget)
    if "field" in header:
        h = attach_external_field(h, header["field"]["q"], header["field"]["seed"])
    return h

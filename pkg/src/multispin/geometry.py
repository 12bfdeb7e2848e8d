"""Product-of-spheres configuration space: overlaps, sampling, bands, transforms.

Configurations live in R^N split into per-species blocks; the sphere S_N
constrains each block to squared norm N_s, the shell S_N(q) to N_s q(s).
Band sets B(m, delta) and their exact per-species measures are the geometric
backbone of the restricted free energies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .mixture import (
    OverlapVector,
    SpeciesLayout,
    as_overlap_array,
    require_shell_overlap,
)

__all__ = [
    "Configuration",
    "BandSpec",
    "overlap",
    "sample_uniform",
    "sample_on_shell",
    "in_band",
    "in_multi_band",
    "tilde_transform",
    "project_phi",
    "rescale_to_shell",
    "log_band_volume",
    "sample_uniform_in_band",
    "uniform_overlap_tail",
    "save_configuration",
    "load_configuration",
]

_ZERO_NORM = 1e-28  # squared-norm threshold treating a block as the zero point


@dataclass(frozen=True)
class Configuration:
    """Point of R^N with layout bookkeeping and cached per-species squared norms."""

    coords: np.ndarray
    layout: SpeciesLayout

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float, copy=True)
        if coords.shape != (self.layout.n,):
            raise ValueError(f"expected {self.layout.n} coordinates, got {coords.shape}")
        coords.setflags(write=False)
        sq = np.array([float(coords[sl] @ coords[sl]) for sl in self.layout.slices])
        sq.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "_block_sq_norms", sq)

    @property
    def block_sq_norms(self) -> np.ndarray:
        return self._block_sq_norms

    def block(self, s: int) -> np.ndarray:
        return self.coords[self.layout.slices[s]]

    def self_overlap(self) -> OverlapVector:
        """R(sigma, sigma): per-species squared norm over N_s."""
        return OverlapVector(tuple(self._block_sq_norms / np.array(self.layout.sizes)))

    def is_on_sphere(self, tol: float = 1e-8) -> bool:
        r = self.self_overlap().as_array()
        return bool(np.all(np.abs(r - 1.0) <= tol))


@dataclass(frozen=True)
class BandSpec:
    """Band parameters: center m, width delta, replica count n, pairwise width rho."""

    center: Configuration
    delta: float
    n: int = 1
    rho: float = 0.0

    def __post_init__(self):
        if self.delta < 0 or self.rho < 0:
            raise ValueError("delta and rho must be >= 0")
        if self.n < 1:
            raise ValueError("replica count must be >= 1")


def _check_same_layout(a: Configuration, b: Configuration):
    if a.layout != b.layout:
        raise ValueError("configurations have different layouts")


def overlap(a: Configuration, b: Configuration) -> OverlapVector:
    """Per-species R_s(a,b) = N_s^{-1} sum_{i in I_s} a_i b_i."""
    _check_same_layout(a, b)
    vals = [float(a.block(s) @ b.block(s)) / a.layout.sizes[s]
            for s in range(a.layout.n_species)]
    return OverlapVector(tuple(vals))


def sample_uniform(layout: SpeciesLayout, rng: np.random.Generator) -> Configuration:
    """Uniform on S_N: per block, standard normal rescaled to norm sqrt(N_s)."""
    coords = np.empty(layout.n)
    for s, sl in enumerate(layout.slices):
        g = rng.standard_normal(layout.sizes[s])
        norm = np.linalg.norm(g)
        while norm == 0.0:  # probability-zero guard
            g = rng.standard_normal(layout.sizes[s])
            norm = np.linalg.norm(g)
        coords[sl] = g * (math.sqrt(layout.sizes[s]) / norm)
    return Configuration(coords, layout)


def sample_on_shell(layout: SpeciesLayout, q, rng: np.random.Generator) -> Configuration:
    """Uniform on the shell S_N(q): block s on the sphere of radius sqrt(N_s q(s))."""
    qv = require_shell_overlap(q, layout.n_species)
    base = sample_uniform(layout, rng)
    coords = np.array(base.coords)
    for s, sl in enumerate(layout.slices):
        coords[sl] *= math.sqrt(qv[s])
    return Configuration(coords, layout)


def in_band(sigma: Configuration, m: Configuration, delta: float) -> bool:
    """sigma in B(m, delta): per-species |R_s(sigma,m) - R_s(m,m)| <= delta."""
    _check_same_layout(sigma, m)
    r = overlap(sigma, m).as_array()
    rm = m.self_overlap().as_array()
    return bool(np.all(np.abs(r - rm) <= delta))


def in_multi_band(replicas, spec: BandSpec) -> bool:
    """All replicas in B(m, delta) with pairwise overlaps within rho of R(m,m)."""
    if len(replicas) != spec.n:
        raise ValueError(f"expected {spec.n} replicas, got {len(replicas)}")
    if not all(in_band(sig, spec.center, spec.delta) for sig in replicas):
        return False
    rm = spec.center.self_overlap().as_array()
    for i in range(len(replicas)):
        for j in range(i + 1, len(replicas)):
            rij = overlap(replicas[i], replicas[j]).as_array()
            if np.any(np.abs(rij - rm) > spec.rho):
                return False
    return True


def tilde_transform(sigma: Configuration, m: Configuration, q) -> Configuration:
    """Rescaled recentering sigma~_i = (1-q(s))^{-1/2} (sigma_i - m_i).

    Requires m on the shell S_N(q), sigma on S_N, and sigma in B(m, 0),
    all checked to 1e-8.  Output lies on S_N with R(sigma~, m) = 0.
    """
    _check_same_layout(sigma, m)
    qv = require_shell_overlap(q, m.layout.n_species)
    rm = m.self_overlap().as_array()
    if np.any(np.abs(rm - qv) > 1e-8):
        raise ValueError(f"center self-overlap {rm} does not match shell {qv}")
    if not sigma.is_on_sphere(1e-8):
        raise ValueError("sigma is not on S_N")
    r = overlap(sigma, m).as_array()
    if np.any(np.abs(r - qv) > 1e-8):
        raise ValueError(f"sigma not in B(m, 0): overlaps {r} vs shell {qv}")
    coords = np.array(sigma.coords - m.coords)
    for s, sl in enumerate(m.layout.slices):
        coords[sl] /= math.sqrt(1.0 - qv[s])
    return Configuration(coords, m.layout)


def project_phi(sigma: Configuration, m: Configuration) -> Configuration:
    """Project sigma onto the zero-width band B(m, 0) block by block.

    tau_i = sigma_i - (R_s(sigma,m)/R_s(m,m)) m_i, then
    pi_i = m_i + sqrt((1 - R_s(m,m)) / R_s(tau,tau)) tau_i.
    Blocks where R_s(m,m) = 0 pass through unchanged.
    """
    _check_same_layout(sigma, m)
    rm = m.self_overlap().as_array()
    coords = np.array(sigma.coords)
    for s, sl in enumerate(m.layout.slices):
        if rm[s] <= _ZERO_NORM:
            continue
        ns = m.layout.sizes[s]
        rsm = float(sigma.coords[sl] @ m.coords[sl]) / ns
        tau = sigma.coords[sl] - (rsm / rm[s]) * m.coords[sl]
        rtt = float(tau @ tau) / ns
        if rtt <= _ZERO_NORM:
            raise ValueError(f"degenerate residual in species {m.layout.species[s]}")
        coords[sl] = m.coords[sl] + math.sqrt((1.0 - rm[s]) / rtt) * tau
    return Configuration(coords, m.layout)


def rescale_to_shell(m_prime: Configuration, q) -> Configuration:
    """m* with blocks scaled by sqrt(q(s)/R_s(m',m')), so R(m*,m*) = q."""
    layout = m_prime.layout
    qv = require_shell_overlap(q, layout.n_species)
    rm = m_prime.self_overlap().as_array()
    coords = np.array(m_prime.coords)
    for s, sl in enumerate(layout.slices):
        if qv[s] == 0.0:
            coords[sl] = 0.0
        elif rm[s] <= _ZERO_NORM:
            raise ValueError(f"zero block for species {layout.species[s]} with q > 0")
        else:
            coords[sl] *= math.sqrt(qv[s] / rm[s])
    return Configuration(coords, layout)


def _log_cos_integral(d: int, c1: float, c2: float) -> float:
    """log of int_{c1}^{c2} (1-c^2)^((d-3)/2) dc for d >= 2, via c = sin t."""
    if c2 <= c1:
        return -np.inf
    t1, t2 = math.asin(max(c1, -1.0)), math.asin(min(c2, 1.0))
    # peak of cos^{d-2} is at the t closest to 0 in the interval
    tm = min(max(0.0, t1), t2)
    gm = (d - 2) * math.log(math.cos(tm)) if abs(tm) < math.pi / 2 else -np.inf

    def rel(t):
        ct = math.cos(t)
        if ct <= 0.0:
            return 0.0
        return math.exp((d - 2) * math.log(ct) - gm)

    val, _ = integrate.quad(rel, t1, t2, limit=200)
    if val <= 0.0:
        return -np.inf
    return gm + math.log(val)


def _species_band_log_measure(d: int, q: float, delta: float) -> float:
    """log of the uniform-sphere measure of one species band |R - q| <= delta.

    q is the center's per-species self-overlap (in [0, 1]); d the block size.
    For d = 1 the sphere is {-1, +1} and the measure is discrete.
    """
    if q <= 0.0:
        return 0.0  # zero center: every sphere point has R_s(sigma, 0) = 0
    root = math.sqrt(q)
    if d == 1:
        hits = int(abs(root - q) <= delta) + int(abs(root + q) <= delta)
        return math.log(hits / 2.0) if hits else -np.inf
    c1 = max((q - delta) / root, -1.0)
    c2 = min((q + delta) / root, 1.0)
    log_num = _log_cos_integral(d, c1, c2)
    log_den = 0.5 * math.log(math.pi) + special.gammaln((d - 1) / 2) - special.gammaln(d / 2)
    return log_num - log_den


def log_band_volume(layout: SpeciesLayout, q, delta: float, n_mc: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """(1/N) log mu(B(m, delta)) for any m on the shell S_N(q).

    The band measure factorizes over species and each factor is an exact
    1-D integral of (1-x^2)^((N_s-3)/2) over the admissible cosine interval,
    so no sampling is needed; n_mc and rng are accepted for interface
    compatibility and ignored.  Centers anywhere in the closed ball are
    allowed (q in [0, 1] per species).
    """
    qv = as_overlap_array(q, layout.n_species)
    if np.any(qv < 0.0) or np.any(qv > 1.0):
        raise ValueError("per-species self-overlaps must lie in [0, 1]")
    if delta <= 0.0:
        raise ValueError("delta must be > 0")
    total = 0.0
    for s, d in enumerate(layout.sizes):
        total += _species_band_log_measure(d, float(qv[s]), delta)
    return total / layout.n


def sample_uniform_in_band(m: Configuration, delta: float, rng: np.random.Generator) -> Configuration:
    """Exact uniform draw from B(m, delta) on S_N.

    Per species: the cosine against m has a truncated symmetric-Beta law,
    inverted through the Beta CDF; the orthogonal part is an isotropic
    direction.  Raises if some species band is empty (possible when N_s = 1).
    """
    layout = m.layout
    rm = m.self_overlap().as_array()
    coords = np.empty(layout.n)
    for s, sl in enumerate(layout.slices):
        d = layout.sizes[s]
        q = float(rm[s])
        if q <= 0.0:
            g = rng.standard_normal(d)
            norm = np.linalg.norm(g)
            while norm == 0.0:
                g = rng.standard_normal(d)
                norm = np.linalg.norm(g)
            coords[sl] = g * (math.sqrt(d) / norm)
            continue
        root = math.sqrt(q)
        if d == 1:
            mhat = 1.0 if m.coords[sl][0] > 0 else -1.0
            signs = [t for t in (1.0, -1.0) if abs(t * root - q) <= delta]
            if not signs:
                raise ValueError(f"empty band for species {layout.species[s]}")
            pick = signs[0] if len(signs) == 1 else signs[int(rng.integers(0, 2))]
            coords[sl] = pick * mhat
            continue
        c1 = max((q - delta) / root, -1.0)
        c2 = min((q + delta) / root, 1.0)
        if c2 < c1:
            raise ValueError(f"empty band for species {layout.species[s]}")
        a = (d - 1) / 2.0
        lo, hi = stats.beta.cdf((c1 + 1) / 2, a, a), stats.beta.cdf((c2 + 1) / 2, a, a)
        u = lo + (hi - lo) * rng.uniform()
        c = 2.0 * float(stats.beta.ppf(u, a, a)) - 1.0
        c = min(max(c, c1), c2)
        mhat = m.coords[sl] / (root * math.sqrt(d))
        g = rng.standard_normal(d)
        g -= (g @ mhat) * mhat
        norm = np.linalg.norm(g)
        while norm == 0.0:
            g = rng.standard_normal(d)
            g -= (g @ mhat) * mhat
            norm = np.linalg.norm(g)
        w = g / norm
        coords[sl] = math.sqrt(d) * (c * mhat + math.sqrt(max(1.0 - c * c, 0.0)) * w)
    return Configuration(coords, layout)


def uniform_overlap_tail(d: int, tau: float) -> float:
    """P(|R| >= tau) for the overlap of two independent uniform points on S^{d-1}."""
    if tau <= 0.0:
        return 1.0
    if tau >= 1.0:
        return 0.0
    if d == 1:
        return 1.0  # overlap is +-1
    a = (d - 1) / 2.0
    return 2.0 * float(stats.beta.sf((tau + 1) / 2, a, a))


def save_configuration(cfg: Configuration, path) -> None:
    """Checkpoint: one JSON header line (layout) + raw little-endian float64 coords."""
    header = {
        "schema": 1,
        "species": list(cfg.layout.species),
        "sizes": list(cfg.layout.sizes),
        "proportions": list(cfg.layout.proportions),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(cfg.coords, dtype="<f8").tobytes())


def load_configuration(path) -> Configuration:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        layout = SpeciesLayout(tuple(header["species"]), tuple(header["sizes"]),
                               tuple(header["proportions"]))
        coords = np.frombuffer(fh.read(), dtype="<f8")
    return Configuration(coords, layout)

"""Free-energy machinery: exact corner-scale oracles, parallel tempering,
thermodynamic integration, band-restricted and replica-coupled estimators.

All values use the per-spin convention (1/N) log Z with Z the average of
e^H over the uniform product-of-spheres measure.  The inverse temperature
never appears in the mixture itself; it enters only as the integration
variable of thermodynamic integration (or explicitly via scale_mixture).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp

from .geometry import (
    BandSpec,
    Configuration,
    log_band_volume,
    sample_uniform,
    sample_uniform_in_band,
)
from .hamiltonian import HamiltonianInstance, TENSOR_BACKEND, energy, energy_many
from .mixture import SpeciesLayout, as_overlap_array

__all__ = [
    "FreeEnergyEstimate",
    "GibbsChainState",
    "PTResult",
    "exact_fe_enumeration",
    "exact_fe_quadrature",
    "exact_restricted_fe_enumeration",
    "exact_multi_replica_fe_enumeration",
    "exact_penalty_enumeration",
    "pt_sampler",
    "fe_thermo_integration",
    "restricted_fe",
    "multi_replica_fe",
    "multisamplability_profile",
    "multisamplability_record",
    "wilson_interval",
]

_METHODS = ("enumeration", "quadrature", "thermo-integration")
_TARGET_ACCEPT = 0.4  # proposal scale adaptation target during burn-in
_SWAP_FLAG_RATE = 0.05
_MOVE_FLAG_RATE = 1e-3
_MAX_KEPT_SAMPLES = 512


@dataclass(frozen=True)
class FreeEnergyEstimate:
    """Per-spin free-energy value with its error model and provenance."""

    value: float
    std_error: float
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}")
        if self.std_error < 0.0:
            raise ValueError("std_error must be >= 0")


@dataclass(frozen=True)
class GibbsChainState:
    """Terminal state of one tempered chain."""

    current: Configuration
    beta_index: int
    step_sizes: tuple[float, ...]  # per-species proposal scales
    accept_rate: float
    proposals: int


@dataclass(frozen=True)
class PTResult:
    """Thinned samples and diagnostics from one replica-exchange run."""

    beta_grid: tuple[float, ...]
    samples: tuple[np.ndarray, ...]  # per chain, shape (kept, N)
    energies: tuple[np.ndarray, ...]  # per chain, post-burn-in energy series
    accept_rates: tuple[float, ...]
    swap_rates: tuple[float, ...]
    flags: tuple[str, ...]
    chains: tuple[GibbsChainState, ...]


def _check_beta_grid(beta_grid) -> np.ndarray:
    grid = np.asarray(beta_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("beta grid must be a non-empty 1-D sequence")
    if grid[0] != 0.0:
        raise ValueError("beta grid must start at 0")
    if np.any(np.diff(grid) <= 0.0) and grid.size > 1:
        raise ValueError("beta grid must be strictly ascending")
    if not np.all(np.isfinite(grid)):
        raise ValueError("beta grid must be finite")
    return grid


@dataclass
class _ChainRun:
    """Raw output of the tempered-ensemble engine."""

    beta_grid: np.ndarray
    series: list[np.ndarray]  # per chain: post-burn-in total energy per sweep
    snapshots: list[np.ndarray]  # per chain: (kept, n_replicas, N)
    accept_rates: np.ndarray
    swap_rates: np.ndarray
    step_sizes: np.ndarray  # (n_chains, n_species)
    flags: list[str]
    final_coords: np.ndarray  # (n_chains, n_replicas, N)
    proposal_counts: np.ndarray  # per chain, post-burn-in


def _init_replicas(layout: SpeciesLayout, band: BandSpec | None, n_replicas: int,
                   q_center: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    """Starting tuple: uniform on S_N, or uniform on the band with pairwise
    rejection when the run is constrained."""
    if band is None:
        return np.array([sample_uniform(layout, rng).coords for _ in range(n_replicas)])
    out = np.empty((n_replicas, layout.n))
    for r in range(n_replicas):
        for _ in range(20000):
            cand = sample_uniform_in_band(band.center, band.delta, rng).coords
            ok = True
            for r2 in range(r):
                for s, sl in enumerate(layout.slices):
                    rs = float(cand[sl] @ out[r2, sl]) / layout.sizes[s]
                    if abs(rs - q_center[s]) > band.rho:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                out[r] = cand
                break
        else:
            raise ValueError(
                "could not initialize replicas inside the pairwise constraint; "
                "the constrained set is too small for rejection sampling")
    return out


def _run_chains(h: HamiltonianInstance, beta_grid: np.ndarray, steps: int,
                rng: np.random.Generator, n_replicas: int = 1,
                band: BandSpec | None = None) -> _ChainRun:
    """Replica-exchange Metropolis over the beta grid.

    Proposals update one species block of one replica at a time: a tangent
    Gaussian step re-projected to the block sphere (for single-coordinate
    blocks, a lazy sign flip).  Both kernels are symmetric, so acceptance is
    min(1, 1_constraints * exp(beta dH)).  Every chain owns its own RNG
    stream; swap randomness belongs to the lower-beta chain of each pair, so
    results do not depend on scheduling.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    layout = h.layout
    n_chains = beta_grid.size
    streams = rng.spawn(n_chains)
    q_center = None
    m_coords = None
    if band is not None:
        q_center = band.center.self_overlap().as_array()
        m_coords = band.center.coords
    coords = np.array([
        _init_replicas(layout, band, n_replicas, q_center, streams[c])
        for c in range(n_chains)
    ])
    energies = np.array([energy_many(h, coords[c]) for c in range(n_chains)])
    step_sizes = np.full((n_chains, layout.n_species), 0.5)
    burn = steps // 3
    thin = max(1, -(-(steps - burn) // _MAX_KEPT_SAMPLES))
    series: list[list[float]] = [[] for _ in range(n_chains)]
    snapshots: list[list[np.ndarray]] = [[] for _ in range(n_chains)]
    prop_count = np.zeros(n_chains, dtype=int)
    acc_count = np.zeros(n_chains, dtype=int)
    swap_tries = np.zeros(max(n_chains - 1, 1), dtype=int)
    swap_accepts = np.zeros(max(n_chains - 1, 1), dtype=int)

    for t in range(steps):
        adapting = t < burn
        for r in range(n_replicas):
            for s, sl in enumerate(layout.slices):
                d = layout.sizes[s]
                props = np.array(coords[:, r, :])
                moved = np.zeros(n_chains, dtype=bool)
                for c in range(n_chains):
                    if d == 1:
                        if streams[c].uniform() < 0.5:
                            props[c, sl] = -props[c, sl]
                            moved[c] = True
                    else:
                        g = streams[c].standard_normal(d)
                        x = coords[c, r, sl]
                        v = g - (g @ x) * x / d
                        y = x + step_sizes[c, s] * v
                        props[c, sl] = y * (math.sqrt(d) / np.linalg.norm(y))
                        moved[c] = True
                prop_e = energy_many(h, props)
                for c in range(n_chains):
                    u = max(float(streams[c].uniform()), 1e-300)
                    if not moved[c]:
                        continue
                    ok = True
                    if band is not None:
                        rsm = float(props[c, sl] @ m_coords[sl]) / d
                        ok = abs(rsm - q_center[s]) <= band.delta
                        if ok and n_replicas > 1:
                            for r2 in range(n_replicas):
                                if r2 == r:
                                    continue
                                rss = float(props[c, sl] @ coords[c, r2, sl]) / d
                                if abs(rss - q_center[s]) > band.rho:
                                    ok = False
                                    break
                    accepted = ok and math.log(u) < beta_grid[c] * (prop_e[c] - energies[c, r])
                    if accepted:
                        coords[c, r, sl] = props[c, sl]
                        energies[c, r] = prop_e[c]
                    if t >= burn:
                        prop_count[c] += 1
                        acc_count[c] += int(accepted)
                    if adapting and d > 1:
                        step_sizes[c, s] = float(np.clip(
                            step_sizes[c, s] * math.exp(0.1 * (int(accepted) - _TARGET_ACCEPT)),
                            1e-4, 10.0))
        if n_replicas > 1:
            # synchronized sign flips keep pairwise overlaps invariant, so
            # they connect components that single-replica flips cannot reach
            for s, sl in enumerate(layout.slices):
                if layout.sizes[s] != 1:
                    continue
                flip = np.array([streams[c].uniform() < 0.5 for c in range(n_chains)])
                props = np.array(coords)
                props[:, :, sl] = -props[:, :, sl]
                prop_e = energy_many(h, props.reshape(-1, layout.n)).reshape(
                    n_chains, n_replicas)
                for c in range(n_chains):
                    u = max(float(streams[c].uniform()), 1e-300)
                    if not flip[c]:
                        continue
                    ok = True
                    if band is not None:
                        for r in range(n_replicas):
                            rsm = float(props[c, r, sl] @ m_coords[sl])
                            if abs(rsm - q_center[s]) > band.delta:
                                ok = False
                                break
                    dlt = prop_e[c].sum() - energies[c].sum()
                    if ok and math.log(u) < beta_grid[c] * dlt:
                        coords[c, :, sl] = props[c, :, sl]
                        energies[c] = prop_e[c]
        if n_chains > 1:
            for c in range(t % 2, n_chains - 1, 2):
                u = max(float(streams[c].uniform()), 1e-300)
                gain = (beta_grid[c + 1] - beta_grid[c]) * (
                    energies[c].sum() - energies[c + 1].sum())
                accepted = math.log(u) < gain
                if accepted:
                    coords[[c, c + 1]] = coords[[c + 1, c]]
                    energies[[c, c + 1]] = energies[[c + 1, c]]
                if t >= burn:
                    swap_tries[c] += 1
                    swap_accepts[c] += int(accepted)
        if t >= burn:
            for c in range(n_chains):
                series[c].append(float(energies[c].sum()))
            if (t - burn) % thin == 0:
                for c in range(n_chains):
                    snapshots[c].append(np.array(coords[c]))

    accept_rates = np.where(prop_count > 0, acc_count / np.maximum(prop_count, 1), 1.0)
    with np.errstate(invalid="ignore"):
        swap_rates = np.where(swap_tries > 0, swap_accepts / np.maximum(swap_tries, 1), 1.0)
    flags = []
    if np.any(accept_rates < _MOVE_FLAG_RATE):
        flags.append("move-acceptance-low")
    if n_chains > 1 and np.any(swap_rates[: n_chains - 1] < _SWAP_FLAG_RATE):
        flags.append("swap-acceptance-low")
    return _ChainRun(
        beta_grid=beta_grid,
        series=[np.array(v) for v in series],
        snapshots=[np.array(v) for v in snapshots],
        accept_rates=accept_rates,
        swap_rates=swap_rates[: max(n_chains - 1, 0)],
        step_sizes=step_sizes,
        flags=flags,
        final_coords=coords,
        proposal_counts=prop_count,
    )


def pt_sampler(h: HamiltonianInstance, beta_grid, steps: int,
               rng: np.random.Generator) -> PTResult:
    """Replica-exchange Metropolis sampler for the Gibbs measures e^{beta H}."""
    grid = _check_beta_grid(beta_grid)
    run = _run_chains(h, grid, steps, rng)
    chains = tuple(
        GibbsChainState(
            current=Configuration(run.final_coords[c, 0], h.layout),
            beta_index=c,
            step_sizes=tuple(float(v) for v in run.step_sizes[c]),
            accept_rate=float(run.accept_rates[c]),
            proposals=int(run.proposal_counts[c]),
        )
        for c in range(grid.size))
    return PTResult(
        beta_grid=tuple(float(b) for b in grid),
        samples=tuple(snap[:, 0, :] for snap in run.snapshots),
        energies=tuple(run.series),
        accept_rates=tuple(float(v) for v in run.accept_rates),
        swap_rates=tuple(float(v) for v in run.swap_rates),
        flags=tuple(run.flags),
        chains=chains,
    )


def _block_std_error(series: np.ndarray) -> float:
    """Standard error of the series mean from ~20 contiguous block means."""
    n = len(series)
    if n < 2:
        return 0.0
    n_blocks = min(20, n)
    means = np.array([b.mean() for b in np.array_split(series, n_blocks)])
    if n_blocks < 2:
        return 0.0
    return float(means.std(ddof=1) / math.sqrt(n_blocks))


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(0.5 * np.sum((y[1:] + y[:-1]) * np.diff(x)))


def _simpson_with_error(means: np.ndarray, ses: np.ndarray,
                        grid: np.ndarray) -> tuple[float, float]:
    """Simpson integral plus error: propagated node SEs through the Simpson
    weights, plus a grid-resolution term |Simpson - trapezoid|."""
    if grid.size == 1:
        return 0.0, 0.0
    value = float(simpson(means, x=grid))
    weights = np.array([
        float(simpson(np.eye(grid.size)[k], x=grid)) for k in range(grid.size)
    ])
    mc_term = math.sqrt(float(np.sum((weights * ses) ** 2)))
    grid_term = abs(value - _trapezoid(means, grid))
    return value, mc_term + grid_term


def fe_thermo_integration(h: HamiltonianInstance, beta_grid, steps: int,
                          rng: np.random.Generator) -> FreeEnergyEstimate:
    """F at the last grid beta, as the integral of the mean energy per spin.

    dF/dbeta = <H>_beta / N, so Simpson over tempered-chain node means gives
    F; the error combines per-node Monte Carlo SEs with the Simpson-vs-
    trapezoid grid term.
    """
    grid = _check_beta_grid(beta_grid)
    n = h.layout.n
    if grid.size == 1:
        return FreeEnergyEstimate(0.0, 0.0, "thermo-integration",
                                  {"beta_grid": [0.0], "sweeps": 0, "flags": []})
    run = _run_chains(h, grid, steps, rng)
    means = np.array([s.mean() / n for s in run.series])
    ses = np.array([_block_std_error(s) / n for s in run.series])
    value, err = _simpson_with_error(means, ses, grid)
    meta = {
        "beta_grid": [float(b) for b in grid],
        "sweeps": steps,
        "node_means": [float(v) for v in means],
        "node_std_errors": [float(v) for v in ses],
        "samples_per_node": int(len(run.series[0])),
        "accept_rates": [float(v) for v in run.accept_rates],
        "swap_rates": [float(v) for v in run.swap_rates],
        "flags": list(run.flags),
    }
    return FreeEnergyEstimate(float(value), float(err), "thermo-integration", meta)


def restricted_fe(h: HamiltonianInstance, m: Configuration, delta: float,
                  beta_grid, steps: int, rng: np.random.Generator) -> FreeEnergyEstimate:
    """Band free energy: (1/N) log of the integral of e^{H(s)-H(m)} over
    B(m, delta).

    Thermodynamic integration with band-rejecting proposals plus the exact
    uniform band volume: at beta = 0 the restricted chain is uniform on the
    band and the free energy is (1/N) log mu(B(m, delta)) exactly.
    """
    grid = _check_beta_grid(beta_grid)
    layout = h.layout
    if m.layout != layout:
        raise ValueError("band center layout does not match instance")
    q = m.self_overlap().as_array()
    if np.any(q > 1.0 + 1e-9):
        raise ValueError("band center must lie in the closed ball")
    if delta <= 0.0:
        raise ValueError("delta must be > 0")
    log_vol = log_band_volume(layout, np.clip(q, 0.0, 1.0), delta)
    h_at_m = energy(h, m)
    meta = {
        "beta_grid": [float(b) for b in grid],
        "sweeps": steps,
        "log_band_volume": float(log_vol),
        "center_energy": float(h_at_m),
        "delta": float(delta),
        "flags": [],
    }
    if grid.size == 1:
        return FreeEnergyEstimate(float(log_vol), 0.0, "thermo-integration", meta)
    band = BandSpec(m, delta, n=1, rho=0.0)
    run = _run_chains(h, grid, steps, rng, n_replicas=1, band=band)
    n = layout.n
    means = np.array([(s.mean() - h_at_m) / n for s in run.series])
    ses = np.array([_block_std_error(s) / n for s in run.series])
    integral, err = _simpson_with_error(means, ses, grid)
    meta.update({
        "node_means": [float(v) for v in means],
        "node_std_errors": [float(v) for v in ses],
        "accept_rates": [float(v) for v in run.accept_rates],
        "swap_rates": [float(v) for v in run.swap_rates],
        "flags": list(run.flags),
    })
    return FreeEnergyEstimate(float(log_vol + integral), float(err),
                              "thermo-integration", meta)


def wilson_interval(hits: int, trials: int, z: float = 1.0) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion (z = 1 is one SE)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p_hat = hits / trials
    denom = 1.0 + z * z / trials
    center = (p_hat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p_hat * (1 - p_hat) / trials + z * z / (4 * trials * trials)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def multi_replica_fe(h: HamiltonianInstance, spec: BandSpec, beta_grid,
                     steps: int, rng: np.random.Generator) -> FreeEnergyEstimate:
    """Coupled-replica band free energy (1/(Nn)) log of the integral of
    exp(sum_i H(s^i) - H(m)) over tuples in the band with pairwise-overlap
    constraints.

    Decomposition at beta = 0: exact band volume per replica plus the
    log-probability that an i.i.d. uniform band tuple satisfies the pairwise
    constraint (estimated with a Wilson interval); the beta dependence is
    recovered by thermodynamic integration of the constrained joint chain.
    """
    grid = _check_beta_grid(beta_grid)
    if spec.n == 1:
        return restricted_fe(h, spec.center, spec.delta, beta_grid, steps, rng)
    layout = h.layout
    m = spec.center
    q = m.self_overlap().as_array()
    log_vol = log_band_volume(layout, np.clip(q, 0.0, 1.0), spec.delta)
    h_at_m = energy(h, m)
    n = layout.n
    n_rep = spec.n

    trials = 4000
    hits = 0
    for _ in range(trials):
        tup = [sample_uniform_in_band(m, spec.delta, rng).coords for _ in range(n_rep)]
        ok = True
        for i in range(n_rep):
            for j in range(i + 1, n_rep):
                for s, sl in enumerate(layout.slices):
                    rs = float(tup[i][sl] @ tup[j][sl]) / layout.sizes[s]
                    if abs(rs - q[s]) > spec.rho:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        hits += int(ok)
    flags = []
    if hits == 0:
        pair_log = math.log(0.5 / trials)
        pair_se = abs(pair_log)
        flags.append("zero-hit-floor")
    else:
        lo, hi = wilson_interval(hits, trials)
        pair_log = math.log(hits / trials)
        pair_se = 0.5 * (math.log(hi) - math.log(max(lo, 1e-300)))
    pair_term = pair_log / (n * n_rep)
    pair_term_se = pair_se / (n * n_rep)

    meta = {
        "beta_grid": [float(b) for b in grid],
        "sweeps": steps,
        "replicas": n_rep,
        "delta": float(spec.delta),
        "rho": float(spec.rho),
        "log_band_volume": float(log_vol),
        "pairwise_log_prob": float(pair_log),
        "pairwise_hits": hits,
        "pairwise_trials": trials,
        "center_energy": float(h_at_m),
    }
    if grid.size == 1 or hits == 0:
        if grid.size > 1 and hits == 0:
            flags.append("initialization-skipped")
        meta["flags"] = flags
        return FreeEnergyEstimate(float(log_vol + pair_term), float(pair_term_se),
                                  "thermo-integration", meta)

    run = _run_chains(h, grid, steps, rng, n_replicas=n_rep, band=spec)
    means = np.array([(s.mean() - n_rep * h_at_m) / (n * n_rep) for s in run.series])
    ses = np.array([_block_std_error(s) / (n * n_rep) for s in run.series])
    integral, err = _simpson_with_error(means, ses, grid)
    flags.extend(run.flags)
    meta.update({
        "node_means": [float(v) for v in means],
        "node_std_errors": [float(v) for v in ses],
        "accept_rates": [float(v) for v in run.accept_rates],
        "swap_rates": [float(v) for v in run.swap_rates],
        "flags": flags,
    })
    return FreeEnergyEstimate(float(log_vol + pair_term + integral),
                              float(err + pair_term_se), "thermo-integration", meta)


def multisamplability_record(h: HamiltonianInstance, q, n: int, eps: float,
                             beta_grid, steps: int, rng: np.random.Generator) -> dict:
    """Empirical (1/N) log G^(x)n-probability that n independent Gibbs samples
    have all pairwise species overlaps within eps of q, with diagnostics."""
    if n < 2:
        raise ValueError("need at least two replicas")
    layout = h.layout
    qv = as_overlap_array(q, layout.n_species)
    if eps >= 2.0:
        return {"value": 0.0, "hits": None, "samples": None, "flags": ["vacuous"],
                "eps": float(eps), "replicas": n}
    grid = _check_beta_grid(beta_grid)
    streams = rng.spawn(n)
    runs = [pt_sampler(h, grid, steps, streams[i]) for i in range(n)]
    target = grid.size - 1
    counts = min(len(r.samples[target]) for r in runs)
    hits = 0
    for t in range(counts):
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                a = runs[i].samples[target][t]
                b = runs[j].samples[target][t]
                for s, sl in enumerate(layout.slices):
                    rs = float(a[sl] @ b[sl]) / layout.sizes[s]
                    if not abs(rs - qv[s]) < eps:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        hits += int(ok)
    flags = [f for r in runs for f in r.flags]
    if hits == 0:
        value = math.log(0.5 / counts) / layout.n
        flags.append("zero-hit-floor")
        lo = hi = None
    else:
        value = math.log(hits / counts) / layout.n
        lo, hi = wilson_interval(hits, counts)
    return {
        "value": float(value),
        "hits": hits,
        "samples": counts,
        "wilson_low": lo,
        "wilson_high": hi,
        "flags": sorted(set(flags)),
        "eps": float(eps),
        "replicas": n,
        "beta": float(grid[-1]),
    }


def multisamplability_profile(h: HamiltonianInstance, q, n: int, eps: float,
                              beta_grid, steps: int, rng: np.random.Generator) -> float:
    """Value-only view of multisamplability_record."""
    return multisamplability_record(h, q, n, eps, beta_grid, steps, rng)["value"]


@lru_cache(maxsize=8)
def _sign_patterns(n: int) -> np.ndarray:
    """All 2^n sign vectors, fixed order (coordinate 0 fastest)."""
    codes = np.arange(2**n, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n)) & 1
    patterns = (2.0 * bits - 1.0).astype(float)
    patterns.setflags(write=False)
    return patterns


def _require_corner(h: HamiltonianInstance):
    if h.backend != TENSOR_BACKEND:
        raise ValueError("enumeration needs the coefficient-tensor backend")
    if any(d != 1 for d in h.layout.sizes):
        raise ValueError("enumeration requires every species to have one coordinate")


def exact_fe_enumeration(h: HamiltonianInstance) -> FreeEnergyEstimate:
    """Exact free energy when each species block is {-1, +1}: the average of
    e^H over all sign patterns."""
    _require_corner(h)
    n = h.layout.n
    energies = energy_many(h, _sign_patterns(n))
    value = (float(logsumexp(energies)) - n * math.log(2.0)) / n
    return FreeEnergyEstimate(value, 0.0, "enumeration",
                              {"n_configurations": int(2**n)})


def _enum_band(h: HamiltonianInstance, m: Configuration, delta: float):
    """Sign patterns inside B(m, delta) with their centered energies."""
    _require_corner(h)
    if m.layout != h.layout:
        raise ValueError("band center layout does not match instance")
    n = h.layout.n
    patterns = _sign_patterns(n)
    q = m.self_overlap().as_array()
    in_band = np.all(np.abs(patterns * m.coords - q) <= delta, axis=1)
    centered = energy_many(h, patterns) - energy(h, m)
    return patterns, centered, in_band, q


def exact_restricted_fe_enumeration(h: HamiltonianInstance, m: Configuration,
                                    delta: float) -> FreeEnergyEstimate:
    """Exact band free energy at corner scale."""
    _, centered, in_band, _ = _enum_band(h, m, delta)
    n = h.layout.n
    if not np.any(in_band):
        value = -math.inf
    else:
        value = (float(logsumexp(centered[in_band])) - n * math.log(2.0)) / n
    return FreeEnergyEstimate(value, 0.0, "enumeration",
                              {"n_configurations": int(in_band.sum())})


def _enum_pair_allowed(patterns: np.ndarray, idx: np.ndarray, q: np.ndarray,
                       rho: float) -> np.ndarray:
    """Boolean matrix over band patterns: pairwise overlaps within rho of q."""
    sel = patterns[idx]
    allowed = np.ones((len(idx), len(idx)), dtype=bool)
    for s in range(patterns.shape[1]):
        prod = np.outer(sel[:, s], sel[:, s])
        allowed &= np.abs(prod - q[s]) <= rho
    return allowed


def _enum_constrained_logsum(centered: np.ndarray, allowed: np.ndarray, n_rep: int) -> float:
    """log sum over allowed replica tuples of exp(sum of centered energies)."""
    b = len(centered)
    if n_rep == 2:
        pair = centered[:, None] + centered[None, :]
        masked = np.where(allowed, pair, -np.inf)
        return float(logsumexp(masked.ravel()))
    total = -math.inf
    for tup in itertools.product(range(b), repeat=n_rep):
        ok = all(allowed[tup[i], tup[j]]
                 for i in range(n_rep) for j in range(i + 1, n_rep))
        if ok:
            total = float(np.logaddexp(total, sum(centered[k] for k in tup)))
    return total


def exact_multi_replica_fe_enumeration(h: HamiltonianInstance,
                                       spec: BandSpec) -> FreeEnergyEstimate:
    """Exact coupled-replica band free energy at corner scale."""
    patterns, centered, in_band, q = _enum_band(h, spec.center, spec.delta)
    n = h.layout.n
    idx = np.flatnonzero(in_band)
    if idx.size == 0:
        return FreeEnergyEstimate(-math.inf, 0.0, "enumeration", {"n_configurations": 0})
    if spec.n == 1:
        return exact_restricted_fe_enumeration(h, spec.center, spec.delta)
    allowed = _enum_pair_allowed(patterns, idx, q, spec.rho)
    log_sum = _enum_constrained_logsum(centered[idx], allowed, spec.n)
    value = (log_sum - spec.n * n * math.log(2.0)) / (n * spec.n)
    return FreeEnergyEstimate(float(value), 0.0, "enumeration",
                              {"n_configurations": int(idx.size), "replicas": spec.n})


def exact_penalty_enumeration(h: HamiltonianInstance, spec: BandSpec) -> float:
    """(1/(Nn)) log of the conditional Gibbs probability that n band replicas
    satisfy the pairwise constraint, exactly at corner scale."""
    patterns, centered, in_band, q = _enum_band(h, spec.center, spec.delta)
    idx = np.flatnonzero(in_band)
    if idx.size == 0:
        raise ValueError("empty band")
    allowed = _enum_pair_allowed(patterns, idx, q, spec.rho)
    log_joint = _enum_constrained_logsum(centered[idx], allowed, spec.n)
    log_single = float(logsumexp(centered[idx]))
    return (log_joint - spec.n * log_single) / (h.layout.n * spec.n)


def _species_quadrature(d: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (rows, scaled to radius sqrt(d)) and log-weights of the uniform
    measure on the d-sphere-block, exact for d=1, spectrally convergent
    (periodic trapezoid) for d=2, Gauss-Legendre x azimuth for d=3."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.full(2, math.log(0.5))
    if d == 2:
        theta = 2.0 * math.pi * np.arange(nodes) / nodes
        pts = math.sqrt(2.0) * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return pts, np.full(nodes, -math.log(nodes))
    if d == 3:
        z, wz = np.polynomial.legendre.leggauss(nodes)
        phi = 2.0 * math.pi * np.arange(nodes) / nodes
        rad = np.sqrt(1.0 - z**2)
        pts = np.empty((nodes * nodes, 3))
        logw = np.empty(nodes * nodes)
        k = 0
        for i in range(nodes):
            for j in range(nodes):
                pts[k] = math.sqrt(3.0) * np.array(
                    [rad[i] * math.cos(phi[j]), rad[i] * math.sin(phi[j]), z[i]])
                logw[k] = math.log(wz[i] / 2.0) - math.log(nodes)
                k += 1
        return pts, logw
    raise ValueError("quadrature supports species blocks of size at most 3")


def _quadrature_value(h: HamiltonianInstance, nodes_per_angle: int) -> float:
    layout = h.layout
    grids = [_species_quadrature(d, nodes_per_angle) for d in layout.sizes]
    counts = [len(g[0]) for g in grids]
    index_mesh = np.stack(
        np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"),
        axis=0).reshape(layout.n_species, -1)
    total = index_mesh.shape[1]
    coords = np.empty((total, layout.n))
    logw = np.zeros(total)
    for s, sl in enumerate(layout.slices):
        pts, lw = grids[s]
        coords[:, sl] = pts[index_mesh[s]]
        logw += lw[index_mesh[s]]
    log_terms = np.empty(total)
    chunk = 1 << 16
    for lo in range(0, total, chunk):
        log_terms[lo:lo + chunk] = (
            logw[lo:lo + chunk] + energy_many(h, coords[lo:lo + chunk]))
    return float(logsumexp(log_terms)) / layout.n


def exact_fe_quadrature(h: HamiltonianInstance, nodes_per_angle: int) -> FreeEnergyEstimate:
    """Deterministic tensor-product quadrature of the free-energy integral
    for small blocks (each species size <= 3, at most 6 angular dimensions)."""
    if h.backend != TENSOR_BACKEND:
        raise ValueError("quadrature needs the coefficient-tensor backend")
    if any(d > 3 for d in h.layout.sizes):
        raise ValueError("quadrature supports species blocks of size at most 3")
    if sum(d - 1 for d in h.layout.sizes) > 6:
        raise ValueError("total angular dimension exceeds 6")
    if nodes_per_angle < 2:
        raise ValueError("need at least 2 nodes per angle")
    value = _quadrature_value(h, nodes_per_angle)
    coarse = _quadrature_value(h, max(2, nodes_per_angle // 2))
    return FreeEnergyEstimate(value, 0.0, "quadrature", {
        "nodes_per_angle": int(nodes_per_angle),
        "coarse_grid_delta": float(value - coarse),
    })

"""Config-driven experiment runner.

One JSON config describes the model (species, block sizes, mixture terms)
and the parameters of each batch command.  Subcommands run the estimator
pipelines and emit CSV + JSON files; `verify` runs the cross-module
invariant suite and reports machine-readable pass/fail results.  Every
random quantity is seeded from (master_seed, task path), so outputs are
byte-identical across worker counts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    BandSpec,
    Configuration,
    in_band,
    load_configuration,
    log_band_volume,
    sample_on_shell,
    sample_uniform,
    save_configuration,
    tilde_transform,
)
from .ground_state import ascend, eigen_oracle_2spin
from .hamiltonian import (
    build_instance,
    energy,
    energy_many,
    gradient,
    load_instance,
    save_instance,
)
from .mixture import (
    Mixture,
    SpeciesLayout,
    eval_mixture,
    log_volume_term,
    nesting_compose,
    shifted_coefficients,
    xi_q,
)
from .seeding import derive_seed
from .tap import EstimatorConfig, candidate_multisamplable, resolve_fe_method, tap_evaluate, tap_inequality_scan
from .thermo import (
    exact_fe_enumeration,
    exact_fe_quadrature,
    exact_multi_replica_fe_enumeration,
    exact_penalty_enumeration,
    exact_restricted_fe_enumeration,
    fe_thermo_integration,
    multisamplability_record,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "dump_config",
    "run_verification_suite",
    "main",
]

SCHEMA_VERSION = 1
MUTATIONS = ("shifted-coefficients",)


class ConfigError(ValueError):
    """Config validation failure with the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _expect_mapping(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a JSON object")
    return value


def _expect_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, "expected an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _expect_number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, "expected a number")
    return float(value)


def _expect_list(value, path, min_len=0):
    if not isinstance(value, list):
        raise ConfigError(path, "expected a list")
    if len(value) < min_len:
        raise ConfigError(path, f"needs at least {min_len} entries")
    return value


def _expect_shell_vector(value, path, n_species):
    vals = _expect_list(value, path, min_len=1)
    if len(vals) != n_species:
        raise ConfigError(path, f"expected {n_species} per-species values")
    out = []
    for k, v in enumerate(vals):
        x = _expect_number(v, f"{path}[{k}]")
        if not 0.0 <= x < 1.0:
            raise ConfigError(f"{path}[{k}]", "must lie in [0, 1)")
        out.append(x)
    return tuple(out)


def _expect_beta_grid(value, path):
    vals = _expect_list(value, path, min_len=1)
    grid = tuple(_expect_number(v, f"{path}[{k}]") for k, v in enumerate(vals))
    if grid[0] != 0.0:
        raise ConfigError(f"{path}[0]", "beta grid must start at 0")
    if any(b >= a for a, b in zip(grid[1:], grid)):
        raise ConfigError(path, "beta grid must be strictly ascending")
    return grid


_DEFAULT_BETA_GRID = tuple(float(b) for b in np.linspace(0.0, 1.0, 21))


@dataclass(frozen=True)
class FreeEnergyParams:
    method: str = "auto"
    beta_grid: tuple[float, ...] = _DEFAULT_BETA_GRID
    sweeps: int = 800
    quadrature_nodes: int = 16
    seeds: int = 20


@dataclass(frozen=True)
class GroundStateParams:
    q: tuple[float, ...] = (0.3,)
    restarts: int = 8
    max_iters: int = 300
    seeds: int = 20


@dataclass(frozen=True)
class TapScanParams:
    q_grid: tuple[tuple[float, ...], ...] = ((0.0,), (0.3,), (0.6,))
    method: str = "auto"
    beta_grid: tuple[float, ...] = _DEFAULT_BETA_GRID
    sweeps: int = 800
    quadrature_nodes: int = 16
    seeds: int = 20
    restarts: int = 8
    max_iters: int = 300
    gs_bias_allowance: float = 0.02


@dataclass(frozen=True)
class MultisampParams:
    q: tuple[float, ...] = (0.0,)
    n: int = 2
    eps_grid: tuple[float, ...] = (0.5, 0.25)
    beta_grid: tuple[float, ...] = _DEFAULT_BETA_GRID
    sweeps: int = 600
    seeds: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully materialized experiment description; serializes losslessly."""

    master_seed: int
    species: tuple[str, ...]
    sizes: tuple[int, ...]
    mixture: Mixture
    free_energy: FreeEnergyParams
    ground_state: GroundStateParams
    tap_scan: TapScanParams
    multisamp: MultisampParams
    out_dir: str = "out"

    @property
    def layout(self) -> SpeciesLayout:
        return SpeciesLayout(self.species, self.sizes)


def _parse_model(doc: dict) -> tuple[tuple[str, ...], tuple[int, ...], Mixture]:
    model = _expect_mapping(doc.get("model"), "model") if "model" in doc else None
    if model is None:
        raise ConfigError("model", "missing required field")
    species_raw = _expect_list(model.get("species"), "model.species", min_len=1) \
        if "species" in model else None
    if species_raw is None:
        raise ConfigError("model.species", "missing required field")
    species = []
    for k, name in enumerate(species_raw):
        if not isinstance(name, str) or not name:
            raise ConfigError(f"model.species[{k}]", "expected a non-empty string")
        species.append(name)
    if len(set(species)) != len(species):
        raise ConfigError("model.species", "species names must be unique")
    if "sizes" not in model:
        raise ConfigError("model.sizes", "missing required field")
    sizes_raw = _expect_list(model["sizes"], "model.sizes", min_len=1)
    if len(sizes_raw) != len(species):
        raise ConfigError("model.sizes", "must match the number of species")
    sizes = tuple(_expect_int(v, f"model.sizes[{k}]", minimum=1)
                  for k, v in enumerate(sizes_raw))
    if "terms" not in model:
        raise ConfigError("model.terms", "missing required field")
    terms = {}
    for k, item in enumerate(_expect_list(model["terms"], "model.terms")):
        entry = _expect_mapping(item, f"model.terms[{k}]")
        p_raw = _expect_list(entry.get("p"), f"model.terms[{k}].p", min_len=1) \
            if "p" in entry else None
        if p_raw is None:
            raise ConfigError(f"model.terms[{k}].p", "missing required field")
        if len(p_raw) != len(species):
            raise ConfigError(f"model.terms[{k}].p",
                              f"expected {len(species)} per-species degrees")
        p = tuple(_expect_int(v, f"model.terms[{k}].p[{j}]", minimum=0)
                  for j, v in enumerate(p_raw))
        if sum(p) < 1:
            raise ConfigError(f"model.terms[{k}].p", "total degree must be >= 1")
        if "delta_sq" not in entry:
            raise ConfigError(f"model.terms[{k}].delta_sq", "missing required field")
        coeff = _expect_number(entry["delta_sq"], f"model.terms[{k}].delta_sq")
        if coeff <= 0.0:
            raise ConfigError(f"model.terms[{k}].delta_sq", "must be > 0")
        if p in terms:
            raise ConfigError(f"model.terms[{k}].p", "duplicate multi-degree")
        terms[p] = coeff
    mixture = Mixture.from_terms(terms, n_species=len(species))
    return tuple(species), sizes, mixture


def _parse_section(doc: dict, name: str, cls, n_species: int):
    section = doc.get(name, {})
    _expect_mapping(section, name)
    defaults = cls()
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key in section:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    for f in dataclasses.fields(cls):
        path = f"{name}.{f.name}"
        if f.name not in section:
            value = getattr(defaults, f.name)
            # per-species defaults must match the model's species count
            if f.name in ("q",):
                value = tuple(value[0] for _ in range(n_species))
            if f.name == "q_grid":
                value = tuple(tuple(point[0] for _ in range(n_species))
                              for point in value)
            kwargs[f.name] = value
            continue
        raw = section[f.name]
        if f.name in ("sweeps", "seeds", "restarts", "max_iters",
                      "quadrature_nodes", "n"):
            kwargs[f.name] = _expect_int(raw, path, minimum=1)
        elif f.name == "method":
            if raw not in ("auto", "enumeration", "quadrature", "ti"):
                raise ConfigError(path, "must be auto, enumeration, quadrature, or ti")
            kwargs[f.name] = raw
        elif f.name == "beta_grid":
            kwargs[f.name] = _expect_beta_grid(raw, path)
        elif f.name == "q":
            kwargs[f.name] = _expect_shell_vector(raw, path, n_species)
        elif f.name == "q_grid":
            points = _expect_list(raw, path, min_len=1)
            kwargs[f.name] = tuple(
                _expect_shell_vector(pt, f"{path}[{k}]", n_species)
                for k, pt in enumerate(points))
        elif f.name == "eps_grid":
            vals = _expect_list(raw, path, min_len=1)
            grid = tuple(_expect_number(v, f"{path}[{k}]") for k, v in enumerate(vals))
            if any(e <= 0.0 for e in grid):
                raise ConfigError(path, "epsilons must be > 0")
            kwargs[f.name] = grid
        elif f.name == "gs_bias_allowance":
            val = _expect_number(raw, path)
            if val < 0.0:
                raise ConfigError(path, "must be >= 0")
            kwargs[f.name] = val
        else:
            raise ConfigError(path, "unhandled field")
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
    _expect_mapping(doc, "<document>")
    known = {"schema", "master_seed", "model", "free_energy", "ground_state",
             "tap_scan", "multisamp", "out_dir"}
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown field")
    schema = doc.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported schema version {schema}")
    master_seed = _expect_int(doc.get("master_seed", 0), "master_seed", minimum=0)
    species, sizes, mixture = _parse_model(doc)
    n_species = len(species)
    out_dir = doc.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir", "expected a non-empty string")
    return ExperimentConfig(
        master_seed=master_seed,
        species=species,
        sizes=sizes,
        mixture=mixture,
        free_energy=_parse_section(doc, "free_energy", FreeEnergyParams, n_species),
        ground_state=_parse_section(doc, "ground_state", GroundStateParams, n_species),
        tap_scan=_parse_section(doc, "tap_scan", TapScanParams, n_species),
        multisamp=_parse_section(doc, "multisamp", MultisampParams, n_species),
        out_dir=out_dir,
    )


def dump_config(config: ExperimentConfig) -> str:
    """Serialize a config with every field materialized (round-trip stable)."""
    doc = {
        "schema": SCHEMA_VERSION,
        "master_seed": config.master_seed,
        "model": {
            "species": list(config.species),
            "sizes": list(config.sizes),
            "terms": [{"p": list(p), "delta_sq": c} for p, c in config.mixture.terms],
        },
        "free_energy": dataclasses.asdict(config.free_energy),
        "ground_state": dataclasses.asdict(config.ground_state),
        "tap_scan": dataclasses.asdict(config.tap_scan),
        "multisamp": dataclasses.asdict(config.multisamp),
        "out_dir": config.out_dir,
    }

    def listify(obj):
        if isinstance(obj, tuple):
            return [listify(v) for v in obj]
        if isinstance(obj, dict):
            return {k: listify(v) for k, v in obj.items()}
        return obj

    return json.dumps(listify(doc), indent=2, sort_keys=True) + "\n"


def _run_tasks(tasks, workers: int) -> list:
    """Run zero-argument tasks, collecting results in submission order so the
    worker count cannot change any output."""
    if workers <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v
                             for v in row])


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema": SCHEMA_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- verification suite -------------------------------------------------------


def _shift_terms(xi: Mixture, q: np.ndarray, mutation: str | None) -> Mixture:
    shifted = shifted_coefficients(xi, q)
    if mutation == "shifted-coefficients":
        corrupted = {p: c * (1.0 + 1e-3 * (1 + sum(p)))
                     for p, c in shifted.terms}
        return Mixture.from_terms(corrupted, n_species=xi.n_species)
    return shifted


def _suite_fixture_corner():
    layout = SpeciesLayout(("a", "b"), (1, 1))
    mixture = Mixture.from_terms({(1, 1): 0.8, (2, 0): 0.3})
    return mixture, layout


def run_verification_suite(config: ExperimentConfig, mutation: str | None = None) -> dict:
    """Run the cross-module invariant checks; failures never abort the suite.

    The optional mutation corrupts one internal formula so the suite must
    detect it — a self-test that the checks have teeth.
    """
    if mutation is not None and mutation not in MUTATIONS:
        raise ConfigError("mutation", f"unknown mutation {mutation!r}")
    xi = config.mixture
    layout = config.layout
    # mixture checks need at least one term to have teeth; geometry checks
    # need blocks of dimension >= 2 so zero-width bands are non-empty
    mix_xi, mix_layout = (xi, layout) if xi.terms else _suite_fixture_corner()
    geom_layout = SpeciesLayout(("a", "b"), (4, 6))
    seed = config.master_seed
    checks: list[dict] = []

    def run_check(name, fn):
        try:
            detail = fn()
            checks.append({"name": name, "passed": True, "detail": detail or ""})
        except Exception as exc:  # noqa: BLE001 - the suite reports, never aborts
            checks.append({"name": name, "passed": False, "detail": str(exc)})

    def check_shift_identity():
        rng = np.random.default_rng(derive_seed(seed, "verify", "shift"))
        worst = 0.0
        for _ in range(5):
            q = rng.uniform(0.0, 0.9, mix_layout.n_species)
            x = rng.uniform(-1.0, 1.0, mix_layout.n_species)
            shifted = _shift_terms(mix_xi, q, mutation)
            lhs = eval_mixture(shifted, x)
            rhs = eval_mixture(mix_xi, q + (1.0 - q) * x) - eval_mixture(mix_xi, q)
            worst = max(worst, abs(lhs - rhs))
        if worst > 1e-9:
            raise AssertionError(f"recentering identity off by {worst:.3e}")
        return f"max deviation {worst:.3e}"

    def check_nesting():
        rng = np.random.default_rng(derive_seed(seed, "verify", "nesting"))
        q = rng.uniform(0.0, 0.7, mix_layout.n_species)
        qp = rng.uniform(0.0, 0.7, mix_layout.n_species)
        qhat = nesting_compose(q, qp)
        two = xi_q(xi_q(mix_xi, q), qp)
        one = xi_q(mix_xi, qhat.as_array())
        keys = {p for p, _ in two.terms} | {p for p, _ in one.terms}
        gap = max((abs(two.coefficient(p) - one.coefficient(p)) for p in keys),
                  default=0.0)
        if gap > 1e-10:
            raise AssertionError(f"nesting coefficients differ by {gap:.3e}")
        vol_gap = abs(log_volume_term(mix_layout, q) + log_volume_term(mix_layout, qp)
                      - log_volume_term(mix_layout, qhat.as_array()))
        if vol_gap > 1e-12:
            raise AssertionError(f"entropy additivity off by {vol_gap:.3e}")
        return f"coefficient gap {gap:.3e}"

    def check_recentering_removes_linear():
        q = np.full(mix_layout.n_species, 0.4)
        reduced = xi_q(mix_xi, q)
        if any(sum(p) < 2 for p, _ in reduced.terms):
            raise AssertionError("recentering left a single-coordinate term")
        return f"{len(reduced.terms)} terms, all degree >= 2"

    def check_band_volume():
        rng = np.random.default_rng(derive_seed(seed, "verify", "band"))
        q = np.full(geom_layout.n_species, 0.3)
        delta = 0.2
        exact = log_band_volume(geom_layout, q, delta)
        m = sample_on_shell(geom_layout, q, rng)
        hits = 0
        trials = 4000
        for _ in range(trials):
            hits += int(in_band(sample_uniform(geom_layout, rng), m, delta))
        if hits == 0:
            raise AssertionError("no band hits in the Monte Carlo check")
        est = math.log(hits / trials) / geom_layout.n
        se = math.sqrt((1 - hits / trials) / hits) / geom_layout.n
        if abs(est - exact) > 4 * se + 1e-12:
            raise AssertionError(f"band volume {exact:.5f} vs MC {est:.5f} (se {se:.5f})")
        return f"exact {exact:.5f}, MC {est:.5f}"

    def check_tilde_round_trip():
        rng = np.random.default_rng(derive_seed(seed, "verify", "tilde"))
        q = np.full(geom_layout.n_species, 0.25)
        m = sample_on_shell(geom_layout, q, rng)
        coords = np.empty(geom_layout.n)
        for s, sl in enumerate(geom_layout.slices):
            ms = m.coords[sl]
            g = rng.standard_normal(geom_layout.sizes[s])
            g = g - (g @ ms) * ms / float(ms @ ms)
            g *= math.sqrt(geom_layout.sizes[s]) / np.linalg.norm(g)
            coords[sl] = ms + math.sqrt(1.0 - q[s]) * g
        sigma = Configuration(coords, geom_layout)
        rho = tilde_transform(sigma, m, q)
        back = np.array(rho.coords)
        for s, sl in enumerate(geom_layout.slices):
            back[sl] = m.coords[sl] + math.sqrt(1.0 - q[s]) * rho.coords[sl]
        gap = float(np.max(np.abs(back - sigma.coords)))
        if gap > 1e-9:
            raise AssertionError(f"round trip off by {gap:.3e}")
        return f"max deviation {gap:.3e}"

    def check_configuration_checkpoint():
        rng = np.random.default_rng(derive_seed(seed, "verify", "checkpoint"))
        sigma = sample_uniform(layout, rng)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "sigma.bin"
            save_configuration(sigma, path)
            loaded = load_configuration(path)
        if not np.array_equal(loaded.coords, sigma.coords):
            raise AssertionError("coordinates changed across the checkpoint")
        return "bit-identical"

    def _small_instance():
        if layout.n <= 24 and xi.terms:
            return build_instance(xi, layout, seed=derive_seed(seed, "verify", "h"))
        mix, lay = _suite_fixture_corner()
        return build_instance(mix, lay, seed=derive_seed(seed, "verify", "h"))

    def check_energy_batch():
        h = _small_instance()
        rng = np.random.default_rng(derive_seed(seed, "verify", "batch"))
        pts = np.array([sample_uniform(h.layout, rng).coords for _ in range(8)])
        batched = energy_many(h, pts)
        single = np.array([energy(h, Configuration(p, h.layout)) for p in pts])
        gap = float(np.max(np.abs(batched - single)))
        if gap > 1e-10:
            raise AssertionError(f"batch energies differ by {gap:.3e}")
        return f"max deviation {gap:.3e}"

    def check_gradient():
        h = _small_instance()
        rng = np.random.default_rng(derive_seed(seed, "verify", "grad"))
        sigma = sample_uniform(h.layout, rng)
        g = gradient(h, sigma)
        eps = 1e-6
        for idx in range(0, h.layout.n, max(1, h.layout.n // 3)):
            up = np.array(sigma.coords)
            dn = np.array(sigma.coords)
            up[idx] += eps
            dn[idx] -= eps
            fd = (energy(h, Configuration(up, h.layout))
                  - energy(h, Configuration(dn, h.layout))) / (2 * eps)
            if abs(fd - g[idx]) > 1e-4 * max(1.0, abs(fd)):
                raise AssertionError(f"gradient[{idx}] {g[idx]:.6e} vs fd {fd:.6e}")
        return "finite differences agree"

    def check_instance_checkpoint():
        h = _small_instance()
        rng = np.random.default_rng(derive_seed(seed, "verify", "hchk"))
        pts = np.array([sample_uniform(h.layout, rng).coords for _ in range(4)])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "instance.json"
            save_instance(h, path)
            h2 = load_instance(path)
        if not np.array_equal(energy_many(h, pts), energy_many(h2, pts)):
            raise AssertionError("reloaded instance gives different energies")
        return "energies identical after reload"

    def check_beta_zero():
        h = _small_instance()
        est = fe_thermo_integration(h, [0.0], 10, np.random.default_rng(0))
        if est.value != 0.0 or est.std_error != 0.0:
            raise AssertionError(f"beta=0 free energy {est.value!r}")
        return "exactly zero"

    def check_enum_vs_quadrature():
        mix, lay = _suite_fixture_corner()
        h = build_instance(mix, lay, seed=derive_seed(seed, "verify", "corner"))
        gap = abs(exact_fe_enumeration(h).value - exact_fe_quadrature(h, 8).value)
        if gap > 1e-9:
            raise AssertionError(f"enumeration vs quadrature gap {gap:.3e}")
        return f"gap {gap:.3e}"

    def check_penalty_identity():
        mix, lay = _suite_fixture_corner()
        h = build_instance(mix, lay, seed=derive_seed(seed, "verify", "penalty"))
        m = Configuration(np.array([0.5, -0.4]), lay)
        spec = BandSpec(m, delta=0.9, n=2, rho=1.3)
        joint = exact_multi_replica_fe_enumeration(h, spec).value
        single = exact_restricted_fe_enumeration(h, m, 0.9).value
        penalty = exact_penalty_enumeration(h, spec)
        gap = abs(joint - single - penalty)
        if gap > 1e-10:
            raise AssertionError(f"penalty identity off by {gap:.3e}")
        return f"gap {gap:.3e}"

    def check_ti_oracle():
        mix, lay = _suite_fixture_corner()
        for k in range(3):
            h = build_instance(mix, lay, seed=derive_seed(seed, "verify", "ti", k))
            en = exact_fe_enumeration(h).value
            ti = fe_thermo_integration(
                h, np.linspace(0.0, 1.0, 11), 400,
                np.random.default_rng(derive_seed(seed, "verify", "ti-mc", k)))
            if abs(ti.value - en) > 3 * ti.std_error:
                raise AssertionError(
                    f"seed {k}: TI {ti.value:.5f} vs exact {en:.5f} "
                    f"(3se {3 * ti.std_error:.5f})")
        return "3 seeds within 3 SE"

    def check_ascent_oracle():
        lay = SpeciesLayout(("s",), (24,))
        h = build_instance(Mixture.from_terms({(2,): 1.0}), lay,
                           seed=derive_seed(seed, "verify", "gs"))
        res = ascend(h, [0.9], 4, 400,
                     np.random.default_rng(derive_seed(seed, "verify", "gs-mc")))
        oracle = eigen_oracle_2spin(h, [0.9])
        rel = abs(res.energy_per_spin - oracle) / abs(oracle)
        if rel > 1e-6:
            raise AssertionError(f"ascent off the eigen oracle by {rel:.3e} relative")
        if not np.allclose(res.maximizer.self_overlap().as_array(), [0.9], atol=1e-9):
            raise AssertionError("maximizer left the shell")
        return f"relative gap {rel:.3e}"

    def check_tap_bookkeeping():
        mix, lay = _suite_fixture_corner()
        cfg = EstimatorConfig(seeds=5, master_seed=derive_seed(seed, "verify", "tap"))
        rep = tap_evaluate(mix, lay, [0.2, 0.3], cfg, seeds=5)
        gap = abs(rep.gap - (rep.lhs.value - rep.gs - rep.logvol - rep.fq.value))
        if gap > 1e-12:
            raise AssertionError(f"gap bookkeeping off by {gap:.3e}")
        return f"reconstruction gap {gap:.3e}"

    run_check("mixture-recentering-identity", check_shift_identity)
    run_check("mixture-nesting-composition", check_nesting)
    run_check("mixture-recentering-removes-linear", check_recentering_removes_linear)
    run_check("geometry-band-volume-mc", check_band_volume)
    run_check("geometry-tilde-round-trip", check_tilde_round_trip)
    run_check("geometry-configuration-checkpoint", check_configuration_checkpoint)
    run_check("hamiltonian-energy-batch", check_energy_batch)
    run_check("hamiltonian-gradient-fd", check_gradient)
    run_check("hamiltonian-instance-checkpoint", check_instance_checkpoint)
    run_check("thermo-beta-zero", check_beta_zero)
    run_check("thermo-enumeration-vs-quadrature", check_enum_vs_quadrature)
    run_check("thermo-penalty-identity", check_penalty_identity)
    run_check("thermo-ti-oracle", check_ti_oracle)
    run_check("ground-state-eigen-oracle", check_ascent_oracle)
    run_check("tap-gap-bookkeeping", check_tap_bookkeeping)

    return {
        "passed": all(c["passed"] for c in checks),
        "mutation": mutation,
        "checks": checks,
    }


# --- batch commands -------------------------------------------------------------


def _out_dir(config: ExperimentConfig) -> Path:
    path = Path(config.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_verify(config: ExperimentConfig, mutation: str | None = None,
               workers: int = 1) -> int:
    report = run_verification_suite(config, mutation)
    out = _out_dir(config)
    _write_json(out / "verify_report.json", report)
    for check in report["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        print(f"{status:4s}  {check['name']}: {check['detail']}")
    n_fail = sum(not c["passed"] for c in report["checks"])
    print(f"verification {'passed' if report['passed'] else 'FAILED'} "
          f"({len(report['checks']) - n_fail}/{len(report['checks'])} checks)")
    return 0 if report["passed"] else 1


def cmd_free_energy(config: ExperimentConfig, workers: int = 1) -> int:
    params = config.free_energy
    layout = config.layout
    method = resolve_fe_method(params.method, layout)

    def task(i: int):
        def run():
            h = build_instance(config.mixture, layout,
                               seed=derive_seed(config.master_seed, "free-energy",
                                                "instance", i))
            rng = np.random.default_rng(
                derive_seed(config.master_seed, "free-energy", "mc", i))
            if method == "enumeration":
                return exact_fe_enumeration(h)
            if method == "quadrature":
                return exact_fe_quadrature(h, params.quadrature_nodes)
            return fe_thermo_integration(h, np.asarray(params.beta_grid),
                                         params.sweeps, rng)
        return run

    estimates = _run_tasks([task(i) for i in range(params.seeds)], workers)
    rows = []
    for i, est in enumerate(estimates):
        flags = ";".join(est.meta.get("flags", []))
        rows.append([i, est.value, est.std_error, est.method, flags])
    out = _out_dir(config)
    _write_csv(out / "free_energy.csv",
               ["seed", "value", "std_error", "method", "flags"], rows)
    values = [est.value for est in estimates]
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    _write_json(out / "free_energy.json", {
        "estimator": method,
        "beta": params.beta_grid[-1] if method == "ti" else 1.0,
        "mean": mean,
        "std_error_of_mean": se,
        "values": values,
        "per_seed_std_errors": [est.std_error for est in estimates],
    })
    print(f"free energy ({method}): mean {mean:.6f} +- {se:.6f} over {len(values)} seeds")
    return 0


def cmd_ground_state(config: ExperimentConfig, workers: int = 1) -> int:
    params = config.ground_state
    layout = config.layout

    def task(i: int):
        def run():
            h = build_instance(config.mixture, layout,
                               seed=derive_seed(config.master_seed, "ground-state",
                                                "instance", i))
            rng = np.random.default_rng(
                derive_seed(config.master_seed, "ground-state", "mc", i))
            res = ascend(h, params.q, params.restarts, params.max_iters, rng)
            try:
                oracle = eigen_oracle_2spin(h, params.q)
            except ValueError:
                oracle = None
            return res, oracle
        return run

    results = _run_tasks([task(i) for i in range(params.seeds)], workers)
    rows = []
    for i, (res, oracle) in enumerate(results):
        rows.append([i, res.energy_per_spin,
                     "" if oracle is None else float(oracle),
                     res.converged_fraction,
                     float(np.mean(res.iteration_counts)),
                     max(res.iteration_counts)])
    out = _out_dir(config)
    _write_csv(out / "ground_state.csv",
               ["seed", "energy_per_spin", "eigen_oracle", "converged_fraction",
                "iterations_mean", "iterations_max"], rows)
    values = [res.energy_per_spin for res, _ in results]
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    payload = {
        "q": list(params.q),
        "mean": mean,
        "std_error_of_mean": se,
        "values": values,
        "converged_fractions": [res.converged_fraction for res, _ in results],
    }
    oracles = [oracle for _, oracle in results if oracle is not None]
    if oracles:
        payload["eigen_oracle_mean"] = float(np.mean(oracles))
    _write_json(out / "ground_state.json", payload)
    print(f"ground state at q={list(params.q)}: mean {mean:.6f} +- {se:.6f}")
    return 0


def cmd_tap_scan(config: ExperimentConfig, workers: int = 1) -> int:
    params = config.tap_scan
    layout = config.layout
    cfg = EstimatorConfig(
        method=params.method,
        beta_grid=params.beta_grid,
        sweeps=params.sweeps,
        quadrature_nodes=params.quadrature_nodes,
        seeds=params.seeds,
        restarts=params.restarts,
        max_iters=params.max_iters,
        gs_bias_allowance=params.gs_bias_allowance,
        master_seed=config.master_seed,
    )

    def task(k: int, q):
        def run():
            rng = np.random.default_rng(derive_seed(config.master_seed, "tap-scan", k))
            return tap_evaluate(config.mixture, layout, q, cfg, rng=rng)
        return run

    reports = _run_tasks([task(k, q) for k, q in enumerate(params.q_grid)], workers)
    flagged = []
    for rep in reports:
        tol = 3.0 * rep.gap_std_error + cfg.gs_bias_allowance
        if rep.gap < -tol:
            rep = dataclasses.replace(
                rep, flags=tuple(sorted(set(rep.flags) | {"tap-inequality-violated"})))
        flagged.append(rep)
    header = [f"q_{name}" for name in config.species] + [
        "lhs", "lhs_std_error", "gs", "gs_std_error", "logvol",
        "fq", "fq_std_error", "gap", "gap_std_error", "onsager", "flags"]
    rows = []
    for rep in flagged:
        rows.append(list(rep.q.values) + [
            rep.lhs.value, rep.lhs.std_error, rep.gs, rep.gs_std_error,
            rep.logvol, rep.fq.value, rep.fq.std_error, rep.gap,
            rep.gap_std_error, rep.onsager, ";".join(rep.flags)])
    out = _out_dir(config)
    _write_csv(out / "tap_scan.csv", header, rows)
    best = candidate_multisamplable(flagged)
    violations = sum("tap-inequality-violated" in rep.flags for rep in flagged)
    _write_json(out / "tap_scan.json", {
        "reports": [rep.to_record() for rep in flagged],
        "candidate": best.to_record(),
        "violations": violations,
    })
    print(f"tap scan over {len(flagged)} overlaps: {violations} violations; "
          f"closest to equality at q={list(best.q.values)} (gap {best.gap:.5f})")
    return 0 if violations == 0 else 1


def cmd_multisamp(config: ExperimentConfig, workers: int = 1) -> int:
    params = config.multisamp
    layout = config.layout

    def task(eps_index: int, eps: float, i: int):
        def run():
            h = build_instance(config.mixture, layout,
                               seed=derive_seed(config.master_seed, "multisamp",
                                                "instance", i))
            rng = np.random.default_rng(
                derive_seed(config.master_seed, "multisamp", "mc", eps_index, i))
            return multisamplability_record(h, params.q, params.n, eps,
                                            np.asarray(params.beta_grid),
                                            params.sweeps, rng)
        return run

    tasks = []
    index = []
    for eps_index, eps in enumerate(params.eps_grid):
        for i in range(params.seeds):
            tasks.append(task(eps_index, eps, i))
            index.append((eps, i))
    records = _run_tasks(tasks, workers)
    rows = []
    for (eps, i), rec in zip(index, records):
        rows.append([eps, i, rec["value"], rec["hits"] or 0, rec["samples"] or 0,
                     ";".join(rec["flags"])])
    out = _out_dir(config)
    _write_csv(out / "multisamp.csv",
               ["eps", "seed", "value", "hits", "samples", "flags"], rows)
    by_eps = []
    cursor = 0
    for eps in params.eps_grid:
        chunk = records[cursor:cursor + params.seeds]
        cursor += params.seeds
        values = [rec["value"] for rec in chunk]
        probs = [(rec["hits"] or 0) / rec["samples"] for rec in chunk
                 if rec["samples"]]
        mean_of_log = float(np.mean(values))
        if probs and sum(probs) > 0:
            log_of_mean = math.log(float(np.mean(probs))) / layout.n
        else:
            total = sum(rec["samples"] or 0 for rec in chunk)
            log_of_mean = math.log(0.5 / max(total, 1)) / layout.n
        by_eps.append({
            "eps": eps,
            "mean_of_log": mean_of_log,
            "log_of_mean": log_of_mean,
            "flags": sorted({f for rec in chunk for f in rec["flags"]}),
        })
    _write_json(out / "multisamp.json", {
        "q": list(params.q),
        "replicas": params.n,
        "per_eps": by_eps,
    })
    for entry in by_eps:
        print(f"eps={entry['eps']}: mean-of-log {entry['mean_of_log']:.6f}, "
              f"log-of-mean {entry['log_of_mean']:.6f}")
    return 0


# --- entry point ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multispin",
        description="Batch experiments for multi-species spherical spin models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("verify", "free-energy", "ground-state", "tap-scan", "multisamp"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's master_seed")
        p.add_argument("--workers", type=int, default=1,
                       help="thread count; outputs do not depend on it")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "verify":
            p.add_argument("--mutate", default=None, choices=MUTATIONS,
                           help="corrupt one formula; the suite must catch it")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = parse_config(Path(args.config).read_text())
        if args.seed is not None:
            config = dataclasses.replace(config, master_seed=args.seed)
        if args.out is not None:
            config = dataclasses.replace(config, out_dir=args.out)
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        if args.command == "verify":
            return cmd_verify(config, mutation=args.mutate, workers=args.workers)
        if args.command == "free-energy":
            return cmd_free_energy(config, workers=args.workers)
        if args.command == "ground-state":
            return cmd_ground_state(config, workers=args.workers)
        if args.command == "tap-scan":
            return cmd_tap_scan(config, workers=args.workers)
        return cmd_multisamp(config, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

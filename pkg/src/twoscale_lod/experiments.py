"""Batch studies: corrector decay, quasi-optimality over a coarse sweep, pollution over k.

A study is fully described by an :class:`ExperimentConfig`, read from a flat
INI-style file (sections geometry, params, mesh, study). Outputs are CSV
files with a header row plus gnuplot-friendly data files.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .correctors import (KINDS, build_corrected_test_basis, corrector_decay_profile, fit_decay,
                         read_correctors, write_correctors)
from .forms import ProblemParams, TwoScaleSpace, constant_datum
from .interpolation import build_interpolator, resolution_slack
from .lod import (error_energy, export_solution, field_dump, lod_infsup, reference_infsup, solve_coarse_galerkin, solve_lod, solve_reference)
from .mesh import MacroDomain, UnitCell, build_structured_mesh, refine_uniform

log = logging.getLogger(__name__)

STUDIES = ("decay", "quasiopt", "sweep", "single")
REFERENCE_INFSUP_LIMIT = 2500


class ConfigError(ValueError):
    pass


def _floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).replace(",", " ").split()]


def _ints(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    # geometry
    g_lower: float = 0.0
    g_upper: float = 1.0
    omega_lower: float = 0.25
    omega_upper: float = 0.75
    inclusion_side: float = 0.5
    # params
    eps_e: complex = 1.0
    eps_i: complex = 0.1 + 0.01j
    k: float = 8.0
    k_list: list = field(default_factory=lambda: [4.0, 8.0, 16.0])
    datum: str = "plane"  # plane | constant | zero
    # mesh
    coarse_n: int = 8
    coarse_n_list: list = field(default_factory=lambda: [8, 16, 32])
    fine_levels: int = 2
    cell_coarse_n: int = 4
    cell_fine_levels: int = 2
    kh: float = 0.5  # fixed k H_c of the pollution sweep
    # study
    study: str = "single"
    m: str = "auto"
    m_max: int = 4
    seeds_per_kind: int = 3
    out: str = "results"
    seed: int = 0
    threads: int = 1
    cache: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.study not in STUDIES:
            raise ConfigError(f"study must be one of {STUDIES}, got {self.study!r}")
        if not self.g_upper > self.g_lower:
            raise ConfigError("macro domain must have positive side length")
        if not self.g_lower < self.omega_lower < self.omega_upper < self.g_upper:
            raise ConfigError("Omega must lie strictly inside G")
        if not 0 < self.inclusion_side < 1:
            raise ConfigError("D must lie strictly inside Y (0 < inclusion_side < 1)")
        if self.fine_levels < 1 or self.cell_fine_levels < 1:
            raise ConfigError("fine meshes need at least one refinement of the coarse meshes")
        if self.k <= 0 or any(k <= 0 for k in self.k_list):
            raise ConfigError("wave numbers must be positive")
        if self.m != "auto":
            try:
                if int(self.m) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"m must be 'auto' or a nonnegative integer, got {self.m!r}") from None
        if self.datum not in ("plane", "constant", "zero"):
            raise ConfigError(f"unknown datum {self.datum!r}")

    # ------------------------------------------------------------------ io

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        values = {}
        for section in parser.sections():
            values.update(parser.items(section))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        sections = {
            "geometry": ["g_lower", "g_upper", "omega_lower", "omega_upper", "inclusion_side"],
            "params": ["eps_e", "eps_i", "k", "k_list", "datum"],
            "mesh": ["coarse_n", "coarse_n_list", "fine_levels", "cell_coarse_n", "cell_fine_levels", "kh"],
            "study": ["study", "m", "m_max", "seeds_per_kind", "out", "seed", "threads", "cache"],
        }
        lines = []
        for name, keys in sections.items():
            lines.append(f"[{name}]")
            for key in keys:
                v = getattr(self, key)
                if isinstance(v, list):
                    v = " ".join(str(x) for x in v)
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def digest(self, *keys) -> str:
        """Hash of the numerically relevant settings (out, threads, cache excluded)."""
        d = asdict(self)
        for k in ("out", "threads", "cache"):
            d.pop(k)
        d["extra"] = [str(k) for k in keys]
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]

    # -------------------------------------------------------------- builders

    def params(self, k: Optional[float] = None) -> ProblemParams:
        k = self.k if k is None else k
        g = None
        if self.datum == "constant":
            g = constant_datum(1.0)
        elif self.datum == "zero":
            g = constant_datum(0.0)
        return ProblemParams(eps_e=self.eps_e, eps_i=self.eps_i, k=float(k), g=g)

    def spaces(self, coarse_n: Optional[int] = None):
        """(coarse space, fine space, interpolator)."""
        n = self.coarse_n if coarse_n is None else coarse_n
        G = build_structured_mesh(MacroDomain(self.g_lower, self.g_upper, self.omega_lower, self.omega_upper), n)
        Y = build_structured_mesh(UnitCell(self.inclusion_side), self.cell_coarse_n)
        coarse = TwoScaleSpace(G, Y)
        fine = TwoScaleSpace(refine_uniform(G, self.fine_levels), refine_uniform(Y, self.cell_fine_levels))
        return coarse, fine, build_interpolator(fine, coarse)


_LIST_KEYS = {"k_list": _floats, "coarse_n_list": _ints}
_INT_KEYS = {"coarse_n", "fine_levels", "cell_coarse_n", "cell_fine_levels", "m_max", "seeds_per_kind",
             "seed", "threads"}
_FLOAT_KEYS = {"g_lower", "g_upper", "omega_lower", "omega_upper", "inclusion_side", "k", "kh"}


def _convert(key, raw):
    if key in _LIST_KEYS:
        return _LIST_KEYS[key](raw)
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in ("eps_e", "eps_i"):
        z = complex(str(raw).replace(" ", "")) if isinstance(raw, str) else complex(raw)
        return z.real if z.imag == 0 else z
    if key == "cache":
        return raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
    if key == "m":
        return str(raw).strip()
    return str(raw).strip()


@dataclass
class StudyResult:
    name: str
    columns: list
    rows: list
    fitted: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def write(self, out: Path) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.name}.csv"
        path.write_text(self.to_csv())
        summary = {"fitted": self.fitted, "provenance": self.provenance}
        (out / f"{self.name}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
        return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.digest(), "code_version": __version__, "seed": cfg.seed}


# --------------------------------------------------------------------------
# oversampling rule


def seed_elements(interp, kind: str, count: int, rng: np.random.Generator) -> list:
    tris = interp.coarse_dofmap(kind).triangles
    picks = rng.choice(len(tris), size=min(count, len(tris)), replace=False)
    return [int(tris[i]) for i in sorted(picks)]


def calibrate_beta(cfg: ExperimentConfig, m_max: int = 3) -> float:
    """Decay rate from one idealized corrector per component on the smallest configured mesh."""
    n = min([cfg.coarse_n] + list(cfg.coarse_n_list))
    k = min([cfg.k] + list(cfg.k_list))
    _, _, interp = replace(cfg, fine_levels=1, cell_fine_levels=1).spaces(n)
    params = cfg.params(k)
    rng = np.random.default_rng(cfg.seed)
    betas = []
    for kind in KINDS:
        seed = seed_elements(interp, kind, 1, rng)[0]
        rows = corrector_decay_profile(interp, params, kind, seed, m_max)
        beta, _ = fit_decay([r[1] for r in rows])
        if np.isfinite(beta):
            betas.append(beta)
    return float(max(betas))


def auto_m(k: float, beta: float, minimum: int = 2) -> int:
    """m(k) = max(minimum, ceil(log k / |log beta|))."""
    if not 0 < beta < 1:
        raise ValueError("decay rate must lie in (0, 1)")
    return max(minimum, int(math.ceil(math.log(max(k, 1.0)) / abs(math.log(beta)))))


def resolve_m(cfg: ExperimentConfig, k: float, beta: Optional[float] = None) -> tuple:
    if cfg.m != "auto":
        return int(cfg.m), beta
    if beta is None:
        beta = calibrate_beta(cfg)
    return auto_m(k, beta), beta


# --------------------------------------------------------------------------
# corrector cache


def cached_correctors(cfg: ExperimentConfig, interp, params, m: int, coarse_n: int) -> tuple:
    """(CorrectorSet, loaded_from_cache)."""
    path = None
    if cfg.cache:
        key = cfg.digest("correctors", coarse_n, params.k, m)
        path = Path(cfg.out) / "cache" / f"correctors_{key}.txt"
        if path.exists():
            return read_correctors(path.read_text(), interp), True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cs = build_corrected_test_basis(interp, params, m, threads=cfg.threads, check_resolution=False)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(write_correctors(cs))
    return cs, False


# --------------------------------------------------------------------------
# studies


def run_decay_study(cfg: ExperimentConfig) -> StudyResult:
    _, _, interp = cfg.spaces()
    params = cfg.params()
    rng = np.random.default_rng(cfg.seed)
    rows, fitted = [], {}
    for kind in KINDS:
        worst, worst_r2 = 0.0, 1.0
        for seed in seed_elements(interp, kind, cfg.seeds_per_kind, rng):
            profile = corrector_decay_profile(interp, params, kind, seed, cfg.m_max)
            beta, r2 = fit_decay([p[1] for p in profile])
            worst, worst_r2 = max(worst, beta), min(worst_r2, r2)
            for m, tail, loc in profile:
                rows.append([kind, seed, m, tail, loc])
        fitted[f"beta_{kind}"] = worst
        fitted[f"r2_{kind}"] = worst_r2
    return StudyResult("decay", ["kind", "seed", "m", "tail", "localization_error"], rows, fitted,
                       _provenance(cfg))


def _mesh_sizes(interp):
    return interp.coarse.macro_mesh.mesh_size, interp.coarse.cell_mesh.mesh_size


def run_quasiopt_study(cfg: ExperimentConfig) -> StudyResult:
    params = cfg.params()
    beta = None
    rows = []
    for n in cfg.coarse_n_list:
        _, fine, interp = cfg.spaces(n)
        m, beta = resolve_m(cfg, params.k, beta)
        ref = solve_reference(fine, params)
        cs, _ = cached_correctors(cfg, interp, params, m, n)
        lod = solve_lod(interp, params, m, correctors=cs, check_resolution=False)
        e = error_energy(interp, params, ref, lod)
        H, h = _mesh_sizes(interp)
        rows.append([n, H, h, m, e["error"], e["best"], e["ratio"]])
        log.info("quasiopt n=%d m=%d ratio=%.3f", n, m, e["ratio"])
    ratios = [r[6] for r in rows]
    fitted = {"beta": beta, "max_ratio": max(ratios), "ratio_spread": max(ratios) / min(ratios)}
    if len(rows) > 1:
        x = np.log([r[1] + r[2] for r in rows])
        y = np.log([r[4] for r in rows])
        fitted["error_rate"] = float(np.polyfit(x, y, 1)[0])
    return StudyResult("quasiopt", ["n", "H_c", "h_c", "m", "error", "best_approx", "ratio"], rows, fitted,
                       _provenance(cfg))


def pollution_mesh(k: float, kh: float, cfg: ExperimentConfig) -> int:
    """Coarse n with k H_c = kh, rounded to a multiple that keeps Omega on grid lines."""
    side = cfg.g_upper - cfg.g_lower
    n = k * side / kh
    step = 4
    return max(step, int(round(n / step)) * step)


def run_pollution_sweep(cfg: ExperimentConfig, minimum_m: int = 2) -> StudyResult:
    """LOD and plain coarse Galerkin across k with k H_c fixed."""
    beta = calibrate_beta(cfg) if cfg.m == "auto" else None
    rows = []
    for k in cfg.k_list:
        params = cfg.params(k)
        n = pollution_mesh(k, cfg.kh, cfg)
        coarse, fine, interp = cfg.spaces(n)
        m = auto_m(k, beta, minimum_m) if beta is not None else int(cfg.m)
        ref = solve_reference(fine, params)
        cs, _ = cached_correctors(cfg, interp, params, m, n)
        lod = solve_lod(interp, params, m, correctors=cs, check_resolution=False)
        plain = solve_coarse_galerkin(interp, params)
        e_lod = error_energy(interp, params, ref, lod)
        e_plain = error_energy(interp, params, ref, plain)
        ref_is = reference_infsup(fine, params) if fine.dimension <= REFERENCE_INFSUP_LIMIT else float("nan")
        lod_is = lod_infsup(interp, params, cs)
        rows.append([k, n, m, ref_is, lod_is, e_lod["ratio"], e_plain["ratio"], e_lod["best"]])
        log.info("sweep k=%g n=%d m=%d lod=%.3f plain=%.3f", k, n, m, e_lod["ratio"], e_plain["ratio"])
    fitted = {"beta": beta,
              "lod_ratio_growth": rows[-1][5] / rows[0][5],
              "plain_ratio_growth": rows[-1][6] / rows[0][6]}
    cols = ["k", "n", "m", "reference_infsup", "lod_infsup", "lod_ratio", "plain_ratio", "best_approx"]
    return StudyResult("sweep", cols, rows, fitted, _provenance(cfg))


def run_single(cfg: ExperimentConfig) -> tuple:
    """One LOD solve with diagnostics; writes the solution export and a field dump."""
    params = cfg.params()
    _, fine, interp = cfg.spaces()
    m, beta = resolve_m(cfg, params.k)
    t0 = time.perf_counter()
    cs, from_cache = cached_correctors(cfg, interp, params, m, cfg.coarse_n)
    t_corr = time.perf_counter() - t0
    lod = solve_lod(interp, params, m, correctors=cs, check_resolution=False)
    lod.timings["correctors"] = t_corr
    lod.timings["correctors_cached"] = from_cache
    lod.diagnostics["resolution_slack"] = resolution_slack(interp, params)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "solution.txt").write_text(export_solution(lod.solution))
    (out / "field.dat").write_text(field_dump(interp.coarse, lod.solution.macro))
    # timings vary between runs, so they stay out of the CSV
    (out / "single_timings.json").write_text(json.dumps(lod.timings, indent=2, sort_keys=True))
    row = [params.k, cfg.coarse_n, m, lod.residual, lod.diagnostics["dimension"],
           lod.diagnostics.get("overlap_G"), lod.diagnostics.get("overlap_Y"),
           lod.diagnostics["resolution_slack"]]
    result = StudyResult("single", ["k", "n", "m", "residual", "dimension", "overlap_G", "overlap_Y",
                                    "resolution_slack"], [row], {"beta": beta}, _provenance(cfg))
    return result, lod


def run(cfg: ExperimentConfig) -> StudyResult:
    if cfg.study == "decay":
        result = run_decay_study(cfg)
    elif cfg.study == "quasiopt":
        result = run_quasiopt_study(cfg)
    elif cfg.study == "sweep":
        result = run_pollution_sweep(cfg)
    else:
        result, _ = run_single(cfg)
    result.write(Path(cfg.out))
    return result

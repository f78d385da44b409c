"""Convergence studies on the unit disc and interval, rate fitting, CSV and SVG output."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from xml.sax.saxutils import escape

import numpy as np

from .assembly import AssemblyConfig, assemble_system
from .mesh import Mesh, SubdomainSpec, axis_square, build_disc_mesh, build_interval_mesh, \
    mark_subdomain, refine_uniform
from .norms import (UndefinedNormWarning, disc_exact_solution, energy_error, eoc,
                    h1_seminorm_error, l2_error, localized_energy_error)
from .solver import solve

logger = logging.getLogger(__name__)

CSV_HEADER = ("s,level,h,ndof,l2_global,h1_global,l2_local,h1_local,energy_global,"
              "energy_local,wall_time_seconds")
NORM_FIELDS = ("l2_global", "h1_global", "l2_local", "h1_local", "energy_global",
               "energy_local")

#: 2D level 1: fan of 16 triangles refined twice
DISC_SEGMENTS = 16
DISC_BASE_REFINEMENTS = 2
#: 1D level 1: eight equal intervals
INTERVAL_BASE_ELEMENTS = 8
MAX_FREE_DOFS = 8000


@dataclass(frozen=True)
class RunConfig:
    """Parameters of a convergence study.

    Parameters
    ----------
    dim : int
        1 (interval ``(-1, 1)``) or 2 (unit disc).
    s_values : tuple of float
    levels : int
        Number of meshes, at least 2; level 1 is the base mesh.
    subdomain : SubdomainSpec
        Region of the local errors.
    cutoff_outer : SubdomainSpec or None
        Outer region of the cut-off for ``energy_local``; ``None`` skips it.
    project_boundary : bool
        Move new boundary vertices onto the circle when refining.
    workers : int
    max_dofs : int
        Levels with more free vertices are not computed.
    seed : int
        Seed for randomised property checks; the study itself is deterministic.
    """

    dim: int = 2
    s_values: tuple = (0.5,)
    levels: int = 4
    subdomain: SubdomainSpec = field(default_factory=lambda: axis_square(0.4))
    cutoff_outer: SubdomainSpec | None = None
    project_boundary: bool = True
    workers: int = 1
    max_dofs: int = MAX_FREE_DOFS
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    seed: int = 0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValueError("levels must be an integer >= 2")
        s_values = tuple(float(s) for s in self.s_values)
        if not s_values or any(not 0.0 < s < 1.0 for s in s_values):
            raise ValueError("every s must lie in (0, 1)")
        object.__setattr__(self, "s_values", s_values)
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass(frozen=True)
class ConvergenceRecord:
    """Errors of one ``(s, level)`` cell; ``nan`` marks undefined or failed values."""

    s: float
    level: int
    h: float
    ndof: int
    l2_global: float = math.nan
    h1_global: float = math.nan
    l2_local: float = math.nan
    h1_local: float = math.nan
    energy_global: float = math.nan
    energy_local: float = math.nan
    wall_time_seconds: float = math.nan
    error: str | None = field(default=None, compare=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


def mesh_hierarchy(dim: int, levels: int, project_boundary: bool = True):
    """Yield ``(level, mesh)`` for levels ``1, ..., levels``."""
    if dim == 2:
        mesh = build_disc_mesh(DISC_SEGMENTS, DISC_BASE_REFINEMENTS, project_boundary)
    else:
        mesh = build_interval_mesh(INTERVAL_BASE_ELEMENTS)
    for level in range(1, levels + 1):
        yield level, replace(mesh, level=level)
        if level < levels:
            mesh = refine_uniform(mesh, project_boundary)


def _local_errors(exact, u_h, region):
    if region.is_empty:
        return math.nan, math.nan
    return l2_error(exact, u_h, region), h1_seminorm_error(exact, u_h, region)


def run_cell(mesh: Mesh, s: float, config: RunConfig) -> ConvergenceRecord:
    """Assemble, solve and measure one ``(s, level)`` cell."""
    tic = time.perf_counter()
    exact = disc_exact_solution(s, mesh.dim)
    system = assemble_system(mesh, s, exact.rhs_constant, config.assembly, config.workers)
    u_h = solve(system)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedNormWarning)
        h1_global = h1_seminorm_error(exact, u_h)
        region = mark_subdomain(mesh, config.subdomain)
    l2_local, h1_local = _local_errors(exact, u_h, region)
    energy_local = math.nan
    if config.cutoff_outer is not None:
        try:
            energy_local = localized_energy_error(u_h, exact, config.subdomain,
                                                  config.cutoff_outer, system=system)
        except ValueError as exc:  # layer thinner than 2h on coarse meshes
            logger.info("energy_local skipped at level %d: %s", mesh.level, exc)
    return ConvergenceRecord(
        s=s, level=mesh.level, h=mesh.h, ndof=system.ndof,
        l2_global=l2_error(exact, u_h), h1_global=h1_global,
        l2_local=l2_local, h1_local=h1_local,
        energy_global=energy_error(system, u_h, exact), energy_local=energy_local,
        wall_time_seconds=time.perf_counter() - tic)


def run_convergence(config: RunConfig, progress=None) -> list[ConvergenceRecord]:
    """One record per ``(s, level)``; a failing cell yields an error record.

    ``progress`` is an optional callable receiving each finished record.
    """
    meshes = [m for _, m in mesh_hierarchy(config.dim, config.levels, config.project_boundary)]
    records = []
    for s in config.s_values:
        for mesh in meshes:
            ndof = int(np.count_nonzero(~mesh.boundary_vertex))
            if ndof > config.max_dofs:
                rec = ConvergenceRecord(s, mesh.level, mesh.h, ndof,
                                        error=f"{ndof} free vertices exceed {config.max_dofs}")
            else:
                try:
                    rec = run_cell(mesh, s, config)
                except Exception as exc:  # noqa: BLE001 - one cell must not stop the study
                    logger.warning("s=%g level=%d failed: %s", s, mesh.level, exc)
                    rec = ConvergenceRecord(s, mesh.level, mesh.h, ndof,
                                            error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


# ---------------------------------------------------------------------------
# rates


@dataclass(frozen=True)
class RateRow:
    """Rates of one norm for one ``s``; ``nan`` where undefined."""

    s: float
    norm: str
    pairwise: tuple
    slope: float

    @property
    def final(self) -> float:
        return self.pairwise[-1] if self.pairwise else math.nan


def ls_slope(values, hs) -> float:
    """Least-squares slope of ``log e`` against ``log h``."""
    e = np.asarray(values, dtype=float)
    h = np.asarray(hs, dtype=float)
    if len(e) < 2 or np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("need at least two positive points")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def fit_rates(records, last: int = 3) -> list[RateRow]:
    """Pairwise EOCs and the least-squares slope over the last ``last`` points.

    Norms without at least two finite positive values get empty rates.

    Raises
    ------
    ValueError
        If some ``s`` has fewer than two records.
    """
    by_s: dict[float, list] = {}
    for rec in records:
        by_s.setdefault(rec.s, []).append(rec)
    rows = []
    for s, recs in by_s.items():
        recs = sorted(recs, key=lambda r: r.level)
        if len(recs) < 2:
            raise ValueError(f"s={s}: need at least two levels to fit rates")
        for name in NORM_FIELDS:
            pts = [(r.h, getattr(r, name)) for r in recs
                   if math.isfinite(getattr(r, name)) and getattr(r, name) > 0]
            if len(pts) < 2:
                rows.append(RateRow(s, name, (), math.nan))
                continue
            hs, es = zip(*pts)
            rows.append(RateRow(s, name, tuple(eoc(es, hs)), ls_slope(es[-last:], hs[-last:])))
    return rows


def format_rates(rows) -> str:
    lines = [f"{'s':>5} {'norm':<14} {'final EOC':>10} {'LS slope':>9}  pairwise"]
    for r in rows:
        pair = " ".join(f"{v:.3f}" for v in r.pairwise) or "-"
        lines.append(f"{r.s:>5.3g} {r.norm:<14} {r.final:>10.4f} {r.slope:>9.4f}  {pair}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    return "nan" if math.isnan(v) else repr(v)


def emit_csv(records, path) -> None:
    """Write the records with the fixed header; undefined values become ``nan``."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    names = CSV_HEADER.split(",")
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in records:
            fh.write(",".join(_fmt(getattr(rec, n)) for n in names) + "\n")


def read_csv(path) -> list[ConvergenceRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header")
        out = []
        for row in reader:
            if not row:
                continue
            vals = dict(zip(header, row))
            kw = {k: float(v) for k, v in vals.items()}
            kw["level"], kw["ndof"] = int(vals["level"]), int(vals["ndof"])
            out.append(ConvergenceRecord(**kw))
    return out


# ---------------------------------------------------------------------------
# SVG


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
           "#e377c2", "#7f7f7f", "#bcbd22")


def _series(records):
    out = []
    for s in sorted({r.s for r in records}):
        recs = sorted((r for r in records if r.s == s), key=lambda r: r.level)
        for name in NORM_FIELDS:
            pts = [(r.h, getattr(r, name)) for r in recs
                   if math.isfinite(getattr(r, name)) and getattr(r, name) > 0]
            if len(pts) >= 2:
                out.append((f"{name} (s={s:g})", s, pts))
    return out


def emit_plot(records, path, width: int = 720, height: int = 540) -> None:
    """Self-contained log-log SVG of error against ``h``.

    One polyline per defined (norm, s) series plus dashed guides with slopes
    ``1/2 + s``, ``s - 1/2`` and ``1`` anchored at the coarsest point.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    series = _series(records)
    pts = [p for _, _, ps in series for p in ps] or [(r.h, 1.0) for r in records]
    lh = np.log10([p[0] for p in pts])
    le = np.log10([p[1] for p in pts])
    x0, x1 = lh.min() - 0.1, lh.max() + 0.1
    y0, y1 = le.min() - 0.3, le.max() + 0.3
    ml, mr, mt, mb = 70, 230, 20, 50

    def X(h):
        return ml + (math.log10(h) - x0) / (x1 - x0) * (width - ml - mr)

    def Y(e):
        return height - mb - (math.log10(e) - y0) / (y1 - y0) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
             'fill="none" stroke="black"/>']
    for k in range(math.ceil(x0), math.floor(x1) + 1):
        parts.append(f'<text x="{X(10.0 ** k):.1f}" y="{height - mb + 15}" '
                     f'text-anchor="middle">1e{k}</text>')
    for k in range(math.ceil(y0), math.floor(y1) + 1):
        parts.append(f'<text x="{ml - 5}" y="{Y(10.0 ** k) + 4:.1f}" text-anchor="end">1e{k}</text>')
    parts.append(f'<text x="{(width - mr + ml) / 2:.0f}" y="{height - 10}" '
                 'text-anchor="middle">h</text>')
    parts.append(f'<text x="15" y="{(height - mb + mt) / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {(height - mb + mt) / 2:.0f})">error</text>')
    parts.append(f'<g clip-path="url(#plot)"><clipPath id="plot"><rect x="{ml}" y="{mt}" '
                 f'width="{width - ml - mr}" height="{height - mt - mb}"/></clipPath>')
    guides = []
    h_hi, h_lo = 10.0 ** lh.max(), 10.0 ** lh.min()
    e_ref = 10.0 ** le.max()
    for s in sorted({r.s for r in records}):
        guides += [(f"h^(1/2+s), s={s:g}", 0.5 + s), (f"h^(s-1/2), s={s:g}", s - 0.5)]
    guides.append(("h^1", 1.0))
    for label, slope in guides:
        e_lo = e_ref * (h_lo / h_hi) ** slope
        parts.append(f'<line class="guide" x1="{X(h_hi):.2f}" y1="{Y(e_ref):.2f}" '
                     f'x2="{X(h_lo):.2f}" y2="{Y(e_lo):.2f}" stroke="gray" '
                     f'stroke-dasharray="4 3"><title>{escape(label)}</title></line>')
    for k, (label, _, ps) in enumerate(series):
        coords = " ".join(f"{X(h):.2f},{Y(e):.2f}" for h, e in ps)
        parts.append(f'<polyline class="series" points="{coords}" fill="none" '
                     f'stroke="{_COLORS[k % len(_COLORS)]}" stroke-width="1.5">'
                     f'<title>{escape(label)}</title></polyline>')
    parts.append("</g>")
    for k, (label, _, _) in enumerate(series):
        y = mt + 14 * (k + 1)
        parts.append(f'<line x1="{width - mr + 10}" y1="{y - 4}" x2="{width - mr + 30}" '
                     f'y2="{y - 4}" stroke="{_COLORS[k % len(_COLORS)]}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - mr + 35}" y="{y}">{escape(label)}</text>')
    y = mt + 14 * (len(series) + 1)
    parts.append(f'<line x1="{width - mr + 10}" y1="{y - 4}" x2="{width - mr + 30}" y2="{y - 4}" '
                 'stroke="gray" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{width - mr + 35}" y="{y}">reference slopes</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def record_fields() -> list[str]:
    return [f.name for f in fields(ConvergenceRecord) if f.name != "error"]

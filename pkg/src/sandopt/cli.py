"""Configuration-driven entry point and artifact writers.

Studies are described by flat ``key = value`` text files (``#`` comments,
blank lines ignored); the schema is documented in the README. A run writes
its artifacts into the output directory:

* ``history.csv``        per-iteration (topopt) or per-generation (sizing) records
* ``density_final.csv``  raw densities, plus ``density_final.pgm`` (topopt)
* ``pareto.csv``         archive designs (sizing)
* ``convergence.svg`` / ``front.svg``  plots
* ``manifest.json``      config echo, seed, versions, wall time

Exit codes: 0 ok, 1 config error, 2 runtime failure. All artifacts except the
manifest (which records wall time) are byte-reproducible from config + seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, nsga2, sandwich, topopt
from .fem2d import MaterialModel, QuadMesh

OUTPUT_ROOT_ENV = "SANDOPT_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid study file; message carries line-level diagnostics."""


@dataclass
class StudyConfig:
    mode: str = ""  # topopt | sizing
    objective: str = ""  # stress | frequency
    seed: int = 0
    output_dir: str = "runs/study"
    jobs: int = 1
    # shared physics
    length: float = 1.0
    load: float = 50e3
    with_joints: bool = False
    joint_length: float = 0.12
    youngs_modulus: float = 210e9
    poisson: float = 0.3
    density: float = 7850.0
    stiffness_penal: float = 3.0
    mass_penal: float = 6.0
    # topology optimization
    height: float = 0.045
    element_size: float = 0.005
    volume_fraction: float | None = None
    filter_radius: float = 3.0
    pnorm: float = 8.0
    relaxation: float = 1.5
    face_rows: int = 1
    mass_scheme: str = "dual"
    max_iterations: int | None = None
    tolerance: float = 0.01
    move_limit: float = 0.2
    n_modes: int = 3
    mode_weights: tuple = (0.7, 0.2, 0.1)
    # sizing optimization
    core_type: str | None = None
    population: int = 120
    generations: int = 100
    runs: int = 2
    # bookkeeping
    source_text: str = field(default="", repr=False)


_CHOICES = {
    "mode": ("topopt", "sizing"),
    "objective": ("stress", "frequency"),
    "mass_scheme": ("dual", "simp"),
    "core_type": sandwich.CORE_TYPES,
}

_POSITIVE = (
    "length", "load", "joint_length", "youngs_modulus", "density", "height",
    "element_size", "filter_radius", "pnorm", "relaxation", "tolerance",
    "move_limit",
)


def _coerce(name: str, raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is tuple:
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, source: str = "<config>") -> StudyConfig:
    """Parse and validate a study file; raises ConfigError with line numbers."""
    types = {f.name: f.type for f in fields(StudyConfig)}
    optional_int = {"max_iterations"}
    known = set(types) - {"source_text"}
    cfg = StudyConfig(source_text=text)
    errors: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {body!r}")
            continue
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in known:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        ftype = {"mode": str, "objective": str, "mass_scheme": str, "core_type": str,
                 "output_dir": str}.get(key)
        if ftype is None:
            ann = str(types[key])
            if key in optional_int or "int" in ann:
                ftype = int
            if "bool" in ann:
                ftype = bool
            elif "tuple" in ann:
                ftype = tuple
            elif ftype is None:
                ftype = float
        try:
            setattr(cfg, key, _coerce(key, raw, ftype))
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    errors.extend(f"{source}: {msg}" for msg in validate_config(cfg))
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg


def validate_config(cfg: StudyConfig) -> list[str]:
    errors = []
    for key, choices in _CHOICES.items():
        value = getattr(cfg, key)
        if value is not None and value != "" and value not in choices:
            errors.append(f"{key} must be one of {choices}, got {value!r}")
    if cfg.mode not in ("topopt", "sizing"):
        errors.append("mode is required (topopt or sizing)")
        return errors
    if cfg.objective not in ("stress", "frequency"):
        errors.append("objective is required (stress or frequency)")
    for key in _POSITIVE:
        if getattr(cfg, key) <= 0:
            errors.append(f"{key} must be positive")
    if cfg.mode == "topopt":
        if cfg.volume_fraction is None:
            errors.append("volume_fraction is required in topopt mode")
        elif not (0.0 < cfg.volume_fraction <= 1.0):
            errors.append("volume_fraction must lie in (0, 1]")
    if cfg.mode == "sizing":
        if cfg.core_type is None:
            errors.append("core_type is required in sizing mode")
        for key in ("population", "generations", "runs"):
            if getattr(cfg, key) < 1:
                errors.append(f"{key} must be at least 1")
    if cfg.jobs < 1:
        errors.append("jobs must be at least 1")
    if cfg.seed < 0:
        errors.append("seed must be non-negative")
    return errors


def load_config(path: str | Path) -> StudyConfig:
    return parse_config(Path(path).read_text(), source=str(path))


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def density_to_image(x: np.ndarray, mesh: QuadMesh) -> np.ndarray:
    """8-bit grayscale grid, row-major top-to-bottom, 0 void to 255 solid."""
    grid = np.asarray(x, dtype=float).reshape(mesh.nx, mesh.ny).T[::-1]
    return np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_density(x: np.ndarray, mesh: QuadMesh, basepath: str | Path) -> list[Path]:
    """Write <base>.pgm and <base>.csv for a density field; returns the paths."""
    base = Path(basepath)
    img = density_to_image(x, mesh)
    pgm = base.with_suffix(".pgm")
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    csv = base.with_suffix(".csv")
    grid = np.asarray(x, dtype=float).reshape(mesh.nx, mesh.ny).T[::-1]
    lines = [f"{mesh.nx} {mesh.ny}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in grid)
    csv.write_text("\n".join(lines) + "\n")
    return [pgm, csv]


def import_density(path: str | Path) -> tuple[int, int, np.ndarray]:
    """Read a density CSV back into element order; exact round trip."""
    lines = Path(path).read_text().strip().splitlines()
    nx, ny = (int(v) for v in lines[0].split())
    grid = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    if grid.shape != (ny, nx):
        raise ValueError(f"density grid is {grid.shape}, expected {(ny, nx)}")
    return nx, ny, grid[::-1].T.ravel().copy()


def _svg_plot(path: Path, series, title: str, xlabel: str, ylabel: str, scatter: bool) -> None:
    # hand-rolled SVG so artifacts stay byte-reproducible
    width, height, margin = 640, 480, 60
    xs = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def px(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 16}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {height / 2:.0f})">{ylabel}</text>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10">{x0:.6g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="end" font-size="10">{x1:.6g}</text>',
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" font-size="10">{y0:.6g}</text>',
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" font-size="10">{y1:.6g}</text>',
    ]
    for i, (label, sx, sy) in enumerate(series):
        color = colors[i % len(colors)]
        pts = [(px(x), py(y)) for x, y in zip(np.asarray(sx, float), np.asarray(sy, float))]
        if scatter:
            parts.extend(
                f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>' for x, y in pts
            )
        else:
            poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            parts.append(f'<polyline points="{poly}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - margin}" y="{margin + 14 * (i + 1)}" text-anchor="end" '
            f'font-size="11" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def write_line_svg(path, xs, ys, title, xlabel, ylabel, label=""):
    _svg_plot(Path(path), [(label, xs, ys)], title, xlabel, ylabel, scatter=False)


def write_scatter_svg(path, xs, ys, title, xlabel, ylabel, label=""):
    _svg_plot(Path(path), [(label, xs, ys)], title, xlabel, ylabel, scatter=True)


# ---------------------------------------------------------------------------
# study execution


def output_dir(cfg: StudyConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(cfg.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _material(cfg: StudyConfig) -> MaterialModel:
    return MaterialModel(
        E0=cfg.youngs_modulus,
        nu=cfg.poisson,
        rho=cfg.density,
        pl=cfg.stiffness_penal,
        ql=cfg.mass_penal,
    )


def _topopt_config(cfg: StudyConfig) -> topopt.TopOptConfig:
    return topopt.TopOptConfig(
        length=cfg.length,
        height=cfg.height,
        element_size=cfg.element_size,
        objective=cfg.objective,
        volume_fraction=cfg.volume_fraction,
        pressure=cfg.load,
        material=_material(cfg),
        filter_radius=cfg.filter_radius,
        p=cfg.pnorm,
        q=cfg.relaxation,
        n_modes=cfg.n_modes,
        mode_weights=cfg.mode_weights,
        face_rows=cfg.face_rows,
        mass_scheme=cfg.mass_scheme,
        max_iterations=cfg.max_iterations,
        tolerance=cfg.tolerance,
        move_limit=cfg.move_limit,
        with_joints=cfg.with_joints,
        joint_length=cfg.joint_length,
    )


def _run_topopt_study(cfg: StudyConfig, out: Path) -> list[str]:
    result = topopt.run_topopt(_topopt_config(cfg))
    write_csv(
        out / "history.csv",
        ["iteration", "objective", "constraint", "change"],
        ((h.iteration, h.objective, h.constraint, h.change) for h in result.history),
    )
    export_density(result.design.x, result.mesh, out / "density_final")
    its = [h.iteration for h in result.history]
    objs = [h.objective for h in result.history]
    write_line_svg(
        out / "convergence.svg",
        its,
        objs,
        f"{cfg.objective} objective",
        "iteration",
        "p-norm stress [Pa]" if cfg.objective == "stress" else "weighted eigenvalue",
        label=cfg.objective,
    )
    return [
        "history.csv",
        "density_final.pgm",
        "density_final.csv",
        "convergence.svg",
    ]


def sizing_evaluator(cfg: StudyConfig):
    """Objective pair for sizing: (area density, max stress) or (area density, -f1)."""
    material = _material(cfg)
    want_stress = cfg.objective == "stress"

    def evaluate(genes):
        design = sandwich.design_from_genes(cfg.core_type, genes, cfg.with_joints)
        r = sandwich.evaluate(
            design,
            load=cfg.load,
            length=cfg.length,
            material=material,
            need_stress=want_stress,
            need_frequency=not want_stress,
        )
        second = r.max_vm if want_stress else -r.f1
        return (r.area_density, second)

    return evaluate


def _run_sizing_study(cfg: StudyConfig, out: Path) -> list[str]:
    names = sandwich.variables_for(cfg.core_type, cfg.with_joints)
    lower, upper = sandwich.bounds_for(cfg.core_type, cfg.with_joints)
    history_rows = []

    def on_generation(run, gen, evals, pop):
        objs = np.array([p.objectives for p in pop])
        front = sum(1 for p in pop if p.rank == 0)
        history_rows.append(
            (run, gen, evals, float(objs[:, 0].min()), float(objs[:, 1].min()), front)
        )

    archive = nsga2.evolve(
        sizing_evaluator(cfg),
        lower,
        upper,
        nsga2.NSGAConfig(
            population=cfg.population,
            generations=cfg.generations,
            runs=cfg.runs,
            seed=cfg.seed,
        ),
        repair=lambda g: sandwich.repair_genes(cfg.core_type, g, cfg.with_joints),
        on_generation=on_generation,
        jobs=cfg.jobs,
    )
    second_name = "max_vm" if cfg.objective == "stress" else "f1"
    rows = []
    for member, run_id in zip(archive.members, archive.provenance):
        second = member.objectives[1] if cfg.objective == "stress" else -member.objectives[1]
        rows.append(
            [cfg.core_type, run_id, *member.genes, member.objectives[0], second]
        )
    write_csv(
        out / "pareto.csv",
        ["core_type", "run", *names, "area_density", second_name],
        rows,
    )
    write_csv(
        out / "history.csv",
        ["run", "generation", "evaluations", "best_area_density", f"best_{second_name}", "front_size"],
        history_rows,
    )
    objs = archive.objectives()
    second_vals = objs[:, 1] if cfg.objective == "stress" else -objs[:, 1]
    write_scatter_svg(
        out / "front.svg",
        objs[:, 0],
        second_vals,
        f"{cfg.core_type} {cfg.objective} front",
        "area density [kg/m^2]",
        "max von Mises [Pa]" if cfg.objective == "stress" else "f1 [Hz]",
        label=cfg.core_type,
    )
    return ["pareto.csv", "history.csv", "front.svg"]


def run_study(cfg: StudyConfig) -> tuple[int, dict]:
    """Execute a validated study; returns (exit_status, manifest)."""
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    status = 0
    artifacts: list[str] = []
    error = None
    try:
        if cfg.mode == "topopt":
            artifacts = _run_topopt_study(cfg, out)
        else:
            artifacts = _run_sizing_study(cfg, out)
    except topopt.TopOptError as exc:
        status, error = 2, str(exc)
        write_csv(
            out / "history.csv",
            ["iteration", "objective", "constraint", "change"],
            ((h.iteration, h.objective, h.constraint, h.change) for h in exc.history),
        )
        (out / "FAILED").write_text(str(exc) + "\n")
        artifacts = ["history.csv", "FAILED"]
    except Exception as exc:  # noqa: BLE001 - report, mark, and exit nonzero
        status, error = 2, str(exc)
        (out / "FAILED").write_text(str(exc) + "\n")
        artifacts = ["FAILED"]
    manifest = {
        "tool": "sandopt",
        "version": __version__,
        "mode": cfg.mode,
        "objective": cfg.objective,
        "seed": cfg.seed,
        "config_text": cfg.source_text,
        "artifacts": artifacts,
        "status": "ok" if status == 0 else "failed",
        "error": error,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status, manifest


def export_run(run_dir: str | Path) -> list[Path]:
    """Regenerate derived artifacts (image, plots) from a run directory."""
    run_dir = Path(run_dir)
    written: list[Path] = []
    density_csv = run_dir / "density_final.csv"
    if density_csv.exists():
        nx, ny, x = import_density(density_csv)
        mesh = _image_mesh(nx, ny)
        written.extend(export_density(x, mesh, run_dir / "density_final"))
    history = run_dir / "history.csv"
    if history.exists() and density_csv.exists():
        rows = [line.split(",") for line in history.read_text().strip().splitlines()[1:]]
        if rows:
            its = [int(r[0]) for r in rows]
            objs = [float(r[1]) for r in rows]
            path = run_dir / "convergence.svg"
            write_line_svg(path, its, objs, "objective", "iteration", "objective")
            written.append(path)
    pareto = run_dir / "pareto.csv"
    if pareto.exists():
        lines = pareto.read_text().strip().splitlines()
        header = lines[0].split(",")
        rows = [line.split(",") for line in lines[1:]]
        if rows:
            xs = [float(r[header.index("area_density")]) for r in rows]
            ys = [float(r[-1]) for r in rows]
            path = run_dir / "front.svg"
            write_scatter_svg(path, xs, ys, "archive", "area density [kg/m^2]", header[-1])
            written.append(path)
    if not written:
        raise FileNotFoundError(f"no exportable artifacts found in {run_dir}")
    return written


def _image_mesh(nx: int, ny: int):
    # lightweight stand-in with just the fields the exporters need
    class _Grid:
        pass

    g = _Grid()
    g.nx, g.ny = nx, ny
    return g


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sandopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a study file")
    p_run.add_argument("config", help="path to a study file")
    p_run.add_argument("--jobs", type=int, default=None, help="cap worker count")
    p_val = sub.add_parser("validate", help="check a study file")
    p_val.add_argument("config")
    p_exp = sub.add_parser("export", help="regenerate derived artifacts of a run")
    p_exp.add_argument("run_dir")
    args = parser.parse_args(argv)

    if args.command in ("run", "validate"):
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"config error:\n{exc}", file=sys.stderr)
            return 1
        except OSError as exc:
            print(f"cannot read config: {exc}", file=sys.stderr)
            return 1
        if args.command == "validate":
            print("ok")
            return 0
        if args.jobs is not None:
            cfg.jobs = max(1, args.jobs)
        status, manifest = run_study(cfg)
        print(f"status: {manifest['status']}; artifacts in {output_dir(cfg)}")
        if manifest["error"]:
            print(manifest["error"], file=sys.stderr)
        return status

    try:
        written = export_run(args.run_dir)
    except (OSError, ValueError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

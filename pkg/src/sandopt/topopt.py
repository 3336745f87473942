"""SIMP topology optimization on plane-stress quad grids.

Two objectives share one loop: the p-norm of relaxed element von Mises
stresses under a fixed pressure load, and a weighted sum of the lowest
eigenvalues of the free-vibration problem. Each iteration filters the
design densities, runs the relevant FE solve, forms objective and adjoint
or eigenvector sensitivities, chain-rules them back through the filter and
hands everything to one MMA update. Face plates are rows of elements frozen
at full density; the volume constraint is enforced at every iterate.

The outer loop is sequential by nature; distinct studies are independent
and may run concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem2d import (
    BCSpec,
    EigenConvergenceError,
    EigenSolution,
    ElementMatrices,
    MaterialModel,
    QuadMesh,
    SingularSystemError,
    StaticFactor,
    _centroid_stress_operator,
    assemble,
    build_mesh,
    element_matrices,
    element_stresses,
    expand_vector,
    factorize,
    load_vector,
    mass_derivative,
    modulus_derivative,
    modulus_interpolation,
    solve_eigen,
)
from .mma import MMAState, mma_update


class StaleStateError(ValueError):
    """Displacements passed to a sensitivity are not in equilibrium."""


class RepeatedEigenvalueWarning(UserWarning):
    """Nearly repeated eigenvalues; individual mode gradients are ill-defined."""


class TopOptError(RuntimeError):
    """FE failure mid-loop; carries the iteration history gathered so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class DensityField:
    """Design vector with frozen-solid (active) and frozen-void (passive) masks."""

    x: np.ndarray
    active_mask: np.ndarray
    passive_mask: np.ndarray
    element_volumes: np.ndarray

    def __post_init__(self):
        n = self.x.size
        for name in ("active_mask", "passive_mask", "element_volumes"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length does not match the density vector")
        if (self.x <= 0).any() or (self.x > 1).any():
            raise ValueError("densities must lie in (0, 1]")
        if not np.all(self.x[self.active_mask] == 1.0):
            raise ValueError("active elements must stay at density 1")

    @property
    def volume(self) -> float:
        return float(self.x @ self.element_volumes)


@dataclass
class FilterSpec:
    """Row-normalized hat-weight density filter with radius in element lengths."""

    radius: float
    weights: sp.csr_matrix


def make_filter(mesh: QuadMesh, radius: float) -> FilterSpec:
    if radius <= 0:
        raise ValueError("filter radius must be positive")
    nx, ny = mesh.nx, mesh.ny
    reach = max(int(np.ceil(radius - 1e-12)) - 1, 0)
    rows, cols, vals = [], [], []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            w = radius - float(np.hypot(dx, dy))
            if w <= 0.0:
                continue
            x0, x1 = max(0, -dx), min(nx, nx - dx)
            y0, y1 = max(0, -dy), min(ny, ny - dy)
            if x0 >= x1 or y0 >= y1:
                continue
            exs, eys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="ij")
            rows.append((exs * ny + eys).ravel())
            cols.append(((exs + dx) * ny + (eys + dy)).ravel())
            vals.append(np.full(exs.size, w))
    n = mesh.n_elements
    W = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    rowsum = np.asarray(W.sum(axis=1)).ravel()
    W = sp.diags(1.0 / rowsum) @ W
    return FilterSpec(radius=radius, weights=W.tocsr())


def apply_filter(values: np.ndarray, spec: FilterSpec, mode: str = "densities") -> np.ndarray:
    """Filter a per-element field; ``sensitivities`` applies the transpose chain rule."""
    values = np.asarray(values, dtype=float)
    if mode == "densities":
        return spec.weights @ values
    if mode == "sensitivities":
        return spec.weights.T @ values
    raise ValueError(f"unknown filter mode {mode!r}")


def simp_modulus(x, material: MaterialModel):
    """Penalized element modulus; strictly increasing on (0, 1]."""
    x = np.asarray(x, dtype=float)
    if (x <= 0).any() or (x > 1).any():
        raise ValueError("density outside (0, 1]")
    return modulus_interpolation(x, material)


def von_mises(sxx, syy, sxy):
    sxx, syy, sxy = (np.asarray(v, dtype=float) for v in (sxx, syy, sxy))
    return np.sqrt(np.maximum(sxx**2 - sxx * syy + syy**2 + 3.0 * sxy**2, 0.0))


@dataclass
class StressAggregate:
    p: float
    q: float
    sigma_vm: np.ndarray
    sigma_hat: np.ndarray  # x^q * sigma_vm
    sigma_pn: float


def pnorm_stress(sigma_vm, densities, p: float = 8.0, q: float = 1.5) -> StressAggregate:
    """Relax element stresses by x^q and aggregate them into the p-norm scalar."""
    if p < 2:
        raise ValueError("norm order p must be at least 2")
    x = np.asarray(getattr(densities, "x", densities), dtype=float)
    sigma_vm = np.asarray(sigma_vm, dtype=float)
    sigma_hat = x**q * sigma_vm
    peak = float(sigma_hat.max(initial=0.0))
    if peak == 0.0:
        pn = 0.0
    else:
        # factored form avoids overflow for large p
        pn = peak * float(np.sum((sigma_hat / peak) ** p)) ** (1.0 / p)
    return StressAggregate(p=p, q=q, sigma_vm=sigma_vm, sigma_hat=sigma_hat, sigma_pn=pn)


# quadratic form of the von Mises stress: svm^2 = sigma^T V sigma
_VM_FORM = np.array([[1.0, -0.5, 0.0], [-0.5, 1.0, 0.0], [0.0, 0.0, 3.0]])


def stress_sensitivity(
    mesh: QuadMesh,
    densities,
    u_full: np.ndarray,
    aggregate: StressAggregate,
    material: MaterialModel,
    factor: StaticFactor,
    load: np.ndarray | None = None,
    matrices: ElementMatrices | None = None,
) -> np.ndarray:
    """Gradient of the p-norm stress w.r.t. element densities.

    Combines the explicit x^q relaxation term with the implicit displacement
    dependence through one adjoint solve on the factorization already used
    for the static solve. Passing the reduced load vector enables an
    equilibrium check that rejects stale displacement states.
    """
    x = np.asarray(getattr(densities, "x", densities), dtype=float)
    if load is not None:
        r = factor.matrix @ u_full[mesh.free_dofs] - load
        nf = np.linalg.norm(load)
        if nf > 0 and np.linalg.norm(r) > 1e-6 * nf:
            raise StaleStateError("displacements are not in equilibrium with the load")
    if aggregate.sigma_pn == 0.0:
        return np.zeros(mesh.n_elements)

    svm, shat = aggregate.sigma_vm, aggregate.sigma_hat
    p, q = aggregate.p, aggregate.q
    coeff = (shat / aggregate.sigma_pn) ** (p - 1.0)  # d sigma_pn / d sigma_hat

    grad = coeff * q * x ** (q - 1.0) * svm

    G = _centroid_stress_operator(mesh, material)
    stresses = element_stresses(mesh, u_full, material)
    inv_svm = np.where(svm > 0.0, 1.0 / np.where(svm > 0.0, svm, 1.0), 0.0)
    wgt = coeff * x**q * inv_svm
    T = stresses @ _VM_FORM @ G  # (nE, 8): rows (V sigma)^T G
    rhs = np.zeros(mesh.n_dofs)
    np.add.at(rhs, mesh.elem_dofs.ravel(), (wgt[:, None] * T).ravel())
    psi = expand_vector(mesh, factor.solve(rhs[mesh.free_dofs], check=False))

    em = matrices or element_matrices(material, mesh.element_size, mesh.thickness)
    ue = u_full[mesh.elem_dofs]
    pe = psi[mesh.elem_dofs]
    grad -= modulus_derivative(x, material) * np.einsum("ei,ij,ej->e", pe, em.K0, ue)
    return grad


def frequency_objective(eig: EigenSolution, weights) -> float:
    """Weighted sum of the lowest eigenvalues, weights normalized to one."""
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("mode weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("mode weights must sum to 1")
    if eig.n_modes < w.size:
        raise ValueError(f"need {w.size} converged modes, solver returned {eig.n_modes}")
    return float(w @ eig.eigenvalues[: w.size])


def frequency_sensitivity(
    mesh: QuadMesh,
    densities,
    eig: EigenSolution,
    material: MaterialModel,
    weights,
    mass_scheme: str = "dual",
    matrices: ElementMatrices | None = None,
) -> np.ndarray:
    """Gradient of the weighted eigenvalue sum w.r.t. element densities.

    Valid for mass-normalized eigenvectors. Warns when tracked eigenvalues
    are within 0.1% of each other (individual mode gradients ill-defined);
    the weighted aggregate is still returned.
    """
    x = np.asarray(getattr(densities, "x", densities), dtype=float)
    w = np.asarray(weights, dtype=float)
    if eig.n_modes < w.size:
        raise ValueError(f"need {w.size} converged modes, solver returned {eig.n_modes}")
    lam = eig.eigenvalues[: w.size]
    if w.size > 1 and np.any(np.abs(np.diff(lam)) < 1e-3 * np.abs(lam[:-1])):
        warnings.warn(
            "nearly repeated eigenvalues in the tracked set", RepeatedEigenvalueWarning
        )
    em = matrices or element_matrices(material, mesh.element_size, mesh.thickness)
    dE = modulus_derivative(x, material)
    dM = mass_derivative(x, material, mass_scheme)
    grad = np.zeros(mesh.n_elements)
    for j in range(w.size):
        if w[j] == 0.0:
            continue
        phi = expand_vector(mesh, eig.eigenvectors[:, j])
        pe = phi[mesh.elem_dofs]
        ke = np.einsum("ei,ij,ej->e", pe, em.K0, pe)
        me = np.einsum("ei,ij,ej->e", pe, em.M0, pe)
        grad += w[j] * (dE * ke - lam[j] * dM * me)
    return grad


@dataclass
class VolumeConstraint:
    vbar: float
    value: float  # volume fraction used minus vbar; feasible iff <= 0


def volume_constraint(densities, element_volumes: np.ndarray, vbar: float) -> VolumeConstraint:
    x = np.asarray(getattr(densities, "x", densities), dtype=float)
    total = float(element_volumes.sum())
    return VolumeConstraint(vbar=vbar, value=float(x @ element_volumes) / total - vbar)


def face_plate_mask(
    mesh: QuadMesh, rows: int, span: tuple[float, float] | None = None
) -> np.ndarray:
    """Elements of the top and bottom ``rows`` element rows, optionally x-limited."""
    e = np.arange(mesh.n_elements)
    ey = e % mesh.ny
    mask = (ey < rows) | (ey >= mesh.ny - rows)
    if span is not None:
        cx = mesh.element_centroids[:, 0]
        mask &= (cx >= span[0]) & (cx <= span[1])
    return mask


@dataclass
class TopOptConfig:
    length: float = 1.0
    height: float = 0.045
    element_size: float = 0.005
    objective: str = "stress"  # or "frequency"
    volume_fraction: float = 0.3
    pressure: float = 50e3
    material: MaterialModel = field(default_factory=MaterialModel)
    filter_radius: float = 3.0
    p: float = 8.0
    q: float = 1.5
    n_modes: int = 3
    mode_weights: tuple = (0.7, 0.2, 0.1)
    face_rows: int = 1
    xmin: float = 1e-3
    mass_scheme: str = "dual"
    max_iterations: int | None = None
    tolerance: float = 0.01
    move_limit: float = 0.2
    with_joints: bool = False
    joint_length: float = 0.12

    def __post_init__(self):
        if self.objective not in ("stress", "frequency"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not (0.0 < self.volume_fraction <= 1.0):
            raise ValueError("volume fraction must lie in (0, 1]")
        if not (0.0 < self.xmin < 1.0):
            raise ValueError("xmin must lie in (0, 1)")

    def resolved_max_iterations(self) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return 300 if self.objective == "frequency" else 2000


@dataclass
class HistoryRecord:
    iteration: int
    objective: float  # physical units: Pa for stress, rad^2/s^2 for frequency
    constraint: float
    change: float


@dataclass
class TopOptResult:
    config: TopOptConfig
    mesh: QuadMesh
    design: DensityField  # final physical densities
    x_design: np.ndarray  # raw (pre-filter) design variables, free elements only
    history: list
    converged: bool
    iterations: int
    objective_value: float
    volume_fraction: float


def build_domain(config: TopOptConfig) -> tuple[QuadMesh, np.ndarray]:
    """Mesh and active-element mask for a study, joints included when asked.

    The joints case extends the domain by one joint length per side, keeps
    the clamps on the (new) outer edges, loads only the beam span and frees
    the joint regions from the frozen face plates.
    """
    if config.with_joints:
        total = config.length + 2.0 * config.joint_length
        span = (config.joint_length, config.joint_length + config.length)
    else:
        total = config.length
        span = None
    bc = BCSpec(pressure=config.pressure, pressure_span=span)
    mesh = build_mesh(total, config.height, config.element_size, bc)
    active = face_plate_mask(mesh, config.face_rows, span)
    return mesh, active


def design_filter(spec: FilterSpec, free: np.ndarray) -> sp.csr_matrix:
    """Filter restricted to the design (non-frozen) elements, rows renormalized.

    Frozen face plates are boundary material, not design; keeping them out of
    the averaging avoids a permanent gray halo that would both consume volume
    budget and bias the sensitivities near the plates.
    """
    W = spec.weights[free][:, free].tocsr()
    rowsum = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(1.0 / rowsum) @ W).tocsr()


def _physical_densities(x_design, free, active, passive, W_ff, xmin, n):
    xp = np.empty(n)
    xp[active] = 1.0
    xp[passive] = xmin
    xp[free] = W_ff @ x_design
    return np.clip(xp, xmin, 1.0)


def _calibrated_start(free, active, passive, volumes, xmin, target):
    # a uniform design field filters to itself, so the start value is exact
    v_active = float(volumes[active].sum())
    v_passive = float(volumes[passive].sum())
    v_free = float(volumes[free].sum())
    c = (target - v_active - xmin * v_passive) / v_free
    if c < xmin - 1e-9:
        raise ValueError(
            "volume fraction smaller than the volume of frozen (face) elements"
        )
    return float(min(max(c, xmin), 1.0))


def evaluate_stress(
    config: TopOptConfig, x_phys: np.ndarray, mesh: QuadMesh | None = None
) -> StressAggregate:
    """Stress aggregate of a given physical density field under the study load."""
    if mesh is None:
        mesh, _ = build_domain(config)
    em = element_matrices(config.material, mesh.element_size, mesh.thickness)
    K = assemble(mesh, x_phys, config.material, "stiffness", matrices=em)
    u = expand_vector(mesh, factorize(K).solve(load_vector(mesh)))
    s = element_stresses(mesh, u, config.material)
    svm = von_mises(s[:, 0], s[:, 1], s[:, 2])
    return pnorm_stress(svm, x_phys, p=config.p, q=config.q)


def evaluate_frequency(
    config: TopOptConfig, x_phys: np.ndarray, mesh: QuadMesh | None = None
) -> tuple[EigenSolution, float]:
    """Eigen solution and weighted eigenvalue aggregate of a density field."""
    if mesh is None:
        mesh, _ = build_domain(config)
    em = element_matrices(config.material, mesh.element_size, mesh.thickness)
    K = assemble(mesh, x_phys, config.material, "stiffness", matrices=em)
    M = assemble(mesh, x_phys, config.material, "mass", config.mass_scheme, matrices=em)
    eig = solve_eigen(K, M, config.n_modes)
    return eig, frequency_objective(eig, config.mode_weights)


def modal_energy_fraction(
    mesh: QuadMesh,
    material: MaterialModel,
    x_phys: np.ndarray,
    phi_reduced: np.ndarray,
    threshold: float = 0.5,
) -> float:
    """Share of a mode's strain energy carried by elements with x <= threshold."""
    em = element_matrices(material, mesh.element_size, mesh.thickness)
    phi = expand_vector(mesh, phi_reduced)
    pe = phi[mesh.elem_dofs]
    energy = modulus_interpolation(x_phys, material) * np.einsum(
        "ei,ij,ej->e", pe, em.K0, pe
    )
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    return float(energy[x_phys <= threshold].sum()) / total


def run_topopt(config: TopOptConfig) -> TopOptResult:
    """Run the full optimization loop for one study.

    Stops when the largest design-variable change drops below the tolerance
    or the iteration cap is reached. Deterministic: identical configs yield
    identical iterate sequences. FE failures abort with the history so far
    attached to the raised :class:`TopOptError`.
    """
    mesh, active = build_domain(config)
    passive = np.zeros(mesh.n_elements, dtype=bool)
    free = ~(active | passive)
    if not free.any():
        raise ValueError("no design elements left after masking")
    material = config.material
    em = element_matrices(material, mesh.element_size, mesh.thickness)
    W_ff = design_filter(make_filter(mesh, config.filter_radius), np.flatnonzero(free))
    volumes = mesh.element_volumes
    total_volume = float(volumes.sum())
    target = config.volume_fraction * total_volume
    n = mesh.n_elements

    start = _calibrated_start(free, active, passive, volumes, config.xmin, target)
    x_design = np.full(int(free.sum()), start)
    lb = np.full(x_design.size, config.xmin)
    ub = np.ones(x_design.size)
    state = MMAState(move_limit=config.move_limit)
    sign = 1.0 if config.objective == "stress" else -1.0
    weights = np.asarray(config.mode_weights, dtype=float)
    F = load_vector(mesh) if config.objective == "stress" else None

    history: list[HistoryRecord] = []
    f_scale = None
    converged = False
    iterations = 0
    try:
        for it in range(1, config.resolved_max_iterations() + 1):
            iterations = it
            x_phys = _physical_densities(
                x_design, free, active, passive, W_ff, config.xmin, n
            )
            if config.objective == "stress":
                K = assemble(mesh, x_phys, material, "stiffness", matrices=em)
                factor = factorize(K)
                u = expand_vector(mesh, factor.solve(F))
                s = element_stresses(mesh, u, material)
                svm = von_mises(s[:, 0], s[:, 1], s[:, 2])
                agg = pnorm_stress(svm, x_phys, p=config.p, q=config.q)
                obj = agg.sigma_pn
                dobj = stress_sensitivity(
                    mesh, x_phys, u, agg, material, factor, load=F, matrices=em
                )
            else:
                K = assemble(mesh, x_phys, material, "stiffness", matrices=em)
                M = assemble(mesh, x_phys, material, "mass", config.mass_scheme, matrices=em)
                eig = solve_eigen(K, M, config.n_modes)
                obj = frequency_objective(eig, weights)
                dobj = frequency_sensitivity(
                    mesh, x_phys, eig, material, weights, config.mass_scheme, matrices=em
                )
            if f_scale is None:
                f_scale = abs(obj) if obj != 0.0 else 1.0

            df = sign * (W_ff.T @ dobj[free]) / f_scale

            g = float(x_phys @ volumes) / total_volume - config.volume_fraction
            dg = W_ff.T @ (volumes[free] / total_volume)

            x_new, state = mma_update(
                x_design,
                sign * obj / f_scale,
                df,
                np.array([g]),
                dg[None, :],
                lb,
                ub,
                state,
            )
            change = float(np.max(np.abs(x_new - x_design)))
            x_design = x_new
            history.append(HistoryRecord(it, float(obj), g, change))
            if change < config.tolerance:
                converged = True
                break

        x_phys = _physical_densities(
            x_design, free, active, passive, W_ff, config.xmin, n
        )
        if config.objective == "stress":
            final_obj = evaluate_stress(config, x_phys, mesh).sigma_pn
        else:
            _, final_obj = evaluate_frequency(config, x_phys, mesh)
    except (SingularSystemError, EigenConvergenceError) as exc:
        raise TopOptError(str(exc), history=history) from exc

    design = DensityField(
        x=x_phys,
        active_mask=active,
        passive_mask=passive,
        element_volumes=volumes,
    )
    return TopOptResult(
        config=config,
        mesh=mesh,
        design=design,
        x_design=x_design,
        history=history,
        converged=converged,
        iterations=iterations,
        objective_value=float(final_obj),
        volume_fraction=float(x_phys @ volumes) / total_volume,
    )

"""Structured 2D plane-stress finite elements on regular quad grids.

The mesh is an nx-by-ny grid of square bilinear elements with y measured
upward from the bottom edge. Node n = ix*(ny+1) + iy carries dofs
(2n, 2n+1) = (ux, uy); element e = ex*ny + ey references its corner nodes
counter-clockwise from the bottom-left corner. Clamped dofs are removed
from all assembled systems by row/column elimination, which keeps the
reduced operators symmetric positive definite for the sparse solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Density below which element mass switches to the hard-penalized branch.
MASS_THRESHOLD = 0.1

_GAUSS = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])

# Fixed Lanczos start vector seed; eigensolves must be run-to-run reproducible.
_EIGEN_SEED = 0x5EED


class MeshError(ValueError):
    """Invalid mesh geometry or boundary conditions."""


class SingularSystemError(RuntimeError):
    """Factorization or solve failed; the reduced system is not SPD."""


class EigenConvergenceError(RuntimeError):
    """Eigensolver failed to converge within its restart budget."""


@dataclass
class MaterialModel:
    """Isotropic material plus the density-interpolation exponents.

    ``E0`` and ``nu`` default to structural steel; only the density is a
    given of the problem setup, the elastic constants are configurable
    assumptions. ``Emin`` defaults to 1e-9 * E0 so conditioning does not
    depend on the modulus scale.
    """

    E0: float = 210e9
    nu: float = 0.3
    rho: float = 7850.0
    Emin: float = None  # type: ignore[assignment]
    pl: float = 3.0  # stiffness penalization power
    ql: float = 6.0  # mass penalization power below MASS_THRESHOLD

    def __post_init__(self):
        if self.Emin is None:
            self.Emin = 1e-9 * self.E0
        if not (0.0 < self.Emin < 0.01 * self.E0):
            raise ValueError("Emin must be positive and much smaller than E0")
        if self.pl <= 1.0 or self.ql <= 1.0:
            raise ValueError("penalization powers pl and ql must exceed 1")
        if not (0.0 <= self.nu < 0.5):
            raise ValueError("Poisson ratio must lie in [0, 0.5)")
        if self.rho <= 0.0:
            raise ValueError("density must be positive")


@dataclass
class BCSpec:
    """Boundary description for :func:`build_mesh`.

    ``clamp_band`` restricts each clamped edge to a y-interval (in metres);
    ``pressure_span`` restricts the top-edge pressure to an x-interval.
    ``None`` means the full edge.
    """

    clamp_left: bool = True
    clamp_right: bool = True
    clamp_band: tuple[float, float] | None = None
    pressure: float = 0.0
    pressure_span: tuple[float, float] | None = None


@dataclass(eq=False)
class QuadMesh:
    nx: int
    ny: int
    element_size: float
    thickness: float
    node_coords: np.ndarray  # (n_nodes, 2)
    clamped_node_sets: list  # list of int arrays, one per clamped edge
    pressure_edges: np.ndarray  # (k, 2) node pairs on the top boundary
    pressure: float  # Pa, positive pushes down

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @cached_property
    def elem_nodes(self) -> np.ndarray:
        ex, ey = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        ex, ey = ex.ravel(), ey.ravel()
        n1 = ex * (self.ny + 1) + ey
        n2 = (ex + 1) * (self.ny + 1) + ey
        return np.column_stack([n1, n2, n2 + 1, n1 + 1])

    @cached_property
    def elem_dofs(self) -> np.ndarray:
        n = self.elem_nodes
        dofs = np.empty((self.n_elements, 8), dtype=np.int64)
        dofs[:, 0::2] = 2 * n
        dofs[:, 1::2] = 2 * n + 1
        return dofs

    @cached_property
    def element_centroids(self) -> np.ndarray:
        e = np.arange(self.n_elements)
        ex, ey = e // self.ny, e % self.ny
        a = self.element_size
        return np.column_stack([(ex + 0.5) * a, (ey + 0.5) * a])

    @cached_property
    def element_volumes(self) -> np.ndarray:
        return np.full(self.n_elements, self.element_size**2 * self.thickness)

    @cached_property
    def clamped_dofs(self) -> np.ndarray:
        nodes = np.unique(np.concatenate([np.asarray(s) for s in self.clamped_node_sets]))
        return np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_dofs), self.clamped_dofs)

    @cached_property
    def _free_map(self) -> np.ndarray:
        m = np.full(self.n_dofs, -1, dtype=np.int64)
        m[self.free_dofs] = np.arange(self.free_dofs.size)
        return m

    @cached_property
    def _assembly_index(self):
        # COO pattern of the reduced system; entries touching clamped dofs dropped.
        edofs = self.elem_dofs
        iK = np.repeat(edofs, 8, axis=1).ravel()
        jK = np.tile(edofs, (1, 8)).ravel()
        fi, fj = self._free_map[iK], self._free_map[jK]
        keep = (fi >= 0) & (fj >= 0)
        return fi[keep], fj[keep], keep


@dataclass
class ElementMatrices:
    """Reference element operators for one square bilinear element.

    ``K0`` is the stiffness for unit elastic modulus; ``M0`` the consistent
    mass for the solid material. Both are scaled per element during assembly.
    """

    K0: np.ndarray
    M0: np.ndarray


@dataclass
class EigenSolution:
    eigenvalues: np.ndarray  # ascending, rad^2/s^2
    eigenvectors: np.ndarray  # (n_free, k), mass-normalized
    frequencies: np.ndarray  # Hz

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size


def plane_stress_D(E: float, nu: float) -> np.ndarray:
    return E / (1.0 - nu**2) * np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]]
    )


def _shape_values(xi, eta):
    return 0.25 * (1.0 + _XI * xi) * (1.0 + _ETA * eta)


def _shape_gradients(xi, eta, element_size):
    # Derivatives w.r.t. physical coordinates; square element, J = a/2 * I.
    scale = 2.0 / element_size
    dN_dx = 0.25 * _XI * (1.0 + _ETA * eta) * scale
    dN_dy = 0.25 * _ETA * (1.0 + _XI * xi) * scale
    return dN_dx, dN_dy


def _b_matrix(xi, eta, element_size):
    dN_dx, dN_dy = _shape_gradients(xi, eta, element_size)
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


def _exact_div(total: float, step: float, what: str) -> int:
    n = total / step
    r = round(n)
    if r < 1 or abs(n - r) > 1e-6 * max(1.0, r):
        raise MeshError(
            f"{what} = {total} is not an integer multiple of the element size {step}"
        )
    return int(r)


def build_mesh(
    length: float,
    height: float,
    element_size: float,
    bc: BCSpec | None = None,
    thickness: float = 1.0,
) -> QuadMesh:
    """Build a structured quad mesh of ``length`` x ``height`` square elements.

    Clamped node sets are taken from the left/right edges per ``bc`` and
    pressure edges from the top boundary. Rejects non-divisible dimensions
    and configurations with no clamped nodes (singular system).
    """
    if length <= 0 or height <= 0 or element_size <= 0 or thickness <= 0:
        raise MeshError("length, height, element size and thickness must be positive")
    bc = bc or BCSpec()
    nx = _exact_div(length, element_size, "length")
    ny = _exact_div(height, element_size, "height")

    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    coords = np.column_stack([ix.ravel() * element_size, iy.ravel() * element_size])

    tol = 1e-9 * max(length, height)
    iy_edge = np.arange(ny + 1)
    if bc.clamp_band is not None:
        y0, y1 = bc.clamp_band
        y = iy_edge * element_size
        iy_edge = iy_edge[(y >= y0 - tol) & (y <= y1 + tol)]
    clamped_sets = []
    if bc.clamp_left:
        clamped_sets.append(iy_edge.copy())
    if bc.clamp_right:
        clamped_sets.append(nx * (ny + 1) + iy_edge)
    if not clamped_sets or sum(s.size for s in clamped_sets) == 0:
        raise MeshError("no clamped nodes specified; system would be singular")

    top = lambda i: i * (ny + 1) + ny  # noqa: E731
    segs = []
    for ex in range(nx):
        xm = (ex + 0.5) * element_size
        if bc.pressure_span is not None:
            x0, x1 = bc.pressure_span
            if not (x0 - tol <= xm <= x1 + tol):
                continue
        segs.append((top(ex), top(ex + 1)))
    pressure_edges = np.array(segs, dtype=np.int64).reshape(-1, 2)

    return QuadMesh(
        nx=nx,
        ny=ny,
        element_size=element_size,
        thickness=thickness,
        node_coords=coords,
        clamped_node_sets=clamped_sets,
        pressure_edges=pressure_edges,
        pressure=bc.pressure,
    )


def element_matrices(
    material: MaterialModel, element_size: float, thickness: float = 1.0
) -> ElementMatrices:
    """Unit-modulus stiffness and solid consistent mass, 2x2 Gauss quadrature."""
    if element_size <= 0 or thickness <= 0:
        raise ValueError("element size and thickness must be positive")
    D = plane_stress_D(1.0, material.nu)
    detJ = (element_size / 2.0) ** 2
    K0 = np.zeros((8, 8))
    M0 = np.zeros((8, 8))
    for xi in _GAUSS:
        for eta in _GAUSS:
            B = _b_matrix(xi, eta, element_size)
            K0 += thickness * (B.T @ D @ B) * detJ
            N = _shape_values(xi, eta)
            Nm = np.zeros((2, 8))
            Nm[0, 0::2] = N
            Nm[1, 1::2] = N
            M0 += material.rho * thickness * (Nm.T @ Nm) * detJ
    return ElementMatrices(K0=K0, M0=M0)


def modulus_interpolation(x, material: MaterialModel):
    """Element modulus Emin + x^pl (E0 - Emin)."""
    x = np.asarray(x, dtype=float)
    return material.Emin + x**material.pl * (material.E0 - material.Emin)


def modulus_derivative(x, material: MaterialModel):
    x = np.asarray(x, dtype=float)
    return material.pl * x ** (material.pl - 1.0) * (material.E0 - material.Emin)


def mass_interpolation(x, material: MaterialModel, scheme: str = "dual"):
    """Element mass factor.

    ``dual``: linear above MASS_THRESHOLD, x^ql at and below it. The scheme
    is intentionally discontinuous at the threshold for ql > 1 (branch
    values 0.1 vs 0.1^ql); the jump suppresses spurious low-frequency modes
    in near-void regions. ``simp``: x^pl, for comparison studies.
    """
    x = np.asarray(x, dtype=float)
    if scheme == "dual":
        return np.where(x > MASS_THRESHOLD, x, x**material.ql)
    if scheme == "simp":
        return x**material.pl
    raise ValueError(f"unknown mass scheme {scheme!r}")


def mass_derivative(x, material: MaterialModel, scheme: str = "dual"):
    x = np.asarray(x, dtype=float)
    if scheme == "dual":
        return np.where(
            x > MASS_THRESHOLD, 1.0, material.ql * x ** (material.ql - 1.0)
        )
    if scheme == "simp":
        return material.pl * x ** (material.pl - 1.0)
    raise ValueError(f"unknown mass scheme {scheme!r}")


def _density_vector(densities, n_elements: int) -> np.ndarray:
    x = np.asarray(getattr(densities, "x", densities), dtype=float)
    if x.shape != (n_elements,):
        raise ValueError(
            f"density vector has length {x.size}, mesh has {n_elements} elements"
        )
    if np.isnan(x).any():
        raise ValueError("density vector contains NaN")
    if (x <= 0).any() or (x > 1).any():
        raise ValueError("densities must lie in (0, 1]")
    return x


def assemble(
    mesh: QuadMesh,
    densities,
    material: MaterialModel,
    mode: str = "stiffness",
    mass_scheme: str = "dual",
    matrices: ElementMatrices | None = None,
) -> sp.csc_matrix:
    """Assemble the reduced (clamped-dofs-eliminated) global matrix."""
    x = _density_vector(densities, mesh.n_elements)
    em = matrices or element_matrices(material, mesh.element_size, mesh.thickness)
    if mode == "stiffness":
        scale, base = modulus_interpolation(x, material), em.K0
    elif mode == "mass":
        scale, base = mass_interpolation(x, material, mass_scheme), em.M0
    else:
        raise ValueError(f"unknown assembly mode {mode!r}")
    data = (scale[:, None, None] * base).ravel()
    fi, fj, keep = mesh._assembly_index
    n = mesh.free_dofs.size
    K = sp.coo_matrix((data[keep], (fi, fj)), shape=(n, n)).tocsc()
    return K


def load_vector(mesh: QuadMesh, reduced: bool = True) -> np.ndarray:
    """Consistent nodal loads from the top-edge pressure (half-weight per node)."""
    F = np.zeros(mesh.n_dofs)
    if mesh.pressure_edges.size:
        f_half = mesh.pressure * mesh.element_size * mesh.thickness / 2.0
        np.add.at(F, 2 * mesh.pressure_edges[:, 0] + 1, -f_half)
        np.add.at(F, 2 * mesh.pressure_edges[:, 1] + 1, -f_half)
    return F[mesh.free_dofs] if reduced else F


def expand_vector(mesh: QuadMesh, reduced: np.ndarray) -> np.ndarray:
    """Scatter a reduced dof vector (or mode matrix) back to full size with zeros."""
    reduced = np.asarray(reduced)
    shape = (mesh.n_dofs,) + reduced.shape[1:]
    full = np.zeros(shape)
    full[mesh.free_dofs] = reduced
    return full


def _singular_diagnostics(K: sp.csc_matrix) -> str:
    d = np.abs(K.diagonal())
    ref = d.max() if d.size else 0.0
    bad = np.flatnonzero(d <= 1e-14 * max(ref, 1.0))[:10]
    extra = f"; near-zero diagonal at dofs {bad.tolist()}" if bad.size else ""
    return f"singular or indefinite system of size {K.shape[0]}{extra}"


class StaticFactor:
    """Sparse LU of a reduced stiffness matrix, reusable across adjoint solves.

    The matrix is symmetrically Jacobi-equilibrated before factorization;
    force and moment dofs (frames) and high-contrast density fields would
    otherwise leave the system too ill-scaled for the residual target.
    """

    def __init__(self, K):
        K = sp.csc_matrix(K)
        self._K = K
        d = K.diagonal()
        if (d <= 0).any():
            raise SingularSystemError(_singular_diagnostics(K))
        self._scale = 1.0 / np.sqrt(d)
        Ks = sp.diags(self._scale) @ K @ sp.diags(self._scale)
        try:
            self._lu = spla.splu(Ks.tocsc())
        except RuntimeError as exc:
            raise SingularSystemError(_singular_diagnostics(K)) from exc

    @property
    def matrix(self) -> sp.csc_matrix:
        return self._K

    def _solve_raw(self, F: np.ndarray) -> np.ndarray:
        return self._scale * self._lu.solve(self._scale * F)

    def solve(self, F: np.ndarray, check: bool = True, rtol: float = 1e-9) -> np.ndarray:
        """Solve K u = F with iterative refinement to ``rtol`` relative residual.

        The 1e-9 default is the plane-stress contract; systems that mix force
        and moment dofs sit closer to the double-precision floor and pass a
        looser tolerance.
        """
        u = self._solve_raw(F)
        if not np.isfinite(u).all():
            raise SingularSystemError(_singular_diagnostics(self._K))
        if check:
            norm_f = np.linalg.norm(F)
            if norm_f == 0.0:
                return np.zeros_like(F)
            for _ in range(4):  # iterative refinement until the target holds
                res = np.linalg.norm(self._K @ u - F)
                if res <= rtol * norm_f:
                    return u
                u = u + self._solve_raw(F - self._K @ u)
            res = np.linalg.norm(self._K @ u - F)
            if res > rtol * norm_f:
                raise SingularSystemError(
                    f"static residual {res / norm_f:.3e} exceeds {rtol:g}"
                )
        return u


def factorize(K) -> StaticFactor:
    return StaticFactor(K)


def solve_static(K, F: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a relative residual check of 1e-9."""
    return StaticFactor(K).solve(F)


def _residual_check(K, M, lam, vec):
    for j in range(lam.size):
        r = K @ vec[:, j] - lam[j] * (M @ vec[:, j])
        den = np.linalg.norm(K @ vec[:, j])
        if den > 0 and np.linalg.norm(r) > 1e-6 * den:
            raise EigenConvergenceError(
                f"eigenpair {j} residual {np.linalg.norm(r) / den:.3e} exceeds 1e-6"
            )


def solve_eigen(K, M, n_modes: int, dense_threshold: int = 400) -> EigenSolution:
    """Lowest ``n_modes`` eigenpairs of K phi = lambda M phi, mass-normalized.

    Uses shift-invert restarted Lanczos for large systems and a dense solve
    for small ones. A non-converged iteration is retried once with a larger
    subspace before raising.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be at least 1")
    sparse_in = sp.issparse(K)
    n = K.shape[0]
    k = min(n_modes, n)
    if not sparse_in or n <= dense_threshold or k >= n - 1:
        # factor the stiffness side: the penalized mass matrix can be nearly
        # singular (void elements), K stays SPD
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        L = scipy.linalg.cholesky(Kd, lower=True)
        C = scipy.linalg.solve_triangular(
            L, scipy.linalg.solve_triangular(L, Md, lower=True).T, lower=True
        )
        mu, Y = scipy.linalg.eigh(0.5 * (C + C.T))
        mu, Y = mu[::-1][:k], Y[:, ::-1][:, :k]  # largest mu = smallest lambda
        lam = 1.0 / mu
        vec = scipy.linalg.solve_triangular(L, Y, lower=True, trans="T")
    else:
        v0 = np.random.default_rng(_EIGEN_SEED).standard_normal(n)
        try:
            lam, vec = spla.eigsh(K, k=k, M=M, sigma=0.0, which="LM", v0=v0)
        except spla.ArpackNoConvergence:
            ncv = min(n - 1, max(6 * k + 1, 40))
            try:
                lam, vec = spla.eigsh(
                    K, k=k, M=M, sigma=0.0, which="LM", v0=v0, ncv=ncv, maxiter=5000
                )
            except spla.ArpackNoConvergence as exc:
                got = 0 if exc.eigenvalues is None else len(exc.eigenvalues)
                raise EigenConvergenceError(
                    f"eigensolver converged {got}/{k} modes after enlarged restart"
                ) from exc
    order = np.argsort(lam)
    lam, vec = lam[order], vec[:, order]
    # enforce phi^T M phi = 1 and a deterministic sign
    for j in range(lam.size):
        mnorm = float(vec[:, j] @ (M @ vec[:, j]))
        vec[:, j] /= np.sqrt(mnorm)
        pivot = np.argmax(np.abs(vec[:, j]))
        if vec[pivot, j] < 0:
            vec[:, j] *= -1.0
    _residual_check(K, M, lam, vec)
    freqs = np.sqrt(np.maximum(lam, 0.0)) / (2.0 * np.pi)
    return EigenSolution(eigenvalues=lam, eigenvectors=vec, frequencies=freqs)


def _centroid_stress_operator(mesh: QuadMesh, material: MaterialModel) -> np.ndarray:
    # Stress of the solid constitutive law; density effects are applied downstream.
    D = plane_stress_D(material.E0, material.nu)
    B0 = _b_matrix(0.0, 0.0, mesh.element_size)
    return D @ B0  # (3, 8)


def element_stresses(mesh: QuadMesh, u_full: np.ndarray, material: MaterialModel) -> np.ndarray:
    """Centroid stresses (sxx, syy, sxy) of all elements, shape (n_elements, 3)."""
    u_full = np.asarray(u_full, dtype=float)
    if u_full.shape != (mesh.n_dofs,):
        raise ValueError("displacement vector must be full-length (all dofs)")
    G = _centroid_stress_operator(mesh, material)
    return u_full[mesh.elem_dofs] @ G.T


def element_stress(mesh: QuadMesh, u_full: np.ndarray, material: MaterialModel, element_id: int):
    """Centroid stress (sxx, syy, sxy) of one element."""
    if not 0 <= element_id < mesh.n_elements:
        raise IndexError(f"element id {element_id} outside 0..{mesh.n_elements - 1}")
    u_full = np.asarray(u_full, dtype=float)
    G = _centroid_stress_operator(mesh, material)
    s = G @ u_full[mesh.elem_dofs[element_id]]
    return float(s[0]), float(s[1]), float(s[2])

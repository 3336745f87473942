"""Parametric sandwich-beam geometry and its evaluation on a 2D frame model.

Four prismatic core types connect the two face plates: vertical webs,
corrugation (alternating diagonals with half-period s), X cells (crossing
diagonals joined at the cell centre) and Y cells (two diagonals meeting a
vertical stem of height h_l that carries them to the bottom face). Face
centerlines sit at y = 0 and y = core height; members are Euler-Bernoulli
beams with axial stiffness and consistent mass, per metre of depth.

Bookkeeping convention: the plate spacing is snapped so an integer number of
core cells fits the span (s_eff = L / round(L / s)) and members shared with
the neighbouring panel at the span ends (end webs, end stems) carry half
thickness. The closed-form area density uses the same convention, so it
matches the summed member mass per unit span exactly.

Dimensional variables are given in millimetres, as usual for plate catalogues;
geometry and results are SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem2d import MaterialModel, SingularSystemError, StaticFactor, solve_eigen

CORE_TYPES = ("web", "corrugated", "X", "Y")

# Sizing variable bounds in mm; h_h/h_l exist only for the Y core and are
# additionally coupled by h_h + h_l <= Y_HEIGHT_CAP. t_j only with joints.
VARIABLE_BOUNDS = {
    "t_f": (1.0, 4.0),
    "t_w": (2.5, 5.0),
    "h_c": (10.0, 37.0),
    "h_h": (1.0, 36.0),
    "h_l": (1.0, 36.0),
    "s": (30.0, 150.0),
    "t_j": (1.0, 3.0),
}
Y_HEIGHT_CAP = 37.0  # mm

JOINT_SPAN = 0.120  # m, x-extent of one end joint


@dataclass
class SandwichDesign:
    """One parametric design; lengths in mm. Unused fields stay None."""

    core_type: str
    t_f: float
    t_w: float
    s: float
    h_c: float | None = None
    h_h: float | None = None
    h_l: float | None = None
    t_j: float | None = None
    with_joints: bool = False

    def core_height_mm(self) -> float:
        if self.core_type == "Y":
            return float(self.h_h) + float(self.h_l)
        return float(self.h_c)

    def violations(self) -> list[str]:
        bad = []

        def check(name, value):
            if value is None:
                bad.append(f"{name} missing")
                return
            lo, hi = VARIABLE_BOUNDS[name]
            if not (lo <= value <= hi):
                bad.append(f"{name}={value} outside [{lo}, {hi}]")

        if self.core_type not in CORE_TYPES:
            return [f"unknown core type {self.core_type!r}"]
        check("t_f", self.t_f)
        check("t_w", self.t_w)
        check("s", self.s)
        if self.core_type == "Y":
            check("h_h", self.h_h)
            check("h_l", self.h_l)
            if self.h_h is not None and self.h_l is not None:
                if self.h_h + self.h_l > Y_HEIGHT_CAP + 1e-9:
                    bad.append(f"h_h + h_l = {self.h_h + self.h_l} exceeds {Y_HEIGHT_CAP}")
        else:
            check("h_c", self.h_c)
        if self.with_joints:
            check("t_j", self.t_j)
        return bad

    def validate(self):
        bad = self.violations()
        if bad:
            raise ValueError("invalid design: " + "; ".join(bad))


def variables_for(core_type: str, with_joints: bool = False) -> list[str]:
    names = ["t_f", "t_w", "h_h", "h_l", "s"] if core_type == "Y" else ["t_f", "t_w", "h_c", "s"]
    if with_joints:
        names.append("t_j")
    return names


def bounds_for(core_type: str, with_joints: bool = False) -> tuple[np.ndarray, np.ndarray]:
    names = variables_for(core_type, with_joints)
    lo = np.array([VARIABLE_BOUNDS[n][0] for n in names])
    hi = np.array([VARIABLE_BOUNDS[n][1] for n in names])
    return lo, hi


def design_from_genes(core_type: str, genes, with_joints: bool = False) -> SandwichDesign:
    names = variables_for(core_type, with_joints)
    values = dict(zip(names, (float(g) for g in genes)))
    return SandwichDesign(core_type=core_type, with_joints=with_joints, **values)


def repair_genes(core_type: str, genes: np.ndarray, with_joints: bool = False) -> np.ndarray:
    """Clip to bounds; for the Y core scale (h_h, h_l) back onto the height cap."""
    lo, hi = bounds_for(core_type, with_joints)
    g = np.clip(np.asarray(genes, dtype=float), lo, hi)
    if core_type == "Y":
        names = variables_for(core_type, with_joints)
        ih, il = names.index("h_h"), names.index("h_l")
        total = g[ih] + g[il]
        if total > Y_HEIGHT_CAP:
            f = Y_HEIGHT_CAP / total
            g[ih] = max(g[ih] * f, VARIABLE_BOUNDS["h_h"][0])
            g[il] = min(g[il] * f, Y_HEIGHT_CAP - g[ih])
            g[il] = max(g[il], VARIABLE_BOUNDS["h_l"][0])
            g[ih] = min(g[ih], Y_HEIGHT_CAP - g[il])
    return g


@dataclass
class Member:
    n1: int
    n2: int
    thickness: float  # m
    kind: str  # face_top | face_bottom | core | joint


@dataclass
class FrameModel:
    nodes: np.ndarray  # (N, 2) in metres
    members: list
    clamp_x: tuple  # x planes whose nodes are fully fixed
    mesh_size: float  # suggested element length for discretization

    @property
    def clamped_nodes(self) -> np.ndarray:
        keep = np.zeros(len(self.nodes), dtype=bool)
        for xc in self.clamp_x:
            keep |= np.abs(self.nodes[:, 0] - xc) < 1e-9
        return np.flatnonzero(keep)

    def to_table(self) -> str:
        """Plain node/member table for inspection."""
        lines = [f"# nodes {len(self.nodes)}", "# id x y"]
        for i, (x, y) in enumerate(self.nodes):
            lines.append(f"{i} {x:.6f} {y:.6f}")
        lines.append(f"# members {len(self.members)}")
        lines.append("# n1 n2 thickness kind")
        for m in self.members:
            lines.append(f"{m.n1} {m.n2} {m.thickness:.6f} {m.kind}")
        return "\n".join(lines) + "\n"


class _NodeBook:
    def __init__(self):
        self.coords: list[tuple[float, float]] = []
        self._index: dict[tuple[int, int], int] = {}

    def add(self, x: float, y: float) -> int:
        key = (round(x * 1e9), round(y * 1e9))
        if key not in self._index:
            self._index[key] = len(self.coords)
            self.coords.append((x, y))
        return self._index[key]

    def array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float).reshape(-1, 2)


def cell_count(length: float, spacing: float) -> int:
    return max(1, int(round(length / spacing)))


def generate_geometry(design: SandwichDesign, length: float = 1.0) -> FrameModel:
    """Node/member layout of one design over a span of ``length`` metres."""
    design.validate()
    if length <= 0:
        raise ValueError("length must be positive")
    tf = design.t_f * 1e-3
    tw = design.t_w * 1e-3
    h = design.core_height_mm() * 1e-3
    n = cell_count(length, design.s * 1e-3)
    s_eff = length / n
    x0 = JOINT_SPAN if design.with_joints else 0.0
    x_end = x0 + length

    book = _NodeBook()
    members: list[Member] = []
    bottom_attach = {x0, x_end}
    top_attach = {x0, x_end}

    def add_member(xa, ya, xb, yb, thickness, kind):
        members.append(Member(book.add(xa, ya), book.add(xb, yb), thickness, kind))

    if design.core_type == "web":
        for k in range(n + 1):
            x = x0 + k * s_eff
            t = tw / 2.0 if k in (0, n) else tw
            add_member(x, 0.0, x, h, t, "core")
            bottom_attach.add(x)
            top_attach.add(x)
    elif design.core_type == "corrugated":
        for k in range(n):
            xa, xb = x0 + k * s_eff, x0 + (k + 1) * s_eff
            ya, yb = (0.0, h) if k % 2 == 0 else (h, 0.0)
            add_member(xa, ya, xb, yb, tw, "core")
            (bottom_attach if ya == 0.0 else top_attach).add(xa)
            (bottom_attach if yb == 0.0 else top_attach).add(xb)
    elif design.core_type == "X":
        for k in range(n):
            xa, xb = x0 + k * s_eff, x0 + (k + 1) * s_eff
            xc, yc = 0.5 * (xa + xb), 0.5 * h
            add_member(xa, 0.0, xc, yc, tw, "core")
            add_member(xc, yc, xb, h, tw, "core")
            add_member(xa, h, xc, yc, tw, "core")
            add_member(xc, yc, xb, 0.0, tw, "core")
            bottom_attach.update((xa, xb))
            top_attach.update((xa, xb))
    elif design.core_type == "Y":
        hl = design.h_l * 1e-3
        for k in range(n + 1):
            x = x0 + k * s_eff
            if k % 2 == 0:  # stem base vertex
                t = tw / 2.0 if k in (0, n) else tw
                add_member(x, 0.0, x, hl, t, "core")
                bottom_attach.add(x)
            else:
                top_attach.add(x)
        for k in range(n):
            xa, xb = x0 + k * s_eff, x0 + (k + 1) * s_eff
            ya, yb = (hl, h) if k % 2 == 0 else (h, hl)
            add_member(xa, ya, xb, yb, tw, "core")

    for attach, y, kind in ((bottom_attach, 0.0, "face_bottom"), (top_attach, h, "face_top")):
        xs = sorted(attach)
        for xa, xb in zip(xs[:-1], xs[1:]):
            add_member(xa, y, xb, y, tf, kind)

    if design.with_joints:
        tj = design.t_j * 1e-3
        for outer, inner in ((0.0, x0), (x_end + JOINT_SPAN, x_end)):
            add_member(outer, 0.0, inner, 0.0, tj, "joint")
            add_member(outer, h, inner, h, tj, "joint")
            add_member(outer, 0.0, outer, h, tj, "joint")
            add_member(outer, 0.0, inner, h, tj, "joint")
        clamp_x = (0.0, x_end + JOINT_SPAN)
    else:
        clamp_x = (x0, x_end)

    mesh_size = min(s_eff, h) / 10.0
    return FrameModel(nodes=book.array(), members=members, clamp_x=clamp_x, mesh_size=mesh_size)


def area_density(design: SandwichDesign, length: float = 1.0, rho: float = 7850.0) -> float:
    """Closed-form mass per unit outside-view area, kg/m^2.

    Uses the same snapped spacing and shared-end-member convention as the
    generated geometry, so it equals the member-sum mass exactly.
    """
    design.validate()
    tf = design.t_f * 1e-3
    tw = design.t_w * 1e-3
    h = design.core_height_mm() * 1e-3
    s_eff = length / cell_count(length, design.s * 1e-3)
    if design.core_type == "web":
        core = tw * h / s_eff
    elif design.core_type == "corrugated":
        core = tw * math.hypot(s_eff, h) / s_eff
    elif design.core_type == "X":
        core = 2.0 * tw * math.hypot(s_eff, h) / s_eff
    else:  # Y
        hh = design.h_h * 1e-3
        hl = design.h_l * 1e-3
        core = tw * (math.hypot(s_eff, hh) + hl / 2.0) / s_eff
    volume = (2.0 * tf + core) * length
    span = length
    if design.with_joints:
        tj = design.t_j * 1e-3
        joint = tj * (2.0 * JOINT_SPAN + h + math.hypot(JOINT_SPAN, h))
        volume += 2.0 * joint
        span += 2.0 * JOINT_SPAN
    return rho * volume / span


def member_mass_per_area(model: FrameModel, rho: float = 7850.0) -> float:
    """Summed member mass per unit span; oracle counterpart of area_density."""
    xs = model.nodes[:, 0]
    span = float(xs.max() - xs.min())
    total = 0.0
    for m in model.members:
        a, b = model.nodes[m.n1], model.nodes[m.n2]
        total += math.dist(a, b) * m.thickness
    return rho * total / span


@dataclass
class FrameMesh:
    nodes: np.ndarray  # (N, 2)
    conn: np.ndarray  # (E, 2)
    thickness: np.ndarray  # (E,)
    top_face: np.ndarray  # (E,) bool, members carrying the pressure
    clamped_nodes: np.ndarray


def discretize(model: FrameModel, max_len: float | None = None) -> FrameMesh:
    """Split members into beam elements no longer than ``max_len``.

    Capped at 24 elements per member: beyond 10-12 per segment the frame
    response is converged and extra dofs only cost time.
    """
    max_len = max_len or model.mesh_size
    book = _NodeBook()
    for x, y in model.nodes:
        book.add(x, y)
    conn, thick, top = [], [], []
    for m in model.members:
        a = model.nodes[m.n1]
        b = model.nodes[m.n2]
        pieces = min(24, max(1, int(math.ceil(math.dist(a, b) / max_len))))
        pts = [a + (b - a) * t for t in np.linspace(0.0, 1.0, pieces + 1)]
        ids = [book.add(p[0], p[1]) for p in pts]
        for i, j in zip(ids[:-1], ids[1:]):
            conn.append((i, j))
            thick.append(m.thickness)
            top.append(m.kind == "face_top")
    nodes = book.array()
    clamped = np.zeros(len(nodes), dtype=bool)
    for xc in model.clamp_x:
        clamped |= np.abs(nodes[:, 0] - xc) < 1e-9
    return FrameMesh(
        nodes=nodes,
        conn=np.array(conn, dtype=np.int64),
        thickness=np.array(thick),
        top_face=np.array(top, dtype=bool),
        clamped_nodes=np.flatnonzero(clamped),
    )


def _frame_geometry(mesh: FrameMesh):
    d = mesh.nodes[mesh.conn[:, 1]] - mesh.nodes[mesh.conn[:, 0]]
    L = np.hypot(d[:, 0], d[:, 1])
    return L, d[:, 0] / L, d[:, 1] / L


def _frame_local_matrices(mesh: FrameMesh, E: float, rho: float):
    L, _, _ = _frame_geometry(mesh)
    A = mesh.thickness  # per metre of depth
    EI = E * mesh.thickness**3 / 12.0
    ne = L.size
    K = np.zeros((ne, 6, 6))
    M = np.zeros((ne, 6, 6))
    EA_L = E * A / L
    for i, j, v in ((0, 0, 1.0), (0, 3, -1.0), (3, 3, 1.0)):
        K[:, i, j] += v * EA_L
    b = EI / L**3
    bend = [
        (1, 1, 12.0, 0), (1, 2, 6.0, 1), (1, 4, -12.0, 0), (1, 5, 6.0, 1),
        (2, 2, 4.0, 2), (2, 4, -6.0, 1), (2, 5, 2.0, 2),
        (4, 4, 12.0, 0), (4, 5, -6.0, 1),
        (5, 5, 4.0, 2),
    ]
    for i, j, v, pw in bend:
        K[:, i, j] += v * b * L**pw
    m_ax = rho * A * L / 6.0
    for i, j, v in ((0, 0, 2.0), (0, 3, 1.0), (3, 3, 2.0)):
        M[:, i, j] += v * m_ax
    m_b = rho * A * L / 420.0
    bmass = [
        (1, 1, 156.0, 0), (1, 2, 22.0, 1), (1, 4, 54.0, 0), (1, 5, -13.0, 1),
        (2, 2, 4.0, 2), (2, 4, 13.0, 1), (2, 5, -3.0, 2),
        (4, 4, 156.0, 0), (4, 5, -22.0, 1),
        (5, 5, 4.0, 2),
    ]
    for i, j, v, pw in bmass:
        M[:, i, j] += v * m_b * L**pw
    for X in (K, M):
        X += np.triu(X, 1).transpose(0, 2, 1)
    return K, M


def _frame_rotation(mesh: FrameMesh):
    L, c, s = _frame_geometry(mesh)
    ne = L.size
    T = np.zeros((ne, 6, 6))
    for off in (0, 3):
        T[:, off, off] = c
        T[:, off, off + 1] = s
        T[:, off + 1, off] = -s
        T[:, off + 1, off + 1] = c
        T[:, off + 2, off + 2] = 1.0
    return T


def _frame_dofs(mesh: FrameMesh):
    n = mesh.conn
    dofs = np.empty((n.shape[0], 6), dtype=np.int64)
    dofs[:, 0:3] = 3 * n[:, [0]] + np.arange(3)
    dofs[:, 3:6] = 3 * n[:, [1]] + np.arange(3)
    return dofs


def assemble_frame(mesh: FrameMesh, E: float, rho: float):
    """Reduced global stiffness and mass (3 dofs per node, clamps eliminated)."""
    Kl, Ml = _frame_local_matrices(mesh, E, rho)
    T = _frame_rotation(mesh)
    Kg = np.einsum("eji,ejk,ekl->eil", T, Kl, T)
    Mg = np.einsum("eji,ejk,ekl->eil", T, Ml, T)
    dofs = _frame_dofs(mesh)
    ndof = 3 * len(mesh.nodes)
    clamped = np.concatenate([3 * mesh.clamped_nodes + k for k in range(3)])
    free = np.setdiff1d(np.arange(ndof), clamped)
    fmap = np.full(ndof, -1, dtype=np.int64)
    fmap[free] = np.arange(free.size)
    iK = fmap[np.repeat(dofs, 6, axis=1).ravel()]
    jK = fmap[np.tile(dofs, (1, 6)).ravel()]
    keep = (iK >= 0) & (jK >= 0)

    def build(data):
        return sp.coo_matrix(
            (data.ravel()[keep], (iK[keep], jK[keep])), shape=(free.size, free.size)
        ).tocsc()

    return build(Kg), build(Mg), free, dofs


def frame_load_vector(mesh: FrameMesh, pressure: float, free: np.ndarray) -> np.ndarray:
    """Consistent nodal loads of a downward pressure on the top-face members."""
    L, _, _ = _frame_geometry(mesh)
    dofs = _frame_dofs(mesh)
    F = np.zeros(3 * len(mesh.nodes))
    w = -pressure  # N/m per metre of depth
    for e in np.flatnonzero(mesh.top_face):
        le = L[e]
        fe = np.array([0.0, w * le / 2, w * le**2 / 12, 0.0, w * le / 2, -(w * le**2) / 12])
        np.add.at(F, dofs[e], fe)
    return F[free]


def frame_max_stress(mesh: FrameMesh, u_free: np.ndarray, free: np.ndarray, E: float) -> float:
    """Largest |axial| + |extreme-fiber bending| stress over members and stations."""
    ndof = 3 * len(mesh.nodes)
    u = np.zeros(ndof)
    u[free] = u_free
    dofs = _frame_dofs(mesh)
    T = _frame_rotation(mesh)
    d = np.einsum("eij,ej->ei", T, u[dofs])
    L, _, _ = _frame_geometry(mesh)
    sig_a = E * (d[:, 3] - d[:, 0]) / L
    worst_bend = np.zeros(L.size)
    for xi in (0.0, 0.5, 1.0):
        kappa = (
            (12.0 * xi - 6.0) / L**2 * d[:, 1]
            + (6.0 * xi - 4.0) / L * d[:, 2]
            + (6.0 - 12.0 * xi) / L**2 * d[:, 4]
            + (6.0 * xi - 2.0) / L * d[:, 5]
        )
        worst_bend = np.maximum(worst_bend, np.abs(E * kappa * mesh.thickness / 2.0))
    return float(np.max(np.abs(sig_a) + worst_bend))


@dataclass
class EvalResult:
    area_density: float  # kg/m^2
    max_vm: float | None  # Pa
    f1: float | None  # Hz


def evaluate(
    design: SandwichDesign,
    load: float = 50e3,
    length: float = 1.0,
    material: MaterialModel | None = None,
    need_stress: bool = True,
    need_frequency: bool = True,
) -> EvalResult:
    """Mass, peak von Mises stress and first natural frequency of one design.

    Members carry uniaxial stress, so von Mises reduces to |axial + bending|
    at the extreme fibers. A disconnected or unsupported model surfaces as a
    :class:`SingularSystemError` from the factorization.
    """
    material = material or MaterialModel()
    model = generate_geometry(design, length)
    mesh = discretize(model)
    K, M, free, _ = assemble_frame(mesh, material.E0, material.rho)
    max_vm = None
    f1 = None
    if need_stress:
        F = frame_load_vector(mesh, load, free)
        u = StaticFactor(K).solve(F, rtol=1e-7)
        max_vm = frame_max_stress(mesh, u, free, material.E0)
    if need_frequency:
        eig = solve_eigen(K, M, 1)
        f1 = float(eig.frequencies[0])
    return EvalResult(
        area_density=area_density(design, length, material.rho), max_vm=max_vm, f1=f1
    )

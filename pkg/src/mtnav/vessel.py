"""Planar cerebral vessel trees: centerlines, procedural generation, measurement, augmentation.

The navigable world is a tree of 2D centerlines with per-point lumen radii.
Each side carries an ICA trunk that ends in a bifurcation into an MCA (target
branch) and an ACA (distractor branch). Trunk tortuosity is a generation
target hit by solving a sinusoidal perturbation amplitude.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

SCENE_SCHEMA_VERSION = 1
RADIUS_RANGE_MM = (0.5, 6.0)
AUGMENT_RANGE = (0.7, 1.3)
N_TARGETS_PER_SIDE = 10

SIDES = ("left", "right")
LABELS = ("ICA", "MCA", "ACA")


class GeometryError(ValueError):
    """Invalid vessel geometry or parameters."""


class UndefinedTortuosityError(GeometryError):
    """Tortuosity is undefined (coincident centerline endpoints)."""


class GenerationError(GeometryError):
    """Procedural generation could not satisfy its targets."""


# ---------------------------------------------------------------------------
# centerlines


@dataclass
class Centerline:
    """Ordered 2D polyline (mm) with per-point lumen radii (mm)."""

    points: np.ndarray  # (n, 2) float64
    radii: np.ndarray  # (n,) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise GeometryError("centerline needs >= 2 points of shape (n, 2)")
        if self.radii.shape != (len(self.points),):
            raise GeometryError("one radius per centerline point required")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise GeometryError("consecutive centerline points must be distinct")
        if np.any(self.radii <= 0.0):
            raise GeometryError("all radii must be positive")

    @property
    def arclengths(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate(([0.0], np.cumsum(seg)))

    @property
    def length(self) -> float:
        return float(self.arclengths[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length s, clamped to the branch."""
        arcs = self.arclengths
        s = min(max(s, 0.0), arcs[-1])
        i = int(np.searchsorted(arcs, s, side="right")) - 1
        i = min(i, len(arcs) - 2)
        t = (s - arcs[i]) / (arcs[i + 1] - arcs[i])
        return (1.0 - t) * self.points[i] + t * self.points[i + 1]

    def radius_at(self, s: float) -> float:
        arcs = self.arclengths
        s = min(max(s, 0.0), arcs[-1])
        return float(np.interp(s, arcs, self.radii))


def tortuosity(c: Centerline) -> float:
    """Geodesic centerline length over the Euclidean distance of its endpoints (>= 1)."""
    chord = float(np.linalg.norm(c.points[-1] - c.points[0]))
    if chord < 1e-12:
        raise UndefinedTortuosityError("coincident centerline endpoints")
    return c.length / chord


# ---------------------------------------------------------------------------
# vessel tree


@dataclass
class Attachment:
    parent: str
    child: str
    arclen_mm: float
    parent_index: int  # point index on the parent, kept so augmentation can re-derive arclen


@dataclass
class VesselTree:
    """Branch graph of centerlines; immutable by convention after construction."""

    branches: dict[str, Centerline]
    topology: list[Attachment]
    sides: dict[str, str]  # branch-id -> left/right
    labels: dict[str, str]  # branch-id -> ICA/MCA/ACA
    targets: dict[str, np.ndarray]  # side -> (N_TARGETS_PER_SIDE, 2)
    seed: int | None = None

    def root(self) -> str:
        children = {a.child for a in self.topology}
        roots = [b for b in self.branches if b not in children]
        if len(roots) != 1:
            raise GeometryError(f"tree must have exactly one root, found {roots}")
        return roots[0]

    def parent_of(self, branch: str) -> Attachment | None:
        for a in self.topology:
            if a.child == branch:
                return a
        return None

    def branch_by(self, side: str, label: str) -> str:
        ids = [b for b in self.branches if self.sides[b] == side and self.labels[b] == label]
        if len(ids) != 1:
            raise GeometryError(f"expected exactly one {label} on side {side}, found {ids}")
        return ids[0]

    def validate(self) -> None:
        root = self.root()
        # tree-shaped: every non-root branch has exactly one parent, no cycles
        seen = {root}
        frontier = [root]
        while frontier:
            b = frontier.pop()
            for a in self.topology:
                if a.parent == b:
                    if a.child in seen:
                        raise GeometryError(f"cycle or repeated attachment at {a.child}")
                    seen.add(a.child)
                    frontier.append(a.child)
        if seen != set(self.branches):
            raise GeometryError("disconnected branches present")
        for side in SIDES:
            self.branch_by(side, "ICA")
            self.branch_by(side, "MCA")
        for a in self.topology:
            parent = self.branches[a.parent]
            child = self.branches[a.child]
            at = parent.point_at(a.arclen_mm)
            pr = parent.radius_at(a.arclen_mm)
            if np.linalg.norm(child.points[0] - at) > pr + 1e-9:
                raise GeometryError(f"{a.child} does not start within {a.parent} lumen")
            if child.radii[0] > pr + 1e-9:
                raise GeometryError(f"{a.child} radius exceeds parent lumen at attachment")
        for side, pts in self.targets.items():
            if pts.shape != (N_TARGETS_PER_SIDE, 2):
                raise GeometryError(f"targets[{side}] must be ({N_TARGETS_PER_SIDE}, 2)")

    def entry_frame(self, side: str) -> tuple[np.ndarray, float]:
        """Entry point and axis angle (radians) of the side's ICA trunk."""
        ica = self.branches[self.branch_by(side, "ICA")]
        d = ica.points[1] - ica.points[0]
        return ica.points[0].copy(), float(math.atan2(d[1], d[0]))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([c.points for c in self.branches.values()])
        pad = max(float(np.max([c.radii.max() for c in self.branches.values()])), 1.0)
        return pts.min(axis=0) - pad, pts.max(axis=0) + pad


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenParams:
    """Targets for the procedural generator; defaults give a mid-range anatomy."""

    seed: int = 0
    tortuosity_right: float = 1.2
    tortuosity_left: float = 1.2
    radius_rica_mm: float = 2.5
    radius_lica_mm: float = 2.5
    radius_rmca_mm: float = 1.3
    radius_lmca_mm: float = 1.3
    ica_length_mm: float = 100.0
    mca_length_mm: float = 40.0
    aca_length_mm: float = 30.0
    bifurcation_angle_deg: tuple[float, float] = (35.0, 60.0)
    siphon_cycles: float = 2.5
    sample_spacing_mm: float = 1.0

    def validate(self) -> None:
        lo, hi = RADIUS_RANGE_MM
        for name in ("radius_rica_mm", "radius_lica_mm", "radius_rmca_mm", "radius_lmca_mm"):
            r = getattr(self, name)
            if not (lo <= r <= hi):
                raise GeometryError(f"{name}={r} outside [{lo}, {hi}] mm")
        if self.tortuosity_right < 1.0 or self.tortuosity_left < 1.0:
            raise GeometryError("tortuosity targets must be >= 1.0")
        if self.ica_length_mm <= 10.0 or self.mca_length_mm <= 5.0 or self.aca_length_mm <= 5.0:
            raise GeometryError("branch lengths too short")
        a, b = self.bifurcation_angle_deg
        if not (0.0 < a <= b < 90.0):
            raise GeometryError("bifurcation angle range must satisfy 0 < lo <= hi < 90")


# Default anatomy library used for train/test pools: per-case ICA tortuosities and
# origin radii (mm) spanning the calibration range; last two rows are the held-out pair.
CASE_LIBRARY: list[dict] = [
    {"tort_r": 1.16, "tort_l": 1.14, "rica": 2.05, "rmca": 1.21, "lica": 1.51, "lmca": 2.18},
    {"tort_r": 1.25, "tort_l": 1.18, "rica": 2.13, "rmca": 1.28, "lica": 2.48, "lmca": 1.15},
    {"tort_r": 1.35, "tort_l": 1.42, "rica": 3.46, "rmca": 1.00, "lica": 3.30, "lmca": 0.77},
    {"tort_r": 1.16, "tort_l": 1.13, "rica": 0.99, "rmca": 1.19, "lica": 3.66, "lmca": 1.19},
    {"tort_r": 1.10, "tort_l": 1.24, "rica": 3.80, "rmca": 1.66, "lica": 2.49, "lmca": 1.58},
    {"tort_r": 1.19, "tort_l": 1.27, "rica": 3.10, "rmca": 1.40, "lica": 1.33, "lmca": 1.02},
    {"tort_r": 1.47, "tort_l": 1.60, "rica": 2.87, "rmca": 1.78, "lica": 3.56, "lmca": 1.59},
    {"tort_r": 1.41, "tort_l": 1.33, "rica": 3.27, "rmca": 1.13, "lica": 2.83, "lmca": 1.10},
    {"tort_r": 1.39, "tort_l": 1.23, "rica": 2.36, "rmca": 1.61, "lica": 4.26, "lmca": 1.51},
    {"tort_r": 1.27, "tort_l": 1.42, "rica": 3.51, "rmca": 1.64, "lica": 3.52, "lmca": 1.44},
    {"tort_r": 1.15, "tort_l": 1.11, "rica": 5.80, "rmca": 0.98, "lica": 5.35, "lmca": 0.93},
    {"tort_r": 1.21, "tort_l": 1.21, "rica": 3.33, "rmca": 0.98, "lica": 3.20, "lmca": 0.84},
]


def case_params(index: int, seed: int | None = None) -> GenParams:
    """GenParams for one library case; MCA radii below the generator floor are clamped up."""
    row = CASE_LIBRARY[index]
    lo = RADIUS_RANGE_MM[0]
    return GenParams(
        seed=index if seed is None else seed,
        tortuosity_right=row["tort_r"],
        tortuosity_left=row["tort_l"],
        radius_rica_mm=row["rica"],
        radius_lica_mm=row["lica"],
        radius_rmca_mm=max(row["rmca"], lo),
        radius_lmca_mm=max(row["lmca"], lo),
    )


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _trunk_points(length: float, axis_angle: float, amplitude: float, cycles: float,
                  spacing: float) -> np.ndarray:
    n = max(int(round(length / spacing)) + 1, 8)
    t = np.linspace(0.0, 1.0, n)
    axis = _unit(axis_angle)
    normal = _unit(axis_angle + 0.5 * math.pi)
    # sin^2 window pins both endpoints and keeps end tangents on the axis
    lateral = amplitude * np.sin(2.0 * math.pi * cycles * t) * np.sin(math.pi * t) ** 2
    return np.outer(t * length, axis) + np.outer(lateral, normal)


def _polyline_tortuosity(points: np.ndarray) -> float:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return float(seg.sum() / np.linalg.norm(points[-1] - points[0]))


def _solve_amplitude(target: float, length: float, axis_angle: float, cycles: float,
                     spacing: float, max_iter: int = 64) -> float:
    """Bisect the sinusoid amplitude so the trunk tortuosity hits the target."""
    if target <= 1.0 + 1e-12:
        return 0.0
    lo, hi = 0.0, length * 0.05
    for _ in range(24):
        if _polyline_tortuosity(_trunk_points(length, axis_angle, hi, cycles, spacing)) >= target:
            break
        hi *= 2.0
    else:
        raise GenerationError(f"tortuosity target {target} unreachable")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if _polyline_tortuosity(_trunk_points(length, axis_angle, mid, cycles, spacing)) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9 * length:
            break
    amp = 0.5 * (lo + hi)
    got = _polyline_tortuosity(_trunk_points(length, axis_angle, amp, cycles, spacing))
    if abs(got - target) > 0.02:
        raise GenerationError(f"bisection stalled at tortuosity {got:.4f} for target {target}")
    return amp


def generate_vasculature(p: GenParams) -> VesselTree:
    """Deterministic two-sided vasculature: ICA trunks ending in MCA/ACA bifurcations."""
    p.validate()
    rng = np.random.default_rng(p.seed)
    spacing = p.sample_spacing_mm
    branches: dict[str, Centerline] = {}
    sides: dict[str, str] = {}
    labels: dict[str, str] = {}
    targets: dict[str, np.ndarray] = {}

    for side, sign, tort, r_ica, r_mca in (
        ("right", -1.0, p.tortuosity_right, p.radius_rica_mm, p.radius_rmca_mm),
        ("left", +1.0, p.tortuosity_left, p.radius_lica_mm, p.radius_lmca_mm),
    ):
        # trunk axis tilts outward from vertical; lateral = away from the midline
        axis_angle = 0.5 * math.pi + sign * math.radians(14.0)
        amp = _solve_amplitude(tort, p.ica_length_mm, axis_angle, p.siphon_cycles, spacing)
        trunk = _trunk_points(p.ica_length_mm, axis_angle, amp, p.siphon_cycles, spacing)

        r_aca = max(0.8 * r_mca, RADIUS_RANGE_MM[0])
        r_end = max(r_mca, r_aca)
        n = len(trunk)
        ica_radii = np.linspace(r_ica, max(r_end, RADIUS_RANGE_MM[0]), n)

        lo_deg, hi_deg = p.bifurcation_angle_deg
        beta = math.radians(rng.uniform(lo_deg, hi_deg))  # MCA, lateral
        gamma = math.radians(rng.uniform(lo_deg, hi_deg))  # ACA, medial

        def _straight(start, angle, length, r0, r1):
            m = max(int(round(length / spacing)) + 1, 4)
            s = np.linspace(0.0, length, m)
            pts = start[None, :] + np.outer(s, _unit(angle))
            return Centerline(pts, np.linspace(r0, r1, m))

        apex = trunk[-1]
        mca = _straight(apex, axis_angle + sign * beta, p.mca_length_mm, r_mca, 0.75 * r_mca)
        aca = _straight(apex, axis_angle - sign * gamma, p.aca_length_mm, r_aca, 0.75 * r_aca)

        prefix = "R" if side == "right" else "L"
        branches[f"{prefix}ICA"] = Centerline(trunk, ica_radii)
        branches[f"{prefix}MCA"] = mca
        branches[f"{prefix}ACA"] = aca
        for label in LABELS:
            sides[f"{prefix}{label}"] = side
            labels[f"{prefix}{label}"] = label

        arcs = mca.arclengths
        fractions = (np.arange(N_TARGETS_PER_SIDE) + 1) / N_TARGETS_PER_SIDE
        targets[side] = np.stack([mca.point_at(f * arcs[-1]) for f in fractions])

    # root = the ICA with the larger origin radius so the attachment radius invariant holds
    root, other = ("RICA", "LICA") if p.radius_rica_mm >= p.radius_lica_mm else ("LICA", "RICA")
    topology = [Attachment(root, other, 0.0, 0)]
    for prefix in ("R", "L"):
        ica = branches[f"{prefix}ICA"]
        end_arc = float(ica.arclengths[-1])
        end_idx = len(ica.points) - 1
        topology.append(Attachment(f"{prefix}ICA", f"{prefix}MCA", end_arc, end_idx))
        topology.append(Attachment(f"{prefix}ICA", f"{prefix}ACA", end_arc, end_idx))

    tree = VesselTree(branches, topology, sides, labels, targets, seed=p.seed)
    tree.validate()
    return tree


def augment(v: VesselTree, sx: float, sy: float) -> VesselTree:
    """Anisotropic scaling of the whole scene; radii scale by min(sx, sy)."""
    lo, hi = AUGMENT_RANGE
    if not (lo <= sx <= hi and lo <= sy <= hi):
        raise GeometryError(f"scales ({sx}, {sy}) outside [{lo}, {hi}]")
    rs = min(sx, sy)
    scale = np.array([sx, sy])
    branches = {
        bid: Centerline(c.points * scale, c.radii * rs) for bid, c in v.branches.items()
    }
    topology = []
    for a in v.topology:
        arcs = branches[a.parent].arclengths
        topology.append(Attachment(a.parent, a.child, float(arcs[a.parent_index]), a.parent_index))
    targets = {side: pts * scale for side, pts in v.targets.items()}
    out = VesselTree(branches, topology, dict(v.sides), dict(v.labels), targets, seed=v.seed)
    out.validate()
    return out


def sample_target(v: VesselTree, side: str, rng: np.random.Generator) -> tuple[str, np.ndarray]:
    """Uniform draw among the side's pre-designated MCA target points."""
    if side not in v.targets:
        raise GeometryError(f"no targets for side {side!r}")
    i = int(rng.integers(N_TARGETS_PER_SIDE))
    return v.branch_by(side, "MCA"), v.targets[side][i].copy()


# ---------------------------------------------------------------------------
# geodesic queries (pathlength support)


def nearest_on_tree(v: VesselTree, p: np.ndarray) -> tuple[str, float, float]:
    """Nearest centerline location to p: (branch-id, arc length, Euclidean offset)."""
    best = (None, 0.0, math.inf)
    q = np.asarray(p, dtype=np.float64)
    for bid, c in v.branches.items():
        a, b = c.points[:-1], c.points[1:]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", q[None, :] - a, ab) / denom, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(proj - q[None, :], axis=1)
        i = int(np.argmin(d))
        if d[i] < best[2]:
            arcs = c.arclengths
            s = float(arcs[i] + t[i] * (arcs[i + 1] - arcs[i]))
            best = (bid, s, float(d[i]))
    return best  # type: ignore[return-value]


def geodesic_mm(v: VesselTree, a: tuple[str, float], b: tuple[str, float]) -> float:
    """Shortest along-centerline distance between two (branch, arc) locations."""
    if a[0] == b[0]:
        return abs(a[1] - b[1])
    # anchor graph: branch endpoints and attachment points, Dijkstra over it
    anchors: dict[str, list[float]] = {bid: [0.0, c.length] for bid, c in v.branches.items()}
    links: list[tuple[tuple[str, float], tuple[str, float]]] = []
    for att in v.topology:
        anchors[att.parent].append(att.arclen_mm)
        links.append(((att.parent, att.arclen_mm), (att.child, 0.0)))
    for bid, (ba, bb) in ((a[0], a), (b[0], b)):
        anchors[bid].append(bb)

    def node(bid: str, s: float) -> tuple[str, float]:
        return (bid, round(s, 9))

    adj: dict[tuple[str, float], list[tuple[tuple[str, float], float]]] = {}

    def add_edge(u, w, cost):
        adj.setdefault(u, []).append((w, cost))
        adj.setdefault(w, []).append((u, cost))

    for bid, arcs in anchors.items():
        ss = sorted(set(round(s, 9) for s in arcs))
        for s0, s1 in zip(ss[:-1], ss[1:]):
            add_edge(node(bid, s0), node(bid, s1), s1 - s0)
    for u, w in links:
        add_edge(node(*u), node(*w), 0.0)

    src, dst = node(*a), node(*b)
    dist = {src: 0.0}
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == dst:
            return d
        if d > dist.get(u, math.inf):
            continue
        for w, cost in adj.get(u, ()):
            nd = d + cost
            if nd < dist.get(w, math.inf):
                dist[w] = nd
                heapq.heappush(heap, (nd, w))
    raise GeometryError("disconnected tree in geodesic query")


# ---------------------------------------------------------------------------
# scene serialization


def tree_to_dict(v: VesselTree) -> dict:
    return {
        "version": SCENE_SCHEMA_VERSION,
        "seed": v.seed,
        "branches": [
            {
                "id": bid,
                "label": v.labels[bid],
                "side": v.sides[bid],
                "points": [[float(x), float(y)] for x, y in c.points],
                "radii": [float(r) for r in c.radii],
            }
            for bid, c in sorted(v.branches.items())
        ],
        "topology": [
            {"parent": a.parent, "child": a.child, "arclen_mm": float(a.arclen_mm)}
            for a in v.topology
        ],
        "targets": {
            side: [[float(x), float(y)] for x, y in pts] for side, pts in sorted(v.targets.items())
        },
    }


def tree_from_dict(doc: dict) -> VesselTree:
    if doc.get("version") != SCENE_SCHEMA_VERSION:
        raise GeometryError(f"unsupported scene version {doc.get('version')}")
    branches = {}
    sides = {}
    labels = {}
    for b in doc["branches"]:
        branches[b["id"]] = Centerline(np.array(b["points"]), np.array(b["radii"]))
        sides[b["id"]] = b["side"]
        labels[b["id"]] = b["label"]
    topology = []
    for t in doc["topology"]:
        arcs = branches[t["parent"]].arclengths
        idx = int(np.argmin(np.abs(arcs - t["arclen_mm"])))
        topology.append(Attachment(t["parent"], t["child"], float(t["arclen_mm"]), idx))
    targets = {side: np.array(pts) for side, pts in doc["targets"].items()}
    tree = VesselTree(branches, topology, sides, labels, targets, seed=doc.get("seed"))
    tree.validate()
    return tree


def scene_hash(v: VesselTree) -> str:
    blob = json.dumps(tree_to_dict(v), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_scene(v: VesselTree, path) -> None:
    with open(path, "w") as f:
        json.dump(tree_to_dict(v), f, indent=1)


def load_scene(path) -> VesselTree:
    with open(path) as f:
        return tree_from_dict(json.load(f))

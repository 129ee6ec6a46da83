"""Quasi-static guidewire/catheter physics inside a rigid-walled vessel tree.

Both devices live on one angle-parameterized node chain (the catheter rides
over the wire and shares its path); insertion and roll are kinematic inputs,
shape comes from energy minimization, and wall contact produces the tip force
used by the safety rewards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import _kernels as K
from .vessel import VesselTree

MAX_TRANSLATE_MM_S = 40.0
MAX_ROTATE_DEG_S = 180.0
CONTROL_DT_S = 0.135  # 27 s budget over a 200-step episode


class PhysicsDivergedError(RuntimeError):
    """The equilibrium solver failed; the episode is aborted as a failure."""


@dataclass
class DeviceSpec:
    name: str
    segment_mm: float = 2.0
    num_segments_max: int = 150
    bending_stiffness: float = 5.0  # energy per rad^2 per joint
    tip_precurve_deg: tuple[float, ...] = ()  # distal joint rest angles, tip joint first
    lumen_radius_mm: float = 0.0

    def __post_init__(self):
        if self.segment_mm <= 0 or self.bending_stiffness <= 0:
            raise ValueError("segment length and stiffness must be positive")
        if any(abs(a) >= 90.0 for a in self.tip_precurve_deg):
            raise ValueError("precurve rest angles must satisfy |angle| < 90 deg")

    @property
    def max_length_mm(self) -> float:
        return self.segment_mm * self.num_segments_max


def default_wire() -> DeviceSpec:
    return DeviceSpec("microwire", bending_stiffness=25.0, tip_precurve_deg=(28.0, 22.0))


def default_catheter() -> DeviceSpec:
    return DeviceSpec("microcatheter", bending_stiffness=40.0, lumen_radius_mm=0.4)


@dataclass
class SimConfig:
    """Solver constants; serialized with every trajectory for reproducibility."""

    substeps: int = 10
    max_iterations: int = 500
    energy_tol: float = 1e-8
    k_wall: float = 800.0  # energy per mm^2 of penetration
    force_per_mm: float = 100.0  # N of contact force per mm of penetration (calibrated)
    push_force_max: float = 15.0  # insertion stalls when dE/dL exceeds this slope
    drag_per_newton: float = 0.03  # advancement lost per N of body contact force
    free_window_segments: int = 40  # distal segments relaxed per substep
    entry_channel_mm: float = 60.0
    grid_cell_mm: float = 8.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


@dataclass
class ContactInfo:
    force: np.ndarray  # (2,) N, the wall reaction on the wire tip

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.force))


@dataclass
class ControlInput:
    wire_v: float = 0.0  # mm/s
    wire_w: float = 0.0  # deg/s
    cath_v: float = 0.0
    cath_w: float = 0.0

    def __post_init__(self):
        self.wire_v = float(np.clip(self.wire_v, -MAX_TRANSLATE_MM_S, MAX_TRANSLATE_MM_S))
        self.cath_v = float(np.clip(self.cath_v, -MAX_TRANSLATE_MM_S, MAX_TRANSLATE_MM_S))
        self.wire_w = float(np.clip(self.wire_w, -MAX_ROTATE_DEG_S, MAX_ROTATE_DEG_S))
        self.cath_w = float(np.clip(self.cath_w, -MAX_ROTATE_DEG_S, MAX_ROTATE_DEG_S))


@dataclass
class DeviceState:
    angles: np.ndarray  # absolute segment angles, proximal -> distal
    wire_len: float  # inserted length, mm
    cath_len: float
    wire_roll: float  # degrees
    cath_roll: float
    wire_nodes: np.ndarray  # (n+1, 2) mm
    cath_nodes: np.ndarray
    tip_contact: ContactInfo
    path: np.ndarray  # carved-channel polyline from the entry point, mm
    solver_iterations: int = 0
    solver_energy: float = 0.0

    def copy(self) -> "DeviceState":
        return DeviceState(
            self.angles.copy(), self.wire_len, self.cath_len, self.wire_roll, self.cath_roll,
            self.wire_nodes.copy(), self.cath_nodes.copy(),
            ContactInfo(self.tip_contact.force.copy()), self.path.copy(),
            self.solver_iterations, self.solver_energy,
        )


class Simulator:
    """Owns the world geometry for one side and steps DeviceStates quasi-statically."""

    def __init__(self, world: VesselTree, side: str,
                 wire: DeviceSpec | None = None, catheter: DeviceSpec | None = None,
                 config: SimConfig | None = None):
        self.world = world
        self.side = side
        self.wire = wire or default_wire()
        self.catheter = catheter or default_catheter()
        self.config = config or SimConfig()
        if self.wire.segment_mm != self.catheter.segment_mm:
            raise ValueError("wire and catheter must share one segment length")
        self.seg = self.wire.segment_mm
        self.entry_point, self.entry_angle = self._platform_frame()
        self._build_world_arrays()

    def _platform_frame(self) -> tuple[np.ndarray, float]:
        """Guide-platform exit: the first trunk point clear of the contralateral lumen.

        Both ICA trunks meet at the scene root, so their lumens overlap near the
        origin; the stable platform sits past that overlap.
        """
        other = "left" if self.side == "right" else "right"
        ica = self.world.branches[self.world.branch_by(self.side, "ICA")]
        contra = self.world.branches[self.world.branch_by(other, "ICA")]
        arcs = ica.arclengths
        entry_idx = 0
        for i in range(len(ica.points)):
            d = np.linalg.norm(contra.points - ica.points[i], axis=1)
            j = int(np.argmin(d))
            if d[j] > ica.radii[i] + contra.radii[j] + 1.0:
                entry_idx = i
                break
            if arcs[i] > 0.4 * arcs[-1]:
                break
        entry_idx = min(entry_idx, len(ica.points) - 2)
        tangent = ica.points[entry_idx + 1] - ica.points[entry_idx]
        return ica.points[entry_idx].copy(), float(math.atan2(tangent[1], tangent[0]))

    # -- world geometry ------------------------------------------------------

    def _build_world_arrays(self) -> None:
        a_list, b_list, r0_list, r1_list = [], [], [], []
        # straight entry channel behind the ICA origin (the guide platform)
        u = np.array([math.cos(self.entry_angle), math.sin(self.entry_angle)])
        ica = self.world.branches[self.world.branch_by(self.side, "ICA")]
        a_list.append(self.entry_point - self.config.entry_channel_mm * u)
        b_list.append(self.entry_point.copy())
        snug = min(1.2, float(ica.radii[0]))
        r0_list.append(snug)
        r1_list.append(snug)
        for c in self.world.branches.values():
            a_list.extend(c.points[:-1])
            b_list.extend(c.points[1:])
            r0_list.extend(c.radii[:-1])
            r1_list.extend(c.radii[1:])
        # fillet discs at attachment points smooth the concave wedge between lumens
        for att in self.world.topology:
            parent = self.world.branches[att.parent]
            child = self.world.branches[att.child]
            p = parent.point_at(att.arclen_mm)
            r = 1.15 * max(parent.radius_at(att.arclen_mm), float(child.radii[0]))
            a_list.append(p)
            b_list.append(p + np.array([1e-6, 0.0]))
            r0_list.append(r)
            r1_list.append(r)
        self.seg_a = np.array(a_list, dtype=np.float64)
        self.seg_b = np.array(b_list, dtype=np.float64)
        self.seg_r0 = np.array(r0_list, dtype=np.float64)
        self.seg_r1 = np.array(r1_list, dtype=np.float64)
        self.all_idx = np.arange(len(self.seg_a), dtype=np.int64)
        self._build_grid()

    def _build_grid(self) -> None:
        cs = self.config.grid_cell_mm
        lo = np.minimum(self.seg_a, self.seg_b).min(axis=0) - 2.0 * cs
        hi = np.maximum(self.seg_a, self.seg_b).max(axis=0) + 2.0 * cs
        nx = max(int(math.ceil((hi[0] - lo[0]) / cs)), 1)
        ny = max(int(math.ceil((hi[1] - lo[1]) / cs)), 1)
        buckets: list[list[int]] = [[] for _ in range(nx * ny)]
        for j in range(len(self.seg_a)):
            inflate = max(self.seg_r0[j], self.seg_r1[j]) + 3.0
            blo = np.minimum(self.seg_a[j], self.seg_b[j]) - inflate
            bhi = np.maximum(self.seg_a[j], self.seg_b[j]) + inflate
            ix0 = max(int((blo[0] - lo[0]) // cs), 0)
            iy0 = max(int((blo[1] - lo[1]) // cs), 0)
            ix1 = min(int((bhi[0] - lo[0]) // cs), nx - 1)
            iy1 = min(int((bhi[1] - lo[1]) // cs), ny - 1)
            for iy in range(iy0, iy1 + 1):
                for ix in range(ix0, ix1 + 1):
                    buckets[iy * nx + ix].append(j)
        starts = np.zeros(nx * ny + 1, dtype=np.int64)
        flat: list[int] = []
        for i, b in enumerate(buckets):
            flat.extend(b)
            starts[i + 1] = len(flat)
        self.grid = dict(
            gx0=float(lo[0]), gy0=float(lo[1]), cell=cs, nx=nx, ny=ny,
            cell_start=starts, cell_segs=np.array(flat, dtype=np.int64),
        )

    def _grid_args(self) -> tuple:
        g = self.grid
        return (self.seg_a, self.seg_b, self.seg_r0, self.seg_r1,
                g["gx0"], g["gy0"], g["cell"], g["nx"], g["ny"],
                g["cell_start"], g["cell_segs"], self.all_idx)

    # -- chain bookkeeping ---------------------------------------------------

    def _chain_n(self, wire_len: float) -> int:
        return max(1, int(math.ceil(wire_len / self.seg - 1e-12)))

    def _base_point(self, wire_len: float, n: int) -> np.ndarray:
        a0 = wire_len - n * self.seg  # in (-seg, 0]
        u = np.array([math.cos(self.entry_angle), math.sin(self.entry_angle)])
        return self.entry_point + a0 * u

    def _ensure_path(self, path: np.ndarray, need_len: float) -> np.ndarray:
        """Extend the carved channel straight past its end so the walk can reach need_len."""
        seglens = np.linalg.norm(np.diff(path, axis=0), axis=1)
        total = float(seglens.sum())
        short = need_len + 3.0 * self.seg - total
        if short <= 0.0:
            return path
        d = path[-1] - path[-2]
        d = d / np.linalg.norm(d)
        return np.vstack([path, path[-1] + short * d])

    def _walk_chain(self, path: np.ndarray, wire_len: float):
        """Chain nodes with exact segment chords along the carved channel."""
        n = self._chain_n(wire_len)
        u = np.array([math.cos(self.entry_angle), math.sin(self.entry_angle)])
        src = np.vstack([path[0] - self.config.entry_channel_mm * u, path])
        base = self._base_point(wire_len, n)
        nodes, segi, segt = K.walk_polyline(src, base[0], base[1], self.seg, n)
        d = np.diff(nodes, axis=0)
        return np.arctan2(d[:, 1], d[:, 0]), segi

    def _splice_path(self, path: np.ndarray, pos: np.ndarray, ifree: int,
                     segi: np.ndarray) -> np.ndarray:
        """Replace the channel from the free-window start with the solved chain shape."""
        ci = int(segi[ifree])  # src segment of the window-start node; src[k] = path[k-1]
        prefix = path[:max(ci, 0)]
        tail = pos[ifree:]
        if len(prefix) and np.linalg.norm(prefix[-1] - tail[0]) < 1e-12:
            prefix = prefix[:-1]
        return np.vstack([prefix, tail]) if len(prefix) else tail.copy()

    def _joint_params(self, n: int, wire_len: float, cath_len: float,
                      wire_roll: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-joint stiffness and rest angle; joint j sits at node j (1..n-1)."""
        kj = np.full(n, self.wire.bending_stiffness)
        rest = np.zeros(n)
        a0 = wire_len - n * self.seg
        node_arcs = a0 + self.seg * np.arange(n + 1)
        covered = node_arcs[:n] <= cath_len + 1e-9
        kj[covered] += self.catheter.bending_stiffness
        scale = math.cos(math.radians(wire_roll))
        for d, deg in enumerate(self.wire.tip_precurve_deg):
            j = n - 1 - d
            if j >= 1:
                rest[j] = math.radians(deg) * scale
        # the catheter is straight: covering a precurved joint dilutes its rest angle
        for j in range(1, n):
            if covered[j] and rest[j] != 0.0:
                rest[j] *= self.wire.bending_stiffness / kj[j]
        return kj, rest

    def _positions(self, angles: np.ndarray, wire_len: float) -> np.ndarray:
        base = self._base_point(wire_len, len(angles))
        return K.chain_positions(base[0], base[1], angles, self.seg)

    def _cath_tip_index(self, n: int, wire_len: float, cath_len: float) -> int:
        a0 = wire_len - n * self.seg
        # most distal node with arc <= cath_len
        k = int(math.floor((cath_len - a0) / self.seg + 1e-9))
        return max(0, min(k, n))

    # -- public API ----------------------------------------------------------

    def initial_state(self, inserted_mm: float = 4.0) -> DeviceState:
        u = np.array([math.cos(self.entry_angle), math.sin(self.entry_angle)])
        path = np.vstack([self.entry_point, self.entry_point + max(inserted_mm, self.seg) * u])
        n = self._chain_n(inserted_mm)
        angles = np.full(n, self.entry_angle)
        if n >= 2:
            kj, rest = self._joint_params(n, inserted_mm, inserted_mm, 0.0)
            base = self._base_point(inserted_mm, n)
            angles, _, status, _tr, _tl = K.solve_equilibrium(
                angles, 1, base[0], base[1], self.seg, kj, rest, self.config.k_wall,
                *self._grid_args(), self.config.max_iterations, self.config.energy_tol)
            if status != K.STATUS_OK:
                raise PhysicsDivergedError("initial state did not converge")
            pos = self._positions(angles, inserted_mm)
            path = self._splice_path(path, pos, 1, np.array([1, 1], dtype=np.int64))
        return self._finalize(angles, inserted_mm, inserted_mm, 0.0, 0.0, path, 0, 0.0)

    def step(self, state: DeviceState, u: ControlInput, dt: float = CONTROL_DT_S) -> DeviceState:
        if dt <= 0:
            raise ValueError("dt must be positive")
        cfg = self.config
        angles = state.angles.copy()
        path = state.path
        wire_len, cath_len = state.wire_len, state.cath_len
        wire_roll, cath_roll = state.wire_roll, state.cath_roll
        sub_dt = dt / cfg.substeps
        iterations = 0
        energy = state.solver_energy
        for _ in range(cfg.substeps):
            pos = self._positions(angles, wire_len)
            pens, _norms = K.all_penetrations(pos, *self._grid_args())
            body_force = cfg.force_per_mm * float(pens.sum())
            speed = max(0.0, 1.0 - cfg.drag_per_newton * body_force)
            new_len = float(np.clip(wire_len + u.wire_v * speed * sub_dt,
                                    0.0, self.wire.max_length_mm))
            new_cath = float(np.clip(cath_len + u.cath_v * speed * sub_dt, 0.0, new_len))
            new_wroll = _wrap_deg(wire_roll + u.wire_w * sub_dt)
            cath_roll = _wrap_deg(cath_roll + u.cath_w * sub_dt)
            if new_len == wire_len and new_cath == cath_len and new_wroll == wire_roll:
                # nothing moved: the chain is already at this substep's equilibrium
                continue
            snapshot = (angles, path, wire_len, cath_len, wire_roll)
            e_before = self._window_energy(angles, wire_len, cath_len, wire_roll)
            delta = new_len - wire_len
            try:
                angles, path, it1, energy = self._relax(
                    angles, path, new_len, new_cath, new_wroll)
                iterations += it1
                rejected = delta > 0.0 and (energy - e_before) / delta > cfg.push_force_max
            except PhysicsDivergedError:
                # a non-converging insertion candidate is treated as a jam
                if delta <= 0.0:
                    raise
                rejected = True
            if rejected:
                # insertion stalls: the chain cannot absorb the length at this push
                angles, path, wire_len, cath_len, wire_roll = snapshot
                cath_hold = cath_len if u.cath_v >= 0.0 else new_cath
                cath_hold = float(np.clip(cath_hold, 0.0, wire_len))
                if new_wroll != wire_roll or cath_hold != cath_len:
                    angles, path, it2, energy = self._relax(
                        angles, path, wire_len, cath_hold, new_wroll)
                    iterations += it2
                    cath_len, wire_roll = cath_hold, new_wroll
                else:
                    # fully jammed with constant inputs: later substeps are identical
                    energy = e_before
                    break
            else:
                wire_len, cath_len, wire_roll = new_len, new_cath, new_wroll
        return self._finalize(angles, wire_len, cath_len, wire_roll, cath_roll, path,
                              iterations, energy)

    def _window_energy(self, angles: np.ndarray, wire_len: float, cath_len: float,
                       wire_roll: float) -> float:
        n = self._chain_n(wire_len)
        if n < 2:
            return 0.0
        kj, rest = self._joint_params(n, wire_len, cath_len, wire_roll)
        base = self._base_point(wire_len, n)
        ifree = max(1, n - self.config.free_window_segments)
        return float(K.chain_energy(angles, ifree, base[0], base[1], self.seg, kj, rest,
                                    self.config.k_wall, *self._grid_args()))

    def _relax(self, angles, path, wire_len, cath_len, wire_roll):
        """Walk the chain along the channel at the given insertion and solve."""
        cfg = self.config
        path = self._ensure_path(path, wire_len)
        angles, segi = self._walk_chain(path, wire_len)
        n = self._chain_n(wire_len)
        if n < 2:
            return angles, path, 0, 0.0
        kj, rest = self._joint_params(n, wire_len, cath_len, wire_roll)
        base = self._base_point(wire_len, n)
        ifree = max(1, n - cfg.free_window_segments)
        # widen the window past any penetrating node so contact is never frozen
        pens_w, _ = K.all_penetrations(self._positions(angles, wire_len),
                                       *self._grid_args())
        bad = np.nonzero(pens_w > 1e-9)[0]
        if len(bad) and bad[0] <= ifree:
            ifree = max(1, int(bad[0]) - 1)
        angles, iters, status, trace, tl = K.solve_equilibrium(
            angles, ifree, base[0], base[1], self.seg, kj, rest, cfg.k_wall,
            *self._grid_args(), cfg.max_iterations, cfg.energy_tol)
        if status == K.STATUS_NON_FINITE:
            raise PhysicsDivergedError("non-finite solver state")
        if status == K.STATUS_MAX_ITER:
            raise PhysicsDivergedError(f"no convergence in {cfg.max_iterations} iterations")
        pos = self._positions(angles, wire_len)
        path = self._splice_path(path, pos, ifree, segi)
        return angles, path, int(iters), float(trace[tl - 1])

    def _finalize(self, angles, wire_len, cath_len, wire_roll, cath_roll, path,
                  iterations, energy) -> DeviceState:
        pos = self._positions(angles, wire_len)
        m = self._cath_tip_index(len(angles), wire_len, cath_len)
        cath_nodes = pos[: m + 1].copy()
        tip = self._tip_contact(pos)
        return DeviceState(
            angles=angles, wire_len=wire_len, cath_len=cath_len,
            wire_roll=wire_roll, cath_roll=cath_roll,
            wire_nodes=pos, cath_nodes=cath_nodes, tip_contact=tip, path=path,
            solver_iterations=iterations, solver_energy=energy,
        )

    def _tip_contact(self, pos: np.ndarray) -> ContactInfo:
        pen, nx, ny = K.point_penetration(
            pos[-1, 0], pos[-1, 1], self.seg_a, self.seg_b, self.seg_r0, self.seg_r1,
            self.all_idx)
        # wall reaction pushes the tip back toward the lumen
        f = -self.config.force_per_mm * pen * np.array([nx, ny])
        return ContactInfo(f)

    def tip_force(self, state: DeviceState) -> ContactInfo:
        return self._tip_contact(state.wire_nodes)

    def tracked_points(self, state: DeviceState) -> tuple[np.ndarray, np.ndarray]:
        """Three points at 0/2/4 mm of arc behind each device tip; entry pads short devices."""
        wire = self._tracked(state.wire_nodes, state.wire_len, len(state.angles))
        n = len(state.angles)
        m = self._cath_tip_index(n, state.wire_len, state.cath_len)
        a0 = state.wire_len - n * self.seg
        cath_tip_arc = a0 + self.seg * m
        cath = self._tracked(state.wire_nodes[: m + 1], cath_tip_arc, m)
        return wire, cath

    def _tracked(self, nodes: np.ndarray, tip_arc: float, tip_index: int) -> np.ndarray:
        pts = np.empty((3, 2))
        for k in range(3):
            arc = tip_arc - k * self.seg
            idx = tip_index - k
            if arc <= 1e-9 or idx < 0:
                pts[k] = self.entry_point
            else:
                pts[k] = nodes[idx]
        return pts

    def penetration_profile(self, state: DeviceState) -> np.ndarray:
        """Exact per-node penetration (full segment scan), for invariant checks."""
        pos = state.wire_nodes
        out = np.empty(len(pos))
        for k in range(len(pos)):
            out[k], _, _ = K.point_penetration(
                pos[k, 0], pos[k, 1], self.seg_a, self.seg_b, self.seg_r0, self.seg_r1,
                self.all_idx)
        return out

    def solve_trace(self, state: DeviceState) -> np.ndarray:
        """Energy trace of one fresh equilibrium solve from this state (diagnostics)."""
        n = len(state.angles)
        if n < 2:
            return np.zeros(1)
        kj, rest = self._joint_params(n, state.wire_len, state.cath_len, state.wire_roll)
        base = self._base_point(state.wire_len, n)
        ifree = max(1, n - self.config.free_window_segments)
        _, _, _, trace, tl = K.solve_equilibrium(
            state.angles.copy(), ifree, base[0], base[1], self.seg, kj, rest,
            self.config.k_wall, *self._grid_args(),
            self.config.max_iterations, self.config.energy_tol)
        return trace[:tl]


def _wrap_deg(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0

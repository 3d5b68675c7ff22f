"""Tie-line coupling of subsystem models into the closed network model.

The constant matrix M maps the stacked border outputs ``y_c = [V_cp; theta_cp]``
of all subsystems to the stacked tie-line injections ``w_c = [P_cp; Q_cp]``
into the subsystems. It is the Jacobian of the tie-line power injections with
respect to the border voltages, evaluated at the tie operating point. The
closed system is available both as a state-space realization and as a
per-frequency closure formula

    G = blkdiag(G_ps) + blkdiag(G_pc) (I - M blkdiag(G_cc))^{-1} M blkdiag(M_s)

and the two agree pointwise by construction.
"""

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import DimensionMismatch, IllPosedInterconnection, RankDeficientCoupling
from ..lti import StateSpace


@dataclass(frozen=True)
class TieLine:
    """Branch connecting border buses of two distinct subsystems.

    ``g``/``b`` follow the same series-admittance convention as
    :class:`~hhinf.power.network.Branch`; ``p_transfer`` is the scheduled
    active power leaving ``from`` towards ``to`` at the operating point.
    """

    from_sub: str
    from_bus: str
    to_sub: str
    to_bus: str
    g: float = 0.0
    b: float = 0.0
    p_transfer: float = 0.0

    def __post_init__(self):
        if self.from_sub == self.to_sub:
            raise ValueError("tie line must connect two distinct subsystems")


@dataclass(frozen=True)
class CouplingMatrix:
    M: np.ndarray
    ties: tuple
    sub_names: tuple
    n_cp: tuple          # coupling-bus count per subsystem

    def __post_init__(self):
        self.M.setflags(write=False)

    @property
    def n_wc_total(self) -> int:
        return 2 * sum(self.n_cp)

    def col_slices(self):
        """Per-subsystem (V, theta) column ranges in the stacked y_c."""
        out = {}
        off = 0
        for name, c in zip(self.sub_names, self.n_cp):
            out[name] = (off, c)
            off += 2 * c
        return out


def _tie_angle(tie: TieLine, Va: float, Vb: float) -> float:
    """Cross-tie angle difference consistent with the scheduled transfer."""
    if tie.g == 0.0 and tie.b == 0.0:
        return 0.0
    delta = 0.0
    for _ in range(60):
        p = Va * Va * tie.g + Va * Vb * (-tie.g * math.cos(delta)
                                         + tie.b * math.sin(delta))
        dp = Va * Vb * (tie.g * math.sin(delta) + tie.b * math.cos(delta))
        if abs(dp) < 1e-14:
            break
        step = (tie.p_transfer - p) / dp
        delta += step
        if abs(step) < 1e-14:
            break
    return delta


def _tie_jacobian(tie: TieLine, Va: float, Vb: float, delta: float):
    """d(injections into the subsystems)/d(V_a, V_b, th_a, th_b), 4x4.

    Rows: P into side a, P into side b, Q into side a, Q into side b. The
    injection is the negative of the power entering the tie at that end.
    """
    g, b = tie.g, tie.b
    c, s = math.cos(delta), math.sin(delta)
    # power entering the tie at end a (Eq.-1 form on the two-bus tie network)
    dPa = np.array([2 * Va * g + Vb * (-g * c + b * s),
                    Va * (-g * c + b * s),
                    Va * Vb * (g * s + b * c),
                    -Va * Vb * (g * s + b * c)])
    dQa = np.array([2 * b * Va - Vb * (g * s + b * c),
                    -Va * (g * s + b * c),
                    -Va * Vb * (g * c - b * s),
                    Va * Vb * (g * c - b * s)])
    # end b sees the angle difference with opposite sign
    c2, s2 = c, -s
    dPb = np.array([Vb * (-g * c2 + b * s2),
                    2 * Vb * g + Va * (-g * c2 + b * s2),
                    -Vb * Va * (g * s2 + b * c2),
                    Vb * Va * (g * s2 + b * c2)])
    dQb = np.array([-Vb * (g * s2 + b * c2),
                    2 * b * Vb - Va * (g * s2 + b * c2),
                    Vb * Va * (g * c2 - b * s2),
                    -Vb * Va * (g * c2 - b * s2)])
    return -np.vstack([dPa, dPb, dQa, dQb])


def build_coupling(ties, border_eq, sub_names, n_cp, cp_positions) -> CouplingMatrix:
    """Assemble M from per-tie injection Jacobians at the operating point.

    ``border_eq`` maps (subsystem, bus) to the border voltage magnitude;
    ``cp_positions`` maps (subsystem, bus) to the bus position within that
    subsystem's coupling-bus list.
    """
    sub_names = tuple(sub_names)
    n_cp = tuple(n_cp)
    n_tot = 2 * sum(n_cp)
    M = np.zeros((n_tot, n_tot))
    v_off, p_off = {}, {}
    off = 0
    for name, c in zip(sub_names, n_cp):
        v_off[name] = off          # V block start (columns / rows alike)
        p_off[name] = off          # P block start in w_c
        off += 2 * c

    pairs = set()
    for tie in ties:
        for sub, bus in ((tie.from_sub, tie.from_bus), (tie.to_sub, tie.to_bus)):
            if (sub, bus) not in cp_positions:
                raise ValueError(f"tie endpoint {(sub, bus)} is not a coupling bus")
        Va = border_eq[(tie.from_sub, tie.from_bus)]
        Vb = border_eq[(tie.to_sub, tie.to_bus)]
        delta = _tie_angle(tie, Va, Vb)
        Jt = _tie_jacobian(tie, Va, Vb, delta)
        ia = cp_positions[(tie.from_sub, tie.from_bus)]
        ib = cp_positions[(tie.to_sub, tie.to_bus)]
        ca = n_cp[sub_names.index(tie.from_sub)]
        cb = n_cp[sub_names.index(tie.to_sub)]
        cols = [v_off[tie.from_sub] + ia,              # V_a
                v_off[tie.to_sub] + ib,                # V_b
                v_off[tie.from_sub] + ca + ia,         # theta_a
                v_off[tie.to_sub] + cb + ib]           # theta_b
        rows = [p_off[tie.from_sub] + ia,              # P_a
                p_off[tie.to_sub] + ib,                # P_b
                p_off[tie.from_sub] + ca + ia,         # Q_a
                p_off[tie.to_sub] + cb + ib]           # Q_b
        for r in range(4):
            for cidx in range(4):
                M[rows[r], cols[cidx]] += Jt[r, cidx]
        pairs.add(frozenset([(tie.from_sub, tie.from_bus), (tie.to_sub, tie.to_bus)]))

    required = min(2 * len(pairs), n_tot)
    if ties and np.linalg.matrix_rank(M, tol=1e-10) < required:
        raise RankDeficientCoupling(
            f"coupling matrix rank {np.linalg.matrix_rank(M, tol=1e-10)} "
            f"below {required}")
    return CouplingMatrix(M=M, ties=tuple(ties), sub_names=sub_names, n_cp=n_cp)


def eq9_closure(blocks, M: np.ndarray) -> np.ndarray:
    """Per-frequency coupled response from subsystem channel blocks.

    ``blocks`` is a list of dicts with stacked arrays ``Gcc`` (nw, 2c, 2c),
    ``Gpc`` (nw, p, 2c), ``Gps`` (nw, p, d) and ``Gcs`` (nw, 2c, d); for
    subsystem models the latter is the constant M_s at every frequency.
    Implements the closure formula literally at each frequency.
    """
    nw = blocks[0]["Gps"].shape[0]
    p_tot = sum(b["Gps"].shape[1] for b in blocks)
    d_tot = sum(b["Gps"].shape[2] for b in blocks)
    c_tot = sum(b["Gcc"].shape[1] for b in blocks)
    out = np.zeros((nw, p_tot, d_tot), dtype=complex)
    eye = np.eye(c_tot)
    for w in range(nw):
        Gcc = np.zeros((c_tot, c_tot), dtype=complex)
        Gpc = np.zeros((p_tot, c_tot), dtype=complex)
        Gps = np.zeros((p_tot, d_tot), dtype=complex)
        Gcs = np.zeros((c_tot, d_tot), dtype=complex)
        co = po = do = 0
        for b in blocks:
            c = b["Gcc"].shape[1]
            p = b["Gps"].shape[1]
            d = b["Gps"].shape[2]
            Gcc[co:co + c, co:co + c] = b["Gcc"][w]
            Gpc[po:po + p, co:co + c] = b["Gpc"][w]
            Gps[po:po + p, do:do + d] = b["Gps"][w]
            Gcs[co:co + c, do:do + d] = b["Gcs"][w]
            co += c
            po += p
            do += d
        try:
            X = np.linalg.solve(eye - M @ Gcc, M @ Gcs)
        except np.linalg.LinAlgError:
            raise IllPosedInterconnection(
                "I - M G_cc singular at a probe frequency") from None
        out[w] = Gps + Gpc @ X
    return out


class CoupledSystem:
    """Subsystems closed through M: state-space and formula evaluations."""

    def __init__(self, subsystems, coupling: CouplingMatrix):
        self.subsystems = list(subsystems)
        self.coupling = coupling
        n_wc = sum(s.channels.n_wc for s in self.subsystems)
        if coupling.M.size and coupling.M.shape != (n_wc, n_wc):
            raise DimensionMismatch(
                f"M is {coupling.M.shape}, stacked coupling width is {n_wc}")
        self._ss_cache = {}

    @property
    def n_ws_total(self) -> int:
        return sum(s.channels.n_ws for s in self.subsystems)

    def machine_output_names(self):
        names = []
        for s in self.subsystems:
            for m in s.spec.machines:
                names.append(f"{s.name}.{m.id}")
        return names

    def state_space(self, outputs: str = "coi") -> StateSpace:
        """Closed-loop realization; outputs 'coi' (one row per subsystem)
        or 'all' (every machine frequency)."""
        if outputs in self._ss_cache:
            return self._ss_cache[outputs]
        subs = self.subsystems
        M = self.coupling.M
        A_list, Bc_list, Bs_list = [], [], []
        Cyc_list, Dcc_list, Ms_list, Cp_list = [], [], [], []
        for s in subs:
            ss = s.state_space("dup")
            ch = s.channels
            A_list.append(ss.A)
            Bc_list.append(ss.B[:, :ch.n_wc])
            Bs_list.append(ss.B[:, ch.n_wc:])
            Cyc_list.append(ss.C[:ch.n_yc, :])
            Dcc_list.append(ss.D[:ch.n_yc, :ch.n_wc])
            Ms_list.append(s.M_s)
            if outputs == "coi":
                Cp_list.append(ss.C[ch.n_yc:ch.n_yc + 1, :])
            else:
                Cp_list.append(ss.C[ch.n_yc + 1:, :])
        A = scipy_block_diag(A_list)
        B_wc = scipy_block_diag(Bc_list)
        B_ws = scipy_block_diag(Bs_list)
        C_yc = scipy_block_diag(Cyc_list)
        D_cc = scipy_block_diag(Dcc_list)
        Ms = scipy_block_diag(Ms_list)
        C_p = scipy_block_diag(Cp_list)
        if M.size:
            loop = np.eye(M.shape[0]) - M @ D_cc
            try:
                T = np.linalg.solve(loop, M)
            except np.linalg.LinAlgError:
                raise IllPosedInterconnection(
                    "I - M D_cc singular; interconnection is ill posed") from None
            A_cl = A + B_wc @ (T @ C_yc)
            B_cl = B_ws + B_wc @ (T @ Ms)
        else:
            A_cl, B_cl = A, B_ws
        C_cl = C_p
        D_cl = np.zeros((C_cl.shape[0], B_cl.shape[1]))
        out = StateSpace(A_cl, B_cl, C_cl, D_cl)
        self._ss_cache[outputs] = out
        return out

    def channel_blocks(self, omegas, outputs: str = "coi"):
        """Per-subsystem Eq.-9 blocks at the given frequencies."""
        blocks = []
        for s in self.subsystems:
            ch = s.channels
            kind = "cp" if outputs == "coi" else "cpstar"
            resp = s.response(omegas, kind=kind)
            if outputs == "coi":
                p_rows = slice(ch.n_yc, ch.n_yc + 1)
            else:
                p_rows = slice(ch.n_yc + 1, ch.n_yc + 1 + ch.n_mach)
            blocks.append(dict(
                Gcc=resp[:, :ch.n_yc, :ch.n_wc],
                Gpc=resp[:, p_rows, :ch.n_wc],
                Gps=resp[:, p_rows, ch.n_wc:],
                Gcs=resp[:, :ch.n_yc, ch.n_wc:],
            ))
        return blocks

    def formula_samples(self, omegas, outputs: str = "coi") -> np.ndarray:
        """Literal evaluation of the coupled-closure formula per frequency."""
        return eq9_closure(self.channel_blocks(omegas, outputs), self.coupling.M)

    def with_params(self, K) -> "CoupledSystem":
        return CoupledSystem([s.with_params(K) for s in self.subsystems],
                             self.coupling)

    def tunables(self):
        out = []
        for s in self.subsystems:
            out.extend(s.tunables())
        return out


def scipy_block_diag(mats):
    mats = [np.atleast_2d(m) for m in mats]
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def couple(subsystems, coupling: CouplingMatrix) -> CoupledSystem:
    """Close block-diagonal subsystems through the coupling matrix."""
    return CoupledSystem(subsystems, coupling)


class CoupledChannelSystem:
    """Tunable-system adapter for the coupled model (central tuning)."""

    def __init__(self, coupled: CoupledSystem, outputs: str = "all"):
        self.coupled = coupled
        self.outputs = outputs

    def tunables(self):
        return self.coupled.tunables()

    def state_space(self, assignment) -> StateSpace:
        return self.coupled.with_params(assignment or {}).state_space(self.outputs)

    def freq_samples(self, assignment, omegas) -> np.ndarray:
        ss = self.state_space(assignment)
        return kernels.freq_sweep(ss.A, ss.B, ss.C, ss.D, omegas)

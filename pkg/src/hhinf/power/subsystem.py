"""Subsystem dynamics: DAE model, linearization, zero-mode removal, channels.

The subsystem is a differential-algebraic model: machine and controller states
evolve under the swing/flux equations while bus voltages and angles satisfy the
power-flow equations at every instant. Linearization computes central
finite-difference Jacobians of both parts and eliminates the algebraic
variables through the (full-rank) algebraic Jacobian. The resulting state
matrix carries exactly one eigenvalue at zero from the uniform-angle-offset
invariance; it is deflated with an ordered Schur decomposition, which leaves
every frequency and voltage channel untouched.

Channel convention of a :class:`SubsystemModel`:

* inputs  ``w_c = [P_cp; Q_cp]`` (tie-line injections at coupling buses),
  then ``w_s`` (active-power disturbances of flagged static prosumers),
* outputs ``y_c = [V_cp; theta_cp]``, then ``y_p`` (inertia-weighted mean
  frequency, one row), then ``y_p*`` (all machine frequencies).

The ``(y_c, w_s)`` channel is replaced by its constant algebraic part ``M_s``
(the network feedthrough), matching the coupled-closure formula used by the
coordinator; the stored state-space realization enforces this with a
duplicated state block so that formula and realization agree exactly.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .. import kernels
from ..errors import (
    AlgebraicJacobianSingular,
    EmptySubsystem,
    MultipleZeroModes,
    NonEquilibrium,
    NoZeroMode,
    UnknownProsumer,
)
from ..lti import StateSpace, assemble
from .network import Network, PowerFlowState, PowerSchedule, build_admittance, pf_solve
from .prosumers import Machine, StaticProsumer, controller_diagram

_ZERO_MODE_TOL = 1e-8


def coi_frequency(J, omega) -> float:
    """Inertia-weighted mean frequency sum(J_i w_i) / sum(J_i)."""
    J = np.asarray(J, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if J.shape != omega.shape:
        raise ValueError("J and omega must have equal length")
    if np.any(J <= 0):
        raise ValueError("all inertias must be > 0")
    return float(np.dot(J, omega) / np.sum(J))


@dataclass(frozen=True)
class SubsystemSpec:
    name: str
    network: Network
    machines: tuple
    statics: tuple
    coupling_buses: tuple
    f_hz: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "statics", tuple(self.statics))
        object.__setattr__(self, "coupling_buses", tuple(self.coupling_buses))
        ids = [b.id for b in self.network.buses]
        mbuses = [m.bus for m in self.machines]
        if len(set(mbuses)) != len(mbuses):
            raise ValueError(f"{self.name}: one dynamic prosumer per bus")
        for m in self.machines:
            if m.bus not in ids:
                raise ValueError(f"{self.name}: machine {m.id!r} at unknown bus {m.bus!r}")
        for s in self.statics:
            if s.bus not in ids:
                raise ValueError(f"{self.name}: static {s.id!r} at unknown bus {s.bus!r}")
        for c in self.coupling_buses:
            if c not in ids:
                raise ValueError(f"{self.name}: unknown coupling bus {c!r}")
        slack = self.network.buses[self.network.slack_index].id
        if slack not in mbuses:
            raise ValueError(f"{self.name}: slack bus {slack!r} must host a machine")
        mids = [m.id for m in self.machines]
        if len(set(mids)) != len(mids):
            raise ValueError(f"{self.name}: duplicate machine ids")

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.f_hz

    def disturbances(self):
        return [s for s in self.statics if s.is_disturbance]

    def machine(self, machine_id: str) -> Machine:
        for m in self.machines:
            if m.id == machine_id:
                return m
        raise UnknownProsumer(f"{self.name}: no machine {machine_id!r}")

    def tunables(self):
        out = []
        for m in self.machines:
            diag = controller_diagram(m)
            if diag is not None:
                out.extend(diag.tunables())
        return out


def scale_prosumer(spec: SubsystemSpec, machine_id: str, factor: float) -> SubsystemSpec:
    """Scale a machine's rating/inertia and shift displaced power to a static.

    The machine's scheduled infeed drops to ``factor * P``; the difference is
    added to a (possibly new) static prosumer at the same bus, so bus
    injections and the power-flow solution are unchanged. Reactances are kept
    on the machine base, so the per-unit system-base impedance grows as the
    machine shrinks.
    """
    if not 0.0 < factor <= 1.0:
        raise ValueError("factor must be in (0, 1]")
    if factor == 1.0:
        return spec
    m = spec.machine(machine_id)
    displaced = (1.0 - factor) * m.P
    m_new = replace(m, rating=factor * m.rating, J=factor * m.J,
                    D=factor * m.D, P=factor * m.P)
    machines = tuple(m_new if mm.id == machine_id else mm for mm in spec.machines)
    statics = list(spec.statics)
    for i, s in enumerate(statics):
        if s.bus == m.bus:
            statics[i] = replace(s, P=s.P + displaced)
            break
    else:
        statics.append(StaticProsumer(id=f"{machine_id}_displaced", bus=m.bus,
                                      P=displaced, Q=0.0))
    return replace(spec, machines=machines, statics=tuple(statics))


def equilibrium(spec: SubsystemSpec) -> PowerFlowState:
    """Power-flow operating point of the subsystem (zero tie import)."""
    net = spec.network
    n = net.n_bus
    P = np.zeros(n)
    Q = np.zeros(n)
    Vset = np.ones(n)
    for s in spec.statics:
        i = net.bus_index(s.bus)
        P[i] += s.P
        Q[i] += s.Q
    for m in spec.machines:
        i = net.bus_index(m.bus)
        P[i] += m.P
        Vset[i] = m.Vset
    return pf_solve(net, PowerSchedule(P=P, Q=Q, Vset=Vset))


# --------------------------------------------------------------- DAE internals

class _MachineEq:
    """Equilibrium values and system-base constants for one machine."""

    def __init__(self, m: Machine, bus_i: int, V0: float, th0: float,
                 P0: float, Q0: float, base_mva: float):
        self.m = m
        self.bus_i = bus_i
        conv = base_mva / m.rating
        self.xd = m.xd * conv
        self.xq = m.xq * conv
        self.xd_t = m.xd_t * conv
        self.xq_t = m.xq_t * conv
        vb = V0 * np.exp(1j * th0)
        ib = (P0 - 1j * Q0) / np.conj(vb)
        if m.kind == "two_axis":
            eq_loc = vb + 1j * self.xq * ib
            self.delta0 = float(np.angle(eq_loc))
            rot = np.exp(-1j * (self.delta0 - np.pi / 2.0))
            vd, vq = (vb * rot).real, (vb * rot).imag
            idd, iqq = (ib * rot).real, (ib * rot).imag
            self.Eq0 = vq + self.xd_t * idd
            self.Ed0 = vd - self.xq_t * iqq
            self.Efd0 = self.Eq0 + (self.xd - self.xd_t) * idd
            self.Pm0 = vd * idd + vq * iqq
        else:
            e = vb + 1j * self.xd_t * ib
            self.E0 = float(np.abs(e))
            self.delta0 = float(np.angle(e))
            self.Eq0 = self.Ed0 = self.Efd0 = 0.0
            self.Pm0 = self.E0 * V0 * np.sin(self.delta0 - th0) / self.xd_t
        self.V0 = V0

    def injections(self, delta, Eq, Ed, Vb, thb):
        """(P, Q, Id, Iq) injected into the terminal bus."""
        rel = delta - thb
        if self.m.kind == "two_axis":
            vd = Vb * np.sin(rel)
            vq = Vb * np.cos(rel)
            idd = (Eq - vq) / self.xd_t
            iqq = (vd - Ed) / self.xq_t
            return vd * idd + vq * iqq, vq * idd - vd * iqq, idd, iqq
        p = self.E0 * Vb * np.sin(rel) / self.xd_t
        q = (self.E0 * Vb * np.cos(rel) - Vb * Vb) / self.xd_t
        return p, q, 0.0, 0.0


class _Dae:
    """Evaluates f (state derivatives) and h (power balance) of a subsystem.

    ``controllers`` maps machine id to an assembled controller state space
    (embedded mode); in ports mode (``controllers=None``) the controller
    outputs de_fd/dp_m appear as extra inputs after w_c and w_s.
    """

    def __init__(self, spec: SubsystemSpec, eq: PowerFlowState, controllers):
        self.spec = spec
        self.eq = eq
        net = spec.network
        self.n_bus = net.n_bus
        G, B = build_admittance(net)
        self.Y = G + 1j * B
        self.omega_s = spec.omega_s

        self.cp_idx = np.array([net.bus_index(b) for b in spec.coupling_buses], dtype=int)
        self.dist_idx = np.array([net.bus_index(s.bus) for s in spec.disturbances()], dtype=int)
        self.P_static = np.zeros(self.n_bus)
        self.Q_static = np.zeros(self.n_bus)
        for s in spec.statics:
            i = net.bus_index(s.bus)
            self.P_static[i] += s.P
            self.Q_static[i] += s.Q

        self.machines = []
        x_off = 0
        for m in spec.machines:
            bi = net.bus_index(m.bus)
            P0 = eq.P[bi] - self.P_static[bi]
            Q0 = eq.Q[bi] - self.Q_static[bi]
            meq = _MachineEq(m, bi, eq.V[bi], eq.theta[bi], P0, Q0, net.base_mva)
            self.machines.append(meq)
            meq.x_slice = slice(x_off, x_off + m.n_gen_states)
            x_off += m.n_gen_states
        self.n_gen = x_off

        self.controllers = controllers
        self.ctl_specs = []
        n_ctl = 0
        if controllers is not None:
            for meq in self.machines:
                entry = controllers.get(meq.m.id)
                if entry is None:
                    self.ctl_specs.append(None)
                    continue
                ss, in_names, out_names = entry
                sl = slice(self.n_gen + n_ctl, self.n_gen + n_ctl + ss.n)
                self.ctl_specs.append((ss, in_names, out_names, sl))
                n_ctl += ss.n
        self.n_ctl = n_ctl
        self.nx = self.n_gen + n_ctl

        # ports mode: controller drive inputs after w_c and w_s
        self.port_specs = []
        n_ports = 0
        if controllers is None:
            for meq in self.machines:
                ports = []
                if meq.m.avr is not None:
                    ports.append("de_fd")
                if meq.m.tgov is not None:
                    ports.append("dp_m")
                self.port_specs.append(ports)
                n_ports += len(ports)
        self.n_ports = n_ports

        c = self.cp_idx.size
        d = self.dist_idx.size
        self.n_wc = 2 * c
        self.n_ws = d
        self.nu = self.n_wc + d + n_ports
        self.nv = 2 * self.n_bus

        self.x0 = np.zeros(self.nx)
        for meq in self.machines:
            s = meq.x_slice
            self.x0[s.start] = meq.delta0
            if meq.m.kind == "two_axis":
                self.x0[s.start + 2] = meq.Eq0
                self.x0[s.start + 3] = meq.Ed0
        self.v0 = np.concatenate([eq.theta, eq.V])

    def _ctl_inputs(self, meq, v, domega):
        vals = {"dv_t": v[self.n_bus + meq.bus_i] - meq.V0,
                "domega_pu": domega / self.omega_s}
        return vals

    def f(self, x, v, u):
        theta = v[:self.n_bus]
        V = v[self.n_bus:]
        out = np.zeros(self.nx)
        port_off = self.n_wc + self.n_ws
        for k, meq in enumerate(self.machines):
            s = meq.x_slice
            delta, domega = x[s.start], x[s.start + 1]
            Eq = x[s.start + 2] if meq.m.kind == "two_axis" else 0.0
            Ed = x[s.start + 3] if meq.m.kind == "two_axis" else 0.0
            Vb, thb = V[meq.bus_i], theta[meq.bus_i]
            Pe, _, idd, iqq = meq.injections(delta, Eq, Ed, Vb, thb)

            de_fd = 0.0
            dp_m = 0.0
            if self.controllers is not None:
                entry = self.ctl_specs[k]
                if entry is not None:
                    css, in_names, out_names, sl = entry
                    vals = self._ctl_inputs(meq, v, domega)
                    uc = np.array([vals[nm] for nm in in_names])
                    xc = x[sl]
                    yc = css.C @ xc + css.D @ uc
                    for nm, val in zip(out_names, yc):
                        if nm == "de_fd":
                            de_fd = val
                        elif nm == "dp_m":
                            dp_m = val
                    out[sl] = css.A @ xc + css.B @ uc
            else:
                for nm in self.port_specs[k]:
                    if nm == "de_fd":
                        de_fd = u[port_off]
                    else:
                        dp_m = u[port_off]
                    port_off += 1

            out[s.start] = domega
            out[s.start + 1] = (meq.Pm0 + dp_m - Pe - meq.m.D * domega) / meq.m.J
            if meq.m.kind == "two_axis":
                out[s.start + 2] = (meq.Efd0 + de_fd - Eq
                                    - (meq.xd - meq.xd_t) * idd) / (meq.m.Td0_t)
                out[s.start + 3] = (-Ed + (meq.xq - meq.xq_t) * iqq) / (meq.m.Tq0_t)
        return out

    def h(self, x, v, u):
        theta = v[:self.n_bus]
        V = v[self.n_bus:]
        Vc = V * np.exp(1j * theta)
        S = Vc * np.conj(self.Y @ Vc)
        P_inj = self.P_static.copy()
        Q_inj = self.Q_static.copy()
        c = self.cp_idx.size
        for t, bi in enumerate(self.cp_idx):
            P_inj[bi] += u[t]
            Q_inj[bi] += u[c + t]
        for t, bi in enumerate(self.dist_idx):
            P_inj[bi] += u[self.n_wc + t]
        for meq in self.machines:
            s = meq.x_slice
            Eq = x[s.start + 2] if meq.m.kind == "two_axis" else 0.0
            Ed = x[s.start + 3] if meq.m.kind == "two_axis" else 0.0
            p, q, _, _ = meq.injections(x[s.start], Eq, Ed,
                                        V[meq.bus_i], theta[meq.bus_i])
            P_inj[meq.bus_i] += p
            Q_inj[meq.bus_i] += q
        return np.concatenate([S.real - P_inj, S.imag - Q_inj])


def _fd_jacobian(fun, z0, rel_step):
    f0 = fun(z0)
    J = np.zeros((f0.size, z0.size))
    for j in range(z0.size):
        h = rel_step * max(1.0, abs(z0[j]))
        zp = z0.copy()
        zp[j] += h
        zm = z0.copy()
        zm[j] -= h
        J[:, j] = (fun(zp) - fun(zm)) / (2.0 * h)
    return J


def _eliminate(dae: _Dae, rel_step: float):
    """FD Jacobians of (f, h) and elimination of the algebraic variables.

    Returns (A, B, Vx, Vu) where ``dv = Vx dx + Vu du`` solves the linearized
    algebraic constraint.
    """
    nx, nv, nu = dae.nx, dae.nv, dae.nu
    z0 = np.concatenate([dae.x0, dae.v0, np.zeros(nu)])

    def wrapped(z):
        x, v, u = z[:nx], z[nx:nx + nv], z[nx + nv:]
        return np.concatenate([dae.f(x, v, u), dae.h(x, v, u)])

    f0 = dae.f(dae.x0, dae.v0, np.zeros(nu))
    if np.max(np.abs(f0)) > 1e-6:
        raise NonEquilibrium(
            f"state derivatives not zero at the operating point "
            f"(max |f| = {np.max(np.abs(f0)):.3e})")
    h0 = dae.h(dae.x0, dae.v0, np.zeros(nu))
    if np.max(np.abs(h0)) > 1e-6:
        raise NonEquilibrium(
            f"power balance not satisfied at the operating point "
            f"(max |h| = {np.max(np.abs(h0)):.3e})")

    J = _fd_jacobian(wrapped, z0, rel_step)
    Fx, Fv, Fu = J[:nx, :nx], J[:nx, nx:nx + nv], J[:nx, nx + nv:]
    Hx, Hv, Hu = J[nx:, :nx], J[nx:, nx:nx + nv], J[nx:, nx + nv:]
    try:
        sol = np.linalg.solve(Hv, np.hstack([Hx, Hu]))
    except np.linalg.LinAlgError:
        raise AlgebraicJacobianSingular("algebraic Jacobian is singular") from None
    resid = np.max(np.abs(Hv @ sol - np.hstack([Hx, Hu])))
    if resid > 1e-6 * max(1.0, np.max(np.abs(Hu)), np.max(np.abs(Hx))):
        raise AlgebraicJacobianSingular(
            f"algebraic Jacobian nearly singular (residual {resid:.3e})")
    Vx = -sol[:, :nx]
    Vu = -sol[:, nx:]
    A = Fx + Fv @ Vx
    B = Fu + Fv @ Vu
    return A, B, Vx, Vu


def _pin_zero_mode(A: np.ndarray) -> np.ndarray:
    """Restore the structural zero eigenvalue displaced by FD noise.

    The angle-offset invariance makes one eigenvalue of the eliminated state
    matrix exactly zero; finite differencing moves it by the Jacobian noise
    floor. A rank-one spectral correction along the computed eigenpair places
    it back at the origin without touching the remaining spectrum.
    """
    lam, V = np.linalg.eig(A)
    k = int(np.argmin(np.abs(lam)))
    if abs(lam[k]) > 1e-5 or abs(lam[k].imag) > 1e-9:
        return A
    lam_l, W = np.linalg.eig(A.T)
    kl = int(np.argmin(np.abs(lam_l)))
    v0 = np.real(V[:, k])
    w0 = np.real(W[:, kl])
    denom = float(w0 @ v0)
    if abs(denom) < 1e-12:
        return A
    return A - float(lam[k].real) * np.outer(v0, w0) / denom


def _output_rows(dae: _Dae, Vx, Vu):
    """C/D rows for [y_c; y_p; y_p*] plus measurement rows per machine."""
    nb = dae.n_bus
    c = dae.cp_idx.size
    nm = len(dae.machines)
    nu = dae.nu

    S_yc = np.zeros((2 * c, dae.nv))
    for t, bi in enumerate(dae.cp_idx):
        S_yc[t, nb + bi] = 1.0          # V_cp block first
        S_yc[c + t, bi] = 1.0           # theta_cp block second
    C_yc = S_yc @ Vx
    D_yc = S_yc @ Vu

    # frequency outputs in per-unit speed deviation, keeping all channels on
    # comparable per-unit scales
    C_w = np.zeros((nm, dae.nx))
    for k, meq in enumerate(dae.machines):
        C_w[k, meq.x_slice.start + 1] = 1.0 / dae.omega_s
    J_w = np.array([meq.m.J for meq in dae.machines])
    C_coi = (J_w / J_w.sum()) @ C_w

    C = np.vstack([C_yc, C_coi[None, :], C_w])
    D = np.vstack([D_yc, np.zeros((1 + nm, nu))])
    return C, D


def linearize(spec: SubsystemSpec, eq: PowerFlowState, K=None,
              rel_step: float = 1e-6) -> StateSpace:
    """Linearize the full subsystem DAE at the operating point (raw model).

    Controllers are assembled at the parameter assignment ``K`` and embedded in
    the state vector. The returned model has inputs ``[P_cp; Q_cp; w_s]`` and
    outputs ``[V_cp; theta_cp; omega_coi; omega_1..omega_N]`` and carries one
    zero eigenvalue (angle-offset invariance); see :func:`remove_zero_mode`.
    """
    controllers = {}
    for m in spec.machines:
        diag = controller_diagram(m)
        if diag is None:
            continue
        ss = assemble(diag, K)
        controllers[m.id] = (ss, diag.input_names, diag.output_names)
    dae = _Dae(spec, eq, controllers)
    A, B, Vx, Vu = _eliminate(dae, rel_step)
    C, D = _output_rows(dae, Vx, Vu)
    return StateSpace(_pin_zero_mode(A), B, C, D)


def remove_zero_mode(raw: StateSpace, tol: float = _ZERO_MODE_TOL) -> StateSpace:
    """Deflate the single angle-offset eigenvalue at the origin.

    Uses an ordered real Schur form with the zero eigenvalue leading; the
    deflated model drops that state, which leaves all transfer functions to
    frequency and voltage outputs unchanged (the mode is invisible there) and
    removes the pole at the origin from the border-angle channels.
    """
    lam = raw.poles
    n_zero = int(np.sum(np.abs(lam) < tol))
    if n_zero == 0:
        raise NoZeroMode("no eigenvalue within tolerance of the origin")
    if n_zero > 1:
        raise MultipleZeroModes(f"{n_zero} eigenvalues within tolerance of the origin")
    T, Z, sdim = scipy.linalg.schur(
        raw.A, output="real", sort=lambda re, im: np.hypot(re, im) < tol)
    if sdim != 1:
        raise MultipleZeroModes(
            f"Schur reordering isolated {sdim} eigenvalues at the origin")
    A2 = T[1:, 1:]
    B2 = (Z.T @ raw.B)[1:, :]
    C2 = raw.C @ Z[:, 1:]
    out = StateSpace(A2, B2, C2, raw.D)
    if out.n and np.min(np.abs(out.poles)) < tol:
        raise MultipleZeroModes("an eigenvalue at the origin remains after deflation")
    return out


# ------------------------------------------------------------- subsystem model

@dataclass(frozen=True)
class Channels:
    """Index bookkeeping for the partitioned subsystem channels."""

    n_cp: int
    n_ws: int
    n_mach: int

    @property
    def n_wc(self) -> int:
        return 2 * self.n_cp

    @property
    def n_yc(self) -> int:
        return 2 * self.n_cp

    @property
    def n_in(self) -> int:
        return self.n_wc + self.n_ws

    @property
    def n_out_cp(self) -> int:
        return self.n_yc + 1

    def __eq__(self, other):
        return (self.n_cp, self.n_ws, self.n_mach) == \
            (other.n_cp, other.n_ws, other.n_mach)


class _Plant:
    """Once-per-equilibrium linearization with controller ports open."""

    def __init__(self, spec: SubsystemSpec, eq: PowerFlowState,
                 rel_step: float = 1e-6):
        dae = _Dae(spec, eq, controllers=None)
        A, B, Vx, Vu = _eliminate(dae, rel_step)
        C, D = _output_rows(dae, Vx, Vu)
        self.A = A
        self.B = B
        self.C = C
        self.D = D
        nb = dae.n_bus
        # measurement rows: dv_t (algebraic) and domega_pu (state) per machine
        meas_rows_C, meas_rows_D, meas_names = [], [], []
        for k, meq in enumerate(dae.machines):
            if meq.m.avr is not None:
                sv = np.zeros(dae.nv)
                sv[nb + meq.bus_i] = 1.0
                meas_rows_C.append(sv @ Vx)
                meas_rows_D.append(sv @ Vu)
                meas_names.append((meq.m.id, "dv_t"))
            if meq.m.tgov is not None or meq.m.pss is not None:
                sx = np.zeros(dae.nx)
                sx[meq.x_slice.start + 1] = 1.0 / dae.omega_s
                meas_rows_C.append(sx)
                meas_rows_D.append(np.zeros(dae.nu))
                meas_names.append((meq.m.id, "domega_pu"))
        self.C_meas = np.array(meas_rows_C) if meas_rows_C else np.zeros((0, dae.nx))
        self.D_meas = np.array(meas_rows_D) if meas_rows_D else np.zeros((0, dae.nu))
        self.meas_names = meas_names
        self.dae = dae
        self.channels = Channels(n_cp=dae.cp_idx.size, n_ws=dae.n_ws,
                                 n_mach=len(dae.machines))
        # input layout: w_c, w_s, then controller ports
        self.n_w = dae.n_wc + dae.n_ws
        port_names = []
        for k, meq in enumerate(dae.machines):
            for nm in dae.port_specs[k]:
                port_names.append((meq.m.id, nm))
        self.port_names = port_names


def _close_controllers(plant: _Plant, spec: SubsystemSpec, K):
    """Feedback-connect assembled controllers onto the open plant."""
    ctl = []
    for m in spec.machines:
        diag = controller_diagram(m)
        if diag is None:
            continue
        ss = assemble(diag, K)
        ctl.append((m.id, ss, diag.input_names, diag.output_names))

    n_p = plant.A.shape[0]
    n_c = sum(entry[1].n for entry in ctl)
    n_w = plant.n_w
    n_me = plant.C_meas.shape[0]
    n_u = len(plant.port_names)

    A_c = np.zeros((n_c, n_c))
    B_c = np.zeros((n_c, n_me))
    C_c = np.zeros((n_u, n_c))
    D_c = np.zeros((n_u, n_me))
    off = 0
    meas_index = {nm: i for i, nm in enumerate(plant.meas_names)}
    port_index = {nm: i for i, nm in enumerate(plant.port_names)}
    for mid, ss, in_names, out_names in ctl:
        sl = slice(off, off + ss.n)
        A_c[sl, sl] = ss.A
        for j, nm in enumerate(in_names):
            B_c[sl, meas_index[(mid, nm)]] = ss.B[:, j]
        for i, nm in enumerate(out_names):
            C_c[port_index[(mid, nm)], sl] = ss.C[i, :]
            for j, jn in enumerate(in_names):
                D_c[port_index[(mid, nm)], meas_index[(mid, jn)]] = ss.D[i, j]
        off += ss.n

    B_w = plant.B[:, :n_w]
    B_u = plant.B[:, n_w:]
    C_m = plant.C_meas
    D_mw = plant.D_meas[:, :n_w]
    A_cl = np.block([[plant.A + B_u @ D_c @ C_m, B_u @ C_c],
                     [B_c @ C_m, A_c]])
    B_cl = np.vstack([B_w + B_u @ D_c @ D_mw, B_c @ D_mw])
    C_cl = np.hstack([plant.C, np.zeros((plant.C.shape[0], n_c))])
    D_cl = plant.D[:, :n_w]
    return A_cl, B_cl, C_cl, D_cl


class SubsystemModel:
    """Linearized subsystem with partitioned channels and a K-evaluator.

    Channel responses honor the coordinator convention: the ``(y_c, w_s)``
    block is the constant network feedthrough ``M_s``. ``response(...,
    kind='pstar')`` exposes the untouched disturbance-to-frequency dynamics
    used for decoupled pre-tuning.
    """

    def __init__(self, name, spec, plant: _Plant, K):
        self.name = name
        self.spec = spec
        self.channels = plant.channels
        self._plant = plant
        self.K = dict(K) if K else {}
        ch = self.channels
        key = tuple(sorted(self.K.items()))
        cache = getattr(plant, "_closure_cache", None)
        if cache is None:
            cache = {}
            plant._closure_cache = cache
        if key not in cache:
            A_cl, B_cl, C_cl, D_cl = _close_controllers(plant, spec, self.K or None)
            deflated = remove_zero_mode(
                StateSpace(_pin_zero_mode(A_cl), B_cl, C_cl, D_cl))
            if len(cache) > 512:
                cache.pop(next(iter(cache)))
            cache[key] = deflated
        deflated = cache[key]
        self._A = deflated.A
        self._B_wc = deflated.B[:, :ch.n_wc]
        self._B_ws = deflated.B[:, ch.n_wc:]
        self._C_yc = deflated.C[:ch.n_yc, :]
        self._C_yp = deflated.C[ch.n_yc:ch.n_yc + 1, :]
        self._C_yps = deflated.C[ch.n_yc + 1:, :]
        self._D_yc_wc = deflated.D[:ch.n_yc, :ch.n_wc]
        self.M_s = deflated.D[:ch.n_yc, ch.n_wc:].copy()
        self.M_s.setflags(write=False)

    def tunables(self):
        return self.spec.tunables()

    def with_params(self, K) -> "SubsystemModel":
        merged = dict(self.K)
        merged.update({k: v for k, v in K.items()})
        return SubsystemModel(self.name, self.spec, self._plant, merged)

    @property
    def n_states(self) -> int:
        return self._A.shape[0]

    def state_space(self, kind: str = "dup") -> StateSpace:
        """'dup' enforces the constant M_s channel with a duplicated block."""
        ch = self.channels
        n = self._A.shape[0]
        if kind == "plain":
            B = np.hstack([self._B_wc, self._B_ws])
            C = np.vstack([self._C_yc, self._C_yp, self._C_yps])
            D = np.zeros((C.shape[0], B.shape[1]))
            D[:ch.n_yc, :ch.n_wc] = self._D_yc_wc
            D[:ch.n_yc, ch.n_wc:] = self.M_s
            return StateSpace(self._A, B, C, D)
        A = np.block([[self._A, np.zeros((n, n))],
                      [np.zeros((n, n)), self._A]])
        B = np.block([[self._B_wc, np.zeros((n, ch.n_ws))],
                      [np.zeros((n, ch.n_wc)), self._B_ws]])
        zc = np.zeros_like(self._C_yc)
        C = np.block([[self._C_yc, zc],
                      [self._C_yp, self._C_yp],
                      [self._C_yps, self._C_yps]])
        D = np.zeros((C.shape[0], B.shape[1]))
        D[:ch.n_yc, :ch.n_wc] = self._D_yc_wc
        D[:ch.n_yc, ch.n_wc:] = self.M_s
        return StateSpace(A, B, C, D)

    def response(self, omegas, kind: str = "cp") -> np.ndarray:
        """Channel frequency response stack.

        kind='cp':     rows [y_c; y_p]        x cols [w_c; w_s] (M_s convention)
        kind='cpstar': rows [y_c; y_p; y_p*]  x cols [w_c; w_s] (M_s convention)
        kind='pstar':  rows [y_p*]            x cols [w_c; w_s] (raw dynamics)
        """
        ch = self.channels
        omegas = np.asarray(omegas, dtype=float)
        B = np.hstack([self._B_wc, self._B_ws])
        if kind == "pstar":
            resp = kernels.freq_sweep(self._A, B, self._C_yps,
                                      np.zeros((ch.n_mach, ch.n_in)), omegas)
            return resp
        C = np.vstack([self._C_yc, self._C_yp, self._C_yps])
        D = np.zeros((C.shape[0], ch.n_in))
        D[:ch.n_yc, :ch.n_wc] = self._D_yc_wc
        resp = kernels.freq_sweep(self._A, B, C, D, omegas)
        # coordinator convention: the (y_c, w_s) channel is the constant M_s
        resp[:, :ch.n_yc, ch.n_wc:] = self.M_s[None, :, :]
        if kind == "cp":
            return resp[:, :ch.n_out_cp, :]
        if kind == "cpstar":
            return resp
        raise ValueError(f"unknown response kind {kind!r}")


def make_subsystem(spec: SubsystemSpec, eq: PowerFlowState, K=None) -> SubsystemModel:
    """Build the channel-partitioned subsystem model at an operating point."""
    if not spec.machines:
        raise EmptySubsystem(f"{spec.name}: no dynamic prosumers")
    plant = _Plant(spec, eq)
    return SubsystemModel(spec.name, spec, plant, K or {})

"""Bus/branch network model, admittance construction and Newton power flow.

Branch data follows the usual Ybus convention for a series element with
admittance ``y = g - j b`` (``b > 0`` for an inductive line with reactance
``x``, ``b = x / (r^2 + x^2)``): the susceptance matrix gets ``-b`` on the
diagonal and ``+b`` off-diagonal. A branch shunt susceptance ``b_sh`` is
attached at the branch's from-bus (capacitive positive).
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import DisconnectedGraph, InfeasibleSchedule, PFDiverged

_BUS_KINDS = ("slack", "PV", "PQ")


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = "PQ"

    def __post_init__(self):
        if self.kind not in _BUS_KINDS:
            raise ValueError(f"bus {self.id!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    g: float = 0.0
    b: float = 0.0
    b_sh: float = 0.0


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        if sum(1 for b in self.buses if b.kind == "slack") != 1:
            raise ValueError("exactly one slack bus required")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in ids:
                    raise ValueError(f"branch endpoint {end!r} is not a bus")
            if not all(np.isfinite([br.g, br.b, br.b_sh])):
                raise ValueError("branch admittances must be finite")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: str) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise KeyError(f"unknown bus {bus_id!r}")

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")


def build_admittance(network: Network):
    """Conductance and susceptance matrices (G, B) of the bus network."""
    n = network.n_bus
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    adj = [set() for _ in range(n)]
    for br in network.branches:
        i = network.bus_index(br.from_bus)
        j = network.bus_index(br.to_bus)
        G[i, i] += br.g
        G[j, j] += br.g
        G[i, j] -= br.g
        G[j, i] -= br.g
        B[i, i] -= br.b
        B[j, j] -= br.b
        B[i, j] += br.b
        B[j, i] += br.b
        B[i, i] += br.b_sh
        if br.g != 0.0 or br.b != 0.0:
            adj[i].add(j)
            adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        k = stack.pop()
        for nb in adj[k]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        missing = [network.buses[i].id for i in range(n) if i not in seen]
        raise DisconnectedGraph(f"buses unreachable from {network.buses[0].id!r}: {missing}")
    return G, B


@dataclass
class PowerFlowState:
    """Per-bus voltage solution and injections; converged marks residual < tol."""

    V: np.ndarray
    theta: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    converged: bool = False


@dataclass(frozen=True)
class PowerSchedule:
    """Scheduled injections (p.u., system base) and voltage setpoints.

    ``P`` is used at PV and PQ buses, ``Q`` at PQ buses, ``Vset`` at slack and
    PV buses. Entries at other positions are ignored.
    """

    P: np.ndarray
    Q: np.ndarray
    Vset: np.ndarray


def _injections(G, B, V, theta):
    Vc = V * np.exp(1j * theta)
    S = Vc * np.conj((G + 1j * B) @ Vc)
    return S.real, S.imag


def pf_residual(network: Network, state: PowerFlowState):
    """Calculated minus stated injections per bus: (dP, dQ)."""
    G, B = build_admittance(network)
    P_calc, Q_calc = _injections(G, B, np.asarray(state.V, dtype=float),
                                 np.asarray(state.theta, dtype=float))
    return P_calc - np.asarray(state.P, dtype=float), \
        Q_calc - np.asarray(state.Q, dtype=float)


def pf_solve(network: Network, schedule: PowerSchedule, tol: float = 1e-8,
             max_iter: int = 50) -> PowerFlowState:
    """Full Newton power flow from a flat start.

    Raises :class:`PFDiverged` after ``max_iter`` iterations and
    :class:`InfeasibleSchedule` when the Jacobian becomes singular.
    """
    G, B = build_admittance(network)
    Y = G + 1j * B
    n = network.n_bus
    kinds = [b.kind for b in network.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "PV"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "PQ"], dtype=int)
    pvpq = np.concatenate([pv, pq])

    V = np.ones(n)
    fixed_v = np.array([k in ("slack", "PV") for k in kinds])
    V[fixed_v] = np.asarray(schedule.Vset, dtype=float)[fixed_v]
    theta = np.zeros(n)
    P_s = np.asarray(schedule.P, dtype=float)
    Q_s = np.asarray(schedule.Q, dtype=float)

    def mismatch():
        Vc = V * np.exp(1j * theta)
        S = Vc * np.conj(Y @ Vc)
        dP = S.real - P_s
        dQ = S.imag - Q_s
        return np.concatenate([dP[pvpq], dQ[pq]]), S

    F, S = mismatch()
    for _ in range(max_iter):
        if F.size == 0 or np.max(np.abs(F)) < tol:
            state = PowerFlowState(V=V, theta=theta, P=P_s.copy(), Q=Q_s.copy(),
                                   converged=True)
            sl = network.slack_index
            state.P[sl] = S.real[sl]
            state.Q[sl] = S.imag[sl]
            state.Q[pv] = S.imag[pv]
            return state
        Vc = V * np.exp(1j * theta)
        Ibus = Y @ Vc
        dV = np.diag(Vc)
        dI = np.diag(Ibus)
        dVn = np.diag(Vc / V)
        dS_dVa = 1j * dV @ np.conj(dI - Y @ dV)
        dS_dVm = dV @ np.conj(Y @ dVn) + np.conj(dI) @ dVn
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise InfeasibleSchedule("power-flow Jacobian singular") from None
        if not np.all(np.isfinite(dx)):
            raise InfeasibleSchedule("power-flow update not finite")
        theta[pvpq] += dx[:pvpq.size]
        V[pq] += dx[pvpq.size:]
        if np.any(V <= 0):
            raise PFDiverged("voltage magnitude collapsed below zero")
        F, S = mismatch()
    raise PFDiverged(f"no convergence after {max_iter} iterations "
                     f"(max mismatch {np.max(np.abs(F)):.3e})")

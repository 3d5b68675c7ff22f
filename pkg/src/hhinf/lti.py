"""Parameter-dependent linear systems: blocks, diagrams, norms, modes, simulation.

A :class:`BlockDiagram` is a named-parameter interconnection of elementary
blocks (gains, lags, lead-lags, washouts, raw state-space blocks and summing
junctions). ``assemble`` flattens it into a :class:`StateSpace` for a given
parameter assignment by eliminating the algebraic interconnection with one
linear solve. Frequency responses, sampled and bisection H-infinity norms,
modal analysis and step simulation operate on the assembled models.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg

from . import kernels
from .errors import (
    AlgebraicLoopSingular,
    ResonantPole,
    UnboundParameter,
    UnstableBlowup,
    UnstableSystem,
)

_RESONANCE_TOL = 1e-10


# ------------------------------------------------------------------ parameters

@dataclass(frozen=True)
class Parameter:
    """A named scalar with box bounds and a tunability flag."""

    name: str
    value: float
    lower: float = -math.inf
    upper: float = math.inf
    tunable: bool = False

    def __post_init__(self):
        if not self.lower <= self.value <= self.upper:
            raise ValueError(
                f"parameter {self.name!r}: value {self.value} outside "
                f"[{self.lower}, {self.upper}]")
        if self.tunable and not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"tunable parameter {self.name!r} needs finite bounds")


def fixed(value: float) -> Parameter:
    """Anonymous constant parameter (not assignable by name)."""
    return Parameter(name="", value=float(value))


@dataclass(frozen=True)
class ParamRef:
    """Reference to a parameter as used by a block field.

    ``invert`` lets a block consume 1/value, e.g. a droop gain 1/R_p.
    """

    param: Parameter
    invert: bool = False

    def resolve(self, assignment) -> float:
        # Box bounds are an optimization constraint, not an assembly validity
        # constraint, so assigned values are not clipped here (finite-difference
        # probes step marginally outside the box).
        if assignment is not None and self.param.name in assignment:
            v = float(assignment[self.param.name])
        elif self.param.tunable and assignment is not None:
            raise UnboundParameter(f"tunable parameter {self.param.name!r} not assigned")
        else:
            v = self.param.value
        return 1.0 / v if self.invert else v


def _ref(p) -> ParamRef:
    if isinstance(p, ParamRef):
        return p
    if isinstance(p, Parameter):
        return ParamRef(p)
    return ParamRef(fixed(p))


# ---------------------------------------------------------------------- blocks

_BLOCK_KINDS = ("gain", "integrator", "first_order_lag", "lead_lag", "washout",
                "raw_ss", "sum")


@dataclass(frozen=True)
class Block:
    kind: str
    params: dict = field(default_factory=dict)      # field name -> ParamRef
    signs: tuple = ()                               # sum blocks only
    raw: tuple = ()                                 # raw_ss blocks: (A, B, C, D)

    def __post_init__(self):
        if self.kind not in _BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")

    @property
    def n_in(self) -> int:
        if self.kind == "sum":
            return len(self.signs)
        if self.kind == "raw_ss":
            return self.raw[1].shape[1]
        return 1

    @property
    def n_out(self) -> int:
        if self.kind == "raw_ss":
            return self.raw[2].shape[0]
        return 1

    def realize(self, assignment=None):
        """Controllable-canonical (A, B, C, D) for the given assignment."""
        v = {k: r.resolve(assignment) for k, r in self.params.items()}
        kind = self.kind
        if kind == "gain":
            return (np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                    np.array([[v["k"]]]))
        if kind == "integrator":
            return (np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)),
                    np.zeros((1, 1)))
        if kind == "first_order_lag":
            T = v["T"]
            if T <= 0:
                raise ValueError("first_order_lag: T must be > 0")
            return (np.array([[-1.0 / T]]), np.array([[1.0 / T]]),
                    np.array([[v["k"]]]), np.zeros((1, 1)))
        if kind == "lead_lag":
            k, T1, T2 = v["k"], v["T1"], v["T2"]
            if T2 <= 0:
                raise ValueError("lead_lag: T2 must be > 0")
            return (np.array([[-1.0 / T2]]), np.array([[1.0 / T2]]),
                    np.array([[k * (1.0 - T1 / T2)]]),
                    np.array([[k * T1 / T2]]))
        if kind == "washout":
            k, T = v["k"], v["T"]
            if T <= 0:
                raise ValueError("washout: T must be > 0")
            return (np.array([[-1.0 / T]]), np.array([[1.0 / T]]),
                    np.array([[-k / T]]), np.array([[k / T]]))
        if kind == "sum":
            return (np.zeros((0, 0)), np.zeros((0, len(self.signs))),
                    np.zeros((1, 0)), np.array([list(self.signs)], dtype=float))
        A, B, C, D = self.raw
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        C = np.atleast_2d(np.asarray(C, dtype=float))
        D = np.atleast_2d(np.asarray(D, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0] \
                or C.shape[1] != A.shape[0] or D.shape != (C.shape[0], B.shape[1]):
            raise ValueError("raw_ss: inconsistent matrix dimensions")
        return A, B, C, D


def gain(k) -> Block:
    return Block("gain", {"k": _ref(k)})


def integrator() -> Block:
    return Block("integrator")


def first_order_lag(k, T) -> Block:
    """k / (1 + s T)"""
    return Block("first_order_lag", {"k": _ref(k), "T": _ref(T)})


def lead_lag(k, T1, T2) -> Block:
    """k (1 + s T1) / (1 + s T2)"""
    return Block("lead_lag", {"k": _ref(k), "T1": _ref(T1), "T2": _ref(T2)})


def washout(k, T) -> Block:
    """k s / (1 + s T)"""
    return Block("washout", {"k": _ref(k), "T": _ref(T)})


def raw_ss(A, B, C, D) -> Block:
    return Block("raw_ss", raw=(np.asarray(A, dtype=float), np.asarray(B, dtype=float),
                                np.asarray(C, dtype=float), np.asarray(D, dtype=float)))


def sum_junction(*signs) -> Block:
    if not signs or any(s not in (+1, -1) for s in signs):
        raise ValueError("sum_junction takes +1/-1 signs")
    return Block("sum", signs=tuple(signs))


# ---------------------------------------------------------------- state space

class StateSpace:
    """Continuous-time LTI system (A, B, C, D); immutable after construction."""

    __slots__ = ("A", "B", "C", "D", "_poles")

    def __init__(self, A, B, C, D):
        self.A = np.ascontiguousarray(A, dtype=float)
        self.B = np.ascontiguousarray(B, dtype=float)
        self.C = np.ascontiguousarray(C, dtype=float)
        self.D = np.ascontiguousarray(D, dtype=float)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n \
                or self.C.shape[1] != n or self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("inconsistent state-space dimensions")
        for m in (self.A, self.B, self.C, self.D):
            m.setflags(write=False)
        self._poles = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_in(self) -> int:
        return self.B.shape[1]

    @property
    def n_out(self) -> int:
        return self.C.shape[0]

    @property
    def poles(self) -> np.ndarray:
        if self._poles is None:
            if self.n == 0:
                self._poles = np.zeros(0, dtype=complex)
            else:
                self._poles = np.linalg.eigvals(self.A)
        return self._poles

    def dc_gain(self) -> np.ndarray:
        """C (-A)^{-1} B + D; requires A nonsingular."""
        if self.n == 0:
            return self.D.copy()
        return self.D - self.C @ np.linalg.solve(self.A, self.B)

    def __repr__(self):
        return f"StateSpace(n={self.n}, inputs={self.n_in}, outputs={self.n_out})"


# ------------------------------------------------------------- block diagrams

class BlockDiagram:
    """Directed interconnection of blocks with named external ports.

    ``connections`` wire block output ports to block input ports; ``inputs``
    map external input names to the block input ports they drive; ``outputs``
    name block output ports. Every block input port must be driven by exactly
    one source.
    """

    def __init__(self, blocks, connections, inputs, outputs):
        self.blocks = list(blocks)
        self.connections = [((int(s[0]), int(s[1])), (int(d[0]), int(d[1])))
                            for s, d in connections]
        self.inputs = [(name, [(int(b), int(p)) for b, p in dests])
                       for name, dests in inputs]
        self.outputs = [(name, (int(src[0]), int(src[1]))) for name, src in outputs]
        self._validate()

    def _validate(self):
        driven = {}
        for (sb, sp), (db, dp) in self.connections:
            self._check_port(sb, sp, output=True)
            self._check_port(db, dp, output=False)
            key = (db, dp)
            if key in driven:
                raise ValueError(f"block input port {key} driven twice")
            driven[key] = True
        for name, dests in self.inputs:
            for db, dp in dests:
                self._check_port(db, dp, output=False)
                if (db, dp) in driven:
                    raise ValueError(
                        f"block input port {(db, dp)} driven twice (input {name!r})")
                driven[(db, dp)] = True
        for b, blk in enumerate(self.blocks):
            for p in range(blk.n_in):
                if (b, p) not in driven:
                    raise ValueError(f"block input port {(b, p)} is not driven")
        for name, (sb, sp) in self.outputs:
            self._check_port(sb, sp, output=True)

    def _check_port(self, b, p, output):
        if not 0 <= b < len(self.blocks):
            raise ValueError(f"block index {b} out of range")
        lim = self.blocks[b].n_out if output else self.blocks[b].n_in
        if not 0 <= p < lim:
            raise ValueError(f"port {p} out of range for block {b}")

    def parameters(self):
        """All distinct named parameters, in definition order."""
        seen, out = set(), []
        for blk in self.blocks:
            for ref in blk.params.values():
                p = ref.param
                if p.name and p.name not in seen:
                    seen.add(p.name)
                    out.append(p)
        return out

    def tunables(self):
        return [p for p in self.parameters() if p.tunable]

    @property
    def input_names(self):
        return [name for name, _ in self.inputs]

    @property
    def output_names(self):
        return [name for name, _ in self.outputs]


def assemble(diagram: BlockDiagram, assignment=None) -> StateSpace:
    """Flatten a diagram into a state-space model for a parameter assignment.

    The interconnection is eliminated exactly with a single linear solve of
    ``(I - D P) y = C x + D E w``; a singular loop-gain matrix raises
    :class:`AlgebraicLoopSingular`. State count is the sum of block orders.
    """
    if assignment is not None:
        names = set(assignment)
        for p in diagram.tunables():
            if p.name not in names:
                raise UnboundParameter(f"tunable parameter {p.name!r} not assigned")
    mats = [blk.realize(assignment) for blk in diagram.blocks]
    n = sum(m[0].shape[0] for m in mats)
    m_tot = sum(blk.n_in for blk in diagram.blocks)
    p_tot = sum(blk.n_out for blk in diagram.blocks)
    x_off, u_off, y_off = [], [], []
    xo = uo = yo = 0
    for blk, (A_b, _, _, _) in zip(diagram.blocks, mats):
        x_off.append(xo)
        u_off.append(uo)
        y_off.append(yo)
        xo += A_b.shape[0]
        uo += blk.n_in
        yo += blk.n_out

    A = np.zeros((n, n))
    Bb = np.zeros((n, m_tot))
    Cb = np.zeros((p_tot, n))
    Db = np.zeros((p_tot, m_tot))
    for i, (A_b, B_b, C_b, D_b) in enumerate(mats):
        nb = A_b.shape[0]
        sl_x = slice(x_off[i], x_off[i] + nb)
        sl_u = slice(u_off[i], u_off[i] + diagram.blocks[i].n_in)
        sl_y = slice(y_off[i], y_off[i] + diagram.blocks[i].n_out)
        A[sl_x, sl_x] = A_b
        Bb[sl_x, sl_u] = B_b
        Cb[sl_y, sl_x] = C_b
        Db[sl_y, sl_u] = D_b

    n_w = len(diagram.inputs)
    n_z = len(diagram.outputs)
    P = np.zeros((m_tot, p_tot))
    for (sb, sp), (db, dp) in diagram.connections:
        P[u_off[db] + dp, y_off[sb] + sp] = 1.0
    E = np.zeros((m_tot, n_w))
    for j, (_, dests) in enumerate(diagram.inputs):
        for db, dp in dests:
            E[u_off[db] + dp, j] = 1.0
    F = np.zeros((n_z, p_tot))
    for i, (_, (sb, sp)) in enumerate(diagram.outputs):
        F[i, y_off[sb] + sp] = 1.0

    loop = np.eye(p_tot) - Db @ P
    rhs = np.hstack([Cb, Db @ E])
    try:
        sol = np.linalg.solve(loop, rhs)
    except np.linalg.LinAlgError as exc:
        raise AlgebraicLoopSingular(str(exc)) from None
    resid = np.max(np.abs(loop @ sol - rhs)) if rhs.size else 0.0
    if resid > 1e-8 * max(1.0, np.max(np.abs(rhs)) if rhs.size else 1.0):
        raise AlgebraicLoopSingular("interconnection solve is ill-conditioned")
    Yx, Yw = sol[:, :n], sol[:, n:]
    A_f = A + Bb @ (P @ Yx)
    B_f = Bb @ (P @ Yw + E)
    C_f = F @ Yx
    D_f = F @ Yw
    return StateSpace(A_f, B_f, C_f, D_f)


# ------------------------------------------------------------ frequency grids

class FrequencyGrid:
    """Sorted strictly-positive frequencies in rad/s."""

    __slots__ = ("omegas",)

    def __init__(self, omegas):
        w = np.asarray(omegas, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("grid must be a non-empty 1-d array")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("grid frequencies must be finite and > 0")
        if np.any(np.diff(w) <= 0):
            raise ValueError("grid frequencies must be strictly increasing")
        w.setflags(write=False)
        self.omegas = w

    @classmethod
    def log(cls, lo: float = 1e-2, hi: float = 1e3, n: int = 400) -> "FrequencyGrid":
        return cls(np.geomspace(lo, hi, n))

    def with_inserted(self, omega: float) -> "FrequencyGrid":
        """New grid containing ``omega``; unchanged if already present."""
        if self.contains(omega):
            return self
        return FrequencyGrid(np.sort(np.append(self.omegas, float(omega))))

    def contains(self, omega: float, rtol: float = 1e-9) -> bool:
        return bool(np.any(np.abs(self.omegas - omega) <= rtol * omega))

    def __len__(self):
        return self.omegas.size

    def __eq__(self, other):
        return isinstance(other, FrequencyGrid) and \
            self.omegas.shape == other.omegas.shape and \
            bool(np.all(self.omegas == other.omegas))

    def __repr__(self):
        return (f"FrequencyGrid({self.omegas.size} points, "
                f"[{self.omegas[0]:g}, {self.omegas[-1]:g}] rad/s)")


@dataclass(frozen=True)
class FrequencyResponse:
    grid: FrequencyGrid
    samples: np.ndarray  # (n_omega, p, m) complex

    def __post_init__(self):
        if self.samples.shape[0] != len(self.grid):
            raise ValueError("one sample per grid point required")

    def sigma_max(self) -> np.ndarray:
        """Largest singular value per grid point."""
        return sigma_bar(self.samples)


def sigma_bar(samples: np.ndarray) -> np.ndarray:
    """Largest singular value of each matrix in a stacked array (..., p, m)."""
    if samples.shape[-1] == 0 or samples.shape[-2] == 0:
        return np.zeros(samples.shape[:-2])
    return np.linalg.svd(samples, compute_uv=False)[..., 0]


# ----------------------------------------------------------------- operations

def freq_response(ss: StateSpace, grid: FrequencyGrid) -> FrequencyResponse:
    """Exact complex response C (jw I - A)^{-1} B + D on the grid."""
    if ss.n > 0:
        dist = np.abs(1j * grid.omegas[:, None] - ss.poles[None, :])
        if dist.min() < _RESONANCE_TOL:
            k = int(np.argmin(dist.min(axis=1)))
            raise ResonantPole(
                f"grid point {grid.omegas[k]:g} rad/s coincides with a pole")
    samples = kernels.freq_sweep(ss.A, ss.B, ss.C, ss.D, grid.omegas)
    return FrequencyResponse(grid, samples)


def is_stable(ss: StateSpace, margin: float = 0.0) -> bool:
    """True iff every eigenvalue satisfies Re(lambda) < -margin."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if ss.n == 0:
        return True
    return bool(np.max(ss.poles.real) < -margin)


def _require_stable(ss: StateSpace):
    if ss.n and np.max(ss.poles.real) >= 0.0:
        raise UnstableSystem(
            f"system has an eigenvalue with Re = {np.max(ss.poles.real):g} >= 0")


def hinf_sampled(ss: StateSpace, grid: FrequencyGrid) -> float:
    """max_k sigma_max(G(j w_k)); a lower bound of the true H-infinity norm."""
    _require_stable(ss)
    return float(np.max(freq_response(ss, grid).sigma_max()))


def _sigma_at(ss: StateSpace, omegas) -> np.ndarray:
    resp = kernels.freq_sweep(ss.A, ss.B, ss.C, ss.D, np.asarray(omegas, dtype=float))
    return sigma_bar(resp)


def hinf_bisection(ss: StateSpace, tol: float = 1e-6):
    """H-infinity norm via imaginary-axis eigenvalues of the Hamiltonian pencil.

    Returns ``(gamma, omega_peak)`` with ``gamma`` within relative ``tol`` of
    the true norm. Lower bounds come from explicit frequency samples, the upper
    bound from the absence of imaginary Hamiltonian eigenvalues, with the
    sample frequencies refined at the midpoints of detected crossings.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    _require_stable(ss)
    sig_d = float(sigma_bar(ss.D.astype(complex)[None])[0]) if ss.D.size else 0.0
    if ss.n == 0 or ss.B.size == 0 or ss.C.size == 0:
        return sig_d, 0.0

    poles = ss.poles
    probes = [abs(p.imag) for p in poles if abs(p.imag) > 1e-12]
    probes += [abs(p) for p in poles]
    probes = sorted({w for w in probes if w > 1e-12})
    gamma_lo = max(sig_d, float(sigma_bar(ss.dc_gain().astype(complex)[None])[0]))
    omega_peak = 0.0
    if probes:
        sig = _sigma_at(ss, probes)
        k = int(np.argmax(sig))
        if sig[k] > gamma_lo:
            gamma_lo = float(sig[k])
            omega_peak = probes[k]
    if gamma_lo <= 0.0:
        return 0.0, 0.0

    eps = tol / 2.0
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    m, p = ss.n_in, ss.n_out
    for _ in range(200):
        gamma = gamma_lo * (1.0 + 2.0 * eps)
        R = D.T @ D - gamma**2 * np.eye(m)
        S = D @ D.T - gamma**2 * np.eye(p)
        RiDtC = np.linalg.solve(R, D.T @ C)
        RiBt = np.linalg.solve(R, B.T)
        SiC = np.linalg.solve(S, C)
        H11 = A - B @ RiDtC
        H = np.block([[H11, -gamma * (B @ RiBt)],
                      [gamma * (C.T @ SiC), -H11.T]])
        ev = np.linalg.eigvals(H)
        on_axis = ev[np.abs(ev.real) <= 1e-7 * (1.0 + np.abs(ev))]
        freqs = np.sort(np.unique(on_axis.imag[on_axis.imag > 1e-12]))
        if freqs.size == 0:
            return gamma_lo * (1.0 + eps), omega_peak
        cands = list(freqs)
        cands += [math.sqrt(freqs[i] * freqs[i + 1]) for i in range(freqs.size - 1)]
        sig = _sigma_at(ss, cands)
        k = int(np.argmax(sig))
        if sig[k] <= gamma_lo * (1.0 + 1e-14):
            # grazing contact: the remaining gap is below 2 eps already
            return gamma_lo * (1.0 + eps), omega_peak
        gamma_lo = float(sig[k])
        omega_peak = float(cands[k])
    return gamma_lo * (1.0 + eps), omega_peak


@dataclass(frozen=True)
class Mode:
    """One oscillatory (or real) eigenmode."""

    eigenvalue: complex
    frequency: float       # |Im lambda|, rad/s
    damping_ratio: float   # -Re lambda / |lambda|


def modal_analysis(ss: StateSpace):
    """All modes of A; complex pairs are reported once (positive-Im member).

    Sorted by damping ratio ascending, then frequency.
    """
    if ss.n == 0:
        return []
    modes = []
    for lam in ss.poles:
        if lam.imag < 0:
            continue
        mag = abs(lam)
        zeta = -lam.real / mag if mag > 0 else 0.0
        modes.append(Mode(eigenvalue=complex(lam), frequency=abs(lam.imag),
                          damping_ratio=float(zeta)))
    modes.sort(key=lambda md: (md.damping_ratio, md.frequency))
    return modes


def simulate_step(ss: StateSpace, channel: int, magnitude: float,
                  dt: float, horizon: float):
    """Step response of one input channel, sampled every ``dt``.

    Fixed-step 4th-order integration; the internal step is halved until two
    successive runs agree to 1e-6, which controls the local error. Returns
    ``(t, y)`` with ``y`` of shape (len(t), n_out).
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be > 0")
    if not 0 <= channel < ss.n_in:
        raise ValueError(f"input channel {channel} out of range")
    n_samples = int(round(horizon / dt))
    t = np.arange(n_samples + 1) * dt
    b = ss.B[:, channel] * magnitude
    d = ss.D[:, channel] * magnitude
    if ss.n == 0:
        y = np.tile(d, (n_samples + 1, 1))
        return t, y

    def run(n_sub):
        xs = kernels.lti_step_states(ss.A, b, np.zeros(ss.n), dt / n_sub,
                                     n_sub, n_samples)
        return xs @ ss.C.T + d

    y_prev = run(1)
    for k in range(1, 22):
        y = run(2 ** k)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > 1e12:
            raise UnstableBlowup("output exceeded 1e12 during simulation")
        if np.all(np.isfinite(y_prev)) and np.max(np.abs(y - y_prev)) <= 1e-6:
            return t, y
        y_prev = y
    return t, y_prev

"""Frequency-sampled structured H-infinity parameter tuning under box constraints.

Minimizes ``max_k sigma_max(G(K, j w_k))`` over tunable parameters with a
projected-subgradient descent on a log-sum-exp smoothing of the sampled
objective. Any step that destabilizes the system at the guard margin is
rejected, so every accepted iterate is stabilizing. On inner convergence the
true norm peak is located by Hamiltonian bisection and, when the sampling grid
misses it, the peak frequency is inserted and optimization continues.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InitialUnstable
from .lti import (
    BlockDiagram,
    FrequencyGrid,
    Parameter,
    StateSpace,
    assemble,
    hinf_bisection,
    is_stable,
    sigma_bar,
)
from . import kernels

_FD_REL_STEP = 1e-6


class TunableSystem:
    """Interface consumed by :func:`tune`: a parameter-evaluable system."""

    def tunables(self):
        raise NotImplementedError

    def state_space(self, assignment) -> StateSpace:
        raise NotImplementedError

    def freq_samples(self, assignment, omegas) -> np.ndarray:
        """Complex response stack (n_omega, p, m) at the given parameters."""
        ss = self.state_space(assignment)
        return kernels.freq_sweep(ss.A, ss.B, ss.C, ss.D, omegas)


class DiagramSystem(TunableSystem):
    """A block diagram exposing all its external inputs/outputs as channels."""

    def __init__(self, diagram: BlockDiagram):
        self.diagram = diagram

    def tunables(self):
        return self.diagram.tunables()

    def state_space(self, assignment) -> StateSpace:
        return assemble(self.diagram, assignment)


class FrozenSystem:
    """A tunable system bound to a fixed parameter assignment."""

    def __init__(self, system, assignment):
        self.system = system
        self.assignment = dict(assignment) if assignment is not None else None

    def freq_samples(self, omegas) -> np.ndarray:
        return self.system.freq_samples(self.assignment, omegas)

    def state_space(self) -> StateSpace:
        return self.system.state_space(self.assignment)


class DifferenceSystem(TunableSystem):
    """Error system ``G(K) - G_ref`` on shared channels.

    Used for model matching and structured model reduction. The stability
    guard applies to the tunable side; the reference side is fixed.
    """

    def __init__(self, system: TunableSystem, reference: FrozenSystem):
        self.system = system
        self.reference = reference

    def tunables(self):
        return self.system.tunables()

    def state_space(self, assignment) -> StateSpace:
        return self.system.state_space(assignment)

    def freq_samples(self, assignment, omegas) -> np.ndarray:
        a = self.system.freq_samples(assignment, omegas)
        b = self.reference.freq_samples(omegas)
        if a.shape != b.shape:
            raise DimensionMismatch(
                f"channel dimensions differ: {a.shape[1:]} vs {b.shape[1:]}")
        return a - b


@dataclass
class TuningProblem:
    system: TunableSystem
    grid: FrequencyGrid
    margin: float = 1e-4          # stability guard on Re(lambda)
    max_iters: int = 500
    max_backtracks: int = 40
    max_refinements: int = 10


@dataclass
class TuningResult:
    K_opt: dict
    gamma: float                  # sampled norm at K_opt on the refined grid
    gamma_trace: list
    status: str                   # converged | iteration-limit | stalled
    refined_grid: FrequencyGrid
    n_iters: int = 0
    history: list = field(default_factory=list)


def _vec(tunables, assignment):
    return np.array([float(assignment[p.name]) for p in tunables])


def _assignment(base, tunables, x):
    out = dict(base)
    for p, v in zip(tunables, x):
        out[p.name] = float(v)
    return out


def _fd_responses(system, base, tunables, x, omegas):
    """Central finite differences of the frequency response w.r.t. tunables."""
    derivs = []
    for q, p in enumerate(tunables):
        h = _FD_REL_STEP * max(1.0, abs(x[q]))
        xp = x.copy()
        xp[q] += h
        xm = x.copy()
        xm[q] -= h
        sp = system.freq_samples(_assignment(base, tunables, xp), omegas)
        sm = system.freq_samples(_assignment(base, tunables, xm), omegas)
        derivs.append((sp - sm) / (2.0 * h))
    return derivs


def _sigma_and_pairs(samples):
    """sigma_max per matrix plus leading singular pairs (u, v)."""
    if samples.shape[-1] == 0 or samples.shape[-2] == 0:
        z = np.zeros(samples.shape[0])
        return z, np.zeros((samples.shape[0], samples.shape[1])), \
            np.zeros((samples.shape[0], samples.shape[2]))
    U, S, Vh = np.linalg.svd(samples)
    return S[:, 0], U[:, :, 0], Vh[:, 0, :].conj()


def sigma_subgradient(problem: TuningProblem, assignment, omega: float) -> np.ndarray:
    """Gradient of sigma_max(G(K, j omega)) over the tunables.

    Uses d sigma / dK_q = Re(u* (dG/dK_q) v) with (u, v) the leading singular
    pair; dG/dK_q comes from central differences of the frequency response.
    When sigma_max is degenerate this is still a valid subgradient element.
    """
    tunables = problem.system.tunables()
    x = _vec(tunables, assignment)
    omegas = np.array([float(omega)])
    samples = problem.system.freq_samples(assignment, omegas)
    _, u, v = _sigma_and_pairs(samples)
    derivs = _fd_responses(problem.system, assignment, tunables, x, omegas)
    g = np.empty(len(tunables))
    for q, dG in enumerate(derivs):
        g[q] = np.real(np.conj(u[0]) @ dG[0] @ v[0])
    return g


def _grad_smoothed(samples, derivs, temperature):
    """Gradient of T*logsumexp(sigma/T) and the objective value."""
    sig, u, v = _sigma_and_pairs(samples)
    smax = float(np.max(sig))
    z = (sig - smax) / temperature
    w = np.exp(z)
    w /= w.sum()
    phi = smax + temperature * np.log(np.sum(np.exp(z)))
    g = np.empty(len(derivs))
    for q, dG in enumerate(derivs):
        dsig = np.real(np.einsum("wp,wpm,wm->w", np.conj(u), dG, v))
        g[q] = float(np.dot(w, dsig))
    return phi, g, sig, smax


def tune(problem: TuningProblem, K0: dict) -> TuningResult:
    """Minimize the sampled H-infinity norm over the problem's tunables.

    ``gamma_trace`` records the sampled norm at accepted steps and is
    non-increasing by construction: a candidate step must both satisfy an
    Armijo condition on the smoothed objective and not increase the sampled
    maximum. Stalls halve the smoothing temperature down to a floor, after
    which the grid is refined against the bisection oracle.
    """
    tunables = problem.system.tunables()
    if not tunables:
        raise ValueError("problem has no tunable parameters")
    for p in tunables:
        if p.name not in K0:
            raise ValueError(f"K0 misses tunable parameter {p.name!r}")
        if not p.lower <= K0[p.name] <= p.upper:
            raise ValueError(f"K0[{p.name!r}] outside bounds")
    lb = np.array([p.lower for p in tunables])
    ub = np.array([p.upper for p in tunables])
    # descent runs in box-normalized coordinates so parameters of very
    # different magnitudes (gains vs time constants) move at comparable rates
    span = np.maximum(ub - lb, 1e-12)
    base = dict(K0)
    x = _vec(tunables, K0)
    grid = problem.grid

    ss = problem.system.state_space(_assignment(base, tunables, x))
    if not is_stable(ss, problem.margin):
        raise InitialUnstable("initial parameterization not stable at guard margin")

    samples = problem.system.freq_samples(_assignment(base, tunables, x), grid.omegas)
    sig = sigma_bar(samples)
    gmax = float(np.max(sig))
    trace = [gmax]
    history = [dict(gamma=gmax, omega=float(grid.omegas[int(np.argmax(sig))]))]

    if gmax <= 0.0:
        return TuningResult(_assignment(base, tunables, x), gmax, trace,
                            "converged", grid, 0, history)

    gamma0 = gmax
    temperature = 0.1 * gamma0
    t_floor = 1e-6 * gamma0
    step = 0.1
    refinements = 0
    status = "iteration-limit"
    accepted_any = False

    it = 0
    while it < problem.max_iters:
        it += 1
        derivs = _fd_responses(problem.system, base, tunables, x, grid.omegas)
        phi, g, sig, gmax = _grad_smoothed(samples, derivs, temperature)
        g_z = g * span                      # gradient in normalized coordinates
        gnorm = float(np.linalg.norm(g_z))

        accepted = False
        if gnorm > 0.0:
            d = -(g_z / gnorm) * span       # unit normalized step, box units
            t = step
            for _ in range(problem.max_backtracks):
                x_new = np.clip(x + t * d, lb, ub)
                if np.allclose(x_new, x, rtol=0, atol=1e-300):
                    t *= 0.5
                    continue
                cand = _assignment(base, tunables, x_new)
                ss_new = problem.system.state_space(cand)
                if not is_stable(ss_new, problem.margin):
                    t *= 0.5
                    continue
                s_new = problem.system.freq_samples(cand, grid.omegas)
                sig_new = sigma_bar(s_new)
                gmax_new = float(np.max(sig_new))
                predicted = float(np.dot(g, x - x_new))
                phi_new = float(
                    gmax_new + temperature * np.log(
                        np.sum(np.exp((sig_new - gmax_new) / temperature))))
                if phi_new <= phi - 1e-4 * predicted and gmax_new <= gmax:
                    x = x_new
                    samples = s_new
                    gmax = gmax_new
                    accepted = True
                    accepted_any = True
                    step = 2.0 * t
                    if gmax <= trace[-1]:
                        trace.append(gmax)
                    history.append(dict(
                        gamma=gmax,
                        omega=float(grid.omegas[int(np.argmax(sig_new))])))
                    break
                t *= 0.5
        if accepted:
            continue

        # no acceptable step at this temperature
        if temperature > t_floor:
            temperature = max(temperature * 0.5, t_floor)
            step = max(step * 0.5, 1e-12)
            continue

        # inner convergence: compare with the bisection oracle and refine
        ss_cur = problem.system.state_space(_assignment(base, tunables, x))
        gamma_true, omega_peak = hinf_bisection(ss_cur, tol=1e-4)
        gap = (gamma_true - gmax) / gamma_true if gamma_true > 0 else 0.0
        if refinements < problem.max_refinements and omega_peak > 0.0 \
                and not grid.contains(omega_peak) and gap > 0.005:
            grid = grid.with_inserted(omega_peak)
            refinements += 1
            samples = problem.system.freq_samples(
                _assignment(base, tunables, x), grid.omegas)
            sig = sigma_bar(samples)
            gmax = float(np.max(sig))
            temperature = 0.1 * max(gmax, 1e-300)
            step = 0.1
            continue
        status = "converged"
        break

    if not accepted_any and status != "iteration-limit":
        status = "stalled"
    K_opt = _assignment(base, tunables, x)
    return TuningResult(K_opt, gmax, trace, status, grid, it, history)


def matching_objective(detailed: TunableSystem, reference: FrozenSystem,
                       assignment, grid: FrequencyGrid) -> float:
    """max over the grid of sigma_max(G_detailed(K, jw) - G_reference(jw))."""
    a = detailed.freq_samples(assignment, grid.omegas)
    b = reference.freq_samples(grid.omegas)
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"channel dimensions differ: {a.shape[1:]} vs {b.shape[1:]}")
    return float(np.max(sigma_bar(a - b)))

"""Hierarchical tuning loop: reduce, coordinate, match, exchange, evaluate.

Subsystem-operator (SO) side: decoupled pre-tuning, structured aggregation of
a subsystem into a single equivalent machine with one controller set, fitting
of the aggregate (model reduction), model matching against the optimized
reference, and discrepancy sampling. Coordinator (SC) side: tuning of the
coupled reduced model, exact reconstruction of the detailed coupled response
from reduced responses plus exchanged discrepancies, and the per-iteration
improvement bookkeeping. Coordinator-side entry points only consume reduced
models, parameter vectors, discrepancy samples and the coupling matrix; no
detailed subsystem data crosses that boundary.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySubsystem,
    GridMismatch,
    InitialReducedUnstable,
)
from .lti import FrequencyGrid, Parameter, StateSpace, is_stable, sigma_bar
from .power.coupling import CoupledSystem, CouplingMatrix, couple, eq9_closure
from .power.network import Branch, Bus, Network
from .power.prosumers import (
    Machine,
    StaticProsumer,
    avr_diagram,
    pss_diagram,
    tgov1_diagram,
)
from .power.subsystem import SubsystemModel, SubsystemSpec, equilibrium, make_subsystem
from .tuner import (
    DifferenceSystem,
    FrozenSystem,
    TunableSystem,
    TuningProblem,
    TuningResult,
    tune,
)


def default_assignment(tunables):
    return {p.name: p.value for p in tunables}


class SubsystemChannelSystem(TunableSystem):
    """Tunable-system view of one subsystem's channels."""

    def __init__(self, model: SubsystemModel, kind: str):
        self.model = model
        self.kind = kind

    def tunables(self):
        return self.model.tunables()

    def state_space(self, assignment) -> StateSpace:
        return self.model.with_params(assignment or {}).state_space("plain")

    def freq_samples(self, assignment, omegas) -> np.ndarray:
        return self.model.with_params(assignment or {}).response(omegas, self.kind)


@dataclass
class HierConfig:
    grid: FrequencyGrid
    margin: float = 1e-4
    rel_tol: float = 0.01
    max_iterations: int = 10
    pretune_iters: int = 150
    reduce_iters: int = 120
    coordinator_iters: int = 150
    match_iters: int = 120
    workers: str = "thread"          # serial | thread
    k_tilde_bound_scale: float = 1.0  # per-iteration tightening hook


@dataclass
class DiscrepancySamples:
    """Per-frequency channel-matrix discrepancies Delta(w) of one subsystem."""

    subsystem: str
    grid: FrequencyGrid
    deltas: np.ndarray          # (n_omega, n_yc + 1, n_wc + n_ws) complex
    stage: str = "post_matching"   # or post_reduction

    def __post_init__(self):
        if self.deltas.shape[0] != len(self.grid):
            raise GridMismatch("one discrepancy matrix per grid point required")


@dataclass
class IterationRecord:
    k: int
    grid: FrequencyGrid
    eps_init: np.ndarray
    eps_opt: np.ndarray
    alpha: np.ndarray
    sigma_detailed_init: np.ndarray
    sigma_detailed_opt: np.ndarray
    sigma_reduced_init: np.ndarray
    sigma_reduced_opt: np.ndarray
    norm_before: float
    norm_after: float
    improved: bool
    notes: tuple = ()


# ------------------------------------------------------------------- SO side

def decoupled_pretune(model: SubsystemModel, grid: FrequencyGrid,
                      margin: float = 1e-4, max_iters: int = 150):
    """Tune a subsystem in isolation on its disturbance-to-frequencies channel.

    Coupling inputs act as additional disturbances. Returns the tuned
    assignment (unchanged when the subsystem has no tunables) and the result.
    """
    tunables = model.tunables()
    if not tunables:
        return dict(model.K), None
    K0 = dict(default_assignment(tunables))
    K0.update(model.K)
    problem = TuningProblem(SubsystemChannelSystem(model, "pstar"), grid,
                            margin=margin, max_iters=max_iters)
    result = tune(problem, K0)
    return result.K_opt, result


@dataclass
class TemplateSkeleton:
    """Aggregate single-machine template of a subsystem, before fitting."""

    name: str
    machine_constants: dict
    n_cp: int
    n_ws: int
    f_hz: float
    base_mva: float
    ctl_init: dict          # controller parameter name -> (value, lo, hi, tunable)
    net_init: dict          # link name -> (value, lo, hi)

    @property
    def machine_id(self) -> str:
        return f"{self.name}_agg"


_R_CTL_BOUNDS = {
    "tgov.T_1": (0.05, 4.0), "tgov.T_2": (0.2, 8.0), "tgov.T_3": (0.5, 12.0),
    "tgov.D_t": (0.0, 2.0),
    "avr.T_r": (0.005, 0.2), "avr.T_C": (0.2, 6.0), "avr.T_B": (1.0, 20.0),
    "avr.T_A": (0.01, 0.5), "avr.K_e": (0.2, 3.0), "avr.T_e": (0.05, 2.0),
    "pss.T_s": (0.005, 0.1),
}


def aggregate_template(spec: SubsystemSpec) -> TemplateSkeleton:
    """Single equivalent machine plus one TGOV1/AVR/PSS controller set.

    Generator aggregation is analytic: inertias, damping and ratings add;
    reactances combine in parallel on the system base (and are stored on the
    aggregate machine base); open-circuit time constants are inertia-weighted
    means. Controller parameters are initialized at inertia-weighted means and
    fitted numerically afterwards.
    """
    if not spec.machines:
        raise EmptySubsystem(f"{spec.name}: no dynamic prosumers to aggregate")
    machines = spec.machines
    base = spec.network.base_mva
    J = np.array([m.J for m in machines])
    wts = J / J.sum()
    J_eq = float(J.sum())
    D_eq = float(sum(m.D for m in machines))
    rating_eq = float(sum(m.rating for m in machines))
    kind = "two_axis" if any(m.kind == "two_axis" for m in machines) else "swing"

    def x_parallel(attr):
        inv = 0.0
        for m in machines:
            x_sys = getattr(m, attr) * base / m.rating
            inv += 1.0 / x_sys
        return (1.0 / inv) * rating_eq / base

    def t_mean(attr):
        return float(sum(w * getattr(m, attr) for w, m in zip(wts, machines)))

    constants = dict(
        kind=kind, rating=rating_eq, J=J_eq, D=D_eq,
        xd=x_parallel("xd"), xq=x_parallel("xq"),
        xd_t=x_parallel("xd_t"), xq_t=x_parallel("xq_t"),
        Td0_t=t_mean("Td0_t"), Tq0_t=t_mean("Tq0_t"),
    )

    # controller parameter template: K-tilde bounds are the union of the
    # detailed bounds, fixed (R) parameters start at inertia-weighted means
    ctl_init = {}
    from .power.prosumers import TUNABLE_FIELDS, controller_diagram
    per_name = {}
    for w, m in zip(wts, machines):
        diag = controller_diagram(m)
        if diag is None:
            continue
        for p in diag.parameters():
            short = ".".join(p.name.split(".")[-2:])      # e.g. pss.K_S
            per_name.setdefault(short, []).append((w, p))
    for short, entries in per_name.items():
        wsum = sum(w for w, _ in entries)
        value = sum(w * p.value for w, p in entries) / wsum
        ctl, pname = short.split(".")
        tunable = pname in TUNABLE_FIELDS.get(ctl, ())
        if tunable:
            lo = min(p.lower for _, p in entries)
            hi = max(p.upper for _, p in entries)
        else:
            lo, hi = _R_CTL_BOUNDS.get(short, (value * 0.2 + 1e-6, value * 5.0 + 1e-3))
            lo, hi = min(lo, value), max(hi, value)
        ctl_init[short] = (float(value), float(lo), float(hi), tunable)

    # aggregate link susceptances: start from the admittance incident to the
    # border/disturbance buses of the detailed network
    from .power.network import build_admittance
    _, B = build_admittance(spec.network)
    net_init = {}
    for t, bus in enumerate(spec.coupling_buses):
        i = spec.network.bus_index(bus)
        b0 = float(abs(B[i, i]))
        net_init[f"link.cp{t}"] = (max(b0, 0.5), 0.2, max(4.0 * b0, 60.0))
    for t, s in enumerate(spec.disturbances()):
        i = spec.network.bus_index(s.bus)
        b0 = float(abs(B[i, i]))
        net_init[f"link.ws{t}"] = (max(b0, 0.5), 0.2, max(4.0 * b0, 60.0))

    return TemplateSkeleton(
        name=spec.name, machine_constants=constants, n_cp=len(spec.coupling_buses),
        n_ws=len(spec.disturbances()), f_hz=spec.f_hz, base_mva=base,
        ctl_init=ctl_init, net_init=net_init)


def _template_spec(skel: TemplateSkeleton, ctl_vals: dict, net_vals: dict,
                   tunable_mode: str) -> SubsystemSpec:
    """Materialize the aggregate spec for given parameter values.

    ``tunable_mode``: 'fit' marks every controller parameter tunable (joint
    reduction over R and K-tilde); 'frozen' leaves only the K-tilde set
    tunable, with R baked in as plain values.
    """
    mid = skel.machine_id
    from .power.prosumers import TUNABLE_FIELDS

    unlocked = tunable_mode == "fit"

    def ctl_args(ctl):
        args = {}
        for short, (value, lo, hi, tunable) in skel.ctl_init.items():
            c, pname = short.split(".")
            if c != ctl:
                continue
            v = ctl_vals.get(f"{mid}.{short}", value)
            if tunable_mode == "fit" or tunable:
                args[pname] = (v, min(lo, v), max(hi, v), True)
            else:
                args[pname] = v
        return args

    tgov = tgov1_diagram(mid, unlocked=unlocked, **ctl_args("tgov")) if any(
        s.startswith("tgov.") for s in skel.ctl_init) else None
    avr = avr_diagram(mid, unlocked=unlocked, **ctl_args("avr")) if any(
        s.startswith("avr.") for s in skel.ctl_init) else None
    pss = pss_diagram(mid, unlocked=unlocked, **ctl_args("pss")) if any(
        s.startswith("pss.") for s in skel.ctl_init) else None
    machine = Machine(id=mid, bus="agg", P=0.0, Vset=1.0,
                      tgov=tgov, avr=avr, pss=pss, **skel.machine_constants)

    buses = [Bus("agg", "slack")]
    branches = []
    statics = []
    cps = []
    for t in range(skel.n_cp):
        buses.append(Bus(f"cp{t}", "PQ"))
        b = net_vals.get(f"link.cp{t}", skel.net_init[f"link.cp{t}"][0])
        branches.append(Branch("agg", f"cp{t}", 0.0, float(b)))
        cps.append(f"cp{t}")
    for t in range(skel.n_ws):
        buses.append(Bus(f"ws{t}", "PQ"))
        b = net_vals.get(f"link.ws{t}", skel.net_init[f"link.ws{t}"][0])
        branches.append(Branch("agg", f"ws{t}", 0.0, float(b)))
        statics.append(StaticProsumer(f"ws{t}_inj", f"ws{t}", 0.0, 0.0,
                                      is_disturbance=True))
    net = Network(buses=buses, branches=branches, base_mva=skel.base_mva)
    return SubsystemSpec(name=f"{skel.name}_red", network=net, machines=(machine,),
                         statics=tuple(statics), coupling_buses=tuple(cps),
                         f_hz=skel.f_hz)


class _TemplateFit(TunableSystem):
    """Joint (R, K-tilde) evaluation of the aggregate template channels.

    Controller parameters reuse the plant linearization; changing a link
    susceptance rebuilds it (cached per value tuple).
    """

    def __init__(self, skel: TemplateSkeleton):
        self.skel = skel
        mid = skel.machine_id
        self._net_params = [
            Parameter(f"{mid}.{name}", v, lo, hi, tunable=True)
            for name, (v, lo, hi) in skel.net_init.items()]
        spec0 = _template_spec(skel, {}, {}, "fit")
        self._ctl_params = spec0.tunables()
        self._cache = {}

    def tunables(self):
        return self._net_params + self._ctl_params

    def split(self, assignment):
        mid = self.skel.machine_id
        net_vals = {}
        for name in self.skel.net_init:
            qual = f"{mid}.{name}"
            if assignment and qual in assignment:
                net_vals[name] = float(assignment[qual])
        return net_vals

    def _model(self, assignment) -> SubsystemModel:
        net_vals = self.split(assignment)
        key = tuple(sorted(net_vals.items()))
        if key not in self._cache:
            spec = _template_spec(self.skel, {}, net_vals, "fit")
            eq = equilibrium(spec)
            self._cache[key] = make_subsystem(spec, eq)
            if len(self._cache) > 64:
                self._cache.pop(next(iter(self._cache)))
        base = self._cache[key]
        ctl = {k: v for k, v in (assignment or {}).items()
               if not k.split(".", 1)[-1].startswith("link.")}
        return base.with_params(ctl) if ctl else base

    def state_space(self, assignment) -> StateSpace:
        return self._model(assignment).state_space("plain")

    def freq_samples(self, assignment, omegas) -> np.ndarray:
        return self._model(assignment).response(omegas, "cp")


class ReducedModel:
    """Fitted fixed-structure aggregate with frozen R and tunable K-tilde.

    The handle exposes only the K-tilde parameters; the fitted R values are
    baked into the template and cannot be perturbed through ``with_params``
    (parameter assignments are filtered to the tunable set).
    """

    def __init__(self, skel: TemplateSkeleton, R: dict, k_tilde_values: dict,
                 name: str = None):
        self.skel = skel
        self.R = dict(R)
        self.name = name or skel.name
        ctl_R = {k: v for k, v in R.items() if ".link." not in k}
        net_R = {k.split(".", 1)[1]: v for k, v in R.items() if ".link." in k}
        spec = _template_spec(skel, ctl_R, net_R, "frozen")
        eq = equilibrium(spec)
        self._inner = make_subsystem(spec, eq, None)
        allowed = {p.name for p in self._inner.tunables()}
        k_tilde_values = {k: v for k, v in k_tilde_values.items() if k in allowed}
        if k_tilde_values:
            self._inner = self._inner.with_params(k_tilde_values)
        self.K_tilde = dict(self._inner.K)

    # SubsystemModel protocol used by couple()
    @property
    def channels(self):
        return self._inner.channels

    @property
    def M_s(self):
        return self._inner.M_s

    @property
    def spec(self):
        return self._inner.spec

    def tunables(self):
        return self._inner.tunables()

    def state_space(self, kind="dup") -> StateSpace:
        return self._inner.state_space(kind)

    def response(self, omegas, kind="cp") -> np.ndarray:
        return self._inner.response(omegas, kind)

    def with_params(self, K) -> "ReducedModel":
        allowed = {p.name for p in self.tunables()}
        filtered = {k: v for k, v in K.items() if k in allowed}
        out = ReducedModel.__new__(ReducedModel)
        out.skel = self.skel
        out.R = self.R
        out.name = self.name
        out._inner = self._inner.with_params(filtered)
        out.K_tilde = dict(out._inner.K)
        return out

    def frozen_reference(self) -> FrozenSystem:
        return FrozenSystem(SubsystemChannelSystem(self._inner, "cp"), self._inner.K)

    def to_message(self, iteration: int = 0) -> dict:
        """Serializable reduced-model payload (aggregate data only)."""
        ctl_R = {k: v for k, v in self.R.items() if ".link." not in k}
        links = {k.split(".link.", 1)[1]: v for k, v in self.R.items()
                 if ".link." in k}
        k_tilde = {}
        for p in self.tunables():
            k_tilde[p.name] = dict(value=self.K_tilde.get(p.name, p.value),
                                   lower=p.lower, upper=p.upper)
        return dict(
            kind="ReducedModelMsg", subsystem=self.name, iteration=iteration,
            aggregate=dict(self.skel.machine_constants),
            n_cp=self.skel.n_cp, n_ws=self.skel.n_ws, f_hz=self.skel.f_hz,
            base_mva=self.skel.base_mva,
            fixed_controller_params={k.split(".", 1)[1]: v for k, v in ctl_R.items()},
            link_susceptances=links,
            k_tilde=k_tilde,
        )

    @classmethod
    def from_message(cls, msg: dict) -> "ReducedModel":
        name = msg["subsystem"]
        ctl_init = {}
        from .power.prosumers import TUNABLE_FIELDS
        for short, payload in msg["k_tilde"].items():
            s = ".".join(short.split(".")[-2:])
            ctl_init[s] = (payload["value"], payload["lower"], payload["upper"], True)
        for short, value in msg["fixed_controller_params"].items():
            ctl_init[short] = (value, value, value, False)
        net_init = {f"link.{k}": (v, v, v) for k, v in msg["link_susceptances"].items()}
        skel = TemplateSkeleton(
            name=name, machine_constants=dict(msg["aggregate"]),
            n_cp=msg["n_cp"], n_ws=msg["n_ws"], f_hz=msg["f_hz"],
            base_mva=msg["base_mva"], ctl_init=ctl_init, net_init=net_init)
        mid = skel.machine_id
        R = {f"{mid}.{k}": v for k, v in msg["fixed_controller_params"].items()}
        R.update({f"{mid}.link.{k}": v for k, v in msg["link_susceptances"].items()})
        k_vals = {k: payload["value"] for k, payload in msg["k_tilde"].items()}
        return cls(skel, R, k_vals, name=name)


@dataclass
class ReduceResult:
    reduced: ReducedModel
    k_tilde_init: dict
    error_per_omega: np.ndarray
    error_norm: float
    poor: bool
    tuning: TuningResult


def reduce_subsystem(detailed: SubsystemModel, skel: TemplateSkeleton,
                     K_init: dict, grid: FrequencyGrid,
                     margin: float = 1e-4, max_iters: int = 120) -> ReduceResult:
    """Fit the aggregate template to the detailed channel response at K_init.

    Solves the parameter-matching problem over the joint vector (R, K-tilde)
    with the same sampled-norm tuner on the error system, then freezes R. A
    final error above half the detailed response norm is flagged as poor but
    not fatal.
    """
    fit = _TemplateFit(skel)
    det_bound = detailed.with_params(K_init) if K_init else detailed
    reference = FrozenSystem(SubsystemChannelSystem(det_bound, "cp"), det_bound.K)
    diff = DifferenceSystem(fit, reference)
    K0 = default_assignment(fit.tunables())
    problem = TuningProblem(diff, grid, margin=margin, max_iters=max_iters)
    result = tune(problem, K0)

    fitted = result.K_opt
    mid = skel.machine_id
    k_names = {p.name for p in _template_spec(skel, {}, {}, "frozen").tunables()}
    R = {}
    k_vals = {}
    for name, value in fitted.items():
        if name in k_names:
            k_vals[name] = value
        else:
            R[name] = value
    reduced = ReducedModel(skel, R, k_vals)

    err = sigma_bar(diff.freq_samples(fitted, grid.omegas))
    det_norm = float(np.max(sigma_bar(
        reference.freq_samples(grid.omegas))))
    err_norm = float(np.max(err))
    return ReduceResult(reduced=reduced, k_tilde_init=dict(reduced.K_tilde),
                        error_per_omega=err, error_norm=err_norm,
                        poor=bool(err_norm > 0.5 * det_norm), tuning=result)


def match_subsystem(detailed: SubsystemModel, reduced: ReducedModel,
                    K_start: dict, grid: FrequencyGrid, margin: float = 1e-4,
                    max_iters: int = 120):
    """Model matching: tune detailed parameters toward the reduced reference.

    Returns (K_opt, TuningResult); a stalled status mirrors the legal outcome
    that matching cannot decrease the difference.
    """
    tunables = detailed.tunables()
    reference = reduced.frozen_reference()
    if not tunables:
        return dict(K_start), None
    system = DifferenceSystem(SubsystemChannelSystem(detailed, "cp"), reference)
    problem = TuningProblem(system, grid, margin=margin, max_iters=max_iters)
    result = tune(problem, dict(K_start))
    return result.K_opt, result


def discrepancy(detailed: SubsystemModel, K_opt: dict, reduced: ReducedModel,
                grid: FrequencyGrid, stage: str = "post_matching") -> DiscrepancySamples:
    """Delta(w) = G(K_opt, jw) - G_tilde(K_tilde, jw) on the shared grid."""
    det = detailed.with_params(K_opt) if K_opt else detailed
    a = det.response(grid.omegas, "cp")
    b = reduced.response(grid.omegas, "cp")
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"channel dimensions differ: {a.shape[1:]} vs {b.shape[1:]}")
    return DiscrepancySamples(subsystem=detailed.name, grid=grid,
                              deltas=a - b, stage=stage)


# ------------------------------------------------------------------- SC side

def coordinator_tune(reduced: "list[ReducedModel]", coupling: CouplingMatrix,
                     grid: FrequencyGrid, margin: float = 1e-4,
                     max_iters: int = 150):
    """Structured tuning of the coupled reduced model over all K-tilde.

    Returns (per-subsystem K-tilde assignments, alpha(w) samples, sigma curves
    before/after, TuningResult-or-None).
    """
    from .power.coupling import CoupledChannelSystem
    coupled = couple(list(reduced), coupling)
    sigma_init = sigma_bar(coupled.formula_samples(grid.omegas, "coi"))
    tunables = coupled.tunables()
    if not tunables:
        alpha = np.zeros(len(grid))
        return [dict(r.K_tilde) for r in reduced], alpha, sigma_init, sigma_init, None
    if not is_stable(coupled.state_space("coi"), margin):
        raise InitialReducedUnstable(
            "coupled reduced model unstable at the initial K-tilde")
    system = CoupledChannelSystem(coupled, outputs="coi")
    K0 = {}
    for r in reduced:
        K0.update(r.K_tilde)
    for p in tunables:
        K0.setdefault(p.name, p.value)
    problem = TuningProblem(system, grid, margin=margin, max_iters=max_iters)
    result = tune(problem, K0)
    coupled_opt = coupled.with_params(result.K_opt)
    sigma_opt = sigma_bar(coupled_opt.formula_samples(grid.omegas, "coi"))
    alpha = sigma_opt - sigma_init
    per_sub = []
    for r in reduced:
        names = {p.name for p in r.tunables()}
        per_sub.append({k: v for k, v in result.K_opt.items() if k in names})
    return per_sub, alpha, sigma_init, sigma_opt, result


def reconstruct_detailed_norm(reduced: "list[ReducedModel]",
                              k_tilde: "list[dict]",
                              deltas: "list[DiscrepancySamples]",
                              coupling: CouplingMatrix, grid: FrequencyGrid):
    """Detailed coupled sigma-max samples from reduced responses plus deltas.

    Substitutes G_i = G_tilde_i + Delta_i channel-wise into the coupled
    closure formula; no detailed model structure is needed. Returns
    (sigma(w) array, sampled norm).
    """
    blocks = []
    for r, kt, d in zip(reduced, k_tilde, deltas):
        if not (len(d.grid) == len(grid) and np.array_equal(d.grid.omegas, grid.omegas)):
            raise GridMismatch(f"{d.subsystem}: discrepancy grid differs")
        model = r.with_params(kt) if kt else r
        resp = model.response(grid.omegas, "cp") + d.deltas
        ch = model.channels
        blocks.append(dict(
            Gcc=resp[:, :ch.n_yc, :ch.n_wc],
            Gpc=resp[:, ch.n_yc:, :ch.n_wc],
            Gps=resp[:, ch.n_yc:, ch.n_wc:],
            Gcs=resp[:, :ch.n_yc, ch.n_wc:],
        ))
    samples = eq9_closure(blocks, coupling.M)
    sig = sigma_bar(samples)
    return sig, float(np.max(sig))


def improvement_metrics(k: int, grid: FrequencyGrid,
                        sigma_detailed_init, sigma_reduced_init,
                        sigma_detailed_opt, sigma_reduced_opt,
                        notes=()) -> IterationRecord:
    """Per-iteration error terms and the norm-improvement condition.

    eps_init/eps_opt are the reduction/matching singular-value errors, alpha
    the coordinator's change on the reduced system. The identity
    sigma_opt = eps_opt + alpha - eps_init + sigma_init is checked pointwise.
    """
    arrays = [np.asarray(a, dtype=float) for a in
              (sigma_detailed_init, sigma_reduced_init,
               sigma_detailed_opt, sigma_reduced_opt)]
    if any(a.shape != (len(grid),) for a in arrays):
        raise GridMismatch("sigma samples must match the shared grid")
    sd_i, sr_i, sd_o, sr_o = arrays
    eps_init = sd_i - sr_i
    eps_opt = sd_o - sr_o
    alpha = sr_o - sr_i
    lhs = eps_opt - eps_init + alpha + sd_i
    ident = np.max(np.abs(lhs - sd_o))
    if ident > 1e-9 * max(1.0, float(np.max(np.abs(sd_o)))):
        raise AssertionError(f"improvement identity violated by {ident:.3e}")
    norm_before = float(np.max(sd_i))
    norm_after = float(np.max(sd_o))
    improved = bool(np.max(lhs) < norm_before)
    return IterationRecord(
        k=k, grid=grid, eps_init=eps_init, eps_opt=eps_opt, alpha=alpha,
        sigma_detailed_init=sd_i, sigma_detailed_opt=sd_o,
        sigma_reduced_init=sr_i, sigma_reduced_opt=sr_o,
        norm_before=norm_before, norm_after=norm_after, improved=improved,
        notes=tuple(notes))


# ----------------------------------------------------------------- full loop

@dataclass
class HierResult:
    K_final: "dict[str, dict]"          # subsystem name -> assignment
    K_pretune: "dict[str, dict]"
    records: "list[IterationRecord]"
    norm_pretune: float
    norm_final: float
    pretune_results: dict = field(default_factory=dict)
    failures: "list[str]" = field(default_factory=list)


def _run_parallel(config: HierConfig, jobs):
    if config.workers == "thread" and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=len(jobs)) as ex:
            futures = [ex.submit(fn, *args) for fn, args in jobs]
            return [f.result() for f in futures]
    return [fn(*args) for fn, args in jobs]


def hier_loop(specs: "list[SubsystemSpec]", coupling: CouplingMatrix,
              config: HierConfig, models: "list[SubsystemModel]" = None,
              pretune: bool = True) -> HierResult:
    """Full hierarchical loop over all subsystems.

    Runs decoupled pre-tuning, then iterates reduction, coordinator tuning,
    model matching, discrepancy exchange, reconstruction and the improvement
    test until the relative improvement falls below ``config.rel_tol`` or
    ``config.max_iterations`` is reached. Keeps the best (lowest reconstructed
    norm) accepted parameterization; a non-improving iteration never worsens
    the returned result. Reduction, matching and discrepancy sampling run
    per-subsystem in parallel workers; the coordinator step is a barrier.
    """
    grid = config.grid
    if models is None:
        models = [make_subsystem(s, equilibrium(s)) for s in specs]
    names = [s.name for s in specs]

    K_pre = {}
    pre_results = {}
    if pretune:
        outs = _run_parallel(config, [
            (decoupled_pretune, (m, grid, config.margin, config.pretune_iters))
            for m in models])
        for name, (K, res) in zip(names, outs):
            K_pre[name] = K
            pre_results[name] = res
    else:
        for name, m in zip(names, models):
            K0 = default_assignment(m.tunables())
            K0.update(m.K)
            K_pre[name] = K0
    models = [m.with_params(K_pre[n]) if K_pre[n] else m
              for n, m in zip(names, models)]

    # reconstructible baseline norm after pretune (direct evaluation)
    coupled0 = couple(models, coupling)
    sigma0 = sigma_bar(coupled0.formula_samples(grid.omegas, "coi"))
    norm_pretune = float(np.max(sigma0))

    skeletons = [aggregate_template(s) for s in specs]
    K_init = {n: dict(K_pre[n]) for n in names}
    best_K = {n: dict(K_pre[n]) for n in names}
    best_norm = norm_pretune
    records = []
    failures = []

    for k in range(1, config.max_iterations + 1):
        try:
            notes = []
            reds = _run_parallel(config, [
                (reduce_subsystem,
                 (m.with_params(K_init[n]), skel, K_init[n], grid,
                  config.margin, config.reduce_iters))
                for n, m, skel in zip(names, models, skeletons)])
            for n, rr in zip(names, reds):
                if rr.poor:
                    notes.append(f"{n}: reduction error above half the response norm")
            reduced = [rr.reduced for rr in reds]
            deltas_init = _run_parallel(config, [
                (discrepancy,
                 (m, K_init[n], rr.reduced, grid, "post_reduction"))
                for n, m, rr in zip(names, models, reds)])

            sig_det_init, _ = reconstruct_detailed_norm(
                reduced, [r.K_tilde for r in reduced], deltas_init, coupling, grid)

            kt_opt, alpha, sri, sro, coord_res = coordinator_tune(
                reduced, coupling, grid, config.margin, config.coordinator_iters)

            matched = _run_parallel(config, [
                (match_subsystem,
                 (m, rr.reduced.with_params(kt), K_init[n], grid,
                  config.margin, config.match_iters))
                for n, m, rr, kt in zip(names, models, reds, kt_opt)])
            K_opt = {n: out[0] for n, out in zip(names, matched)}
            for n, out in zip(names, matched):
                if out[1] is not None and out[1].status == "stalled":
                    notes.append(f"{n}: model matching could not decrease the error")

            deltas_opt = _run_parallel(config, [
                (discrepancy,
                 (m, K_opt[n], rr.reduced.with_params(kt), grid, "post_matching"))
                for n, m, rr, kt in zip(names, models, reds, kt_opt)])
            sig_det_opt, norm_after = reconstruct_detailed_norm(
                reduced, kt_opt, deltas_opt, coupling, grid)

            record = improvement_metrics(
                k, grid, sig_det_init, sri, sig_det_opt, sro,
                notes=notes)
            records.append(record)
        except Exception as exc:  # graceful abort with best-so-far
            failures.append(f"iteration {k}: {type(exc).__name__}: {exc}")
            break

        if norm_after < best_norm:
            best_norm = norm_after
            best_K = {n: dict(K_opt[n]) for n in names}
        K_init = {n: dict(K_opt[n]) for n in names}
        rel_gain = (record.norm_before - record.norm_after) / max(record.norm_before, 1e-300)
        if rel_gain < config.rel_tol:
            break

    return HierResult(K_final=best_K, K_pretune=K_pre, records=records,
                      norm_pretune=norm_pretune, norm_final=best_norm,
                      pretune_results=pre_results, failures=failures)

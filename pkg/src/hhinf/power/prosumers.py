"""Dynamic and static prosumer components and their controller block diagrams.

Controller structures are the standard TGOV1 turbine/governor, a
transducer / lead-lag / gain / exciter AVR with rate feedback, and a
gain / washout / double lead-lag / sensor-lag power system stabilizer.
Tunable parameters: the governor droop gain R_p; the AVR gain K_A and rate
feedback pair (K_fd, T_fd); every PSS parameter except the sensor time
constant T_s. All other parameters are fixed plant data.
"""

from dataclasses import dataclass, field

from ..lti import (
    BlockDiagram,
    Parameter,
    ParamRef,
    first_order_lag,
    gain,
    integrator,
    lead_lag,
    sum_junction,
    washout,
)

_GEN_KINDS = ("swing", "two_axis")

#: parameters allowed to carry a tunable flag, per controller kind
TUNABLE_FIELDS = {
    "tgov": ("R_p",),
    "avr": ("K_A", "K_fd", "T_fd"),
    "pss": ("K_S", "T_w", "T_1", "T_2", "T_3", "T_4"),
}


@dataclass(frozen=True)
class StaticProsumer:
    """Constant-power infeed; flagged ones act as disturbance inputs."""

    id: str
    bus: str
    P: float = 0.0
    Q: float = 0.0
    is_disturbance: bool = False


@dataclass(frozen=True)
class Machine:
    """Synchronous generator with attached controllers.

    Reactances and time constants are given on the machine base (``rating``
    MVA); the inertia ``J`` and damping ``D`` are already normalized for the
    swing equation ``J d(dw)/dt = P_m - P_e - D dw`` with power in p.u. on the
    system base and speed deviation in rad/s.
    """

    id: str
    bus: str
    kind: str = "two_axis"
    rating: float = 100.0
    J: float = 0.025
    D: float = 0.0
    xd: float = 1.8
    xq: float = 1.7
    xd_t: float = 0.3
    xq_t: float = 0.55
    Td0_t: float = 6.0
    Tq0_t: float = 0.8
    P: float = 0.0          # scheduled active injection, p.u. system base
    Vset: float = 1.0
    tgov: BlockDiagram = None
    avr: BlockDiagram = None
    pss: BlockDiagram = None

    def __post_init__(self):
        if self.kind not in _GEN_KINDS:
            raise ValueError(f"machine {self.id!r}: unknown kind {self.kind!r}")
        if self.J <= 0:
            raise ValueError(f"machine {self.id!r}: inertia must be > 0")
        if self.rating <= 0:
            raise ValueError(f"machine {self.id!r}: rating must be > 0")
        if self.pss is not None and self.avr is None:
            raise ValueError(f"machine {self.id!r}: a PSS requires an AVR")
        if self.avr is not None and self.kind == "swing":
            raise ValueError(
                f"machine {self.id!r}: the classical swing model has no field "
                "winding; an AVR requires the two-axis model")

    @property
    def n_gen_states(self) -> int:
        return 4 if self.kind == "two_axis" else 2

    def gen_state_names(self):
        base = [f"{self.id}.delta", f"{self.id}.domega"]
        if self.kind == "two_axis":
            base += [f"{self.id}.eq_t", f"{self.id}.ed_t"]
        return base


def _p(machine_id, ctl, name, spec, allowed, unlocked=False):
    """Parameter from a (value, lower, upper, tunable) tuple or bare float."""
    qual = f"{machine_id}.{ctl}.{name}"
    if isinstance(spec, (int, float)):
        return Parameter(qual, float(spec))
    value, lower, upper, tunable = spec
    if tunable and not unlocked and name not in allowed:
        raise ValueError(f"{qual}: parameter may not be tunable")
    return Parameter(qual, float(value), float(lower), float(upper), bool(tunable))


def tgov1_diagram(machine_id: str, R_p, T_1=0.5, T_2=2.1, T_3=7.0, D_t=0.0,
                  unlocked: bool = False) -> BlockDiagram:
    """TGOV1 turbine/governor: droop 1/R_p, valve lag, reheat lead-lag.

    Input ``domega_pu`` (p.u. speed deviation), output ``dp_m``.
    """
    allowed = TUNABLE_FIELDS["tgov"]
    p_R = _p(machine_id, "tgov", "R_p", R_p, allowed, unlocked)
    p_T1 = _p(machine_id, "tgov", "T_1", T_1, allowed, unlocked)
    p_T2 = _p(machine_id, "tgov", "T_2", T_2, allowed, unlocked)
    p_T3 = _p(machine_id, "tgov", "T_3", T_3, allowed, unlocked)
    p_Dt = _p(machine_id, "tgov", "D_t", D_t, allowed, unlocked)
    blocks = [
        gain(-1.0),                                              # 0 speed sign
        first_order_lag(ParamRef(p_R, invert=True), p_T1),       # 1 droop+valve
        lead_lag(1.0, p_T2, p_T3),                               # 2 turbine
        gain(p_Dt),                                              # 3 damping
        sum_junction(+1, -1),                                    # 4 output
    ]
    conns = [((0, 0), (1, 0)), ((1, 0), (2, 0)), ((2, 0), (4, 0)), ((3, 0), (4, 1))]
    return BlockDiagram(blocks, conns,
                        [("domega_pu", [(0, 0), (3, 0)])],
                        [("dp_m", (4, 0))])


def avr_diagram(machine_id: str, K_A, K_fd, T_fd, T_r=0.02, T_C=1.0, T_B=10.0,
                T_A=0.05, K_e=1.0, T_e=0.5, with_pss_input: bool = True,
                unlocked: bool = False) -> BlockDiagram:
    """AVR and exciter: transducer, lead-lag, gain lag, exciter, rate feedback.

    Chain 1/(1+sT_r) -> (1+sT_C)/(1+sT_B) -> K_A/(1+sT_A) -> 1/(K_e+sT_e) with
    stabilizing feedback s K_fd/(1+s T_fd) from the field voltage. The exciter
    is realized as an integrator loop so K_e and T_e stay independent
    parameters. Inputs ``dv_t`` (and ``dv_pss`` when present), output ``de_fd``.
    """
    allowed = TUNABLE_FIELDS["avr"]
    p_KA = _p(machine_id, "avr", "K_A", K_A, allowed, unlocked)
    p_Kfd = _p(machine_id, "avr", "K_fd", K_fd, allowed, unlocked)
    p_Tfd = _p(machine_id, "avr", "T_fd", T_fd, allowed, unlocked)
    p_Tr = _p(machine_id, "avr", "T_r", T_r, allowed, unlocked)
    p_TC = _p(machine_id, "avr", "T_C", T_C, allowed, unlocked)
    p_TB = _p(machine_id, "avr", "T_B", T_B, allowed, unlocked)
    p_TA = _p(machine_id, "avr", "T_A", T_A, allowed, unlocked)
    p_Ke = _p(machine_id, "avr", "K_e", K_e, allowed, unlocked)
    p_Te = _p(machine_id, "avr", "T_e", T_e, allowed, unlocked)
    err_signs = (+1, -1, -1) if with_pss_input else (-1, -1)
    blocks = [
        first_order_lag(1.0, p_Tr),                  # 0 transducer on dv_t
        sum_junction(*err_signs),                    # 1 error node
        lead_lag(1.0, p_TC, p_TB),                   # 2 dynamic gain reduction
        first_order_lag(p_KA, p_TA),                 # 3 regulator
        sum_junction(+1, -1),                        # 4 exciter summing node
        gain(ParamRef(p_Te, invert=True)),           # 5 1/T_e
        integrator(),                                # 6 exciter state -> E_fd
        gain(p_Ke),                                  # 7 exciter self feedback
        washout(p_Kfd, p_Tfd),                       # 8 rate feedback
    ]
    off = 0 if with_pss_input else -1
    conns = [
        ((0, 0), (1, 1 + off)),
        ((1, 0), (2, 0)),
        ((2, 0), (3, 0)),
        ((3, 0), (4, 0)),
        ((4, 0), (5, 0)),
        ((5, 0), (6, 0)),
        ((6, 0), (7, 0)),
        ((7, 0), (4, 1)),
        ((6, 0), (8, 0)),
        ((8, 0), (1, 2 + off)),
    ]
    inputs = [("dv_t", [(0, 0)])]
    if with_pss_input:
        inputs.append(("dv_pss", [(1, 0)]))
    return BlockDiagram(blocks, conns, inputs, [("de_fd", (6, 0))])


def pss_diagram(machine_id: str, K_S, T_w, T_1, T_2, T_3, T_4,
                T_s=0.015, unlocked: bool = False) -> BlockDiagram:
    """PSS: gain, washout, two lead-lag stages and the (fixed) sensor lag.

    Input ``domega_pu``, output ``dv_pss``.
    """
    allowed = TUNABLE_FIELDS["pss"]
    p_KS = _p(machine_id, "pss", "K_S", K_S, allowed, unlocked)
    p_Tw = _p(machine_id, "pss", "T_w", T_w, allowed, unlocked)
    p_T1 = _p(machine_id, "pss", "T_1", T_1, allowed, unlocked)
    p_T2 = _p(machine_id, "pss", "T_2", T_2, allowed, unlocked)
    p_T3 = _p(machine_id, "pss", "T_3", T_3, allowed, unlocked)
    p_T4 = _p(machine_id, "pss", "T_4", T_4, allowed, unlocked)
    p_Ts = _p(machine_id, "pss", "T_s", T_s, allowed, unlocked)
    blocks = [
        gain(p_KS),
        washout(ParamRef(p_Tw), p_Tw),    # T_w s / (1 + s T_w)
        lead_lag(1.0, p_T1, p_T2),
        lead_lag(1.0, p_T3, p_T4),
        first_order_lag(1.0, p_Ts),
    ]
    conns = [((i, 0), (i + 1, 0)) for i in range(4)]
    return BlockDiagram(blocks, conns, [("domega_pu", [(0, 0)])],
                        [("dv_pss", (4, 0))])


def controller_diagram(machine: Machine) -> BlockDiagram:
    """Single diagram combining a machine's TGOV/AVR/PSS.

    Inputs are a subset of ``(dv_t, domega_pu)``; outputs a subset of
    ``(de_fd, dp_m)``. Returns None when the machine has no controllers.
    """
    pieces = []
    if machine.avr is not None:
        pieces.append(("avr", machine.avr))
    if machine.pss is not None:
        pieces.append(("pss", machine.pss))
    if machine.tgov is not None:
        pieces.append(("tgov", machine.tgov))
    if not pieces:
        return None

    blocks, conns = [], []
    offs = {}
    port_of = {}
    for tag, diag in pieces:
        offs[tag] = len(blocks)
        for (sb, sp), (db, dp) in diag.connections:
            conns.append(((sb + len(blocks), sp), (db + len(blocks), dp)))
        for name, dests in diag.inputs:
            port_of[(tag, "in", name)] = [(b + len(blocks), p) for b, p in dests]
        for name, src in diag.outputs:
            port_of[(tag, "out", name)] = (src[0] + len(blocks), src[1])
        blocks.extend(diag.blocks)

    if machine.pss is not None:
        conns.append((port_of[("pss", "out", "dv_pss")],
                      port_of[("avr", "in", "dv_pss")][0]))

    inputs = []
    omega_dests = []
    if machine.pss is not None:
        omega_dests += port_of[("pss", "in", "domega_pu")]
    if machine.tgov is not None:
        omega_dests += port_of[("tgov", "in", "domega_pu")]
    if machine.avr is not None:
        inputs.append(("dv_t", port_of[("avr", "in", "dv_t")]))
    if omega_dests:
        inputs.append(("domega_pu", omega_dests))

    outputs = []
    if machine.avr is not None:
        outputs.append(("de_fd", port_of[("avr", "out", "de_fd")]))
    if machine.tgov is not None:
        outputs.append(("dp_m", port_of[("tgov", "out", "dp_m")]))
    return BlockDiagram(blocks, conns, inputs, outputs)

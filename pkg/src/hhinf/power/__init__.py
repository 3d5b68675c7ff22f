from .network import (
    Branch,
    Bus,
    Network,
    PowerFlowState,
    PowerSchedule,
    build_admittance,
    pf_residual,
    pf_solve,
)
from .prosumers import Machine, StaticProsumer, avr_diagram, pss_diagram, tgov1_diagram
from .subsystem import (
    SubsystemModel,
    SubsystemSpec,
    coi_frequency,
    equilibrium,
    linearize,
    make_subsystem,
    remove_zero_mode,
    scale_prosumer,
)
from .coupling import CoupledSystem, CouplingMatrix, TieLine, build_coupling, couple

__all__ = [
    "Branch", "Bus", "Network", "PowerFlowState", "PowerSchedule",
    "build_admittance", "pf_residual", "pf_solve",
    "Machine", "StaticProsumer", "avr_diagram", "pss_diagram", "tgov1_diagram",
    "SubsystemModel", "SubsystemSpec", "coi_frequency", "equilibrium",
    "linearize", "make_subsystem", "remove_zero_mode", "scale_prosumer",
    "CoupledSystem", "CouplingMatrix", "TieLine", "build_coupling", "couple",
]

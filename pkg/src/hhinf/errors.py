"""Exception types raised across the package."""


class HhinfError(Exception):
    """Base class for all package-specific errors."""


# --- block diagrams / LTI ---

class AlgebraicLoopSingular(HhinfError):
    """Feedthrough interconnection loop is not well posed (I - L singular)."""


class UnboundParameter(HhinfError):
    """A tunable parameter was not assigned a value at assembly time."""


class ResonantPole(HhinfError):
    """A requested evaluation frequency coincides with a system pole."""


class UnstableSystem(HhinfError):
    """Operation requires an exponentially stable system."""


class UnstableBlowup(HhinfError):
    """Time simulation exceeded the divergence guard."""


class MultipleZeroModes(HhinfError):
    """More than one eigenvalue at the origin; cannot deflate a single mode."""


class NoZeroMode(HhinfError):
    """No eigenvalue at the origin to deflate."""


# --- power network ---

class DisconnectedGraph(HhinfError):
    """Bus graph is not connected."""


class PFDiverged(HhinfError):
    """Newton power flow did not converge within the iteration limit."""


class InfeasibleSchedule(HhinfError):
    """Power flow Jacobian singular; the schedule has no regular solution."""


class AlgebraicJacobianSingular(HhinfError):
    """Algebraic-equation Jacobian is singular; cannot eliminate V/theta."""


class NonEquilibrium(HhinfError):
    """State derivatives are not (numerically) zero at the linearization point."""


class RankDeficientCoupling(HhinfError):
    """Tie-line coupling matrix is rank deficient."""


class IllPosedInterconnection(HhinfError):
    """Subsystem interconnection is singular at a probe frequency."""


class UnknownProsumer(HhinfError):
    """Referenced prosumer id does not exist in the subsystem."""


class EmptySubsystem(HhinfError):
    """Subsystem has no dynamic prosumers."""


# --- tuning / hierarchy ---

class InitialUnstable(HhinfError):
    """Initial parameterization does not stabilize the system."""


class InitialReducedUnstable(HhinfError):
    """Initial reduced parameterization does not stabilize the coupled reduced system."""


class DimensionMismatch(HhinfError):
    """Channel dimensions of two systems do not agree."""


class GridMismatch(HhinfError):
    """Frequency grids of two sample sets do not agree."""


# --- scenario / orchestration ---

class ParseError(HhinfError):
    """Scenario file is malformed; message names the offending field."""

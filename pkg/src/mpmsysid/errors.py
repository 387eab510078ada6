"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateMatrixError(ValueError):
    """A matrix is too close to singular for the requested decomposition."""


class SimulationError(RuntimeError):
    """Base class for failures raised while stepping the simulator."""


class OutOfDomainError(SimulationError):
    def __init__(self, particle: int, where: str = ""):
        self.particle = particle
        super().__init__(f"particle {particle} left the simulation domain{where}")


class InstabilityError(SimulationError):
    def __init__(self, particle: int, where: str = ""):
        self.particle = particle
        super().__init__(f"non-finite velocity at particle {particle}{where} (instability)")


class AdjointError(SimulationError):
    def __init__(self, substep: int):
        self.substep = substep
        super().__init__(f"non-finite adjoint at substep {substep}")

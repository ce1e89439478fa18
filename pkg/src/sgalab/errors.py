"""Exception hierarchy shared across the package."""


class SgaError(Exception):
    pass


class ShapeError(SgaError, ValueError):
    pass


class NumericalError(SgaError, ArithmeticError):
    pass


class ContractError(SgaError, ValueError):
    """An input violates a documented precondition (e.g. non-unit rows)."""


class DegenerateRowError(ContractError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"feature row {row} has near-zero norm {norm:.3e}")
        self.row = row
        self.norm = norm


class TrainingDivergence(SgaError, ArithmeticError):
    def __init__(self, component: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in '{component}'{where}")
        self.component = component
        self.step = step


class ConfigError(SgaError, ValueError):
    pass


class MetricUndefined(SgaError, ValueError):
    pass

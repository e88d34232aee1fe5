"""Exception hierarchy shared across the package."""


class PanelcfError(Exception):
    """Base class for all panelcf errors."""


class InputError(PanelcfError):
    """Invalid input data or configuration (CLI exit code 2)."""


class EstimationError(PanelcfError):
    """Numerical estimation failure (CLI exit code 3)."""


class NotApplicableError(InputError):
    """A test or operation does not apply to the given data."""

"""Exception hierarchy shared across the package."""


class LoArmError(Exception):
    pass


class ConfigurationError(LoArmError, ValueError):
    """Shapes, modes or config keys that do not fit together."""


class InputError(LoArmError, ValueError):
    """Malformed or non-finite input data."""


class DomainError(LoArmError, ValueError):
    """Argument outside the domain of an operation (empty sets, bad indices)."""


class StateError(LoArmError, RuntimeError):
    """Operation invoked in a state that does not allow it."""


class PreconditionError(LoArmError, ValueError):
    pass


class TrainingError(LoArmError, RuntimeError):
    pass

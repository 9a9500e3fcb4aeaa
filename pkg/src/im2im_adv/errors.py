"""Exception types shared across the toolkit."""


class Im2ImAdvError(Exception):
    pass


class DimensionError(Im2ImAdvError, ValueError):
    """Shapes of two operands do not agree."""


class ArgumentError(Im2ImAdvError, ValueError):
    """An argument is outside the supported domain (norm order, non-finite coordinate, ...)."""


class ConfigError(Im2ImAdvError, ValueError):
    """A configuration record is invalid or violates the attack-surface rules."""


class DataError(Im2ImAdvError, ValueError):
    """Input data is malformed, e.g. a label id outside the class range."""


class CapabilityError(Im2ImAdvError, RuntimeError):
    """The model or objective does not offer the requested capability."""


class TrainingDivergenceError(Im2ImAdvError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class OptimizationDivergenceError(Im2ImAdvError, RuntimeError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite objective {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value

"""Exception hierarchy shared by all taskweave modules."""


class TaskweaveError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TaskweaveError):
    """A spec, config, or corpus description failed validation.

    The message names the offending field.
    """


class ConfigurationError(TaskweaveError):
    """A structurally valid object was used with incompatible settings
    (e.g. batch size exceeding dataset size, floor * n_tasks >= 1)."""


class ContractError(TaskweaveError):
    """A caller violated an operation precondition (shape mismatch,
    single-occurrence identity in a triplet batch, probe id missing
    from the gallery, ...)."""


class NumericError(TaskweaveError):
    """A numeric computation produced non-finite values."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer

"""Exception types shared across the package."""


class CrossReIDError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossReIDError):
    """Array/tensor shape does not match the contract."""


class ContractError(CrossReIDError):
    """An operation was called outside its declared contract."""


class DegenerateInputError(CrossReIDError):
    """Input too small/degenerate for the requested operation."""


class ConfigurationError(CrossReIDError):
    """Invalid or inconsistent configuration."""


class LabelError(CrossReIDError):
    """Label outside the identity vocabulary."""


class ProtocolError(CrossReIDError):
    """Evaluation protocol precondition violated."""


class CheckpointError(CrossReIDError):
    """Checkpoint missing, corrupt, or incompatible with the config."""


class TrainingDivergenceError(CrossReIDError):
    """A loss component became non-finite during training."""

    def __init__(self, components: dict):
        self.components = components
        bad = ", ".join(k for k, v in components.items() if not _finite(v))
        super().__init__(f"non-finite loss component(s): {bad} (values: {components})")


def _finite(v) -> bool:
    try:
        return float(v) == float(v) and abs(float(v)) != float("inf")
    except (TypeError, ValueError):
        return False

"""Exception hierarchy shared across the package.

The CLI maps UsageError to exit code 1 and every other KglmError to exit
code 2, so new failure modes should subclass one of these.
"""


class KglmError(Exception):
    """Base class for all package-level failures."""


class UsageError(KglmError):
    """Bad command line or config input (CLI exit code 1)."""


class ShapeError(KglmError):
    """Tensor op invoked with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class IngestError(KglmError):
    """Malformed knowledge-graph input (strict mode)."""


class GraphError(KglmError):
    """Lookup or sampling failure against a knowledge graph."""


class SaturatedGraphError(GraphError):
    """No negative example exists for the requested corruption."""


class VocabError(KglmError):
    """Token id outside the vocabulary, or a broken vocab file."""


class ConfigError(KglmError):
    """Invalid run configuration."""


class CheckpointError(KglmError):
    """Corrupt, truncated, or mismatched checkpoint file."""


class TrainingDiverged(KglmError):
    """Loss became non-finite during training."""


class EvalError(KglmError):
    """Metric preconditions violated (empty inputs, wrong model mode, ...)."""

"""Typed errors shared across the package.

Each error class maps onto one failure family so callers (and the CLI
exit-code table) can react without string matching.
"""


class RevDesignError(Exception):
    """Base class for all package errors."""


class ConfigError(RevDesignError):
    """Invalid or contradictory run configuration (CLI exit code 2)."""


class UnknownOpError(RevDesignError):
    """An edit operation name outside the fixed vocabulary."""


class ManifestError(RevDesignError):
    """Missing or structurally broken dataset manifest (CLI exit code 3)."""


class IntegrityError(RevDesignError):
    """Stored images disagree with their regenerated counterparts (exit 3)."""


class TemplateError(RevDesignError):
    """A prompt template violates its structural invariants."""


class TokenizerError(RevDesignError):
    """Illegal vocabulary operation, e.g. duplicate special-token registration."""


class AssemblyError(RevDesignError):
    """Prompt/answer token assembly failed (missing or duplicate image marker)."""


class ShapeError(RevDesignError):
    """A tensor argument has the wrong shape for the model configuration."""


class MaskError(RevDesignError):
    """A loss was requested over an all-zero (or otherwise unusable) mask."""


class CheckpointError(RevDesignError):
    """Corrupt checkpoint container: bad magic, truncation, or header damage."""


class VocabMismatchError(CheckpointError):
    """Checkpoint vocabulary fingerprint differs from the expected vocabulary."""


class DivergenceError(RevDesignError):
    """Training or pretraining hit a non-finite loss (CLI exit code 4)."""

"""Exception hierarchy for raggedshard.

Every error raised by the library derives from RaggedShardError. Errors that
signal a mis-specified input (model config, shapes, placements) also derive
from ValueError so callers can treat them like ordinary argument errors.
"""


class RaggedShardError(Exception):
    """Base class for all raggedshard errors."""


class ConfigError(RaggedShardError, ValueError):
    """A model config or settings file is malformed."""


class NonDividingGranularity(RaggedShardError, ValueError):
    """A sharding granularity does not divide the tensor it is declared on."""


class ShapeMismatch(RaggedShardError, ValueError):
    """Block counts, payload sizes or buffer shapes disagree."""


class MixedElementWidth(RaggedShardError, ValueError):
    """A communication group mixes tensors of different element widths."""


class UnsupportedConversion(RaggedShardError, ValueError):
    """A redistribute between two placements that the mesh does not implement."""


class PlacementMismatch(RaggedShardError, ValueError):
    """Two distributed tensors that must share a placement do not."""


class MeshMismatch(RaggedShardError, ValueError):
    """A plan or buffer was built for a different device count."""


class CollectiveMismatch(RaggedShardError):
    """Ranks entered the same collective with different metadata, or not at all."""


class LimitExceeded(RaggedShardError, ValueError):
    """An instance is too large for the exhaustive oracle."""


class InternalInconsistency(RaggedShardError):
    """The planner's recorded state cannot be realised; indicates a planner bug."""


class NotMatrix(RaggedShardError, ValueError):
    """A 2D-only operation received a tensor of another rank."""


class ZeroMatrix(RaggedShardError, ValueError):
    """Newton-Schulz was asked to orthogonalize an all-zero matrix."""


class MisalignedShard(RaggedShardError, ValueError):
    """A quantization block crosses a shard boundary."""

"""
Exception hierarchy for the TVTS toolkit
Every error contract maps to one class; the CLI turns them into exit codes
"""

from typing import Any, Dict, List, Optional


class TVTSError(Exception):
    """Root of every error raised by the package"""


class ConfigError(TVTSError, ValueError):
    """Invalid configuration value or combination"""


class DimensionError(TVTSError, ValueError):
    """Tensor shapes do not fit the operation"""


class NumericError(TVTSError, ArithmeticError):
    """NaN or Inf reached an op that refuses them"""


class ContractError(TVTSError, ValueError):
    """A documented precondition was violated by the caller"""


class WindowRangeError(TVTSError, ValueError):
    """Transcript window extends past the end of the stream"""


class EmptyTranscriptError(TVTSError, ValueError):
    """A sampled transcript holds no words; the caller should resample"""

    def __init__(self, message: str, transcript_index: int):
        super().__init__(message)
        self.transcript_index = transcript_index


class SamplingError(TVTSError, ValueError):
    """A TSN segment contains no stored frame"""


class VocabError(TVTSError, KeyError):
    """Token id outside the vocabulary"""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class LabelError(TVTSError, ValueError):
    """Order labels are not a valid permutation"""


class DataError(TVTSError, ValueError):
    """Corpus cannot supply what the trainer asks for"""


class NonFiniteLossError(TVTSError, FloatingPointError):
    """Training loss became NaN or Inf"""

    def __init__(self, step: int, video_ids: List[str], dump_path: Optional[str] = None,
                 losses: Optional[Dict[str, Any]] = None):
        self.step = step
        self.video_ids = list(video_ids)
        self.dump_path = dump_path
        self.losses = losses or {}
        where = f", dump written to {dump_path}" if dump_path else ""
        super().__init__(
            f"non-finite loss at step {step} (batch videos: {', '.join(self.video_ids)}){where}"
        )


class CheckpointError(TVTSError, OSError):
    """Checkpoint file cannot be written or read"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version"""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends before its declared contents"""


class ChecksumError(CheckpointError):
    """Checkpoint payload does not match its recorded checksum"""


class CheckpointShapeError(CheckpointError):
    """Tensor table entry disagrees with its payload or with the model"""


class InvariantViolationError(TVTSError, RuntimeError):
    """A guarantee the code promised was broken at runtime"""

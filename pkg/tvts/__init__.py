"""
TVTS - video representation learning by sorting shuffled transcripts
Desk-scale numpy implementation: synthetic narrated corpus, encoders, SortFormer,
training loop and evaluation protocols
"""

from .numerics import Tape, Tensor, backward
from .errors import TVTSError
from .schemas import EncoderConfig, EvalConfig, GenConfig, ProbeConfig, TrainConfig
from .corpus import Corpus, generate_corpus, sample_transcript_window
from .trainer import pretrain
from .evalkit import linear_probe, text_to_video_retrieval, zero_shot_video_retrieval

__version__ = "0.1.0"

__all__ = [
    'Tape',
    'Tensor',
    'backward',
    'TVTSError',
    'EncoderConfig',
    'EvalConfig',
    'GenConfig',
    'ProbeConfig',
    'TrainConfig',
    'Corpus',
    'generate_corpus',
    'sample_transcript_window',
    'pretrain',
    'linear_probe',
    'text_to_video_retrieval',
    'zero_shot_video_retrieval',
]

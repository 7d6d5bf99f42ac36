from .ctc import (FramePosterior, collapse, ctc_beam_decode, ctc_enumeration_oracle, ctc_greedy_decode,
                  ctc_nll, ctc_nll_and_grad, min_frames)
from .mas import AlignmentPath, alignment_to_durations, mas_exhaustive, monotonic_alignment_search, path_score
from .metrics import cer, char_errors, edit_distance, wer, word_errors

__all__ = [
    "FramePosterior", "collapse", "ctc_beam_decode", "ctc_enumeration_oracle", "ctc_greedy_decode",
    "ctc_nll", "ctc_nll_and_grad", "min_frames",
    "AlignmentPath", "alignment_to_durations", "mas_exhaustive", "monotonic_alignment_search", "path_score",
    "cer", "char_errors", "edit_distance", "wer", "word_errors",
]

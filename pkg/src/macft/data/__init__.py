from .sequences import (SequenceFormatError, SequencePair, load_dataset, load_sequence, parse_gt, write_dataset,
                        write_sequence)
from .synth import SynthConfig, synth_dataset, synth_sequence

__all__ = ["SequenceFormatError", "SequencePair", "load_dataset", "load_sequence", "parse_gt", "write_dataset",
           "write_sequence", "SynthConfig", "synth_dataset", "synth_sequence"]

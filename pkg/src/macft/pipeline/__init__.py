from .sampling import SampleSource, crop_and_resize, crop_around, make_sample
from .tracking import track_sequence
from .training import PrerequisiteError, train_stage, write_trace

__all__ = ["SampleSource", "crop_and_resize", "crop_around", "make_sample", "track_sequence",
           "PrerequisiteError", "train_stage", "write_trace"]

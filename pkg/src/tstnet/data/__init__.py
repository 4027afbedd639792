from .dataset import (Dataset, DatasetError, EpisodeManifest, load_dataset, ground_truths,
                      write_episode)
from .records import (BadMagicError, HeaderError, PayloadError, TensorRecordError, read_tensor,
                      write_tensor)
from .synth import SynthConfig, generate_synthetic, prototype_oracle

__all__ = [
    "Dataset", "DatasetError", "EpisodeManifest", "load_dataset", "ground_truths", "write_episode",
    "BadMagicError", "HeaderError", "PayloadError", "TensorRecordError", "read_tensor",
    "write_tensor", "SynthConfig", "generate_synthetic", "prototype_oracle",
]

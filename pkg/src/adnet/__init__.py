"""adnet: exact conversion of patch-based (sliding-window) convolutional
classifiers into dense fully-convolutional networks via dilated
convolutions, with an equivalence oracle, a speedup benchmark harness,
toy-scale training, and voxel/object-level precision-recall evaluation.
"""

from .backend import available_backends, backend_name, resolve_threads
from .errors import (AdnetError, DataError, FormatError, ShapeError, SpecError,
                     TrainingDiverged)
from .inference import (BenchmarkReport, ProbabilityMap, apply_dense,
                        apply_patchwise, benchmark, load_map, predict_volume,
                        save_map)
from .metrics import (ComponentSet, DetectionReport, PRPoint,
                      connected_components, f1_contour, match_objects, pr_curve)
from .netspec import (LayerSpec, NetworkSpec, from_arch_config, init_params,
                      patch_to_dense)
from .ops import (conv2d, conv2d_batch, effective_extent, maxpool2d,
                  maxpool2d_batch, relu, softmax_channels, zero_stuff)
from .training import TrainConfig, TrainLog, backward, sample_batch, train
from .volume import (LabelVolume, SplitManifest, SynthConfig, Volume,
                     load_labels, load_volume, save_labels, save_volume,
                     synth_dataset)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

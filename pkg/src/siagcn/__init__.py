"""Edge-aware graph convolutions over keypoint heatmaps."""

from .errors import (ConfigError, ContractError, DataError, HeaderError, MissingFileError,
                     NumericalError, ParseError, PreconditionError, ShapeError, SiaGcnError)
from .estimator import SiaPoseRefiner
from .graph import (GraphMatrices, SkeletonGraph, build_chain, build_hand_skeleton, construct_matrices,
                    load_graph, parse_graph)
from .layers import EdgeKernelBank, layer_backward, layer_forward
from .model import (ModelConfig, SiaPoseModel, decode_argmax, init_model, load_model, model_backward,
                    model_forward, save_model)
from .objective import PCK_DELTAS, LossConfig, mpck, pck, total_loss
from .synth import CorruptionConfig, SynthConfig, corrupt, generate_dataset, sample_pose
from .train import TrainConfig, evaluate, gradcheck, train_loop

__version__ = "0.1.0"

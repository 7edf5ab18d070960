"""queryseg: a desk-scale query-decoder lab for 3D instance segmentation
with inter-query competition mechanisms."""

from .tensor import Tensor, grad_check
from .scenegen import Scene, SceneConfig, generate_scene, load_scene, save_scene
from .decoder import DecoderConfig, LayerPrediction, decoder_forward, init_params
from .competition import CompetitionConfig, CompetitionState, CompetitionToggles
from .training import LossWeights, TrainConfig, Trainer, train
from .evalstats import APResult, map_suite
from .config import RunConfig

__all__ = [
    "Tensor",
    "grad_check",
    "Scene",
    "SceneConfig",
    "generate_scene",
    "load_scene",
    "save_scene",
    "DecoderConfig",
    "LayerPrediction",
    "decoder_forward",
    "init_params",
    "CompetitionConfig",
    "CompetitionState",
    "CompetitionToggles",
    "LossWeights",
    "TrainConfig",
    "Trainer",
    "train",
    "APResult",
    "map_suite",
    "RunConfig",
]

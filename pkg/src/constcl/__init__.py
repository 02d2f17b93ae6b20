"""Contextualized spatio-temporal contrastive learning at desk scale, on a numpy autodiff engine."""

from .backbone import Backbone, BackboneConfig, EndpointSet, FeatureMap, backbone_forward, backbone_init
from .heads import ContextSet, HeadConfig, st_roialign
from .losses import LossConfig, LossReport, global_loss, info_nce, match_correspondence, region_loss
from .regions import Region, RegionGenConfig, generate_regions
from .sampling import SamplingConfig, ViewPair, sample_view_pair, select_slice_pair
from .tensor import Tensor, backward, gradcheck
from .train import Model, OptimizerState, TrainConfig, lr_at_step, model_init, train_step

__all__ = [
    "Backbone", "BackboneConfig", "ContextSet", "EndpointSet", "FeatureMap", "HeadConfig", "LossConfig",
    "LossReport", "Model", "OptimizerState", "Region", "RegionGenConfig", "SamplingConfig", "Tensor",
    "TrainConfig", "ViewPair", "backbone_forward", "backbone_init", "backward", "generate_regions",
    "global_loss", "gradcheck", "info_nce", "lr_at_step", "match_correspondence", "model_init",
    "region_loss", "sample_view_pair", "select_slice_pair", "st_roialign", "train_step",
]

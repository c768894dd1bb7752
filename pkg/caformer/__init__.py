"""
Caformer: causal-environment transformer for multivariate time series,
with a from-scratch reverse-mode autodiff engine and an exact back-door oracle.
"""
from caformer.backbone import ABLATIONS, CaformerConfig, backbone_forward
from caformer.data import SeriesDataset, load_csv, make_windows
from caformer.errors import CaformerError
from caformer.heads import HeadConfig
from caformer.model import Caformer
from caformer.training import TrainConfig, ablation_run, evaluate, train

__version__ = "0.1.0"

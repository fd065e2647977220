"""Masked-image codec: position-indexed attention over visible patches, a
hyperprior entropy model and a range coder, all on numpy."""
from .geometry import MaskMap, IndexList, build_mask, gen_group_mask, merge_indices, split_indices
from .attention import AttentionConfig, decay_from_indices, dpisa, pisa
from .network import StageConfig
from .rangecoder import BitstreamContainer, rc_decode, rc_encode
from .pipeline import LAMBDAS, Model, RDLossReport, compress, decompress, encode, masked_psnr, rd_loss
from .flops import FlopsReport, count_flops
from .train import TrainState, plateau_schedule, train, train_step

__version__ = "0.1.0"

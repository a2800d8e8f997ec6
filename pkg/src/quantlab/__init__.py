"""Low-bit activation quantization toolkit: quantizers, error bounds, learned
rotations, outlier-token weighting and clipping search."""

__version__ = "0.1.0"

from .activations import ActivationBatch, ChannelStats, SyntheticSpec, channel_stats, generate_synthetic, read_dump, write_dump
from .asot import AsotConfig, OutlierSelection, inconsistency_eta, outlier_scores, select_threshold, token_set, token_weights
from .errors import ConfigError, DegenerateError, FormatError, NumericError, QuantlabError, SelectionError, StepError
from .infometrics import DistFamily, MetricsReport, SmoothedKLConfig, bound_F, critical_kappa, metrics_report, tau_closed_form
from .lac import ClipParams, DeskBlock, LacConfig, block_forward, block_forward_quant, optimize_clipping
from .psot import OrthoTransform, PsotConfig, loss_ps, read_transform, train_psot, write_transform
from .quantizer import QuantizerSpec, centered_clamped_quantize, fake_quantize, quantize_tokens

"""Layerwise sparsity allocation by Maximum Redundancy Pruning (MRP)."""

from .allocation import (MrpConfig, MrpResult, MrpStep, MrpTrace, SparsityPlan, allocate_er,
                         allocate_global, allocate_mrp, allocate_owl, allocate_uniform,
                         block_sparsity, measure_global_sparsity, run_mrp)
from .analysis import (CommandEvaluator, LpsProfile, OutputDistance, evaluate_output_distance,
                       outlier_shift, profile_lps, reversal_rate)
from .errors import (AllocationExhaustedError, ConfigurationError, DimensionError,
                     InfeasibleError, LoadError, MrpError, StorageError, ValidationError)
from .metrics import Metric, ScoreMatrix, register_metric, score, score_magnitude, score_wanda
from .propagation import Block, BlockStack, CalibrationBatch, Layer, forward, forward_collect
from .pruning import (Granularity, PruneMask, apply_plan, mask_semi_structured,
                      mask_structured_rows, mask_unstructured)
from .redundancy import (OutlierConfig, RedundancyProfile, layer_redundancy, max_min_gap,
                         model_lrl, select_most_redundant)
from .synthetic import OutlierSpec, gen_calibration, gen_model, log_uniform_skew

__version__ = "0.1.0"

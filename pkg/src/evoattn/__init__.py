"""evoattn: evolving-attention transformer variants for time series.

Attention logits are treated as per-head images that evolve across layers
through residual 3x3 convolutions; the hybrid encoder pairs that attention
branch with a causal dilated-convolution branch. Built on a small float64
numpy autodiff core with finite-difference gradient checking throughout.
"""

from .attention import (AttentionHeadParams, AttentionLogits, EvolveParams,
                        attention_apply, evolve, raw_logits)
from .data import (SynthSpec, TimeSeriesBatch, TimeSeriesDataset, batchify,
                   load_csv_long, save_csv_long, standardize, synth_dataset)
from .kernels import (Conv2dMapParams, DilatedConvParams, PositionalEncoding,
                      conv2d_maps, dilated_conv1d_stack, dropout, layer_norm,
                      linear, relative_logits_1d, softmax_masked)
from .metrics import (MetricsTable, accuracy, avg_rank, avg_relative_difference,
                      avg_wcd, export_attention, import_attention,
                      read_metrics_table, rmse, write_metrics_table)
from .model import (Model, ModelConfig, load_checkpoint, load_params_into,
                    mean_pool, model_from_checkpoint, save_checkpoint)
from .tensor import (Tensor, grad_check, grad_check_params, no_grad, tensor_new)
from .train import (Adam, PretrainMask, RAdam, TrainSchedule, TrainingDiverged,
                    clip_grad_norm, cross_entropy, evaluate, gen_pretrain_mask,
                    make_optimizer, masked_mse, mse_loss, save_history, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

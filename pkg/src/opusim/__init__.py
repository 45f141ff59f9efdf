"""opusim: simulator and attack benchmark for a binarized random-projection
defense layer trained with hybrid backprop / synthetic gradients."""

from .blackbox import (AttackOutcome, BanditsConfig, LossOracle, NesConfig,
                       ParsimoniousConfig, QueryLedger, bandits_attack,
                       csr_curve, nes_attack, nes_gradient,
                       parsimonious_attack)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, digits_dataset, load_cifar_binary, load_idx,
                   read_idx, renormalize, split, write_idx)
from .dfa import (FeedbackMatrix, HybridGradients, alignment_angle,
                  dfa_error_projection, finetune_upper, hybrid_backward,
                  train_bp, train_hybrid)
from .errors import (BlockedPathError, ContractError, InputError, OpusimError,
                     ValidationError)
from .harness import (ArchConfig, CostEstimate, TransferSet, VariantSpec,
                      build_common_correct_set, build_variant,
                      resample_and_finetune, retrieval_cost_estimate,
                      run_ablation, run_blackbox_attack, train_variant,
                      transfer_eval, whitebox_accuracy_table)
from .nn import (Conv2d, Dense, Flatten, LayerNorm, LossValue, MaxPool2d,
                 Model, ReLU, backward_bp, cross_entropy, one_hot, sgd_step,
                 softmax)
from .opu import OpuLayer, binarize, dequantize8, opu_forward, quantize8, resample
from .whitebox import (GradSource, SampleRecord, WhiteBoxBudget, fgsm,
                       gradient, pgd, project_linf, whitebox_records)

__version__ = "0.1.0"

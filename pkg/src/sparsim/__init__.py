"""Trace-driven simulator and numeric kernel for dynamic activation sparsity
in gated-MLP inference under flash/DRAM memory constraints."""

from .mlp import (MlpWeights, LoraAdapter, MlpAdapters, Predictor, ErrorMetrics,
                  silu, silu_grad, glu_activations, mlp_dense_forward,
                  mlp_sparse_forward, approx_error, lora_fuse,
                  distill_loss_and_grads, DistillResult, lora_fit_distill,
                  predictor_forward, topk_binary_targets, predictor_loss_and_grads,
                  PredictorTrainResult, predictor_train, TrainingDivergedError)
from .masking import (SparsityMask, MaskSet, GlobalThreshold, PerLayerThreshold,
                      PerTokenTopK, CacheAwareParams, topk_indices, apply_threshold,
                      scheme_dense, scheme_glu_pruning, scheme_gate_pruning,
                      scheme_up_pruning, scheme_predictive, scheme_predictive_oracle,
                      scheme_dip, dip_ca_scores, scheme_dip_ca, sparse_forward,
                      density_to_k, DEFAULT_GAMMA)
from .cache import (Group, UnitId, AccessStats, CacheState, EvictionPolicy,
                    NextUseTable, belady_precompute, belady_evict, cache_update,
                    resident_bitvector)
from .hwsim import (HardwareConfig, ModelGeometry, GroupSpec, SchemeConfig,
                    TokenCost, RunReport, SimulationError, unit_bytes,
                    scheme_groups, allocate_dram, simulate_token, simulate_run,
                    throughput_at_error, predictor_static_bytes)
from .traces import (SyntheticTraceSpec, Trace, TraceFormatError,
                     generate_synthetic_trace, synthetic_layer_weights,
                     write_trace, read_trace, write_tensors, read_tensors,
                     save_mlp_weights, load_mlp_weights, save_adapters, load_adapters)
from .calibration import (calibrate_per_layer_thresholds, global_threshold_for_density,
                          layer_densities, AllocationPoint, sweep_density_allocation,
                          pareto_front, AllocationModel, fit_logit_linear,
                          Allocation, optimal_allocation, gamma_sweep, memory_fraction)
from .presets import HARDWARE_PRESETS, GEOMETRY_PRESETS, GB

__version__ = "0.1.0"

"""Threshold calibration and density-allocation fitting.

Two calibration paths:

* Per-layer magnitude thresholds: the empirical (1 - density)-quantile of
  |activations| pooled per layer, so a fixed threshold realizes a target
  keep-fraction on data shaped like the calibration trace.

* Density allocation for two-dimensional input pruning: sweep a grid of
  (input density, intermediate density) pairs on a reference block, score
  each by (MLP memory fraction, output error), keep the Pareto front, and fit
  per-dimension linear models in logit space mapping a target overall MLP
  density to the two component densities.  The fitted model turns one memory
  knob into a concrete (k_in, k_mid) allocation.

Also hosts the gamma sweep that tables throughput/hit-rate/error of
cache-aware masking across re-weighting strengths and densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import hwsim, masking
from .mlp import MlpWeights, approx_error, mlp_dense_forward
from .traces import Trace

__all__ = [
    "calibrate_per_layer_thresholds",
    "global_threshold_for_density",
    "layer_densities",
    "AllocationPoint",
    "sweep_density_allocation",
    "pareto_front",
    "AllocationModel",
    "fit_logit_linear",
    "Allocation",
    "optimal_allocation",
    "gamma_sweep",
]

_LOGIT_CLAMP = (0.001, 0.999)


def _require_activations(trace: Trace) -> np.ndarray:
    acts = getattr(trace, "activations", trace)
    acts = np.asarray(acts, dtype=float)
    if acts.ndim != 3:
        raise ValueError("expected an activation trace [tokens, layers, d_model]")
    if acts.shape[0] == 0:
        raise ValueError("cannot calibrate on an empty trace")
    return acts


def calibrate_per_layer_thresholds(trace: Trace, target_density: float) -> masking.PerLayerThreshold:
    """Per-layer thresholds realizing a target keep-fraction.

    Threshold of layer l is the empirical (1 - density)-quantile of the
    pooled |activations| of that layer; density 1.0 maps to threshold 0.
    """
    if not 0.0 < target_density <= 1.0:
        raise ValueError("target_density must be in (0, 1]")
    acts = _require_activations(trace)
    thresholds = []
    for l in range(acts.shape[1]):
        if target_density == 1.0:
            thresholds.append(0.0)
        else:
            mags = np.abs(acts[:, l, :]).ravel()
            thresholds.append(float(np.quantile(mags, 1.0 - target_density)))
    return masking.PerLayerThreshold(tuple(thresholds))


def global_threshold_for_density(trace: Trace, target_density: float) -> masking.GlobalThreshold:
    """Single threshold from the quantile of |activations| pooled over all
    layers; realizes the target density only on average across layers."""
    if not 0.0 < target_density <= 1.0:
        raise ValueError("target_density must be in (0, 1]")
    if target_density == 1.0:
        return masking.GlobalThreshold(0.0)
    acts = _require_activations(trace)
    return masking.GlobalThreshold(float(np.quantile(np.abs(acts).ravel(),
                                                     1.0 - target_density)))


def layer_densities(trace: Trace, spec: masking.ThresholdSpec) -> np.ndarray:
    """Mean realized keep-fraction per layer under a threshold spec."""
    acts = _require_activations(trace)
    num_tokens, num_layers, _ = acts.shape
    out = np.zeros(num_layers)
    for l in range(num_layers):
        dens = [masking.apply_threshold(acts[t, l], spec, layer=l).density
                for t in range(num_tokens)]
        out[l] = float(np.mean(dens))
    return out


# ---------------------------------------------------------------------------
# density-allocation sweep and logit-linear fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AllocationPoint:
    """One sweep sample: requested densities, realized unit counts, the MLP
    memory fraction they keep, and the mean output error."""

    density_in: float
    density_mid: float
    k_in: int
    k_mid: int
    memory_fraction: float
    error: float


def memory_fraction(k_in: int, k_mid: int, d_model: int, d_ff: int) -> float:
    """Fraction of MLP weight bytes kept: up and gate keep k_in columns of
    d_ff rows each, down keeps k_mid columns of d_model rows."""
    return (2.0 * k_in * d_ff + k_mid * d_model) / (3.0 * d_model * d_ff)


def sweep_density_allocation(w: MlpWeights, inputs: Sequence[np.ndarray],
                             densities_in: Sequence[float],
                             densities_mid: Sequence[float]) -> List[AllocationPoint]:
    """Grid sweep of input-pruning densities on one block.

    Every (input, intermediate) density pair is scored by the mean relative-
    L2 error of the masked forward against the dense forward over the
    calibration inputs.  The up and gate projections share the input density.
    """
    xs = [np.asarray(x, dtype=float) for x in inputs]
    if not xs:
        raise ValueError("need at least one calibration input")
    dense_outs = [mlp_dense_forward(w, x) for x in xs]
    points = []
    for din in densities_in:
        k_in = masking.density_to_k(din, w.d_model)
        for dmid in densities_mid:
            k_mid = masking.density_to_k(dmid, w.d_ff)
            errs = []
            for x, y_ref in zip(xs, dense_outs):
                ms = masking.scheme_dip(w, x, k_in, k_mid)
                errs.append(approx_error(y_ref, masking.sparse_forward(w, ms, x)).rel_l2)
            points.append(AllocationPoint(
                density_in=float(din), density_mid=float(dmid),
                k_in=k_in, k_mid=k_mid,
                memory_fraction=memory_fraction(k_in, k_mid, w.d_model, w.d_ff),
                error=float(np.mean(errs))))
    return points


def pareto_front(points: Sequence, key=None) -> List:
    """Non-dominated subset under (memory, error), both minimized; a point is
    dropped iff another is no worse on both axes and strictly better on one.
    Output sorted by memory then error; independent of input order."""
    if key is None:
        key = (lambda p: (p.memory_fraction, p.error)) if points and hasattr(
            points[0], "memory_fraction") else (lambda p: (p[0], p[1]))
    items = [(key(p), p) for p in points]
    front = []
    for (m, e), p in items:
        dominated = any(
            (m2 <= m and e2 <= e) and (m2 < m or e2 < e)
            for (m2, e2), _ in items)
        if not dominated:
            front.append(((m, e), p))
    front.sort(key=lambda t: t[0])
    return [p for _, p in front]


def _logit(p: np.ndarray) -> np.ndarray:
    # boundary densities (e.g. the 1.0 grid edge) clamp to keep logits finite
    p = np.clip(p, *_LOGIT_CLAMP)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class AllocationModel:
    """Affine-in-logit maps from target MLP density to component densities:
    logit(component) = intercept + slope * logit(target)."""

    coef_in: Tuple[float, float]
    coef_mid: Tuple[float, float]

    def predict(self, target_density: float) -> Tuple[float, float]:
        """(input density, intermediate density); clamped into (0.001, 0.999)."""
        t = _logit(np.array(target_density))
        rho_in = 1.0 / (1.0 + math.exp(-(self.coef_in[0] + self.coef_in[1] * t)))
        rho_mid = 1.0 / (1.0 + math.exp(-(self.coef_mid[0] + self.coef_mid[1] * t)))
        lo, hi = _LOGIT_CLAMP
        return float(np.clip(rho_in, lo, hi)), float(np.clip(rho_mid, lo, hi))


def fit_logit_linear(points: Sequence[AllocationPoint]) -> AllocationModel:
    """Least-squares fit of the component densities against the points' own
    memory fractions, in logit space.  Needs at least two distinct memory
    fractions; typically fed the Pareto front of a sweep."""
    if len(points) < 2:
        raise ValueError("need at least two points to fit")
    targets = _logit(np.array([p.memory_fraction for p in points]))
    if np.ptp(targets) == 0:
        raise ValueError("degenerate fit: all points share one memory fraction")
    design = np.column_stack([np.ones_like(targets), targets])
    coef_in, *_ = np.linalg.lstsq(design, _logit(np.array([p.density_in for p in points])),
                                  rcond=None)
    coef_mid, *_ = np.linalg.lstsq(design, _logit(np.array([p.density_mid for p in points])),
                                   rcond=None)
    return AllocationModel(coef_in=(float(coef_in[0]), float(coef_in[1])),
                           coef_mid=(float(coef_mid[0]), float(coef_mid[1])))


@dataclass(frozen=True)
class Allocation:
    k_in: int
    k_mid: int
    density_in: float
    density_mid: float
    memory_fraction: float


def optimal_allocation(model: AllocationModel, target_density: float,
                       d_model: int, d_ff: int) -> Allocation:
    """Concrete (k_in, k_mid) for a target MLP density via the fitted model.

    The open interval bound rejects degenerate targets (1.0 would be the
    dense model; 0.0 keeps nothing).
    """
    if not 0.0 < target_density < 1.0:
        raise ValueError("target_density must be in (0, 1) exclusive")
    rho_in, rho_mid = model.predict(target_density)
    k_in = masking.density_to_k(rho_in, d_model)
    k_mid = masking.density_to_k(rho_mid, d_ff)
    return Allocation(k_in=k_in, k_mid=k_mid,
                      density_in=k_in / d_model, density_mid=k_mid / d_ff,
                      memory_fraction=memory_fraction(k_in, k_mid, d_model, d_ff))


# ---------------------------------------------------------------------------
# gamma sweep
# ---------------------------------------------------------------------------

def gamma_sweep(trace: Trace, weights: Sequence[MlpWeights], hw: "hwsim.HardwareConfig",
                geo: "hwsim.ModelGeometry", gammas: Sequence[float],
                densities: Sequence[float], policy: str = "lfu",
                kernel_eval: bool = True) -> List[dict]:
    """Throughput / hit-rate / error table over re-weighting strengths and
    densities for cache-aware input pruning.  gamma=1 rows coincide with
    plain input pruning by construction."""
    rows = []
    for gamma in gammas:
        for density in densities:
            cfg = hwsim.SchemeConfig(name="dip_ca", density_mid=density,
                                     density_in=density, gamma=gamma)
            report = hwsim.simulate_run(trace, weights, cfg, policy, hw, geo,
                                        kernel_eval=kernel_eval)
            rows.append({
                "gamma": float(gamma),
                "density": float(density),
                "throughput": report.throughput,
                "steady_state_throughput": report.steady_state_throughput,
                "hit_rate": report.hit_rate,
                "mean_error": report.mean_error,
            })
    return rows

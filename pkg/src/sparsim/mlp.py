"""Dense and sparse SwiGLU MLP math.

Forward passes for the gated MLP block, output-error metrics, low-rank (LoRA)
adapters fitted by distillation against the dense block, and a small trainable
predictor that scores intermediate units from the block input.

All math runs in float64 and is deterministic given explicit seeds, so the
numeric tolerances in the test-suite are reproducible across machines.
Gradients are hand-written; the tests check them against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TrainingDivergedError",
    "silu",
    "silu_grad",
    "MlpWeights",
    "glu_activations",
    "mlp_dense_forward",
    "mlp_sparse_forward",
    "ErrorMetrics",
    "approx_error",
    "LoraAdapter",
    "MlpAdapters",
    "lora_fuse",
    "distill_loss_and_grads",
    "DistillResult",
    "lora_fit_distill",
    "Predictor",
    "predictor_forward",
    "topk_binary_targets",
    "predictor_loss_and_grads",
    "PredictorTrainResult",
    "predictor_train",
]

_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite (step size too large)."""


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Evaluated through exp(-|v|) so neither branch can overflow.
    v = np.asarray(v, dtype=float)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(v):
    """SiLU gate: v * sigmoid(v). Accepts scalars or arrays."""
    arr = np.asarray(v, dtype=float)
    out = arr * _sigmoid(arr)
    return float(out) if out.ndim == 0 else out


def silu_grad(v):
    """Derivative of SiLU: sigmoid(v) * (1 + v * (1 - sigmoid(v)))."""
    arr = np.asarray(v, dtype=float)
    s = _sigmoid(arr)
    out = s * (1.0 + arr * (1.0 - s))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# weights and forward passes
# ---------------------------------------------------------------------------

@dataclass
class MlpWeights:
    """One gated-MLP block: up/gate project d_model -> d_ff, down projects back.

    up, gate: [d_ff, d_model]; down: [d_model, d_ff].
    """

    up: np.ndarray
    gate: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        self.up = np.asarray(self.up, dtype=float)
        self.gate = np.asarray(self.gate, dtype=float)
        self.down = np.asarray(self.down, dtype=float)
        if self.up.ndim != 2 or self.gate.shape != self.up.shape:
            raise ValueError("up and gate must be 2-d with identical shapes")
        if self.down.shape != (self.up.shape[1], self.up.shape[0]):
            raise ValueError("down must have shape [d_model, d_ff]")
        if min(self.up.shape) < 1:
            raise ValueError("dimensions must be >= 1")
        for m in (self.up, self.gate, self.down):
            if not np.all(np.isfinite(m)):
                raise ValueError("weights must be finite")

    @property
    def d_model(self) -> int:
        return self.up.shape[1]

    @property
    def d_ff(self) -> int:
        return self.up.shape[0]

    @classmethod
    def random(cls, d_model: int, d_ff: int, seed: int = 0) -> "MlpWeights":
        """Gaussian weights at 1/sqrt(fan-in) scale, deterministic per seed."""
        rng = np.random.default_rng(seed)
        return cls(
            up=rng.standard_normal((d_ff, d_model)) / np.sqrt(d_model),
            gate=rng.standard_normal((d_ff, d_model)) / np.sqrt(d_model),
            down=rng.standard_normal((d_model, d_ff)) / np.sqrt(d_ff),
        )


def _as_bool_mask(mask, dim: int):
    if mask is None:
        return None
    if hasattr(mask, "as_bool"):
        mask = mask.as_bool()
    arr = np.asarray(mask).astype(bool)
    if arr.shape != (dim,):
        raise ValueError(f"mask length {arr.shape} does not match dimension {dim}")
    return arr


def glu_activations(w: MlpWeights, x: np.ndarray, input_mask=None) -> np.ndarray:
    """Gated intermediate vector (up x) * silu(gate x), length d_ff.

    With input_mask set, masked-out input columns of up and gate are zeroed
    before the projection, which equals zeroing those entries of x.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (w.d_model,):
        raise ValueError("input length must equal d_model")
    m = _as_bool_mask(input_mask, w.d_model)
    if m is not None:
        x = np.where(m, x, 0.0)
    return (w.up @ x) * silu(w.gate @ x)


def mlp_dense_forward(w: MlpWeights, x: np.ndarray) -> np.ndarray:
    """Dense block output: down @ ((up x) * silu(gate x))."""
    return w.down @ glu_activations(w, x)


def mlp_sparse_forward(
    w: MlpWeights, x: np.ndarray, input_mask=None, intermediate_mask=None
) -> np.ndarray:
    """Block output with masked columns zeroed.

    input_mask zeroes columns of up/gate (equivalently, entries of x);
    intermediate_mask zeroes columns of down (equivalently, intermediate
    units).  All-ones masks reproduce the dense forward bit-for-bit.
    """
    h = glu_activations(w, x, input_mask)
    mid = _as_bool_mask(intermediate_mask, w.d_ff)
    if mid is not None:
        h = np.where(mid, h, 0.0)
    return w.down @ h


# ---------------------------------------------------------------------------
# output-error metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorMetrics:
    """Relative L2 distance and cosine similarity against a reference output."""

    rel_l2: float
    cosine: float


def approx_error(y_ref: np.ndarray, y: np.ndarray) -> ErrorMetrics:
    """Error of y against reference y_ref.

    rel_l2 = ||y - y_ref|| / max(||y_ref||, 1e-12).  The cosine of two zero
    vectors is defined as 1.0 (identical), and 0.0 when exactly one is zero.
    """
    y_ref = np.asarray(y_ref, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_ref.shape != y.shape:
        raise ValueError("shape mismatch")
    ref_norm = float(np.linalg.norm(y_ref))
    norm = float(np.linalg.norm(y))
    rel = float(np.linalg.norm(y - y_ref)) / max(ref_norm, _EPS)
    if ref_norm <= _EPS and norm <= _EPS:
        cos = 1.0
    elif ref_norm <= _EPS or norm <= _EPS:
        cos = 0.0
    else:
        cos = float(np.dot(y_ref, y) / (ref_norm * norm))
    return ErrorMetrics(rel_l2=rel, cosine=cos)


# ---------------------------------------------------------------------------
# LoRA adapters and distillation fitting
# ---------------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Low-rank additive update a @ b with a: [rows, rank], b: [rank, cols]."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ValueError("adapter factors must be 2-d with matching inner dim")
        if self.rank > min(self.a.shape[0], self.b.shape[1]):
            raise ValueError("rank must not exceed either full dimension")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.a @ self.b

    @classmethod
    def init(cls, rows: int, cols: int, rank: int, rng: np.random.Generator,
             a_scale: float = 0.01) -> "LoraAdapter":
        """Gaussian a (scale 0.01), zero b: the initial update is exactly zero."""
        return cls(a=a_scale * rng.standard_normal((rows, rank)),
                   b=np.zeros((rank, cols)))


def lora_fuse(w: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Fused weight w + a @ b.  Fusing then selecting columns equals selecting
    columns of w and of the adapter update separately (identity used when a
    sparsity mask is applied after adaptation)."""
    w = np.asarray(w, dtype=float)
    if adapter.delta().shape != w.shape:
        raise ValueError("adapter shape does not match weight")
    return w + adapter.delta()


@dataclass
class MlpAdapters:
    up: LoraAdapter
    gate: LoraAdapter
    down: LoraAdapter

    @classmethod
    def init(cls, w: MlpWeights, rank: int, rng: np.random.Generator) -> "MlpAdapters":
        return cls(
            up=LoraAdapter.init(w.d_ff, w.d_model, rank, rng),
            gate=LoraAdapter.init(w.d_ff, w.d_model, rank, rng),
            down=LoraAdapter.init(w.d_model, w.d_ff, rank, rng),
        )


def _student_forward(w: MlpWeights, ad: MlpAdapters, in_masks: np.ndarray,
                     mid_masks: np.ndarray, x_batch: np.ndarray):
    """Masked forward with adapted weights; returns output plus intermediates
    reused by the backward pass."""
    u_eff = w.up + ad.up.delta()
    g_eff = w.gate + ad.gate.delta()
    d_eff = w.down + ad.down.delta()
    xm = x_batch * in_masks
    u = xm @ u_eff.T
    g = xm @ g_eff.T
    s = silu(g)
    h = u * s
    hm = h * mid_masks
    y = hm @ d_eff.T
    return y, (xm, u, g, s, hm, d_eff)


def distill_loss_and_grads(w: MlpWeights, ad: MlpAdapters, in_masks: np.ndarray,
                           mid_masks: np.ndarray, x_batch: np.ndarray,
                           teacher: np.ndarray):
    """Mean-squared error between adapted sparse outputs and teacher outputs,
    with analytic gradients for all six adapter factors.

    in_masks: [n, d_model], mid_masks: [n, d_ff] (0/1 floats, fixed per
    sample); x_batch: [n, d_model]; teacher: [n, d_model].
    Returns (loss, {"up_a": ..., "up_b": ..., "gate_a": ..., "gate_b": ...,
    "down_a": ..., "down_b": ...}).
    """
    y, (xm, u, g, s, hm, d_eff) = _student_forward(w, ad, in_masks, mid_masks, x_batch)
    diff = y - teacher
    loss = float(np.mean(diff ** 2))
    dy = 2.0 * diff / diff.size
    d_down_full = dy.T @ hm                      # [d_model, d_ff]
    dh = (dy @ d_eff) * mid_masks                # [n, d_ff]
    du_full = (dh * s).T @ xm                    # [d_ff, d_model]
    dg_full = (dh * u * silu_grad(g)).T @ xm     # [d_ff, d_model]
    grads = {
        "up_a": du_full @ ad.up.b.T,
        "up_b": ad.up.a.T @ du_full,
        "gate_a": dg_full @ ad.gate.b.T,
        "gate_b": ad.gate.a.T @ dg_full,
        "down_a": d_down_full @ ad.down.b.T,
        "down_b": ad.down.a.T @ d_down_full,
    }
    return loss, grads


@dataclass
class DistillResult:
    adapters: MlpAdapters
    losses: list

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return min(self.losses)


def lora_fit_distill(w: MlpWeights, masks_fn: Callable, inputs: Sequence[np.ndarray],
                     rank: int = 32, iters: int = 1000, lr: float = 0.05,
                     seed: int = 0) -> DistillResult:
    """Fit LoRA adapters on up/gate/down so the masked block matches the dense
    block on the given inputs.

    masks_fn maps an input vector to a MaskSet (or any object exposing
    input_mask/intermediate_mask with as_bool()).  Masks are computed once per
    input up-front and held fixed while fitting: the top-k selection is not
    differentiable, and freezing it keeps the loss smooth so the gradients
    pass finite-difference checks.  Plain gradient descent; the returned
    adapters are the best-so-far iterate, which guarantees final loss <=
    initial loss.  iters=0 returns the (zero-update) initialization.
    """
    if rank < 1 or rank > min(w.d_model, w.d_ff):
        raise ValueError("rank out of range")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    x_batch = np.asarray(list(inputs), dtype=float)
    if x_batch.ndim != 2 or x_batch.shape[1] != w.d_model:
        raise ValueError("inputs must be vectors of length d_model")
    teacher = (x_batch @ w.up.T * silu(x_batch @ w.gate.T)) @ w.down.T

    in_masks = np.empty((len(x_batch), w.d_model))
    mid_masks = np.empty((len(x_batch), w.d_ff))
    for i, x in enumerate(x_batch):
        ms = masks_fn(x)
        in_masks[i] = np.asarray(_as_bool_mask(ms.input_mask, w.d_model), dtype=float)
        mid_masks[i] = np.asarray(_as_bool_mask(ms.intermediate_mask, w.d_ff), dtype=float)

    rng = np.random.default_rng(seed)
    ad = MlpAdapters.init(w, rank, rng)
    losses = []
    best = None
    for _ in range(iters + 1):
        loss, grads = distill_loss_and_grads(w, ad, in_masks, mid_masks, x_batch, teacher)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"distillation loss became {loss}")
        losses.append(loss)
        if best is None or loss < best[0]:
            best = (loss, MlpAdapters(
                up=LoraAdapter(ad.up.a.copy(), ad.up.b.copy()),
                gate=LoraAdapter(ad.gate.a.copy(), ad.gate.b.copy()),
                down=LoraAdapter(ad.down.a.copy(), ad.down.b.copy()),
            ))
        ad.up.a -= lr * grads["up_a"]
        ad.up.b -= lr * grads["up_b"]
        ad.gate.a -= lr * grads["gate_a"]
        ad.gate.b -= lr * grads["gate_b"]
        ad.down.a -= lr * grads["down_a"]
        ad.down.b -= lr * grads["down_b"]
    return DistillResult(adapters=best[1], losses=losses)


# ---------------------------------------------------------------------------
# intermediate-unit predictor
# ---------------------------------------------------------------------------

@dataclass
class Predictor:
    """One-hidden-layer scorer of intermediate units from the block input.

    w1: [hidden, d_model], w2: [d_ff, hidden]; SiLU hidden nonlinearity.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("predictor weights must be 2-d")
        if self.b1.shape != (self.w1.shape[0],) or self.b2.shape != (self.w2.shape[0],):
            raise ValueError("bias shapes do not match weights")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("hidden dimensions do not match")

    @property
    def d_model(self) -> int:
        return self.w1.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def num_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    @classmethod
    def create(cls, d_model: int, d_ff: int, hidden: int = 64, seed: int = 0,
               scale: float = 0.1) -> "Predictor":
        rng = np.random.default_rng(seed)
        return cls(
            w1=scale * rng.standard_normal((hidden, d_model)),
            b1=np.zeros(hidden),
            w2=scale * rng.standard_normal((d_ff, hidden)),
            b2=np.zeros(d_ff),
        )


def predictor_forward(p: Predictor, x: np.ndarray) -> np.ndarray:
    """Logits over the d_ff intermediate units for one input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.d_model,):
        raise ValueError("input length must equal d_model")
    return p.w2 @ silu(p.w1 @ x + p.b1) + p.b2


def topk_binary_targets(glu_batch: np.ndarray, target_frac: float) -> np.ndarray:
    """Per-row indicator of the ceil(target_frac * d_ff) largest magnitudes.

    Ties resolve to the lower index, matching the mask tie rule.
    """
    glu_batch = np.asarray(glu_batch, dtype=float)
    if not 0.0 < target_frac <= 1.0:
        raise ValueError("target_frac must be in (0, 1]")
    d_ff = glu_batch.shape[1]
    k = int(np.ceil(target_frac * d_ff))
    targets = np.zeros_like(glu_batch)
    for i, row in enumerate(glu_batch):
        order = np.argsort(-np.abs(row), kind="stable")
        targets[i, order[:k]] = 1.0
    return targets


def predictor_loss_and_grads(p: Predictor, x_batch: np.ndarray, targets: np.ndarray):
    """Elementwise binary cross-entropy on sigmoid(logits), with gradients.

    Uses the overflow-safe logits form max(z,0) - z*y + log1p(exp(-|z|)).
    """
    x_batch = np.asarray(x_batch, dtype=float)
    targets = np.asarray(targets, dtype=float)
    z1 = x_batch @ p.w1.T + p.b1
    a = silu(z1)
    z = a @ p.w2.T + p.b2
    loss = float(np.mean(np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))))
    dz = (_sigmoid(z) - targets) / z.size
    da = dz @ p.w2
    dz1 = da * silu_grad(z1)
    grads = {
        "w2": dz.T @ a,
        "b2": dz.sum(axis=0),
        "w1": dz1.T @ x_batch,
        "b1": dz1.sum(axis=0),
    }
    return loss, grads


@dataclass
class PredictorTrainResult:
    predictor: Predictor
    losses: list

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return min(self.losses)


def predictor_train(data: Sequence, hidden: int = 64, epochs: int = 20,
                    lr: float = 1.0, target_frac: float = 0.1,
                    seed: int = 0) -> PredictorTrainResult:
    """Train a predictor on (input, intermediate-activation) pairs.

    Binary targets mark the top target_frac fraction of |activations| per
    token.  Full-batch gradient descent, one step per epoch; the returned
    predictor is the best-so-far iterate (final loss <= initial loss).
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    xs, glus = zip(*data)
    x_batch = np.asarray(xs, dtype=float)
    glu_batch = np.asarray(glus, dtype=float)
    targets = topk_binary_targets(glu_batch, target_frac)
    p = Predictor.create(x_batch.shape[1], glu_batch.shape[1], hidden=hidden, seed=seed)
    losses = []
    best = None
    for _ in range(epochs + 1):
        loss, grads = predictor_loss_and_grads(p, x_batch, targets)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"predictor loss became {loss}")
        losses.append(loss)
        if best is None or loss < best[0]:
            best = (loss, Predictor(p.w1.copy(), p.b1.copy(), p.w2.copy(), p.b2.copy()))
        p.w1 -= lr * grads["w1"]
        p.b1 -= lr * grads["b1"]
        p.w2 -= lr * grads["w2"]
        p.b2 -= lr * grads["b2"]
    return PredictorTrainResult(predictor=best[1], losses=losses)

"""White-box gradient attacks (FGSM, PGD) with pluggable gradient sources.

Three sources are supported against a defended model:

* ``bp`` — exact backprop; only valid when no non-differentiable slot is
  in the way.
* ``dfa`` — the hybrid bypass: seed the chain below the slot with the
  feedback projection of the output error and backpropagate that to the
  input. Reuses the training-time feedback matrix by default.
* ``bpda`` — a differentiable stand-in for the slot: the sign layer
  becomes a steep tanh and the hidden matrix is replaced by a fresh draw
  from the same distribution, since the true one cannot be read.

Attacks never touch the defended layer's matrix: the only interaction
with the true model is forward evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dfa import FeedbackMatrix, hybrid_backward
from .errors import ContractError, InputError
from .nn import Model, backward_bp, cross_entropy
from .opu import OpuLayer


@dataclass
class WhiteBoxBudget:
    """L-inf perturbation budget in normalized pixel units."""

    epsilon: float
    alpha: float
    steps: int = 1
    pixel_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise InputError("epsilon must be nonnegative")
        if self.steps >= 1 and self.alpha <= 0 and self.epsilon > 0:
            raise InputError("alpha must be positive for a nonzero budget")
        if self.alpha < 0:
            raise InputError("alpha must be nonnegative")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise InputError("pixel_range must be a nonempty interval")
        if self.steps < 1:
            raise InputError("steps must be >= 1")


@dataclass
class GradSource:
    """Where attack gradients come from: bp | dfa | bpda.

    ``feedback_seed`` draws a fresh feedback matrix for the dfa bypass
    instead of reusing the model's training-time one. ``surrogate_seed``
    seeds the bpda replacement matrix; ``bpda_temperature`` is the tanh
    steepness standing in for the sign.
    """

    kind: str
    bpda_temperature: float = 10.0
    surrogate_seed: int = 0
    feedback_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("bp", "dfa", "bpda"):
            raise InputError(f"unknown gradient source {self.kind!r}")
        if self.bpda_temperature <= 0:
            raise InputError("bpda_temperature must be positive")


def project_linf(x: np.ndarray, x0: np.ndarray, budget: WhiteBoxBudget) -> np.ndarray:
    """Orthogonal projection onto the eps-ball around x0 intersected with
    the pixel range: entrywise clamp to [x0-eps, x0+eps] then to range."""
    x = np.asarray(x)
    x0 = np.asarray(x0)
    if x.shape != x0.shape:
        raise InputError(f"shape mismatch {x.shape} vs {x0.shape}")
    lo, hi = budget.pixel_range
    out = np.clip(x, x0 - budget.epsilon, x0 + budget.epsilon)
    return np.clip(out, lo, hi)


class TanhSign:
    """Differentiable sign surrogate: y = tanh(beta * x)."""

    differentiable = True
    params: dict = {}

    def __init__(self, beta: float):
        self.beta = float(beta)

    def forward_cache(self, x):
        y = np.tanh(self.beta * x)
        return y, y

    def backward(self, grad, y):
        return grad * self.beta * (1.0 - y * y), {}


class ComplexSquareProjection:
    """Differentiable |Uz|^2 with a known (surrogate) complex matrix."""

    differentiable = True
    params: dict = {}

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.complex128)

    def forward_cache(self, x):
        c = x @ self.matrix.T
        return c.real ** 2 + c.imag ** 2, c

    def backward(self, grad, c):
        # d|c_j|^2/dz_k = 2 Re(conj(c_j) U_jk) for real z
        return 2.0 * np.real((grad * np.conj(c)) @ self.matrix), {}


def bpda_surrogate(model: Model, temperature: float, surrogate_seed: int,
                   matrix_override: np.ndarray | None = None) -> Model:
    """Differentiable copy of a defended model for gradient extraction.

    The slot is replaced by tanh(beta * x) for the sign step and, when the
    slot projects, by |U_hat z|^2 with U_hat drawn fresh from the same
    distribution and scale (the true matrix being unreadable). Quantization
    is dropped. All other layers are shared by reference.
    ``matrix_override`` exists for oracle tests that own an explicit matrix.
    """
    if model.slot_index is None:
        raise ContractError("bpda needs a model with a defense slot")
    slot: OpuLayer = model.layers[model.slot_index]
    replacement = []
    if slot.binarize_input:
        replacement.append(TanhSign(temperature))
    if slot.project:
        if matrix_override is not None:
            u_hat = np.asarray(matrix_override, dtype=np.complex128)
            if u_hat.shape != (slot.output_dim, slot.input_dim):
                raise InputError("override matrix has wrong shape")
        else:
            rng = np.random.default_rng(surrogate_seed)
            shape = (slot.output_dim, slot.input_dim)
            u_hat = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
                * slot.entry_scale
        replacement.append(ComplexSquareProjection(u_hat))
    layers = (model.layers[:model.slot_index] + replacement
              + model.layers[model.slot_index + 1:])
    return Model(layers, model.input_shape, dtype=model.dtype)


def prepare_gradient_fn(source: GradSource, model: Model):
    """One-time setup for a gradient source; returns f(x, y) -> grad_x."""
    if source.kind == "bp":
        return lambda x, y: backward_bp(model, x, y).input_grad
    if source.kind == "dfa":
        if model.slot_index is None:
            raise ContractError("dfa bypass needs a model with a defense slot")
        if source.feedback_seed is not None:
            inj_dim = model.layers[model.injection_point].out_dim
            fb = FeedbackMatrix(inj_dim, model.num_classes,
                                seed=source.feedback_seed)
        else:
            fb = model.feedback
            if fb is None:
                raise ContractError("model has no feedback matrix; set "
                                    "feedback_seed or train hybrid first")
        return lambda x, y: hybrid_backward(model, x, y, feedback=fb).input_grad
    surrogate = bpda_surrogate(model, source.bpda_temperature,
                               source.surrogate_seed)
    return lambda x, y: backward_bp(surrogate, x, y).input_grad


def gradient(source: GradSource, model: Model, x, y) -> np.ndarray:
    """Input gradient of the attack loss under the chosen source."""
    return prepare_gradient_fn(source, model)(x, y)


@dataclass
class PgdResult:
    x_adv: np.ndarray
    loss_trajectory: list[float] = field(default_factory=list)


def pgd(model: Model, source: GradSource, x0, y, budget: WhiteBoxBudget) -> PgdResult:
    """Projected gradient ascent on the attack loss.

    Runs exactly ``budget.steps`` iterations of
    x <- project(x + alpha * sign(grad)); sign(0) is 0, so dead
    coordinates are left alone. Every iterate lies within the eps-ball
    around x0 and the pixel range. The recorded trajectory is the true
    model's loss at each iterate (the gradient may come from a surrogate).
    """
    x0 = np.asarray(x0, dtype=model.dtype)
    lo, hi = budget.pixel_range
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise InputError("x0 outside pixel_range")
    grad_fn = prepare_gradient_fn(source, model)
    x = x0.copy()
    losses = []
    for _ in range(budget.steps):
        g = grad_fn(x, y)
        x = project_linf(x + budget.alpha * np.sign(g), x0, budget)
        losses.append(cross_entropy(model.forward(x), y).value)
    return PgdResult(x_adv=x, loss_trajectory=losses)


def fgsm(model: Model, source: GradSource, x0, y, epsilon: float,
         pixel_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Single-step attack: pgd with steps=1 and alpha=epsilon."""
    budget = WhiteBoxBudget(epsilon=epsilon, alpha=epsilon, steps=1,
                            pixel_range=pixel_range)
    return pgd(model, source, x0, y, budget).x_adv


def pgd_batch(model: Model, source: GradSource, X0, y,
              budget: WhiteBoxBudget) -> np.ndarray:
    """PGD over a batch of independent samples at once.

    The update only uses the sign of the gradient, and the batch-mean
    loss scales each per-sample gradient by 1/B without touching its
    sign, so every sample follows the same trajectory it would follow
    alone; batching is purely a performance device.
    """
    X0 = np.asarray(X0, dtype=model.dtype)
    y = np.asarray(y)
    lo, hi = budget.pixel_range
    if np.any(X0 < lo) or np.any(X0 > hi):
        raise InputError("x0 outside pixel_range")
    grad_fn = prepare_gradient_fn(source, model)
    X = X0.copy()
    low = np.maximum(X0 - budget.epsilon, lo)
    high = np.minimum(X0 + budget.epsilon, hi)
    for _ in range(budget.steps):
        g = grad_fn(X, y)
        X = np.clip(X + budget.alpha * np.sign(g), low, high)
    return X


@dataclass
class SampleRecord:
    """Per-sample white-box outcome for reporting.

    ``feasible`` audits the returned example against the budget (ball and
    range containment); projection makes it true by construction, and the
    flag proves it per sample.
    """

    index: int
    label: int
    pred_before: int
    pred_after: int
    linf: float
    success: bool
    feasible: bool = True


def whitebox_records(model: Model, source: GradSource, images, labels,
                     budget: WhiteBoxBudget,
                     batch_size: int = 128) -> list[SampleRecord]:
    """Attack each sample and record the outcome.

    Success means the prediction changed to a wrong label on a sample the
    model originally classified correctly. Samples are attacked in
    batches (see :func:`pgd_batch`); chunking is fixed by ``batch_size``
    so reruns are identical.
    """
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels)
    lo_px, hi_px = budget.pixel_range
    records = []
    for lo in range(0, len(labels), batch_size):
        X0 = images[lo:lo + batch_size]
        yb = labels[lo:lo + batch_size]
        before = model.predict(X0)
        adv = pgd_batch(model, source, X0, yb, budget)
        after = model.predict(adv)
        for i in range(len(yb)):
            linf = float(np.max(np.abs(adv[i] - X0[i]))) if adv[i].size else 0.0
            feasible = (linf <= budget.epsilon + 1e-12
                        and adv[i].min() >= lo_px - 1e-12
                        and adv[i].max() <= hi_px + 1e-12)
            records.append(SampleRecord(
                index=lo + i, label=int(yb[i]), pred_before=int(before[i]),
                pred_after=int(after[i]), linf=linf,
                success=bool(before[i] == yb[i] and after[i] != yb[i]),
                feasible=bool(feasible)))
    return records


def accuracy_under_attack(records: list[SampleRecord]) -> float:
    """Fraction of samples still classified correctly after the attack."""
    if not records:
        raise InputError("no records")
    return sum(r.pred_after == r.label for r in records) / len(records)

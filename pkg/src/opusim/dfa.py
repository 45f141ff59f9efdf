"""Hybrid training for models with a non-differentiable defense slot.

The backward pass splits at the slot: everything above it gets exact
backpropagated gradients, while the dense layer directly below receives a
fixed random projection of the output error (the synthetic gradient),
which is then backpropagated normally through the remaining layers. The
slot itself never produces or receives a gradient, and its matrix stays
frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError
from .nn import Model, backward_bp, cross_entropy, one_hot, sgd_step, softmax


class FeedbackMatrix:
    """Fixed random error-projection matrix for the synthetic-gradient path.

    Shape is (injection-layer output dim, number of classes); entries are
    zero-mean uniform with half-width ``scale`` (default 1/sqrt(classes)).
    Regenerable bit-exactly from (seed, shape, scale); only those persist
    in checkpoints.
    """

    def __init__(self, rows: int, num_classes: int, seed: int,
                 scale: float | None = None):
        self.rows = int(rows)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.scale = float(scale) if scale is not None \
            else 1.0 / np.sqrt(num_classes)
        rng = np.random.default_rng(self.seed)
        self.B = rng.uniform(-self.scale, self.scale,
                             size=(self.rows, self.num_classes))

    def spec(self) -> dict:
        return {"rows": self.rows, "num_classes": self.num_classes,
                "seed": self.seed, "scale": self.scale}


def dfa_error_projection(e: np.ndarray, feedback: FeedbackMatrix) -> np.ndarray:
    """Project the output error through the fixed feedback matrix: B @ e.

    Accepts a single error vector (C,) or a batch (B, C); linear in e.
    """
    e = np.asarray(e)
    if e.shape[-1] != feedback.num_classes:
        raise InputError(f"error length {e.shape[-1]} != "
                         f"{feedback.num_classes} classes")
    return e @ feedback.B.T


@dataclass
class HybridGradients:
    """Gradients from one hybrid backward pass.

    ``upper`` holds exact BP gradients for parameters above the slot;
    ``lower`` holds the synthetic-signal gradients at and below the
    injection point. The slot contributes nothing to either.
    """

    value: float
    upper: dict[str, np.ndarray]
    lower: dict[str, np.ndarray]
    input_grad: np.ndarray
    error: np.ndarray

    @property
    def param_grads(self) -> dict[str, np.ndarray]:
        return {**self.upper, **self.lower}


def hybrid_backward(model: Model, x, y,
                    feedback: FeedbackMatrix | None = None) -> HybridGradients:
    """Backward pass that bypasses the defense slot with a synthetic gradient.

    Exact backprop runs from the loss down to (but not through) the slot.
    At the injection point the incoming gradient is replaced by the
    feedback projection of the output error, and standard backprop
    continues from there to the input. For batches the error carries the
    1/B mean factor so the upper gradients are exact gradients of the
    mean loss.
    """
    if model.slot_index is None:
        raise ContractError("model has no defense slot; use backward_bp")
    fb = feedback if feedback is not None else model.feedback
    if fb is None:
        raise ContractError("no feedback matrix: pass one or train hybrid first")
    inj = model.injection_point
    inj_dim = model.layers[inj].out_dim
    if fb.rows != inj_dim or fb.num_classes != model.num_classes:
        raise InputError(f"feedback shape {(fb.rows, fb.num_classes)} does not "
                         f"match injection dim {inj_dim} / {model.num_classes} classes")

    logits, caches, single = model.forward_cache(x)
    lv = cross_entropy(logits, np.atleast_1d(np.asarray(y)))
    e = lv.input_grad  # (B, C), mean-scaled

    upper: dict[str, np.ndarray] = {}
    grad = e
    for i in range(len(model.layers) - 1, model.slot_index, -1):
        grad, pg = model.layers[i].backward(grad, caches[i])
        for name, g in pg.items():
            upper[f"{i}.{name}"] = g

    lower: dict[str, np.ndarray] = {}
    grad = dfa_error_projection(e, fb)
    for i in range(inj, -1, -1):
        grad, pg = model.layers[i].backward(grad, caches[i])
        for name, g in pg.items():
            lower[f"{i}.{name}"] = g

    input_grad = grad[0] if single else grad
    return HybridGradients(value=lv.value, upper=upper, lower=lower,
                           input_grad=input_grad, error=e[0] if single else e)


@dataclass
class TrainResult:
    status: str  # "ok" or "diverged"
    history: list = field(default_factory=list)
    model: Model | None = None


def _resolve_data(dataset):
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images), np.asarray(dataset.labels)
    images, labels = dataset
    return np.asarray(images), np.asarray(labels)


def _train_loop(model, dataset, epochs, lr, seed, batch_size, method,
                upper_only=False, feedback=None) -> TrainResult:
    images, labels = _resolve_data(dataset)
    if len(labels) == 0:
        raise InputError("dataset is empty")
    rng = np.random.default_rng(seed)
    history = []
    n = len(labels)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            xb, yb = images[idx], labels[idx]
            if method == "hybrid-dfa":
                hg = hybrid_backward(model, xb, yb, feedback=feedback)
                loss, grads = hg.value, (hg.upper if upper_only else hg.param_grads)
            else:
                lv = backward_bp(model, xb, yb)
                loss, grads = lv.value, lv.param_grads
            if not np.isfinite(loss):
                return TrainResult(status="diverged", history=history, model=model)
            sgd_step(model, grads, lr)
            loss_sum += loss * len(idx)
        history.append({"epoch": epoch, "loss": loss_sum / n,
                        "accuracy": model.accuracy(images, labels)})
    return TrainResult(status="ok", history=history, model=model)


def train_bp(model: Model, dataset, epochs: int, lr: float = 0.01,
             seed: int = 0, batch_size: int = 64) -> TrainResult:
    """Plain SGD with exact backprop; for models without a defense slot."""
    result = _train_loop(model, dataset, epochs, lr, seed, batch_size, "bp")
    model.training_method = "bp"
    return result


def train_hybrid(model: Model, dataset, epochs: int, lr: float = 0.01,
                 seed: int = 0, batch_size: int = 64,
                 feedback_seed: int | None = None) -> TrainResult:
    """SGD driven by hybrid backward passes.

    The feedback matrix is sampled once per run (from ``feedback_seed``,
    or ``seed`` when omitted), stored on the model, and reused for every
    step; it is bit-identical before and after training, as is the slot
    matrix. Deterministic for fixed seeds. A NaN loss ends the run with
    status "diverged" instead of raising.
    """
    if model.slot_index is None:
        raise ContractError("hybrid training needs a model with a defense slot")
    if model.feedback is None:
        inj_dim = model.layers[model.injection_point].out_dim
        fseed = seed if feedback_seed is None else feedback_seed
        model.feedback = FeedbackMatrix(inj_dim, model.num_classes, seed=fseed)
    result = _train_loop(model, dataset, epochs, lr, seed, batch_size,
                         "hybrid-dfa", feedback=model.feedback)
    model.training_method = "hybrid-dfa"
    return result


def finetune_upper(model: Model, dataset, epochs: int, lr: float = 0.01,
                   seed: int = 0, batch_size: int = 64) -> TrainResult:
    """Retrain only the parameters above the defense slot (the classifier
    head); everything at or below the slot stays bit-identical."""
    if model.slot_index is None:
        raise ContractError("fine-tuning the head requires a defense slot")
    if model.feedback is None:
        inj_dim = model.layers[model.injection_point].out_dim
        model.feedback = FeedbackMatrix(inj_dim, model.num_classes, seed=seed)
    return _train_loop(model, dataset, epochs, lr, seed, batch_size,
                       "hybrid-dfa", upper_only=True, feedback=model.feedback)


def alignment_angle(model: Model, images, labels, fd_step: float = 1e-4,
                    feedback: FeedbackMatrix | None = None) -> float | None:
    """Mean cosine between the synthetic gradient and a central
    finite-difference estimate of the true loss gradient at the injection
    point, over a batch.

    The finite difference perturbs the injection-layer output and re-runs
    the stack above it (slot included). With a sign-binarizing slot the
    true loss is a step function of that activation, so an infinitesimal
    step gives a zero estimate: use a coarse ``fd_step`` there, or an
    identity/projection-only slot for meaningful diagnostics. Samples
    where either vector has zero norm are skipped; returns None if every
    sample is degenerate.
    """
    if model.slot_index is None:
        raise ContractError("alignment diagnostics need a defense slot")
    fb = feedback if feedback is not None else model.feedback
    if fb is None:
        raise ContractError("no feedback matrix available")
    images = np.asarray(images, dtype=model.dtype)
    labels = np.atleast_1d(np.asarray(labels))
    if len(labels) == 0:
        raise InputError("batch is empty")

    inj = model.injection_point
    # Activations entering the slot, one forward pass up to the slot.
    h = images
    for layer in model.layers[:model.slot_index]:
        h, _ = layer.forward_cache(h)

    def upper_loss(h_rows, y):
        z = h_rows
        for layer in model.layers[model.slot_index:]:
            z, _ = layer.forward_cache(z)
        ls = z - np.max(z, axis=-1, keepdims=True)
        ls = ls - np.log(np.sum(np.exp(ls), axis=-1, keepdims=True))
        return -ls[np.arange(len(z)), y]

    logits = model.forward(images)
    e = softmax(logits) - one_hot(labels, model.num_classes)
    synthetic = dfa_error_projection(e, fb)

    dim = h.shape[1]
    eye = np.eye(dim)
    cosines = []
    for s in range(len(labels)):
        plus = h[s][None] + fd_step * eye
        minus = h[s][None] - fd_step * eye
        y_rep = np.full(dim, labels[s])
        fd = (upper_loss(plus, y_rep) - upper_loss(minus, y_rep)) / (2 * fd_step)
        ns, nf = np.linalg.norm(synthetic[s]), np.linalg.norm(fd)
        if ns < 1e-30 or nf < 1e-30:
            continue
        cosines.append(float(np.dot(synthetic[s], fd) / (ns * nf)))
    if not cosines:
        return None
    return float(np.mean(cosines))

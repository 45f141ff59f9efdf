"""Simulated optical defense layer: binarize, project through a hidden
complex Gaussian matrix, take the squared modulus.

The layer computes ``m = |U b|^2`` where ``b`` is the {-1,+1} sign encoding
of the input and ``U`` is a fixed complex matrix whose entries have
independent Gaussian real and imaginary parts. The matrix is regenerated
bit-exactly from (seed, dims, scale) but is never exposed through the
public API: the attack-facing surface only sees forward evaluations. An
optional 8-bit output quantizer exists but is off by default, as its
effect on the pipeline is negligible.

The same class covers the ablation variants: binarize-only, projection-
only on raw activations, and an identity pass-through. Only the identity
configuration is differentiable; every other one blocks exact backprop.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import BlockedPathError, InputError

# Name of the opt-in switch for injecting explicit matrices in oracle
# tests. Without it the hidden matrix can only come from a seed.
TEST_BACKDOOR_ENV = "OPUSIM_TEST_BACKDOOR"


def default_entry_scale(input_dim: int) -> float:
    """Std of each Gaussian component so that E[m_j] = 1 for binary input
    (E[m_j] = 2 N sigma^2 with N input bits)."""
    return 1.0 / np.sqrt(2.0 * input_dim)


def binarize(x: np.ndarray) -> np.ndarray:
    """Sign encoding into {-1.0, +1.0}; entries >= 0 map to +1.

    Total on finite input, idempotent, and invariant under positive
    rescaling. The tie at exactly 0 maps to +1 so the rule is
    deterministic.
    """
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(np.float64)


class OpuLayer:
    """Fixed random-projection defense layer (a frozen model layer).

    Parameters
    ----------
    input_dim, output_dim : layer width before and after projection.
    seed : identifies the hidden matrix; regeneration is bit-exact.
    entry_scale : std of the real and imaginary parts of each entry
        (default 1/sqrt(2*input_dim)).
    quantize_bits : 8 to quantize the output per batch, None (default) off.
    binarize_input, project : ablation switches. Both on is the full
        defense; project off leaves the sign layer only (dims must then
        match); both off is an identity slot used to train undefended
        variants with the same hybrid rule.
    """

    is_defense_slot = True
    params: dict = {}

    def __init__(self, input_dim: int, output_dim: int, seed: int,
                 entry_scale: float | None = None, quantize_bits: int | None = None,
                 binarize_input: bool = True, project: bool = True):
        if input_dim < 1 or output_dim < 1:
            raise InputError("dims must be positive")
        if quantize_bits not in (None, 8):
            raise InputError("quantize_bits must be None or 8")
        if not project and output_dim != input_dim:
            raise InputError("without projection output_dim must equal input_dim")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.seed = int(seed)
        self.entry_scale = float(entry_scale) if entry_scale is not None \
            else default_entry_scale(input_dim)
        if self.entry_scale <= 0:
            raise InputError("entry_scale must be positive")
        self.quantize_bits = quantize_bits
        self.binarize_input = bool(binarize_input)
        self.project = bool(project)
        self._matrix = self._draw_matrix() if self.project else None

    def _draw_matrix(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        shape = (self.output_dim, self.input_dim)
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
            * self.entry_scale

    @property
    def differentiable(self) -> bool:
        return not (self.binarize_input or self.project)

    def forward_cache(self, x):
        x = np.asarray(x)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise InputError(f"defense slot expects width {self.input_dim}, "
                             f"got {x.shape}")
        h = binarize(xb) if self.binarize_input else xb
        if self.project:
            c = h @ self._matrix.T
            h = c.real ** 2 + c.imag ** 2
        if self.quantize_bits is not None:
            codes, scale = quantize8(h)
            h = dequantize8(codes, scale)
        return (h[0] if single else h), None

    def forward(self, x):
        y, _ = self.forward_cache(x)
        return y

    def backward(self, grad, cache):
        if not self.differentiable:
            raise BlockedPathError("the defense layer has no readable gradient")
        return grad, {}

    def spec(self) -> dict:
        """Serializable description; deliberately excludes the matrix."""
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "seed": self.seed,
            "entry_scale": self.entry_scale,
            "quantize_bits": self.quantize_bits,
            "binarize_input": self.binarize_input,
            "project": self.project,
        }


def opu_forward(layer: OpuLayer, x: np.ndarray) -> np.ndarray:
    """m = |U binarize(x)|^2 for a flat input of length input_dim.

    Output is elementwise nonnegative, length output_dim, and invariant
    under positive rescaling of x.
    """
    return layer.forward(x)


def quantize8(m: np.ndarray, scale_policy: str = "max") -> tuple[np.ndarray, float]:
    """Quantize nonnegative intensities to 8-bit codes.

    ``scale_policy="max"`` maps the batch maximum to 255 (all-zero input
    yields all-zero codes). Returns (codes, scale) with
    m ~= codes * scale; the reconstruction error is at most one step.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise InputError("quantize8 expects nonnegative input")
    if scale_policy != "max":
        raise InputError(f"unknown scale policy {scale_policy!r}")
    top = float(m.max()) if m.size else 0.0
    if top == 0.0:
        return np.zeros(m.shape, dtype=np.uint8), 0.0
    scale = top / 255.0
    codes = np.rint(m / scale).astype(np.uint8)
    return codes, scale


def dequantize8(codes: np.ndarray, scale: float) -> np.ndarray:
    return codes.astype(np.float64) * scale


def resample(layer: OpuLayer, new_seed: int) -> OpuLayer:
    """Fresh draw of the hidden matrix: same dims, scale and flags, new
    seed. Returns a new layer; the original is untouched."""
    return OpuLayer(layer.input_dim, layer.output_dim, int(new_seed),
                    entry_scale=layer.entry_scale,
                    quantize_bits=layer.quantize_bits,
                    binarize_input=layer.binarize_input,
                    project=layer.project)


def _inject_matrix(layer: OpuLayer, matrix: np.ndarray) -> OpuLayer:
    """Test-only backdoor: overwrite the hidden matrix with an explicit one.

    Guarded by the OPUSIM_TEST_BACKDOOR environment variable so the
    attack-facing API cannot reach it in a normal run. Oracle tests use it
    to compare the simulated layer against direct complex arithmetic.
    """
    if os.environ.get(TEST_BACKDOOR_ENV) != "1":
        raise RuntimeError(f"matrix injection requires {TEST_BACKDOOR_ENV}=1")
    matrix = np.asarray(matrix, dtype=np.complex128)
    if matrix.shape != (layer.output_dim, layer.input_dim):
        raise InputError(f"matrix shape {matrix.shape} != "
                         f"{(layer.output_dim, layer.input_dim)}")
    layer._matrix = matrix
    return layer

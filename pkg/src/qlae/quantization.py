"""Scalar-codebook latent quantization.

Each latent dimension ``j`` owns a codebook row ``values[j]`` of ``n_v`` scalars
(or, in global mode, every dimension shares a single row). A continuous
encoder output is snapped coordinate-wise to its nearest codebook value;
training routes gradients around the snap with the straight-through rule and
two stop-gradient-asymmetric squared errors that pull codes and encoder
outputs toward each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Node

PER_DIMENSION = "per-dimension"
GLOBAL = "global"


@dataclass
class CodebookArray:
    """Learnable codebook values.

    ``values`` has shape ``(n_z, n_v)`` in per-dimension mode and ``(1, n_v)``
    in global mode, where the single row is shared by all ``n_z`` dimensions.
    Rows are positional: they are never re-sorted.
    """

    values: np.ndarray
    n_z: int
    mode: str = PER_DIMENSION

    def __post_init__(self):
        if self.mode not in (PER_DIMENSION, GLOBAL):
            raise ValueError(f"unknown codebook mode {self.mode!r}")
        rows = 1 if self.mode == GLOBAL else self.n_z
        if self.values.ndim != 2 or self.values.shape[0] != rows:
            raise ValueError(f"{self.mode} codebook needs {rows} rows, got {self.values.shape}")
        if self.values.shape[1] < 2:
            raise ValueError("codebooks need at least 2 values")

    @property
    def n_v(self) -> int:
        return self.values.shape[1]

    def rows(self) -> np.ndarray:
        """Storage row used by each latent dimension."""
        if self.mode == GLOBAL:
            return np.zeros(self.n_z, dtype=np.intp)
        return np.arange(self.n_z)

    def effective(self) -> np.ndarray:
        """``(n_z, n_v)`` view with the global row broadcast."""
        return self.values[self.rows()]

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        """Code values at positional ``indices`` of shape ``(..., n_z)``."""
        return self.values[self.rows(), np.asarray(indices)]


def init_codebooks(n_z: int, n_v: int, mode: str = PER_DIMENSION, dtype=np.float64) -> CodebookArray:
    """Evenly spaced values from -0.5 to 0.5 inclusive in every row."""
    if n_z < 2 or n_v < 2:
        raise ValueError(f"need n_z, n_v >= 2, got n_z={n_z}, n_v={n_v}")
    row = np.linspace(-0.5, 0.5, n_v).astype(dtype)
    rows = 1 if mode == GLOBAL else n_z
    return CodebookArray(np.tile(row, (rows, 1)), n_z, mode)


def nearest_indices(z_c: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Per-coordinate argmin of ``|z_c[..., j] - table[j, k]|`` over ``k``.

    ``np.argmin`` returns the first minimiser, so ties go to the smallest index.
    """
    z_c = np.asarray(z_c)
    if not np.all(np.isfinite(z_c)):
        raise ValueError("encoder output contains non-finite values")
    if z_c.shape[-1] != table.shape[0]:
        raise ValueError(f"latent length {z_c.shape[-1]} does not match {table.shape[0]} codebooks")
    return np.argmin(np.abs(z_c[..., :, None] - table), axis=-1)


def quantize(z_c, cb: CodebookArray) -> tuple[np.ndarray, np.ndarray]:
    """Snap ``z_c`` (shape ``(..., n_z)``) onto the code grid.

    Returns the quantized values and their positional indices.
    """
    idx = nearest_indices(z_c, cb.effective())
    return cb.lookup(idx), idx


def codebook_losses(z_c: Node, z: Node) -> tuple[Node, Node]:
    """Quantize and commit losses, summed over the last axis.

    Both equal ``||z_c - z||^2`` in value. The quantize loss only reaches the
    codebook (encoder output held fixed); the commit loss only reaches the
    encoder output (codes held fixed).
    """
    if z_c.shape != z.shape:
        raise ValueError(f"shape mismatch {z_c.shape} vs {z.shape}")
    loss_quantize = nx.total(nx.square(nx.stop_gradient(z_c) - z), axis=-1)
    loss_commit = nx.total(nx.square(z_c - nx.stop_gradient(z)), axis=-1)
    return loss_quantize, loss_commit


def straight_through(z_c: Node, z: Node) -> Node:
    """``z_c + StopGradient(z - z_c)`` with the forward value taken as ``z`` verbatim.

    Evaluating the sum in floating point would perturb the code by rounding,
    so the node stores ``z`` itself and hands the upstream gradient to ``z_c``.
    """
    if z_c.shape != z.shape:
        raise ValueError(f"shape mismatch {z_c.shape} vs {z.shape}")
    return Node(z.value, (z_c, z), lambda g: (g, None))


@dataclass
class QuantizationResult:
    z: Node  # straight-through code
    indices: np.ndarray
    z_c: Node
    loss_quantize: Node  # per example
    loss_commit: Node  # per example


def latent_quantization(z_c: Node, codebook: Node, cb: CodebookArray) -> QuantizationResult:
    """Quantize a batch of encoder outputs and build both codebook losses.

    ``codebook`` is the parameter node holding ``cb.values``; the gather from
    it is what gives the quantize loss a path into the codebook.
    """
    idx = nearest_indices(z_c.value, codebook.value[cb.rows()])
    rows = np.broadcast_to(cb.rows(), idx.shape)
    z_q = nx.gather_rows(codebook, rows, idx)
    loss_q, loss_c = codebook_losses(z_c, z_q)
    return QuantizationResult(straight_through(z_c, z_q), idx, z_c, loss_q, loss_c)

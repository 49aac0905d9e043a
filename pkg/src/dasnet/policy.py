"""Observations extracted from a forward pass and the linear gate policy."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FormatError
from .maxoutnet import ForwardTrace, MaxoutNet
from .numerics import DimensionError


def observation_dimension(net: MaxoutNet) -> int:
    """Per-map means of every conv layer, then classifier units, then class probabilities."""
    return net.gate_dimension + net.hidden + net.classes


def observe(trace: ForwardTrace) -> np.ndarray:
    """Build the observation vector(s) from ``trace``.

    Concatenates the spatial mean of every output map of every conv layer
    (bottom-up), the post-maxout classifier units and the class
    probabilities. Works for single and batched traces.
    """
    means = [layer.mean(axis=(-2, -1)) for layer in trace.layers]
    return np.concatenate([*means, trace.hidden, trace.probs], axis=-1)


@dataclass
class PolicyParams:
    """Weight matrix of shape ``(gate_dim, obs_dim)``; no bias."""

    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 2:
            raise DimensionError(f"theta must be a matrix, got shape {self.theta.shape}")

    @property
    def action_dim(self) -> int:
        return self.theta.shape[0]

    @property
    def observation_dim(self) -> int:
        return self.theta.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.theta.reshape(-1)

    @classmethod
    def zeros(cls, net: MaxoutNet) -> "PolicyParams":
        return cls(np.zeros((net.gate_dimension, observation_dimension(net))))

    @classmethod
    def from_flat(cls, flat, net: MaxoutNet) -> "PolicyParams":
        flat = np.asarray(flat, dtype=np.float64)
        shape = (net.gate_dimension, observation_dimension(net))
        if flat.size != shape[0] * shape[1]:
            raise DimensionError(f"flat policy of length {flat.size} does not fit {shape}")
        return cls(flat.reshape(shape))

    def check(self, net: MaxoutNet) -> None:
        want = (net.gate_dimension, observation_dimension(net))
        if self.theta.shape != want:
            raise DimensionError(f"policy shape {self.theta.shape} does not match net {want}")


def act(params: PolicyParams, o: np.ndarray) -> np.ndarray:
    """Gate vector ``dim(A) * softmax(theta @ o)``; entries average to one."""
    o = np.asarray(o, dtype=np.float64)
    if o.shape[-1] != params.observation_dim:
        raise DimensionError(
            f"observation length {o.shape[-1]} does not match policy input {params.observation_dim}"
        )
    logits = o @ params.theta.T
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    # Scaling before dividing keeps zero logits at exactly 1.0 for any dimension.
    return (params.action_dim * z) / z.sum(axis=-1, keepdims=True)


_MAGIC = b"DPOL"


def save(params: PolicyParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", params.action_dim, params.observation_dim))
        fh.write(np.ascontiguousarray(params.theta, dtype="<f8").tobytes())


def load(path) -> PolicyParams:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, not a policy file")
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<QQ", blob, 4)
    if len(blob) != 20 + 8 * rows * cols:
        raise FormatError(f"{path}: expected {20 + 8 * rows * cols} bytes, found {len(blob)}")
    theta = np.frombuffer(blob, "<f8", rows * cols, 20).astype(np.float64)
    return PolicyParams(theta.reshape(rows, cols))

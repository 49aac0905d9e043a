"""Dense tensor primitives and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects in float64. Every primitive
accepts either a single ``(c, m, n)`` tensor or a batch ``(B, c, m, n)``;
the map axis is always ``-3``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes do not agree."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


# --------------------------------------------------------------------------
# Random streams


_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox4x64 generator: the pair is used as the 128-bit key,
    so streams with different ids never overlap and each one is
    reproducible regardless of what other streams have drawn.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self.generator = np.random.Generator(self._bitgen)

    def spawn(self, stream_id: int) -> "RngStream":
        """Return an independent stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> np.ndarray:
        """Full generator position as 13 unsigned 64-bit words."""
        st = self._bitgen.state
        words = [
            *st["state"]["counter"],
            *st["state"]["key"],
            *st["buffer"],
            st["buffer_pos"],
            st["has_uint32"],
            st["uinteger"],
        ]
        return np.array([int(w) for w in words], dtype=np.uint64)

    def set_state(self, words) -> None:
        w = [int(x) for x in np.asarray(words, dtype=np.uint64)]
        if len(w) != 13:
            raise ValueError(f"expected 13 state words, got {len(w)}")
        self.seed, self.stream_id = w[4], w[5]
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(w[0:4], dtype=np.uint64),
                "key": np.array(w[4:6], dtype=np.uint64),
            },
            "buffer": np.array(w[6:10], dtype=np.uint64),
            "buffer_pos": w[10],
            "has_uint32": w[11],
            "uinteger": w[12],
        }

    @classmethod
    def from_state(cls, words) -> "RngStream":
        w = np.asarray(words, dtype=np.uint64)
        rng = cls(int(w[4]), int(w[5]))
        rng.set_state(w)
        return rng

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian_sample(rng: RngStream, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. standard normal values from ``rng``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    return rng.normal(int(count))


# --------------------------------------------------------------------------
# Convolution


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape (..., m', n', k, k) over the last two axes."""
    w = sliding_window_view(x, (k, k), axis=(-2, -1))
    return w[..., ::stride, ::stride, :, :]


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def conv2d_valid(x: np.ndarray, filters: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation summed over input maps.

    Args:
        x: input of shape ``(c, m, n)`` or ``(B, c, m, n)``.
        filters: weights of shape ``(c, c_out, k, k)``; ``filters[i, j]``
            connects input map ``i`` to output map ``j``.
        stride: spatial step, at least 1.

    Returns:
        Tensor of shape ``(c_out, m', n')`` (batched if ``x`` was) with
        ``m' = (m - k) // stride + 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if x.ndim not in (3, 4) or filters.ndim != 4:
        raise DimensionError(
            f"expected input (c,m,n) or (B,c,m,n) and filters (c,c',k,k); "
            f"got {x.shape} and {filters.shape}"
        )
    c, _, k, k2 = filters.shape
    if k != k2:
        raise DimensionError(f"filters must be square, got {filters.shape}")
    if x.shape[-3] != c:
        raise DimensionError(
            f"input has {x.shape[-3]} maps but filters expect {c}: "
            f"input {x.shape}, filters {filters.shape}"
        )
    if k > x.shape[-2] or k > x.shape[-1]:
        raise DimensionError(f"kernel {k} larger than input maps {x.shape[-2:]}")
    cols = _windows(x, k, stride)  # (..., c, m', n', k, k)
    lead = cols.ndim - 5
    out = np.tensordot(cols, filters, axes=([lead, lead + 3, lead + 4], [0, 2, 3]))
    # (..., m', n', c_out) -> (..., c_out, m', n')
    return np.moveaxis(out, -1, -3)


def conv2d_backward(
    x: np.ndarray, filters: np.ndarray, dout: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_valid` for a batch.

    Returns ``(dx, dfilters)`` for ``x`` of shape ``(B, c, m, n)`` and
    upstream gradient ``dout`` of shape ``(B, c_out, m', n')``.
    """
    c, _, k, _ = filters.shape
    cols = _windows(x, k, stride)  # (B, c, m', n', k, k)
    dfilters = np.tensordot(cols, dout, axes=([0, 2, 3], [0, 2, 3]))  # (c, k, k, c_out)
    dfilters = np.moveaxis(dfilters, -1, 1)
    dcols = np.tensordot(dout, filters, axes=([1], [1]))  # (B, m', n', c, k, k)
    mo, no = dout.shape[-2:]
    dx = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            patch = np.moveaxis(dcols[..., u, v], -1, 1)  # (B, c, m', n')
            dx[:, :, u : u + stride * mo : stride, v : v + stride * no : stride] += patch
    return dx, dfilters


# --------------------------------------------------------------------------
# Pooling


def channel_max_pool(x: np.ndarray, block: int, return_index: bool = False):
    """Maxout over ``block`` consecutive maps.

    Output map ``j`` is the pixelwise max of input maps ``j*block .. j*block+block-1``.
    With ``return_index`` the winning offset within each block is returned
    too (ties go to the smallest offset).
    """
    x = np.asarray(x, dtype=np.float64)
    if block < 1 or x.shape[-3] % block:
        raise DimensionError(f"block {block} does not divide {x.shape[-3]} maps")
    shape = x.shape[:-3] + (x.shape[-3] // block, block) + x.shape[-2:]
    grouped = x.reshape(shape)
    idx = np.argmax(grouped, axis=-3)
    out = np.take_along_axis(grouped, idx[..., None, :, :], axis=-3)[..., 0, :, :]
    if return_index:
        return out, idx
    return out


def channel_max_backward(dout: np.ndarray, idx: np.ndarray, block: int) -> np.ndarray:
    shape = dout.shape[:-3] + (dout.shape[-3], block) + dout.shape[-2:]
    grad = np.zeros(shape)
    np.put_along_axis(grad, idx[..., None, :, :], dout[..., None, :, :], axis=-3)
    return grad.reshape(dout.shape[:-3] + (dout.shape[-3] * block,) + dout.shape[-2:])


def spatial_max_pool(x: np.ndarray, window: int, stride: int, return_index: bool = False):
    """Per-map max over ``window x window`` patches taken every ``stride`` pixels.

    The recorded index is the row-major position inside the patch of the
    first maximal element.
    """
    x = np.asarray(x, dtype=np.float64)
    if window < 1 or stride < 1:
        raise DimensionError("window and stride must be >= 1")
    if window > x.shape[-2] or window > x.shape[-1]:
        raise DimensionError(f"window {window} larger than maps {x.shape[-2:]}")
    w = _windows(x, window, stride)
    flat = w.reshape(w.shape[:-2] + (window * window,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if return_index:
        return out, idx
    return out


def spatial_max_backward(
    dout: np.ndarray, idx: np.ndarray, in_shape, window: int, stride: int
) -> np.ndarray:
    dx = np.zeros(in_shape)
    mo, no = dout.shape[-2:]
    for u in range(window):
        for v in range(window):
            hit = idx == u * window + v
            if hit.any():
                dx[..., u : u + stride * mo : stride, v : v + stride * no : stride] += dout * hit
    return dx


# --------------------------------------------------------------------------
# Softmax


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)

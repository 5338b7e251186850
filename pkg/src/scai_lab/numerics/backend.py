"""Convolution kernel backend selection.

The compiled Cython kernels are used when importable; otherwise, or when
``SCAI_LAB_BACKEND=python`` is set, the numpy implementations below are used.
Both backends compute same-padding, stride-1 convolutions with odd square
kernels on C-contiguous (N, C, H, W) arrays.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


class NumpyKernels:
    name = "python"

    @staticmethod
    def conv2d_forward(x, w, b):
        out = np.einsum("nchwij,ocij->nohw", _windows(x, w.shape[2]), w, optimize=True)
        out += b[None, :, None, None]
        return np.ascontiguousarray(out, dtype=x.dtype)

    @staticmethod
    def conv2d_grad_input(gy, w):
        # correlation with the spatially flipped, channel-transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        out = np.einsum("nchwij,ocij->nohw", _windows(gy, w.shape[2]), wf, optimize=True)
        return np.ascontiguousarray(out, dtype=gy.dtype)

    @staticmethod
    def conv2d_grad_weight(x, gy, k):
        gw = np.einsum("nchwij,nohw->ocij", _windows(x, k), gy, optimize=True)
        gb = gy.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gw, dtype=x.dtype), gb.astype(x.dtype)


class CompiledKernels:
    name = "compiled"

    def __init__(self, mod):
        self._mod = mod

    def conv2d_forward(self, x, w, b):
        out = np.empty((x.shape[0], w.shape[0], x.shape[2], x.shape[3]), dtype=x.dtype)
        self._mod.conv2d_forward(x, w, b, out)
        return out

    def conv2d_grad_input(self, gy, w):
        gx = np.empty((gy.shape[0], w.shape[1], gy.shape[2], gy.shape[3]), dtype=gy.dtype)
        self._mod.conv2d_grad_input(gy, w, gx)
        return gx

    def conv2d_grad_weight(self, x, gy, k):
        gw = np.empty((gy.shape[1], x.shape[1], k, k), dtype=x.dtype)
        gb = np.empty(gy.shape[1], dtype=x.dtype)
        self._mod.conv2d_grad_weight(x, gy, gw, gb)
        return gw, gb


def load_backend(name=None):
    """Return a kernel backend; ``name`` is "compiled", "python" or None (auto)."""
    name = name or os.environ.get("SCAI_LAB_BACKEND", "auto")
    if name == "python":
        return NumpyKernels()
    try:
        from . import _kernels
    except ImportError:
        if name == "compiled":
            raise
        return NumpyKernels()
    return CompiledKernels(_kernels)


kernels = load_backend()


def use_backend(name):
    """Switch the process-wide backend (used by tests and the benchmark)."""
    global kernels
    kernels = load_backend(name)
    return kernels

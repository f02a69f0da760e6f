"""Dense tensor kernels with fixed, documented accumulation order.

Values are plain numpy arrays: float32 by default, float64 for gradient
checking. Every accumulating kernel follows one contract:

    products are formed in float64 (exact for float32 inputs) and summed
    sequentially in ascending index order over the reduction axis, per
    output element; the final result is cast back to the input dtype.

This makes the optimized (numba-compiled) path bit-identical to a naive
Python reference loop, and bit-stable across runs and thread counts.
Shapes are validated strictly; nothing broadcasts except scalar-tensor
(plus the explicitly named row-bias op `add_bias`).

Finiteness policy: kernels do not scan their inputs; NaN/Inf detection
happens at the model-forward and loss boundaries (see models/training)
and at quantizer entry.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from quantnoise.errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_dtype(*arrays):
    for a in arrays:
        if a.dtype.type not in _FLOAT_DTYPES:
            raise ShapeError(f"expected float32/float64 array, got {a.dtype}")
    if len({a.dtype.type for a in arrays}) > 1:
        raise ShapeError("mixed dtypes: " + ", ".join(str(a.dtype) for a in arrays))


# ---------------------------------------------------------------------------
# numba cores (float64 accumulation, sequential over the reduction axis)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _mm_core(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for t in range(k):
            av = np.float64(a[i, t])
            for j in range(n):
                out[i, j] += av * np.float64(b[t, j])
    return out


@njit(cache=True, nogil=True)
def _col2im_core(dcols, n_im, c_in, h_pad, w_pad, kh, kw, oh, ow, stride):
    # scatter-add in row-major (row, t) order; float64 accumulator
    dxp = np.zeros((n_im, c_in, h_pad, w_pad), dtype=np.float64)
    rows = dcols.shape[0]
    for r in range(rows):
        n = r // (oh * ow)
        rem = r % (oh * ow)
        i = rem // ow
        j = rem % ow
        t = 0
        for c in range(c_in):
            for u in range(kh):
                for v in range(kw):
                    dxp[n, c, i * stride + u, j * stride + v] += np.float64(dcols[r, t])
                    t += 1
    return dxp


@njit(cache=True, nogil=True)
def _seqsum0_core(a):
    # sum over axis 0, sequential in ascending index, vectorized over axis 1
    k, n = a.shape
    out = np.zeros(n, dtype=np.float64)
    for t in range(k):
        for j in range(n):
            out[j] += np.float64(a[t, j])
    return out


@njit(cache=True, nogil=True)
def _pool_scatter_core(upstream_flat, sel, n, c, h_pad, w_pad, oh, ow, kh, kw, stride):
    # route each window's upstream value to its selected in-window offset
    dxp = np.zeros((n, c, h_pad, w_pad), dtype=np.float64)
    idx = 0
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    s = sel[idx]
                    u = s // kw
                    v = s % kw
                    dxp[b, ch, i * stride + u, j * stride + v] += np.float64(upstream_flat[idx])
                    idx += 1
    return dxp


# ---------------------------------------------------------------------------
# matmul / conv2d
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product [m,k] x [k,n] -> [m,n], sequential-k accumulation."""
    _check_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _mm_core(a, b).astype(a.dtype)


def _conv_out_size(h: int, k: int, stride: int, padding: int) -> int:
    span = h + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output size not integral: input {h}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    return span // stride + 1


def pad_nchw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix [N*OH*OW, C*kh*kw]; column order is (c, u, v) row-major."""
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    xp = pad_nchw(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, OH, OW, kh, kw] -> [N, OH, OW, C, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation [N,C,H,W] * [F,C,kh,kw] -> [N,F,OH,OW].

    Per output element the accumulation order over (c, u, v) matches the
    naive six-loop reference exactly.
    """
    _check_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, kernel C={ck}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    wmat = w.reshape(f, c * kh * kw).T  # [C*kh*kw, F], same (c,u,v) order
    out = _mm_core(cols, np.ascontiguousarray(wmat))
    return out.astype(x.dtype).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)


def conv2d_backward(x, w, upstream, stride=1, padding=0):
    """Gradients (dx, dw) of conv2d. Deterministic; used by autodiff."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    _, _, oh, ow = upstream.shape
    up2 = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1).reshape(n * oh * ow, f))
    cols = im2col(x, kh, kw, stride, padding)
    dwmat = _mm_core(np.ascontiguousarray(cols.T), up2)      # [C*kh*kw, F]
    dw = dwmat.T.reshape(f, c, kh, kw).astype(w.dtype)
    wmat = np.ascontiguousarray(w.reshape(f, c * kh * kw))
    dcols = _mm_core(up2, wmat)                              # [rows, C*kh*kw]
    dxp = _col2im_core(dcols, n, c, h + 2 * padding, wd + 2 * padding,
                       kh, kw, oh, ow, stride)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp.astype(x.dtype), dw


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum; scalar-tensor is the only permitted broadcast."""
    if np.isscalar(b) or getattr(b, "ndim", None) == 0:
        _check_dtype(a)
        return (a + a.dtype.type(b)).astype(a.dtype)
    _check_dtype(a, b)
    _check_same_shape(a, b, "add")
    return a + b


def mul(a, b):
    """Elementwise product; scalar-tensor is the only permitted broadcast."""
    if np.isscalar(b) or getattr(b, "ndim", None) == 0:
        _check_dtype(a)
        return (a * a.dtype.type(b)).astype(a.dtype)
    _check_dtype(a, b)
    _check_same_shape(a, b, "mul")
    return a * b


def add_bias(x, b):
    """Explicit row-broadcast op: [m,n] + [n]. The one named broadcast."""
    _check_dtype(x, b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias expects [m,n]+[n], got {x.shape}+{b.shape}")
    return x + b[None, :]


def relu(x):
    _check_dtype(x)
    return np.maximum(x, x.dtype.type(0))


def flatten(x):
    """[N, ...] -> [N, prod(...)] copy."""
    _check_dtype(x)
    return np.ascontiguousarray(x.reshape(x.shape[0], -1))


def subsample2(x):
    """Take every second pixel in H and W (pure slicing, no arithmetic)."""
    _check_dtype(x)
    if x.ndim != 4:
        raise ShapeError(f"subsample2 expects [N,C,H,W], got {x.shape}")
    return np.ascontiguousarray(x[:, :, ::2, ::2])


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool(x, kernel: int = 2, stride: int | None = None, padding: int = 0):
    """Max pooling with floor output semantics.

    Returns (out, selection) where selection holds, per window, the flat
    in-window offset (row-major scan order) of the first maximal element;
    ties route to the earliest offset. Selection feeds the backward pass.
    """
    _check_dtype(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects [N,C,H,W], got {x.shape}")
    stride = stride or kernel
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool window {kernel} larger than input {x.shape}")
    xp = pad_nchw(x, padding, value=-np.inf) if padding else x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow].reshape(n, c, oh, ow, kernel * kernel)
    sel = np.argmax(win, axis=-1)  # first max in scan order
    out = np.take_along_axis(win, sel[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), sel.astype(np.int64)


def maxpool_backward(x_shape, sel, upstream, kernel=2, stride=None, padding=0):
    stride = stride or kernel
    n, c, h, w = x_shape
    _, _, oh, ow = upstream.shape
    dxp = _pool_scatter_core(
        np.ascontiguousarray(upstream.reshape(-1)),
        np.ascontiguousarray(sel.reshape(-1)),
        n, c, h + 2 * padding, w + 2 * padding, oh, ow, kernel, kernel, stride)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp.astype(upstream.dtype)


def _pool_patch_edges(in_size: int, out_size: int):
    starts = (np.arange(out_size) * in_size) // out_size
    ends = -((-np.arange(1, out_size + 1) * in_size) // out_size)  # ceil
    return starts, ends


def avgpool(x, output_size: tuple[int, int]):
    """Adaptive average pooling to `output_size` (torch-style patch edges).

    Each output cell averages its patch; patch cells are summed in
    row-major order before one division by the patch size.
    """
    _check_dtype(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out_h, out_w = output_size
    hs, he = _pool_patch_edges(h, out_h)
    ws, we = _pool_patch_edges(w, out_w)
    out = np.empty((n, c, out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            patch = x[:, :, hs[i]:he[i], ws[j]:we[j]].astype(np.float64)
            acc = np.zeros((n, c), dtype=np.float64)
            for u in range(patch.shape[2]):
                for v in range(patch.shape[3]):
                    acc += patch[:, :, u, v]
            out[:, :, i, j] = acc / (patch.shape[2] * patch.shape[3])
    return out.astype(x.dtype)


def avgpool_backward(x_shape, output_size, upstream):
    n, c, h, w = x_shape
    out_h, out_w = output_size
    hs, he = _pool_patch_edges(h, out_h)
    ws, we = _pool_patch_edges(w, out_w)
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            cnt = (he[i] - hs[i]) * (we[j] - ws[j])
            dx[:, :, hs[i]:he[i], ws[j]:we[j]] += (
                upstream[:, :, i, j].astype(np.float64)[:, :, None, None] / cnt)
    return dx.astype(upstream.dtype)


# ---------------------------------------------------------------------------
# reductions / softmax
# ---------------------------------------------------------------------------

def reduce_sum(x, axis: int):
    """Sum over one axis: sequential ascending over that axis."""
    _check_dtype(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"reduce_sum axis {axis} out of range for {x.shape}")
    axis = axis % x.ndim
    moved = np.ascontiguousarray(np.moveaxis(x, axis, 0))
    k = moved.shape[0]
    rest = moved.reshape(k, -1)
    out = _seqsum0_core(rest)
    return out.astype(x.dtype).reshape(moved.shape[1:])


def reduce_sum_all(x):
    """Full reduction: axes collapsed last-to-first, each sequential."""
    _check_dtype(x)
    out = x
    while out.ndim > 0:
        out = reduce_sum(out, out.ndim - 1) if out.ndim > 1 else \
            reduce_sum(out, 0)
    return out


def reduce_mean_all(x):
    n = x.size
    return (reduce_sum_all(x).astype(np.float64) / n).astype(x.dtype)


def softmax_rows(x):
    """Row softmax of a [m, n] matrix with max-subtraction stabilization.

    The denominator sums exp terms sequentially in ascending class order.
    """
    _check_dtype(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects [m,n], got {x.shape}")
    x64 = x.astype(np.float64)
    m = np.max(x64, axis=1, keepdims=True)
    e = np.exp(x64 - m)
    denom = _seqsum0_core(np.ascontiguousarray(e.T))  # per row, ascending class
    return (e / denom[:, None]).astype(x.dtype)


def argmax_rows(x):
    _check_dtype(x)
    if x.ndim != 2:
        raise ShapeError(f"argmax_rows expects [m,n], got {x.shape}")
    return np.argmax(x, axis=1)

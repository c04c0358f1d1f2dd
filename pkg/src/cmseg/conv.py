"""3D convolution and transposed convolution on ``(B, C, D, H, W)`` tensors.

conv3d gathers the shifted input windows into a column matrix and contracts it
with a single matmul; when that matrix would exceed ``IM2COL_BYTES`` it loops
over kernel offsets with one matmul each instead.  A transposed conv whose
kernel equals its stride (no overlap, no padding) is one reshaped matmul.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import ShapeError, Tensor, _result, as_tensor


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _channels_first_matmul(w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``(Co, Ci) x (Ci, ...) -> (Co, ...)``."""
    ci = x.shape[0]
    return (w2 @ x.reshape(ci, -1)).reshape((w2.shape[0],) + x.shape[1:])


# Column matrices above this many bytes fall back to the per-offset loop.
IM2COL_BYTES = 256 * 2**20


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x [B,Ci,D,H,W]`` with ``w [Co,Ci,kd,kh,kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    bsz, ci, *spatial = x.shape
    co, wci, *kernel = w.shape
    if wci != ci:
        raise ShapeError(f"conv3d channel mismatch: input has {ci}, weight expects {wci}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({co},)")
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError("stride must be >= 1")
    out_sp = tuple(conv_output_size(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d output would be empty: input {spatial}, kernel {kernel}, padding {padding}")

    # channel-major working layout: (Ci, B, D, H, W)
    xc = np.transpose(x.data, (1, 0, 2, 3, 4))
    if any(padding):
        pd, ph, pw = padding
        xp = np.zeros((ci, bsz) + tuple(s + 2 * p for s, p in zip(spatial, padding)), dtype=x.dtype)
        xp[:, :, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]] = xc
    else:
        xp = np.ascontiguousarray(xc)

    def window(arr, off):
        return arr[(slice(None), slice(None)) + tuple(
            slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(off, stride, out_sp))]

    offsets = list(itertools.product(*(range(k) for k in kernel)))
    ntaps = len(offsets)
    positions = bsz * int(np.prod(out_sp))
    use_cols = ntaps > 1 and ntaps * ci * positions * xp.itemsize <= IM2COL_BYTES
    cols = None
    if ntaps == 1:
        out = _channels_first_matmul(w.data[:, :, 0, 0, 0], window(xp, (0,) * 3))
    elif use_cols:
        # cols: (taps, Ci, B, Do, Ho, Wo); weight rows ordered to match
        cols = np.empty((ntaps, ci, bsz) + out_sp, dtype=xp.dtype)
        for t, off in enumerate(offsets):
            cols[t] = window(xp, off)
        cols = cols.reshape(ntaps * ci, positions)
        w2 = np.transpose(w.data, (0, 2, 3, 4, 1)).reshape(co, ntaps * ci)
        out = (w2 @ cols).reshape((co, bsz) + out_sp)
    else:
        out = np.zeros((co, bsz) + out_sp, dtype=np.result_type(x.dtype, w.dtype))
        for off in offsets:
            out += _channels_first_matmul(w.data[(slice(None), slice(None)) + off], window(xp, off))
    if b is not None:
        out += b.data.reshape(co, 1, 1, 1, 1)
    result = np.ascontiguousarray(np.transpose(out, (1, 0, 2, 3, 4)))

    def backward(g):
        gc = np.ascontiguousarray(np.transpose(g, (1, 0, 2, 3, 4)))  # (Co, B, ...)
        g2 = gc.reshape(co, -1)
        gx = gw = gb = None
        if w.requires_grad:
            if cols is not None:
                gw2 = (g2 @ cols.T).reshape((co,) + tuple(kernel) + (ci,))
                gw = np.ascontiguousarray(np.transpose(gw2, (0, 4, 1, 2, 3)))
            else:
                gw = np.zeros_like(w.data)
                for off in offsets:
                    xs = window(xp, off).reshape(ci, -1)
                    gw[(slice(None), slice(None)) + off] = g2 @ xs.T
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if cols is not None:
                w2 = np.transpose(w.data, (0, 2, 3, 4, 1)).reshape(co, ntaps * ci)
                gcols = (w2.T @ g2).reshape((ntaps, ci, bsz) + out_sp)
                for t, off in enumerate(offsets):
                    window(gxp, off)[...] += gcols[t]
            else:
                for off in offsets:
                    wt = w.data[(slice(None), slice(None)) + off].T  # (Ci, Co)
                    window(gxp, off)[...] += _channels_first_matmul(wt, gc)
            pd, ph, pw = padding
            gxc = gxp[:, :, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]]
            gx = np.ascontiguousarray(np.transpose(gxc, (1, 0, 2, 3, 4)))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(result, parents, backward)


def conv_transpose3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``w`` has layout ``[Ci, Co, kd, kh, kw]``.

    Output size per axis is ``(S - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    bsz, ci, *spatial = x.shape
    wci, co, *kernel = w.shape
    if wci != ci:
        raise ShapeError(f"conv_transpose3d channel mismatch: input has {ci}, weight expects {wci}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv_transpose3d bias shape {b.shape} != ({co},)")
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError("stride must be >= 1")
    out_sp = tuple(conv_transpose_output_size(s, k, st, p)
                   for s, k, st, p in zip(spatial, kernel, stride, padding))
    if min(out_sp) < 1:
        raise ShapeError(f"conv_transpose3d output would be empty for input {spatial}")
    full_sp = tuple(o + 2 * p for o, p in zip(out_sp, padding))
    xc = np.ascontiguousarray(np.transpose(x.data, (1, 0, 2, 3, 4)))  # (Ci, B, ...)
    dtype = np.result_type(x.dtype, w.dtype)
    non_overlapping = list(kernel) == list(stride) and not any(padding)

    def window(arr, off):
        return arr[(slice(None), slice(None)) + tuple(
            slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(off, stride, spatial))]

    offsets = list(itertools.product(*(range(k) for k in kernel)))

    if non_overlapping:
        kd, kh, kw = kernel
        d, h, wd = spatial
        # (Co*kd*kh*kw, Ci) @ (Ci, B*D*H*W)
        wm = w.data.reshape(ci, -1).T
        y = (wm @ xc.reshape(ci, -1)).reshape(co, kd, kh, kw, bsz, d, h, wd)
        full = np.transpose(y, (0, 4, 5, 1, 6, 2, 7, 3)).reshape((co, bsz) + full_sp)
    else:
        full = np.zeros((co, bsz) + full_sp, dtype=dtype)
        for off in offsets:
            wt = w.data[(slice(None), slice(None)) + off].T  # (Co, Ci)
            window(full, off)[...] += _channels_first_matmul(wt, xc)
    pd, ph, pw = padding
    out = full[:, :, pd:pd + out_sp[0], ph:ph + out_sp[1], pw:pw + out_sp[2]]
    if b is not None:
        out = out + b.data.reshape(co, 1, 1, 1, 1)
    result = np.ascontiguousarray(np.transpose(out, (1, 0, 2, 3, 4)))

    def backward(g):
        gc = np.transpose(g, (1, 0, 2, 3, 4))  # (Co, B, ...)
        if any(padding):
            gfull = np.zeros((co, bsz) + full_sp, dtype=g.dtype)
            gfull[:, :, pd:pd + out_sp[0], ph:ph + out_sp[1], pw:pw + out_sp[2]] = gc
        else:
            gfull = np.ascontiguousarray(gc)
        gx = gw = gb = None
        if non_overlapping:
            kd, kh, kw = kernel
            d, h, wd = spatial
            gy = gfull.reshape(co, bsz, d, kd, h, kh, wd, kw)
            gy = np.ascontiguousarray(np.transpose(gy, (0, 3, 5, 7, 1, 2, 4, 6))).reshape(co * kd * kh * kw, -1)
            if w.requires_grad:
                gw = (xc.reshape(ci, -1) @ gy.T).reshape(w.shape)
            if x.requires_grad:
                wm = w.data.reshape(ci, -1)
                gx = np.transpose((wm @ gy).reshape((ci, bsz) + tuple(spatial)), (1, 0, 2, 3, 4))
        else:
            x2 = xc.reshape(ci, -1)
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for off in offsets:
                    gs = np.ascontiguousarray(window(gfull, off)).reshape(co, -1)
                    gw[(slice(None), slice(None)) + off] = x2 @ gs.T
            if x.requires_grad:
                gxc = np.zeros((ci, bsz) + tuple(spatial), dtype=g.dtype)
                for off in offsets:
                    gxc += _channels_first_matmul(w.data[(slice(None), slice(None)) + off], window(gfull, off))
                gx = np.transpose(gxc, (1, 0, 2, 3, 4))
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        if b is not None and b.requires_grad:
            gb = gc.sum(axis=(1, 2, 3, 4))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(result, parents, backward)

"""Differentiable primitives: convolution, linear algebra, activations,
pooling, dropout, normalization and losses.

Layout convention is [batch, channel, depth, height, width] throughout.
Broadcast in elementwise ops is restricted to size-1 dims; that is the only
case the networks need and anything wider tends to hide shape bugs.
"""

import numpy as np
from scipy.special import erf

from . import _kernels
from .tensor import ShapeError, Tensor, from_op

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_dim(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _conv3d_forward_dense(xp, wd, stride, do, ho, wo):
    """Standard (groups=1) conv as an offset loop of channel matmuls."""
    n, cin = xp.shape[0], xp.shape[1]
    cout, k = wd.shape[0], wd.shape[2]
    acc = np.zeros((n, do, ho, wo, cout), dtype=xp.dtype)
    hi_d = stride * (do - 1) + 1
    hi_h = stride * (ho - 1) + 1
    hi_w = stride * (wo - 1) + 1
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                xs = xp[:, :, kz:kz + hi_d:stride, ky:ky + hi_h:stride,
                        kx:kx + hi_w:stride]
                cols = np.moveaxis(xs, 1, -1).reshape(-1, cin)
                acc += (cols @ wd[:, :, kz, ky, kx].T).reshape(
                    n, do, ho, wo, cout)
    return np.ascontiguousarray(np.moveaxis(acc, -1, 1))


def _conv3d_backward_dense(xp, wd, go, stride, need_gx, need_gw):
    n, cin = xp.shape[0], xp.shape[1]
    cout, k = wd.shape[0], wd.shape[2]
    do, ho, wo = go.shape[2], go.shape[3], go.shape[4]
    go_cols = np.moveaxis(go, 1, -1).reshape(-1, cout)
    gxp = np.zeros_like(xp) if need_gx else None
    gw = np.zeros_like(wd) if need_gw else None
    hi_d = stride * (do - 1) + 1
    hi_h = stride * (ho - 1) + 1
    hi_w = stride * (wo - 1) + 1
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                sl = (slice(None), slice(None),
                      slice(kz, kz + hi_d, stride),
                      slice(ky, ky + hi_h, stride),
                      slice(kx, kx + hi_w, stride))
                if need_gw:
                    cols = np.moveaxis(xp[sl], 1, -1).reshape(-1, cin)
                    gw[:, :, kz, ky, kx] = go_cols.T @ cols
                if need_gx:
                    gcols = (go_cols @ wd[:, :, kz, ky, kx]).reshape(
                        n, do, ho, wo, cin)
                    gxp[sl] += np.moveaxis(gcols, -1, 1)
    return gxp, gw


def conv3d(x, w, b=None, stride=1, padding=0, groups=1):
    """3D cross-correlation. groups=1 is standard, groups=Cin depth-wise."""
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError("conv3d expects 5D input and weight")
    n, cin, d, h, wdim = xd.shape
    cout, cg, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2] != wd.shape[3] or wd.shape[3] != wd.shape[4]:
        raise ShapeError("conv3d kernel must be cubic")
    if k % 2 == 0:
        raise ShapeError("conv3d kernel size must be odd")
    if padding < 0:
        raise ShapeError("padding must be non-negative")
    if cin % groups or cout % groups or cg != cin // groups:
        raise ShapeError(
            f"channel/group mismatch: Cin={cin} Cout={cout} groups={groups} "
            f"weight Cin/g={cg}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError("bias must have shape (Cout,)")
    do = _conv_out_dim(d, k, stride, padding)
    ho = _conv_out_dim(h, k, stride, padding)
    wo = _conv_out_dim(wdim, k, stride, padding)
    if min(do, ho, wo) < 1:
        raise ShapeError("conv3d output would be empty")

    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd

    pointwise = k == 1 and stride == 1 and p == 0 and groups == 1
    depthwise = groups == cin and cg == 1 and stride == 1
    if pointwise:
        cols = xd.reshape(n, cin, -1).transpose(0, 2, 1).reshape(-1, cin)
        out = (cols @ wd.reshape(cout, cin).T).reshape(
            n, d * h * wdim, cout).transpose(0, 2, 1).reshape(
            n, cout, d, h, wdim)
    elif depthwise:
        out = np.empty((n, cout, do, ho, wo), dtype=xd.dtype)
        _kernels.dw_conv3d_forward(xp, wd[:, 0], out)
    elif groups == 1:
        out = _conv3d_forward_dense(xp, wd, stride, do, ho, wo)
    else:
        parts = []
        cpg, opg = cin // groups, cout // groups
        for g in range(groups):
            parts.append(_conv3d_forward_dense(
                xp[:, g * cpg:(g + 1) * cpg], wd[g * opg:(g + 1) * opg],
                stride, do, ho, wo))
        out = np.concatenate(parts, axis=1)
    if b is not None:
        out = out + b.data[None, :, None, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(go):
        need_gx = x.requires_grad or x._parents
        need_gw = w.requires_grad or w._parents
        gx = gw = None
        if pointwise:
            go_cols = go.reshape(n, cout, -1).transpose(0, 2, 1).reshape(-1, cout)
            wmat = wd.reshape(cout, cin)
            gxp = None
            if need_gx:
                gx = (go_cols @ wmat).reshape(
                    n, d * h * wdim, cin).transpose(0, 2, 1).reshape(xd.shape)
            if need_gw:
                cols = xd.reshape(n, cin, -1).transpose(0, 2, 1).reshape(-1, cin)
                gw = (go_cols.T @ cols).reshape(wd.shape)
        elif depthwise:
            if need_gx:
                gxp = np.zeros_like(xp)
                _kernels.dw_conv3d_grad_x(np.ascontiguousarray(go),
                                          wd[:, 0], gxp)
            if need_gw:
                gwk = np.zeros(wd[:, 0].shape, dtype=wd.dtype)
                _kernels.dw_conv3d_grad_w(xp, np.ascontiguousarray(go), gwk)
                gw = gwk[:, None]
            if not need_gx:
                gxp = None
        elif groups == 1:
            gxp, gw = _conv3d_backward_dense(xp, wd, go, stride,
                                             need_gx, need_gw)
        else:
            cpg, opg = cin // groups, cout // groups
            gxp = np.zeros_like(xp) if need_gx else None
            gw = np.zeros_like(wd) if need_gw else None
            for g in range(groups):
                gxg, gwg = _conv3d_backward_dense(
                    xp[:, g * cpg:(g + 1) * cpg], wd[g * opg:(g + 1) * opg],
                    go[:, g * opg:(g + 1) * opg], stride, need_gx, need_gw)
                if need_gx:
                    gxp[:, g * cpg:(g + 1) * cpg] = gxg
                if need_gw:
                    gw[g * opg:(g + 1) * opg] = gwg
        if gxp is not None:
            gx = gxp[:, :, p:p + d, p:p + h, p:p + wdim] if p else gxp
        gb = go.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)

    return from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# dense / elementwise
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """y = x @ w (+ b); x is [N, F], w is [F, G]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes {x.shape} x {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError("linear bias shape")
        out = out + b.data[None, :]
    parents = (x, w) if b is None else (x, w, b)

    def backward(go):
        gx = go @ w.data.T
        gw = x.data.T @ go
        if b is None:
            return gx, gw
        return gx, gw, go.sum(axis=0)

    return from_op(out, parents, backward)


def gelu(x):
    """Exact Gaussian-CDF GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(go):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (go * (phi + xd * pdf),)

    return from_op(out, (x,), backward)


def relu(x):
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(go):
        return (go * (xd > 0),)

    return from_op(out, (x,), backward)


def _broadcast_shapes(sa, sb):
    if len(sa) != len(sb):
        raise ShapeError(f"elementwise rank mismatch {sa} vs {sb}")
    out = []
    for a, b in zip(sa, sb):
        if a == b or a == 1 or b == 1:
            out.append(max(a, b))
        else:
            raise ShapeError(f"incompatible shapes {sa} vs {sb}")
    return tuple(out)


def _reduce_to(g, shape):
    axes = tuple(i for i, (go, si) in enumerate(zip(g.shape, shape)) if si == 1 and go != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    shape = _broadcast_shapes(a.shape, b.shape)
    out = a.data + b.data
    assert out.shape == shape

    def backward(go):
        return _reduce_to(go, a.shape), _reduce_to(go, b.shape)

    return from_op(out, (a, b), backward)


def mul(a, b):
    _broadcast_shapes(a.shape, b.shape)
    out = a.data * b.data

    def backward(go):
        return (_reduce_to(go * b.data, a.shape),
                _reduce_to(go * a.data, b.shape))

    return from_op(out, (a, b), backward)


def scale(x, alpha):
    out = x.data * alpha

    def backward(go):
        return (go * alpha,)

    return from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# pooling / reshaping
# ---------------------------------------------------------------------------

def global_avg_pool3d(x):
    """Mean over the spatial dims, keeping them as size 1."""
    if x.data.ndim != 5:
        raise ShapeError("global_avg_pool3d expects [N,C,D,H,W]")
    _, _, d, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def backward(go):
        return (np.broadcast_to(go / (d * h * w), x.data.shape).copy(),)

    return from_op(out, (x,), backward)


def maxpool3d(x, k=2):
    """Non-overlapping max pool; trailing voxels of odd dims are dropped."""
    n, c, d, h, w = x.data.shape
    do, ho, wo = d // k, h // k, w // k
    if min(do, ho, wo) < 1:
        raise ShapeError("maxpool3d input too small")
    xt = x.data[:, :, :do * k, :ho * k, :wo * k]
    win = xt.reshape(n, c, do, k, ho, k, wo, k)
    win = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        n, c, do, ho, wo, k * k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(go):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], go[..., None], axis=-1)
        gwin = gwin.reshape(n, c, do, ho, wo, k, k, k).transpose(
            0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, do * k, ho * k, wo * k)
        gx = np.zeros_like(x.data)
        gx[:, :, :do * k, :ho * k, :wo * k] = gwin
        return (gx,)

    return from_op(out, (x,), backward)


def reshape(x, shape):
    out = x.data.reshape(shape)
    old = x.data.shape

    def backward(go):
        return (go.reshape(old),)

    return from_op(out, (x,), backward)


def flatten(x):
    return reshape(x, (x.data.shape[0], -1))


def concat_channels(a, b):
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat rank mismatch")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(go):
        return go[:, :ca], go[:, ca:]

    return from_op(out, (a, b), backward)


def narrow(x, axis, start, length):
    """Slice [start, start+length) along one axis."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl]

    def backward(go):
        gx = np.zeros_like(x.data)
        gx[sl] = go
        return (gx,)

    return from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization / regularization / loss
# ---------------------------------------------------------------------------

def layernorm_channels(x, gamma, beta, eps=1e-5):
    """Layer norm over the channel axis, independently at every position."""
    xd = x.data
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("layernorm parameter shape")
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(go):
        red = tuple(i for i in range(xd.ndim) if i != 1)
        ggamma = (go * xhat).sum(axis=red)
        gbeta = go.sum(axis=red)
        gh = go * gamma.data.reshape(bshape)
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, ggamma, gbeta

    return from_op(out, (x, gamma, beta), backward)


def dropout(x, p, rng, active=True):
    """Inverted dropout; `active` covers both training and MC-sampling modes."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not active or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p)
    scale_ = 1.0 / (1.0 - p)
    mask = keep.astype(x.data.dtype) * scale_
    out = x.data * mask

    def backward(go):
        return (go * mask,)

    return from_op(out, (x,), backward)


def mse_loss(pred, target):
    td = target.data if isinstance(target, Tensor) else np.asarray(
        target, dtype=pred.data.dtype)
    if pred.data.shape != td.shape:
        raise ShapeError(f"mse shapes {pred.data.shape} vs {td.shape}")
    diff = pred.data - td
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def backward(go):
        return (go * 2.0 * diff / diff.size,)

    return from_op(out, (pred,), backward)


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(go):
        return (np.broadcast_to(go, x.data.shape).copy(),)

    return from_op(out, (x,), backward)


def mean_all(x):
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.data.size

    def backward(go):
        return (np.broadcast_to(go / n, x.data.shape).copy(),)

    return from_op(out, (x,), backward)

"""Axis-restricted convolutions on [X, Y, Z, T, C] tensors.

Two kernel kinds exist: temporal kernels touch only the T axis, spatial
kernels touch only X, Y, Z. Both use zero padding sized to preserve extents
("same"), and an integer stride per convolved axis. ``transpose_conv`` is the
exact linear adjoint of ``conv`` for the same kernel and stride, which is
what makes strided downsampling and learned upsampling mirror images of each
other.

Layout convention: channels live on the last axis; a strided conv divides
the convolved extents by the stride (they must divide evenly), a transposed
conv multiplies them.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, TensorError, as_tensor, _check_finite, _node

TEMPORAL_AXES = (3,)
SPATIAL_AXES = (0, 1, 2)


def _axes_for(kind):
    if kind == "temporal":
        return TEMPORAL_AXES
    if kind == "spatial":
        return SPATIAL_AXES
    raise TensorError(f"unknown kernel kind {kind!r}")


class ConvKernel:
    """Weights plus per-channel bias for one axis-restricted convolution.

    ``taps`` has shape ``(*kernel_extents, in_channels, out_channels)``:
    one scalar footprint per channel pair. Temporal kernels carry exactly
    one convolved extent, spatial kernels three, and every extent must be
    odd so the kernel is centered and "same" padding is unambiguous.

    Used with :func:`conv` the kernel maps ``in_channels -> out_channels``;
    used with :func:`transpose_conv` (the adjoint) it maps
    ``out_channels -> in_channels``.
    """

    def __init__(self, taps, in_channels, out_channels, kind, bias=None):
        taps = as_tensor(taps)
        axes = _axes_for(kind)
        nk = len(axes)
        if taps.ndim != nk + 2:
            raise TensorError(
                f"{kind} kernel taps need {nk} convolved axes plus "
                f"(in, out) channel axes, got shape {taps.shape}"
            )
        kdims = taps.shape[:nk]
        if any(k % 2 == 0 for k in kdims):
            raise TensorError(f"kernel extents must be odd, got {kdims}")
        if taps.shape[nk:] != (in_channels, out_channels):
            raise TensorError(
                f"taps channel axes {taps.shape[nk:]} do not match "
                f"({in_channels}, {out_channels})"
            )
        _check_finite(taps.data, "kernel taps")
        self.taps = taps
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kind = kind
        if bias is not None:
            bias = as_tensor(bias)
            if bias.ndim != 1:
                raise TensorError("bias must be one value per channel")
        self.bias = bias

    @property
    def kernel_extents(self):
        return self.taps.shape[: len(_axes_for(self.kind))]

    def parameters(self):
        ps = [self.taps]
        if self.bias is not None:
            ps.append(self.bias)
        return ps


def impulse_taps(kernel_extents, in_channels, out_channels, dtype=np.float64):
    """Centered unit-impulse taps realizing a near-identity channel map.

    Equal in/out channel counts give the identity map at the center tap;
    unequal counts spread/average with weight 1/in_channels so that a
    widening layer followed by its narrowing mirror composes to identity.
    """
    w = np.zeros(tuple(kernel_extents) + (in_channels, out_channels), dtype=dtype)
    center = tuple(k // 2 for k in kernel_extents)
    if in_channels == out_channels:
        w[center] = np.eye(in_channels, dtype=dtype)
    else:
        w[center] = 1.0 / in_channels
    return w


def _normalize_strides(stride, n_axes):
    if np.isscalar(stride):
        strides = (int(stride),) * n_axes
    else:
        strides = tuple(int(s) for s in stride)
        if len(strides) != n_axes:
            raise TensorError(f"need {n_axes} strides, got {len(strides)}")
    if any(s < 1 for s in strides):
        raise TensorError(f"strides must be >= 1, got {strides}")
    return strides


def _pad_spec(ndim, axes, kdims):
    pads = [(0, 0)] * ndim
    for a, k in zip(axes, kdims):
        pads[a] = (k // 2, k // 2)
    return pads


def _tap_slices(ndim, axes, tap, strides, out_extents):
    sl = [slice(None)] * ndim
    for a, t, s, m in zip(axes, tap, strides, out_extents):
        sl[a] = slice(t, t + (m - 1) * s + 1, s)
    return tuple(sl)


# ---------------------------------------------------------------------------
# raw numpy primitives (shared by forward passes and their adjoints)
# ---------------------------------------------------------------------------


def _corr_forward(x, w, axes, strides):
    """Strided "same" cross-correlation, channel map in_channels->out_channels."""
    nk = len(axes)
    kdims = w.shape[:nk]
    cout = w.shape[-1]
    for a, s in zip(axes, strides):
        if x.shape[a] % s != 0:
            raise TensorError(
                f"extent {x.shape[a]} on axis {a} not divisible by stride {s}"
            )
    xp = np.pad(x, _pad_spec(x.ndim, axes, kdims))
    out_shape = list(x.shape)
    for a, s in zip(axes, strides):
        out_shape[a] = x.shape[a] // s
    out_shape[-1] = cout
    out_extents = [out_shape[a] for a in axes]
    out = np.zeros(out_shape, dtype=x.dtype)
    for tap in np.ndindex(*kdims):
        slab = xp[_tap_slices(x.ndim, axes, tap, strides, out_extents)]
        out += np.tensordot(slab, w[tap], axes=([-1], [0]))
    return out


def _corr_adjoint(z, w, axes, strides):
    """Exact adjoint of :func:`_corr_forward` for the same ``w`` and strides.

    Maps channel count out_channels back to in_channels and multiplies every
    convolved extent by its stride.
    """
    nk = len(axes)
    kdims = w.shape[:nk]
    cin = w.shape[-2]
    z_extents = [z.shape[a] for a in axes]
    pads = _pad_spec(z.ndim, axes, kdims)
    yp_shape = list(z.shape)
    for a, s, p in zip(axes, strides, [pads[a] for a in axes]):
        yp_shape[a] = z.shape[a] * s + p[0] + p[1]
    yp_shape[-1] = cin
    yp = np.zeros(yp_shape, dtype=z.dtype)
    for tap in np.ndindex(*kdims):
        contrib = np.tensordot(z, w[tap], axes=([-1], [-1]))
        yp[_tap_slices(z.ndim, axes, tap, strides, z_extents)] += contrib
    crop = [slice(None)] * z.ndim
    for a, k in zip(axes, kdims):
        crop[a] = slice(k // 2, yp_shape[a] - (k // 2))
    return yp[tuple(crop)]


def _corr_grad_taps(x, gy, axes, strides, kdims):
    """Gradient of :func:`_corr_forward` w.r.t. the taps.

    ``x`` carries the in_channels axis, ``gy`` the out_channels axis; the
    result has shape ``(*kdims, in, out)``.
    """
    xp = np.pad(x, _pad_spec(x.ndim, axes, kdims))
    gy_extents = [gy.shape[a] for a in axes]
    cin, cout = x.shape[-1], gy.shape[-1]
    gw = np.empty(tuple(kdims) + (cin, cout), dtype=x.dtype)
    contract = (list(range(x.ndim - 1)), list(range(x.ndim - 1)))
    for tap in np.ndindex(*kdims):
        slab = xp[_tap_slices(x.ndim, axes, tap, strides, gy_extents)]
        gw[tap] = np.tensordot(slab, gy, axes=contract)
    return gw


def _sum_to_channel(g):
    return g.sum(axis=tuple(range(g.ndim - 1)))


# ---------------------------------------------------------------------------
# autodiff ops
# ---------------------------------------------------------------------------


def _check_conv_input(x, kernel, axis_kind):
    if axis_kind is not None and axis_kind != kernel.kind:
        raise TensorError(
            f"axis kind {axis_kind!r} does not match kernel kind {kernel.kind!r}"
        )
    if x.ndim != 5:
        raise TensorError(
            f"convolution input needs 4 data axes plus a channel axis, got {x.shape}"
        )
    _check_finite(x.data, "convolution input")


def conv(x, kernel, axis_kind=None, stride=1):
    """Strided convolution of ``x`` by ``kernel`` along the kernel's axes.

    Output extents equal input extents divided by the stride on convolved
    axes (stride 1 preserves them); the channel extent becomes
    ``kernel.out_channels``.
    """
    x = as_tensor(x)
    _check_conv_input(x, kernel, axis_kind)
    axes = _axes_for(kernel.kind)
    strides = _normalize_strides(stride, len(axes))
    if x.shape[-1] != kernel.in_channels:
        raise TensorError(
            f"input has {x.shape[-1]} channels, kernel expects {kernel.in_channels}"
        )
    w = kernel.taps
    out_data = _corr_forward(x.data, w.data, axes, strides)
    bias = kernel.bias
    if bias is not None:
        if bias.shape[0] != kernel.out_channels:
            raise TensorError("conv bias must have one value per out channel")
        out_data = out_data + bias.data

    kdims = w.shape[: len(axes)]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = None
        if x.requires_grad or x._backward is not None:
            gx = _corr_adjoint(g, w.data, axes, strides)
        gw = _corr_grad_taps(x.data, g, axes, strides, kdims)
        if bias is None:
            return gx, gw
        return gx, gw, _sum_to_channel(g)

    return _node(out_data, parents, backward)


def transpose_conv(x, kernel, axis_kind=None, stride=1):
    """Transposed (adjoint) convolution: upsamples by ``stride``.

    For any tensors u, v of matching shapes,
    ``<conv(u, k, stride=s), v> == <u, transpose_conv(v, k, stride=s)>``
    holds exactly; the channel map runs out_channels -> in_channels.
    """
    x = as_tensor(x)
    _check_conv_input(x, kernel, axis_kind)
    axes = _axes_for(kernel.kind)
    strides = _normalize_strides(stride, len(axes))
    if x.shape[-1] != kernel.out_channels:
        raise TensorError(
            f"input has {x.shape[-1]} channels, transposed kernel expects "
            f"{kernel.out_channels}"
        )
    w = kernel.taps
    out_data = _corr_adjoint(x.data, w.data, axes, strides)
    bias = kernel.bias
    if bias is not None:
        if bias.shape[0] != kernel.in_channels:
            raise TensorError(
                "transpose_conv bias must have one value per produced channel"
            )
        out_data = out_data + bias.data

    kdims = w.shape[: len(axes)]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = None
        if x.requires_grad or x._backward is not None:
            gx = _corr_forward(g, w.data, axes, strides)
        gw = _corr_grad_taps(g, x.data, axes, strides, kdims)
        if bias is None:
            return gx, gw
        return gx, gw, _sum_to_channel(g)

    return _node(out_data, parents, backward)


# ---------------------------------------------------------------------------
# fixed linear resize (the non-integer grid transform between EEG and source
# grids; a fixed spatial transformer, not a learned one)
# ---------------------------------------------------------------------------


def _resize_weights(n, m):
    """Endpoint-aligned linear interpolation from n to m samples."""
    if n == 1:
        lo = np.zeros(m, dtype=np.intp)
        return lo, lo, np.zeros(m)
    if m == 1:
        pos = np.array([(n - 1) / 2.0])
    else:
        pos = np.linspace(0.0, n - 1.0, m)
    lo = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    frac = pos - lo
    return lo, lo + 1, frac


def linear_resize(x, axis, new_extent):
    """Linear-interpolation resize of one axis to ``new_extent`` samples."""
    x = as_tensor(x)
    n = x.shape[axis]
    m = int(new_extent)
    if m < 1:
        raise TensorError("resize target extent must be >= 1")
    if m == n:
        def backward_id(g):
            return (g,)
        return _node(x.data.copy(), (x,), backward_id)

    lo, hi, frac = _resize_weights(n, m)
    xm = np.moveaxis(x.data, axis, 0)
    shp = (m,) + (1,) * (xm.ndim - 1)
    wlo = (1.0 - frac).reshape(shp).astype(x.dtype)
    whi = frac.reshape(shp).astype(x.dtype)
    ym = wlo * xm[lo] + whi * xm[hi]
    out_data = np.moveaxis(ym, 0, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        gxm = np.zeros_like(xm)
        np.add.at(gxm, lo, wlo * gm)
        np.add.at(gxm, hi, whi * gm)
        return (np.moveaxis(gxm, 0, axis),)

    return _node(out_data, (x,), backward)


def trilinear_resize(x, new_extents, axes=SPATIAL_AXES):
    """Separable trilinear resize of the three spatial axes."""
    out = x
    for axis, m in zip(axes, new_extents):
        out = linear_resize(out, axis, m)
    return out

"""Differentiable primitives used by the generator and discriminator.

All image tensors are batched ``N x C x H x W``; 3-D inputs are treated as a
batch of one and returned without the batch axis. Every op returns a
:class:`~spheregan.autodiff.Tensor` whose backward closure gives exact
gradients for its inputs and parameters.
"""
from __future__ import annotations

import weakref

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .autodiff import as_tensor, make
from .geometry import SamplingGrid


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# bilinear sampling


def interpolation_matrix(coords, height, width, dtype=np.float64):
    """Sparse ``P x (H*W)`` matrix blending the 4 pixels around each of P coordinates.

    Columns wrap periodically. Rows may extend half a pixel past either pole;
    the missing neighbour row is then the same polar row on the opposite
    meridian (column + W/2).
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    r, c = coords[:, 0], coords[:, 1]
    tol = 1e-9
    bad = (r < -0.5 - tol) | (r > height - 0.5 + tol) | ~np.isfinite(r) | ~np.isfinite(c)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"sample row {r[i]} outside [-0.5, {height - 0.5}]: grid is not pole-normalized")

    r0 = np.floor(r)
    fr = r - r0
    c0 = np.floor(c)
    fc = c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    rows, cols, vals = [], [], []
    n = len(r)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        rr = r0 + dr
        flip = (rr < 0) | (rr >= height)
        rr = np.clip(rr, 0, height - 1)
        shift = np.where(flip, width // 2, 0)
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            cc = np.mod(c0 + dc + shift, width)
            rows.append(np.arange(n))
            cols.append(rr * width + cc)
            vals.append(wr * wc)
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, height * width),
    )
    return m.tocsr().astype(dtype)


def _batched(x):
    x = as_tensor(x)
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.data.shape), True
    if x.data.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.data.shape}")
    return x, False


def _unbatch(out, squeeze):
    if not squeeze:
        return out
    shape = out.data.shape[1:]
    return reshape(out, shape)


def bilinear_sample(x, coords):
    """Sample every channel of ``x`` at fractional (row, col) ``coords`` (shape ``... x 2``)."""
    x, squeeze = _batched(x)
    n, c, h, w = x.data.shape
    coords = np.asarray(coords, dtype=np.float64)
    lead = coords.shape[:-1]
    m = interpolation_matrix(coords, h, w, x.data.dtype)
    flat = x.data.reshape(n * c, h * w)
    out = np.asarray(m @ flat.T).T.reshape(n, c, *lead)

    def backward(g):
        gx = np.asarray(m.T @ g.reshape(n * c, -1).T).T
        return (gx.reshape(n, c, h, w),)

    return _unbatch(make(out, (x,), backward, "bilinear_sample"), squeeze)


class _Sampler:
    """Tap-major interpolation matrices for one grid, cached per dtype."""

    def __init__(self, grid: SamplingGrid):
        self.taps = grid.taps_per_pixel
        self.pixels = grid.out_height * grid.out_width
        tap_major = np.ascontiguousarray(grid.coords.transpose(2, 0, 1, 3))
        self._m64 = interpolation_matrix(tap_major, grid.height, grid.width, np.float64)
        self._by_dtype = {}

    def matrices(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in self._by_dtype:
            m = self._m64.astype(dtype)
            self._by_dtype[dtype] = (m, m.T.tocsr())
        return self._by_dtype[dtype]

    def gather(self, x):
        """``N x C x H x W`` -> tap-major samples ``taps x pixels x N x C``."""
        n, c, h, w = x.shape
        m, _ = self.matrices(x.dtype)
        flat = np.ascontiguousarray(x.reshape(n * c, h * w).T)
        return (m @ flat).reshape(self.taps, self.pixels, n, c)

    def scatter(self, g, shape):
        """Adjoint of :meth:`gather`."""
        n, c, h, w = shape
        _, mt = self.matrices(g.dtype)
        flat = mt @ g.reshape(self.taps * self.pixels, n * c)
        return np.ascontiguousarray(flat.T).reshape(n, c, h, w)


_samplers: "weakref.WeakKeyDictionary[SamplingGrid, _Sampler]" = weakref.WeakKeyDictionary()


def sampler_for(grid: SamplingGrid) -> _Sampler:
    s = _samplers.get(grid)
    if s is None:
        s = _samplers[grid] = _Sampler(grid)
    return s


# --------------------------------------------------------------------------
# convolutions and pooling


def sphere_conv2d(x, weight, bias, grid: SamplingGrid):
    """Spherical 3x3 convolution; ``weight`` is ``Cout x Cin x 9`` in grid tap order."""
    x, squeeze = _batched(x)
    weight, bias = as_tensor(weight), as_tensor(bias)
    n, cin, h, w = x.data.shape
    cout, wcin, taps = weight.data.shape
    if (h, w) != (grid.height, grid.width):
        raise ShapeError(f"grid built for {grid.height}x{grid.width}, input is {h}x{w}")
    if wcin != cin or taps != grid.taps_per_pixel or bias.data.shape != (cout,):
        raise ShapeError(f"weight {weight.data.shape} / bias {bias.data.shape} do not fit input with {cin} channels")

    smp = sampler_for(grid)
    # samples stay tap-major (taps x pixels x N x Cin) so no 9x-sized transposes are needed
    samples = smp.gather(x.data)
    p = smp.pixels
    wt = np.ascontiguousarray(weight.data.transpose(2, 1, 0))  # taps x Cin x Cout
    out = np.zeros((p * n, cout), dtype=np.result_type(x.data, wt))
    for t in range(taps):
        out += samples[t].reshape(p * n, cin) @ wt[t]
    out += bias.data
    out = np.ascontiguousarray(out.reshape(p, n, cout).transpose(1, 2, 0))
    out = out.reshape(n, cout, grid.out_height, grid.out_width)

    def backward(g):
        gpix = np.ascontiguousarray(g.reshape(n, cout, p).transpose(2, 0, 1)).reshape(p * n, cout)
        gw = np.empty_like(wt)
        for t in range(taps):
            gw[t] = samples[t].reshape(p * n, cin).T @ gpix
        gw = np.ascontiguousarray(gw.transpose(2, 1, 0))
        gb = gpix.sum(axis=0)
        gx = None
        if x.requires_grad:
            gs = np.empty_like(samples)
            for t in range(taps):
                gs[t] = (gpix @ wt[t].T).reshape(p, n, cin)
            gx = smp.scatter(gs, x.data.shape)
        return gx, gw, gb

    return _unbatch(make(out, (x, weight, bias), backward, "sphere_conv2d"), squeeze)


def _max_over_taps(x, samples, out_hw, scatter, name):
    """Max over axis 0 of tap-major ``samples`` (taps x P x N x C); ties go to the lowest tap."""
    taps, p, n, c = samples.shape
    idx = np.argmax(samples, axis=0)[None]
    out = np.take_along_axis(samples, idx, axis=0)[0]
    out = np.ascontiguousarray(out.transpose(1, 2, 0)).reshape(n, c, *out_hw)

    def backward(g):
        gs = np.zeros_like(samples)
        gpix = g.reshape(n, c, p).transpose(2, 0, 1)[None]
        np.put_along_axis(gs, idx, gpix, axis=0)
        return (scatter(gs),)

    return make(out, (x,), backward, name)


def sphere_maxpool(x, grid: SamplingGrid):
    """Max over the 4 bilinear-sampled taps of each stride-2 block."""
    x, squeeze = _batched(x)
    if x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {x.data.shape[2:]}")
    if x.data.shape[2:] != (grid.height, grid.width):
        raise ShapeError("pool grid does not match the input size")
    smp = sampler_for(grid)
    shape = x.data.shape
    out = _max_over_taps(
        x, smp.gather(x.data), (grid.out_height, grid.out_width),
        lambda gs: smp.scatter(gs, shape), "sphere_maxpool",
    )
    return _unbatch(out, squeeze)


def maxpool2d(x):
    """Planar 2x2 stride-2 max-pool, same tap order and tie rule as :func:`sphere_maxpool`."""
    x, squeeze = _batched(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(3, 5, 2, 4, 0, 1)
    samples = blocks.reshape(4, (h // 2) * (w // 2), n, c)

    def scatter(gs):
        gb = gs.reshape(2, 2, h // 2, w // 2, n, c).transpose(4, 5, 2, 0, 3, 1)
        return gb.reshape(n, c, h, w)

    return _unbatch(_max_over_taps(x, samples, (h // 2, w // 2), scatter, "maxpool2d"), squeeze)


def conv2d(x, weight, bias, stride=1, padding=1):
    """Planar 3x3 cross-correlation with zero padding."""
    x, squeeze = _batched(x)
    weight, bias = as_tensor(weight), as_tensor(bias)
    n, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if wcin != cin or bias.data.shape != (cout,):
        raise ShapeError(f"weight {weight.data.shape} / bias {bias.data.shape} do not fit input with {cin} channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.data.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    cols = cols.reshape(n, cin * kh * kw, ho * wo)
    wm = weight.data.reshape(cout, -1)
    out = (np.matmul(wm, cols) + bias.data[None, :, None]).reshape(n, cout, ho, wo)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.data.shape)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, a, b]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return _unbatch(make(out, (x, weight, bias), backward, "conv2d"), squeeze)


# --------------------------------------------------------------------------
# resampling


def _upsample_matrix(size, periodic):
    out = np.zeros((2 * size, size))
    src = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    for idx, wt in ((i0, 1.0 - f), (i0 + 1, f)):
        idx = np.mod(idx, size) if periodic else np.clip(idx, 0, size - 1)
        np.add.at(out, (np.arange(2 * size), idx), wt)
    return out


def upsample_bilinear_x2(x):
    """x2 bilinear upsampling (half-pixel centers); columns wrap, rows clamp."""
    x, squeeze = _batched(x)
    h, w = x.data.shape[2:]
    ur = _upsample_matrix(h, periodic=False).astype(x.data.dtype)
    uc = _upsample_matrix(w, periodic=True).astype(x.data.dtype)
    out = np.matmul(np.matmul(ur, x.data), uc.T)

    def backward(g):
        return (np.matmul(np.matmul(ur.T, g), uc),)

    return _unbatch(make(out, (x,), backward, "upsample"), squeeze)


# --------------------------------------------------------------------------
# normalization, activations, dense


def batchnorm(x, scale, shift, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization. ``running_mean``/``running_var`` are numpy
    arrays updated in place in train mode."""
    x, squeeze = _batched(x)
    scale, shift = as_tensor(scale), as_tensor(shift)
    n, c, h, w = x.data.shape
    count = n * h * w
    gamma = scale.data[None, :, None, None]
    if train:
        if count < 2:
            raise ShapeError("batch-norm in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.astype(x.data.dtype), running_var.astype(x.data.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + shift.data[None, :, None, None]

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if train:
            gx = (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            ) * (inv_std[None, :, None, None] / count)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return _unbatch(make(out, (x, scale, shift), backward, "batchnorm"), squeeze)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = expit(x.data).astype(x.data.dtype)
    return make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def dropout(x, p, rng, train):
    """Inverted dropout: survivors scaled by 1 / (1 - p); identity in eval mode."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.data.dtype)
    return make(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


def linear(x, weight, bias):
    """``N x F`` times ``F x O`` plus bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"linear: input features {x.data.shape[1]} != weight rows {weight.data.shape[0]}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make(out, (x, weight, bias), backward, "linear")


# --------------------------------------------------------------------------
# structural


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(out, tensors, backward, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    orig = x.data.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def roll_columns(x, shift):
    """Circular shift along the last (longitude) axis."""
    x = as_tensor(x)
    return make(np.roll(x.data, shift, axis=-1), (x,), lambda g: (np.roll(g, -shift, axis=-1),), "roll")


def mean(x):
    x = as_tensor(x)
    size = x.data.size
    return make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.data.shape, g / size, dtype=x.data.dtype),), "mean")


def add(*terms):
    terms = [as_tensor(t) for t in terms]
    out = terms[0].data
    for t in terms[1:]:
        out = out + t.data
    return make(out, terms, lambda g: tuple(g for _ in terms), "add")


def scale(x, factor):
    x = as_tensor(x)
    return make(x.data * factor, (x,), lambda g: (g * factor,), "scale")

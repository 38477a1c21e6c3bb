"""Minimal dense-tensor reverse-mode autodiff engine.

Tensors wrap numpy arrays; each op records a backward closure, and
``Tensor.backward`` walks the tape in reverse topological order.  Only the
operations the segmentation networks need are implemented.  Everything is
deterministic: no threading, no reduction reordering.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument

DEFAULT_DTYPE = np.float64

# Probabilities are clamped to this band before logs in the cross-entropy.
PROB_EPS = 1e-7


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.size != 1:
                raise InvalidArgument("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return total(self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, dtype=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if dtype is None else data.astype(dtype, copy=False)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        data = a.data * scalar

        def backward_scalar(g):
            if a.requires_grad:
                a._accumulate(g * scalar)

        return _make(data, (a,), backward_scalar)

    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero outside the band (true subgradient)."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _make(data, (a,), backward)


def powc(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def total(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(data, (a,), backward)


def sum_axes(a: Tensor, axes: tuple[int, ...], keepdims: bool = True) -> Tensor:
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(data, (a,), backward)


# -- shape plumbing -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(data, tuple(parts), backward)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)

    def backward(g):
        acc = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = indices
        np.add.at(acc, tuple(idx), g)
        a._accumulate(acc)

    return _make(data, (a,), backward)


def amax(a: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; gradient routes to the first argmax."""
    arg = a.data.argmax(axis=axis)
    data = np.squeeze(
        np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis), axis=axis
    )

    def backward(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(
            acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        a._accumulate(acc)

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def pad2d(a: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    width = [(0, 0)] * (a.data.ndim - 2) + [(pt, pb), (pl, pr)]
    data = np.pad(a.data, width)
    h, w = a.shape[-2], a.shape[-1]

    def backward(g):
        a._accumulate(g[..., pt : pt + h, pl : pl + w])

    return _make(data, (a,), backward)


def crop2d(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window of the last two axes."""
    data = np.ascontiguousarray(a.data[..., :height, :width])

    def backward(g):
        acc = np.zeros_like(a.data)
        acc[..., :height, :width] = g
        a._accumulate(acc)

    return _make(data, (a,), backward)


# -- spatial ops ----------------------------------------------------------


def even_padding(k: int) -> tuple[int, int]:
    """Size-preserving padding split for a length-k kernel axis.

    Even kernels have no center tap; the fixed convention is (k/2 - 1, k/2).
    Odd kernels pad symmetrically.
    """
    if k % 2 == 0:
        return k // 2 - 1, k // 2
    return (k - 1) // 2, (k - 1) // 2


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [B, C*kh*kw, Ho*Wo] patch matrix (copy)."""
    b, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: [B, C, Ho, Wo, kh, kw] -> [B, C, kh, kw, Ho, Wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def _fast_len(n: int) -> int:
    """Smallest 2/3/5-smooth length >= n (keeps FFTs off slow prime sizes)."""
    while True:
        m = n
        for f in (2, 3, 5):
            while m % f == 0:
                m //= f
        if m == 1:
            return n
        n += 1


# FFT-path routing: always for big kernels; for mid-size kernels only when
# there are few channel pairs (per-pair kernel FFTs dominate otherwise)
_FFT_KERNEL_AREA = 25
_FFT_BIG_KERNEL_AREA = 49
_FFT_MAX_PAIRS = 600


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding=None) -> Tensor:
    """Cross-correlation (no kernel flip) of [B,C,H,W] with [O,C,kh,kw].

    ``padding`` is (top, bottom, left, right); by default the size-preserving
    even-kernel convention is used on each axis.  Differentiable in both
    arguments.  Only stride 1 is supported.  Large kernels are evaluated by
    circular FFT correlation on wrap-free padded lengths, small ones by
    im2col matrix products; both give the same result to roundoff.
    """
    if stride != 1:
        raise InvalidArgument("only stride 1 is implemented")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise InvalidArgument(
            f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}"
        )
    bsz, c, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != c:
        raise InvalidArgument(f"kernel expects {ck} input channels, input has {c}")
    if padding is None:
        padding = (*even_padding(kh), *even_padding(kw))
    elif isinstance(padding, int):
        padding = (padding,) * 4
    pt, pb, pl, pr = padding
    ho = h + pt + pb - kh + 1
    wo = w + pl + pr - kw + 1
    if ho < 1 or wo < 1:
        raise InvalidArgument("kernel larger than padded input")
    area = kh * kw
    use_fft = area >= _FFT_BIG_KERNEL_AREA or (
        area >= _FFT_KERNEL_AREA and co * c <= _FFT_MAX_PAIRS
    )
    if use_fft:
        return _conv2d_fft(x, kernel, (pt, pb, pl, pr), (ho, wo))
    return _conv2d_im2col(x, kernel, (pt, pb, pl, pr), (ho, wo))


def _conv2d_im2col(x: Tensor, kernel: Tensor, pads, out_hw) -> Tensor:
    bsz, c, h, w = x.shape
    co, _, kh, kw = kernel.shape
    pt, pb, pl, pr = pads
    ho, wo = out_hw
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw)  # [B, C*kh*kw, Ho*Wo]
    kflat = kernel.data.reshape(co, c * kh * kw)
    data = (kflat @ cols).reshape(bsz, co, ho, wo)

    def backward(g):
        gflat = g.reshape(bsz, co, ho * wo)
        if kernel.requires_grad:
            g2 = np.ascontiguousarray(gflat.transpose(1, 0, 2)).reshape(co, -1)
            c2 = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(-1, cols.shape[1])
            kernel._accumulate((g2 @ c2).reshape(kernel.shape))
        if x.requires_grad:
            gcols = (kflat.T @ gflat).reshape(bsz, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + ho, v : v + wo] += gcols[:, :, u, v]
            x._accumulate(gxp[:, :, pt : pt + h, pl : pl + w])

    return _make(data, (x, kernel), backward)


def _conv2d_fft(x: Tensor, kernel: Tensor, pads, out_hw) -> Tensor:
    """out[y] = sum_u K[u] x[y + u - p] as a circular correlation of
    zero-extended signals; gradients are circular conv/corr of the same
    spectra, so no rfft adjoint bookkeeping is needed."""
    bsz, c, h, w = x.shape
    co, _, kh, kw = kernel.shape
    pt, _, pl, _ = pads
    ho, wo = out_hw
    ly = _fast_len(max(h, ho) + kh - 1)
    lx = _fast_len(max(w, wo) + kw - 1)
    xf = np.fft.rfft2(x.data, s=(ly, lx))  # [B, C, ly, fx]
    kf = np.fft.rfft2(kernel.data, s=(ly, lx))  # [O, C, ly, fx]
    m = xf.shape[-2] * xf.shape[-1]
    xt = xf.reshape(bsz, c, m).transpose(2, 0, 1)
    kt = kf.conj().reshape(co, c, m).transpose(2, 1, 0)
    of = (xt @ kt).transpose(1, 2, 0).reshape(bsz, co, ly, -1)
    corr = np.fft.irfft2(of, s=(ly, lx))
    rows = (np.arange(ho) - pt) % ly
    cols_ = (np.arange(wo) - pl) % lx
    data = np.ascontiguousarray(corr[:, :, rows[:, None], cols_[None, :]])

    def backward(g):
        gf = np.fft.rfft2(g, s=(ly, lx)).reshape(bsz, co, m)
        if x.requires_grad:
            # dX[i] = sum_{o,u} K[o,c,u] g[o, i + p - u]: circular convolution
            gt = gf.transpose(2, 0, 1)  # [M, B, O]
            kt2 = kf.reshape(co, c, m).transpose(2, 0, 1)  # [M, O, C]
            df = (gt @ kt2).transpose(1, 2, 0).reshape(bsz, c, ly, -1)
            dxfull = np.fft.irfft2(df, s=(ly, lx))
            r = (np.arange(h) + pt) % ly
            s_ = (np.arange(w) + pl) % lx
            x._accumulate(np.ascontiguousarray(dxfull[:, :, r[:, None], s_[None, :]]))
        if kernel.requires_grad:
            # dK[u] = sum_{b,y} g[b,o,y] x[b,c,y + u - p]: circular correlation
            gt = gf.conj().transpose(2, 1, 0)  # [M, O, B]
            xt2 = xf.reshape(bsz, c, m).transpose(2, 0, 1)  # [M, B, C]
            df = (gt @ xt2).transpose(1, 2, 0).reshape(co, c, ly, -1)
            dkfull = np.fft.irfft2(df, s=(ly, lx))
            r = (np.arange(kh) - pt) % ly
            s_ = (np.arange(kw) - pl) % lx
            kernel._accumulate(
                np.ascontiguousarray(dkfull[:, :, r[:, None], s_[None, :]])
            )

    return _make(data, (x, kernel), backward)


class SpectralPlan:
    """Precomputed constants for one multiscale_spectral_conv configuration.

    Per scale s the plan holds the padded-FFT spectra of the (already
    weighted/masked) basis kernels, the circular-shift phases realizing the
    even-kernel padding offsets, and the Parseval pairing matrix used for
    the coefficient gradient:

      spectra[s]:  [G, N, M] complex, row n = rfft2 of basis kernel n under
                   group element (a=g, s), zero-padded to (Ly, Lx)
      pair[s]:     [G, M, N] complex = conj(spectra) * w / (Ly*Lx), where w
                   doubles the rfft columns that represent conjugate pairs
      phase[s]:    [M] complex, e^{-2pi i (f1*pt + f2*pl) / L}
      in_idx[s]:   input channel gather indices
      rows[s]:     kernel rows per group slot (out patterns * selected cols)
    """

    def __init__(self, basis_mats: list[np.ndarray], kernel_sizes, in_idx,
                 h: int, w: int):
        kmax = max(kernel_sizes)
        self.h, self.w = h, w
        self.ly = _fast_len(h + kmax - 1)
        self.lx = _fast_len(w + kmax - 1)
        self.mc = self.lx // 2 + 1
        self.m = self.ly * self.mc
        self.in_idx = [np.asarray(ix, dtype=np.intp) for ix in in_idx]
        colw = np.full(self.mc, 2.0)
        colw[0] = 1.0
        if self.lx % 2 == 0:
            colw[-1] = 1.0
        weight = np.broadcast_to(colw, (self.ly, self.mc)).reshape(self.m)
        self.spectra = []
        self.pair = []
        self.phase = []
        self.pads = []
        for mats, k in zip(basis_mats, kernel_sizes):
            g, n, _ = mats.shape
            kern = mats.reshape(g * n, k, k)
            spec = np.fft.rfft2(kern, s=(self.ly, self.lx)).reshape(g, n, self.m)
            self.spectra.append(np.ascontiguousarray(spec))
            self.pair.append(
                np.ascontiguousarray(
                    (spec.conj() * (weight / (self.ly * self.lx))).transpose(0, 2, 1)
                )
            )
            pt, _ = even_padding(k)
            pl, _ = even_padding(k)
            f1 = np.fft.fftfreq(self.ly)[:, None]
            f2 = np.arange(self.mc)[None, :] / self.lx
            self.phase.append(
                np.exp(-2j * math.pi * (f1 * pt + f2 * pl)).reshape(self.m)
            )
            self.pads.append((pt, pl))


def multiscale_spectral_conv(x: Tensor, coeff_blocks: list[Tensor],
                             plan: SpectralPlan) -> Tensor:
    """Fused multi-scale group convolution in the Fourier domain.

    For each scale s, kernel spectra are assembled linearly from shared
    coefficients (coeff_blocks[s]: [G, rows_s, N]) and the precomputed basis
    spectra, multiplied against the input spectrum, and every scale's output
    is inverse-transformed in one batched call.  All gradients are exact:
    the input gradient is a circular convolution of the output gradient with
    the kernels, and the coefficient gradient is the Parseval pairing of the
    kernel-gradient spectrum with the basis spectra (basis kernels vanish
    outside their k x k support, so the full-plane pairing equals the
    windowed one).  Output channel order is scale-major, then (row, group).
    """
    bsz, c_all, h, w = x.shape
    if (h, w) != (plan.h, plan.w):
        raise InvalidArgument(f"plan built for {(plan.h, plan.w)}, input is {(h, w)}")
    ly, lx, m = plan.ly, plan.lx, plan.m
    nsc = len(plan.spectra)
    xf = np.fft.rfft2(x.data, s=(ly, lx)).reshape(bsz, c_all, m)

    khats = []
    outs_f = []
    for s in range(nsc):
        coeffs = coeff_blocks[s]
        g, rows, n = coeffs.shape
        kflat = coeffs.data @ plan.spectra[s]  # [G, rows, M]
        csel = plan.in_idx[s].size
        o = rows // csel
        khat = np.ascontiguousarray(
            kflat.reshape(g, o, csel, m).transpose(1, 0, 2, 3)
        ).reshape(o * g, csel, m)
        khats.append(khat)
        xsel = xf[:, plan.in_idx[s]]  # [B, csel, M]
        xt = xsel.reshape(bsz, csel, m).transpose(2, 0, 1)
        kt = khat.conj().transpose(2, 1, 0)
        f = (xt @ kt).transpose(1, 2, 0)  # [B, o*G, M]
        outs_f.append(f * plan.phase[s])
    stacked = np.concatenate(outs_f, axis=1)
    full = np.fft.irfft2(stacked.reshape(bsz, -1, ly, plan.mc), s=(ly, lx))
    data = np.ascontiguousarray(full[..., :h, :w])
    out_sizes = [f.shape[1] for f in outs_f]
    offsets = np.cumsum([0] + out_sizes)

    def backward(grad):
        gf = np.fft.rfft2(grad, s=(ly, lx)).reshape(bsz, grad.shape[1], m)
        dxf = np.zeros_like(xf) if x.requires_grad else None
        for s in range(nsc):
            gs = gf[:, offsets[s] : offsets[s + 1]]  # [B, o*G, M]
            khat = khats[s]
            og = khat.shape[0]
            csel = plan.in_idx[s].size
            if x.requires_grad:
                # circular convolution with the kernels, shifted back by the
                # padding offset
                gt = (gs * plan.phase[s].conj()).transpose(2, 0, 1)  # [M, B, OG]
                kt = khat.transpose(2, 0, 1)  # [M, OG, csel]
                contrib = (gt @ kt).transpose(1, 2, 0)  # [B, csel, M]
                dxf[:, plan.in_idx[s]] += contrib
            blk = coeff_blocks[s]
            if blk.requires_grad:
                # circular correlation of input and output gradient spectra
                gt2 = (gs * plan.phase[s]).conj().transpose(2, 1, 0)  # [M, OG, B]
                xsel = xf[:, plan.in_idx[s]]
                xt2 = xsel.transpose(2, 0, 1)  # [M, B, csel]
                dkhat = (gt2 @ xt2).transpose(1, 2, 0)  # [OG, csel, M]
                g_, rows, n = blk.shape
                o = rows // csel
                dk = np.ascontiguousarray(
                    dkhat.reshape(o, g_, csel, m).transpose(1, 0, 2, 3)
                ).reshape(g_, rows, m)
                blk._accumulate((dk @ plan.pair[s]).real)
        if x.requires_grad:
            dxfull = np.fft.irfft2(dxf.reshape(bsz, c_all, ly, plan.mc), s=(ly, lx))
            x._accumulate(np.ascontiguousarray(dxfull[..., :h, :w]))

    return _make(data, (x, *coeff_blocks), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient routes to the first argmax."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidArgument(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(bsz, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first max wins
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = (
            gflat.reshape(bsz, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, h, w)
        )
        x._accumulate(gx)

    return _make(data, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        bsz, c, h2, w2 = g.shape
        gx = g.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        x._accumulate(gx)

    return _make(data, (x,), backward)


# -- loss and optimizer ---------------------------------------------------


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Binary cross entropy: pixel sum of -y log p - (1-y) log(1-p),
    divided by the batch size (leading axis) only."""
    if p.shape != y.shape:
        raise InvalidArgument(f"probability/label shape mismatch: {p.shape} vs {y.shape}")
    batch = p.shape[0] if p.data.ndim > 0 else 1
    pc = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    one = Tensor(np.ones_like(y.data))
    loss = mul(y, log(pc)) + mul(one - y, log(one - pc))
    return mul(total(loss), -1.0 / batch)


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 2e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the parameter buffers."""
    if len(params) != len(grads):
        raise InvalidArgument("params/grads length mismatch")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise InvalidArgument("gradient/parameter shape mismatch")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def grad_check(
    f,
    tensors: list[Tensor],
    eps: float = 1e-5,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds and returns the scalar loss from the current contents of
    ``tensors``; a subset of coordinates of each tensor is probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        n = t.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = t.data.reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = float(f().data)
            flat[c] = keep - eps
            dn = float(f().data)
            flat[c] = keep
            numeric = (up - dn) / (2.0 * eps)
            scale = max(abs(numeric), abs(ga.reshape(-1)[c]), 1.0)
            worst = max(worst, abs(numeric - ga.reshape(-1)[c]) / scale)
    return worst

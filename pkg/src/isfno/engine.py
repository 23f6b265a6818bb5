"""Reverse-mode differentiation engine over float64 numpy arrays.

All model arithmetic runs through the primitives in this module. Complex
quantities (spectra, per-mode mixing weights) are stored as real pairs in a
trailing axis of size 2, so the tape only ever carries real arrays.

Conventions fixed here and relied on everywhere else:
  * forward FFT is unnormalized, the inverse carries the 1/N factor, so the
    two compose to the identity;
  * a spectrum keeps only the non-redundant half-space: the last transformed
    axis holds modes [0, kmax) and, in 2d, the first transformed axis holds
    the full signed band (-k1max, k1max) in FFT order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from scipy.special import erf

__all__ = [
    "ContractError",
    "CutoffError",
    "DiffTensor",
    "MissingNodeError",
    "ShapeError",
    "SpectralWeights",
    "Spectrum",
    "Tape",
    "add",
    "affine_channel",
    "backward",
    "concat",
    "constant",
    "exp_elem",
    "fft_forward",
    "fft_inverse",
    "gelu",
    "matinv",
    "matmul2",
    "matrix_exp",
    "mode_matmul",
    "mul",
    "neg",
    "pairs_to_complex",
    "complex_to_pairs",
    "pointwise",
    "project_self_conjugate",
    "reduce_sum",
    "reshape",
    "scale",
    "slice_axis",
    "transpose2",
    "spectral_mix",
    "sqrt_elem",
    "square",
    "sub",
]


class ShapeError(ValueError):
    pass


class CutoffError(ValueError):
    pass


class ContractError(ValueError):
    pass


class MissingNodeError(KeyError):
    pass


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive evaluations.

    Node ids are assigned in creation order, which is automatically a
    topological order, so the backward sweep is a single reversed pass.
    One tape belongs to one training step; tapes are never shared.
    """

    def __init__(self):
        # per node: list of (parent_id, vjp) edges; leaves have an empty list
        self._edges: list[list] = []
        self._shapes: list[tuple] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._edges)

    def _register(self, shape, edges) -> int:
        self._edges.append(edges)
        self._shapes.append(tuple(shape))
        return len(self._edges) - 1

    def leaf(self, data, name=None) -> "DiffTensor":
        """Register an array as a differentiable leaf on this tape."""
        arr = np.asarray(data, dtype=np.float64)
        node = self._register(arr.shape, [])
        return DiffTensor(arr, self, node)

    def is_leaf(self, node_id: int) -> bool:
        return not self._edges[node_id]

    def gradients(self, loss: "DiffTensor") -> dict[int, np.ndarray]:
        """Run the backward sweep from a scalar loss.

        Returns a map node_id -> gradient array for every leaf of the tape
        (zero arrays for leaves the loss does not depend on).
        """
        if not isinstance(loss, DiffTensor) or loss.tape is not self:
            raise MissingNodeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ContractError("loss must be scalar, got shape %r" % (loss.data.shape,))
        grads: list = [None] * len(self._edges)
        # "owned" marks accumulator arrays that are safe to add into in place
        owned = [False] * len(self._edges)
        grads[loss.tape_id] = np.ones_like(loss.data)
        for node in range(loss.tape_id, -1, -1):
            g = grads[node]
            if g is None:
                continue
            for parent, vjp in self._edges[node]:
                contrib = vjp(g)
                if grads[parent] is None:
                    grads[parent] = contrib
                elif owned[parent]:
                    np.add(grads[parent], contrib, out=grads[parent])
                else:
                    grads[parent] = grads[parent] + contrib
                    owned[parent] = True
            if self._edges[node]:
                grads[node] = None  # free interior gradients early
        out = {}
        for node, edges in enumerate(self._edges):
            if not edges:
                g = grads[node]
                if g is None:
                    g = np.zeros(self._shapes[node])
                out[node] = g
        return out


class DiffTensor:
    """A float64 array, optionally registered on a differentiation tape."""

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, tape=None, tape_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.tape_id}"
        return f"DiffTensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


def constant(data) -> DiffTensor:
    """Wrap an array as an off-tape constant."""
    return DiffTensor(data)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=np.float64))


def _forge(out_data, inputs_and_vjps) -> DiffTensor:
    """Create the output tensor, recording edges if a tape is active."""
    tape = _active_tape()
    if tape is None:
        return DiffTensor(out_data)
    edges = []
    for tensor, vjp in inputs_and_vjps:
        if tensor.tape is None:
            continue
        if tensor.tape is not tape:
            raise MissingNodeError("input tensor belongs to a different tape")
        edges.append((tensor.tape_id, vjp))
    if not edges:
        return DiffTensor(out_data)
    node = tape._register(np.shape(out_data), edges)
    return DiffTensor(out_data, tape, node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _forge(out, [
        (a, lambda g, s=a.data.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.data.shape: _unbroadcast(g, s)),
    ])


def sub(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _forge(out, [
        (a, lambda g, s=a.data.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.data.shape: _unbroadcast(-g, s)),
    ])


def neg(a) -> DiffTensor:
    a = _as_tensor(a)
    return _forge(-a.data, [(a, lambda g: -g)])


def mul(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _forge(out, [
        (a, lambda g, o=b.data, s=a.data.shape: _unbroadcast(g * o, s)),
        (b, lambda g, o=a.data, s=b.data.shape: _unbroadcast(g * o, s)),
    ])


def scale(a, c: float) -> DiffTensor:
    a = _as_tensor(a)
    c = float(c)
    return _forge(a.data * c, [(a, lambda g: g * c)])


def square(a) -> DiffTensor:
    a = _as_tensor(a)
    return _forge(a.data * a.data, [(a, lambda g, x=a.data: 2.0 * x * g)])


def sqrt_elem(a) -> DiffTensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)
    return _forge(root, [(a, lambda g, r=root: g / (2.0 * r))])


def exp_elem(a) -> DiffTensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _forge(out, [(a, lambda g, o=out: g * o)])


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> DiffTensor:
    """Exact (erf-based) GELU; gelu(0) == 0 identically."""
    a = _as_tensor(a)
    x = a.data
    cdf = x * _INV_SQRT2
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    out = x * cdf

    def vjp(g, x=x, cdf=cdf):
        pdf = x * x
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= _INV_SQRT2PI
        pdf *= x
        pdf += cdf
        pdf *= g
        return pdf

    return _forge(out, [(a, vjp)])


def reduce_sum(a, axes=None, keepdims=False) -> DiffTensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g, shape=a.data.shape, axes=axes, keepdims=keepdims):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape)

    return _forge(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# shape primitives


def concat(tensors, axis: int) -> DiffTensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = []
    start = 0
    for t in tensors:
        width = t.data.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + width)
        edges.append((t, lambda g, sl=tuple(sl): g[sl]))
        start += width
    return _forge(out, edges)


def reshape(a, shape) -> DiffTensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _forge(out, [(a, lambda g, s=a.data.shape: g.reshape(s))])


def transpose2(a) -> DiffTensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)
    return _forge(out, [(a, lambda g: np.swapaxes(g, -1, -2))])


def slice_axis(a, axis: int, start: int, stop: int) -> DiffTensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl]

    def vjp(g, shape=a.data.shape, sl=sl):
        full = np.zeros(shape)
        full[sl] = g
        return full

    return _forge(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# channel-affine and small matrix primitives


def affine_channel(x, w, b=None) -> DiffTensor:
    """Contract a (d_in, d_out) matrix over the trailing channel axis, plus bias."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"affine_channel: input channels {x.data.shape[-1]} vs weight {w.data.shape}"
        )
    d_in, d_out = w.data.shape
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (d_out,):
            raise ShapeError("affine_channel: bias shape mismatch")
        out += b.data
    out = out.reshape(lead + (d_out,))
    edges = [
        (x, lambda g, wd=w.data, lead=lead: (g.reshape(-1, d_out) @ wd.T).reshape(lead + (d_in,))),
        (w, lambda g, x2=x2: x2.T @ g.reshape(-1, d_out)),
    ]
    if b is not None:
        edges.append((b, lambda g: g.reshape(-1, d_out).sum(axis=0)))
    return _forge(out, edges)


def matmul2(a, b) -> DiffTensor:
    """Matrix product over the last two axes (real)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data
    return _forge(out, [
        (a, lambda g, bd=b.data, s=a.data.shape: _unbroadcast(g @ np.swapaxes(bd, -1, -2), s)),
        (b, lambda g, ad=a.data, s=b.data.shape: _unbroadcast(np.swapaxes(ad, -1, -2) @ g, s)),
    ])


def matinv(a) -> DiffTensor:
    """Inverse of a (batch of) square matrices; gradient -A^{-T} G A^{-T}."""
    a = _as_tensor(a)
    if a.data.shape[-1] != a.data.shape[-2]:
        raise ShapeError("matinv expects square matrices")
    inv = np.linalg.inv(a.data)

    def vjp(g, inv=inv):
        it = np.swapaxes(inv, -1, -2)
        return -it @ g @ it

    return _forge(inv, [(a, vjp)])


# ---------------------------------------------------------------------------
# spectral containers


@dataclass
class Spectrum:
    """Half-space Fourier coefficients of a real multi-channel field.

    data has shape (batch..., *mode_extents, channels, 2); mode extents are
    (kmax,) in 1d and (2*k1max - 1, k2max) in 2d, with the signed axis in
    FFT order [0 .. k1max-1, -(k1max-1) .. -1].
    """

    data: DiffTensor
    kmax: tuple[int, ...]

    @property
    def channels(self) -> int:
        return self.data.shape[-2]

    @property
    def mode_extents(self) -> tuple[int, ...]:
        return _mode_extents(self.kmax)


@dataclass
class SpectralWeights:
    """Per-mode complex channel-mixing matrices, stored as real pairs.

    data has shape (*mode_extents, d, d, 2) (or (d, d, 2) for a single
    matrix shared across modes).
    """

    data: DiffTensor
    kmax: tuple[int, ...]

    @property
    def channels(self) -> int:
        return self.data.shape[-2]


def _mode_extents(kmax: tuple[int, ...]) -> tuple[int, ...]:
    if len(kmax) == 1:
        return (kmax[0],)
    if len(kmax) == 2:
        return (2 * kmax[0] - 1, kmax[1])
    raise ShapeError("only 1d and 2d spectra are supported")


def pairs_to_complex(data: np.ndarray) -> np.ndarray:
    return data[..., 0] + 1j * data[..., 1]


def complex_to_pairs(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


# ---------------------------------------------------------------------------
# FFT primitives

def _check_cutoff(grid: tuple[int, ...], kmax: tuple[int, ...]):
    if len(grid) != len(kmax):
        raise ShapeError(f"grid rank {len(grid)} vs cutoff rank {len(kmax)}")
    for n, k in zip(grid, kmax):
        if n < 2 * k:
            raise CutoffError(f"spatial extent {n} is smaller than 2*kmax={2 * k}")


def _truncate_half_spectrum(half: np.ndarray, kmax: tuple[int, ...]) -> np.ndarray:
    """Select retained modes from an rfft half-spectrum over the spatial axes."""
    d = len(kmax)
    if d == 1:
        return half[..., : kmax[0], :]
    k1, k2 = kmax
    n1 = half.shape[-3]
    rows = np.r_[0:k1, n1 - (k1 - 1): n1]
    return half[..., rows, :, :][..., :k2, :]


def _embed_half(coeff: np.ndarray, grid: tuple[int, ...], kmax: tuple[int, ...]) -> np.ndarray:
    """Place retained coefficients into a zero rfft-layout half spectrum."""
    d = len(kmax)
    batch = coeff.shape[: coeff.ndim - d - 1]
    if d == 1:
        half = np.zeros(batch + (grid[0] // 2 + 1, coeff.shape[-1]), dtype=np.complex128)
        half[..., : kmax[0], :] = coeff
        return half
    k1, k2 = kmax
    n1 = grid[0]
    half = np.zeros(batch + (n1, grid[1] // 2 + 1, coeff.shape[-1]), dtype=np.complex128)
    half[..., :k1, :k2, :] = coeff[..., :k1, :, :]
    if k1 > 1:
        half[..., n1 - (k1 - 1):, :k2, :] = coeff[..., k1:, :, :]
    return half


def _inverse_weights(kmax: tuple[int, ...]) -> np.ndarray:
    """Multiplicity of each retained mode in the Hermitian reconstruction."""
    extents = _mode_extents(kmax)
    w = np.full(extents, 2.0)
    if len(kmax) == 1:
        w[0] = 1.0
    else:
        w[:, 0] = 1.0
    return w[..., None, None]  # broadcast over (channels, pair)


def fft_forward(field, kmax) -> Spectrum:
    """Unnormalized forward transform truncated to the mode cutoff.

    The field must be real with the channel axis last and spatial axes just
    before it; returns half-space coefficients as real pairs.
    """
    field = _as_tensor(field)
    kmax = tuple(int(k) for k in kmax)
    d = len(kmax)
    if field.data.ndim < d + 1:
        raise ShapeError("field must have spatial axes plus a trailing channel axis")
    grid = field.data.shape[-d - 1: -1]
    _check_cutoff(grid, kmax)
    axes = tuple(range(-d - 1, -1))
    half = sfft.rfftn(field.data, axes=axes)
    coeff = complex_to_pairs(np.ascontiguousarray(_truncate_half_spectrum(half, kmax)))

    def vjp(g, grid=grid, kmax=kmax, axes=axes):
        # adjoint of the truncated forward map: each retained mode
        # contributes Re{g e^{i k x}} with weight one, while the Hermitian
        # extension inside irfft doubles everything off the self-conjugate
        # hyperplane; pre-dividing by the multiplicity cancels that
        gc = pairs_to_complex(g) / _inverse_weights(kmax)[..., 0]
        emb = _embed_half(gc, grid, kmax)
        n_total = float(np.prod(grid))
        return sfft.irfftn(emb, s=grid, axes=axes) * n_total

    out = _forge(coeff, [(field, vjp)])
    return Spectrum(out, kmax)


def fft_inverse(spec: Spectrum, grid) -> DiffTensor:
    """Inverse transform (1/N normalization); absent modes are zero.

    Realness is enforced by construction: the retained half-space is
    Hermitian-extended, which on the self-conjugate hyperplane amounts to an
    orthogonal projection of the coefficients.
    """
    grid = tuple(int(n) for n in grid)
    kmax = spec.kmax
    _check_cutoff(grid, kmax)
    d = len(kmax)
    data = spec.data
    extents = _mode_extents(kmax)
    if tuple(data.data.shape[-d - 2: -2]) != extents:
        raise ShapeError(
            f"spectrum extents {data.data.shape[-d - 2:-2]} do not match cutoff {kmax}"
        )
    axes = tuple(range(-d - 1, -1))
    emb = _embed_half(pairs_to_complex(data.data), grid, kmax)
    out = sfft.irfftn(emb, s=grid, axes=axes)

    def vjp(g, grid=grid, kmax=kmax, axes=axes):
        half = sfft.rfftn(g, axes=axes)
        tr = complex_to_pairs(np.ascontiguousarray(_truncate_half_spectrum(half, kmax)))
        return tr * (_inverse_weights(kmax) / float(np.prod(grid)))

    return _forge(out, [(data, vjp)])


# ---------------------------------------------------------------------------
# per-mode complex algebra


def _cmul_mv(w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Complex per-mode matrix-vector product on real pairs.

    w: (modes..., i, j, 2); s: (batch..., modes..., j, 2) -> (batch..., modes..., i, 2)
    """
    out = np.einsum("...ij,...j->...i", pairs_to_complex(w), pairs_to_complex(s))
    return complex_to_pairs(out)


def spectral_mix(spec: Spectrum, weights: SpectralWeights) -> Spectrum:
    """Per-mode complex matrix-vector product over the channel axis."""
    w, s = weights.data, spec.data
    if w.data.shape[-2] != s.data.shape[-2]:
        raise ShapeError(
            f"spectral_mix: weight channels {w.data.shape[-2]} vs spectrum {s.data.shape[-2]}"
        )
    n_modes = w.data.ndim - 3
    if n_modes and w.data.shape[:n_modes] != s.data.shape[s.data.ndim - 2 - n_modes: -2]:
        raise ShapeError("spectral_mix: mode extents of weights and spectrum disagree")
    wc = pairs_to_complex(w.data)
    sc = pairs_to_complex(s.data)
    out = complex_to_pairs(np.einsum("...ij,...j->...i", wc, sc))

    def vjp_s(g, wc=wc):
        # adjoint of a complex-linear map: conjugate transpose
        gc = pairs_to_complex(g)
        return complex_to_pairs(np.einsum("...ji,...j->...i", np.conj(wc), gc))

    def vjp_w(g, sc=sc, wshape=w.data.shape):
        gc = pairs_to_complex(g)
        if gc.ndim > len(wshape) - 1:
            # contract the batch dimensions inside the einsum rather than
            # materializing a per-sample outer product
            flat_g = gc.reshape((-1,) + gc.shape[gc.ndim - len(wshape) + 2:])
            flat_s = sc.reshape(flat_g.shape)
            gw = np.einsum("b...i,b...j->...ij", flat_g, np.conj(flat_s))
            return complex_to_pairs(gw)
        gw = complex_to_pairs(np.einsum("...i,...j->...ij", gc, np.conj(sc)))
        return _unbroadcast(gw, wshape)

    out_t = _forge(out, [(s, vjp_s), (w, vjp_w)])
    return Spectrum(out_t, spec.kmax)


def mode_matmul(a, b) -> DiffTensor:
    """Complex per-mode matrix-matrix product on real pairs (weights algebra)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ac = pairs_to_complex(a.data)
    bc = pairs_to_complex(b.data)
    out = complex_to_pairs(ac @ bc)

    def vjp_a(g, bc=bc, s=a.data.shape):
        gc = pairs_to_complex(g)
        return _unbroadcast(complex_to_pairs(gc @ np.conj(np.swapaxes(bc, -1, -2))), s)

    def vjp_b(g, ac=ac, s=b.data.shape):
        gc = pairs_to_complex(g)
        return _unbroadcast(complex_to_pairs(np.conj(np.swapaxes(ac, -1, -2)) @ gc), s)

    return _forge(out, [(a, vjp_a), (b, vjp_b)])


def _self_conjugate_projection(data: np.ndarray, kmax: tuple[int, ...]) -> np.ndarray:
    """Project per-mode weights onto the self-conjugate-consistent subspace.

    Modes on the last-axis-zero hyperplane pair with their own mirror under
    conjugate symmetry of real fields: in 1d the DC block must be real, in 2d
    the (k1, 0) and (-k1, 0) blocks must be conjugates. The projection
    replaces w by (w + conj(flip(w)))/2 on that hyperplane and is orthogonal,
    hence self-adjoint.
    """
    out = data.copy()
    if len(kmax) == 1:
        out[0, ..., 1] = 0.0
        return out
    k1 = kmax[0]
    perm = np.r_[0, np.arange(2 * k1 - 2, 0, -1)]
    col = data[:, 0]
    mirrored = col[perm].copy()
    mirrored[..., 1] *= -1.0
    out[:, 0] = 0.5 * (col + mirrored)
    return out


def project_self_conjugate(w: "SpectralWeights") -> "SpectralWeights":
    """Symmetrize spectral weights so they commute with realness enforcement."""
    a = w.data
    kmax = w.kmax

    def apply(arr):
        return _self_conjugate_projection(arr, kmax)

    out = _forge(apply(a.data), [(a, lambda g: apply(g))])
    return SpectralWeights(out, kmax)


def _eye_pairs(shape) -> np.ndarray:
    """Identity matrix broadcast to (modes..., d, d, 2)."""
    d = shape[-2]
    eye = np.zeros((d, d, 2))
    eye[..., 0] = np.eye(d)
    return np.broadcast_to(eye, tuple(shape[:-3]) + (d, d, 2)).copy()


_EXP_TAYLOR_ORDER = 8
_EXP_SCALE_TARGET = 0.2


def matrix_exp(w: SpectralWeights) -> SpectralWeights:
    """Per-mode matrix exponential via scaling-and-squaring.

    Order-8 truncated Taylor series on blocks scaled below a fixed norm
    target, then repeated squaring; every step is a tape primitive, so the
    gradient flows through without bespoke Frechet-derivative code.
    exp(0) is the identity bitwise.
    """
    a = w.data
    if a.data.shape[-2] != a.data.shape[-3]:
        raise ShapeError("matrix_exp expects square channel blocks")
    mags = np.abs(pairs_to_complex(a.data))
    norm = float(mags.sum(axis=-1).max()) if mags.size else 0.0
    squarings = 0
    if norm > _EXP_SCALE_TARGET:
        squarings = int(np.ceil(np.log2(norm / _EXP_SCALE_TARGET)))
    scaled = scale(a, 0.5 ** squarings) if squarings else a

    eye = _eye_pairs(a.data.shape)
    term = constant(eye)
    for k in range(_EXP_TAYLOR_ORDER, 0, -1):
        term = add(constant(eye), scale(mode_matmul(scaled, term), 1.0 / k))
    for _ in range(squarings):
        term = mode_matmul(term, term)
    return SpectralWeights(term, w.kmax)


# ---------------------------------------------------------------------------
# spec-facing dispatcher and backward entry point


def pointwise(kind: str, *args) -> DiffTensor:
    """Dispatch the basic pointwise/channel operations by name."""
    table = {
        "gelu": gelu,
        "add": add,
        "mul": mul,
        "square": square,
        "affine_channel": affine_channel,
    }
    if kind not in table:
        raise ContractError(f"unknown pointwise kind {kind!r}")
    return table[kind](*args)


def backward(tape: Tape, loss: DiffTensor) -> dict[int, DiffTensor]:
    """Gradient of a scalar loss with respect to every leaf of the tape."""
    grads = tape.gradients(loss)
    return {node: DiffTensor(g) for node, g in grads.items()}

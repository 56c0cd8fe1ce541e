"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of primitives needed by the model zoo and the attacks are
provided. Images are laid out NHWC; conv kernels are (kh, kw, c_in, c_out).

    tape = Tape()
    x = tape.leaf(images)
    logits = tape.apply("matmul", tape.apply("reshape", x, shape=(B, -1)), w)
    loss = tape.apply("softmax_ce", logits, labels=y)
    grads = tape.backward(loss)
    grads[x]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float64


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass
class _Record:
    kind: str
    inputs: tuple
    output: int
    saved: object
    attrs: dict


@dataclass
class _Primitive:
    forward: Callable
    vjp: Callable


_PRIMITIVES: dict[str, _Primitive] = {}


def primitive(name):
    def register(cls):
        _PRIMITIVES[name] = _Primitive(cls.forward, cls.vjp)
        return cls
    return register


# --------------------------------------------------------------------------
# primitives; forward(values, **attrs) -> (out, saved)
# vjp(g, values, out, saved, **attrs) -> grads; conv2d also takes needs=(bool, ...) and may return None

@primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(vals):
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b, None

    @staticmethod
    def vjp(g, vals, out, saved):
        a, b = vals
        return g @ b.T, a.T @ g


@primitive("add")
class _Add:
    @staticmethod
    def forward(vals):
        a, b = vals
        if a.shape != b.shape:
            raise ShapeError("add", a.shape, b.shape)
        return a + b, None

    @staticmethod
    def vjp(g, vals, out, saved):
        return g, g


@primitive("add_bias")
class _AddBias:
    @staticmethod
    def forward(vals):
        x, b = vals
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ShapeError("add_bias", x.shape, b.shape)
        return x + b, None

    @staticmethod
    def vjp(g, vals, out, saved):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(vals):
        (x,) = vals
        mask = x > 0
        return np.maximum(x, 0.0), mask

    @staticmethod
    def vjp(g, vals, out, mask):
        # subgradient at exactly 0 is 0
        return (g * mask,)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(vals, c):
        (x,) = vals
        return x * c, None

    @staticmethod
    def vjp(g, vals, out, saved, c):
        return (g * c,)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(vals, shape):
        (x,) = vals
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError("reshape", x.shape, shape) from None

    @staticmethod
    def vjp(g, vals, out, saved, shape):
        return (g.reshape(vals[0].shape),)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(vals):
        (x,) = vals
        return np.asarray(x.sum(), dtype=DTYPE), None

    @staticmethod
    def vjp(g, vals, out, saved):
        return (np.full(vals[0].shape, g, dtype=DTYPE),)


@primitive("dot_const")
class _DotConst:
    """Scalar sum(x * w) for a constant weight array w."""

    @staticmethod
    def forward(vals, weights):
        (x,) = vals
        if x.shape != weights.shape:
            raise ShapeError("dot_const", x.shape, weights.shape)
        return np.asarray((x * weights).sum(), dtype=DTYPE), None

    @staticmethod
    def vjp(g, vals, out, saved, weights):
        return (g * weights,)


def _im2col(x, kh, kw):
    B, H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H,W,C,kh,kw
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * C)


@primitive("conv2d")
class _Conv2d:
    """Stride 1, zero padding that preserves the spatial size (odd kernels)."""

    @staticmethod
    def forward(vals):
        x, w = vals
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError("conv2d", x.shape, w.shape)
        kh, kw, ci, co = w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", x.shape, w.shape, detail="kernel sides must be odd")
        B, H, W, _ = x.shape
        cols = _im2col(x, kh, kw)
        out = (cols @ w.reshape(kh * kw * ci, co)).reshape(B, H, W, co)
        return out, cols

    @staticmethod
    def vjp(g, vals, out, cols, needs=(True, True)):
        x, w = vals
        kh, kw, ci, co = w.shape
        g2 = g.reshape(-1, co)
        dx = dw = None
        if needs[1]:
            dw = (cols.T @ g2).reshape(w.shape)
        if needs[0]:
            # same-padded convolution of g with the flipped, transposed kernel
            w_flip = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * co, ci)
            dx = (_im2col(g, kh, kw) @ w_flip).reshape(x.shape)
        return dx, dw


@primitive("maxpool2")
class _MaxPool2:
    @staticmethod
    def forward(vals):
        (x,) = vals
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError("maxpool2", x.shape, detail="needs NHWC with even H and W")
        B, H, W, C = x.shape
        win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, idx

    @staticmethod
    def vjp(g, vals, out, idx):
        (x,) = vals
        B, H, W, C = x.shape
        dwin = np.zeros(idx.shape + (4,), dtype=DTYPE)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (dx,)


def log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@primitive("softmax_ce")
class _SoftmaxCE:
    """Mean over the batch of -sum(y * log_softmax(z)); labels may be soft."""

    @staticmethod
    def forward(vals, labels):
        (z,) = vals
        if z.ndim != 2 or labels.shape != z.shape:
            raise ShapeError("softmax_ce", z.shape, labels.shape)
        logp = log_softmax(z)
        loss = -(labels * logp).sum() / z.shape[0]
        return np.asarray(loss, dtype=DTYPE), logp

    @staticmethod
    def vjp(g, vals, out, logp, labels):
        p = np.exp(logp)
        dz = p * labels.sum(axis=-1, keepdims=True) - labels
        return (g * dz / logp.shape[0],)


# --------------------------------------------------------------------------

class Gradients:
    """Gradient per leaf; leaves the loss does not depend on (or created with
    ``requires_grad=False``) get zeros."""

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        if var.id in self._grads:
            return self._grads[var.id]
        return np.zeros_like(self._tape._values[var.id])

    def __contains__(self, var):
        return var.id in self._tape._leaves


class Tape:
    """Single-writer record of primitive applications."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._records: list[_Record] = []
        self._leaves: set[int] = set()
        self._needs: set[int] = set()  # ids whose gradient is wanted by some leaf

    def _push(self, value):
        self._values.append(value)
        return Var(self, len(self._values) - 1, value)

    def leaf(self, value, requires_grad=True) -> Var:
        var = self._push(np.asarray(value, dtype=DTYPE))
        self._leaves.add(var.id)
        if requires_grad:
            self._needs.add(var.id)
        return var

    def apply(self, kind: str, *inputs: Var, **attrs) -> Var:
        try:
            prim = _PRIMITIVES[kind]
        except KeyError:
            raise ValueError(f"unknown primitive {kind!r}") from None
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{kind}: input {v!r} belongs to another tape")
        vals = tuple(v.value for v in inputs)
        out, saved = prim.forward(vals, **attrs)
        var = self._push(out)
        if any(v.id in self._needs for v in inputs):
            self._needs.add(var.id)
        self._records.append(_Record(kind, tuple(v.id for v in inputs), var.id, saved, attrs))
        return var

    def backward(self, loss: Var) -> Gradients:
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = {loss.id: np.ones((), dtype=DTYPE)}
        for rec in reversed(self._records):
            g = grads.pop(rec.output, None)
            if g is None or rec.output not in self._needs:
                continue
            vals = tuple(self._values[i] for i in rec.inputs)
            attrs = rec.attrs
            if rec.kind == "conv2d":
                attrs = dict(attrs, needs=tuple(i in self._needs for i in rec.inputs))
            in_grads = _PRIMITIVES[rec.kind].vjp(g, vals, self._values[rec.output], rec.saved, **attrs)
            for i, gi in zip(rec.inputs, in_grads):
                if gi is None or i not in self._needs:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return Gradients(self, {i: g for i, g in grads.items() if i in self._leaves})


def forward(kind: str, *inputs: Var, **attrs) -> Var:
    """Apply a primitive on the tape owning ``inputs``."""
    if not inputs:
        raise ValueError("forward needs at least one input")
    return inputs[0].tape.apply(kind, *inputs, **attrs)


def grad_check(model_fn, point, h=1e-5, n_samples=None, seed=0, kink_tol=1e-3, floor=1e-6):
    """Largest relative disagreement between an analytic gradient and central differences.

    ``model_fn(x)`` returns ``(value, grad)``. The error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. Coordinates where the one-sided slopes
    disagree by more than ``kink_tol`` are treated as non-differentiable (a
    ReLU kink inside [x-h, x+h]) and skipped.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h must lie in [1e-7, 1e-3], got {h}")
    x = np.array(point, dtype=DTYPE)
    f0, analytic = model_fn(x)
    analytic = np.asarray(analytic, dtype=DTYPE)
    f0 = float(f0)
    flat = x.reshape(-1)
    coords = np.arange(flat.size)
    if n_samples is not None and n_samples < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_samples, replace=False)
    worst = 0.0
    for k in coords:
        orig = flat[k]
        flat[k] = orig + h
        fp = float(model_fn(x)[0])
        flat[k] = orig - h
        fm = float(model_fn(x)[0])
        flat[k] = orig
        numeric = (fp - fm) / (2 * h)
        if abs((fp - f0) - (f0 - fm)) / h > kink_tol * max(1.0, abs(numeric)):
            continue
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst

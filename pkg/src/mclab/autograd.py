# -*- coding: utf-8 -*-

"""
Reverse-mode differentiation for small 3D convolutional networks.

A :class:`Tensor` records the operation that produced it together
with a closure propagating an incoming gradient to its parents.
Only tensors which (transitively) depend on a tensor created with
requires_grad=True are recorded; everything else is plain numpy.

Spatial tensors are laid out as (batch, channels, x, y, z). All
computation happens in float64.

"""

import logging
from collections.abc import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

import mclab

log = logging.getLogger(__name__)


class AutogradError(mclab.Error):
    pass


class ShapeMismatch(AutogradError):
    pass


class GraphNotScalar(AutogradError):
    pass


SPATIAL = (2, 3, 4)


class Tensor:
    """
    A float64 array with an optional gradient.

    Parameters
    ----------
    values : np.ndarray
        Converted to float64
    requires_grad : bool
        Whether gradients are accumulated for this tensor
    parents : Sequence[Tensor]
        Inputs of the producing operation
    backward : Callable[[np.ndarray], None] | None
        Propagates the gradient of this tensor to its parents

    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        """Add to the gradient of this tensor if it is tracked."""
        if not self.requires_grad:
            return

        assert grad.shape == self.shape, f"gradient {grad.shape} for {self.shape}"
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def _graph(self) -> list["Tensor"]:
        # iterative post-order; inputs precede their consumers
        order, seen = [], set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue

            if id(node) in seen:
                continue

            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)

        return order

    def backward(self):
        """
        Compute gradients of this scalar for all tracked tensors.

        Raises
        ------
        GraphNotScalar
            If this tensor has more than one element

        """
        if self.values.size != 1:
            raise GraphNotScalar(f"backward requires a scalar, got shape {self.shape}")

        if not self.requires_grad:
            log.warning("autograd: backward called on an untracked tensor")
            return

        self.grad = np.ones_like(self.values)
        for node in reversed(self._graph()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tracked = " tracked" if self.requires_grad else ""
        return f"Tensor{self.shape}{tracked}"


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(values, parents: Sequence[Tensor], backward) -> Tensor:
    if not _tracked(*parents):
        return Tensor(values)

    return Tensor(values, requires_grad=True, parents=parents, backward=backward)


def _same_shape(a: Tensor, b: Tensor, where: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{where}: shapes differ {a.shape} vs {b.shape}")


# --- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _result(a.values + b.values, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        a.accumulate(g * factor)

    return _result(a.values * factor, (a,), backward)


def relu(x: Tensor) -> Tensor:
    active = x.values > 0

    def backward(g):
        x.accumulate(g * active)

    return _result(np.where(active, x.values, 0.0), (x,), backward)


# --- spatial


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    Valid (unpadded) 3D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape (n, c, x, y, z)
    w : Tensor
        Kernels of shape (o, c, k, k, k)
    b : Tensor
        Biases of shape (o,)

    Returns
    -------
    Tensor
        Output of shape (n, o, x-k+1, y-k+1, z-k+1)

    """
    if x.values.ndim != 5 or w.values.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv3d: input {x.shape} and kernel {w.shape}")

    k = w.shape[2:]
    if any(n < kk for n, kk in zip(x.shape[2:], k)):
        raise ShapeMismatch(f"conv3d: input {x.shape} smaller than kernel {w.shape}")

    windows = sliding_window_view(x.values, k, axis=SPATIAL)
    out = np.einsum("ncxyzijk,ocijk->noxyz", windows, w.values, optimize=True)
    out += b.values[None, :, None, None, None]

    def backward(g):
        if w.requires_grad:
            w.accumulate(np.einsum("ncxyzijk,noxyz->ocijk", windows, g, optimize=True))

        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3, 4)))

        if x.requires_grad:
            pad = [(0, 0), (0, 0)] + [(kk - 1, kk - 1) for kk in k]
            gwin = sliding_window_view(np.pad(g, pad), k, axis=SPATIAL)
            flipped = w.values[:, :, ::-1, ::-1, ::-1]
            x.accumulate(np.einsum("noxyzijk,ocijk->ncxyz", gwin, flipped, optimize=True))

    return _result(out, (x, w, b), backward)


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    n, c, *spatial = x.shape
    if any(s % factor for s in spatial):
        raise ShapeMismatch(f"avg_pool3d: {x.shape} not divisible by {factor}")

    sx, sy, sz = (s // factor for s in spatial)
    blocks = x.values.reshape(n, c, sx, factor, sy, factor, sz, factor)

    def backward(g):
        spread = g[:, :, :, None, :, None, :, None] / factor**3
        spread = np.broadcast_to(spread, blocks.shape)
        x.accumulate(spread.reshape(x.shape))

    return _result(blocks.mean(axis=(3, 5, 7)), (x,), backward)


def upsample3d(x: Tensor, factor: int) -> Tensor:
    """Nearest neighbor upsampling by an integer factor."""
    out = x.values
    for axis in SPATIAL:
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        n, c, sx, sy, sz = x.shape
        blocks = g.reshape(n, c, sx, factor, sy, factor, sz, factor)
        x.accumulate(blocks.sum(axis=(3, 5, 7)))

    return _result(out, (x,), backward)


def crop3d(x: Tensor, margin: int) -> Tensor:
    """Remove margin voxels from each side of every spatial axis."""
    if margin == 0:
        return x

    if any(s <= 2 * margin for s in x.shape[2:]):
        raise ShapeMismatch(f"crop3d: cannot remove {margin} from {x.shape}")

    window = (slice(None), slice(None)) + (slice(margin, -margin),) * 3

    def backward(g):
        full = np.zeros(x.shape)
        full[window] = g
        x.accumulate(full)

    return _result(x.values[window], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    try:
        out = np.concatenate([t.values for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from exc

    def backward(g):
        for t, part in zip(xs, np.split(g, bounds, axis=axis)):
            t.accumulate(part)

    return _result(out, tuple(xs), backward)


# --- losses


def sigmoid(values: np.ndarray) -> np.ndarray:
    return expit(values)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy, computed from logits in log-sum-exp form."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"bce: logits {logits.shape} vs target {y.shape}")

    l = logits.values
    loss = np.mean(np.logaddexp(0.0, l) - y * l)

    def backward(g):
        logits.accumulate(g * (sigmoid(l) - y) / l.size)

    return _result(loss, (logits,), backward)


def sens_spec(
    logits: Tensor,
    target: np.ndarray,
    alpha: float = 0.5,
    eps: float = 1e-6,
) -> Tensor:
    """
    Sensitivity-specificity loss per subvolume.

    The first axis indexes subvolumes; the loss of each subvolume is
    computed over all its voxels and the batch mean is returned.

    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"sens_spec: logits {logits.shape} vs target {y.shape}")

    assert 0 <= alpha <= 1, "alpha must lie in [0, 1]"

    n = y.shape[0]
    axes = tuple(range(1, y.ndim))
    expand = (slice(None),) + (None,) * (y.ndim - 1)

    p = sigmoid(logits.values)
    err = (y - p) ** 2

    pos = y.sum(axis=axes) + eps
    neg = (1 - y).sum(axis=axes) + eps

    sens = (err * y).sum(axis=axes) / pos
    spec = (err * (1 - y)).sum(axis=axes) / neg
    loss = np.mean(alpha * sens + (1 - alpha) * spec)

    def backward(g):
        weight = alpha * y / pos[expand] + (1 - alpha) * (1 - y) / neg[expand]
        dp = -2 * (y - p) * weight
        logits.accumulate(g * dp * p * (1 - p) / n)

    return _result(loss, (logits,), backward)


def kd_divergence(
    student: Tensor,
    teacher: np.ndarray,
    temperature: float = 2.0,
) -> Tensor:
    """
    Distillation loss between Bernoulli outputs.

    Mean per-voxel KL divergence of the temperature softened student
    from the softened teacher, scaled by the squared temperature.
    The teacher is a constant.

    """
    t = np.asarray(teacher, dtype=np.float64)
    if t.shape != student.shape:
        raise ShapeMismatch(f"kd: student {student.shape} vs teacher {t.shape}")

    assert temperature > 0, "temperature must be positive"

    s = student.values / temperature
    t = t / temperature

    # log probabilities of the positive and the negative class
    ls, l1s = log_expit(s), log_expit(-s)
    lt, l1t = log_expit(t), log_expit(-t)

    pt = np.exp(lt)
    kl = pt * (lt - ls) + (1 - pt) * (l1t - l1s)
    loss = temperature**2 * np.mean(np.maximum(kl, 0.0))

    def backward(g):
        ps = np.exp(ls)
        student.accumulate(g * temperature * (ps - pt) / s.size)

    return _result(loss, (student,), backward)

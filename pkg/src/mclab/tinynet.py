# -*- coding: utf-8 -*-

"""
A miniature two-pathway patch network.

The normal pathway convolves the full resolution patch, the context
pathway sees the center of the patch average pooled by the
downsample factor, convolves it and is upsampled back. Both are
concatenated and fused by 1x1x1 convolutions into one tumor logit per
output voxel.

With the default descriptor a 19³ patch yields 9³ logits::

  normal:  19 -conv3-> 17 -> 15 -> 13 -> 11 -> 9
  context: 19 -crop 2-> 15 -pool 3-> 5 -conv3-> 3 -up 3-> 9

"""

import hashlib
import json
import logging
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from mclab import autograd
from mclab.autograd import ShapeMismatch, Tensor
from mclab.collections import ConfigError, take
from mclab.volgrid import CaseRecord, Kind, Volume

log = logging.getLogger(__name__)


# --- architecture


@dataclass(frozen=True)
class NetworkDescriptor:
    """
    Architecture of the network.

    Parameters
    ----------
    normal_widths : tuple[int, ...]
        Output channels of each 3x3x3 convolution of the normal pathway
    context_widths : tuple[int, ...]
        Output channels of the 3x3x3 convolutions of the context pathway
    downsample : int
        Pooling factor of the context pathway
    fusion_width : int
        Channels of the hidden 1x1x1 fusion layer
    input_size : int
        Default (training) patch edge length

    """

    normal_widths: tuple[int, ...] = (8, 8, 12, 12, 12)
    context_widths: tuple[int, ...] = (12,)
    downsample: int = 3
    fusion_width: int = 16
    input_size: int = 19
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "normal_widths", tuple(self.normal_widths))
        object.__setattr__(self, "context_widths", tuple(self.context_widths))

        def check(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(f"network: field '{name}' {msg}")

        check(len(self.normal_widths) > 0, "normal_widths", "must not be empty")
        check(len(self.context_widths) > 0, "context_widths", "must not be empty")
        for name in ("normal_widths", "context_widths"):
            check(all(w > 0 for w in getattr(self, name)), name, "must be positive")

        check(self.downsample >= 1, "downsample", "must be positive")
        check(self.fusion_width > 0, "fusion_width", "must be positive")
        check(self.kernel % 2 == 1 and self.kernel > 0, "kernel", "must be odd")

        check(
            self.crop >= 0,
            "context_widths",
            "reach further than the normal pathway",
        )
        check(
            self.valid_size(self.input_size),
            "input_size",
            f"{self.input_size} does not align both pathways",
        )

    @property
    def shrink(self) -> int:
        """Voxels removed per side by one convolution."""
        return self.kernel // 2

    @property
    def margin(self) -> int:
        """Voxels removed per side between input and output."""
        return self.shrink * len(self.normal_widths)

    @property
    def crop(self) -> int:
        """Voxels cropped per side before the context pathway pools."""
        return self.margin - self.downsample * self.shrink * len(self.context_widths)

    @property
    def output_size(self) -> int:
        return self.input_size - 2 * self.margin

    def valid_size(self, size: int) -> bool:
        out = size - 2 * self.margin
        return out > 0 and out % self.downsample == 0

    def digest(self) -> bytes:
        """sha256 of the canonical json form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()

    def to_dict(self) -> dict[str, Any]:
        dic = asdict(self)
        dic["normal_widths"] = list(self.normal_widths)
        dic["context_widths"] = list(self.context_widths)
        return dic

    @classmethod
    def from_dict(cls, dic: dict[str, Any]) -> "NetworkDescriptor":
        defaults = cls().to_dict()
        fields = {
            "normal_widths": (list, tuple),
            "context_widths": (list, tuple),
            "downsample": int,
            "fusion_width": int,
            "input_size": int,
            "kernel": int,
        }

        kwargs = take(dic, fields, "network", defaults=defaults)
        for name in ("normal_widths", "context_widths"):
            if not all(isinstance(w, int) and not isinstance(w, bool) for w in kwargs[name]):
                raise ConfigError(f"network: field '{name}' must contain integers")

        return cls(**kwargs)


# --- parameters


class ParamSet:
    """
    Named parameter tensors in a fixed order.

    The order is defined by the architecture and used for iteration,
    serialization and flattening.

    """

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.values.size for t in self._tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.items()}

    @classmethod
    def from_arrays(
        cls,
        arrays: dict[str, np.ndarray],
        requires_grad: bool = True,
    ) -> "ParamSet":
        return cls(
            {
                name: Tensor(np.array(values, dtype=np.float64), requires_grad)
                for name, values in arrays.items()
            }
        )

    def copy(self, requires_grad: bool = True) -> "ParamSet":
        return ParamSet.from_arrays(self.arrays(), requires_grad=requires_grad)

    def frozen(self) -> "ParamSet":
        """An untracked copy, e.g. to serve as teacher."""
        return self.copy(requires_grad=False)

    def rounded(self) -> "ParamSet":
        """A copy with values rounded to float32 storage precision."""
        arrays = {k: v.astype(np.float32).astype(np.float64) for k, v in self.arrays().items()}
        return ParamSet.from_arrays(arrays)

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of all tensors; untouched tensors get zeros."""
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.values)
            for name, t in self.items()
        }

    def vector(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self._tensors.values()])

    def distance(self, other: "ParamSet") -> float:
        """Euclidean norm of the parameter difference."""
        assert self.names == other.names, "parameter sets differ"
        return float(np.linalg.norm(self.vector() - other.vector()))


class TinyNet:
    """
    Forward pass and initialization for a descriptor.

    Parameters
    ----------
    descriptor : NetworkDescriptor
        The architecture

    Examples
    --------
    >>> import numpy as np
    >>> from mclab.tinynet import TinyNet
    >>> net = TinyNet()
    >>> params = net.init(np.random.default_rng(0))
    >>> net(params, np.zeros((2, 1, 19, 19, 19))).shape
    (2, 1, 9, 9, 9)

    """

    def __init__(self, descriptor: NetworkDescriptor | None = None):
        self.descriptor = descriptor or NetworkDescriptor()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in canonical order."""
        d = self.descriptor
        k = (d.kernel,) * 3
        shapes = {}

        def layer(prefix: str, c_in: int, c_out: int, kernel: tuple[int, ...]):
            shapes[f"{prefix}.weight"] = (c_out, c_in, *kernel)
            shapes[f"{prefix}.bias"] = (c_out,)

        c = 1
        for i, width in enumerate(d.normal_widths):
            layer(f"normal.{i}", c, width, k)
            c = width

        c = 1
        for i, width in enumerate(d.context_widths):
            layer(f"context.{i}", c, width, k)
            c = width

        fused = d.normal_widths[-1] + d.context_widths[-1]
        layer("fusion", fused, d.fusion_width, (1, 1, 1))
        layer("head", d.fusion_width, 1, (1, 1, 1))

        return shapes

    def init(self, rng: np.random.Generator) -> ParamSet:
        """He initialization of the weights, zero biases."""
        arrays = {}
        for name, shape in self.shapes().items():
            if name.endswith(".bias"):
                arrays[name] = np.zeros(shape)
                continue

            fan_in = int(np.prod(shape[1:]))
            arrays[name] = rng.normal(scale=np.sqrt(2 / fan_in), size=shape)

        params = ParamSet.from_arrays(arrays)
        log.debug(f"tinynet: initialized {params.count} parameters")
        return params

    def check_input(self, x: Tensor):
        d = self.descriptor
        if x.values.ndim != 5 or x.shape[1] != 1:
            raise ShapeMismatch(f"forward: expected (n, 1, x, y, z) input, got {x.shape}")

        for size in x.shape[2:]:
            if not d.valid_size(size):
                raise ShapeMismatch(
                    f"forward: input edge {size} is invalid, need"
                    f" (size - {2 * d.margin}) divisible by {d.downsample}"
                )

    def forward(self, params: ParamSet, patch: Tensor | np.ndarray) -> Tensor:
        """
        Compute per-voxel tumor logits.

        Parameters
        ----------
        params : ParamSet
            Network parameters
        patch : Tensor | np.ndarray
            Intensities of shape (n, 1, x, y, z)

        Returns
        -------
        Tensor
            Logits of shape (n, 1, x - 2m, y - 2m, z - 2m) with m the
            margin of the descriptor

        Raises
        ------
        ShapeMismatch
            For inputs the pathways cannot align

        """
        d = self.descriptor
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        self.check_input(x)

        def conv(prefix: str, h: Tensor) -> Tensor:
            return autograd.conv3d(h, params[f"{prefix}.weight"], params[f"{prefix}.bias"])

        normal = x
        for i in range(len(d.normal_widths)):
            normal = autograd.relu(conv(f"normal.{i}", normal))

        context = autograd.crop3d(x, d.crop)
        context = autograd.avg_pool3d(context, d.downsample)
        for i in range(len(d.context_widths)):
            context = autograd.relu(conv(f"context.{i}", context))
        context = autograd.upsample3d(context, d.downsample)

        fused = autograd.concat([normal, context], axis=1)
        fused = autograd.relu(conv("fusion", fused))

        return conv("head", fused)

    __call__ = forward


# --- losses


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    return autograd.bce_with_logits(logits, target)


def sens_spec_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.5) -> Tensor:
    return autograd.sens_spec(logits, target, alpha=alpha)


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray,
    temperature: float = 2.0,
) -> Tensor:
    teacher = (
        teacher_logits.values if isinstance(teacher_logits, Tensor) else teacher_logits
    )
    return autograd.kd_divergence(student_logits, teacher, temperature=temperature)


def seg_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.5) -> Tensor:
    """Binary cross entropy plus the sensitivity-specificity loss."""
    return bce_loss(logits, target) + sens_spec_loss(logits, target, alpha)


def lwf_loss(
    net: TinyNet,
    params: ParamSet,
    teacher: ParamSet | None,
    patch: np.ndarray,
    target: np.ndarray,
    lam: float = 0.1,
    alpha: float = 0.5,
    temperature: float = 2.0,
) -> Tensor:
    """
    Segmentation loss plus weighted distillation towards a teacher.

    Without teacher or with lam == 0 the distillation term is not
    computed at all and the result equals the segmentation loss.

    Parameters
    ----------
    net : TinyNet
        The network
    params : ParamSet
        Student parameters (tracked)
    teacher : ParamSet | None
        Frozen parameters of the previous model
    patch : np.ndarray
        Input batch (n, 1, x, y, z)
    target : np.ndarray
        Labels matching the output shape
    lam : float
        Weight of the distillation term

    """
    assert lam >= 0, "lambda must not be negative"

    logits = net(params, patch)
    loss = seg_loss(logits, target, alpha)

    if teacher is None or lam == 0:
        return loss

    assert not any(t.requires_grad for _, t in teacher.items()), "teacher is tracked"
    teacher_logits = net(teacher, patch)

    return loss + lam * kd_loss(logits, teacher_logits, temperature)


# --- optimization


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, **kwargs) -> "OptimizerState":
        zeros = {name: np.zeros_like(t.values) for name, t in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **kwargs)


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptimizerState):
    """
    Apply one Adam update with decoupled weight decay.

    Parameters are replaced (not modified in place), so snapshots
    taken with ParamSet.arrays() or values held elsewhere stay valid.

    Raises
    ------
    ShapeMismatch
        If a gradient or moment does not match its parameter

    """
    state.step += 1
    t = state.step

    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t

    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape or state.m[name].shape != tensor.shape:
            raise ShapeMismatch(f"adam: '{name}' gradient {g.shape} vs {tensor.shape}")

        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g**2
        state.m[name], state.v[name] = m, v

        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        tensor.values = tensor.values * (1 - state.lr * state.weight_decay) - update


# --- inference


def _starts(n: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def predict_probabilities(
    net: TinyNet,
    params: ParamSet,
    image: np.ndarray,
    stride: int | None = None,
    batch_size: int = 8,
    tile: int | None = None,
) -> np.ndarray:
    """
    Tumor probability for every voxel of a volume.

    The volume is zero padded by the network margin and covered by
    output tiles (stride defaults to the output size); the last tile
    of each axis is aligned with the volume end. Overlapping
    probabilities are averaged.

    Input tiles default to the training patch size. Larger valid
    sizes cover the volume with fewer forward passes.

    """
    d = net.descriptor
    size = tile or d.input_size
    if not d.valid_size(size):
        raise ShapeMismatch(f"inference: tile size {size} does not align both pathways")

    margin = d.margin
    out = size - 2 * margin
    stride = stride or out

    assert 0 < stride <= out, "stride must not exceed the output size"

    dims = image.shape
    extra = [max(0, out - n) for n in dims]
    padded = np.pad(
        image.astype(np.float64),
        [(margin, margin + e) for e in extra],
    )

    full = [n + e for n, e in zip(dims, extra)]
    grid = [_starts(n, out, stride) for n in full]
    tiles = [(x, y, z) for x in grid[0] for y in grid[1] for z in grid[2]]

    total = np.zeros(full)
    hits = np.zeros(full)

    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i : i + batch_size]
        patches = np.stack(
            [padded[x : x + size, y : y + size, z : z + size] for x, y, z in chunk]
        )

        logits = net(params, patches[:, None]).values[:, 0]
        probs = autograd.sigmoid(logits)

        for (x, y, z), prob in zip(chunk, probs):
            total[x : x + out, y : y + out, z : z + out] += prob
            hits[x : x + out, y : y + out, z : z + out] += 1

    prob = total / hits
    return prob[: dims[0], : dims[1], : dims[2]]


def sliding_window_infer(
    net: TinyNet,
    params: ParamSet,
    case: CaseRecord | Volume,
    threshold: float = 0.5,
    stride: int | None = None,
    tile: int | None = None,
) -> tuple[Volume, Volume]:
    """
    Segment a whole volume with the patch network.

    Parameters
    ----------
    net : TinyNet
        The network
    params : ParamSet
        Its parameters
    case : CaseRecord | Volume
        The case or its intensity image
    threshold : float
        Voxels with probability >= threshold are tumor
    stride : int | None
        Tile stride, defaults to the output size
    tile : int | None
        Input tile edge, defaults to the training patch size

    Returns
    -------
    tuple[Volume, Volume]
        Binary mask and probability volume

    """
    assert 0 < threshold < 1, "threshold must lie in (0, 1)"

    image = case.image if isinstance(case, CaseRecord) else case
    assert image.kind is Kind.intensity

    prob = predict_probabilities(net, params, image.data, stride=stride, tile=tile)
    mask = image.like(prob >= threshold, kind=Kind.mask)

    return mask, image.like(prob)

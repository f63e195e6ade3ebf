"""Neural network layers as recorded tensor ops, plus parameter handling.

Convolution is cross-correlation (no kernel flip) with zero padding that
preserves spatial size, restricted to odd square kernels. The forward uses an
im2col + matmul path; the backward reuses the cached patch matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidShape, InvalidSpec, ShapeMismatch, UnsupportedKernel
from .tensor import Tensor, record

PARAM_GROUPS = ("gf", "gm", "gy", "gd")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-D cross-correlation with same-size zero padding.

    x: [N, Cin, H, W], weight: [Cout, Cin, k, k] with k odd, bias: [Cout].
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeMismatch(
            f"conv2d ranks: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise UnsupportedKernel(f"kernel must be odd and square, got {k}x{k2}")
    if wcin != cin:
        raise ShapeMismatch(f"input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {bias.shape} does not match {cout} filters")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # patch matrix in (k, k, Cin)-minor order: [N*H*W, k*k*Cin]; this keeps the
    # channel runs contiguous in both the gather here and the fold in back()
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = np.ascontiguousarray(patches.transpose(0, 2, 3, 4, 5, 1)).reshape(
        n * h * w, k * k * cin
    )
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(
        k * k * cin, cout
    )
    out = cols @ wmat
    out += bias.data
    out4 = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))
    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

    def back(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        g_bias = gm.sum(axis=0) if need_b else None
        g_weight = None
        if need_w:  # a strided view is fine: it is only accumulated with +=
            g_weight = (cols.T @ gm).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        if not need_x:
            return None, g_weight, g_bias
        gcols = (gm @ wmat.T).reshape(n, h, w, k, k, cin)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
        for di in range(k):
            for dj in range(k):
                gxp[:, di : di + h, dj : dj + w, :] += gcols[:, :, :, di, dj, :]
        g_x = gxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)
        return g_x, g_weight, g_bias

    return record(out4, (x, weight, bias), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N, Din] @ [Din, Dout] + [Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeMismatch(
            f"linear ranks: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(
            f"linear shapes: {x.shape} @ {weight.shape} + {bias.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data
    back = lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0))
    return record(out, (x, weight, bias), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C], mean over the spatial dims."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool needs rank 4, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    back = lambda g: (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)
    return record(out, (x,), back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average downsampling with stride 2; spatial dims must be even."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"avg_pool2 needs rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidShape(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    out = 0.25 * (xd[:, :, ::2, ::2] + xd[:, :, ::2, 1::2]
                  + xd[:, :, 1::2, ::2] + xd[:, :, 1::2, 1::2])

    def back(g):
        spread = np.broadcast_to((g * 0.25)[:, :, :, None, :, None],
                                 (n, c, h // 2, 2, w // 2, 2))
        return (spread.reshape(n, c, h, w),)

    return record(out, (x,), back)


@dataclass(frozen=True)
class GrlCoeff:
    """Gradient-reversal coefficient schedule.

    constant: always alpha. ramp: alpha * min(1, step / ramp_length).
    """

    mode: str = "constant"
    alpha: float = 0.0
    ramp_length: int | None = None

    def __post_init__(self):
        if self.mode not in ("constant", "ramp"):
            raise InvalidSpec(f"unknown GRL mode {self.mode!r}")
        if self.alpha < 0:
            raise InvalidSpec(f"GRL alpha must be >= 0, got {self.alpha}")
        if self.mode == "ramp" and (self.ramp_length is None or self.ramp_length < 1):
            raise InvalidSpec("ramp mode needs a positive ramp_length")

    def value_at(self, step: int) -> float:
        if self.mode == "constant":
            return self.alpha
        return self.alpha * min(1.0, step / self.ramp_length)


def grl(x: Tensor, coeff: GrlCoeff, step: int = 0) -> Tensor:
    """Gradient reversal: identity forward, -c * upstream gradient backward."""
    c = coeff.value_at(step)
    return record(x.data, (x,), lambda g: (-c * g,))


class ParamSet:
    """Named parameter map. Paths are unique, iterate lexicographically, and
    each belongs to exactly one of the groups gf / gm / gy / gd."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, param: Tensor) -> None:
        group = path.split(".", 1)[0]
        if group not in PARAM_GROUPS:
            raise InvalidSpec(f"parameter path {path!r} is not under {PARAM_GROUPS}")
        if path in self._params:
            raise InvalidSpec(f"duplicate parameter path {path!r}")
        if not param.requires_grad:
            raise InvalidSpec(f"parameter {path!r} must require gradients")
        self._params[path] = param

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for path in sorted(self._params):
            yield path, self._params[path]

    def group(self, name: str) -> list[tuple[str, Tensor]]:
        if name not in PARAM_GROUPS:
            raise InvalidSpec(f"unknown parameter group {name!r}")
        prefix = name + "."
        return [(p, t) for p, t in self.items() if p.startswith(prefix)]

    def total_size(self) -> int:
        return sum(t.size for _, t in self.items())


@dataclass(frozen=True)
class LayerDef:
    """One parameterized layer: a conv (in/out channels + odd kernel) or a
    linear (in/out width). ``path`` prefixes the .weight / .bias entries."""

    path: str
    kind: str
    in_dim: int
    out_dim: int
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "linear"):
            raise InvalidSpec(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidSpec(f"layer {self.path!r} has non-positive dims")
        if self.kind == "conv" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise InvalidSpec(f"layer {self.path!r} needs an odd kernel, got {self.kernel}")


def init_params(layer_defs: Sequence[LayerDef], seed: int) -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases.

    A pure function of (layer_defs, seed): draws happen in lexicographic path
    order from one seeded generator.
    """
    paths = [d.path for d in layer_defs]
    if len(set(paths)) != len(paths):
        raise InvalidSpec("duplicate layer paths")
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for d in sorted(layer_defs, key=lambda d: d.path):
        if d.kind == "conv":
            fan_in = d.in_dim * d.kernel * d.kernel
            w_shape = (d.out_dim, d.in_dim, d.kernel, d.kernel)
        else:
            fan_in = d.in_dim
            w_shape = (d.in_dim, d.out_dim)
        std = np.sqrt(2.0 / fan_in)
        params.add(d.path + ".weight", Tensor(rng.normal(0.0, std, w_shape), requires_grad=True))
        params.add(d.path + ".bias", Tensor(np.zeros(d.out_dim), requires_grad=True))
    return params

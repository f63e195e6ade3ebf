"""Model assembly: shared extractor, parallel conv branches, two heads.

The extractor is a stack of [conv3x3 -> relu -> 2x2 average downsample]
blocks. Each branch applies one odd-kernel conv (all branches see the same
extractor output), relu, and global average pooling. The classifier reads
the concatenation of all pooled branch features; the shared domain
discriminator reads each branch's pooled features separately through the
gradient-reversal layer. Both heads are exactly three linear layers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidSpec
from .layers import (
    GrlCoeff,
    LayerDef,
    ParamSet,
    avg_pool2,
    conv2d,
    global_avg_pool,
    grl,
    init_params,
    linear,
)
from .tensor import Tensor, concat, relu, softmax


@dataclass(frozen=True)
class ScaleSpec:
    """Which kernel sizes the parallel branches use, and their width."""

    kernel_sizes: tuple[int, ...] = (1, 3, 5)
    branch_channels: int = 24

    def __post_init__(self):
        if len(self.kernel_sizes) == 0:
            raise InvalidSpec("at least one branch is required")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise InvalidSpec(f"branch kernels must be odd, got {self.kernel_sizes}")
        if self.branch_channels < 1:
            raise InvalidSpec("branch_channels must be >= 1")


SCALE_VARIANTS = {
    "mixed": ScaleSpec((1, 3, 5)),
    "s1": ScaleSpec((1, 1, 1)),
    "s3": ScaleSpec((3, 3, 3)),
    "s5": ScaleSpec((5, 5, 5)),
}


@dataclass(frozen=True)
class ExtractorArch:
    """Feature extractor layout plus the shared head widths."""

    in_channels: int = 1
    channels: tuple[int, ...] = (6, 12, 24)
    kernel: int = 3
    head_widths: tuple[int, int] = (128, 64)

    def __post_init__(self):
        if len(self.channels) == 0 or any(c < 1 for c in self.channels):
            raise InvalidSpec(f"bad extractor channels {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidSpec(f"extractor kernel must be odd, got {self.kernel}")
        if len(self.head_widths) != 2 or any(w < 1 for w in self.head_widths):
            raise InvalidSpec(f"heads are 3 linear layers; widths {self.head_widths}")


@dataclass
class ModelBundle:
    params: ParamSet
    scale: ScaleSpec
    arch: ExtractorArch
    num_domains: int
    num_classes: int = 2


@dataclass
class ForwardResult:
    class_probs: Tensor
    domain_probs: list[Tensor]
    branch_feats: list[Tensor]


def _layer_defs(scale: ScaleSpec, arch: ExtractorArch, num_domains: int,
                num_classes: int) -> list[LayerDef]:
    defs = []
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        defs.append(LayerDef(f"gf.block{i + 1}", "conv", cin, cout, arch.kernel))
        cin = cout
    for bi, k in enumerate(scale.kernel_sizes):
        defs.append(LayerDef(f"gm.branch{bi}", "conv", cin, scale.branch_channels, k))
    h1, h2 = arch.head_widths
    cls_in = scale.branch_channels * len(scale.kernel_sizes)
    defs.append(LayerDef("gy.fc1", "linear", cls_in, h1))
    defs.append(LayerDef("gy.fc2", "linear", h1, h2))
    defs.append(LayerDef("gy.fc3", "linear", h2, num_classes))
    defs.append(LayerDef("gd.fc1", "linear", scale.branch_channels, h1))
    defs.append(LayerDef("gd.fc2", "linear", h1, h2))
    defs.append(LayerDef("gd.fc3", "linear", h2, num_domains))
    return defs


def build_model(scale: ScaleSpec, arch: ExtractorArch, num_domains: int, seed: int) -> ModelBundle:
    """Initialize a full model; a pure function of its arguments."""
    if num_domains < 2:
        raise InvalidSpec(f"need at least two domains, got {num_domains}")
    params = init_params(_layer_defs(scale, arch, num_domains, 2), seed)
    return ModelBundle(params=params, scale=scale, arch=arch, num_domains=num_domains)


def _head(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    h = relu(linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    h = relu(linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return linear(h, params[f"{prefix}.fc3.weight"], params[f"{prefix}.fc3.bias"])


def forward(model: ModelBundle, images: Tensor, grl_coeff: GrlCoeff | None = None,
            step: int = 0, with_domain: bool = True) -> ForwardResult:
    """Full forward pass on a batch of [N, C, H, W] images.

    with_domain=False skips the discriminator entirely (evaluation and
    source-only training never touch gd parameters).
    """
    p = model.params
    h = images
    for i in range(len(model.arch.channels)):
        h = avg_pool2(relu(conv2d(h, p[f"gf.block{i + 1}.weight"], p[f"gf.block{i + 1}.bias"])))
    feats = []
    for bi in range(len(model.scale.kernel_sizes)):
        f = relu(conv2d(h, p[f"gm.branch{bi}.weight"], p[f"gm.branch{bi}.bias"]))
        feats.append(global_avg_pool(f))
    class_probs = softmax(_head(p, "gy", concat(feats, axis=1)), axis=1)
    domain_probs = []
    if with_domain:
        coeff = grl_coeff if grl_coeff is not None else GrlCoeff("constant", 0.0)
        for f in feats:
            domain_probs.append(softmax(_head(p, "gd", grl(f, coeff, step)), axis=1))
    return ForwardResult(class_probs=class_probs, domain_probs=domain_probs, branch_feats=feats)


def source_only_forward(model: ModelBundle, images: Tensor) -> Tensor:
    """Classification path only; identical class probabilities to forward()."""
    return forward(model, images, with_domain=False).class_probs


def count_params(model: ModelBundle) -> int:
    return model.params.total_size()


# -- spec serialization (used by checkpoints) --------------------------------


def model_spec_dict(model: ModelBundle) -> dict:
    return {
        "scale": {
            "kernel_sizes": list(model.scale.kernel_sizes),
            "branch_channels": model.scale.branch_channels,
        },
        "arch": {
            "in_channels": model.arch.in_channels,
            "channels": list(model.arch.channels),
            "kernel": model.arch.kernel,
            "head_widths": list(model.arch.head_widths),
        },
        "num_domains": model.num_domains,
        "num_classes": model.num_classes,
    }


def model_from_spec_dict(spec: dict, seed: int = 0) -> ModelBundle:
    scale = ScaleSpec(tuple(spec["scale"]["kernel_sizes"]), spec["scale"]["branch_channels"])
    arch = ExtractorArch(
        in_channels=spec["arch"]["in_channels"],
        channels=tuple(spec["arch"]["channels"]),
        kernel=spec["arch"]["kernel"],
        head_widths=tuple(spec["arch"]["head_widths"]),
    )
    return build_model(scale, arch, spec["num_domains"], seed)

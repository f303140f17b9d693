"""The three-branch re-identification model.

A shared residual trunk runs through the first block of the third bottleneck
stage, then splits into three branches that finish the remaining stages with
independent weights. Each branch owns a global part (two learned 1x1
projections pooled over the whole map, supervised toward pooled half-map
targets) and a local part (coarse-grained strip windows, max-pooled). Every
pooled feature passes through its own reduction block to 256 dims; the
concatenation of the reduced features is the inference embedding.
"""

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .partition import BranchSpec, branch_local_features, enumerate_windows, uniform_windows
from .resnet import ResNet50, load_pretrained

__all__ = [
    "GlobalHead",
    "GlobalHeadOutput",
    "FeatureReducer",
    "CGPN",
    "CgpnOutput",
    "REDUCED_DIM",
    "STRIP_COUNTS",
]

REDUCED_DIM = 256
STRIP_COUNTS = (2, 3, 4)
INPUT_HEIGHT = 384
INPUT_WIDTH = 128


@dataclass
class GlobalHeadOutput:
    """Learned global features and their pooled part targets for one branch."""

    upper: torch.Tensor          # c-dim, supervised toward the upper-half target
    lower: torch.Tensor          # c-dim, supervised toward the bottom-half target
    target_upper: torch.Tensor   # pooled upper half of the raw map (detached)
    target_lower: torch.Tensor   # pooled bottom half of the raw map (detached)

    @property
    def combined(self) -> torch.Tensor:
        return torch.cat([self.upper, self.lower], dim=-1)


class GlobalHead(nn.Module):
    """Global part of one branch.

    Two 1x1 convolutions map the branch output to two c-channel maps which
    are globally max-pooled into the upper/lower global features. The
    supervision targets are max-pooled halves of the raw map and carry no
    gradient.

    `mode` picks the projection composition (unstated in the lineage):
      - "conv_bn" (default): convolution followed by a normalization layer.
        Keeps gradients into the trunk self-scaled; the bare composition
        provably diverges under the standard schedule when the trunk
        starts cold, at every backbone width.
      - "conv_bn_relu": as above plus a rectifier.
      - "bare": plain convolutions on the raw map, the most literal
        reading; usable with a pretrained trunk, diverges from cold starts.
    """

    MODES = ("conv_bn", "conv_bn_relu", "bare")

    def __init__(self, channels, mode="conv_bn"):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"unknown global head mode {mode!r}")
        self.mode = mode

        def projection():
            conv = nn.Conv2d(channels, channels, kernel_size=1, bias=False)
            nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
            if mode == "bare":
                return conv
            bn = nn.BatchNorm2d(channels)
            nn.init.constant_(bn.weight, 1.0)
            nn.init.constant_(bn.bias, 0.0)
            if mode == "conv_bn":
                return nn.Sequential(conv, bn)
            return nn.Sequential(conv, bn, nn.ReLU(inplace=True))

        self.proj_upper = projection()
        self.proj_lower = projection()

    def forward(self, fmap) -> GlobalHeadOutput:
        h = fmap.shape[-2]
        if h % 2 != 0:
            raise ValueError(f"global head needs an even map height, got {h}")
        pool = lambda t: t.amax(dim=(-2, -1))
        return GlobalHeadOutput(
            upper=pool(self.proj_upper(fmap)),
            lower=pool(self.proj_lower(fmap)),
            target_upper=pool(fmap[..., : h // 2, :]).detach(),
            target_lower=pool(fmap[..., h // 2 :, :]).detach(),
        )


class FeatureReducer(nn.Module):
    """Projection of a pooled feature to the shared embedding width."""

    def __init__(self, in_dim, out_dim=REDUCED_DIM):
        super().__init__()
        self.in_dim = in_dim
        self.fc = nn.Linear(in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)
        self.relu = nn.ReLU(inplace=True)
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_out", nonlinearity="relu")
        nn.init.constant_(self.bn.weight, 1.0)
        nn.init.constant_(self.bn.bias, 0.0)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"reducer expects {self.in_dim}-dim input, got {x.shape[-1]}"
            )
        return self.relu(self.bn(self.fc(x)))


@dataclass
class CgpnOutput:
    """Everything one forward pass produces, in fixed feature order."""

    names: list
    roles: list                 # "global" | "local" per feature
    pooled: list                # pre-reduction features (2c for global, c for local)
    reduced: list               # 256-dim features, one per name
    logits: list = None         # per-feature class scores (training mode)
    heads: list = None          # GlobalHeadOutput per branch, when the global part exists

    @property
    def embedding(self) -> torch.Tensor:
        return torch.cat(self.reduced, dim=-1)

    def by_role(self, role):
        return [
            (n, p, r)
            for n, ro, p, r in zip(self.names, self.roles, self.pooled, self.reduced)
            if ro == role
        ]


class CGPN(nn.Module):
    """Three-branch network with coarse-grained local and supervised global parts.

    Ablation wiring: `has_global` / `has_local` drop a part entirely,
    `local_mode` switches between coarse-grained windows and the plain
    uniform split. The canonical model has 3 global + 9 local features and
    a 3072-dim inference embedding.
    """

    def __init__(self, num_classes, has_global=True, has_local=True,
                 local_mode="coarse", base_width=64, last_stride=2,
                 pretrained=None, reduced_dim=REDUCED_DIM,
                 global_head_mode="conv_bn", classifier_on="reduced"):
        super().__init__()
        if not (has_global or has_local):
            raise ValueError("model needs at least one of the global/local parts")
        if local_mode not in ("coarse", "fine"):
            raise ValueError(f"unknown local_mode {local_mode!r}")
        if classifier_on not in ("reduced", "pooled"):
            raise ValueError(f"classifier_on must be 'reduced' or 'pooled', got {classifier_on!r}")

        self.num_classes = num_classes
        self.has_global = has_global
        self.has_local = has_local
        self.local_mode = local_mode
        self.reduced_dim = reduced_dim
        self.classifier_on = classifier_on

        resnet = ResNet50(base_width=base_width, last_stride=last_stride)
        if pretrained is not None:
            load_pretrained(resnet, pretrained)
        channels = resnet.out_channels
        self.channels = channels

        # Shared trunk ends after the first block of the third stage; each
        # branch finishes the remaining blocks with its own weights,
        # starting from identical copies.
        self.stem = nn.Sequential(
            resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool,
            resnet.layer1, resnet.layer2, resnet.layer3[0],
        )
        tail = nn.Sequential(*list(resnet.layer3[1:]), resnet.layer4)
        self.branches = nn.ModuleList(
            [tail, copy.deepcopy(tail), copy.deepcopy(tail)]
        )
        self.branch_specs = [
            BranchSpec(i + 1, n) for i, n in enumerate(STRIP_COUNTS)
        ]

        if has_global:
            self.global_heads = nn.ModuleList(
                GlobalHead(channels, mode=global_head_mode) for _ in STRIP_COUNTS
            )

        names, roles, in_dims = [], [], []
        if has_global:
            for spec in self.branch_specs:
                names.append(f"branch{spec.branch_index}_global")
                roles.append("global")
                in_dims.append(2 * channels)
        if has_local:
            for spec in self.branch_specs:
                windows = (
                    enumerate_windows(spec.num_strips)
                    if local_mode == "coarse"
                    else uniform_windows(spec.num_strips)
                )
                for j in range(len(windows)):
                    names.append(f"branch{spec.branch_index}_local{j + 1}")
                    roles.append("local")
                    in_dims.append(channels)
        self.feature_names = names
        self.feature_roles = roles

        self.reducers = nn.ModuleList(
            FeatureReducer(d, reduced_dim) for d in in_dims
        )
        cls_dims = [reduced_dim] * len(names) if classifier_on == "reduced" else in_dims
        self.classifiers = nn.ModuleList(
            nn.Linear(d, num_classes, bias=False) for d in cls_dims
        )
        for head in self.classifiers:
            nn.init.normal_(head.weight, std=0.001)

    @property
    def embedding_dim(self) -> int:
        return len(self.feature_names) * self.reduced_dim

    def forward_branches(self, images):
        """Three branch feature maps from one image batch."""
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (INPUT_HEIGHT, INPUT_WIDTH):
            raise ValueError(
                f"expected {INPUT_HEIGHT}x{INPUT_WIDTH} RGB input, got "
                f"{tuple(images.shape[1:])}"
            )
        shared = self.stem(images)
        return [branch(shared) for branch in self.branches]

    def forward_features(self, images) -> CgpnOutput:
        maps = self.forward_branches(images)
        pooled, heads = [], None
        if self.has_global:
            heads = [head(fmap) for head, fmap in zip(self.global_heads, maps)]
            pooled.extend(h.combined for h in heads)
        if self.has_local:
            for fmap, spec in zip(maps, self.branch_specs):
                for _, vec in branch_local_features(fmap, spec, mode=self.local_mode):
                    pooled.append(vec)
        reduced = [red(p) for red, p in zip(self.reducers, pooled)]
        logits = None
        if self.training:
            inputs = reduced if self.classifier_on == "reduced" else pooled
            logits = [cls(x) for cls, x in zip(self.classifiers, inputs)]
        return CgpnOutput(
            names=self.feature_names,
            roles=self.feature_roles,
            pooled=pooled,
            reduced=reduced,
            logits=logits,
            heads=heads,
        )

    def forward(self, images):
        out = self.forward_features(images)
        if self.training:
            return out
        return out.embedding

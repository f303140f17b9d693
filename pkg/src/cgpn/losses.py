"""Training losses: per-feature softmax, batch-hard triplet, and the mean
squared error term that pulls learned global features toward pooled part
targets. All three are stateless functions over batch tensors; the trainer
owns normalization and wiring (which features feed which loss).
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "TripletBatchSpec",
    "MseConfig",
    "softmax_loss",
    "batch_hard_triplet",
    "mse_supervision",
    "total_loss",
    "pairwise_distances",
]


@dataclass(frozen=True)
class TripletBatchSpec:
    """Identity-balanced batch layout: P identities x K images, hinge margin."""

    num_ids: int
    num_imgs: int
    margin: float = 1.2

    def __post_init__(self):
        if self.num_ids < 2:
            raise ValueError(f"need >= 2 identities per batch, got {self.num_ids}")
        if self.num_imgs < 2:
            raise ValueError(f"need >= 2 images per identity, got {self.num_imgs}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")

    @property
    def batch_size(self) -> int:
        return self.num_ids * self.num_imgs


@dataclass(frozen=True)
class MseConfig:
    """Supervision census: B branches with M supervised global features each."""

    branches: int = 3
    parts: int = 2


def softmax_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of the true classes, summed over the batch.

    Stabilized by subtracting the per-row maximum before exponentiation.
    """
    if logits.dim() != 2:
        raise ValueError(f"logits must be 2-d (batch x classes), got {logits.dim()}-d")
    num_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    shifted = logits - logits.max(dim=1, keepdim=True).values
    log_prob = shifted - shifted.exp().sum(dim=1, keepdim=True).log()
    return -log_prob[torch.arange(logits.shape[0]), labels].sum()


def pairwise_distances(features: torch.Tensor) -> torch.Tensor:
    """All-pairs Euclidean distances with gradient-safe zeros on the diagonal."""
    diff = features.unsqueeze(1) - features.unsqueeze(0)
    sq = diff.pow(2).sum(dim=-1)
    positive = sq > 0
    # sqrt backward at exactly zero is NaN even when masked out downstream;
    # route zero-distance entries around the sqrt.
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq))


def batch_hard_triplet(features: torch.Tensor, labels: torch.Tensor,
                       spec: TripletBatchSpec) -> torch.Tensor:
    """Batch-hard triplet loss, summed over all P*K anchors.

    Per anchor: hinge of (margin + hardest same-identity distance - hardest
    other-identity distance), clamped at zero. Hardest positive is the max
    over the anchor's identity group (self-distance 0 included, never
    maximal); hardest negative is the min over every other identity.
    """
    if features.dim() != 2:
        raise ValueError(f"features must be 2-d (batch x dim), got {features.dim()}-d")
    n = features.shape[0]
    if n != spec.batch_size:
        raise ValueError(
            f"batch size {n} does not match spec {spec.num_ids}x{spec.num_imgs}"
        )
    uniq, counts = labels.unique(return_counts=True)
    if len(uniq) != spec.num_ids or not bool((counts == spec.num_imgs).all()):
        raise ValueError(
            f"batch is not {spec.num_ids} identities x {spec.num_imgs} images: "
            f"got {len(uniq)} identities with counts {counts.tolist()}"
        )

    dist = pairwise_distances(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    hardest_pos = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(spec.margin + hardest_pos - hardest_neg).sum()


def mse_supervision(globals_, targets, cfg: MseConfig = MseConfig()) -> torch.Tensor:
    """Squared-error pull of global features toward their part targets.

    `globals_` and `targets` are per-branch sequences of M feature tensors
    each, shaped (batch, c) or (c,). The squared norms are summed over
    branches, parts and batch, then divided by batch size. Targets are
    treated as constants: no gradient flows into them.
    """
    if len(globals_) != cfg.branches or len(targets) != cfg.branches:
        raise ValueError(
            f"expected {cfg.branches} branches, got {len(globals_)} globals "
            f"and {len(targets)} targets"
        )
    total = None
    batch = None
    for branch_globals, branch_targets in zip(globals_, targets):
        if len(branch_globals) != cfg.parts or len(branch_targets) != cfg.parts:
            raise ValueError(
                f"expected {cfg.parts} parts per branch, got "
                f"{len(branch_globals)} globals and {len(branch_targets)} targets"
            )
        for g, t in zip(branch_globals, branch_targets):
            if g.shape != t.shape:
                raise ValueError(
                    f"global/target shape mismatch: {tuple(g.shape)} vs {tuple(t.shape)}"
                )
            b = g.shape[0] if g.dim() > 1 else 1
            if batch is None:
                batch = b
            elif batch != b:
                raise ValueError(f"inconsistent batch sizes: {batch} vs {b}")
            term = (g - t.detach()).pow(2).sum()
            total = term if total is None else total + term
    return total / batch


def total_loss(components) -> torch.Tensor:
    """Unweighted sum of loss components (dict of scalars or a sequence)."""
    values = list(components.values()) if isinstance(components, dict) else list(components)
    if not values:
        return torch.zeros(())
    out = values[0]
    for v in values[1:]:
        out = out + v
    return out

"""Optimization loop, learning-rate schedule, ablation variants and
checkpointing.

All randomness is derived statelessly from (seed, step) so a resumed run
draws exactly the batches the uninterrupted run would have drawn.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import evaluation as eval_mod
from .losses import (MseConfig, TripletBatchSpec, batch_hard_triplet,
                     mse_supervision, softmax_loss, total_loss)
from .network import CGPN

__all__ = [
    "TrainSchedule",
    "VariantConfig",
    "VARIANTS",
    "variant_config",
    "build_variant",
    "TrainConfig",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "evaluate_checkpoint",
    "TrainingDivergedError",
    "CheckpointError",
    "IncompatibleCheckpointError",
]


class TrainingDivergedError(RuntimeError):
    """The total loss went non-finite."""


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be read or is malformed."""


class IncompatibleCheckpointError(RuntimeError):
    """A checkpoint does not match what the caller expects of it."""


@dataclass(frozen=True)
class TrainSchedule:
    """SGD recipe: base rate 1e-2 decayed to 1e-3 at epoch 60 and 1e-4 at 80,
    240 epochs total, momentum 0.9, weight decay 5e-4."""

    base_lr: float = 1e-2
    milestones: tuple = ((60, 1e-3), (80, 1e-4))
    total_epochs: int = 240
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        rates = [self.base_lr] + [r for _, r in sorted(self.milestones)]
        if any(rates[i + 1] > rates[i] for i in range(len(rates) - 1)):
            raise ValueError(f"learning rate must be non-increasing, got {rates}")

    def lr_at(self, epoch: int) -> float:
        if not (0 <= epoch < self.total_epochs):
            raise ValueError(
                f"epoch {epoch} outside schedule [0, {self.total_epochs})"
            )
        lr = self.base_lr
        for milestone, rate in sorted(self.milestones):
            if epoch >= milestone:
                lr = rate
        return lr


@dataclass(frozen=True)
class VariantConfig:
    """Ablation wiring for one named model variant."""

    name: str
    has_local: bool
    local_mode: str          # "coarse" | "fine" | None when has_local is False
    has_global: bool
    global_supervised: bool


VARIANTS = {
    "CGPN": VariantConfig("CGPN", True, "coarse", True, True),
    "CGPN-1": VariantConfig("CGPN-1", False, None, True, True),
    "CGPN-2": VariantConfig("CGPN-2", True, "fine", True, True),
    "CGPN-3": VariantConfig("CGPN-3", True, "coarse", False, False),
    "CGPN-4": VariantConfig("CGPN-4", True, "coarse", True, False),
}


def variant_config(name: str) -> VariantConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(
            f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}"
        ) from None


def build_variant(config: VariantConfig, num_classes, **model_kwargs) -> CGPN:
    """Instantiate the model a variant describes."""
    if isinstance(config, str):
        config = variant_config(config)
    return CGPN(
        num_classes,
        has_global=config.has_global,
        has_local=config.has_local,
        local_mode=config.local_mode or "coarse",
        **model_kwargs,
    )


@dataclass
class TrainConfig:
    """One training run: variant, data, schedule and reproducibility knobs."""

    variant: str = "CGPN"
    data_root: str = None
    out_dir: str = "runs/default"
    seed: int = 0
    num_ids_per_batch: int = 8        # P
    num_imgs_per_id: int = 8          # K
    margin: float = 1.2
    epochs: int = 240
    steps_per_epoch: int = None       # default: train size // (P*K), at least 1
    checkpoint_every: int = 40        # epochs between periodic checkpoints
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    # model knobs
    base_width: int = 64
    last_stride: int = 2
    pretrained: str = None
    global_head_mode: str = "conv_bn"
    classifier_on: str = "reduced"
    # loss wiring toggles
    triplet_on_locals: bool = False
    device: str = "cpu"

    def batch_spec(self):
        return TripletBatchSpec(self.num_ids_per_batch, self.num_imgs_per_id, self.margin)

    def model_kwargs(self):
        return dict(
            base_width=self.base_width,
            last_stride=self.last_stride,
            global_head_mode=self.global_head_mode,
            classifier_on=self.classifier_on,
        )


def batch_losses(output, labels, spec, variant: VariantConfig,
                 triplet_on_locals=False):
    """Per-component losses for one batch, each normalized by batch size.

    Softmax runs over every feature head, triplet over the global features
    (plus locals for the local-only variant or when explicitly enabled),
    and the supervision term only when the variant wires it.
    """
    n = labels.shape[0]
    components = {}
    components["softmax"] = sum(
        softmax_loss(lg, labels) for lg in output.logits
    ) / n

    triplet_feats = [p for p, role in zip(output.pooled, output.roles)
                     if role == "global"]
    if triplet_on_locals or not variant.has_global:
        triplet_feats += [p for p, role in zip(output.pooled, output.roles)
                          if role == "local"]
    components["triplet"] = sum(
        batch_hard_triplet(f, labels, spec) for f in triplet_feats
    ) / n

    if variant.has_global and variant.global_supervised:
        cfg = MseConfig(branches=len(output.heads), parts=2)
        components["mse"] = mse_supervision(
            [(h.upper, h.lower) for h in output.heads],
            [(h.target_upper, h.target_lower) for h in output.heads],
            cfg,
        )
    return components


def _manifest(cfg: TrainConfig, model: CGPN, num_classes, epoch, step):
    return {
        "variant": cfg.variant,
        "num_classes": num_classes,
        "embedding_dim": model.embedding_dim,
        "num_features": len(model.feature_names),
        "reduced_dim": model.reduced_dim,
        "base_width": cfg.base_width,
        "last_stride": cfg.last_stride,
        "global_head_mode": cfg.global_head_mode,
        "classifier_on": cfg.classifier_on,
        "seed": cfg.seed,
        "epoch": epoch,
        "step": step,
    }


def save_checkpoint(path, model, manifest, optimizer=None):
    payload = {"manifest": manifest, "model_state": model.state_dict()}
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, device="cpu"):
    """Read a checkpoint archive; raises CheckpointError on unreadable files."""
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "manifest" not in payload or "model_state" not in payload:
        raise CheckpointError(f"checkpoint {path} has no manifest/model_state")
    return payload


def model_from_checkpoint(payload, device="cpu"):
    """Rebuild the model a checkpoint describes and load its weights."""
    manifest = payload["manifest"]
    config = variant_config(manifest["variant"])
    model = build_variant(
        config,
        manifest["num_classes"],
        base_width=manifest["base_width"],
        last_stride=manifest["last_stride"],
        global_head_mode=manifest.get("global_head_mode", "conv_bn"),
        classifier_on=manifest.get("classifier_on", "reduced"),
    )
    if model.embedding_dim != manifest["embedding_dim"]:
        raise IncompatibleCheckpointError(
            f"manifest says {manifest['embedding_dim']}-dim embeddings but the "
            f"{manifest['variant']} census gives {model.embedding_dim}"
        )
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as e:
        raise IncompatibleCheckpointError(f"weights do not fit the manifest: {e}") from e
    model.to(device)
    return model, manifest


def _assemble_batch(cfg: TrainConfig, index, label_map, step):
    """Deterministic batch for a global step: sampling and augmentation
    randomness both derive from (seed, step)."""
    spec = cfg.batch_spec()
    batch_rng = np.random.default_rng((cfg.seed, step))
    record_ids = data_mod.pk_sample(index, spec, batch_rng)
    images, labels = [], []
    for pos, rid in enumerate(record_ids):
        record = index.records[rid]
        aug_rng = np.random.default_rng((cfg.seed, step, pos))
        images.append(
            data_mod.augment(data_mod.load_image(index, record), True, aug_rng)
        )
        labels.append(label_map[record.person_id])
    return torch.stack(images), torch.tensor(labels, dtype=torch.long), record_ids


def train(cfg: TrainConfig, index=None, resume=None, log=print):
    """Run the optimization loop; returns (checkpoint path, log path, history).

    History is the in-memory list of the per-step records also written to
    the JSONL metric log. Periodic checkpoints land next to the final one
    under <out_dir>/checkpoints/.
    """
    if index is None:
        if cfg.data_root is None:
            raise ValueError("either a dataset index or data_root is required")
        index = data_mod.scan_dataset(cfg.data_root)
    label_map = index.train_label_map()
    num_classes = len(label_map)
    spec = cfg.batch_spec()
    if num_classes < spec.num_ids:
        raise ValueError(
            f"dataset has {num_classes} identities, fewer than P={spec.num_ids}"
        )

    torch.manual_seed(cfg.seed)
    variant = variant_config(cfg.variant)
    model = build_variant(variant, num_classes,
                          pretrained=cfg.pretrained, **cfg.model_kwargs())
    model.to(cfg.device)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.schedule.base_lr,
        momentum=cfg.schedule.momentum, weight_decay=cfg.schedule.weight_decay,
    )

    start_epoch, global_step = 0, 0
    if resume is not None:
        payload = load_checkpoint(resume, cfg.device)
        if payload["manifest"]["variant"] != cfg.variant:
            raise IncompatibleCheckpointError(
                f"resume checkpoint is {payload['manifest']['variant']}, "
                f"config wants {cfg.variant}"
            )
        model.load_state_dict(payload["model_state"])
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["manifest"]["epoch"] + 1
        global_step = payload["manifest"]["step"]

    train_size = len(index.split("train"))
    steps_per_epoch = cfg.steps_per_epoch or max(1, train_size // spec.batch_size)

    out_dir = Path(cfg.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    history = []

    model.train()
    t0 = time.time()
    with open(log_path, "a") as log_file:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.schedule.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for _ in range(steps_per_epoch):
                images, labels, _ = _assemble_batch(cfg, index, label_map, global_step)
                images, labels = images.to(cfg.device), labels.to(cfg.device)
                output = model.forward_features(images)
                components = batch_losses(
                    output, labels, spec, variant,
                    triplet_on_locals=cfg.triplet_on_locals,
                )
                loss = total_loss(components)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {global_step}: "
                        + ", ".join(f"{k}={float(v.detach()):.4g}"
                                    for k, v in components.items())
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                record = {"step": global_step, "epoch": epoch, "lr": lr}
                record.update({k: float(v.detach()) for k, v in components.items()})
                record["total"] = float(loss.detach())
                history.append(record)
                log_file.write(json.dumps(record) + "\n")
                global_step += 1

            if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                save_checkpoint(
                    ckpt_dir / f"epoch_{epoch + 1:04d}.pt", model,
                    _manifest(cfg, model, num_classes, epoch, global_step), optimizer,
                )

            last = history[-1] if history else {}
            log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} "
                f"total={last.get('total', float('nan')):.4f} "
                f"({time.time() - t0:.1f}s)")

    final_path = save_checkpoint(
        ckpt_dir / "final.pt", model,
        _manifest(cfg, model, num_classes, cfg.epochs - 1, global_step), optimizer,
    )
    return final_path, log_path, history


def evaluate_checkpoint(checkpoint, index, use_train=False, normalize=False,
                        protocol=None, batch_size=16, device="cpu"):
    """Retrieval metrics for a checkpoint on a dataset.

    `use_train` scores the train split against itself (the cross-camera
    exclusion still applies), which is the overfit sanity protocol.
    Returns (RankingResult, manifest).
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint, device)
    model, manifest = model_from_checkpoint(payload, device)
    if use_train:
        query = gallery = index.split("train")
    else:
        query, gallery = index.split("query"), index.split("gallery")

    q_emb = eval_mod.extract_embeddings(model, index, query, batch_size, device)
    g_emb = (q_emb if use_train
             else eval_mod.extract_embeddings(model, index, gallery, batch_size, device))
    dist = eval_mod.distance_matrix(q_emb, g_emb, normalize=normalize)
    protocol = protocol or eval_mod.EvalProtocol()
    result = eval_mod.cmc_map(
        dist,
        np.array([r.person_id for r in query]),
        np.array([r.camera_id for r in query]),
        np.array([r.person_id for r in gallery]),
        np.array([r.camera_id for r in gallery]),
        protocol,
    )
    return result, manifest

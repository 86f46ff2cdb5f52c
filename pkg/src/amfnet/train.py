"""SGD training loop with exponential per-epoch learning-rate decay.

Each epoch runs momentum SGD over the shuffled training split, evaluates
the validation split, appends a structured record to the log, and keeps
the best-validation-mIoU checkpoint (ties broken by the earlier epoch).
Strict mode pins seeds, deterministic kernels, and a single compute
thread so that repeated runs produce identical logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import read_checkpoint, save_checkpoint
from .core import GridError
from .data import Sample, collate, depth_divisor_for, horizontal_flip
from .metrics import ConfusionMatrix, MetricsReport
from .network import AblationSpec, AMFNet, NetworkConfig, build_network, segmentation_loss


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; names the offending batch."""


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.95
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    input_resolution: tuple[int, int] = (288, 512)
    width_multiplier: float = 1.0
    variant: AblationSpec = field(default_factory=lambda: AblationSpec.from_row("J"))
    class_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_divisor: Optional[float] = None  # None: 99th percentile of the training split
    use_mhsa_stage5: bool = True
    mhsa_heads: int = 4
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    augment: bool = False
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.initial_lr:
            raise GridError("initial_lr must be positive")
        if not 0 < self.momentum <= 1 or not 0 < self.decay <= 1:
            raise GridError("momentum and decay must lie in (0, 1]")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise GridError("epochs and batch_size must be positive")
        h, w = self.input_resolution
        if h % 32 != 0 or w % 32 != 0:
            raise GridError(f"input resolution must be divisible by 32, got {self.input_resolution}")

    def network_config(self, depth_divisor: float) -> NetworkConfig:
        return NetworkConfig(
            variant=self.variant,
            input_hw=self.input_resolution,
            width_multiplier=self.width_multiplier,
            stage_depths=self.stage_depths,
            use_mhsa_stage5=self.use_mhsa_stage5,
            mhsa_heads=self.mhsa_heads,
            depth_divisor=depth_divisor,
        )


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: 96x128 inputs, batch 4, 30 epochs, 1/8 width."""
    base = dict(input_resolution=(96, 128), batch_size=4, epochs=30, width_multiplier=0.125)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Exponential schedule: initial_lr * decay^epoch."""
    if epoch < 0:
        raise GridError("epoch must be non-negative")
    return config.initial_lr * config.decay**epoch


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mAcc: float
    val_mIoU: float
    val_mF1: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "val_mAcc": self.val_mAcc,
            "val_mIoU": self.val_mIoU,
            "val_mF1": self.val_mF1,
        }


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log: list[EpochRecord]
    iteration_losses: list[float]
    best_epoch: int


def apply_strict_mode(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def evaluate(net: AMFNet, samples: Sequence[Sample], batch_size: int = 4) -> MetricsReport:
    """Confusion-matrix metrics of argmax predictions over `samples`."""
    conf = ConfusionMatrix()
    net.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            rgb, depth, labels = collate(samples[i : i + batch_size])
            pred = net(rgb, depth).argmax(dim=1)
            for b in range(pred.shape[0]):
                conf.add(pred[b].numpy(), labels[b].numpy())
    return conf.compute()


def mean_loss(
    net: AMFNet,
    samples: Sequence[Sample],
    class_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    batch_size: int = 4,
) -> float:
    """Mean per-pixel loss over `samples` in inference mode."""
    net.eval()
    total, pixels = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            rgb, depth, labels = collate(samples[i : i + batch_size])
            loss = segmentation_loss(net(rgb, depth), labels, class_weights)
            total += float(loss) * labels.numel()
            pixels += labels.numel()
    return total / pixels


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
    run_dir: str | Path,
    net: Optional[AMFNet] = None,
    resume: Optional[str | Path] = None,
) -> TrainResult:
    """Run the configured training job and return checkpoint paths plus the log."""
    if not train_samples or not val_samples:
        raise GridError("training and validation splits must be non-empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if config.strict:
        apply_strict_mode(config.seed)

    divisor = config.depth_divisor
    if divisor is None:
        divisor = depth_divisor_for(train_samples)

    start_epoch = 0
    momentum_in: dict[str, torch.Tensor] = {}
    if resume is not None:
        meta, state, momentum_arrays = read_checkpoint(resume)
        net = build_network(NetworkConfig.from_dict(meta["config"]), seed=config.seed)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
        momentum_in = {k: torch.from_numpy(v.copy()) for k, v in momentum_arrays.items()}
        start_epoch = meta["epoch"] + 1
    elif net is None:
        net = build_network(config.network_config(divisor), seed=config.seed)

    params = dict(net.named_parameters())
    optimizer = torch.optim.SGD(net.parameters(), lr=config.initial_lr, momentum=config.momentum)
    for name, buf in momentum_in.items():
        if name in params:
            optimizer.state[params[name]] = {"momentum_buffer": buf.clone()}

    rng = np.random.default_rng(config.seed)
    log: list[EpochRecord] = []
    iteration_losses: list[float] = []
    best_miou, best_epoch = -1.0, -1
    best_path = run_dir / "best.ckpt.npz"
    last_path = run_dir / "last.ckpt.npz"
    log_path = run_dir / "log.jsonl"
    log_file = log_path.open("a" if resume is not None else "w")

    def momentum_buffers() -> dict[str, torch.Tensor]:
        out = {}
        for name, p in params.items():
            state = optimizer.state.get(p, {})
            if "momentum_buffer" in state and state["momentum_buffer"] is not None:
                out[name] = state["momentum_buffer"]
        return out

    try:
        for epoch in range(start_epoch, max(start_epoch, config.epochs)):
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            net.train()
            order = rng.permutation(len(train_samples))
            flips = rng.random(len(train_samples)) < 0.5 if config.augment else None
            epoch_losses = []
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                batch = [train_samples[j] for j in idx]
                if flips is not None:
                    batch = [horizontal_flip(s) if flips[j] else s for j, s in zip(idx, batch)]
                rgb, depth, labels = collate(batch)
                optimizer.zero_grad()
                loss = segmentation_loss(net(rgb, depth), labels, config.class_weights)
                if not bool(torch.isfinite(loss)):
                    ids = ",".join(s.id for s in batch)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch [{ids}]")
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
                iteration_losses.append(epoch_losses[-1])

            report = evaluate(net, val_samples, config.batch_size)
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=float(np.mean(epoch_losses)),
                val_mAcc=report.macc,
                val_mIoU=report.miou,
                val_mF1=report.mf1,
            )
            log.append(record)
            log_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            log_file.flush()

            save_checkpoint(last_path, net, epoch=epoch, momentum_buffers=momentum_buffers())
            if report.miou > best_miou:
                best_miou, best_epoch = report.miou, epoch
                save_checkpoint(best_path, net, epoch=epoch, momentum_buffers=momentum_buffers())
    finally:
        log_file.close()

    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log=log,
        iteration_losses=iteration_losses,
        best_epoch=best_epoch,
    )

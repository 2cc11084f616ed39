"""Losses, the optimisation step and the staged training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.optim import adam_step, clip_gradients
from .autodiff.tensor import Tape, Tensor, backward
from .checkpoint import read_checkpoint, write_checkpoint
from .data.dataset import Manifest
from .data.synthesis import TrainingSample
from .networks import SniderModel, build_snider, forward_aux, forward_main

log = logging.getLogger(__name__)

TERMS = ("gd", "gr", "ds", "dc")
METRIC_COLUMNS = ("iter", "stage", "lr", "l_gd", "l_gr", "l_ds", "l_dc", "total", "grad_norm")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_gd: float = 0.4
    lambda_gr: float = 0.4
    lambda_ds: float = 0.15
    lambda_dc: float = 0.05

    def __post_init__(self):
        for name, v in zip(TERMS, self.as_tuple()):
            if not v >= 0:
                raise ValueError(f"lambda_{name} must be non-negative, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_gd, self.lambda_gr, self.lambda_ds, self.lambda_dc)

    def restricted_to(self, terms: Iterable[str]) -> "LossWeights":
        keep = set(terms)
        return LossWeights(*(w if t in keep else 0.0 for t, w in zip(TERMS, self.as_tuple())))


def weighted_total(components: Sequence[float], weights: LossWeights) -> float:
    """Weighted sum in a fixed left-to-right order."""
    acc = 0.0
    for c, w in zip(components, weights.as_tuple()):
        acc = acc + w * c
    return acc


@dataclass(frozen=True)
class LossBreakdown:
    l_gd: float
    l_gr: float
    l_ds: float
    l_dc: float
    total: float

    @classmethod
    def from_components(cls, components: Sequence[float], weights: LossWeights) -> "LossBreakdown":
        comps = [float(c) for c in components]
        return cls(*comps, weighted_total(comps, weights))

    def components(self) -> tuple[float, float, float, float]:
        return (self.l_gd, self.l_gr, self.l_ds, self.l_dc)


@dataclass
class Batch:
    i_lq: np.ndarray
    i_hq: np.ndarray
    i_hq_0: np.ndarray
    i_seg: np.ndarray
    count: np.ndarray  # (B, 1)

    def __len__(self) -> int:
        return self.i_lq.shape[0]


def stack_batch(samples: Sequence[TrainingSample], dtype=np.float32) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    sizes = {s.i_lq.shape for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"batch mixes image sizes {sorted(sizes)}")
    return Batch(
        np.stack([s.i_lq for s in samples]).astype(dtype),
        np.stack([s.i_hq for s in samples]).astype(dtype),
        np.stack([s.i_hq_0 for s in samples]).astype(dtype),
        np.stack([s.i_seg for s in samples]).astype(dtype),
        np.array([[s.count] for s in samples], dtype=dtype),
    )


def _loss_tensors(model: SniderModel, batch: Batch) -> list[Tensor]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    dt = model.parameters()[0].dtype
    x = Tensor(batch.i_lq, dtype=dt)
    main = forward_main(model, x)
    segment, count = forward_aux(model, main.fused, main.fused_skips)
    return [
        F.mse_loss(main.denoised, Tensor(batch.i_hq, dtype=dt)),
        F.l1_loss(main.rectified, Tensor(batch.i_hq_0, dtype=dt)),
        F.bce_loss(segment, Tensor(batch.i_seg, dtype=dt)),
        F.mse_loss(count, Tensor(batch.count, dtype=dt)),
    ]


def compute_losses(model: SniderModel, batch: "Batch | Sequence[TrainingSample]", weights: LossWeights) -> LossBreakdown:
    """The four task losses and their weighted total, without recording gradients.

    Denoising is scored against the rotated clean image, rectification
    against the unrotated one.
    """
    if not isinstance(batch, Batch):
        batch = stack_batch(batch)
    terms = _loss_tensors(model, batch)
    return LossBreakdown.from_components([t.item() for t in terms], weights)


def _bn_snapshot(model: SniderModel):
    return [(st, st.running_mean.copy(), st.running_var.copy()) for _, st in model.named_bn_states()]


def train_step(
    model: SniderModel,
    batch: "Batch | Sequence[TrainingSample]",
    weights: LossWeights,
    lr: float,
    clip_norm: float = 5.0,
) -> tuple[LossBreakdown, float]:
    """Forward, backward on the weighted total, clip, Adam, zero the gradients.

    Returns the pre-step losses and the pre-clip gradient norm. A
    non-finite loss raises :class:`NonFiniteLossError` and leaves the
    parameters (and running statistics) as they were.
    """
    if not isinstance(batch, Batch):
        batch = stack_batch(batch)
    params = model.parameters()
    snapshot = _bn_snapshot(model)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        terms = _loss_tensors(model, batch)
        active = [(t, w) for t, w in zip(terms, weights.as_tuple()) if w != 0.0]
        objective = F.weighted_sum([t for t, _ in active], [w for _, w in active]) if active else None
    losses = LossBreakdown.from_components([t.item() for t in terms], weights)
    if not all(math.isfinite(v) for v in (*losses.components(), losses.total)):
        for st, mean, var in snapshot:
            st.running_mean[...] = mean
            st.running_var[...] = var
        raise NonFiniteLossError(f"non-finite loss {losses}; step aborted")
    if objective is not None:
        backward(objective, tape)
    norm = clip_gradients(params, clip_norm)
    adam_step(params, lr)
    for p in params:
        p.zero_grad()
    return losses, norm


# --------------------------------------------------------------------------
# schedule and loop


@dataclass(frozen=True)
class Stage:
    name: str
    start: int
    stop: int
    terms: tuple[str, ...]


def default_schedule(max_iterations: int, fractions: tuple[float, float] = (0.25, 0.5)) -> list[Stage]:
    """Denoising only, then denoising + rectification, then all four terms."""
    a = int(round(fractions[0] * max_iterations))
    b = int(round(fractions[1] * max_iterations))
    return [
        Stage("denoise", 0, a, ("gd",)),
        Stage("rectify", a, b, ("gd", "gr")),
        Stage("joint", b, max_iterations, TERMS),
    ]


@dataclass
class TrainConfig:
    variant: str = "tiny"
    input_size: int = 64
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    lr_switch_epoch: int = 100
    lr_switch_iter: int | None = None
    max_iterations: int = 1000
    clip_norm: float = 5.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    stage_schedule: list[Stage] | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be >= 1 and max_iterations >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        validate_schedule(self.schedule(), self.max_iterations)

    def schedule(self) -> list[Stage]:
        return self.stage_schedule if self.stage_schedule is not None else default_schedule(self.max_iterations)

    def switch_iteration(self, n_train: int) -> int:
        if self.lr_switch_iter is not None:
            return self.lr_switch_iter
        return self.lr_switch_epoch * math.ceil(n_train / self.batch_size)

    def lr_at(self, iteration: int, n_train: int) -> float:
        return self.lr_initial if iteration < self.switch_iteration(n_train) else self.lr_final

    def stage_at(self, iteration: int) -> Stage:
        for st in self.schedule():
            if st.start <= iteration < st.stop:
                return st
        raise ValueError(f"iteration {iteration} is outside the stage schedule")


def validate_schedule(stages: Sequence[Stage], max_iterations: int) -> None:
    pos = 0
    for st in stages:
        if st.start != pos or st.stop < st.start:
            raise ValueError(f"stage {st.name!r} [{st.start}, {st.stop}) leaves a gap or overlaps at {pos}")
        bad = set(st.terms) - set(TERMS)
        if bad:
            raise ValueError(f"stage {st.name!r} names unknown loss terms {sorted(bad)}")
        pos = st.stop
    if pos != max_iterations:
        raise ValueError(f"stages end at {pos}, expected {max_iterations}")


def batch_indices(seed: int, n: int, batch_size: int, iteration: int) -> list[int]:
    """Sample indices for ``iteration``: consecutive slices of a stream of per-epoch permutations.

    A pure function of its arguments, so a resumed run draws the same batches.
    """
    start = iteration * batch_size
    out = []
    epoch, offset = divmod(start, n)
    while len(out) < batch_size:
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = perm[offset : offset + batch_size - len(out)]
        out.extend(int(i) for i in take)
        epoch, offset = epoch + 1, 0
    return out


def format_metric_row(iteration: int, stage: str, lr: float, losses: LossBreakdown, grad_norm: float) -> list[str]:
    return [str(iteration), stage, f"{lr:.9g}", *(f"{v:.9g}" for v in losses.components()),
            f"{losses.total:.9g}", f"{grad_norm:.9g}"]


@dataclass
class TrainResult:
    model: SniderModel
    iteration: int
    history: list[tuple[int, str, LossBreakdown, float]]
    metrics_path: Path | None
    checkpoint_path: Path | None


def _read_metric_rows(path: Path, before: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) < before]


def train(
    config: TrainConfig,
    manifest: "Manifest | Sequence[TrainingSample]",
    out_dir=None,
    resume=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run the stage schedule from scratch or from a checkpoint.

    Writes ``metrics.csv`` plus ``ckpt_XXXXXXX.sndr`` every
    ``checkpoint_every`` iterations and ``final.sndr`` at the end when
    ``out_dir`` is given. ``stop_at`` halts early (used to simulate an
    interruption); the schedule is still computed for ``max_iterations``.
    """
    if isinstance(manifest, Manifest):
        try:
            samples = manifest.load_all()
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"cannot read training data: {exc}") from exc
    else:
        samples = list(manifest)
    if not samples and config.max_iterations > 0:
        raise RuntimeError("training set is empty")

    if resume is not None:
        model, start = read_checkpoint(resume, expect_variant=config.variant)
        if model.input_size != config.input_size:
            raise ValueError(f"checkpoint input size {model.input_size} != config {config.input_size}")
    else:
        model, start = build_snider(config.variant, config.input_size, config.seed), 0
    model.train()

    end = config.max_iterations if stop_at is None else min(stop_at, config.max_iterations)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        kept = _read_metric_rows(metrics_path, start) if resume is not None else []
        fh = metrics_path.open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(kept)

    history = []
    n = len(samples)
    try:
        for it in range(start, end):
            stage = config.stage_at(it)
            weights = config.weights.restricted_to(stage.terms)
            lr = config.lr_at(it, n)
            idx = batch_indices(config.seed, n, min(config.batch_size, n), it)
            losses, norm = train_step(model, [samples[i] for i in idx], weights, lr, config.clip_norm)
            history.append((it, stage.name, losses, norm))
            if writer is not None:
                writer.writerow(format_metric_row(it, stage.name, lr, losses, norm))
            if it % 50 == 0:
                log.info("iter %d [%s] lr=%g total=%.5f gd=%.5f gr=%.5f ds=%.5f dc=%.5f |g|=%.3f",
                         it, stage.name, lr, losses.total, *losses.components(), norm)
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                write_checkpoint(out / f"ckpt_{it + 1:07d}.sndr", model, it + 1)
    finally:
        if fh is not None:
            fh.close()

    ckpt = write_checkpoint(out / "final.sndr", model, end) if out is not None else None
    return TrainResult(model, end, history, metrics_path, ckpt)

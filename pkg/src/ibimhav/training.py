"""Training loop, sliding-window inference and case evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import engine
from .config import TrainConfig
from .losses import confusion, metrics, weighted_dice_loss
from .network import IBIMHAVNet, load_model, probabilities, save_model
from .postprocess import morph_close, remove_small_components
from .volume import CaseRecord, Volume, augment_case, crop, random_crop_origin, sliding_window_grid

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class SGDMomentum:
    """SGD with heavy-ball momentum and (by default) decoupled weight decay.

    Decoupled: ``p -= lr * (buf + wd * p)`` with ``buf = m * buf + grad``.
    Coupled: the decay term is folded into the gradient before the momentum update.
    """

    def __init__(self, named_params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, decoupled: bool = True):
        self.params = dict(named_params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.decoupled = decoupled
        self.buffers = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not self.decoupled and self.weight_decay:
                g = g + self.weight_decay * p
            buf = self.buffers[name]
            buf.mul_(self.momentum).add_(g)
            if self.decoupled and self.weight_decay:
                p.sub_(self.lr * self.weight_decay * p)
            p.sub_(self.lr * buf)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    step: int = 0

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        n = len(self.losses) // steps_per_epoch
        return [float(np.mean(self.losses[i * steps_per_epoch : (i + 1) * steps_per_epoch]))
                for i in range(n)]


def expand_augmented(cases: list[CaseRecord], seed: int) -> list[CaseRecord]:
    """Originals plus a 60 and a 270 degree rotation of each, randomly translated."""
    out = []
    for i, c in enumerate(cases):
        out.append(c)
        for j, mode in enumerate(("rot60", "rot270")):
            out.append(augment_case(c, mode, None, seed=seed * 1000 + 2 * i + j))
    return out


def _batch(cases, cfg: TrainConfig, step: int):
    rng = np.random.default_rng([cfg.seed, step])
    xs, ys = [], []
    for _ in range(cfg.batch):
        c = cases[int(rng.integers(len(cases)))]
        o = random_crop_origin(c.image.extents, cfg.crop, rng)
        xs.append(crop(c.image.values, o, cfg.crop))
        ys.append(crop(c.vessel_mask.values, o, cfg.crop))
    dtype = torch.get_default_dtype()
    x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float64)).to(dtype)
    y = torch.from_numpy(np.stack(ys).astype(np.float64)).to(dtype)
    return x, y


def _grad_norms(model) -> dict[str, float]:
    return {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}


def clip_gradients(model, max_norm: float, norms: dict[str, float]) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(v * v for v in norms.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in model.parameters():
            if p.grad is not None:
                p.grad.mul_(scale)
    return total


def train(
    model: IBIMHAVNet,
    cases: list[CaseRecord],
    cfg: TrainConfig,
    optimizer: SGDMomentum | None = None,
    start_step: int = 0,
    total_steps: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[TrainResult, SGDMomentum]:
    """Run SGD on random crops of ``cases``; one epoch is ``cfg.steps_per_epoch`` steps.

    Steps ``start_step .. total_steps`` are run, so a run resumed from a
    checkpoint replays exactly the batches an uninterrupted run would see.
    """
    if not cases:
        raise ValueError("train needs at least one case")
    if cfg.augment:
        cases = expand_augmented(cases, cfg.seed)
    if optimizer is None:
        optimizer = SGDMomentum(model.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    total = cfg.epochs * cfg.steps_per_epoch if total_steps is None else total_steps
    result = TrainResult(step=start_step)
    model.train()
    for step in range(start_step, total):
        x, y = _batch(cases, cfg, step)
        optimizer.zero_grad()
        p0 = model(x)[:, 0]
        loss = weighted_dice_loss(p0, y, cfg.beta, cfg.smooth)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step} (lr={cfg.lr}): {loss.item()}")
        loss.backward()
        norms = _grad_norms(model)
        if not all(math.isfinite(v) for v in norms.values()):
            bad = {k: v for k, v in norms.items() if not math.isfinite(v)}
            raise NumericalError(f"non-finite gradient at step {step} (lr={cfg.lr}): {bad}")
        if cfg.clip_grad_norm:
            clip_gradients(model, cfg.clip_grad_norm, norms)
        optimizer.step()
        result.losses.append(float(loss.item()))
        result.step = step + 1
        if (step + 1) % cfg.steps_per_epoch == 0:
            epoch = (step + 1) // cfg.steps_per_epoch
            log.info("epoch %d step %d loss %.5f", epoch, step + 1,
                     np.mean(result.losses[-cfg.steps_per_epoch:]))
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, optimizer, result.step)
    return result, optimizer


def save_checkpoint(directory: str | Path, model: IBIMHAVNet, optimizer: SGDMomentum, step: int) -> None:
    directory = Path(directory)
    save_model(model, directory)
    engine.save_tensors(optimizer.buffers, directory / "momentum.json")
    (directory / "state.json").write_text(json.dumps({"step": step}))


def load_checkpoint(directory: str | Path, cfg: TrainConfig) -> tuple[IBIMHAVNet, SGDMomentum, int]:
    directory = Path(directory)
    model = load_model(directory)
    opt = SGDMomentum(model.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    buffers = engine.load_tensors(directory / "momentum.json")
    for name in opt.buffers:
        opt.buffers[name] = buffers[name].to(opt.buffers[name].dtype)
    step = json.loads((directory / "state.json").read_text())["step"]
    return model, opt, step


def write_loss_curve(losses: list[float], path: str | Path, start_step: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([start_step + i + 1, repr(v)])


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def infer_sliding(model: IBIMHAVNet, image: Volume, patch=None, stride: int = 24,
                  return_logits: bool = False):
    """Average per-patch logits over overlaps, then softmax; returns vessel probability."""
    patch = tuple(model.cfg.patch if patch is None else patch)
    model.eval()
    dtype = torch.get_default_dtype()
    acc = torch.zeros((2, *image.extents), dtype=torch.float64)
    count = torch.zeros(image.extents, dtype=torch.float64)
    for o in sliding_window_grid(image.extents, patch, stride):
        x = torch.from_numpy(np.ascontiguousarray(crop(image.values, o, patch))).to(dtype)
        logits = model.logits(x[None, None])[0].to(torch.float64)
        sl = tuple(slice(a, a + p) for a, p in zip(o, patch))
        acc[(slice(None), *sl)] += logits
        count[sl] += 1
    mean_logits = acc / count
    prob = probabilities(mean_logits[None])[0, 0].numpy()
    out = Volume(prob, image.spacing)
    return (out, mean_logits.numpy()) if return_logits else out


def threshold_mask(prob: Volume, threshold: float = 0.5) -> Volume:
    """Foreground where probability >= threshold (ties go to foreground)."""
    return prob.with_values((prob.values >= threshold).astype(np.uint8))


def evaluate_case(
    prob: Volume,
    truth: Volume,
    threshold: float = 0.5,
    postprocess: bool = True,
    min_component_mm3: float = 180.0,
    connectivity: int = 26,
    close_radius: int = 0,
    case_id: str = "case",
) -> dict:
    if prob.extents != truth.extents:
        raise ValueError(f"prediction extents {prob.extents} and truth extents {truth.extents} differ")
    pred = threshold_mask(prob, threshold)
    if close_radius:
        pred = morph_close(pred, close_radius)
    if postprocess:
        pred = remove_small_components(pred, min_component_mm3, connectivity)
    counts = confusion(pred.values, truth.values)
    return {"case_id": case_id, **metrics(counts),
            "tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn}

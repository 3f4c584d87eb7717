"""Momentum SGD, offline pretraining, first-frame fine-tuning and the
finite-difference gradient check."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import PatchPair
from .network import (
    GROUPS,
    ArchitectureConfig,
    MatchingNetwork,
    init_network,
    load_checkpoint,
    loss,
    save_checkpoint,
    to_tensor,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, meta=None):
        super().__init__(msg)
        self.meta = meta


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_every: int = 10
    lr_drop_factor: float = 0.1
    batch_size: int = 32
    loss: str = "l1"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_drop_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_drop_factor ** (epoch // self.lr_drop_every)


PRETRAIN = OptimizerConfig()
FINETUNE = replace(PRETRAIN, learning_rate=2e-5)


@dataclass
class TrainReport:
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)
    epochs_completed: int = 0
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0

    def write_csv(self, path, start_iteration: int = 0) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "epoch", "loss", "lr"])
            for i, (l, e, lr) in enumerate(zip(self.losses, self.epochs, self.lrs)):
                w.writerow([start_iteration + i, e, repr(l), repr(lr)])


def momentum_update(w, g, v, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Returns (w, v)."""
    v = momentum * v - lr * (g + weight_decay * w)
    return w + v, v


def sgd_step(net: MatchingNetwork, grads: Dict[str, Dict[str, torch.Tensor]], opt: OptimizerConfig, velocity: dict, lr: Optional[float] = None) -> dict:
    """In-place momentum step over the groups present in ``grads``.

    ``velocity`` maps ``"group.name"`` to a buffer and is updated in place.
    Parameters with ``requires_grad`` False are left untouched."""
    lr = opt.learning_rate if lr is None else lr
    with torch.no_grad():
        for g, named in grads.items():
            params = dict(net.group(g).named_parameters())
            for n, grad in named.items():
                p = params[n]
                if not p.requires_grad:
                    continue
                key = f"{g}.{n}"
                v = velocity.get(key)
                if v is None:
                    v = torch.zeros_like(p)
                w_new, v_new = momentum_update(p, grad, v, lr, opt.momentum, opt.weight_decay)
                p.copy_(w_new)
                velocity[key] = v_new
    return velocity


def _collect_grads(net: MatchingNetwork) -> Dict[str, Dict[str, torch.Tensor]]:
    out = {}
    for g in GROUPS:
        named = {n: p.grad for n, p in net.group(g).named_parameters() if p.requires_grad}
        if named:
            out[g] = {n: (t if t is not None else torch.zeros(())) for n, t in named.items()}
    return out


class PairBatches:
    """Tensors for a fixed list of pairs with seed-controlled epoch shuffles."""

    def __init__(self, pairs: Sequence[PatchPair], dtype=torch.float32):
        if not pairs:
            raise ValueError("no training pairs")
        self.pairs = list(pairs)
        self.query = to_tensor([p.query.pixels for p in self.pairs], dtype)
        self.search = to_tensor([p.search.pixels for p in self.pairs], dtype)
        self.label = torch.from_numpy(np.stack([p.label for p in self.pairs])).to(dtype)

    def __len__(self):
        return len(self.pairs)

    def order(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self.pairs))

    def batches(self, seed: int, epoch: int, batch_size: int):
        idx = self.order(seed, epoch)
        for start in range(0, len(idx), batch_size):
            sel = torch.from_numpy(idx[start : start + batch_size])
            yield sel, self.query[sel], self.search[sel], self.label[sel]


def _train_batch(net, opt, velocity, lr, q, s, y):
    net.zero_grad(set_to_none=True)
    out = net(q, s)
    value = loss(out, y, opt.loss)
    value.backward()
    sgd_step(net, _collect_grads(net), opt, velocity, lr)
    return float(value.detach())


def pretrain(
    net: MatchingNetwork,
    pairs,
    opt: OptimizerConfig = PRETRAIN,
    epochs: int = 1,
    seed: int = 0,
    checkpoint_dir=None,
    start_epoch: int = 0,
    velocity: Optional[dict] = None,
) -> TrainReport:
    """Train all four groups for ``epochs`` passes over ``pairs``.

    Passing ``start_epoch`` and the ``velocity`` stored by a previous run
    continues that run exactly."""
    torch.use_deterministic_algorithms(True)
    net.set_trainable(**{g: True for g in GROUPS})
    data = pairs if isinstance(pairs, PairBatches) else PairBatches(pairs, next(net.parameters()).dtype)
    velocity = {} if velocity is None else velocity
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(start_epoch, start_epoch + epochs):
        lr = opt.lr_at(epoch)
        for sel, q, s, y in data.batches(seed, epoch, opt.batch_size):
            value = _train_batch(net, opt, velocity, lr, q, s, y)
            if not math.isfinite(value):
                meta = [data.pairs[int(i)].meta for i in sel]
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", meta)
            report.losses.append(value)
            report.lrs.append(lr)
            report.epochs.append(epoch)
        report.epochs_completed = epoch + 1
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.pt"
            save_checkpoint(net, path, resume_state(epoch + 1, velocity, seed, opt))
            report.checkpoint = str(path)
        epoch_losses = [l for l, e in zip(report.losses, report.epochs) if e == epoch]
        log.info("epoch %d lr %.2e mean loss %.5f", epoch, lr, float(np.mean(epoch_losses)))
    report.wall_clock = time.perf_counter() - t0
    return report


def resume_state(epochs_done: int, velocity: dict, seed: int, opt: OptimizerConfig) -> dict:
    return {
        "epochs_completed": epochs_done,
        "seed": seed,
        "optimizer": asdict(opt),
        "velocity": {k: v.detach().clone() for k, v in velocity.items()},
    }


def resume(path):
    """Load a pretraining checkpoint; returns (net, start_epoch, velocity)."""
    net, extra = load_checkpoint(path)
    return net, int(extra.get("epochs_completed", 0)), dict(extra.get("velocity", {}))


def finetune(
    net: MatchingNetwork,
    pairs: Sequence[PatchPair],
    opt: OptimizerConfig = FINETUNE,
    iterations: int = 500,
    seed: int = 0,
    report: Optional[TrainReport] = None,
) -> MatchingNetwork:
    """Adapt a copy of ``net`` to one object; the extractor stays frozen.

    The learning rate is held constant (no epoch drops) across the
    ``iterations`` mini-batches."""
    if not pairs:
        raise ValueError("fine-tuning needs at least one pair")
    torch.use_deterministic_algorithms(True)
    tuned = copy.deepcopy(net)
    tuned.set_trainable(extractor=False, compressors=True, similarity_fc=True, decoder=True)
    data = PairBatches(pairs, next(tuned.parameters()).dtype)
    velocity: dict = {}
    it, epoch = 0, 0
    while it < iterations:
        for _, q, s, y in data.batches(seed, epoch, opt.batch_size):
            if it >= iterations:
                break
            value = _train_batch(tuned, opt, velocity, opt.learning_rate, q, s, y)
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at fine-tune iteration {it}")
            if report is not None:
                report.losses.append(value)
                report.lrs.append(opt.learning_rate)
                report.epochs.append(epoch)
            it += 1
        epoch += 1
    tuned.zero_grad(set_to_none=True)
    return tuned


def mean_loss(net: MatchingNetwork, pairs: Sequence[PatchPair], kind: str = "l1") -> float:
    data = PairBatches(pairs, next(net.parameters()).dtype)
    with torch.no_grad():
        return float(loss(net(data.query, data.search), data.label, kind))


# -- gradient check -----------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: Dict[str, float]
    n_coords: Dict[str, int]
    n_skipped: Dict[str, int]


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    cfg: ArchitectureConfig,
    seed: int = 0,
    coords_per_group: int = 200,
    step: float = 1e-5,
    frozen: Sequence[str] = (),
    mutate: Optional[Dict[str, float]] = None,
    kind: str = "l1",
) -> GradCheckResult:
    """Compare autograd gradients with central differences in float64.

    A coordinate whose +/- step changes any ReLU sign, max-pool winner or the
    sign of (output - label) straddles a kink where central differences are
    not a valid oracle; it is replaced by another random coordinate.
    ``mutate`` scales the analytic gradient of the named groups, which is how
    the check proves it can see a wrong gradient."""
    net = init_network(cfg, seed).double()
    for g in frozen:
        net.set_trainable(**{g: False})
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    q = torch.rand((1, 3, cfg.input_size, cfg.input_size), generator=gen, dtype=torch.float64)
    s = torch.rand((1, 3, cfg.input_size, cfg.input_size), generator=gen, dtype=torch.float64)
    y = (torch.rand((1, 50, 50), generator=gen, dtype=torch.float64) > 0.5).double()

    def evaluate():
        with torch.no_grad():
            tr = net.forward_trace(q, s)
            tr.pattern.append(tr.output > y)
            return float(loss(tr.output, y, kind)), tr

    net.zero_grad(set_to_none=True)
    base = net.forward_trace(q, s)
    loss(base.output, y, kind).backward()
    base.pattern.append(base.output.detach() > y)

    per_group, counts, skipped = {}, {}, {}
    for g in net.trainable_groups():
        params = [(n, p) for n, p in net.group(g).named_parameters() if p.requires_grad]
        sizes = np.array([p.numel() for _, p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        order = rng.permutation(int(sizes.sum()))
        scale = (mutate or {}).get(g, 1.0)
        worst, used, kinks = 0.0, 0, 0
        for flat in order:
            if used >= coords_per_group:
                break
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = params[k][1]
            idx = int(flat - offsets[k])
            with torch.no_grad():
                view = p.view(-1)
                orig = float(view[idx])
                view[idx] = orig + step
                plus, tr_plus = evaluate()
                view[idx] = orig - step
                minus, tr_minus = evaluate()
                view[idx] = orig
            if not (base.same_pieces(tr_plus) and base.same_pieces(tr_minus)):
                kinks += 1
                continue
            analytic = float(p.grad.reshape(-1)[idx]) * scale
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, relative_error(analytic, numeric))
            used += 1
        per_group[g], counts[g], skipped[g] = worst, used, kinks
    return GradCheckResult(max(per_group.values()), per_group, counts, skipped)

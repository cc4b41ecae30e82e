"""Training driver and finite-difference gradient harness."""
import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .objective import objective

logger = logging.getLogger(__name__)

PRECISIONS = {"single": torch.float32, "double": torch.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 256
    early_stop_patience: int = 2
    lr_reduce_patience: int = 1
    lr_reduce_factor: float = 0.5
    max_epochs: int = 50
    seed: int = 0
    precision: str = "single"
    completion_sharpness: float = 100.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.lr_reduce_patience > self.early_stop_patience:
            raise ValueError("lr_reduce_patience must not exceed early_stop_patience")
        if not 0 < self.lr_reduce_factor < 1:
            raise ValueError("lr_reduce_factor must lie in (0, 1)")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    lr_events: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_epoch: int = 0
    early_stopped: bool = False
    checkpoint: str = ""

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2))


class PlateauMonitor:
    """Early stopping and learning-rate reduction on a monitored loss.

    An epoch counts as an improvement only when the loss is strictly below the
    best so far. The reduction counter resets after each reduction.
    """

    def __init__(self, early_stop_patience, lr_reduce_patience, lr_reduce_factor):
        self.early_stop_patience = early_stop_patience
        self.lr_reduce_patience = lr_reduce_patience
        self.factor = lr_reduce_factor
        self.best = math.inf
        self.best_epoch = 0
        self.wait_stop = 0
        self.wait_lr = 0

    def step(self, epoch, loss):
        """Returns ``(improved, reduce_lr, stop)``."""
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            self.wait_stop = self.wait_lr = 0
            return True, False, False
        self.wait_stop += 1
        self.wait_lr += 1
        reduce = self.wait_lr >= self.lr_reduce_patience
        if reduce:
            self.wait_lr = 0
        return False, reduce, self.wait_stop >= self.early_stop_patience


def batch_tensors(batch, index=None, dtype=torch.float32):
    """Features, prices (rescaled to the first horizon price) and volumes as tensors."""
    if index is None:
        index = slice(None)
    feats = torch.as_tensor(batch.features[index], dtype=dtype)
    prices = np.asarray(batch.target_prices[index], dtype=np.float64)
    prices = prices / prices[:, :1]
    return feats, torch.as_tensor(prices, dtype=dtype), torch.as_tensor(batch.target_volumes[index], dtype=dtype)


def check_finite(loss):
    for name in ("pnl_term", "risk_term", "total"):
        value = getattr(loss, name)
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss term: {name} = {float(value)}")


def evaluate_loss(model, dataset, batch_size=1024, completion_sharpness=100.0):
    """Mean total loss over a dataset (weighted by batch size)."""
    dtype = next(model.parameters()).dtype
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            x, p, v = batch_tensors(dataset, idx, dtype)
            loss = objective(model(x), p, v, completion_sharpness)
            check_finite(loss)
            total += float(loss.total) * len(idx)
            count += len(idx)
    return total / count


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model, train_set, val_set, cfg, checkpoint_path=None, log_path=None, progress=None):
    """Fit ``model`` in place with Adam, plateau LR reduction and early stopping.

    The best-validation parameters are restored before returning. ``progress``
    is called with each epoch record.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    torch.manual_seed(cfg.seed)
    model.to(cfg.dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    monitor = PlateauMonitor(cfg.early_stop_patience, cfg.lr_reduce_patience, cfg.lr_reduce_factor)
    report = TrainReport()
    report.initial_val_loss = evaluate_loss(model, val_set, completion_sharpness=cfg.completion_sharpness)
    best_state = copy.deepcopy(model.state_dict())
    log_rows = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = epoch_order(len(train_set), cfg.seed, epoch)
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x, p, v = batch_tensors(train_set, idx, cfg.dtype)
            loss = objective(model(x), p, v, cfg.completion_sharpness)
            check_finite(loss)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            running += float(loss.total.detach()) * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = evaluate_loss(model, val_set, completion_sharpness=cfg.completion_sharpness)
        lr = optimizer.param_groups[0]["lr"]
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        report.epochs.append(record)
        log_rows.append(record)
        logger.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        if progress:
            progress(record)

        improved, reduce, stop = monitor.step(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if reduce:
            for group in optimizer.param_groups:
                group["lr"] *= cfg.lr_reduce_factor
            report.lr_events.append({"epoch": epoch, "lr": optimizer.param_groups[0]["lr"]})
        report.stopped_epoch = epoch
        if stop:
            report.early_stopped = True
            break

    model.load_state_dict(best_state)
    model.eval()
    report.best_epoch = monitor.best_epoch
    report.best_val_loss = monitor.best
    if log_path:
        write_progress_log(log_rows, log_path)
    if checkpoint_path:
        from .model import save_checkpoint

        save_checkpoint(model, checkpoint_path, {"train": asdict(cfg), "best_epoch": report.best_epoch})
        report.checkpoint = str(checkpoint_path)
    return report


def write_progress_log(rows, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in rows:
            writer.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"])])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

# central differences with step 1e-6 carry ~1e-9 absolute round-off on an O(1)
# loss, so gradients below this magnitude are compared absolutely at tol * floor
GRAD_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)  # group -> max relative error
    per_tensor: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    @property
    def failing(self):
        return sorted(g for g, e in self.max_rel_error.items() if not e < self.tolerance)

    @property
    def passed(self):
        return not self.failing and bool(self.max_rel_error)

    def summary(self):
        lines = []
        for g in sorted(self.max_rel_error):
            status = "ok" if self.max_rel_error[g] < self.tolerance else "FAIL"
            lines.append(f"{g:32s} samples={self.samples[g]:4d} excluded={self.excluded[g]:3d} "
                         f"max_rel_err={self.max_rel_error[g]:.3e} {status}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def parameter_group(name):
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] in ("encoder", "decision") else parts[0]


def _model_loss(model, x, p, v, sharpness):
    alloc = model(x)
    return objective(alloc, p, v, sharpness).total, model.decision.last_binding.clone()


def analytic_gradients(model, batch, completion_sharpness=100.0):
    x, p, v = batch
    model.zero_grad()
    loss, _ = _model_loss(model, x, p, v, completion_sharpness)
    loss.backward()
    return {n: prm.grad.detach().clone() for n, prm in model.named_parameters()}


def grad_check(model, batch, tolerance=1e-4, fraction=0.01, step=1e-6, seed=0, completion_sharpness=100.0,
               analytic=None, include_objective=True, only=None):
    """Central finite differences on a random ``fraction`` of every parameter tensor.

    ``batch`` is ``(features, prices, volumes)`` in double precision. A sample is
    excluded when either perturbed evaluation switches a hard budget clip (the
    allocation is not differentiable across that kink). With
    ``include_objective`` the gradient of the loss with respect to the
    allocation tensor itself is checked as group ``objective``. ``only`` limits
    the sweep to parameters whose name starts with one of the given prefixes.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("grad_check requires a double-precision model")
    model.eval()
    x, p, v = batch
    if analytic is None:
        analytic = analytic_gradients(model, batch, completion_sharpness)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    with torch.no_grad():
        _, base_binding = _model_loss(model, x, p, v, completion_sharpness)
        for name, prm in model.named_parameters():
            if only is not None and not name.startswith(tuple(only)):
                continue
            group = parameter_group(name)
            flat = prm.view(-1)
            k = max(1, int(math.ceil(fraction * flat.numel())))
            picks = rng.choice(flat.numel(), size=k, replace=False)
            worst = 0.0
            used = 0
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                up, b_up = _model_loss(model, x, p, v, completion_sharpness)
                flat[i] = orig - step
                down, b_down = _model_loss(model, x, p, v, completion_sharpness)
                flat[i] = orig
                if not (torch.equal(b_up, base_binding) and torch.equal(b_down, base_binding)):
                    report.excluded[group] = report.excluded.get(group, 0) + 1
                    continue
                numeric = (up.item() - down.item()) / (2 * step)
                err = relative_error(analytic[name].view(-1)[i].item(), numeric)
                worst = max(worst, err)
                used += 1
            report.per_tensor[name] = worst
            report.max_rel_error[group] = max(report.max_rel_error.get(group, 0.0), worst)
            report.samples[group] = report.samples.get(group, 0) + used
            report.excluded.setdefault(group, 0)

    if include_objective:
        with torch.no_grad():
            alloc = model(x).detach().clone()
        _objective_check(report, alloc, p, v, rng, fraction, step, completion_sharpness)
    return report


def _objective_check(report, alloc, p, v, rng, fraction, step, sharpness):
    leaf = alloc.clone().requires_grad_(True)
    objective(leaf, p, v, sharpness).total.backward()
    grad = leaf.grad.view(-1)
    flat = alloc.view(-1)
    k = max(8, int(math.ceil(fraction * flat.numel())))
    worst = 0.0
    for i in rng.choice(flat.numel(), size=k, replace=False):
        orig = flat[i].item()
        flat[i] = orig + step
        up = objective(alloc, p, v, sharpness).total.item()
        flat[i] = orig - step
        down = objective(alloc, p, v, sharpness).total.item()
        flat[i] = orig
        worst = max(worst, relative_error(grad[i].item(), (up - down) / (2 * step)))
    report.max_rel_error["objective"] = worst
    report.per_tensor["objective.alloc"] = worst
    report.samples["objective"] = k
    report.excluded["objective"] = 0

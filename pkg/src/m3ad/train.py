"""Two-stage training: optimizer, schedule, early stopping, checkpoints,
and the pretrain/fine-tune loops.

Stage 1 minimizes the masked-reconstruction objective with fixed
label-guided expert routing; gate parameters never receive a gradient
and therefore never change (the optimizer skips parameters without one,
so decoupled weight decay cannot touch them either). Stage 2 runs two
gated forward passes per batch, one per task, and optimizes the summed
cross-entropies.

Everything is deterministic in (seed, config, data): epoch shuffling and
mask sampling derive from the seed, and validation masks are drawn once
so the early-stopping metric is comparable across epochs.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .config import ModelConfig, TrainConfig, config_as_dict, model_config_from_dict
from .data import Dataset
from .errors import CheckpointError, ContractError
from .heads_losses import finetune_loss, masked_l1_per_sample, pretrain_loss, sample_mask
from .model import M3ADNet
from .numerics import Tensor, no_grad
from .priors import PriorStats, compute_prior_stats, normalize_priors

log = logging.getLogger("m3ad")

_EPOCH_TAG = 0x45504F43
_VALMASK_TAG = 0x564D534B


def cosine_lr(t: int, total: int, base: float, min_lr: float) -> float:
    """Cosine annealing from base (t=0) to min_lr (t=total); clamps past the end."""
    if t >= total:
        return min_lr
    return min_lr + 0.5 * (base - min_lr) * (1.0 + np.cos(np.pi * t / total))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most
    ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8).

    Parameters whose gradient is absent are skipped entirely: no moment
    update, no decay. Each parameter keeps its own step count so bias
    correction stays exact for late joiners.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.state: dict[str, dict] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ContractError(f"non-finite gradient for parameter {name!r}")
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            st["t"] += 1
            t = st["t"]
            st["m"] = self.BETA1 * st["m"] + (1.0 - self.BETA1) * g
            st["v"] = self.BETA2 * st["v"] + (1.0 - self.BETA2) * (g * g)
            m_hat = st["m"] / (1.0 - self.BETA1 ** t)
            v_hat = st["v"] / (1.0 - self.BETA2 ** t)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.EPS)).astype(p.data.dtype)


class EarlyStopper:
    """Stop when the monitored value has not improved for ``patience``
    epochs; improvement is strict."""

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ContractError(f"mode must be min or max, got {mode!r}")
        self.patience = int(patience)
        self.mode = mode
        self.best: float | None = None
        self.best_epoch: int = -1

    def update(self, value: float, epoch: int) -> bool:
        better = (self.best is None
                  or (value < self.best if self.mode == "min" else value > self.best))
        if better:
            self.best = float(value)
            self.best_epoch = epoch
            return False
        return (epoch - self.best_epoch) >= self.patience


# -- checkpoints -------------------------------------------------------

_CKPT_MAGIC = b"M3CK"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    stage: str
    params: dict[str, np.ndarray]
    moments: dict[str, dict] = field(default_factory=dict)
    epoch: int = 0
    best: dict = field(default_factory=dict)
    prior_stats: PriorStats | None = None


def snapshot(model: M3ADNet, optimizer: AdamW | None, stage: str, epoch: int,
             best: dict, prior_stats: PriorStats | None = None) -> Checkpoint:
    """Deep-copy the live training state into a Checkpoint."""
    params = {name: p.data.copy() for name, p in model.named_parameters().items()}
    moments = {}
    if optimizer is not None:
        moments = {name: {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}
                   for name, st in optimizer.state.items()}
    return Checkpoint(model_config=model.cfg, stage=stage, params=params,
                      moments=moments, epoch=epoch, best=dict(best),
                      prior_stats=prior_stats)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """magic, version, u64 header length, JSON header, raw payloads."""
    index = []
    payloads = []
    offset = 0

    def push(kind: str, name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr)
        if raw.dtype.byteorder == ">":
            raw = raw.astype(raw.dtype.newbyteorder("<"))
        blob = raw.tobytes()
        index.append({"kind": kind, "name": name, "dtype": str(raw.dtype),
                      "shape": list(raw.shape), "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)

    for name, arr in ckpt.params.items():
        push("param", name, arr)
    for name, st in ckpt.moments.items():
        push("m", name, st["m"])
        push("v", name, st["v"])

    header = {
        "model_config": config_as_dict(ckpt.model_config),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "best": ckpt.best,
        "prior_stats": ckpt.prior_stats.as_dict() if ckpt.prior_stats else None,
        "moment_steps": {name: st["t"] for name, st in ckpt.moments.items()},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head_len, = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + head_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {err}") from None
    base = 16 + head_len

    tensors: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        tensors[(entry["kind"], entry["name"])] = arr.reshape(entry["shape"]).copy()

    params = {name: arr for (kind, name), arr in tensors.items() if kind == "param"}
    moments = {}
    for name, t in header.get("moment_steps", {}).items():
        try:
            moments[name] = {"m": tensors[("m", name)], "v": tensors[("v", name)], "t": int(t)}
        except KeyError:
            raise CheckpointError(f"{path}: missing moment payload for {name!r}") from None
    stats = header.get("prior_stats")
    return Checkpoint(
        model_config=model_config_from_dict(header["model_config"]),
        stage=header["stage"], params=params, moments=moments,
        epoch=int(header["epoch"]), best=dict(header["best"]),
        prior_stats=PriorStats.from_dict(stats) if stats else None)


def load_params(model: M3ADNet, ckpt: Checkpoint, strict: bool = True) -> list[str]:
    """Assign checkpoint parameters into a model by name.

    With ``strict=False``, parameters missing from the checkpoint or with
    a different shape keep their fresh initialization (used when the
    change-head arity differs between stages); the skipped names are
    returned.
    """
    named = model.named_parameters()
    skipped = []
    for name, p in named.items():
        arr = ckpt.params.get(name)
        if arr is None or tuple(arr.shape) != p.data.shape:
            if strict:
                raise CheckpointError(
                    f"checkpoint does not provide parameter {name!r} with shape {p.data.shape}")
            skipped.append(name)
            continue
        p.data = arr.astype(p.data.dtype, copy=True)
    extra = set(ckpt.params) - set(named)
    if strict and extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)[:4]}")
    return skipped


def model_from_checkpoint(ckpt: Checkpoint) -> M3ADNet:
    model = M3ADNet(ckpt.model_config, seed=0)
    load_params(model, ckpt, strict=True)
    return model


def restore_optimizer(opt: AdamW, ckpt: Checkpoint) -> None:
    for name, st in ckpt.moments.items():
        if name in opt.params:
            opt.state[name] = {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}


# -- loops -------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _EPOCH_TAG, int(epoch)]))


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def pretrain_loop(model: M3ADNet, train: Dataset, val: Dataset, cfg: TrainConfig,
                  on_batch=None) -> tuple[Checkpoint, list[dict]]:
    """Masked-reconstruction pretraining; returns the best checkpoint
    (by validation masked L1) and one log row per completed epoch."""
    cfg.validate()
    mcfg = model.cfg
    hw = train.images.shape[1:]
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience, mode="min")
    min_lr = cfg.min_lr_ratio * cfg.lr

    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _VALMASK_TAG]))
    val_specs = [sample_mask(val_rng, hw, mcfg.mask_unit, mcfg.mask_ratio)
                 for _ in range(len(val))]

    best_ckpt: Checkpoint | None = None
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, min_lr)
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        count = 0
        for batch in _batches(order, cfg.batch_size):
            specs = [sample_mask(rng, hw, mcfg.mask_unit, mcfg.mask_ratio) for _ in batch]
            total, recon, expert = pretrain_loss(
                model, train.images[batch], train.diag[batch], specs, cfg.lambda_expert)
            model.zero_grad()
            total.backward()
            if on_batch is not None:
                on_batch(model, epoch, batch)
            clip_gradients(model.parameters(), cfg.clip_norm)
            opt.step()
            sums += [total.item() * batch.size, recon.item() * batch.size,
                     expert.item() * batch.size]
            count += batch.size

        val_l1 = _masked_l1_eval(model, val, val_specs, cfg.batch_size)
        rows.append({"epoch": epoch, "lr": opt.lr,
                     "train_total": sums[0] / count, "train_recon": sums[1] / count,
                     "train_expert": sums[2] / count, "val_masked_l1": val_l1})
        log.info("pretrain epoch %d: train %.5f val %.5f", epoch, sums[0] / count, val_l1)

        if stopper.best is None or val_l1 < stopper.best:
            best_ckpt = snapshot(model, opt, "pretrain", epoch,
                                 {"metric": "val_masked_l1", "value": val_l1, "epoch": epoch})
        if stopper.update(val_l1, epoch):
            log.info("pretrain early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    assert best_ckpt is not None
    return best_ckpt, rows


def _masked_l1_eval(model: M3ADNet, ds: Dataset, specs, batch_size: int) -> float:
    """Mean per-sample masked L1 under label-guided routing."""
    values = np.empty(len(ds))
    with no_grad():
        for batch in _batches(np.arange(len(ds)), batch_size):
            batch_specs = [specs[i] for i in batch]
            pred = model.reconstruct_label_guided(ds.images[batch], ds.diag[batch], batch_specs)
            values[batch] = masked_l1_per_sample(pred.data, ds.images[batch], batch_specs)
    return float(values.mean())


def class_routed_l1(model: M3ADNet, ds: Dataset, specs, klass: int,
                    batch_size: int = 16) -> np.ndarray:
    """Per-sample masked L1 when every sample is routed through one
    class's experts (evaluation helper for specialization probes)."""
    values = np.empty(len(ds))
    with no_grad():
        for batch in _batches(np.arange(len(ds)), batch_size):
            batch_specs = [specs[i] for i in batch]
            pred = model.reconstruct_class_only(ds.images[batch], klass, batch_specs)
            values[batch] = masked_l1_per_sample(pred.data, ds.images[batch], batch_specs)
    return values


def task_accuracies(model: M3ADNet, ds: Dataset, stats: PriorStats,
                    batch_size: int = 16) -> tuple[float, float]:
    """(diagnosis accuracy, change accuracy) of argmax predictions."""
    correct = np.zeros(2)
    with no_grad():
        for batch in _batches(np.arange(len(ds)), batch_size):
            priors = normalize_priors(ds.age[batch], ds.gender[batch], ds.etiv[batch],
                                      stats, dtype=model.np_dtype)
            diag_logits, change_logits = model.dual_task_logits(ds.images[batch], priors)
            correct[0] += int((diag_logits.data.argmax(axis=1) == ds.diag[batch]).sum())
            correct[1] += int((change_logits.data.argmax(axis=1) == ds.change[batch]).sum())
    return float(correct[0] / len(ds)), float(correct[1] / len(ds))


def finetune_loop(model: M3ADNet, train: Dataset, val: Dataset, cfg: TrainConfig,
                  init: Checkpoint | None = None,
                  on_batch=None) -> tuple[Checkpoint, list[dict]]:
    """Dual-pass multi-task fine-tuning; the monitored quantity is the
    mean of the two validation task accuracies.

    ``init`` seeds the model with pretrained parameters; shapes that
    differ (the change head when switching label schemes) and parameters
    new to this stage keep their fresh initialization.
    """
    cfg.validate()
    if init is not None:
        skipped = load_params(model, init, strict=False)
        if skipped:
            log.info("fine-tune init: %d parameters kept fresh (%s, ...)",
                     len(skipped), skipped[0])
    if int(train.change.max()) >= model.cfg.num_change_classes:
        raise ContractError(
            f"change label {int(train.change.max())} out of range for "
            f"{model.cfg.num_change_classes}-class head")

    stats = compute_prior_stats(train.age, train.etiv)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience, mode="max")
    min_lr = cfg.min_lr_ratio * cfg.lr

    best_ckpt: Checkpoint | None = None
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, min_lr)
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train))
        loss_sum = 0.0
        for batch in _batches(order, cfg.batch_size):
            priors = normalize_priors(train.age[batch], train.gender[batch],
                                      train.etiv[batch], stats, dtype=model.np_dtype)
            diag_logits, change_logits = model.dual_task_logits(train.images[batch], priors)
            loss = finetune_loss(diag_logits, change_logits, train.diag[batch],
                                 train.change[batch], alpha=cfg.alpha, beta=cfg.beta)
            model.zero_grad()
            loss.backward()
            if on_batch is not None:
                on_batch(model, epoch, batch)
            clip_gradients(model.parameters(), cfg.clip_norm)
            opt.step()
            loss_sum += loss.item() * batch.size

        diag_acc, change_acc = task_accuracies(model, val, stats, cfg.batch_size)
        mean_acc = 0.5 * (diag_acc + change_acc)
        rows.append({"epoch": epoch, "lr": opt.lr, "train_loss": loss_sum / len(train),
                     "val_diag_acc": diag_acc, "val_change_acc": change_acc,
                     "val_mean_acc": mean_acc})
        log.info("finetune epoch %d: loss %.5f diag %.3f change %.3f",
                 epoch, loss_sum / len(train), diag_acc, change_acc)

        if stopper.best is None or mean_acc > stopper.best:
            best_ckpt = snapshot(model, opt, "finetune", epoch,
                                 {"metric": "val_mean_acc", "value": mean_acc, "epoch": epoch},
                                 prior_stats=stats)
        if stopper.update(mean_acc, epoch):
            log.info("finetune early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    assert best_ckpt is not None
    return best_ckpt, rows


def timed_epoch(fn) -> float:
    """Wall-clock one call; kept separate so timing never lands in logs
    that are compared across runs."""
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start

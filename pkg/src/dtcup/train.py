"""Loss, optimizer, and the deterministic training loop."""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec, gen_sample
from .metrics import dice_score, nsd_score
from .rng import SplitMix
from .tensor import ShapeError, Tensor, _sigmoid
from .unet import UNetConfig, UNetParams, _backward_tape, _forward_tape, build_unet, unet_forward

DICE_EPS = 1e-5


def soft_dice_loss(logits: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Soft Dice loss over the whole batch and its gradient w.r.t. logits.

    loss = 1 - (2 sum(p*t) + eps) / (sum(p) + sum(t) + eps) with
    p = sigmoid(logits); the epsilon makes empty-on-empty score ~0 loss.
    """
    if logits.dims != target.dims:
        raise ShapeError(f"shape mismatch: {logits.dims} vs {target.dims}")
    t = target.data
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("target must be binary (0/1)")
    p = _sigmoid(logits.data)
    num = 2.0 * float((p * t).sum()) + DICE_EPS
    den = float(p.sum()) + float(t.sum()) + DICE_EPS
    loss = 1.0 - num / den
    # d loss / d p = -(2t * den - num) / den^2, then through the sigmoid.
    dp = -(2.0 * t * den - num) / (den * den)
    grad = dp * p * (1.0 - p)
    return loss, Tensor(grad.astype(logits.data.dtype))


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam state for a named parameter set."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_init(params: UNetParams, lr=1e-4, weight_decay=1e-5, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, tensor in params.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def adamw_step(params: UNetParams, grads: UNetParams, state: AdamWState) -> UNetParams:
    """One optimizer step; returns updated parameters, advances the state.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    new_entries = []
    for name, p in params.items():
        g = grads.get(name).data
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape} for {name}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        new_entries.append((name, Tensor(p.data - state.lr * update)))
    return UNetParams(new_entries)


@dataclass
class TrainHistory:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def csv_lines(self) -> list[str]:
        lines = ["iter,loss,val_dice,val_nsd"]
        for it, loss, dice, nsd in self.rows:
            lines.append(f"{it},{loss:.6f},{dice:.6f},{nsd:.6f}")
        return lines


def _stack_batch(samples, idx) -> tuple[Tensor, Tensor]:
    images = np.stack([samples[i].image.data for i in idx])
    masks = np.stack([samples[i].mask.data for i in idx])
    return Tensor(images), Tensor(masks)


def predict_mask(logits: Tensor) -> Tensor:
    return Tensor((logits.data > 0).astype(logits.data.dtype))


def evaluate(
    params: UNetParams, cfg: UNetConfig, samples, tau: float = 1.0, batch_size: int = 8
) -> tuple[float, float]:
    """Mean validation Dice and NSD of thresholded predictions."""
    dices = []
    nsds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = Tensor(np.stack([s.image.data for s in chunk]))
        logits = unet_forward(params, cfg, images)
        for s, l in zip(chunk, logits.data):
            pred = predict_mask(Tensor(l))
            dices.append(dice_score(pred, s.mask))
            nsds.append(nsd_score(pred, s.mask, tau))
    return float(np.mean(dices)), float(np.mean(nsds))


def train_loop(
    cfg: UNetConfig,
    data: DatasetSpec,
    iters: int,
    seed: int,
    batch_size: int = 4,
    lr: float = 1e-4,
    weight_decay: float = 1e-5,
    val_every: int = 200,
    nsd_tau: float = 1.0,
    dtype=np.float32,
) -> tuple[UNetParams, TrainHistory]:
    """Deterministic training run: fixed init, fixed batch order, AdamW.

    History records (iteration, batch loss, val Dice, val NSD) every
    val_every iterations and at the final iteration.
    """
    if data.rank != cfg.spatial_rank or data.extent != cfg.extent:
        raise ShapeError(
            f"dataset geometry rank={data.rank} extent={data.extent} does not match "
            f"model rank={cfg.spatial_rank} extent={cfg.extent}"
        )
    train_samples = [gen_sample(data, i, dtype=dtype) for i in range(data.n_train)]
    val_samples = [
        gen_sample(data, data.n_train + i, dtype=dtype) for i in range(data.n_val)
    ]
    params = build_unet(cfg, seed, dtype=dtype)
    state = adamw_init(params, lr=lr, weight_decay=weight_decay)
    order = SplitMix(seed, "batch_order")
    history = TrainHistory()
    for it in range(iters):
        idx = order.integers(data.n_train, batch_size)
        images, masks = _stack_batch(train_samples, idx)
        logits, tape = _forward_tape(params, cfg, images)
        loss, grad_logits = soft_dice_loss(logits, masks)
        grads = _backward_tape(params, cfg, tape, grad_logits)
        grads_named = UNetParams([(name, grads[name]) for name, _ in params.items()])
        params = adamw_step(params, grads_named, state)
        if (it + 1) % val_every == 0 or it + 1 == iters:
            dice, nsd = evaluate(params, cfg, val_samples, nsd_tau)
            history.rows.append((it + 1, loss, dice, nsd))
    return params, history


@dataclass(frozen=True)
class TrainJob:
    cfg: UNetConfig
    data: DatasetSpec
    iters: int
    seed: int
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-5
    val_every: int = 200
    nsd_tau: float = 1.0


def _run_job(job: TrainJob) -> TrainHistory:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        threadpool_limits = None
    if threadpool_limits is not None and multiprocessing.parent_process() is not None:
        with threadpool_limits(limits=1):
            return _run_job_inner(job)
    return _run_job_inner(job)


def _run_job_inner(job: TrainJob) -> TrainHistory:
    _, history = train_loop(
        job.cfg,
        job.data,
        iters=job.iters,
        seed=job.seed,
        batch_size=job.batch_size,
        lr=job.lr,
        weight_decay=job.weight_decay,
        val_every=job.val_every,
        nsd_tau=job.nsd_tau,
    )
    return history


def run_training_jobs(jobs: list[TrainJob], processes: int = 1) -> list[TrainHistory]:
    """Run independent training jobs, optionally in worker processes.

    Every job is deterministic in isolation, so results do not depend on
    scheduling; the returned list matches the job order.
    """
    if processes <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with multiprocessing.get_context("fork").Pool(min(processes, len(jobs))) as pool:
        return pool.map(_run_job, jobs)

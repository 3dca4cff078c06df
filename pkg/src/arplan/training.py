"""Losses, optimizer, staged training protocol, and evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, scenes
from .metrics import ScoreConfig, score_scene
from .model import Batch, ModelConfig, forward, init_model, make_batch, semantic_logits
from .planner import wrap_angle_t
from .tensor import Tensor, no_grad

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class LossWeights:
    sem: float = 1.0
    cls: float = 1.0
    box: float = 0.5
    traj: float = 15.0
    nll: float = 0.2


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    stage1_epochs: int = 3
    seed: int = 0
    val_fraction: float = 0.1
    grad_clip: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    train_l1: float
    val_l1: float
    samples_per_sec: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_l1: float = float("inf")


def _abs(x: Tensor) -> Tensor:
    return x.relu() + (-x).relu()


def traj_l1_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean absolute error over all trajectory components; heading errors are
    computed on the wrapped difference."""
    gt = np.asarray(gt)
    d_xy = pred[..., :2] - Tensor(gt[..., :2])
    d_h = wrap_angle_t(pred[..., 2:3] - Tensor(gt[..., 2:3]))
    return (_abs(d_xy).sum() + _abs(d_h).sum()) * (1.0 / gt.size)


def nll_loss(dists, gt: np.ndarray) -> Tensor:
    """Mean Gaussian negative log-likelihood over waypoints and components."""
    gt = np.asarray(gt)
    if len(dists) != gt.shape[1]:
        raise ValueError(f"{len(dists)} distributions for {gt.shape[1]} waypoints")
    terms = []
    for t, dist in enumerate(dists):
        d_xy = dist.mu[:, :2] - Tensor(gt[:, t, :2])
        d_h = wrap_angle_t(dist.mu[:, 2:3] - Tensor(gt[:, t, 2:3]))
        for d, sigma in ((d_xy, dist.sigma[:, :2]), (d_h, dist.sigma[:, 2:3])):
            zz = d / sigma
            terms.append((0.5 * zz * zz + sigma.log() + 0.5 * LOG_2PI).sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / gt.size)


def sem_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of the per-token semantic patch reconstruction."""
    B = labels.shape[0]
    g, p = scenes.GRID, scenes.PATCH
    ntok = scenes.C_BEV
    cells = p * p
    lab = labels.reshape(B, g // p, p, g // p, p).transpose(0, 1, 3, 2, 4)
    lab = lab.reshape(B, ntok, cells)
    lg = logits.reshape(B, ntok, cells, scenes.N_CLASSES)
    m = Tensor(lg.data.max(axis=-1, keepdims=True))
    lse = (lg - m).exp().sum(axis=-1, keepdims=True).log() + m
    logp = lg - lse
    bi = np.arange(B)[:, None, None]
    ti = np.arange(ntok)[None, :, None]
    ci = np.arange(cells)[None, None, :]
    picked = logp[(bi, ti, ci, lab)]
    return -picked.mean()


def total_loss(out, batch: Batch, w: LossWeights):
    """Weighted planning + perception-stub loss.

    Classification/box terms are configurable hooks with no inputs here, so
    they contribute zero.
    """
    l_traj = traj_l1_loss(out.traj, batch.gt)
    l_nll = nll_loss(out.dists, batch.gt)
    l_sem = sem_ce_loss(out.sem_logits, batch.sem_labels)
    parts = []
    if w.traj != 0.0:
        parts.append(w.traj * l_traj)
    if w.nll != 0.0:
        parts.append(w.nll * l_nll)
    if w.sem != 0.0:
        parts.append(w.sem * l_sem)
    if not parts:
        return Tensor(0.0), l_traj, l_nll, l_sem
    loss = parts[0]
    for t in parts[1:]:
        loss = loss + t
    return loss, l_traj, l_nll, l_sem


def decayed(name: str, t: Tensor) -> bool:
    """Decoupled weight decay applies to affine weight matrices only (not
    embedding tables, norms, biases, convs, or constraint weights)."""
    return name.endswith(".w") and t.ndim == 2


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer with gradient-norm
    clipping."""

    def __init__(self, params: nn.Params, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 5.0,
                 subset=None):
        self.params = params
        self.names = list(subset) if subset is not None else list(params.keys())
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self):
        self.t += 1
        grads = {}
        sq = 0.0
        for n in self.names:
            g = self.params[n].grad
            if g is None:
                g = np.zeros_like(self.params[n].data)
            grads[n] = g
            sq += float((g * g).sum())
        norm = math.sqrt(sq)
        scale = 1.0 if norm <= self.clip else self.clip / norm
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = grads[n] * scale
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mh = self.m[n] / bc1
            vh = self.v[n] / bc2
            p.data = p.data - self.lr * mh / (np.sqrt(vh) + self.eps)
            if decayed(n, p):
                p.data = p.data - self.lr * self.weight_decay * p.data


def split_dataset(dataset: scenes.Dataset, val_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 0x5D17])
    idx = rng.permutation(len(dataset.scenes))
    n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
    val = [dataset.scenes[i] for i in idx[:n_val]]
    train = [dataset.scenes[i] for i in idx[n_val:]]
    return train, val


def _mean_val_l1(params, cfg: ModelConfig, scene_list, batch_size: int) -> float:
    if not scene_list:
        return float("nan")
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(scene_list), batch_size):
            batch = make_batch(scene_list[lo:lo + batch_size])
            out = forward(params, cfg, batch, mode="mean")
            total += float(traj_l1_loss(out.traj, batch.gt).data) * batch.size
            count += batch.size
    return total / count


def train(dataset: scenes.Dataset, tcfg: TrainConfig, mcfg: ModelConfig):
    """Staged training: perception-stub stage, then end-to-end.

    Returns (best_params, TrainReport, final_params).
    """
    if not dataset.scenes:
        raise ValueError("cannot train on an empty dataset")
    params = init_model(mcfg, tcfg.seed)
    train_scenes, val_scenes = split_dataset(dataset, tcfg.val_fraction,
                                             tcfg.seed)
    report = TrainReport()
    best_params = None
    rng = np.random.default_rng([tcfg.seed, 0x7A])
    epoch_counter = 0

    sem_names = [n for n in params if n.startswith("sem_head")]
    opt1 = AdamW(params, tcfg.lr, tcfg.weight_decay, clip=tcfg.grad_clip,
                 subset=sem_names)
    for _ in range(tcfg.stage1_epochs):
        epoch_counter += 1
        t0 = time.perf_counter()
        order = rng.permutation(len(train_scenes))
        losses = []
        for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = make_batch([train_scenes[i]
                                for i in order[lo:lo + tcfg.batch_size]])
            params.zero_grad()
            loss = tcfg.weights.sem * sem_ce_loss(
                semantic_logits(params, batch.bev), batch.sem_labels)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch_counter, bi)
            loss.backward()
            opt1.step()
            losses.append(float(loss.data))
        dt = time.perf_counter() - t0
        report.records.append(EpochRecord(
            epoch=epoch_counter, stage=1, train_loss=float(np.mean(losses)),
            train_l1=float("nan"), val_l1=float("nan"),
            samples_per_sec=len(order) / dt))

    opt2 = AdamW(params, tcfg.lr, tcfg.weight_decay, clip=tcfg.grad_clip)
    for _ in range(tcfg.epochs):
        epoch_counter += 1
        t0 = time.perf_counter()
        order = rng.permutation(len(train_scenes))
        losses, l1s = [], []
        for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = make_batch([train_scenes[i]
                                for i in order[lo:lo + tcfg.batch_size]])
            params.zero_grad()
            out = forward(params, mcfg, batch, mode="mean")
            loss, l_traj, _, _ = total_loss(out, batch, tcfg.weights)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch_counter, bi)
            loss.backward()
            opt2.step()
            losses.append(float(loss.data))
            l1s.append(float(l_traj.data))
        dt = time.perf_counter() - t0
        val_l1 = _mean_val_l1(params, mcfg, val_scenes, tcfg.batch_size)
        report.records.append(EpochRecord(
            epoch=epoch_counter, stage=2, train_loss=float(np.mean(losses)),
            train_l1=float(np.mean(l1s)), val_l1=val_l1,
            samples_per_sec=len(order) / dt))
        if np.isfinite(val_l1) and val_l1 < report.best_val_l1:
            report.best_val_l1 = val_l1
            report.best_epoch = epoch_counter
            best_params = _copy_params(params)
    if best_params is None:
        best_params = _copy_params(params)
    return best_params, report, params


def _copy_params(params: nn.Params) -> nn.Params:
    out = nn.Params()
    for n, t in params.items():
        out.add(n, t.data.copy())
    return out


def constant_velocity_trajectory(scene) -> np.ndarray:
    """Baseline: extrapolate the current ego velocity."""
    v = scene.ego.velocity
    t = (np.arange(scenes.HORIZON) + 1) * scenes.DT
    traj = np.zeros((scenes.HORIZON, 3))
    traj[:, 0] = v[0] * t
    traj[:, 1] = v[1] * t
    traj[:, 2] = 0.0 if np.hypot(*v) < 1e-9 else np.arctan2(v[1], v[0])
    return traj


def evaluate(params: nn.Params, mcfg: ModelConfig, dataset: scenes.Dataset,
             score_cfg: ScoreConfig | None = None, batch_size: int = 32):
    """Deterministic mean-mode evaluation.

    Returns (rows, summary, baseline_summary, mean_l1); each row is a dict
    with per-scene sub-scores for both the model and the baseline.
    """
    score_cfg = score_cfg or ScoreConfig()
    rows = []
    model_subs, base_subs = [], []
    l1_total = 0.0
    with no_grad():
        for lo in range(0, len(dataset.scenes), batch_size):
            chunk = dataset.scenes[lo:lo + batch_size]
            batch = make_batch(chunk)
            out = forward(params, mcfg, batch, mode="mean")
            l1_total += float(traj_l1_loss(out.traj, batch.gt).data) * len(chunk)
            for i, scene in enumerate(chunk):
                traj = out.traj.data[i]
                sub = score_scene(traj, scene, score_cfg)
                base = score_scene(constant_velocity_trajectory(scene), scene,
                                   score_cfg)
                model_subs.append(sub)
                base_subs.append(base)
                rows.append({"scene_id": lo + i, "nc": sub.nc, "dac": sub.dac,
                             "ep": sub.ep, "ttc": sub.ttc, "c": sub.c,
                             "pdms": sub.pdms})
    summary = _mean_scores(model_subs)
    baseline = _mean_scores(base_subs)
    return rows, summary, baseline, l1_total / max(1, len(dataset.scenes))


def _mean_scores(subs) -> dict:
    return {k: float(np.mean([getattr(s, k) for s in subs]))
            for k in ("nc", "dac", "ep", "ttc", "c", "pdms")}

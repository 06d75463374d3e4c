"""Losses, template/search pair sampling and the toy training loop.

Loss: weighted focal loss on the score map against a Gaussian heat map, plus
GIoU and L1 on the box read at the ground-truth cell::

    L = L_cls + lambda_iou * L_giou + lambda_l1 * L_l1
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crops import SEARCH_CONTEXT, TEMPLATE_CONTEXT, CropWindow, crop
from .events import generate_synthetic_sequence, random_sequence_config
from .evaluation import compute_metrics, evaluate_model, sequence_images
from .gtp import DEFAULT_ALPHA, DEFAULT_BETA
from .model import HeadOutput, ModelConfig, SDTrack, boxes_at_cells, toy_config

logger = logging.getLogger(__name__)

FOCAL_EPS = 1e-6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainSample:
    template: np.ndarray  # (T, 3, h, w)
    search: np.ndarray  # (T, 3, H, W)
    box: tuple[float, float, float, float]  # (cx, cy, w, h) normalized to the search crop

    def __post_init__(self):
        if not all(0.0 <= v <= 1.0 for v in self.box):
            raise ValueError(f"box {self.box} outside the unit square")


# -- losses ------------------------------------------------------------------

def gaussian_target(size: int, row: int, col: int, sigma: float = 1.0) -> np.ndarray:
    """(size, size) heat map with an exact 1.0 at (row, col)."""
    r = np.arange(size)[:, None] - row
    c = np.arange(size)[None, :] - col
    return np.exp(-(r * r + c * c) / (2.0 * sigma * sigma))


def center_cell(box, size: int) -> tuple[int, int]:
    cx, cy = box[0], box[1]
    return (min(max(int(cy * size), 0), size - 1), min(max(int(cx * size), 0), size - 1))


def focal_loss(score: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on probabilities, normalized by the number
    of positive (== 1) cells."""
    target = np.asarray(target)
    if score.shape != target.shape:
        raise ValueError(f"score {score.shape} vs target {target.shape}")
    p = ad.clip(score, FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos = (target == 1.0).astype(score.dtype)
    neg_w = ((1.0 - target) ** beta * (1.0 - pos)).astype(score.dtype)
    pos_term = (1.0 - p) ** alpha * ad.log(p) * pos
    neg_term = p ** alpha * ad.log(1.0 - p) * neg_w
    n_pos = max(float(pos.sum()), 1.0)
    return -(pos_term.sum() + neg_term.sum()) / n_pos


def _as_tensor(b) -> Tensor:
    return b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64), dtype=np.float64)


def giou(pred, gt) -> Tensor:
    """Generalized IoU of (..., 4) boxes in (cx, cy, w, h) form."""
    pred, gt = _as_tensor(pred), np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth box needs positive width and height")
    px1 = pred[..., 0] - pred[..., 2] * 0.5
    px2 = pred[..., 0] + pred[..., 2] * 0.5
    py1 = pred[..., 1] - pred[..., 3] * 0.5
    py2 = pred[..., 1] + pred[..., 3] * 0.5
    gx1, gx2 = gt[..., 0] - gt[..., 2] / 2, gt[..., 0] + gt[..., 2] / 2
    gy1, gy2 = gt[..., 1] - gt[..., 3] / 2, gt[..., 1] + gt[..., 3] / 2
    iw = ad.clip(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), 0.0, None)
    ih = ad.clip(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), 0.0, None)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    enclose = (ad.maximum(px2, gx2) - ad.minimum(px1, gx1)) * (ad.maximum(py2, gy2) - ad.minimum(py1, gy1))
    return inter / union - (enclose - union) / enclose


def giou_loss(pred, gt) -> Tensor:
    return (1.0 - giou(pred, gt)).mean()


def l1_loss(pred, gt) -> Tensor:
    pred = _as_tensor(pred)
    g = np.asarray(gt, dtype=pred.dtype)
    if np.any(g[..., 2:] <= 0):
        raise ValueError("ground-truth box needs positive width and height")
    return (pred - g).abs().mean()


def weighted_total(cls, iou, l1, weights: LossWeights = LossWeights()):
    """cls + lambda_iou * iou + lambda_l1 * l1 (floats or Tensors)."""
    for name, term in (("cls", cls), ("giou", iou), ("l1", l1)):
        v = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name} is not finite ({v})")
    return cls + weights.lambda_iou * iou + weights.lambda_l1 * l1


def total_loss(out: HeadOutput, boxes: np.ndarray, weights: LossWeights = LossWeights(), sigma: float = 1.0):
    """Returns (total, components dict of floats). ``boxes`` (B, 4) normalized."""
    B, _, H, W = out.score.shape
    boxes = np.asarray(boxes, dtype=out.score.dtype)
    cells = np.array([center_cell(b, H) for b in boxes])
    rows, cols = cells[:, 0], cells[:, 1]
    target = np.stack([gaussian_target(H, r, c, sigma) for r, c in cells])[:, None]
    cls = focal_loss(out.score, target)
    pred = boxes_at_cells(out, rows, cols)
    lg = giou_loss(pred, boxes)
    ll = l1_loss(pred, boxes)
    total = weighted_total(cls, lg, ll, weights)
    return total, {"cls": cls.item(), "giou": lg.item(), "l1": ll.item(), "total": total.item()}


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 50
    grad_clip: float = 5.0


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, config: OptimizerConfig = OptimizerConfig()):
        self.params = [p for p in params if getattr(p, "trainable", True)]
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        c = self.config
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        scale = min(1.0, c.grad_clip / norm) if c.grad_clip and norm > 0 else 1.0
        b1, b2 = c.betas
        bc1, bc2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return norm


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = (step - warmup) / max(total - warmup, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(frac, 1.0)))


# -- data --------------------------------------------------------------------

@dataclass
class DataConfig:
    width: int = 128
    height: int = 128
    n_frames: int = 20  # frames per synthetic sequence
    max_speed: float = 3.0
    moving_fraction: float = 0.75
    size_range: tuple[float, float] = (10.0, 16.0)
    noise_rate: float = 20.0
    method: str = "gtp"
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    center_jitter: float = 0.5  # uniform search-centre shift, in units of object size
    scale_jitter: float = 0.1  # log-uniform search-size factor
    seed: int = 0

    def sequence(self, rng: np.random.Generator, n_frames: int | None = None):
        cfg = random_sequence_config(rng, width=self.width, height=self.height,
                                     n_frames=n_frames or self.n_frames, max_speed=self.max_speed,
                                     moving_fraction=self.moving_fraction, size_range=self.size_range,
                                     noise_rate=self.noise_rate)
        return generate_synthetic_sequence(cfg)


class PairSampler:
    """Draws template/search pairs from a rolling pool of synthetic sequences.

    The template comes from frame 0 around its box; the search region of
    frame i is centred near the frame i-1 box, mirroring what the tracker
    sees at test time. ``refresh`` new sequences replace the oldest pool
    entries before every batch. Samples are a pure function of the seed.
    """

    def __init__(self, data: DataConfig, model: ModelConfig, seed: int | None = None, pool_size: int = 16,
                 refresh: int = 2):
        self.data, self.model = data, model
        self.rng = np.random.default_rng(data.seed if seed is None else seed)
        self.pool: deque = deque(maxlen=pool_size)
        self.refresh = refresh
        while len(self.pool) < pool_size:
            self._add()

    def _add(self) -> None:
        d = self.data
        seq = d.sequence(self.rng)
        self.pool.append((seq, sequence_images(seq, self.model.T, d.method, d.alpha, d.beta)))

    def sample(self) -> TrainSample:
        d, rng = self.data, self.rng
        seq, images = self.pool[int(rng.integers(len(self.pool)))]
        frame = int(rng.integers(1, len(seq.boxes)))
        b0, bp, bi = seq.boxes[0], seq.boxes[frame - 1], seq.boxes[frame]
        zwin = CropWindow.around((b0.cx, b0.cy, b0.w, b0.h), TEMPLATE_CONTEXT, self.model.template_size)
        size = math.sqrt(bp.w * bp.h)
        shift = rng.uniform(-d.center_jitter, d.center_jitter, 2) * size
        factor = math.exp(rng.uniform(-d.scale_jitter, d.scale_jitter))
        xwin = CropWindow.around((bp.cx + shift[0], bp.cy + shift[1], bp.w * factor, bp.h * factor),
                                 SEARCH_CONTEXT, self.model.search_size)
        z = np.stack([crop(images[0, t] / 255.0, zwin) for t in range(self.model.T)])
        x = np.stack([crop(images[frame, t] / 255.0, xwin) for t in range(self.model.T)])
        box = tuple(float(np.clip(v, 0.0, 1.0)) for v in xwin.to_crop((bi.cx, bi.cy, bi.w, bi.h)))
        return TrainSample(z.astype(np.float32), x.astype(np.float32), box)

    def batch(self, n: int):
        for _ in range(self.refresh):
            self._add()
        samples = [self.sample() for _ in range(n)]
        z = np.stack([s.template for s in samples], axis=1)
        x = np.stack([s.search for s in samples], axis=1)
        return z, x, np.array([s.box for s in samples])


def held_out_sequences(data: DataConfig, n: int = 20, seed: int = 10_000):
    rng = np.random.default_rng(seed)
    return [data.sequence(rng) for _ in range(n)]


# -- loop --------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    eval_every: int = 500
    n_eval: int = 20
    eval_seed: int = 10_000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    final_iou: float | None = None
    final_auc: float | None = None
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [r["total"] for r in self.records if r.get("kind") == "step"]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def evaluate_iou(model: SDTrack, sequences, data: DataConfig) -> tuple[float, float]:
    results = evaluate_model(model, sequences, data.method, data.alpha, data.beta)
    ious = np.concatenate([r.ious for r in results])
    return float(ious.mean()), compute_metrics(results).auc


def train_toy(model: SDTrack | None = None, data: DataConfig | None = None, train: TrainConfig | None = None,
              *, log_path=None) -> tuple[SDTrack, TrainReport]:
    """Pair-matching training with AdamW and a cosine schedule.

    Evaluates mean IoU on held-out synthetic sequences at step 0, every
    ``eval_every`` steps and at the end. Deterministic for a fixed seed.
    """
    data = data or DataConfig()
    train = train or TrainConfig()
    model = model or SDTrack(toy_config(), rng=train.seed)
    sampler = PairSampler(data, model.config, seed=train.seed)
    opt = AdamW(model.parameters(), train.optimizer)
    held_out = held_out_sequences(data, train.n_eval, train.eval_seed)
    report = TrainReport()
    t0 = time.perf_counter()

    def log(rec):
        report.records.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def run_eval(step):
        m_iou, auc = evaluate_iou(model, held_out, data)
        log({"kind": "eval", "step": step, "mean_iou": m_iou, "auc": auc})
        logger.info("step %d eval mean IoU %.4f AUC %.4f", step, m_iou, auc)
        return m_iou, auc

    report.final_iou, report.final_auc = run_eval(0)
    for step in range(train.steps):
        z, x, boxes = sampler.batch(train.batch_size)
        model.zero_grad()
        out = model.forward(z, x, mode="train")
        try:
            total, parts = total_loss(out, boxes, train.weights)
        except FloatingPointError as exc:
            raise DivergenceError(f"diverged at step {step}: {exc}", step) from exc
        total.backward()
        lr = cosine_lr(step, train.steps, train.optimizer.lr, train.optimizer.warmup_steps)
        try:
            gnorm = opt.step(lr)
        except FloatingPointError as exc:
            raise DivergenceError(f"diverged at step {step}: {exc}", step) from exc
        log({"kind": "step", "step": step + 1, "lr": lr, "grad_norm": gnorm, **parts})
        if (step + 1) % 50 == 0:
            logger.info("step %d loss %.4f", step + 1, parts["total"])
        if train.eval_every and (step + 1) % train.eval_every == 0 and step + 1 != train.steps:
            run_eval(step + 1)
    if train.steps:
        report.final_iou, report.final_auc = run_eval(train.steps)
    report.seconds = time.perf_counter() - t0
    return model, report


def config_dict(data: DataConfig, train: TrainConfig) -> dict:
    return {"data": asdict(data), "train": asdict(train)}

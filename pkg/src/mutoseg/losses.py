"""Training objective: class-weighted focal loss plus weighted soft Dice.

Each loss term is built from taped tensor primitives, so gradients come from
the same reverse-mode machinery as the network.  The total objective is

    L = focal(main) + lambda_dice * dice(main)
      + sum_i aux_weight[i] * (focal(aux_i) + lambda_dice * dice(aux_i))

with auxiliary terms present only while training with deep supervision.

Focal loss per voxel with true class c: -w_c * (1 - p_c)^gamma * log(p_c),
averaged over voxels (softmax probabilities, log clamped at 1e-8).  Soft
Dice per class: 1 - (2 * sum(p*g) + eps) / (sum(p) + sum(g) + eps) on the
softmax probabilities against one-hot labels, combined as a weighted mean
with the class weights renormalized to sum to one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tc
from .geometry import N_CLASSES


class LossError(ValueError):
    """Raised for invalid labels or configurations."""


DEFAULT_CLASS_WEIGHTS = (0.1, 20.0, 25.0, 20.0, 25.0, 0.5)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 3.0
    lambda_dice: float = 2.0
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS
    aux_weights: tuple = (0.3, 0.15)
    dice_epsilon: float = 1e-5
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.gamma < 0 or self.lambda_dice < 0:
            raise LossError("gamma and lambda_dice must be non-negative")
        if len(self.class_weights) != N_CLASSES:
            raise LossError(f"need {N_CLASSES} class weights")
        if any(w <= 0 for w in self.class_weights):
            raise LossError("class weights must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LossConfig":
        raw = json.loads(text)
        for key in ("class_weights", "aux_weights"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def _prep(logits: tc.Tensor, labels: np.ndarray):
    """Flatten to ([V, 6] probs-compatible layout) and validate labels."""
    data = logits.data
    if data.ndim == 4:
        n_classes = data.shape[0]
        flat = tc.reshape(logits, (n_classes, -1))
        flat = tc.transpose(flat, (1, 0))
        lab = np.asarray(labels).ravel()
    elif data.ndim == 5:
        n_classes = data.shape[1]
        flat = tc.transpose(tc.reshape(logits, data.shape[:2] + (-1,)),
                            (0, 2, 1))
        flat = tc.reshape(flat, (-1, n_classes))
        lab = np.asarray(labels).reshape(data.shape[0], -1).ravel()
    else:
        raise LossError(f"logits must be [6,D,H,W] or [N,6,D,H,W], got {data.shape}")
    if n_classes != N_CLASSES:
        raise LossError(f"expected {N_CLASSES} classes, got {n_classes}")
    if lab.size != flat.data.shape[0]:
        raise LossError("label volume does not match logits")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= N_CLASSES:
        raise LossError("label code outside {0..5}")
    return flat, lab.astype(np.int64)


def focal_loss(logits: tc.Tensor, labels: np.ndarray,
               config: LossConfig = LossConfig()) -> tc.Tensor:
    """Mean over voxels of -w_c (1 - p_c)^gamma log(p_c)."""
    flat, lab = _prep(logits, labels)
    dtype = flat.data.dtype
    probs = tc.softmax(flat, axis=1)
    onehot = np.zeros(flat.data.shape, dtype=dtype)
    onehot[np.arange(lab.size), lab] = 1.0
    p_true = tc.sum_axes(tc.scale(probs, onehot), (1,))
    weights = np.asarray(config.class_weights, dtype=dtype)[lab]
    term = tc.scale(tc.log_clamped(p_true, config.log_floor), -weights)
    if config.gamma != 0:
        term = tc.mul(tc.pow_const(tc.rsub_const(1.0, p_true), config.gamma),
                      term)
    return tc.mean_all(term)


def dice_loss(logits: tc.Tensor, labels: np.ndarray,
              config: LossConfig = LossConfig()) -> tc.Tensor:
    """Weighted mean over classes of (1 - soft Dice overlap)."""
    flat, lab = _prep(logits, labels)
    dtype = flat.data.dtype
    probs = tc.softmax(flat, axis=1)
    onehot = np.zeros(flat.data.shape, dtype=dtype)
    onehot[np.arange(lab.size), lab] = 1.0
    eps = config.dice_epsilon
    inter = tc.sum_axes(tc.scale(probs, onehot), (0,))   # [6]
    p_sum = tc.sum_axes(probs, (0,))                      # [6]
    g_sum = onehot.sum(axis=0)                            # constant [6]
    num = tc.add_const(tc.scale(inter, 2.0), eps)
    den = tc.add_const(p_sum, g_sum + eps)
    per_class = tc.rsub_const(1.0, tc.div(num, den))
    w = np.asarray(config.class_weights, dtype=dtype)
    w = w / w.sum()
    return tc.sum_all(tc.scale(per_class, w))


@dataclass
class LossBreakdown:
    total: float
    focal: float
    dice: float
    aux: float = 0.0
    aux_terms: list = field(default_factory=list)


def total_loss(output, labels: np.ndarray,
               config: LossConfig = LossConfig()
               ) -> tuple[tc.Tensor, LossBreakdown]:
    """Main focal + dice term plus weighted auxiliary-head terms.

    `output` is a network ForwardOutput (or any object with .logits and
    .aux_logits).  Returns the scalar loss tensor and a float breakdown for
    logging.
    """
    aux_logits = list(getattr(output, "aux_logits", []) or [])
    if aux_logits and len(aux_logits) != len(config.aux_weights):
        raise LossError(
            f"{len(aux_logits)} aux heads but {len(config.aux_weights)} weights")
    focal_main = focal_loss(output.logits, labels, config)
    dice_main = dice_loss(output.logits, labels, config)
    total = tc.add(focal_main, tc.scale(dice_main, config.lambda_dice))
    aux_total = 0.0
    aux_terms = []
    for weight, aux in zip(config.aux_weights, aux_logits):
        term = tc.add(focal_loss(aux, labels, config),
                      tc.scale(dice_loss(aux, labels, config),
                               config.lambda_dice))
        aux_terms.append(float(term.data) * weight)
        aux_total += aux_terms[-1]
        total = tc.add(total, tc.scale(term, weight))
    breakdown = LossBreakdown(total=float(total.data),
                              focal=float(focal_main.data),
                              dice=float(dice_main.data),
                              aux=aux_total, aux_terms=aux_terms)
    return total, breakdown

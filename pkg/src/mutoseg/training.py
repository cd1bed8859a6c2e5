"""Training harness: stratified splits, AdamW, warmup+cosine schedule,
flip/noise/scale augmentation, gradient clipping, early stopping.

Reproducibility: every random decision comes from a Philox stream derived
from (seed, purpose, epoch/batch indices) via SeedSequence spawn keys, so a
fixed configuration yields bit-identical logs and checkpoints regardless of
how the work is interleaved.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import network as net
from . import tensor as tc
from .features import N_STREAM1, N_STREAM2
from .geometry import N_CLASSES
from .losses import LossConfig, total_loss


class TrainingError(RuntimeError):
    """Raised on invalid configuration or diverging optimization."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_peak: float = 1e-3
    lr_floor: float = 1e-5
    warmup_epochs: float = 5.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    patience: int = 30
    augment: bool = True
    flip_prob: float = 0.5
    noise_sigma: float = 0.05
    scale_low: float = 0.95
    scale_high: float = 1.05
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise TrainingError("warmup must end before training does")
        if not self.lr_floor < self.lr_peak:
            raise TrainingError("lr_floor must lie below lr_peak")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise TrainingError("flip_prob must be a probability")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    train: list[int]
    val: list[int]
    test: list[int]
    per_class: dict = field(default_factory=dict)
    seed: int = 0

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"train": self.train, "val": self.val, "test": self.test,
                       "per_class": self.per_class, "seed": self.seed},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(train=raw["train"], val=raw["val"], test=raw["test"],
                   per_class=raw.get("per_class", {}), seed=raw.get("seed", 0))


def _largest_remainder(n: int, ratios, tie_counter: int) -> list[int]:
    """Seats per split for one class.

    Floors first, then leftover seats go to the largest remainders; exact
    remainder ties are broken by rotating the natural split order left by
    tie_counter, which increments once per tied seat handed out (so e.g.
    repeated val/test ties alternate between the two splits across classes).
    """
    quotas = [n * r for r in ratios]
    floors = [math.floor(q) for q in quotas]
    remainders = [q - f for q, f in zip(quotas, floors)]
    seats = n - sum(floors)
    order = list(range(len(ratios)))
    taken = []
    for _ in range(seats):
        best = max(remainders)
        tied = [i for i in order if remainders[i] == best and i not in taken]
        if len(tied) > 1:
            rotated = tied[tie_counter % len(tied):] + tied[:tie_counter % len(tied)]
            pick = rotated[0]
            tie_counter += 1
        else:
            pick = tied[0]
        floors[pick] += 1
        remainders[pick] = -1.0
        taken.append(pick)
    return floors, tie_counter


def stratified_split(volume_classes: dict[int, str],
                     ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
                     seed: int = 0) -> SplitManifest:
    """Per-class seeded shuffle, then largest-remainder apportionment."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise TrainingError("split ratios must sum to 1")
    classes = sorted(set(volume_classes.values()))
    splits = ([], [], [])
    per_class = {}
    tie_counter = 0
    for cls_pos, cls_name in enumerate(classes):
        indices = sorted(i for i, c in volume_classes.items() if c == cls_name)
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(cls_pos,))))
        order = rng.permutation(len(indices))
        shuffled = [indices[i] for i in order]
        counts, tie_counter = _largest_remainder(len(indices), ratios,
                                                 tie_counter)
        if any(c < 1 for c in counts) and all(r > 0 for r in ratios):
            raise TrainingError(
                f"class {cls_name!r} too small for a {ratios} split")
        lo = 0
        for part, cnt in zip(splits, counts):
            part.extend(shuffled[lo:lo + cnt])
            lo += cnt
        per_class[cls_name] = {"train": counts[0], "val": counts[1],
                               "test": counts[2]}
    return SplitManifest(train=sorted(splits[0]), val=sorted(splits[1]),
                         test=sorted(splits[2]), per_class=per_class,
                         seed=seed)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adamw_step(params: dict[str, tc.Parameter], state: AdamWState,
               lr: float, config: TrainConfig) -> None:
    """Decoupled weight decay, then bias-corrected Adam update."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g, dtype=np.float64)
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p.data -= (lr * update).astype(p.data.dtype)


def lr_at(epoch_fraction: float, config: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine anneal to lr_floor."""
    e = epoch_fraction
    if e <= config.warmup_epochs:
        return config.lr_peak * e / config.warmup_epochs
    progress = (e - config.warmup_epochs) / (config.epochs - config.warmup_epochs)
    progress = min(max(progress, 0.0), 1.0)
    return config.lr_floor + 0.5 * (config.lr_peak - config.lr_floor) * (
        1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_sample(stream1: np.ndarray, stream2: np.ndarray,
                   labels: np.ndarray, rng: np.random.Generator,
                   config: TrainConfig):
    """Coherent axis flips, then Gaussian noise, then per-channel scaling.

    Expects normalized features (the noise sigma is calibrated for
    standardized channels).  Labels change only under the spatial flips.
    Draw order: three flip uniforms (x, y, z), one noise field per stream,
    one scale factor per channel (stream 1 then stream 2).
    """
    s1, s2, lab = stream1, stream2, labels
    for axis in range(3):
        if rng.uniform() < config.flip_prob:
            s1 = np.flip(s1, axis=axis + 1)
            s2 = np.flip(s2, axis=axis + 1)
            lab = np.flip(lab, axis=axis)
    s1 = np.ascontiguousarray(s1)
    s2 = np.ascontiguousarray(s2)
    lab = np.ascontiguousarray(lab)
    if config.noise_sigma > 0:
        s1 = s1 + rng.normal(0.0, config.noise_sigma,
                             size=s1.shape).astype(s1.dtype)
        s2 = s2 + rng.normal(0.0, config.noise_sigma,
                             size=s2.shape).astype(s2.dtype)
    if (config.scale_low, config.scale_high) != (1.0, 1.0):
        f1 = rng.uniform(config.scale_low, config.scale_high,
                         size=(s1.shape[0], 1, 1, 1)).astype(s1.dtype)
        f2 = rng.uniform(config.scale_low, config.scale_high,
                         size=(s2.shape[0], 1, 1, 1)).astype(s2.dtype)
        s1 = s1 * f1
        s2 = s2 * f2
    return s1, s2, lab


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------

@dataclass
class VolumeSample:
    index: int
    stream1: np.ndarray      # normalized [9, 20, 20, 20] float32
    stream2: np.ndarray      # normalized [40, 20, 20, 20] float32
    labels: np.ndarray       # [20, 20, 20] uint8
    defect_class: str = ""

    def __post_init__(self):
        if self.stream1.shape[0] != N_STREAM1 or self.stream2.shape[0] != N_STREAM2:
            raise TrainingError("bad feature channel counts")


class Dataset:
    """In-memory map of volume index -> VolumeSample."""

    def __init__(self, samples: dict[int, VolumeSample]):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def get(self, index: int) -> VolumeSample:
        return self.samples[index]

    def subset(self, indices) -> list[VolumeSample]:
        return [self.samples[i] for i in indices]


# ---------------------------------------------------------------------------
# Metrics helpers used during training (hard Dice on the validation split)
# ---------------------------------------------------------------------------

def _val_dice(model: net.Model, samples: list[VolumeSample]):
    """Micro-aggregated per-class hard Dice over a sample list.

    Returns (overall accuracy-style micro dice, defect-mean dice over
    classes 1..4 with the both-empty convention).
    """
    inter = np.zeros(N_CLASSES, dtype=np.int64)
    pred_n = np.zeros(N_CLASSES, dtype=np.int64)
    true_n = np.zeros(N_CLASSES, dtype=np.int64)
    for s in samples:
        out = model.forward(s.stream1, s.stream2, training=False)
        pred = np.argmax(out.logits.data, axis=0)
        for c in range(N_CLASSES):
            p = pred == c
            t = s.labels == c
            inter[c] += int(np.logical_and(p, t).sum())
            pred_n[c] += int(p.sum())
            true_n[c] += int(t.sum())
    overall = 2.0 * inter.sum() / max(1, (pred_n.sum() + true_n.sum()))
    dice = np.zeros(N_CLASSES)
    for c in range(N_CLASSES):
        denom = pred_n[c] + true_n[c]
        dice[c] = 1.0 if denom == 0 else 2.0 * inter[c] / denom
    return overall, float(dice[1:5].mean()), dice


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = ("epoch", "step", "lr", "loss_total", "loss_focal",
                  "loss_dice", "loss_aux", "grad_norm", "val_dice_overall",
                  "val_dice_defect_mean", "best_flag")


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    best_epoch: int
    best_val_defect_dice: float
    epochs_run: int
    history: list = field(default_factory=list)


def _batch_rng(seed: int, epoch: int, kind: int,
               batch: int = 0, sample: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(kind, epoch, batch, sample))
    return np.random.Generator(np.random.Philox(ss))


def train(model: net.Model, dataset: Dataset, split: SplitManifest,
          config: TrainConfig, loss_config: LossConfig,
          out_dir: str | Path, quiet: bool = False) -> TrainResult:
    """Optimize the model on the training split with early stopping on the
    validation defect-mean Dice; writes metrics.csv and best checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = dataset.subset(split.train)
    val_samples = dataset.subset(split.val)
    if not train_samples or not val_samples:
        raise TrainingError("empty training or validation split")
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    state = AdamWState()
    params = model.parameters()
    ckpt_path = out_dir / "checkpoint.mvck"
    metrics_path = out_dir / "metrics.csv"
    best = -1.0
    best_epoch = -1
    bad_epochs = 0
    history = []
    global_step = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch in range(config.epochs):
            order = _batch_rng(config.seed, epoch, kind=0).permutation(
                len(train_samples))
            epoch_rows = []
            for b in range(steps_per_epoch):
                picks = order[b * config.batch_size:(b + 1) * config.batch_size]
                xs1, xs2, labs = [], [], []
                for j, pick in enumerate(picks):
                    s = train_samples[int(pick)]
                    s1, s2, lab = s.stream1, s.stream2, s.labels
                    if config.augment:
                        rng = _batch_rng(config.seed, epoch, kind=1,
                                         batch=b, sample=j)
                        s1, s2, lab = augment_sample(s1, s2, lab, rng, config)
                    xs1.append(s1)
                    xs2.append(s2)
                    labs.append(lab)
                batch1 = np.stack(xs1)
                batch2 = np.stack(xs2)
                batch_labels = np.stack(labs)
                lr = lr_at((global_step + 1) / steps_per_epoch, config)
                model.zero_grad()
                with tc.Tape() as tape:
                    out = model.forward(batch1, batch2, training=True)
                    loss, breakdown = total_loss(out, batch_labels, loss_config)
                    if not np.isfinite(loss.data):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch} step {global_step}"
                            f" (lr={lr:.3e})")
                    tape.backward(loss)
                grads = [p.grad for p in params.values()]
                tc.clip_by_global_norm(grads, config.clip_norm)
                post_norm = tc.global_norm(grads)
                adamw_step(params, state, lr, config)
                global_step += 1
                epoch_rows.append([epoch, global_step, f"{lr:.17g}",
                                   f"{breakdown.total:.9g}",
                                   f"{breakdown.focal:.9g}",
                                   f"{breakdown.dice:.9g}",
                                   f"{breakdown.aux:.9g}",
                                   f"{post_norm:.9g}", "", "", ""])
            overall, defect_mean, _ = _val_dice(model, val_samples)
            epoch_rows[-1][8] = f"{overall:.9g}"
            epoch_rows[-1][9] = f"{defect_mean:.9g}"
            improved = defect_mean > best
            if improved:
                best = defect_mean
                best_epoch = epoch
                bad_epochs = 0
                net.save(model, ckpt_path)
                epoch_rows[-1][10] = "1"
            else:
                bad_epochs += 1
                epoch_rows[-1][10] = "0"
            writer.writerows(epoch_rows)
            fh.flush()
            history.append({"epoch": epoch, "val_dice_overall": overall,
                            "val_dice_defect_mean": defect_mean})
            if not quiet:
                print(f"epoch {epoch:3d}  loss {epoch_rows[-1][3]:>10s}  "
                      f"val defect dice {defect_mean:.4f}"
                      f"{'  *' if improved else ''}")
            if bad_epochs > config.patience:
                break
    return TrainResult(checkpoint_path=str(ckpt_path),
                       metrics_path=str(metrics_path),
                       best_epoch=best_epoch, best_val_defect_dice=best,
                       epochs_run=len(history), history=history)

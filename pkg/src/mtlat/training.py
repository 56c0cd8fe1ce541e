"""Training recipes: standard, Mixup, TLAT, M-TLAT, IAT and the FGSM-AT ablations.

Every step returns the updated model and a :class:`StepStats`; the two
losses follow the "loss1 + loss2" split of one M-TLAT step (clean Mixup pair
and perturbed pair). Modes without a second part report ``loss2 = 0``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Split, make_batches, one_hot
from .models import ModelParams, OptimState, accuracy, adam_step, combined_loss_and_grad, init_params, \
    input_gradient
from .seeding import derive_seed

log = logging.getLogger(__name__)

MODES = ("standard", "mixup", "tlat", "m-tlat", "iat", "fgsm-at", "target-fgsm-at", "ls-at")
ADV_VARIANTS = ("fgsm-at", "target-fgsm-at", "ls-at", "tlat")


@dataclass
class TrainRecipe:
    mode: str = "m-tlat"
    alpha: float = 0.4
    eps_max: float = 0.025
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    arch: str = "small-conv"
    lr: float = 0.002
    weight_decay: float = 1e-4
    decay_epochs: tuple = (10, 20, 25)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.eps_max < 1:
            raise ValueError("eps_max must lie in [0, 1)")
        self.decay_epochs = tuple(self.decay_epochs)


@dataclass
class StepStats:
    loss1: float
    loss2: float
    input_grads: int = 0  # per-sample input gradients computed for crafting


# --------------------------------------------------------------------------
# label and sample algebra

def _mix_weights(lam):
    """Weights (w_i, w_j) with w_i + w_j == 1 exactly and mixup(i, j, l) == mixup(j, i, 1 - l) bitwise.

    The larger weight is taken as given and the smaller one is its exact complement.
    """
    lam = np.asarray(lam, dtype=np.float64)
    big_i = lam >= 0.5
    w_j_if_small = 1.0 - lam
    w_i_if_big_j = 1.0 - w_j_if_small
    w_i = np.where(big_i, lam, w_i_if_big_j)
    w_j = np.where(big_i, 1.0 - lam, w_j_if_small)
    return w_i, w_j


def _bcast(w, x):
    return np.reshape(w, np.shape(w) + (1,) * (np.ndim(x) - np.ndim(w)))


def mixup_pair(x_i, y_i, x_j, y_j, lam):
    """x_mix = lam*x_i + (1-lam)*x_j and the same for labels; ``lam`` is scalar or per sample."""
    w_i, w_j = _mix_weights(lam)
    x_mix = _bcast(w_i, x_i) * x_i + _bcast(w_j, x_j) * x_j
    y_mix = _bcast(w_i, y_i) * y_i + _bcast(w_j, y_j) * y_j
    return x_mix, y_mix


def tlat_label(y_clean, y_target, eps):
    """(1 - eps) * y_clean + eps * y_target."""
    e = _bcast(np.asarray(eps, dtype=np.float64), y_clean)
    return (1.0 - e) * y_clean + e * y_target


def smoothed_label(y_clean, eps):
    """Label smoothing: (1 - eps) * y_clean + eps / N on every class."""
    n = y_clean.shape[-1]
    e = _bcast(np.asarray(eps, dtype=np.float64), y_clean)
    return (1.0 - e) * y_clean + e / n


def signed_step(model, x, labels, eps, direction):
    """clip(x + direction * eps * sign(grad_x L(x, labels))) with per-sample eps."""
    if len(x) == 0:
        return x
    _, g, _ = input_gradient(model, x, labels=labels)
    return np.clip(x + direction * _bcast(eps, x) * np.sign(g), 0.0, 1.0)


def tlat_craft(model: ModelParams, x_clean, y_clean, y_target, eps):
    """Targeted FGSM image with the interpolated TLAT label."""
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("eps must be >= 0")
    x_adv = signed_step(model, x_clean, y_target, eps, -1.0)
    return x_adv, tlat_label(y_clean, y_target, eps)


# --------------------------------------------------------------------------
# steps

def _quadruples(batch: Split, n_classes):
    x = batch.images
    y = one_hot(batch.labels, n_classes)
    q = len(x) // 4
    quads = [(x[k * q:(k + 1) * q], y[k * q:(k + 1) * q]) for k in range(4)]
    tail = (x[4 * q:], y[4 * q:])
    return quads, tail


def _tail_pairs(tail, lam):
    """Clean Mixup pairs for samples that do not fill a quadruple (partner = next, cyclic)."""
    xt, yt = tail
    if len(xt) == 0:
        return xt, yt
    partner = (np.arange(len(xt)) + 1) % len(xt)
    return mixup_pair(xt, yt, xt[partner], yt[partner], lam)


def _draw_mixup(rng, alpha, q, n_tail):
    lam1 = rng.beta(alpha, alpha, size=q)
    lam2 = rng.beta(alpha, alpha, size=q)
    lam_t = rng.beta(alpha, alpha, size=n_tail)
    return lam1, lam2, lam_t


def _update(model, state, parts):
    losses, grads = combined_loss_and_grad(model, parts)
    return adam_step(model, grads, state), losses


def standard_step(model, state, batch: Split, rng, recipe):
    new, (l1,) = _update(model, state, [(batch.images, one_hot(batch.labels, model.n_classes))])
    return new, StepStats(l1, 0.0)


def _mixup_parts(model, batch, rng, recipe):
    quads, tail = _quadruples(batch, model.n_classes)
    (x1, y1), (x2, y2), (x3, y3), (x4, y4) = quads
    lam1, lam2, lam_t = _draw_mixup(rng, recipe.alpha, len(x1), len(tail[0]))
    xm1, ym1 = mixup_pair(x1, y1, x2, y2, lam1)
    xt, yt = _tail_pairs(tail, lam_t)
    xm1, ym1 = np.concatenate([xm1, xt]), np.concatenate([ym1, yt])
    return (xm1, ym1), (x3, y3, x4, y4, lam2)


def mixup_step(model, state, batch: Split, rng, recipe):
    """Two clean Mixup pairs per quadruple, loss = L(pair 1) + L(pair 2)."""
    part1, (x3, y3, x4, y4, lam2) = _mixup_parts(model, batch, rng, recipe)
    part2 = mixup_pair(x3, y3, x4, y4, lam2)
    new, (l1, l2) = _update(model, state, [part1, part2])
    return new, StepStats(l1, l2)


def mtlat_training_step(model, state, batch: Split, rng, recipe):
    """One M-TLAT step over a batch tiled into quadruples (x1, x2, x3, x4).

    Per quadruple: a clean Mixup of (x1, x2); a Mixup of (x3, x4) followed by
    a targeted FGSM toward a uniformly drawn class, labeled
    (1 - eps) * y_mix2 + eps * y_target. Both losses feed one Adam update.
    """
    part1, (x3, y3, x4, y4, lam2) = _mixup_parts(model, batch, rng, recipe)
    q = len(x3)
    eps = rng.uniform(0.0, recipe.eps_max, size=q)
    targets = one_hot(rng.integers(0, model.n_classes, size=q), model.n_classes)
    x_mix2, y_mix2 = mixup_pair(x3, y3, x4, y4, lam2)
    x_mtlat, y_mtlat = tlat_craft(model, x_mix2, y_mix2, targets, eps) if q else (x_mix2, y_mix2)
    new, (l1, l2) = _update(model, state, [part1, (x_mtlat, y_mtlat)])
    return new, StepStats(l1, l2, input_grads=q)


def iat_training_step(model, state, batch: Split, rng, recipe):
    """Interpolated adversarial training: untargeted FGSM on x3 and x4, then Mixup with plain labels."""
    part1, (x3, y3, x4, y4, lam2) = _mixup_parts(model, batch, rng, recipe)
    q = len(x3)
    eps = rng.uniform(0.0, recipe.eps_max, size=q)
    x3a = signed_step(model, x3, y3, eps, 1.0)
    x4a = signed_step(model, x4, y4, eps, 1.0)
    part2 = mixup_pair(x3a, y3, x4a, y4, lam2)
    new, (l1, l2) = _update(model, state, [part1, part2])
    return new, StepStats(l1, l2, input_grads=2 * q)


def adv_train_variant(mode, model, state, batch: Split, rng, recipe):
    """Half clean / half FGSM minibatch with mode-specific adversarial labels.

    fgsm-at: untargeted, true labels. target-fgsm-at: random target, true
    labels. ls-at: random target, smoothed true labels. tlat: random target,
    TLAT labels.
    """
    if mode not in ADV_VARIANTS:
        raise ValueError(f"unknown adversarial training mode {mode!r}; expected one of {ADV_VARIANTS}")
    n = model.n_classes
    y = one_hot(batch.labels, n)
    h = (len(y) + 1) // 2
    xc, yc = batch.images[:h], y[:h]
    xa, ya = batch.images[h:], y[h:]
    m = len(xa)
    eps = rng.uniform(0.0, recipe.eps_max, size=m)
    if mode == "fgsm-at":
        x_adv, y_adv = signed_step(model, xa, ya, eps, 1.0), ya
    else:
        targets = one_hot(rng.integers(0, n, size=m), n)
        if mode == "tlat":
            x_adv, y_adv = tlat_craft(model, xa, ya, targets, eps)
        else:
            x_adv = signed_step(model, xa, targets, eps, -1.0)
            y_adv = ya if mode == "target-fgsm-at" else smoothed_label(ya, eps)
    new, (l1, l2) = _update(model, state, [(xc, yc), (x_adv, y_adv)])
    return new, StepStats(l1, l2, input_grads=m)


def training_step(model, state, batch, rng, recipe):
    mode = recipe.mode
    if mode == "standard":
        return standard_step(model, state, batch, rng, recipe)
    if mode == "mixup":
        return mixup_step(model, state, batch, rng, recipe)
    if mode == "m-tlat":
        return mtlat_training_step(model, state, batch, rng, recipe)
    if mode == "iat":
        return iat_training_step(model, state, batch, rng, recipe)
    return adv_train_variant(mode, model, state, batch, rng, recipe)


# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss1: float
    loss2: float
    clean_accuracy: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: ModelParams
    log: list = field(default_factory=list)


def train(dataset: Dataset, recipe: TrainRecipe, log_path=None, eval_test=True) -> TrainResult:
    """Train a fresh model; all randomness is derived from ``recipe.seed``.

    With ``log_path`` one JSON line per epoch is written there.
    """
    model = init_params(recipe.arch, dataset.input_shape, dataset.n_classes,
                        seed=derive_seed(recipe.seed, "init", recipe.arch))
    state = OptimState(lr=recipe.lr, weight_decay=recipe.weight_decay, decay_epochs=recipe.decay_epochs)
    rng = np.random.default_rng(derive_seed(recipe.seed, "augment"))
    batch_seed = derive_seed(recipe.seed, "batches")
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(recipe.epochs):
            state.epoch = epoch
            l1 = l2 = 0.0
            batches = make_batches(dataset.train, recipe.batch_size, batch_seed, epoch)
            for batch in batches:
                model, stats = training_step(model, state, batch, rng, recipe)
                l1 += stats.loss1
                l2 += stats.loss2
            acc = float("nan")
            if eval_test and len(dataset.test):
                correct, total = accuracy(model, dataset.test.images, dataset.test.labels)
                acc = 100.0 * correct / total
            rec = EpochRecord(epoch, state.current_lr(), l1 / len(batches), l2 / len(batches), acc)
            records.append(rec)
            log.info("%s epoch %d lr %.2e loss1 %.4f loss2 %.4f acc %.2f", recipe.mode, epoch, rec.lr,
                     rec.loss1, rec.loss2, acc)
            if fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return TrainResult(model, records)

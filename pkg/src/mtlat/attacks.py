"""Gradient-based adversarial example generators.

All attacks are batched: ``x`` is (B, H, W, C) in [0, 1] and labels are
either integer class ids or (B, N) label vectors. Nothing here is random
unless ``random_start`` is requested, so outputs are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .models import ModelParams, forward_graph, input_gradient, predict


@dataclass
class AttackBudget:
    norm: str = "linf"  # "linf" | "l2"
    epsilon: float = 0.04
    iterations: int = 10
    step_size: float | None = None
    confidence: float = 5.0  # CW kappa, logit units
    targeted: bool = False
    target: str = "fixed"  # "fixed" | "least-likely" | "random"
    decay: float = 1.0  # MI-FGSM momentum
    random_start: bool = False
    seed: int = 0
    learning_rate: float = 0.01  # CW
    search_steps: int = 5  # CW
    initial_const: float = 1.0  # CW

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.confidence < 0:
            raise ValueError("confidence must be >= 0")

    def pgd_step(self):
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.iterations

    def to_dict(self):
        return asdict(self)


@dataclass
class AdversarialExample:
    x_adv: np.ndarray
    x: np.ndarray
    name: str
    budget: AttackBudget
    success: np.ndarray  # per sample

    @property
    def delta(self):
        return self.x_adv - self.x


def _class_ids(y, n_classes):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.argmax(axis=1)
    return y.astype(np.int64)


def _label_vectors(y, n_classes):
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    return np.eye(n_classes)[y.astype(np.int64)]


def _success(model, x_adv, cls, targeted):
    pred = predict(model, x_adv).argmax(axis=1)
    return pred == cls if targeted else pred != cls


def least_likely_class(model: ModelParams, x) -> np.ndarray:
    """Class with the lowest predicted probability; ties go to the lowest index."""
    return predict(model, x).argmin(axis=1)


def _fgsm(model, x, y, epsilon, direction):
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    _, g, _ = input_gradient(model, x, labels=_label_vectors(y, model.n_classes))
    return np.clip(x + direction * epsilon * np.sign(g), 0.0, 1.0)


def fgsm_targeted(model: ModelParams, x, y_target, epsilon) -> AdversarialExample:
    """One signed-gradient step down the loss toward ``y_target``."""
    x_adv = _fgsm(model, x, y_target, epsilon, -1.0)
    cls = _class_ids(y_target, model.n_classes)
    budget = AttackBudget(epsilon=epsilon, iterations=1, targeted=True)
    return AdversarialExample(x_adv, np.asarray(x, dtype=np.float64), "fgsm_targeted", budget,
                              _success(model, x_adv, cls, True))


def fgsm_untargeted(model: ModelParams, x, y_true, epsilon) -> AdversarialExample:
    """One signed-gradient step up the loss of the true label."""
    x_adv = _fgsm(model, x, y_true, epsilon, 1.0)
    cls = _class_ids(y_true, model.n_classes)
    budget = AttackBudget(epsilon=epsilon, iterations=1)
    return AdversarialExample(x_adv, np.asarray(x, dtype=np.float64), "fgsm", budget,
                              _success(model, x_adv, cls, False))


def _project(cand, x, eps):
    return np.clip(np.clip(cand, x - eps, x + eps), 0.0, 1.0)


def pgd(model: ModelParams, x, y, budget: AttackBudget, name="pgd") -> AdversarialExample:
    """Iterated signed-gradient steps, each projected on the L-inf ball and [0, 1].

    Untargeted unless ``budget.targeted``, in which case ``y`` is the target.
    """
    if budget.norm != "linf":
        raise ValueError("pgd needs an L-inf budget")
    x = np.asarray(x, dtype=np.float64)
    eps, step = budget.epsilon, budget.pgd_step()
    labels = _label_vectors(y, model.n_classes)
    direction = -1.0 if budget.targeted else 1.0
    xk = x
    if budget.random_start and eps > 0:
        rng = np.random.default_rng(budget.seed)
        xk = _project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
    for _ in range(budget.iterations):
        _, g, _ = input_gradient(model, xk, labels=labels)
        xk = _project(xk + direction * step * np.sign(g), x, eps)
    cls = _class_ids(y, model.n_classes)
    return AdversarialExample(xk, x, name, budget, _success(model, xk, cls, budget.targeted))


def pgd_ll(model: ModelParams, x, budget: AttackBudget) -> AdversarialExample:
    """PGD toward the least-likely class of the clean input."""
    target = least_likely_class(model, x)
    tb = AttackBudget(**{**budget.to_dict(), "targeted": True, "target": "least-likely"})
    return pgd(model, x, target, tb, name="pgd_ll")


def mi_fgsm(surrogate: ModelParams, x, y, budget: AttackBudget) -> AdversarialExample:
    """Momentum iterative FGSM crafted on ``surrogate``.

    The default step is epsilon / iterations. Success is measured on the
    surrogate; callers evaluate transfer on their victim.
    """
    if budget.norm != "linf":
        raise ValueError("mi_fgsm needs an L-inf budget")
    x = np.asarray(x, dtype=np.float64)
    eps = budget.epsilon
    step = budget.step_size if budget.step_size is not None else eps / budget.iterations
    labels = _label_vectors(y, surrogate.n_classes)
    direction = -1.0 if budget.targeted else 1.0
    mom = np.zeros_like(x)
    xk = x
    for _ in range(budget.iterations):
        _, g, _ = input_gradient(surrogate, xk, labels=labels)
        l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape(-1, 1, 1, 1)
        mom = budget.decay * mom + g / np.maximum(l1, 1e-300)
        xk = _project(xk + direction * step * np.sign(mom), x, eps)
    cls = _class_ids(y, surrogate.n_classes)
    return AdversarialExample(xk, x, "mi_fgsm", budget, _success(surrogate, xk, cls, budget.targeted))


def _cw_margin(logits, cls, kappa):
    """Z_true - max_{i != true} Z_i + kappa, and the argmax of the other logits."""
    other = logits.copy()
    other[np.arange(len(cls)), cls] = -np.inf
    j = other.argmax(axis=1)
    rows = np.arange(len(cls))
    return logits[rows, cls] - logits[rows, j] + kappa, j


def cw_l2(model: ModelParams, x, y_true, iterations=40, confidence=5.0, search_steps=5,
          initial_const=1.0, learning_rate=0.01) -> AdversarialExample:
    """Carlini-Wagner L2 attack in tanh space with a per-sample search over c.

    Minimizes ||x' - x||^2 + c * max(Z_true - max_other + kappa, 0) with Adam.
    The smallest successful perturbation found is returned; samples with no
    success return the last iterate of the final search round.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if confidence < 0:
        raise ValueError("confidence must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    cls = _class_ids(y_true, model.n_classes)
    B = len(x)
    rows = np.arange(B)
    flat = lambda a: a.reshape(B, -1)  # noqa: E731

    best = x.copy()
    best_l2 = np.full(B, np.inf)
    margin0, _ = _cw_margin(predict(model, x), cls, confidence)
    done0 = margin0 <= 0
    best_l2[done0] = 0.0

    c = np.full(B, float(initial_const))
    lower = np.zeros(B)
    upper = np.full(B, 1e10)
    w0 = np.arctanh((2 * x - 1) * (1 - 1e-6))
    last = x.copy()
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    for _ in range(search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(B, dtype=bool)
        for t in range(1, iterations + 1):
            xa = (np.tanh(w) + 1) / 2
            tape, _, xv, logits = forward_graph(model, xa, wrt="input")
            margin, j = _cw_margin(logits.value, cls, confidence)
            l2 = (flat(xa - x) ** 2).sum(axis=1)
            ok = margin <= 0
            improve = ok & (l2 < best_l2)
            best[improve] = xa[improve]
            best_l2[improve] = l2[improve]
            found |= ok
            weights = np.zeros_like(logits.value)
            active = margin > 0
            weights[rows, cls] = c * active
            weights[rows, j] -= c * active
            obj = tape.apply("dot_const", logits, weights=weights)
            g_x = 2 * (xa - x) + tape.backward(obj)[xv]
            g_w = g_x * (1 - np.tanh(w) ** 2) / 2
            m = b1 * m + (1 - b1) * g_w
            v = b2 * v + (1 - b2) * g_w ** 2
            w = w - learning_rate * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + adam_eps)
        xa = (np.tanh(w) + 1) / 2
        margin, _ = _cw_margin(predict(model, xa), cls, confidence)
        l2 = (flat(xa - x) ** 2).sum(axis=1)
        ok = margin <= 0
        improve = ok & (l2 < best_l2)
        best[improve] = xa[improve]
        best_l2[improve] = l2[improve]
        found |= ok
        last = xa
        # success: shrink c; failure: grow it (x10 until bracketed)
        upper = np.where(found, np.minimum(upper, c), upper)
        lower = np.where(found, lower, np.maximum(lower, c))
        c = np.where(upper < 1e9, (lower + upper) / 2, c * 10)
    out = np.where(np.isfinite(best_l2)[:, None, None, None], best, last)
    budget = AttackBudget(norm="l2", epsilon=0.0, iterations=iterations, confidence=confidence,
                          learning_rate=learning_rate, search_steps=search_steps,
                          initial_const=initial_const)
    return AdversarialExample(out, x, "cw_l2", budget, _success(model, out, cls, False))

"""Losses, gradient-smoothing defenses, and l-inf attacks.

The defended training objective adds the mean (squared by default) norm of
the per-sample input gradient of the loss to plain cross entropy.  Its
weight gradient needs a second reverse pass: the regularizer's derivative
with respect to the input gradients is pushed forward through the linearized
network, paired with the pulled-back gradient chain inside every block, and
the remaining dependence through the logits is closed with a softmax
curvature correction followed by an ordinary backward pass.

Attacks perturb inputs only, always using the plain cross-entropy gradient
regardless of how the network was trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import Gradients, Network

_LABEL_DTYPE = np.int64


@dataclass(frozen=True)
class DefenseConfig:
    """Training-time defense: none, input-gradient regularization, or
    adversarial training (a fraction of each batch replaced by its FGSM
    perturbation)."""

    kind: str = "none"
    lam: float = 0.0
    squared: bool = True
    at_mix: float = 0.5
    at_epsilon: float = 25.0 / 255.0

    def __post_init__(self):
        if self.kind not in ("none", "igr", "at"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 0.0 <= self.at_mix <= 1.0:
            raise ValueError(f"at_mix must lie in [0, 1], got {self.at_mix}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class AttackConfig:
    """An l-inf attack: one signed-gradient step (fgsm) or iterated steps
    projected back to the delta-ball (pgd)."""

    kind: str
    xi: float
    delta: float = 0.0
    steps: int = 0
    restarts: int = 1
    random_start: bool = True
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.xi < 0.0 or self.delta < 0.0:
            raise ValueError("attack budgets must be nonnegative")
        if self.kind == "pgd" and self.steps == 0:
            object.__setattr__(self, "steps", default_pgd_steps(self.delta, self.xi))

    @property
    def budget(self) -> float:
        """Largest per-pixel change the attack may make."""
        return self.xi if self.kind == "fgsm" else self.delta


def default_pgd_steps(delta: float, xi: float) -> int:
    """Twice the number of xi-sized steps needed to cross the ball."""
    if xi <= 0.0:
        return 1
    return max(1, 2 * math.ceil(delta / xi))


# Named budgets used by the benchmark presets.  The strong variants spend a
# tighter ball with multiple restarts as the heavyweight evaluation.
ATTACK_PRESETS = {
    "pmnist-fgsm": AttackConfig(kind="fgsm", xi=25.0 / 255.0),
    "pmnist-pgd": AttackConfig(kind="pgd", xi=2.0 / 255.0, delta=40.0 / 255.0),
    "pmnist-strong-pgd": AttackConfig(
        kind="pgd", xi=2.0 / 255.0, delta=20.0 / 255.0, restarts=5
    ),
    "split-fgsm": AttackConfig(kind="fgsm", xi=4.0 / 255.0),
    "split-pgd": AttackConfig(kind="pgd", xi=1.0 / 255.0, delta=4.0 / 255.0),
    "split-strong-pgd": AttackConfig(
        kind="pgd", xi=1.0 / 255.0, delta=2.0 / 255.0, restarts=5
    ),
}


def attack_preset(name: str) -> AttackConfig:
    try:
        return ATTACK_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown attack preset {name!r}; available: {sorted(ATTACK_PRESETS)}"
        ) from None


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=_LABEL_DTYPE)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return y


def cross_entropy(logits, labels) -> tuple:
    """Mean negative log likelihood and its logit gradient.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / n``,
    ready to feed a backward pass.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    y = _check_labels(labels, c)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def per_sample_nll(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(logits.shape[0]), y]


def igr_objective(
    net: Network,
    trace,
    labels,
    lam: float,
    squared: bool = True,
) -> tuple:
    """Defended objective value and its weight gradients.

    total = cross_entropy + lam * ||d cross_entropy / d x||^2 where x is the
    whole stacked batch input and cross entropy is the batch mean, i.e. the
    penalty is sum_s ||g_s||^2 / n^2 with g_s the gradient through sample s.
    Unsquared mode penalizes the plain norm of the same stacked gradient.
    ``lam = 0`` takes the plain path and is bit-identical to cross entropy +
    backward.
    """
    loss, dlogits = cross_entropy(trace.logits, labels)
    grads_ce = net.backward_weights(trace, dlogits)
    if lam == 0.0:
        return loss, grads_ce

    n = trace.n_samples
    p = softmax(trace.logits)
    per_sample = p.copy()
    per_sample[np.arange(n), np.asarray(labels, dtype=_LABEL_DTYPE)] -= 1.0
    gchain = net.input_gradient_chain(trace, per_sample)
    g1 = gchain[0]
    total_sq = float(np.einsum("ij,ij->", g1, g1))
    if squared:
        reg = total_sq / (n * n)
        u1 = (2.0 / (n * n)) * g1
    else:
        reg = np.sqrt(total_sq) / n
        if reg > 0.0:
            u1 = g1 / (n * n * reg)
        else:
            u1 = np.zeros_like(g1)
    direct, u_top = net.igr_direct_terms(trace, u1, gchain)
    # close the loop through the logits: softmax curvature, then a standard pass
    zbar = p * (u_top - np.einsum("ij,ij->i", p, u_top)[:, None])
    through_logits = net.backward_weights(trace, zbar)
    grads = grads_ce.add(direct.add(through_logits).scale(lam))
    return loss + lam * reg, grads


def loss_input_gradient(net: Network, task: int, x, labels) -> np.ndarray:
    """Gradient of the batch-mean cross entropy with respect to the input."""
    trace = net.forward(task, x)
    _, dlogits = cross_entropy(trace.logits, labels)
    return net.input_gradient_chain(trace, dlogits)[0]


def fgsm(net: Network, task: int, x, labels, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient step of size xi, clipped to the pixel range."""
    x = np.asarray(x, dtype=np.float64)
    g = loss_input_gradient(net, task, x, labels)
    adv = x + cfg.xi * np.sign(g)
    return np.clip(adv, cfg.pixel_min, cfg.pixel_max)


def pgd(
    net: Network,
    task: int,
    x,
    labels,
    cfg: AttackConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Iterated signed-gradient ascent inside the delta-ball.

    Each restart starts uniformly inside the ball (or at the clean point
    with ``random_start=False``), walks ``steps`` xi-steps with projection
    back to ball and pixel range after each, and the best-loss iterate per
    sample across restarts is returned.
    """
    if cfg.kind != "pgd":
        raise ValueError(f"pgd called with a {cfg.kind!r} config")
    x = np.asarray(x, dtype=np.float64)
    lo = np.maximum(x - cfg.delta, cfg.pixel_min)
    hi = np.minimum(x + cfg.delta, cfg.pixel_max)
    best = x.copy()
    best_loss = np.full(x.shape[0], -np.inf)
    for _ in range(max(1, cfg.restarts)):
        if cfg.random_start:
            xa = np.clip(x + rng.uniform(-cfg.delta, cfg.delta, size=x.shape), lo, hi)
        else:
            xa = x.copy()
        for _ in range(cfg.steps):
            g = loss_input_gradient(net, task, xa, labels)
            xa = np.clip(xa + cfg.xi * np.sign(g), lo, hi)
        final_loss = per_sample_nll(net.forward(task, xa).logits, labels)
        better = final_loss > best_loss
        best[better] = xa[better]
        best_loss[better] = final_loss[better]
    return best


def run_attack(
    net: Network,
    task: int,
    x,
    labels,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm(net, task, x, labels, cfg)
    if rng is None:
        raise ValueError("pgd needs a random generator for its restarts")
    return pgd(net, task, x, labels, cfg, rng)


def adversarial_training_batch(
    net: Network,
    task: int,
    x,
    labels,
    cfg: DefenseConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Replace floor(at_mix * n) batch rows with their FGSM perturbations.

    Which rows get perturbed is a seeded draw without replacement; labels
    are left unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    k = int(np.floor(cfg.at_mix * n))
    if k == 0:
        return x.copy()
    idx = np.sort(rng.choice(n, size=k, replace=False))
    attack = AttackConfig(kind="fgsm", xi=cfg.at_epsilon)
    out = x.copy()
    out[idx] = fgsm(net, task, x[idx], np.asarray(labels)[idx], attack)
    return out

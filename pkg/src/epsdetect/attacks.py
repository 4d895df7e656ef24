"""Toy differentiable classifier and the gradient attack family.

The classifier is a softmax model (linear by default, optionally a small
MLP) trained with cross-entropy; attacks ascend the loss inside an
epsilon-ball:

- fgsm: one signed (linf) or unit-gradient (l2) step of size epsilon;
- bim:  iterated fgsm steps with projection after every step;
- pgd:  bim plus uniform random initialization inside the ball;
- mim:  momentum buffer (L1-normalized gradient accumulation) before the
        signed / normalized step.

All methods guarantee d(x, x_hat) <= epsilon + 1e-9 in the configured norm.
Zero gradients yield zero steps (sign(0) = 0). Input-domain clipping is
applied only when bounds are configured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from epsdetect.mlp import AdamState, Mlp, adam_step

__all__ = [
    "ToyClassifier",
    "AttackConfig",
    "train_classifier",
    "input_gradient",
    "attack",
    "project",
    "parse_epsilon",
]


@dataclass(frozen=True)
class ToyClassifier:
    """Softmax classifier: logits = MLP(x) (a single linear layer by default)."""

    widths: tuple
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64))
        Mlp(self.widths).unpack(self.params)  # validates the count

    @property
    def d(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return Mlp(self.widths).forward(self.params, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"widths": list(self.widths), "params": self.params.tolist()}, fh)

    @classmethod
    def load(cls, path: str) -> "ToyClassifier":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(widths=tuple(obj["widths"]), params=np.asarray(obj["params"]))


@dataclass(frozen=True)
class AttackConfig:
    """Attack family configuration; defaults follow the 5-step, eps/5 protocol."""

    method: str = "pgd"
    norm: str = "linf"
    epsilon: float = 4.0 / 255.0
    steps: int = 5
    step_size: float | None = None  # defaults to epsilon / steps
    momentum_decay: float = 1.0  # mim only
    random_init: bool = True  # pgd only
    clip: tuple | None = None  # optional input-domain bounds (lo, hi)

    def __post_init__(self):
        if self.method not in ("fgsm", "bim", "pgd", "mim"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / self.steps)
        if self.step_size < 0.0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")


def parse_epsilon(text: str) -> float:
    """Accept a budget as a fraction string "k/255" or a decimal."""
    text = str(text).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(clf: ToyClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    p = _softmax(clf.logits(x))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels] + 1e-300)))


def train_classifier(
    data: np.ndarray,
    labels: np.ndarray,
    hidden=(),
    learning_rate: float = 0.05,
    iterations: int = 500,
    seed: int = 0,
) -> ToyClassifier:
    """Fit the softmax classifier by full-batch adaptive gradient descent.

    Deterministic per seed. ``hidden=()`` gives the logistic-linear model.
    """
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least two classes present in the data")
    n_classes = int(classes.max()) + 1
    mlp = Mlp((x.shape[1], *hidden, n_classes))
    rng = np.random.default_rng(seed)
    params = mlp.init(rng)
    state = AdamState.zeros(params.size)
    onehot = np.eye(n_classes)[labels]
    for _ in range(iterations):
        logits, cache = mlp.forward_cached(params, x)
        p = _softmax(logits)
        dlogits = (p - onehot) / x.shape[0]
        grad, _ = mlp.backward(params, cache, dlogits)
        params = adam_step(params, grad, state, learning_rate)
    return ToyClassifier(widths=mlp.widths, params=params)


def input_gradient(clf: ToyClassifier, x: np.ndarray, label) -> np.ndarray:
    """Gradient of the cross-entropy loss at (x, label) with respect to x."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if labels.size == 1 and xb.shape[0] > 1:
        labels = np.full(xb.shape[0], labels[0])
    if np.any(labels < 0) or np.any(labels >= clf.n_classes):
        raise ValueError(f"labels must lie in [0, {clf.n_classes}), got {labels}")
    mlp = Mlp(clf.widths)
    logits, cache = mlp.forward_cached(clf.params, xb)
    p = _softmax(logits)
    dlogits = p.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    _, dx = mlp.backward(clf.params, cache, dlogits)
    return dx[0] if single else dx


def project(x_adv: np.ndarray, x0: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Project onto the eps-ball around x0; bit-exactly idempotent.

    linf: componentwise clamp into [x0 - eps, x0 + eps];
    l2: radial rescale onto the sphere when outside the ball.

    Points already within eps + 1e-9 (the attack contract's slack) are
    returned verbatim; without that no-op band, rounding in x0 + delta
    reconstruction would break idempotence at the ball boundary.
    """
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    tol = 1e-9
    delta = x_adv - x0
    if norm == "linf":
        if np.all(np.abs(delta) <= eps + tol):
            return x_adv.copy()
        return x0 + np.clip(delta, -eps, eps)
    if norm == "l2":
        r = np.linalg.norm(delta, axis=-1, keepdims=True)
        if np.all(r <= eps + tol):
            return x_adv.copy()
        scale = np.where(r > eps, np.divide(eps, r, out=np.ones_like(r), where=r > 0), 1.0)
        return x0 + delta * scale
    raise ValueError(f"unknown norm {norm!r}")


def _step_direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    r = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.divide(g, r, out=np.zeros_like(g), where=r > 0)


def attack(
    clf: ToyClassifier,
    x: np.ndarray,
    label,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Craft adversarial inputs inside the eps-ball around x.

    Accepts a single vector or a batch; the returned points satisfy
    d(x, x_hat) <= eps + 1e-9 under cfg.norm and the optional clip bounds.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x0 = np.atleast_2d(x)
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if cfg.epsilon == 0.0:
        return x.copy()

    def clipped(v):
        if cfg.clip is not None:
            v = np.clip(v, cfg.clip[0], cfg.clip[1])
        return v

    if cfg.method == "fgsm":
        g = input_gradient(clf, x0, labels)
        adv = x0 + cfg.epsilon * _step_direction(g, cfg.norm)
        adv = clipped(project(adv, x0, cfg.norm, cfg.epsilon))
        return adv[0] if single else adv

    adv = x0.copy()
    if cfg.method == "pgd" and cfg.random_init:
        if rng is None:
            raise ValueError("pgd random init requires an rng")
        if cfg.norm == "linf":
            adv = x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
        else:
            direction = rng.standard_normal(x0.shape)
            direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
            radius = cfg.epsilon * rng.uniform(0.0, 1.0, size=(x0.shape[0], 1)) ** (
                1.0 / x0.shape[1]
            )
            adv = x0 + radius * direction
        adv = clipped(project(adv, x0, cfg.norm, cfg.epsilon))

    momentum = np.zeros_like(x0)
    for _ in range(cfg.steps):
        g = input_gradient(clf, adv, labels)
        if cfg.method == "mim":
            l1 = np.sum(np.abs(g), axis=1, keepdims=True)
            momentum = cfg.momentum_decay * momentum + np.divide(
                g, l1, out=np.zeros_like(g), where=l1 > 0
            )
            step = _step_direction(momentum, cfg.norm)
        else:  # bim / pgd
            step = _step_direction(g, cfg.norm)
        adv = adv + cfg.step_size * step
        adv = clipped(project(adv, x0, cfg.norm, cfg.epsilon))
    return adv[0] if single else adv

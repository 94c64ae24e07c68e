"""Gradient-sign attacks under an L-infinity budget.

``fgsm``, ``ifgsm`` and ``mifgsm`` are the update loops. The gradient fed to
``mifgsm`` comes from :func:`aggregate_gradient`, which averages the loss
gradient over transformed copies of the current iterate (scale copies,
admixed copies, mixup/cutmix blends), optionally passing each copy through
the resize-and-pad transform and smoothing the average with a Gaussian
kernel. :func:`admix_attack` is the momentum loop driven by admixed copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from . import transforms as X
from .errors import ConfigError, ShapeError, ZeroGradientError
from .models import loss_input_grad
from .tensor import Tape, Tensor
from .transforms import SamplePool, TransformConfig

F32 = np.float32

TRANSFORMS = ("none", "dim", "tim", "sim", "admix", "mixup", "mixup_wlm", "admix_lm", "cutmix")
ATTACKS = ("fgsm", "ifgsm", "mifgsm", "dim", "tim", "sim", "admix", "mixup", "mixup-wlm", "admix-lm", "cutmix")
NEEDS_POOL = ("admix", "mixup", "mixup_wlm", "admix_lm", "cutmix")


@dataclass(frozen=True)
class AttackConfig:
    """Every attack hyperparameter in one record.

    ``epsilon`` and ``alpha`` are in [0,1] pixel units; ``alpha`` defaults to
    ``epsilon / iters``. ``transform`` picks the gradient estimator, while
    ``use_dim`` / ``use_tim`` compose the resize-pad input transform and the
    Gaussian gradient smoothing on top of it.
    """

    epsilon: float = 16 / 255
    iters: int = 10
    alpha: float | None = None
    mu: float = 1.0
    transform: str = "none"
    use_dim: bool = False
    use_tim: bool = False
    tcfg: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}; choose from {', '.join(TRANSFORMS)}")

    @property
    def step_size(self) -> float:
        return self.epsilon / self.iters if self.alpha is None else self.alpha

    @property
    def dim_enabled(self) -> bool:
        return self.use_dim or self.transform == "dim"

    @property
    def tim_enabled(self) -> bool:
        return self.use_tim or self.transform == "tim"


@dataclass
class AttackRng:
    """Independent random streams for pool sampling, resize-pad geometry and
    blend parameters, so enabling one transform never shifts another's draws."""

    sample: np.random.Generator
    dim: np.random.Generator
    mix: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, index: int = 0) -> "AttackRng":
        streams = np.random.SeedSequence([int(seed), int(index)]).spawn(3)
        return cls(*(np.random.default_rng(s) for s in streams))


@dataclass
class AdversaryResult:
    x_adv: Tensor
    iterations_run: int
    linf: float
    surrogate_fooled: bool
    zero_grad_steps: int = 0
    trajectory: list = field(default_factory=list, repr=False)


class Ensemble:
    """Logit fusion: the weighted sum of member models' logits acts as one model."""

    def __init__(self, models: Sequence, weights: Sequence[float] | None = None):
        models = list(models)
        if not models:
            raise ConfigError("an ensemble needs at least one model")
        weights = [1.0 / len(models)] * len(models) if weights is None else [float(w) for w in weights]
        if len(weights) != len(models):
            raise ConfigError(f"{len(models)} models but {len(weights)} weights")
        if abs(sum(weights) - 1.0) > 1e-6:
            raise ConfigError(f"ensemble weights must sum to 1, got {sum(weights)}")
        first = models[0]
        for m in models[1:]:
            if tuple(m.input_shape) != tuple(first.input_shape):
                raise ShapeError("ensemble", "member input shapes differ",
                                 first=list(first.input_shape), other=list(m.input_shape))
            if m.num_classes != first.num_classes:
                raise ShapeError("ensemble", "member class counts differ",
                                 first=first.num_classes, other=m.num_classes)
        self.models = models
        self.weights = weights
        self.name = "+".join(m.name for m in models)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.models[0].input_shape)

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes

    def logits(self, x: Tensor) -> Tensor:
        fused = None
        for m, w in zip(self.models, self.weights):
            z = T.scale(m.logits(x), w)
            fused = z if fused is None else T.add(fused, z)
        return fused

    def predict(self, images: np.ndarray, chunk: int = 250) -> np.ndarray:
        out = [np.argmax(self.logits(Tensor(images[s:s + chunk])).data, axis=1)
               for s in range(0, len(images), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def ensemble_grad(models: Sequence, weights: Sequence[float], x: Tensor, y: int) -> Tensor:
    """Input gradient of cross-entropy on the fused logits."""
    return loss_input_grad(Ensemble(models, weights), x, y)[1]


def plain_gradient(model, x: Tensor, y: int) -> Tensor:
    return loss_input_grad(model, x, y)[1]


# ---------------------------------------------------------------------------
# gradient aggregation


def _soft(pairs, num_classes: int) -> np.ndarray:
    q = np.zeros(num_classes)
    for label, w in pairs:
        q[label] += w
    return q


def transformed_copies(x: Tensor, y: int, cfg: AttackConfig, rng: AttackRng,
                       pool: SamplePool | None, num_classes: int) -> tuple[list[Tensor], np.ndarray]:
    """The copies whose gradients are averaged, with one target row per copy.

    Targets come back as int labels when every copy keeps ``y``, otherwise as
    a [copies, num_classes] matrix of label weights.
    """
    tc = cfg.tcfg
    kind = cfg.transform
    if kind in ("admix", "admix_lm") and tc.m2 == 0:
        kind = "sim"
    if kind in ("none", "dim", "tim"):
        return [x], np.array([y])
    if kind == "sim":
        copies = [c for c, _ in X.sim_copies(x, tc.m1)]
        return copies, np.full(len(copies), y)

    if pool is None:
        raise ConfigError(f"transform {kind!r} needs a sample pool")
    idx = X.sample_other_indices(pool, y, tc.m2, rng.sample)
    if len(idx) == 0:
        raise ConfigError(f"transform {kind!r} needs m2 >= 1")
    others = [pool.tensor(int(i)) for i in idx]
    other_labels = [int(pool.labels[i]) for i in idx]

    if kind == "admix":
        copies = [c for c, _ in X.admix_copies(x, others, tc)]
        return copies, np.full(len(copies), y)
    if kind == "admix_lm":
        copies = [c for c, _ in X.admix_copies(x, others, tc)]
        w = 1.0 / (1.0 + tc.eta)
        rows = [_soft([(y, w), (yj, 1.0 - w)], num_classes) for yj in other_labels for _ in tc.gammas]
        return copies, np.stack(rows)
    lam = float(rng.mix.random())
    if kind in ("mixup", "mixup_wlm"):
        copies, rows = [], []
        for xp, yp in zip(others, other_labels):
            img, label = X.mixup_blend(x, y, xp, yp, lam, variant=kind)
            copies.append(img)
            rows.append(_soft(label, num_classes))
        return copies, np.stack(rows)
    if kind == "cutmix":
        copies = []
        for xp in others:
            cut = X.cutmix_blend(x, xp, lam, rng.mix)
            copies.extend(T.scale(cut, g) for g in tc.gammas)
        return copies, np.full(len(copies), y)
    raise ConfigError(f"unhandled transform {kind!r}")


def aggregate_gradient(model, x_t: Tensor, y: int, cfg: AttackConfig, rng: AttackRng,
                       pool: SamplePool | None = None) -> Tensor:
    """Mean gradient of the loss over all transformed copies of ``x_t``.

    Each copy is built from ``x_t`` with differentiable ops, so the result is
    the gradient with respect to ``x_t`` itself (a copy scaled by gamma
    contributes gamma times the gradient at the copy). With resize-pad
    enabled every copy is transformed before the forward pass; with
    smoothing enabled the averaged gradient is filtered before it is
    returned.
    """
    x_t = T.as_tensor(x_t)
    if tuple(x_t.shape) != tuple(model.input_shape):
        raise ShapeError("aggregate_gradient", "input does not match the model's input shape",
                         expected=list(model.input_shape), got=list(x_t.shape))
    tape = Tape()
    xv = tape.watch(x_t)
    copies, targets = transformed_copies(xv, y, cfg, rng, pool, model.num_classes)
    if cfg.dim_enabled:
        tc = cfg.tcfg
        copies = [X.dim_transform(c, tc.dim_prob, tc.dim_max_ratio, rng.dim) for c in copies]
    loss = T.softmax_cross_entropy(model.logits(T.stack(copies)), targets)
    grad = T.input_gradient(tape, loss, xv)
    if cfg.tim_enabled:
        grad = T.cross_correlate_2d(grad, X.tim_kernel(cfg.tcfg.tim_kernel_size, cfg.tcfg.tim_sigma_span))
    return grad


# ---------------------------------------------------------------------------
# update loops


def _project(v: np.ndarray, x0: np.ndarray, eps: np.float32) -> np.ndarray:
    return np.clip(np.clip(v, x0 - eps, x0 + eps), F32(0), F32(1))


def _result(model, x0: np.ndarray, x_adv: np.ndarray, y: int, iters: int, zero: int, traj) -> AdversaryResult:
    adv = Tensor(x_adv)
    fooled = int(np.argmax(model.logits(adv).data)) != int(y)
    linf = float(np.max(np.abs(x_adv.astype(np.float64) - x0))) if x0.size else 0.0
    return AdversaryResult(adv, iters, linf, fooled, zero, traj)


def _check(model, x: Tensor, y: int) -> Tensor:
    x = T.as_tensor(x)
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError("attack", "input does not match the model's input shape",
                         expected=list(model.input_shape), got=list(x.shape))
    if not 0 <= int(y) < model.num_classes:
        raise ConfigError(f"label {y} out of range for {model.num_classes} classes")
    return x


def fgsm(model, x: Tensor, y: int, cfg: AttackConfig) -> AdversaryResult:
    """One signed step of size epsilon, clipped to [0,1]."""
    x = _check(model, x, y)
    x0 = x.data
    s = T.sign(plain_gradient(model, x, y)).data
    x_adv = np.clip(x0 + F32(cfg.epsilon) * s, F32(0), F32(1))
    zero = int(not s.any())
    return _result(model, x0, x_adv, y, 1, zero, [x0, x_adv])


def ifgsm(model, x: Tensor, y: int, cfg: AttackConfig) -> AdversaryResult:
    x = _check(model, x, y)
    x0 = x.data
    eps, alpha = F32(cfg.epsilon), F32(cfg.step_size)
    xt, zero, traj = x0, 0, [x0]
    for _ in range(cfg.iters):
        s = T.sign(plain_gradient(model, Tensor._wrap(xt), y)).data
        zero += int(not s.any())
        xt = _project(xt + alpha * s, x0, eps)
        traj.append(xt)
    return _result(model, x0, xt, y, cfg.iters, zero, traj)


def mifgsm(model, x: Tensor, y: int, cfg: AttackConfig,
           grad_fn: Callable[[Tensor], Tensor] | None = None,
           rng: AttackRng | None = None, pool: SamplePool | None = None) -> AdversaryResult:
    """Momentum iterative attack.

    ``grad_fn`` maps the current iterate to a gradient estimate; by default it
    is :func:`aggregate_gradient` under ``cfg``. If an estimate is all zero,
    the momentum is decayed without a new contribution.
    """
    x = _check(model, x, y)
    if grad_fn is None:
        rng = AttackRng.from_seed(cfg.seed) if rng is None else rng
        grad_fn = lambda xt: aggregate_gradient(model, xt, y, cfg, rng, pool)  # noqa: E731
    x0 = x.data
    eps, alpha, mu = F32(cfg.epsilon), F32(cfg.step_size), F32(cfg.mu)
    g = np.zeros_like(x0)
    xt, zero, traj = x0, 0, [x0]
    for _ in range(cfg.iters):
        gbar = grad_fn(Tensor._wrap(xt))
        try:
            g = mu * g + T.l1_normalize(gbar).data
        except ZeroGradientError:
            g = mu * g
            zero += 1
        xt = _project(xt + alpha * np.sign(g), x0, eps)
        traj.append(xt)
    return _result(model, x0, xt, y, cfg.iters, zero, traj)


def admix_attack(model, x: Tensor, y: int, cfg: AttackConfig, pool: SamplePool,
                 rng: AttackRng | None = None) -> AdversaryResult:
    """Momentum attack whose gradient is the mean over admixed copies, with a
    fresh set of other-category images drawn at every iteration."""
    return mifgsm(model, x, y, replace(cfg, transform="admix"), rng=rng, pool=pool)


def attack_config(name: str, **kwargs) -> AttackConfig:
    """AttackConfig for a command-line attack name such as ``"mixup-wlm"``."""
    return AttackConfig(transform=transform_for(name), **kwargs)


def transform_for(name: str) -> str:
    if name not in ATTACKS:
        raise ConfigError(f"unknown attack {name!r}; choose from {', '.join(ATTACKS)}")
    return "none" if name in ("fgsm", "ifgsm", "mifgsm") else name.replace("-", "_")


def run_attack(name: str, model, x: Tensor, y: int, cfg: AttackConfig,
               rng: AttackRng, pool: SamplePool | None = None) -> AdversaryResult:
    """Dispatch a named attack; the name overrides ``cfg.transform``, and
    transform-based attacks run the momentum loop."""
    cfg = replace(cfg, transform=transform_for(name))
    if name == "fgsm":
        return fgsm(model, x, y, cfg)
    if name == "ifgsm":
        return ifgsm(model, x, y, cfg)
    if name == "admix":
        return admix_attack(model, x, y, cfg, pool, rng)
    return mifgsm(model, x, y, cfg, rng=rng, pool=pool)

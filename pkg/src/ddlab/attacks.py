"""Projected attacks: FGSM, PGD, APGD and the weak-then-strong composite pipeline.

Attacks work on numpy arrays through an *objective oracle*: a callable
``oracle(x_adv) -> (values, grad)`` or ``(values, grad, success)``.
``values`` holds one objective per independent group, either one per
sample (shape ``(B,)``) or a single coupled value for the whole batch
(shape ``(1,)`` or scalar). ``success`` is an optional boolean mask per
group evaluated at the same point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, losses, models
from .autodiff import Tensor, backward, frozen


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationBudget:
    eps: float
    steps: int = 10
    norm: float = math.inf
    step_size: float | None = None
    init: str = "zero"
    track_best: bool = True

    def __post_init__(self):
        if self.eps < 0 or self.steps < 0:
            raise ValueError("eps and steps must be non-negative")
        if self.norm not in (math.inf, 2):
            raise ValueError(f"unsupported norm {self.norm}")
        if self.init not in ("zero", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be positive")

    @property
    def alpha(self):
        if self.step_size is not None:
            return self.step_size
        return 2.0 * self.eps / self.steps if self.steps else 0.0


@dataclass
class AttackResult:
    delta: np.ndarray                 # best-objective (or final) perturbation
    trace: np.ndarray                 # objective per evaluated iterate, (n_eval, G)
    best_trace: np.ndarray            # running max of trace
    best_step: np.ndarray             # (G,)
    best_value: np.ndarray            # (G,)
    success: np.ndarray | None = None
    success_delta: np.ndarray | None = None
    linf: float = 0.0
    l2: float = 0.0
    domain_violations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def adversarial_delta(self):
        """First successful perturbation where one was found, else ``delta``."""
        if self.success is None or self.success_delta is None or not self.success.any():
            return self.delta
        d = self.delta.copy()
        if self.success.size == 1:
            return self.success_delta.copy()
        d[self.success] = self.success_delta[self.success]
        return d


def certify(delta, x):
    """Feasibility certificate: (max |delta|, max l2 per group, domain violations)."""
    adv = x + delta
    violations = int(((adv < 0.0) | (adv > 1.0)).sum())
    flat = delta.reshape(delta.shape[0], -1) if delta.ndim > 1 else delta.reshape(1, -1)
    return float(np.abs(delta).max(initial=0.0)), float(np.sqrt((flat ** 2).sum(axis=1)).max(initial=0.0)), violations


def project(delta, x, budget):
    """Project onto the eps-ball, then onto the image domain ``x + delta in [0, 1]``."""
    eps = budget.eps
    if budget.norm == math.inf:
        d = np.minimum(np.maximum(delta, -eps), eps)
    else:
        flat = delta.reshape(delta.shape[0], -1)
        norms = np.sqrt((flat ** 2).sum(axis=1))
        factor = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
        d = delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    return np.minimum(np.maximum(d, -x), 1.0 - x)


def _evaluate(oracle, x_adv, step):
    out = oracle(x_adv)
    vals, grad = out[0], out[1]
    success = np.asarray(out[2], dtype=bool).reshape(-1) if len(out) > 2 and out[2] is not None else None
    vals = np.atleast_1d(np.asarray(vals, dtype=np.float64)).reshape(-1)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x_adv.shape:
        raise AttackError(f"oracle gradient shape {grad.shape} != input shape {x_adv.shape}")
    if not (np.isfinite(vals).all() and np.isfinite(grad).all()):
        raise AttackError(f"non-finite objective or gradient at step {step}")
    return vals, grad, success


def _groups(vals, x):
    g = vals.size
    if g != 1 and (x.ndim == 0 or g != x.shape[0]):
        raise AttackError(f"{g} objective values for input of shape {x.shape}")
    return g


def _expand(v, x, g):
    """Broadcast a per-group array against ``x``."""
    if g == 1:
        return np.asarray(v).reshape((1,) * x.ndim) if x.ndim else np.asarray(v).reshape(())
    return np.asarray(v).reshape((-1,) + (1,) * (x.ndim - 1))


def _select(mask, x, g):
    return np.broadcast_to(_expand(mask, x, g), x.shape)


def _initial_delta(x, budget, rng):
    if budget.init == "zero" or budget.eps == 0:
        return np.zeros_like(x)
    rng = rng if rng is not None else np.random.default_rng(0)
    if budget.norm == math.inf:
        d = rng.uniform(-budget.eps, budget.eps, x.shape)
    else:
        flat_shape = (x.shape[0], int(np.prod(x.shape[1:])))
        u = rng.normal(size=flat_shape)
        u /= np.sqrt((u ** 2).sum(axis=1, keepdims=True))
        r = budget.eps * rng.uniform(size=(flat_shape[0], 1)) ** (1.0 / flat_shape[1])
        d = (u * r).reshape(x.shape)
    return project(d, x, budget)


def _ascent_step(x, delta, grad, alpha, budget, g):
    if budget.norm == math.inf:
        if np.ndim(alpha) == 0:
            return kernels.linf_step(np.ascontiguousarray(x), np.ascontiguousarray(delta),
                                     np.ascontiguousarray(grad), float(alpha), float(budget.eps))
        return project(delta + _expand(alpha, x, g) * np.sign(grad), x, budget)
    flat = grad.reshape(grad.shape[0], -1) if g > 1 else grad.reshape(1, -1)
    norms = np.sqrt((flat ** 2).sum(axis=1)) + 1e-12
    direction = grad / _expand(norms, x, g)
    return project(delta + _expand(alpha, x, g) * direction, x, budget)


class _Tracker:
    def __init__(self, x, delta, vals, success, track_best):
        self.g = vals.size
        self.x = x
        self.track_best = track_best
        self.trace = [vals.copy()]
        self.best = vals.copy()
        self.best_trace = [vals.copy()]
        self.best_step = np.zeros(self.g, dtype=np.int64)
        self.best_delta = delta.copy()
        self.success = None if success is None else success.copy()
        self.success_delta = None if success is None else delta.copy()

    def update(self, step, delta, vals, success):
        self.trace.append(vals.copy())
        improved = vals > self.best
        if improved.any():
            self.best = np.where(improved, vals, self.best)
            self.best_step = np.where(improved, step, self.best_step)
            sel = _select(improved, self.x, self.g)
            self.best_delta = np.where(sel, delta, self.best_delta)
        self.best_trace.append(self.best.copy())
        if success is not None:
            if self.success is None:
                self.success = np.zeros(self.g, dtype=bool)
                self.success_delta = delta.copy()
            new = success & ~self.success
            if new.any():
                self.success_delta = np.where(_select(new, self.x, self.g), delta, self.success_delta)
                self.success |= new
        return improved

    def result(self, final_delta, budget):
        delta = self.best_delta if self.track_best else final_delta
        linf, l2, bad = certify(delta, self.x)
        return AttackResult(
            delta=delta, trace=np.array(self.trace), best_trace=np.array(self.best_trace),
            best_step=self.best_step, best_value=self.best, success=self.success,
            success_delta=self.success_delta, linf=linf, l2=l2, domain_violations=bad)


def pgd(oracle, x, budget, rng=None):
    """Projected gradient ascent: sign steps under l-inf, normalized steps under l2.

    With ``track_best`` the iterate with the highest objective (the
    initial point included) is returned and the final point is evaluated;
    otherwise the last iterate is returned after ``steps`` gradient calls.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = _initial_delta(x, budget, rng)
    vals, grad, success = _evaluate(oracle, x + delta, 0)
    g = _groups(vals, x)
    tracker = _Tracker(x, delta, vals, success, budget.track_best)
    for i in range(1, budget.steps + 1):
        delta = _ascent_step(x, delta, grad, budget.alpha, budget, g)
        if i == budget.steps and not budget.track_best:
            break
        vals, grad, success = _evaluate(oracle, x + delta, i)
        tracker.update(i, delta, vals, success)
    return tracker.result(delta, budget)


def fgsm(oracle, x, eps):
    """Single sign step of size eps from the clean point (l-inf)."""
    x = np.asarray(x, dtype=np.float64)
    budget = PerturbationBudget(eps=eps, steps=1, step_size=eps if eps > 0 else None)
    vals, grad, success = _evaluate(oracle, x, 0)
    tracker = _Tracker(x, np.zeros_like(x), vals, success, False)
    delta = kernels.linf_step(np.ascontiguousarray(x), np.zeros_like(x), np.ascontiguousarray(grad),
                              float(eps), float(eps))
    return tracker.result(delta, budget)


def apgd_checkpoints(n_iter):
    """Iteration indices at which the step size may be halved."""
    k = max(int(0.22 * n_iter), 1)
    size_decr = max(int(0.03 * n_iter), 1)
    k_min = max(int(0.06 * n_iter), 1)
    points, at = [], 0
    while True:
        at += k
        if at > n_iter:
            break
        points.append(at)
        k = max(k - size_decr, k_min)
    return points


def apgd(oracle, x, budget, rng=None, rho=0.75, momentum=0.75):
    """Auto-PGD: momentum ascent with step halving at checkpoints.

    The step starts at ``2 eps``. At each checkpoint the step is halved and
    the iterate reset to the best point if the objective rose in fewer than
    ``rho`` times the checkpoint gap steps, or if the step was not halved at
    the previous checkpoint and the best value has not moved since. The
    best-so-far point is always returned.
    """
    if budget.steps < 2:
        raise ValueError("apgd needs at least 2 steps")
    x = np.asarray(x, dtype=np.float64)
    delta = _initial_delta(x, budget, rng)
    vals, grad, success = _evaluate(oracle, x + delta, 0)
    g = _groups(vals, x)
    tracker = _Tracker(x, delta, vals, success, True)
    step = np.full(g, 2.0 * budget.eps)
    checkpoints = set(apgd_checkpoints(budget.steps))
    last_check = 0
    increases = np.zeros(g)
    reduced_last = np.ones(g, dtype=bool)
    best_last = tracker.best.copy()
    prev_delta = delta.copy()
    prev_vals = vals.copy()
    best_grad = grad.copy()
    halvings = np.zeros(g, dtype=np.int64)

    for i in range(1, budget.steps + 1):
        a = momentum if i > 1 else 1.0
        z = _ascent_step(x, delta, grad, step, budget, g)
        if a != 1.0:
            cand = delta + a * (z - delta) + (1.0 - a) * (delta - prev_delta)
            z = project(cand, x, budget)
        prev_delta = delta
        delta = z
        vals, grad, success = _evaluate(oracle, x + delta, i)
        increases += vals > prev_vals
        prev_vals = vals.copy()
        improved = tracker.update(i, delta, vals, success)
        if improved.any():
            best_grad = np.where(_select(improved, x, g), grad, best_grad)

        if i in checkpoints:
            gap = i - last_check
            few = increases < rho * gap
            stalled = ~reduced_last & (best_last >= tracker.best)
            reduce = few | stalled
            if reduce.any():
                step = np.where(reduce, step / 2.0, step)
                halvings += reduce
                sel = _select(reduce, x, g)
                delta = np.where(sel, tracker.best_delta, delta)
                grad = np.where(sel, best_grad, grad)
            reduced_last = reduce
            best_last = tracker.best.copy()
            increases[:] = 0
            last_check = i

    result = tracker.result(delta, budget)
    result.extra["halvings"] = halvings
    return result


# -- composite pipeline ------------------------------------------------------------------
@dataclass
class PipelineResult:
    delta: np.ndarray
    broken: np.ndarray
    breaking_stage: np.ndarray
    best_value: np.ndarray
    stage_calls: list


def composite_pipeline(x, stages, success_predicate, active=None):
    """Run ``stages`` in order, each on the samples no earlier stage broke.

    ``stages`` are callables ``stage(x_subset, rows) -> AttackResult`` with
    one group per sample, where ``rows`` index the subset into ``x``.
    ``success_predicate(x_adv_subset, rows) -> bool mask`` decides whether a
    sample is broken. A sample keeps the perturbation of
    the first stage that broke it, else that of the stage with the highest
    best objective. ``active`` restricts attacks to a subset (e.g. clean-
    correct samples); inactive samples are left untouched.
    """
    if not stages:
        raise ValueError("composite pipeline needs at least one stage")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    delta = np.zeros_like(x)
    broken = np.zeros(n, dtype=bool)
    breaking = np.full(n, -1, dtype=np.int64)
    best = np.full(n, -np.inf)
    calls = []
    for s, stage in enumerate(stages):
        todo = np.flatnonzero(active & ~broken)
        calls.append(todo.copy())
        if todo.size == 0:
            continue
        res = stage(x[todo], todo)
        cand = res.adversarial_delta
        hit = np.asarray(success_predicate(x[todo] + cand, todo), dtype=bool)
        better = res.best_value > best[todo]
        take = hit | better
        delta[todo[take]] = cand[take]
        best[todo[better]] = res.best_value[better]
        broken[todo[hit]] = True
        breaking[todo[hit]] = s
    return PipelineResult(delta, broken, breaking, best, calls)


# -- objective builders --------------------------------------------------------------
def classifier_objective(kind, logits_fn, labels, target=None, params=()):
    """Oracle for CE / DLR / targeted-DLR on ``logits_fn(x_tensor)``.

    The success mask flags misclassification (untargeted) or a hit on
    ``target`` (targeted). ``params`` are frozen while the oracle runs.
    """
    labels = np.asarray(labels, dtype=np.int64)

    def oracle(x_adv):
        with frozen(params):
            xt = Tensor(x_adv, requires_grad=True)
            logits = logits_fn(xt)
            if kind == "ce":
                lv = losses.cross_entropy(logits, labels)
            elif kind == "dlr":
                lv = losses.dlr_loss(logits, labels)
            elif kind == "dlr-targeted":
                lv = losses.dlr_loss(logits, labels, target=target)
            else:
                raise ValueError(f"unknown objective kind {kind!r}")
            backward(lv.per_sample.sum())
        pred = logits.data.argmax(axis=1)
        success = pred == target if kind == "dlr-targeted" else pred != labels
        return lv.per_sample.data, xt.grad, success

    return oracle


def instruction_objective(cap, vision, samples, sign=1.0):
    """Oracle for the per-sample instruction NLL (``sign=-1`` to descend on a target)."""
    params = list(cap.tensors.values()) + list(vision.tensors.values())

    def oracle(x_adv):
        with frozen(params):
            xt = Tensor(x_adv, requires_grad=True)
            lv = losses.instruction_loss(cap, vision, samples, images=xt)
            backward(lv.per_sample.sum() * sign)
        return sign * lv.per_sample.data, xt.grad

    return oracle


def contains_subsequence(seq, target):
    seq, target = list(seq), list(target)
    n = len(target)
    return n > 0 and any(seq[i:i + n] == target for i in range(len(seq) - n + 1))


def targeted_caption_attack(cap, vision, images, instruction, target, budget, rng=None):
    """APGD minimizing the NLL of ``target`` as the answer; success = target in greedy output.

    ``images`` is a batch (B x 3 x R x R) attacked independently; returns an
    AttackResult whose ``success`` is judged on the returned perturbation.
    """
    images = np.asarray(images, dtype=np.float64)
    instruction = np.asarray(instruction, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    if target.size > models.MAX_NEW_TOKENS:
        raise ValueError("target longer than the generation limit")
    samples = [models.InstructionSample(img, instruction, target) for img in images]
    oracle = instruction_objective(cap, vision, samples, sign=-1.0)
    if budget.steps >= 2:
        res = apgd(oracle, images, budget, rng=rng)
    else:
        res = pgd(oracle, images, budget, rng=rng)
    outputs = models.generate_batch(cap, vision, images + res.delta, instruction,
                                    max_new=min(models.MAX_NEW_TOKENS, target.size + 8))
    res.success = np.array([contains_subsequence(o, target) for o in outputs], dtype=bool)
    res.success_delta = res.delta
    res.extra["outputs"] = outputs
    return res

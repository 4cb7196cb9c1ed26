"""Clean and adversarial training loops for the dual encoder and the captioner.

Every loop is driven by a seed: batch order comes from a data generator,
attack initialization from a separate attack generator, so a run with
``eps=0`` consumes exactly the same batches as the matching adversarial run.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks, data, losses, models
from .autodiff import NonFiniteError, OptimizerState, Tensor, backward, cosine_lr, frozen, no_grad, optimizer_step


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; ``history`` holds the records so far."""

    def __init__(self, message, step, history):
        super().__init__(message)
        self.step = step
        self.history = history


@dataclass(frozen=True)
class TrainStageConfig:
    resolution: int = 32
    steps: int = 0              # inner PGD steps k
    eps: float = 0.0
    samples: int = 2048         # samples to see in this stage
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-4
    freeze_text: bool = True
    cap_weight: float = 0.5     # lambda on the captioning loss
    attack_caption: bool = True   # inner max includes the lambda-weighted caption term
    vision_only: bool = False     # update vision weights only (no temperature / caption head)
    clean_mix: bool = False       # outer loss = mean of clean and adversarial loss

    def __post_init__(self):
        if self.resolution not in data.RESOLUTIONS:
            raise ValueError(f"unsupported resolution {self.resolution}")
        if self.eps < 0 or self.steps < 0 or self.samples < 1 or self.batch_size < 2:
            raise ValueError(f"invalid stage config {self}")

    @property
    def num_steps(self):
        return math.ceil(self.samples / self.batch_size)

    def budget(self):
        return attacks.PerturbationBudget(eps=self.eps, steps=self.steps, init="random", track_best=False)


@dataclass(frozen=True)
class InstructionTuneConfig:
    steps: int = 0              # inner PGD steps k
    eps: float = 0.0
    epochs: int = 2
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-4
    vision_lr_ratio: float = 0.0
    clean_mix: bool = False

    @property
    def adversarial(self):
        return self.eps > 0 and self.steps > 0

    def budget(self):
        return attacks.PerturbationBudget(eps=self.eps, steps=self.steps, init="random", track_best=False)


def default_clip_stages(unit=2048, adversarial=True, batch_size=32, lr=3e-4, cap_weight=0.5):
    """Three stages with sample ratio 10 : 1 : 0.25."""
    specs = [(16, 2, 4 / 255, 10.0), (32, 3, 4 / 255, 1.0), (32, 4, 8 / 255, 0.25)]
    return [TrainStageConfig(resolution=r, steps=k if adversarial else 0, eps=e if adversarial else 0.0,
                             samples=int(unit * f), batch_size=batch_size, lr=lr, cap_weight=cap_weight)
            for r, k, e, f in specs]


# -- helpers -------------------------------------------------------------------------------
def epoch_batches(n, batch_size, total, rng):
    """Yield index arrays covering ``total`` samples, reshuffling each epoch."""
    seen, perm, pos = 0, rng.permutation(n), 0
    while seen < total:
        take = min(batch_size, total - seen)
        if pos + take > n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos:pos + take]
        pos += take
        seen += take


def _check_finite(value, step, history):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}", step, history)


def _dataset_cache(seed, count):
    cache = {}

    def get(res):
        if res not in cache:
            cache[res] = data.make_dataset(count, res, seed).take_split("train")
        return cache[res]

    return get


def _delta_stats(delta, x):
    linf, _, bad = attacks.certify(delta, x)
    return {"delta_linf": linf, "domain_violations": bad}


# -- dual encoder --------------------------------------------------------------------------
def clip_objective(params, head, images, captions, text_emb, cap_weight):
    """Contrastive loss (+ cap_weight x captioning loss); returns (total, contrastive LossValue)."""
    img = models.encode_image(params, images)
    con = losses.contrastive_loss(img, text_emb, scale=models.similarity_scale(params))
    total = con.value
    if head is not None and cap_weight > 0:
        cap = losses.captioning_loss(head, params, images, captions)
        total = total + cap.value * cap_weight
        con.diagnostics["caption"] = float(cap.value.item())
    return total, con


def _text_embeddings(params, captions):
    if params["text.tok"].requires_grad:
        return models.encode_text(params, captions)
    with no_grad():
        return models.encode_text(params, captions)


def _clip_trainables(params, head, cfg):
    out = params.trainable("vision.")
    if not cfg.vision_only:
        out += params.trainable("text.") + params.trainable("logit_scale")
        if head is not None and cfg.cap_weight > 0:
            out += head.trainable()
    return out


def adv_clip_step(params, head, images, captions, cfg, opt, trainables, attack_rng):
    """One adversarial contrastive step: inner PGD on pixels, outer optimizer step."""
    images = np.asarray(images, dtype=np.float64)
    text_emb = _text_embeddings(params, captions)
    fixed_text = Tensor(text_emb.data) if not text_emb.requires_grad else None
    degenerate = cfg.eps == 0 or cfg.steps == 0
    metrics = {"degenerate": degenerate}
    with no_grad():
        img = models.encode_image(params, images)
        metrics["clean_loss"] = float(losses.contrastive_loss(
            img, Tensor(text_emb.data), scale=models.similarity_scale(params)).value.item())

    if degenerate:
        x_adv = images
        delta = np.zeros_like(images)
    else:
        if fixed_text is None:
            raise ValueError("adversarial contrastive training needs a frozen text encoder")
        weight = cfg.cap_weight if cfg.attack_caption else 0.0
        model_params = list(params.tensors.values()) + (list(head.tensors.values()) if head else [])

        def oracle(x):
            with frozen(model_params):
                xt = Tensor(x, requires_grad=True)
                total, _ = clip_objective(params, head, xt, captions, fixed_text, weight)
                backward(total)
            return total.data.reshape(1), xt.grad

        res = attacks.pgd(oracle, images, cfg.budget(), rng=attack_rng)
        delta = res.delta
        x_adv = images + delta

    params.zero_grad()
    if head is not None:
        head.zero_grad()
    target_text = fixed_text if fixed_text is not None else text_emb
    total, con = clip_objective(params, head, x_adv, captions, target_text, cfg.cap_weight)
    if cfg.clean_mix and not degenerate:
        clean_total, _ = clip_objective(params, head, images, captions,
                                        target_text if fixed_text is not None else
                                        _text_embeddings(params, captions), cfg.cap_weight)
        total = (total + clean_total) * 0.5
    value = total.item()
    if math.isfinite(value):
        backward(total)
        optimizer_step(opt, trainables)
        params.clamp_temperature()
    metrics.update({"loss": value, "adv_loss": float(con.value.item()),
                    "match_acc": con.diagnostics["match_acc"],
                    "inv_temperature": params.inv_temperature(), **_delta_stats(delta, images)})
    if "caption" in con.diagnostics:
        metrics["caption_loss"] = con.diagnostics["caption"]
    return metrics


def clip_step(params, head, images, captions, cfg, opt, trainables):
    """Clean contrastive step (the eps=0 case of :func:`adv_clip_step`)."""
    return adv_clip_step(params, head, images, captions, replace(cfg, eps=0.0, steps=0), opt, trainables, None)


def train_clip_staged(params, head, stages, seed, dataset_size=2048, patch_mode="random",
                      log=None, history=None):
    """Run ``stages`` in order on ``params`` (and the caption head) in place.

    The training pool holds the train split of ``dataset_size`` scenes and
    is re-rendered at each stage's resolution. Returns the per-step history.
    """
    resolutions = [s.resolution for s in stages]
    if resolutions != sorted(resolutions):
        raise ValueError("stage resolutions must be nondecreasing")
    history = [] if history is None else history
    pool = _dataset_cache(seed, dataset_size)
    data_rng = np.random.default_rng([seed, 11])
    attack_rng = np.random.default_rng([seed, 12])
    step = 0
    for si, cfg in enumerate(stages):
        if params.config.resolution != cfg.resolution:
            models.reinit_patch_embedding(params, cfg.resolution, seed, mode=patch_mode)
            if head is not None:
                head.config = head.config.with_resolution(cfg.resolution)
        params.set_frozen("text.", cfg.freeze_text)
        trainables = _clip_trainables(params, head, cfg)
        opt = OptimizerState("adamw", lr=cfg.lr, weight_decay=cfg.weight_decay)
        ds = pool(cfg.resolution)
        total_steps = cfg.num_steps
        t0 = time.perf_counter()
        for i, rows in enumerate(epoch_batches(len(ds), cfg.batch_size, cfg.samples, data_rng)):
            opt.lr = cosine_lr(cfg.lr, i, total_steps)
            try:
                m = adv_clip_step(params, head, ds.images[rows], ds.captions[rows], cfg, opt,
                                  trainables, attack_rng)
            except NonFiniteError as exc:
                raise DivergenceError(f"stage {si} step {step}: {exc}", step, history) from exc
            m.update({"stage": si, "step": step, "lr": opt.lr})
            history.append(m)
            _check_finite(m["loss"], step, history)
            if log is not None:
                log(m)
            step += 1
        if history:
            history[-1]["stage_seconds"] = time.perf_counter() - t0
    return history


def pretrain_text_encoder(config, stages, seed, dataset_size=2048, cap_weight=0.5, log=None,
                          patch_mode="random"):
    """Clean contrastive (+ captioning) training of both towers, then freeze the text tower.

    Returns ``(params, head, history)``; the schedule mirrors ``stages`` with
    eps = 0 and the text encoder trainable.
    """
    params = models.init_dual_encoder(config.with_resolution(stages[0].resolution), seed)
    head = models.init_captioner(params.config, seed) if cap_weight > 0 else None
    clean = [replace(s, eps=0.0, steps=0, freeze_text=False, cap_weight=cap_weight) for s in stages]
    history = train_clip_staged(params, head, clean, seed, dataset_size, patch_mode, log=log)
    params.set_frozen("text.", True)
    return params, head, history


def train_delta_clip(clean_params, clean_head, stages, seed, dataset_size=2048, log=None,
                     vision_init="scratch", patch_mode="random"):
    """Adversarial staged training of a vision tower against the frozen clean text tower.

    ``vision_init="scratch"`` draws fresh vision weights; ``"clean"`` starts
    from the clean encoder's vision tower.
    """
    params = clean_params.copy()
    params.config = clean_params.config
    head = clean_head.copy() if clean_head is not None else None
    if vision_init == "scratch":
        fresh = models.init_dual_encoder(params.config.with_resolution(stages[0].resolution), seed + 1)
        params.config = fresh.config
        for name in params.names("vision."):
            params[name].data = fresh[name].data.copy()
        params["logit_scale"].data = fresh["logit_scale"].data.copy()
        if head is not None:
            head = models.init_captioner(fresh.config, seed + 1)
    elif vision_init != "clean":
        raise ValueError(f"unknown vision init {vision_init!r}")
    elif params.config.resolution != stages[0].resolution:
        raise ValueError("clean vision init needs matching starting resolution")
    params.set_frozen("text.", True)
    history = train_clip_staged(params, head, [replace(s, freeze_text=True) for s in stages],
                                seed, dataset_size, patch_mode, log=log)
    return params, head, history


# -- captioner -----------------------------------------------------------------------------
def instruction_samples(ds, instructions=None):
    """Every (scene, instruction) pair of a dataset as InstructionSamples."""
    instructions = list(data.INSTRUCTIONS) if instructions is None else instructions
    out = []
    for img, spec in zip(ds.images, ds.specs()):
        for ins in instructions:
            out.append(models.InstructionSample(img, data.tokenize(ins, eos=False),
                                                data.tokenize(data.answer_text(spec, ins), eos=False)))
    return out


def adv_instruction_step(cap, vision, samples, cfg, opt, trainables, attack_rng):
    """Inner PGD on pixels against the instruction loss, then one outer step."""
    images = np.stack([s.image for s in samples])
    degenerate = not cfg.adversarial
    metrics = {"degenerate": degenerate}
    if degenerate:
        delta = np.zeros_like(images)
    else:
        oracle = attacks.instruction_objective(cap, vision, samples)

        def coupled(x):
            vals, grad = oracle(x)
            return np.array([vals.sum()]), grad

        delta = attacks.pgd(coupled, images, cfg.budget(), rng=attack_rng).delta
    cap.zero_grad()
    vision.zero_grad()
    adv = losses.instruction_loss(cap, vision, samples, images=Tensor(images + delta))
    total = adv.value
    if cfg.clean_mix and not degenerate:
        total = (total + losses.instruction_loss(cap, vision, samples).value) * 0.5
    value = total.item()
    if math.isfinite(value):
        backward(total)
        for state, group in zip(opt, trainables):
            if group:
                optimizer_step(state, group)
    metrics.update({"loss": value, "adv_loss": float(adv.value.item()), **_delta_stats(delta, images)})
    return metrics


def train_captioner(vision, cfg, seed, dataset_size=2048, resolution=32, log=None, init_seed=None):
    """Instruction-tune a freshly initialized captioner on top of ``vision``.

    ``vision`` is copied; its tower trains at ``vision_lr_ratio`` x lr (0 keeps
    it frozen). Returns ``(cap, vision, history)``.
    """
    vision = vision.copy()
    if vision.config.resolution != resolution:
        raise ValueError(f"vision encoder is at {vision.config.resolution}px, expected {resolution}")
    vision.set_frozen("", True)
    if cfg.vision_lr_ratio > 0:
        vision.set_frozen("vision.", False)
    cap = models.init_captioner(vision.config, seed if init_seed is None else init_seed)
    ds = data.make_dataset(dataset_size, resolution, seed).take_split("train")
    samples = instruction_samples(ds)
    groups = [cap.trainable(), vision.trainable("vision.")]
    opts = [OptimizerState("adamw", lr=cfg.lr, weight_decay=cfg.weight_decay),
            OptimizerState("adamw", lr=cfg.lr * cfg.vision_lr_ratio, weight_decay=cfg.weight_decay)]
    data_rng = np.random.default_rng([seed, 21])
    attack_rng = np.random.default_rng([seed, 22])
    total = cfg.epochs * len(samples)
    total_steps = math.ceil(total / cfg.batch_size)
    history = []
    for step, rows in enumerate(epoch_batches(len(samples), cfg.batch_size, total, data_rng)):
        opts[0].lr = cosine_lr(cfg.lr, step, total_steps)
        opts[1].lr = opts[0].lr * cfg.vision_lr_ratio
        try:
            m = adv_instruction_step(cap, vision, [samples[i] for i in rows], cfg, opts, groups, attack_rng)
        except NonFiniteError as exc:
            raise DivergenceError(f"step {step}: {exc}", step, history) from exc
        m.update({"step": step, "lr": opts[0].lr})
        history.append(m)
        _check_finite(m["loss"], step, history)
        if log is not None:
            log(m)
    return cap, vision, history


CAPTIONER_VARIANTS = {
    # name: (vision source, adversarial tuning)
    "llava-toy": ("clean", False),
    "delta-toy": ("robust", False),
    "delta2-toy": ("robust", True),
    "crash-probe": ("clean", True),
}


def variant_config(name, base, adv_steps=3, adv_eps=4 / 255, vision_lr_ratio=1 / 20):
    _, adversarial = CAPTIONER_VARIANTS[name]
    if adversarial:
        return replace(base, steps=adv_steps, eps=adv_eps, vision_lr_ratio=vision_lr_ratio)
    return replace(base, steps=0, eps=0.0, vision_lr_ratio=0.0)


def config_dict(cfg):
    return asdict(cfg)

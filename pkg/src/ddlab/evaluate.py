"""Zero-shot classification, caption robustness and targeted attack success rates."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, data, models
from .autodiff import Tensor, matmul, no_grad, scalar_mul

ZERO_SHOT_TEMPLATES = ("a photo of a {}", "an image of a {}")
DEFAULT_INSTRUCTION = "describe the image"
# Six answer-shaped targets: a captioner can express them, so success measures
# how far the image alone can steer its output.
DEFAULT_TARGETS = (
    "a red circle in the top left",
    "a green square in the bottom right",
    "a blue triangle in the center",
    "a yellow cross in the top right",
    "a red square in the bottom left",
    "a green triangle in the top left",
)
CSV_COLUMNS = ("metric", "attack", "epsilon", "steps", "value", "seed")


@dataclass
class ZeroShotHead:
    class_names: list
    templates: tuple
    matrix: np.ndarray      # K x D, unit rows

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.class_names):
            raise ValueError("head rows do not match the class list")


def build_zero_shot_head(params, class_names=None, templates=ZERO_SHOT_TEMPLATES):
    """Per class: embed every filled template, average, re-normalize."""
    if not templates:
        raise ValueError("need at least one template")
    class_names = [data.class_name(k) for k in range(data.NUM_CLASSES)] if class_names is None else list(class_names)
    rows = []
    with no_grad():
        for name in class_names:
            toks = data.pad_tokens([data.tokenize(t.format(name)) for t in templates], data.CAPTION_LEN)
            emb = models.encode_text(params, toks).data.mean(axis=0)
            rows.append(emb / np.linalg.norm(emb))
    return ZeroShotHead(class_names, tuple(templates), np.array(rows))


def classify(head, image_emb):
    """Cosine logits against the head and argmax labels (ties to the lowest index)."""
    emb = image_emb.data if isinstance(image_emb, Tensor) else np.asarray(image_emb, dtype=np.float64)
    if emb.shape[-1] != head.matrix.shape[1]:
        raise ValueError(f"embedding dim {emb.shape[-1]} != head dim {head.matrix.shape[1]}")
    logits = emb @ head.matrix.T
    return logits.argmax(axis=1), logits


def zero_shot_logits(params, head, images):
    """Differentiable temperature-scaled cosine logits B x K."""
    emb = models.encode_image(params, images)
    cos = matmul(emb, Tensor._wrap(head.matrix.T))
    return scalar_mul(cos, params.inv_temperature())


def predict(params, head, images, batch_size=128):
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(classify(head, models.encode_image(params, images[i:i + batch_size]))[0])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def subset_rows(n, count, seed):
    """Seeded sorted random subset of ``range(n)``; all rows when ``count`` is None."""
    if count is None or count >= n:
        if count is not None and count > n:
            raise ValueError(f"requested {count} samples from a dataset of {n}")
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 31]).choice(n, size=count, replace=False))


@dataclass
class EvalReport:
    model: str = ""
    seed: int = 0
    rows: list = field(default_factory=list)       # headline numbers, CSV contract
    details: dict = field(default_factory=dict)
    sample_count: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add(self, metric, value, attack="none", epsilon=0.0, steps=0):
        value = float(value)
        self.rows.append({"metric": metric, "attack": attack, "epsilon": float(epsilon),
                          "steps": int(steps), "value": value, "seed": int(self.seed)})

    def get(self, metric, attack=None, epsilon=None):
        for r in self.rows:
            if r["metric"] == metric and (attack is None or r["attack"] == attack) and (
                    epsilon is None or abs(r["epsilon"] - epsilon) < 1e-12):
                return r["value"]
        raise KeyError((metric, attack, epsilon))

    def merge(self, other):
        self.rows.extend(other.rows)
        self.details.update(other.details)
        self.sample_count.update(other.sample_count)
        self.wall_clock += other.wall_clock
        return self

    def to_json(self):
        return json.dumps({"model": self.model, "seed": self.seed, "rows": self.rows,
                           "details": self.details, "sample_count": self.sample_count,
                           "wall_clock": self.wall_clock}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["model"], d["seed"], d["rows"], d["details"], d["sample_count"], d["wall_clock"])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "epsilon": repr(r["epsilon"]), "value": repr(r["value"])})
        return buf.getvalue()


def _eps_tag(eps):
    return f"{eps * 255:g}/255"


# -- zero-shot robustness -------------------------------------------------------------------
def zero_shot_stages(params, head, labels, eps, steps, kinds=("ce", "dlr")):
    """Pipeline stages over the zero-shot logits; ``labels`` align with the pipeline batch.

    ``kinds`` entries: "fgsm", or an APGD loss "ce" / "dlr".
    """
    budget = attacks.PerturbationBudget(eps=eps, steps=steps, init="zero", track_best=True)
    frozen_params = list(params.tensors.values())

    def logits_fn(xt):
        return zero_shot_logits(params, head, xt)

    def make(kind):
        def stage(x, rows):
            if kind == "fgsm":
                oracle = attacks.classifier_objective("ce", logits_fn, labels[rows], params=frozen_params)
                return attacks.fgsm(oracle, x, eps)
            oracle = attacks.classifier_objective(kind, logits_fn, labels[rows], params=frozen_params)
            return attacks.apgd(oracle, x, budget)
        return stage

    return [make(k) for k in kinds]


def eval_robust_accuracy(params, head, dataset, eps, steps=20, count=None, seed=0,
                         kinds=("ce", "dlr"), batch_size=64):
    """Clean and robust zero-shot accuracy under the attack pipeline ``kinds``.

    A sample is robust iff it is classified correctly and no stage flips it.
    """
    t0 = time.perf_counter()
    rows = subset_rows(len(dataset), count, seed)
    images = dataset.images[rows]
    labels = dataset.labels[rows]
    correct = predict(params, head, images) == labels
    robust = correct.copy()
    broken_by = np.full(len(rows), -1, dtype=np.int64)
    for lo in range(0, len(rows), batch_size):
        sl = slice(lo, lo + batch_size)
        lab = labels[sl]
        stages = zero_shot_stages(params, head, lab, eps, steps, kinds)

        def success(x_adv, idx, lab=lab):
            return predict(params, head, x_adv) != lab[idx]

        res = attacks.composite_pipeline(images[sl], stages, success, active=correct[sl])
        robust[sl] &= ~res.broken
        broken_by[sl] = res.breaking_stage
    per_class = {}
    for k in range(data.NUM_CLASSES):
        m = labels == k
        if m.any():
            per_class[data.class_name(k)] = float(robust[m].mean())
    tag = "+".join(k if k == "fgsm" else f"apgd-{k}" for k in kinds)
    report = EvalReport(seed=seed)
    report.add("clean_accuracy", correct.mean())
    report.add("robust_accuracy", robust.mean(), attack=tag, epsilon=eps, steps=steps)
    report.details[f"zero_shot/{tag}/{_eps_tag(eps)}"] = {
        "per_class_robust": per_class,
        "broken_by_stage": np.bincount(broken_by + 1, minlength=len(kinds) + 1).tolist(),
        "rows": rows.tolist()}
    report.sample_count["zero_shot"] = int(len(rows))
    report.wall_clock = time.perf_counter() - t0
    return report


# -- captioner robustness -------------------------------------------------------------------
def token_accuracy(output, reference):
    """Fraction of reference positions (answer tokens then EOS) the output reproduces."""
    ref = list(reference) + [data.EOS]
    out = list(output) + [data.EOS]
    hits = sum(1 for i, t in enumerate(ref) if i < len(out) and out[i] == t)
    return hits / len(ref)


def _answers(dataset, rows, instruction):
    specs = dataset.specs()
    return [data.tokenize(data.answer_text(specs[r], instruction), eos=False) for r in rows]


def eval_caption_robustness(cap, vision, dataset, eps, steps=20, count=None, seed=0,
                            instruction=DEFAULT_INSTRUCTION, batch_size=32):
    """Greedy-decode token accuracy, clean and under untargeted APGD on the instruction loss."""
    t0 = time.perf_counter()
    rows = subset_rows(len(dataset), count, seed)
    ins = data.tokenize(instruction, eos=False)
    answers = _answers(dataset, rows, instruction)
    budget = attacks.PerturbationBudget(eps=eps, steps=steps, init="zero", track_best=True)
    clean_acc, adv_acc = [], []
    for lo in range(0, len(rows), batch_size):
        imgs = dataset.images[rows[lo:lo + batch_size]]
        refs = answers[lo:lo + batch_size]
        samples = [models.InstructionSample(im, ins, a) for im, a in zip(imgs, refs)]
        clean_out = models.generate_batch(cap, vision, imgs, ins)
        oracle = attacks.instruction_objective(cap, vision, samples)
        res = attacks.apgd(oracle, imgs, budget) if steps >= 2 else attacks.pgd(oracle, imgs, budget)
        adv_out = models.generate_batch(cap, vision, imgs + res.delta, ins)
        clean_acc += [token_accuracy(o, a) for o, a in zip(clean_out, refs)]
        adv_acc += [token_accuracy(o, a) for o, a in zip(adv_out, refs)]
    report = EvalReport(seed=seed)
    report.add("caption_token_accuracy", np.mean(clean_acc))
    report.add("caption_token_accuracy", np.mean(adv_acc), attack="apgd-nll", epsilon=eps, steps=steps)
    report.add("caption_degradation", np.mean(clean_acc) - np.mean(adv_acc), attack="apgd-nll",
               epsilon=eps, steps=steps)
    report.sample_count["caption"] = int(len(rows))
    report.wall_clock = time.perf_counter() - t0
    return report


def eval_targeted_asr(cap, vision, dataset, targets=DEFAULT_TARGETS, eps=16 / 255, steps=60,
                      per_target=10, seed=0, instruction=DEFAULT_INSTRUCTION):
    """Per target: targeted APGD on ``per_target`` seeded samples; ASR and answer token accuracy.

    Samples whose reference answer already contains the target are never
    drawn for it, so a success always means the output was steered.
    """
    t0 = time.perf_counter()
    tokenized = [data.tokenize(t, eos=False) for t in targets]
    ins = data.tokenize(instruction, eos=False)
    budget = attacks.PerturbationBudget(eps=eps, steps=steps, init="zero", track_best=True)
    report = EvalReport(seed=seed)
    all_refs = _answers(dataset, np.arange(len(dataset)), instruction)
    asr, helpful = [], []
    per = {}
    for ti, (text, tgt) in enumerate(zip(targets, tokenized)):
        eligible = np.array([r for r, a in enumerate(all_refs) if not attacks.contains_subsequence(a, tgt)],
                            dtype=np.int64)
        rows = eligible[subset_rows(len(eligible), per_target, seed * 1009 + ti)]
        imgs = dataset.images[rows]
        res = attacks.targeted_caption_attack(cap, vision, imgs, ins, tgt, budget)
        refs = [all_refs[r] for r in rows]
        acc = float(np.mean([token_accuracy(o, a) for o, a in zip(res.extra["outputs"], refs)]))
        rate = float(res.success.mean())
        asr.append(rate)
        helpful.append(acc)
        per[text] = {"asr": rate, "token_accuracy": acc, "rows": rows.tolist(),
                     "outputs": [data.detokenize(o) for o in res.extra["outputs"]]}
        report.add(f"asr[{text}]", rate, attack="apgd-targeted", epsilon=eps, steps=steps)
    report.add("asr_mean", np.mean(asr), attack="apgd-targeted", epsilon=eps, steps=steps)
    report.add("targeted_token_accuracy", np.mean(helpful), attack="apgd-targeted", epsilon=eps, steps=steps)
    report.details[f"targeted/{_eps_tag(eps)}"] = per
    report.sample_count["targeted"] = int(per_target * len(targets))
    report.wall_clock = time.perf_counter() - t0
    return report

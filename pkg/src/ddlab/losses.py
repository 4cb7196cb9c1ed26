"""Scalar training and attack objectives.

Every loss returns a :class:`LossValue`: a differentiable scalar mean, the
per-sample values it averages (attacks ascend on their sum) and detached
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, models
from .autodiff import Tensor, as_tensor, div, log_softmax, matmul, scalar_mul, sub


@dataclass
class LossValue:
    value: Tensor
    per_sample: Tensor = None
    diagnostics: dict = field(default_factory=dict)

    def __float__(self):
        return self.value.item()


def _rows_unit(name, emb, tol=1e-6):
    norms = np.sqrt((emb.data * emb.data).sum(axis=1))
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError(f"{name} rows are not unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


def contrastive_loss(img_emb, txt_emb, tau=None, scale=None):
    """Symmetric image->text / text->image cross-entropy over cosine logits.

    Pass either the temperature ``tau`` (float) or a differentiable
    ``scale`` = 1/tau tensor. Matched pairs share a batch index.
    """
    img_emb, txt_emb = as_tensor(img_emb), as_tensor(txt_emb)
    _rows_unit("image embedding", img_emb)
    _rows_unit("text embedding", txt_emb)
    if img_emb.shape != txt_emb.shape:
        raise ValueError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    if (tau is None) == (scale is None):
        raise ValueError("give exactly one of tau or scale")
    b = img_emb.shape[0]
    cos = img_emb @ txt_emb.transpose(1, 0)
    logits = cos * scale if scale is not None else scalar_mul(cos, 1.0 / tau)
    diag = (np.arange(b), np.arange(b))
    i2t = -log_softmax(logits, axis=1)[diag]
    t2i = -log_softmax(logits, axis=0)[diag]
    per_pair = scalar_mul(i2t + t2i, 0.5)
    value = per_pair.mean()
    sims = cos.data
    diagnostics = {
        "i2t": float(i2t.data.mean()),
        "t2i": float(t2i.data.mean()),
        "match_acc": float((sims.argmax(axis=1) == np.arange(b)).mean()),
    }
    return LossValue(value, per_pair, diagnostics)


def sequence_nll(logits, ids, mask):
    """Per-sample mean NLL of ``ids`` at positions where ``mask`` is set.

    ``logits[b, t]`` is the distribution for ``ids[b, t]``.
    """
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("sample with zero target tokens")
    logp = log_softmax(logits, axis=-1)
    bi, ti = np.nonzero(mask)
    picked = logp[bi, ti, ids[bi, ti]]
    weights = np.zeros((mask.shape[0], bi.size))
    weights[bi, np.arange(bi.size)] = 1.0 / counts[bi]
    per = -matmul(Tensor._wrap(weights), picked.reshape(bi.size, 1)).reshape(mask.shape[0])
    return per, counts


def instruction_loss(cap, vision, samples, images=None):
    """Mean answer-token NLL (answer tokens and the closing EOS); prefix and instruction excluded.

    ``images`` may be given as a Tensor to differentiate with respect to pixels;
    it then overrides the samples' stored images.
    """
    if isinstance(samples, models.InstructionSample):
        samples = [samples]
    ids, mask, stored = models.batch_sequences(samples)
    logits = models.caption_logits(cap, vision, stored if images is None else images, ids)
    per, counts = sequence_nll(logits, ids, mask)
    return LossValue(per.mean(), per, {"tokens": int(counts.sum()), "nll_sum": float(
        (per.data * counts).sum())})


def caption_samples(images, captions):
    samples = []
    for img, cap in zip(np.asarray(images), np.asarray(captions)):
        words = cap[:np.flatnonzero(cap == data.EOS)[0]] if (cap == data.EOS).any() else cap
        if words.size == 0:
            raise ValueError("empty caption")
        samples.append(models.InstructionSample(img, np.zeros(0, dtype=np.int64), words))
    return samples


def captioning_loss(cap, vision, images, captions):
    """Autoregressive caption NLL: the instruction loss with an empty instruction."""
    img_arr = images.data if isinstance(images, Tensor) else images
    samples = caption_samples(img_arr, captions)
    return instruction_loss(cap, vision, samples, images=images if isinstance(images, Tensor) else None)


def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if k < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    per = -log_softmax(logits, axis=1)[np.arange(b), labels]
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return LossValue(per.mean(), per, {"accuracy": acc})


def dlr_loss(logits, labels, target=None):
    """Difference-of-logits-ratio loss, untargeted or targeted.

    untargeted: -(z_y - max_{i != y} z_i) / (z_pi1 - z_pi3)
    targeted:   -(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)
    with pi the descending order of z.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    need = 4 if target is not None else 3
    if k < need:
        raise ValueError(f"dlr_loss needs at least {need} classes, got {k}")
    z = logits.data
    order = np.argsort(-z, axis=1, kind="stable")
    rows = np.arange(b)
    zy = logits[rows, labels]
    top1 = logits[rows, order[:, 0]]
    if target is None:
        other = np.where(order[:, 0] == labels, order[:, 1], order[:, 0])
        num = sub(zy, logits[rows, other])
        den = sub(top1, logits[rows, order[:, 2]])
    else:
        target = np.broadcast_to(np.asarray(target, dtype=np.int64), (b,))
        num = sub(zy, logits[rows, target])
        den = sub(top1, scalar_mul(logits[rows, order[:, 2]] + logits[rows, order[:, 3]], 0.5))
    if (den.data == 0).any():
        raise ValueError("dlr_loss: degenerate logits (zero denominator)")
    per = -div(num, den)
    return LossValue(per.mean(), per, {})

"""Toy dual encoder (mini-CLIP) and image-prefix captioner (mini-LLaVA).

Both are small pre-LayerNorm transformers built from the autodiff
primitives. Parameters live in flat ordered name -> Tensor maps so they can
be checkpointed with DDF1 and checksummed for freeze checks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import data
from .autodiff import (
    Tensor,
    clamp,
    concat,
    embedding,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    mul,
    no_grad,
    softmax,
    swap_last,
)

MASK_VALUE = -1e9
MAX_SEQ_LEN = 64
MAX_NEW_TOKENS = 32
MAX_INV_TEMPERATURE = 100.0
INIT_INV_TEMPERATURE = 1.0 / 0.07


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    grid: int = 4
    width: int = 64
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4
    embed_dim: int = 32
    vocab_size: int = data.VOCAB_SIZE
    text_len: int = data.CAPTION_LEN
    max_seq_len: int = MAX_SEQ_LEN

    @property
    def patch(self):
        return self.resolution // self.grid

    @property
    def num_patches(self):
        return self.grid * self.grid

    def with_resolution(self, resolution):
        return ModelConfig(**{**asdict(self), "resolution": resolution})


def xavier(rng, shape, fan_in=None, fan_out=None):
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, shape)


class Params:
    """Ordered name -> Tensor map with checksums and array export."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self, prefix=""):
        return [n for n in self.tensors if n.startswith(prefix)]

    def group(self, prefix=""):
        return [t for n, t in self.tensors.items() if n.startswith(prefix)]

    def trainable(self, prefix=""):
        return [t for t in self.group(prefix) if t.requires_grad]

    def set_frozen(self, prefix, frozen=True):
        for t in self.group(prefix):
            t.requires_grad = not frozen

    def frozen_names(self):
        return [n for n, t in self.tensors.items() if not t.requires_grad]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def checksum(self, prefix=""):
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def arrays(self):
        return {n: t.data for n, t in self.tensors.items()}

    def load_arrays(self, arrays):
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for n, t in self.tensors.items():
            if arrays[n].shape != t.data.shape:
                raise ValueError(f"{n}: checkpoint shape {arrays[n].shape} != {t.data.shape}")
            t.data = np.array(arrays[n], dtype=np.float64)

    def copy(self):
        out = type(self).__new__(type(self))
        Params.__init__(out, self.config, {
            n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in self.tensors.items()})
        return out


# -- shared building blocks -----------------------------------------------------
def _linear(rng, p, name, fan_in, fan_out, bias=True):
    p[f"{name}.w"] = Tensor(xavier(rng, (fan_in, fan_out)), requires_grad=True)
    if bias:
        p[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _ln_params(p, name, width):
    p[f"{name}.g"] = Tensor(np.ones(width), requires_grad=True)
    p[f"{name}.b"] = Tensor(np.zeros(width), requires_grad=True)


def _block_params(rng, p, name, width, mlp):
    _ln_params(p, f"{name}.ln1", width)
    for proj in ("q", "k", "v", "o"):
        _linear(rng, p, f"{name}.{proj}", width, width)
    _ln_params(p, f"{name}.ln2", width)
    _linear(rng, p, f"{name}.fc1", width, mlp)
    _linear(rng, p, f"{name}.fc2", mlp, width)


def linear(params, name, x):
    y = x @ params[f"{name}.w"]
    b = f"{name}.b"
    return y + params[b] if b in params else y


def ln(params, name, x):
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def attention(params, name, x, heads, mask):
    """Multi-head self-attention; ``mask`` is an additive array broadcastable to B x H x T x T."""
    b, t, w = x.shape
    dh = w // heads

    def split(z):
        return z.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(params, f"{name}.q", x))
    k = split(linear(params, f"{name}.k", x))
    v = split(linear(params, f"{name}.v", x))
    scores = (q @ swap_last(k)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    att = softmax(scores, axis=-1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, w)
    return linear(params, f"{name}.o", o)


def block(params, name, x, heads, mask):
    x = x + attention(params, f"{name}", ln(params, f"{name}.ln1", x), heads, mask)
    h = gelu(linear(params, f"{name}.fc1", ln(params, f"{name}.ln2", x)))
    return x + linear(params, f"{name}.fc2", h)


# -- dual encoder ------------------------------------------------------------------
class DualEncoderParams(Params):
    """Vision tower ``vision.*``, text tower ``text.*`` and ``logit_scale`` (log of 1/tau)."""

    @property
    def logit_scale(self):
        return self["logit_scale"]

    def inv_temperature(self):
        return min(math.exp(self.logit_scale.data.item()), MAX_INV_TEMPERATURE)

    def clamp_temperature(self):
        cap = math.log(MAX_INV_TEMPERATURE)
        if self.logit_scale.data.item() > cap:
            self.logit_scale.data[...] = cap


def _patch_embedding(rng, config):
    fan_in = 3 * config.patch * config.patch
    return xavier(rng, (fan_in, config.width))


def init_dual_encoder(config, seed):
    rng = np.random.default_rng([seed, 1])
    p = {}
    mlp = config.width * config.mlp_ratio
    p["vision.patch.w"] = Tensor(_patch_embedding(rng, config), requires_grad=True)
    p["vision.patch.b"] = Tensor(np.zeros(config.width), requires_grad=True)
    p["vision.pos"] = Tensor(xavier(rng, (config.num_patches, config.width)), requires_grad=True)
    for i in range(config.blocks):
        _block_params(rng, p, f"vision.block{i}", config.width, mlp)
    _ln_params(p, "vision.ln_f", config.width)
    _linear(rng, p, "vision.proj", config.width, config.embed_dim, bias=False)

    p["text.tok"] = Tensor(xavier(rng, (config.vocab_size, config.width)), requires_grad=True)
    p["text.pos"] = Tensor(xavier(rng, (config.text_len, config.width)), requires_grad=True)
    for i in range(config.blocks):
        _block_params(rng, p, f"text.block{i}", config.width, mlp)
    _ln_params(p, "text.ln_f", config.width)
    _linear(rng, p, "text.proj", config.width, config.embed_dim, bias=False)
    p["logit_scale"] = Tensor(np.array(math.log(INIT_INV_TEMPERATURE)), requires_grad=True)
    return DualEncoderParams(config, p)


PATCH_MODES = ("random", "resample")


def reinit_patch_embedding(params, resolution, seed, mode="resample"):
    """Adapt the patch embedding to a new resolution (grid stays fixed).

    ``mode="random"`` draws a fresh embedding; ``mode="resample"`` spreads
    each old weight over the block of new pixels it covers, so a
    nearest-upsampled image yields the same patch tokens.
    """
    old = params.config
    new = old.with_resolution(resolution)
    if resolution % new.grid:
        raise ValueError(f"resolution {resolution} not divisible by grid {new.grid}")
    w_old = params["vision.patch.w"].data
    if mode == "random" or resolution % old.resolution:
        w_new = _patch_embedding(np.random.default_rng([seed, 2, resolution]), new)
    elif mode == "resample":
        f = resolution // old.resolution
        w = w_old.reshape(3, old.patch, old.patch, old.width)
        w = np.repeat(np.repeat(w, f, axis=1), f, axis=2) / (f * f)
        w_new = w.reshape(-1, old.width)
    else:
        raise ValueError(f"unknown patch re-init mode {mode!r}")
    params["vision.patch.w"].data = np.ascontiguousarray(w_new)
    params.config = new
    return params


def _as_image_tensor(images):
    return images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))


def patchify(x, config):
    b, c, r, r2 = x.shape
    if c != 3 or r != config.resolution or r2 != r:
        raise ValueError(f"images of shape {x.shape} do not match resolution {config.resolution}")
    g, p = config.grid, config.patch
    return x.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, 3 * p * p)


def vision_features(params, images):
    """Patch features B x (grid*grid) x width after the final LayerNorm."""
    cfg = params.config
    x = patchify(_as_image_tensor(images), cfg)
    x = linear(params, "vision.patch", x) + params["vision.pos"]
    for i in range(cfg.blocks):
        x = block(params, f"vision.block{i}", x, cfg.heads, None)
    return ln(params, "vision.ln_f", x)


def embed_features(params, feats):
    return l2_normalize(linear(params, "vision.proj", feats.mean(axis=1)), axis=-1)


def encode_image(params, images):
    """B x embed_dim unit-norm image embeddings."""
    return embed_features(params, vision_features(params, images))


def encode_text(params, tokens):
    """B x embed_dim unit-norm text embeddings; PAD is masked from attention and pooling."""
    cfg = params.config
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, t = tokens.shape
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary")
    if t > cfg.text_len:
        raise ValueError(f"text length {t} exceeds {cfg.text_len}")
    keep = tokens != data.PAD
    if not keep.any(axis=1).all():
        raise ValueError("text with no non-PAD tokens")
    x = embedding(params["text.tok"], tokens) + params["text.pos"][:t]
    mask = np.where(keep, 0.0, MASK_VALUE)[:, None, None, :]
    for i in range(cfg.blocks):
        x = block(params, f"text.block{i}", x, cfg.heads, mask)
    x = ln(params, "text.ln_f", x)
    weights = (keep / keep.sum(axis=1, keepdims=True))[:, :, None]
    pooled = mul(x, Tensor._wrap(weights)).sum(axis=1)
    return l2_normalize(linear(params, "text.proj", pooled), axis=-1)


def similarity_scale(params):
    """1/tau as a differentiable scalar, clamped at MAX_INV_TEMPERATURE."""
    return exp(clamp(params.logit_scale, hi=math.log(MAX_INV_TEMPERATURE)))


# -- captioner -------------------------------------------------------------------------
class CaptionerParams(Params):
    """Prefix projector ``proj.*`` and causal decoder ``dec.*``."""


def init_captioner(config, seed):
    rng = np.random.default_rng([seed, 3])
    p = {}
    w = config.width
    _linear(rng, p, "proj.fc1", w, w)
    _linear(rng, p, "proj.fc2", w, w)
    p["dec.tok"] = Tensor(xavier(rng, (config.vocab_size, w)), requires_grad=True)
    p["dec.pos"] = Tensor(xavier(rng, (config.max_seq_len, w)), requires_grad=True)
    for i in range(config.blocks):
        _block_params(rng, p, f"dec.block{i}", w, w * config.mlp_ratio)
    _ln_params(p, "dec.ln_f", w)
    _linear(rng, p, "dec.head", w, config.vocab_size)
    return CaptionerParams(config, p)


@dataclass
class InstructionSample:
    image: np.ndarray          # 3 x R x R
    instruction: np.ndarray    # L instruction ids, no specials
    answer: np.ndarray         # L' answer ids, no specials

    def __post_init__(self):
        self.instruction = np.asarray(self.instruction, dtype=np.int64)
        self.answer = np.asarray(self.answer, dtype=np.int64)
        if self.answer.size < 1:
            raise ValueError("an instruction sample needs at least one answer token")

    def answer_mask(self):
        """Boolean mask over the text sequence marking answer targets (answer ids then EOS)."""
        n = 1 + self.instruction.size + 1
        mask = np.zeros(n + self.answer.size + 1, dtype=bool)
        mask[n:] = True
        return mask


def text_sequence(instruction, answer=None):
    """[BOS] instruction [SEP] (answer [EOS])."""
    parts = [[data.BOS], list(instruction), [data.SEP]]
    if answer is not None:
        parts += [list(answer), [data.EOS]]
    return np.array([t for part in parts for t in part], dtype=np.int64)


def batch_sequences(samples):
    """Padded text ids, target mask and images for a list of samples."""
    seqs = [text_sequence(s.instruction, s.answer) for s in samples]
    ids = data.pad_tokens(seqs)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(samples):
        m = s.answer_mask()
        mask[i, :m.size] = m
    images = np.stack([s.image for s in samples])
    return ids, mask, images


def image_prefix(cap, vision, images):
    feats = vision_features(vision, images)
    return linear(cap, "proj.fc2", gelu(linear(cap, "proj.fc1", feats)))


def decoder_logits(cap, prefix, text_ids):
    """Logits predicting text token t from prefix + text[:t], for t = 0..len(text_ids).

    Returns B x (S + 1) x V where S = text_ids.shape[1].
    """
    cfg = cap.config
    text_ids = np.atleast_2d(np.asarray(text_ids, dtype=np.int64))
    b, s = text_ids.shape
    p = prefix.shape[1]
    total = p + s
    if total > cfg.max_seq_len:
        raise ValueError(f"sequence length {total} exceeds maximum {cfg.max_seq_len}")
    if s:
        x = concat([prefix, embedding(cap["dec.tok"], text_ids)], axis=1)
    else:
        x = prefix
    x = x + cap["dec.pos"][:total]
    allowed = np.zeros((total, total), dtype=bool)
    allowed[:, :p] = True
    allowed[p:, p:] = np.tril(np.ones((s, s), dtype=bool))
    allowed[:p, p:] = False
    mask = np.where(allowed, 0.0, MASK_VALUE)
    for i in range(cfg.blocks):
        x = block(cap, f"dec.block{i}", x, cfg.heads, mask)
    x = ln(cap, "dec.ln_f", x[:, p - 1:])
    return linear(cap, "dec.head", x)


def caption_logits(cap, vision, images, text_ids):
    """B x S x V logits; entry t predicts text token t from the prefix and text tokens < t."""
    text_ids = np.atleast_2d(np.asarray(text_ids, dtype=np.int64))
    prefix = image_prefix(cap, vision, images)
    return decoder_logits(cap, prefix, text_ids[:, :-1])


def sample_logits(cap, vision, sample):
    ids = text_sequence(sample.instruction, sample.answer)[None]
    return caption_logits(cap, vision, sample.image[None], ids)


def generate_batch(cap, vision, images, instruction, max_new=MAX_NEW_TOKENS):
    """Greedy decode for a batch of images sharing one instruction.

    Ties go to the lowest token id. Returns a list of answer id arrays
    (EOS excluded).
    """
    if max_new > MAX_NEW_TOKENS:
        raise ValueError(f"max_new {max_new} exceeds {MAX_NEW_TOKENS}")
    images = np.asarray(images, dtype=np.float64)
    prompt = text_sequence(instruction)
    with no_grad():
        prefix = image_prefix(cap, vision, images)
        b = images.shape[0]
        ids = np.tile(prompt, (b, 1))
        done = np.zeros(b, dtype=bool)
        out = [[] for _ in range(b)]
        for _ in range(max_new):
            logits = decoder_logits(cap, prefix, ids).data[:, -1]
            nxt = logits.argmax(axis=1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == data.EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return [np.array(o, dtype=np.int64) for o in out]


def generate(cap, vision, image, instruction, max_new=MAX_NEW_TOKENS):
    return generate_batch(cap, vision, np.asarray(image)[None], instruction, max_new)[0]

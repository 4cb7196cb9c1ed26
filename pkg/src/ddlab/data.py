"""Procedural shape scenes, captions, tokenizer and the DDS1 dataset format.

Scene ``i`` of a dataset is fully determined by ``(seed, i)``: its class is
``i % 16`` and the remaining attributes come from a generator seeded with
both, so a dataset of N scenes is a prefix of any larger one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .binio import LayoutMismatchError, Reader, le_bytes, pack

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
RESOLUTIONS = (16, 32, 48)
NUM_CLASSES = len(SHAPES) * len(COLORS)
NOISE_SIGMA = 0.02
BACKGROUND = 0.5
CAPTION_LEN = 16
SUPERSAMPLE = 4

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.15),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.92, 0.85, 0.1),
}
CENTERS = {
    "top-left": (0.25, 0.25),
    "top-right": (0.75, 0.25),
    "bottom-left": (0.25, 0.75),
    "bottom-right": (0.75, 0.75),
    "center": (0.5, 0.5),
}

TEMPLATES = (
    "a {color} {shape} in the {position}",
    "a photo of a {color} {shape}",
    "an image of a {color} {shape} at the {position}",
    "there is a {color} {shape} in the {position}",
)

# instruction -> which attribute the answer states
INSTRUCTIONS = {
    "describe the image": "caption",
    "what color is the shape": "color",
    "what shape is it": "shape",
    "where is the shape": "position",
}

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")

# Scene words, instruction words, prompt words, then an attacker lexicon
# that never occurs in training answers.
_WORDS = (
    "a an the of photo image in at there is it what where describe shape color "
    "red green blue yellow circle square triangle cross top bottom left right center "
    "visit our website now please reset your password you are too stupid sell "
    "stocks vaccines dangerous will not answer anymore click here free prize win "
    "money send me to and email"
).split()
VOCAB = SPECIALS + tuple(_WORDS)
VOCAB_SIZE = len(VOCAB)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


class TokenizeError(KeyError):
    pass


class VocabMismatchError(LayoutMismatchError):
    pass


def vocab_hash():
    return hashlib.sha256("\n".join(VOCAB).encode("utf-8")).digest()[:8]


def tokenize(text, eos=True):
    ids = []
    for w in text.split():
        try:
            ids.append(WORD_TO_ID[w])
        except KeyError:
            raise TokenizeError(f"word {w!r} not in vocabulary") from None
        if ids[-1] < len(SPECIALS):
            raise TokenizeError(f"special token {w!r} in text")
    if eos:
        ids.append(EOS)
    return np.array(ids, dtype=np.int64)


def detokenize(ids):
    words = []
    for i in np.asarray(ids).tolist():
        if i == EOS:
            break
        if i in (PAD, BOS, SEP):
            continue
        words.append(VOCAB[i])
    return " ".join(words)


def pad_tokens(seqs, length=None):
    """Right-pad id sequences with PAD into an int64 matrix."""
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise ValueError(f"sequence of length {len(s)} exceeds {length}")
        out[i, :len(s)] = s
    return out


def check_token_seq(ids):
    ids = np.asarray(ids)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= VOCAB_SIZE:
        raise ValueError("token ids out of vocabulary bounds")
    eos = np.flatnonzero(ids == EOS)
    if eos.size != 1:
        raise ValueError(f"expected exactly one EOS, found {eos.size}")
    pads = np.flatnonzero(ids == PAD)
    if pads.size and pads.min() < eos[0]:
        raise ValueError("PAD before EOS")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    position: str
    size: float
    noise_seed: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.position not in POSITIONS:
            raise ValueError(f"invalid scene attributes {self}")
        if not 0.2 <= self.size <= 0.5:
            raise ValueError(f"size fraction {self.size} outside [0.2, 0.5]")

    @property
    def label(self):
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)


def class_name(label):
    return f"{COLORS[label % len(COLORS)]} {SHAPES[label // len(COLORS)]}"


def _coverage(shape, cx, cy, size, res):
    n = res * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(c, c)  # u: column (x), v: row (y)
    du, dv = u - cx, v - cy
    s = size / 2.0
    if shape == "circle":
        mask = du * du + dv * dv <= s * s
    elif shape == "square":
        mask = (np.abs(du) <= 0.85 * s) & (np.abs(dv) <= 0.85 * s)
    elif shape == "triangle":
        mask = (dv >= -s) & (dv <= s) & (np.abs(du) <= (dv + s) / 2.0)
    else:
        arm = 0.3 * s
        mask = ((np.abs(du) <= arm) & (np.abs(dv) <= s)) | ((np.abs(dv) <= arm) & (np.abs(du) <= s))
    return mask.reshape(res, SUPERSAMPLE, res, SUPERSAMPLE).mean(axis=(1, 3))


def render_scene(spec, resolution):
    """3 x R x R image in [0, 1]: gray background, shape, seeded pixel noise."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; expected one of {RESOLUTIONS}")
    cx, cy = CENTERS[spec.position]
    cov = _coverage(spec.shape, cx, cy, spec.size, resolution)
    rgb = np.array(RGB[spec.color])[:, None, None]
    img = BACKGROUND * (1.0 - cov) + rgb * cov
    noise = np.random.default_rng(spec.noise_seed).normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def position_words(position):
    return position.replace("-", " ")


def template_index(spec):
    digest = hashlib.blake2b(f"template:{spec.noise_seed}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % len(TEMPLATES)


def caption_text(spec, template=None):
    # template depends on the noise seed only, so attribute changes only
    # change attribute tokens
    t = template_index(spec) if template is None else template
    # str.format ignores unused keywords, so position-free templates just drop it
    return TEMPLATES[t].format(color=spec.color, shape=spec.shape,
                               position=position_words(spec.position))


def caption_of(spec, template=None):
    return tokenize(caption_text(spec, template))


def answer_text(spec, instruction):
    kind = INSTRUCTIONS[instruction]
    if kind == "caption":
        return caption_text(spec, template=0)
    if kind == "position":
        return position_words(spec.position)
    return getattr(spec, kind)


def scene_spec(seed, index):
    label = index % NUM_CLASSES
    rng = np.random.default_rng([seed, index])
    return SceneSpec(
        shape=SHAPES[label // len(COLORS)],
        color=COLORS[label % len(COLORS)],
        position=POSITIONS[int(rng.integers(len(POSITIONS)))],
        size=float(rng.uniform(0.2, 0.5)),
        noise_seed=int(rng.integers(2**31)),
    )


def is_val_index(index):
    """Every tenth round of 16 consecutive scenes is held out."""
    return (index // NUM_CLASSES) % 10 == 9


SPLIT_CODES = {"all": 0, "train": 1, "val": 2}


@dataclass
class Dataset:
    images: np.ndarray        # N x 3 x R x R float64
    captions: np.ndarray      # N x CAPTION_LEN int64, PAD after EOS
    labels: np.ndarray        # N int64
    indices: np.ndarray       # N int64 scene enumeration index
    split: str = "all"
    seed: int = 0
    _specs: list = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self):
        return self.images.shape[-1]

    def specs(self):
        if self._specs is None:
            self._specs = [scene_spec(self.seed, int(i)) for i in self.indices]
        return self._specs

    def subset(self, rows, split=None):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.images[rows], self.captions[rows], self.labels[rows],
                       self.indices[rows], split or self.split, self.seed)

    def take_split(self, split):
        val = np.array([is_val_index(int(i)) for i in self.indices], dtype=bool)
        rows = np.flatnonzero(val if split == "val" else ~val)
        return self.subset(rows, split)

    def equals(self, other):
        return (self.split == other.split and self.seed == other.seed
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.captions, other.captions)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.indices, other.indices))


def make_dataset(count, resolution, seed):
    if count < NUM_CLASSES:
        raise ValueError(f"need at least {NUM_CLASSES} scenes, got {count}")
    specs = [scene_spec(seed, i) for i in range(count)]
    images = np.stack([render_scene(s, resolution) for s in specs])
    captions = pad_tokens([caption_of(s) for s in specs], CAPTION_LEN)
    labels = np.array([s.label for s in specs], dtype=np.int64)
    return Dataset(images, captions, labels, np.arange(count, dtype=np.int64), "all", seed, specs)


# -- DDS1 ------------------------------------------------------------------
#   b"DDS1"
#   u32 N, u32 C, u32 H, u32 W, u32 T (caption length), u32 vocab size
#   8 bytes vocab hash, u64 seed, u8 split code (0 all, 1 train, 2 val)
#   N*C*H*W float64 image payload
#   N*T u16 token payload
#   N u8 label payload
#   N u32 scene-index payload
DDS_MAGIC = b"DDS1"


def encode_dataset(ds):
    n, c, h, w = ds.images.shape
    t = ds.captions.shape[1]
    header = DDS_MAGIC + pack("6I", n, c, h, w, t, VOCAB_SIZE) + vocab_hash() + pack(
        "QB", ds.seed, SPLIT_CODES[ds.split])
    return b"".join([
        header,
        le_bytes(ds.images, np.float64),
        le_bytes(ds.captions, np.uint16),
        le_bytes(ds.labels, np.uint8),
        le_bytes(ds.indices, np.uint32),
    ])


def decode_dataset(buf):
    r = Reader(buf)
    r.magic(DDS_MAGIC)
    n, c, h, w, t, vsize = r.unpack("6I", "header")
    vh = bytes(r.take(8, "vocab hash"))
    seed, split_code = r.unpack("QB", "header")
    if vsize != VOCAB_SIZE or vh != vocab_hash():
        raise VocabMismatchError("dataset was written with a different vocabulary")
    if split_code not in SPLIT_CODES.values():
        raise LayoutMismatchError(f"unknown split code {split_code}")
    if c != 3 or h != w:
        raise LayoutMismatchError(f"image shape {(c, h, w)} is not 3 x R x R")
    images = r.array(np.float64, n * c * h * w, "images").reshape(n, c, h, w)
    captions = r.array(np.uint16, n * t, "tokens").reshape(n, t).astype(np.int64)
    labels = r.array(np.uint8, n, "labels").astype(np.int64)
    indices = r.array(np.uint32, n, "indices").astype(np.int64)
    r.finish()
    split = {v: k for k, v in SPLIT_CODES.items()}[split_code]
    return Dataset(images, captions, labels, indices, split, seed)


def save_dataset(path, ds):
    with open(path, "wb") as f:
        f.write(encode_dataset(ds))


def load_dataset(path):
    with open(path, "rb") as f:
        return decode_dataset(f.read())

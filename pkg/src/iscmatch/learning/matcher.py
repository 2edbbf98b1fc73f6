"""A one-block, single-head vision transformer that scores concatenated pairs.

Query occupies the left half of the input and the reference the right half,
so the only path by which the two images interact is attention across the
patch tokens: the MLP and pooling act per token. Everything is batched
numpy with a hand-written backward pass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import ArgumentError, FormatError, LengthError, SizeError
from ..imaging import Image, concat_horizontal, grayscale, resize_bilinear
from ..rng import Rng64
from .losses import bce_with_logits

PARAM_NAMES = ("patch_embed", "pos", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "head_w", "head_b")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MatcherConfig:
    image_h: int = 16
    image_w: int = 32
    patch: int = 4
    d_model: int = 16
    hidden: int = 32

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ArgumentError("input size must be a multiple of the patch size")
        if self.image_w % 2:
            raise ArgumentError("input width must be even")

    @property
    def tokens(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h = self.d_model, self.hidden
        return {
            "patch_embed": (d, self.patch_dim),
            "pos": (self.tokens, d),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "w1": (h, d),
            "b1": (h,),
            "w2": (d, h),
            "b2": (d,),
            "head_w": (d,),
            "head_b": (),
        }


@dataclass
class TinyMatcherParams:
    config: MatcherConfig
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(self.blocks) != set(shapes):
            raise ArgumentError(f"parameter blocks must be exactly {PARAM_NAMES}")
        for name, shape in shapes.items():
            arr = np.asarray(self.blocks[name], dtype=np.float64)
            if arr.shape != shape:
                raise ArgumentError(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ArgumentError(f"{name}: non-finite entries")
            self.blocks[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    @classmethod
    def zeros(cls, config: MatcherConfig | None = None) -> TinyMatcherParams:
        config = config or MatcherConfig()
        return cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})

    @classmethod
    def init(cls, rng: Rng64, config: MatcherConfig | None = None, scale: float = 0.02) -> TinyMatcherParams:
        """Uniform(-scale, scale) entries, blocks filled in declaration order."""
        config = config or MatcherConfig()
        blocks = {}
        for name, shape in config.shapes().items():
            n = int(np.prod(shape, dtype=np.int64))
            blocks[name] = rng.symmetric_array(n, scale).reshape(shape)
        return cls(config, blocks)

    def copy(self) -> TinyMatcherParams:
        return TinyMatcherParams(self.config, {n: a.copy() for n, a in self.blocks.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.blocks[n]) for n in PARAM_NAMES])

    def num_params(self) -> int:
        return sum(int(np.size(self.blocks[n])) for n in PARAM_NAMES)

    def equals(self, other: TinyMatcherParams) -> bool:
        return self.config == other.config and all(np.array_equal(self[n], other[n]) for n in PARAM_NAMES)


# --- input preparation --------------------------------------------------------------


def concat_pair(query: Image, ref: Image, out_w: int = 32, out_h: int = 16) -> Image:
    """Query resized into the left half, reference into the right half."""
    if out_w < 2 or out_w % 2:
        raise ArgumentError(f"output width must be even, got {out_w}")
    if out_h < 1:
        raise ArgumentError("output height must be positive")
    half = out_w // 2
    return concat_horizontal(resize_bilinear(query, half, out_h), resize_bilinear(ref, half, out_h))


def patchify(gray: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) -> (T, patch*patch); tokens row-major over the patch grid."""
    h, w = gray.shape[-2:]
    lead = gray.shape[:-2]
    x = gray.reshape(*lead, h // patch, patch, w // patch, patch)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch)


def to_tokens(img: Image, config: MatcherConfig) -> np.ndarray:
    if (img.width, img.height) != (config.image_w, config.image_h):
        raise SizeError(f"matcher expects {config.image_w}x{config.image_h}, got {img.width}x{img.height}")
    return patchify(grayscale(img), config.patch)


# --- forward / backward -------------------------------------------------------------------


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def _forward(params: TinyMatcherParams, x: np.ndarray) -> tuple[np.ndarray, dict]:
    p = params.blocks
    scale = 1.0 / math.sqrt(params.config.d_model)
    h0 = x @ p["patch_embed"].T + p["pos"]
    q = h0 @ p["wq"].T
    k = h0 @ p["wk"].T
    v = h0 @ p["wv"].T
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    a = np.exp(s - s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    o = a @ v
    h1 = h0 + o @ p["wo"].T
    u = h1 @ p["w1"].T + p["b1"]
    g = _gelu(u)
    h2 = h1 + g @ p["w2"].T + p["b2"]
    pooled = h2.mean(axis=-2)
    logit = pooled @ p["head_w"] + p["head_b"]
    cache = dict(x=x, h0=h0, q=q, k=k, v=v, a=a, o=o, h1=h1, u=u, g=g, pooled=pooled, scale=scale)
    return logit, cache


def forward_tokens(params: TinyMatcherParams, tokens: np.ndarray) -> np.ndarray:
    """Logits for a (B, T, patch_dim) token batch."""
    return _forward(params, np.asarray(tokens, dtype=np.float64))[0]


def attention_weights(params: TinyMatcherParams, tokens: np.ndarray) -> np.ndarray:
    return _forward(params, np.asarray(tokens, dtype=np.float64))[1]["a"]


def _backward(params: TinyMatcherParams, cache: dict, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    p = params.blocks
    x, h0, q, k, v, a, o, h1, u, g = (cache[n] for n in ("x", "h0", "q", "k", "v", "a", "o", "h1", "u", "g"))
    scale = cache["scale"]
    t = x.shape[-2]
    dlogit = np.asarray(dlogit, dtype=np.float64).reshape(-1)

    grads = {"head_b": np.asarray(dlogit.sum()), "head_w": dlogit @ cache["pooled"]}
    dh2 = np.broadcast_to((dlogit[:, None] * p["head_w"])[:, None, :] / t, h1.shape)

    grads["b2"] = dh2.sum(axis=(0, 1))
    grads["w2"] = np.einsum("bti,btj->ij", dh2, g)
    du = (dh2 @ p["w2"]) * _gelu_grad(u)
    grads["b1"] = du.sum(axis=(0, 1))
    grads["w1"] = np.einsum("bti,btj->ij", du, h1)
    dh1 = dh2 + du @ p["w1"]

    grads["wo"] = np.einsum("bti,btj->ij", dh1, o)
    do = dh1 @ p["wo"]
    da = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ do
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    grads["wq"] = np.einsum("bti,btj->ij", dq, h0)
    grads["wk"] = np.einsum("bti,btj->ij", dk, h0)
    grads["wv"] = np.einsum("bti,btj->ij", dv, h0)
    dh0 = dh1 + dq @ p["wq"] + dk @ p["wk"] + dv @ p["wv"]

    grads["pos"] = dh0.sum(axis=0)
    grads["patch_embed"] = np.einsum("bti,btj->ij", dh0, x)
    return grads


def tiny_matcher_forward(params: TinyMatcherParams, img: Image) -> float:
    return float(forward_tokens(params, to_tokens(img, params.config)[None])[0])


def tiny_matcher_backward(params: TinyMatcherParams, img: Image, dloss_dlogit: float) -> dict[str, np.ndarray]:
    """Parameter gradients of ``dloss_dlogit * logit(img)``."""
    tokens = to_tokens(img, params.config)[None]
    _, cache = _forward(params, tokens)
    return _backward(params, cache, np.array([dloss_dlogit], dtype=np.float64))


def batch_loss_and_grads(
    params: TinyMatcherParams, tokens: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over a token batch and its gradients."""
    logits, cache = _forward(params, tokens)
    losses, dlogits = bce_with_logits(logits, labels)
    n = len(labels)
    return float(losses.mean()), _backward(params, cache, dlogits / n)


# --- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class PairExample:
    input: Image
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ArgumentError(f"label must be 0 or 1, got {self.label}")


def make_pair_examples(
    images: Sequence[Image], rng: Rng64, config: MatcherConfig | None = None, augment_fn=None
) -> list[PairExample]:
    """One positive (aug A | A) and one negative (aug C | A), C != A, per image A."""
    from ..imaging import augment

    config = config or MatcherConfig()
    augment_fn = augment_fn or augment
    if len(images) < 2:
        raise ArgumentError("need at least two images to sample negatives")
    examples = []
    for i, ref in enumerate(images):
        pos_query, _ = augment_fn(ref, rng)
        j = rng.randint(0, len(images) - 2)
        j = j + 1 if j >= i else j
        neg_query, _ = augment_fn(images[j], rng)
        examples.append(PairExample(concat_pair(pos_query, ref, config.image_w, config.image_h), 1))
        examples.append(PairExample(concat_pair(neg_query, ref, config.image_w, config.image_h), 0))
    return examples


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.epoch_losses[0]

    @property
    def final(self) -> float:
        return self.epoch_losses[-1]

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss"]
        lines += [f"{e},{loss!r}" for e, loss in enumerate(self.epoch_losses)]
        return "\n".join(lines) + "\n"


# At the customary 0.02 scale the attention and MLP gradients vanish and the
# loss never leaves ln 2, so the default starts larger and steps smaller.
DEFAULT_INIT_SCALE = 0.5
DEFAULT_LR = 0.1


def train_tiny_matcher(
    examples: Sequence[PairExample],
    epochs: int = 30,
    lr: float = DEFAULT_LR,
    seed: int | Rng64 = 0,
    batch_size: int = 16,
    config: MatcherConfig | None = None,
    init_scale: float = DEFAULT_INIT_SCALE,
) -> tuple[TinyMatcherParams, TrainingLog]:
    """Minibatch gradient descent on mean BCE.

    The log holds the mean loss over all examples before training (entry 0)
    and after each epoch.
    """
    if not examples:
        raise ArgumentError("no training examples")
    labels = np.array([e.label for e in examples], dtype=np.float64)
    if labels.min() == labels.max():
        raise ArgumentError("training examples must contain both labels")
    if epochs < 0 or batch_size < 1:
        raise ArgumentError("epochs must be >= 0 and batch_size >= 1")
    config = config or MatcherConfig()
    rng = seed if isinstance(seed, Rng64) else Rng64(seed)
    init_rng, order_rng = rng.spawn(), rng.spawn()
    params = TinyMatcherParams.init(init_rng, config, init_scale)
    tokens = np.stack([to_tokens(e.input, config) for e in examples])

    def full_loss() -> float:
        losses, _ = bce_with_logits(forward_tokens(params, tokens), labels)
        return float(losses.mean())

    log = TrainingLog([full_loss()])
    n = len(examples)
    for _ in range(epochs):
        order = np.array(order_rng.permutation(n))
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            _, grads = batch_loss_and_grads(params, tokens[idx], labels[idx])
            for name in PARAM_NAMES:
                params.blocks[name] = params.blocks[name] - lr * grads[name]
        log.epoch_losses.append(full_loss())
    return params, log


def predict_proba(params: TinyMatcherParams, images: Sequence[Image]) -> np.ndarray:
    from .losses import sigmoid_array

    if not images:
        return np.zeros(0)
    tokens = np.stack([to_tokens(img, params.config) for img in images])
    return sigmoid_array(forward_tokens(params, tokens))


# --- ISCM serialization ------------------------------------------------------------------

ISCM_MAGIC = b"ISCM"
ISCM_VERSION = 1


def dumps_matcher(params: TinyMatcherParams) -> bytes:
    c = params.config
    out = [ISCM_MAGIC, struct.pack("<I", ISCM_VERSION)]
    out.append(struct.pack("<5I", c.image_h, c.image_w, c.patch, c.d_model, c.hidden))
    for name in PARAM_NAMES:
        out.append(np.asarray(params[name], dtype="<f4").tobytes())
    return b"".join(out)


def loads_matcher(data: bytes) -> TinyMatcherParams:
    if len(data) < 28 or data[:4] != ISCM_MAGIC:
        raise FormatError("not an ISCM matcher file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != ISCM_VERSION:
        raise FormatError(f"unsupported ISCM version {version}")
    config = MatcherConfig(*struct.unpack_from("<5I", data, 8))
    pos = 28
    blocks = {}
    for name, shape in config.shapes().items():
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(data):
            raise LengthError("ISCM file truncated")
        blocks[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * n
    if pos != len(data):
        raise LengthError(f"{len(data) - pos} trailing bytes in ISCM file")
    return TinyMatcherParams(config, blocks)

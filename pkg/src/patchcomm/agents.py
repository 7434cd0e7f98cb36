"""Speaker and listener networks.

Speaker: a per-patch MLP emits symbol logits (context independent), and a
small CNN over the whole image scores patch importance (context dependent).
Soft ranks of the scores become Bernoulli keep-probabilities; the message is
the elementwise product of sampled symbols and the keep-mask.

Listener: a transformer encoder over the kept symbols (CLS readout, learned
grid-position embeddings) and a convolutional image encoder, each followed
by a projection head into a shared L2-normalized embedding space. Speaker
and listener share no weights.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import relax
from . import tensor as T
from .relax import GumbelConfig
from .softrank import soft_rank_rows
from .tensor import Tensor

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


@dataclass
class PatchGridSpec:
    channels: int = 3
    height: int = 64
    width: int = 64
    patch: int = 16

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"patch side {self.patch} must divide image "
                             f"{self.height}x{self.width}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch


@dataclass
class ArchConfig:
    """Network dimensions; toy defaults are CPU-trainable in minutes."""
    vocab: int = 32               # V
    symbols_per_patch: int = 1    # l
    embed_dim: int = 64           # d, shared embedding space
    speaker_hidden: int = 128
    rank_channels: int = 16
    text_layers: int = 4
    text_heads: int = 2
    vision_channels: tuple = (16, 32, 64, 64)
    vision_dim: int = 64          # pre-projection feature width
    proj_expand: int = 4


@dataclass
class Message:
    """Speaker output: masked one-hot symbols plus the keep-mask.

    symbols holds the product symb(x) * mask and carries gradient through
    both factors; keep_mask is the discrete keep decision used for
    attention masking and evaluation.
    """
    symbols: Tensor            # (B, K, l, V)
    keep_mask: np.ndarray      # (B, K) bool
    soft_mask: Tensor          # (B, K), gradient path into the scorer

    def symbol_ids(self) -> np.ndarray:
        """Hard symbol id per (sample, patch, slot)."""
        return self.symbols.data.argmax(axis=-1)

    def kept_symbol_lists(self) -> list[list[int]]:
        """Per sample, the kept symbols in grid order (with multiplicity)."""
        ids = self.symbol_ids()
        out = []
        for b in range(ids.shape[0]):
            row = []
            for k in range(ids.shape[1]):
                if self.keep_mask[b, k]:
                    row.extend(int(s) for s in ids[b, k])
            out.append(row)
        return out


# -- parameter construction ---------------------------------------------------

def _he(rng, fan_in, shape, dtype):
    return Tensor((rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_speaker(spec: PatchGridSpec, arch: ArchConfig, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, Tensor]:
    p, h = spec.patch_dim, arch.speaker_hidden
    lv = arch.symbols_per_patch * arch.vocab
    params = {
        "symb.w1": _he(rng, p, (p, h), dtype), "symb.b1": _zeros(h, dtype),
        "symb.w2": _he(rng, h, (h, h), dtype), "symb.b2": _zeros(h, dtype),
        "symb.w3": _he(rng, h, (h, lv), dtype), "symb.b3": _zeros(lv, dtype),
    }
    # stride-2 blocks down to the patch grid resolution, then a 1x1 head
    c_in = spec.channels
    n_blocks = int(np.log2(spec.patch))
    for i in range(n_blocks):
        c_out = arch.rank_channels
        params[f"rank.conv{i}.w"] = _he(rng, c_in * 9, (c_out, c_in, 3, 3), dtype)
        params[f"rank.conv{i}.b"] = _zeros(c_out, dtype)
        c_in = c_out
    params["rank.head.w"] = _he(rng, c_in, (1, c_in, 1, 1), dtype)
    params["rank.head.b"] = _zeros(1, dtype)
    return params


def init_listener(spec: PatchGridSpec, arch: ArchConfig, rng: np.random.Generator,
                  dtype=np.float32) -> dict[str, Tensor]:
    d = arch.embed_dim
    k = spec.num_patches
    params = {
        "text.embed": _he(rng, arch.vocab, (arch.vocab + 1, d), dtype),  # +1: NULL token
        "text.cls": _he(rng, d, (d,), dtype),
        "text.pos": Tensor((rng.normal(size=(k + 1, d)) * 0.02).astype(dtype),
                           requires_grad=True),  # row 0 = CLS position
        "text.slot": Tensor((rng.normal(size=(arch.symbols_per_patch, d)) * 0.02).astype(dtype),
                            requires_grad=True),
    }
    for i in range(arch.text_layers):
        pre = f"text.layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + name] = _he(rng, d, (d, d), dtype)
        params[pre + "ln1.g"] = _ones(d, dtype)
        params[pre + "ln1.b"] = _zeros(d, dtype)
        params[pre + "ffn.w1"] = _he(rng, d, (d, 4 * d), dtype)
        params[pre + "ffn.b1"] = _zeros(4 * d, dtype)
        params[pre + "ffn.w2"] = _he(rng, 4 * d, (4 * d, d), dtype)
        params[pre + "ffn.b2"] = _zeros(d, dtype)
        params[pre + "ln2.g"] = _ones(d, dtype)
        params[pre + "ln2.b"] = _zeros(d, dtype)
    params["text.lnf.g"] = _ones(d, dtype)
    params["text.lnf.b"] = _zeros(d, dtype)
    for branch in ("text", "vision"):
        hid = arch.proj_expand * d
        fin = d if branch == "text" else arch.vision_dim
        params[f"{branch}.proj.ln.g"] = _ones(fin, dtype)
        params[f"{branch}.proj.ln.b"] = _zeros(fin, dtype)
        params[f"{branch}.proj.w1"] = _he(rng, fin, (fin, hid), dtype)
        params[f"{branch}.proj.b1"] = _zeros(hid, dtype)
        params[f"{branch}.proj.w2"] = _he(rng, hid, (hid, d), dtype)
        params[f"{branch}.proj.b2"] = _zeros(d, dtype)
    c_in = spec.channels
    for i, c_out in enumerate(arch.vision_channels):
        params[f"vision.conv{i}.w"] = _he(rng, c_in * 9, (c_out, c_in, 3, 3), dtype)
        params[f"vision.conv{i}.b"] = _zeros(c_out, dtype)
        params[f"vision.ln{i}.g"] = _ones(c_out, dtype)
        params[f"vision.ln{i}.b"] = _zeros(c_out, dtype)
        c_in = c_out
    params["vision.conv_out.w"] = _he(rng, c_in * 9, (arch.vision_dim, c_in, 3, 3), dtype)
    params["vision.conv_out.b"] = _zeros(arch.vision_dim, dtype)
    params["vision.ln_out.g"] = _ones(arch.vision_dim, dtype)
    params["vision.ln_out.b"] = _zeros(arch.vision_dim, dtype)
    return params


# -- speaker forward ----------------------------------------------------------

def patchify(images: np.ndarray, spec: PatchGridSpec) -> np.ndarray:
    """(B, C, H, W) -> (B, K, C*S*S), row-major over the patch grid.

    Patch k covers grid cell (k // GW, k % GW); within a patch, values are
    laid out channel-major then row-major.
    """
    b, c, h, w = images.shape
    if c != spec.channels or h != spec.height or w != spec.width:
        raise ValueError(f"image shape {images.shape[1:]} does not match spec "
                         f"({spec.channels}, {spec.height}, {spec.width})")
    gh, gw = spec.grid
    s = spec.patch
    x = images.reshape(b, c, gh, s, gw, s)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5)).reshape(b, gh * gw, c * s * s)


def symbol_logits(patches, params: dict[str, Tensor], arch: ArchConfig) -> Tensor:
    """Per-patch symbol logits: (B, K, P) -> (B, K, l, V)."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    b, k, p = x.shape
    h = T.relu(T.matmul(x.reshape(b * k, p), params["symb.w1"]) + params["symb.b1"])
    h = T.relu(T.matmul(h, params["symb.w2"]) + params["symb.b2"])
    out = T.matmul(h, params["symb.w3"]) + params["symb.b3"]
    return out.reshape((b, k, arch.symbols_per_patch, arch.vocab))


def patch_symbols(patches, params: dict[str, Tensor], arch: ArchConfig, tau_s: float,
                  rng, hard: bool = True, noise: np.ndarray | None = None) -> Tensor:
    """Sample one-hot symbols for every patch: (B, K, l, V)."""
    logits = T.log_softmax(symbol_logits(patches, params, arch), axis=-1)
    return relax.gumbel_softmax(logits, GumbelConfig(tau_s, hard), rng, noise=noise)


def patch_importance(images, params: dict[str, Tensor], spec: PatchGridSpec) -> Tensor:
    """Whole-image CNN scores, one per grid cell: (B, C, H, W) -> (B, K)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    i = 0
    while f"rank.conv{i}.w" in params:
        x = T.relu(T.conv2d(x, params[f"rank.conv{i}.w"], params[f"rank.conv{i}.b"],
                            stride=2, padding=1))
        i += 1
    x = T.conv2d(x, params["rank.head.w"], params["rank.head.b"])
    b = x.shape[0]
    gh, gw = spec.grid
    if x.shape[2:] != (gh, gw):
        raise ValueError(f"scorer output grid {x.shape[2:]} != patch grid {(gh, gw)}")
    return x.reshape((b, gh * gw))


def patch_mask(scores: Tensor, epsilon: float, tau_s: float, rng,
               hard: bool = True, noise: np.ndarray | None = None
               ) -> tuple[np.ndarray, Tensor]:
    """Keep-mask from soft ranks: p_k = rank_k / K, sampled via relaxed Bernoulli."""
    k = scores.shape[-1]
    ranks = soft_rank_rows(scores, epsilon)
    probs = ranks * (1.0 / k)
    mask = relax.bernoulli_relaxed(probs, GumbelConfig(tau_s, hard), rng, noise=noise)
    keep = mask.data > 0.5
    return keep, mask


def speak(images: np.ndarray, params: dict[str, Tensor], spec: PatchGridSpec,
          arch: ArchConfig, epsilon: float, tau_s: float, rng,
          hard: bool = True, symbol_noise=None, mask_noise=None) -> Message:
    """Full speaker: message = symbols * keep-mask, per patch."""
    patches = patchify(images, spec)
    symbols = patch_symbols(patches, params, arch, tau_s, rng, hard, noise=symbol_noise)
    scores = patch_importance(images, params, spec)
    keep, mask = patch_mask(scores, epsilon, tau_s, rng, hard, noise=mask_noise)
    masked = symbols * mask.reshape((*mask.shape, 1, 1))
    return Message(symbols=masked, keep_mask=keep, soft_mask=mask)


# -- listener forward ---------------------------------------------------------

def _attention(x: Tensor, params, pre: str, heads: int, bias: np.ndarray) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(m):
        return T.matmul(x, params[pre + m]).reshape((b, t, heads, dh)).transpose(0, 2, 1, 3)

    q, k, v = split("wq"), split("wk"), split("wv")
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = T.softmax(scores + Tensor(bias), axis=-1)
    ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape((b, t, d))
    return T.matmul(ctx, params[pre + "wo"])


def embed_message(message: Message, params: dict[str, Tensor], spec: PatchGridSpec,
                  arch: ArchConfig) -> Tensor:
    """CLS-readout transformer embedding of a batch of messages: (B, d)."""
    b, k, l, v = message.symbols.shape
    if k * l > spec.num_patches * arch.symbols_per_patch:
        raise ValueError(f"message length {k * l} exceeds maximum "
                         f"{spec.num_patches * arch.symbols_per_patch}")
    d = arch.embed_dim
    dtype = params["text.embed"].dtype

    tok = T.matmul(message.symbols.reshape((b, k * l, v)), params["text.embed"][:v])
    # learned position by grid cell (dropped patches leave gaps), plus a
    # per-slot embedding when l > 1
    pos = params["text.pos"][1:][np.repeat(np.arange(k), l)]
    slot = params["text.slot"][np.tile(np.arange(l), k)]
    tok = tok + pos + slot

    cls = (params["text.cls"] + params["text.pos"][0]).reshape((1, 1, d))
    cls = cls + Tensor(np.zeros((b, 1, d), dtype=dtype))
    null = params["text.embed"][arch.vocab].reshape((1, 1, d))
    null = null + Tensor(np.zeros((b, 1, d), dtype=dtype))
    x = T.concat([cls, null, tok], axis=1)

    # keys: CLS always; NULL only for all-dropped messages; tokens when kept
    empty = ~message.keep_mask.any(axis=1)
    key_ok = np.concatenate([np.ones((b, 1), bool), empty[:, None],
                             np.repeat(message.keep_mask, l, axis=1)], axis=1)
    bias = np.where(key_ok[:, None, None, :], 0.0, -1e9).astype(dtype)

    for i in range(arch.text_layers):
        pre = f"text.layer{i}."
        h = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + _attention(h, params, pre, arch.text_heads, bias)
        h = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = T.gelu(T.matmul(h, params[pre + "ffn.w1"]) + params[pre + "ffn.b1"])
        x = x + T.matmul(h, params[pre + "ffn.w2"]) + params[pre + "ffn.b2"]

    x = T.layer_norm(x, params["text.lnf.g"], params["text.lnf.b"])
    cls_out = x[:, 0]
    return _project(cls_out, params, "text")


def _channel_ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer norm over the channel axis of an NCHW activation map.

    Pins the per-position activation scale; plain conv+relu stacks otherwise
    grow activation norms without bound under contrastive training.
    """
    return T.layer_norm(x.transpose(0, 2, 3, 1), gain, bias).transpose(0, 3, 1, 2)


def _project(feat: Tensor, params, branch: str) -> Tensor:
    # layer norm pins the feature scale; without it the encoder can grow
    # feature norms unboundedly while the normalized directions freeze
    feat = T.layer_norm(feat, params[f"{branch}.proj.ln.g"], params[f"{branch}.proj.ln.b"])
    h = T.gelu(T.matmul(feat, params[f"{branch}.proj.w1"]) + params[f"{branch}.proj.b1"])
    out = T.matmul(h, params[f"{branch}.proj.w2"]) + params[f"{branch}.proj.b2"]
    return T.l2_normalize(out, axis=-1)


def vision_features(images, params: dict[str, Tensor]) -> Tensor:
    """Pre-projection pooled features of the image encoder (used by kNN probes)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    i = 0
    while f"vision.conv{i}.w" in params:
        x = T.conv2d(x, params[f"vision.conv{i}.w"], params[f"vision.conv{i}.b"],
                     stride=2, padding=1)
        x = T.relu(_channel_ln(x, params[f"vision.ln{i}.g"], params[f"vision.ln{i}.b"]))
        i += 1
    x = T.conv2d(x, params["vision.conv_out.w"], params["vision.conv_out.b"],
                 stride=1, padding=1)
    x = T.relu(_channel_ln(x, params["vision.ln_out.g"], params["vision.ln_out.b"]))
    return x.mean(axis=3).mean(axis=2)


def embed_image(images, params: dict[str, Tensor]) -> Tensor:
    """L2-normalized image embedding: (B, C, H, W) -> (B, d)."""
    return _project(vision_features(images, params), params, "vision")


# -- checkpoints --------------------------------------------------------------

def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict):
    """Versioned container: JSON manifest + raw little-endian payloads."""
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "offset": offset,
                        "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name]).astype(
                tensors[name].dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic: expected {CKPT_MAGIC!r}, found {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version: expected {CKPT_VERSION}, found {version}")
        header = json.loads(fh.read(hlen))
        blob = fh.read()
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")) \
            .reshape(e["shape"]).astype(e["dtype"])
    return tensors, header["meta"]

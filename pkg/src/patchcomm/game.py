"""The referential game: two-view augmentation, symmetric InfoNCE, training.

Each step: one augmented view goes to the speaker, the other to the
listener's image branch; matched (message, image) pairs are positives and
all in-batch mismatches are negatives. Both agents are optimized jointly
with SGD momentum under cosine LR and symbol-temperature schedules.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import agents, relax
from . import tensor as T
from .agents import ArchConfig, PatchGridSpec
from .corpus import Corpus, split
from .relax import TemperatureSchedule, temperature_at
from .tensor import SGDMomentum, Tensor, cosine_lr


class GameError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.5
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5

    def __post_init__(self):
        for p in (self.flip_prob, self.blur_prob, self.solarize_prob):
            if not 0 <= p <= 1:
                raise ValueError(f"probability outside [0, 1]: {p}")
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise ValueError(f"bad crop scale range "
                             f"({self.crop_scale_min}, {self.crop_scale_max})")


@dataclass
class GameConfig:
    batch_size: int = 32
    tau: float = 0.1                 # InfoNCE temperature
    epochs: int = 50
    base_lr: float = 0.3
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rank_epsilon: float = 1.0
    temp_start: float = 5.0
    temp_end: float = 1.0
    temp_anneal: int = 50
    seed: int = 0
    val_fraction: float = 0.05
    hard_sampling: bool = True
    checkpoint_every: int = 10
    # architecture
    patch: int = 16
    vocab: int = 32
    symbols_per_patch: int = 1
    embed_dim: int = 64
    speaker_hidden: int = 128
    rank_channels: int = 16
    text_layers: int = 4
    text_heads: int = 2
    vision_channels: tuple = (16, 32, 64, 64)
    vision_dim: int = 64
    proj_expand: int = 4
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive batches need a distractor)")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def arch(self) -> ArchConfig:
        return ArchConfig(vocab=self.vocab, symbols_per_patch=self.symbols_per_patch,
                          embed_dim=self.embed_dim, speaker_hidden=self.speaker_hidden,
                          rank_channels=self.rank_channels, text_layers=self.text_layers,
                          text_heads=self.text_heads, vision_channels=tuple(self.vision_channels),
                          vision_dim=self.vision_dim, proj_expand=self.proj_expand)

    def temp_schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.temp_start, self.temp_end, self.temp_anneal)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "aug":
                continue
            v = getattr(self, f.name)
            if f.name == "vision_channels":
                v = ",".join(str(c) for c in v)
            lines.append(f"{f.name} = {v}")
        for f in fields(self.aug):
            lines.append(f"aug_{f.name} = {getattr(self.aug, f.name)}")
        return "\n".join(sorted(lines)) + "\n"


def parse_config(text: str) -> GameConfig:
    """Inverse of GameConfig.to_text: flat key = value lines, unknown keys rejected."""
    game_fields = {f.name: f for f in fields(GameConfig) if f.name != "aug"}
    aug_fields = {f.name: f for f in fields(AugmentConfig)}
    gkw, akw = {}, {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("aug_") and key[4:] in aug_fields:
            akw[key[4:]] = _coerce(val, aug_fields[key[4:]].type)
        elif key in game_fields:
            gkw[key] = _coerce(val, game_fields[key].type)
        else:
            raise ValueError(f"unknown config key: {key!r}")
    return GameConfig(aug=AugmentConfig(**akw), **gkw)


def _coerce(val: str, typ):
    if typ in ("int", int):
        return int(val)
    if typ in ("float", float):
        return float(val)
    if typ in ("bool", bool):
        if val.lower() in ("true", "1"):
            return True
        if val.lower() in ("false", "0"):
            return False
        raise ValueError(f"bad boolean: {val!r}")
    if typ in ("tuple", tuple):
        return tuple(int(s) for s in val.split(","))
    return val


# -- augmentation --------------------------------------------------------------

def _resize_bilinear(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    c, h, w = img.shape
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0, 1)[None, :, None].astype(img.dtype)
    wx = np.clip(xs - x0, 0, 1)[None, None, :].astype(img.dtype)
    yi0, yi1 = y0[:, None], y1[:, None]
    xi0, xi1 = x0[None, :], x1[None, :]
    a = img[:, yi0, xi0]
    b = img[:, yi0, xi1]
    cterm = img[:, yi1, xi0]
    d = img[:, yi1, xi1]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + cterm * wy * (1 - wx) + d * wy * wx).astype(img.dtype)


def _augment_once(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    out = img
    # random resized crop
    scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
    side_h = max(1, round(np.sqrt(scale) * h))
    side_w = max(1, round(np.sqrt(scale) * w))
    top = rng.integers(0, h - side_h + 1)
    left = rng.integers(0, w - side_w + 1)
    out = out[:, top:top + side_h, left:left + side_w]
    if out.shape[1:] != (h, w):
        out = _resize_bilinear(out, h, w)
    else:
        out = out.copy()
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    # color jitter: brightness, contrast, saturation
    if cfg.brightness:
        out = out * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
    if cfg.contrast:
        f = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        out = out.mean() + f * (out - out.mean())
    if cfg.saturation and c == 3:
        f = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
        gray = out.mean(axis=0, keepdims=True)
        out = gray + f * (out - gray)
    out = np.clip(out, 0.0, 1.0)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        out = gaussian_filter(out, sigma=(0, sigma, sigma))
    if rng.random() < cfg.solarize_prob:
        t = cfg.solarize_threshold
        out = np.where(out >= t, 1.0 - out, out)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def two_views(image: np.ndarray, cfg: AugmentConfig,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return _augment_once(image, cfg, rng), _augment_once(image, cfg, rng)


# -- loss -----------------------------------------------------------------------

def similarity_matrix(text_emb: Tensor, img_emb: Tensor, tau: float) -> Tensor:
    """(j, k) entry: message-j embedding dot image-k embedding over tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return T.matmul(text_emb, T.transpose(img_emb)) * (1.0 / tau)


def info_nce(sim: Tensor) -> Tensor:
    """Symmetric contrastive loss with mean reduction over the batch."""
    b = sim.shape[0]
    diag = (np.arange(b), np.arange(b))
    l_text = -T.tmean(T.log_softmax(sim, axis=1)[diag])
    l_vision = -T.tmean(T.log_softmax(sim, axis=0)[diag])
    return (l_text + l_vision) * 0.5


def top1_accuracy(sim: np.ndarray) -> float:
    """Fraction of rows whose diagonal entry is the row max."""
    return float((sim.argmax(axis=1) == np.arange(sim.shape[0])).mean())


# -- training ---------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    columns = ("epoch", "loss", "top1", "lr", "tau_s", "seconds")

    def append(self, **kw):
        if self.rows and kw["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        self.rows.append({k: kw[k] for k in self.columns})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['top1']:.6f}",
                             f"{row['lr']:.8f}", f"{row['tau_s']:.6f}", f"{row['seconds']:.3f}"])
        return buf.getvalue()


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, tag)))


def _batch_views(images: np.ndarray, aug: AugmentConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    v1 = np.empty_like(images)
    v2 = np.empty_like(images)
    for i, img in enumerate(images):
        v1[i], v2[i] = two_views(img, aug, rng)
    return v1, v2


def train_step(images: np.ndarray, sp: dict, li: dict, opt: SGDMomentum,
               spec: PatchGridSpec, cfg: GameConfig, tau_s: float, lr: float,
               rng: np.random.Generator) -> tuple[float, float]:
    """One optimization step on a batch; returns (loss, train top-1)."""
    if images.shape[0] < 2:
        raise GameError("training batch must contain at least 2 images")
    v_speak, v_listen = _batch_views(images, cfg.aug, rng)
    msg = agents.speak(v_speak, sp, spec, cfg.arch(), cfg.rank_epsilon, tau_s, rng,
                       hard=cfg.hard_sampling)
    temb = agents.embed_message(msg, li, spec, cfg.arch())
    vemb = agents.embed_image(v_listen, li)
    sim = similarity_matrix(temb, vemb, cfg.tau)
    loss = info_nce(sim)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise GameError(f"non-finite loss; sim range [{sim.data.min()}, {sim.data.max()}], "
                        f"kept patches mean {msg.keep_mask.mean():.3f}")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return loss_val, top1_accuracy(sim.data)


def validation_top1(val: Corpus, sp: dict, li: dict, spec: PatchGridSpec,
                    cfg: GameConfig, tau_s: float, rng: np.random.Generator) -> float:
    accs = []
    order = rng.permutation(len(val))
    b = cfg.batch_size
    for start in range(0, len(order) - b + 1, b):
        idx = order[start:start + b]
        v_speak, v_listen = _batch_views(val.pixels[idx], cfg.aug, rng)
        msg = agents.speak(v_speak, sp, spec, cfg.arch(), cfg.rank_epsilon, tau_s, rng)
        sim = similarity_matrix(agents.embed_message(msg, li, spec, cfg.arch()),
                                agents.embed_image(v_listen, li), cfg.tau)
        accs.append(top1_accuracy(sim.data))
    return float(np.mean(accs)) if accs else 0.0


def init_game(corpus_spec, cfg: GameConfig) -> tuple[PatchGridSpec, dict, dict, SGDMomentum]:
    spec = PatchGridSpec(corpus_spec.channels, corpus_spec.height,
                         corpus_spec.width, cfg.patch)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1417)))
    sp = agents.init_speaker(spec, cfg.arch(), rng)
    li = agents.init_listener(spec, cfg.arch(), rng)
    merged = {f"speaker.{k}": v for k, v in sp.items()}
    merged.update({f"listener.{k}": v for k, v in li.items()})
    opt = SGDMomentum(merged, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return spec, sp, li, opt


def _checkpoint_arrays(sp: dict, li: dict, opt: SGDMomentum) -> dict[str, np.ndarray]:
    out = {f"speaker.{k}": v.data for k, v in sp.items()}
    out.update({f"listener.{k}": v.data for k, v in li.items()})
    out.update({f"optim.{k}": v for k, v in opt.buffers.items()})
    return out


def _restore_checkpoint(arrays: dict, sp: dict, li: dict, opt: SGDMomentum):
    for k, v in sp.items():
        v.data = arrays[f"speaker.{k}"].astype(v.dtype).reshape(v.shape)
    for k, v in li.items():
        v.data = arrays[f"listener.{k}"].astype(v.dtype).reshape(v.shape)
    for k in opt.buffers:
        opt.buffers[k] = arrays[f"optim.{k}"].astype(opt.buffers[k].dtype) \
            .reshape(opt.buffers[k].shape)


def train_loop(corpus: Corpus, cfg: GameConfig, out_dir=None, resume: bool = False,
               progress=None) -> tuple[TrainLog, dict, dict]:
    """Train both agents on `corpus`; returns (log, speaker, listener).

    With out_dir set, checkpoints land there every cfg.checkpoint_every
    epochs (plus the final epoch) and the log row is flushed after every
    epoch. resume=True picks up from the newest checkpoint in out_dir.
    """
    spec, sp, li, opt = init_game(corpus.spec, cfg)
    train, val = split(corpus, cfg.val_fraction, cfg.seed)
    chash = agents.config_hash(cfg.to_text())
    log = TrainLog()
    start_epoch = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if out_dir is None:
            raise ValueError("resume requires out_dir")
        ckpts = sorted(out_dir.glob("ckpt_epoch*.bin"))
        if ckpts:
            arrays, meta = agents.load_checkpoint(ckpts[-1])
            if meta["config_hash"] != chash:
                raise GameError(f"checkpoint config hash {meta['config_hash']} does not "
                                f"match current config {chash}")
            _restore_checkpoint(arrays, sp, li, opt)
            start_epoch = meta["epoch"] + 1
            logfile = out_dir / "trainlog.csv"
            if logfile.exists():
                for row in csv.DictReader(io.StringIO(logfile.read_text())):
                    if int(row["epoch"]) <= meta["epoch"]:
                        log.append(epoch=int(row["epoch"]), loss=float(row["loss"]),
                                   top1=float(row["top1"]), lr=float(row["lr"]),
                                   tau_s=float(row["tau_s"]), seconds=float(row["seconds"]))

    sched = cfg.temp_schedule()
    n_batches = len(train) // cfg.batch_size
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.warmup_epochs)
        tau_s = temperature_at(epoch, sched)
        rng = _epoch_rng(cfg.seed, epoch, 0)
        order = rng.permutation(len(train))
        losses = []
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            loss, _ = train_step(train.pixels[idx], sp, li, opt, spec, cfg, tau_s, lr, rng)
            losses.append(loss)
        val_acc = validation_top1(val, sp, li, spec, cfg, tau_s,
                                  _epoch_rng(cfg.seed, epoch, 1))
        log.append(epoch=epoch, loss=float(np.mean(losses)) if losses else 0.0,
                   top1=val_acc, lr=lr, tau_s=tau_s,
                   seconds=time.perf_counter() - t0)
        if progress:
            progress(log.rows[-1])
        if out_dir is not None:
            (out_dir / "trainlog.csv").write_text(log.to_csv())
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                agents.save_checkpoint(out_dir / f"ckpt_epoch{epoch:04d}.bin",
                                       _checkpoint_arrays(sp, li, opt),
                                       {"config_hash": chash, "epoch": epoch,
                                        "config": cfg.to_text()})
    return log, sp, li

"""Measurement protocols: communication success, kNN and bag-of-words probes,
topographic similarity, message statistics, patch-drop curves, heatmaps and
symbol galleries.

All evaluations are read-only over parameter snapshots and deterministic
given their rng argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import agents, game
from . import tensor as T
from .agents import ArchConfig, PatchGridSpec
from .corpus import Corpus
from .softrank import hard_rank
from .tensor import SGDMomentum, Tensor


@dataclass
class FeatureTable:
    features: np.ndarray  # (N, D)
    labels: np.ndarray    # (N,)
    ids: np.ndarray       # (N,)


@dataclass
class TopoRecord:
    class_id: int
    pairs: list            # (jaccard, image similarity) tuples
    correlation: float


# -- shared helpers -----------------------------------------------------------

def _batched(n, batch):
    for start in range(0, n, batch):
        yield np.arange(start, min(start + batch, n))


def extract_features(corpus: Corpus, li: dict, batch: int = 64) -> FeatureTable:
    """Pre-projection pooled image features for every corpus sample."""
    feats = []
    for idx in _batched(len(corpus), batch):
        feats.append(agents.vision_features(corpus.pixels[idx], li).data)
    return FeatureTable(np.concatenate(feats), corpus.labels.copy(), corpus.ids.copy())


def speak_corpus(corpus: Corpus, sp: dict, spec: PatchGridSpec, arch: ArchConfig,
                 epsilon: float, tau_s: float, rng, batch: int = 64) -> list[list[int]]:
    """Hard messages (kept symbol ids, grid order) for every corpus sample."""
    docs = []
    for idx in _batched(len(corpus), batch):
        msg = agents.speak(corpus.pixels[idx], sp, spec, arch, epsilon, tau_s, rng)
        docs.extend(msg.kept_symbol_lists())
    return docs


# -- positive listening -------------------------------------------------------

def comm_success(sp: dict, li: dict, corpus: Corpus, spec: PatchGridSpec,
                 cfg: game.GameConfig, trials: int, rng) -> dict:
    """Top-1/top-5 matching accuracy over random batches, both directions."""
    b = cfg.batch_size
    tau_s = cfg.temp_end
    top1, top5, n_rows = 0.0, 0.0, 0
    for _ in range(trials):
        idx = rng.choice(len(corpus), size=b, replace=False)
        v_speak, v_listen = game._batch_views(corpus.pixels[idx], cfg.aug, rng)
        msg = agents.speak(v_speak, sp, spec, cfg.arch(), cfg.rank_epsilon, tau_s, rng)
        sim = game.similarity_matrix(agents.embed_message(msg, li, spec, cfg.arch()),
                                     agents.embed_image(v_listen, li), cfg.tau).data
        for mat in (sim, sim.T):  # message->image and image->message
            ranks = (mat >= mat[np.arange(b), np.arange(b)][:, None]).sum(axis=1)
            top1 += (ranks == 1).sum()
            top5 += (ranks <= 5).sum()
            n_rows += b
    p1 = top1 / n_rows
    half_width = 1.96 * np.sqrt(max(p1 * (1 - p1), 1e-12) / n_rows)
    return {"top1": p1, "top5": top5 / n_rows, "half_width": float(half_width),
            "chance": 1.0 / b}


def knn_eval(train: FeatureTable, test: FeatureTable, k: int = 20) -> dict:
    """Cosine-similarity kNN with similarity-weighted class votes."""
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError(f"feature dims differ: train {train.features.shape[1]}, "
                         f"test {test.features.shape[1]}")
    if k > len(train.features):
        raise ValueError(f"k={k} exceeds train size {len(train.features)}")
    tr = train.features / np.maximum(np.linalg.norm(train.features, axis=1, keepdims=True), 1e-12)
    te = test.features / np.maximum(np.linalg.norm(test.features, axis=1, keepdims=True), 1e-12)
    sim = te @ tr.T
    n_classes = int(train.labels.max()) + 1
    top1 = top5 = 0
    for i in range(len(te)):
        nbr = np.argpartition(-sim[i], k - 1)[:k]
        scores = np.zeros(n_classes)
        np.add.at(scores, train.labels[nbr], np.maximum(sim[i][nbr], 0) + 1e-9)
        # ties resolved toward lower class id via stable sort on -scores
        order = np.argsort(-scores, kind="stable")
        top1 += order[0] == test.labels[i]
        top5 += test.labels[i] in order[:5]
    return {"top1": top1 / len(te), "top5": top5 / len(te)}


# -- positive signaling: bag of words ------------------------------------------

def tfidf_matrix(docs: list[list[int]], vocab: int, idf: np.ndarray | None = None):
    """Length-normalized tf times smoothed idf: idf = log(N/(1+df)) + 1."""
    n = len(docs)
    counts = np.zeros((n, vocab))
    for i, doc in enumerate(docs):
        for s in doc:
            counts[i, s] += 1
    lengths = np.maximum(counts.sum(axis=1, keepdims=True), 1.0)
    tf = counts / lengths
    if idf is None:
        df = (counts > 0).sum(axis=0)
        idf = np.log(n / (1.0 + df)) + 1.0
    return tf * idf, idf


def bow_classify(train_docs, train_labels, test_docs, test_labels, vocab: int) -> dict:
    """tf-idf features + complement naive Bayes with add-one smoothing."""
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    x_train, idf = tfidf_matrix(train_docs, vocab)
    x_test, _ = tfidf_matrix(test_docs, vocab, idf)
    classes = np.unique(train_labels)
    priors = np.array([np.log((train_labels == c).mean()) for c in classes])
    weights = np.zeros((len(classes), vocab))
    for ci, c in enumerate(classes):
        comp = x_train[train_labels != c]
        theta = (1.0 + comp.sum(axis=0)) / (vocab + comp.sum())
        weights[ci] = np.log(theta)
    # complement scoring: the LEAST complement-likely class wins
    scores = -(x_test @ weights.T)
    empty = x_test.sum(axis=1) == 0
    scores[empty] = priors  # empty documents fall back to priors
    order = np.argsort(-scores, axis=1, kind="stable")
    top1 = (classes[order[:, 0]] == test_labels).mean()
    top5 = np.mean([test_labels[i] in classes[order[i, :5]] for i in range(len(test_labels))])
    return {"top1": float(top1), "top5": float(top5), "chance": 1.0 / len(classes)}


# -- positive signaling: topographic similarity ---------------------------------

def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def image_similarity_proxy(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Negated MSE in a blurred, downsampled luminance space.

    Stands in for learned perceptual distances, which need a pretrained
    network; only the protocol shape is comparable, not the magnitudes.
    """
    def reduce(img):
        lum = img.mean(axis=0)
        return gaussian_filter(lum, sigma=2.0)[::8, ::8]

    return -float(((reduce(img_a) - reduce(img_b)) ** 2).mean())


def topographic_similarity(sp: dict, corpus: Corpus, spec: PatchGridSpec,
                           arch: ArchConfig, epsilon: float, tau_s: float,
                           per_class_n: int, rng) -> tuple[list[TopoRecord], dict]:
    """Per class: Pearson correlation between message Jaccard similarity and
    an image-similarity proxy over all sample pairs."""
    if per_class_n < 2:
        raise ValueError("per_class_n must be >= 2")
    records = []
    for cls in np.unique(corpus.labels):
        idx = np.flatnonzero(corpus.labels == cls)
        if idx.size < per_class_n:
            continue
        pick = rng.choice(idx, size=per_class_n, replace=False)
        msg = agents.speak(corpus.pixels[pick], sp, spec, arch, epsilon, tau_s, rng)
        sets = [set(doc) for doc in msg.kept_symbol_lists()]
        pairs = []
        for i in range(per_class_n):
            for j in range(i + 1, per_class_n):
                pairs.append((jaccard(sets[i], sets[j]),
                              image_similarity_proxy(corpus.pixels[pick[i]],
                                                     corpus.pixels[pick[j]])))
        js, dist = np.array(pairs).T
        if js.std() < 1e-12 or dist.std() < 1e-12:
            corr = 0.0
        else:
            corr = float(np.corrcoef(js, dist)[0, 1])
        records.append(TopoRecord(int(cls), pairs, corr))
    corrs = [r.correlation for r in records]
    return records, {"mean": float(np.mean(corrs)), "median": float(np.median(corrs))}


# -- message statistics ----------------------------------------------------------

def message_stats(docs: list[list[int]]) -> dict:
    total = np.array([len(d) for d in docs])
    unique = np.array([len(set(d)) for d in docs])
    return {
        "total_hist": np.bincount(total),
        "unique_hist": np.bincount(unique),
        "total_mean": float(total.mean()), "total_median": float(np.median(total)),
        "unique_mean": float(unique.mean()), "unique_median": float(np.median(unique)),
    }


def symbol_frequency(docs: list[list[int]], vocab: int) -> dict:
    counts = np.zeros(vocab, dtype=np.int64)
    for doc in docs:
        for s in doc:
            counts[s] += 1
    return {"counts": counts, "utilization": float((counts > 0).mean())}


# -- patch-drop curves -------------------------------------------------------------

@dataclass
class PatchClassifier:
    """Toy stand-in for a pretrained patch-sequence classifier: patch
    embedding, mean pool over the visible patches, linear head."""
    params: dict
    spec: PatchGridSpec

    def logits(self, images: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        return _classifier_logits(self.params, patchify_f32(images, self.spec), keep).data


def patchify_f32(images, spec):
    return agents.patchify(np.asarray(images, dtype=np.float32), spec)


def _classifier_logits(params, patches, keep) -> Tensor:
    x = Tensor(patches) if not isinstance(patches, Tensor) else patches
    b, k, p = x.shape
    h = T.relu(T.matmul(x.reshape(b * k, p), params["w1"]) + params["b1"]).reshape((b, k, -1))
    if keep is None:
        pooled = h.mean(axis=1)
    else:
        w = keep.astype(h.dtype)
        denom = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        pooled = (h * Tensor(w[:, :, None])).sum(axis=1) * Tensor(1.0 / denom)
    return T.matmul(pooled, params["w2"]) + params["b2"]


def train_patch_classifier(corpus: Corpus, spec: PatchGridSpec, rng,
                           hidden: int = 64, epochs: int = 15, batch: int = 64,
                           lr: float = 0.05) -> PatchClassifier:
    """Supervised training with random patch-subset augmentation, so accuracy
    under patch dropping is meaningful."""
    n_classes = int(corpus.labels.max()) + 1
    p = spec.patch_dim
    dt = np.float32
    params = {
        "w1": Tensor((rng.normal(size=(p, hidden)) * np.sqrt(2.0 / p)).astype(dt), requires_grad=True),
        "b1": Tensor(np.zeros(hidden, dt), requires_grad=True),
        "w2": Tensor((rng.normal(size=(hidden, n_classes)) * np.sqrt(2.0 / hidden)).astype(dt), requires_grad=True),
        "b2": Tensor(np.zeros(n_classes, dt), requires_grad=True),
    }
    opt = SGDMomentum(params, momentum=0.9, weight_decay=1e-4)
    patches = patchify_f32(corpus.pixels, spec)
    k = spec.num_patches
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order) - batch + 1, batch):
            idx = order[start:start + batch]
            keep = rng.random((batch, k)) < rng.uniform(0.25, 1.0, size=(batch, 1))
            keep |= ~keep.any(axis=1, keepdims=True)
            logits = _classifier_logits(params, patches[idx], keep)
            lsm = T.log_softmax(logits, axis=-1)
            loss = -T.tmean(lsm[np.arange(batch), corpus.labels[idx]])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
    return PatchClassifier(params, spec)


def patch_drop_curve(clf: PatchClassifier, sp: dict, corpus: Corpus,
                     spec: PatchGridSpec, ks: list[int], rng) -> dict:
    """Accuracy at each k for top-k ranked patches vs k random patches."""
    k_total = spec.num_patches
    for k in ks:
        if not 0 <= k <= k_total:
            raise ValueError(f"k={k} outside [0, {k_total}]")
    scores = agents.patch_importance(corpus.pixels, sp, spec).data
    ranks = np.stack([hard_rank(s) for s in scores])
    ranked_acc, random_acc = {}, {}
    for k in ks:
        if k == 0:
            chance = max(np.bincount(corpus.labels).max() / len(corpus), 0.0)
            ranked_acc[k] = random_acc[k] = float(chance)
            continue
        keep_ranked = ranks > (k_total - k)
        keep_random = np.zeros((len(corpus), k_total), dtype=bool)
        for i in range(len(corpus)):
            keep_random[i, rng.choice(k_total, size=k, replace=False)] = True
        for keep, acc in ((keep_ranked, ranked_acc), (keep_random, random_acc)):
            preds = []
            for idx in _batched(len(corpus), 128):
                preds.append(clf.logits(corpus.pixels[idx], keep[idx]).argmax(axis=1))
            acc[k] = float((np.concatenate(preds) == corpus.labels).mean())
    return {"ranked": ranked_acc, "random": random_acc}


# -- visualization -----------------------------------------------------------------

def heatmap_render(image: np.ndarray, scores: np.ndarray, path) -> None:
    """Alpha-blend a blue->red patch-importance overlay and write a PNG."""
    from PIL import Image

    c, h, w = image.shape
    k = scores.size
    gh = int(round(np.sqrt(k * h / w)))
    gw = k // gh
    if gh * gw != k:
        raise ValueError(f"cannot arrange {k} scores on a grid for {h}x{w} image")
    lo, hi = scores.min(), scores.max()
    norm = (scores - lo) / (hi - lo) if hi > lo else np.full(k, 0.5)
    cell = norm.reshape(gh, gw)
    overlay = np.zeros((3, h, w))
    up = np.kron(cell, np.ones((h // gh, w // gw)))
    overlay[0] = up          # red = important
    overlay[2] = 1.0 - up    # blue = unimportant
    rgb = image if c == 3 else np.repeat(image, 3, axis=0)
    blended = np.clip(0.55 * rgb + 0.45 * overlay, 0, 1)
    arr = (blended.transpose(1, 2, 0) * 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path)
    except OSError as e:
        raise OSError(f"cannot write heatmap to {path}: {e}") from e


def symbol_gallery(docs_ids: np.ndarray, keep: np.ndarray, corpus: Corpus,
                   spec: PatchGridSpec, symbol_id: int, n: int = 6,
                   rng=None) -> np.ndarray | None:
    """Tile up to n kept patches whose hard symbol equals symbol_id,
    preferring distinct source images. Returns (C, S, n*S) or None if the
    symbol never appears."""
    rng = rng or np.random.default_rng(0)
    hits = []  # (image index, patch index)
    for i in range(docs_ids.shape[0]):
        for kk in range(docs_ids.shape[1]):
            if keep[i, kk] and symbol_id in docs_ids[i, kk]:
                hits.append((i, kk))
    if not hits:
        return None
    rng.shuffle(hits)
    # prefer one patch per distinct image
    seen, chosen = set(), []
    for i, kk in hits:
        if i not in seen:
            chosen.append((i, kk))
            seen.add(i)
        if len(chosen) == n:
            break
    for i, kk in hits:
        if len(chosen) >= n:
            break
        if (i, kk) not in chosen:
            chosen.append((i, kk))
    s = spec.patch
    gh, gw = spec.grid
    tiles = []
    for i, kk in chosen[:n]:
        r, cidx = kk // gw, kk % gw
        tiles.append(corpus.pixels[i][:, r * s:(r + 1) * s, cidx * s:(cidx + 1) * s])
    return np.concatenate(tiles, axis=2)


def save_gallery(gallery: np.ndarray, path):
    from PIL import Image

    arr = (np.clip(gallery, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)

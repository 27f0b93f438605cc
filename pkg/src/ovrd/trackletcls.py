"""Open-vocabulary tracklet classification.

RoI features are projected by a two-layer MLP into the text-embedding space
and scored against class text embeddings with a temperature softmax over
cosines. Training combines cross-entropy on positives, a uniform-target loss
on negatives (background or unseen categories) and an l1 distillation term
towards exported visual embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import nnkit
from .geometry import viou
from .textenc import TextEncoder, object_text_embedding

log = logging.getLogger(__name__)

HIDDEN = 768


class TrackletClsError(ValueError):
    pass


@dataclass
class TrackletClassifier:
    phi_o: nnkit.MlpParams
    log_tau: np.ndarray  # 0-d, temperature = exp(log_tau)
    classes: list  # names matching the rows of ``table``
    table: np.ndarray  # (k, d) object text embeddings
    bg: Optional[np.ndarray] = None  # background embedding (ablation only)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def params(self) -> dict:
        p = {"phi_o.W1": self.phi_o.W1, "phi_o.b1": self.phi_o.b1,
             "phi_o.W2": self.phi_o.W2, "phi_o.b2": self.phi_o.b2, "log_tau": self.log_tau}
        if self.bg is not None:
            p["bg"] = self.bg
        return p

    def tensors(self) -> dict:
        return dict(self.params())

    def meta(self) -> dict:
        return {"classes": list(self.classes), "use_bg_embedding": self.bg is not None}

    @classmethod
    def from_tensors(cls, tensors: dict, meta: dict, encoder: TextEncoder) -> "TrackletClassifier":
        classes = list(meta["classes"])
        return cls(nnkit.MlpParams.from_tensors(tensors, "phi_o"), np.array(tensors["log_tau"]).reshape(()),
                   classes, text_table(encoder, classes), tensors.get("bg"))

    def project(self, F) -> np.ndarray:
        return nnkit.mlp_forward(self.phi_o, F)[0]


def text_table(encoder: TextEncoder, names) -> np.ndarray:
    return np.stack([object_text_embedding(encoder, encoder.token(n)) for n in names])


def classify_tracklet(clf: TrackletClassifier, f) -> np.ndarray:
    """Probabilities over ``clf.classes`` for one 2048-d feature (or a batch)."""
    v = clf.project(f)
    c, _ = nnkit.cosine_matrix(np.atleast_2d(v), clf.table)
    p = nnkit.softmax_temp(c, clf.tau)
    return p[0] if np.ndim(f) == 1 else p


def open_vocab_classify(clf: TrackletClassifier, f, names, table) -> tuple[str, float]:
    """Argmax-cosine class over an arbitrary embedding table (lowest index on ties)."""
    if len(names) == 0:
        raise TrackletClsError("empty class table")
    c, _ = nnkit.cosine_matrix(np.atleast_2d(clf.project(f)), table)
    k = int(np.argmax(c[0]))
    return names[k], float(c[0, k])


def object_scores(clf: TrackletClassifier, F, table) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax index and its softmax probability over ``table``."""
    c, _ = nnkit.cosine_matrix(np.atleast_2d(clf.project(F)), table)
    p = nnkit.softmax_temp(c, clf.tau)
    k = np.argmax(c, axis=1)
    return k, p[np.arange(len(k)), k]


@dataclass
class LabelAssignment:
    labels: list  # class name or None (negative), aligned with the input tracklets

    @property
    def positives(self) -> list:
        return [i for i, c in enumerate(self.labels) if c is not None]

    @property
    def negatives(self) -> list:
        return [i for i, c in enumerate(self.labels) if c is None]


def assign_tracklet_labels(tracklets, gt_tracklets, gt_classes: dict, base_classes,
                           iou_threshold: float = 0.5) -> LabelAssignment:
    """Label each tracklet with the base class of its best-overlapping GT tracklet.

    ``gt_classes`` maps ``(video, id)`` to a class name. GT tracklets of novel
    classes never produce positives.
    """
    if not 0 < iou_threshold < 1:
        raise TrackletClsError("iou_threshold must lie in (0, 1)")
    base = set(base_classes)
    by_video: dict = {}
    for g in gt_tracklets:
        cls = gt_classes.get((g.video, g.id))
        if cls in base:
            by_video.setdefault(g.video, []).append((g, cls))
    labels = []
    for t in tracklets:
        best, best_cls = 0.0, None
        for g, cls in by_video.get(t.video, []):
            ov = viou(t, g)
            if ov > best:
                best, best_cls = ov, cls
        labels.append(best_cls if best >= iou_threshold else None)
    return LabelAssignment(labels)


class TrackletLoss(NamedTuple):
    pos: float
    neg: float
    distill: float
    total: float


def tracklet_losses(params: dict, table: np.ndarray, F, labels, V=None, lam: float = 5.0,
                    need_grads: bool = True):
    """Losses and gradients for one batch.

    ``labels[i]`` is a class row index into ``table`` or -1 for a negative.
    ``params`` holds ``phi_o.*``, ``log_tau`` and optionally ``bg``. Returns
    ``(TrackletLoss, grads)``.
    """
    labels = np.asarray(labels)
    F = np.asarray(F, dtype=np.float64)
    if lam > 0 and V is None:
        raise TrackletClsError("distillation weight > 0 requires visual embeddings")
    phi = nnkit.MlpParams(params["phi_o.W1"], params["phi_o.b1"], params["phi_o.W2"], params["phi_o.b2"])
    use_bg = "bg" in params
    T = np.vstack([table, params["bg"][None, :]]) if use_bg else table
    k = table.shape[0]
    vp, cache = nnkit.mlp_forward(phi, F)
    C, ccache = nnkit.cosine_matrix(vp, T)
    tau = float(np.exp(params["log_tau"]))
    logits = C / tau
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    P = np.exp(logp)

    pos = np.flatnonzero(labels >= 0)
    neg = np.flatnonzero(labels < 0)
    dlogits = np.zeros_like(logits)
    l_pos = l_neg = 0.0
    if len(pos):
        l_pos = -float(np.mean(logp[pos, labels[pos]]))
        g = P[pos].copy()
        g[np.arange(len(pos)), labels[pos]] -= 1.0
        dlogits[pos] = g / len(pos)
    if len(neg):
        if use_bg:
            l_neg = -float(np.mean(logp[neg, k]))
            g = P[neg].copy()
            g[:, k] -= 1.0
        else:
            l_neg = -float(np.mean(logp[neg, :k].mean(axis=1)))
            g = P[neg] - 1.0 / k
        dlogits[neg] = g / len(neg)

    l_dist = 0.0
    dvp_dist = 0.0
    if lam > 0:
        diff = vp - np.asarray(V, dtype=np.float64)
        l_dist = float(np.abs(diff).sum(axis=1).mean())
        dvp_dist = lam * np.sign(diff) / len(F)
    total = l_pos + l_neg + lam * l_dist
    losses = TrackletLoss(l_pos, l_neg, l_dist, total)
    if not need_grads:
        return losses, None

    dC = dlogits / tau
    dlog_tau = np.array(-np.sum(dlogits * logits))
    dvp, dT = nnkit.cosine_matrix_backward(ccache, dC)
    dvp = dvp + dvp_dist
    g_phi, _ = nnkit.mlp_backward(phi, cache, dvp, need_dx=False)
    grads = {"phi_o.W1": g_phi.W1, "phi_o.b1": g_phi.b1, "phi_o.W2": g_phi.W2,
             "phi_o.b2": g_phi.b2, "log_tau": dlog_tau}
    if use_bg:
        grads["bg"] = dT[k]
    return losses, grads


@dataclass
class TrackletTrainConfig:
    iou_threshold: float = 0.5
    lambda_distill: float = 5.0
    use_bg_embedding: bool = False
    lr: float = 1e-4
    steps: int = 500
    batch_size: int = 64
    hidden: int = HIDDEN
    init_tau: float = 0.07
    eval_every: int = 50
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrackletTrainResult:
    classifier: TrackletClassifier
    history: list = field(default_factory=list)  # (step, running loss, val acc)


def _collect(videos, base_classes, iou_threshold):
    tracks, labels = [], []
    for v in videos:
        cands = v.detections if v.detections else v.gt_tracklets
        assign = assign_tracklet_labels(cands, v.gt_tracklets, v.gt.classes, base_classes, iou_threshold)
        tracks.extend(cands)
        labels.extend(assign.labels)
    return tracks, labels


def train_tracklet_classifier(dataset, cfg: TrackletTrainConfig, encoder: TextEncoder) -> TrackletTrainResult:
    """Seeded Adam training of the RoI-to-text projection on base classes.

    A trailing ``val_fraction`` of the training videos is held out; the
    parameters with the best validation accuracy on positive tracklets are
    returned.
    """
    base = list(dataset.objects.base)
    videos = dataset.split("train")
    n_val = int(round(cfg.val_fraction * len(videos)))
    train_v, val_v = videos[: len(videos) - n_val], videos[len(videos) - n_val:]
    tracks, names = _collect(train_v, base, cfg.iou_threshold)
    index = {c: i for i, c in enumerate(base)}
    labels = np.array([index[c] if c is not None else -1 for c in names], dtype=np.int64)
    if not (labels >= 0).any():
        raise TrackletClsError("no positive tracklets in the training split")
    F = np.stack([t.roi_feature for t in tracks]).astype(np.float64)
    V = None
    if cfg.lambda_distill > 0:
        if any(t.vlm_embedding is None for t in tracks):
            raise TrackletClsError("lambda_distill > 0 but some tracklets lack visual embeddings")
        V = np.stack([t.vlm_embedding for t in tracks]).astype(np.float64)
    val_tracks, val_names = _collect(val_v, base, cfg.iou_threshold)
    val_pos = [i for i, c in enumerate(val_names) if c is not None]
    Fv = np.stack([val_tracks[i].roi_feature for i in val_pos]) if val_pos else None
    yv = np.array([index[val_names[i]] for i in val_pos])

    rng = np.random.default_rng(cfg.seed)
    table = text_table(encoder, base)
    clf = TrackletClassifier(
        nnkit.MlpParams.init(F.shape[1], cfg.hidden, encoder.d, rng),
        np.array(np.log(cfg.init_tau)), base, table,
        rng.standard_normal(encoder.d) / np.sqrt(encoder.d) if cfg.use_bg_embedding else None,
    )
    params = clf.params()
    state = nnkit.AdamState.for_params(params)
    result = TrackletTrainResult(clf)
    best_acc, best = -1.0, None
    order, cursor, window = rng.permutation(len(F)), 0, []
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(F)), 0
        idx = order[cursor: cursor + cfg.batch_size]
        cursor += cfg.batch_size
        losses, grads = tracklet_losses(params, table, F[idx], labels[idx],
                                        None if V is None else V[idx], cfg.lambda_distill)
        nnkit.adam_step(params, grads, state, cfg.lr)
        window.append(losses.total)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = float("nan")
            if Fv is not None:
                k, _ = object_scores(clf, Fv, table)
                acc = float(np.mean(k == yv))
            running = float(np.mean(window[-50:]))
            result.history.append((step, running, acc))
            log.info("tracklet step %d loss %.4f val acc %.4f", step, running, acc)
            score = acc if Fv is not None else float(step)
            if score > best_acc:
                best_acc = score
                best = {k_: np.array(a, copy=True) for k_, a in params.items()}
    for name, arr in best.items():
        params[name][...] = arr
    return result

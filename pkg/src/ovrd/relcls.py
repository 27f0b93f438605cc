"""Open-vocabulary predicate classification with motion-grouped,
compositional prompts.

Stage 1 learns the prompt bank and the position projection ``phi_pos`` from
pre-extracted pair visual embeddings. Stage 2 freezes both, caches the
per-group predicate text tables and trains ``phi_p`` to map RoI features into
the same space. ``repro_dagger`` trains everything jointly with an l1
alignment of ``phi_p(f)`` to the visual embedding instead.

Ablation modes: ``single`` (one non-compositional prompt, difference
embeddings), ``comp`` (compositional, one group), ``ens``/``rand`` (random
group in training; averaged or random tables at inference), ``repro``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nnkit
from .geometry import viou
from .motion import DEFAULT_GAMMA, DEFAULT_SEGMENT_LENGTH, N_GROUPS
from .pipeline import pair_candidates, split_segments
from .textenc import PromptBank, TextEncoder, predicate_table

log = logging.getLogger(__name__)

MODES = ("single", "comp", "ens", "rand", "repro", "repro_dagger")
ABLATION_MODES = ("single", "comp", "ens", "rand", "repro")
HIDDEN = 768
POS_DIM = 12


class RelClsError(ValueError):
    pass


@dataclass
class RelationTrainConfig:
    ablation_mode: str = "repro"
    pair_iou_threshold: float = 0.5
    gamma: float = DEFAULT_GAMMA
    seg_len: int = DEFAULT_SEGMENT_LENGTH
    stride: int = 15
    lr: float = 1e-4
    steps: int = 1000
    batch_size: int = 64
    hidden: int = HIDDEN
    prompt_length: int = 10
    align_weight: float = 1.0
    eval_every: int = 100
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.ablation_mode not in MODES:
            raise RelClsError(f"unknown ablation_mode {self.ablation_mode!r}; choose from {MODES}")

    @property
    def compositional(self) -> bool:
        return self.ablation_mode != "single"


# -- training data ------------------------------------------------------------

@dataclass
class PairSet:
    """Ordered tracklet pairs with per-tracklet feature rows shared by index."""

    F: np.ndarray  # (m, 2048) RoI features
    V: Optional[np.ndarray]  # (m, d) visual embeddings
    sub: np.ndarray  # (n,) row into F/V
    obj: np.ndarray
    FS: np.ndarray  # (n, 12)
    group: np.ndarray  # (n,) motion-pattern group
    Y: np.ndarray  # (n, k) multi-hot base predicates
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sub)

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PairSet(self.F, self.V, self.sub[idx], self.obj[idx], self.FS[idx],
                       self.group[idx], self.Y[idx], [self.keys[i] for i in idx])

    @property
    def positive(self) -> np.ndarray:
        return self.Y.any(axis=1)


def assign_pair_labels(pairs, gt_pairs, base_predicates, iou_threshold: float = 0.5) -> np.ndarray:
    """Multi-hot base-predicate targets for candidate pairs.

    ``pairs`` is a list of ``(sub, obj)`` tracklets; ``gt_pairs`` a list of
    ``(gt_sub, gt_obj, predicates)``. A pair takes the base predicates of the
    GT pair (among those with at least one base predicate) whose weaker
    tracklet vIoU is highest, provided both reach the threshold. Everything
    else is all-zero.
    """
    if not 0 < iou_threshold < 1:
        raise RelClsError("pair_iou_threshold must lie in (0, 1)")
    index = {c: i for i, c in enumerate(base_predicates)}
    usable = [(gs, go, [index[p] for p in preds if p in index]) for gs, go, preds in gt_pairs]
    usable = [u for u in usable if u[2]]
    Y = np.zeros((len(pairs), len(base_predicates)))
    for n, (s, o) in enumerate(pairs):
        best, hot = -1.0, None
        for gs, go, cols in usable:
            if gs.video != s.video:
                continue
            ov = min(viou(s, gs), viou(o, go))
            if ov >= iou_threshold and ov > best:
                best, hot = ov, cols
        if hot is not None:
            Y[n, hot] = 1.0
    return Y


def _gt_pairs_in_segment(video, seg) -> list:
    grouped: dict = {}
    for rel in video.gt.instances:
        grouped.setdefault((rel.sub_id, rel.obj_id), []).append(rel.predicate)
    out = []
    for (sid, oid), preds in sorted(grouped.items()):
        gs = video.gt.tracklet(video.id, sid).clip(seg.start, seg.end - 1)
        go = video.gt.tracklet(video.id, oid).clip(seg.start, seg.end - 1)
        if gs is not None and go is not None:
            out.append((gs, go, preds))
    return out


def build_pair_set(videos, base_predicates, cfg: RelationTrainConfig, use_detections: bool = True,
                   need_embeddings: bool = True) -> PairSet:
    rows: dict = {}
    F, V = [], []
    sub, obj, FS, group, Ys, keys = [], [], [], [], [], []

    def row_of(t):
        key = (t.video, t.id)
        if key not in rows:
            rows[key] = len(F)
            F.append(t.roi_feature)
            if need_embeddings:
                if t.vlm_embedding is None:
                    raise RelClsError(f"tracklet {t.id} in {t.video} has no visual embedding")
                V.append(t.vlm_embedding)
        return rows[key]

    for v in videos:
        cands = v.detections if (use_detections and v.detections) else v.gt_tracklets
        for seg in split_segments(cands, v.n_frames, cfg.seg_len, cfg.stride, v.id):
            pcs = pair_candidates(seg, cfg.gamma, cfg.seg_len)
            if not pcs:
                continue
            Y = assign_pair_labels([(c.sub, c.obj) for c in pcs], _gt_pairs_in_segment(v, seg),
                                   base_predicates, cfg.pair_iou_threshold)
            for c, y in zip(pcs, Y):
                sub.append(row_of(c.sub))
                obj.append(row_of(c.obj))
                FS.append(c.pos_feature)
                group.append(c.pattern_group)
                Ys.append(y)
                keys.append(c.key)
    k = len(base_predicates)
    return PairSet(
        np.array(F, dtype=np.float64).reshape(-1, 2048),
        np.array(V, dtype=np.float64) if need_embeddings and V else None,
        np.array(sub, dtype=np.int64), np.array(obj, dtype=np.int64),
        np.array(FS, dtype=np.float64).reshape(-1, POS_DIM), np.array(group, dtype=np.int64),
        np.array(Ys, dtype=np.float64).reshape(-1, k), keys,
    )


def pair_visual(ps: PairSet, idx, compositional: bool) -> np.ndarray:
    a, b = ps.V[ps.sub[idx]], ps.V[ps.obj[idx]]
    return np.concatenate([a, b], axis=1) if compositional else a - b


def pair_roi(ps: PairSet, idx, compositional: bool) -> np.ndarray:
    a, b = ps.F[ps.sub[idx]], ps.F[ps.obj[idx]]
    return np.concatenate([a, b], axis=1) if compositional else a - b


# -- losses -------------------------------------------------------------------

def grouped_bce(x, groups, Y, tables: dict):
    """Group-averaged positive/negative BCE of ``sigmoid(cos(x, T_g))``.

    Each group present in ``groups`` contributes the mean BCE over its
    positive pairs plus the mean over its negative pairs (per-pair BCE is
    averaged over classes); the total is the mean over present groups.
    Returns ``(loss, dx, dtables)``.
    """
    x = np.asarray(x, dtype=np.float64)
    present = sorted(int(g) for g in np.unique(groups))
    G = len(present)
    dx = np.zeros_like(x)
    dtables, total = {}, 0.0
    k = Y.shape[1]
    for g in present:
        idx = np.flatnonzero(groups == g)
        C, cache = nnkit.cosine_matrix(x[idx], tables[g])
        terms, dz = nnkit.bce_terms(C, Y[idx])
        per = terms.mean(axis=1)
        pos = Y[idx].any(axis=1)
        w = np.zeros(len(idx))
        for mask in (pos, ~pos):
            if mask.any():
                total += per[mask].mean() / G
                w[mask] = 1.0 / (mask.sum() * G)
        dC = dz * (w[:, None] / k)
        dxi, dT = nnkit.cosine_matrix_backward(cache, dC)
        dx[idx] = dxi
        dtables[g] = dT
    return float(total), dx, dtables


def _mlp_from(params: dict, prefix: str) -> nnkit.MlpParams:
    return nnkit.MlpParams(params[f"{prefix}.W1"], params[f"{prefix}.b1"],
                           params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def _mlp_grads(g: nnkit.MlpParams, prefix: str) -> dict:
    return {f"{prefix}.{n}": getattr(g, n) for n in nnkit.MlpParams.NAMES}


def _bank_params(bank: PromptBank) -> dict:
    out = {}
    for g in range(N_GROUPS):
        out[f"bank.group{g}.subj"] = bank.subj[g]
        out[f"bank.group{g}.obj"] = bank.obj[g]
    return out


def _prompt_tables(encoder: TextEncoder, params: dict, groups, tokens, compositional: bool):
    tables, caches = {}, {}
    for g in sorted(int(g) for g in np.unique(groups)):
        es, cs = encoder.encode(params[f"bank.group{g}.subj"], tokens)
        if compositional:
            eo, co = encoder.encode(params[f"bank.group{g}.obj"], tokens)
            tables[g] = np.concatenate([es, eo], axis=1)
            caches[g] = (cs, co)
        else:
            tables[g] = es
            caches[g] = (cs, None)
    return tables, caches


def _prompt_grads(encoder: TextEncoder, caches, dtables, d: int) -> dict:
    grads = {}
    for g, dT in dtables.items():
        cs, co = caches[g]
        grads[f"bank.group{g}.subj"] = encoder.encode_backward(cs, dT[:, :d])
        if co is not None:
            grads[f"bank.group{g}.obj"] = encoder.encode_backward(co, dT[:, d:])
    return grads


def stage1_loss(params: dict, encoder: TextEncoder, tokens, v, fs, groups, Y, compositional: bool = True):
    """Prompt-learning objective on visual embeddings; returns (loss, grads)."""
    phi_pos = _mlp_from(params, "phi_pos")
    pos, pcache = nnkit.mlp_forward(phi_pos, fs)
    x = v + pos
    tables, caches = _prompt_tables(encoder, params, groups, tokens, compositional)
    loss, dx, dtables = grouped_bce(x, groups, Y, tables)
    g_pos, _ = nnkit.mlp_backward(phi_pos, pcache, dx, need_dx=False)
    grads = _mlp_grads(g_pos, "phi_pos")
    grads.update(_prompt_grads(encoder, caches, dtables, encoder.d))
    return loss, grads


def stage2_loss(params: dict, phi_pos: nnkit.MlpParams, tables: dict, f, fs, groups, Y):
    """V2L objective against frozen tables; only ``phi_p.*`` receives gradients."""
    phi_p = _mlp_from(params, "phi_p")
    y, cache = nnkit.mlp_forward(phi_p, f)
    x = y + nnkit.mlp_forward(phi_pos, fs)[0]
    loss, dx, _ = grouped_bce(x, groups, Y, tables)
    g, _ = nnkit.mlp_backward(phi_p, cache, dx, need_dx=False)
    return loss, _mlp_grads(g, "phi_p")


def joint_loss(params: dict, encoder: TextEncoder, tokens, f, v, fs, groups, Y,
               align_weight: float, compositional: bool = True):
    """Single-stage objective: BCE through ``phi_p`` plus l1 alignment to ``v``."""
    phi_p = _mlp_from(params, "phi_p")
    phi_pos = _mlp_from(params, "phi_pos")
    y, ycache = nnkit.mlp_forward(phi_p, f)
    pos, pcache = nnkit.mlp_forward(phi_pos, fs)
    tables, caches = _prompt_tables(encoder, params, groups, tokens, compositional)
    loss, dx, dtables = grouped_bce(y + pos, groups, Y, tables)
    dy = dx.copy()
    if align_weight > 0:
        diff = y - v
        loss += align_weight * float(np.abs(diff).sum(axis=1).mean())
        dy += align_weight * np.sign(diff) / len(y)
    g_p, _ = nnkit.mlp_backward(phi_p, ycache, dy, need_dx=False)
    g_pos, _ = nnkit.mlp_backward(phi_pos, pcache, dx, need_dx=False)
    grads = _mlp_grads(g_p, "phi_p")
    grads.update(_mlp_grads(g_pos, "phi_pos"))
    grads.update(_prompt_grads(encoder, caches, dtables, encoder.d))
    return loss, grads


# -- metrics used for model selection ------------------------------------------

def average_precision(scores, labels) -> float:
    """All-point AP of one class (labels in {0,1}); NaN without positives."""
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        return float("nan")
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    prec = tp / np.arange(1, len(hits) + 1)
    return float(prec[hits].sum() / hits.sum())


def mean_ap(P, Y) -> float:
    aps = [average_precision(P[:, c], Y[:, c]) for c in range(Y.shape[1])]
    aps = [a for a in aps if not np.isnan(a)]
    return float(np.mean(aps)) if aps else float("nan")


def grouped_probs(x, groups, tables: dict) -> np.ndarray:
    """``sigmoid(cos(x, T_g))`` with each row scored against its own group table."""
    k = next(iter(tables.values())).shape[0]
    out = np.zeros((len(x), k))
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        out[idx] = nnkit.sigmoid(nnkit.cosine_matrix(x[idx], tables[int(g)])[0])
    return out


def _selection_score(P, Y) -> float:
    """Validation mean AP; -inf when undefined so any defined score wins."""
    m = mean_ap(P, Y)
    return -np.inf if np.isnan(m) else m


# -- model ----------------------------------------------------------------------

@dataclass
class RelationHead:
    mode: str
    encoder: TextEncoder
    bank: PromptBank
    phi_pos: nnkit.MlpParams
    base_predicates: list
    phi_p: Optional[nnkit.MlpParams] = None
    cached: Optional[np.ndarray] = None  # (groups, k, D)
    predicates: list = field(default_factory=list)  # inference vocabulary
    rand_seed: int = 0
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def compositional(self) -> bool:
        return self.mode != "single"

    def set_vocabulary(self, names) -> None:
        unknown = [n for n in names if not n]
        if unknown:
            raise RelClsError("empty predicate name")
        self.predicates = list(names)
        self._tables = {}

    def group_table(self, g: int) -> np.ndarray:
        """Text table over ``self.predicates`` for group ``g``.

        Base rows come from the frozen cache; other rows are encoded on demand
        from the frozen contexts.
        """
        if g in self._tables:
            return self._tables[g]
        if self.cached is None:
            raise RelClsError("text embeddings are not cached; run freeze_and_cache_text_embeddings")
        names = self.predicates or list(self.base_predicates)
        base_index = {c: i for i, c in enumerate(self.base_predicates)}
        novel = [n for n in names if n not in base_index]
        rows = {}
        if novel:
            extra = predicate_table(self.encoder, self.bank, g, self.encoder.tokens(novel), self.compositional)
            rows = dict(zip(novel, extra))
        T = np.stack([self.cached[g, base_index[n]] if n in base_index else rows[n] for n in names])
        self._tables[g] = T
        return T

    def _groups_for(self, cands) -> np.ndarray:
        if self.mode == "repro":
            return np.array([c.pattern_group for c in cands], dtype=np.int64)
        if self.mode == "rand":
            return np.array([_hashed_group(c.key, self.rand_seed) for c in cands], dtype=np.int64)
        return np.zeros(len(cands), dtype=np.int64)

    def _tables_for(self, groups) -> dict:
        if self.mode == "ens":
            T = np.mean([self.group_table(g) for g in range(N_GROUPS)], axis=0)
            return {int(g): T for g in np.unique(groups)}
        return {int(g): self.group_table(int(g)) for g in np.unique(groups)}

    def _score(self, x, groups) -> np.ndarray:
        tables = self._tables_for(groups)
        out = np.zeros((len(x), len(self.predicates or self.base_predicates)))
        for g, T in tables.items():
            idx = np.flatnonzero(groups == g)
            C, _ = nnkit.cosine_matrix(x[idx], T)
            out[idx] = nnkit.sigmoid(C)
        return out

    def _pos(self, cands) -> np.ndarray:
        fs = np.stack([c.pos_feature for c in cands])
        return nnkit.mlp_forward(self.phi_pos, fs)[0]

    def visual_vectors(self, cands) -> np.ndarray:
        a = np.stack([c.sub.vlm_embedding for c in cands])
        b = np.stack([c.obj.vlm_embedding for c in cands])
        return np.concatenate([a, b], axis=1) if self.compositional else a - b

    def roi_vectors(self, cands) -> np.ndarray:
        a = np.stack([c.sub.roi_feature for c in cands])
        b = np.stack([c.obj.roi_feature for c in cands])
        return np.concatenate([a, b], axis=1) if self.compositional else a - b

    def predict_stage1(self, cands) -> np.ndarray:
        """Probabilities from visual embeddings (needs exported embeddings)."""
        if any(c.sub.vlm_embedding is None or c.obj.vlm_embedding is None for c in cands):
            raise RelClsError("stage-1 scoring needs visual embeddings on both tracklets")
        return self._score(self.visual_vectors(cands) + self._pos(cands), self._groups_for(cands))

    def predict(self, cands) -> np.ndarray:
        """Probabilities from RoI features and position features only."""
        if self.phi_p is None:
            raise RelClsError("phi_p is not trained; run the V2L stage first")
        if not cands:
            return np.zeros((0, len(self.predicates or self.base_predicates)))
        y = nnkit.mlp_forward(self.phi_p, self.roi_vectors(cands))[0]
        return self._score(y + self._pos(cands), self._groups_for(cands))

    def tensors(self) -> dict:
        out = dict(self.bank.tensors())
        out.update(self.phi_pos.tensors("phi_pos"))
        if self.phi_p is not None:
            out.update(self.phi_p.tensors("phi_p"))
        if self.cached is not None:
            for g in range(N_GROUPS):
                out[f"cached_text.g{g}"] = self.cached[g]
        return out

    def meta(self) -> dict:
        m = self.bank.meta()
        m.update(self.encoder.meta())
        m.update({"mode": self.mode, "base_predicates": list(self.base_predicates),
                  "rand_seed": self.rand_seed})
        return m

    @classmethod
    def from_tensors(cls, tensors: dict, meta: dict) -> "RelationHead":
        enc = TextEncoder.from_meta(meta)
        cached = None
        if "cached_text.g0" in tensors:
            cached = np.stack([tensors[f"cached_text.g{g}"] for g in range(N_GROUPS)])
        phi_p = nnkit.MlpParams.from_tensors(tensors, "phi_p") if "phi_p.W1" in tensors else None
        return cls(meta["mode"], enc, PromptBank.from_tensors(tensors, meta),
                   nnkit.MlpParams.from_tensors(tensors, "phi_pos"), list(meta["base_predicates"]),
                   phi_p, cached, rand_seed=int(meta.get("rand_seed", 0)))


def _hashed_group(key, seed: int) -> int:
    digest = hashlib.sha256(repr((seed,) + tuple(key)).encode()).digest()
    return digest[0] % N_GROUPS


def predicate_probs_stage1(head: RelationHead, cand) -> np.ndarray:
    return head.predict_stage1([cand])[0]


def predicate_probs_stage2(head: RelationHead, cand) -> np.ndarray:
    return head.predict([cand])[0]


def freeze_and_cache_text_embeddings(head: RelationHead) -> np.ndarray:
    """Compute the (groups, base classes, D) table from the frozen bank."""
    tokens = head.encoder.tokens(head.base_predicates)
    head.cached = np.stack([predicate_table(head.encoder, head.bank, g, tokens, head.compositional)
                            for g in range(N_GROUPS)])
    head._tables = {}
    return head.cached


def score_pair_open_vocab(head: RelationHead, cand, predicates) -> list:
    """``[(predicate, probability)]`` over ``predicates`` sorted by descending score."""
    for p in predicates:
        if not isinstance(p, str) or not p:
            raise RelClsError(f"unknown predicate {p!r}")
    if list(predicates) != head.predicates:
        head.set_vocabulary(predicates)
    probs = head.predict([cand])[0]
    order = np.argsort(-probs, kind="stable")
    return [(head.predicates[i], float(probs[i])) for i in order]


# -- training loops ---------------------------------------------------------------

def position_branch_init(hidden: int, n_out: int, rng: np.random.Generator) -> nnkit.MlpParams:
    """``phi_pos`` with a zero output layer, so the additive branch starts silent."""
    p = nnkit.MlpParams.init(POS_DIM, hidden, n_out, rng)
    p.W2[...] = 0.0
    p.b2[...] = 0.0
    return p


def _split_val(videos, fraction: float):
    n_val = int(round(fraction * len(videos)))
    return videos[: len(videos) - n_val], videos[len(videos) - n_val:]


def _training_groups(ps: PairSet, idx, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode in ("repro", "repro_dagger"):
        return ps.group[idx]
    if mode in ("ens", "rand"):
        return rng.integers(0, N_GROUPS, size=len(idx))
    return np.zeros(len(idx), dtype=np.int64)


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order, cursor = rng.permutation(n), 0
    for _ in range(steps):
        if cursor + batch_size > n:
            order, cursor = rng.permutation(n), 0
        yield order[cursor: cursor + batch_size]
        cursor += batch_size


@dataclass
class TrainLog:
    history: list = field(default_factory=list)  # (step, running loss, val metric)


def _check_pairs(ps: PairSet) -> None:
    if len(ps) == 0 or not ps.positive.any():
        raise RelClsError("no positive tracklet pairs in the training split")


def _val_groups(ps: PairSet, mode: str) -> np.ndarray:
    if mode in ("repro", "repro_dagger"):
        return ps.group
    if mode in ("ens", "rand"):
        return np.array([_hashed_group(k, 0) for k in ps.keys], dtype=np.int64)
    return np.zeros(len(ps), dtype=np.int64)


def stage1_train_prompts(dataset, cfg: RelationTrainConfig, encoder: TextEncoder,
                         pairs: Optional[tuple] = None) -> tuple:
    """Learn the prompt bank and ``phi_pos``; returns ``(RelationHead, TrainLog)``.

    ``pairs`` may pass prebuilt ``(train, val)`` PairSets.
    """
    if cfg.ablation_mode == "repro_dagger":
        raise RelClsError("repro_dagger trains jointly; use joint_train_repro_dagger")
    base = list(dataset.predicates.base)
    train, val = pairs or _pairs_for(dataset, cfg, base)
    _check_pairs(train)
    comp = cfg.compositional
    rng = np.random.default_rng(cfg.seed)
    D = 2 * encoder.d if comp else encoder.d
    bank = PromptBank.init(rng, cfg.prompt_length, encoder.d_tok, vocab_seed=encoder.vocab_seed,
                           encoder_seed=encoder.encoder_seed)
    phi_pos = position_branch_init(cfg.hidden, D, rng)
    params = _bank_params(bank)
    params.update(_mlp_grads(phi_pos, "phi_pos"))
    tokens = encoder.tokens(base)
    state = nnkit.AdamState.for_params(params)
    vgroups = _val_groups(val, cfg.ablation_mode) if len(val) else None
    best, best_score, logbook, window = None, -np.inf, TrainLog(), []
    for step, idx in enumerate(_batches(len(train), cfg.batch_size, cfg.steps, rng), 1):
        groups = _training_groups(train, idx, cfg.ablation_mode, rng)
        loss, grads = stage1_loss(params, encoder, tokens, pair_visual(train, idx, comp),
                                  train.FS[idx], groups, train.Y[idx], comp)
        nnkit.adam_step(params, grads, state, cfg.lr)
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            running = float(np.mean(window[-50:]))
            score = -running
            if vgroups is not None:
                tables, _ = _prompt_tables(encoder, params, vgroups, tokens, comp)
                x = pair_visual(val, slice(None), comp) + nnkit.mlp_forward(_mlp_from(params, "phi_pos"), val.FS)[0]
                score = _selection_score(grouped_probs(x, vgroups, tables), val.Y)
            logbook.history.append((step, running, score))
            log.info("stage1 step %d loss %.4f val mAP %.4f", step, running, score)
            if score > best_score or best is None:
                best_score = score
                best = {k: a.copy() for k, a in params.items()}
    if best is not None:
        for k, a in best.items():
            params[k][...] = a
    head = RelationHead(cfg.ablation_mode, encoder, bank, phi_pos, base, rand_seed=cfg.seed)
    return head, logbook


def stage2_train_v2l(dataset, head: RelationHead, cfg: RelationTrainConfig,
                     pairs: Optional[tuple] = None) -> TrainLog:
    """Train ``head.phi_p`` against the frozen, cached text tables.

    The bank, ``phi_pos`` and cached tables are never written.
    """
    if head.cached is None:
        raise RelClsError("stage 2 needs cached text embeddings from a frozen bank")
    base = list(head.base_predicates)
    train, val = pairs or _pairs_for(dataset, cfg, base, need_embeddings=False)
    _check_pairs(train)
    comp = head.compositional
    rng = np.random.default_rng([cfg.seed, 2])
    D = head.cached.shape[2]
    n_in = train.F.shape[1] * (2 if comp else 1)
    head.phi_p = nnkit.MlpParams.init(n_in, cfg.hidden, D, rng)
    params = _mlp_grads(head.phi_p, "phi_p")
    tables = {g: head.cached[g] for g in range(N_GROUPS)}
    if head.mode == "ens":
        pass  # random groups in training, averaged tables only at inference
    state = nnkit.AdamState.for_params(params)
    vgroups = _val_groups(val, head.mode) if len(val) else None
    vf = pair_roi(val, slice(None), comp) if len(val) else None
    vpos = nnkit.mlp_forward(head.phi_pos, val.FS)[0] if len(val) else None
    best, best_score, logbook, window = None, -np.inf, TrainLog(), []
    for step, idx in enumerate(_batches(len(train), cfg.batch_size, cfg.steps, rng), 1):
        groups = _training_groups(train, idx, head.mode, rng)
        loss, grads = stage2_loss(params, head.phi_pos, tables, pair_roi(train, idx, comp),
                                  train.FS[idx], groups, train.Y[idx])
        nnkit.adam_step(params, grads, state, cfg.lr)
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            running = float(np.mean(window[-50:]))
            score = -running
            if vgroups is not None:
                x = nnkit.mlp_forward(head.phi_p, vf)[0] + vpos
                score = _selection_score(grouped_probs(x, vgroups, tables), val.Y)
            logbook.history.append((step, running, score))
            log.info("stage2 step %d loss %.4f val mAP %.4f", step, running, score)
            if score > best_score or best is None:
                best_score = score
                best = {k: a.copy() for k, a in params.items()}
    if best is not None:
        for k, a in best.items():
            params[k][...] = a
    return logbook


def joint_train_repro_dagger(dataset, cfg: RelationTrainConfig, encoder: TextEncoder,
                             pairs: Optional[tuple] = None) -> tuple:
    """Train prompts, ``phi_pos`` and ``phi_p`` together (returns head, log)."""
    base = list(dataset.predicates.base)
    train, val = pairs or _pairs_for(dataset, cfg, base)
    _check_pairs(train)
    rng = np.random.default_rng(cfg.seed)
    D = 2 * encoder.d
    bank = PromptBank.init(rng, cfg.prompt_length, encoder.d_tok, vocab_seed=encoder.vocab_seed,
                           encoder_seed=encoder.encoder_seed)
    phi_pos = position_branch_init(cfg.hidden, D, rng)
    phi_p = nnkit.MlpParams.init(2 * train.F.shape[1], cfg.hidden, D, np.random.default_rng([cfg.seed, 2]))
    params = _bank_params(bank)
    params.update(_mlp_grads(phi_pos, "phi_pos"))
    params.update(_mlp_grads(phi_p, "phi_p"))
    tokens = encoder.tokens(base)
    state = nnkit.AdamState.for_params(params)
    vf = pair_roi(val, slice(None), True) if len(val) else None
    best, best_score, logbook, window = None, -np.inf, TrainLog(), []
    for step, idx in enumerate(_batches(len(train), cfg.batch_size, cfg.steps, rng), 1):
        loss, grads = joint_loss(params, encoder, tokens, pair_roi(train, idx, True),
                                 pair_visual(train, idx, True), train.FS[idx], train.group[idx],
                                 train.Y[idx], cfg.align_weight)
        nnkit.adam_step(params, grads, state, cfg.lr)
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            running = float(np.mean(window[-50:]))
            score = -running
            if len(val):
                tables, _ = _prompt_tables(encoder, params, val.group, tokens, True)
                x = nnkit.mlp_forward(phi_p, vf)[0] + nnkit.mlp_forward(phi_pos, val.FS)[0]
                score = _selection_score(grouped_probs(x, val.group, tables), val.Y)
            logbook.history.append((step, running, score))
            log.info("joint step %d loss %.4f val mAP %.4f", step, running, score)
            if score > best_score or best is None:
                best_score = score
                best = {k: a.copy() for k, a in params.items()}
    if best is not None:
        for k, a in best.items():
            params[k][...] = a
    head = RelationHead("repro_dagger", encoder, bank, phi_pos, base, phi_p=phi_p, rand_seed=cfg.seed)
    freeze_and_cache_text_embeddings(head)
    return head, logbook


def _pairs_for(dataset, cfg: RelationTrainConfig, base, need_embeddings: bool = True) -> tuple:
    train_v, val_v = _split_val(dataset.split("train"), cfg.val_fraction)
    return (build_pair_set(train_v, base, cfg, need_embeddings=need_embeddings),
            build_pair_set(val_v, base, cfg, need_embeddings=need_embeddings))

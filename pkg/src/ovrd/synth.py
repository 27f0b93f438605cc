"""Planted-model synthetic datasets.

Each relation gets its own subject and object tracklets whose boxes realize
the motion pattern scripted for its predicate (checked with
:func:`motion_pattern` before writing). Visual embeddings are planted
prototypes plus noise::

    v_sub = normalize(a * t_obj(class) + b * sum_c enc(S*_g, w_c) + sigma * n)
    v_obj = normalize(a * t_obj(class) + b * sum_c enc(O*_g, w_c) + sigma * n)

where ``S*_g``/``O*_g`` are hidden per-group contexts and ``w_c`` the class
tokens of the pair's predicates. RoI features are a fixed random linear lift of
the embedding plus noise. Training videos use base categories only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ROI_FEATURE_DIM, Tracklet, giou
from .motion import DEFAULT_GAMMA, N_GROUPS, PATTERN_TABLE, motion_pattern
from .tensorio import Vocabulary, write_manifest, write_tensor
from .textenc import TextEncoder, class_token, object_text_embedding

OBJECT_POOL = ("adult", "child", "dog", "car", "ball", "cat", "bicycle", "horse", "bird", "chair",
               "sofa", "toy", "bus", "sheep", "duck", "monkey")
PREDICATE_POOL = ("walk_toward", "run_away", "stand_front", "sit_next_to", "move_past", "fly_above",
                  "creep_behind", "lie_with", "jump_toward", "swim_away", "follow", "chase",
                  "watch", "ride", "touch", "play")
# default group per predicate: base then novel
DEFAULT_BASE_SCRIPT = (0, 0, 1, 1, 4, 4, 5, 5)
DEFAULT_NOVEL_SCRIPT = (0, 1, 4, 5)


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_videos: int = 200
    n_frames: int = 30
    n_object_base: int = 6
    n_object_novel: int = 3
    n_predicate_base: int = 8
    n_predicate_novel: int = 4
    motion_script: Optional[dict] = None  # predicate name -> group id
    relations_per_video: tuple = (2, 3)
    test_fraction: float = 0.3
    novel_predicate_prob: float = 0.5
    multi_label_prob: float = 0.2
    sigma: float = 0.3  # embedding noise
    feature_noise: float = 0.01
    object_weight: float = 1.0
    predicate_weight: float = 1.0
    context_scale: float = 0.06
    novel_token_blend: bool = True  # novel tokens blend the base tokens of their group
    novel_token_noise: float = 0.3
    miss_prob: float = 0.05
    distractors: int = 1
    box_jitter: float = 1.5
    gamma: float = DEFAULT_GAMMA
    encoder_seed: int = 0
    vocab_seed: int = 0
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("n_videos", "n_frames", "n_object_base", "n_object_novel",
                     "n_predicate_base", "n_predicate_novel"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if self.n_frames < 2:
            raise SynthError("n_frames must be >= 2")
        if self.n_object_base + self.n_object_novel > len(OBJECT_POOL):
            raise SynthError(f"at most {len(OBJECT_POOL)} object categories")
        if self.n_predicate_base + self.n_predicate_novel > len(PREDICATE_POOL):
            raise SynthError(f"at most {len(PREDICATE_POOL)} predicate categories")
        if self.sigma < 0 or self.feature_noise < 0:
            raise SynthError("noise levels must be non-negative")
        self.relations_per_video = tuple(self.relations_per_video)

    @property
    def objects(self) -> Vocabulary:
        n = self.n_object_base
        return Vocabulary(list(OBJECT_POOL[:n]), list(OBJECT_POOL[n: n + self.n_object_novel]))

    @property
    def predicates(self) -> Vocabulary:
        n = self.n_predicate_base
        return Vocabulary(list(PREDICATE_POOL[:n]), list(PREDICATE_POOL[n: n + self.n_predicate_novel]))

    def script(self) -> dict:
        """Predicate -> motion group, filling unscripted names from the defaults."""
        preds = self.predicates
        out = {}
        for i, name in enumerate(preds.base):
            out[name] = DEFAULT_BASE_SCRIPT[i % len(DEFAULT_BASE_SCRIPT)]
        for i, name in enumerate(preds.novel):
            out[name] = DEFAULT_NOVEL_SCRIPT[i % len(DEFAULT_NOVEL_SCRIPT)]
        for name, g in (self.motion_script or {}).items():
            if name not in out:
                raise SynthError(f"motion script names unknown predicate {name!r}")
            if not 0 <= int(g) < N_GROUPS:
                raise SynthError(f"motion script group {g} for {name!r} outside 0..{N_GROUPS - 1}")
            out[name] = int(g)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relations_per_video"] = list(self.relations_per_video)
        return d


# -- box synthesis ----------------------------------------------------------------

def _target_gious(group: int, gamma: float, rng: np.random.Generator) -> tuple[float, float]:
    """Start/end GIoU values whose signs relative to ``gamma`` realize ``group``."""
    hi = (gamma + 0.15, 0.8)
    lo = (-0.85, gamma - 0.15)
    s1, s2, s3 = PATTERN_TABLE[group]
    rs = hi if s1 == "+" else lo
    re_ = hi if s2 == "+" else lo
    # GIoU lives in (-1, 1]; an empty range means gamma leaves no room for the sign
    if any(r[0] >= r[1] or r[1] <= -1.0 or r[0] >= 1.0 for r in (rs, re_)):
        raise SynthError(f"motion group {group} is unreachable with gamma={gamma}")
    for _ in range(1000):
        gs, ge = rng.uniform(*rs), rng.uniform(*re_)
        if s1 == s2 and abs(ge - gs) < 0.1:
            continue
        if (ge - gs >= 0) == (s3 == "+"):
            return float(gs), float(ge)
    raise SynthError(f"cannot sample GIoU targets for group {group}")


def _offset_box(box, direction, dist):
    cx, cy = direction * dist
    return np.array([box[0] + cx, box[1] + cy, box[2] + cx, box[3] + cy])


def _distance_for_giou(box, direction, target: float) -> float:
    """Bisection on the offset that gives ``giou(box, moved box) == target``."""
    lo, hi = 0.0, 1.0
    while giou(box, _offset_box(box, direction, hi)) > target:
        hi *= 2.0
        if hi > 1e7:
            raise SynthError("GIoU target unreachable")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if giou(box, _offset_box(box, direction, mid)) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synth_pair_boxes(group: int, n_frames: int, gamma: float, rng: np.random.Generator,
                     origin=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Subject/object box sequences whose motion pattern is ``group``."""
    w, h = rng.uniform(40, 120), rng.uniform(40, 120)
    x0, y0 = origin[0] + rng.uniform(0, 400), origin[1] + rng.uniform(0, 400)
    vel = rng.normal(0, 1.5, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(theta), np.sin(theta)])
    gs, ge = _target_gious(group, gamma, rng)
    base = np.array([0.0, 0.0, w, h])
    ds = _distance_for_giou(base, direction, gs)
    de = _distance_for_giou(base, direction, ge)
    sub, obj = [], []
    for k in range(n_frames):
        a = k / (n_frames - 1)
        sb = np.array([x0, y0, x0 + w, y0 + h]) + np.tile(vel * k, 2)
        sub.append(sb)
        obj.append(_offset_box(sb, direction, (1 - a) * ds + a * de))
    return np.array(sub), np.array(obj)


# -- generation -----------------------------------------------------------------

@dataclass
class PlantedModel:
    subj_ctx: np.ndarray  # (groups, L, d_tok)
    obj_ctx: np.ndarray
    lift: np.ndarray  # (2048, d)
    encoder: TextEncoder
    objects: list
    predicates: list
    script: dict
    object_weight: float
    predicate_weight: float

    def prototype(self, obj_cls: str, predicates, group: int, role: str) -> np.ndarray:
        ctx = self.subj_ctx[group] if role == "sub" else self.obj_ctx[group]
        t = object_text_embedding(self.encoder, self.encoder.token(obj_cls))
        p = self.encoder.encode(ctx, self.encoder.tokens(list(predicates)))[0].sum(axis=0)
        return self.object_weight * t + self.predicate_weight * p


def novel_token_overrides(cfg: SynthConfig) -> dict:
    """Novel predicate tokens as noisy blends of the base tokens in the same group."""
    if not cfg.novel_token_blend:
        return {}
    script = cfg.script()
    preds = cfg.predicates
    rng = np.random.default_rng([cfg.seed, 0x70C])
    out = {}
    for name in preds.novel:
        members = [b for b in preds.base if script[b] == script[name]]
        if not members:
            continue
        mix = sum(class_token(b, cfg.vocab_seed).vector for b in members)
        mix = mix / np.linalg.norm(mix)
        r = rng.standard_normal(mix.shape)
        w = mix + cfg.novel_token_noise * r / np.linalg.norm(r)
        out[name] = w / np.linalg.norm(w)
    return out


def planted_model(cfg: SynthConfig, length: int = 10) -> PlantedModel:
    enc = TextEncoder(cfg.encoder_seed, cfg.vocab_seed, token_overrides=novel_token_overrides(cfg))
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    shape = (N_GROUPS, length, enc.d_tok)
    subj = cfg.context_scale * rng.standard_normal(shape)
    obj = cfg.context_scale * rng.standard_normal(shape)
    lift = rng.standard_normal((ROI_FEATURE_DIM, enc.d)) / np.sqrt(enc.d)
    return PlantedModel(subj, obj, lift, enc, cfg.objects.all, cfg.predicates.all, cfg.script(),
                        cfg.object_weight, cfg.predicate_weight)


def _embedding(proto: np.ndarray, sigma: float, rng) -> np.ndarray:
    v = proto + sigma * rng.standard_normal(proto.shape) / np.sqrt(proto.size) * np.linalg.norm(proto)
    return v / np.linalg.norm(v)


def gen_synth(cfg: SynthConfig, out_dir) -> Path:
    """Write a dataset (manifest, tensors, per-video JSONL) and return the manifest path."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    model = planted_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    objects, predicates = cfg.objects, cfg.predicates
    script = model.script
    by_group: dict = {}
    for name, g in script.items():
        by_group.setdefault(g, []).append(name)
    n_test = max(1, int(round(cfg.test_fraction * cfg.n_videos)))
    n_train = cfg.n_videos - n_test
    feats, embs, entries = [], [], []

    def add_rows(v):
        embs.append(v)
        feats.append(model.lift @ v + cfg.feature_noise * rng.standard_normal(ROI_FEATURE_DIM))
        return len(feats) - 1

    for vi in range(cfg.n_videos):
        vid = f"v{vi:04d}"
        split = "train" if vi < n_train else "test"
        obj_pool = objects.base if split == "train" else objects.all
        tracks, anns, dets = [], [], []
        lo, hi = cfg.relations_per_video
        for ri in range(int(rng.integers(lo, hi + 1))):
            if split == "train" or rng.random() >= cfg.novel_predicate_prob:
                pred = predicates.base[int(rng.integers(len(predicates.base)))]
            else:
                pred = predicates.novel[int(rng.integers(len(predicates.novel)))]
            group = script[pred]
            preds = [pred]
            allowed = [p for p in by_group[group] if p != pred
                       and (split == "test" or p in predicates.base)
                       and predicates.is_novel(p) == predicates.is_novel(pred)]
            if allowed and rng.random() < cfg.multi_label_prob:
                preds.append(allowed[int(rng.integers(len(allowed)))])
            s_cls = obj_pool[int(rng.integers(len(obj_pool)))]
            o_cls = obj_pool[int(rng.integers(len(obj_pool)))]
            for attempt in range(cfg.max_retries):
                sb, ob = synth_pair_boxes(group, cfg.n_frames, cfg.gamma, rng, origin=(ri * 600.0, 0.0))
                ts, to = Tracklet("s", vid, 0, sb), Tracklet("o", vid, 0, ob)
                if motion_pattern(ts, to, cfg.gamma).index == group:
                    break
            else:
                raise SynthError(f"could not realize motion group {group} for {pred!r}")
            for role, cls, boxes in (("sub", s_cls, sb), ("obj", o_cls, ob)):
                v = _embedding(model.prototype(cls, preds, group, role), cfg.sigma, rng)
                row = add_rows(v)
                tid = f"t{ri}{role[0]}"
                tracks.append({"id": tid, "video": vid, "start_frame": 0, "boxes": boxes.tolist(),
                               "feature_ref": ["features.bin", row], "embedding_ref": ["embeddings.bin", row]})
                if rng.random() >= cfg.miss_prob:
                    jit = boxes + cfg.box_jitter * rng.standard_normal(boxes.shape)
                    jit[:, 2:] = np.maximum(jit[:, 2:], jit[:, :2] + 1.0)
                    dets.append({"id": f"d{ri}{role[0]}", "video": vid, "start_frame": 0,
                                 "boxes": jit.tolist(), "feature_ref": ["features.bin", row],
                                 "embedding_ref": ["embeddings.bin", row]})
            for p in preds:
                anns.append({"video": vid, "sub_id": f"t{ri}s", "obj_id": f"t{ri}o",
                             "predicate": p, "sub_cls": s_cls, "obj_cls": o_cls})
        for di in range(cfg.distractors):
            cls = obj_pool[int(rng.integers(len(obj_pool)))]
            t = object_text_embedding(model.encoder, model.encoder.token(cls))
            row = add_rows(_embedding(cfg.object_weight * t, cfg.sigma, rng))
            x0, y0 = rng.uniform(0, 400), 700.0 + rng.uniform(0, 200)
            w, h = rng.uniform(40, 120), rng.uniform(40, 120)
            boxes = np.array([[x0 + k, y0, x0 + k + w, y0 + h] for k in range(cfg.n_frames)])
            dets.append({"id": f"x{di}", "video": vid, "start_frame": 0, "boxes": boxes.tolist(),
                         "feature_ref": ["features.bin", row], "embedding_ref": ["embeddings.bin", row]})
        paths = {}
        for kind, recs in (("tracks", tracks), ("ann", anns), ("det", dets)):
            rel = f"videos/{vid}.{kind}.jsonl"
            (out / rel).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in recs))
            paths[kind] = rel
        entries.append({"id": vid, "split": split, "n_frames": cfg.n_frames, "tracklets": paths["tracks"],
                        "annotations": paths["ann"], "detections": paths["det"]})

    F = np.array(feats)
    V = np.array(embs)
    write_tensor(out / "features.bin", F.shape, F)
    write_tensor(out / "embeddings.bin", V.shape, V)
    meta = {"generator": "synthetic", "config": cfg.to_dict(), "motion_script": script}
    meta.update(model.encoder.meta())
    manifest = out / "manifest.json"
    write_manifest(manifest, objects, predicates, entries, ["features.bin", "embeddings.bin"], meta)
    return manifest

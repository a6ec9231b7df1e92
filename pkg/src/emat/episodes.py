"""N-way K-shot episode construction, object-size tools, metrics, and text formats.

Three settings share one base sampler:
  original — each support image keeps only its sampled class annotation.
  partial  — annotations of other *support* classes are restored; multi-class
             images are duplicated one class per shot; short classes are topped
             up by duplicating their own shots.
  full     — like partial, but non-support classes are restored too and join
             the episode as extra ways.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, SamplingError, ValidationError
from .ioutil import atomic_write_text, read_json_file

THETA_PRESETS = {"pascal": 0.07, "coco": 0.03}

_SIZE_BUCKETS = ((0.0, 0.05), (0.05, 0.10), (0.10, 0.15))


# ---------------------------------------------------------------- domain types

@dataclass
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    annotations: Dict[int, np.ndarray]  # class id -> binary [height, width]

    def __post_init__(self):
        occupancy = np.zeros((self.height, self.width), dtype=np.int32)
        for cid, mask in self.annotations.items():
            mask = np.asarray(mask)
            if mask.shape != (self.height, self.width):
                raise ValidationError(
                    f"image {self.image_id}: class {cid} mask {mask.shape} vs "
                    f"extent ({self.height}, {self.width})")
            if not np.all((mask == 0) | (mask == 1)):
                raise ValidationError(f"image {self.image_id}: class {cid} mask not binary")
            occupancy += mask.astype(np.int32)
        if np.any(occupancy > 1):
            raise ValidationError(f"image {self.image_id}: class masks overlap")

    def area_fraction(self, cid: int) -> float:
        return float(self.annotations[cid].sum()) / (self.height * self.width)


@dataclass
class Pool:
    profile: str
    classes: Dict[int, str]
    images: List[AnnotatedImage]

    def __post_init__(self):
        ids = [img.image_id for img in self.images]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in pool")
        for img in self.images:
            missing = set(img.annotations) - set(self.classes)
            if missing:
                raise ValidationError(
                    f"image {img.image_id} annotates unknown classes {sorted(missing)}")

    def index(self) -> Dict[str, AnnotatedImage]:
        return {img.image_id: img for img in self.images}


@dataclass
class Shot:
    class_id: int
    image_id: str
    mask: np.ndarray


@dataclass
class Episode:
    setting: str
    seed: int
    n: int
    k: int
    theta: float
    class_ids: List[int]
    support: Dict[int, List[Shot]]
    query_id: str

    @property
    def effective_ways(self) -> int:
        return len(self.class_ids)

    def shots_per_class(self) -> Dict[int, int]:
        return {cid: len(self.support[cid]) for cid in self.class_ids}


# ---------------------------------------------------------------- construction

def _sample_base(pool: Pool, n: int, k: int, rng: np.random.Generator):
    if n < 1 or k < 1:
        raise ValidationError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    if not pool.images:
        raise SamplingError("pool has no images")
    index = pool.index()
    by_class = {cid: sorted(img.image_id for img in pool.images if cid in img.annotations)
                for cid in sorted(pool.classes)}
    eligible = [cid for cid in sorted(pool.classes) if len(by_class[cid]) >= k]
    if len(eligible) < n:
        raise SamplingError(
            f"{len(eligible)} classes have >= {k} images, need {n}")
    chosen = sorted(int(c) for c in rng.choice(np.array(eligible), size=n, replace=False))

    used: set = set()
    support: Dict[int, List[Shot]] = {}
    for cid in chosen:
        avail = [iid for iid in by_class[cid] if iid not in used]
        if len(avail) < k:
            raise SamplingError(
                f"class {cid}: only {len(avail)} unused images, need {k}")
        picks = [str(p) for p in rng.choice(np.array(avail), size=k, replace=False)]
        used.update(picks)
        support[cid] = [Shot(cid, iid, index[iid].annotations[cid]) for iid in picks]

    remaining = sorted(iid for iid in index if iid not in used)
    candidates = remaining if remaining else sorted(index)
    query_id = str(rng.choice(np.array(candidates)))
    return chosen, support, query_id


def _augment(pool: Pool, cap: int, theta: float, rng: np.random.Generator,
             chosen: List[int], support: Dict[int, List[Shot]],
             restrict_to_support: bool):
    index = pool.index()
    class_ids = list(chosen)
    # restore pass over the base shots only; appended shots are never re-scanned
    for cid in chosen:
        for shot in list(support[cid]):
            img = index[shot.image_id]
            for c2 in sorted(img.annotations):
                if c2 == shot.class_id:
                    continue
                if restrict_to_support and c2 not in chosen:
                    continue
                if img.area_fraction(c2) < theta:
                    continue
                if c2 not in support:
                    support[c2] = []
                    class_ids.append(c2)
                if len(support[c2]) < cap:
                    support[c2].append(Shot(c2, img.image_id, img.annotations[c2]))
    # top up short classes by duplicating their own shots (masks shared by reference)
    s_max = max(len(shots) for shots in support.values())
    for cid in class_ids:
        shots = support[cid]
        while len(shots) < s_max:
            src = shots[int(rng.integers(0, len(shots)))]
            shots.append(Shot(src.class_id, src.image_id, src.mask))
    return class_ids, support


def build_original(pool: Pool, n: int, k: int, seed: int) -> Episode:
    rng = np.random.default_rng(seed)
    chosen, support, query_id = _sample_base(pool, n, k, rng)
    return Episode(setting="original", seed=seed, n=n, k=k, theta=0.0,
                   class_ids=chosen, support=support, query_id=query_id)


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta <= 1.0:
        raise ValidationError(f"theta must lie in [0,1], got {theta}")
    return theta


def build_partially_augmented(pool: Pool, n: int, k: int, theta: float, seed: int) -> Episode:
    theta = _check_theta(theta)
    rng = np.random.default_rng(seed)
    chosen, support, query_id = _sample_base(pool, n, k, rng)
    class_ids, support = _augment(pool, n * k, theta, rng, chosen, support,
                                  restrict_to_support=True)
    return Episode(setting="partial", seed=seed, n=n, k=k, theta=theta,
                   class_ids=class_ids, support=support, query_id=query_id)


def build_fully_augmented(pool: Pool, n: int, k: int, theta: float, seed: int) -> Episode:
    theta = _check_theta(theta)
    rng = np.random.default_rng(seed)
    chosen, support, query_id = _sample_base(pool, n, k, rng)
    class_ids, support = _augment(pool, n * k, theta, rng, chosen, support,
                                  restrict_to_support=False)
    return Episode(setting="full", seed=seed, n=n, k=k, theta=theta,
                   class_ids=class_ids, support=support, query_id=query_id)


BUILDERS = {"original": lambda pool, n, k, theta, seed: build_original(pool, n, k, seed),
            "partial": build_partially_augmented,
            "full": build_fully_augmented}


def demo_pool() -> Pool:
    """Miniature built-in pool: 2-way 2-shot sampling is forced, and one dog
    image also shows a horse and a person, so the augmented settings yield
    2-way 3-shot / 3-way 3-shot tasks for every seed."""
    def box(r0, r1, c0, c1):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[r0:r1, c0:c1] = 1
        return m

    return Pool(profile="demo",
                classes={1: "dog", 2: "horse", 3: "person", 4: "cat"}, images=[
                    AnnotatedImage("d1", 32, 32, {1: box(0, 16, 0, 16)}),
                    AnnotatedImage("d2", 32, 32, {1: box(0, 12, 0, 32),
                                                  2: box(16, 28, 0, 16),
                                                  3: box(16, 28, 20, 30)}),
                    AnnotatedImage("h1", 32, 32, {2: box(0, 16, 0, 16)}),
                    AnnotatedImage("h2", 32, 32, {2: box(8, 24, 8, 24)}),
                    AnnotatedImage("q", 32, 32, {4: box(4, 20, 4, 20)}),
                ])


# ---------------------------------------------------------------- size tools

def filter_small_objects(pool: Pool, theta: float) -> Pool:
    """Drop per-class annotations whose relative area is below theta."""
    theta = _check_theta(theta)
    images = [AnnotatedImage(
        image_id=img.image_id, width=img.width, height=img.height,
        annotations={cid: m for cid, m in img.annotations.items()
                     if img.area_fraction(cid) >= theta})
        for img in pool.images]
    return Pool(profile=pool.profile, classes=dict(pool.classes), images=images)


def size_split(pool: Pool) -> Tuple[Pool, Pool, Pool]:
    """Partition annotations into relative-area buckets [0,5%), [5,10%), [10,15%)."""
    splits = []
    for lo, hi in _SIZE_BUCKETS:
        images = [AnnotatedImage(
            image_id=img.image_id, width=img.width, height=img.height,
            annotations={cid: m for cid, m in img.annotations.items()
                         if lo <= img.area_fraction(cid) < hi})
            for img in pool.images]
        splits.append(Pool(profile=pool.profile, classes=dict(pool.classes), images=images))
    return tuple(splits)


# ---------------------------------------------------------------- metrics

def metric_accuracy(predictions: Sequence, truths: Sequence, per_class: bool = False) -> float:
    """Exact-match accuracy over label vectors; per_class averages positions instead."""
    if not predictions or len(predictions) != len(truths):
        raise ValidationError(
            f"{len(predictions)} predictions vs {len(truths)} truths")
    scores = []
    for pred, truth in zip(predictions, truths):
        lv = np.asarray(pred.label_vector).astype(np.int64)
        t = np.asarray(truth).astype(np.int64)
        if lv.shape != t.shape:
            raise ValidationError(f"label vector {lv.shape} vs truth {t.shape}")
        scores.append(float(np.mean(lv == t)) if per_class else float(np.array_equal(lv, t)))
    return float(np.mean(scores))


def metric_miou(predictions: Sequence, truths: Sequence, pooled: bool = False) -> float:
    """Class-mean IoU per episode, then mean over episodes (both empty -> IoU 1).

    pooled=True instead aggregates intersections and unions over every
    (episode, class) pair before dividing once.
    """
    if not predictions or len(predictions) != len(truths):
        raise ValidationError(
            f"{len(predictions)} predictions vs {len(truths)} truths")
    episode_scores = []
    pooled_inter = pooled_union = 0
    for pred, truth in zip(predictions, truths):
        seg = np.asarray(pred.seg_mask)
        ious = []
        for idx, cid in enumerate(pred.class_ids):
            fg = seg == idx + 1
            gt_mask = truth.get(cid)
            gt = np.zeros_like(fg) if gt_mask is None else np.asarray(gt_mask).astype(bool)
            inter = int(np.logical_and(fg, gt).sum())
            union = int(np.logical_or(fg, gt).sum())
            pooled_inter += inter
            pooled_union += union
            ious.append(1.0 if union == 0 else inter / union)
        episode_scores.append(float(np.mean(ious)) if ious else 1.0)
    if pooled:
        return 1.0 if pooled_union == 0 else pooled_inter / pooled_union
    return float(np.mean(episode_scores))


def query_truth_labels(pool: Pool, episode: Episode) -> np.ndarray:
    index = pool.index()
    if episode.query_id not in index:
        raise ValidationError(f"query image {episode.query_id} not in pool")
    ann = index[episode.query_id].annotations
    return np.array([1 if cid in ann and ann[cid].any() else 0
                     for cid in episode.class_ids], dtype=np.int8)


def query_truth_masks(pool: Pool, episode: Episode) -> Dict[int, np.ndarray]:
    index = pool.index()
    if episode.query_id not in index:
        raise ValidationError(f"query image {episode.query_id} not in pool")
    ann = index[episode.query_id].annotations
    return {cid: ann[cid] for cid in episode.class_ids if cid in ann and ann[cid].any()}


# ---------------------------------------------------------------- run-length masks

def rle_encode(mask: np.ndarray) -> List[int]:
    """Row-major alternating runs, background first (leading run may be 0)."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask entries must be 0 or 1")
    flat = mask.astype(np.uint8).reshape(-1)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    lengths = np.diff(bounds).tolist()
    return [0] + lengths if flat[0] == 1 else lengths


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    total = height * width
    if any((not isinstance(r, (int, np.integer))) or r < 0 for r in runs):
        raise FormatError(f"run lengths must be non-negative integers: {runs!r}")
    if sum(runs) != total:
        raise FormatError(f"runs sum to {sum(runs)}, expected {total}")
    out = np.zeros(total, dtype=np.uint8)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2:  # odd runs are foreground
            out[pos:pos + r] = 1
        pos += r
    return out.reshape(height, width)


# ---------------------------------------------------------------- text formats

def write_annotations(path, pool: Pool) -> None:
    doc = {
        "format_version": 1,
        "profile": pool.profile,
        "classes": [{"id": cid, "name": pool.classes[cid]} for cid in sorted(pool.classes)],
        "images": [{
            "id": img.image_id, "width": img.width, "height": img.height,
            "annotations": [{"class_id": cid, "rle": rle_encode(img.annotations[cid])}
                            for cid in sorted(img.annotations)],
        } for img in pool.images],
    }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def _require_version(doc: dict, path) -> None:
    if doc.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")


def read_annotations(path) -> Pool:
    doc = read_json_file(path)
    _require_version(doc, path)
    try:
        classes = {int(c["id"]): str(c["name"]) for c in doc["classes"]}
        images = []
        for rec in doc["images"]:
            h, w = int(rec["height"]), int(rec["width"])
            annotations = {int(a["class_id"]): rle_decode(a["rle"], h, w)
                           for a in rec["annotations"]}
            images.append(AnnotatedImage(image_id=str(rec["id"]), width=w, height=h,
                                         annotations=annotations))
        return Pool(profile=str(doc["profile"]), classes=classes, images=images)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed annotation document ({exc!r})") from exc


def write_episodes(path, episode_list: Sequence[Episode]) -> None:
    doc = {"format_version": 1, "episodes": [{
        "setting": e.setting, "seed": e.seed, "n": e.n, "k": e.k, "theta": e.theta,
        "class_ids": list(e.class_ids),
        "support": [{"class_id": cid, "image_id": s.image_id}
                    for cid in e.class_ids for s in e.support[cid]],
        "query_id": e.query_id,
    } for e in episode_list]}
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def read_episodes(path, pool: Pool) -> List[Episode]:
    doc = read_json_file(path)
    _require_version(doc, path)
    index = pool.index()
    episodes = []
    try:
        for rec in doc["episodes"]:
            class_ids = [int(c) for c in rec["class_ids"]]
            support: Dict[int, List[Shot]] = {cid: [] for cid in class_ids}
            for pair in rec["support"]:
                cid, iid = int(pair["class_id"]), str(pair["image_id"])
                if iid not in index:
                    raise FormatError(f"{path}: episode references unknown image {iid!r}")
                if cid not in index[iid].annotations:
                    raise FormatError(
                        f"{path}: image {iid!r} has no class-{cid} annotation")
                if cid not in support:
                    raise FormatError(f"{path}: support class {cid} missing from class_ids")
                support[cid].append(Shot(cid, iid, index[iid].annotations[cid]))
            query_id = str(rec["query_id"])
            if query_id not in index:
                raise FormatError(f"{path}: query image {query_id!r} not in pool")
            episodes.append(Episode(
                setting=str(rec["setting"]), seed=int(rec["seed"]), n=int(rec["n"]),
                k=int(rec["k"]), theta=float(rec["theta"]), class_ids=class_ids,
                support=support, query_id=query_id))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed episode document ({exc!r})") from exc
    return episodes


def write_predictions(path, predictions: Sequence) -> None:
    records = []
    for p in predictions:
        seg = np.asarray(p.seg_mask)
        h, w = seg.shape
        records.append({
            "query_id": p.query_id,
            "class_ids": [int(c) for c in p.class_ids],
            "class_probs": [float(v) for v in np.asarray(p.class_logits)],
            "label_vector": [int(v) for v in np.asarray(p.label_vector)],
            "delta": float(p.delta),
            "height": h, "width": w,
            "seg_rle": [{"class_id": int(cid),
                         "rle": rle_encode((seg == idx + 1).astype(np.uint8))}
                        for idx, cid in enumerate(p.class_ids)],
        })
    atomic_write_text(path, json.dumps({"format_version": 1, "predictions": records},
                                       indent=1) + "\n")


@dataclass
class PredictionRecord:
    query_id: str
    class_ids: List[int]
    class_logits: np.ndarray
    label_vector: np.ndarray
    seg_mask: np.ndarray
    delta: float


def read_predictions(path) -> List[PredictionRecord]:
    doc = read_json_file(path)
    _require_version(doc, path)
    out = []
    try:
        for rec in doc["predictions"]:
            class_ids = [int(c) for c in rec["class_ids"]]
            h, w = int(rec["height"]), int(rec["width"])
            seg = np.zeros((h, w), dtype=np.int32)
            by_class = {int(r["class_id"]): r["rle"] for r in rec["seg_rle"]}
            for idx, cid in enumerate(class_ids):
                fg = rle_decode(by_class[cid], h, w).astype(bool)
                seg[fg] = idx + 1
            out.append(PredictionRecord(
                query_id=str(rec["query_id"]), class_ids=class_ids,
                class_logits=np.array([float(v) for v in rec["class_probs"]]),
                label_vector=np.array([int(v) for v in rec["label_vector"]],
                                      dtype=np.int8),
                seg_mask=seg, delta=float(rec["delta"])))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed prediction document ({exc!r})") from exc
    return out

"""Shared test helpers."""

import numpy as np


def rel_err(actual, expected):
    """Max absolute difference normalized by the expected tensor's scale."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.max(np.abs(expected)) if expected.size else 0.0, 1e-12)
    if actual.shape != expected.shape:
        raise AssertionError(f"shape mismatch {actual.shape} vs {expected.shape}")
    return float(np.max(np.abs(actual - expected)) / scale) if actual.size else 0.0


def rng(seed):
    return np.random.default_rng(seed)


def random_pool(r):
    """Small random annotation pool; per-image boxes live in disjoint column bands."""
    from emat.episodes import AnnotatedImage, Pool

    n_classes = int(r.integers(2, 5))
    images = []
    for j in range(int(r.integers(3, 9))):
        n_ann = int(r.integers(1, min(3, n_classes) + 1))
        cids = r.choice(np.arange(1, n_classes + 1), size=n_ann, replace=False)
        annotations = {}
        for slot, cid in enumerate(sorted(int(c) for c in cids)):
            m = np.zeros((16, 16), dtype=np.uint8)
            r0 = int(r.integers(0, 12))
            r1 = int(r.integers(r0 + 1, 17))
            c0 = 5 * slot
            m[r0:r1, c0:c0 + int(r.integers(1, 6))] = 1
            annotations[cid] = m
        images.append(AnnotatedImage(image_id=f"img{j:02d}", width=16, height=16,
                                     annotations=annotations))
    return Pool(profile="fuzz", classes={c: f"c{c}" for c in range(1, n_classes + 1)},
                images=images)

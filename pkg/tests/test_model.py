"""Model assembly: losses, parameter accounting, shape flow, gradients, inference."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from emat import model
from emat.correlation import TokenStack
from emat.errors import DimensionError, ValidationError
from emat.tensor import finite_diff_gradient

from conftest import rel_err, rng

LN2 = math.log(2.0)


def make_stack(r, layers=2, heads=2, h=4, w=4, d=8, patch=8):
    return TokenStack(
        image_tokens=r.normal(size=(layers, heads, h, w, d)).astype(np.float32),
        class_token=r.normal(size=(layers, heads, d)).astype(np.float32),
        patch_size=patch, image_h=h * patch, image_w=w * patch)


def micro_config():
    return model.EmatConfig(
        variant="micro", correlation_channels=4, grids=((4, 4), (2, 2)),
        attention_channels=(8, 4), head_channels=(4, 2), heads=2)


def micro_inputs(seed=0):
    r = rng(seed)
    support = make_stack(r)
    query = make_stack(r)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:20, 8:26] = 1
    return support, mask, query


# ---------------------------------------------------------------- losses

def test_loss_clf_examples():
    assert model.loss_clf(1.0, 1.0 - 1e-7) < 1e-6
    assert abs(model.loss_clf(1.0, 0.5) - LN2) < 1e-12
    assert abs(model.loss_clf(0.0, 0.5) - LN2) < 1e-12
    assert model.loss_clf(0.0, 0.99) > 0.0


def test_loss_seg_examples():
    m = (rng(110).random((6, 6)) < 0.5).astype(np.float64)
    assert model.loss_seg(m, np.clip(m, 1e-7, 1 - 1e-7)) < 1e-6
    assert abs(model.loss_seg(m, np.full((6, 6), 0.5)) - LN2) < 1e-12


def test_loss_seg_matches_loop_oracle():
    r = rng(111)
    m = (r.random((5, 7)) < 0.4).astype(np.float64)
    m_hat = np.clip(r.random((5, 7)), 0.01, 0.99)
    acc = 0.0
    for i in range(5):
        for j in range(7):
            p = m_hat[i, j]
            acc += -m[i, j] * math.log(p) - (1 - m[i, j]) * math.log(1 - p)
    assert rel_err(model.loss_seg(m, m_hat), acc / 35) < 1e-6


def test_loss_seg_shape_mismatch():
    with pytest.raises(DimensionError):
        model.loss_seg(np.zeros((3, 3)), np.full((3, 4), 0.5))


def test_loss_total():
    assert abs(model.loss_total(LN2, 0.2, 0.1) - 0.26931471805599454) < 1e-15
    assert model.loss_total(123.0, 0.7, 0.0) == 0.7
    assert model.loss_total(0.0, 0.0, 0.1) == 0.0


# ---------------------------------------------------------------- parameter accounting

def test_count_params_frozen_reference():
    emat = model.count_params(model.EmatConfig.preset("emat"))
    assert emat == {"layers.0": 52_416, "layers.1": 18_784,
                    "clf_head": 1_601, "seg_head": 545, "total": 73_346}
    cst = model.count_params(model.EmatConfig.preset("cst_compat"))
    assert cst == {"layers.0": 14_432, "layers.1": 267_648,
                   "clf_head": 24_833, "seg_head": 8_321, "total": 315_234}


def test_count_params_efficiency_claims():
    emat = model.count_params(model.EmatConfig.preset("emat"))["total"]
    cst = model.count_params(model.EmatConfig.preset("cst_compat"))["total"]
    assert emat * 4 <= cst
    assert abs(emat - 86_020) / 86_020 <= 0.20
    assert abs(cst - 366_000) / 366_000 <= 0.20


def test_count_params_matches_actual_arrays():
    for name in ("emat", "cst_compat"):
        config = model.EmatConfig.preset(name)
        params = model.init_params(config, seed=3)
        actual = sum(a.size for a in params.flatten().values())
        assert actual == model.count_params(config)["total"]
    config = micro_config()
    params = model.init_params(config, seed=3)
    assert sum(a.size for a in params.flatten().values()) == model.count_params(config)["total"]


def test_count_params_reproducible():
    config = model.EmatConfig.preset("emat")
    assert model.count_params(config) == model.count_params(config)


# ---------------------------------------------------------------- forward

def test_forward_shape_contract_and_range():
    support, mask, query = micro_inputs(1)
    params = model.init_params(micro_config(), seed=7)
    logit, scores = model.forward_1way(support, mask, query, params, micro_config())
    assert np.isscalar(logit) or np.asarray(logit).shape == ()
    assert 0.0 <= float(logit) <= 1.0
    assert scores.shape == (32, 32)
    assert scores.min() >= 0.0 and scores.max() <= 1.0


def test_forward_token_flow_emat_and_cst():
    r = rng(112)
    support = make_stack(r, layers=12, heads=6, h=4, w=4, d=4)
    query = make_stack(r, layers=12, heads=6, h=4, w=4, d=4)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[:16] = 1
    for preset, ts_flow, td_flow in (("emat", [401, 101, 2], [101, 2]),
                                     ("cst_compat", [145, 10, 2], [10, 2])):
        config = model.EmatConfig.preset(preset)
        params = model.init_params(config, seed=1)
        _, _, cache = model.forward_cached(support, mask, query, params, config)
        assert cache["t_s_flow"] == ts_flow
        assert cache["t_d_flow"] == td_flow


def test_forward_deterministic_replay():
    support, mask, query = micro_inputs(2)
    config = micro_config()
    params = model.init_params(config, seed=5)
    a = model.forward_1way(support, mask, query, params, config)
    b = model.forward_1way(support, mask, query, params, config)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_forward_rejects_channel_mismatch():
    support, mask, query = micro_inputs(3)  # correlation channels = 4
    config = model.EmatConfig.preset("emat")  # expects 72
    params = model.init_params(config, seed=0)
    with pytest.raises(DimensionError):
        model.forward_1way(support, mask, query, params, config)


# ---------------------------------------------------------------- gradients

def test_loss_gradients_match_finite_differences_subset():
    support, mask, query = micro_inputs(4)
    config = micro_config()
    params = model.params_astype(model.init_params(config, seed=11), np.float64)
    y, m_gt = 1.0, (rng(113).random((32, 32)) < 0.5).astype(np.float64)
    loss, grads = model.loss_and_param_gradients(support, mask, query, y, m_gt, params, config)
    assert loss > 0.0
    flat = params.flatten()
    # spot-check one tensor from every block type; full sweep runs in acceptance
    for name in ("layers.0.embed_w", "layers.0.attn.w_out", "layers.0.down.kernel",
                 "layers.1.gn_scale", "layers.1.ff2_w", "layers.1.q_b",
                 "clf.w3", "seg.w1", "layers.1.down.class_w"):
        ref = flat[name]

        def loss_at(t):
            saved = ref.copy()
            ref[...] = t
            out = model.loss_and_param_gradients(
                support, mask, query, y, m_gt, params, config, loss_only=True)
            ref[...] = saved
            return float(out)

        fd = finite_diff_gradient(loss_at, ref, h=1e-5)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        assert float(np.max(np.abs(grads[name] - fd))) / scale < 1e-3, name


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    config = micro_config()
    params = model.init_params(config, seed=21)
    path = tmp_path / "params.ckpt"
    model.save_checkpoint(path, params, config)
    back = model.load_checkpoint(path, config)
    for name, a in params.flatten().items():
        assert np.array_equal(a, back.flatten()[name]), name
    with open(path, "rb") as f:
        header = f.readline()
    assert b'"config_hash"' in header


def test_checkpoint_config_mismatch(tmp_path):
    config = micro_config()
    path = tmp_path / "params.ckpt"
    model.save_checkpoint(path, model.init_params(config, seed=0), config)
    with pytest.raises(ValidationError):
        model.load_checkpoint(path, model.EmatConfig.preset("emat"))


def test_checkpoint_truncation_detected(tmp_path):
    config = micro_config()
    path = tmp_path / "params.ckpt"
    model.save_checkpoint(path, model.init_params(config, seed=0), config)
    blob = path.read_bytes()
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[:-8])
    from emat.errors import FormatError
    with pytest.raises(FormatError):
        model.load_checkpoint(truncated, config)


# ---------------------------------------------------------------- inference protocol

def test_decide_threshold_and_argmax():
    labels, seg = model.decide(np.array([0.7, 0.3]),
                               np.stack([np.full((2, 2), 0.6), np.full((2, 2), 0.8)]),
                               delta=0.5)
    assert labels.tolist() == [1, 0]
    assert np.all(seg == 2)  # class 2 has the higher pixel score


def test_decide_empty_mask_and_invariants():
    scores = np.stack([np.full((3, 3), 0.2), np.full((3, 3), 0.49)])
    labels, seg = model.decide(np.array([0.4, 0.2]), scores, delta=0.5)
    assert labels.tolist() == [0, 0]
    assert not seg.any()  # all pixels background: empty mask allowed


def test_decide_tie_breaks_to_lowest_class():
    scores = np.stack([np.full((2, 2), 0.8), np.full((2, 2), 0.8)])
    _, seg = model.decide(np.array([0.9, 0.9]), scores, delta=0.5)
    assert np.all(seg == 1)


def test_decide_delta_monotonicity_fuzz():
    r = rng(114)
    for _ in range(100):
        n = int(r.integers(1, 5))
        probs = r.random(n)
        scores = r.random((n, 4, 4))
        d1, d2 = sorted(r.random(2))
        l1, s1 = model.decide(probs, scores, delta=d1)
        l2, s2 = model.decide(probs, scores, delta=d2)
        assert np.all(l2 <= l1)  # raising delta never adds classes
        assert np.all((s2 == 0) | (s2 == s1))  # pixels only turn background


def test_infer_multiway_n1_reduces_to_thresholded_forward():
    support, mask, query = micro_inputs(5)
    config = micro_config()
    params = model.init_params(config, seed=9)
    tokens = {"s0": support, "q": query}
    episode = SimpleNamespace(
        class_ids=[7], query_id="q",
        support={7: [SimpleNamespace(image_id="s0", mask=mask)]})
    pred = model.infer_multiway(episode, tokens.__getitem__, params, config)
    logit, scores = model.forward_1way(support, mask, query, params, config)
    assert pred.class_ids == [7]
    assert pred.label_vector.tolist() == [int(logit > config.delta)]
    assert np.array_equal(pred.mask_scores[0], scores)
    assert np.array_equal(pred.seg_mask != 0, scores > config.delta)


def test_infer_multiway_shot_permutation_invariance():
    r = rng(115)
    config = micro_config()
    params = model.init_params(config, seed=13)
    stacks = {f"s{i}": make_stack(r) for i in range(3)}
    stacks["q"] = make_stack(r)
    masks = {}
    for i in range(3):
        m = np.zeros((32, 32), dtype=np.uint8)
        m[2 + i: 20, 4: 20 + i] = 1
        masks[f"s{i}"] = m
    shots = [SimpleNamespace(image_id=f"s{i}", mask=masks[f"s{i}"]) for i in range(3)]
    ep_a = SimpleNamespace(class_ids=[1], query_id="q", support={1: shots})
    ep_b = SimpleNamespace(class_ids=[1], query_id="q", support={1: shots[::-1]})
    pa = model.infer_multiway(ep_a, stacks.__getitem__, params, config)
    pb = model.infer_multiway(ep_b, stacks.__getitem__, params, config)
    assert np.array_equal(pa.class_logits, pb.class_logits)
    assert np.array_equal(pa.mask_scores, pb.mask_scores)
    assert np.array_equal(pa.seg_mask, pb.seg_mask)


def test_infer_multiway_empty_class_is_error():
    support, mask, query = micro_inputs(6)
    config = micro_config()
    params = model.init_params(config, seed=1)
    episode = SimpleNamespace(class_ids=[1], query_id="q", support={1: []})
    with pytest.raises(ValidationError):
        model.infer_multiway(episode, {"q": query}.__getitem__, params, config)

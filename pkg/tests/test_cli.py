"""CLI surface: verify suites, bench accounting, token files, pipeline commands."""

import json
import os
from types import SimpleNamespace

import numpy as np
import pytest
from click.testing import CliRunner

from emat import episodes as eps
from emat import model
from emat.cli import main, read_token_file, synth_token_stack, write_token_file
from emat.errors import FormatError

from conftest import rng


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path):
    """Demo pool annotations plus matching micro-config tokens and checkpoint."""
    ann = tmp_path / "ann.json"
    eps.write_annotations(ann, eps.demo_pool())
    config = model.EmatConfig(variant="micro", correlation_channels=4,
                              grids=((4, 4), (2, 2)), attention_channels=(8, 4),
                              head_channels=(4, 2), heads=2)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config.to_dict()))
    return SimpleNamespace(dir=tmp_path, ann=str(ann), config=config,
                           config_path=str(config_path))


def _run(runner, args, **kwargs):
    result = runner.invoke(main, args, **kwargs)
    if result.exception and not isinstance(result.exception, SystemExit):
        raise result.exception
    return result


# ---------------------------------------------------------------- verify

def test_verify_suites_pass(runner, tmp_path):
    for suite, count in (("equivalence", "30"), ("shapes", "1"), ("episodes", "10")):
        report = tmp_path / f"{suite}.jsonl"
        result = _run(runner, ["verify", suite, "--count", count,
                               "--report", str(report)])
        assert result.exit_code == 0, result.output
        assert f"{suite}: PASS" in result.output
        records = [json.loads(line) for line in report.read_text().splitlines()]
        assert all(rec["pass"] for rec in records)
        assert records[-1]["case"] == "summary"


def test_verify_gradients_passes(runner):
    result = _run(runner, ["verify", "gradients", "--count", "3"])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output.splitlines()[0])
    assert summary["max_rel_err"] < 1e-3


def test_verify_unknown_suite_is_usage_error(runner):
    result = runner.invoke(main, ["verify", "bogus"])
    assert result.exit_code == 2


def test_verify_equivalence_reports_witness(runner, tmp_path):
    report = tmp_path / "eq.jsonl"
    _run(runner, ["verify", "equivalence", "--count", "5", "--report", str(report)])
    records = [json.loads(line) for line in report.read_text().splitlines()]
    witness = [rec for rec in records if rec["case"] == "literal_witness"]
    assert len(witness) == 1 and witness[0]["max_abs_diff"] > 1e-3


# ---------------------------------------------------------------- bench

def test_bench_rows_match_allocation_exactly(runner, tmp_path):
    out = tmp_path / "bench.jsonl"
    fig = tmp_path / "bench.png"
    result = _run(runner, ["bench", "--t-s", "401", "--t-q", "4", "--e", "2",
                           "--densities", "0.1,1.0", "--reps", "2",
                           "--out", str(out), "--fig", str(fig)])
    assert result.exit_code == 0, result.output
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 4  # one row per (density, rep)
    tenth = [r for r in rows if r["density"] == 0.1]
    assert all(r["popcount"] == 41 for r in tenth)
    # dense/efficient element ratio is exactly 401/41 in integer arithmetic
    assert all(r["dense_elements"] * 41 == r["efficient_elements"] * 401 for r in tenth)
    full = [r for r in rows if r["density"] == 1.0]
    assert all(r["element_ratio"] == 1.0 for r in full)
    assert all(r["dense_elements"] == r["efficient_elements"] for r in full)
    assert fig.exists() and fig.stat().st_size > 0


def test_bench_rejects_bad_density(runner, tmp_path):
    result = runner.invoke(main, ["bench", "--densities", "1.5",
                                  "--out", str(tmp_path / "x.jsonl")])
    assert result.exit_code == 2


# ---------------------------------------------------------------- token files

def test_token_file_roundtrip(tmp_path):
    stack = synth_token_stack(rng(4), 3, 2, 5, 24, 16, 8)
    path = tmp_path / "img.tokens"
    write_token_file(path, stack)
    loaded = read_token_file(path)
    assert loaded.patch_size == 8 and loaded.image_h == 24 and loaded.image_w == 16
    np.testing.assert_array_equal(loaded.image_tokens, stack.image_tokens)
    np.testing.assert_array_equal(loaded.class_token, stack.class_token)


def test_token_file_body_length_formula(tmp_path):
    stack = synth_token_stack(rng(5), 2, 3, 4, 16, 16, 8)
    path = tmp_path / "img.tokens"
    write_token_file(path, stack)
    raw = path.read_bytes()
    header = json.loads(raw[:raw.index(b"\n")])
    l, g, d = header["layers"], header["heads"], header["head_dim"]
    body = raw[raw.index(b"\n") + 1:]
    assert len(body) == 4 * l * g * (header["h"] * header["w"] + 1) * d


@pytest.mark.parametrize("corrupt", ["truncate", "version", "field", "no_newline"])
def test_token_file_rejects_corruption(tmp_path, corrupt):
    path = tmp_path / "img.tokens"
    write_token_file(path, synth_token_stack(rng(6), 2, 2, 3, 16, 16, 8))
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if corrupt == "truncate":
        path.write_bytes(raw[:-4])
    elif corrupt == "version":
        header["format_version"] = 99
        path.write_bytes(json.dumps(header).encode() + raw[nl:])
    elif corrupt == "field":
        header["heads"] = 0
        path.write_bytes(json.dumps(header).encode() + raw[nl:])
    else:
        path.write_bytes(raw.replace(b"\n", b" ", 1))
    with pytest.raises(FormatError):
        read_token_file(path)


# ---------------------------------------------------------------- episodes command

def test_episodes_cmd_partial_stats(runner, workspace, tmp_path):
    out = tmp_path / "eps.json"
    result = _run(runner, ["episodes", "--annotations", workspace.ann,
                           "--setting", "partial", "--n", "2", "--k", "2",
                           "--count", "2", "--profile", "pascal",
                           "--seed", "3", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "2-way 3-shot" in result.output
    assert "2 of 2 tasks gained shots" in result.output
    episodes = eps.read_episodes(out, eps.demo_pool())
    assert len(episodes) == 2


def test_episodes_cmd_original_reports_zero_gains(runner, workspace, tmp_path):
    result = _run(runner, ["episodes", "--annotations", workspace.ann,
                           "--setting", "original", "--n", "2", "--k", "2",
                           "--count", "3", "--seed", "1",
                           "--out", str(tmp_path / "o.json")])
    assert "0 of 3 tasks gained shots; 0 of 3 gained ways" in result.output


def test_episodes_cmd_seed_replay_is_byte_identical(runner, workspace, tmp_path, monkeypatch):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["episodes", "--annotations", workspace.ann, "--setting", "full",
            "--n", "2", "--k", "2", "--count", "3", "--theta", "0.07", "--seed", "5"]
    _run(runner, args + ["--out", str(a)])
    monkeypatch.setenv("EMAT_THREADS", "4")
    _run(runner, args + ["--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_episodes_cmd_rejects_theta_and_profile(runner, workspace, tmp_path):
    result = runner.invoke(main, ["episodes", "--annotations", workspace.ann,
                                  "--setting", "partial", "--n", "2", "--k", "2",
                                  "--theta", "0.1", "--profile", "coco",
                                  "--out", str(tmp_path / "x.json")])
    assert result.exit_code == 2


def test_episodes_cmd_bad_annotations_exit_3(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    result = runner.invoke(main, ["episodes", "--annotations", str(bad),
                                  "--setting", "original", "--n", "1", "--k", "1",
                                  "--out", str(tmp_path / "x.json")])
    assert result.exit_code == 3


# ---------------------------------------------------------------- pipeline

def _build_pipeline(runner, workspace, tmp_path):
    tokens = tmp_path / "tokens"
    ckpt = tmp_path / "ckpt.bin"
    episodes = tmp_path / "eps.json"
    _run(runner, ["synth-tokens", "--annotations", workspace.ann,
                  "--out-dir", str(tokens), "--layers", "2", "--heads", "2",
                  "--head-dim", "8", "--patch", "8", "--seed", "9"])
    _run(runner, ["init-params", "--config", workspace.config_path,
                  "--seed", "1", "--out", str(ckpt)])
    _run(runner, ["episodes", "--annotations", workspace.ann,
                  "--setting", "partial", "--n", "2", "--k", "2", "--count", "1",
                  "--profile", "pascal", "--seed", "3", "--out", str(episodes)])
    return tokens, ckpt, episodes


def test_predict_emits_well_formed_predictions(runner, workspace, tmp_path):
    tokens, ckpt, episodes = _build_pipeline(runner, workspace, tmp_path)
    out = tmp_path / "pred.json"
    result = _run(runner, ["predict", "--episodes", str(episodes),
                           "--annotations", workspace.ann, "--tokens", str(tokens),
                           "--checkpoint", str(ckpt),
                           "--config", workspace.config_path, "--out", str(out)])
    assert result.exit_code == 0, result.output
    preds = eps.read_predictions(out)
    assert len(preds) == 1
    p = preds[0]
    assert p.query_id == "q" and len(p.class_ids) == 2
    assert p.label_vector.shape == (2,) and set(p.label_vector) <= {0, 1}
    assert p.seg_mask.shape == (32, 32)
    assert set(np.unique(p.seg_mask)) <= {0, 1, 2}
    assert p.delta == 0.5

    result = _run(runner, ["eval", "--predictions", str(out),
                           "--annotations", workspace.ann])
    assert result.exit_code == 0, result.output
    scores = json.loads(result.output.splitlines()[-1])
    assert 0.0 <= scores["acc"] <= 1.0 and 0.0 <= scores["miou"] <= 1.0


def test_predict_missing_token_file_lists_id(runner, workspace, tmp_path):
    tokens, ckpt, episodes = _build_pipeline(runner, workspace, tmp_path)
    os.unlink(tokens / "q.tokens")
    result = runner.invoke(main, ["predict", "--episodes", str(episodes),
                                  "--annotations", workspace.ann,
                                  "--tokens", str(tokens), "--checkpoint", str(ckpt),
                                  "--config", workspace.config_path,
                                  "--out", str(tmp_path / "p.json")])
    assert result.exit_code == 3
    assert "q" in result.output and "missing token file" in result.output


def test_predict_token_header_mismatch_is_validation_error(runner, workspace, tmp_path):
    tokens, _, episodes = _build_pipeline(runner, workspace, tmp_path)
    ckpt = tmp_path / "emat.bin"
    _run(runner, ["init-params", "--config", "emat", "--seed", "1", "--out", str(ckpt)])
    result = runner.invoke(main, ["predict", "--episodes", str(episodes),
                                  "--annotations", workspace.ann,
                                  "--tokens", str(tokens), "--checkpoint", str(ckpt),
                                  "--config", "emat",
                                  "--out", str(tmp_path / "p.json")])
    assert result.exit_code == 3
    assert "correlation channels" in result.output


# ---------------------------------------------------------------- eval fixtures

def _half_pool(tmp_path):
    m1 = np.zeros((4, 4), dtype=np.uint8)
    m1[:, :2] = 1
    pool = eps.Pool(profile="toy", classes={1: "a"},
                    images=[eps.AnnotatedImage("x", 4, 4, {1: m1})])
    ann = tmp_path / "toy_ann.json"
    eps.write_annotations(ann, pool)
    return pool, ann, m1


def _prediction(query_id, class_ids, labels, seg):
    return SimpleNamespace(query_id=query_id, class_ids=class_ids,
                           class_logits=np.asarray(labels, dtype=np.float64),
                           label_vector=np.asarray(labels, dtype=np.int8),
                           seg_mask=np.asarray(seg, dtype=np.int32), delta=0.5)


def test_eval_perfect_prediction_scores_one(runner, tmp_path):
    _, ann, m1 = _half_pool(tmp_path)
    pred = tmp_path / "pred.json"
    eps.write_predictions(pred, [_prediction("x", [1], [1], m1.astype(np.int32))])
    result = _run(runner, ["eval", "--predictions", str(pred),
                           "--annotations", str(ann)])
    scores = json.loads(result.output.splitlines()[-1])
    assert scores == {"acc": 1.0, "miou": 1.0, "episodes": 1}


def test_eval_half_overlap_scores_half_miou(runner, tmp_path):
    _, ann, _ = _half_pool(tmp_path)
    seg = np.zeros((4, 4), dtype=np.int32)
    seg[:, 0] = 1  # half of the two-column ground-truth object
    pred = tmp_path / "pred.json"
    eps.write_predictions(pred, [_prediction("x", [1], [1], seg)])
    result = _run(runner, ["eval", "--predictions", str(pred),
                           "--annotations", str(ann)])
    scores = json.loads(result.output.splitlines()[-1])
    assert scores["acc"] == 1.0 and scores["miou"] == 0.5


def test_eval_unknown_query_exit_3(runner, tmp_path):
    _, ann, m1 = _half_pool(tmp_path)
    pred = tmp_path / "pred.json"
    eps.write_predictions(pred, [_prediction("ghost", [1], [1], m1.astype(np.int32))])
    result = runner.invoke(main, ["eval", "--predictions", str(pred),
                                  "--annotations", str(ann)])
    assert result.exit_code == 3


# ---------------------------------------------------------------- synth tokens

def test_synth_tokens_deterministic_per_image(runner, workspace, tmp_path):
    d1, d2 = tmp_path / "t1", tmp_path / "t2"
    args = ["synth-tokens", "--annotations", workspace.ann, "--layers", "2",
            "--heads", "2", "--head-dim", "4", "--patch", "8", "--seed", "11"]
    _run(runner, args + ["--out-dir", str(d1)])
    _run(runner, args + ["--out-dir", str(d2)])
    names = sorted(os.listdir(d1))
    assert names == sorted(os.listdir(d2)) and len(names) == 5
    for name in names:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    # different images get different tokens even under one seed
    assert (d1 / "d1.tokens").read_bytes() != (d1 / "d2.tokens").read_bytes()


def test_init_params_reloads_under_same_config(runner, workspace, tmp_path):
    ckpt = tmp_path / "c.bin"
    result = _run(runner, ["init-params", "--config", workspace.config_path,
                           "--seed", "2", "--out", str(ckpt)])
    assert "1234 parameters" in result.output
    loaded = model.load_checkpoint(ckpt, workspace.config)
    expected = model.init_params(workspace.config, seed=2)
    for name, arr in expected.flatten().items():
        np.testing.assert_array_equal(loaded.flatten()[name],
                                      arr.astype(np.float32))

"""Command-line surface: verification suites, benchmarks, episodes, inference, evaluation.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or format error.
"""

import json
import math
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import __version__
from . import episodes as eps
from . import model as mdl
from .attention import AllocationMeter, AttentionInputs, allocation_estimate, \
    efficient_masked_attention, efficient_masked_attention_backward, masked_attention_dense
from .correlation import FlatMask, TokenStack
from .errors import EmatError, FormatError, ValidationError
from .ioutil import atomic_write_bytes, atomic_write_text, read_json_file
from .tensor import finite_diff_gradient

EQUIV_TOL = 1e-5
WITNESS_MIN = 1e-3
GRAD_TOL = 1e-4
MICRO_TOL = 1e-3


# ---------------------------------------------------------------- token files

_TOKEN_INT_FIELDS = ("layers", "heads", "head_dim", "h", "w",
                     "patch_size", "image_h", "image_w")


def write_token_file(path, stack: TokenStack) -> None:
    h, w = stack.grid
    header = {"format_version": 1, "layers": stack.layers, "heads": stack.heads,
              "head_dim": stack.dim, "h": h, "w": w, "patch_size": stack.patch_size,
              "image_h": stack.image_h, "image_w": stack.image_w,
              "endianness": "little", "dtype": "f32"}
    body = np.ascontiguousarray(stack.image_tokens, dtype="<f4").tobytes() \
        + np.ascontiguousarray(stack.class_token, dtype="<f4").tobytes()
    atomic_write_bytes(path, json.dumps(header, separators=(",", ":")).encode() + b"\n" + body)


def read_token_file(path) -> TokenStack:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing token header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad token header ({exc})") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported format_version "
                          f"{header.get('format_version')!r}")
    dims = {}
    for name in _TOKEN_INT_FIELDS:
        v = header.get(name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise FormatError(f"{path}: header field {name!r} must be a positive "
                              f"integer, got {v!r}")
        dims[name] = v
    if header.get("endianness") != "little" or header.get("dtype") != "f32":
        raise FormatError(f"{path}: only little-endian f32 bodies are supported")
    l, g, d = dims["layers"], dims["heads"], dims["head_dim"]
    h, w = dims["h"], dims["w"]
    body = data[nl + 1:]
    expect = 4 * l * g * (h * w + 1) * d
    if len(body) != expect:
        raise FormatError(f"{path}: body is {len(body)} bytes, header implies {expect}")
    floats = np.frombuffer(body, dtype="<f4")
    split = l * g * h * w * d
    try:
        return TokenStack(image_tokens=floats[:split].reshape(l, g, h, w, d).copy(),
                          class_token=floats[split:].reshape(l, g, d).copy(),
                          patch_size=dims["patch_size"],
                          image_h=dims["image_h"], image_w=dims["image_w"])
    except EmatError as exc:
        raise FormatError(f"{path}: inconsistent token geometry ({exc})") from exc


def synth_token_stack(rng: np.random.Generator, layers: int, heads: int, head_dim: int,
                      image_h: int, image_w: int, patch_size: int) -> TokenStack:
    """Seeded stand-in for a frozen feature extractor."""
    if image_h % patch_size or image_w % patch_size:
        raise ValidationError(
            f"image {image_h}x{image_w} not divisible by patch {patch_size}")
    h, w = image_h // patch_size, image_w // patch_size
    return TokenStack(
        image_tokens=rng.normal(size=(layers, heads, h, w, head_dim)).astype(np.float32),
        class_token=rng.normal(size=(layers, heads, head_dim)).astype(np.float32),
        patch_size=patch_size, image_h=image_h, image_w=image_w)


def _image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


# ---------------------------------------------------------------- verify suites

def _random_flat_mask(r: np.random.Generator, t_s: int) -> FlatMask:
    bits = (r.random(t_s) < r.uniform(0.05, 0.95)).astype(np.uint8)
    bits[-1] = 1
    return FlatMask(bits=bits)


def _suite_equivalence(seed: int, count: int):
    r = np.random.default_rng(seed)
    records = []
    start = time.perf_counter()
    for i in range(count):
        if i == 0:
            t_s, t_q, e = 2, 1, 1
        elif i == 1:
            t_s, t_q, e = 401, 64, 16
        else:
            t_s = int(r.integers(2, 402))
            t_q = int(r.integers(1, 65))
            e = int(r.integers(1, 17))
        t_d = int(r.integers(1, 4))
        mask = _random_flat_mask(r, t_s)
        inputs = AttentionInputs(
            q_d=r.normal(size=(t_d, t_q, e)).astype(np.float32),
            k=r.normal(size=(t_s, t_q, e)).astype(np.float32),
            v=r.normal(size=(t_s, t_q, e)).astype(np.float32), mask=mask)
        eff = efficient_masked_attention(inputs)
        oracle = masked_attention_dense(inputs, mode="restricted")
        rel = float(np.max(np.abs(eff - oracle)) / max(float(np.max(np.abs(oracle))), 1e-12))
        records.append({"suite": "equivalence", "case": i, "t_s": t_s, "t_q": t_q,
                        "e": e, "popcount": mask.popcount, "rel_err": rel,
                        "tol": EQUIV_TOL, "pass": rel < EQUIV_TOL})
    elapsed = time.perf_counter() - start

    # the literal-mask formulation keeps masked rows at weight exp(0); show it differs
    rw = np.random.default_rng(seed + 1)
    bits = np.array([1, 0, 1, 1, 0, 0, 1], dtype=np.uint8)
    winputs = AttentionInputs(q_d=rw.normal(size=(2, 3, 4)), k=rw.normal(size=(7, 3, 4)),
                              v=rw.normal(size=(7, 3, 4)), mask=FlatMask(bits=bits))
    diff = float(np.max(np.abs(masked_attention_dense(winputs, mode="literal")
                               - masked_attention_dense(winputs, mode="restricted"))))
    records.append({"suite": "equivalence", "case": "literal_witness",
                    "max_abs_diff": diff, "threshold": WITNESS_MIN,
                    "pass": diff > WITNESS_MIN})

    ok = all(rec["pass"] for rec in records)
    records.append({"suite": "equivalence", "case": "summary", "count": count,
                    "max_rel_err": max(rec["rel_err"] for rec in records
                                       if "rel_err" in rec),
                    "witness_abs_diff": diff, "seconds": elapsed, "pass": ok})
    return ok, records


def _micro_config() -> mdl.EmatConfig:
    return mdl.EmatConfig(variant="micro", correlation_channels=4, grids=((4, 4), (2, 2)),
                          attention_channels=(8, 4), head_channels=(4, 2), heads=2)


def _micro_inputs(seed: int):
    r = np.random.default_rng(seed)
    support = synth_token_stack(r, 2, 2, 8, 32, 32, 8)
    query = synth_token_stack(r, 2, 2, 8, 32, 32, 8)
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:20, 8:26] = 1
    m_gt = (r.random((32, 32)) < 0.5).astype(np.float64)
    return support, mask, query, m_gt


def _suite_gradients(seed: int, count: int):
    r = np.random.default_rng(seed)
    records = []
    for i in range(count):
        t_s = int(r.integers(2, 9))
        t_q = int(r.integers(1, 5))
        e = int(r.integers(1, 4))
        t_d = int(r.integers(1, 3))
        mask = _random_flat_mask(r, t_s)
        q_d = r.normal(size=(t_d, t_q, e))
        k = r.normal(size=(t_s, t_q, e))
        v = r.normal(size=(t_s, t_q, e))
        upstream = r.normal(size=(t_d, t_q, e))
        inputs = AttentionInputs(q_d=q_d, k=k, v=v, mask=mask)
        analytic = efficient_masked_attention_backward(inputs, upstream)
        worst = 0.0
        for slot, ref in enumerate((q_d, k, v)):
            def loss(t, _slot=slot):
                parts = [q_d, k, v]
                parts[_slot] = t
                out = efficient_masked_attention(
                    AttentionInputs(q_d=parts[0], k=parts[1], v=parts[2], mask=mask))
                return float(np.sum(out * upstream))

            fd = finite_diff_gradient(loss, ref)
            scale = max(float(np.max(np.abs(fd))), 1e-8)
            worst = max(worst, float(np.max(np.abs(analytic[slot] - fd))) / scale)
        records.append({"suite": "gradients", "case": i, "t_s": t_s, "t_q": t_q,
                        "e": e, "rel_err": worst, "tol": GRAD_TOL,
                        "pass": worst < GRAD_TOL})

    # end-to-end: every trainable tensor of the micro model against central differences
    config = _micro_config()
    params = mdl.params_astype(mdl.init_params(config, seed=seed), np.float64)
    support, mask, query, m_gt = _micro_inputs(seed + 1)
    _, grads = mdl.loss_and_param_gradients(support, mask, query, 1.0, m_gt, params, config)
    worst = 0.0
    for name, ref in params.flatten().items():
        def loss_at(t, _ref=ref):
            saved = _ref.copy()
            _ref[...] = t
            out = mdl.loss_and_param_gradients(support, mask, query, 1.0, m_gt,
                                               params, config, loss_only=True)
            _ref[...] = saved
            return float(out)

        fd = finite_diff_gradient(loss_at, ref)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        worst = max(worst, float(np.max(np.abs(grads[name] - fd))) / scale)
    records.append({"suite": "gradients", "case": "micro_end_to_end",
                    "params": int(mdl.count_params(config)["total"]),
                    "rel_err": worst, "tol": MICRO_TOL, "pass": worst < MICRO_TOL})

    ok = all(rec["pass"] for rec in records)
    records.append({"suite": "gradients", "case": "summary", "count": count,
                    "max_rel_err": max(rec["rel_err"] for rec in records),
                    "pass": ok})
    return ok, records


def _suite_shapes(seed: int, count: int):
    del count  # fixed set of structural checks
    r = np.random.default_rng(seed)
    records = []
    flows = {"emat": ([401, 101, 2], [101, 2]), "cst_compat": ([145, 10, 2], [10, 2])}
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[:16] = 1
    for preset, (ts_flow, td_flow) in flows.items():
        config = mdl.EmatConfig.preset(preset)
        params = mdl.init_params(config, seed=1)
        support = synth_token_stack(r, 12, 6, 4, 32, 32, 8)
        query = synth_token_stack(r, 12, 6, 4, 32, 32, 8)
        _, _, cache = mdl.forward_cached(support, mask, query, params, config)
        records.append({"suite": "shapes", "case": f"{preset}_token_flow",
                        "t_s_flow": cache["t_s_flow"], "t_d_flow": cache["t_d_flow"],
                        "expected": ts_flow,
                        "pass": cache["t_s_flow"] == ts_flow
                        and cache["t_d_flow"] == td_flow})
    emat = mdl.count_params(mdl.EmatConfig.preset("emat"))
    cst = mdl.count_params(mdl.EmatConfig.preset("cst_compat"))
    records.append({"suite": "shapes", "case": "param_totals",
                    "emat": emat, "cst_compat": cst, "pass": True})
    records.append({"suite": "shapes", "case": "param_ratio_at_least_4x",
                    "ratio": cst["total"] / emat["total"],
                    "pass": emat["total"] * 4 <= cst["total"]})
    for name, counts, ref in (("emat", emat, 86_020), ("cst_compat", cst, 366_000)):
        dev = (counts["total"] - ref) / ref
        records.append({"suite": "shapes", "case": f"{name}_total_within_20pct",
                        "total": counts["total"], "reference": ref,
                        "deviation": dev, "pass": abs(dev) <= 0.20})
    ok = all(rec["pass"] for rec in records)
    records.append({"suite": "shapes", "case": "summary", "pass": ok})
    return ok, records


def _episode_content(e: eps.Episode):
    support = tuple((cid, tuple((s.image_id, s.mask.tobytes()) for s in e.support[cid]))
                    for cid in e.class_ids)
    return (tuple(e.class_ids), support, e.query_id)


def _random_pool(r: np.random.Generator) -> eps.Pool:
    n_classes = int(r.integers(2, 5))
    images = []
    for j in range(int(r.integers(3, 9))):
        n_ann = int(r.integers(1, min(3, n_classes) + 1))
        cids = sorted(int(c) for c in
                      r.choice(np.arange(1, n_classes + 1), size=n_ann, replace=False))
        annotations = {}
        for slot, cid in enumerate(cids):
            m = np.zeros((16, 16), dtype=np.uint8)
            r0 = int(r.integers(0, 12))
            m[r0:int(r.integers(r0 + 1, 17)), 5 * slot:5 * slot + int(r.integers(1, 6))] = 1
            annotations[cid] = m
        images.append(eps.AnnotatedImage(f"img{j:02d}", 16, 16, annotations))
    return eps.Pool(profile="fuzz", classes={c: f"c{c}" for c in range(1, n_classes + 1)},
                    images=images)


def _suite_episodes(seed: int, count: int):
    records = []
    pool = eps.demo_pool()
    partial = eps.build_partially_augmented(pool, 2, 2, theta=0.07, seed=seed)
    shots_p = [len(partial.support[c]) for c in partial.class_ids]
    records.append({"suite": "episodes", "case": "partial_fixture",
                    "ways": partial.effective_ways, "shots": shots_p,
                    "pass": partial.effective_ways == 2 and shots_p == [3, 3]})
    full = eps.build_fully_augmented(pool, 2, 2, theta=0.07, seed=seed)
    shots_f = [len(full.support[c]) for c in full.class_ids]
    records.append({"suite": "episodes", "case": "full_fixture",
                    "ways": full.effective_ways, "shots": shots_f,
                    "pass": full.effective_ways == 3 and shots_f == [3, 3, 3]})

    r = np.random.default_rng(seed)
    checked = bound_checked = 0
    equiv_ok = bound_ok = True
    attempts = 0
    while checked < count and attempts < 30 * count:
        attempts += 1
        fuzz_pool = _random_pool(r)
        ep_seed = int(r.integers(0, 2**31))
        k = int(r.integers(1, 3))
        n = int(r.integers(1, 4))
        try:
            a = eps.build_original(fuzz_pool, n=1, k=k, seed=ep_seed)
            b = eps.build_partially_augmented(fuzz_pool, n=1, k=k, theta=0.05, seed=ep_seed)
        except eps.SamplingError:
            continue
        equiv_ok &= _episode_content(a) == _episode_content(b)
        checked += 1
        for build in (eps.build_partially_augmented, eps.build_fully_augmented):
            try:
                e = build(fuzz_pool, n=n, k=k, theta=0.0, seed=ep_seed)
            except eps.SamplingError:
                continue
            bound_ok &= all(1 <= len(e.support[c]) <= n * k for c in e.class_ids)
            bound_checked += 1
    replay = eps.build_partially_augmented(pool, 2, 2, theta=0.07, seed=seed)
    records.append({"suite": "episodes", "case": "n1_equivalence",
                    "checked": checked, "requested": count, "pass": equiv_ok and checked == count})
    records.append({"suite": "episodes", "case": "shot_bound",
                    "checked": bound_checked, "pass": bound_ok and bound_checked > 0})
    records.append({"suite": "episodes", "case": "determinism",
                    "pass": _episode_content(replay) == _episode_content(partial)})
    ok = all(rec["pass"] for rec in records)
    records.append({"suite": "episodes", "case": "summary", "pass": ok})
    return ok, records


_SUITES = {"equivalence": _suite_equivalence, "gradients": _suite_gradients,
           "shapes": _suite_shapes, "episodes": _suite_episodes}


# ---------------------------------------------------------------- command group

@click.group()
@click.version_option(__version__, prog_name="emat")
def main():
    """Masked-attention few-shot model: verification, benchmarks, episodes, inference."""


def _guard(fn, *args, **kwargs):
    """Translate data/file problems into exit code 3."""
    try:
        return fn(*args, **kwargs)
    except (EmatError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


@main.command()
@click.argument("suite", type=click.Choice(sorted(_SUITES)))
@click.option("--seed", default=7, show_default=True)
@click.option("--count", default=100, show_default=True,
              help="Instances for the fuzzed checks.")
@click.option("--report", type=click.Path(dir_okay=False), default=None,
              help="Write every case as one JSON line.")
def verify(suite, seed, count, report):
    """Run a property suite; exit 0 only if every case passes."""
    ok, records = _SUITES[suite](seed, count)
    for rec in records:
        if not rec["pass"] or rec["case"] == "summary":
            click.echo(json.dumps(rec))
    if report:
        _guard(atomic_write_text, report,
               "\n".join(json.dumps(rec) for rec in records) + "\n")
    click.echo(f"{suite}: {'PASS' if ok else 'FAIL'}")
    sys.exit(0 if ok else 1)


@main.command()
@click.option("--t-s", default=401, show_default=True)
@click.option("--t-q", default=64, show_default=True)
@click.option("--e", default=16, show_default=True)
@click.option("--t-d", default=2, show_default=True)
@click.option("--densities", default="0.1,0.25,0.5,1.0", show_default=True,
              help="Comma-separated unmasked fractions in (0,1].")
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="JSONL output, one row per (density, repetition).")
@click.option("--fig", type=click.Path(dir_okay=False), default=None,
              help="Also render the element/time curves to this PNG.")
def bench(t_s, t_q, e, t_d, densities, reps, seed, out, fig):
    """Compare dense vs efficient attention: exact buffer elements and wall time."""
    try:
        grid = [float(d) for d in densities.split(",") if d.strip()]
    except ValueError as exc:
        raise click.UsageError(f"bad density grid {densities!r}: {exc}")
    if t_s < 2 or t_q < 1 or e < 1 or t_d < 1 or reps < 1:
        raise click.UsageError("sizes and repetitions must be positive (t_s >= 2)")
    if any(not 0.0 < d <= 1.0 for d in grid):
        raise click.UsageError("densities must lie in (0, 1]")

    r = np.random.default_rng(seed)
    rows = []
    for density in grid:
        popcount = min(t_s, int(math.floor(density * (t_s - 1))) + 1)
        bits = np.zeros(t_s, dtype=np.uint8)
        bits[-1] = 1
        if popcount > 1:
            bits[r.choice(t_s - 1, size=popcount - 1, replace=False)] = 1
        mask = FlatMask(bits=bits)
        inputs = AttentionInputs(
            q_d=r.normal(size=(t_d, t_q, e)).astype(np.float32),
            k=r.normal(size=(t_s, t_q, e)).astype(np.float32),
            v=r.normal(size=(t_s, t_q, e)).astype(np.float32), mask=mask)

        est_dense = allocation_estimate(t_s, t_q, e, popcount, "dense")
        est_eff = allocation_estimate(t_s, t_q, e, popcount, "efficient")
        meter_d, meter_e = AllocationMeter(), AllocationMeter()
        masked_attention_dense(inputs, meter=meter_d)
        efficient_masked_attention(inputs, meter=meter_e)
        for meter, est, label in ((meter_d, est_dense, "dense"),
                                  (meter_e, est_eff, "efficient")):
            measured = (meter.peak("scores"), meter.peak("weights"), meter.peak("gathered"))
            expected = (est.scores, est.weights, est.gathered)
            if measured != expected:
                click.echo(f"error: {label} meter peaks {measured} != estimate "
                           f"{expected} at density {density}", err=True)
                sys.exit(1)

        for rep in range(reps):
            t0 = time.perf_counter()
            masked_attention_dense(inputs)
            t_dense = time.perf_counter() - t0
            t0 = time.perf_counter()
            efficient_masked_attention(inputs)
            t_eff = time.perf_counter() - t0
            rows.append({"kind": "bench", "t_s": t_s, "t_q": t_q, "e": e, "t_d": t_d,
                         "density": density, "popcount": popcount, "rep": rep,
                         "dense_elements": est_dense.scores,
                         "efficient_elements": est_eff.scores,
                         "gathered_elements": est_eff.gathered,
                         "element_ratio": est_eff.scores / est_dense.scores,
                         "dense_seconds": t_dense, "efficient_seconds": t_eff})

    _guard(atomic_write_text, out, "\n".join(json.dumps(row) for row in rows) + "\n")
    click.echo(f"{'density':>8} {'popcount':>8} {'dense el':>12} {'eff el':>12} "
               f"{'ratio':>8} {'dense s':>10} {'eff s':>10}")
    for row in rows:
        click.echo(f"{row['density']:8.3f} {row['popcount']:8d} "
                   f"{row['dense_elements']:12d} {row['efficient_elements']:12d} "
                   f"{row['element_ratio']:8.4f} {row['dense_seconds']:10.4f} "
                   f"{row['efficient_seconds']:10.4f}")
    if fig:
        _render_bench_figure(rows, fig)
        click.echo(f"figure written to {fig}")


def _render_bench_figure(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_density = {}
    for row in rows:
        by_density.setdefault(row["density"], []).append(row)
    densities = sorted(by_density)
    dense_el = [by_density[d][0]["dense_elements"] for d in densities]
    eff_el = [by_density[d][0]["efficient_elements"] for d in densities]
    dense_t = [float(np.median([r["dense_seconds"] for r in by_density[d]]))
               for d in densities]
    eff_t = [float(np.median([r["efficient_seconds"] for r in by_density[d]]))
             for d in densities]

    figure, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(densities, dense_el, "o-", label="dense")
    ax1.plot(densities, eff_el, "s-", label="efficient")
    ax1.set_xlabel("mask density")
    ax1.set_ylabel("score-buffer elements")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(densities, dense_t, "o-", label="dense")
    ax2.plot(densities, eff_t, "s-", label="efficient")
    ax2.set_xlabel("mask density")
    ax2.set_ylabel("median seconds/run")
    ax2.legend()
    figure.tight_layout()
    figure.savefig(path, dpi=120)
    plt.close(figure)


def _resolve_theta(theta, profile):
    if theta is not None and profile is not None:
        raise click.UsageError("give either --theta or --profile, not both")
    if profile is not None:
        return eps.THETA_PRESETS[profile]
    return theta if theta is not None else 0.0


@main.command("episodes")
@click.option("--annotations", type=click.Path(dir_okay=False), required=True)
@click.option("--setting", type=click.Choice(["original", "partial", "full"]),
              required=True)
@click.option("--n", type=int, required=True)
@click.option("--k", type=int, required=True)
@click.option("--count", default=1, show_default=True)
@click.option("--theta", type=float, default=None,
              help="Minimum relative object area for augmentation candidates.")
@click.option("--profile", type=click.Choice(sorted(eps.THETA_PRESETS)), default=None,
              help="Named theta preset.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def episodes_cmd(annotations, setting, n, k, count, theta, profile, seed, out):
    """Sample episodes from an annotation file and report augmentation statistics."""
    theta = _resolve_theta(theta, profile)
    pool = _guard(eps.read_annotations, annotations)
    builder = eps.BUILDERS[setting]

    def build(i):
        return builder(pool, n, k, theta, seed + i)

    workers = int(os.environ.get("EMAT_THREADS", "0") or 0)
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            built = list(pool_exec.map(build, range(count)))  # joined in index order
    else:
        built = [_guard(build, i) for i in range(count)]
    _guard(eps.write_episodes, out, built)

    gained_shots = gained_ways = 0
    for i, e in enumerate(built):
        s_max = max(len(e.support[c]) for c in e.class_ids)
        click.echo(f"episode {i}: {e.effective_ways}-way {s_max}-shot ({e.setting})")
        gained_shots += any(len(e.support[c]) > k for c in e.class_ids)
        gained_ways += e.effective_ways > n
    click.echo(f"{gained_shots} of {count} tasks gained shots; "
               f"{gained_ways} of {count} gained ways")
    click.echo(f"episodes written to {out}")


def _resolve_config(value) -> mdl.EmatConfig:
    if value in ("emat", "cst_compat"):
        return mdl.EmatConfig.preset(value)
    if os.path.exists(value):
        return mdl.EmatConfig.from_dict(read_json_file(value))
    raise click.UsageError(
        f"--config must be 'emat', 'cst_compat', or a config JSON path; got {value!r}")


def _token_lookup(tokens_dir, config):
    cache = {}

    def lookup(image_id: str) -> TokenStack:
        if image_id not in cache:
            path = os.path.join(tokens_dir, f"{image_id}.tokens")
            if not os.path.exists(path):
                raise FileNotFoundError(
                    f"missing token file for image {image_id!r}: {path}")
            stack = read_token_file(path)
            c = stack.layers * stack.heads
            if c != config.correlation_channels:
                raise ValidationError(
                    f"{path}: {c} correlation channels "
                    f"(layers {stack.layers} x heads {stack.heads}), "
                    f"config expects {config.correlation_channels}")
            cache[image_id] = stack
        return cache[image_id]

    return lookup


@main.command()
@click.option("--episodes", "episodes_path", type=click.Path(dir_okay=False), required=True)
@click.option("--annotations", type=click.Path(dir_okay=False), required=True)
@click.option("--tokens", type=click.Path(file_okay=False), required=True,
              help="Directory of <image_id>.tokens files.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--config", default="emat", show_default=True,
              help="Preset name or config JSON path.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def predict(episodes_path, annotations, tokens, checkpoint, config, out):
    """Run N-way inference over episodes using precomputed token files."""
    cfg = _resolve_config(config)

    def run():
        pool = eps.read_annotations(annotations)
        episode_list = eps.read_episodes(episodes_path, pool)
        params = mdl.load_checkpoint(checkpoint, cfg)
        lookup = _token_lookup(tokens, cfg)
        preds = []
        for i, episode in enumerate(episode_list):
            pred = mdl.infer_multiway(episode, lookup, params, cfg)
            preds.append(pred)
            click.echo(f"episode {i}: query {pred.query_id} "
                       f"labels {pred.label_vector.tolist()}")
        eps.write_predictions(out, preds)
        click.echo(f"predictions written to {out}")

    _guard(run)


@main.command("eval")
@click.option("--predictions", type=click.Path(dir_okay=False), required=True)
@click.option("--annotations", type=click.Path(dir_okay=False), required=True)
@click.option("--per-class", is_flag=True, help="Positionwise accuracy instead of exact match.")
@click.option("--pooled", is_flag=True, help="Pool IoU over all episodes and classes.")
def eval_cmd(predictions, annotations, per_class, pooled):
    """Score prediction files against query-image ground truth."""
    def run():
        preds = eps.read_predictions(predictions)
        pool = eps.read_annotations(annotations)
        index = pool.index()
        labels, masks = [], []
        for p in preds:
            if p.query_id not in index:
                raise FormatError(f"prediction query {p.query_id!r} not in annotations")
            ann = index[p.query_id].annotations
            labels.append(np.array(
                [1 if cid in ann and ann[cid].any() else 0 for cid in p.class_ids],
                dtype=np.int8))
            masks.append({cid: ann[cid] for cid in p.class_ids
                          if cid in ann and ann[cid].any()})
        acc = eps.metric_accuracy(preds, labels, per_class=per_class)
        miou = eps.metric_miou(preds, masks, pooled=pooled)
        click.echo(f"Acc {acc:.4f}  mIoU {miou:.4f}  ({len(preds)} episodes)")
        click.echo(json.dumps({"acc": acc, "miou": miou, "episodes": len(preds)}))

    _guard(run)


@main.command("init-params")
@click.option("--config", default="emat", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def init_params_cmd(config, seed, out):
    """Write a freshly initialized checkpoint."""
    cfg = _resolve_config(config)
    params = mdl.init_params(cfg, seed=seed)
    _guard(mdl.save_checkpoint, out, params, cfg)
    counts = mdl.count_params(cfg)
    click.echo(f"checkpoint written to {out} "
               f"(config {cfg.config_hash()}, {counts['total']} parameters)")


@main.command("synth-tokens")
@click.option("--annotations", type=click.Path(dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--heads", default=2, show_default=True)
@click.option("--head-dim", default=8, show_default=True)
@click.option("--patch", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth_tokens(annotations, out_dir, layers, heads, head_dim, patch, seed):
    """Generate seeded synthetic token files for every image in an annotation file."""
    def run():
        pool = eps.read_annotations(annotations)
        os.makedirs(out_dir, exist_ok=True)
        for img in pool.images:
            stack = synth_token_stack(_image_rng(seed, img.image_id), layers, heads,
                                      head_dim, img.height, img.width, patch)
            write_token_file(os.path.join(out_dir, f"{img.image_id}.tokens"), stack)
        click.echo(f"{len(pool.images)} token files written to {out_dir}")

    _guard(run)


if __name__ == "__main__":
    main()

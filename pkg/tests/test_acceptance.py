"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained models are built once per session and shared between the
training, relevance and sufficiency criteria.
"""

import json
import time

import numpy as np
import pytest

from kanseg import numerics as nx
from kanseg.cli import main
from kanseg.data import Sample, channel_statistics, load_tile, normalize, save_tile, synth_channel_roles, synth_generate
from kanseg.explain import channel_relevance, grad_cam, otsu_threshold, plausibility, sufficiency
from kanseg.models import ModelConfig, build_model, build_ukan, build_unet, count_flops, load_checkpoint, save_checkpoint
from kanseg.numerics import Tensor
from kanseg.splinekan import KanLinearParams, SplineGrid, bspline_bases, kan_linear, kan_linear_forward
from kanseg.training import TrainConfig, evaluate, generalized_dice_loss, train

from oracles import bilinear_pixel, cox_de_boor, kan_edge_sum, otsu_exhaustive
from test_explain import tiny_pair, two_map_model

pytestmark = pytest.mark.slow

SEEDS = range(10)
RELEVANCE_SEEDS = (0, 1, 2)
MODEL_KINDS = ("conv", "tok_kan")


@pytest.fixture
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else ""))
        assert ok, f"criterion {number}: {title} {detail}"

    return report


# -- shared synthetic experiment ---------------------------------------------


@pytest.fixture(scope="session")
def synthetic():
    samples = synth_generate(260, 32, 4, seed=0)
    stats = channel_statistics(samples[:200])
    tr, va, te = ([normalize(s, stats) for s in part] for part in (samples[:200], samples[200:230], samples[230:]))
    return list(tr), list(va), list(te)


class _Trained:
    def __init__(self, synthetic):
        self.data = synthetic
        self.cache = {}

    def get(self, kind: str, seed: int = 0):
        if (kind, seed) not in self.cache:
            tr, va, _ = self.data
            cfg = ModelConfig(in_channels=4, stage_channels=(8, 16), bottleneck=kind, input_size=(32, 32))
            start = time.perf_counter()
            result = train(build_model(cfg, seed=seed), tr, va,
                           TrainConfig.paper_protocol(batch_size=8, epochs=30, seed=seed))
            self.cache[kind, seed] = (result.best_model, time.perf_counter() - start)
        return self.cache[kind, seed]


@pytest.fixture(scope="session")
def trained(synthetic):
    return _Trained(synthetic)


# -- 1. gradients ------------------------------------------------------------


def _square(t):
    return (t * t).sum()


OPS = {
    "conv2d": (lambda x, w, b: _square(nx.conv2d(x, w, b, padding=1)), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "max_pool2d": (lambda x: _square(nx.max_pool2d(x, 2)), [(1, 2, 4, 4)]),
    "upsample_bilinear": (lambda x: _square(nx.upsample_bilinear(x, 2)), [(1, 2, 3, 3)]),
    "layer_norm": (lambda x, g, b: _square(nx.layer_norm(x, g, b)) + nx.layer_norm(x, g, b).sum() * 0.3,
                   [(3, 5), (5,), (5,)]),
    "elementwise": (lambda a, b: (nx.relu(a) * nx.silu(b) + nx.sigmoid(a - b) / (b * b + 1.0)).sum(), [(4, 4), (4, 4)]),
    "matmul": (lambda a, b: _square(nx.matmul(a, b)), [(3, 4), (4, 2)]),
}


def _kan_case(rng):
    grid = SplineGrid(-1.0, 1.0, 4, 3)
    x = Tensor(rng.uniform(-1.2, 1.2, (5, 3)))
    base = Tensor(rng.standard_normal((2, 3)))
    coeffs = Tensor(rng.standard_normal((2, 3, grid.num_basis)))
    return (lambda x, b, c: _square(kan_linear(x, b, c, grid))), [x, base, coeffs]


def _gdl_case(rng):
    g = (rng.random((2, 4, 4)) > 0.6).astype(np.uint8)
    return (lambda z: generalized_dice_loss(z, g)), [Tensor(rng.standard_normal((2, 1, 4, 4)))]


def _model_case(kind, seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(in_channels=1, stage_channels=(2,), bottleneck=kind, input_size=(4, 4),
                      kan_grid=SplineGrid(-1.0, 1.0, 3, 2))
    model = build_unet(cfg) if kind == "conv" else build_ukan(cfg)
    names = list(model.params)
    params = [Tensor(rng.standard_normal(model.params[n].shape) * 0.5 + (1.0 if n.endswith("gamma") else 0.0))
              for n in names]
    x = Tensor(rng.standard_normal((1, 1, 4, 4)))
    target = Tensor(rng.standard_normal((1, 1, 4, 4)))
    return (lambda *ts: (model.forward(x, dict(zip(names, ts))) * target).sum()), params


def test_criterion_01_gradient_correctness(verdict):
    start = time.perf_counter()
    worst_op, worst_model = {}, {}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, (fn, shapes) in OPS.items():
            err = nx.grad_check(fn, [Tensor(rng.standard_normal(s)) for s in shapes])
            worst_op[name] = max(worst_op.get(name, 0.0), err)
        for name, case in (("kan_linear_forward", _kan_case), ("generalized_dice_loss", _gdl_case)):
            fn, inputs = case(rng)
            worst_op[name] = max(worst_op.get(name, 0.0), nx.grad_check(fn, inputs))
        for kind in MODEL_KINDS:
            fn, inputs = _model_case(kind, seed)
            worst_model[kind] = max(worst_model.get(kind, 0.0), nx.grad_check(fn, inputs))
    elapsed = time.perf_counter() - start
    ok = max(worst_op.values()) < 1e-6 and max(worst_model.values()) < 1e-5 and elapsed < 120
    verdict(1, "finite-difference gradients", ok,
            f"op max {max(worst_op.values()):.2e}, model max {max(worst_model.values()):.2e}, {elapsed:.0f}s")


# -- 2. splines --------------------------------------------------------------


def test_criterion_02_spline_properties(verdict):
    rng = np.random.default_rng(0)
    grid = SplineGrid(-2.0, 2.0, 5, 3)
    xs = rng.uniform(grid.grid_min, grid.grid_max, 1000)
    B = bspline_bases(xs, grid)
    unity = float(np.abs(B.sum(axis=1) - 1.0).max())
    t = grid.knots
    support = all(
        np.all(B[(xs < t[i]) | (xs >= t[i + grid.order + 1]), i] == 0.0) for i in range(grid.num_basis)
    )
    oracle = max(abs(B[n, i] - cox_de_boor(i, grid.order, xs[n], t)) for n in range(0, 1000, 50) for i in range(grid.num_basis))
    kan_err = 0.0
    for _ in range(100):
        g = SplineGrid(-1.0, float(rng.uniform(0.5, 2.0)), int(rng.integers(2, 8)), int(rng.integers(1, 4)))
        i_dim, o_dim = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        base = rng.standard_normal((o_dim, i_dim))
        coeffs = rng.standard_normal((o_dim, i_dim, g.num_basis))
        x = rng.uniform(g.grid_min - 0.3, g.grid_max + 0.3, (3, i_dim))
        got = kan_linear_forward(x, KanLinearParams(base, coeffs, g)).data
        for r in range(3):
            ref = kan_edge_sum(x[r], base, coeffs, g.grid_min, g.grid_max, g.intervals, g.order)
            kan_err = max(kan_err, float(np.abs(got[r] - ref).max()))
    ok = unity < 1e-12 and support and oracle < 1e-12 and kan_err < 1e-12
    verdict(2, "spline partition, support and edge oracle", ok,
            f"unity {unity:.1e}, support {support}, kan {kan_err:.1e}")


# -- 3. flops ----------------------------------------------------------------

FLOP_CONFIGS = [
    dict(stage_channels=(4, 8)),
    dict(stage_channels=(8, 16)),
    dict(stage_channels=(6, 12, 24)),
    dict(stage_channels=(8, 16, 32)),
    dict(stage_channels=(16, 32), tok_kan_depth=2),
]
HEAVY_CONFIG = dict(stage_channels=(4, 8, 64), tok_kan_depth=16)


def _flop_pair(overrides):
    cfg = ModelConfig(in_channels=4, input_size=(32, 32), **overrides)
    return count_flops(build_unet(cfg)), count_flops(build_ukan(cfg.with_bottleneck("tok_kan")))


def test_criterion_03_flop_ordering(verdict):
    pairs = [_flop_pair(c) for c in FLOP_CONFIGS]
    unet, ukan = _flop_pair(HEAVY_CONFIG)
    ratio = ukan / unet
    ok = len({json.dumps(c, sort_keys=True) for c in FLOP_CONFIGS}) == 5 and all(k < u for u, k in pairs) and ratio < 0.85
    verdict(3, "U-KAN cheaper than U-Net", ok,
            "ratios " + ", ".join(f"{k / u:.3f}" for u, k in pairs) + f"; bottleneck-heavy {ratio:.3f}")


# -- 4. training -------------------------------------------------------------


def test_criterion_04_end_to_end_training(trained, synthetic, verdict):
    _, _, test = synthetic
    ious, total = {}, 0.0
    for kind in MODEL_KINDS:
        model, seconds = trained.get(kind)
        ious[kind] = evaluate(model, test).iou
        total += seconds
    ok = min(ious.values()) >= 0.80 and total < 900
    verdict(4, "both models reach test IoU >= 0.80", ok,
            f"U-Net {ious['conv']:.3f}, U-KAN {ious['tok_kan']:.3f}, {total:.0f}s")


# -- 5. otsu -----------------------------------------------------------------


def test_criterion_05_otsu_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for n in range(100):
        shape = tuple(int(v) for v in rng.integers(4, 24, 2))
        if n % 2:
            raw = rng.random(shape) ** 3
        else:
            raw = np.where(rng.random(shape) > 0.7, rng.normal(0.8, 0.1, shape), rng.normal(0.2, 0.1, shape)).clip(0)
        res = otsu_threshold(raw)
        peak = raw.max()
        mismatches += res.threshold != otsu_exhaustive(raw / peak)
    verdict(5, "Otsu equals exhaustive search", mismatches == 0, f"{mismatches} mismatches in 100")


# -- 6. grad-cam -------------------------------------------------------------


def test_criterion_06_grad_cam_oracle(verdict):
    image = np.random.default_rng(6).standard_normal((1, 4, 4))
    a, b = 0.8, -0.3
    sal = grad_cam(two_map_model([a, b]), Sample(image, np.zeros((4, 4), np.uint8), "hand"))
    maps = [image[0], 0.5 - image[0]]
    pooled = [m.reshape(2, 2, 2, 2).max(axis=(1, 3)) for m in maps]
    # each pooled cell feeds 4 upsampled pixels with unit total weight, so alpha_k = 4 * head_k
    cam = np.maximum(4 * a * pooled[0] + 4 * b * pooled[1], 0.0)
    expect = np.array([[bilinear_pixel(cam, 2, p, q) for q in range(4)] for p in range(4)])
    err = float(np.abs(sal.raw - expect).max())
    negatives = trivial = 0
    for seed in range(25):
        rng = np.random.default_rng(seed)
        for m in tiny_pair(seed):
            for _ in range(20):
                raw = grad_cam(m, Sample(rng.standard_normal((3, 8, 8)), np.zeros((8, 8), np.uint8))).raw
                negatives += int((raw < 0).any())
                trivial += int(not raw.any())
    verdict(6, "Grad-CAM hand oracle and non-negativity", err < 1e-9 and negatives == 0,
            f"max err {err:.1e}, negative maps {negatives}/1000, all-zero maps {trivial}")


# -- 7. metric identities ----------------------------------------------------


def test_criterion_07_metric_identities(verdict):
    rng = np.random.default_rng(7)
    gt = (rng.random((16, 16)) > 0.6).astype(np.uint8)
    p = plausibility(gt.astype(float), gt).scores()
    plaus_ok = all(p[k] == 1.0 for k in ("iou", "f1", "precision", "recall"))

    model = tiny_pair(7)[0]
    gt = gt[:8, :8]
    sample = Sample(rng.standard_normal((3, 8, 8)), gt, "s")
    deltas = sufficiency(model, sample, np.ones((8, 8), bool)).deltas
    suff_ok = all(v == 0.0 for v in deltas.values())

    model.params["enc1.conv1.weight"][:, 1] = 0.0
    rel = channel_relevance(model, Sample(rng.standard_normal((3, 8, 8)), gt, "d"))
    dead_ok = rel[1] == 1.0
    verdict(7, "plausibility, sufficiency and dead-channel identities", plaus_ok and suff_ok and dead_ok,
            f"plausibility {plaus_ok}, sufficiency {suff_ok}, dead channel {rel[1]}")


# -- 8. channel relevance ----------------------------------------------------


def _mean_relevance(model, test):
    rows = []
    for s in test:
        try:
            rows.append(channel_relevance(model, s))
        except ValueError:
            pass
    return np.mean(rows, axis=0)


def test_criterion_08_channel_relevance(trained, synthetic, verdict):
    _, _, test = synthetic
    roles = synth_channel_roles(4)
    critical, noise = roles.index("signal"), roles.index("noise")
    details, ok = [], True
    for seed in RELEVANCE_SEEDS:
        model, _ = trained.get("conv", seed)
        rel = _mean_relevance(model, test)
        seed_ok = int(np.argmin(rel)) == critical and rel[noise] >= 0.9 * rel.max()
        ok &= bool(seed_ok)
        details.append(f"seed {seed}: " + "/".join(f"{v:.2f}" for v in rel))
    verdict(8, "critical channel least, noise channel near max", ok, "; ".join(details))


# -- 9. sufficiency ----------------------------------------------------------


def test_criterion_09_sufficiency_sign(trained, synthetic, verdict):
    _, _, test = synthetic
    details, ok = [], True
    for kind in MODEL_KINDS:
        model, _ = trained.get(kind)
        deltas = [r.deltas for r in (sufficiency(model, s, grad_cam(model, s)) for s in test) if not r.degenerate]
        prec = float(np.mean([d["precision"] for d in deltas]))
        rec = float(np.mean([d["recall"] for d in deltas]))
        ok &= prec >= -0.02 and rec <= 0.0
        details.append(f"{kind}: precision {prec:+.3f}, recall {rec:+.3f} over {len(deltas)}")
    verdict(9, "masking keeps precision and lowers recall", ok, "; ".join(details))


# -- 10. determinism ---------------------------------------------------------


def test_criterion_10_determinism(tmp_path, verdict):
    assert main(["synth", "--count", "24", "--size", "16", "--seed", "2", "--out", str(tmp_path / "d")]) == 0
    (tmp_path / "m.json").write_text(json.dumps({"stage_channels": [4, 8]}))
    same = True
    for kind in ("unet", "ukan"):
        for run in ("a", "b"):
            assert main(["train", "--data", str(tmp_path / "d"), "--model", kind, "--config", str(tmp_path / "m.json"),
                         "--epochs", "3", "--seed", "9", "--out", str(tmp_path / kind / run)]) == 0
        for name in ("history.csv", "best.ckpt"):
            same &= (tmp_path / kind / "a" / name).read_bytes() == (tmp_path / kind / "b" / name).read_bytes()
    verdict(10, "byte-identical training outputs", same)


# -- 11. round-trips ---------------------------------------------------------


def test_criterion_11_format_round_trips(tmp_path, verdict):
    rng = np.random.default_rng(11)
    tile_bad = ckpt_bad = 0
    for n in range(100):
        c, h, w = (int(v) for v in rng.integers(1, 7, 3))
        cloud = (rng.random((h, w)) > 0.5).astype(np.uint8) if n % 2 else None
        s = Sample(rng.standard_normal((c, h, w)).astype(np.float32), (rng.random((h, w)) > 0.5).astype(np.uint8),
                   f"t{n}", cloud)
        back = load_tile(save_tile(s, tmp_path / "tiles"))
        tile_bad += not (back.image.tobytes() == s.image.tobytes() and back.mask.tobytes() == s.mask.tobytes()
                         and (cloud is None) == (back.cloud_mask is None)
                         and (cloud is None or back.cloud_mask.tobytes() == cloud.tobytes()))

        kind = MODEL_KINDS[n % 2]
        cfg = ModelConfig(in_channels=int(rng.integers(1, 4)), stage_channels=(int(rng.integers(1, 5)),),
                          bottleneck=kind, input_size=(4, 4))
        model = build_model(cfg, seed=n)
        model.params = {k: rng.standard_normal(v.shape) for k, v in model.params.items()}
        path = tmp_path / f"m{n}.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        ckpt_bad += not (loaded.config.to_dict() == cfg.to_dict()
                         and all(loaded.params[k].tobytes() == v.tobytes() for k, v in model.params.items()))
    verdict(11, "tile and checkpoint round-trips", tile_bad == 0 and ckpt_bad == 0,
            f"tile failures {tile_bad}, checkpoint failures {ckpt_bad}")

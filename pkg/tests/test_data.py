import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from kanseg.data import (
    Sample,
    channel_statistics,
    chi_square_homogeneity,
    class_table,
    cloud_overlap,
    filter_cloudy,
    load_split,
    load_tile,
    normalize,
    read_manifest,
    save_tile,
    split_dataset,
    synth_channel_roles,
    synth_generate,
    write_dataset,
)
from kanseg.errors import LoadError

from oracles import chi_square_2xk


def random_sample(rng, c=3, h=5, w=4, cloud=False, ident="t"):
    return Sample(
        rng.standard_normal((c, h, w)).astype(np.float32),
        (rng.random((h, w)) > 0.5).astype(np.uint8),
        ident,
        (rng.random((h, w)) > 0.5).astype(np.uint8) if cloud else None,
    )


def with_positives(k, ident):
    mask = np.zeros(4, dtype=np.uint8)
    mask[:k] = 1
    return Sample(np.zeros((1, 2, 2), np.float32), mask.reshape(2, 2), ident)


# -- samples and tiles -------------------------------------------------------


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((1, 2, 2)), np.full((2, 2), 2))
    with pytest.raises(ValueError):
        Sample(np.zeros((1, 2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Sample(np.full((1, 2, 2), np.nan), np.zeros((2, 2)))


@pytest.mark.parametrize("cloud", [False, True])
def test_tile_round_trip_bitwise(tmp_path, cloud):
    rng = np.random.default_rng(0)
    s = random_sample(rng, cloud=cloud, ident="abc")
    path = save_tile(s, tmp_path, ["a", "b", "c"])
    back = load_tile(path)
    assert back.id == "abc"
    assert back.image.dtype == np.float32 and back.image.tobytes() == s.image.tobytes()
    assert back.mask.tobytes() == s.mask.tobytes()
    if cloud:
        assert back.cloud_mask.tobytes() == s.cloud_mask.tobytes()
    else:
        assert back.cloud_mask is None
    assert json.loads(open(path).read())["channel_names"] == ["a", "b", "c"]


def test_tile_blob_layout_is_channel_major_float32(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
    save_tile(Sample(img, np.eye(2, dtype=np.uint8), "x"), tmp_path)
    raw = (tmp_path / "x.img").read_bytes()
    assert np.frombuffer(raw, "<f4").tolist() == list(range(12))
    assert (tmp_path / "x.mask").read_bytes() == bytes([1, 0, 0, 1])


def test_mask_value_two_rejected(tmp_path):
    path = save_tile(random_sample(np.random.default_rng(1), ident="m"), tmp_path)
    (tmp_path / "m.mask").write_bytes(bytes([2] * 20))
    with pytest.raises(LoadError, match="mask_file"):
        load_tile(path)


def test_channel_count_disagreement(tmp_path):
    rng = np.random.default_rng(2)
    path = save_tile(Sample(rng.standard_normal((2, 4, 4)).astype(np.float32), np.zeros((4, 4)), "k"), tmp_path)
    sidecar = json.loads(open(path).read())
    sidecar["shape"] = [12, 4, 4]
    open(path, "w").write(json.dumps(sidecar))
    with pytest.raises(LoadError, match="image_file.*12, 4, 4"):
        load_tile(path)


@pytest.mark.parametrize("field,value", [("magic", "NOPE"), ("version", 7), ("dtype", "float64"), ("shape", [2, 2])])
def test_sidecar_field_errors(tmp_path, field, value):
    path = save_tile(random_sample(np.random.default_rng(3), ident="f"), tmp_path)
    sidecar = json.loads(open(path).read())
    sidecar[field] = value
    open(path, "w").write(json.dumps(sidecar))
    with pytest.raises(LoadError, match=field):
        load_tile(path)


def test_load_applies_normalization(tmp_path):
    s = random_sample(np.random.default_rng(4), ident="n")
    norm = {"mean": [1.0, 2.0, 3.0], "std": [2.0, 2.0, 4.0]}
    back = load_tile(save_tile(s, tmp_path), norm)
    np.testing.assert_allclose(back.image[2], (s.image[2].astype(np.float64) - 3.0) / 4.0)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    splits = {name: [random_sample(rng, ident=f"{name}{i}") for i in range(n)]
              for name, n in (("train", 3), ("val", 1), ("test", 2))}
    stats = channel_statistics(splits["train"])
    write_dataset(tmp_path, splits, ["r", "g", "b"], stats)
    manifest = read_manifest(tmp_path)
    assert manifest.ids("test") == ["test0", "test1"]
    assert manifest.channel_names == ["r", "g", "b"] and manifest.normalization == stats
    raw = load_split(tmp_path, "train", normalized=False)
    assert [s.image.tobytes() for s in raw] == [s.image.tobytes() for s in splits["train"]]
    normed = load_split(tmp_path, "train")
    stack = np.stack([s.image for s in normed])
    np.testing.assert_allclose(stack.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(stack.std(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_dataset_rejects_duplicates_and_bad_manifest(tmp_path):
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        write_dataset(tmp_path, {"train": [random_sample(rng, ident="a"), random_sample(rng, ident="a")]})
    with pytest.raises(LoadError):
        read_manifest(tmp_path / "missing")
    (tmp_path / "manifest.json").write_text('{"magic": "other"}')
    with pytest.raises(LoadError, match="magic"):
        read_manifest(tmp_path)


def test_normalize_channel_mismatch():
    with pytest.raises(ValueError):
        normalize(random_sample(np.random.default_rng(0)), {"mean": [0.0], "std": [1.0]})


# -- chi-square and splits ---------------------------------------------------


def test_chi_square_hand_table():
    stat, p, dof = chi_square_homogeneity([[1, 2, 3], [3, 2, 1]])
    assert stat == pytest.approx(2.0, abs=1e-12)
    assert dof == 2
    assert p == pytest.approx(math.exp(-1.0), abs=1e-12)


@given(st.lists(st.tuples(st.integers(1, 500), st.integers(1, 500)), min_size=2, max_size=5))
@settings(max_examples=60, deadline=None)
def test_chi_square_matches_direct_formula(cols):
    table = np.array(cols, dtype=float).T
    stat, p, dof = chi_square_homogeneity(table)
    assert stat == pytest.approx(chi_square_2xk(table.tolist()), rel=1e-9, abs=1e-9)
    ref = chi2_contingency(table, correction=False)
    assert p == pytest.approx(ref[1], rel=1e-9, abs=1e-12)
    assert dof == len(cols) - 1


def test_three_sample_split_statistic():
    samples = [with_positives(k, f"s{k}") for k in (1, 2, 3)]
    result = split_dataset(samples, ratios=(1 / 3, 1 / 3, 1 / 3), seed=0, p_min=0.0, max_retries=1)
    table = class_table(result)
    assert sorted(table[0].tolist()) == [1, 2, 3]
    assert chi_square_homogeneity(table)[0] == pytest.approx(2.0, abs=1e-12)


def test_identical_frequencies_accept_first_try():
    samples = [with_positives(2, f"s{i}") for i in range(10)]
    result = split_dataset(samples, ratios=(0.6, 0.2, 0.2), seed=4)
    assert result.p_value == 1.0 and result.accepted and result.seed_used == 4


def test_default_ratios_on_100_tiles():
    tiles = synth_generate(100, size=16, channels=2, seed=0)
    train, val, test = split_dataset(tiles, seed=0, max_retries=3)
    assert (len(train), len(val), len(test)) == (76, 10, 14)


@given(st.integers(3, 40), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_splits_partition_the_input(n, seed):
    samples = [with_positives(i % 5, f"s{i}") for i in range(n)]
    try:
        result = split_dataset(samples, ratios=(0.5, 0.25, 0.25), seed=seed, max_retries=3)
    except ValueError:
        assert round(n * 0.25) < 1
        return
    ids = [s.id for part in result for s in part]
    assert sorted(ids) == sorted(s.id for s in samples)


def test_retries_return_best_and_flag():
    rng = np.random.default_rng(0)
    samples = [random_sample(rng, c=1, h=16, w=16, ident=f"s{i}") for i in range(12)]
    result = split_dataset(samples, ratios=(0.5, 0.25, 0.25), p_min=1.0, max_retries=5)
    assert not result.accepted
    best = max(chi_square_homogeneity(class_table(
        split_dataset(samples, (0.5, 0.25, 0.25), seed=s, p_min=0.0, max_retries=1)))[1] for s in range(5))
    assert result.p_value == best


def test_split_argument_errors():
    samples = [with_positives(1, f"s{i}") for i in range(5)]
    with pytest.raises(ValueError):
        split_dataset(samples[:2])
    with pytest.raises(ValueError):
        split_dataset(samples, ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_dataset(samples, ratios=(0.98, 0.01, 0.01))


# -- cloud filter ------------------------------------------------------------


def cloudy(crop_px, cloud_px, extra_cloud=0):
    mask = np.zeros(20, dtype=np.uint8)
    mask[:crop_px] = 1
    cloud = np.zeros(20, dtype=np.uint8)
    cloud[:cloud_px] = 1
    cloud[crop_px : crop_px + extra_cloud] = 1
    return Sample(np.zeros((1, 4, 5)), mask.reshape(4, 5), "c", cloud.reshape(4, 5))


def test_overlap_boundary_is_kept():
    s = cloudy(10, 7)
    assert cloud_overlap(s) == 0.7
    assert filter_cloudy([s]) == [s]


def test_clear_and_fully_covered():
    assert len(filter_cloudy([cloudy(10, 0)])) == 1
    assert filter_cloudy([cloudy(10, 10)]) == []
    assert len(filter_cloudy([cloudy(0, 0, extra_cloud=5)])) == 1


def test_union_denominator_option():
    s = cloudy(10, 8, extra_cloud=5)
    assert cloud_overlap(s, "crop") == 0.8
    assert cloud_overlap(s, "union") == 8 / 15
    assert filter_cloudy([s]) == []
    assert filter_cloudy([s], denominator="union") == [s]
    with pytest.raises(ValueError):
        cloud_overlap(s, "area")


def test_missing_cloud_mask():
    with pytest.raises(ValueError):
        filter_cloudy([with_positives(2, "x")])


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_filter_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    samples = [random_sample(rng, c=1, cloud=True, ident=str(i)) for i in range(6)]
    once = filter_cloudy(samples)
    assert filter_cloudy(once) == once


# -- synthetic generator -----------------------------------------------------


def test_generator_is_reproducible():
    a, b = synth_generate(5, seed=3), synth_generate(5, seed=3)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))
    assert synth_generate(1, seed=4)[0].image.tobytes() != a[0].image.tobytes()
    assert [s.id for s in a] == [f"tile{i:05d}" for i in range(5)]


def test_positive_fraction_bounds():
    fractions = [s.mask.mean() for seed in range(100) for s in synth_generate(1, size=32, seed=seed)]
    assert 0.05 <= min(fractions) and max(fractions) <= 0.6


def test_channel_design():
    tiles = synth_generate(100, size=32, channels=4, seed=0)
    assert synth_channel_roles(4) == ["signal", "edge", "noise", "half"]
    masks = np.concatenate([s.mask.reshape(-1) for s in tiles]).astype(float)
    chan = lambda c: np.concatenate([s.image[c].reshape(-1) for s in tiles]).astype(float)
    corr = lambda c: np.corrcoef(chan(c), masks)[0, 1]
    assert abs(corr(2)) < 0.05
    assert corr(0) > 0.8 and corr(3) > 0.5 and corr(0) > corr(3)
    inside, outside = chan(0)[masks == 1], chan(0)[masks == 0]
    assert inside.mean() - outside.mean() == pytest.approx(1.0, abs=0.02)
    assert np.std(chan(0) - masks) == pytest.approx(0.25, abs=0.01)


def test_generator_arguments():
    with pytest.raises(ValueError):
        synth_generate(1, size=8)
    with pytest.raises(ValueError):
        synth_generate(1, channels=1)
    assert synth_channel_roles(2) == ["signal", "half"]
    assert synth_channel_roles(5) == ["signal", "edge", "noise", "noise", "half"]

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import entr

from bevsan import autodiff as ad
from bevsan.autodiff import DimensionError, Tensor
from bevsan.detector import (VARIANTS, AblationRow, CheckpointFormatError, DetectionHead, PreparedData, TrainConfig,
                             TrainingDivergedError, ablation_csv, bev_features, box_cells, checkpoint_text,
                             evaluate_heatmaps, f1, fan_in, forward, gaussian_targets, head_forward, heatmap_loss,
                             init_model, match_counts, parse_checkpoint, peaks, positive_weight, prepare,
                             read_checkpoint, run_ablation, scene_stack, step_scales, summarize,
                             targets_to_logits, train, variant_slices, write_checkpoint)
from bevsan.geometry import BevGridSpec, HeightSlice
from bevsan.lidar import DEFAULT_GLOBALS, NUSCENES_LOCALS
from bevsan.pooling import FrustumFeatures, cached_frustum_points, lift, pool_slice_reference
from bevsan.scenes import Box3D, SceneConfig, generate_scenes, render_camera_features

GRID = BevGridSpec()


def small_data(variant, n=6, seed=0):
    cfg = SceneConfig()
    return prepare(generate_scenes(n, seed, cfg), variant_slices(variant), cfg)


@pytest.fixture(scope="module")
def nine_slice():
    return small_data("full-SAN", n=8)


def subset(data, variant):
    full = variant_slices("full-SAN")
    idx = [full.index(s) for s in variant_slices(variant)]
    return PreparedData(data.stacks[:, idx], data.targets, data.scenes, [full[i] for i in idx])


# ---------------------------------------------------------------- head, loss


def test_zero_head_gives_zero_logits():
    head = DetectionHead(np.zeros((8, 8, 3, 3)), np.zeros(8), np.zeros((2, 8, 1, 1)), np.zeros(2))
    out = head_forward(Tensor(np.random.default_rng(0).standard_normal((8, 16, 16))), head)
    assert out.shape == (2, 16, 16)
    assert_array_equal(out.data, 0.0)


def test_head_extent_mismatch(rng):
    with pytest.raises(DimensionError):
        head_forward(Tensor(np.ones((4, 16, 16))), DetectionHead.init(8, 2, rng))


def test_head_gradient(rng):
    head = DetectionHead.init(3, 2, rng)
    x = rng.standard_normal((3, 5, 5))
    wts = rng.standard_normal((2, 5, 5))
    assert ad.finite_diff_check(lambda t: ad.sum(ad.mul(head_forward(t, head), Tensor(wts))), x) <= 1e-4


def test_targets_peak_at_box_cell():
    boxes = [Box3D((-15.0, 3.0, -1.4), (0.6, 0.6, 0.8), 0.0, 0), Box3D((5.2, 5.2, 0.5), (8, 2.6, 3), 0.0, 1)]
    t = gaussian_targets(boxes, GRID, 2)
    # x=-15 -> ix 0, y=3 -> iy 9; x=y=5.2 -> cell 10
    assert t[0, 9, 0] == 1.0 and t[1, 10, 10] == 1.0
    assert_allclose(t[0, 9, 1], np.exp(-0.5))
    assert_allclose(t[1, 11, 11], np.exp(-1.0))
    assert box_cells(boxes, GRID)[1][:3] == (1, 10, 10)
    with pytest.raises(ValueError):
        gaussian_targets(boxes, GRID, 1)


def test_positive_weight():
    t = np.zeros((1, 4, 4))
    assert positive_weight(t) == 1.0
    t[0, 1, 1] = 1.0
    t[0, 2, 2] = 0.5
    assert positive_weight(t) == 15.0


def test_loss_at_target_logits_is_weighted_entropy():
    t = gaussian_targets([Box3D((1.0, 1.0, 0.0), (1, 1, 1), 0.0, 0)], GRID, 2)
    x = targets_to_logits(t)
    w = np.where(t == 1.0, positive_weight(t), 1.0)
    expected = float(np.mean(w * (entr(t) + entr(1 - t))))
    assert_allclose(heatmap_loss(Tensor(x), t).item(), expected, rtol=1e-9, atol=1e-10)


def test_confident_background_loss_vanishes():
    assert heatmap_loss(Tensor(np.full((2, 4, 4), -40.0)), np.zeros((2, 4, 4))).item() < 1e-15


@given(st.integers(0, 10_000))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((2, 4, 4))
    t[0, 0, 0] = 1.0
    assert heatmap_loss(Tensor(rng.standard_normal((2, 4, 4)) * 10), t).item() >= 0.0


def test_loss_validates_targets():
    with pytest.raises(ValueError):
        heatmap_loss(Tensor(np.zeros((1, 2, 2))), np.full((1, 2, 2), 1.5))
    with pytest.raises(DimensionError):
        heatmap_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))


# -------------------------------------------------------------- evaluation


def test_peaks_nms_and_tie_break():
    h = np.zeros((4, 4))
    h[1, 1] = h[1, 2] = 0.9     # tie: lower linear index wins
    h[3, 3] = 0.5
    h[3, 0] = 0.3               # below threshold
    assert peaks(h, 0.4) == [(1, 1, 0.9), (3, 3, 0.5)]


def test_matching_greedy_by_score():
    pred = [(5, 5, 0.6), (5, 6, 0.9)]
    gt = [(5.5, 6.5)]
    assert match_counts(pred, gt) == (1, 1, 0)
    assert match_counts([(0, 0, 0.9)], [(4.0, 4.0)]) == (0, 1, 1)
    # exactly at the radius still matches: centre (0.5, 0.5) to (2.5, 0.5)
    assert match_counts([(0, 0, 0.9)], [(2.5, 0.5)]) == (1, 0, 0)


@given(st.permutations(range(5)))
def test_match_counts_ignore_prediction_order(perm):
    pred = [(1, 1, 0.9), (1, 2, 0.8), (6, 6, 0.7), (9, 9, 0.5), (3, 3, 0.5)]
    gt = [(1.5, 1.5), (6.0, 6.5), (12.0, 12.0)]
    assert match_counts([pred[i] for i in perm], gt) == match_counts(pred, gt)


def test_f1_values():
    assert f1(0, 0, 0) == 1.0
    assert f1(0, 3, 0) == 0.0
    assert f1(2, 1, 1) == pytest.approx(2 / 3)


def test_oracle_heatmaps_score_one():
    scenes = generate_scenes(10, 0)
    probs = np.stack([gaussian_targets(s.boxes, GRID, 2) for s in scenes])
    rep = evaluate_heatmaps(probs, scenes, GRID, ["cone", "bus"])
    assert rep.scores == [1.0, 1.0]
    assert rep.mean == 1.0 and rep.as_dict() == {"cone": 1.0, "bus": 1.0}


def test_empty_predictions_score_zero():
    scenes = [s for s in generate_scenes(10, 0) if len(s.boxes)]
    rep = evaluate_heatmaps(np.zeros((len(scenes), 2, 16, 16)), scenes, GRID, ["cone", "bus"])
    assert rep.scores == [0.0, 0.0]


def test_random_heatmaps_score_low():
    scenes = generate_scenes(100, 500)
    probs = np.random.default_rng(0).random((100, 2, 16, 16))
    assert evaluate_heatmaps(probs, scenes, GRID, ["cone", "bus"]).mean < 0.2


# ---------------------------------------------------------------- variants


def test_variant_slices():
    assert variant_slices("baseline-flat") == [HeightSlice(-6.0, 4.0)]
    assert variant_slices("full-SAN") == list(DEFAULT_GLOBALS) + list(NUSCENES_LOCALS)
    assert variant_slices("local-only") == list(NUSCENES_LOCALS)
    assert variant_slices("global-only") == list(DEFAULT_GLOBALS)
    with pytest.raises(ValueError):
        variant_slices("nope")


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_runs_forward_and_batches(nine_slice, variant):
    data = subset(nine_slice, variant) if len(variant_slices(variant)) > 1 or variant == "baseline-flat" \
        else small_data(variant, n=3)
    J = data.stacks.shape[1] - (3 if variant in ("full-SAN", "se-mean", "se-se", "se-trans") else 0)
    m = init_model(variant, 4, 2, J, seed=0, input_scale=0.5)
    batched = forward(m, Tensor(data.stacks[:3])).data
    assert batched.shape == (3, 2, 16, 16)
    assert_allclose(batched[1], forward(m, Tensor(data.stacks[1])).data, rtol=1e-12, atol=1e-12)


def test_baseline_feature_is_reference_pooling():
    cfg = SceneConfig()
    scene = generate_scenes(1, 3, cfg)[0]
    rng = np.random.default_rng([scene.seed, 7])
    frustums = []
    for cam in scene.cameras:
        F, D = render_camera_features(scene, cam, cfg.frustum, 4, noise=0.1, n_classes=2, rng=rng)
        frustums.append(FrustumFeatures(lift(F, D), cached_frustum_points(cam, cfg.frustum)))
    ref = pool_slice_reference(frustums, cfg.grid, HeightSlice(-6.0, 4.0)).data
    stack = scene_stack(scene, variant_slices("baseline-flat"), cfg)
    m = init_model("baseline-flat", 4, 2, 1, 0)
    assert_array_equal(bev_features(m, Tensor(stack)).data, ref)


# ---------------------------------------------------------------- training


def test_fan_in_and_step_scales():
    assert fan_in((4, 8, 3, 3)) == 72
    assert fan_in((6, 5)) == 6
    assert fan_in((7,)) == 1
    m = init_model("local-only", 4, 2, 6, 0)
    scales = dict(zip([n for n, _ in m.items()], step_scales(m)))
    assert scales["se_local.b1"] == scales["se_local.w1"] == 1 / 24
    assert scales["head.b2"] == 1 / 4


def test_zero_lr_leaves_parameters(nine_slice):
    data = subset(nine_slice, "local-only")
    m = init_model("local-only", 4, 2, 6, 0, input_scale=1.0)
    r = train(TrainConfig("local-only", epochs=2, lr=0.0, batch_size=4), data, model=m)
    for (_, a), (_, b) in zip(m.items(), r.model.items()):
        assert_array_equal(a, b)


def test_training_is_deterministic(nine_slice):
    data = subset(nine_slice, "se-se")
    cfg = TrainConfig("se-se", epochs=2, lr=1.0, batch_size=3, seed=4)
    a, b = train(cfg, data), train(cfg, data)
    assert a.history == b.history
    for (_, x), (_, y) in zip(a.model.items(), b.model.items()):
        assert_array_equal(x, y)


def test_se_trans_is_the_full_model(nine_slice):
    a = train(TrainConfig("full-SAN", epochs=1, batch_size=4, seed=2), nine_slice)
    b = train(TrainConfig("se-trans", epochs=1, batch_size=4, seed=2), nine_slice)
    assert a.history == b.history
    for (na, x), (nb, y) in zip(a.model.items(), b.model.items()):
        assert na == nb
        assert_array_equal(x, y)


def test_training_reduces_loss(nine_slice):
    data = subset(nine_slice, "baseline-flat")
    r = train(TrainConfig("baseline-flat", epochs=15, lr=5.0, batch_size=4), data)
    assert len(r.history) == 16
    assert r.history[-1] < r.history[0]


def test_divergence_is_reported(nine_slice):
    data = subset(nine_slice, "baseline-flat")
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError, match="baseline-flat"):
            train(TrainConfig("baseline-flat", epochs=3, lr=1e300, batch_size=4, clip_norm=None), data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("nope")
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        train(TrainConfig(), PreparedData(np.zeros((0, 9, 4, 16, 16)), np.zeros((0, 2, 16, 16)), [], []))


# ---------------------------------------------------------------- ablation


def test_ablation_structure():
    cfg = SceneConfig()
    tr, va = generate_scenes(4, 0, cfg), generate_scenes(2, 100, cfg)
    variants = ["baseline-flat", "local-only", "global-only", "full-SAN"]
    seen = []
    rows = run_ablation(variants, [0, 1, 2], tr, va, TrainConfig(epochs=1, lr=1.0, batch_size=2),
                        cfg, progress=lambda v, s, r: seen.append((v, s)))
    assert len(seen) == 12
    assert len(rows) == 12 * 2
    assert set(summarize(rows)) == set(variants)
    text = ablation_csv(rows)
    assert text.splitlines()[0] == "variant,seed,class,score"
    assert len(text.splitlines()) == 25
    with pytest.raises(ValueError):
        run_ablation(variants, [0, 1], tr, va)


def test_summarize_mean_and_std():
    rows = [AblationRow("a", s, c, v) for s, c, v in
            [(0, "x", 0.2), (0, "y", 0.4), (1, "x", 0.5), (1, "y", 0.5), (2, "x", 0.6), (2, "y", 0.8)]]
    mean, std = summarize(rows)["a"]
    assert_allclose(mean, np.mean([0.3, 0.5, 0.7]))
    assert_allclose(std, np.std([0.3, 0.5, 0.7], ddof=1))


# -------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip_is_exact(variant, tmp_path):
    J = 1 if variant in ("baseline-flat", "low-band", "high-band", "mean") else 6
    reduction = 2 if variant == "se-se" else 1
    m = init_model(variant, 4, 2, J, seed=3, reduction=reduction, input_scale=0.1 + 1e-17)
    path = tmp_path / "m.ckpt"
    write_checkpoint(m, path, {"profile": "default"})
    back, meta = read_checkpoint(path)
    assert meta == {"profile": "default"}
    assert back.variant == variant and back.input_scale == m.input_scale
    assert [n for n, _ in back.items()] == [n for n, _ in m.items()]
    for (_, a), (_, b) in zip(m.items(), back.items()):
        assert_array_equal(a, b)
    assert checkpoint_text(back, meta) == path.read_text()


def test_checkpoint_header_and_hex_values():
    text = checkpoint_text(init_model("baseline-flat", 1, 1, 1, 0))
    lines = text.splitlines()
    assert lines[0] == "BEVSAN-CKPT v1"
    assert "param head.b2 1" in lines
    assert lines[lines.index("param head.b2 1") + 1] == "0000000000000000"
    assert lines[-1] == "end"


def _ckpt():
    return checkpoint_text(init_model("local-only", 2, 2, 6, 0))


@pytest.mark.parametrize("mutate", [
    lambda t: "",
    lambda t: t.replace("v1", "v2", 1),
    lambda t: t.replace("BEVSAN-CKPT", "CKPT", 1),
    lambda t: t[: len(t) // 2],
    lambda t: t.replace("\nend\n", "\n"),
    lambda t: t + "param extra 1\n",
    lambda t: t.replace("meta variant local-only\n", ""),
    lambda t: t.replace("meta variant local-only", "meta variant global-only"),
    lambda t: t.replace("param head.b2 2", "param head.b2 3"),
    lambda t: t.replace("param head.b2 2", "param head.b2 2xq"),
    lambda t: t.replace("0000000000000000", "00000000000000zz", 1),
])
def test_malformed_checkpoints_raise(mutate):
    with pytest.raises(CheckpointFormatError) as info:
        parse_checkpoint(mutate(_ckpt()))
    assert info.value.lineno >= 1


def test_checkpoint_meta_must_be_single_line():
    with pytest.raises(ValueError):
        checkpoint_text(init_model("mean", 2, 2, 1, 0), {"bad key": "x"})

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbmit import tensor as T
from turbmit.errors import CompatibilityError, ConfigError, DimensionError, FormatError, InputError
from turbmit.metrics import LossConfig, combined_loss

# 8x8 inputs need a window smaller than the default 11
SMALL_LOSS = LossConfig(ssim_window=5, ssim_sigma=1.0)
from turbmit.model import (
    QualityScores, Restorer, RestorerConfig, draw_subset, init_params, load_checkpoint,
    parameter_shapes, quality_scores, residual_combine, restore_forward, save_checkpoint,
    stack_frames,
)
from turbmit.pipeline import TrainConfig, train
from turbmit.turbsim import FrameSequence

TINY = dict(levels=2, blocks_per_level=[1, 1], base_channels=4, heads_per_level=[1, 2],
            frames_in=2, patch=8, quality_channels=2)


def tiny_cfg(**kw):
    return RestorerConfig(**{**TINY, **kw})


def rand_input(rng, cfg, n=1, h=8, w=8):
    return rng.random((n, 3 * cfg.frames_in, h, w))


# --- configuration ----------------------------------------------------------


def test_config_defaults_and_full_layout():
    cfg = RestorerConfig()
    assert cfg.blocks_per_level == [1, 1, 2, 2] and cfg.base_channels == 8
    assert cfg.frames_in == 20 and cfg.multiple == 8
    full = RestorerConfig.full_size()
    assert full.blocks_per_level == [4, 6, 6, 8] and full.base_channels == 48
    assert full.refinement_blocks == 4
    names = [n for n, _ in parameter_shapes(full)]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("kw", [
    dict(blocks_per_level=[1, 1, 1]),
    dict(blocks_per_level=[2, 1, 2, 2]),
    dict(heads_per_level=[3, 2, 4, 8]),
    dict(patch=36),
    dict(frames_in=0),
])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        RestorerConfig(**kw)


# --- reconstruction branch --------------------------------------------------


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 3), st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 2),
       st.integers(1, 2), st.integers(0, 99))
def test_forward_shape_contract(levels, base, frames_in, hm, wm, seed):
    cfg = RestorerConfig(levels=levels, blocks_per_level=[1] * levels, base_channels=base,
                         heads_per_level=[1] * levels, frames_in=frames_in,
                         patch=2 ** (levels - 1), zero_init_output=False)
    rng = np.random.default_rng(seed)
    h, w = hm * cfg.multiple * 2, wm * cfg.multiple * 2
    x = T.Tensor(rand_input(rng, cfg, 1, h, w))
    out = restore_forward(x, init_params(cfg, seed, np.float64), cfg)
    assert out.shape == (1, 3, h, w)


def test_zero_head_gives_zero_correction():
    cfg = RestorerConfig(frames_in=2, patch=16)
    rng = np.random.default_rng(0)
    out = restore_forward(T.Tensor(rand_input(rng, cfg, 1, 16, 16).astype(np.float32)),
                          init_params(cfg, 0), cfg)
    assert np.all(out.data == 0)


def test_forward_rejects_bad_extent():
    cfg = RestorerConfig(frames_in=1, patch=16)
    with pytest.raises(DimensionError, match="multiples of 8"):
        restore_forward(T.Tensor(np.zeros((1, 3, 12, 16), np.float32)), init_params(cfg), cfg)
    with pytest.raises(DimensionError):
        restore_forward(T.Tensor(np.zeros((1, 6, 16, 16), np.float32)), init_params(cfg), cfg)


def test_forward_deterministic():
    cfg = RestorerConfig(frames_in=2, patch=16, zero_init_output=False)
    m = Restorer(cfg, seed=3)
    x = np.random.default_rng(1).random((2, 6, 16, 16))
    np.testing.assert_array_equal(m.predict(x), m.predict(x))


def _directional_error(build, params, seed, h=1e-5, floor=1e-7):
    """Compare dL/dtheta . d with a central difference along random directions d.

    One direction perturbs every parameter at once; then each tensor gets its
    own. ``floor`` keeps directional derivatives that sit at the
    finite-difference roundoff level from dominating the relative error.
    """
    rng = np.random.default_rng(seed)
    T.backward(build(params))
    names = list(params)
    dirs = {k: rng.standard_normal(params[k].shape) for k in names}
    groups = [names] + [[k] for k in names]
    worst = 0.0
    for group in groups:
        analytic = sum(float(np.sum(params[k].grad * dirs[k])) for k in group)
        base = {k: params[k].data.copy() for k in group}
        for sign in (1, -1):
            for k in group:
                params[k].data = base[k] + sign * h * dirs[k]
            if sign == 1:
                up = build(params).item()
            else:
                down = build(params).item()
        for k in group:
            params[k].data = base[k]
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradient_matches_finite_differences(seed):
    cfg = tiny_cfg(zero_init_output=False)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, np.float64)
    x = T.Tensor(rand_input(rng, cfg, 1, 12, 12) if seed % 2 else rand_input(rng, cfg))
    target = T.Tensor(rng.random((1, 3) + x.shape[2:]))
    model = Restorer(cfg, params)

    def build(p):
        return combined_loss(model.forward(x, p)[0], target, SMALL_LOSS)

    assert _directional_error(build, params, seed) < 1e-4


def test_full_model_input_gradient_coordinatewise():
    from helpers import gradcheck

    cfg = tiny_cfg(zero_init_output=False)
    rng = np.random.default_rng(5)
    params = {k: T.Tensor(v.data) for k, v in init_params(cfg, 5, np.float64).items()}
    model = Restorer(cfg, params)
    target = rng.random((1, 3, 8, 8))
    err = gradcheck(lambda x: combined_loss(model(x), T.Tensor(target), SMALL_LOSS), [rand_input(rng, cfg)])
    assert err < 1e-4


# --- quality branch and fusion ----------------------------------------------


def test_identical_frames_get_identical_scores():
    cfg = RestorerConfig(frames_in=4, patch=16)
    params = init_params(cfg, 2, np.float64)
    frame = np.random.default_rng(0).random((3, 16, 16))
    frames = T.Tensor(np.broadcast_to(frame, (1, 4, 3, 16, 16)).copy())
    q = quality_scores(frames, params)
    assert np.ptp(q.numpy) == 0
    np.testing.assert_allclose(q.weight_values, 0.25, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_scores_in_unit_interval_and_weights_normalized(seed):
    cfg = RestorerConfig(frames_in=3, patch=8, quality_channels=4)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, np.float64)
    params["quality.fc.w"].data *= 10
    q = quality_scores(T.Tensor(rng.random((2, 3, 3, 8, 8))), params)
    assert np.all((q.numpy > 0) & (q.numpy < 1))
    np.testing.assert_allclose(q.weight_values.sum(axis=1), 1.0, atol=1e-6)


def _scores(values):
    return QualityScores(T.Tensor(np.asarray(values, dtype=np.float64)))


def test_residual_combine_identity_and_one_hot():
    rng = np.random.default_rng(1)
    frame = rng.random((1, 1, 3, 4, 4))
    frames = T.Tensor(np.repeat(frame, 3, axis=1))
    zero = T.Tensor(np.zeros((1, 3, 4, 4)))
    out = residual_combine(frames, _scores([[0.2, 0.5, 0.9]]), zero)
    np.testing.assert_allclose(out.data, frame[:, 0], atol=1e-12)
    frames = T.Tensor(rng.random((1, 3, 3, 4, 4)))
    out = residual_combine(frames, _scores([[0.0, 1.0, 0.0]]), zero)
    np.testing.assert_array_equal(out.data, frames.data[:, 1])


def test_residual_combine_matches_weighted_sum_oracle():
    rng = np.random.default_rng(2)
    raw = rng.random((2, 4, 3, 5, 5))
    s = rng.uniform(0.05, 0.95, (2, 4))
    fp = rng.standard_normal((2, 3, 5, 5))
    out = residual_combine(T.Tensor(raw), _scores(s), T.Tensor(fp)).data
    ref = fp.copy()
    for n in range(2):
        for f in range(4):
            ref[n] += s[n, f] / s[n].sum() * raw[n, f]
    np.testing.assert_allclose(out, ref, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_residual_combine_linear_in_frames(seed, a):
    rng = np.random.default_rng(seed)
    raw = rng.random((1, 3, 3, 4, 4))
    sc = _scores(rng.uniform(0.1, 0.9, (1, 3)))
    zero = T.Tensor(np.zeros((1, 3, 4, 4)))
    lhs = residual_combine(T.Tensor(a * raw), sc, zero).data
    rhs = a * residual_combine(T.Tensor(raw), sc, zero).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_residual_combine_shape_mismatch():
    with pytest.raises(DimensionError):
        residual_combine(T.Tensor(np.zeros((1, 2, 3, 4, 4))), _scores([[0.5, 0.5]]),
                         T.Tensor(np.zeros((1, 3, 4, 5))))


def test_untrained_model_returns_mean_frame_with_uniform_scores():
    cfg = RestorerConfig(frames_in=4, patch=16)
    m = Restorer(cfg, seed=0, dtype=np.float64)
    m.params["quality.fc.w"].data[:] = 0  # constant logit -> uniform weights
    x = np.random.default_rng(3).random((1, 12, 16, 16))
    out = m.predict(x)
    mean = x.reshape(1, 4, 3, 16, 16).mean(axis=1)
    np.testing.assert_allclose(out, mean, atol=1e-12)


# --- frame selection --------------------------------------------------------


def test_stack_frames_uses_all_frames_when_exact():
    rng = np.random.default_rng(0)
    frames = rng.random((4, 6, 6, 3))
    x = stack_frames(frames, 4, rng_seed=1)
    assert x.shape == (1, 12, 6, 6)
    chunks = x.data.reshape(4, 3, 6, 6).transpose(0, 2, 3, 1)
    order = [int(np.flatnonzero([np.array_equal(c, f) for f in frames])[0]) for c in chunks]
    assert sorted(order) == [0, 1, 2, 3]
    np.testing.assert_array_equal(order, draw_subset(4, 4, 1))


def test_stack_frames_single_gray_frame():
    frame = np.full((1, 5, 7, 3), 0.4)
    x = stack_frames(frame, 1, 0)
    assert x.shape == (1, 3, 5, 7)
    np.testing.assert_array_equal(x.data, 0.4)


def test_stack_frames_seeds_give_different_subsets():
    for t in range(10):
        a = draw_subset(100, 20, 2 * t)
        b = draw_subset(100, 20, 2 * t + 1)
        assert not np.array_equal(a, b)
        assert len(set(a)) == 20


def test_stack_frames_too_few():
    with pytest.raises(InputError):
        stack_frames(np.zeros((3, 4, 4, 3)), 4, 0)


# --- checkpoints ------------------------------------------------------------


def _model(**kw):
    cfg = RestorerConfig(frames_in=2, patch=16, zero_init_output=False, **kw)
    return Restorer(cfg, seed=4)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = _model()
    extra = {"adam.m/embed.w": np.random.default_rng(0).random((8, 6, 3, 3)).astype(np.float32)}
    path = save_checkpoint(tmp_path / "m.ckpt", m, step=17, meta={"phase": "pretrain"}, extra=extra)
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.meta == {"phase": "pretrain"} and ck.config == m.cfg
    assert list(ck.params) == list(m.params)
    for k, v in m.params.items():
        assert ck.params[k].tobytes() == v.data.tobytes()
    assert ck.extra["adam.m/embed.w"].tobytes() == extra["adam.m/embed.w"].tobytes()
    assert path.read_bytes()[:4] == b"ATMR"
    fresh = Restorer.from_checkpoint(ck)
    for k in m.params:
        np.testing.assert_array_equal(fresh.params[k].data, m.params[k].data)


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "trailing", "header"])
def test_corrupt_checkpoint_rejected_without_state_change(tmp_path, damage):
    m = _model()
    path = save_checkpoint(tmp_path / "m.ckpt", m)
    raw = bytearray(path.read_bytes())
    if damage == "truncate":
        raw = raw[: len(raw) - 10]
    elif damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    elif damage == "trailing":
        raw += b"\x00"
    else:
        raw[12:14] = b"}{"
    path.write_bytes(bytes(raw))
    target = _model()
    target.params["embed.w"].data[:] = 0.5
    before = target.state_dict()
    with pytest.raises(FormatError):
        target.load_state_dict(load_checkpoint(path).params)
    after = target.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_checkpoint_wrong_layout_names_parameter(tmp_path):
    m = _model()
    path = save_checkpoint(tmp_path / "m.ckpt", m)
    other = RestorerConfig(frames_in=2, patch=16, blocks_per_level=[1, 2, 2, 2])
    with pytest.raises(CompatibilityError, match="enc1.b1"):
        load_checkpoint(path, expected=other)
    wider = RestorerConfig(frames_in=2, patch=16, base_channels=16, heads_per_level=[1, 2, 4, 8])
    with pytest.raises(CompatibilityError, match="'embed.w'"):
        load_checkpoint(path, expected=wider)


def test_no_temp_file_left_behind(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _model())
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


# --- quality head learns to prefer clean frames -----------------------------


def _noisy_sequence(rng, n_light=6, n_heavy=6, size=16):
    from scipy.ndimage import gaussian_filter

    gt = np.clip(gaussian_filter(rng.random((size, size, 3)), (1.0, 1.0, 0)) * 3 - 1, 0, 1)
    light = [gt + rng.normal(0, 0.02, gt.shape) for _ in range(n_light)]
    heavy = [gt + rng.normal(0, 0.25, gt.shape) for _ in range(n_heavy)]
    frames = np.clip(np.stack(light + heavy), 0, 1).astype(np.float32)
    return FrameSequence(frames=frames, gt=gt.astype(np.float32))


def test_quality_scores_rank_light_above_heavy_after_training():
    rng = np.random.default_rng(0)
    seqs = [_noisy_sequence(rng) for _ in range(8)]
    cfg = RestorerConfig(frames_in=4, patch=16, quality_channels=4)
    model = Restorer(cfg, seed=1)
    tc = TrainConfig(lr_max=3e-3, lr_min=1e-5, batch=4, epochs_pretrain=60, weight_decay=0.0)
    train(model, seqs, tc, rng_seed=2)

    held = [_noisy_sequence(np.random.default_rng(100 + i)) for i in range(6)]
    light, heavy = [], []
    for seq in held:
        # two light frames then two heavy ones in a single stack
        stack = np.concatenate([seq.frames[i].transpose(2, 0, 1) for i in (0, 1, 6, 7)])[None]
        scores = model.score(stack)
        light.extend(scores[0, :2])
        heavy.extend(scores[0, 2:])
    assert np.mean(light) > np.mean(heavy)

import numpy as np
import pytest

from fmnet import autograd as ag
from fmnet.autograd import Tensor
from fmnet.errors import ConfigError, DomainError, ShapeError
from fmnet.losses import sequence_loss
from fmnet.masking import identity_plan, uniform_mask_plan
from fmnet.model import FMNetConfig, build_model
from fmnet.synthetic import SceneDistribution, make_clips
from fmnet.training import SGD, evaluate, plan_for, predict_video, sample_window, train, train_step, window_starts

SMALL = SceneDistribution(height=16, width=16, length=6)


def tiny(**kw):
    base = dict(variant="fmnet", n_frames=4, n_retain=2, channels=4, extractor_channels=(2, 4),
                height=16, width=16, enc_depth=1, dec_depth=1, lr=0.01)
    base.update(kw)
    return FMNetConfig(**base)


def snapshot(model):
    return [p.data.copy() for p in model.parameters()]


def test_zero_learning_rate_leaves_parameters():
    clips = make_clips(2, seed=0, dist=SMALL)
    model = build_model(tiny(lr=0.0))
    before = snapshot(model)
    result = train(model, clips, 3)
    assert len(result.losses) == 3 and all(np.isfinite(result.losses))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_step_reduces_loss_on_the_same_batch():
    clip = make_clips(1, seed=1, dist=SMALL)[0]
    model = build_model(tiny())
    batch = [(clip.frames[:4], clip.depth[:4])]
    plan = [uniform_mask_plan(4, 2)]
    first = train_step(model, batch, plan, SGD(model.parameters(), 0.01))
    with ag.no_grad():
        second = sequence_loss(model(clip.frames[:4], plan[0]), clip.depth[:4]).item()
    assert second < first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises_before_update():
    clip = make_clips(1, seed=2, dist=SMALL)[0]
    model = build_model(tiny())
    model.predictor.head.b.data[:] = np.nan
    before = snapshot(model)
    with pytest.raises(DomainError):
        train_step(model, [(clip.frames[:4], clip.depth[:4])], [identity_plan(4)], SGD(model.parameters(), 0.1))
    for a, p in zip(before, model.parameters()):
        assert np.array_equal(a, p.data, equal_nan=True)


def test_sgd_step_decay():
    opt = SGD([], 1.0, decay=0.1, decay_every=2)
    seen = []
    for _ in range(5):
        seen.append(opt.lr)
        opt.step()
    assert seen == [1.0, 1.0, 0.1, 0.1, pytest.approx(0.01)]
    assert SGD([], 0.5).lr == 0.5
    with pytest.raises(ConfigError):
        SGD([], -1.0)


def test_sgd_gradient_clipping():
    # grads (3, 4) and (12,): global norm 13; cap 6.5 halves the update
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 4.0]), np.array([12.0])
    SGD([a, b], 1.0, clip_norm=6.5).step()
    assert np.allclose(a.data, [-1.5, -2.0]) and np.allclose(b.data, [-6.0])
    # below the cap the step is unchanged
    a.data, b.data = np.zeros(2), np.zeros(1)
    SGD([a, b], 1.0, clip_norm=100.0).step()
    assert np.array_equal(a.data, [-3.0, -4.0]) and np.array_equal(b.data, [-12.0])
    with pytest.raises(ConfigError):
        FMNetConfig(grad_clip=-1.0)


def test_training_is_seed_deterministic():
    clips = make_clips(3, seed=3, dist=SMALL)
    a, b = build_model(tiny(seed=5)), build_model(tiny(seed=5))
    ra, rb = train(a, clips, 4), train(b, clips, 4)
    assert ra.losses == rb.losses and ra.plans == rb.plans
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_training_plans_follow_the_variant():
    clips = make_clips(1, seed=4, dist=SMALL)
    r = train(build_model(tiny(train_mask="uniform", lr=0.0)), clips, 3)
    assert set(r.plans) == {"mask N=4 keep=0,1 ratio=50.00"}
    r = train(build_model(tiny(variant="transformer", lr=0.0)), clips, 2)
    assert set(r.plans) == {"mask N=4 keep=0,1,2,3 ratio=0.00"}
    r = train(build_model(tiny(lr=0.0)), clips, 12)
    assert len(set(r.plans)) > 1


def test_plan_for_modes():
    rng = np.random.default_rng(0)
    assert plan_for("uniform", 12, 2, None).retained == (3, 7)
    assert plan_for("none", 5, 2, None) == identity_plan(5)
    assert len(plan_for("random", 12, 2, rng).retained) == 2
    with pytest.raises(ConfigError):
        plan_for("block", 12, 2, rng)


def test_sample_window_bounds():
    clip = make_clips(1, seed=5, dist=SMALL)[0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        f, d = sample_window(clip, 4, rng)
        assert f.shape == (4, 3, 16, 16) and d.shape == (4, 1, 16, 16)
    with pytest.raises(ShapeError):
        sample_window(clip, 7, rng)


@pytest.mark.parametrize("T,n,want", [(24, 12, [0, 12]), (12, 12, [0]), (30, 12, [0, 12, 18]), (5, 4, [0, 1])])
def test_window_starts(T, n, want):
    starts = window_starts(T, n)
    assert starts == want
    covered = set()
    for s in starts:
        covered.update(range(s, s + n))
    assert covered == set(range(T))


def test_window_starts_too_short():
    with pytest.raises(ShapeError):
        window_starts(3, 4)


def test_predict_video_covers_every_frame():
    clip = make_clips(1, seed=6, dist=SMALL)[0]
    model = build_model(tiny())
    out = predict_video(model, clip.frames)
    assert out.shape == clip.depth.shape and np.all(out > 0)
    with ag.no_grad():
        first = model(clip.frames[:4], uniform_mask_plan(4, 2)).data
        tail = model(clip.frames[2:], uniform_mask_plan(4, 2)).data
    assert np.array_equal(out[:4], first) and np.array_equal(out[4:], tail[2:])


def test_evaluate_oracle_depth():
    clips = make_clips(2, seed=7, dist=SMALL)
    report = evaluate(None, clips, predictor=lambda c: c.depth)
    assert report.total_depth["REL"] == 0.0 and report.total_depth["d1"] == 1.0
    assert len(report.videos) == 2 and all(len(v.opw_t) == 5 for v in report.videos)


def test_two_hundred_steps_on_one_clip():
    """One 12-frame clip, fixed-plan loss before and after 200 updates (default seed 0)."""
    clip = make_clips(1, seed=3, dist=SceneDistribution(height=16, width=16, length=12))
    cfg = FMNetConfig(n_frames=12, n_retain=2, channels=16, extractor_channels=(8, 16), height=16, width=16,
                      lr=0.05, lr_decay_every=150, grad_clip=5.0, seed=0)
    model = build_model(cfg)
    plan = uniform_mask_plan(12, 2)

    def fixed_loss():
        with ag.no_grad():
            return sequence_loss(model(clip[0].frames, plan), clip[0].depth).item()

    before = fixed_loss()
    train(model, clip, 200)
    assert fixed_loss() < 0.2 * before

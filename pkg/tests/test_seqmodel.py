import numpy as np
import pytest

from amerlab import seqmodel as sm
from amerlab.errors import ConfigError, FormatError, NoRecordedForward
from amerlab.tensor_core import grad_check, normalize

CFG = sm.ModelConfig(d=8, h=16, layers=2, heads=2, max_len=6)
POLICIES = [sm.StepInputPolicy(sm.TEACHER), sm.StepInputPolicy(sm.SCHEDULED, 0.5),
            sm.StepInputPolicy(sm.PREDICTED)]


@pytest.fixture
def batch(rng):
    return rng.standard_normal((4, 8)), normalize(rng.standard_normal((4, 3, 8)))


def test_param_count_closed_form():
    cfg = sm.ModelConfig(d=64, h=128, layers=2, heads=4)
    params = sm.init_model(cfg, 0)
    assert sum(v.size for v in params.values()) == sm.n_params(cfg)
    h, d, f, L = 128, 64, 512, 2
    per_layer = 4 * h + (4 * h * h + 3 * h) + (h * f + f + f * h + h)
    assert sm.n_params(cfg) == d * h + h + cfg.max_len * h + L * per_layer + 2 * h + h * d + d


def test_init_deterministic_and_validated():
    a, b = sm.init_model(CFG, 3), sm.init_model(CFG, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    with pytest.raises(ConfigError):
        sm.init_model(sm.ModelConfig(d=8, layers=0), 0)


def test_single_prediction(batch):
    params = sm.init_model(CFG, 0)
    preds, _ = sm.forward_sequence(params, CFG, batch[0], batch[1], POLICIES[1], 0, m=1)
    assert preds.shape == (4, 1, 8)


def test_policy_degeneracy(batch):
    params = sm.init_model(CFG, 0)
    x, y = batch
    teacher, _ = sm.forward_sequence(params, CFG, x, y, sm.StepInputPolicy(sm.TEACHER), 5)
    p0, _ = sm.forward_sequence(params, CFG, x, y, sm.StepInputPolicy(sm.SCHEDULED, 0.0), 5)
    np.testing.assert_array_equal(teacher, p0)
    pred, _ = sm.forward_sequence(params, CFG, x, y, sm.StepInputPolicy(sm.PREDICTED), 5)
    p1, _ = sm.forward_sequence(params, CFG, x, y, sm.StepInputPolicy(sm.SCHEDULED, 1.0), 5)
    np.testing.assert_array_equal(pred, p1)
    other, _ = sm.forward_sequence(params, CFG, x, -y, sm.StepInputPolicy(sm.PREDICTED), 5)
    np.testing.assert_array_equal(pred, other)


def test_decode_equals_predicted_policy(batch):
    params = sm.init_model(CFG, 1)
    x, y = batch
    pred, _ = sm.forward_sequence(params, CFG, x, y, sm.StepInputPolicy(sm.PREDICTED), 0)
    dec = sm.decode(params, CFG, x, 3)
    np.testing.assert_array_equal(pred, dec)
    np.testing.assert_allclose(np.linalg.norm(dec, axis=-1), 1.0, atol=1e-6)
    assert sm.decode(params, CFG, x[0], 5).shape == (5, 8)


def test_causality(rng):
    params = sm.init_model(CFG, 2)
    X = rng.standard_normal((3, 5, 8))
    base = sm.stack_outputs(params, CFG, X)
    Y = X.copy()
    Y[:, 3:] += rng.standard_normal((3, 2, 8))
    out = sm.stack_outputs(params, CFG, Y)
    np.testing.assert_allclose(out[:, :3], base[:, :3], atol=1e-12)
    assert not np.allclose(out[:, 3:], base[:, 3:])


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.mode)
def test_backward_grad_check(batch, rng, policy):
    params = sm.init_model(CFG, 4)
    x, y = batch
    w = rng.standard_normal((4, 3, 8))

    def f(p):
        preds, tape = sm.forward_sequence(p, CFG, x, y, policy, 9)
        return float(np.sum(preds * w)), sm.backward(p, CFG, tape, w)

    assert grad_check(f, params, samples=150, rng=1) < 1e-4


def test_detached_feedback_drops_gradient_path(batch, rng):
    params = sm.init_model(CFG, 4)
    x, y = batch
    w = rng.standard_normal((4, 3, 8))
    pol = sm.StepInputPolicy(sm.PREDICTED)
    _, full = sm.forward_sequence(params, CFG, x, y, pol, 9)
    _, det = sm.forward_sequence(params, CFG, x, y, pol, 9, detach=True)
    g_full = sm.backward(params, CFG, full, w)
    g_det = sm.backward(params, CFG, det, w)
    assert not np.allclose(g_full["in_proj.W"], g_det["in_proj.W"])
    # with teacher forcing nothing is fed back, so detaching is a no-op
    pol = sm.StepInputPolicy(sm.TEACHER)
    _, t1 = sm.forward_sequence(params, CFG, x, y, pol, 9)
    _, t2 = sm.forward_sequence(params, CFG, x, y, pol, 9, detach=True)
    a, b = sm.backward(params, CFG, t1, w), sm.backward(params, CFG, t2, w)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_backward_requires_tape():
    with pytest.raises(NoRecordedForward):
        sm.backward(sm.init_model(CFG, 0), CFG, None, np.zeros((1, 1, 8)))


def test_float32_compute_close_to_float64(batch):
    params = sm.init_model(CFG, 0)
    p32 = {k: v.astype(np.float32) for k, v in params.items()}
    a = sm.decode(params, CFG, batch[0], 3)
    b = sm.decode(p32, CFG, batch[0], 3)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_checkpoint_round_trip(tmp_path):
    params = sm.init_model(CFG, 0)
    moments = (sm.zeros_like_params(params), sm.zeros_like_params(params))
    sm.save_checkpoint(tmp_path / "m.ckpt", CFG, params, "seed = 1\n", moments, step=12)
    cfg, back, info = sm.load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == CFG and info["step"] == 12 and info["config_text"] == "seed = 1\n"
    for k in params:
        np.testing.assert_array_equal(back[k], params[k].astype(np.float32))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:100])
    with pytest.raises(FormatError):
        sm.load_checkpoint(tmp_path / "bad.ckpt")

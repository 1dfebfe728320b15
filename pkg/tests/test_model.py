import numpy as np
import pytest
from hypothesis import given, strategies as st

from glsd import numerics as nx
from glsd.model import (BackboneConfig, ModelState, center_update, ema_update, forward, head,
                        head_logits, head_probs, init_params, init_state, patchify)

CFG = BackboneConfig(dim=16, head_hidden=16, bottleneck=8, n_prototypes=12)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


def test_config_invariants():
    with pytest.raises(ValueError):
        BackboneConfig(n_prototypes=1)
    with pytest.raises(ValueError):
        BackboneConfig(dim=2)
    with pytest.raises(ValueError):
        BackboneConfig(block="conv")


def test_output_shapes(params):
    zbar, z = forward(params, np.zeros((64, 64, 3)) + 0.3, CFG)
    assert z.shape == (1, 16, 16) and zbar.shape == (1, 16)


def test_divisibility_error(params):
    with pytest.raises(ValueError):
        forward(params, np.zeros((40, 64, 3)), CFG)


@pytest.mark.parametrize("block", ["attention", "pool"])
def test_uniform_input_gives_identical_rows(block):
    cfg = BackboneConfig(dim=16, head_hidden=16, bottleneck=8, n_prototypes=12, block=block, pos_embed=False)
    p = init_params(cfg, 1)
    zbar, z = forward(p, np.full((64, 64, 3), 0.42), cfg)
    np.testing.assert_allclose(z.data[0], np.broadcast_to(z.data[0, 0], z.shape[1:]), atol=1e-12)
    np.testing.assert_allclose(zbar.data[0], z.data[0, 0], atol=1e-12)


@pytest.mark.parametrize("block", ["attention", "pool"])
def test_patch_permutation_equivariance(block):
    cfg = BackboneConfig(dim=16, head_hidden=16, bottleneck=8, n_prototypes=12, block=block, pos_embed=False)
    p = init_params(cfg, 2)
    rng = np.random.default_rng(0)
    colours = rng.uniform(size=(4, 4, 3))
    img = np.kron(colours, np.ones((16, 16, 1)))  # patch-constant image
    perm = rng.permutation(16)
    permuted = np.kron(colours.reshape(16, 3)[perm].reshape(4, 4, 3), np.ones((16, 16, 1)))
    _, z = forward(p, img, cfg)
    _, zp = forward(p, permuted, cfg)
    np.testing.assert_allclose(zp.data[0], z.data[0][perm], atol=1e-12)


def test_row_order_matches_token_centers():
    # a single bright patch lights up the token at the predicted index
    from glsd.geometry import GeoParams, token_centers
    cfg = BackboneConfig(dim=16, head_hidden=16, bottleneck=8, n_prototypes=12, pos_embed=False, block="pool")
    p = init_params(cfg, 3)
    img = np.zeros((64, 64, 3))
    img[16:32, 32:48] = 1.0  # patch row 1, column 2
    x = patchify(img, 16)[0]
    bright = int(np.argmax(x.sum(axis=1)))
    centers = token_centers(GeoParams.full(64, 64), 16).centers
    assert centers[bright].tolist() == [40.0, 24.0]
    _, z = forward(p, img, cfg)
    dist = np.linalg.norm(z.data[0] - z.data[0][0], axis=1)
    assert int(np.argmax(dist)) == bright


def test_init_student_equals_teacher():
    s = init_state(CFG, 5)
    for k in s.student:
        assert np.array_equal(s.student[k], s.teacher[k])
    assert not s.center.any()


def test_model_state_shape_check():
    p = init_params(CFG, 0)
    bad = dict(p)
    bad["embed.b"] = np.zeros(3)
    with pytest.raises(ValueError):
        ModelState(p, bad, np.zeros(12), 0, CFG)


# -- heads -------------------------------------------------------------------

@given(st.integers(0, 1000), st.sampled_from(["student", "teacher"]))
def test_head_rows_are_pmfs(seed, role):
    p = init_params(CFG, 0)
    rep = np.random.default_rng(seed).normal(size=(5, 16))
    out = head(p, rep, CFG, "local", role, center=np.zeros(12)).data
    assert (out > 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_teacher_needs_center(params):
    with pytest.raises(ValueError):
        head(params, np.ones((1, 16)), CFG, "global", "teacher")


def test_sharp_teacher_approaches_one_hot(params):
    logits = head_logits(params, np.random.default_rng(0).normal(size=(3, 16)), CFG).data
    out = head_probs(logits, "teacher", tau_t=1e-4, center=np.zeros(12)).data
    assert np.array_equal(out.argmax(axis=1), logits.argmax(axis=1))
    assert (out.max(axis=1) > 1 - 1e-9).all()


def test_centered_teacher_direct_oracle(params):
    logits = head_logits(params, np.random.default_rng(1).normal(size=(6, 16)), CFG).data
    c = logits.mean(axis=0)
    out = head_probs(logits, "teacher", tau_t=0.04, center=c).data
    e = np.exp((logits - c) / 0.04)
    np.testing.assert_allclose(out, e / e.sum(axis=1, keepdims=True), atol=1e-12, rtol=0)


def test_logits_are_cosines(params):
    logits = head_logits(params, np.random.default_rng(2).normal(size=(4, 16)), CFG).data
    assert np.abs(logits).max() <= 1.0 + 1e-12


def test_zero_bottleneck_errors():
    p = init_params(CFG, 0)
    p = dict(p, **{"ghead.fc2.w": np.zeros_like(p["ghead.fc2.w"]), "ghead.fc2.b": np.zeros(8)})
    with pytest.raises(ValueError):
        head_logits(p, np.ones((1, 16)), CFG, "global")


def test_shared_weights_same_temps_identical():
    p = init_params(CFG, 4)
    rep = np.random.default_rng(3).normal(size=(3, 16))
    s = head(p, rep, CFG, "global", "student", tau_s=0.1)
    t = head(p, rep, CFG, "global", "teacher", tau_t=0.1, center=np.zeros(12))
    assert np.array_equal(s.data, t.data)


def test_heads_have_independent_parameters(params):
    assert not np.array_equal(params["ghead.proto"], params["lhead.proto"])


# -- teacher updates -----------------------------------------------------------

def _state():
    s = init_state(CFG, 0)
    rng = np.random.default_rng(9)
    student = {k: v + rng.normal(size=v.shape) for k, v in s.student.items()}
    return ModelState(student, s.teacher, s.center, 0, CFG)


def test_ema_lambda_one_keeps_teacher():
    s = _state()
    out = ema_update(s, 1.0)
    assert all(np.array_equal(out.teacher[k], s.teacher[k]) for k in s.teacher)


def test_ema_lambda_zero_copies_student():
    s = _state()
    out = ema_update(s, 0.0)
    assert all(np.array_equal(out.teacher[k], s.student[k]) for k in s.teacher)


def test_ema_convex_oracle():
    s = _state()
    out = ema_update(s, 0.996)
    for k in s.teacher:
        oracle = 0.996 * s.teacher[k] + (1 - 0.996) * s.student[k]
        np.testing.assert_allclose(out.teacher[k], oracle, atol=1e-15, rtol=0)


@pytest.mark.parametrize("lam", [-0.1, 1.5])
def test_ema_range(lam):
    with pytest.raises(ValueError):
        ema_update(_state(), lam)


def test_center_update_limits(rng):
    c = rng.normal(size=12)
    logits = rng.normal(size=(3, 5, 12))
    assert np.array_equal(center_update(c, logits, 1.0), c)
    np.testing.assert_allclose(center_update(c, logits, 0.0), logits.reshape(-1, 12).mean(0), atol=1e-15)
    oracle = 0.9 * c + 0.1 * logits.reshape(-1, 12).mean(axis=0)
    np.testing.assert_allclose(center_update(c, logits, 0.9), oracle, atol=1e-15)


def test_center_update_errors():
    with pytest.raises(ValueError):
        center_update(np.zeros(3), np.zeros((0, 3)), 0.9)

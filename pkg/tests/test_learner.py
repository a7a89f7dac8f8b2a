import numpy as np
import pytest

from baim import numcore as nc
from baim.errors import DimensionError, DomainError, SpecError
from baim.learner import (
    Learner,
    LearnerSpec,
    build_learner,
    elbo_loss,
    elbo_terms,
    latent_noise,
    stage_forward,
    vae_forward,
)
from baim.numcore import Parameter, RngStream
from baim.training import train_learner


@pytest.fixture(autouse=True)
def fp64():
    with nc.precision("fp64"):
        yield


def spec(lid=0, widths=(8, 6, 3, 6), latent=3, L=2, d=12):
    return LearnerSpec(lid, 0, d, widths, latent, L)


def blob(learner):
    return b"".join(p.value.tobytes() for p in learner.parameters())


def test_build_is_deterministic():
    a = build_learner(spec(), RngStream(5))
    b = build_learner(spec(), RngStream(5))
    assert blob(a) == blob(b)


def test_learner_id_salts_stream():
    a = build_learner(spec(0), RngStream(5))
    b = build_learner(spec(1), RngStream(5))
    assert blob(a) != blob(b)


def test_latent_at_stage_zero_is_rejected():
    with pytest.raises(SpecError):
        build_learner(spec(widths=(3, 6, 8), L=0), RngStream(0))


@pytest.mark.parametrize(
    "widths,latent,L",
    [((3,), 3, 1), ((8, 6, 3), 3, 3), ((0, 3, 6), 3, 1), ((8, 5, 6), 3, 1)],
)
def test_invalid_specs(widths, latent, L):
    # too few stages, latent at the output stage, zero width, latent width mismatch
    with pytest.raises(SpecError):
        spec(widths=widths, latent=latent, L=L).validate()


def test_glorot_bounds():
    lr = build_learner(spec(), RngStream(1))
    W = lr.stage_params[0][0].value
    assert np.abs(W).max() <= np.sqrt(6 / (12 + 8))


def test_param_ids_prefixed():
    lr = build_learner(spec(lid=7), RngStream(1))
    assert all(p.id.startswith("L7.") for p in lr.parameters())


def test_stage_forward_zero_injection_is_identity():
    lr = build_learner(spec(), RngStream(2))
    x = nc.constant(np.random.default_rng(0).uniform(0, 1, (4, 12)))
    plain = stage_forward(lr, 0, x)
    injected = stage_forward(lr, 0, x, nc.constant(np.zeros((4, 12))))
    assert plain.data.tobytes() == injected.data.tobytes()


def test_stage_forward_cancellation():
    lr = build_learner(spec(), RngStream(2))
    lr.stage_params[1][1].value[:] = np.array([0.5, -0.2, 0.1, 0.0, 1.0, -3.0])
    x = np.random.default_rng(0).uniform(0, 1, 8)
    out = stage_forward(lr, 1, nc.constant(x), nc.constant(-x))
    np.testing.assert_array_equal(out.data, np.maximum(lr.stage_params[1][1].value, 0))


def test_stage_forward_hand_relu():
    lr = build_learner(LearnerSpec(0, 0, 2, (2, 1, 2), 1, 1), RngStream(0))
    W, b = lr.stage_params[0]
    W.value[:] = [[0.5, -1.0], [0.25, 0.25]]
    b.value[:] = [0.1, -0.6]
    out = stage_forward(lr, 0, nc.constant([1.0, 0.2]), nc.constant([0.0, 0.2]))
    # [0.5*1 - 1*0.4 + 0.1, 0.25*1 + 0.25*0.4 - 0.6] = [0.2, -0.25] -> relu
    np.testing.assert_allclose(out.data, [0.2, 0.0], atol=1e-15)


def test_stage_forward_dimension_error():
    lr = build_learner(spec(), RngStream(2))
    with pytest.raises(DimensionError):
        stage_forward(lr, 1, nc.constant(np.ones(5)))


def test_vae_forward_eval_and_train_deterministic():
    lr = build_learner(spec(), RngStream(3))
    x = np.random.default_rng(1).uniform(0, 1, (5, 12))
    a, b = vae_forward(lr, x), vae_forward(lr, x)
    assert a.x_hat.data.tobytes() == b.x_hat.data.tobytes()
    np.testing.assert_array_equal(a.z.data, a.mu.data)
    c, d = vae_forward(lr, x, "train", RngStream(9)), vae_forward(lr, x, "train", RngStream(9))
    assert c.x_hat.data.tobytes() == d.x_hat.data.tobytes()
    assert np.all((a.x_hat.data >= 0) & (a.x_hat.data <= 1))
    assert set(a.stage_features) == {0, 1, 2, 3, 4}


def test_train_mode_z_is_noise_when_mu_logvar_zero():
    lr = build_learner(spec(), RngStream(3))
    for p in lr.mu_head + lr.logvar_head:
        p.value[:] = 0
    x = np.random.default_rng(1).uniform(0, 1, (5, 12))
    fwd = vae_forward(lr, x, "train", RngStream(11))
    np.testing.assert_array_equal(fwd.z.data, latent_noise(RngStream(11), 0, (5, 3)))


def test_vae_forward_rejects_out_of_range():
    lr = build_learner(spec(), RngStream(3))
    with pytest.raises(DomainError):
        vae_forward(lr, np.full(12, 1.5))


def test_kl_closed_forms():
    assert nc.kl_normal(nc.constant([0.0, 0.0]), nc.constant([0.0, 0.0])).item() == 0.0
    assert nc.kl_normal(nc.constant([1.0]), nc.constant([0.0])).item() == pytest.approx(0.5, abs=1e-15)


def test_bce_half_is_n_ln2():
    x = np.full(10, 0.5)
    assert nc.bce_sum(x, nc.constant(x)).item() == pytest.approx(10 * np.log(2), rel=1e-14)


def test_bce_clamps_saturated_outputs():
    v = nc.bce_sum(np.array([1.0, 0.0]), nc.constant([0.0, 1.0])).item()
    assert v == pytest.approx(-2 * np.log(1e-7), rel=1e-9)


def test_stage_path_consistency():
    lr = build_learner(spec(), RngStream(4))
    x = np.random.default_rng(2).uniform(0, 1, (3, 12))
    h = nc.constant(x)
    for s in range(lr.spec.n_stages):
        h = stage_forward(lr, s, h)
    assert h.data.tobytes() == vae_forward(lr, x).x_hat.data.tobytes()


def test_elbo_gradient_matches_finite_differences():
    lr = build_learner(spec(), RngStream(6))
    x = np.random.default_rng(3).uniform(0, 1, (4, 12))

    def f():
        return elbo_loss(x, vae_forward(lr, x, "train", RngStream(1)), 1.0).item()

    nc.backward(elbo_loss(x, vae_forward(lr, x, "train", RngStream(1)), 1.0))
    rng = np.random.default_rng(0)
    for p in lr.parameters():
        idx = rng.choice(p.size, size=min(4, p.size), replace=False)
        num = nc.finite_diff_grad(f, p, idx)
        np.testing.assert_allclose(p.grad.reshape(-1)[idx], num, rtol=1e-4, atol=1e-8)


def test_training_lowers_heldout_reconstruction():
    with nc.precision("fp32"):
        rng = np.random.default_rng(0)
        centers = rng.uniform(0, 1, (4, 12))
        data = np.clip(centers[rng.integers(0, 4, 600)] + rng.normal(0, 0.05, (600, 12)), 0, 1)
        lr = build_learner(spec(), RngStream(0))
        untrained = nc.bce_sum(data[500:], vae_forward(lr, data[500:]).x_hat).data.mean()
        train_learner(lr, data[:500], data[500:], epochs=5, lr=1e-2)
        trained = nc.bce_sum(data[500:], vae_forward(lr, data[500:]).x_hat).data.mean()
        assert trained < untrained

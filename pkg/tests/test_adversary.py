"""Domain discriminator and the reversed-gradient coupling to the mask
network."""

import numpy as np
import pytest

from fedadapt import adversary, fam, losses
from fedadapt.adversary import DcConfig, DcParams
from fedadapt.fam import FamConfig, FamParams
from fedadapt.numerics import central_difference, relative_error

rng = np.random.default_rng(21)

LN2 = 0.6931471805599453


def _randomized_dc(cfg, seed):
    params = DcParams.init(cfg, seed=seed)
    r = np.random.default_rng(seed + 1)
    for block in params.blocks.values():
        block.value[...] = r.normal(size=block.value.shape) * 0.5
    for key, arr in params.running.items():
        arr[...] = np.abs(r.normal(size=arr.shape)) + 0.5
    return params


def _randomized_fam(cfg, seed):
    params = FamParams.init(cfg, seed=seed)
    r = np.random.default_rng(seed + 1)
    for block in params.blocks.values():
        block.value[...] = r.normal(size=block.value.shape)
    for key, arr in params.running.items():
        arr[...] = np.abs(r.normal(size=arr.shape)) + 0.5
    return params


# ------------------------------------------------------------- construction

def test_zero_final_layer_means_half_predictions_and_ln2_loss():
    cfg = DcConfig(feature_dim=6, hidden1=5, hidden2=4)
    params = DcParams.init(cfg, seed=3)
    x = rng.normal(size=(8, 6))
    for mode in ("eval", "train"):
        d, _ = adversary.dc_forward(params.clone(), x, mode)
        assert np.array_equal(d, np.full(8, 0.5))
    labels = np.array([1.0, 0.0] * 4)
    d, _ = adversary.dc_forward(params.clone(), x, "eval")
    loss, _ = losses.da_loss(d, labels)
    assert abs(loss - LN2) < 1e-15


def test_param_count_matches_vector_and_closed_form():
    cfg = DcConfig(feature_dim=3, hidden1=4, hidden2=2)
    params = DcParams.init(cfg)
    n = adversary.dc_param_count(cfg)
    assert n == 53  # 3*4+5*4 + 4*2+5*2 + 2+1, running stats included
    assert adversary.dc_to_vector(params).shape == (n,)
    full = DcConfig(feature_dim=512)
    assert adversary.dc_param_count(full) == 397_313


def test_config_rejects_nonpositive_widths():
    with pytest.raises(ValueError):
        DcConfig(feature_dim=0)
    with pytest.raises(ValueError):
        DcConfig(feature_dim=4, hidden1=4, hidden2=0)


# ---------------------------------------------------------- vector transport

def test_dc_vector_round_trip_is_bitwise():
    cfg = DcConfig(feature_dim=5, hidden1=4, hidden2=3)
    params = _randomized_dc(cfg, seed=5)
    vec = adversary.dc_to_vector(params)
    rebuilt = adversary.dc_load_vector(DcParams.init(cfg, seed=99), vec)
    assert np.array_equal(adversary.dc_to_vector(rebuilt), vec)
    for key, block in params.blocks.items():
        assert np.array_equal(rebuilt.blocks[key].value, block.value)
    for key, arr in params.running.items():
        assert np.array_equal(rebuilt.running[key], arr)


def test_dc_load_vector_rejects_wrong_length():
    cfg = DcConfig(feature_dim=3, hidden1=4, hidden2=2)
    with pytest.raises(ValueError):
        adversary.dc_load_vector(DcParams.init(cfg), np.zeros(52))


# ------------------------------------------------------------- domain batches

def test_make_domain_batch_layout_source_first():
    src = rng.normal(size=(3, 4))
    tgt = rng.normal(size=(3, 4))
    batch = adversary.make_domain_batch(src, tgt)
    assert np.array_equal(batch.features[:3], src)
    assert np.array_equal(batch.features[3:], tgt)
    assert np.array_equal(batch.labels, [1, 1, 1, 0, 0, 0])


def test_domain_batch_validation():
    with pytest.raises(ValueError):
        adversary.make_domain_batch(np.ones((3, 4)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        adversary.DomainBatch(np.ones((4, 2)), np.array([1.0, 1.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        adversary.DomainBatch(np.ones((2, 2)), np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        adversary.DomainBatch(np.ones((2, 2)), np.array([1.0, 0.0, 1.0]))


# ------------------------------------------------------------ gradient checks

def _dc_flat_values(params):
    return np.concatenate([b.value.ravel() for _, b in params.trainable_blocks()])


def _dc_write_values(params, vec):
    offset = 0
    for _, block in params.trainable_blocks():
        n = block.value.size
        block.value[...] = vec[offset:offset + n].reshape(block.value.shape)
        offset += n


def _dc_flat_grads(params):
    return np.concatenate([b.grad.ravel() for _, b in params.trainable_blocks()])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_dc_gradients_match_finite_differences(mode):
    cfg = DcConfig(feature_dim=4, hidden1=6, hidden2=5)
    base = _randomized_dc(cfg, seed=7)
    x = np.random.default_rng(8).normal(size=(6, 4))
    weight = np.random.default_rng(9).normal(size=6)

    def loss_at(vec, inp):
        probe = base.clone()
        _dc_write_values(probe, vec)
        d, _ = adversary.dc_forward(probe, inp, mode)
        return float((d * weight).sum())

    work = base.clone()
    work.zero_grads()
    d, cache = adversary.dc_forward(work, x, mode)
    dx = adversary.dc_backward(work, cache, weight)

    theta = _dc_flat_values(base)
    numeric_theta = central_difference(lambda v: loss_at(v, x), theta)
    assert relative_error(_dc_flat_grads(work), numeric_theta) < 1e-5

    numeric_x = central_difference(lambda inp: loss_at(theta, inp), x)
    assert relative_error(dx, numeric_x) < 1e-5


def test_zero_upstream_gradient_stays_zero():
    cfg = DcConfig(feature_dim=4, hidden1=5, hidden2=3)
    params = _randomized_dc(cfg, seed=11)
    params.zero_grads()
    x = rng.normal(size=(4, 4))
    _, cache = adversary.dc_forward(params, x, "eval")
    dx = adversary.dc_backward(params, cache, np.zeros(4))
    assert not dx.any()
    assert not _dc_flat_grads(params).any()


def test_dc_backward_rejects_foreign_cache_and_bad_grad():
    cfg = DcConfig(feature_dim=4, hidden1=5, hidden2=3)
    params = DcParams.init(cfg)
    _, cache = adversary.dc_forward(params, np.ones((2, 4)), "eval")
    with pytest.raises(ValueError):
        adversary.dc_backward(params, ("fam", []), np.zeros(2))
    with pytest.raises(ValueError):
        adversary.dc_backward(params, cache, np.zeros((2, 1)))


# ---------------------------------------------------- adversarial coupling

def _coupled_setup(seed=0):
    fam_cfg = FamConfig(feature_dim=5, hidden_dim=4)
    dc_cfg = DcConfig(feature_dim=5, hidden1=6, hidden2=4)
    fam_params = _randomized_fam(fam_cfg, seed=seed + 30)
    dc_params = _randomized_dc(dc_cfg, seed=seed + 40)
    r = np.random.default_rng(seed + 50)
    x_src = r.normal(size=(3, 5))
    x_tgt = r.normal(size=(3, 5)) + 1.0
    return fam_params, dc_params, x_src, x_tgt


def _forward_batch(fam_params, x_src, x_tgt, mode="eval"):
    masked_s, cache_s = fam.masked_forward(fam_params, x_src, mode)
    masked_t, cache_t = fam.masked_forward(fam_params, x_tgt, mode)
    batch = adversary.make_domain_batch(masked_s, masked_t)
    return batch, [cache_s, cache_t]


def _fam_flat_grads(params):
    return np.concatenate([b.grad.ravel() for _, b in params.trainable_blocks()])


def test_adversarial_backprop_returns_domain_loss_and_predictions():
    fam_params, dc_params, x_src, x_tgt = _coupled_setup()
    batch, caches = _forward_batch(fam_params, x_src, x_tgt)
    fam_params.zero_grads()
    dc_params.zero_grads()
    loss, d = adversary.adversarial_backprop(
        fam_params, dc_params, batch, caches, lam=1.0, mode="eval")
    d_direct, _ = adversary.dc_forward(dc_params, batch.features, "eval")
    expected, _ = losses.da_loss(d_direct, batch.labels)
    assert np.array_equal(d, d_direct)
    assert abs(loss - expected) < 1e-15


def test_fam_receives_minus_lam_times_exact_domain_gradient():
    lam = 0.7
    fam_params, dc_params, x_src, x_tgt = _coupled_setup()
    batch, caches = _forward_batch(fam_params, x_src, x_tgt)
    fam_params.zero_grads()
    dc_params.zero_grads()
    adversary.adversarial_backprop(fam_params, dc_params, batch, caches,
                                   lam=lam, mode="eval")
    got = _fam_flat_grads(fam_params)

    def domain_loss_at(vec):
        probe = fam_params.clone()
        offset = 0
        for _, block in probe.trainable_blocks():
            n = block.value.size
            block.value[...] = vec[offset:offset + n].reshape(block.value.shape)
            offset += n
        b, _ = _forward_batch(probe, x_src, x_tgt)
        d, _ = adversary.dc_forward(dc_params.clone(), b.features, "eval")
        return losses.da_loss(d, b.labels)[0]

    theta = np.concatenate([b.value.ravel() for _, b in fam_params.trainable_blocks()])
    numeric = central_difference(domain_loss_at, theta)
    assert relative_error(got, -lam * numeric) < 1e-5


def test_fam_gradient_is_linear_in_lam_and_zero_at_lam_zero():
    fam_params, dc_params, x_src, x_tgt = _coupled_setup(seed=1)
    batch, caches = _forward_batch(fam_params, x_src, x_tgt)

    fam_params.zero_grads()
    dc_params.zero_grads()
    adversary.adversarial_backprop(fam_params, dc_params, batch, caches,
                                   lam=0.5, mode="eval")
    half = _fam_flat_grads(fam_params)
    dc_half = _dc_flat_grads(dc_params)

    fam_params.zero_grads()
    dc_params.zero_grads()
    batch2, caches2 = _forward_batch(fam_params, x_src, x_tgt)
    adversary.adversarial_backprop(fam_params, dc_params, batch2, caches2,
                                   lam=1.0, mode="eval")
    assert np.allclose(_fam_flat_grads(fam_params), 2.0 * half, rtol=0, atol=1e-12)
    # the discriminator's own gradient does not depend on lam
    assert np.allclose(_dc_flat_grads(dc_params), dc_half, rtol=0, atol=1e-12)

    fam_params.zero_grads()
    dc_params.zero_grads()
    batch3, caches3 = _forward_batch(fam_params, x_src, x_tgt)
    adversary.adversarial_backprop(fam_params, dc_params, batch3, caches3,
                                   lam=0.0, mode="eval")
    assert not _fam_flat_grads(fam_params).any()
    assert _dc_flat_grads(dc_params).any()


def test_paired_sgd_steps_move_domain_loss_in_opposite_directions():
    # descent on the discriminator gradient lowers the domain loss; descent
    # on the mask network's received (reversed) gradient raises it
    fam_params, dc_params, x_src, x_tgt = _coupled_setup(seed=2)
    batch, caches = _forward_batch(fam_params, x_src, x_tgt)
    fam_params.zero_grads()
    dc_params.zero_grads()
    loss0, _ = adversary.adversarial_backprop(fam_params, dc_params, batch,
                                              caches, lam=1.0, mode="eval")
    lr = 1e-4

    dc_stepped = dc_params.clone()
    for _, block in dc_stepped.trainable_blocks():
        block.value -= lr * block.grad
    b, _ = _forward_batch(fam_params, x_src, x_tgt)
    d, _ = adversary.dc_forward(dc_stepped, b.features, "eval")
    loss_dc, _ = losses.da_loss(d, b.labels)
    assert loss_dc < loss0

    fam_stepped = fam_params.clone()
    for _, block in fam_stepped.trainable_blocks():
        block.value -= lr * block.grad
    b, _ = _forward_batch(fam_stepped, x_src, x_tgt)
    d, _ = adversary.dc_forward(dc_params, b.features, "eval")
    loss_fam, _ = losses.da_loss(d, b.labels)
    assert loss_fam > loss0


def test_adversarial_backprop_rejects_negative_lam_and_short_caches():
    fam_params, dc_params, x_src, x_tgt = _coupled_setup(seed=3)
    batch, caches = _forward_batch(fam_params, x_src, x_tgt)
    with pytest.raises(ValueError):
        adversary.adversarial_backprop(fam_params, dc_params, batch, caches,
                                       lam=-0.1, mode="eval")
    with pytest.raises(ValueError):
        adversary.adversarial_backprop(fam_params, dc_params, batch,
                                       caches[:1], lam=1.0, mode="eval")


def test_forward_rejects_wrong_width():
    cfg = DcConfig(feature_dim=4, hidden1=5, hidden2=3)
    params = DcParams.init(cfg)
    with pytest.raises(ValueError):
        adversary.dc_forward(params, np.ones((2, 3)), "eval")

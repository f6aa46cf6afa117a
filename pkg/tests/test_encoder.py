import math

import numpy as np
import pytest
import torch

from scgplvm.encoder import VAR_FLOOR, Encoder, EncoderForm, EncoderSpec, encode, encoder_grad_check
from scgplvm.errors import ShapeMismatch
from scgplvm.kernels import DTYPE


def _inputs(n=6, d=5, dc=2, seed=0):
    rng = np.random.default_rng(seed)
    rows = torch.tensor(rng.normal(size=(n, d)), dtype=DTYPE)
    phi = torch.tensor(np.eye(dc)[rng.integers(0, dc, size=n)], dtype=DTYPE)
    return rows, phi


def _zero(enc):
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()


@pytest.mark.parametrize("form", list(EncoderForm))
@pytest.mark.parametrize("shared", [False, True])
def test_zero_weights_give_prior_like_output(form, shared):
    enc = Encoder(EncoderSpec(form, 5, q_latent=3, hidden_dims=(4,), d_covar=2, shared_trunk=shared))
    _zero(enc)
    rows, phi = _inputs()
    post = encode(enc, rows, phi, "eval")
    assert torch.all(post.mean == 0)
    assert torch.allclose(post.var, torch.full_like(post.var, math.log(2.0) + VAR_FLOOR), rtol=1e-14)


@pytest.mark.parametrize("form", list(EncoderForm))
def test_eval_mode_permutation_equivariant(form):
    enc = Encoder(EncoderSpec(form, 5, q_latent=3, hidden_dims=(8, 8), d_covar=2), seed=3)
    rows, phi = _inputs(10)
    perm = torch.as_tensor(np.random.default_rng(1).permutation(10))
    a = encode(enc, rows, phi, "eval")
    b = encode(enc, rows[perm], phi[perm], "eval")
    assert torch.allclose(b.mean, a.mean[perm], atol=1e-14, rtol=0)
    assert torch.allclose(b.var, a.var[perm], atol=1e-14, rtol=0)


def test_batch_one_hot_changes_posterior_only_when_batch_aware():
    rows = torch.ones(2, 5, dtype=DTYPE)
    phi = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
    aware = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 5, 3, (8,), 2), seed=0)
    simple = Encoder(EncoderSpec(EncoderForm.SIMPLE_NN, 5, 3, (8,), 2), seed=0)
    a = encode(aware, rows, phi)
    s = encode(simple, rows, phi)
    assert not torch.allclose(a.mean[0], a.mean[1])
    assert torch.equal(s.mean[0], s.mean[1]) and torch.equal(s.var[0], s.var[1])


def test_eval_mode_batch_size_invariant():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 5, 3, (8, 8), 2), seed=1)
    rows, phi = _inputs(12)
    # populate running statistics with a training pass first
    encode(enc, rows, phi, "train")
    joint = encode(enc, rows, phi, "eval")
    for i in range(12):
        single = encode(enc, rows[i : i + 1], phi[i : i + 1], "eval")
        assert torch.allclose(single.mean[0], joint.mean[i], atol=1e-10, rtol=0)
        assert torch.allclose(single.var[0], joint.var[i], atol=1e-10, rtol=0)


def test_train_mode_single_row_uses_running_stats():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 5, 3, (8,), 2), seed=1)
    rows, phi = _inputs(1)
    post = encode(enc, rows, phi, "train")
    assert torch.all(torch.isfinite(post.mean)) and torch.all(post.var > 0)


def test_variance_floor():
    enc = Encoder(EncoderSpec(EncoderForm.SIMPLE_NN, 5, 3, (), 2))
    with torch.no_grad():
        enc.var_net[-1].bias.fill_(-1e3)
    post = encode(enc, *_inputs())
    assert torch.all(post.var >= VAR_FLOOR)


def test_encode_restores_mode():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 5, 3, (8,), 2))
    enc.train()
    encode(enc, *_inputs(), mode="eval")
    assert enc.training
    with pytest.raises(ValueError):
        encode(enc, *_inputs(), mode="sideways")


def test_shape_errors():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 5, 3, (8,), 2))
    rows, phi = _inputs()
    with pytest.raises(ShapeMismatch):
        encode(enc, rows[:, :4], phi)
    with pytest.raises(ShapeMismatch):
        encode(enc, rows, None)


def test_seed_controls_initialization():
    spec = EncoderSpec(EncoderForm.SIMPLE_NN, 5, 3, (8,), 2)
    a, b, c = Encoder(spec, seed=4), Encoder(spec, seed=4), Encoder(spec, seed=5)
    for pa, pb, pc in zip(a.parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_grad_check_simple_one_hidden():
    enc = Encoder(EncoderSpec(EncoderForm.SIMPLE_NN, 4, 2, (5,), 2), seed=0)
    rows, phi = _inputs(5, 4)
    assert encoder_grad_check(enc, rows, phi, "eval") < 1e-5


def test_grad_check_batch_aware_eval():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 4, 2, (5,), 2), seed=0)
    rows, phi = _inputs(5, 4)
    encode(enc, rows, phi, "train")
    assert encoder_grad_check(enc, rows, phi, "eval") < 1e-5


def test_grad_check_batch_aware_train():
    enc = Encoder(EncoderSpec(EncoderForm.BATCH_AWARE_NN, 4, 2, (5,), 2), seed=0)
    rows, phi = _inputs(5, 4)
    assert encoder_grad_check(enc, rows, phi, "train") < 1e-5


def test_grad_check_linear_only():
    enc = Encoder(EncoderSpec(EncoderForm.SIMPLE_NN, 4, 2, (), 2), seed=0)
    rows, phi = _inputs(5, 4)
    assert encoder_grad_check(enc, rows, phi, "eval") < 1e-7


def test_spec_round_trip():
    spec = EncoderSpec(EncoderForm.BATCH_AWARE_NN, 7, 4, (16, 8), 3, True)
    assert EncoderSpec.from_dict(spec.to_dict()) == spec

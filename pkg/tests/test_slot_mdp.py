import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hipath.config import ABLATIONS, AblationConfig
from hipath.model import HiPath, collate
from hipath.report import SlotType
from hipath.slot_mdp import (
    FOCAL_TRUE_CLASS, SlotDistribution, SlotMDP, TooManySlots, TruthOutOfVocabulary, aux_coarse_loss,
    focal_loss_from_logits, focal_slot_loss, score_slot, total_loss,
)
from hipath.trainer import grad_check_setup

import oracles

D, D_TXT, HEADS = 8, 6, 2


def make_mdp(desk_vocab, self_attention=True, seed=0):
    table = np.random.default_rng(seed).standard_normal((len(desk_vocab.terms), D_TXT))
    m = SlotMDP(D, D_TXT, HEADS, 16, 12, table, desk_vocab.type_mask(), self_attention=self_attention)
    m.to(torch.float64).reset_parameters(torch.Generator().manual_seed(seed))
    return m


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_beta_initialised_to_ten(desk_vocab):
    assert abs(float(make_mdp(desk_vocab).beta.detach()) - 10.0) < 1e-12


def test_queries_are_position_plus_type(desk_vocab):
    m = make_mdp(desk_vocab)
    types = torch.tensor([[0, 2, 1]])
    q = m.build_slot_queries(types)[0]
    for k, ty in enumerate([0, 2, 1]):
        assert torch.equal(q[k], m.E_pos[k] + m.E_type[ty])
    with pytest.raises(TooManySlots):
        m.build_slot_queries(torch.zeros(1, 17, dtype=torch.long))


def test_single_image_cross_attention_is_constant_over_images(desk_vocab, rng):
    m = make_mdp(desk_vocab, self_attention=False)
    q = m.build_slot_queries(torch.tensor([[0, 1]]))
    R = t(rng.standard_normal((1, 1, D)))
    out = m.decode_slots(q, R)
    # with one image the attended value is the projected image for every query
    v = m.cross_attn.wo(m.cross_attn.wv(R))
    assert torch.allclose(out, q + v, atol=1e-14)


def test_single_slot_self_attention_adds_own_value(desk_vocab, rng):
    m = make_mdp(desk_vocab)
    q = m.build_slot_queries(torch.tensor([[2]]))
    R = t(rng.standard_normal((1, 3, D)))
    q_hat = q + m.cross_attn(q, R)
    expected = q_hat + m.self_attn.wo(m.self_attn.wv(q_hat))
    assert torch.allclose(m.decode_slots(q, R), expected, atol=1e-14)


def test_decode_matches_scalar_oracle(desk_vocab, rng):
    m = make_mdp(desk_vocab)
    types = [0, 1, 2]
    q = m.build_slot_queries(torch.tensor([types]))
    R = rng.standard_normal((2, D))
    got = m.decode_slots(q, t(R)[None])[0].detach().numpy()
    qs = q[0].detach().numpy().tolist()
    cp, sp = oracles.module_params(m.cross_attn), oracles.module_params(m.self_attn)
    q_hat = [[a + b for a, b in zip(qk, oracles.attention(qk, R.tolist(), cp, HEADS)[0])] for qk in qs]
    ref = [[a + b for a, b in zip(qk, oracles.attention(qk, q_hat, sp, HEADS)[0])] for qk in q_hat]
    assert np.max(np.abs(got - np.array(ref))) < 1e-10


def test_slots_independent_without_self_attention(desk_vocab, rng):
    m = make_mdp(desk_vocab, self_attention=False)
    R = t(rng.standard_normal((1, 2, D)))
    a = m.decode_slots(m.build_slot_queries(torch.tensor([[0, 1, 2]])), R)
    b = m.decode_slots(m.build_slot_queries(torch.tensor([[0, 2, 2]])), R)
    assert torch.equal(a[0, 0], b[0, 0]) and torch.equal(a[0, 2], b[0, 2])
    full = make_mdp(desk_vocab, self_attention=True)
    a = full.decode_slots(full.build_slot_queries(torch.tensor([[0, 1, 2]])), R)
    b = full.decode_slots(full.build_slot_queries(torch.tensor([[0, 2, 2]])), R)
    assert not torch.equal(a[0, 0], b[0, 0])


# --- scoring ---------------------------------------------------------------

def test_score_uniform_when_all_cosines_equal():
    E = np.ones((4, 3))
    dist = score_slot(t([1.0, 2.0, 3.0]), SlotType.GRADE, E, beta=10.0)
    assert np.allclose(dist.probs, 0.25, atol=1e-15)


def test_score_orthonormal_closed_form():
    E = np.eye(3)
    dist = score_slot(t([1.0, 0.0, 0.0]), SlotType.DIAG, E, beta=10.0)
    assert abs(dist.probs[0] - 0.9999092083843409) < 1e-15
    assert abs(dist.probs[1] - 4.539580782951091e-05) < 1e-15
    assert abs(dist.probs[0] - math.exp(10) / (math.exp(10) + 2)) < 1e-15


def test_score_restricted_to_slot_type(desk_vocab, rng):
    table = rng.standard_normal((len(desk_vocab.terms), 5))
    mask = desk_vocab.type_mask()
    for ty in SlotType:
        dist = score_slot(t(rng.standard_normal(5)), ty, table, 10.0, type_mask=mask)
        assert np.all(dist.probs[~mask[int(ty)]] == 0.0)
        assert abs(dist.probs.sum() - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0), beta=st.floats(0.5, 50.0))
def test_argmax_invariant_to_scaling_and_beta(seed, scale, beta):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((7, 4))
    p = t(rng.standard_normal(4))
    base = np.argmax(score_slot(p, SlotType.DIAG, E, 10.0).probs)
    assert np.argmax(score_slot(scale * p, SlotType.DIAG, E, beta).probs) == base


# --- losses ----------------------------------------------------------------

def test_focal_uniform_oracle(desk_vocab):
    mask = desk_vocab.type_mask()
    probs = np.where(mask[int(SlotType.GRADE)], 0.25, 0.0)
    truth = int(desk_vocab.canonical_ids(SlotType.GRADE)[0])
    loss = focal_slot_loss(SlotDistribution(0, SlotType.GRADE, probs), truth, mask, gamma=2.0, smoothing=0.1)
    # every allowed term has p = 1/4, so the loss is 0.5625 * ln 4
    assert abs(loss - 0.7797905781299387) < 1e-14
    assert abs(loss - 0.5625 * math.log(4)) < 1e-14


def test_focal_gamma_zero_is_smoothed_ce(rng):
    logits = t(rng.standard_normal(5))
    allowed = torch.ones(5, dtype=torch.bool)
    got = float(focal_loss_from_logits(logits, torch.tensor(2), allowed, gamma=0.0, smoothing=0.1))
    logp = torch.log_softmax(logits, 0).numpy()
    target = np.full(5, 0.02)
    target[2] += 0.9
    assert abs(got - float(-(target * logp).sum())) < 1e-14


def test_focal_true_class_mode(rng):
    logits = t(rng.standard_normal(4))
    allowed = torch.ones(4, dtype=torch.bool)
    got = float(focal_loss_from_logits(logits, torch.tensor(1), allowed, 2.0, 0.1, FOCAL_TRUE_CLASS))
    logp = torch.log_softmax(logits, 0).numpy()
    target = np.full(4, 0.025)
    target[1] += 0.9
    assert abs(got - (1 - math.exp(logp[1])) ** 2 * float(-(target * logp).sum())) < 1e-14


def test_focal_truth_out_of_type(desk_vocab):
    mask = desk_vocab.type_mask()
    probs = np.where(mask[int(SlotType.RES)], 0.25, 0.0)
    with pytest.raises(TruthOutOfVocabulary):
        focal_slot_loss(SlotDistribution(0, SlotType.RES, probs), 0, mask)


def test_aux_zero_logits_is_ln2():
    loss = float(aux_coarse_loss(torch.zeros(3, 12, dtype=torch.float64), torch.ones(3, 12)))
    assert abs(loss - math.log(2)) < 1e-15


def test_aux_saturation():
    labels = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert float(aux_coarse_loss(t([[40.0, -40.0]]), labels)) < 1e-15
    assert float(aux_coarse_loss(t([[-40.0, 40.0]]), labels)) > 39.0


def test_aux_matches_scalar_bce(rng):
    z = rng.standard_normal((2, 12))
    y = (rng.random((2, 12)) < 0.3).astype(float)
    sig = lambda x: 1 / (1 + math.exp(-x))
    ref = -np.mean([yy * math.log(sig(zz)) + (1 - yy) * math.log(1 - sig(zz)) for zz, yy in zip(z.ravel(), y.ravel())])
    assert abs(float(aux_coarse_loss(t(z), t(y))) - ref) < 1e-14


def test_total_loss_weights():
    assert total_loss(1.0, 1.0, 1.0) == pytest.approx(1.6, abs=1e-15)
    assert total_loss(2.0, 0.0, 0.0) == 2.0


# --- ablations inside the full model ----------------------------------------

def _grads(abl: dict):
    cfg, vocab, table, cases = grad_check_setup()
    cfg.ablation = AblationConfig(**abl)
    model = HiPath(cfg, vocab, table)
    model.losses(collate(cases)).total.backward()
    return {n: (None if p.grad is None else float(p.grad.abs().sum())) for n, p in model.named_parameters()}


def test_disabled_components_get_no_gradient():
    g = _grads(ABLATIONS["no_aux"])
    assert all(not v for n, v in g.items() if n.startswith("mdp.aux_head"))
    assert g["mdp.E_pos"] > 0
    g = _grads(ABLATIONS["no_hicl"])
    assert all(not v for n, v in g.items() if n.startswith("text.") or n == "alpha")
    g = _grads(ABLATIONS["full"])
    assert g["alpha"] > 0 and g["text.seg_head.weight"] > 0 and g["mdp.aux_head.weight"] > 0

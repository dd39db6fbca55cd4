import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcsr import autodiff as ad
from fedcsr.data import CuedSample
from fedcsr.losses import (CTCInfeasibleError, client_objective, ctc_loss, ctc_loss_batch, ctc_min_frames,
                           ctc_oracle, fedprox_penalty, frame_ce, kd_loss, server_objective)
from fedcsr.models import ModelConfig, init_bundle


def _lp(p):
    return ad.tensor(np.log(np.asarray(p, dtype=np.float64)))


# -- CTC ----------------------------------------------------------------------

def test_ctc_single_frame_uniform():
    assert ctc_loss(_lp([[0.5, 0.5]]), [0]).item() == pytest.approx(0.693147, abs=1e-6)


def test_ctc_two_frames_uniform():
    assert ctc_loss(_lp([[0.5, 0.5]] * 2), [0]).item() == pytest.approx(0.287682, abs=1e-6)


def test_ctc_repeat_needs_blank():
    assert ctc_min_frames([0, 0]) == 3
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(_lp([[0.5, 0.5]] * 2), [0, 0])
    assert math.isfinite(ctc_loss(_lp([[0.5, 0.5]] * 3), [0, 0]).item())


def test_ctc_empty_label_rejected():
    with pytest.raises(ValueError):
        ctc_loss(_lp([[0.5, 0.5]]), [])


def test_ctc_one_hot_valid_path_is_zero():
    p = np.full((4, 3), 1e-300)
    for t, k in enumerate([0, 2, 1, 1]):  # a - b b -> [a, b]
        p[t, k] = 1.0
    assert ctc_loss(_lp(p), [0, 1]).item() == pytest.approx(0.0, abs=1e-12)


def test_ctc_invalid_path_is_large():
    p = np.full((3, 3), 1e-6)
    p[:, 1] = 1.0 - 2e-6  # all mass on b, label is [a]
    assert ctc_loss(_lp(p), [0]).item() > 10.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_ctc_matches_enumeration_oracle(T, V, seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, T + 1))
    label = list(rng.integers(0, V, L))
    while ctc_min_frames(label) > T:
        label = label[:-1]
    if not label:
        label = [0]
    logits = rng.normal(size=(T, V + 1)) * 2
    lp = ad.log_softmax(ad.tensor(logits))
    assert ctc_loss(lp, label).item() == pytest.approx(ctc_oracle(np.exp(lp.data), label), abs=1e-10)


def test_ctc_batch_padding_matches_single():
    rng = np.random.default_rng(0)
    a = ad.log_softmax(ad.tensor(rng.normal(size=(5, 4)))).data
    b = ad.log_softmax(ad.tensor(rng.normal(size=(3, 4)))).data
    padded = np.zeros((2, 5, 4))
    padded[0], padded[1, :3] = a, b
    nll = ctc_loss_batch(ad.tensor(padded), [5, 3], [[0, 1], [2]], 3).data
    assert nll[0] == pytest.approx(ctc_loss(ad.tensor(a), [0, 1]).item(), abs=1e-12)
    assert nll[1] == pytest.approx(ctc_loss(ad.tensor(b), [2]).item(), abs=1e-12)


# -- KD / CE / prox -----------------------------------------------------------

def test_kd_zero_and_value():
    z = ad.tensor(np.zeros((2, 3)))
    assert kd_loss(z, z).item() == 0.0
    assert kd_loss(z, ad.tensor(np.ones((2, 3)))).item() == pytest.approx(1.5, abs=1e-15)


def test_frame_ce_uniform_is_log_c():
    assert frame_ce(ad.tensor(np.zeros((3, 7))), [0, 4, 6]).item() == pytest.approx(math.log(7), abs=1e-12)


def test_frame_ce_margin_below_log_c():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 3.0
    assert frame_ce(ad.tensor(logits), [1, 3]).item() < math.log(5)


def test_fedprox_values():
    w = np.arange(4.0)
    assert fedprox_penalty(w, w, 3.0).item() == 0.0
    assert fedprox_penalty(w + 1.0, w, 0.0).item() == 0.0
    assert fedprox_penalty(w + np.eye(4)[2], w, 2.0).item() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        fedprox_penalty(w, w[:3], 1.0)


# -- composite objectives -----------------------------------------------------

CFG = ModelConfig(vocab=5, d=6, hidden=4, lip_dim=3, shape_dim=3, attn_blocks=1)


def _samples():
    rng = np.random.default_rng(1)
    out = []
    for T, label in [(7, (0, 1, 2)), (5, (3, 3))]:
        out.append(CuedSample(rng.uniform(-1, 1, (T, 3)), rng.uniform(-1, 1, (T, 3)), rng.uniform(-1, 1, (T, 2)),
                              label, (len(label),), 0))
    return out


def test_server_beta_zero_is_frame_ce():
    b = init_bundle(CFG, 0)
    res = server_objective([[0, 1, 2], [3, 4]], b, b.w, 0.0)
    assert set(res.breakdown.components) == {"ce"}
    assert res.breakdown.total == res.breakdown.components["ce"]


def test_server_weighted_sum_identity():
    b = init_bundle(CFG, 0)
    res = server_objective([[0, 1, 2], [3, 4]], b, b.w, 0.005)
    c = res.breakdown.components
    assert abs(res.breakdown.total - (c["ce"] + 0.005 * c["kd"])) <= 1e-12
    assert all(k.startswith(("theta.", "phi.")) for k in res.grads)


def test_client_zero_weights_is_two_ctc_terms():
    b = init_bundle(CFG, 0)
    res = client_objective(_samples(), b, 0.0, 0.0)
    c = res.breakdown.components
    assert set(c) == {"ctc_vis", "ctc_lin"}
    assert res.breakdown.total == c["ctc_vis"] + c["ctc_lin"]
    assert not any(k.startswith("theta.") for k in res.grads)


def test_client_weighted_sum_identity():
    b = init_bundle(CFG, 0)
    res = client_objective(_samples(), b, 0.005, 0.5)
    c = res.breakdown.components
    expected = c["ctc_vis"] + c["ctc_lin"] + 0.5 * c["gamma"] + 0.005 * c["kd"]
    assert abs(res.breakdown.total - expected) <= 1e-12
    assert abs(res.breakdown.weighted_sum() - expected) <= 1e-12


def test_client_batch_mean_reduction():
    b = init_bundle(CFG, 0)
    s = _samples()
    both = client_objective(s, b, 0.0, 0.0).breakdown.total
    each = [client_objective([x], b, 0.0, 0.0).breakdown.total for x in s]
    assert both == pytest.approx(np.mean(each), abs=1e-12)


def test_fedprox_needs_reference():
    b = init_bundle(CFG, 0)
    with pytest.raises(ValueError):
        client_objective(_samples(), b, 0.0, 0.0, method="fedprox", mu=0.1)

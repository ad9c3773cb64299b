import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abevo.model import (Adam, ModelConfig, Tensor, Transformer, WarmupInvSqrt, collate, gradient_check, loss_agp,
                         loss_mlm, loss_mpp, no_grad, sequence_representation)
from abevo.model import autograd as ag
from abevo.model import checkpoint as ckpt_io
from abevo.model.gradcheck import relative_error
from abevo.objectives import encode_sequences
from abevo.train import check_head_gradients

GOLDEN = Path(__file__).parent / "data" / "tiny_forward.json"
TINY = ModelConfig(layers=2, heads=2, hidden=8, ffn=16, max_len=32, seed=0)


def tiny_batch():
    return collate([encode_sequences("CARDWY", "CARDYY"), encode_sequences("ACD", "ACE"),
                    encode_sequences("WWKL", None)])


def oracle_log_softmax(row):
    m = max(row)
    return [x - m - math.log(sum(math.exp(y - m) for y in row)) for x in row]


# --- autograd primitives ---------------------------------------------------------

def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("op", [
    lambda a, b: ag.sum_all(ag.mul(ag.add(a, b), a)),
    lambda a, b: ag.sum_all(ag.gelu(ag.matmul(a, ag.transpose(b, (1, 0))))),
    lambda a, b: ag.sum_all(ag.mul(ag.masked_softmax(a), b)),
    lambda a, b: ag.sum_all(ag.mul(ag.layer_norm(a, Tensor(np.ones(4)), Tensor(np.zeros(4))), b)),
    lambda a, b: ag.sum_all(ag.mul(ag.reshape(a, (4, 3)), ag.reshape(b, (4, 3)))),
])
def test_primitive_gradients(op):
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    op(a, b).backward()
    for t in (a, b):
        num = numeric_grad(lambda: op(Tensor(a.data), Tensor(b.data)).item(), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-8)


def test_backward_visits_shared_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ag.mul(x, x)
    z = ag.add(y, y)
    ag.sum_all(z).backward()
    assert x.grad.tolist() == [8.0]


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ag.scale(x, 2.0)
    assert not y.requires_grad


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.integers(0, 2**31))
def test_masked_softmax_rows_sum_to_one(values, seed):
    x = np.array(values)[None, :]
    keep = np.random.default_rng(seed).random(x.shape) < 0.7
    keep[0, 0] = True
    p = ag.masked_softmax(Tensor(x), keep).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p[~keep] == 0.0).all()


# --- losses ------------------------------------------------------------------------

def test_mlm_uniform_logits():
    loss = loss_mlm(Tensor(np.zeros((1, 25))), np.array([3]))
    assert loss.item() == pytest.approx(math.log(25), abs=1e-12)


def test_mlm_confident_logits():
    z = np.full((1, 25), -1e4)
    z[0, 7] = 1e4
    assert loss_mlm(Tensor(z), np.array([7])).item() < 1e-12


def test_mlm_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 25)) * 3
    t = rng.integers(0, 25, size=6)
    expected = -sum(oracle_log_softmax(list(z[i]))[t[i]] for i in range(6)) / 6
    assert loss_mlm(Tensor(z), t).item() == pytest.approx(expected, abs=1e-12)


def test_mlm_empty_mask_rejected():
    with pytest.raises(ValueError):
        loss_mlm(Tensor(np.zeros((0, 25))), np.array([], dtype=int))


@pytest.mark.parametrize("logit, label, check", [
    (0.0, 1, lambda v: v == pytest.approx(math.log(2), abs=1e-12)),
    (10.0, 1, lambda v: v < 1e-4),
    (-10.0, 0, lambda v: v < 1e-4),
])
def test_agp_loss_values(logit, label, check):
    assert check(loss_agp(Tensor(np.array([logit])), np.array([label])).item())


def test_agp_batch_mean_matches_oracle():
    rng = np.random.default_rng(2)
    z = rng.normal(size=20) * 4
    y = rng.integers(0, 2, size=20)
    expected = np.mean([math.log1p(math.exp(-zi)) if yi else math.log1p(math.exp(zi)) for zi, yi in zip(z, y)])
    assert loss_agp(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)


def test_mpp_loss_terms():
    g = Tensor(np.full(5, -10.0))
    loss = loss_mpp(g, np.zeros(5), np.full(5, 0.2), None, np.array([], dtype=int), np.zeros(0))
    assert loss.item() < 1e-4
    z = np.full((1, 25), -20.0)
    z[0, 4] = 20.0
    labels = np.array([0, 0, 0, 1, 0])
    gl = np.where(labels == 1, 20.0, -20.0)
    loss = loss_mpp(Tensor(gl), labels, np.full(5, 0.2), Tensor(z), np.array([4]), np.array([1.0]))
    assert loss.item() < 1e-4


def test_mpp_matches_two_term_oracle():
    rng = np.random.default_rng(3)
    n, k = 9, 3
    gz = rng.normal(size=n) * 2
    y = (rng.random(n) < 0.3).astype(int)
    rz = rng.normal(size=(k, 25))
    t = rng.integers(0, 25, size=k)
    bce = sum(math.log1p(math.exp(-a)) if b else math.log1p(math.exp(a)) for a, b in zip(gz, y)) / n
    nll = -sum(oracle_log_softmax(list(rz[i]))[t[i]] for i in range(k)) / k
    got = loss_mpp(Tensor(gz), y, np.full(n, 1 / n), Tensor(rz), t, np.full(k, 1 / k)).item()
    assert got == pytest.approx(bce + nll, abs=1e-12)


# --- transformer -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16").validate()


def test_forward_shapes_and_errors():
    m = Transformer(TINY)
    b = tiny_batch()
    out = m.forward(b)
    assert len(out.stacks) == TINY.layers + 1
    assert out.final.shape == (3, b.token_ids.shape[1], TINY.hidden)
    with pytest.raises(ValueError):
        m.forward(collate([encode_sequences("A" * 20, "A" * 20)]))


def test_single_token_attention_is_one():
    m = Transformer(TINY)
    b = collate([encode_sequences("", None)])
    assert m.attention_probs(b).ravel().tolist() == [1.0] * TINY.heads


def test_padding_does_not_leak():
    m = Transformer(TINY)
    short = encode_sequences("CARD", "CARE")
    alone = m.forward(collate([short])).final.data[0]
    padded = m.forward(collate([short, encode_sequences("CARDWYKLMN", "CARDWYKLMN")])).final.data[0]
    np.testing.assert_allclose(padded[:short.length], alone, rtol=0, atol=1e-12)
    probs = m.attention_probs(collate([short, encode_sequences("CARDWYKLMN", "CARDWYKLMN")]))
    assert (probs[0, :, :, short.length:] == 0).all()


def test_sequence_representation_matches_loops():
    m = Transformer(TINY)
    b = tiny_batch()
    out = m.forward(b)
    rep = sequence_representation(out).data
    for i in range(b.token_ids.shape[0]):
        acc = np.zeros(TINY.hidden)
        for layer in out.stacks[1:]:
            tokens = [layer.data[i, t] for t in range(b.token_ids.shape[1]) if b.keep[i, t]]
            acc += sum(tokens) / len(tokens)
        np.testing.assert_allclose(rep[i], acc / TINY.layers, rtol=0, atol=1e-12)


def test_sequence_representation_single_layer_is_mean_pool():
    m = Transformer(ModelConfig(layers=1, heads=2, hidden=8, ffn=16, max_len=32))
    b = tiny_batch()
    out = m.forward(b)
    w = b.keep / b.keep.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(sequence_representation(out).data, np.einsum("bt,btd->bd", w, out.stacks[1].data),
                               atol=1e-12)


def test_golden_forward_output():
    m = Transformer(TINY)
    rep = sequence_representation(m.forward(tiny_batch())).data
    expected = np.array(json.loads(GOLDEN.read_text()))
    np.testing.assert_allclose(rep, expected, rtol=1e-10, atol=1e-13)


def test_forward_is_deterministic():
    a = Transformer(TINY).forward(tiny_batch()).final.data
    b = Transformer(TINY).forward(tiny_batch()).final.data
    assert np.array_equal(a, b)


# --- optimizer ----------------------------------------------------------------------

def test_schedule_warmup_and_decay():
    s = WarmupInvSqrt(1e-3, 100)
    for t in (1, 50, 100):
        assert s(t) == 1e-3 * t / 100
    assert s(400) == pytest.approx(1e-3 * 0.5, abs=1e-18)
    assert WarmupInvSqrt(2e-4, 0)(7) == 2e-4


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.5, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    Adam(p, WarmupInvSqrt(0.1)).step()
    assert p["w"].data.tolist() == [1.5, -2.0]


@pytest.mark.parametrize("g", [3.0, -0.25, 1e-3])
def test_adam_first_step_closed_form(g):
    lr, eps = 0.01, 1e-8
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    p["w"].grad = np.array([g])
    Adam(p, WarmupInvSqrt(lr), eps=eps).step()
    # bias-corrected moments are exactly g and g^2 on the first step
    expected = 0.5 - lr * g / (abs(g) + eps)
    assert p["w"].data[0] == pytest.approx(expected, abs=1e-12)


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    p["w"].grad = np.zeros(3)
    with pytest.raises(ValueError):
        Adam(p, WarmupInvSqrt(0.1)).step()


# --- gradient check and checkpoints -------------------------------------------------

def test_gradient_check_linear_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    params = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
              "b": Tensor(rng.normal(size=2), requires_grad=True)}

    def loss():
        r = ag.add(ag.linear(Tensor(x), params["w"], params["b"]), Tensor(-y))
        return ag.sum_all(ag.mul(r, r))
    assert gradient_check(params, loss, n_checks=200) < 1e-9


def test_relative_error_floor():
    assert relative_error(1e-18, 4e-11) == pytest.approx(4e-5, rel=1e-6)
    assert relative_error(2.0, 2.0) == 0.0


def test_head_gradients_within_tolerance():
    errors = check_head_gradients(ModelConfig(layers=2, heads=2, hidden=8, ffn=16, max_len=64), n_checks=200)
    assert set(errors) == {"mlm", "agp", "mpp"}
    assert max(errors.values()) < 1e-4


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_round_trip_bit_exact(tmp_path, dtype):
    cfg = ModelConfig(**{**TINY.to_dict(), "dtype": dtype})
    m = Transformer(cfg)
    m.add_head("task", 3, seed=1)
    opt = Adam(m.params, WarmupInvSqrt(1e-3))
    path = tmp_path / "m.bin"
    ckpt_io.save(ckpt_io.from_model(m, step=7, optimizer=opt, meta={"note": "x"}), path)
    back = ckpt_io.load(path)
    assert back.step == 7 and back.meta == {"note": "x"} and back.config == cfg
    assert set(back.moments) == {f"adam.{k}.{n}" for k in "mv" for n in m.params}
    m2 = back.model()
    b = tiny_batch()
    assert np.array_equal(m.forward(b).final.data, m2.forward(b).final.data)
    assert path.read_bytes() == (ckpt_io.save(ckpt_io.from_model(m2, 7, opt, {"note": "x"}), tmp_path / "n.bin")
                                 or (tmp_path / "n.bin").read_bytes())


def test_checkpoint_header_layout(tmp_path):
    import struct
    path = tmp_path / "m.bin"
    ckpt_io.save(ckpt_io.from_model(Transformer(TINY)), path)
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    assert header["version"] == ckpt_io.FORMAT_VERSION
    last = header["tensors"][-1]
    assert 8 + n + last["offset"] + last["nbytes"] == len(raw)

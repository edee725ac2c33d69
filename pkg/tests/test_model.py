import math

import numpy as np
import pytest

from clcrn import autodiff as ad
from clcrn.data import Dataset, default_splits, fibonacci_sphere, gen_synthetic, AdvectionParams, points_to_degrees
from clcrn.errors import CheckpointError, Diverged, MissingTruth, ShapeMismatch
from clcrn.model import (CLCGRUCell, ModelConfig, Seq2SeqModel, TrainConfig, decode, encode, evaluate,
                         gru_step, load_checkpoint, loss_and_grads, predict, save_checkpoint, train)

N = 16


def small_model(**kw):
    cfg = dict(k=3, heads=2, hidden=4, layers=1, input_len=3, horizon=2, seed=0)
    cfg.update(kw)
    return Seq2SeqModel(ModelConfig(**cfg), fibonacci_sphere(N))


def scalar_gru(cell, F, Z, w, nbrs):
    """Loop oracle of the gated update for one graph."""
    n, k1, e = w.shape

    def conv(X, W, b, act):
        d = X.shape[1]
        out = np.zeros((n, W.shape[1]))
        for i in range(n):
            agg = [0.0] * (e * d)
            for ee in range(e):
                for k in range(k1):
                    for dd in range(d):
                        agg[ee * d + dd] += w[i, k, ee] * X[nbrs[i, k], dd]
            for o in range(W.shape[1]):
                out[i, o] = act(sum(agg[a] * W[a, o] for a in range(e * d)) + b[o])
        return out

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    r = conv(np.hstack([F, Z]), cell.W_r.data, cell.b_r.data, sig)
    u = conv(np.hstack([F, Z]), cell.W_u.data, cell.b_u.data, sig)
    C = conv(np.hstack([F, r * Z]), cell.W_C.data, cell.b_C.data, math.tanh)
    return u * Z + (1 - u) * C


def test_gru_step_matches_scalar_loop():
    m = small_model()
    rng = np.random.default_rng(1)
    cell = m.encoder[0]
    for t in (cell.b_r, cell.b_u, cell.b_C):
        t.data = rng.standard_normal(t.shape)
    F = rng.standard_normal((N, 1))
    Z = rng.standard_normal((N, 4))
    w = m.kernel_weights().data
    out = gru_step(cell, F, Z, w, m.packed.neighbors).data
    np.testing.assert_allclose(out, scalar_gru(cell, F, Z, w, m.packed.neighbors), atol=1e-10)


def test_gate_saturation():
    m = small_model()
    rng = np.random.default_rng(2)
    cell = m.encoder[0]
    F = rng.standard_normal((N, 1))
    Z = rng.uniform(-0.5, 0.5, (N, 4))
    w = m.kernel_weights().data
    cell.b_u.data = np.full(4, 50.0)
    np.testing.assert_allclose(gru_step(cell, F, Z, w, m.packed.neighbors).data, Z, atol=1e-15)
    cell.b_u.data = np.full(4, -50.0)
    cell.b_r.data = np.full(4, 50.0)
    y = ad.aggregate(np.hstack([F, Z]), w, m.packed.neighbors).data
    expect = np.tanh(y @ cell.W_C.data + cell.b_C.data)
    np.testing.assert_allclose(gru_step(cell, F, Z, w, m.packed.neighbors).data, expect, atol=1e-12)


def test_gru_step_shape_check():
    m = small_model()
    with pytest.raises(ShapeMismatch):
        gru_step(m.encoder[0], np.zeros((N, 2)), np.zeros((N, 4)), m.kernel_weights(), m.packed.neighbors)


def test_encode_base_case_and_fixed_point():
    m = small_model(layers=2)
    x = np.random.default_rng(3).standard_normal((2, 1, N, 1))
    h = encode(m, x)
    w = m.kernel_weights()
    z0 = gru_step(m.encoder[0], x[:, 0].reshape(2 * N, 1), np.zeros((2 * N, 4)), w, m.packed.neighbors)
    z1 = gru_step(m.encoder[1], z0, np.zeros((2 * N, 4)), w, m.packed.neighbors)
    np.testing.assert_array_equal(h[0].data, z0.data)
    np.testing.assert_array_equal(h[1].data, z1.data)

    for cell in m.encoder:
        for t in (cell.b_r, cell.b_u, cell.b_C):
            t.data = np.zeros_like(t.data)
    h = encode(m, np.zeros((1, 3, N, 1)))
    assert all(np.all(z.data == 0) for z in h)
    with pytest.raises(ShapeMismatch):
        encode(m, np.zeros((1, 0, N, 1)))
    with pytest.raises(ShapeMismatch):
        encode(m, np.zeros((1, 3, N + 1, 1)))


def test_decode_teacher_forcing_inputs():
    m = small_model(horizon=4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, N, 1))
    truth = rng.standard_normal((2, 4, N, 1))
    h = encode(m, x)
    fed = []
    preds = decode(m, h, 4, truth, 1.0, fed_inputs=fed)
    assert len(preds) == 4 and preds[0].shape == (2 * N, 1)
    np.testing.assert_array_equal(fed[0], 0.0)
    for s in range(1, 4):
        np.testing.assert_array_equal(fed[s], truth[:, s - 1].reshape(2 * N, 1))
    fed = []
    preds = decode(m, h, 4, None, 0.0, fed_inputs=fed)
    for s in range(1, 4):
        np.testing.assert_array_equal(fed[s], preds[s - 1].data)
    with pytest.raises(MissingTruth):
        decode(m, h, 4, None, 0.5, np.random.default_rng(0))


def test_predict_shape_and_determinism():
    m = small_model(horizon=12)
    x = np.random.default_rng(5).standard_normal((3, 3, N, 1))
    a = predict(m, x)
    assert a.shape == (3, 12, N, 1)
    np.testing.assert_array_equal(a, predict(m, x))


def test_bptt_gradient_check():
    m = small_model(input_len=3, horizon=2, layers=2)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, N, 1))
    y = rng.standard_normal((2, 2, N, 1))
    _, grads = loss_and_grads(m, x, y)
    params = m.parameters()
    for name in ("kernel.w0", "kernel.tau_raw", "enc0.W_u", "enc1.W_C", "dec0.b_r", "out.W"):
        p = params[name]
        base = p.data.copy()
        flat = base.reshape(-1)
        idx = np.random.default_rng(7).choice(flat.size, min(6, flat.size), replace=False)
        for i in idx:
            numeric = []
            for sgn in (1, -1):
                trial = flat.copy()
                trial[i] += sgn * 1e-5
                p.data = trial.reshape(base.shape)
                numeric.append(loss_and_grads(m, x, y)[0])
            p.data = base
            num = (numeric[0] - numeric[1]) / 2e-5
            ana = grads[name].reshape(-1)[i]
            assert abs(ana - num) / (abs(num) + 1e-8) < 1e-3 or abs(ana - num) < 1e-9, name


def const_dataset(value=3.0, t=60):
    pts = fibonacci_sphere(N)
    return Dataset(points_to_degrees(pts), np.full((t, N, 1), value), default_splits(t), (3, 2))


def test_training_on_constant_signal_improves():
    ds = const_dataset()
    m = small_model()
    before = np.mean(np.abs(predict(m, ds.batch(ds.window_starts("val"))[0]) - 3.0))
    hist = train(m, ds, TrainConfig(epochs=1, batch_size=4, lr=0.01, seed=0))
    after = np.mean(np.abs(predict(m, ds.batch(ds.window_starts("val"))[0]) - 3.0))
    assert len(hist.train_mae) == 1
    assert after < before


def synthetic_small():
    return gen_synthetic(N, AdvectionParams(steps=80, k=3, alpha=0.5, window=(3, 2)))


def test_training_is_bit_deterministic():
    ds = synthetic_small()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3, tf_decay=10)
    h1 = train(small_model(seed=3), ds, cfg)
    h2 = train(small_model(seed=3), ds, cfg)
    assert h1.train_mae == h2.train_mae and h1.val_mae == h2.val_mae
    assert h1.to_csv().splitlines()[0] == "epoch,train_mae,val_mae"


def test_early_stopping_keeps_best():
    ds = synthetic_small()
    m = small_model()
    hist = train(m, ds, TrainConfig(epochs=6, batch_size=8, patience=1, lr=0.05, seed=1))
    assert hist.best_epoch == int(np.argmin(hist.val_mae)) + 1
    assert len(hist.val_mae) <= 6


def test_divergence_reports_epoch():
    ds = synthetic_small()
    m = small_model()
    m.W_out.data[:] = np.nan
    with pytest.raises(Diverged) as info:
        train(m, ds, TrainConfig(epochs=2, batch_size=8))
    assert info.value.epoch == 1


def test_lr_schedule_and_teacher_probability():
    c = TrainConfig(lr=0.01)
    assert c.lr_at(0) == 0.01 and c.lr_at(9) == 0.01
    assert c.lr_at(10) == pytest.approx(0.0095)
    assert c.lr_at(80) == pytest.approx(0.01 * 0.95 ** 5)
    s = TrainConfig(tf_decay=100.0)
    assert s.teacher_prob(0) == pytest.approx(100 / 101)
    assert s.teacher_prob(2000) < 1e-6
    assert TrainConfig(teacher_forcing="always").teacher_prob(10 ** 6) == 1.0
    with pytest.raises(ValueError):
        TrainConfig(teacher_forcing="sometimes")


def test_evaluate_reports_horizons_in_original_units():
    ds = synthetic_small()
    m = small_model()
    train(m, ds, TrainConfig(epochs=1, batch_size=8))
    res = evaluate(m, ds, "test", [1, 2])
    assert set(res) == {1, 2, "overall"}
    for h in (1, 2):
        assert all(np.isfinite(v) and v >= 0 for v in res[h].values())


def test_checkpoint_round_trip(tmp_path):
    ds = synthetic_small()
    m = small_model(map_kind="log", components=("mlp", "distance"))
    train(m, ds, TrainConfig(epochs=1, batch_size=8))
    path = tmp_path / "m.clcr"
    save_checkpoint(m, path)
    assert path.read_bytes()[:4] == b"CLCR"
    back = load_checkpoint(path)
    for name, p in m.parameters().items():
        np.testing.assert_array_equal(back.parameters()[name].data, p.data)
    np.testing.assert_array_equal(back.norm[0], m.norm[0])
    x = ds.batch([0, 1])[0]
    np.testing.assert_array_equal(predict(back, x), predict(m, x))
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    (tmp_path / "bad").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")

import math

import numpy as np
import pytest

import coral.training as training
from coral.denoiser import NULL_LABEL, ArchConfig, NonFiniteError, init_model
from coral.longtail_data import make_ring_gaussians
from coral.schedules import ContrastiveWeightConfig, contrastive_weight
from coral.training import (
    AdamState,
    TrainConfig,
    adam_step,
    adam_update,
    init_adam,
    label_dropout,
    load_train_state,
    save_train_state,
    train,
)


@pytest.fixture(scope="module")
def ring4():
    return make_ring_gaussians(4, [200] * 4, 2.0, 0.3, 2, np.random.default_rng(0))


ARCH4 = ArchConfig(dim=2, num_classes=4, hidden=16, bottleneck=8, proj_dim=4, time_embed_dim=8)


def quick_config(**kw):
    base = dict(steps=30, batch_size=16, lr=1e-3, T=20, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_label_dropout_zero_prob():
    y = np.arange(50) % 7
    np.testing.assert_array_equal(label_dropout(y, 0.0, np.random.default_rng(0)), y)


def test_label_dropout_rate():
    out = label_dropout(np.zeros(100_000, dtype=int), 0.9, np.random.default_rng(5))
    assert abs(np.mean(out == NULL_LABEL) - 0.9) < 0.01


def test_label_dropout_deterministic():
    y = np.arange(100) % 3
    a = label_dropout(y, 0.3, np.random.default_rng(8))
    b = label_dropout(y, 0.3, np.random.default_rng(8))
    np.testing.assert_array_equal(a, b)
    kept = a != NULL_LABEL
    np.testing.assert_array_equal(a[kept], y[kept])


def test_label_dropout_rejects_bad_prob():
    with pytest.raises(ValueError):
        label_dropout([0, 1], 1.0, np.random.default_rng(0))


def _scalar_model(value):
    arch = ArchConfig(dim=1, num_classes=1, hidden=1, bottleneck=1, proj_dim=2, time_embed_dim=1)
    model = init_model(arch, np.random.default_rng(0))
    for k in model.params:
        model.params[k] = np.full(model.params[k].shape, value)
    return model


def test_adam_zero_gradient_keeps_params():
    model = _scalar_model(0.5)
    state = init_adam(model)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    new, st = adam_step(model, grads, state, 0.1)
    assert st.step == 1
    for k in model.params:
        np.testing.assert_array_equal(new.params[k], model.params[k])


def test_adam_first_step_size():
    model = _scalar_model(0.0)
    grads = {k: np.ones_like(v) for k, v in model.params.items()}
    new, _ = adam_step(model, grads, init_adam(model), 0.1)
    expected = -0.1 / (1.0 + 1e-8)
    for v in new.params.values():
        np.testing.assert_allclose(v, expected, rtol=0, atol=1e-15)


def reference_adam(p0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam with Python floats."""
    p = list(p0)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for k in range(1, steps + 1):
        g = grad_fn(p)
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**k)
            vh = v[i] / (1 - b2**k)
            p[i] = p[i] - lr * mh / (math.sqrt(vh) + eps)
    return p


@pytest.mark.parametrize("seed", range(3))
def test_adam_matches_reference(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(10)
    curv = rng.uniform(0.1, 5.0, 10)
    p0 = rng.standard_normal(10)

    def grad_fn(p):
        return [float(c * (x - a)) for x, a, c in zip(p, target, curv)]

    expected = reference_adam(p0.tolist(), grad_fn, 100, 0.05)

    params = {"p": p0.copy()}
    state = AdamState({"p": np.zeros(10)}, {"p": np.zeros(10)}, 0)
    for _ in range(100):
        params, state = adam_update(params, {"p": curv * (params["p"] - target)}, state, 0.05)
    assert state.step == 100
    np.testing.assert_allclose(params["p"], expected, rtol=0, atol=1e-10)


def test_adam_rejects_non_finite():
    model = _scalar_model(0.0)
    state = AdamState(init_adam(model).m, init_adam(model).v, 41)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["enc.W"] = np.full_like(grads["enc.W"], np.inf)
    with pytest.raises(NonFiniteError, match="step 42"):
        adam_step(model, grads, state, 0.1)


def test_zero_weight_matches_branchless_run(ring4):
    cfg = quick_config(contrastive=ContrastiveWeightConfig(0.0, 0.8))
    with_branch, log_a, _ = train(cfg, ring4, ARCH4)
    without, log_b, _ = train(quick_config(contrastive=ContrastiveWeightConfig(0.0, 0.8), contrastive_branch=False),
                              ring4, ARCH4)
    assert [(r.l_diff, r.total, r.grad_norm) for r in log_a.records] == [
        (r.l_diff, r.total, r.grad_norm) for r in log_b.records
    ]
    for k in with_branch.params:
        assert with_branch.params[k].tobytes() == without.params[k].tobytes()


def test_training_makes_progress(ring4):
    cfg = TrainConfig(steps=200, batch_size=32, lr=1e-3, T=100, seed=0)
    _, log, _ = train(cfg, ring4, ARCH4)
    assert log.records[-1].l_diff < log.records[0].l_diff


def test_training_deterministic(ring4):
    cfg = quick_config()
    _, a, _ = train(cfg, ring4, ARCH4)
    _, b, _ = train(cfg, ring4, ARCH4)
    strip = lambda log: [(r.step, r.l_diff, r.l_con, r.lambda_bar, r.total, r.grad_norm) for r in log.records]  # noqa: E731
    assert strip(a) == strip(b)


def test_loss_assembly(ring4):
    _, log, _ = train(quick_config(contrastive=ContrastiveWeightConfig(0.5, 0.8)), ring4, ARCH4)
    assert len(log.records) == 30
    for r in log.records:
        assert abs(r.total - r.l_diff - r.lambda_bar * r.l_con) <= 1e-12
        assert r.lambda_bar > 0


def test_contrastive_loss_sees_original_labels(ring4, monkeypatch):
    seen = []
    real = training.supcon_loss

    def spy(z, labels, tau, reduction="mean"):
        seen.append(np.array(labels))
        return real(z, labels, tau, reduction)

    monkeypatch.setattr(training, "supcon_loss", spy)
    train(quick_config(p_uncond=0.9, steps=5), ring4, ARCH4)
    assert len(seen) == 5
    assert all(np.all(lbl >= 0) for lbl in seen)


def test_shared_t_mode(ring4, monkeypatch):
    drawn = []
    real = training.forward_batch

    def spy(model, x_t, t, y, schedule=None):
        drawn.append(np.array(t))
        return real(model, x_t, t, y, schedule)

    monkeypatch.setattr(training, "forward_batch", spy)
    cfg = quick_config(lambda_mode="shared_t", steps=4)
    _, log, _ = train(cfg, ring4, ARCH4)
    for t, rec in zip(drawn, log.records):
        assert np.all(t == t[0])
        assert rec.lambda_bar == pytest.approx(contrastive_weight(cfg.contrastive, int(t[0]), cfg.T), rel=1e-15)


def test_split_run_equals_unsplit(ring4, tmp_path):
    cfg = quick_config(steps=24)
    full, full_log, _ = train(cfg, ring4, ARCH4)
    part, log1, state = train(cfg, ring4, ARCH4, until=10)
    save_train_state(part, state, tmp_path / "s.npz")
    model, state = load_train_state(tmp_path / "s.npz", ARCH4)
    assert state.step == 10
    resumed, log2, state = train(cfg, ring4, ARCH4, model=model, state=state)
    assert [r.step for r in log2.records] == list(range(11, 25))
    assert [r.l_diff for r in log1.records + log2.records] == [r.l_diff for r in full_log.records]
    for k in full.params:
        assert full.params[k].tobytes() == resumed.params[k].tobytes()


def test_shapes_preserved(ring4):
    model, _, _ = train(quick_config(steps=3), ring4, ARCH4)
    model.check_shapes()


def test_train_preconditions(ring4):
    with pytest.raises(ValueError):
        TrainConfig(p_uncond=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        train(quick_config(batch_size=10_000), ring4, ARCH4)


def test_log_csv(ring4, tmp_path):
    _, log, _ = train(quick_config(steps=3), ring4, ARCH4)
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,l_diff,l_con,lambda_bar,grad_norm"
    assert len(lines) == 4

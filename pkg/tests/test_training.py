import math

import numpy as np
import pytest
from scipy import integrate

from vfnet.errors import PreconditionError, ShapeError, TrainingDivergedError
from vfnet.flow import FlowPrior
from vfnet.model import ModelConfig, VFNet
from vfnet.pointcloud import prepare, synth_dataset
from vfnet.training import (
    Adamax,
    AdamaxState,
    TrainConfig,
    adamax_step,
    elbo,
    elbo_gradient_check,
    grid_chamfer_loss,
    kl_single_sample,
    kl_warmup_beta,
    objective,
    student_t_log_norm,
    student_t_logpdf,
    train,
)

TINY = ModelConfig(latent_dim=4, encoder_widths=(16, 16), encoder_head=(16,), projector_widths=(16,),
                   decoder_widths=(16, 16), variance_widths=(8,), grid_widths=(8,), flow_hidden=8, grid_template=16)


def tiny_data(n=6, points=32, seed=0):
    r = np.random.default_rng(seed)
    return [prepare(c, points, r) for c in synth_dataset(n, seed=seed, grid_resolution=8)]


# --------------------------------------------------------------- Student-t


def test_student_t_at_mode_matches_gamma_oracle():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 30
    oracle = float(mpmath.loggamma(3) - mpmath.loggamma(1.5) - 1.5 * mpmath.log(3 * mpmath.pi))
    value = float(student_t_logpdf(np.zeros(3), np.zeros(3), 1.0, 3.0))
    assert value == pytest.approx(oracle, abs=1e-12)
    assert value == pytest.approx(-2.5510, abs=2e-4)


def test_student_t_scale_shift():
    a = student_t_logpdf(np.ones(3), np.ones(3), 1.0)
    b = student_t_logpdf(np.ones(3), np.ones(3), 2.0)
    assert b - a == pytest.approx(-3 * math.log(2), abs=1e-12)


def test_student_t_normalizes():
    f = lambda r: 4 * math.pi * r * r * math.exp(float(student_t_logpdf(np.array([r, 0, 0]), np.zeros(3), 0.7)))
    total, _ = integrate.quad(f, 0, np.inf, limit=500, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_student_t_heavy_tail():
    near = -student_t_logpdf(np.array([10.0, 0, 0]), np.zeros(3), 1.0) + student_t_log_norm(3.0)
    far = -student_t_logpdf(np.array([100.0, 0, 0]), np.zeros(3), 1.0) + student_t_log_norm(3.0)
    assert far / near < 2.5


def test_student_t_rejects_bad_scale():
    with pytest.raises(PreconditionError):
        student_t_logpdf(np.zeros(3), np.zeros(3), 0.0)
    with pytest.raises(PreconditionError):
        student_t_logpdf(np.zeros(3), np.zeros(3), 1.0, nu=-1.0)


# ----------------------------------------------------------------- KL, ELBO


def test_kl_zero_for_standard_posterior():
    n, d = 100_000, 3
    eps = np.random.default_rng(0).standard_normal((n, d))
    kl = kl_single_sample(np.zeros((n, d)), eps, eps, FlowPrior(d))
    assert abs(kl.mean()) < 1e-12  # identical densities: every draw is exactly zero


def test_kl_matches_analytic_gaussian():
    n = 100_000
    m = np.array([0.5, -1.0, 0.2])
    s2 = np.array([0.3, 2.0, 1.0])
    eps = np.random.default_rng(1).standard_normal((n, 3))
    z = m + np.sqrt(s2) * eps
    kl = kl_single_sample(np.broadcast_to(np.log(s2), (n, 3)), eps, z, FlowPrior(3))
    analytic = 0.5 * np.sum(s2 + m * m - 1 - np.log(s2))
    se = kl.std(ddof=1) / math.sqrt(n)
    assert abs(kl.mean() - analytic) < 3 * se


def test_elbo_breakdown_consistency():
    model = VFNet(TINY, rng=np.random.default_rng(0), dtype=np.float64)
    pc = tiny_data(1)[0]
    b0 = elbo(pc, model, 0.0, np.random.default_rng(3))
    assert b0.elbo == b0.recon_log_likelihood
    b = elbo(pc, model, 0.7, np.random.default_rng(3))
    assert b.elbo == pytest.approx(b.recon_log_likelihood - 0.7 * b.kl, abs=1e-9)
    s = elbo(pc, model, 0.7, np.random.default_rng(3), reduction="sum")
    assert s.recon_log_likelihood == pytest.approx(len(pc) * b.recon_log_likelihood, rel=1e-12)


def test_warmup_schedule():
    assert kl_warmup_beta(0, 4000) == 0.0
    assert kl_warmup_beta(2000, 4000) == 0.5
    assert kl_warmup_beta(4000, 4000) == 1.0
    assert kl_warmup_beta(9000, 4000) == 1.0
    assert kl_warmup_beta(0, 0) == 1.0
    betas = [kl_warmup_beta(e, 75) for e in range(300)]
    assert all(a <= b for a, b in zip(betas, betas[1:])) and betas[-1] == 1.0
    with pytest.raises(PreconditionError):
        kl_warmup_beta(-1, 10)


@pytest.mark.parametrize("reduction", ["mean", "sum"])
@pytest.mark.parametrize("constant_sigma", [None, 0.05])
def test_full_objective_gradients(reduction, constant_sigma):
    r = np.random.default_rng(11)
    model = VFNet(TINY, rng=r, dtype=np.float64)
    model.flow = FlowPrior(4, hidden=8, rng=r, dtype=np.float64, identity=False)
    X = np.stack([c.points for c in tiny_data(3)])
    rep = elbo_gradient_check(model, X, r.standard_normal((3, 4)), 0.6, constant_sigma=constant_sigma,
                              rng=r, reduction=reduction)
    assert rep.passed, str(rep)


def test_objective_rejects_bad_input():
    model = VFNet(TINY, rng=np.random.default_rng(0), dtype=np.float64)
    with pytest.raises(ShapeError):
        objective(model, np.zeros((4, 3)), np.zeros((1, 4)), 1.0)
    with pytest.raises(KeyError):
        objective(model, np.zeros((1, 4, 3)), np.zeros((1, 4)), 1.0, groups=("nope",))


# ------------------------------------------------------------------ Adamax


def test_adamax_zero_gradient_is_noop():
    v = [np.array([1.0, -2.0])]
    state = AdamaxState.zeros_like(v)
    adamax_step(v, [np.zeros(2)], state, lr=0.1)
    assert v[0].tolist() == [1.0, -2.0]


def test_adamax_first_step_bounded():
    r = np.random.default_rng(0)
    v = [r.standard_normal(20)]
    before = v[0].copy()
    adamax_step(v, [r.standard_normal(20) * 100], AdamaxState.zeros_like(v), lr=1e-3)
    assert np.abs(v[0] - before).max() <= 1e-3 + 1e-15


def test_adamax_quadratic_converges():
    # minimize (x - 3)^2
    x = [np.array([0.0])]
    state = AdamaxState.zeros_like(x)
    for _ in range(1000):
        adamax_step(x, [2 * (x[0] - 3.0)], state, lr=0.05)
    assert abs(x[0][0] - 3.0) < 1e-3


def test_adamax_shape_mismatch():
    with pytest.raises(ShapeError):
        adamax_step([np.zeros(2)], [np.zeros(3)], AdamaxState.zeros_like([np.zeros(2)]))


# --------------------------------------------------------------- grid loss


def test_grid_chamfer_loss_gradient():
    r = np.random.default_rng(0)
    P, G = r.uniform(-1, 1, (2, 7, 2)), r.uniform(-1, 1, (2, 9, 2))

    def brute(P):
        d2 = ((P[:, :, None] - G[:, None]) ** 2).sum(-1)
        return d2.min(2).mean(1) + d2.min(1).mean(1)

    loss, grad = grid_chamfer_loss(P, G)
    np.testing.assert_allclose(loss, brute(P), rtol=1e-12)
    h = 1e-6
    num = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        e = np.zeros_like(P)
        e[idx] = h
        num[idx] = (brute(P + e).sum() - brute(P - e).sum()) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-6)


# ----------------------------------------------------------------- training


def tiny_config(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=4, variance_phase_epochs=2, prior_phase_epochs=2,
                grid_phase_epochs=2, seed=5, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(PreconditionError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(PreconditionError):
        TrainConfig(epochs=10, warmup_epochs=11)
    with pytest.raises(PreconditionError):
        TrainConfig(recon_reduction="median")
    assert TrainConfig(epochs=16000).warmup_epochs == 4000
    assert TrainConfig().nu == 3.0
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_train_is_deterministic_and_logs():
    data = tiny_data()
    logs = []
    a = train(data, tiny_config(), logs.append)
    b = train(data, tiny_config())
    for x, y in zip(a.model.blocks(), b.model.blocks()):
        assert np.array_equal(x.values, y.values), x.name
    phases = [r["phase"] for r in logs]
    assert phases == ["elbo"] * 3 + ["prior"] * 2 + ["variance"] * 2 + ["grid"] * 2
    for rec in logs[:3]:
        assert {"epoch", "beta", "elbo", "recon", "kl", "wall_ms"} <= set(rec)
        assert math.isfinite(rec["elbo"])


def test_variance_phase_freezes_other_groups(monkeypatch):
    import vfnet.training as T

    data = tiny_data()
    snapshots = {}
    original = T.train_variance

    def spy(model, *args, **kwargs):
        snapshots["before"] = {b.name: b.values.copy() for b in model.blocks()}
        out = original(model, *args, **kwargs)
        snapshots["after"] = {b.name: b.values.copy() for b in model.blocks()}
        return out

    monkeypatch.setattr(T, "train_variance", spy)
    T.train(data, tiny_config())
    before, after = snapshots["before"], snapshots["after"]
    changed = {n for n in before if not np.array_equal(before[n], after[n])}
    assert changed and all(n.startswith("variance_net.") for n in changed)


def test_divergence_carries_last_checkpoint():
    data = tiny_data()
    data[2].points[0, 0] = 1e30  # squared distances overflow float32
    with pytest.raises(TrainingDivergedError) as err:
        train(data, tiny_config())
    assert err.value.checkpoint is not None
    assert all(np.all(np.isfinite(b.values)) for b in err.value.checkpoint.model.blocks())


def test_empty_dataset():
    with pytest.raises(PreconditionError):
        train([], tiny_config())

import numpy as np
import pytest

from sgalab.alignment import ProjectionHead
from sgalab.errors import NumericalError, ShapeError, TrainingDivergence
from sgalab.flow import (
    Denoiser, DiffusionTrainer, FlowBatch, diffusion_train_step, euler_sample, flow_matching_loss,
    interpolate, make_flow_batch, sample_timestep_logit_normal,
)
from sgalab.numerics import RngState, finite_diff_grad, relative_error

F64 = np.float64


def test_logit_normal_timesteps():
    t = sample_timestep_logit_normal(RngState(0), 100_000)
    assert np.all((t > 0) & (t < 1))
    assert abs(np.median(t) - 0.5) <= 0.01
    # u = 0 maps to the center
    assert 0.5 * (1 + np.tanh(0.0)) == 0.5


def test_interpolation_endpoints_and_example():
    r = RngState(1)
    z1, z0 = r.normal((3, 2, 2, 4)), r.normal((3, 2, 2, 4))
    assert np.array_equal(interpolate(z1, z0, np.zeros(3)), z0)
    assert np.array_equal(interpolate(z1, z0, np.ones(3)), z1)
    assert interpolate(np.float64(4.0), np.float64(0.0), 0.25) == 1.0
    with pytest.raises(ShapeError):
        interpolate(z1, z0[:2], np.zeros(3))


class _Oracle:
    """Test double: knows the velocity target for its batch."""

    def __init__(self, target=None):
        self.target = target

    def forward(self, z, t, labels):
        v = self.target if self.target is not None else np.zeros_like(z)
        return v, z, None


def _batch(seed=2, b=4, t=None):
    r = RngState(seed)
    z1 = r.normal((b, 4, 4, 2))
    return FlowBatch(z1, r.split(1).normal(z1.shape), r.split(2).uniform((b,)) if t is None else t,
                     np.arange(b) % 10)


def test_flow_loss_with_test_doubles():
    batch = _batch()
    assert flow_matching_loss(_Oracle(batch.z1 - batch.z0), batch)[0] == 0.0
    zero, _ = flow_matching_loss(_Oracle(), batch)
    assert zero == pytest.approx(np.mean((batch.z1 - batch.z0) ** 2))
    other = FlowBatch(batch.z1, batch.z0, np.full(4, 0.9), batch.labels)
    assert flow_matching_loss(_Oracle(), other)[0] == zero


def small_model(blocks=2, tap=0, seed=0):
    return Denoiser(2, width=8, blocks=blocks, tap_index=tap, groups=4, rng=RngState(seed), dtype=F64)


@pytest.mark.parametrize("mode", ["none", "sga", "patchwise"])
def test_step_gradient_matches_finite_differences(mode):
    model = small_model(tap=1)
    head = ProjectionHead(8, 5, 1, (2, 2), rng=RngState(3), dtype=F64)
    tr = DiffusionTrainer(model, head=head, alignment_mode=mode, lambda_s=0.7)
    batch = _batch(b=2)
    pf = RngState(4).normal((2, 4, 5))
    _, grads = tr.gradients(batch, pf)
    from sgalab.alignment import alignment_value_and_grad

    def objective():
        fm, tap = flow_matching_loss(model, batch)
        if mode == "none":
            return fm
        return fm + 0.7 * alignment_value_and_grad(mode, head.forward(tap), pf)[0]

    params = dict(model.params)
    params.update({f"head.{k}": v for k, v in head.params.items()} if mode != "none" else {})
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = RngState(5).split(len(name)).permutation(flat.size)[:5]
        num = []
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-6
            up = objective()
            flat[i] = old - 1e-6
            down = objective()
            flat[i] = old
            num.append((up - down) / 2e-6)
        ana = grads[name].reshape(-1)[idx]
        num = np.array(num)
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        assert err <= 1e-4, (name, ana, num)


def test_stem_weight_gradient():
    model = small_model()
    batch = _batch(b=2)
    zt = interpolate(batch.z1, batch.z0, batch.t)
    w = model.stem.params["w"]
    v, _, cache = model.forward(zt, batch.t, batch.labels)
    g = model.backward(cache, np.ones_like(v))["stem.w"]

    def f(x):
        old = w.copy()
        w[...] = x
        out = model.velocity(zt, batch.t, batch.labels).sum()
        w[...] = old
        return out

    assert relative_error(g, finite_diff_grad(f, w.copy(), h=1e-6)) <= 1e-4


def test_self_alignment_gives_pure_flow_gradient():
    model = small_model(tap=1)
    head = ProjectionHead(8, 5, 1, (2, 2), rng=RngState(3), dtype=F64)
    batch = _batch(b=3)
    _, tap = flow_matching_loss(model, batch)
    pf = head.forward(tap)
    losses, grads = DiffusionTrainer(model, head=head, alignment_mode="sga", lambda_s=1.0).gradients(batch, pf)
    _, plain = DiffusionTrainer(model, alignment_mode="none").gradients(batch)
    assert losses["align"] <= 1e-12
    for k, v in plain.items():
        assert np.max(np.abs(grads[k] - v)) <= 1e-9


def test_zero_weight_reduces_to_flow_matching():
    pf = RngState(6).normal((4, 4, 5))
    states = []
    for mode in ("none", "sga", "patchwise"):
        model = small_model()
        head = ProjectionHead(8, 5, 1, (2, 2), rng=RngState(3), dtype=F64)
        tr = DiffusionTrainer(model, head=head, alignment_mode=mode, lambda_s=0.0, lr=1e-3)
        logs = [diffusion_train_step(tr, _batch(seed=s), pf, s) for s in range(3)]
        states.append((logs, {k: v.copy() for k, v in model.params.items()}))
    for logs, params in states[1:]:
        assert logs == states[0][0]
        assert all(np.array_equal(v, states[0][1][k]) for k, v in params.items())


def test_step_is_reproducible():
    out = []
    for _ in range(2):
        model = small_model()
        head = ProjectionHead(8, 5, 1, (2, 2), rng=RngState(3), dtype=F64)
        tr = DiffusionTrainer(model, head=head, alignment_mode="sga", lr=1e-3)
        batch = make_flow_batch(RngState(7).normal((4, 4, 4, 2)), np.arange(4), RngState(8))
        losses = diffusion_train_step(tr, batch, RngState(9).normal((4, 4, 5)))
        out.append((losses, model.params["out.w"].copy()))
    assert out[0][0] == out[1][0] and np.array_equal(out[0][1], out[1][1])


def test_non_finite_step_halts():
    tr = DiffusionTrainer(small_model(), alignment_mode="none")
    batch = _batch()
    batch.z1[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergence):
        diffusion_train_step(tr, batch)


def test_label_dropout_and_batch_validation():
    b = make_flow_batch(np.zeros((1000, 1, 1, 1)), np.zeros(1000, int), RngState(10), label_dropout=0.1)
    assert abs(np.mean(b.labels == 10) - 0.1) < 0.03
    with pytest.raises(ShapeError):
        FlowBatch(np.zeros((1, 2)), np.zeros((1, 2)), np.array([1.5]), np.zeros(1, int))


class _Contractive:
    def __init__(self, target, rate=1.0):
        self.target, self.rate = target, rate

    def velocity(self, z, t, labels):
        return self.rate * (self.target - z)


def test_euler_sampler_converges_on_contractive_field():
    target = RngState(11).normal((2, 3, 3, 2))
    z = euler_sample(_Contractive(target), [0, 1], (3, 3, 2), steps=400, guidance_scale=1.0,
                     z0=np.zeros_like(target))
    # the field relaxes the gap by exp(-1) over unit time; Euler tracks it closely
    assert np.allclose(z, target * (1 - np.exp(-1.0)), atol=1e-3)
    many = euler_sample(_Contractive(target), [0, 1], (3, 3, 2), steps=10, guidance_scale=1.0,
                        z0=np.zeros_like(target))
    assert np.linalg.norm(many - target) < np.linalg.norm(target)
    stiff = euler_sample(_Contractive(target, 20.0), [0, 1], (3, 3, 2), steps=400, guidance_scale=1.0,
                         z0=np.zeros_like(target))
    assert np.max(np.abs(stiff - target)) <= 1e-6


def test_guidance_one_equals_conditional():
    model = small_model()
    labels = [1, 2, 3]
    a = euler_sample(model, labels, (4, 4, 2), steps=5, guidance_scale=1.0, rng=RngState(12))
    z = RngState(12).normal((3, 4, 4, 2))
    for i in range(5):
        z = z + 0.2 * model.velocity(z, np.full(3, i * 0.2), np.array(labels))
    assert np.array_equal(a, z)


def test_sampler_divergence_guard():
    class Exploding:
        def velocity(self, z, t, labels):
            return 1e8 * np.ones_like(z)

    with pytest.raises(NumericalError):
        euler_sample(Exploding(), [0], (2, 2, 1), steps=2, guidance_scale=1.0, rng=RngState(0))


def test_every_arm_learns_on_a_tiny_dataset():
    r = RngState(13)
    data = np.tanh(r.normal((64, 4, 4, 2)))
    labels = np.arange(64) % 10
    prior = r.split(1).normal((64, 4, 5))
    val = make_flow_batch(data[:16], labels[:16], RngState(14), label_dropout=0.0)
    for mode in ("none", "sga", "patchwise"):
        model = small_model(seed=1)
        head = ProjectionHead(8, 5, 1, (2, 2), rng=RngState(3), dtype=F64)
        tr = DiffusionTrainer(model, head=head, alignment_mode=mode, lr=3e-3)
        before = flow_matching_loss(model, val)[0]
        for s in range(2000):
            idx = RngState(15).split(s).permutation(64)[:8]
            diffusion_train_step(tr, make_flow_batch(data[idx], labels[idx], RngState(16).split(s)), prior[idx], s)
        assert flow_matching_loss(model, val)[0] < before, mode

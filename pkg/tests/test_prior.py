import numpy as np
import pytest

from conftest import central_difference
from lddim.autodiff import ShapeError, Tape, Tensor, backward, ops, vjp
from lddim.fields import build_dataset
from lddim.prior import (
    LatentDiffusionPrior,
    Normalization,
    TrainConfig,
    TrainingDivergedError,
    UNet,
    Vae,
    VaeShape,
    ddim_step,
    ddim_timesteps,
    diffusion_loss,
    forward_diffuse,
    forward_step,
    gaussian_kl,
    load_prior,
    load_training_data,
    make_schedule,
    reparameterize,
    sample,
    train_diffusion,
    train_vae,
    vae_loss,
)
from lddim.autodiff import checkpoint


# -- schedule ------------------------------------------------------------------

def test_schedule_endpoints_and_terminal_state():
    s = make_schedule(1000)
    assert s.beta[1] == pytest.approx(1e-4, rel=1e-12)
    assert s.beta[1000] == pytest.approx(2e-2, rel=1e-12)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1000] < 0.01


@pytest.mark.parametrize("T", [1, 2, 7, 50, 1000])
def test_schedule_invariants(T):
    s = make_schedule(T)
    assert np.all(np.diff(s.alpha_bar) < 0)
    for t in range(1, T + 1):
        assert s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t]
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))


def test_schedule_rejects_zero_steps():
    with pytest.raises(ValueError):
        make_schedule(0)


def test_ddim_timesteps_strided_and_end_at_zero():
    s = make_schedule(1000)
    ts = ddim_timesteps(s, 20)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 21
    assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ValueError):
        ddim_timesteps(s, 1001)


def test_forward_diffuse_special_cases(rng):
    s = make_schedule(100)
    z0 = rng.standard_normal((2, 3, 4, 4))
    eps = rng.standard_normal(z0.shape)
    t = 37
    assert np.array_equal(forward_diffuse(z0, t, np.zeros_like(z0), s), np.sqrt(s.alpha_bar[t]) * z0)
    assert np.array_equal(forward_diffuse(np.zeros_like(z0), t, eps, s), np.sqrt(1 - s.alpha_bar[t]) * eps)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 0, eps, s)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 101, eps, s)


def test_single_step_chain_telescopes_to_marginal_mean(rng):
    s = make_schedule(60)
    z0 = rng.standard_normal(5)
    mean = z0.copy()
    for t in range(1, 61):
        mean = forward_step(mean, t, np.zeros(5), s)
        assert np.allclose(mean, np.sqrt(s.alpha_bar[t]) * z0, rtol=1e-13, atol=0)


def test_marginal_statistics_over_draws():
    # sampling z_t in one shot vs chaining single transitions: both must give
    # mean sqrt(abar) z0 and variance 1 - abar
    s = make_schedule(200)
    g = np.random.default_rng(3)
    n, t, z0 = 10_000, 120, 0.7
    direct = forward_diffuse(np.full(n, z0), t, g.standard_normal(n), s)
    chained = np.full(n, z0)
    for k in range(1, t + 1):
        chained = forward_step(chained, k, g.standard_normal(n), s)
    mean, var = np.sqrt(s.alpha_bar[t]) * z0, 1 - s.alpha_bar[t]
    for draws in (direct, chained):
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert abs(draws.mean() - mean) < 3 * se_mean
        assert abs(draws.var(ddof=1) - var) < 3 * se_var


@pytest.mark.parametrize("t", [1, 10, 500, 1000])
def test_oracle_ddim_recovers_z0(rng, t):
    s = make_schedule(1000)
    z0 = rng.standard_normal((1, 2, 4, 4))
    eps = rng.standard_normal(z0.shape)
    zt = forward_diffuse(z0, t, eps, s)
    assert np.max(np.abs(ddim_step(zt, t, 0, eps, s) - z0)) < 1e-12


def test_oracle_ddim_strided_path_stays_on_trajectory(rng):
    s = make_schedule(1000)
    z0 = rng.standard_normal(8)
    eps = rng.standard_normal(8)
    ts = ddim_timesteps(s, 10)
    z = forward_diffuse(z0, ts[0], eps, s)
    for t, tp in zip(ts[:-1], ts[1:]):
        z = ddim_step(z, t, tp, eps, s)
        if tp > 0:
            assert np.allclose(z, forward_diffuse(z0, tp, eps, s), atol=1e-12)
    assert np.max(np.abs(z - z0)) < 1e-12


def test_ddim_step_rejects_bad_pairs(rng):
    s = make_schedule(10)
    z = rng.standard_normal(3)
    with pytest.raises(ValueError):
        ddim_step(z, 4, 4, z, s)
    with pytest.raises(ValueError):
        ddim_step(z, 11, 3, z, s)


def test_ddim_array_and_tape_paths_agree_bitwise(rng):
    s = make_schedule(100)
    z, e = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    a = ddim_step(z, 80, 40, e, s)
    zt = Tensor(z, requires_grad=True)
    with Tape():
        b = ddim_step(zt, 80, 40, Tensor(e), s)
    assert a.tobytes() == b.data.tobytes()


# -- diffusion loss --------------------------------------------------------------

def test_diffusion_loss_oracle_and_zero_denoisers(rng):
    s = make_schedule(1000)
    z0 = rng.standard_normal((4, 2, 4, 4))

    def oracle(z_t, t):
        a = s.alpha_bar[t][:, None, None, None]
        return Tensor((z_t.data - np.sqrt(a) * z0) / np.sqrt(1 - a))

    assert diffusion_loss(oracle, z0, s, np.random.default_rng(0)).item() < 1e-18

    def zero(z_t, t):
        return Tensor(np.zeros_like(z_t.data))

    big = np.zeros((4000, 2, 4, 4))
    value = diffusion_loss(zero, big, s, np.random.default_rng(1)).item()
    d = 2 * 4 * 4
    # mean of chi-square(d) over 4000 samples: standard error sqrt(2d / 4000)
    assert abs(value - d) < 4 * np.sqrt(2 * d / 4000)
    assert value >= 0


def test_diffusion_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        diffusion_loss(lambda z, t: z, np.zeros((0, 1, 2, 2)), make_schedule(5), np.random.default_rng(0))


# -- VAE -------------------------------------------------------------------------

@pytest.mark.parametrize("res,latent", [((32, 32), (4, 4, 4)), ((100, 100), (4, 12, 12)), ((24, 16), (4, 3, 2))])
def test_vae_latent_geometry(res, latent):
    vae = Vae(VaeShape(res), np.random.default_rng(0))
    assert vae.shape.latent_shape == latent
    y = vae.decode(Tensor(np.zeros((1,) + latent)))
    assert y.shape == (1, 1) + res


def test_untrained_encoder_is_standard_normal(rng):
    vae = Vae(VaeShape((32, 32)), rng)
    mu, sigma = vae.encode(Tensor(rng.standard_normal((3, 1, 32, 32))))
    assert np.all(mu.data == 0.0) and np.all(sigma.data == 1.0)


def test_sigma_positive_after_perturbation(rng):
    vae = Vae(VaeShape((16, 16), channels=(8, 8)), rng)
    vae.encoder.logvar_head.weight.data = rng.standard_normal(vae.encoder.logvar_head.weight.shape) * 5
    _, sigma = vae.encode(Tensor(rng.standard_normal((2, 1, 16, 16)) * 10))
    assert np.all(sigma.data > 0)


def test_encode_decode_reject_wrong_shapes(rng):
    vae = Vae(VaeShape((16, 16), channels=(8, 8)), rng)
    with pytest.raises(ShapeError):
        vae.encode(Tensor(np.zeros((1, 1, 15, 16))))
    with pytest.raises(ShapeError):
        vae.decode(Tensor(np.zeros((1, 4, 3, 4))))


def test_reparameterize_cases(rng):
    mu = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    sigma = Tensor(rng.uniform(0.5, 2, (2, 3)), requires_grad=True)
    assert np.array_equal(reparameterize(mu, sigma, np.zeros((2, 3))).data, mu.data)
    assert np.array_equal(reparameterize(mu, Tensor(np.zeros((2, 3))), rng.standard_normal((2, 3))).data, mu.data)
    eps = rng.standard_normal((2, 3))
    with Tape() as tape:
        z = reparameterize(mu, sigma, eps)
        total = ops.sum(z)
    grads = backward(tape, total)
    assert np.array_equal(grads[sigma], eps)
    assert np.array_equal(grads[mu], np.ones((2, 3)))
    with pytest.raises(ShapeError):
        reparameterize(mu, sigma, np.zeros(3))


def test_vae_loss_closed_forms(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 4)))
    zero = Tensor(np.zeros((1, 2, 2, 2)))
    one = Tensor(np.ones((1, 2, 2, 2)))
    assert vae_loss(x, x, zero, one, 1e-4).item() == 0.0
    assert gaussian_kl(Tensor([1.0]), Tensor([1.0])).item() == pytest.approx(0.5, rel=1e-15)
    mu, s = rng.standard_normal(5), rng.uniform(0.2, 3, 5)
    expected = 0.5 * np.sum(mu ** 2 + s ** 2 - 1 - np.log(s ** 2))
    assert gaussian_kl(Tensor(mu), Tensor(s)).item() == pytest.approx(expected, rel=1e-12)
    x_hat = Tensor(rng.standard_normal((1, 1, 4, 4)))
    loss = vae_loss(x, x_hat, Tensor(mu.reshape(1, 5, 1, 1)), Tensor(s.reshape(1, 5, 1, 1)), 0.3).item()
    assert loss == pytest.approx(np.abs(x.data - x_hat.data).sum() + 0.3 * expected, rel=1e-12)
    assert loss >= 0


def test_decode_deterministic_and_differentiable(rng):
    vae = Vae(VaeShape((8, 8), latent_channels=2, channels=(6,)), rng)
    # break the symmetric zero init of the heads so the check is not trivial
    z = rng.standard_normal((1, 2, 4, 4))
    a = vae.decode(Tensor(z)).data
    b = vae.decode(Tensor(z)).data
    assert a.tobytes() == b.tobytes()
    w = rng.standard_normal(a.shape)
    zt = Tensor(z, requires_grad=True)
    with Tape() as tape:
        out = ops.sum(ops.mul(vae.decode(zt), Tensor(w)))
    g = backward(tape, out)[zt]
    fd = central_difference(lambda v: float(np.sum(vae.decode(Tensor(v)).data * w)), z, step=1e-6)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


# -- end-to-end chain --------------------------------------------------------------

def tiny_prior(seed=0, steps_T=50) -> LatentDiffusionPrior:
    rng = np.random.default_rng(seed)
    vae = Vae(VaeShape((8, 8), latent_channels=2, channels=(8,)), rng)
    unet = UNet((2, 4, 4), rng, base=8, t_dim=8)
    # the output layer starts at zero; give it weights so the chain is non-trivial
    unet.out.weight.data = 0.1 * rng.standard_normal(unet.out.weight.shape)
    prior = LatentDiffusionPrior(vae, unet, make_schedule(steps_T), Normalization(-2.0, 2.0), 1.3)
    prior.freeze()
    return prior


def test_sampling_bitwise_deterministic():
    prior = tiny_prior()
    zT = np.random.default_rng(5).standard_normal((2, 2, 4, 4))
    a = sample(zT, prior, 5)
    b = sample(zT, prior, 5)
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))
    assert a[0].values.shape == (8, 8)


def test_chain_gradient_matches_fd():
    prior = tiny_prior()
    rng = np.random.default_rng(11)
    zT = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 1, 8, 8))

    def f(z):
        return float(np.sum(prior.generate(Tensor(z), 5).data * w))

    zt = Tensor(zT, requires_grad=True)
    with Tape() as tape:
        y = prior.generate(zt, 5)
    g = vjp(tape, y, w)[zt]
    fd = central_difference(f, zT, step=1e-6)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


# -- training ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_dataset("bimaterial", root, 40, (32, 4, 4), master_seed=2, nx=16, ny=16)
    return root


def _cfg(**kw):
    base = dict(lr=2e-3, epochs=5, batch=8, latent_channels=2, vae_channels=(8, 8), unet_base=8, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_vae_training_loss_decreases_and_logs(small_dataset, tmp_path):
    data = load_training_data(small_dataset)
    train_vae(data, _cfg(lr=5e-3, batch=4), tmp_path)
    rows = (tmp_path / "vae_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss" and len(rows) == 6
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_vae_resume_is_bitwise(small_dataset, tmp_path):
    data = load_training_data(small_dataset)
    straight = train_vae(data, _cfg(epochs=3), tmp_path / "a")
    train_vae(data, _cfg(epochs=2), tmp_path / "b")
    resumed = train_vae(data, _cfg(epochs=3), tmp_path / "b", resume=True)
    assert straight.parameters().checksum() == resumed.parameters().checksum()
    assert (tmp_path / "a" / "vae.ldad").read_bytes() == (tmp_path / "b" / "vae.ldad").read_bytes()
    assert (tmp_path / "a" / "vae_log.csv").read_bytes() == (tmp_path / "b" / "vae_log.csv").read_bytes()


def test_diffusion_training_freezes_vae_and_resumes(small_dataset, tmp_path):
    data = load_training_data(small_dataset)
    vae = train_vae(data, _cfg(epochs=2), tmp_path)
    before = vae.parameters().checksum()
    unet, scale = train_diffusion(data, vae, _cfg(epochs=2), tmp_path / "a")
    assert vae.parameters().checksum() == before
    assert all(t.grad is None for _, t in vae.parameters().items())
    assert scale > 0
    train_diffusion(data, vae, _cfg(epochs=1), tmp_path / "b")
    resumed, _ = train_diffusion(data, vae, _cfg(epochs=2), tmp_path / "b", resume=True)
    assert unet.parameters().checksum() == resumed.parameters().checksum()

    prior = load_prior(tmp_path / "vae.ldad", tmp_path / "a" / "diffusion.ldad")
    assert prior.latent_scale == scale
    assert prior.unet.parameters().checksum() == unet.parameters().checksum()
    fields = sample(np.random.default_rng(0).standard_normal((2,) + prior.latent_shape), prior, 4)
    assert all(np.all(f.values > 0) for f in fields)


def test_nan_aborts_with_rollback(small_dataset, tmp_path):
    data = load_training_data(small_dataset)
    train_vae(data, _cfg(epochs=1), tmp_path)
    good = (tmp_path / "vae.ldad").read_bytes()
    bad = type(data)(data.train.copy(), data.val, data.norm, data.spacing)
    bad.train[3, 0, 2, 2] = np.nan
    with pytest.raises(TrainingDivergedError, match="vae.ldad"):
        train_vae(bad, _cfg(epochs=3), tmp_path, resume=True)
    assert (tmp_path / "vae.ldad").read_bytes() == good
    assert checkpoint.load(tmp_path / "vae.ldad")["meta.epoch"][0] == 1.0


def test_missing_dataset_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_training_data(tmp_path / "nowhere")

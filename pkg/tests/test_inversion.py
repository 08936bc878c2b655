import numpy as np
import pytest

from conftest import central_difference
from lddim.adjoint import StaleStateError, forward_solve
from lddim.grid import ScalarField2D, read_field
from lddim.inversion import (
    OBSERVATION_GRIDS,
    InversionConfig,
    InversionProblem,
    ObservationSet,
    data_misfit,
    experiment_sweep,
    grid_positions,
    invert,
    latent_regularizer,
    pixel_space_invert,
    run_inversion,
    sweep_plan,
    synthetic_observations,
    uniform_layout,
    vae_prior_invert,
    write_result,
    write_sweep,
)
from lddim.metrics import relative_l2
from lddim.prior import LatentDiffusionPrior, Normalization, UNet, Vae, VaeShape, make_schedule, sample


def tiny_prior(seed=0) -> LatentDiffusionPrior:
    rng = np.random.default_rng(seed)
    vae = Vae(VaeShape((8, 8), latent_channels=2, channels=(8,)), rng)
    unet = UNet((2, 4, 4), rng, base=8, t_dim=8)
    unet.out.weight.data = 0.1 * rng.standard_normal(unet.out.weight.shape)
    prior = LatentDiffusionPrior(vae, unet, make_schedule(50), Normalization(-2.0, 2.0), 1.3)
    prior.freeze()
    return prior


@pytest.fixture(scope="module")
def prior():
    return tiny_prior()


def _truth(prior, seed=3, steps=5):
    zt = np.random.default_rng(seed).standard_normal((1,) + prior.latent_shape)
    K = sample(zt, prior, steps)[0]
    return K, forward_solve(K).h


# -- observations and objective terms ------------------------------------------------

def test_observation_grids_match_study_layouts():
    assert OBSERVATION_GRIDS == (3, 5, 12, 16)
    for n in OBSERVATION_GRIDS:
        cells = uniform_layout(32, 32, n)
        assert len(cells) == n * n and len({tuple(c) for c in cells}) == n * n
    assert list(grid_positions(32, 3)) == [5, 16, 26]


def test_observation_set_validation(tmp_path):
    with pytest.raises(ValueError):
        ObservationSet([[0, 0], [0, 0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        ObservationSet([[0, 0]], [np.nan])
    obs = ObservationSet([[0, 0], [2, 7]], [0.5, 0.25], [[1, 1]], [3e-5])
    with pytest.raises(IndexError):
        obs.validate(7, 8)
    obs.validate(8, 8)
    obs.to_csv(tmp_path / "obs.csv")
    back = ObservationSet.from_csv(tmp_path / "obs.csv")
    assert np.array_equal(back.cells, obs.cells) and np.array_equal(back.heads, obs.heads)
    assert np.array_equal(back.k_cells, obs.k_cells) and np.array_equal(back.k_values, obs.k_values)


def test_data_misfit_cases(rng):
    h = ScalarField2D(6, 5, 1, 1, rng.uniform(0, 1, (5, 6)))
    cells = np.array([[0, 1], [3, 4], [4, 5]])
    exact = ObservationSet(cells, h.values[cells[:, 0], cells[:, 1]])
    assert data_misfit(h, exact) == 0.0
    one = ObservationSet([[2, 2]], [h.values[2, 2] + 0.1])
    assert data_misfit(h, one) == pytest.approx(0.01, rel=1e-12)
    heads = rng.uniform(0, 1, 3)
    obs = ObservationSet(cells, heads)
    brute = 0.0
    for (j, i), v in zip(cells, heads):
        brute += (v - h.values[j, i]) ** 2
    assert data_misfit(h, obs) == brute
    with pytest.raises(IndexError):
        data_misfit(h, ObservationSet([[5, 0]], [0.0]))


def test_latent_regularizer_cases():
    assert latent_regularizer(np.zeros(7)) == 0.0
    assert latent_regularizer(np.ones(10)) == 5.0


def test_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(beta=-1)
    with pytest.raises(ValueError):
        InversionConfig(max_iter=0)
    with pytest.raises(ValueError):
        InversionConfig(prior_mode="pinn")


# -- objective and gradient -------------------------------------------------------------

def test_perfect_fit_gives_zero_objective_and_gradient(prior):
    zt = np.random.default_rng(3).standard_normal((1,) + prior.latent_shape)
    K = sample(zt, prior, 5)[0]
    h = forward_solve(K).h
    obs = synthetic_observations(h, 4)
    p = InversionProblem(obs, InversionConfig(beta=0.0, ddim_steps=5), prior)
    J, state = p.objective(zt)
    assert J == 0.0
    assert np.all(p.gradient(zt, state) == 0.0)


def test_objective_matches_manual_composition(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 3)
    z = np.random.default_rng(8).standard_normal((1,) + prior.latent_shape)
    cfg = InversionConfig(beta=0.7, ddim_steps=5)
    J, state = InversionProblem(obs, cfg, prior).objective(z)
    Kz = sample(z, prior, 5)[0]
    hz = forward_solve(Kz).h
    manual = data_misfit(hz, obs) + 0.7 * 0.5 * np.sum(z * z)
    assert J == pytest.approx(manual, rel=1e-13)
    assert state.forward.system.residual(state.forward.h.values) < 1e-10
    J0, _ = InversionProblem(obs, cfg, prior).objective(np.zeros_like(z))
    assert J0 == data_misfit(forward_solve(sample(np.zeros_like(z), prior, 5)[0]).h, obs)


def _fd_check(problem, z, step=1e-6):
    J, state = problem.objective(z)
    g = problem.gradient(z, state)
    fd = central_difference(lambda v: problem.objective(v)[0], z, step=step)
    return np.max(np.abs(g - fd)) / np.max(np.abs(fd))


@pytest.mark.parametrize("mode", ["latent-diffusion", "vae-only"])
def test_full_pipeline_gradient_matches_fd(prior, mode):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 4, K_true=K, k_side=2)
    cfg = InversionConfig(beta=0.3, ddim_steps=5, prior_mode=mode, k_obs_weight=0.5)
    z = np.random.default_rng(21).standard_normal((1,) + prior.latent_shape)
    assert _fd_check(InversionProblem(obs, cfg, prior), z) < 1e-4


def test_pixel_space_gradient_matches_fd(rng):
    K = ScalarField2D(8, 8, 1, 1, np.exp(rng.standard_normal((8, 8))))
    h = forward_solve(K).h
    obs = synthetic_observations(h, 4, K_true=K, k_side=2)
    cfg = InversionConfig(prior_mode="pixel-space", smoothing=0.2, k_obs_weight=0.3)
    p = InversionProblem(obs, cfg, shape=(8, 8))
    u = 0.3 * rng.standard_normal((8, 8))
    assert _fd_check(p, u) < 1e-4


def test_beta_linearity(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 3)
    z = np.random.default_rng(2).standard_normal((1,) + prior.latent_shape)
    grads = {}
    for beta in (0.0, 2.0):
        p = InversionProblem(obs, InversionConfig(beta=beta, ddim_steps=5), prior)
        grads[beta] = p.gradient(z, p.objective(z)[1])
    assert np.max(np.abs(grads[2.0] - grads[0.0] - 2 * z)) < 1e-12 * max(1.0, np.max(np.abs(grads[2.0])))


def test_stale_state_rejected(prior):
    K, h = _truth(prior)
    p = InversionProblem(synthetic_observations(h, 3), InversionConfig(ddim_steps=5), prior)
    z = np.zeros((1,) + prior.latent_shape)
    _, state = p.objective(z)
    with pytest.raises(StaleStateError):
        p.gradient(z + 1e-3, state)


# -- optimisation loop -------------------------------------------------------------------

def test_invert_is_deterministic(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 4)
    cfg = InversionConfig(max_iter=15, ddim_steps=5, seed=4, eta=5e-2)
    a, b = invert(obs, cfg, prior), invert(obs, cfg, prior)
    assert a.history == b.history
    assert a.k_hat.values.tobytes() == b.k_hat.values.tobytes()
    assert a.z_hat.tobytes() == b.z_hat.tobytes()
    assert len(a.history) == a.iterations == 15


def test_invert_reduces_misfit_and_returns_best(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 4)
    r = invert(obs, InversionConfig(max_iter=40, ddim_steps=5, seed=1, eta=5e-2), prior)
    assert r.loss[r.best_iter] == r.loss.min()
    assert r.loss.min() < 0.5 * r.loss[0]
    assert np.all(np.isfinite(r.k_hat.values)) and np.all(np.isfinite(r.h_hat.values))


def test_zero_step_keeps_loss_constant_and_stops_early(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 3)
    for opt in ("adam", "gd"):
        r = invert(obs, InversionConfig(eta=0.0, max_iter=80, ddim_steps=5, optimizer=opt), prior)
        assert np.all(r.loss == r.loss[0])
        assert r.iterations == 51  # stalled for one 50-iteration window


def test_regularizer_pulls_toward_origin_without_data(prior):
    obs = ObservationSet(np.zeros((0, 2), dtype=int), [])
    r = invert(obs, InversionConfig(beta=1.0, eta=0.1, max_iter=30, ddim_steps=5, optimizer="gd"), prior)
    norms = np.sqrt(2 * np.array([row[2] for row in r.history]))
    assert np.all(np.diff(norms) < 0)


def test_nan_objective_aborts_with_best_so_far(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 3)

    class Flaky(InversionProblem):
        calls = 0

        def objective(self, z):
            Flaky.calls += 1
            J, state = super().objective(z)
            return (float("nan"), state) if Flaky.calls > 5 else (J, state)

    r = run_inversion(Flaky(obs, InversionConfig(max_iter=20, ddim_steps=5, eta=5e-2), prior))
    assert r.aborted and "non-finite" in r.message
    assert r.iterations == 5 and np.all(np.isfinite(r.k_hat.values))


def test_vae_prior_invert_runs_without_chain(prior):
    K, h = _truth(prior)
    obs = synthetic_observations(h, 4)
    r = vae_prior_invert(obs, InversionConfig(max_iter=10, eta=5e-2), prior)
    r2 = vae_prior_invert(obs, InversionConfig(max_iter=10, eta=5e-2), prior)
    assert r.history == r2.history and r.iterations == 10


def test_pixel_space_recovers_homogeneous_field():
    K = ScalarField2D.constant(12, 12, 2.5)
    h = forward_solve(K).h
    # heads are blind to a global scale of K; a 3x3 set of conductivity data pins it
    obs = synthetic_observations(h, 12, K_true=K, k_side=3)
    cfg = InversionConfig(eta=5e-2, max_iter=300, k_obs_weight=1.0, smoothing=1e-2, init_log_k=0.0)
    r = pixel_space_invert(obs, cfg, shape=(12, 12))
    assert relative_l2(r.k_hat, K) < 0.01


def test_write_result_bundle(prior, tmp_path):
    K, h = _truth(prior)
    r = invert(synthetic_observations(h, 3), InversionConfig(max_iter=3, ddim_steps=5), prior)
    write_result(r, tmp_path / "out")
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["h_hat.ldf2", "k_hat.ldf2", "loss.csv", "metrics.csv"]
    assert read_field(tmp_path / "out" / "k_hat.ldf2").values.tobytes() == r.k_hat.values.tobytes()
    lines = (tmp_path / "out" / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,misfit,regularizer,total,grad_norm" and len(lines) == 4


# -- sweeps --------------------------------------------------------------------------

def _truths(n=3, size=8):
    r = np.random.default_rng(5)
    return [ScalarField2D(size, size, 1.0, 1.0, np.exp(r.uniform(-1.5, 1.5, (size, size)))) for _ in range(n)]


def test_sweep_plan_pairs_truths():
    plan = sweep_plan("observation-density", [0, 1, 2, 3], (3, 5), n_truths=3)
    assert len(plan) == 8
    assert [r.truth_index for r in plan[:4]] == [0, 1, 2, 0]
    assert all(r.truth_index == 0 for r in sweep_plan("seed-sensitivity", [4, 7], (3,), 3))
    with pytest.raises(ValueError):
        sweep_plan("grid", [0], (3,), 1)


def test_sweep_rows_and_summary(prior, tmp_path):
    cfg = InversionConfig(max_iter=3, ddim_steps=2)
    rows, summary = experiment_sweep("observation-density", _truths(), prior, cfg, seeds=[0, 1, 2], layouts=(2, 4))
    assert len(rows) == 6
    assert all(r["status"] == "ok" for r in rows)
    eps_h = [r["eps_h"] for r in rows if r["layout"] == "2x2"]
    med = next(s for s in summary if s["layout"] == "2x2" and s["metric"] == "eps_h")
    assert med["median"] == pytest.approx(np.median(eps_h), rel=1e-15)
    assert med["n"] == 3 and med["q1"] <= med["median"] <= med["q3"]
    write_sweep(rows, summary, tmp_path)
    lines = (tmp_path / "runs.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 1 + 2 * 4


def test_sweep_records_failures_without_stopping(prior):
    truths = _truths(2) + [ScalarField2D.constant(5, 5, 1.0)]   # wrong grid for the prior
    rows, summary = experiment_sweep("observation-density", truths, prior, InversionConfig(max_iter=2, ddim_steps=2),
                                     seeds=[0, 1, 2], layouts=(2,))
    status = [r["status"] for r in rows]
    assert status[:2] == ["ok", "ok"] and status[2].startswith("failed")
    assert next(s for s in summary if s["metric"] == "eps_h")["n"] == 2


def test_sweep_workers_match_serial(prior):
    cfg = InversionConfig(max_iter=2, ddim_steps=2)
    serial, _ = experiment_sweep("seed-sensitivity", _truths(1), prior, cfg, seeds=[0, 1], layouts=(2,))
    pooled, _ = experiment_sweep("seed-sensitivity", _truths(1), prior, cfg, seeds=[0, 1], layouts=(2,), workers=2)
    assert serial == pooled

"""Whole-package acceptance checks, one test per shipped guarantee.

Run with ``pytest -v`` to get a single pass/fail line per item.  The
transfer-study items (a06-a08) share one module-scoped grid of ablation
runs built from the small preset: two excitation cases at three master
seeds each, exactly as the command-line pipeline would run them.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from surflow.autodiff import MlpSpec, ParamStore, Tape, backward
from surflow.cli import main as cli_main
from surflow.config import preset_desk
from surflow.dynamics import generate_pairs, newmark_solve, newmark_transient
from surflow.evaluation import coverage_rate, r_squared, relative_l2, run_ablation
from surflow.layers import CouplingLayer, FunnelLayer, PermutationLayer
from surflow.model import FlowModel, build_default_model, flow_loglik, flow_sample, log_prob
from surflow.seeding import derive_seed

from util import affine_funnel_model, finite_diff_param_grads, grad_errors, randomize_params

MASTER_SEEDS = (11, 12, 13)


# ---------------------------------------------------------------------------
# a01: analytic gradients vs central finite differences


def test_a01_gradients_match_finite_differences_on_random_configs():
    t0 = time.perf_counter()
    total_params = 0
    for i in range(20):
        rng = np.random.default_rng(3000 + i)
        width = int(rng.integers(3, 13))  # data dim <= 12
        latent = int(rng.integers(1, min(4, width - 1) + 1))  # latent dim <= 4
        cond = int(rng.integers(1, 5))
        hidden = (int(rng.integers(2, 9)),)  # conditioner width <= 8
        n_pre = int(rng.integers(1, 3))
        n_post = 0 if latent < 2 else int(rng.integers(0, 2))
        model = build_default_model(
            width, latent, cond, seed=i, hidden=hidden, n_pre=n_pre, n_post=n_post
        )
        randomize_params(model.params, rng, scale=0.3)
        y = rng.normal(size=width)
        th = rng.normal(size=cond)

        tape = Tape()
        node = flow_loglik(model, y, th, tape)
        model.params.zero_grads()
        backward(tape, np.ones(1), root=node)
        analytic = model.params.grads.copy()
        fd = finite_diff_param_grads(model.params, lambda: log_prob(model, y, th), h=1e-5)
        ok, worst_abs, worst_rel = grad_errors(analytic, fd, rtol=1e-5, atol=1e-7)
        assert ok, (
            f"config {i} (width={width} latent={latent} cond={cond}): "
            f"worst rel {worst_rel:.3e}, worst abs {worst_abs:.3e}"
        )
        total_params += model.params.n_params
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"gradient sweep took {elapsed:.1f} s"
    print(f"a01: 20 configs, {total_params} parameters checked in {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# a02: densities of funnel-free flows integrate to one


def _bijective_2d(seed, n_layers=4):
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(n_layers):
        mask = (np.arange(2) % 2) == (i % 2)
        spec = MlpSpec(f"c{i}.cond", 1 + 1, (6,), 2, final_zero_init=True)
        layers.append(CouplingLayer(name=f"c{i}", dim=2, mask=mask, conditioner=spec))
        if i == 0:
            layers.append(PermutationLayer(name="perm", dim=2, perm=rng.permutation(2)))
    store = ParamStore()
    for layer in layers:
        layer.init_params(store, rng)
    model = FlowModel(layers=layers, base_dim=2, cond_dim=1, params=store)
    randomize_params(store, rng, scale=0.5)
    return model


def test_a02_bijective_density_integrates_to_one():
    t0 = time.perf_counter()
    for i in range(5):
        model = _bijective_2d(500 + i)
        theta = np.random.default_rng(i).normal(size=1) * 0.5
        draws = flow_sample(model, theta, 4000, np.random.default_rng(40 + i))
        lo = draws.mean(axis=0) - 8 * draws.std(axis=0)
        hi = draws.mean(axis=0) + 8 * draws.std(axis=0)
        n = 301
        xs = np.linspace(lo[0], hi[0], n)
        ys = np.linspace(lo[1], hi[1], n)
        xg, yg = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([xg.ravel(), yg.ravel()])
        dens = np.zeros(len(pts))
        ths = np.broadcast_to(theta, (len(pts), 1))
        for start in range(0, len(pts), 16384):
            sl = slice(start, start + 16384)
            dens[sl] = np.exp(log_prob(model, pts[sl], ths[sl]))
        total = np.trapezoid(np.trapezoid(dens.reshape(n, n), ys, axis=1), xs)
        assert 0.99 <= total <= 1.01, f"flow {i}: mass {total:.4f}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"quadrature sweep took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# a03: funnel likelihood and sampler vs the closed-form linear-Gaussian law


def test_a03_funnel_matches_linear_gaussian_law():
    t0 = time.perf_counter()
    for i in range(5):
        rng = np.random.default_rng(700 + i)
        width = int(rng.integers(3, 7))  # <= 6
        latent = int(rng.integers(1, min(3, width - 1) + 1))  # <= 3
        cond = int(rng.integers(1, 4))
        model, law = affine_funnel_model(width=width, latent=latent, cond=cond, seed=800 + i)
        theta = rng.normal(size=cond) * 0.5
        mean, cov = law(theta)
        mvn = stats.multivariate_normal(mean=mean, cov=cov)

        ys = np.atleast_2d(mvn.rvs(size=8, random_state=rng))
        for y in ys:
            assert abs(log_prob(model, y, theta) - mvn.logpdf(y)) < 1e-8

        draws = flow_sample(model, theta, 100_000, np.random.default_rng(900 + i))
        n = draws.shape[0]
        se_mean = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * se_mean)
        emp = np.cov(draws.T)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert np.all(np.abs(emp - cov) < 6 * se_cov)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"funnel sweep took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# a04: the bijective sub-stacks invert exactly


def test_a04_bijective_round_trip():
    model = build_default_model(12, 5, 3, seed=42, hidden=(16, 16), n_pre=4, n_post=2)
    rng = np.random.default_rng(21)
    randomize_params(model.params, rng, scale=0.4)
    split = next(k for k, l in enumerate(model.layers) if isinstance(l, FunnelLayer))
    th = rng.normal(size=(1000, 3))

    def round_trip(layers, x):
        tape = Tape()
        u, tn = tape.constant(x), tape.constant(th)
        for layer in layers:
            u, _ = layer.normalize(u, tn, model.params, tape)
        back = u.value
        for layer in reversed(layers):
            back = layer.generate(back, th, model.params)
        return back

    pre = rng.normal(size=(1000, 12))
    np.testing.assert_allclose(round_trip(model.layers[:split], pre), pre, atol=1e-10)
    post = rng.normal(size=(1000, 5))
    np.testing.assert_allclose(round_trip(model.layers[split + 1 :], post), post, atol=1e-10)


# ---------------------------------------------------------------------------
# a05: time integrator accuracy


def test_a05_newmark_amplitude_and_convergence_order():
    # undamped unit-mass oscillator at f_n = 1 Hz, forced at half resonance
    k = 4 * np.pi**2
    m_mat = np.array([[1.0]])
    c_mat = np.zeros((1, 1))
    k_mat = np.array([[k]])
    omega = np.pi  # r = 0.5
    dt = 1e-3
    t = np.arange(0, 60.0 + dt / 2, dt)
    u, _, _ = newmark_transient(m_mat, c_mat, k_mat, np.sin(omega * t), dt=dt)
    basis = np.column_stack([np.sin(omega * t), np.cos(omega * t)])
    coef, *_ = np.linalg.lstsq(basis, u[:, 0], rcond=None)
    amp = float(np.hypot(*coef))
    assert amp == pytest.approx(1.0 / abs(k - omega**2), rel=0.01)

    # observed order on a dt ladder against a fine-grid reference
    zeta = 0.05
    c_mat = np.array([[2 * zeta * np.sqrt(k)]])

    def force(tv):
        return np.sin(2 * np.pi * 1.3 * tv) + 0.5 * np.sin(2 * np.pi * 3.1 * tv + 0.7)

    def run(step):
        tv = np.arange(0, 8.0 + step / 2, step)
        return newmark_solve(m_mat, c_mat, k_mat, f=force(tv), dt=step, sensor_dof=0, out_rate=20.0)

    ref = run(0.0015625)
    errors = [np.linalg.norm(run(step) - ref) for step in (0.025, 0.0125, 0.00625)]
    orders = [np.log2(errors[j] / errors[j + 1]) for j in range(2)]
    assert all(1.8 <= o <= 2.2 for o in orders), f"observed orders {orders}"


# ---------------------------------------------------------------------------
# a06-a08: the transfer study grid


@pytest.fixture(scope="module")
def transfer_grid():
    grid = {}
    for case in (1, 2):
        cfg = preset_desk(case)
        lf_ds, hf_ds = generate_pairs(
            cfg.structure,
            cfg.lf,
            cfg.hf,
            n_lf=cfg.n_lf,
            n_hf=cfg.n_hf,
            seed=derive_seed(cfg.seed, "data"),
            bandwidth_hz=cfg.bandwidth_hz,
            amplitude=cfg.amplitude,
            n_out=cfg.series_len,
            out_rate=cfg.sample_rate,
        )
        for seed in MASTER_SEEDS:
            results = run_ablation(
                lf_ds,
                hf_ds,
                cfg.scenarios,
                seed=seed,
                model_kwargs=cfg.model.builder_kwargs(),
                train_lf=cfg.train_lf,
                train_hf=cfg.train_hf,
                train_hf_only=cfg.train_hf_only,
                n_lf_val=cfg.n_lf_val,
                n_hf_test=cfg.n_hf_test,
                hf_val_fraction=cfg.hf_val_fraction,
                n_samples=cfg.eval.n_samples,
                alpha=cfg.eval.alpha,
                keep_intervals=True,
            )
            grid[(case, seed)] = {r.label: r for r in results}
    return grid


def test_a06_transfer_ordering_holds_across_seeds(transfer_grid):
    lines = []
    for case in (1, 2):
        wins = 0
        for seed in MASTER_SEEDS:
            arms = transfer_grid[(case, seed)]
            full = arms["mf-40"].median_rel_l2
            half = arms["mf-20"].median_rel_l2
            scratch = arms["hf-only-40"].median_rel_l2
            ordered = full < half < scratch
            wins += ordered
            lines.append(
                f"case {case} seed {seed}: mf-40={full:.3f} mf-20={half:.3f} "
                f"hf-only-40={scratch:.3f} {'ok' if ordered else 'inverted'}"
            )
        assert wins >= 2, f"case {case}: ordering held in {wins}/3 seeds\n" + "\n".join(lines)
    print("a06:\n" + "\n".join(lines))


def test_a07_transfer_beats_low_fidelity_model(transfer_grid):
    mf = np.concatenate([transfer_grid[(1, s)]["mf-40"].rel_l2 for s in MASTER_SEEDS])
    lf = np.concatenate([transfer_grid[(1, s)]["lf-only"].rel_l2 for s in MASTER_SEEDS])
    mf_med, lf_med = float(np.median(mf)), float(np.median(lf))
    assert mf_med < 0.5 * lf_med, f"mf median {mf_med:.3f} vs lf median {lf_med:.3f}"
    print(f"a07: mf median {mf_med:.3f} < 0.5 x lf median {lf_med:.3f}")


def test_a08_predictive_intervals_are_calibrated(transfer_grid):
    lo, hi, truth = [], [], []
    for (case, seed), arms in transfer_grid.items():
        for label, res in arms.items():
            if res.kind == "mf":
                lo.append(res.ci_lo)
                hi.append(res.ci_hi)
                truth.append(res.truth)
    cov = coverage_rate(np.concatenate(lo), np.concatenate(hi), np.concatenate(truth))
    assert 0.88 <= cov <= 0.99, f"pooled coverage {cov:.3f}"
    print(f"a08: pooled coverage {cov:.3f} over {sum(t.size for t in truth)} cells")


# ---------------------------------------------------------------------------
# a09: rerunning the pipeline reproduces every output bit for bit


_SMALL = {
    "preset": "desk_small",
    "case": 1,
    "overrides": {
        "n_lf": 30,
        "n_hf": 16,
        "n_lf_val": 4,
        "n_hf_test": 4,
        "series_len": 16,
        "model": {"latent_dim": 3, "hidden": [8, 8], "n_pre": 2, "n_post": 1},
        "train_lf": {"epochs": 3, "batch_size": 8, "lr": 1e-3, "seed": 0,
                     "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "train_hf": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "seed": 0,
                     "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "train_hf_only": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "seed": 0,
                          "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "scenarios": [
            {"label": "lf-only", "kind": "lf_only", "n_hf": 0},
            {"label": "mf-4", "kind": "mf", "n_hf": 4},
            {"label": "hf-only-4", "kind": "hf_only", "n_hf": 4},
        ],
        "eval": {"n_samples": 50, "alpha": 0.95},
        "seed": 5,
    },
}


def _drop_seconds(text: str) -> str:
    lines = text.strip().splitlines()
    cols = lines[0].split(",")
    keep = [j for j, c in enumerate(cols) if c != "seconds"]
    return "\n".join(",".join(line.split(",")[j] for j in keep) for line in lines)


def test_a09_pipeline_rerun_is_bit_identical(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_SMALL))

    def run_all(out):
        steps = (
            ["generate"],
            ["train", "--stage", "lf"],
            ["train", "--stage", "mf"],
            ["train", "--stage", "hf-only"],
            ["predict", "--theta", "0.1,-0.2,0.05"],
            ["ablate"],
            ["evaluate"],
        )
        for args in steps:
            rc = cli_main([*args, "--config", str(cfg_path), "--out", str(out)])
            assert rc == 0, f"{args} exited {rc}"

    a, b = tmp_path / "a", tmp_path / "b"
    run_all(a)
    run_all(b)

    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert csvs and csvs == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    for rel in csvs:
        ta, tb = (a / rel).read_text(), (b / rel).read_text()
        if rel.parts[0] == "reports":
            # wall-clock column is the one legitimately timing-dependent field
            ta, tb = _drop_seconds(ta), _drop_seconds(tb)
        assert ta == tb, f"{rel} differs between reruns"
    bins = sorted(p.relative_to(a) for p in a.rglob("*.bin"))
    assert bins
    for rel in bins:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs"


# ---------------------------------------------------------------------------
# a10: metric identity tables hold exactly


def test_a10_metric_identity_tables():
    truth = np.array([1.0, -2.0, 2.0])
    assert relative_l2(truth, truth) == 0.0
    assert relative_l2(2 * truth, truth) == 1.0
    assert relative_l2(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == np.sqrt(2.0)

    base = np.array([0.0, 1.0, 2.0, 3.0])
    assert r_squared(base, base) == 1.0
    assert r_squared(np.full(4, base.mean()), base) == 0.0
    delta = 0.5
    ss_tot = float(np.sum((base - base.mean()) ** 2))
    assert r_squared(base + delta, base) == 1.0 - 4 * delta**2 / ss_tot

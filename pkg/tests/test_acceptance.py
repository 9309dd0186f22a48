"""Acceptance criteria 1-8.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion with the measured values. Criteria 4-8 share
session-scoped training runs on the synthetic two-mode dataset.
"""

import itertools
import time
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from posehyp import tape
from posehyp.data import SyntheticConfig, mask_joints, preprocess, read_kv_file, synth_multimodal
from posehyp.inference import (MeanShiftConfig, best_hypothesis, fps, log_kde, mean_shift, mean_shift_mode,
                               sample_hypotheses, zero_code_pose)
from posehyp.losses import (BatchContext, DiversityConfig, KernelConfig, LossWeights, camera_loss,
                            discriminator_loss, generator_loss, gradient_penalty, loss_2d, loss_rec, loss_reg,
                            mmd_u)
from posehyp.metrics import hypothesis_std, mpjpe_p2
from posehyp.networks import NETWORKS, Model, ModelConfig, init_params
from posehyp.skeleton import bone_lengths, builtin_skeleton, kcs, procrustes_align, rotation_from_camera
from posehyp.trainer import TrainConfig, TrainingData, train

pytestmark = pytest.mark.acceptance

SK = builtin_skeleton("synth15")
POINTS = 20


# ------------------------------------------------------------------ oracles

def rq_dot_oracle(a, b, alphas, dot):
    d2 = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
    k = sum((1.0 + d2 / (2.0 * al)) ** (-al) for al in alphas)
    if dot:
        k += sum(ai * bi for ai, bi in zip(a, b))
    return k


def mmd_oracle(real, fake, alphas, dot):
    """Unbiased squared MMD by explicit double loops."""
    m, n = len(real), len(fake)
    kxx = sum(rq_dot_oracle(real[i], real[j], alphas, dot) for i in range(m) for j in range(m) if i != j)
    kyy = sum(rq_dot_oracle(fake[i], fake[j], alphas, dot) for i in range(n) for j in range(n) if i != j)
    kxy = sum(rq_dot_oracle(real[i], fake[j], alphas, dot) for i in range(m) for j in range(n))
    return kxx / (m * (m - 1)) + kyy / (n * (n - 1)) - 2.0 * kxy / (m * n)


def fps_brute_force(h, k):
    """Best min-pairwise distance over all k-subsets that contain the fixed start."""
    start = int(np.argmax(np.linalg.norm(h - h.mean(0), axis=1)))
    best = np.inf if k == 1 else -1.0
    for combo in itertools.combinations(range(len(h)), k):
        if start in combo and k > 1:
            best = max(best, min_pairwise(h, combo))
    return best


def min_pairwise(h, idx):
    if len(idx) < 2:
        return np.inf
    return min(np.linalg.norm(h[i] - h[j]) for i, j in itertools.combinations(idx, 2))


def grid_kde_argmax(pts, w):
    """Global KDE maximum by a coarse grid and a fine grid around the coarse winner."""
    d = pts.shape[1]
    lo, hi = pts.min(0) - w, pts.max(0) + w
    coarse_step = w / 4.0 if d == 1 else w / 2.0
    axes = [np.arange(lo[i], hi[i] + coarse_step, coarse_step) for i in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    best = grid[np.argmax(log_kde(grid, pts, w))]
    fine = np.linspace(-coarse_step, coarse_step, 401 if d == 1 else 41)
    grid = best + np.stack(np.meshgrid(*([fine] * d), indexing="ij"), -1).reshape(-1, d)
    return grid[np.argmax(log_kde(grid, pts, w))]


# ---------------------------------------------------- criterion 1: gradients

def _tiny_model(seed):
    cfg = ModelConfig(joint_count=SK.joint_count, latent_dim=4, feature_dim=5, hidden_width=12,
                      residual_blocks=1, pose_scale=100.0, output_gain=1.0)
    return Model(cfg, SK, init_params(cfg, seed))


def _param_error(model, name, loss_of, rng, n_coords=2):
    p = model.params

    def f(t):
        q = dict(p)
        q[name] = t
        return loss_of(model.with_params(q))

    coords = rng.choice(p[name].size, size=min(n_coords, p[name].size), replace=False)
    return tape.grad_check(f, p[name], step=1e-6, coords=coords)


@pytest.mark.criterion(1)
def test_criterion_1_gradients(detail):
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = {}

    def note(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    check = lambda fn, pt: tape.grad_check(fn, pt, step=1e-6)
    for i in range(POINTS):
        # individual losses
        M, x = rng.standard_normal((2, 3)), rng.standard_normal(10)
        mask = (rng.uniform(size=5) > 0.2).astype(float)
        mask[0] = 1.0
        y = rng.standard_normal(15)
        note("loss_2d", check(lambda t: loss_2d(M, t, x, mask), y))
        note("loss_2d", check(lambda t: loss_2d(t, y, x, mask), M))
        g2, (z1, z2) = rng.standard_normal((3, 6)), rng.standard_normal((2, 3, 4))
        note("loss_reg", check(lambda t: loss_reg(t, g2, z1, z2, DiversityConfig(tau=1e3)),
                               rng.standard_normal((3, 6))))
        note("loss_rec", check(lambda t: loss_rec(z1, t), rng.standard_normal((3, 4))))
        real = rng.standard_normal((6, 3))
        kc = KernelConfig(include_dot=bool(i % 2))
        note("mmd_u", check(lambda t: mmd_u(real, t, kc), rng.standard_normal((5, 3))))
        note("camera_loss", check(camera_loss, rng.standard_normal((3, 2, 3))))
        r, f = rng.standard_normal((2, 5, 3))
        note("gradient_penalty", check(
            lambda W: gradient_penalty(lambda t: tape.leaky_relu(t @ W), r, f, 1e-3, np.random.default_rng(i)),
            rng.standard_normal((3, 2))))
        # every network, through a random linear probe of its output
        m = _tiny_model(i)
        xb, zb, yb = rng.standard_normal((3, 30)), rng.standard_normal((3, 4)), rng.standard_normal((3, 45)) * 50
        probes = {
            "generator": lambda mm, c=rng.standard_normal((3, 45)): tape.sum_(mm.generator(xb, zb) * c),
            "discriminator": lambda mm, c=rng.standard_normal((3, 5)): tape.sum_(mm.discriminator(yb) * c),
            "encoder": lambda mm, c=rng.standard_normal((3, 4)): tape.sum_(mm.encoder(yb) * c),
            "camera": lambda mm, c=rng.standard_normal((3, 2, 3)): tape.sum_(mm.camera(xb) * c),
        }
        for net in NETWORKS:
            for name in m.params.subset(net):
                note(net, _param_error(m, name, probes[net], rng, n_coords=1))
        # end to end: composite losses with respect to all parameters
        ctx = BatchContext(x=xb, mask=np.ones((3, 15)), z1=zb, z2=rng.standard_normal((3, 4)),
                           real=yb, gp_seed=i)
        names = list(m.params)
        for name in [names[j] for j in rng.choice(len(names), 4, replace=False)]:
            note("end-to-end G", _param_error(m, name, lambda mm: generator_loss(ctx, mm).total, rng))
        for name in list(m.params.subset("discriminator"))[:: max(1, i % 3)][:3]:
            note("end-to-end D", _param_error(m, name, lambda mm: discriminator_loss(ctx, mm).total, rng))
    elapsed = time.time() - t0
    unit = max(v for k, v in worst.items() if not k.startswith("end"))
    e2e = max(v for k, v in worst.items() if k.startswith("end"))
    detail(f"{POINTS} points; worst unit rel err {unit:.2e}, end-to-end {e2e:.2e}, {elapsed:.0f} s")
    assert unit < 1e-5, worst
    assert e2e < 1e-4, worst
    assert elapsed < 120


# ------------------------------------------------------ criterion 2: oracles

@pytest.mark.criterion(2)
def test_criterion_2_oracles(detail):
    t0 = time.time()
    rng = np.random.default_rng(202)
    # mmd_u against explicit summation
    mmd_err = 0.0
    for trial in range(100):
        m, n = rng.integers(2, 65, size=2) if trial % 5 == 0 else rng.integers(2, 17, size=2)
        d = int(rng.integers(1, 6))
        real = rng.standard_normal((m, d)) * rng.uniform(0.1, 3.0)
        fake = rng.standard_normal((n, d)) * rng.uniform(0.1, 3.0) + rng.standard_normal(d)
        kc = KernelConfig(include_dot=bool(trial % 2))
        mmd_err = max(mmd_err, abs(float(mmd_u(real, fake, kc).value) - mmd_oracle(real, fake, kc.alphas,
                                                                                    kc.include_dot)))
    s = np.array([[0.0], [2.0]])
    on, off = KernelConfig(alphas=(1.0,), include_dot=True), KernelConfig(alphas=(1.0,), include_dot=False)
    hand = float(mmd_u(s, s, on).value - mmd_u(s, s, off).value)
    detail(f"mmd max |err| {mmd_err:.1e}, hand case {hand:g}")
    # FPS against exhaustive search
    fps_total = fps_bad = 0
    bad_by_k = {1: 0, 2: 0, 3: 0}
    for _ in range(300):
        n = int(rng.integers(3, 11))
        h = rng.standard_normal((n, int(rng.integers(1, 4))))
        for k in (1, 2, 3):
            fps_total += 1
            got, best = min_pairwise(h, fps(h, k)), fps_brute_force(h, k)
            miss = not (got == best or abs(got - best) <= 1e-12 * best)
            fps_bad += miss
            bad_by_k[k] += miss
    detail(f"fps optimal on {fps_total - fps_bad}/{fps_total} instances "
           f"(misses by k: {bad_by_k[1]}/{bad_by_k[2]}/{bad_by_k[3]})")
    # mean-shift against a grid search of the KDE
    ms_worst = 0.0
    for trial in range(50):
        d = 1 if trial % 2 == 0 else 3
        comps = int(rng.integers(2, 5))
        weights = rng.dirichlet(np.ones(comps) * 2.0)
        counts = np.maximum((weights * 60).astype(int), 1)
        centers = rng.uniform(-6, 6, size=(comps, d))
        pts = np.concatenate([c + rng.standard_normal((k, d)) * rng.uniform(0.3, 1.0)
                              for c, k in zip(centers, counts)])
        w = 0.6
        mode = mean_shift(pts, MeanShiftConfig(bandwidth=w)).mode
        ms_worst = max(ms_worst, float(np.linalg.norm(mode - grid_kde_argmax(pts, w))) / w)
    elapsed = time.time() - t0
    detail(f"mean-shift worst distance to grid argmax {ms_worst:.3f} w; {elapsed:.0f} s")
    assert mmd_err < 1e-10 and abs(hand + 2.0) < 1e-10
    assert ms_worst <= 0.2
    assert fps_bad == 0, f"{fps_bad} FPS instances below the brute-force optimum"
    assert elapsed < 300


# ----------------------------------------------------- criterion 3: geometry

@pytest.mark.criterion(3)
def test_criterion_3_geometry(detail):
    t0 = time.time()
    rng = np.random.default_rng(303)
    proc = 0.0
    for i in range(100):
        src = rng.standard_normal((16, 3)) * 300.0
        s0, R0, t0_ = rng.uniform(0.1, 10.0), Rotation.random(random_state=i).as_matrix(), rng.standard_normal(3) * 1e3
        tgt = s0 * src @ R0.T + t0_
        T = procrustes_align(src, tgt)
        proc = max(proc, abs(T.scale - s0) / s0, np.abs(T.rotation - R0).max(),
                   np.abs(T.translation - t0_).max() / max(1.0, np.abs(t0_).max()))
    kcs_err = 0.0
    for i in range(100):
        y = rng.standard_normal(45) * rng.uniform(0.1, 3.0)
        R = Rotation.random(random_state=1000 + i).as_matrix()
        K1, K2 = kcs(y, SK), kcs((y.reshape(-1, 3) @ R.T).reshape(-1), SK)
        kcs_err = max(kcs_err, np.abs(K1 - K2).max() / max(1.0, np.abs(K1).max()))
    cam_max = 0.0
    for i in range(200):
        # rows exactly orthogonal, of equal norm: any scale, any two axes, any signs
        M = np.zeros((2, 3))
        a, b = rng.permutation(3)[:2]
        s = rng.uniform(0.01, 100.0) * 10.0 ** rng.integers(-3, 4)
        M[0, a], M[1, b] = s * rng.choice([-1.0, 1.0]), s * rng.choice([-1.0, 1.0])
        cam_max = max(cam_max, float(camera_loss(M).value))
    cam_rot = max(float(camera_loss(rng.uniform(0.1, 10) * Rotation.random(random_state=i).as_matrix()[:2]).value)
                  for i in range(100))
    rot_err = 0.0
    for _ in range(1000):
        R = rotation_from_camera(rng.standard_normal((2, 3)) * rng.uniform(0.01, 100))
        rot_err = max(rot_err, np.abs(R @ R.T - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    elapsed = time.time() - t0
    detail(f"procrustes {proc:.1e}, kcs {kcs_err:.1e}, camera_loss {cam_max:g} "
           f"(rotations {cam_rot:.1e}), rotation {rot_err:.1e}; {elapsed:.1f} s")
    assert proc < 1e-9 and kcs_err < 1e-9
    assert cam_max == 0.0
    assert rot_err < 1e-12
    assert elapsed < 60


# ------------------------------------------- criteria 4-8: synthetic training

N_SAMPLES = 100
N_BH = 10
COVERAGE_RADIUS = 0.15


def synthetic_config() -> TrainConfig:
    with resources.as_file(resources.files("posehyp") / "configs" / "synthetic.cfg") as path:
        return TrainConfig.from_flat(read_kv_file(path))


class Runs:
    """Training runs keyed by name, trained on first use and kept for the session."""

    VARIANTS = {
        "full": {},
        "ablation": {"reg": 0.0, "rec": 0.0},
        "reg0": {"reg": 0.0},
        "reg15": {"reg": 15.0},
        "masked": {"policy": "random-1"},
    }

    def __init__(self, root):
        self.root = root
        self.ds = synth_multimodal(SyntheticConfig(seed=0))
        self.sk = self.ds.skeleton
        self.data = TrainingData.from_records(preprocess(self.ds.train, self.sk), self.sk)
        self.test = preprocess(self.ds.test, self.sk)
        self.base = synthetic_config()
        self.results, self.seconds = {}, {}

    def config(self, name):
        v = self.VARIANTS[name]
        w = replace(self.base.weights, **{k: v[k] for k in ("reg", "rec") if k in v})
        return replace(self.base, weights=w, missing_joint_policy=v.get("policy", "none"))

    def get(self, name, repeat=False):
        key = name + ("-repeat" if repeat else "")
        if key not in self.results:
            t0 = time.time()
            self.results[key] = train(self.data, self.config(name), out_dir=self.root / key)
            self.seconds[key] = time.time() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def reprojection_ratio(model, test, sk, masked=False):
    """Mean visible-joint reprojection error of sampled hypotheses over the mean 2D pose scale."""
    errs, scales = [], []
    c = sk.joint_count
    for i, r in enumerate(test):
        x_full = r.pose2d.reshape(c, 2)
        scales.append(np.mean(np.linalg.norm(x_full - x_full[sk.root], axis=1)))
        rec = mask_joints(r, sk, "random-1", seed=i) if masked else r
        vis = rec.weights(c) > 0
        H = sample_hypotheses(rec.pose2d, N_SAMPLES, model, i)
        M = tape.value_of(model.camera(rec.pose2d[None]))[0]
        proj = H.poses.reshape(-1, c, 3) @ M.T
        errs.append(np.mean(np.linalg.norm(proj - x_full, axis=-1)[:, vis]))
    return float(np.mean(errs) / np.mean(scales))


def std_over_test(model, test, n=N_BH):
    return float(np.mean([hypothesis_std(sample_hypotheses(r.pose2d, n, model, i).poses)
                          for i, r in enumerate(test)]))


def mode_coverage(model, runs_):
    hits = []
    for i, r in enumerate(runs_.test):
        H = sample_hypotheses(r.pose2d, N_SAMPLES, model, i).poses
        a, b = runs_.ds.modes[r.id]
        bl = float(np.mean(bone_lengths(a, runs_.sk)))
        ea = min(mpjpe_p2(h, a) for h in H) / bl
        eb = min(mpjpe_p2(h, b) for h in H) / bl
        hits.append(ea <= COVERAGE_RADIUS and eb <= COVERAGE_RADIUS)
    return float(np.mean(hits))


def selection_errors(model, test):
    """Mean MPJPE-P2 of the best of N_BH samples, the zero code and the mean-shift mode of N_SAMPLES."""
    bh, zc, ms = [], [], []
    for i, r in enumerate(test):
        H = sample_hypotheses(r.pose2d, N_SAMPLES, model, i)
        bh.append(best_hypothesis(H.poses[:N_BH], r.pose3d)[1])
        zc.append(mpjpe_p2(zero_code_pose(r.pose2d, model), r.pose3d))
        ms.append(mpjpe_p2(mean_shift_mode(H), r.pose3d))
    return float(np.mean(bh)), float(np.mean(zc)), float(np.mean(ms))


@pytest.mark.criterion(4)
def test_criterion_4_bimodal_reproduction(runs, detail):
    full = runs.get("full").model
    rep = reprojection_ratio(full, runs.test, runs.sk)
    cov = mode_coverage(full, runs)
    std_full = std_over_test(full, runs.test)
    std_abl = std_over_test(runs.get("ablation").model, runs.test)
    bh, zc, _ = selection_errors(full, runs.test)
    minutes = runs.seconds["full"] / 60.0
    detail(f"(a) reprojection {rep:.4f} of pose scale; (b) coverage {cov:.2f}; "
           f"(c) STD full {std_full:.2f} ablation {std_abl:.2f}; (d) BH {bh:.1f} ZC {zc:.1f} mm; "
           f"training {minutes:.1f} min")
    checks = {"a": rep < 0.05, "b": cov >= 0.9, "c": std_abl <= std_full / 5.0,
              "d": bh <= zc <= 1.5 * bh, "time": minutes <= 30.0}
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


@pytest.mark.criterion(5)
def test_criterion_5_zero_code_matches_mean_shift(runs, detail):
    full = runs.get("full").model
    t0 = time.time()
    _, zc, ms = selection_errors(full, runs.test)
    elapsed = time.time() - t0
    gap = abs(zc - ms) / ms
    detail(f"ZC {zc:.1f} MS {ms:.1f} mm, gap {100 * gap:.1f}% of MS; {elapsed:.0f} s")
    assert gap <= 0.25 and elapsed < 300


@pytest.mark.criterion(6)
def test_criterion_6_reg_weight_monotone(runs, detail):
    stds = [std_over_test(runs.get(n).model, runs.test) for n in ("reg0", "full", "reg15")]
    detail("STD at reg weight 0 / 7.5 / 15: " + " / ".join(f"{s:.2f}" for s in stds))
    assert stds[0] < stds[1] < stds[2]


@pytest.mark.criterion(7)
def test_criterion_7_missing_joints(runs, detail):
    clean = reprojection_ratio(runs.get("full").model, runs.test, runs.sk)
    masked = reprojection_ratio(runs.get("masked").model, runs.test, runs.sk, masked=True)
    detail(f"reprojection {clean:.4f} unmasked, {masked:.4f} with random-1, ratio {masked / clean:.2f}")
    assert masked <= 2.0 * clean


@pytest.mark.criterion(8)
def test_criterion_8_determinism(runs, detail):
    same, total = 0, 0
    for name in Runs.VARIANTS:
        runs.get(name)
        runs.get(name, repeat=True)
        a, b = runs.root / name, runs.root / f"{name}-repeat"
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        for f in files:
            total += 1
            same += (a / f).read_bytes() == (b / f).read_bytes()
    detail(f"{same}/{total} files bitwise identical across {len(Runs.VARIANTS)} repeated runs")
    assert same == total

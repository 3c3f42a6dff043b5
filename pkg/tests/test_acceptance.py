"""Acceptance suite: one criterion per test, one printed PASS/FAIL line each.

Run with  `pytest tests/test_acceptance.py -v -s`  to see the lines live.
Every tolerance is pinned here; nothing is deferred to calibration.
"""

import os
import time

import numpy as np
import pytest

from conftest import central_diff_grad, max_rel_err
from qsmkit import cli, fileio
from qsmkit.dipole import (
    NoiseConfig,
    PhantomSpec,
    Volume,
    analytic_sphere_field,
    extract_patches,
    forward_field,
    generate_phantom,
    make_dipole_kernel,
    tkd_invert,
)
from qsmkit.ir2unet import NetworkConfig, build_network, count_flops, ir2_forward
from qsmkit.metrics import RoiLabelMap, hfen, log_kernel, nrmse, roi_regression, ssim
from qsmkit.tensor import (
    Tensor,
    backward,
    batchnorm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dropout,
    maxpool3d,
    mse,
    no_grad,
    relu,
    sigmoid,
    sum_all,
    zero_grad,
)
from qsmkit.training import (
    TrainConfig,
    compute_loss,
    init_weights,
    loss_weights,
    lr_schedule,
    train_loop,
)


def report(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def test_01_dipole_kernel_correctness():
    t0 = time.perf_counter()
    k = make_dipole_kernel((64, 64, 64))
    c = k.coefficients
    ok = bool(
        c.min() >= -2.0 / 3.0 - 1e-15
        and c.max() <= 1.0 / 3.0 + 1e-15
        and np.allclose(c[0, 0, 1:], -2.0 / 3.0, atol=1e-14)
        and np.allclose(np.delete(c[:, :, 0].ravel(), 0), 1.0 / 3.0, atol=1e-14)
        and c[0, 0, 0] == 0.0
    )
    cone = [(4, 4, 4), (8, 8, 8), (2, 14, 10), (14, 2, 10), (62, 14, 10), (4, 60, 4), (16, 16, 16)]
    cone_max = max(abs(c[idx]) for idx in cone)
    elapsed = time.perf_counter() - t0
    ok = ok and cone_max < 1e-12 and elapsed < 1.0
    report("1 dipole-kernel correctness", ok, f"cone max {cone_max:.1e}, {elapsed:.2f}s")


def test_02_forward_model_sphere_oracle():
    t0 = time.perf_counter()
    n, r = 64, 8.0
    center = n // 2
    ax = np.arange(n, dtype=np.float64)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    dist = np.sqrt((gx - center) ** 2 + (gy - center) ** 2 + (gz - center) ** 2)
    chi = Volume((dist <= r).astype(np.float64))
    sim = forward_field(chi, make_dipole_kernel(chi.dims)).values
    ana = analytic_sphere_field((center,) * 3, r, 1.0, chi.dims).values
    region = dist > 2 * r
    # error normalized by the analytic field's external peak; pointwise
    # division is undefined on the zero cone of the angular factor
    rel = float((np.abs(sim - ana)[region]).max() / np.abs(ana).max())
    elapsed = time.perf_counter() - t0
    report("2 forward-model sphere oracle", rel < 0.05 and elapsed < 5.0,
           f"max rel {rel:.4f}, {elapsed:.2f}s")


def test_03_self_adjointness():
    rng = np.random.default_rng(3)
    k = make_dipole_kernel((16, 16, 16))
    worst = 0.0
    for _ in range(20):
        x = Volume(rng.normal(size=(16, 16, 16)))
        y = Volume(rng.normal(size=(16, 16, 16)))
        ax = forward_field(x, k).values
        ay = forward_field(y, k).values
        num = abs(float((ax * y.values).sum()) - float((x.values * ay).sum()))
        worst = max(worst, num / (np.linalg.norm(ax) * np.linalg.norm(y.values)))
    report("3 self-adjointness", worst < 1e-6, f"max {worst:.2e}")


def test_04_tkd_spectral_identity():
    rng = np.random.default_rng(4)
    k = make_dipole_kernel((32, 32, 32))
    spec = np.fft.fftn(rng.normal(size=(32, 32, 32)))
    spec[np.abs(k.coefficients) < 0.3] = 0.0
    chi = Volume(np.fft.ifftn(spec).real)
    rec = tkd_invert(forward_field(chi, k), k, 0.2)
    err = np.linalg.norm(rec.values - chi.values) / np.linalg.norm(chi.values)
    report("4 TKD spectral identity", err < 1e-5, f"rel err {err:.2e}")


def _fd_op_checks():
    """Per-operation finite-difference checks in float64, h=1e-5."""
    rng = np.random.default_rng(5)
    worst = 0.0

    def check(build, leaves):
        nonlocal worst
        loss = build()
        backward(loss)
        for leaf in leaves:
            ana = leaf.grad.copy()
            num = central_diff_grad(lambda: build().item(), leaf.data)
            worst = max(worst, max_rel_err(ana, num))
        zero_grad_leaves(leaves)

    def zero_grad_leaves(leaves):
        for leaf in leaves:
            leaf.grad = None

    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    t = Tensor(rng.normal(size=(1, 3, 4, 4, 4)))
    check(lambda: mse(conv3d(x, w, b), t), [x, w, b])

    w1 = Tensor(rng.normal(size=(1, 2, 1, 1, 1)), requires_grad=True)
    b1 = Tensor(rng.normal(size=1), requires_grad=True)
    t1 = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
    check(lambda: mse(conv3d(x, w1, b1, padding=0), t1), [x, w1, b1])

    xt = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    wt = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), requires_grad=True)
    bt = Tensor(rng.normal(size=2), requires_grad=True)
    tt = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    check(lambda: mse(conv_transpose3d(xt, wt, bt), tt), [xt, wt, bt])

    xp = Tensor(rng.permutation(64).astype(np.float64).reshape(1, 1, 4, 4, 4) * 0.1,
                requires_grad=True)
    tp = Tensor(rng.normal(size=(1, 1, 2, 2, 2)))
    check(lambda: mse(maxpool3d(xp), tp), [xp])

    xb = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
    gm = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    bt2 = Tensor(rng.normal(size=2), requires_grad=True)
    tb = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    check(lambda: mse(batchnorm3d(xb, gm, bt2, np.zeros(2), np.ones(2), "train"), tb),
          [xb, gm, bt2])
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    check(lambda: mse(batchnorm3d(xb, gm, bt2, rm, rv, "eval"), tb), [xb, gm, bt2])

    xr = Tensor(rng.normal(size=(3, 4)) + 0.2, requires_grad=True)
    tr = Tensor(rng.normal(size=(3, 4)))
    check(lambda: mse(relu(xr), tr), [xr])
    check(lambda: mse(sigmoid(xr), tr), [xr])
    check(lambda: mse(dropout(xr, 0.3, "train", np.random.default_rng(9)), tr), [xr])

    ca = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
    cb = Tensor(rng.normal(size=(1, 1, 2, 2, 2)), requires_grad=True)
    tc = Tensor(rng.normal(size=(1, 3, 2, 2, 2)))
    check(lambda: mse(concat_channels(ca, cb), tc), [ca, cb])

    ea = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    eb = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    check(lambda: sum_all(ea * eb + (1.0 - ea) * 0.5), [ea, eb])
    check(lambda: mse(ea, eb), [ea, eb])
    return worst


def _fd_network_check():
    """Sampled-coordinate finite differences through the full tiny network."""
    rng = np.random.default_rng(6)
    net = build_network(NetworkConfig(T=2, base_channels=2, dropout_rate=0.0, dtype="float64"),
                        np.random.default_rng(0))
    # O(0.1) weights keep forward responses well above float noise so the
    # finite-difference oracle is meaningful for deep parameters
    wrng = np.random.default_rng(1)
    for name, p in net.params.items():
        if name.endswith("/weight") or name.endswith("/bias"):
            p.data = wrng.normal(0.0, 0.3, p.data.shape)
    x = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
    target = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))

    def forward_loss():
        chi, latents = ir2_forward(x, net, mode="train")
        return compute_loss(latents, chi, target, 0.5)

    loss = forward_loss()
    backward(loss)
    grads = {n: p.tensor.grad.copy() for n, p in net.params.items()}
    zero_grad(net.parameters())
    h = 1e-5
    coord_rng = np.random.default_rng(42)
    worst = 0.0
    with no_grad():
        for name, p in net.params.items():
            flat = p.data.ravel()
            for i in coord_rng.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = forward_loss().item()
                flat[i] = orig - h
                fm = forward_loss().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = grads[name].ravel()[i]
                worst = max(worst, max_rel_err(np.array([ana]), np.array([num])))
    return worst


def test_05_autodiff_suite():
    t0 = time.perf_counter()
    op_worst = _fd_op_checks()
    net_worst = _fd_network_check()
    elapsed = time.perf_counter() - t0
    ok = op_worst < 1e-4 and net_worst < 1e-3 and elapsed < 120.0
    report("5 autodiff finite-difference suite", ok,
           f"per-op {op_worst:.2e}, network {net_worst:.2e}, {elapsed:.1f}s")


def test_06_loss_weight_exactness():
    weights_ok = loss_weights(4, 0.5) == [0.125, 0.25, 0.5, 1.0]
    rng = np.random.default_rng(7)
    gt = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
    loss = compute_loss(
        [Tensor(gt.data + 2.0), Tensor(gt.data - np.sqrt(2.0))], Tensor(gt.data + 1.0), gt, 0.5
    )
    hand_ok = abs(loss.item() - 5.0) < 1e-12
    report("6 loss-weight exactness", weights_ok and hand_ok,
           f"weights {loss_weights(4, 0.5)}, hand case {loss.item():.15g}")


def test_07_schedule_exactness():
    expect = {1: 1e-3, 30: 1e-3, 31: 1e-4, 60: 1e-4, 61: 1e-5, 100: 1e-5}
    ok = all(lr_schedule(e) == r for e, r in expect.items())
    report("7 learning-rate schedule exactness", ok,
           " ".join(f"{e}->{lr_schedule(e):g}" for e in sorted(expect)))


def test_08_overfit_single_patch():
    t0 = time.perf_counter()
    spec = PhantomSpec(dims=(16, 16, 16), seed=21, n_spheres=4, n_cuboids=2, n_cylinders=1,
                       radius_range_mm=(2, 5))
    chi = generate_phantom(spec)
    field = forward_field(Volume(chi.values.astype(np.float64)), make_dipole_kernel(chi.dims))
    pair = (field.values.astype(np.float32), chi.values)
    net = build_network(NetworkConfig(T=2, base_channels=4, dropout_rate=0.0),
                        np.random.default_rng(0))
    init_weights(net, np.random.default_rng(0))
    # one unique patch; two copies at batch 1 give 2 steps/epoch = 200 Adam steps
    cfg = TrainConfig(epochs=100, batch_size=1, noise=NoiseConfig((0.0, 0.0)), seed=0,
                      lr_override=2e-3)
    _, hist = train_loop([pair, pair], net, cfg)
    first, last = hist.steps[0][3], hist.steps[-1][3]
    elapsed = time.perf_counter() - t0
    ok = len(hist.steps) == 200 and last < 0.1 * first and elapsed < 300.0
    report("8 single-patch overfit", ok,
           f"loss {first:.3g} -> {last:.3g} ({last / first:.3f}x) in {elapsed:.0f}s")


def test_09_iteration_trend():
    t0 = time.perf_counter()
    pairs = []
    for i in range(28):
        spec = PhantomSpec(dims=(32, 32, 32), seed=1000 + i, n_spheres=6, n_cuboids=4,
                           n_cylinders=2, radius_range_mm=(2.5, 7))
        chi = generate_phantom(spec)
        field = forward_field(Volume(chi.values.astype(np.float64)),
                              make_dipole_kernel(chi.dims))
        pairs.extend(
            (f.astype(np.float32), c.astype(np.float32))
            for f, c in extract_patches(chi, field, (16, 16, 16), (16, 16, 16))
        )
    train, val = pairs[:200], pairs[200:220]

    def run(t_iters):
        net = build_network(NetworkConfig(T=t_iters, base_channels=8, dropout_rate=0.0),
                            np.random.default_rng(7))
        init_weights(net, np.random.default_rng(7))
        cfg = TrainConfig(epochs=5, batch_size=4, noise=NoiseConfig((0.0, 0.0)), seed=7)
        net, _ = train_loop(train, net, cfg)
        scores = [
            nrmse(ir2_forward(Tensor(f[None, None]), net, mode="eval")[0].data[0, 0], c)
            for f, c in val
        ]
        return float(np.mean(scores))

    n1, n2 = run(1), run(2)
    elapsed = time.perf_counter() - t0
    ok = n2 <= n1 and elapsed < 1800.0
    report("9 iteration-count trend (T=2 vs T=1)", ok,
           f"val NRMSE {n2:.2f}% vs {n1:.2f}%, {elapsed:.0f}s")


def test_10_flop_affinity():
    counts = [count_flops(NetworkConfig(T=t, dropout_rate=0.0), (32, 32, 32))
              for t in (1, 2, 3, 4, 5)]
    diffs = [b - a for a, b in zip(counts, counts[1:])]
    ok = len(set(diffs)) == 1 and counts[0] > 0
    report("10 FLOP affinity in T", ok, f"increment {diffs[0]:,} MACs")


def test_11_metric_identities():
    rng = np.random.default_rng(11)
    g = rng.normal(size=(10, 10, 10))
    checks = {
        "nrmse(g,g)=0": nrmse(g, g) == 0.0,
        "nrmse(2g,g)=100": abs(nrmse(2 * g, g) - 100.0) < 1e-10,
        "nrmse(0,g)=100": abs(nrmse(np.zeros_like(g), g) - 100.0) < 1e-10,
        "nrmse scalar-eps": abs(nrmse(g * 1.02, g) - 2.0) < 1e-9,
        "hfen(g,g)=0": hfen(g, g) == 0.0,
        "hfen const-offset": hfen(g + 3.0, g) < 1e-4,
        "hfen kernel zero-sum": abs(log_kernel().sum()) < 1e-12,
        "ssim(g,g)=1": ssim(g, g) == 1.0,
        "ssim symmetric": abs(ssim(g, rng.normal(size=g.shape))
                              - ssim(*reversed([g, rng.normal(size=g.shape)]))) >= 0.0,
    }
    # hfen vs direct windowed-sum oracle
    p = rng.normal(size=(8, 8, 8))
    g8 = rng.normal(size=(8, 8, 8))
    ker = log_kernel()

    def naive(vol):
        half = ker.shape[0] // 2
        pad = np.pad(vol, half, mode="symmetric")
        out = np.zeros_like(vol)
        kf = ker[::-1, ::-1, ::-1]
        for i in range(8):
            for j in range(8):
                for k2 in range(8):
                    out[i, j, k2] = float((pad[i:i + 15, j:j + 15, k2:k2 + 15] * kf).sum())
        return out

    pf, gf = naive(p), naive(g8)
    oracle = 100.0 * np.linalg.norm(pf - gf) / np.linalg.norm(gf)
    checks["hfen naive-conv oracle"] = abs(hfen(p, g8) - oracle) / oracle < 1e-5

    labels = np.zeros((10, 10, 10), dtype=np.int64)
    labels[1:4, 1:4, 1:4] = 1
    labels[5:9, 5:9, 5:9] = 2
    pr = rng.normal(size=(10, 10, 10))
    _, reg = roi_regression(pr, g, RoiLabelMap(labels))
    sel = labels > 0
    x, y = g[sel], pr[sel]
    a = np.vstack([x, np.ones_like(x)]).T
    coef = np.linalg.solve(a.T @ a, a.T @ y)
    checks["ols oracle"] = (abs(reg["slope"] - coef[0]) < 1e-8
                            and abs(reg["intercept"] - coef[1]) < 1e-8)

    failed = [k for k, ok in checks.items() if not ok]
    report("11 metric identities", not failed, "all" if not failed else f"failed: {failed}")


def test_12_reproducibility(tmp_path):
    spec = tmp_path / "phantom.spec"
    spec.write_text(
        "dims=16,16,16\nvoxel_size_mm=1,1,1\nn_spheres=3\nn_cuboids=2\nn_cylinders=1\n"
        "radius_range_mm=2,5\nchi_range_ppm=-0.2,0.2\npatch=8,8,8\nstride=8,8,8\nseed=5\n"
    )
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "epochs=1\nbatch_size=4\nT=1\nbase_channels=2\ndropout_rate=0.0\n"
        "noise_sigma_ppm=0,0\nseed=1\n"
    )

    def equal(a, b):
        return open(a, "rb").read() == open(b, "rb").read()

    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv
        return code

    failures = []
    gen1, gen2, gen_t = tmp_path / "g1", tmp_path / "g2", tmp_path / "gt"
    run("generate", spec, gen1, "--count", "2")
    run("rerun", gen1 / "manifest.txt", "--out", gen2)
    run("--threads", "4", "generate", spec, gen_t, "--count", "2")
    for name in sorted(os.listdir(gen1)):
        if not equal(gen1 / name, gen2 / name):
            failures.append(f"generate rerun {name}")
        if not equal(gen1 / name, gen_t / name):
            failures.append(f"generate threads {name}")

    tr1, tr2 = tmp_path / "t1", tmp_path / "t2"
    run("train", gen1, cfg, tr1)
    run("rerun", tr1 / "manifest.txt", "--out", tr2)
    for name in ("checkpoint.qsmc", "history.csv", "manifest.txt"):
        if not equal(tr1 / name, tr2 / name):
            failures.append(f"train rerun {name}")

    rec1, rec2 = tmp_path / "r1.qsmv", tmp_path / "r2.qsmv"
    run("reconstruct", gen1 / "field_0000.qsmv", rec1, "--method", "ir2qsm",
        "--checkpoint", tr1 / "checkpoint.qsmc")
    run("rerun", f"{rec1}.manifest.txt", "--out", rec2)
    if not equal(rec1, rec2):
        failures.append("reconstruct rerun")

    ev1, ev2 = tmp_path / "e1", tmp_path / "e2"
    run("evaluate", rec1, gen1 / "chi_0000.qsmv", "--out", ev1)
    run("rerun", ev1 / "manifest.txt", "--out", ev2)
    for name in ("metrics.csv", "metrics.txt", "manifest.txt"):
        if not equal(ev1 / name, ev2 / name):
            failures.append(f"evaluate rerun {name}")

    sl1, sl2 = tmp_path / "s1.pgm", tmp_path / "s2.pgm"
    run("export-slice", gen1 / "chi_0000.qsmv", sl1, "--axis", "z", "--index", "8",
        "--window=-0.2:0.2")
    run("rerun", f"{sl1}.manifest.txt", "--out", sl2)
    if not equal(sl1, sl2):
        failures.append("export-slice rerun")

    report("12 manifest reproducibility", not failures,
           "all byte-identical" if not failures else f"failed: {failures}")

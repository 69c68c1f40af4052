"""One check per acceptance criterion; each prints an ``ACCEPT <name>: PASS|FAIL`` line."""

import csv
import math
import shutil
import time

import numpy as np
import pytest

from ssmdose import autodiff as ad
from ssmdose.autodiff import Tensor
from ssmdose.cli import main
from ssmdose.diffusion import make_schedule, q_sample, sample
from ssmdose.metrics import dose_score, dvh_curve, dvh_metrics, dvh_score, homogeneity_index
from ssmdose.network import DoseDenoiser, UNetConfig
from ssmdose.phantoms import build_dataset, load_split
from ssmdose.ssm import SsmParams, discretize, selective_ssm, ssm_conv_apply, ssm_conv_kernel, ssm_scan
from ssmdose.training import RunConfig, ScheduleConfig, Trainer, predict_doses
from test_metrics import (
    dose_score_oracle,
    dvh_score_oracle,
    masked_list,
    metrics_oracle,
    percentile_oracle,
    random_instance,
)
from test_network import randomize, tiny_cfg
from test_ssm import HP_LIMIT, random_lti

SCHED = make_schedule()


def test_scan_convolution_equivalence(accept):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        L = int(rng.integers(1, 129))
        d, R = random_lti(rng, int(rng.integers(1, 17)))
        u = rng.normal(size=L)
        conv = ssm_conv_apply(ssm_conv_kernel(d, R, L), u)
        worst = max(worst, float(np.max(np.abs(ssm_scan(d, R, u) - conv))))
    sec = time.perf_counter() - t0
    accept("scan_conv_equivalence", worst < 1e-10 and sec < 5.0, f"max |diff| {worst:.2e}, {sec:.2f} s")


def test_discretization(accept):
    q = np.array([0.7, -1.3])
    d = discretize(math.log(2.0), np.array([1.0, 1.0]), q)
    closed = max(float(np.max(np.abs(d.P_bar - 2.0))), float(np.max(np.abs(d.Q_bar - q) / np.abs(q))))
    limit = 0.0
    for (delta, P), (pb, qb) in HP_LIMIT.items():
        e = discretize(delta, P, 1.0)
        limit = max(limit, abs(e.P_bar[0] - pb), abs(e.Q_bar[0] - qb))
    ok = closed <= 4 * np.finfo(float).eps and limit < 1e-9
    accept("discretization", ok, f"closed form {closed:.1e}, small-step limit {limit:.1e}")


def _primitive_cases(rng):
    def p(*shape):
        return ad.parameter(rng.normal(size=shape))

    a, b = p(3, 4), p(3, 4)
    x, w, bias = p(2, 5, 3), p(3, 4), p(4)
    xc, wc, bc = p(2, 7, 3), p(3, 4), p(3)
    g, beta = p(3), p(3)
    yield "add", lambda: ad.add(a, b), [a, b]
    yield "sub", lambda: ad.sub(a, b), [a, b]
    yield "mul", lambda: ad.mul(a, b), [a, b]
    yield "scale", lambda: ad.scale(a, -1.7), [a]
    yield "add_scalar", lambda: ad.add_scalar(a, 0.3), [a]
    yield "exp", lambda: ad.exp(a), [a]
    yield "sigmoid", lambda: ad.sigmoid(a), [a]
    yield "silu", lambda: ad.silu(a), [a]
    yield "softplus", lambda: ad.softplus(a), [a]
    yield "reshape", lambda: ad.reshape(a, (2, 6)), [a]
    yield "transpose", lambda: ad.transpose(a, (1, 0)), [a]
    yield "concat", lambda: ad.concat([a, b], axis=0), [a, b]
    yield "broadcast_tokens", lambda: ad.broadcast_tokens(g.reshape(1, 3), 4), [g]
    yield "mean", lambda: ad.mean(ad.mul(a, a)), [a]
    yield "sum_squares", lambda: ad.sum_squares(a, b), [a, b]
    yield "linear", lambda: ad.linear(x, w, bias), [x, w, bias]
    yield "layer_norm", lambda: ad.layer_norm(x, g, beta), [x, g, beta]
    yield "conv1d", lambda: ad.conv1d(xc, wc, bc), [xc, wc, bc]
    params = SsmParams(3, 2, rng)
    for q in params.parameters():
        q.data += 0.2 * rng.normal(size=q.shape)
    u = p(1, 5, 3)
    yield "selective_scan", lambda: selective_ssm(u, params), [u] + params.parameters()


def test_gradient_checks(accept):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    prim = {}
    for name, fn, params in _primitive_cases(rng):
        w = Tensor(np.random.default_rng(len(name)).normal(size=fn().shape))
        prim[name] = ad.grad_check(lambda: ad.sum(ad.mul(fn(), w)), params, 1e-5)

    model = DoseDenoiser(tiny_cfg(), seed=3)
    randomize(model, rng, 0.3)
    for name, q in model.named_parameters():
        if name.endswith("delta_proj.bias"):
            q.data[:] = 0.5 * rng.normal(size=q.shape)
    x = Tensor(rng.normal(size=(1, 1, 8, 8)))
    cond = Tensor(rng.random((1, 5, 8, 8)))
    target = Tensor(rng.normal(size=(1, 1, 8, 8)))
    params = model.parameters()
    pick = {i: rng.choice(q.size, size=min(4, q.size), replace=False) for i, q in enumerate(params)}
    full = ad.grad_check(lambda: ad.mse(model(x, [17], cond=cond), target), params, 1e-5, indices=pick)
    sec = time.perf_counter() - t0

    worst = max(prim, key=prim.get)
    ok = prim[worst] < 1e-4 and full < 1e-3 and sec < 120.0
    accept("gradient_checks", ok,
           f"{len(prim)} primitives, worst {worst} {prim[worst]:.1e}; full model {full:.1e}; {sec:.1f} s")


def test_forward_moments(accept):
    n = 10_000
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-1.0, 1.0, n)
    xt = q_sample(x0, SCHED.T - 1, rng.standard_normal(n), SCHED)
    m, v = float(xt.mean()), float(xt.var())
    se = math.sqrt(v / n)
    ok = abs(m) < 3 * se and abs(v - 1.0) < 0.05
    accept("forward_moments", ok, f"mean {m:+.4f} (3 SE {3 * se:.4f}), variance {v:.4f}")


def test_gaussian_reverse_oracle(accept):
    # data N(0, 1): the analytic noise predictor is E[eps | x_t] = sqrt(1 - ab) x_t
    def oracle(x_t, k, cond):
        ab = SCHED.alpha_bar[k].reshape((-1,) + (1,) * (x_t.ndim - 1))
        return Tensor(np.sqrt(1.0 - ab) * x_t.data)

    n = 10_000
    x = sample(oracle, None, SCHED, np.random.default_rng(13), (n, 1)).x0[:, 0]
    m, second = float(x.mean()), float(np.mean(x * x))
    se_m, se_2 = 1.0 / math.sqrt(n), math.sqrt(2.0 / n)
    ok = abs(m) < 3 * se_m and abs(second - 1.0) < 3 * se_2
    accept("gaussian_reverse_oracle", ok,
           f"mean {m:+.4f} (3 SE {3 * se_m:.4f}), second moment {second:.4f} (3 SE {3 * se_2:.4f})")


def test_metric_oracles(accept):
    mismatches = 0
    for seed in range(50):
        pred, gt, (body, ptv, oar) = random_instance(seed)
        structs = [(ptv, "target"), (oar, "oar")]
        mismatches += dose_score(pred, gt, body) != dose_score_oracle(pred, gt, body)
        mismatches += dvh_score(pred, gt, structs) != dvh_score_oracle(pred, gt, structs)
        for mask, kind in structs:
            mismatches += dvh_metrics(pred, mask, kind) != metrics_oracle(pred, mask, kind)
        v = masked_list(gt, ptv)
        d2, d98, d50 = (percentile_oracle(v, q) for q in (98, 2, 50))
        mismatches += homogeneity_index(gt, ptv) != (d2 - d98) / d50
    uniform = homogeneity_index(np.full((8, 8), 0.7), np.ones((8, 8), bool))
    rng = np.random.default_rng(5)
    monotone = True
    for _ in range(50):
        c = dvh_curve(rng.random((16, 16)) * 1.2, rng.random((16, 16)) < 0.5)
        monotone &= bool(np.all(np.diff(c.volume_fraction) <= 0))
    ok = mismatches == 0 and uniform == 0.0 and monotone
    accept("metric_oracles", ok,
           f"{mismatches} mismatches over 50 instances, uniform HI {uniform}, DVH monotone {monotone}")


@pytest.mark.slow
def test_end_to_end_desk_scale(accept, tmp_path):
    cfg = RunConfig(batch_size=4)  # the desk batch; every other setting is the default
    build_dataset(tmp_path / "data", 50, 5, 20, base_seed=0)
    train = load_split(tmp_path / "data", "train")
    test = load_split(tmp_path / "data", "test")
    structures = np.stack([p.structure for p in test])

    t0 = time.perf_counter()
    trainer = Trainer(cfg, train)
    untrained = DoseDenoiser(cfg.model, seed=cfg.seed)
    losses = [float(np.mean([r.loss for r in trainer.train_epoch()])) for _ in range(cfg.epochs)]
    train_sec = time.perf_counter() - t0

    def score(model):
        d = np.concatenate([
            predict_doses(model, structures[i : i + 10], trainer.sched, np.random.default_rng(100 + i)).dose
            for i in range(0, len(test), 10)
        ])
        return float(np.mean([dose_score(d[i, 0], p.dose[0], p.body) for i, p in enumerate(test)]))

    trained_ds, base_ds = score(trainer.model), score(untrained)
    total = time.perf_counter() - t0
    ratio = losses[-1] / losses[0]
    gain = base_ds / trained_ds
    ok = ratio < 0.5 and gain >= 5.0 and total < 3600
    accept("end_to_end", ok,
           f"loss {losses[0]:.1f} -> {losses[-1]:.1f} (ratio {ratio:.3f}); dose score {trained_ds:.4f} vs untrained "
           f"{base_ds:.4f} ({gain:.2f}x, need 5x); train {train_sec:.0f} s, total {total:.0f} s")


def _pipeline(root, cfg_path):
    steps = [
        ["gen", "--out", root / "data", "--size", 32, "--n-train", 3, "--n-val", 1, "--n-test", 2, "--seed", 9,
         "--config", cfg_path],
        ["train", "--config", cfg_path, "--data", root / "data", "--out", root / "run"],
        ["sample", "--checkpoint", root / "run" / "checkpoint.bin", "--data", root / "data", "--out", root / "pred",
         "--seed", 4, "--stride", 2],
        ["eval", "--pred", root / "pred", "--data", root / "data"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    names = ["data/manifest.json", "data/samples/0004.bin", "run/checkpoint.bin", "pred/0004.bin", "pred/0005.bin",
             "pred/metrics.csv", "pred/dvh.csv"]
    return {n: (root / n).read_bytes() for n in names}


def test_determinism(accept, tmp_path, capsys):
    tiny = UNetConfig(image_size=32, patch_size=4, base_channels=4, depth=2, n_state=2, time_embed_dim=8, num_steps=20)
    cfg = RunConfig(model=tiny, schedule=ScheduleConfig(T=20), epochs=2, batch_size=2, keep_every=1)
    (tmp_path / "cfg.json").write_text(cfg.dumps())
    # the checkpoint records the dataset path, so both runs use the same directory
    a = _pipeline(tmp_path / "p", tmp_path / "cfg.json")
    shutil.rmtree(tmp_path / "p")
    b = _pipeline(tmp_path / "p", tmp_path / "cfg.json")
    same = [n for n in a if a[n] == b[n]]

    run = tmp_path / "p" / "run"
    (run / "checkpoint_e0001.bin").replace(run / "checkpoint.bin")
    assert main(["train", "--out", str(run), "--resume"]) == 0
    resumed = (run / "checkpoint.bin").read_bytes() == b["run/checkpoint.bin"]
    capsys.readouterr()
    ok = len(same) == len(a) and resumed
    accept("determinism", ok, f"{len(same)}/{len(a)} pipeline files identical, resumed checkpoint identical {resumed}")


def test_reporting(accept, tmp_path, capsys):
    tiny = UNetConfig(image_size=32, patch_size=4, base_channels=4, depth=2, n_state=2, time_embed_dim=8, num_steps=20)
    (tmp_path / "cfg.json").write_text(RunConfig(model=tiny, schedule=ScheduleConfig(T=20), epochs=1,
                                                 batch_size=2).dumps())
    main(["gen", "--out", str(tmp_path / "d"), "--size", "32", "--total", "4", "--config", str(tmp_path / "cfg.json")])
    capsys.readouterr()
    main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")])
    out = capsys.readouterr().out
    params = next((ln for ln in out.splitlines() if ln.startswith("parameters total=")), None)
    timing = next((ln for ln in out.splitlines() if "s/iter" in ln), None)
    with open(tmp_path / "r" / "loss.csv") as fh:
        seconds = [float(r["seconds"]) for r in csv.DictReader(fh)]
    ok = params is not None and timing is not None and all(s > 0 for s in seconds)
    accept("reporting", ok, f"{params}; {timing}")

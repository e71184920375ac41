"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (collected in the terminal summary).
Trained models are cached per session so criteria that share a model do
not retrain it.
"""
import functools
import math
import time

import numpy as np
import pytest
import torch

from _models import random_model
from ted4 import entropy as E
from ted4.anchors import raw_activation
from ted4.cli import main as cli_main
from ted4.coder import build_cdf, range_decode, range_encode
from ted4.config import TrainConfig
from ted4.container import (
    estimate_attribute_bits, model_from_coded, quantize_model, read_container, section_sizes, write_container,
)
from ted4.deformation import DeformationBank, DeformationNets, deform
from ted4.render import Primitives, render
from ted4.scenes import make_scene
from ted4.temporal import activation, duration_histogram, time_aware_opacity
from ted4.training import (
    compare_priors, correlated_attributes, distortion_loss, grad_check, rd_sweep, train,
)

D = torch.float64
ITERATIONS = 1500


def accept_config(seed=0, lambda_rate=None, temporal=True):
    cfg = TrainConfig(iterations=ITERATIONS, seed=seed)
    if lambda_rate is not None:
        cfg.weights.lambda_rate = lambda_rate
    cfg.model.temporal_activation = temporal
    return cfg


@functools.lru_cache(maxsize=None)
def scene(name, seed=0):
    return make_scene(name, seed)


@functools.lru_cache(maxsize=None)
def trained(name, seed=0, temporal=True):
    """(model, container bytes, training seconds)."""
    t0 = time.time()
    model = train(scene(name, seed), accept_config(seed, temporal=temporal)).model
    secs = time.time() - t0
    return model, write_container(quantize_model(model)), secs


# -- 1 -------------------------------------------------------------------------------

def test_c01_coding_roundtrip(verdict):
    t0 = time.time()
    bad = []
    for seed in range(100):
        prior = "factorized" if seed % 4 == 3 else "hyperprior"
        coded = quantize_model(random_model(seed, prior, temporal=seed % 2 == 0, n_points=10 + seed % 30))
        if not read_container(write_container(coded)).equals(coded):
            bad.append(seed)
    rng = np.random.default_rng(0)
    values = np.rint(rng.normal(scale=4.0, size=100_000)).astype(int).tolist()
    values[::997] = [int(v) * 1000 for v in values[::997]]  # some escapes
    cdfs = [build_cdf(0.0, 4.0, 1.0, 16)] * len(values)
    symbols_ok = range_decode(range_encode(values, cdfs), cdfs) == values
    secs = time.time() - t0
    verdict(1, not bad and symbols_ok and secs < 60,
            f"100 models bit-exact={not bad} 1e5 symbols exact={symbols_ok} ({secs:.1f}s)")


# -- 2 -------------------------------------------------------------------------------

def test_c02_rate_estimate_fidelity(verdict):
    t0 = time.time()
    model, data, _ = trained("occluder")
    coded = read_container(data)
    estimate_bytes = estimate_attribute_bits(coded) / 8
    actual = section_sizes(data)[1]["attributes"]["payload_bytes"]
    secs = time.time() - t0
    ok = abs(actual - estimate_bytes) <= 0.02 * estimate_bytes + 64 and secs < 300
    verdict(2, ok, f"actual {actual} B vs estimate {estimate_bytes:.1f} B ({secs:.0f}s incl. training)")


# -- 3 -------------------------------------------------------------------------------

def _one_anchor_removed_render():
    from ted4.config import ModelConfig
    from ted4.model import TedModel

    sc = scene("occluder")
    torch.manual_seed(0)
    model = TedModel.from_points(sc.points, ModelConfig(n_frames=sc.n_frames), seed=0, dtype=D)
    model.dynamic_phase = True
    with torch.no_grad():
        model.anchors.feat.normal_(0, 1)
        for p in model.nets.parameters():
            p.add_(0.1 * torch.randn_like(p))
    n = len(model.anchors)
    a_s, a_f = torch.zeros(n, dtype=D), torch.ones(n, dtype=D)
    k = n // 2
    a_s[k], a_f[k] = 0.9, 0.95  # tau_k(0.3) underflows to exactly zero
    model.anchors.tau.data = raw_activation(a_s, a_f, 0.05, 0.05).to(D)
    with torch.no_grad():
        model.anchors.tau[k, 2] = -50.0
    attrs, _, _ = model.attributes("hard")
    tau_k = float(model.activation_at(0.3, attrs)[k].detach())
    with torch.no_grad():
        full, _ = model.render(sc.cameras[1], 0.3, attrs=attrs)
        keep = torch.arange(n) != k
        model.replace_anchors(model.anchors.select(keep))
        attrs2, _, _ = model.attributes("hard")
        without, _ = model.render(sc.cameras[1], 0.3, attrs=attrs2)
    return tau_k, torch.equal(full.image, without.image)


def test_c03_activation_suite(verdict):
    a_s, b_s, a_f, b_f = 0.3, 0.05, 0.6, 0.07
    act = lambda t: float(activation(torch.tensor(a_s, dtype=D), b_s, a_f, b_f, t))
    inside = all(act(t) == 1.0 for t in np.linspace(a_s, a_f, 31))
    e1 = abs(act(a_s - b_s) - math.exp(-1)) <= 1e-12 and abs(act(a_f + b_f) - math.exp(-1)) <= 1e-12
    cont = max(abs(act(a_s - 1e-13) - 1.0), abs(act(a_f + 1e-13) - 1.0)) <= 1e-12
    alphas = torch.rand(50, dtype=D, generator=torch.Generator().manual_seed(0))
    taus = torch.rand(50, dtype=D, generator=torch.Generator().manual_seed(1))
    exact = bool(torch.equal(time_aware_opacity(alphas, taus), alphas * taus))
    tau_k, identical = _one_anchor_removed_render()
    ok = inside and e1 and cont and exact and tau_k == 0.0 and identical
    verdict(3, ok, f"window=1 {inside}, exp(-1) {e1}, continuity {cont}, alpha*tau exact {exact}, "
                   f"tau=0 render identical {identical}")


# -- 4 -------------------------------------------------------------------------------

def test_c04_likelihood_oracle(verdict):
    cdf = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    oracle = cdf(0.5) - cdf(-0.5)
    p = float(E.likelihood(torch.tensor(0.0, dtype=D), 0.0, 1.0, 1.0))
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu, sigma, q = rng.uniform(-3, 3), rng.uniform(0.05, 3), rng.uniform(0.05, 1)
        idx = np.arange(math.floor((mu - 8 * sigma) / q), math.ceil((mu + 8 * sigma) / q) + 1, dtype=float)
        total = E.gaussian_bin_probs(np.array([mu]), np.array([sigma]), np.array([q]), idx[None]).sum()
        worst = max(worst, abs(total - 1.0))
    ok = abs(p - 0.382925) <= 1e-6 and abs(p - oracle) <= 1e-12 and worst <= 1e-9
    verdict(4, ok, f"likelihood(0;0,1,1)={p:.7f} oracle={oracle:.7f}, worst bin-sum error {worst:.1e}")


# -- 5 -------------------------------------------------------------------------------

def _grad_activation():
    params = [torch.tensor(v, dtype=D, requires_grad=True) for v in (0.3, 0.05, 0.6, 0.07)]
    ts = [0.1, 0.22, 0.28, 0.65, 0.7, 0.9]  # away from the window edges
    return grad_check(lambda: sum(activation(params[0], params[1], params[2], params[3], t) for t in ts),
                      params, n_samples=4)


def _grad_deform():
    torch.manual_seed(0)
    nets = DeformationNets(4, 6, 8, hidden=10, dx_scale=0.5).double()
    for p in nets.parameters():
        torch.nn.init.normal_(p, std=0.5)
    bank = DeformationBank(8, 6).double()
    xyz, feat = torch.randn(5, 3, dtype=D), torch.randn(5, 8, dtype=D)
    phi = torch.randn(5, 4, dtype=D, requires_grad=True)
    target = torch.randn(5, 11, dtype=D)

    def loss():
        x, f = deform(xyz, feat, phi, bank, nets, 0.41)
        return ((torch.cat([x, f], 1) - target) ** 2).sum()

    return grad_check(loss, [phi, bank.Z, *nets.parameters()], n_samples=80)


def _grad_rate():
    torch.manual_seed(1)
    net = E.HyperpriorNet({"a": 4}, n_bands=2, hidden=12, base_step={"a": 0.1}).double()
    x = torch.rand(30, 3, dtype=D)
    vals = torch.randn(30, 4, dtype=D)

    def loss():
        mu, sigma, q = net(x)["a"]
        return -torch.log2(E.likelihood(vals, mu, sigma, q)).sum()

    return grad_check(loss, list(net.parameters()), n_samples=80)


def _grad_distortion():
    from ted4.anchors import Camera

    cam = Camera.look_at((0, 0, 3), (0, 0, 0), (0, 1, 0), 40.0, 8, 8)
    g = torch.Generator().manual_seed(2)
    n = 6
    means = ((torch.rand(n, 3, generator=g, dtype=D) - 0.5) * 0.8).requires_grad_()
    colors = torch.rand(n, 3, generator=g, dtype=D).requires_grad_()
    opac = (0.2 + 0.6 * torch.rand(n, generator=g, dtype=D)).requires_grad_()
    scales = torch.full((n, 3), 0.25, dtype=D)
    rot = torch.zeros(n, 4, dtype=D)
    rot[:, 0] = 1
    target = torch.rand(8, 8, 3, generator=g, dtype=D)

    def loss():
        prims = Primitives(means, scales, rot, colors, opac, torch.arange(n))
        return distortion_loss(render(prims, cam, drop_transparent=False).image, target)

    return grad_check(loss, [means, colors, opac], n_samples=60)


def test_c05_gradient_suite(verdict):
    t0 = time.time()
    errs = {"activation": _grad_activation(), "deform": _grad_deform(), "rate": _grad_rate(),
            "distortion": _grad_distortion()}
    secs = time.time() - t0
    ok = all(e < 1e-3 for e in errs.values()) and secs < 120
    verdict(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" ({secs:.1f}s)")


# -- 6 -------------------------------------------------------------------------------

def test_c06_channel_ar_causality(verdict):
    violations = 0
    for trial in range(50):
        torch.manual_seed(trial)
        ar = E.ChannelARNet(16, 4, 16)
        for p in ar.parameters():
            torch.nn.init.normal_(p)
        mu, sigma = torch.randn(4, 16), torch.rand(4, 16) + 0.1
        feat = torch.randn(4, 16)
        for k in range(4):
            pert = feat.clone()
            pert[:, ar.chunk_slice(k)] += torch.randn(4, 4) * 3
            for j in range(k + 1):
                a, b = ar.forward_chunk(mu, sigma, feat, j), ar.forward_chunk(mu, sigma, pert, j)
                if not (torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])):
                    violations += 1
    verdict(6, violations == 0, f"{violations} violations over 50 trials x 4 chunks")


# -- 7 -------------------------------------------------------------------------------

def test_c07_rd_monotonicity(verdict):
    t0 = time.time()
    lambdas = [0.001, 0.002, 0.004, 0.008]
    rows = rd_sweep(scene("occluder"), lambdas, accept_config())
    secs = time.time() - t0
    sizes = [r.bytes for r in rows]
    mono = all(b <= a for a, b in zip(sizes, sizes[1:]))
    quality = rows[0].psnr >= rows[-1].psnr - 0.1
    detail = " ".join(f"{r.lambda_rate:g}:{r.bytes}B/{r.psnr:.2f}dB" for r in rows)
    verdict(7, mono and quality and secs < 1800, f"{detail} ({secs / 60:.1f} min)")


# -- 8 -------------------------------------------------------------------------------

def test_c08_hyperprior_beats_factorized(verdict):
    pos, vals = correlated_attributes(400, 8, seed=0)
    bits = compare_priors(pos, vals)
    saving = 1 - bits["hyperprior"] / bits["factorized"]
    verdict(8, bits["hyperprior"] < bits["factorized"],
            f"hyperprior {bits['hyperprior']:.0f} bits vs factorized {bits['factorized']:.0f} bits "
            f"({100 * saving:.1f}% saving)")


# -- 9 -------------------------------------------------------------------------------

def _attr_bits_per_anchor(data):
    coded = read_container(data)
    return 8 * section_sizes(data)[1]["attributes"]["payload_bytes"] / max(coded.n_anchors, 1)


def test_c09_temporal_durations(verdict):
    static_model = trained("static-room")[0]
    h_static = duration_histogram(static_model.anchors.tau.detach())
    occ = model_from_coded(read_container(trained("occluder")[1]))
    h_occ = duration_histogram(occ.anchors.tau)
    with_ta = [_attr_bits_per_anchor(trained("occluder", s, True)[1]) for s in range(3)]
    without = [_attr_bits_per_anchor(trained("occluder", s, False)[1]) for s in range(3)]
    long_frac = h_static.long / max(h_static.total, 1)
    ok_static = long_frac >= 0.95
    ok_short = h_occ.short >= 1
    ok_ablation = np.mean(without) > np.mean(with_ta)
    verdict(9, ok_static and ok_short and ok_ablation,
            f"static-room long {100 * long_frac:.1f}%, occluder short bin {h_occ.short}, "
            f"attribute bits/anchor without TA {np.mean(without):.1f} vs with TA {np.mean(with_ta):.1f} "
            f"(seeds: {[round(v, 1) for v in without]} vs {[round(v, 1) for v in with_ta]})")


# -- 10 ------------------------------------------------------------------------------

def test_c10_determinism(verdict, tmp_path):
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["synth", "--scene", "occluder", "--out", str(d / "scene"), "--seed", "0"]) == 0
        assert cli_main(["train", "--scene", str(d / "scene"), "--out", str(d / "m.pt"), "--seed", "0",
                         "--iterations", str(ITERATIONS)]) == 0
        assert cli_main(["encode", "--model", str(d / "m.pt"), "--out", str(d / "m.ted4")]) == 0
        blobs.append((d / "m.ted4").read_bytes())
    verdict(10, blobs[0] == blobs[1], f"two synth->train->encode runs, {len(blobs[0])} bytes each, "
                                      f"identical={blobs[0] == blobs[1]}")

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines live;
they are also collected into the terminal summary at the end of the session.
"""
import time

import numpy as np
import pytest
import torch
from torch.func import vmap
from torch.nn.utils.stateless import _reparametrize_module

from msatl.data import Role
from msatl.experiments.config import ExperimentConfig
from msatl.experiments.runner import run
from msatl.experiments.synthetic import SyntheticSpec, gen_synthetic
from msatl.metrics import confusion, dice, evaluate, f_beta, iou, precision, recall
from msatl.network import NetConfig, build_model, grl
from msatl.sampling import Batch, SubBatch, materialize, plan_epoch
from msatl.training import TrainConfig, batch_loss, domain_loss, train

from conftest import make_domain, tiny_net
from test_metrics import brute_scores
from test_sampling import check_plan, light_domain
from test_training import per_sample_sum

pytestmark = pytest.mark.filterwarnings("ignore:Converting a tensor with requires_grad")

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str, started: float):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({time.perf_counter() - started:.1f}s)"
    print(line)
    RESULTS.append(line)
    return ok


# ---------------------------------------------------------------- 1 metrics

def test_c01_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches, worst_identity = 0, 0.0
    fns = {"iou": iou, "dice": dice, "f2": lambda c: f_beta(c, 2.0), "f05": lambda c: f_beta(c, 0.5),
           "precision": precision, "recall": recall}
    for k in range(1000):
        # vary density so empty and full masks show up too
        p, q = rng.random(2) ** 2 if k % 10 else (0.0, rng.random())
        pred = (rng.random((16, 16)) < p).astype(np.uint8)
        gt = (rng.random((16, 16)) < q).astype(np.uint8)
        c = confusion(pred, gt)
        exact = brute_scores(pred, gt)
        for name, fn in fns.items():
            mismatches += fn(c) != float(exact[name])
        i, d = iou(c), dice(c)
        worst_identity = max(worst_identity, abs(d - 2 * i / (1 + i)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_identity <= 1e-12 and elapsed < 10
    report(1, "metric oracle", ok, f"{mismatches} mismatches, identity err {worst_identity:.1e}", t0)
    assert mismatches == 0
    assert worst_identity <= 1e-12
    assert elapsed < 10


# ---------------------------------------------------------------- 2 GRL

def directional_checks(model, subs, lam, h=1e-5):
    """Finite-difference slope of the domain CE along the update direction -grad, per parameter group.

    Returns (group, measured slope, predicted slope) for the classifier and the encoder.
    """
    def domain_ce():
        total = 0
        for sb in subs:
            pack = model.encode(sb.source_index, sb.images)
            total = total + domain_loss(model.classify_domain(sb.source_index, pack.bottleneck, lam),
                                        sb.domain_labels.double()).sum()
        return total

    model.zero_grad()
    domain_ce().backward()
    out = []
    for group in ("classifiers", "encoders"):
        params = [p for n, p in model.named_parameters() if n.startswith(group)]
        grads = [p.grad.clone() for p in params]
        # plain gradient of the CE for this group, undoing the reversal for the encoder
        plain = grads if group == "classifiers" else [-g / lam for g in grads]
        direction = [-g for g in grads]
        predicted = sum(float((a * d).sum()) for a, d in zip(plain, direction))
        base = [p.detach().clone() for p in params]
        values = []
        with torch.no_grad():
            for sign in (1, -1):
                for p, b, d in zip(params, base, direction):
                    p.copy_(b + sign * h * d)
                values.append(float(domain_ce()))
            for p, b in zip(params, base):
                p.copy_(b)
        out.append((group, (values[0] - values[1]) / (2 * h), predicted))
    return out


def test_c02_grl_contract():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(11)
    exact = True
    for lam in (0.0, 0.5, 1.0, 5.0):
        x = torch.randn(4, 8, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        y = grl(x, lam)
        up = torch.randn(4, 8, 3, 3, generator=g, dtype=torch.float64)
        y.backward(up)
        exact &= torch.equal(y, x) and torch.equal(x.grad, -lam * up)

    model = tiny_net(n_sources=2)
    sources = [make_domain(f"s{i}", Role.source(i), 8, seed=i) for i in (1, 2)]
    target = make_domain("t", Role.target(), 8, seed=5, unlabeled=4)
    subs = materialize(plan_epoch(sources, target, 8).batches[0], sources, target, torch.float64)
    slopes = []
    for lam in (0.5, 1.0, 5.0):
        slopes += directional_checks(model, subs, lam)
    signs_ok = all((s < 0) if grp == "classifiers" else (s > 0) for grp, s, _ in slopes)
    rel = max(abs(s - p) / abs(p) for _, s, p in slopes)
    elapsed = time.perf_counter() - t0
    ok = exact and signs_ok and rel <= 1e-3 and elapsed < 30
    report(2, "GRL contract", ok, f"exact={exact}, signs={signs_ok}, slope rel err {rel:.1e}", t0)
    assert exact
    assert signs_ok
    assert rel <= 1e-3
    assert elapsed < 30


# ---------------------------------------------------------------- 3 loss decomposition

def test_c03_loss_decomposition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    model = tiny_net(n_sources=3)
    worst = 0.0
    for k in range(50):
        n = int(rng.integers(1, 4))
        n_sb = int(rng.choice([2, 4, 8]))
        sources = [make_domain(f"s{i}", Role.source(i), int(rng.integers(2, 10)), seed=100 * k + i)
                   for i in range(1, n + 1)]
        n_t = int(rng.integers(2, 10))
        target = make_domain("t", Role.target(), n_t, seed=100 * k + 50, unlabeled=int(rng.integers(0, n_t + 1)))
        net = model if n == 3 else tiny_net(n_sources=n)
        alpha, lam = float(rng.uniform(0, 2)), float(rng.uniform(0, 2))
        batch = plan_epoch(sources, target, n_sb, seed=k).batches[0]
        subs = materialize(batch, sources, target, torch.float64)
        terms, _ = batch_loss(net, subs, alpha, lam)
        src, tgt, adv = per_sample_sum(net, subs, sources, target, alpha, lam)
        for a, b in ((terms.source_seg, src), (terms.target_seg, tgt), (terms.adversarial, adv),
                     (terms.total, src + alpha * tgt - lam * adv)):
            worst = max(worst, abs(float(a) - b))

    sources = [make_domain(f"s{i}", Role.source(i), 6, seed=i) for i in (1, 2, 3)]
    target = make_domain("t", Role.target(), 6, seed=9, unlabeled=6)
    subs = materialize(plan_epoch(sources, target, 4).batches[0], sources, target, torch.float64)
    empty_target = float(batch_loss(model, subs, 1.0, 1.0)[0].target_seg)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and empty_target == 0.0 and elapsed < 60
    report(3, "loss decomposition", ok, f"max abs diff {worst:.1e}, unlabeled target_seg {empty_target}", t0)
    assert worst <= 1e-6
    assert empty_target == 0.0
    assert elapsed < 60


# ---------------------------------------------------------------- 4 gradients

FD_STEPS = (1e-6, 1e-7, 1e-5)


def test_c04_gradients_match_finite_differences():
    """Central differences for every parameter of a depth-4, width-2 model in float64.

    Each element must agree within 1e-4 relative error; the comparison adds the
    roundoff bound of the difference quotient (4 ulp of the loss over the
    step). ReLU and max-pool kinks make any single step unreliable for a few
    elements, so elements failing at the first step are retried at a smaller
    and a larger one.
    """
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    model = tiny_net(n_sources=2, base_width=2, hidden=(8, 4))
    sources = [make_domain(f"s{i}", Role.source(i), 4, size=16, seed=i) for i in (1, 2)]
    target = make_domain("t", Role.target(), 4, size=16, seed=9, unlabeled=1)
    subs = materialize(plan_epoch(sources, target, 4, seed=2).batches[0], sources, target, torch.float64)
    alpha, lam = 1.3, 0.7
    terms, objective = batch_loss(model, subs, alpha, lam)
    model.zero_grad()
    objective.backward()
    fmag = max(abs(float(terms.total)), abs(float(terms.adversarial)))
    unit = torch.finfo(torch.float64).eps
    params = {n: p.detach().clone() for n, p in model.named_parameters()}
    grads = {n: p.grad.reshape(-1).clone() for n, p in model.named_parameters()}

    def loss_pair(ps):
        with _reparametrize_module(model, ps):
            t, _ = batch_loss(model, subs, alpha, lam)
        return torch.stack([t.total, t.adversarial])

    def central(name, idx, h):
        flat = params[name].reshape(-1)
        # the classifier sits behind the GRL: its gradient is that of the domain CE itself
        which = 1 if name.startswith("classifiers") else 0

        def f(delta):
            ps = dict(params)
            ps[name] = (flat + delta).reshape(params[name].shape)
            return loss_pair(ps)[which]

        out = []
        for c in range(0, len(idx), 256):
            chunk = idx[c:c + 256]
            e = torch.zeros(len(chunk), flat.numel(), dtype=flat.dtype)
            e[torch.arange(len(chunk)), chunk] = h
            out.append((vmap(f)(e) - vmap(f)(-e)) / (2 * h))
        return torch.cat(out)

    def agrees(a, n, h):
        return (a - n).abs() <= 1e-4 * torch.maximum(a.abs(), n.abs()) + 4 * unit * fmag / h

    checked, retried, failed = 0, 0, []
    for name, a in grads.items():
        pending = torch.arange(a.numel())
        for k, h in enumerate(FD_STEPS):
            if len(pending) == 0:
                break
            pending = pending[~agrees(a[pending], central(name, pending, h), h)]
            if k == 0:
                retried += len(pending)
        checked += a.numel()
        failed += [(name, int(i)) for i in pending[:3]]
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 300
    report(4, "finite-difference gradients", ok,
           f"{checked} parameters, {retried} retried at other steps, {len(failed)} failing", t0)
    assert not failed, failed
    assert elapsed < 300


# ---------------------------------------------------------------- 5 sampler

def test_c05_sampler_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    for k in range(1000):
        n = int(rng.integers(1, 5))
        n_sb = int(rng.choice([4, 8, 16]))
        sources = [light_domain(f"s{i}-", Role.source(i), int(rng.integers(5, 201))) for i in range(1, n + 1)]
        target = light_domain("t", Role.target(), int(rng.integers(5, 201)))
        epoch, seed = int(rng.integers(0, 5)), int(rng.integers(0, 1000))
        plan = plan_epoch(sources, target, n_sb, epoch, seed)
        check_plan(sources, target, n_sb, plan)
        assert plan == plan_epoch(sources, target, n_sb, epoch, seed)
    elapsed = time.perf_counter() - t0
    report(5, "sampler invariants", elapsed < 30, "1000 configurations", t0)
    assert elapsed < 30


# ---------------------------------------------------------------- 6 fusion and isolation

def grads_of_all(model, subs):
    """Gradient of the source and adversarial terms (everything but the fused target term)."""
    terms, _ = batch_loss(model, subs, 1.0, 1.0)
    params = dict(model.named_parameters())
    g = torch.autograd.grad(terms.source_seg + terms.adversarial, list(params.values()), allow_unused=True)
    return {n: torch.zeros_like(p) if gi is None else gi for (n, p), gi in zip(params.items(), g)}


def test_c06_fusion_and_isolation():
    t0 = time.perf_counter()
    model = tiny_net(n_sources=3)
    x = torch.rand(3, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    packs = [model.encode(i, x) for i in (1, 2, 3)]
    ref = model.decode_target_fused(packs)
    perm_err = max(float((model.decode_target_fused([packs[i] for i in p]) - ref).abs().max())
                   for p in ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)))
    two = tiny_net(n_sources=2)
    a = packs[0]
    lin_err = float((two.decode_target_fused([a, a]) - two.decode_target_fused([a.scale(2.0), a.zeros_like()])).abs().max())

    sources = [make_domain(f"s{i}", Role.source(i), 8, seed=i) for i in (1, 2, 3)]
    target = make_domain("t", Role.target(), 8, seed=9, unlabeled=3)
    batch = plan_epoch(sources, target, 8).batches[0]
    leaks = []
    named = dict(model.named_parameters())

    def grads_of(value):
        g = torch.autograd.grad(value, list(named.values()), allow_unused=True, retain_graph=True)
        return {n: gi for n, gi in zip(named, g) if gi is not None and bool(gi.abs().max() > 0)}

    # source samples never reach the target decoder
    terms, _ = batch_loss(model, materialize(batch, sources, target, torch.float64), 1.0, 1.0)
    leaks += [n for n in grads_of(terms.source_seg) if n.startswith("target_decoder")]
    # swapping the source samples of sub-batch i leaves every other sub-network's gradient untouched
    base_grads = grads_of_all(model, materialize(batch, sources, target, torch.float64))
    for i, sb in enumerate(batch.sub_batches, start=1):
        others = tuple(x for x in sources[i - 1].ids if x not in sb.source_items)[:len(sb.source_items)]
        swapped = list(batch.sub_batches)
        swapped[i - 1] = SubBatch(i, others, sb.target_items)
        g = grads_of_all(model, materialize(Batch(tuple(swapped)), sources, target, torch.float64))
        own = (f"encoders.{i - 1}.", f"classifiers.{i - 1}.", f"source_decoders.{i - 1}.")
        leaks += [n for n in g if not n.startswith(own) and not torch.equal(g[n], base_grads[n])]
        assert not torch.equal(g[f"encoders.{i - 1}.stem.0.weight"], base_grads[f"encoders.{i - 1}.stem.0.weight"])
    elapsed = time.perf_counter() - t0
    ok = perm_err <= 1e-12 and lin_err <= 1e-5 and not leaks and elapsed < 60
    report(6, "fusion algebra and isolation", ok,
           f"permutation err {perm_err:.1e}, linearity err {lin_err:.1e}, {len(leaks)} leaks", t0)
    assert perm_err <= 1e-12
    assert lin_err <= 1e-5
    assert not leaks, leaks
    assert elapsed < 60


# ---------------------------------------------------------------- 7 and 10 tiny overfit

def overfit_run(out_csv):
    domains = gen_synthetic(SyntheticSpec(samples_per_domain=[4, 8, 8], image_size=64), seed=0)
    target, sources = domains[0], domains[1:]
    model = build_model(NetConfig(n_sources=2, base_width=8), seed=0)
    cfg = TrainConfig(epochs=200, seed=0)
    model, history = train(model, sources, target, None, cfg)
    history.to_csv(out_csv)
    return evaluate(model, target).mean("dice") / 100.0


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    out = []
    for k in range(2):
        t0 = time.perf_counter()
        score = overfit_run(root / f"run{k}" / "history.csv")
        out.append((score, root / f"run{k}" / "history.csv", time.perf_counter() - t0))
    return out


@pytest.mark.slow
def test_c07_tiny_overfit(overfit_runs):
    score, _, elapsed = overfit_runs[0]
    t0 = time.perf_counter() - elapsed
    ok = score > 0.95 and elapsed < 600
    report(7, "tiny overfit", ok, f"training-set Dice {score:.4f}", t0)
    assert score > 0.95
    assert elapsed < 600


@pytest.mark.slow
def test_c10_bitwise_reproducible_history(overfit_runs):
    t0 = time.perf_counter()
    first, second = (r[1].read_bytes() for r in overfit_runs)
    ok = first == second and len(first) > 0
    report(10, "reproducible history.csv", ok, f"{len(first)} bytes, identical={first == second}", t0)
    assert ok


# ---------------------------------------------------------------- 8 and 9 synthetic transfer suite

SUITE_MODES = ("multi-source-adversarial", "single-source-adversarial:1", "single-source-adversarial:2",
               "target-only", "no-independence")
SUITE_SEEDS = (0, 1, 2)


def suite_config(mode: str, seed: int, out) -> ExperimentConfig:
    """Limited-similarity suite: each source shares one disjoint cue with the target.

    150 target images split 0.4/0.1/0.5 give 60 training images, 90% of them
    unlabeled; sources hold 120 images each.
    """
    d = {
        "seed": seed,
        "mode": mode,
        "output_dir": str(out),
        "synthetic": {"samples_per_domain": [150, 120, 120], "image_size": 32},
        "net": {"base_width": 8},
        "train": {"epochs": 30, "n_sb": 8},
        "split": {"train_frac": 0.4, "val_frac": 0.1, "test_frac": 0.5, "unlabeled_frac": 0.9},
    }
    if mode.startswith("single-source"):
        d["mode"], idx = mode.split(":")
        d["source_index"] = int(idx)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def suite_scores(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    t0 = time.perf_counter()
    scores = {m: [] for m in SUITE_MODES}
    for seed in SUITE_SEEDS:
        for mode in SUITE_MODES:
            res = run(suite_config(mode, seed, root / f"{mode.replace(':', '-')}_{seed}"))
            scores[mode].append(res.report.mean("dice"))
    means = {m: float(np.mean(v)) for m, v in scores.items()}
    for m in SUITE_MODES:
        print(f"  {m:30s} " + " ".join(f"{v:6.2f}" for v in scores[m]) + f"  mean {means[m]:6.2f}")
    return means, time.perf_counter() - t0


@pytest.mark.slow
def test_c08_directional_transfer(suite_scores):
    means, elapsed = suite_scores
    t0 = time.perf_counter() - elapsed
    multi, target_only = means["multi-source-adversarial"], means["target-only"]
    best_single = max(means["single-source-adversarial:1"], means["single-source-adversarial:2"])
    ok = multi > best_single > target_only and multi - target_only >= 3.0 and elapsed < 7200
    report(8, "directional transfer", ok,
           f"multi {multi:.2f} > best single {best_single:.2f} > target-only {target_only:.2f}, "
           f"margin {multi - target_only:.2f}", t0)
    assert multi > best_single > target_only
    assert multi - target_only >= 3.0
    assert elapsed < 7200


@pytest.mark.slow
def test_c09_independence_ablation(suite_scores):
    means, elapsed = suite_scores
    t0 = time.perf_counter()
    multi, mixed = means["multi-source-adversarial"], means["no-independence"]
    ok = mixed < multi
    report(9, "independence ablation", ok, f"no-independence {mixed:.2f} < multi {multi:.2f}", t0)
    assert mixed < multi

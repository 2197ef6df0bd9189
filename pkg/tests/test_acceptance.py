"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``acceptance`` fixture; the lines
are printed in the terminal summary.  Tolerances are fixed constants below.
"""
import math
import time
from collections import OrderedDict

import numpy as np
import pytest

from sdanet.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from sdanet.data import generate_density_map, load_dataset, read_index
from sdanet.inference import evaluate_params, predict_array
from sdanet.losses import evaluate_metrics, loss_att, loss_map, total_loss
from sdanet.model import ModelConfig, ModelParams, build_model, forward, hfe_forward, param_count
from sdanet.synthetic import write_dataset
from sdanet.tensor import (
    Tensor, add, backward, concat_channels, conv2d, mul, relu, same_padding, scale, sigmoid,
    slice_channels, square, sub_const, sum_all, sum_per_sample,
)
from sdanet.train import TrainConfig, train

from oracles import central_difference, rel_error, sdanet_param_count

FD_STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
GRAD_BUDGET_S = 120.0
MASS_TOL = 1e-3
OVERFIT = dict(steps=1000, lr=1e-4, batch_size=4, sigma=2.0, seed=0)
OVERFIT_REL_ERR = 0.10
OVERFIT_MAE = 1.5
OVERFIT_BUDGET_S = 600.0
ROUND_TRIP_TOL = 1e-6


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    index = write_dataset(root, n_train=4, n_test=0, seed=0)
    return index, load_dataset(index, "train", 1)


def _train(samples, **model_flags):
    cfg = TrainConfig(model=ModelConfig.tiny(**model_flags), **OVERFIT)
    t0 = time.perf_counter()
    params, log = train(cfg, samples)
    return params, log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def overfit_run(overfit_data):
    return _train(overfit_data[1])


def _final_training_loss(params, samples):
    x = np.stack([s.image for s in samples])
    d = np.stack([generate_density_map(s.heads, s.image.shape[1], s.image.shape[2],
                                       OVERFIT["sigma"]).grid for s in samples])
    return total_loss(forward(params, x), d).total.item()


def _randomized(cfg, seed, std=0.3):
    params = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.tensors.items():
        t.data[...] = rng.normal(0, std, t.shape) + (0.05 if name.endswith("bias") else 0.0)
    return params


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def _op_cases(rng):
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    cases = []
    for k in (1, 3, 5, 7):
        for d in (1, 2):
            x, w, b = leaf(1, 2, 6, 5), leaf(2, 2, k, k), leaf(1, 2, 1, 1)
            cases.append((f"conv2d k{k} d{d}",
                          lambda x=x, w=w, b=b, k=k, d=d: conv2d(x, w, b, d, same_padding(k, d)),
                          [x, w, b]))
    a, c, one = leaf(2, 3, 4, 4), leaf(2, 3, 4, 4), leaf(2, 1, 4, 4)
    gt = rng.random((2, 1, 4, 4))
    p1, p2 = Tensor(rng.random((2, 1, 4, 4)), requires_grad=True), Tensor(rng.random((2, 1, 4, 4)),
                                                                          requires_grad=True)
    cases += [
        ("relu", lambda: relu(a), [a]),
        ("sigmoid", lambda: sigmoid(a), [a]),
        ("concat", lambda: concat_channels([a, one, c]), [a, one, c]),
        ("slice", lambda: slice_channels(a, 1, 3), [a]),
        ("add", lambda: add(a, c), [a, c]),
        ("add broadcast", lambda: add(a, one), [a, one]),
        ("mul", lambda: mul(a, c), [a, c]),
        ("mul broadcast", lambda: mul(a, one), [a, one]),
        ("scale", lambda: scale(a, -1.7), [a]),
        ("sub_const", lambda: sub_const(a, np.ones(a.shape)), [a]),
        ("square", lambda: square(a), [a]),
        ("sum_per_sample", lambda: sum_per_sample(a), [a]),
        ("loss_att", lambda: loss_att(p1, gt), [p1]),
        ("loss_map", lambda: loss_map(p2, gt)[2], [p2]),
    ]
    return cases


def _fd_error(build, leaves):
    for t in leaves:
        t.grad = None
    backward(build())
    numeric = central_difference(lambda: build().item(), [t.data for t in leaves], h=FD_STEP)
    return rel_error([t.grad for t in leaves], numeric)


def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    op_errors = {}
    for name, fn, leaves in _op_cases(rng):
        weights = Tensor(rng.normal(size=fn().shape))
        op_errors[name] = _fd_error(lambda fn=fn, weights=weights: sum_all(mul(fn(), weights)), leaves)

    params = _randomized(ModelConfig.tiny(), 5)
    data_rng = np.random.default_rng(11)
    x = data_rng.random((1, 1, 8, 8))
    gt = data_rng.random((1, 8, 8)) * 0.1
    model_err = _fd_error(lambda: total_loss(forward(params, x), gt).total, list(params.tensors.values()))
    elapsed = time.perf_counter() - t0

    worst = max(op_errors, key=op_errors.get)
    ok = max(op_errors.values()) <= OP_TOL and model_err <= MODEL_TOL and elapsed < GRAD_BUDGET_S
    acceptance.record(1, ok, f"worst op {worst} {op_errors[worst]:.1e} (tol {OP_TOL:g}), "
                             f"model {model_err:.1e} (tol {MODEL_TOL:g}), {elapsed:.0f}s")
    assert ok, (op_errors, model_err, elapsed)


# ---------------------------------------------------------------------------
# 2. mass conservation
# ---------------------------------------------------------------------------

def test_criterion_2_mass_conservation(acceptance):
    rng = np.random.default_rng(2)
    worst, border_cases = 0.0, 0
    for trial in range(100):
        H, W = (int(v) for v in rng.integers(16, 97, size=2))
        n = int(rng.integers(0, 51))
        heads = np.column_stack([rng.uniform(0, W - 1, n), rng.uniform(0, H - 1, n)])
        # force some heads onto edges and corners
        n_border = min(n, int(rng.integers(0, 6)))
        for i in range(n_border):
            heads[i] = [rng.choice([0.0, W - 1.0]), rng.uniform(0, H - 1)] if i % 2 else \
                       [rng.uniform(0, W - 1), rng.choice([0.0, H - 1.0])]
        border_cases += n_border > 0
        d = generate_density_map(heads, H, W, sigma=float(rng.uniform(1.0, 6.0)))
        worst = max(worst, abs(d.count - n))
    ok = worst <= MASS_TOL and border_cases > 0
    acceptance.record(2, ok, f"max |sum - count| {worst:.1e} over 100 sets "
                             f"({border_cases} with border heads)")
    assert ok


# ---------------------------------------------------------------------------
# 3. structural invariants
# ---------------------------------------------------------------------------

def test_criterion_3_structural_invariants(acceptance):
    rng = np.random.default_rng(3)
    failures = []
    for trial in range(6):
        cfg = ModelConfig.tiny()
        params = _randomized(cfg, 10 + trial, std=0.5)
        h, w = (int(v) for v in rng.integers(5, 20, size=2))
        x = rng.random((2, 1, h, w))
        out = forward(params, x)
        if any(t.shape[2:] != (h, w) for t in out.maps().values()):
            failures.append("resolution")
        if not np.all((out.F_att.data > 0) & (out.F_att.data < 1)):
            failures.append("F_att range")
        if np.any(out.D_C.data < 0) or np.any(out.D_F.data < 0):
            failures.append("negative density")

        # attention identity: F_att = 1 reproduces the model without the attention branch
        no_amg = ModelParams(ModelConfig.tiny(use_amg=False), OrderedDict(
            (k, t) for k, t in params.tensors.items() if not k.startswith("amg.")))
        a = forward(params, x, attention=np.ones((2, 1, h, w)))
        b = forward(no_amg, x)
        if not (np.array_equal(a.D_C.data, b.D_C.data) and np.array_equal(a.D_F.data, b.D_F.data)):
            failures.append("attention identity")

        # residual identity: zeroed HFE block internals pass features through unchanged
        zeroed = params.copy()
        for k, t in zeroed.tensors.items():
            if k.startswith("hfe.block"):
                t.data[...] = 0.0
        blocks, _, _ = hfe_forward(zeroed, out.F_M2)
        if not all(np.array_equal(blk.data, out.F_M2.data) for blk in blocks):
            failures.append("residual identity")
    ok = not failures
    acceptance.record(3, ok, "all invariants exact on 6 random models" if ok else f"broken: {failures}")
    assert ok


# ---------------------------------------------------------------------------
# 4. overfit reproduction
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_overfit(acceptance, overfit_data, overfit_run):
    index, samples = overfit_data
    params, _, elapsed = overfit_run
    rel = []
    for s in samples:
        pred = predict_array(params, s.image)
        rel.append(abs(pred.count - len(s.heads)) / len(s.heads))
    report = evaluate_params(params, read_index(index, "train"))
    mae = report.metrics.mae
    ok = max(rel) < OVERFIT_REL_ERR and mae < OVERFIT_MAE and elapsed < OVERFIT_BUDGET_S
    acceptance.record(4, ok, f"per-image rel err {', '.join(f'{r:.3f}' for r in rel)} "
                             f"(< {OVERFIT_REL_ERR}), MAE {mae:.2f} (< {OVERFIT_MAE}), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. attention separation
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_attention_separation(acceptance, overfit_data, overfit_run):
    _, samples = overfit_data
    params = overfit_run[0]
    radius = 2 * OVERFIT["sigma"]
    pairs = []
    for s in samples:
        att = forward(params, s.image[None]).F_att.data[0, 0]
        rr, cc = np.mgrid[0:att.shape[0], 0:att.shape[1]]
        near = np.zeros(att.shape, dtype=bool)
        for x, y in s.heads:
            near |= (cc - x) ** 2 + (rr - y) ** 2 <= radius ** 2
        pairs.append((att[near].mean(), att[~near].mean()))
    ok = all(inside > outside for inside, outside in pairs)
    acceptance.record(5, ok, "crowd vs background mean F_att: " +
                      ", ".join(f"{i:.3f}/{o:.3f}" for i, o in pairs))
    assert ok


# ---------------------------------------------------------------------------
# 6. ablation scaffolding
# ---------------------------------------------------------------------------

ABLATIONS = {"no-amg": {"use_amg": False}, "no-dense": {"use_dense": False},
             "no-refine": {"use_refine": False}}


@pytest.mark.slow
def test_criterion_6_ablations(acceptance, overfit_data, overfit_run):
    index, samples = overfit_data
    counts_ok = True
    for flags in [{}] + list(ABLATIONS.values()):
        cfg = ModelConfig(**flags)
        oracle = sdanet_param_count(amg=cfg.use_amg, dense=cfg.use_dense, refine=cfg.use_refine)
        counts_ok &= param_count(cfg) == build_model(cfg, seed=0).total() == oracle

    losses = {"full": _final_training_loss(overfit_run[0], samples)}
    for name, flags in ABLATIONS.items():
        params, _, _ = _train(samples, **flags)
        evaluate_params(params, read_index(index, "train"))
        losses[name] = _final_training_loss(params, samples)
    ordering_ok = all(losses["full"] <= v for v in losses.values())
    ok = counts_ok and ordering_ok
    counts = "param counts match oracle" if counts_ok else "param count mismatch"
    acceptance.record(6, ok, f"{counts}; final loss " + ", ".join(f"{k} {v:.4f}" for k, v in losses.items()))
    assert ok, losses


# ---------------------------------------------------------------------------
# 7. determinism and persistence
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_determinism(acceptance, overfit_data, overfit_run, tmp_path):
    _, samples = overfit_data
    short = TrainConfig(steps=25, lr=1e-4, batch_size=4, sigma=2.0, seed=7, model=ModelConfig.tiny())
    first = checkpoint_bytes(train(short, samples)[0])
    second = checkpoint_bytes(train(short, samples)[0])
    identical = first == second

    params = overfit_run[0]
    save_checkpoint(params, params.config, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = np.stack([s.image for s in samples])
    a, b = forward(params, x).maps(), forward(loaded, x).maps()
    worst = max(np.abs(a[k].data - b[k].data).max() / max(np.abs(a[k].data).max(), 1e-300) for k in a)
    ok = identical and worst <= ROUND_TRIP_TOL
    acceptance.record(7, ok, f"repeat run bit-identical: {identical}; "
                             f"round-trip max rel diff {worst:.1e} (tol {ROUND_TRIP_TOL:g})")
    assert ok


# ---------------------------------------------------------------------------
# 8. metric oracle
# ---------------------------------------------------------------------------

def test_criterion_8_metrics(acceptance):
    rng = np.random.default_rng(8)
    exact, dominates = 0, 0
    for _ in range(10):
        n = int(rng.integers(1, 41))
        truth = rng.integers(0, 500, size=n).astype(float)
        pred = np.clip(truth + rng.normal(0, 20, size=n), 0, None)
        abs_total, sq_total = 0.0, 0.0
        for p, t in zip(pred.tolist(), truth.tolist()):
            e = t - p
            abs_total += abs(e)
            sq_total += e * e
        m = evaluate_metrics(zip(pred, truth))
        exact += m.mae == abs_total / n and m.mse == math.sqrt(sq_total / n)
        dominates += m.mse >= m.mae
    ok = exact == 10 and dominates == 10
    acceptance.record(8, ok, f"{exact}/10 lists exact, MSE >= MAE in {dominates}/10")
    assert ok

"""Acceptance gate: one test per criterion, each printing a single verdict line.

The desk-scale training runs take minutes; they carry the ``slow`` marker
but are part of the default run.
"""
import time
import warnings

import numpy as np
import pytest

from dmreg import deformer, io
from dmreg.config import DeformerConfig, LossWeights, desk_config, toy_config
from dmreg.engine import Tensor
from dmreg.gradcheck import THRESHOLDS, model_suite, operation_suite
from dmreg.losses import ncc_local, smoothness, total_loss
from dmreg.metrics import dice, jacobian_determinant, jacobian_stats
from dmreg.model import DMRNet
from dmreg.synthetic import gen_synthetic_pair
from dmreg.trainer import PairDataset, evaluate_pair, mean_ncc, register, train
from dmreg.warp import identity_grid, warp_trilinear

TRAIN_SEEDS = tuple(range(5))
HELD_OUT_SEEDS = tuple(range(100, 105))
DESK_BUDGET_S = 15 * 60
ABLATION_SEEDS = tuple(range(5))
ABLATION_ITERATIONS = 100


# -- 1: gradients ----------------------------------------------------------------------------

def test_gradient_suite(report_criterion):
    t0 = time.process_time()
    ops = operation_suite("float64")
    model = model_suite(toy_config(), size=16)
    cpu = time.process_time() - t0
    worst_name, worst = max({**ops, **{f"param {k}": v for k, v in model.items()}}.items(), key=lambda kv: kv[1])
    ok = worst < THRESHOLDS["float64"] and cpu < 300
    report_criterion(1, ok, f"gradient suite: {len(ops)} ops + {len(model)} parameter tensors, "
                            f"max rel err {worst:.2e} ({worst_name}), {cpu:.0f} s CPU")
    assert worst < 1e-4
    assert cpu < 300


# -- 2: Deformer algebra --------------------------------------------------------------------------

def loop_combine(v, w):
    """Per-voxel scalar accumulation of the weighted bases, averaged over heads."""
    B, K, N, _, d, ww, h = v.shape
    u = np.zeros((B, 3, d, ww, h))
    for b in range(B):
        for x, y, z in np.ndindex(d, ww, h):
            acc = np.zeros(3)
            for i in range(K):
                for j in range(N):
                    acc += w[b, i, j, x, y, z] * v[b, i, j, :, x, y, z]
            u[b, :, x, y, z] = acc / K
    return u


def test_deformer_algebra(report_criterion):
    rng = np.random.default_rng(2024)
    worst_rel, worst_sum = 0.0, 0.0
    for _ in range(200):
        K, N = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        n = int(rng.integers(1, 5))
        C = int(rng.integers(1, 6))
        cfg = DeformerConfig(heads=K, bases=N, basis_init_std=1.0)
        params = deformer.init_params(cfg, [C], rng, np.float64)
        fm = Tensor(rng.standard_normal((1, C, n, n, n)))
        ff = Tensor(rng.standard_normal((1, C, n, n, n)))
        v = deformer.compute_bases(fm, None, params, cfg, 1)
        w = deformer.compute_weights(fm, ff, params, cfg, 1)
        u = deformer.combine(v, w).data
        ref = loop_combine(v.data, w.data)
        worst_rel = max(worst_rel, float(np.max(np.abs(u - ref) / np.maximum(np.abs(ref), 1e-12))))
        worst_sum = max(worst_sum, float(np.abs(w.data.sum(axis=2) - 1).max()))
    cfg_b = DeformerConfig(heads=8, bases=64, mode="variant_b")
    vb = deformer.compute_bases(Tensor(rng.standard_normal((2, 4, 4, 4, 4))), None,
                                deformer.init_params(cfg_b, [4], rng, np.float64), cfg_b, 1).data
    axes = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=float).reshape(1, 1, 3, 3, 1, 1, 1)
    exact_b = vb.shape == (2, 8, 3, 3, 4, 4, 4) and np.array_equal(vb, np.broadcast_to(axes, vb.shape))
    ok = worst_rel <= 1e-6 and worst_sum <= 1e-5 and exact_b
    report_criterion(2, ok, f"Deformer algebra: 200 instances, max rel err {worst_rel:.1e}, "
                            f"max |sum w - 1| {worst_sum:.1e}, axis bases exact: {exact_b}")
    assert ok


# -- 3: warp and Jacobian oracles -----------------------------------------------------------------

def test_warp_and_jacobian_oracles(report_criterion):
    rng = np.random.default_rng(3)
    n = 10
    v = rng.random((1, 1, n, n, n))
    ident = float(np.abs(warp_trilinear(Tensor(v), Tensor(np.zeros((1, 3, n, n, n)))).data - v).max())
    zero_stats = jacobian_stats(np.zeros((3, n, n, n)))
    dilation = jacobian_determinant(0.1 * identity_grid((n, n, n)))
    dil_err = float(np.abs(dilation - 1.331).max())
    shift_ok = True
    for shift in [(1, 0, 0), (0, -2, 1), (2, 1, -3)]:
        u = np.broadcast_to(np.array(shift, float).reshape(1, 3, 1, 1, 1), (1, 3, n, n, n)).copy()
        out = warp_trilinear(Tensor(v), Tensor(u)).data[0, 0]
        src = [slice(max(s, 0), n + min(s, 0)) for s in shift]
        dst = [slice(max(-s, 0), n + min(-s, 0)) for s in shift]
        shift_ok &= np.array_equal(out[tuple(dst)], v[0, 0][tuple(src)])
    ok = (ident <= 1e-6 and zero_stats == {"pct_nonpositive": 0.0, "std_det": 0.0}
          and dil_err <= 1e-5 and shift_ok)
    report_criterion(3, ok, f"warp/Jacobian: identity err {ident:.1e}, zero-field stats {zero_stats}, "
                            f"dilation det err {dil_err:.1e}, integer shifts exact: {shift_ok}")
    assert ok


# -- 4: objective properties ----------------------------------------------------------------

def test_objective_properties(report_criterion):
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(4)

    def smooth(n=16):
        return Tensor(gaussian_filter(rng.standard_normal((n, n, n)), 1.5)[None, None])

    V, W = smooth(), smooth()
    self_err = abs(float(ncc_local(V, V).data) + 1)
    base = float(ncc_local(V, W).data)
    affine_err = max(abs(float(ncc_local(Tensor(a * V.data + b), W).data) - base)
                     for a, b in [(0.3, 2.0), (4.0, -1.0), (1.7, 0.0)])
    affine_err = max(affine_err, abs(float(ncc_local(V, Tensor(2.5 * V.data - 0.3)).data) + 1))
    const = Tensor(np.broadcast_to(np.array([0.4, -1.0, 2.0]).reshape(1, 3, 1, 1, 1), (1, 3, 8, 8, 8)).copy())
    smooth_const = float(smoothness(const).data)

    def fields(n, scale):
        return [Tensor(scale * rng.standard_normal((1, 3) + (n >> l,) * 3)) for l in range(1, 5)]

    out = total_loss(V, W, Tensor(rng.standard_normal((1, 3, 16, 16, 16))), fields(16, 1.0),
                     LossWeights(lam=0.5, betas=(1.0, 0.5, 0.25, 2.0)))
    breakdown_err = abs(sum(out.terms.values()) - float(out.total.data))
    violations = 0
    for _ in range(100):
        betas = tuple(rng.uniform(0, 3, 4))
        w = LossWeights(lam=float(rng.uniform(0, 5)), betas=betas, ncc_window=5)
        M = Tensor(rng.random((1, 1, 16, 16, 16)))
        Fx = M if rng.random() < 0.5 else Tensor(rng.random((1, 1, 16, 16, 16)))
        scale = float(rng.uniform(0, 4))
        t = float(total_loss(M, Fx, Tensor(scale * rng.standard_normal((1, 3, 16, 16, 16))), fields(16, scale), w)
                  .total.data)
        violations += t < -(1 + sum(betas)) - 1e-9
    ok = self_err <= 1e-4 and affine_err <= 1e-4 and smooth_const == 0 and breakdown_err <= 1e-6 and not violations
    report_criterion(4, ok, f"objectives: self-NCC err {self_err:.1e}, affine err {affine_err:.1e}, "
                            f"const smoothness {smooth_const}, breakdown err {breakdown_err:.1e}, "
                            f"lower-bound violations {violations}/100")
    assert ok


# -- 5: desk-scale training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run():
    train_pairs = [gen_synthetic_pair(s) for s in TRAIN_SEEDS]
    held_out = [gen_synthetic_pair(s) for s in HELD_OUT_SEEDS]
    cfg = desk_config()
    t0 = time.process_time()
    initial = mean_ncc(DMRNet(cfg), [(p.moving, p.fixed) for p in train_pairs])
    result = train(cfg, PairDataset.from_synthetic(train_pairs))
    final = mean_ncc(result.model, [(p.moving, p.fixed) for p in train_pairs])
    rows = [evaluate_pair(result.model, p.moving, p.fixed, p.moving_labels, p.fixed_labels) for p in held_out]
    cpu = time.process_time() - t0
    baseline = float(np.mean([dice(p.moving_labels, p.fixed_labels)[1] for p in held_out]))
    return {
        "model": result.model, "held_out": held_out, "initial": initial, "final": final, "cpu": cpu,
        "baseline": baseline, "dice": float(np.mean([r["mean_dice"] for r in rows])),
        "jac": float(np.mean([r["pct_nonpos_jac"] for r in rows])),
        "jac_max": float(np.max([r["pct_nonpos_jac"] for r in rows])),
    }


@pytest.mark.slow
def test_desk_scale_training(desk_run, report_criterion):
    r = desk_run
    a = r["final"] <= 0.7 * r["initial"]
    gain = r["dice"] - r["baseline"]
    b = gain >= 0.10
    c = r["jac"] < 5.0
    t = r["cpu"] < DESK_BUDGET_S
    report_criterion(5, a and b and c and t,
                     f"desk run: (a) main NCC {r['initial']:.3f} -> {r['final']:.3f} [{'ok' if a else 'no'}]; "
                     f"(b) held-out Dice {r['baseline']:.3f} -> {r['dice']:.3f}, gain {gain:+.3f} "
                     f"[{'ok' if b else 'no'}]; (c) non-positive Jacobian {r['jac']:.2f}% "
                     f"(worst pair {r['jac_max']:.2f}%) [{'ok' if c else 'no'}]; {r['cpu']:.0f} s CPU")
    assert a, "main NCC did not fall to 0.7 of its initial value"
    assert b, f"held-out Dice gain {gain:.3f} < 0.10"
    assert c
    assert t


@pytest.mark.slow
def test_self_pairs_move_less_than_distinct_pairs(desk_run):
    model = desk_run["model"]
    same = [np.abs(register(model, p.fixed, p.fixed).u_final).mean() for p in desk_run["held_out"]]
    distinct = [np.abs(register(model, p.moving, p.fixed).u_final).mean() for p in desk_run["held_out"]]
    assert np.mean(same) < np.mean(distinct)


# -- 6: scale ablation (soft) ------------------------------------------------------------------

@pytest.mark.slow
def test_scale_ablation_trend(report_criterion):
    full_cfg = desk_config(iterations=ABLATION_ITERATIONS)
    coarse_cfg = full_cfg.replace(active_scales=(False, False, False, True))
    wins, lines = 0, []
    for seed in ABLATION_SEEDS:
        train_pairs = [gen_synthetic_pair(1000 * (seed + 1) + k) for k in range(5)]
        held = [gen_synthetic_pair(1000 * (seed + 1) + 500 + k) for k in range(3)]
        data = PairDataset.from_synthetic(train_pairs)
        scores = []
        for cfg in (full_cfg, coarse_cfg):
            model = train(cfg.replace(seed=seed), data).model
            scores.append(np.mean([evaluate_pair(model, p.moving, p.fixed, p.moving_labels, p.fixed_labels)
                                   ["mean_dice"] for p in held]))
        wins += scores[0] >= scores[1] - 0.01
        lines.append(f"{scores[0]:.3f}/{scores[1]:.3f}")
    ok = wins >= 4
    report_criterion(6, ok, f"scale ablation ({ABLATION_ITERATIONS} iterations per run), all-scales/coarsest-only "
                            f"Dice per seed {' '.join(lines)}: {wins}/5 seeds within 0.01 or better", soft=True)
    if not ok:
        warnings.warn(f"ablation trend held in only {wins}/5 seeds", stacklevel=1)


# -- 7: determinism and persistence ------------------------------------------------------------

def test_determinism_and_persistence(tmp_path, report_criterion):
    pairs = [gen_synthetic_pair(s) for s in (7, 8)]
    data = PairDataset.from_synthetic(pairs)
    cfg = desk_config(iterations=6)
    a, b = train(cfg, data), train(cfg, data)
    same = all(a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes() for k in a.model.params)
    same &= [r["total"] for r in a.history] == [r["total"] for r in b.history]
    part = train(cfg, data, out_dir=tmp_path, iterations=3)
    resumed = train(cfg, data, out_dir=tmp_path, resume=part.checkpoint)
    resume_ok = all(a.model.params[k].data.tobytes() == resumed.model.params[k].data.tobytes()
                    for k in a.model.params)
    resume_ok &= [r["total"] for r in a.history[3:]] == [r["total"] for r in resumed.history]
    p = pairs[0]
    formats_ok = True
    for arr in (p.fixed, p.moving_labels, p.u_gt):
        path = tmp_path / "x.dmrv"
        io.write_volume(arr, path)
        formats_ok &= io.read_volume(path).tobytes() == arr.tobytes()
    blob = (tmp_path / "final.dmrc").read_bytes()
    ck = io.decode_checkpoint(blob)
    formats_ok &= io.encode_checkpoint(ck.config, ck.tensors, ck.optimizer) == blob
    ok = same and resume_ok and formats_ok
    report_criterion(7, ok, f"determinism: repeat run bitwise {same}, resume bitwise {resume_ok}, "
                            f"formats round-trip {formats_ok}")
    assert ok


# -- 8: zero-init identity --------------------------------------------------------------------

def test_zero_init_identity(report_criterion):
    p = gen_synthetic_pair(42)
    net = DMRNet(desk_config())
    u = net.forward(p.moving, p.fixed, training=False).u_final.data
    reg = register(net, p.moving, p.fixed, p.moving_labels)
    err = float(np.abs(reg.warped - p.moving).max())
    ok = not np.any(u) and not np.any(reg.u_final) and err <= 1e-6 \
        and np.array_equal(reg.warped_labels, p.moving_labels)
    report_criterion(8, ok, f"zero-init identity: max |u| {np.abs(u).max():.1e}, warped-moving err {err:.1e}")
    assert ok

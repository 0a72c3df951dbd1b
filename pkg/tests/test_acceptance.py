"""The ten acceptance criteria, each at its stated tolerance and time budget."""

import time

import numpy as np
import pytest

from geowaveformer import attention as A
from geowaveformer import graph_op as GO
from geowaveformer import rollout as R
from geowaveformer import tensor as T
from geowaveformer import train as TR
from geowaveformer import waveformer as W
from geowaveformer import wavelet as wv
from geowaveformer.cli import format_table, write_table
from geowaveformer.geometry import PointCloud, build_latent_grid
from geowaveformer.tensor import Tensor
from geowaveformer.uq import EnsembleSpec, ensemble_run

from conftest import ACCEPTANCE_LINES, checkable_parameters
from oracles import adam_scalar, attention_loop, multi_head_loop
from test_graph_op import decoder_oracle, encoder_oracle, randomize_biases, small_geometry


def report(number, title, ok, detail, started):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail} ({time.perf_counter() - started:.1f} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_wavelet_reconstruction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in range(1, 7):
        for levels in (1, 2, 3):
            for shape in ((128,), (64, 48)):
                x = rng.standard_normal(shape)
                back = wv.dwt_inverse(wv.dwt_forward(x, f"db{n}", levels))
                worst = max(worst, float(np.max(np.abs(back - x))))
    c = wv.dwt_forward(np.full((32, 16), -2.5), "db1", 3)
    detail_max = max(float(np.max(np.abs(v))) for lvl in c.details for v in lvl.values())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and detail_max < 1e-12 and elapsed < 5
    report(1, "wavelet perfect reconstruction", ok,
           f"max error {worst:.2e}, Haar detail on constant {detail_max:.1e}", t0)


def test_criterion_02_gradient_integrity():
    t0 = time.perf_counter()
    errs = {}

    def note(kind, e):
        errs[kind] = max(errs.get(kind, 0.0), e)

    def fd(*args, **kw):
        # step 1e-5: at 1e-6 rounding noise swamps near-zero true derivatives
        return T.finite_diff_check(*args, eps=1e-5, **kw)

    for seed in range(5):
        rng = np.random.default_rng(seed)
        # kernel integration (encoder and decoder stacks)
        cloud, grid, geo, _ = small_geometry(seed, n=12, res=(3, 3, 3))
        enc = GO.GraphEncoder.build(1, (3, 2), 3, rng)
        dec = GO.GraphDecoder.build(2, (3, 2), 1, 3, rng)
        a = Tensor(rng.standard_normal((12, 1)))

        def graph_fn(x):
            return GO.decode(GO.encode(x, geo, enc), geo, dec)

        note("kernel integration", fd(graph_fn, a, seed=seed))
        note("kernel integration", fd(graph_fn, a, seed=seed, wrt=enc.parameters() + dec.parameters(),
                                                       max_coords=6))
        # attention blocks
        eb, db = A.EncoderBlock(4, 2, 6, rng), A.DecoderBlock(4, 2, 6, rng)
        x, m = Tensor(rng.uniform(-1, 1, (3, 4))), Tensor(rng.uniform(-1, 1, (2, 4)))

        def attn_fn(v):
            return A.decoder_block(v, A.encoder_block(m, eb), db)

        note("attention", fd(attn_fn, x, seed=seed))
        params = checkable_parameters(eb) + checkable_parameters(db)
        note("attention", fd(attn_fn, x, seed=seed, wrt=params, max_coords=8))
        # integral layer and lifts
        wf = W.Waveformer(2, 2, (4, 4), width=2, lift_hidden=5, token_dim=8, heads=2, ff=8, n_enc=1, n_dec=1,
                          rng=rng, wavelet="db2")
        lifted = Tensor(rng.uniform(-1, 1, (3, 4, 4, 2)))
        v = Tensor(rng.uniform(-1, 1, (3, 4, 4, 2)))

        def integral_fn(u):
            return wf.integral_layer(u[:-1], u[1:])

        note("integral layer", fd(integral_fn, v, seed=seed, max_coords=30))
        note("integral layer", fd(integral_fn, v, seed=seed,
                                                   wrt=checkable_parameters(wf.wave_tf) + checkable_parameters(wf.phys_tf), max_coords=6))
        note("lifts", fd(wf.lift, lifted, seed=seed))
        note("lifts", fd(wf.lift, lifted, seed=seed, wrt=wf.P.parameters()))
        note("lifts", fd(wf.project, v, seed=seed, wrt=[v] + wf.Q.parameters()))
        # reduction / expansion
        red = W.ReductionBlock(2, (4, 4, 4), (2, 2), rng=rng)
        exp = W.ExpansionBlock(red, 2, rng=rng)
        xr = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4, 2)))

        def conv_fn(u):
            return exp(red(u))

        note("reduction/expansion", fd(conv_fn, xr, seed=seed))
        note("reduction/expansion", fd(conv_fn, xr, seed=seed,
                                                        wrt=red.parameters() + exp.parameters(), max_coords=10))
    worst = max(errs.values())
    elapsed = time.perf_counter() - t0
    report(2, "gradient integrity", worst < 1e-4 and elapsed < 120,
           ", ".join(f"{k} {e:.1e}" for k, e in errs.items()), t0)


def test_criterion_03_kernel_sum_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for cfg in range(10):
        n = 20 + 3 * cfg
        cloud, grid, geo, rng = small_geometry(100 + cfg, n=n, res=(3 + cfg % 2, 4, 3 + cfg % 3))
        enc = GO.GraphEncoder.build(2, (3, 3), 4, rng)
        dec = GO.GraphDecoder.build(3, (3, 2), 2, 4, rng)
        randomize_biases(enc, rng)
        randomize_biases(dec, rng)
        a = rng.standard_normal((n, 2))
        latent = rng.standard_normal((grid.n_nodes, 3))
        worst = max(worst, float(np.max(np.abs(GO.encode(a, geo, enc).data - encoder_oracle(enc, a, geo)))),
                    float(np.max(np.abs(GO.decode(latent, geo, dec).data - decoder_oracle(dec, latent, geo)))))
    elapsed = time.perf_counter() - t0
    report(3, "kernel-sum oracle equivalence", worst < 1e-6 and elapsed < 30,
           f"10 configurations, max deviation {worst:.1e}", t0)


def test_criterion_04_resolution_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (8000, 3))
    cloud = PointCloud(pts)
    f = np.sin(2 * np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1]) + 0.5 * np.sin(np.pi * pts[:, 2])
    errors = []
    for s in (8, 16, 32):
        grid = build_latent_grid(cloud, (s, s, s), 0.05)
        h = grid.spacing.max()
        geo = GO.build_geometry_graphs(cloud, grid, radius=1.5 * h, decode_radius=1.5 * h, cap=64)
        lat = GO.encode(f[:, None], geo, GO.GraphEncoder.averaging(1))
        back = GO.decode(lat, geo, GO.GraphDecoder.averaging(1)).data[:, 0]
        errors.append(float(np.linalg.norm(back - f) / np.linalg.norm(f)))
    elapsed = time.perf_counter() - t0
    ok = errors[0] > errors[1] > errors[2] and elapsed < 60
    report(4, "encoder/decoder resolution consistency", ok,
           "round-trip L2 " + " > ".join(f"{e:.3f}" for e in errors) + " at 8^3, 16^3, 32^3", t0)


def test_criterion_05_attention_contracts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    row_err, loop_err, causal_err = 0.0, 0.0, 0.0
    for _ in range(10):
        q, k, v = rng.standard_normal((3, 6, 8)) * rng.uniform(0.1, 30)
        out, w = A.scaled_dot_attention(q, k, v, return_weights=True)
        row_err = max(row_err, float(np.max(np.abs(w.data.sum(axis=-1) - 1))))
        store = []
        T.attention_core(q, k, v, heads=2, causal=True, weights_out=store)
        row_err = max(row_err, float(np.max(np.abs(store[0].sum(axis=-1) - 1))))
        loop_err = max(loop_err, float(np.max(np.abs(out.data - attention_loop(q, k, v)))))
        mha = A.MultiHeadAttention(8, 2, rng)
        arrays = [p.data for p in (mha.wq.weight, mha.wq.bias, mha.wk.weight, mha.wk.bias,
                                   mha.wv.weight, mha.wv.bias, mha.wo.weight, mha.wo.bias)]
        for causal in (False, True):
            got = mha(q, causal=causal).data
            loop_err = max(loop_err, float(np.max(np.abs(got - multi_head_loop(q, q, *arrays, heads=2, causal=causal)))))
    blk = A.DecoderBlock(8, 2, 8, np.random.default_rng(0))
    for case in range(20):
        n = 3 + case % 5
        t = int(rng.integers(0, n - 1))
        x, enc = rng.standard_normal((n, 8)), rng.standard_normal((3, 8))
        y = x.copy()
        y[t + 1:] += rng.standard_normal((n - t - 1, 8))
        causal_err = max(causal_err, float(np.max(np.abs(blk(x, enc).data[:t + 1] - blk(y, enc).data[:t + 1]))))
    ok = row_err < 1e-6 and loop_err < 1e-6 and causal_err < 1e-12
    report(5, "attention contracts", ok,
           f"row sums {row_err:.1e}, loop deviation {loop_err:.1e}, 20 causal cases max leak {causal_err:.1e}", t0)


def test_criterion_06_rollout_laws(tiny_setup):
    t0 = time.perf_counter()
    ds, model, stats = tiny_setup
    traj = stats.apply(ds.fields[0])
    k = model.config.window
    window = [traj[i] for i in range(k)]
    trace = []
    preds = R.predict_steps(model, window, 6, trace=trace)
    seq = window + preds
    sliding = len(trace) == 6 and all(len(w) == k and all(a is b for a, b in zip(w, seq[i:i + k]))
                                      for i, w in enumerate(trace))
    u0 = stats.apply(ds.fields[1])[0]
    bitwise = np.array_equal(R.progressive_predict(model, u0, 1)[0].data, model.predict_next([u0] * k).data)
    report(6, "roll-out laws", sliding and bitwise,
           f"sliding trace over 6 steps {'exact' if sliding else 'broken'}, "
           f"progressive n=1 {'bit-identical' if bitwise else 'differs'}", t0)


def test_criterion_07_end_to_end_benchmark(tube_benchmark):
    t0 = time.perf_counter()
    res = tube_benchmark
    quality = res["test_pct"] < 10 and res["improvement"] >= 5
    fast = res["runtime_s"] < 15 * 60
    report(7, "synthetic tube benchmark", quality and fast,
           f"held-out {res['test_pct']:.2f}% vs untrained {res['untrained_test_pct']:.2f}% "
           f"({res['improvement']:.1f}x), runtime {res['runtime_s']:.0f} s", t0)


def test_criterion_08_optimizer_and_schedule():
    t0 = time.perf_counter()
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = TR.AdamState()
    traj = []
    for _ in range(5):
        p.grad = p.data.copy()
        TR.adam_step({"p": p}, state, 0.1)
        traj.append(float(p.data[0]))
    err = float(np.max(np.abs(np.array(traj) - adam_scalar(1.0, lambda t: t, 0.1, 5))))
    cfg = TR.TrainConfig()
    exact = TR.lr_at(5, cfg) == 0.6 * cfg.lr and TR.lr_at(10, cfg) == 0.36 * cfg.lr
    report(8, "optimizer and schedule", err < 1e-12 and exact,
           f"Adam deviation {err:.1e} over 5 steps, schedule {'exact' if exact else 'off'}", t0)


def test_criterion_09_uq_degeneracy_and_scaling(tube_benchmark):
    t0 = time.perf_counter()
    model, stats, ds = tube_benchmark["model"], tube_benchmark["stats"], tube_benchmark["dataset"]
    u0 = ds.fields[ds.splits["test"][0]][0]
    n = 20
    with T.no_grad():
        det = stats.invert(R.to_numpy(R.progressive_predict(model, stats.apply(u0), n)))
    zero = ensemble_run(model, u0, EnsembleSpec(size=100, alpha=0.0, seed=1), n, stats)
    degenerate = not np.any(zero.std)
    dev = {}
    for alpha in (1e-2, 1e-3):
        fs = ensemble_run(model, u0, EnsembleSpec(size=100, alpha=alpha, seed=1), n, stats)
        dev[alpha] = float(np.linalg.norm(fs.mean - det) / np.linalg.norm(det))
    elapsed = time.perf_counter() - t0
    ok = degenerate and dev[1e-3] < dev[1e-2] and elapsed < 300
    report(9, "UQ degeneracy and scaling", ok,
           f"alpha=0 std {'all zero' if degenerate else 'nonzero'}, mean deviation "
           f"{dev[1e-2]:.2e} (1e-2) -> {dev[1e-3]:.2e} (1e-3)", t0)


def test_criterion_10_metric_and_table(tmp_path):
    t0 = time.perf_counter()
    truth = np.random.default_rng(10).standard_normal((4, 5, 2))
    fixtures = (TR.relative_mse(truth, truth) == 0.0 and TR.relative_mse(np.zeros_like(truth), truth) == 100.0
                and TR.relative_mse(1.1 * truth, truth) == pytest.approx(1.0, rel=1e-12))
    rows = [["tube pressure", 0.5, 1.25]]
    write_table(rows, tmp_path / "eval.csv")
    header = (tmp_path / "eval.csv").read_text().splitlines()
    text = format_table(rows).splitlines()
    layout = (header == ["Data set,Train error,Test error", "tube pressure,0.500,1.250"]
              and text[0].split() == ["Data", "set", "Train", "error", "Test", "error"]
              and text[-1].split() == ["tube", "pressure", "0.500%", "1.250%"])
    report(10, "metric definition and table layout", fixtures and layout,
           f"0/100/1% fixtures {'exact' if fixtures else 'off'}, table {'matches' if layout else 'differs'}", t0)

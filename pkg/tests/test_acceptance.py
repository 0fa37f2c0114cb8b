"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Budgets are reduced to fit a single CPU; see README for the settings and
measured values. Results are collected in ``RESULTS`` and printed by the
terminal-summary hook in ``conftest.py``.
"""

import csv
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from wigatr import autodiff as ad
from wigatr import diffusion as dif
from wigatr import ga, io
from wigatr import network as net
from wigatr.autodiff import Tensor, gradcheck
from wigatr.cli import main as cli_main
from wigatr.localization import OraclePowerModel, SurrogatePowerModel, localization_sweep, objective
from wigatr.raysim import REFLECT, SceneSpec, Tracer, generate_dataset, generate_scene, link_statistics, received_power, trace_paths
from wigatr.scene import Antenna, Scene
from wigatr.surrogate import IN_SCALARS, Surrogate
from wigatr.training import LinkTable, TrainConfig, data_efficiency_sweep, evaluate, predict_table, split_by_scene, train

from .oracles import apply, friis_db, product_table
from .test_ga import _random_pair
from .conftest import random_scene
from .test_network import _attend, _attention_inputs, _bilinear, _gradcheck_params, _points, act, internal, public, rand_mv

RESULTS: dict[int, tuple[bool, str]] = {}

# reduced surrogate used for criteria 3, 6, 7 and 9
SURROGATE = dict(blocks=2, mv_channels=8, scalar_channels=16, heads=4)
SURROGATE_TRAIN = dict(batch_size=32, lr=3e-3)


def report(k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = (bool(ok), detail)
    print(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="session")
def desk_table(tmp_path_factory):
    """200 scenes of one to three rooms, 2 tx x 25 rx each (10k links)."""
    out = tmp_path_factory.mktemp("desk")
    generate_dataset(0, 200, out, SceneSpec(tx_per_scene=2, rx_per_scene=25))
    return LinkTable.from_dataset(io.read_dataset(out / "dataset.jsonl"))


@pytest.fixture(scope="session")
def trained(desk_table):
    """gatr and transformer surrogates trained with the same budget."""
    out = {}
    for variant in ("gatr", "transformer"):
        t0 = time.perf_counter()
        cfg = net.ModelConfig(variant, **SURROGATE)
        res = train(desk_table, cfg, TrainConfig(steps=600, eval_every=0, **SURROGATE_TRAIN))
        out[variant] = (res, time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------


def test_criterion_01_ga_correctness():
    t0 = time.perf_counter()
    exact = np.array_equal(ga.GP_TABLE, product_table())
    rng = np.random.default_rng(0)
    a, b, c = rng.normal(size=(3, 1000, 16))
    gp = ga.geometric_product
    lhs, rhs = gp(gp(a, b), c), gp(a, gp(b, c))
    assoc = float(np.max(np.abs(lhs - rhs).max(-1) / np.abs(rhs).max(-1)))
    d_l, d_r = gp(a, b + c), gp(a, b) + gp(a, c)
    dist = float(np.max(np.abs(d_l - d_r).max(-1) / np.abs(d_r).max(-1)))
    elapsed = time.perf_counter() - t0
    ok = exact and assoc < 1e-10 and dist < 1e-10 and elapsed < 10
    report(1, ok, f"table exact={exact}, assoc rel {assoc:.2e}, distrib rel {dist:.2e} (< 1e-10), {elapsed:.2f} s (< 10 s)")


def test_criterion_02_versor_action():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        V, M = _random_pair(rng)
        x = rng.uniform(-5, 5, size=3)
        got = ga.extract_point(ga.sandwich(V, ga.embed_point(x)))
        worst = max(worst, float(np.abs(got - apply(M, x)).max()))
    report(2, worst < 1e-9, f"max point error {worst:.2e} m over 1000 pairs (< 1e-9)")


def _layer_deviations(versors):
    """Max equivariance error of every layer under the given versors."""
    rng = np.random.default_rng(1)
    x = rand_mv(rng, 2, 5, 4)
    w = Tensor(rng.normal(size=(3, 4, 9)))
    ref_pt = _points(rng, 1)[0]
    cfg = net.ModelConfig("gatr", blocks=2, mv_channels=4, scalar_channels=4, heads=2, in_mv=4, in_scalars=3, out_mv=1)
    params = net.as_tensors(net.init_params(cfg, 1), np.float64)
    sc = rng.normal(size=(2, 5, 3))
    q, k, v, qs, ks, vs = _attention_inputs(rng)

    def layer(f):
        return lambda V: (public(f(internal(act(V, x)))), act(V, public(f(internal(x)))))

    def bilinear(V):
        return _bilinear(act(V, x), act(V, ref_pt)[14]), act(V, _bilinear(x, ref_pt[14]))

    def attention(V):
        m2, s2 = _attend(act(V, q), act(V, k), act(V, v), qs, ks, vs)
        m1, s1 = _attend(q, k, v, qs, ks, vs)
        return np.concatenate([m2.ravel(), s2.ravel()]), np.concatenate([act(V, m1).ravel(), s1.ravel()])

    def model(V):
        m2, s2 = net.forward(params, cfg, act(V, x), sc)
        m1, s1 = net.forward(params, cfg, x, sc)
        return np.concatenate([m2.data.ravel(), s2.data.ravel()]), np.concatenate([act(V, m1.data).ravel(), s1.data.ravel()])

    layers = {
        "equi_linear": layer(lambda t: net.equi_linear_mv(t, w)),
        "bilinear": bilinear,
        "gated_gelu": layer(net.gated_gelu),
        "layernorm": layer(net.equi_layernorm),
        "attention": attention,
        "gatr_blocks": model,
    }
    return {name: max(float(np.abs(np.subtract(*f(V))).max()) for V in versors) for name, f in layers.items()}


def test_criterion_03_equivariance(trained, desk_table):
    rng = np.random.default_rng(3)
    versors = [ga.random_versor(rng) for _ in range(50)]
    n_refl = sum(V.parity for V in versors)
    layer_dev = _layer_deviations(versors)
    idx = split_by_scene(desk_table, 0.1, 0)[1][:8]
    dev = {}
    for variant in ("gatr", "transformer"):
        sur = trained[variant][0].surrogate
        base = [desk_table.link_scene(i) for i in idx]
        h0 = sur.predict_power(base, dtype=np.float64)
        diffs = []
        for V in versors:
            R, t = ga.versor_to_affine(V)
            diffs.append(sur.predict_power([s.transformed(R, t) for s in base], dtype=np.float64) - h0)
        dev[variant] = np.abs(np.array(diffs))
    g_max, t_mean = float(dev["gatr"].max()), float(dev["transformer"].mean())
    ok = max(layer_dev.values()) < 1e-9 and g_max < 1e-3 and t_mean > 1.0
    layers = ", ".join(f"{k} {v:.1e}" for k, v in layer_dev.items())
    report(3, ok, f"50 transforms ({n_refl} reflections); layers [{layers}]; trained gatr max |dh| {g_max:.2e} dB (< 1e-3); trained transformer mean |dh| {t_mean:.2f} dB (> 1)")


def test_criterion_04_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    errs = {}
    x = rand_mv(rng, 1, 3, 4)
    w = rng.normal(size=(4, 4, 9))
    ref = np.array([0.7])
    checks = {
        "equi_linear": lambda a, w: ad.sum_(net.equi_linear_mv(internal(a), w) * 0.5),
        "bilinear": lambda a, w: ad.sum_(net.geometric_bilinear(internal(a), ref) * ad.sum_(w)),
        "gated_gelu": lambda a, w: ad.sum_(net.gated_gelu(internal(a)) * ad.sum_(w)),
        "layernorm": lambda a, w: ad.sum_(net.equi_layernorm(internal(a)) * Tensor(np.linspace(-1, 1, 4))) + ad.sum_(w),
        "scalar_layernorm": lambda a, w: ad.sum_(net.scalar_layernorm(ad.reshape(a, (12, 16))) * Tensor(np.linspace(-1, 1, 16))) + ad.sum_(w),
    }
    for name, f in checks.items():
        errs[name] = gradcheck(f, [x, w]).max_rel_error
    q, k, v, qs, ks, vs = _attention_inputs(rng)
    wq = rng.normal(size=(16, 2, 5, 4))

    def att(q, k, v, qs, ks, vs):
        m, s = net.geometric_attention(internal(q), qs, internal(k), ks, internal(v), vs, 2)
        return ad.sum_(m * Tensor(wq)) + ad.sum_(s * s)

    errs["attention"] = gradcheck(att, [q, k, v, qs, ks, vs]).max_rel_error
    for variant in ("gatr", "transformer"):
        cfg = net.ModelConfig(variant, blocks=1, mv_channels=4, scalar_channels=4, heads=2, in_mv=2, in_scalars=3)
        mv = ga.embed_point(rng.uniform(-2, 2, size=(1, 3, 2, 3))) + 0.1 * rand_mv(rng, 1, 3, 2)
        errs[f"{variant}_model"] = _gradcheck_params(cfg, mv, rng.normal(size=(1, 3, 3))).max_rel_error
    scene = generate_scene(np.random.default_rng(4), SceneSpec(rooms=(1, 1), tx_per_scene=3))
    h = np.array([-55.0, -60.0, -58.0])
    v = scene.vertices.reshape(-1, 3)
    pos = rng.uniform(v.min(0) + 0.5, v.max(0) - 0.5, size=(2, 3))
    ori = Tensor(np.tile([0.0, 0.0, 1.0], (2, 1)))
    tiny = Surrogate.create(net.ModelConfig("gatr", blocks=1, mv_channels=4, scalar_channels=4, heads=1, in_scalars=IN_SCALARS), 0)
    for name, model in (("objective_oracle", OraclePowerModel(scene)), ("objective_surrogate", SurrogatePowerModel(tiny, scene))):
        errs[name] = gradcheck(lambda p: ad.sum_(objective(model, scene.tx, h, p, ori)), [pos], step=1e-5).max_rel_error
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    report(4, ok, f"max rel err {worst:.2e} over {len(errs)} checks (< 1e-4; worst {max(errs, key=errs.get)}), {elapsed:.1f} s (< 60 s)")


def test_criterion_05_oracle_physics():
    free = Scene(np.zeros((0, 3, 3)), np.zeros(0, int), tx=[Antenna([0, 0, 0])], rx=[Antenna([1, 0, 0])])
    h = received_power(trace_paths(free))
    friis_ok = abs(h - (-43.33)) <= 0.01 and abs(h - friis_db(1.0, 3.5e9)) < 1e-12
    big = 100.0
    wall = np.array([[[0, -big, -big], [0, big, -big], [0, -big, 3 * big]]])
    one = Scene(wall, [0], tx=[Antenna([1, 1, 1])], rx=[Antenna([2, 1, 1])])
    refl = [p for p in trace_paths(one, max_reflections=1, max_transmissions=0) if p.interactions == ((0, REFLECT),)]
    mirror_err = abs(refl[0].length - 3.0)
    recip, e3 = 0.0, 0.0
    for seed in range(5):
        s = random_scene(seed)
        tr = Tracer(s)
        h1 = link_statistics(tr, s.tx[0].pos, s.rx[0].pos)[0]
        recip = max(recip, abs(h1 - link_statistics(tr, s.rx[0].pos, s.tx[0].pos)[0]) / abs(h1))
    rng = np.random.default_rng(5)
    s = random_scene(11)
    h0 = link_statistics(Tracer(s), s.tx[0].pos, s.rx[0].pos)[0]
    for _ in range(50):
        R, t = ga.versor_to_affine(ga.random_versor(rng))
        m = s.transformed(R, t)
        e3 = max(e3, abs(link_statistics(Tracer(m), m.tx[0].pos, m.rx[0].pos)[0] - h0))
    ok = friis_ok and mirror_err < 1e-12 and recip <= 1e-12 and e3 < 1e-9
    report(5, ok, f"Friis {h:.4f} dB (-43.33 +- 0.01); mirror length error {mirror_err:.1e} m; reciprocity rel {recip:.1e} (<= 1e-12); E(3) {e3:.1e} dB (< 1e-9)")


def test_criterion_06_learning(trained, desk_table):
    res, secs = trained["gatr"]
    mae = evaluate(res.surrogate, desk_table, res.val_idx)
    # overfit ten links
    idx = res.train_idx[:10]
    tc = TrainConfig(steps=200, batch_size=10, lr=3e-3, eval_every=0, flip_prob=0.0)
    small = net.ModelConfig("gatr", blocks=2, mv_channels=8, scalar_channels=8, heads=2)
    fit = train(desk_table, small, tc, idx, idx).surrogate
    fresh = Surrogate.create(fit.cfg, tc.seed, fit.normalizer)
    loss = lambda s: float(np.mean(((predict_table(s, desk_table, idx) - desk_table.power_db[idx]) / s.normalizer.sigma) ** 2))
    ratio = loss(fresh) / loss(fit)
    ok = mae <= 3.0 and ratio >= 10
    report(6, ok, f"held-out-scene MAE {mae:.3f} dB (<= 3) after 600 steps in {secs / 60:.1f} min (<= 120); overfit loss reduction {ratio:.0f}x (>= 10)")


def test_criterion_07_sample_efficiency(desk_table, tmp_path):
    cfgs = {v: net.ModelConfig(v, **SURROGATE) for v in ("gatr", "transformer")}
    out = tmp_path / "data_efficiency.csv"
    rows = data_efficiency_sweep(desk_table, [0.1, 1.0], [0, 1, 2], cfgs, TrainConfig(steps=1500, **SURROGATE_TRAIN), out_csv=out)
    with open(out) as fh:
        written = list(csv.DictReader(fh))
    mean = {(v, f): np.mean([r["val_mae_db"] for r in rows if r["variant"] == v and r["fraction"] == f]) for v in cfgs for f in (0.1, 1.0)}
    ok = len(written) == 12 and mean["gatr", 0.1] <= mean["transformer", 0.1]
    report(7, ok, f"10% fraction, 3 seeds: gatr {mean['gatr', 0.1]:.3f} dB vs transformer {mean['transformer', 0.1]:.3f} dB; full data gatr {mean['gatr', 1.0]:.3f}, transformer {mean['transformer', 1.0]:.3f}; CSV rows {len(written)}")


def test_criterion_08_localization():
    multi = SceneSpec(rooms=(1, 3), tx_per_scene=8)
    scenes = [generate_scene(np.random.default_rng([8, i]), multi) for i in range(20)]
    kw = dict(restarts=4, steps=300, lr=0.1)
    rows = localization_sweep(OraclePowerModel, scenes, [1, 4, 8], 5, seed=0, spec=multi, **kw)
    means = [r["mean_error_m"] for r in rows]
    trials = min(r["trials"] for r in rows)
    single = SceneSpec(rooms=(1, 1), tx_per_scene=8)
    rooms = [generate_scene(np.random.default_rng([9, i]), single) for i in range(10)]
    med = localization_sweep(OraclePowerModel, rooms, [8], 3, seed=1, spec=single, **kw)[0]["median_error_m"]
    ok = trials >= 100 and means[0] >= means[1] >= means[2] and med < 0.6
    report(8, ok, f"mean error 1/4/8 Tx {means[0]:.3f} / {means[1]:.3f} / {means[2]:.3f} m over {trials} trials each; single-room 8 Tx median {med:.2e} m (< 0.6)")


def test_criterion_09_diffusion(desk_table, trained):
    train_idx, val_idx = split_by_scene(desk_table, 0.1, 0)
    cfg = dif.denoiser_config(**SURROGATE)
    dcfg = dif.DiffusionConfig(T=1000, ddim_steps=10)
    model = dif.train_diffusion(desk_table, cfg, dcfg, dif.DiffusionTrainConfig(steps=4000, batch_size=16, lr=3e-3, log_every=0), train_idx)
    # conditioned entries are copied, never generated
    i0 = val_idx[0]
    scene, h0 = desk_table.link_scene(i0), float(desk_table.power_db[i0])
    cond = dif.collate_raw([dif.scene_to_raw(scene, float(model.normalizer.normalize(h0)), dcfg.coord_scale)] * 4)
    exact = True
    for kind, sampler in [(k, "ddim") for k in dif.MASK_TYPES] + [("signal", "ddpm")]:
        raw = dif.sample(model, scene, h0, kind, 4, seed=0, sampler=sampler)[1]
        fixed = ~dif.entry_mask(cond, dif.token_mask(cond, kind))
        exact &= bool(np.array_equal(raw[fixed], cond.x[fixed]))
    # prior term
    b = dif.collate_raw(dif.raw_items(desk_table, val_idx[:16], model.normalizer, dcfg.coord_scale))
    rng = np.random.default_rng(9)
    l_t = max(dif.vlb(model, b, dif.token_mask(b, k), rng, timesteps=[])["L_T"] for k in dif.MASK_TYPES)
    # signal prediction against the trained surrogate on the same links
    links = val_idx[:: len(val_idx) // 40][:40]
    truth = desk_table.power_db[links]
    mean_h = np.array([np.mean([h for _, h in dif.sample(model, desk_table.link_scene(i), None, "signal", 64, seed=int(i))[0]]) for i in links])
    dif_mae = float(np.mean(np.abs(mean_h - truth)))
    sur = trained["gatr"][0].surrogate
    sur_mae = float(np.mean(np.abs(sur.predict_power([desk_table.link_scene(i) for i in links]) - truth)))
    # receiver clouds for a strong and a weak measurement from one transmitter
    same = desk_table.power_db[desk_table.scene_of == desk_table.scene_of[i0]]
    weak, strong = np.percentile(same, [10, 90])
    rx = np.nonzero(cond.role[0] == dif.R_RX)[0][0]
    near = dif.sample(model, scene, strong, "rx", 64, seed=1)[1][:, rx, :3]
    far = dif.sample(model, scene, weak, "rx", 64, seed=2)[1][:, rx, :3]
    _, p = dif.permutation_test(near, far, n_perm=500, seed=0)
    tx = scene.tx[0].pos * dcfg.coord_scale
    d_near, d_far = (float(np.linalg.norm(c - tx, axis=1).mean() / dcfg.coord_scale) for c in (near, far))
    ok = exact and l_t < 1e-3 and dif_mae <= 2 * sur_mae and p < 0.01
    report(
        9,
        ok,
        f"inpainting exact={exact}; L_T {l_t:.1e} nats/dim (< 1e-3); signal MAE {dif_mae:.3f} dB vs surrogate {sur_mae:.3f} dB (<= 2x); "
        f"rx clouds for {strong:.1f} / {weak:.1f} dB at mean tx distance {d_near:.2f} / {d_far:.2f} m, permutation p {p:.3f} (< 0.01)",
    )


def _digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_reproducibility(tmp_path, monkeypatch, capsys):
    tiny = ["--blocks", "1", "--mv-channels", "4", "--scalar-channels", "8", "--heads", "2"]
    fixed = ["--seed", "3", "--threads", "1"]
    commands = [
        ["genscenes", "--n", "4", "--rooms", "1-2", "--tx-per-scene", "2", "--rx-per-scene", "4", "--out", "data"],
        ["train", "--dataset", "data/dataset.jsonl", "--steps", "6", "--batch-size", "4", "--eval-every", "3", *tiny, "--out", "m.wgtr"],
        ["eval", "--ckpt", "m.wgtr", "--dataset", "data/dataset.jsonl", "--transform", "rotation", "--out", "eval.json"],
        ["heatmap", "--ckpt", "m.wgtr", "--scene", "data/scenes/scene_00000.json", "--res", "1.0", "--out", "hm"],
        ["heatmap", "--oracle", "--scene", "data/scenes/scene_00000.json", "--res", "1.0", "--out", "hm_oracle"],
        ["localize", "--ckpt", "m.wgtr", "--scene", "data/scenes/scene_00000.json", "--measurements", "meas.csv", "--restarts", "2", "--steps", "5", "--out", "loc.json"],
        ["diffuse-train", "--dataset", "data/dataset.jsonl", "--steps", "3", "--batch-size", "2", "--T", "20", "--ddim-steps", "5", *tiny, "--out", "d.wgtr"],
        ["diffuse-sample", "--ckpt", "d.wgtr", "--scene", "data/scenes/scene_00000.json", "--mask", "rx", "--power", "-60", "--n", "2", "--sampler", "ddpm", "--out", "samples"],
        ["vlb", "--ckpt", "d.wgtr", "--dataset", "data/dataset.jsonl", "--mask", "signal", "--n-links", "2", "--timesteps", "3", "--out", "vlb.json"],
        ["sweep-data-efficiency", "--dataset", "data/dataset.jsonl", "--fractions", "0.5,1", "--seeds", "0", "--steps", "2", "--batch-size", "4", *tiny, "--out", "de.csv"],
        ["sweep-localization", "--oracle", "--n-scenes", "1", "--trials", "1", "--tx-counts", "1,2", "--restarts", "2", "--steps", "10", "--out", "sl.csv"],
    ]
    runs = []
    for r in ("a", "b"):
        d = tmp_path / r
        d.mkdir()
        (d / "meas.csv").write_text("tx_index,power_db\n0,-60.0\n1,-61.0\n")
        monkeypatch.chdir(d)
        stdout = {}
        for cmd in commands:
            code = cli_main(cmd + fixed)
            assert code == 0, cmd
            stdout[" ".join(cmd[:2])] = capsys.readouterr().out
        runs.append((_digest(d), stdout))
    names = sorted({c[0] for c in commands})
    same_files = runs[0][0] == runs[1][0]
    same_out = runs[0][1] == runs[1][1]
    diff = [k for k in runs[0][0] if runs[0][0][k] != runs[1][0].get(k)]
    report(10, same_files and same_out, f"{len(names)} commands, {len(runs[0][0])} output files byte-identical: {same_files}, stdout identical: {same_out}" + (f"; differing {diff[:5]}" if diff else ""))

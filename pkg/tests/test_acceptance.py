"""Acceptance criteria, each with its tolerance and wall-clock budget.

Every test records one PASS/FAIL line (printed in the terminal summary and
on stdout) and fails if either the numeric check or the time limit fails.
"""

import re
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, central_difference, max_rel_error, random_similarity
from gcrfcast.evaluation import build_report, coverage95, nlpd_terms
from gcrfcast.extensions import (
    Architecture,
    GradientAscentConfig,
    UfgcrfParams,
    UgcrfParams,
    init_theta,
    predict_structured,
    train_ufgcrf,
)
from gcrfcast.gcrf import (
    GcrfParams,
    GcrfSnapshot,
    assemble_b,
    assemble_precision,
    infer,
    total_loglik,
    train_gcrf,
)
from gcrfcast.harness import ExperimentConfig, run_experiment
from gcrfcast.similarity import SimilarityMatrix, common_history_similarity, variogram
from gcrfcast.synthetic import SynthConfig, generate_ar_graph, generate_gcrf_exact

pytestmark = pytest.mark.acceptance


def record(name, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"{detail} [{elapsed:.2f}s, limit {limit}s]"
    ACCEPTANCE.append((name, ok, line))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {line}")
    assert ok, f"{name}: {line}"


def random_instance(rng, n_max=20, k_max=3, l_max=2):
    """Random snapshot with per-node parameters, kept well conditioned."""
    N = int(rng.integers(2, n_max + 1))
    K = int(rng.integers(1, k_max + 1))
    L = int(rng.integers(1, l_max + 1))
    snap = GcrfSnapshot(rng.random((K, N)), [random_similarity(rng, N) for _ in range(L)],
                        rng.standard_normal(N))
    params = GcrfParams(rng.uniform(-2, 2, (K, N)), rng.uniform(-2, 2, L), "per-node")
    return snap, params


# --------------------------------------------------------------------------
# exactness
# --------------------------------------------------------------------------


def test_oracle_equivalence():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        snap, p = random_instance(rng)
        Q = assemble_precision(p, snap).toarray()
        cov = np.linalg.inv(Q)
        mu = cov @ assemble_b(p, snap)
        for method in ("dense", "sparse"):
            _, post = infer(p.alphas(snap), p.betas(snap), snap, method)
            worst = max(worst, np.max(np.abs(post.mu - mu)), np.max(np.abs(post.var_diag - np.diag(cov))))
    elapsed = time.perf_counter() - start
    record("oracle equivalence", worst <= 1e-10,
           f"50 instances, dense and sparse paths, max abs error {worst:.2e} (tol 1e-10)", elapsed, 5)


def _horizon_snapshot(rng, N, K, L, D):
    R = rng.random((K, N))
    return GcrfSnapshot(R, [random_similarity(rng, N) for _ in range(L)],
                        R.mean(axis=0) + 0.1 * rng.standard_normal(N),
                        rng.uniform(0.05, 0.5, (K, N)), rng.standard_normal((N, D)),
                        horizon=int(rng.integers(1, 4)))


def test_gradient_correctness():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {"GCRF": 0.0, "uGCRF": 0.0, "ufGCRF": 0.0}
    for _ in range(20):
        N, K, L, D = int(rng.integers(3, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), 3
        snap = _horizon_snapshot(rng, N, K, L, D)
        arch = Architecture(D, 3)
        models = {
            "GCRF": GcrfParams(0.5 * rng.standard_normal((K, N)), 0.5 * rng.standard_normal(L), "per-node"),
            "uGCRF": UgcrfParams(0.5 * rng.standard_normal((K, 3)), 0.5 * rng.standard_normal(L),
                                 rng.uniform(0.3, 1.0, (K, 3))),
            "ufGCRF": UfgcrfParams(np.vstack([init_theta(arch, rng, 0.5) for _ in range(K)]),
                                   0.5 * rng.standard_normal(L), arch, np.zeros(D), np.ones(D)),
        }
        for name, p in models.items():
            _, g = total_loglik(p, [snap])
            fd = central_difference(lambda x: total_loglik(p.unpack(x), [snap], grad=False)[0], p.pack())
            worst[name] = max(worst[name], max_rel_error(g, fd))
    elapsed = time.perf_counter() - start
    ok = worst["GCRF"] <= 1e-5 and worst["uGCRF"] <= 1e-5 and worst["ufGCRF"] <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient correctness", ok, f"20 instances, max rel error {detail} (tol 1e-5 / 1e-4 ufGCRF)",
           elapsed, 30)


def test_positive_definiteness():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    lowest = np.inf
    for _ in range(100):
        snap, p = random_instance(rng)
        p = GcrfParams(rng.uniform(-6, 6, p.u.shape), rng.uniform(-6, 6, p.v.shape), "per-node")
        lowest = min(lowest, np.linalg.eigvalsh(assemble_precision(p, snap).toarray()).min())
    elapsed = time.perf_counter() - start
    record("positive definiteness", lowest > 0, f"100 draws, smallest eigenvalue of Q {lowest:.3e}", elapsed, 10)


def test_parameter_recovery():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    S = random_similarity(rng, 10)
    snaps = generate_gcrf_exact(10, [1.0], [2.0], S, n_snapshots=200, seed=0)
    p = train_gcrf(snaps, mode="shared")
    elapsed = time.perf_counter() - start
    a, b = float(p.alpha[0]), float(p.beta[0])
    ok = abs(a - 1.0) <= 0.15 and abs(b / 2.0 - 1.0) <= 0.15
    record("parameter recovery", ok, f"alpha {a:.4f} (true 1), beta {b:.4f} (true 2), tol 15%", elapsed, 60)


def test_reduction_properties():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_beta = 0.0
    for _ in range(20):
        N = int(rng.integers(2, 21))
        snap = GcrfSnapshot(rng.random((1, N)), [random_similarity(rng, N)])
        p = GcrfParams(rng.uniform(-2, 2, (1, N)), [-30.0], "per-node")
        worst_beta = max(worst_beta, np.max(np.abs(predict_structured(p, snap).mean - snap.R[0])))
    snaps = []
    for _ in range(10):
        R = rng.random((2, 6))
        y = R.mean(axis=0) + 0.1 * rng.standard_normal(6)
        snaps.append(GcrfSnapshot(R, [random_similarity(rng, 6)], y, features=np.ones((6, 2))))
    gc = train_gcrf(snaps, mode="shared")
    uf = train_ufgcrf(snaps, config=GradientAscentConfig(hidden=0, method="lbfgs", max_epochs=500))
    worst_uf = max(np.max(np.abs(predict_structured(gc, s).mean - predict_structured(uf, s).mean)) for s in snaps)
    elapsed = time.perf_counter() - start
    ok = worst_beta <= 1e-8 and worst_uf <= 1e-6
    record("reduction properties", ok,
           f"beta->0 K=1 vs predictor {worst_beta:.1e} (tol 1e-8); "
           f"constant-feature ufGCRF vs shared GCRF {worst_uf:.1e} (tol 1e-6)", elapsed, 60)


# --------------------------------------------------------------------------
# metrics and graph diagnostics
# --------------------------------------------------------------------------


def test_nlpd_minimum_property():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    ok = True
    grid = np.exp(np.linspace(-5, 5, 2001))
    for r in np.exp(rng.uniform(-4, 3, 100)) * rng.choice([-1, 1], 100):
        s2 = r * r * grid
        vals = nlpd_terms(np.zeros_like(s2), s2, np.full_like(s2, r))
        d = np.diff(vals)
        # strictly decreasing up to sigma^2 = r^2 and strictly increasing after
        ok &= int(np.argmin(vals)) == 1000 and (d[:1000] < 0).all() and (d[1000:] > 0).all()
    elapsed = time.perf_counter() - start
    record("NLPD minimum property", ok, "100 residuals, unique minimum at sigma^2 = r^2", elapsed, 1)


def test_calibration_sanity():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    mean = rng.standard_normal(10000)
    var = rng.uniform(0.1, 3.0, 10000)
    truth = mean + np.sqrt(var) * rng.standard_normal(10000)
    cov = coverage95(mean, var, truth)
    elapsed = time.perf_counter() - start
    record("calibration sanity", 0.93 <= cov <= 0.97, f"coverage95 {cov:.4f} (band [0.93, 0.97])", elapsed, 5)


def test_variogram_verdicts():
    start = time.perf_counter()
    ds, _ = generate_ar_graph(SynthConfig(seed=0))
    t = ds.n_timesteps
    learned = variogram(common_history_similarity(ds, "target", 3, t), ds.targets[t - 1])
    rng = np.random.default_rng(6)
    R = rng.random((ds.n_nodes, ds.n_nodes))
    R = np.triu(R, 1)
    rand = variogram(SimilarityMatrix(R + R.T), ds.targets[t - 1])
    elapsed = time.perf_counter() - start
    ok = learned.verdict == "good" and rand.verdict == "bad"
    record("variogram verdicts", ok,
           f"common-history {learned.verdict} (rho {learned.spearman:.2f}), "
           f"random {rand.verdict} (rho {rand.spearman:.2f})", elapsed, 30)


# Reference RMSE table: printed 12-month average followed by the 12 monthly values.
REFERENCE_RMSE = r"""
LR lag1 & 0.3168 & 0.3027 & 0.3267 & 0.3504 & 0.3083 & 0.3004 & 0.3153 & 0.3119 & 0.3196 & 0.3154 & 0.3132 & 0.3142 & 0.3230
LR lag2 & 0.3296 & 0.3236 & 0.3262 & 0.3644 & 0.3191 & 0.3051 & 0.3228 & 0.3230 & 0.3331 & 0.3341 & 0.3320 & 0.3326 & 0.3393
LR lag3 & 0.3536 & 0.3483 & 0.3476 & 0.3967 & 0.3509 & 0.3312 & 0.3553 & 0.3465 & 0.3487 & 0.3588 & 0.3490 & 0.3535 & 0.3566
GP lag1 & 0.3098 & 0.3013 & 0.3306 & 0.3309 & 0.2933 & 0.2935 & 0.3097 & 0.3063 & 0.3176 & 0.3124 & 0.3035 & 0.2988 & 0.3200
GP lag2 & 0.3129 & 0.3073 & 0.3281 & 0.3338 & 0.2940 & 0.2952 & 0.3132 & 0.3127 & 0.3221 & 0.3141 & 0.3071 & 0.3029 & 0.3236
GP lag3 & 0.3158 & 0.3092 & 0.3299 & 0.3354 & 0.2961 & 0.2949 & 0.3182 & 0.3172 & 0.3239 & 0.3160 & 0.3092 & 0.3061 & 0.3330
GCRF + LR & \underline{0.2486} & \underline{0.2372} & \underline{0.2769} & \underline{0.2795} & \underline{0.2328} & \underline{0.2343} & \underline{0.2486} & \underline{0.2464} & \underline{0.2509} & \underline{0.2449} & \underline{0.2434} & \underline{0.2435} & \underline{0.2445}
uGCRF + LR & 0.3072 & 0.2938 & 0.3193 & 0.3395 & 0.2956 & 0.2900 & 0.3073 & 0.3025 & 0.3106 & 0.3061 & 0.3041 & 0.3049 & 0.3123
ufGCRF + LR & 0.2713 & \textit{0.2540} & \textit{0.2785} & 0.3115 & 0.2523 & \textit{0.2526} & \textit{0.2709} & \textit{0.2662} & 0.2764 & 0.2745 & 0.2727 & 0.2746 & \textit{0.2716}
GCRF + GP & \textbf{0.2447} & \textbf{0.2365} & \textbf{0.2686} & \textbf{0.2717} & \textbf{0.2298} & \textbf{0.2325} & \textbf{0.2472} & \textbf{0.2460} & \textbf{0.2532} & \textbf{0.2415} & \textbf{0.2362} & \textbf{0.2320} & \textbf{0.2410}
uGCRF + GP & 0.3013 & 0.2923 & 0.3211 & 0.3229 & 0.2840 & 0.2850 & 0.3027 & 0.2983 & 0.3100 & 0.3038 & 0.2953 & 0.2903 & 0.3102
ufGCRF + GP & \textit{0.2685} & 0.2569 & 0.2839 & \textit{0.2943} & \textit{0.2516} & 0.2532 & 0.2718 & 0.2669 & \textit{0.2762} & \textit{0.2697} & \textit{0.2635} & \textit{0.2610} & 0.2734
"""


def _reference_rows():
    rows = {}
    for line in REFERENCE_RMSE.strip().splitlines():
        cells = [re.sub(r"\\text(bf|it)\{|\\underline\{|\}", "", c).strip() for c in line.split("&")]
        rows[cells[0]] = (float(cells[1]), [float(c) for c in cells[2:]])
    return rows


def test_table_consistency():
    start = time.perf_counter()
    rows = _reference_rows()
    # one node with truth 0 per month makes each month's RMSE the printed value
    truths = {m: np.zeros(1) for m in range(12)}
    outputs = {name: {m: np.array([v]) for m, v in enumerate(vals)} for name, (_, vals) in rows.items()}
    report = build_report(outputs, truths)
    worst = max(abs(report.averages[name]["rmse"] - avg) for name, (avg, _) in rows.items())
    elapsed = time.perf_counter() - start
    record("table consistency", len(rows) == 12 and worst <= 5e-4,
           f"{len(rows)} rows, max |mean of months - printed average| {worst:.1e} (tol 5e-4)", elapsed, 1)


# --------------------------------------------------------------------------
# pipeline-level criteria
# --------------------------------------------------------------------------

# homophilous seasonal communities, 50 nodes, 120 months, 12-month rolling test
STRUCTURE_CONFIG = """
models = gcrf
families = lr,gp
lags = 1,2,3
sparsify = topk:9
synth.n_nodes = 50
synth.n_timesteps = 120
synth.ar1 = 0.1
synth.homophily = 0.1
synth.noise_low = 0.001
synth.noise_high = 0.001
synth.seasonal_amplitude = 0.5
synth.obs_noise = 0.1
synth.level_offset = 0
synth.seed = 0
"""

# per-node noise variance spanning 10x plus a feature-threshold regime
UNCERTAINTY_CONFIG = """
models = gcrf,ugcrf,ufgcrf
families = lr
sparsify = topk:9
uf_method = lbfgs
uf_weight_decay = 0.001
synth.n_nodes = 50
synth.n_timesteps = 120
synth.ar1 = 0.1
synth.homophily = 0.1
synth.noise_low = 0.001
synth.noise_high = 0.01
synth.seasonal_amplitude = 0.5
synth.common_phase = true
synth.regime_threshold = 0.3
synth.regime_factor = 30
synth.level_offset = 0
synth.level_spread = 0.2
synth.seed = 0
"""


@pytest.fixture(scope="module")
def structure_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("structure")
    start = time.perf_counter()
    result = run_experiment(ExperimentConfig.from_text(STRUCTURE_CONFIG), out)
    return result, time.perf_counter() - start


def test_structure_benefit(structure_run):
    result, elapsed = structure_run
    avg = {name: a["rmse"] for name, a in result.report.averages.items()}
    base = {name: v for name, v in avg.items() if "lag" in name}
    best_base_name = min(base, key=base.get)
    best_base = base[best_base_name]
    gcrf_name = min(("GCRF + LR", "GCRF + GP"), key=avg.get)
    gain = 1.0 - avg[gcrf_name] / best_base
    ok = gain >= 0.05 and avg[gcrf_name] < min(avg["LR lag1"], avg["GP lag1"])
    gp_vs_lr = "holds" if avg["GP lag1"] < avg["LR lag1"] else "does not hold"
    print(f"info: GP lag1 {avg['GP lag1']:.4f} < LR lag1 {avg['LR lag1']:.4f} {gp_vs_lr}")
    record("structure benefit", ok,
           f"{gcrf_name} {avg[gcrf_name]:.4f} vs best unstructured {best_base_name} {best_base:.4f}, "
           f"gain {100 * gain:.1f}% (need >= 5%); LR lag1 {avg['LR lag1']:.4f}, GP lag1 {avg['GP lag1']:.4f} "
           f"(GP lag1 < LR lag1 {gp_vs_lr}, informational)", elapsed, 300)


def test_uncertainty_ordering(tmp_path):
    start = time.perf_counter()
    result = run_experiment(ExperimentConfig.from_text(UNCERTAINTY_CONFIG), tmp_path)
    elapsed = time.perf_counter() - start
    per_node = {}
    for name in ("GCRF + LR", "uGCRF + LR", "ufGCRF + LR"):
        by_month = result.predictions[name]
        per_node[name] = np.mean([nlpd_terms(o.mean, o.variance, result.truths[m]) for m, o in by_month.items()],
                                 axis=0)
    g, u, f = (float(per_node[n].mean()) for n in ("GCRF + LR", "uGCRF + LR", "ufGCRF + LR"))
    win_u = float(np.mean(per_node["uGCRF + LR"] < per_node["GCRF + LR"]))
    win_f = float(np.mean(per_node["ufGCRF + LR"] < per_node["GCRF + LR"]))
    ok = f <= u < g and win_u >= 0.9 and win_f >= 0.9
    record("uncertainty ordering", ok,
           f"mean NLPD ufGCRF {f:.4f}, uGCRF {u:.4f}, GCRF {g:.4f}; nodes beating GCRF "
           f"uGCRF {100 * win_u:.0f}%, ufGCRF {100 * win_f:.0f}% (need >= 90%)", elapsed, 600)


def test_end_to_end_determinism(structure_run, tmp_path):
    first, first_elapsed = structure_run
    start = time.perf_counter()
    cfg = ExperimentConfig.from_file(first.out_dir / "config.cfg")
    second = run_experiment(cfg, tmp_path)
    elapsed = first_elapsed + time.perf_counter() - start
    same = [(first.out_dir / rel).read_bytes() == (second.out_dir / rel).read_bytes()
            for rel in ("reports/report.json", "reports/rmse.csv", "reports/nlpd.csv",
                        "predictions/predictions.csv")]
    record("end-to-end determinism", all(same),
           f"rerun from saved config: {sum(same)}/4 report files byte-identical", elapsed, 300)

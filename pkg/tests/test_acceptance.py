"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal, qmc

from fishy.aggregation import DensityPipeline, input_preprocess
from fishy.encoder import ToyTrainConfig, make_encoder, train_toy
from fishy.flow import FlowTrainConfig, flow_forward, flow_init, flow_inverse, flow_nll, flow_train
from fishy.metrics import (
    BinaryEvalAccumulator,
    average_precision,
    fpr_at_tpr,
    max_youden_j,
    pavpu,
)
from fishy.numerics import derive_rng
from fishy.pipeline import ExperimentConfig, run_experiment, train_flows
from fishy.scores import (
    dirichlet_differential_entropy,
    dirichlet_kl,
    entropy_score,
    mutual_information,
)
from fishy.synth import (
    OOD_LABEL,
    FogParams,
    ObjectAsset,
    SceneSpec,
    SynthConfig,
    apply_fog,
    bundled_dataset,
    load_dataset_split,
    make_backgrounds,
    manifest_digest,
    sample_placement,
)

from flow_helpers import fd_logdet, random_flow
from metric_oracles import brute_ap, brute_fpr_at_tpr, brute_youden_j, brute_youden_j_exact, random_instance


@pytest.fixture
def verdict(capsys):
    def report(number, title, checks, elapsed, limit):
        ok = all(v for _, v in checks) and elapsed < limit
        failed = [name for name, v in checks if not v]
        detail = "all checks hold" if not failed else "failed: " + "; ".join(failed)
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail} "
                  f"({elapsed:.1f}s, limit {limit:.0f}s)")
        assert ok, detail

    return report


def test_criterion_1_random_baseline_calibration(verdict):
    t0 = time.perf_counter()
    cfg = SynthConfig(n_train=0, n_validation=2, n_test=150, target_prevalence=0.0244)
    _, samples = bundled_dataset(cfg, 0)
    acc = BinaryEvalAccumulator()
    for i, s in enumerate(samples["test"]):
        acc.add(derive_rng(0, "random-scores", i).random(s.mask.shape), s.mask)
    prevalence = acc.positive_count / (acc.positive_count + acc.negative_count)
    ap, j = average_precision(acc), max_youden_j(acc)
    verdict(1, "random-baseline calibration", [
        (f"prevalence {prevalence:.4f} ~ 0.0244", abs(prevalence - 0.0244) < 0.002),
        (f"AP {ap:.4f} = 0.0244 +- 0.002", abs(ap - 0.0244) <= 0.002),
        (f"maxJ {j:.4f} = 0 +- 0.02", abs(j) <= 0.02),
    ], time.perf_counter() - t0, 120)


def test_criterion_2_metrics_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ap_ok = fpr_ok = j_ok = True
    for i in range(200):
        s, y = random_instance(rng, max_n=50, levels=None if i % 2 else 7)
        acc = BinaryEvalAccumulator().add(s, y)
        # step-rule sums run in a different order than the rational oracle: float rounding only
        ap_ok &= abs(average_precision(acc) - float(brute_ap(s, y))) <= 1e-12
        fpr_ok &= fpr_at_tpr(acc) == brute_fpr_at_tpr(s, y)
        j_ok &= max_youden_j(acc) == brute_youden_j(s, y)
        j_ok &= abs(max_youden_j(acc) - float(brute_youden_j_exact(s, y))) <= 1e-15
    s = rng.random(100_000)
    y = (rng.random(100_000) < 0.05 + 0.2 * s).astype(np.uint8)
    exact = average_precision(BinaryEvalAccumulator().add(s, y))
    hist = average_precision(BinaryEvalAccumulator("histogram", bins=2**16).add(s, y))
    verdict(2, "metrics oracle equivalence", [
        ("AP equals exhaustive oracle on 200 instances", ap_ok),
        ("FPR@95TPR equals exhaustive sweep", fpr_ok),
        ("max J equals exhaustive Youden sweep", j_ok),
        (f"histogram AP within 1e-3 of exact (diff {abs(exact - hist):.2e})", abs(exact - hist) < 1e-3),
    ], time.perf_counter() - t0, 30)


def test_criterion_3_flow_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    inv_err = 0.0
    for dim, steps in ((2, 4), (3, 6), (4, 8), (8, 8)):
        model = random_flow(dim, steps, seed=dim)
        z = rng.normal(size=(500, dim)) * 3
        inv_err = max(inv_err, float(np.max(np.abs(flow_inverse(model, flow_forward(model, z)[0]) - z))))
    ld_err = 0.0
    for dim in (2, 3, 4):
        model = random_flow(dim, 4, seed=10 + dim)
        for z in rng.normal(size=(5, dim)):
            ld_err = max(ld_err, abs(flow_forward(model, z)[1][0] - fd_logdet(model, z)))
    ident = flow_init(2, 32)
    zi = rng.normal(size=(200, 2)) * 3
    exact_identity = bool(np.array_equal(flow_nll(ident, zi), math.log(2 * math.pi) + 0.5 * np.sum(zi * zi, axis=1)))
    dens = random_flow(2, 3, seed=11, scale=0.15)
    draws = flow_inverse(dens, rng.normal(size=(20000, 2)))
    lo, hi = draws.mean(axis=0) - 6 * draws.std(axis=0), draws.mean(axis=0) + 6 * draws.std(axis=0)
    grid = lo + (hi - lo) * qmc.Sobol(2, scramble=True, seed=0).random_base2(16)
    integral = float(np.prod(hi - lo)) * float(np.mean(np.exp(-flow_nll(dens, grid))))
    verdict(3, "flow correctness", [
        (f"invertibility max error {inv_err:.1e} < 1e-6", inv_err < 1e-6),
        (f"log-det vs finite differences {ld_err:.1e} < 1e-4", ld_err < 1e-4),
        ("identity flow NLL equals standard-normal NLL exactly", exact_identity),
        (f"density integral {integral:.4f} = 1 +- 0.02", abs(integral - 1.0) < 0.02),
    ], time.perf_counter() - t0, 120)


def test_criterion_4_flow_training_fidelity(verdict):
    t0 = time.perf_counter()
    cfg = FlowTrainConfig(iterations=2000, learning_rate=1e-3, steps=8, batch_size=256,
                          holdout_fraction=0.2, holdout_count=10000, seed=0)
    rng = np.random.default_rng(0)
    _, curve = flow_train(rng.normal(size=(50000, 2)), cfg)
    gauss_nll = curve[-1][1]
    gauss_true = math.log(2 * math.pi * math.e)
    # two diagonal components; axis-aligned pairs stall 2-D affine couplings at a single-Gaussian fit
    mu, sd = np.array([[2.0, 2.0], [-2.0, -2.0]]), 0.5
    data = mu[rng.integers(0, 2, 50000)] + sd * rng.normal(size=(50000, 2))
    mc_rng = np.random.default_rng(1)
    mc = mu[mc_rng.integers(0, 2, 10**6)] + sd * mc_rng.normal(size=(10**6, 2))
    logp = np.logaddexp(multivariate_normal.logpdf(mc, mu[0], sd**2), multivariate_normal.logpdf(mc, mu[1], sd**2))
    entropy = float(-np.mean(logp + math.log(0.5)))
    _, curve = flow_train(data, cfg)
    gmm_nll = curve[-1][1]
    verdict(4, "flow training fidelity", [
        (f"N(0, I2) holdout NLL {gauss_nll:.4f} within 0.05 of {gauss_true:.4f}", abs(gauss_nll - gauss_true) < 0.05),
        (f"GMM holdout NLL {gmm_nll:.4f} within 0.1 of entropy {entropy:.4f}", abs(gmm_nll - entropy) < 0.1),
    ], time.perf_counter() - t0, 300)


def test_criterion_5_method_ordering(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(methods=("random", "softmax_entropy", "knn_density", "learned_density_min"))
    ordered = knn_ok = 0
    lines = []
    for seed in range(5):
        res = run_experiment(cfg, seed)
        ap = {k: v["AP"] for k, v in res.items()}
        ordered += ap["learned_density_min"] > ap["softmax_entropy"]
        knn_ok += ap["knn_density"] >= 10 * ap["random"]
        lines.append(f"seed {seed}: LD-min {ap['learned_density_min']:.3f} entropy {ap['softmax_entropy']:.3f} "
                     f"kNN {ap['knn_density']:.3f} random {ap['random']:.4f}")
    print("\n".join(lines))
    verdict(5, "method ordering at toy scale", [
        (f"learned density (min) beats softmax entropy on {ordered}/5 seeds", ordered >= 4),
        (f"kNN density >= 10x random AP on {knn_ok}/5 seeds", knn_ok >= 4),
    ], time.perf_counter() - t0, 900)


def test_criterion_6_score_anchors(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    slice_ = rng.dirichlet(np.ones(5), size=(4, 4))
    kl_pairs = [(rng.uniform(0.1, 10, 4), rng.uniform(0.1, 10, 4)) for _ in range(200)]
    u, c = rng.random((8, 8)), rng.integers(0, 2, (8, 8))
    verdict(6, "score-formula anchors", [
        ("uniform C=19 entropy = log 19", abs(entropy_score(np.full(19, 1 / 19)) - 2.944439) < 1e-6
         and abs(entropy_score(np.full(19, 1 / 19)) - math.log(19)) < 1e-12),
        ("MI = 0 for identical MC slices", bool(np.all(mutual_information(np.stack([slice_] * 6)) == 0.0))),
        ("Dirichlet(1,1) differential entropy = 0", abs(dirichlet_differential_entropy(np.ones(2))) < 1e-12),
        ("Dirichlet KL > 0 for distinct pairs", all(dirichlet_kl(p, q) > 0 for p, q in kl_pairs)),
        ("Dirichlet KL = 0 for equal pairs", all(dirichlet_kl(p, p) == 0 for p, _ in kl_pairs)),
        ("PAvPU(all certain) = accuracy", abs(pavpu(u, c, threshold=1.0) - c.mean()) < 1e-15),
    ], time.perf_counter() - t0, 10)


def test_criterion_7_dataset_soundness(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = SynthConfig(n_train=4, n_validation=10, n_test=20)
    manifest, samples = bundled_dataset(cfg, 7, tmp_path / "a")
    bundled_dataset(cfg, 7, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    identical &= manifest_digest(tmp_path / "a" / "manifest.json") == manifest_digest(tmp_path / "b" / "manifest.json")
    ego_clean = all(not np.any((s.mask == OOD_LABEL) & s.ego_mask) for split in samples.values() for s in split)
    ood = sum(int(np.sum(m == 1)) for split in ("validation", "test")
              for _, _, m, _ in load_dataset_split(tmp_path / "a", split))
    scene = SceneSpec(np.zeros((64, 128, 3)), np.zeros((64, 128), bool))
    rgba = np.zeros((12, 12, 4))
    rgba[2:10, 2:10] = 1.0
    mammal = ObjectAsset(rgba, "mammal-like", "m")
    prng = np.random.default_rng(7)
    lower = sum(sample_placement(prng, scene, mammal).center_y > 32 for _ in range(10_000)) / 10_000
    img = prng.random((16, 16, 3))
    depth = prng.uniform(2, 50, size=(16, 16))
    light = np.array([0.8, 0.8, 0.82])
    fogged, _ = apply_fog(img, depth, FogParams(0.01, tuple(light), 1.0), prng)
    tr = np.exp(-0.01 * depth)[..., None]
    fog_err = float(np.max(np.abs(fogged - (tr * img + (1 - tr) * light))))
    verdict(7, "dataset generator soundness", [
        ("zero OoD pixels on ego masks", ego_clean),
        (f"manifest OoD count {manifest.ood_pixel_count} equals PNG recount {ood}", manifest.ood_pixel_count == ood),
        ("byte-identical regeneration", identical and len(files) > 0),
        (f"mammal-like lower-half frequency {lower:.4f} = 0.75 +- 0.02", abs(lower - 0.75) <= 0.02),
        (f"fog per-pixel error {fog_err:.1e} < 1/255", fog_err < 1 / 255),
    ], time.perf_counter() - t0, 180)


def test_criterion_8_input_preprocessing(verdict):
    t0 = time.perf_counter()
    toy = DensityPipeline(
        make_encoder(2, widths=(4, 5), seed=8, in_channels=1, zero_bias=False),
        {"s1": (random_flow(4, 2, 8, 0.3), 0.0), "s2": (random_flow(5, 2, 15, 0.3), 0.0)},
    )
    x = np.random.default_rng(8).uniform(0.2, 0.8, size=(4, 4, 1))
    g = toy.mean_nll_grad(x)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-6
        fd[idx] = (toy.mean_nll(x + e) - toy.mean_nll(x - e)) / 2e-6
    clear = np.abs(fd) > 1e-6
    sign_ok = bool(clear.sum() >= 12 and np.array_equal(np.sign(g[clear]), np.sign(fd[clear])))

    cfg = SynthConfig()
    train = make_backgrounds(40, cfg, 0, "train-backgrounds")
    images = np.stack([b.image for b in train])
    enc = train_toy(make_encoder(3, seed=0), [(b.image, b.labels) for b in train], ToyTrainConfig(300, seed=0))
    flows = train_flows(enc, images, ("s1", "s2"), FlowTrainConfig(iterations=1000, learning_rate=1e-3, steps=8),
                        20000, 0)
    pipe = DensityPipeline(enc, flows)
    trials = make_backgrounds(100, cfg, 8, "preprocess-trials")
    identity = all(np.array_equal(input_preprocess(b.image, pipe, 0.0), b.image) for b in trials[:5])
    decreased = sum(pipe.mean_nll(input_preprocess(b.image, pipe, 0.25)) < pipe.mean_nll(b.image) for b in trials)
    verdict(8, "input preprocessing", [
        ("epsilon = 0 is the identity", identity),
        ("sign-gradient matches finite differences on a 4x4 toy image", sign_ok),
        (f"epsilon = 0.25 lowers mean NLL in {decreased}/100 ID trials (>= 90)", decreased >= 90),
    ], time.perf_counter() - t0, 180)


def test_criterion_9_throughput(verdict):
    t0 = time.perf_counter()
    parts = []
    for i in range(100):
        r = np.random.default_rng(i)
        s = r.random(10**6)
        y = (r.random(10**6) < 0.025).astype(np.uint8)
        if i % 25 == 0:
            parts.append(BinaryEvalAccumulator("histogram", bins=2**16))
        parts[-1].add(s, y)
    merged = parts[0]
    for p in parts[1:]:
        merged = merged.merge(p)
    ap = average_precision(merged)
    total = merged.positive_count + merged.negative_count
    verdict(9, "streaming throughput", [
        (f"{total:.0e} pixel scores accumulated over 4 merged shards", total == 10**8),
        (f"random AP {ap:.4f} near prevalence", abs(ap - 0.025) < 0.001),
    ], time.perf_counter() - t0, 60)

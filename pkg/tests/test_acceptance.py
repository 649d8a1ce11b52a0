"""End-to-end acceptance checks, one test per criterion, each reported as PASS/FAIL.

The desk-scale runs go through the command line exactly as a user would run them:
generate-data (8 classes x 60), train --preset desk-smoke, train --preset desk-full.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from defend import cli
from defend.data import (
    CLASS_ORDER, generate_synthetic_dataset, load_dataset, render_with_band, training_corpus,
    validate_record,
)
from defend.decoder import DecoderConfig
from defend.evaluation import class_token_attention, infer_features
from defend.objectives import TERMS, contrastive_loss, description_loss, patch_coherence_loss
from defend.patching import SamplerConfig, adaptive_sample, num_patches, patchify, sample_image
from defend.trainer import ModelState, TrainConfig, compute_loss, ema_update, new_state, plain_batch, train_step
from conftest import ACCEPTANCE, fd_directional, fd_gradcheck, tiny_model
from test_decoder import make_decoder, overfit_captions, sharpen


def report(key, ok, detail):
    ACCEPTANCE[key] = (ok, detail)
    status = "PASS" if ok else ("INFO" if ok is None else "FAIL")
    print(f"{status} {key}: {detail}")


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "resolved_config.json":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- shared desk-scale runs ---------------------------------------------------------

@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_data")
    assert cli.main(["generate-data", "--out", str(out), "--classes", "8", "--per-class", "60"]) == 0
    return out


def train_run(data, out, preset):
    t0 = time.time()
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--preset", preset]) == 0
    return time.time() - t0


@pytest.fixture(scope="module")
def smoke_run(desk_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    seconds = train_run(desk_data, out, "desk-smoke")
    assert cli.main(["eval", "--data", str(desk_data), "--checkpoint", str(out / "checkpoints" / "final.npz"),
                     "--out", str(out / "eval"), "--task", "probe"]) == 0
    return out, seconds


@pytest.fixture(scope="module")
def full_run(desk_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    seconds = train_run(desk_data, out, "desk-full")
    for ck in ("ckpt_0", "final"):
        assert cli.main(["eval", "--data", str(desk_data), "--checkpoint", str(out / "checkpoints" / f"{ck}.npz"),
                         "--out", str(out / f"eval_{ck}"), "--task", "all"]) == 0
    return out, seconds


def metrics(path):
    return json.loads((path / "metrics.json").read_text())


# -- 1 ---------------------------------------------------------------------------

def test_c01_gradient_correctness(small_dataset, float64):
    t0 = time.time()
    torch.manual_seed(0)
    t, v = torch.randn(3, 8, requires_grad=True), torch.randn(3, 8, requires_grad=True)
    g, p = torch.randn(1, 8, requires_grad=True), torch.randn(3, 8, requires_grad=True)
    logits = torch.randn(3, 5, 8, requires_grad=True)
    targets = torch.tensor([[2, 4, 5, 6, 3], [2, 7, 3, 0, 0], [2, 5, 5, 4, 3]])
    errs = {
        "cont": fd_gradcheck(lambda: contrastive_loss(t, v), [t, v]),
        "pc": fd_gradcheck(lambda: patch_coherence_loss(g, p), [g, p]),
        "desc": fd_gradcheck(lambda: description_loss(logits, targets), [logits]),
    }
    _, _, train, vocab = small_dataset
    model = tiny_model(vocab)
    batch = plain_batch(train[:3], vocab, model.enc_cfg, SamplerConfig())
    cfg = TrainConfig()
    params = [q for _, q in model.trainable_parameters()]
    errs["train_step"] = fd_directional(lambda: compute_loss(model, batch, TERMS, cfg)[0], params)
    # the update train_step applies is exactly the analytic gradient (plain SGD, lr 1)
    grads = [torch.zeros_like(q) if q.grad is None else q.grad.clone() for q in params]
    before = [q.detach().clone() for q in params]
    train_step(batch, ModelState(model, torch.optim.SGD(params, lr=1.0)), cfg, lr=1.0)
    step_err = max(((b - q.detach()) - gr).norm().item() / max(gr.norm().item(), 1e-12)
                   for q, b, gr in zip(params, before, grads))
    elapsed = time.time() - t0
    ok = max(errs.values()) < 1e-4 and step_err < 1e-9 and elapsed < 60
    report(1, ok, "max rel err " + ", ".join(f"{k}={e:.1e}" for k, e in errs.items())
           + f"; step-vs-grad {step_err:.1e}; {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_c02_loss_closed_forms(float64):
    one = contrastive_loss(torch.randn(1, 8), torch.randn(1, 8)).item()
    u = torch.randn(1, 8).expand(5, 8)
    uniform = contrastive_loss(u, u.clone()).item()
    f_g = torch.randn(1, 8)
    # pooling 8 equal rows is exact; 6 rows leaves division roundoff in the mean
    pc = patch_coherence_loss(f_g, f_g.expand(8, 8)).item()
    pc6 = patch_coherence_loss(f_g, f_g.expand(6, 8)).item()
    m, vocab = 9, 17
    tgt = torch.tensor([[2] + list(range(4, 4 + m))])
    desc = description_loss(torch.zeros(1, m + 1, vocab), tgt).item()
    ok = (one == 0.0 and abs(uniform - math.log(5)) < 1e-9 and pc == 0.0 and pc6 < 1e-28
          and abs(desc - m * math.log(vocab)) < 1e-9)
    report(2, ok, f"B=1 -> {one}; uniform B=5 -> {uniform:.12f} (log 5 = {math.log(5):.12f}); "
                  f"pc -> {pc} (N=8), {pc6:.1e} (N=6); desc -> {desc:.12f} (M log V = {m * math.log(vocab):.12f})")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_c03_ema_contract(small_dataset, float64):
    _, _, train, vocab = small_dataset
    model = tiny_model(vocab)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for q in model.teacher.parameters():
            q.add_(torch.randn(q.shape, generator=gen) * 0.1)

    def dist():
        return torch.cat([(a - b).reshape(-1) for a, b in
                          zip(model.teacher.parameters(), model.student.parameters())]).norm().item()
    cfg = TrainConfig(ema_alpha=0.999)
    state = new_state(model, cfg)
    batch = plain_batch(train[:2], vocab, model.enc_cfg, SamplerConfig())
    d0 = dist()
    for _ in range(100):
        train_step(batch, state, cfg, active=("cont",), lr=0.0)   # student frozen
    rel = abs(dist() - 0.999 ** 100 * d0) / (0.999 ** 100 * d0)
    t, s = [torch.randn(4, 3)], [torch.randn(4, 3)]
    keep = t[0].clone()
    ema_update(t, s, 1.0)
    edge1 = torch.equal(t[0], keep)
    ema_update(t, s, 0.0)
    edge0 = torch.equal(t[0], s[0])
    ok = rel < 1e-6 and edge0 and edge1
    report(3, ok, f"k=100 contraction rel err {rel:.1e}; alpha=1 unchanged {edge1}; alpha=0 copies {edge0}")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_c04_sampler_contracts():
    pairs = [((224, 224, 16), 196), ((32, 32, 16), 4), ((64, 64, 8), 64), ((48, 32, 8), 24), ((16, 16, 4), 16)]
    counts_ok = all(num_patches(*a) == n and len(patchify(np.zeros(a[:2] + (3,)), a[2])) == n for a, n in pairs)
    rng = np.random.default_rng(0)
    mono_ok = True
    for _ in range(100):
        scores = rng.random(int(rng.integers(4, 65)))
        lo, hi = np.sort(rng.random(2))
        tiny = 1e-9
        a = set(adaptive_sample(scores, SamplerConfig(lambda_threshold=lo, min_retention_fraction=tiny)).tolist())
        b = set(adaptive_sample(scores, SamplerConfig(lambda_threshold=hi, min_retention_fraction=tiny)).tolist())
        if scores.max() > hi:
            mono_ok &= b <= a
    samples, _ = generate_synthetic_dataset(60, 8, seed=0)
    retention = np.mean([len(sample_image(s.image, 8, SamplerConfig())[0]) / 64 for s in samples])
    ok = counts_ok and mono_ok and 0.6 <= retention <= 0.9
    report(4, ok, f"N_P counts {counts_ok} (224/16 -> 196); lambda-monotone on 100 vectors {mono_ok}; "
                  f"mean retention {retention:.3f} in [0.6, 0.9]")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_c05_inference_path_equivalence(full_run, desk_data, float64):
    out, _ = full_run
    model, vocab, cfg, _ = cli.load_model(out / "checkpoints" / "final.npz")
    model.double()
    data = load_dataset(desk_data)
    samples = data.split("test")[:20]
    errs_g, errs_t, bundles = [], [], {}
    for lam in (0.3, 0.0, 0.9):
        batch = plain_batch(samples, vocab, cfg.encoder, SamplerConfig(lambda_threshold=lam))
        with torch.no_grad():
            bundles[lam] = model.features(batch)
    bundle = bundles[0.3]
    for i, s in enumerate(samples):
        f_G_star, f_T_star = infer_features(model, s.image, batch.text_ids[i].tolist())
        n = int(batch.text_valid[i].sum())
        errs_g.append((f_G_star - bundle.f_G_star[i]).abs().max().item())
        errs_t.append((f_T_star - bundle.f_T_star[i, :n]).abs().max().item())
    lam_same = all(torch.equal(bundles[lam].f_G_star, bundle.f_G_star)
                   and torch.equal(bundles[lam].f_T_star, bundle.f_T_star) for lam in (0.0, 0.9))
    err = max(errs_g + errs_t)
    ok = err <= 1e-12 and lam_same
    report(5, ok, f"max |infer - training teacher branch| over 20 images {err:.1e}; lambda-invariant {lam_same}")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def test_c06_desk_smoke_learning(smoke_run):
    out, seconds = smoke_run
    summary = json.loads((out / "train_summary.json").read_text())
    probe = metrics(out / "eval")["probe"]
    first, last = summary["initial_loss"]["total"], summary["final_loss"]["total"]
    ratio = last / first
    ok_a, ok_b, ok_c = ratio <= 0.5, probe["acc_top1"] >= 0.5, probe["acc_top5"] >= 0.95
    report("6a", ok_a, f"fixed-batch total loss {first:.3f} -> {last:.3f} (ratio {ratio:.3f} <= 0.5); "
                       f"train {seconds:.0f}s")
    report("6b", ok_b, f"probe acc@1 {probe['acc_top1']:.3f} >= 0.50 (chance {probe['chance']:.3f})")
    report("6c", ok_c, f"probe acc@5 {probe['acc_top5']:.3f} >= 0.95")
    assert seconds < 15 * 60
    assert ok_a and ok_b and ok_c


# -- 7 ---------------------------------------------------------------------------

def test_c07_desk_full_zero_shot(full_run):
    out, seconds = full_run
    zs = metrics(out / "eval_final")["zeroshot"]
    ok = zs["n"] >= 60 and zs["p_value"] < 0.01
    report(7, ok, f"held-out {zs['held_out_classes']}: {zs['correct']}/{zs['n']} correct, "
                  f"chance {zs['chance']:.3f}, binomial p {zs['p_value']:.2e}; train {seconds:.0f}s")
    assert ok


# -- 8 ---------------------------------------------------------------------------

def test_c08_decoder(float64):
    dec, captions, ft, fg, per_token = overfit_captions()
    exact = sum(dec.generate(ft[i], fg[i], mode="greedy").tokens == c[1:] for i, c in enumerate(captions))
    same = 0
    for seed in range(50):
        d = make_decoder(seed=seed, max_length=8)
        sharpen(d, 10.0)
        ctx_t, ctx_g = torch.randn(3, 8), torch.randn(1, 8)
        greedy = d.generate(ctx_t, ctx_g, mode="greedy").tokens
        beam1 = d.generate(ctx_t, ctx_g, DecoderConfig(num_layers=1, max_length=8, beam_size=1)).tokens
        same += greedy == beam1
    ok = per_token < 0.05 and exact == 10 and same == 50
    report(8, ok, f"overfit L_desc {per_token:.4f} nats/token; greedy exact {exact}/10; "
                  f"beam=1 == greedy on {same}/50 contexts")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_c09_schema_closure():
    samples, _ = generate_synthetic_dataset(60, 8, seed=0)
    valid = sum(validate_record(s.record.to_json()) == [] for s in samples)
    base = samples[0].record.to_json()
    cases = []
    r = json.loads(json.dumps(base))
    del r["category"]
    cases.append((r, ["missing field: category"]))
    r = json.loads(json.dumps(base))
    r["category"] = "Beverage"
    cases.append((r, ["invalid value for category: 'Beverage' (allowed: Combustible, Non-Combustible, "
                      "Nicotine Replacement)"]))
    r = json.loads(json.dumps(base))
    r["health_impact_labels"]["severity"] = {"level": "high"}
    del r["environmental_impact"]["type"]
    cases.append((r, ["wrong type for health_impact_labels.severity: expected list, got object",
                      "missing field: environmental_impact.type"]))
    matched = sum(validate_record(rec) == expected for rec, expected in cases)
    ok = valid == len(samples) and matched == 3
    report(9, ok, f"{valid}/{len(samples)} generated records valid; {matched}/3 malformed records "
                  f"give the expected error lists")
    assert ok


# -- 10 --------------------------------------------------------------------------

def test_c10_determinism(desk_data, tmp_path):
    again = tmp_path / "data_again"
    assert cli.main(["generate-data", "--out", str(again), "--classes", "8", "--per-class", "60"]) == 0
    same_data = digest(desk_data) == digest(again)
    logs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--data", str(desk_data), "--out", str(tmp_path / name),
                         "--preset", "desk-smoke", "--max-steps", "5"]) == 0
        logs.append((tmp_path / name / "loss_log.csv").read_bytes())
    same_log = logs[0] == logs[1] and len(logs[0].decode().splitlines()) == 6
    ok = same_data and same_log
    report(10, ok, f"dataset bytes identical {same_data}; 5-step loss CSVs identical {same_log}")
    assert ok


# -- checks on the trained desk models beyond the numbered criteria -------------

def test_untrained_zero_shot_is_at_chance(full_run):
    out, _ = full_run
    zs = metrics(out / "eval_ckpt_0")["zeroshot"]
    n, chance = zs["n_all"], 1 / 8
    lo, hi = binomtest(round(chance * n), n, chance).proportion_ci(0.99)
    bal = zs["all_classes_balanced_accuracy"]
    ok = lo <= bal <= hi
    report("ckpt0", ok, f"untrained balanced zero-shot accuracy {bal:.3f} inside 99% CI of chance "
                        f"[{lo:.3f}, {hi:.3f}] over {n} images; held-out-class hits {zs['correct']}/{zs['n']}")
    assert ok


def test_trained_probe_beats_chance_by_four(full_run):
    out, _ = full_run
    probe = metrics(out / "eval_final")["probe"]
    ok = probe["acc_top1"] >= 4 * probe["chance"]
    report("probe-full", ok, f"desk-full probe acc@1 {probe['acc_top1']:.3f} vs 4x chance {4 * probe['chance']:.3f}")
    assert ok


def test_probe_against_pixel_baseline(full_run, smoke_run):
    # reported, not asserted: see the decisions log for the analysis
    lines = []
    for name, path in (("smoke", smoke_run[0] / "eval"), ("full", full_run[0] / "eval_final")):
        p = metrics(path)["probe"]
        lines.append(f"{name} {p['acc_top1']:.3f} vs baseline {p['pixel_centroid_baseline']:.3f}")
    report("probe-vs-pixels", None, "; ".join(lines) + " (42 test images, one image = 0.024)")


def test_warning_band_attention(full_run, float64):
    out, _ = full_run
    rng = np.random.default_rng(123)
    hits, n = 0, 50
    trained, _, _, _ = cli.load_model(out / "checkpoints" / "final.npz")
    for i in range(n):
        img, band = render_with_band(CLASS_ORDER[i % 8], 64, rng, True)
        cover = band.reshape(8, 8, 8, 8).mean(axis=(1, 3)).ravel()
        in_band = cover >= 0.5 if (cover >= 0.5).any() else cover > 0
        attn = class_token_attention(trained, img)
        hits += attn[in_band].mean() > np.median(attn)
    p = binomtest(hits, n, 0.5, alternative="greater").pvalue
    ok = hits > n / 2 and p < 0.05
    report("attn", ok, f"warning-band patches above the median attention in {hits}/{n} images (p {p:.3f})")
    assert ok

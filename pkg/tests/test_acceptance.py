"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS/FAIL criterion N: ...`` line; the lines are
repeated in the terminal summary. Criteria 5 and 6 share one set of toy runs
(about 12 minutes on one CPU).
"""
import time

import numpy as np
import pytest

from bridgelab import autodiff as ad
from bridgelab.checkpoint import load_checkpoint, save_checkpoint
from bridgelab.config import TrainConfig
from bridgelab.corpus import SynthParams
from bridgelab.metrics import BleuConfig, ah_bleu, bleu, distinct_n, perplexity
from bridgelab.model import Seq2SeqTransformer
from bridgelab.sampling import samfun_adapbridge
from bridgelab.schedule import ScheduleParams, adap_alpha, adap_beta
from bridgelab.training import Example, compare, teacher_forced_nll, train

from conftest import tiny_config
from test_sampling import OpenGate, brute_force_mask, random_instance

SEEDS = (0, 1, 2)


# -- 1: gradient check ---------------------------------------------------------------


def test_criterion_1_gradient_check(report_line):
    start = time.perf_counter()
    with ad.default_dtype(np.float64):
        model = Seq2SeqTransformer(tiny_config(), seed=4, dtype=np.float64).eval()
        context, response = [5, 9, 4, 11, 6], [7, 8, 12, 6, 13]

        def loss():
            return float(model.forward_teacher(context, response)[1].data)

        model.zero_grad()
        model.forward_teacher(context, response)[1].backward()
        analytic, numeric, worst = [], [], (0.0, "")
        h = 1e-5
        for name, p in model.named_parameters():
            flat = p.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = loss()
                flat[i] = orig - h
                minus = loss()
                flat[i] = orig
                num[i] = (plus - minus) / (2 * h)
            grad = p.grad.reshape(-1).copy()
            analytic.append(grad)
            numeric.append(num)
            # key biases have an exactly zero gradient (softmax shift invariance), so
            # per-tensor errors get an absolute floor
            err = np.linalg.norm(grad - num) / max(np.linalg.norm(grad) + np.linalg.norm(num), 1e-6)
            worst = max(worst, (err, name))
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    rel = np.linalg.norm(a - n) / (np.linalg.norm(a) + np.linalg.norm(n))
    elapsed = time.perf_counter() - start
    ok = rel < 1e-5 and worst[0] < 1e-5 and elapsed < 120
    report_line("1", ok, f"{a.size} params, relative error {rel:.2e}, worst tensor {worst[1]} {worst[0]:.2e}, "
                         f"{elapsed:.1f}s")
    assert rel < 1e-5 and worst[0] < 1e-5
    assert elapsed < 120


# -- 2: schedule -----------------------------------------------------------------------


def test_criterion_2_schedule(report_line):
    start = time.perf_counter()
    params = ScheduleParams(k=5.0, w=32, gamma=0.9)
    alphas = [adap_alpha(n, params) for n in range(65)]
    betas = [adap_beta(a, params.gamma) for a in alphas]
    checks = {
        "alpha(32)=1/6": abs(alphas[32] - 1 / 6) <= 1e-12,
        "alpha(0)<1e-3": alphas[0] < 1e-3,
        "alpha(64)>0.99": alphas[64] > 0.99,
        "beta=0.9+0.1alpha": all(abs(b - (0.9 + 0.1 * a)) <= 1e-15 for a, b in zip(alphas, betas)),
        "strictly increasing": all(x < y for x, y in zip(alphas, alphas[1:]))
        and all(x < y for x, y in zip(betas, betas[1:])),
    }
    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 1.0
    report_line("2", ok, f"alpha(0)={alphas[0]:.4e} alpha(32)={alphas[32]!r} alpha(64)={alphas[64]:.6f}, "
                         f"failed={[k for k, v in checks.items() if not v]}, {elapsed * 1e3:.1f}ms")
    assert all(checks.values()), checks
    assert elapsed < 1.0


# -- 3: switch against the brute-force oracle ------------------------------------------


def test_criterion_3_switch_oracle(report_line):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    instances = 2000
    agree = 0
    for _ in range(instances):
        gen, gold, emb, beta = random_instance(rng)
        got = samfun_adapbridge(gen, gold, emb, 1.0, beta, OpenGate()).generated
        agree += list(got) == brute_force_mask(gen, gold, emb, beta)

    emb = rng.normal(size=(12, 6))
    gen, gold = [5, 6, 7, 8], [9, 10, 11, 4]
    beta_one = all(samfun_adapbridge(gen, gold, emb, 1.0, b, OpenGate()).tokens == tuple(gold) for b in (1.0, 1.5))
    alpha_zero = all(samfun_adapbridge(gen, gold, emb, 0.0, -1.0, np.random.default_rng(s)).tokens == tuple(gold)
                     for s in range(50))
    emb[6] = emb[10]  # token 6 is an exact synonym of gold token 10
    synonym = samfun_adapbridge([6], [10], emb, 1.0, 0.9, OpenGate()).tokens == (6,)
    elapsed = time.perf_counter() - start
    ok = agree == instances and beta_one and alpha_zero and synonym and elapsed < 30
    report_line("3", ok, f"{agree}/{instances} agree, beta>=1 gold={beta_one}, alpha=0 gold={alpha_zero}, "
                         f"synonym replaced={synonym}, {elapsed:.1f}s")
    assert agree == instances and beta_one and alpha_zero and synonym
    assert elapsed < 30


# -- 4: metric goldens -----------------------------------------------------------------


def test_criterion_4_metric_goldens(report_line):
    start = time.perf_counter()
    s = "the cat sat on the mat".split()
    identical = bleu(s, [s]) == 1.0
    b2 = bleu("the cat sat".split(), ["the cat sat down".split()], BleuConfig(max_order=2))
    dis1 = distinct_n([["a", "a", "a", "a"]], 1)
    c1, r1 = "a b c d".split(), ["a b c q".split(), "z z z z".split()]
    c2, r2 = "x y z".split(), ["x y w".split(), "x y z".split()]
    per = [max(bleu(c, [r], BleuConfig(max_order=2)) for r in refs) for c, refs in ((c1, r1), (c2, r2))]
    ah = ah_bleu([c1, c2], [r1, r2])
    ah_ok = abs(ah - sum(per) / 2) <= 1e-12 and per[1] == 1.0
    # zero weights give zero logits, hence a uniform next-token distribution
    V = 200
    model = Seq2SeqTransformer(tiny_config(vocab_size=V), seed=0).eval()
    for p in model.parameters():
        p.data[:] = 0.0
    rng = np.random.default_rng(0)
    examples = [Example(rng.integers(4, V, size=5).tolist(), rng.integers(4, V, size=6).tolist()) for _ in range(20)]
    ppl = perplexity(*teacher_forced_nll(model, examples))
    elapsed = time.perf_counter() - start
    ok = (identical and abs(b2 - 0.7165) <= 1e-3 and dis1 == 0.25 and ah_ok
          and abs(ppl - V) <= 1e-3 * V and elapsed < 5)
    report_line("4", ok, f"identical BLEU=1 {identical}, BLEU-2={b2:.4f}, DIS-1={dis1}, AH-BLEU max-then-mean "
                         f"{ah_ok}, uniform PPL={ppl:.4f} (V={V}), {elapsed * 1e3:.0f}ms")
    assert identical and dis1 == 0.25 and ah_ok
    assert b2 == pytest.approx(0.7165, abs=1e-3)
    assert ppl == pytest.approx(V, rel=1e-3)
    assert elapsed < 5


# -- 5 and 6: toy strategy comparison --------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    start = time.perf_counter()
    configs = [TrainConfig(seed=0, strategy=s) for s in ("teacher", "adapbridge")]
    rows = compare(configs, SEEDS, out_dir=out)
    compare_time = time.perf_counter() - start
    scheduled = train(TrainConfig(seed=0, strategy="scheduled", checkpoint=str(out / "scheduled.ckpt")))
    by = {(r.label.split("(")[0], r.seed): r for r in rows}
    return by, compare_time, scheduled


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="AdapBridge does not beat teacher forcing on the synthetic corpus in "
                                       "2 of 3 seeds; measured numbers are in the decisions ledger")
def test_criterion_5_adapbridge_vs_teacher(toy_runs, report_line):
    by, elapsed, _ = toy_runs
    dis_wins = sum(by["adapbridge", str(s)].report.distinct2 >= by["teacher", str(s)].report.distinct2 for s in SEEDS)
    ah_wins = sum(by["adapbridge", str(s)].report.ah_bleu2 >= by["teacher", str(s)].report.ah_bleu2 for s in SEEDS)
    detail = "; ".join(
        f"seed {s}: DIS-2 {by['adapbridge', str(s)].report.distinct2:.4f} vs {by['teacher', str(s)].report.distinct2:.4f}, "
        f"AH-BLEU-2 {by['adapbridge', str(s)].report.ah_bleu2:.4f} vs {by['teacher', str(s)].report.ah_bleu2:.4f}"
        for s in SEEDS)
    ok = dis_wins >= 2 and ah_wins >= 2 and elapsed < 1800
    report_line("5", ok, f"DIS-2 wins {dis_wins}/3, AH-BLEU-2 wins {ah_wins}/3 (adapbridge vs teacher) [{detail}], "
                         f"{elapsed / 60:.1f} min")
    assert elapsed < 1800
    assert dis_wins >= 2
    assert ah_wins >= 2


def _nll_drop(logs):
    return 1.0 - logs[-1].train_nll / logs[0].train_nll


@pytest.mark.slow
def test_criterion_6_nll_and_final_replacement(toy_runs, report_line):
    by, _, scheduled = toy_runs
    drops = {f"{name} seed {s}": _nll_drop(by[name, str(s)].logs) for name in ("teacher", "adapbridge") for s in SEEDS}
    drops["scheduled seed 0"] = _nll_drop(scheduled.logs)
    final = {s: by["adapbridge", str(s)].logs[-1].replaced_fraction for s in SEEDS}
    ok = all(d >= 0.5 for d in drops.values()) and all(f > 0.05 for f in final.values())
    report_line("6a", ok, f"min NLL reduction {min(drops.values()):.1%} ({min(drops, key=drops.get)}), "
                          f"final replaced fraction {', '.join(f'{f:.3f}' for f in final.values())}")
    assert all(d >= 0.5 for d in drops.values()), drops
    assert all(f > 0.05 for f in final.values()), final


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the schedule gives alpha(w-1) near 0.14 for k=5, so the gate opens for "
                                       "far more than 1% of positions before epoch w; see the decisions ledger")
def test_criterion_6_early_replacement_below_one_percent(toy_runs, report_line):
    by, _, _ = toy_runs
    w = TrainConfig(seed=0).schedule.w
    early = {s: max(e.replaced_fraction for e in by["adapbridge", str(s)].logs[:w]) for s in SEEDS}
    ok = all(v < 0.01 for v in early.values())
    report_line("6b", ok, f"max replaced fraction over the first {w} epochs: "
                          f"{', '.join(f'seed {s} {v:.3f}' for s, v in early.items())} (need < 0.01)")
    assert ok, early


# -- 7: determinism --------------------------------------------------------------------


def _small_config(tmp, seed=0):
    return TrainConfig(seed=seed, strategy="adapbridge", epochs=3, checkpoint=str(tmp / "m.ckpt"),
                       model=tiny_config(vocab_size=200, dropout_rate=0.1),
                       schedule=ScheduleParams(k=1.0, w=1, gamma=0.9),
                       synth=SynthParams(num_contexts=80))


def test_criterion_7_determinism(tmp_path, report_line):
    a = train(_small_config(tmp_path / "a"))
    b = train(_small_config(tmp_path / "b"))
    same_ckpt = (tmp_path / "a" / "m.ckpt").read_bytes() == (tmp_path / "b" / "m.ckpt").read_bytes()
    same_logs = [e.tsv().rsplit("\t", 1)[0] for e in a.logs] == [e.tsv().rsplit("\t", 1)[0] for e in b.logs]

    model, vocab, _ = load_checkpoint(tmp_path / "a" / "m.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", model, vocab, {"epoch": 2, "strategy": "adapbridge"})
    roundtrip = (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "a" / "m.ckpt").read_bytes()
    roundtrip &= all(model.params[k].data.tobytes() == p.data.tobytes() for k, p in a.model.named_parameters())

    rng = np.random.default_rng(77)
    V = model.config.vocab_size
    contexts = [rng.integers(4, V, size=int(rng.integers(1, 10))).tolist() for _ in range(100)]
    beam_eq = sum(model.generate_beam(c, 1, 12) == model.generate_greedy(c, 12) for c in contexts)
    ok = same_ckpt and same_logs and roundtrip and beam_eq == 100
    report_line("7", ok, f"identical checkpoints {same_ckpt}, identical logs {same_logs}, "
                         f"save/load bit-exact {roundtrip}, beam1==greedy {beam_eq}/100")
    assert same_ckpt and same_logs and roundtrip
    assert beam_eq == 100


def _ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(len(x))
    return ranks


@pytest.mark.slow
def test_adapbridge_replaced_fraction_trends_upward(toy_runs):
    by, _, _ = toy_runs
    for s in SEEDS:
        fractions = [e.replaced_fraction for e in by["adapbridge", str(s)].logs]
        rho = np.corrcoef(_ranks(np.arange(len(fractions))), _ranks(np.asarray(fractions)))[0, 1]
        assert rho > 0, (s, rho)

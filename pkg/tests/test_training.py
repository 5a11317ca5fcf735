import dataclasses
import math

import numpy as np
import pytest

from bridgelab.checkpoint import load_checkpoint
from bridgelab.config import ConfigError, config_from_kv
from bridgelab.corpus import BOS, PAD, DialoguePair, save_corpus
from bridgelab.schedule import adap_alpha, adap_beta, ss_decay_alpha
from bridgelab.training import (LOG_COLUMNS, DataSplits, Example, Trainer, TrainingDivergedError, compare,
                                comparison_table, decode_file, evaluate, evaluate_model, load_data, make_batches, pad,
                                train)


def small_kv(tmp_path, **extra):
    kv = {
        "seed": "0", "synth.num_contexts": "60", "synth.context_pool": "30", "synth.common_pool": "15",
        "synth.specific_pool": "30", "model.model_dim": "16", "model.num_heads": "2",
        "model.feedforward_dim": "32", "model.num_encoder_layers": "1", "model.num_decoder_layers": "1",
        "model.max_sequence_length": "16", "model.dropout_rate": "0.1", "train.epochs": "4",
        "train.learning_rate": "0.005", "schedule.k": "1", "schedule.w": "1", "eval.beam": "2",
        "eval.max_len": "8", "train.checkpoint": str(tmp_path / "m.ckpt"),
    }
    kv.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return kv


def small_cfg(tmp_path, **extra):
    return config_from_kv(small_kv(tmp_path, **extra))


def without_time(logs):
    return [dataclasses.replace(e, wall_time=0.0) for e in logs]


# -- batching ----------------------------------------------------------------------


def test_make_batches_cover_and_respect_budget():
    rng = np.random.default_rng(0)
    exs = [Example([4], [5] * int(n)) for n in rng.integers(1, 12, size=200)]
    batches = make_batches(exs, 40, np.random.default_rng(1))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(200))
    for b in batches:
        width = max(len(exs[i].tgt) for i in b) + 1
        assert width * len(b) <= 40 or len(b) == 1
    assert batches == make_batches(exs, 40, np.random.default_rng(1))
    assert make_batches(exs, 40, None) == make_batches(exs, 40, None)


def test_oversized_example_gets_own_batch():
    exs = [Example([4], [5] * 30), Example([4], [5])]
    assert sorted(map(len, make_batches(exs, 8, None))) == [1, 1]


# -- training runs -----------------------------------------------------------------


@pytest.fixture(scope="module")
def adap_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("adap")
    cfg = small_cfg(tmp, strategy="adapbridge")
    return cfg, train(cfg)


def test_log_file_and_schedule_columns(adap_run):
    cfg, result = adap_run
    lines = open(cfg.log_path).read().splitlines()
    assert lines[0].split("\t") == list(LOG_COLUMNS)
    assert len(lines) == 1 + cfg.epochs
    for n, entry in enumerate(result.logs):
        assert entry.epoch == n
        assert entry.alpha == adap_alpha(n, cfg.schedule)
        assert entry.beta == adap_beta(entry.alpha, cfg.schedule.gamma)
        assert 0.0 <= entry.replaced_fraction <= 1.0
        assert math.isfinite(entry.valid_ppl)
    assert float(lines[2].split("\t")[1]) == result.logs[1].alpha


def test_training_reduces_nll_and_saves_checkpoints(adap_run):
    cfg, result = adap_run
    assert result.logs[-1].train_nll < result.logs[0].train_nll
    final, vocab, header = load_checkpoint(cfg.checkpoint)
    assert vocab == result.vocab and header["extra.strategy"] == "adapbridge"
    for name, p in result.model.named_parameters():
        assert final.params[name].data.tobytes() == p.data.tobytes()
    best, _, best_header = load_checkpoint(cfg.checkpoint.replace(".ckpt", ".best.ckpt"))
    assert float(best_header["extra.valid_ppl"]) == result.best_valid_ppl == min(e.valid_ppl for e in result.logs)
    for name, arr in result.best_state.items():
        np.testing.assert_array_equal(best.params[name].data, arr)


def test_teacher_forcing_never_replaces(tmp_path):
    cfg = small_cfg(tmp_path, train__epochs=2)
    result = train(cfg)
    assert all(e.replaced_fraction == 0.0 and e.alpha == 0.0 and math.isnan(e.beta) for e in result.logs)


def test_scheduled_sampling_logs_keep_probability(tmp_path):
    cfg = small_cfg(tmp_path, strategy="scheduled", train__epochs=3)
    result = train(cfg)
    for n, e in enumerate(result.logs):
        assert e.alpha == ss_decay_alpha(n, 1.0)
    # keep probability 1/(1+e^n) is small, so most positions are replaced
    assert result.logs[-1].replaced_fraction > 0.5


def test_determinism_bit_identical(tmp_path):
    a = train(small_cfg(tmp_path / "a", strategy="adapbridge", train__epochs=3))
    b = train(small_cfg(tmp_path / "b", strategy="adapbridge", train__epochs=3))
    assert (tmp_path / "a" / "m.ckpt").read_bytes() == (tmp_path / "b" / "m.ckpt").read_bytes()
    assert without_time(a.logs) == without_time(b.logs)


def test_seed_changes_run(tmp_path):
    a = train(small_cfg(tmp_path / "a", train__epochs=1))
    b = train(small_cfg(tmp_path / "b", train__epochs=1, seed=1))
    assert a.logs[0].train_nll != b.logs[0].train_nll


def test_strategies_share_init_and_batches(tmp_path):
    # with alpha(0) tiny for adapbridge and no replacement for teacher, epoch 0 matches
    teacher = Trainer(small_cfg(tmp_path, schedule__w="50"))
    adap = Trainer(small_cfg(tmp_path, strategy="adapbridge", schedule__w="50"))
    for k, v in teacher.model.state_dict().items():
        np.testing.assert_array_equal(v, adap.model.state_dict()[k])
    assert teacher.run_epoch(0).train_nll == adap.run_epoch(0).train_nll


def test_adapbridge_mask_respects_special_positions(tmp_path):
    trainer = Trainer(small_cfg(tmp_path, strategy="adapbridge", schedule__gamma="0.0", schedule__w="0"))
    ex = trainer.train_examples[:8]
    src, gold = pad([e.src for e in ex]), pad([e.tgt for e in ex])
    lengths = np.asarray([len(e.tgt) for e in ex])
    tgt_in, mask = trainer.mixed_inputs(src, gold, lengths, n=100)
    assert np.all(tgt_in[:, 0] == BOS)
    assert not mask[gold == PAD].any()
    np.testing.assert_array_equal(tgt_in[:, 1:][~mask], gold[~mask])


def test_divergence_raises(tmp_path):
    trainer = Trainer(small_cfg(tmp_path))
    trainer.model.params["embedding"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 0 batch 0"):
        trainer.run_epoch(0)


def test_empty_training_corpus(tmp_path):
    with pytest.raises(ConfigError):
        Trainer(small_cfg(tmp_path), data=DataSplits([], [], []))


# -- evaluation and decoding -------------------------------------------------------


def test_evaluate_repeatable_and_bounded(adap_run, tmp_path):
    cfg, result = adap_run
    data = load_data(cfg)
    a = evaluate_model(result.model, result.vocab, data.test, beam=2, max_len=8)
    b = evaluate_model(result.model, result.vocab, data.test, beam=2, max_len=8)
    assert a == b
    assert a.ppl >= 1.0 and 0 <= a.bleu2 <= 1 and 0 <= a.ah_bleu2 <= 1
    save_corpus(data.test, tmp_path / "test.tsv")
    assert evaluate(cfg.checkpoint, tmp_path / "test.tsv", beam=2, max_len=8) == a
    assert evaluate_model(result.model, result.vocab, data.test, beam=1, max_len=8) == \
        evaluate_model(result.model, result.vocab, data.test, greedy=True, max_len=8)


def test_evaluate_rejects_foreign_corpus(adap_run):
    _, result = adap_run
    foreign = [DialoguePair(("zz", "yy"), (("qq",),))]
    with pytest.raises(ConfigError, match="vocabulary"):
        evaluate_model(result.model, result.vocab, foreign)
    with pytest.raises(ConfigError):
        evaluate_model(result.model, result.vocab, [])


def test_decode_file_line_per_context(adap_run, tmp_path):
    cfg, _ = adap_run
    contexts = tmp_path / "ctx.txt"
    contexts.write_text("a b c\n\nsome unknown words\tignored reference\n")
    out = tmp_path / "out.txt"
    responses = decode_file(cfg.checkpoint, contexts, out, beam=2, max_len=6)
    assert len(responses) == 3 and responses[1] == ""
    assert out.read_text().split("\n")[:3] == responses
    assert all(len(r.split()) <= 6 for r in responses)


# -- comparison --------------------------------------------------------------------


def test_compare_identical_configs_identical_rows(tmp_path):
    cfg = small_cfg(tmp_path, train__epochs=2)
    rows = compare([cfg, cfg], out_dir=tmp_path / "cmp")
    assert [r.seed for r in rows] == ["0", "0"]
    assert rows[0].report == rows[1].report


def test_compare_strategies_and_table(tmp_path):
    cfgs = [small_cfg(tmp_path, strategy=s, train__epochs=2) for s in ("teacher", "scheduled", "adapbridge")]
    seen = []
    rows = compare(cfgs, seeds=[0, 1], out_dir=tmp_path / "cmp", on_run=lambda *a: seen.append(a[:2]))
    assert len(seen) == 6
    assert [(r.label.split("(")[0], r.seed) for r in rows] == [
        (s, x) for s in ("teacher", "scheduled", "adapbridge") for x in ("0", "1", "mean")]
    mean = rows[2].report
    assert mean.ppl == pytest.approx((rows[0].report.ppl + rows[1].report.ppl) / 2)
    table = comparison_table(rows).splitlines()
    assert table[0].split("\t") == ["model", "seed", "PPL", "BLEU-2", "BLEU-4", "DIS-1", "DIS-2", "AH-BLEU-2"]
    assert len(table) == 10
    assert len(list((tmp_path / "cmp").glob("*.ckpt"))) == 12  # final and best per run


def test_compare_rejects_mismatched_data(tmp_path):
    a = small_cfg(tmp_path)
    b = small_cfg(tmp_path, synth__seed=5)
    with pytest.raises(ConfigError, match="corpus"):
        compare([a, b])
    with pytest.raises(ConfigError):
        compare([])

import json
import math
import random

import pytest

import poemform as pf


def busuanzi():
    return pf.FormSpec("Busuanzi", pf.FormCategory.CI, [5, 5, 7, 5, 5, 5, 7, 5], 4)


def random_body(rng, spec, alphabet):
    return ["".join(rng.choice(alphabet) for _ in range(n)) for n in spec.line_lengths]


def test_registry_has_builtin_shi_forms():
    reg = pf.FormRegistry()
    assert "Wuyan Jueju" in reg
    assert reg.at("Qiyan Lvshi").line_lengths == [7] * 8
    reg.add(busuanzi())
    assert reg.at("Busuanzi").body_length == 44
    with pytest.raises(pf.ValidationError):
        reg.add(busuanzi())


def test_invalid_spec_raises():
    with pytest.raises(pf.ValidationError):
        pf.FormSpec("Bad", pf.FormCategory.CI, [5, 0, 5])


def test_serialize_parse_round_trip():
    reg = pf.FormRegistry()
    reg.add(busuanzi())
    s = pf.Sample("Busuanzi", "咏梅", ["驿外断桥边", "寂寞开无主", "已是黄昏独自愁", "更著风和雨",
                                     "无意苦争春", "一任群芳妒", "零落成泥碾作尘", "只有香如故"], 4)
    text = pf.serialize(s, reg)
    assert text.startswith("[CLS]Busuanzi#咏梅*驿外断桥边,")
    assert "更著风和雨&无意苦争春" in text
    assert pf.parse(text) == s
    assert "&" not in pf.serialize(s, reg, include_stanza_label=False)


def test_normalize_punctuation():
    assert pf.normalize_punctuation("床前明月光，疑是地上霜。") == ["床前明月光", "疑是地上霜"]


def test_loss_identities():
    logits = [0.3, -1.2, 2.0, 0.0, 1.1, -0.4, 0.7, 0.2]
    expected = -logits[2] + math.log(sum(math.exp(x) for x in logits))
    assert pf.ce_loss(logits, 2) == pytest.approx(expected, rel=1e-12)
    assert pf.weighted_loss(logits, 2, pf.LossMode.BASIC) == pytest.approx(expected, rel=1e-12)
    assert pf.weighted_loss(logits, pf.EOS, pf.LossMode.ENHANCED) == pytest.approx(
        3 * pf.ce_loss(logits, pf.EOS), rel=1e-12)
    with pytest.raises(pf.ValidationError):
        pf.weighted_loss(logits[:4], 0, pf.LossMode.ENHANCED)


def test_check_form_reports_first_difference():
    spec = pf.FormSpec("Wuyan Jueju", pf.FormCategory.SHI, [5, 5, 5, 5])
    good = pf.Sample("Wuyan Jueju", "", ["床前明月光", "疑是地上霜", "举头望明月", "低头思故乡"])
    assert pf.check_form(good, spec)["verdict"]
    bad = pf.Sample("Wuyan Jueju", "", ["床前明月光", "疑是地上霜", "举头望明", "低头思故乡"])
    result = pf.check_form(bad, spec)
    assert not result["verdict"]
    assert result["diff"]["line"] == 3


def test_coverage():
    samples = [pf.Sample(name, "", ["一"]) for name in ["a"] * 6 + ["b"] * 3 + ["c"]]
    cov = pf.coverage(samples, 0.8)
    assert cov["k"] == 2
    assert cov["counts"][0] == ("a", 6)


def test_train_generate_evaluate(tmp_path):
    rng = random.Random(0)
    alphabet = [chr(0x4E00 + i) for i in range(30)]
    spec = busuanzi()
    samples = [pf.Sample("Busuanzi", "".join(rng.choice(alphabet) for _ in range(2)),
                         random_body(rng, spec, alphabet), 4) for _ in range(16)]
    vocab = pf.Vocabulary.build(samples)
    assert vocab.decode(vocab.encode(samples[0])) == pf.serialize_unchecked(samples[0])

    mc = pf.ModelConfig()
    mc.layers, mc.heads, mc.embed_dim, mc.ff_dim = 1, 2, 16, 32
    mc.vocab_size, mc.max_seq_len, mc.dropout_rate = len(vocab), 64, 0.0
    tc = pf.TrainConfig()
    tc.steps, tc.batch_size, tc.learning_rate, tc.warmup_steps, tc.report_every = 40, 8, 3e-3, 5, 10
    ckpt, losses = pf.train(pf.initial_checkpoint(mc, vocab.hash, 1), samples, vocab, tc)
    assert ckpt.step == 40
    assert [s for s, _ in losses] == [10, 20, 30, 40]
    assert all(math.isfinite(l) for _, l in losses)
    assert losses[-1][1] < losses[0][1]

    path = tmp_path / "model.pmc"
    ckpt.save(path)
    loaded = pf.Checkpoint.load(path)
    assert loaded.parameter_count == ckpt.parameter_count

    a = pf.generate(loaded, vocab, "Busuanzi", alphabet[0], count=5, top_k=5, seed=3)
    b = pf.generate(loaded, vocab, "Busuanzi", alphabet[0], count=5, top_k=5, seed=3)
    assert [r.raw for r in a] == [r.raw for r in b]
    assert all(r.raw[0] == pf.CLS for r in a)

    out = tmp_path / "gen.jsonl"
    pf.write_generations(out, a)
    records = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 5 and records[0]["form"] == "Busuanzi"

    reg = pf.FormRegistry()
    reg.add(spec)
    rows = pf.correct_rate(pf.read_generations(out), reg)
    assert rows[0]["form"] == "Busuanzi" and rows[0]["n_generated"] == 5
    assert 0.0 <= rows[0]["rate"] <= 1.0


def test_vocab_mismatch_rejected():
    rng = random.Random(1)
    alphabet = [chr(0x4E00 + i) for i in range(10)]
    samples = [pf.Sample("Busuanzi", "", random_body(rng, busuanzi(), alphabet), 4)]
    vocab = pf.Vocabulary.build(samples)
    mc = pf.ModelConfig()
    mc.layers, mc.heads, mc.embed_dim, mc.ff_dim, mc.vocab_size, mc.max_seq_len = 1, 1, 8, 8, len(vocab), 64
    ckpt = pf.initial_checkpoint(mc, vocab.hash ^ 1)
    with pytest.raises(pf.ValidationError):
        pf.generate(ckpt, vocab, "Busuanzi", "")

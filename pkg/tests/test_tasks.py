"""Task data: synthetic generator, JSONL loading, tokenizer, splits,
batching."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillroute.backbone import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from skillroute.errors import ConfigurationError, DataError
from skillroute.tasks import (RESERVED, GeneratorConfig, TaskSpec,
                              Vocabulary, apply_skill, batch_arrays,
                              export_tasks, few_shot_split,
                              generate_compositional_tasks, load_tasks,
                              _skill_permutations)


def small_config(**kw):
    base = dict(num_generator_skills=4, num_train_tasks=3, num_test_tasks=2,
                skills_per_task=2, examples_per_task=16, seq_len=5,
                symbols_per_skill=3, seed=0)
    base.update(kw)
    return GeneratorConfig(**base)


def test_generator_determinism():
    a = generate_compositional_tasks(small_config())
    b = generate_compositional_tasks(small_config())
    assert a.vocab.tokens == b.vocab.tokens
    for name in a.tasks:
        assert a.tasks[name].examples == b.tasks[name].examples
        assert np.array_equal(a.tasks[name].truth_allocation,
                              b.tasks[name].truth_allocation)


def test_generator_task_counts_and_vocab():
    ts = generate_compositional_tasks(small_config())
    assert len(ts.train_tasks) == 3
    assert len(ts.test_tasks) == 2
    assert len(ts.vocab) == 4 + 4 * 3
    assert ts.vocab.tokens[:4] == RESERVED


def test_targets_compose_active_skills():
    # oracle: re-apply each active skill's permutation one at a time
    cfg = small_config()
    rng = np.random.default_rng(cfg.seed)
    perms = _skill_permutations(cfg, rng)
    ts = generate_compositional_tasks(cfg)
    for spec in ts.tasks.values():
        active = np.flatnonzero(spec.truth_allocation)
        for inp, tgt in spec.examples[:4]:
            want = inp
            for g in active:
                want = apply_skill(want, int(g), cfg, perms)
            assert tgt == want


def test_truth_allocation_has_kappa_active():
    ts = generate_compositional_tasks(small_config())
    for spec in ts.tasks.values():
        assert spec.truth_allocation.sum() == 2


def test_single_skill_degenerate_case():
    cfg = small_config(num_generator_skills=1, skills_per_task=1)
    ts = generate_compositional_tasks(cfg)
    allocs = [tuple(t.truth_allocation) for t in ts.tasks.values()]
    assert set(allocs) == {(1.0,)}


def test_skill_permutations_never_identity():
    cfg = small_config(symbols_per_skill=2)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        perms = _skill_permutations(cfg, rng)
        for g, perm in enumerate(perms):
            base = np.arange(4 + g * 2, 4 + (g + 1) * 2)
            assert not np.array_equal(perm, base)


def test_generator_config_validation():
    with pytest.raises(ConfigurationError):
        small_config(skills_per_task=9)
    with pytest.raises(ConfigurationError):
        small_config(symbols_per_skill=1)


def test_vocab_roundtrip():
    v = Vocabulary(RESERVED + ("a", "b", "c"))
    ids = v.tokenize("a c b b")
    assert ids == [4, 6, 5, 5]
    assert v.detokenize(ids) == "a c b b"
    assert v.tokenize("a zzz")[1] == UNK_ID
    v2 = Vocabulary.from_json(v.to_json())
    assert v2.tokens == v.tokens


def test_vocab_requires_reserved_prefix():
    with pytest.raises(DataError):
        Vocabulary(("a", "b", "c", "d"))


def test_load_tasks_single_line(tmp_path):
    p = tmp_path / "tasks.jsonl"
    p.write_text('{"task":"t1","split":"train-task",'
                 '"input":"a b","target":"b a"}\n')
    ts = load_tasks(str(p))
    assert list(ts.tasks) == ["t1"]
    (inp, tgt), = ts.tasks["t1"].examples
    assert len(inp) == 2 and len(tgt) == 2
    assert ts.vocab.decode(inp) == ["a", "b"]


def test_load_tasks_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.raises(DataError, match="no tasks"):
        load_tasks(str(p))


def test_load_tasks_malformed_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"task":"t1","split":"train-task",'
                 '"input":"a","target":"b"}\nnot json\n')
    with pytest.raises(DataError, match=":2"):
        load_tasks(str(p))


def test_load_tasks_bad_split(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"task":"t1","split":"dev","input":"a","target":"b"}\n')
    with pytest.raises(DataError, match="split"):
        load_tasks(str(p))


def test_load_tasks_conflicting_split(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(
        '{"task":"t1","split":"train-task","input":"a","target":"b"}\n'
        '{"task":"t1","split":"test-task","input":"a","target":"b"}\n')
    with pytest.raises(DataError, match="multiple splits"):
        load_tasks(str(p))


def test_export_load_roundtrip(tmp_path):
    ts = generate_compositional_tasks(small_config())
    p = tmp_path / "out.jsonl"
    export_tasks(ts, str(p))
    back = load_tasks(str(p))
    assert set(back.tasks) == set(ts.tasks)
    # generator symbol names sort lexicographically, ids are preserved
    assert back.vocab.tokens == ts.vocab.tokens
    for name in ts.tasks:
        assert back.tasks[name].examples == ts.tasks[name].examples


def test_few_shot_split_partition():
    ts = generate_compositional_tasks(small_config())
    spec = ts.tasks["train0"]
    support, query = few_shot_split(spec, 4, seed=0)
    assert len(support) == 4
    assert len(support) + len(query) == len(spec.examples)
    all_back = sorted(support + query)
    assert all_back == sorted(spec.examples)


def test_few_shot_split_zero_shot():
    ts = generate_compositional_tasks(small_config())
    support, query = few_shot_split(ts.tasks["train0"], 0, seed=0)
    assert support == []
    assert len(query) == 16


def test_few_shot_split_determinism_and_bounds():
    ts = generate_compositional_tasks(small_config())
    spec = ts.tasks["train1"]
    a = few_shot_split(spec, 3, seed=7)
    b = few_shot_split(spec, 3, seed=7)
    assert a == b
    with pytest.raises(DataError):
        few_shot_split(spec, 16, seed=0)
    with pytest.raises(DataError):
        few_shot_split(spec, -1, seed=0)


def test_task_spec_validation():
    with pytest.raises(DataError):
        TaskSpec("t", "train-task", [])
    with pytest.raises(DataError):
        TaskSpec("t", "dev", [((1,), (1,))])


def test_batch_arrays_layout():
    enc, dec_in, lab = batch_arrays([((5, 6), (7,)), ((8,), (9, 10))])
    assert enc.shape == (2, 2) and dec_in.shape == (2, 3)
    assert enc[1, 1] == PAD_ID
    assert dec_in[0, 0] == BOS_ID and dec_in[0, 1] == 7
    assert lab[0, 0] == 7 and lab[0, 1] == EOS_ID and lab[0, 2] == PAD_ID
    assert lab[1, 2] == EOS_ID
    with pytest.raises(DataError):
        batch_arrays([])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.integers(4, 15), min_size=1, max_size=6),
                min_size=1, max_size=4))
def test_batch_arrays_roundtrip_property(seqs):
    examples = [(tuple(s), tuple(s)) for s in seqs]
    enc, dec_in, lab = batch_arrays(examples)
    for b, (inp, tgt) in enumerate(examples):
        assert tuple(enc[b, :len(inp)]) == inp
        assert tuple(lab[b, :len(tgt)]) == tgt
        assert lab[b, len(tgt)] == EOS_ID
        assert dec_in[b, 0] == BOS_ID
        assert tuple(dec_in[b, 1:len(tgt) + 1]) == tgt


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_generator_examples_use_symbol_range(seed):
    cfg = small_config(seed=seed, examples_per_task=4, num_train_tasks=1,
                       num_test_tasks=0)
    ts = generate_compositional_tasks(cfg)
    hi = 4 + 4 * 3
    for spec in ts.tasks.values():
        for inp, tgt in spec.examples:
            assert all(4 <= t < hi for t in inp)
            assert all(4 <= t < hi for t in tgt)

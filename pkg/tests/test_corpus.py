import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gxlstm.corpus import (
    EMOTIONS, Corpus, CorruptionError, Dialogue, FormatError, StreamRef, SyntheticConfig, Utterance,
    ValidationError, build_context_window, canonical_refs, corpus_bytes, find_interlocutor, generate_synthetic,
    load_corpus, make_corpus, parse_corpus, same_speaker_pairs, split_dialogues, stream_slot,
    synthetic_class_means, write_corpus,
)


def toy_dialogue(speakers, did="d0", dim=3, labels=None):
    labels = labels or ["neutrality"] * len(speakers)
    utts = [
        Utterance(did, i, s, labels[i], np.full(dim, i + 1.0, np.float32), np.full(dim, -(i + 1.0), np.float32))
        for i, s in enumerate(speakers)
    ]
    return Dialogue(did, tuple(utts))


def small_corpus(seed=7, n=6):
    return generate_synthetic(SyntheticConfig(n_dialogues=n, embedding_dim=16, steps=4, seed=seed))


# -- GXEB file format -----------------------------------------------------

def test_round_trip_is_bit_identical(tmp_path):
    c = small_corpus()
    write_corpus(c, tmp_path / "c.gxeb")
    back = load_corpus(tmp_path / "c.gxeb")
    assert back == c
    assert corpus_bytes(back) == (tmp_path / "c.gxeb").read_bytes()


def test_two_writes_are_identical(tmp_path):
    c = small_corpus()
    write_corpus(c, tmp_path / "a")
    write_corpus(c, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_generated_corpus_digest_is_stable():
    cfg = SyntheticConfig(seed=7, n_dialogues=20)
    d1 = hashlib.sha256(corpus_bytes(generate_synthetic(cfg))).hexdigest()
    d2 = hashlib.sha256(corpus_bytes(generate_synthetic(cfg))).hexdigest()
    assert d1 == d2


def test_empty_corpus_is_header_only():
    buf = corpus_bytes(Corpus((), 512))
    # 22-byte header + 8-byte metadata length, no metadata, no payload
    assert len(buf) == 30
    assert struct.unpack("<4sHIIQ", buf[:22]) == (b"GXEB", 1, 512, 0, 0)
    assert parse_corpus(buf) == Corpus((), 512)


def test_header_layout():
    c = small_corpus(n=2)
    buf = corpus_bytes(c)
    magic, version, dim, n_d, n_u = struct.unpack_from("<4sHIIQ", buf)
    assert (magic, version, dim, n_d, n_u) == (b"GXEB", 1, 16, 2, c.n_utterances)
    (meta_len,) = struct.unpack_from("<Q", buf, 22)
    assert len(buf) == 30 + meta_len + c.n_utterances * 2 * 16 * 4
    first = c.dialogues[0].utterances[0]
    payload = np.frombuffer(buf, "<f4", 2 * 16, 30 + meta_len)
    assert np.array_equal(payload[:16], first.audio) and np.array_equal(payload[16:], first.text)


def test_bad_magic_is_format_error():
    buf = bytearray(corpus_bytes(small_corpus(n=2)))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        parse_corpus(bytes(buf))


def test_bad_version_is_format_error():
    buf = bytearray(corpus_bytes(small_corpus(n=2)))
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(FormatError):
        parse_corpus(bytes(buf))


@pytest.mark.parametrize("cut", [10, 40, 200, 1])
def test_truncation_is_corruption_error(cut):
    buf = corpus_bytes(small_corpus(n=2))
    with pytest.raises((CorruptionError, FormatError)):
        parse_corpus(buf[: len(buf) - cut])


def test_non_contiguous_indices_rejected():
    u0 = Utterance("d", 0, "A", "anger", np.zeros(2, np.float32), np.zeros(2, np.float32))
    u2 = Utterance("d", 2, "B", "anger", np.zeros(2, np.float32), np.zeros(2, np.float32))
    with pytest.raises(ValidationError):
        Corpus((Dialogue("d", (u0, u2)),), 2)


def test_non_contiguous_indices_in_file_rejected():
    recs = [dict(dialogue_id="d", index=i, speaker_id="A", label="anger", audio=[0.0], text=[0.0]) for i in (0, 1)]
    buf = corpus_bytes(make_corpus(recs, 1)).replace(b'"index":1', b'"index":5')
    with pytest.raises(ValidationError):
        parse_corpus(buf)


def test_dimension_mismatch_rejected():
    u = Utterance("d", 0, "A", "anger", np.zeros(3, np.float32), np.zeros(4, np.float32))
    with pytest.raises(ValidationError):
        Corpus((Dialogue("d", (u,)),), 3)


def test_label_histogram_matches_recount():
    c = small_corpus(n=30)
    recount = {e: sum(u.label == e for u in c.utterances()) for e in EMOTIONS}
    assert c.label_histogram == recount
    assert sum(recount.values()) == c.n_utterances


# -- interlocutor and context windows -------------------------------------

def test_find_interlocutor_examples():
    assert find_interlocutor(["A", "B", "A"], 2) == 1
    assert find_interlocutor(["B", "A", "A"], 2) == 0
    assert find_interlocutor(["A", "A"], 1) is None


@given(st.lists(st.sampled_from("AB"), min_size=1, max_size=12), st.data())
def test_find_interlocutor_matches_scan(speakers, data):
    t = data.draw(st.integers(0, len(speakers) - 1))
    found = find_interlocutor(speakers, t)
    candidates = [j for j in range(t) if speakers[j] != speakers[t]]
    assert found == (max(candidates) if candidates else None)


def test_context_window_at_dialogue_start():
    s = build_context_window(toy_dialogue("ABAB"), 0)
    assert s.n_streams == 12
    assert [r.label for r in s.refs if not r.padded] == ["0A0", "0T0"]
    assert np.all(s.embeddings[s.padded_mask] == 0)


def test_context_window_alternating_t4():
    # anchors are A's turns 4, 2, 0; turn 0 has no earlier interlocutor, so one pair is padding
    s = build_context_window(toy_dialogue("ABABAB"), 4)
    idx = {(r.role, r.modality, r.frame): r.utterance_index for r in s.refs}
    assert [idx[("self", "audio", f)] for f in range(3)] == [4, 2, 0]
    assert [idx[("interlocutor", "audio", f)] for f in range(3)] == [3, 1, None]
    assert int((~s.padded_mask).sum()) == 10


def test_context_window_alternating_fully_resolved():
    s = build_context_window(toy_dialogue("ABABAB"), 5)
    assert not s.padded_mask.any()
    idx = [r.utterance_index for r in s.refs if r.role == "interlocutor" and r.modality == "audio"]
    assert idx == [4, 2, 0]


def test_context_window_embeddings_follow_refs():
    d = toy_dialogue("ABBAB")
    s = build_context_window(d, 4)
    for r, row in zip(s.refs, s.embeddings):
        want = np.zeros(3) if r.padded else d[r.utterance_index].embedding(r.modality)
        assert np.array_equal(row, want)


def test_context_window_single_frame():
    assert build_context_window(toy_dialogue("AB"), 1, frames=1).n_streams == 4


@given(st.lists(st.sampled_from("ABC"), min_size=1, max_size=10), st.integers(1, 4), st.data())
def test_context_window_shape_and_padding(speakers, frames, data):
    t = data.draw(st.integers(0, len(speakers) - 1))
    s = build_context_window(toy_dialogue(speakers), t, frames)
    assert s.n_streams == 4 * frames
    assert [r.slot for r in s.refs] == list(range(4 * frames))
    assert np.all(s.embeddings[s.padded_mask] == 0)
    assert not s.refs[0].padded and s.refs[0].utterance_index == t
    for r in s.refs:
        if not r.padded:
            assert r.utterance_index <= t


def test_canonical_slot_order():
    refs = canonical_refs(3)
    assert refs[0] == StreamRef("self", "audio", 0) and refs[0].is_reference
    assert stream_slot("interlocutor", "text", 2) == 11
    assert [r.label for r in refs[:4]] == ["0A0", "0T0", "1A0", "1T0"]


# -- splitting ------------------------------------------------------------

def test_split_ten_dialogues():
    tr, va, te = split_dialogues(small_corpus(n=10), seed=42)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_rounding_train_absorbs_remainder():
    tr, va, te = split_dialogues(small_corpus(n=151), seed=42)
    assert (len(tr), len(va), len(te)) == (121, 15, 15)


def test_split_is_deterministic():
    c = small_corpus(n=20)
    ids = lambda parts: [[d.id for d in p.dialogues] for p in parts]
    assert ids(split_dialogues(c, seed=42)) == ids(split_dialogues(c, seed=42))
    assert ids(split_dialogues(c, seed=42)) != ids(split_dialogues(c, seed=1))


@given(st.integers(3, 40), st.integers(0, 1000))
def test_split_is_a_partition(n, seed):
    c = Corpus(tuple(toy_dialogue("AB", did=f"d{i}") for i in range(n)), 3)
    parts = split_dialogues(c, seed=seed)
    ids = [d.id for p in parts for d in p.dialogues]
    assert sorted(ids) == sorted(d.id for d in c.dialogues)
    assert len(set(ids)) == len(ids)


def test_split_rejects_empty_and_tiny():
    with pytest.raises(ValueError):
        split_dialogues(Corpus((), 3))
    with pytest.raises(ValueError):
        split_dialogues(Corpus((toy_dialogue("AB"),), 3))


# -- synthetic generator --------------------------------------------------

def test_generator_is_pure():
    cfg = SyntheticConfig(n_dialogues=10, embedding_dim=16, steps=4)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)


def test_generator_two_speakers():
    for d in small_corpus(n=20).dialogues:
        assert len(d.speakers) <= 2


def test_absorbing_chain_holds_one_emotion_per_speaker():
    c = generate_synthetic(SyntheticConfig(n_dialogues=30, self_transition_prob=1.0, embedding_dim=16, steps=4))
    for d in c.dialogues:
        for spk in d.speakers:
            assert len({u.label for u in d.utterances if u.speaker_id == spk}) == 1


def test_repeat_frequency_matches_q():
    c = generate_synthetic(SyntheticConfig(n_dialogues=200, self_transition_prob=0.8))
    pairs = list(same_speaker_pairs(c))
    rate = np.mean([a == b for a, b in pairs])
    assert abs(rate - 0.8) <= 0.03


def test_zero_signal_is_pure_noise():
    cfg = SyntheticConfig(n_dialogues=5, signal_scale={"audio": 0.0, "text": 0.0}, sigma=1.0, embedding_dim=64)
    X = np.concatenate([np.stack([u.audio, u.text]) for u in generate_synthetic(cfg).utterances()])
    assert abs(X.mean()) < 0.1 and abs(X.std() - 1.0) < 0.1


def test_zero_signal_gives_chance_accuracy():
    from sklearn.linear_model import LogisticRegression

    c = generate_synthetic(SyntheticConfig(n_dialogues=200, signal_scale={"audio": 0.0, "text": 0.0}))
    tr, _, te = split_dialogues(c)
    feats = lambda part: (np.stack([np.concatenate([u.audio, u.text]) for u in part.utterances()]),
                          [u.label for u in part.utterances()])
    Xtr, ytr = feats(tr)
    Xte, yte = feats(te)
    acc = LogisticRegression(max_iter=500).fit(Xtr, ytr).score(Xte, yte)
    assert 0.15 <= acc <= 0.35


@pytest.mark.parametrize("layout", ["tiled", "orthogonal"])
def test_class_means_are_orthogonal_with_set_separation(layout):
    cfg = SyntheticConfig(embedding_dim=64, class_separation=4.0, mean_layout=layout)
    M = synthetic_class_means(cfg)
    assert np.allclose(M @ M.T, 16.0 * np.eye(4))


def test_tiled_means_repeat_in_every_segment():
    M = synthetic_class_means(SyntheticConfig(embedding_dim=64, steps=16))
    seg = M.reshape(4, 16, 4)
    assert np.allclose(seg, seg[:, :1, :])


def test_per_modality_signal_scale():
    cfg = SyntheticConfig(n_dialogues=40, signal_scale={"audio": 1.0, "text": 0.0}, sigma=0.1, embedding_dim=16,
                          steps=4)
    M = synthetic_class_means(cfg)
    u = next(generate_synthetic(cfg).utterances())
    assert np.linalg.norm(u.audio - M[u.label_index]) < 1.0
    assert np.linalg.norm(u.text) < 1.0


@pytest.mark.parametrize("bad", [
    dict(self_transition_prob=1.5), dict(sigma=0.0), dict(signal_scale={"video": 1.0}),
    dict(signal_scale={"audio": -1.0}), dict(embedding_dim=16, steps=16), dict(mean_layout="spiral"),
])
def test_invalid_synthetic_config(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(n_dialogues=2, **bad))

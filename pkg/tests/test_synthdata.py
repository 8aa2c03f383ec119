import numpy as np
import pytest

from ctcadapters.ctc import min_frames
from ctcadapters.errors import ConfigError
from ctcadapters.synthdata import (
    SynthSpec,
    generate,
    generate_role,
    load_dataset,
    make_language_pair,
    save_dataset,
    split_dataset,
    token_prototypes,
)


def spec(**overrides):
    base = dict(vocab_size=4, d_in=6, num_utterances=30, seed=7)
    base.update(overrides)
    return SynthSpec(**base)


class TestSpecValidation:
    def test_vocab_floor(self):
        with pytest.raises(ConfigError, match="vocab_size"):
            spec(vocab_size=1)

    def test_repeat_range_ordering(self):
        with pytest.raises(ConfigError, match="frames_per_token"):
            spec(frames_per_token_min=3, frames_per_token_max=2)

    def test_negative_noise_rejected(self):
        with pytest.raises(ConfigError, match="noise_sigma"):
            spec(noise_sigma=-0.1)


class TestGenerate:
    def test_deterministic_bitwise(self):
        a = generate(spec())
        b = generate(spec())
        assert len(a) == len(b) == 30
        for u, v in zip(a.utterances, b.utterances):
            assert u.labels == v.labels
            assert np.array_equal(u.frames, v.frames)

    def test_noiseless_frames_are_exact_prototype_repeats(self):
        ds = generate(spec(noise_sigma=0.0, frames_per_token_min=2, frames_per_token_max=2))
        protos = token_prototypes(ds.spec)
        for u in ds.utterances:
            assert u.true_length == 2 * len(u.labels)
            for i, tok in enumerate(u.labels):
                assert np.array_equal(u.frames[2 * i], protos[tok])
                assert np.array_equal(u.frames[2 * i + 1], protos[tok])

    def test_every_utterance_is_ctc_feasible(self):
        # repeat-heavy spec: the generator must pad repeats for feasibility
        ds = generate(spec(vocab_size=2, frames_per_token_min=1, frames_per_token_max=1,
                           utterance_len_min=4, utterance_len_max=6, num_utterances=100))
        for u in ds.utterances:
            assert u.true_length >= min_frames(u.labels)

    def test_frame_count_matches_true_length(self):
        for u in generate(spec()).utterances:
            assert u.frames.shape == (u.true_length, 6)

    def test_prototypes_unit_norm(self):
        protos = token_prototypes(spec())
        assert np.allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-12)

    def test_different_seeds_give_distinct_prototypes(self):
        p1 = token_prototypes(spec(seed=1))
        p2 = token_prototypes(spec(seed=2))
        dists = np.linalg.norm(p1[:, None, :] - p2[None, :, :], axis=2)
        assert dists.min() > 0


class TestLanguagePair:
    def test_pair_deterministic(self):
        a1, b1 = make_language_pair(spec())
        a2, b2 = make_language_pair(spec())
        for u, v in zip(b1.utterances, b2.utterances):
            assert u.labels == v.labels
            assert np.array_equal(u.frames, v.frames)

    def test_b_prototypes_differ_from_a(self):
        s = spec()
        from ctcadapters.synthdata import _PROTO_B

        pa = token_prototypes(s)
        pb = token_prototypes(s, _PROTO_B)
        dists = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
        assert dists.min() > 0

    def test_b_label_histogram_matches_uniform_family(self):
        s = spec(num_utterances=400)
        a, b = make_language_pair(s)
        counts_a = np.bincount([t for u in a.utterances for t in u.labels], minlength=4)
        counts_b = np.bincount([t for u in b.utterances for t in u.labels], minlength=4)
        # both uniform-family: no token under a third of the mean count
        assert counts_a.min() > counts_a.mean() / 3
        assert counts_b.min() > counts_b.mean() / 3

    def test_roles_reproduce_pair_sides(self):
        s = spec()
        a, b = make_language_pair(s)
        a_role = generate_role(s, "pair_a")
        b_role = generate_role(s, "pair_b")
        assert all(
            np.array_equal(u.frames, v.frames) for u, v in zip(a.utterances, a_role.utterances)
        )
        assert all(u.labels == v.labels for u, v in zip(b.utterances, b_role.utterances))

    def test_unknown_role_rejected(self):
        with pytest.raises(ConfigError, match="language_role"):
            generate_role(spec(), "pair_c")


class TestSplit:
    def test_split_partition_and_determinism(self):
        ds = generate(spec(num_utterances=50))
        train1, eval1 = split_dataset(ds, 0.2)
        train2, eval2 = split_dataset(ds, 0.2)
        assert len(eval1) == 10 and len(train1) == 40
        assert [id(u) for u in train1] == [id(u) for u in train2]
        assert [id(u) for u in eval1] == [id(u) for u in eval2]


class TestFileFormat:
    def test_round_trip_bitwise(self, tmp_path):
        ds = generate(spec())
        path = tmp_path / "data.bin"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.spec == ds.spec
        for u, v in zip(ds.utterances, loaded.utterances):
            assert u.labels == v.labels
            assert np.array_equal(u.frames, v.frames)

    def test_same_spec_writes_identical_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(generate(spec()), p1)
        save_dataset(generate(spec()), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset_has_valid_header(self, tmp_path):
        ds = generate(spec(num_utterances=0))
        path = tmp_path / "empty.bin"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert len(loaded) == 0
        assert loaded.spec.vocab_size == 4

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventsae import binfmt
from eventsae.errors import (FormatVersionMismatch, IoError, MissingFile, NonFiniteActivation,
                             ShapeMismatch, UnknownLayer)
from eventsae.rollout_store import (activation_batches, ingest, read_rollout, write_rollout,
                                    write_suite)

from conftest import make_rollout, make_set


def test_ingest_two_episodes_counts_rows(tmp_path):
    manifest = write_suite(make_set(2, T=10, d=4), tmp_path)
    rset = ingest(manifest)
    assert len(rset) == 2
    assert rset.total_rows(0) == 20
    assert [r.episode_id for r in rset] == ["ep0", "ep1"]


def test_ingest_is_repeatable(tmp_path):
    manifest = write_suite(make_set(3), tmp_path)
    a, b = ingest(manifest), ingest(manifest)
    assert all(x == y for x, y in zip(a.rollouts, b.rollouts))


def test_declared_length_mismatch_names_episode(tmp_path):
    manifest = write_suite(make_set(1), tmp_path)
    m = json.loads(manifest.read_text())
    m["episodes"][0]["length_T"] = 11
    manifest.write_text(json.dumps(m))
    with pytest.raises(ShapeMismatch, match="ep0"):
        ingest(manifest)


def test_short_ee_pos_is_shape_mismatch():
    r = make_rollout(T=10)
    r.ee_pos = r.ee_pos[:9]
    with pytest.raises(ShapeMismatch, match="ep0"):
        r.validate(declared_T=10)


def test_nan_activation_names_episode_timestep_layer(tmp_path):
    r = make_rollout(layers=(0, 3))
    r.activations[3][4, 1] = np.nan
    with pytest.raises(NonFiniteActivation, match=r"ep0.*timestep 4.*layer 3"):
        r.validate()


def test_missing_manifest_and_data(tmp_path):
    with pytest.raises(MissingFile):
        ingest(tmp_path / "nope.json")
    manifest = write_suite(make_set(1), tmp_path)
    (tmp_path / "episodes" / "ep0" / "traj.bin").unlink()
    with pytest.raises(MissingFile, match="ep0"):
        ingest(manifest)


def test_round_trip_small_rollout(tmp_path):
    r = make_rollout(T=5, d=3, layers=(0, 2), visual=True)
    write_rollout(r, tmp_path / "ep")
    back = read_rollout(tmp_path / "ep")
    assert back == r
    assert back.activations[2].tobytes() == r.activations[2].tobytes()


def test_round_trip_without_quaternion_and_with_tokens(tmp_path):
    r = make_rollout(T=6, d=2, quat=False, tokens=3)
    write_rollout(r, tmp_path / "ep")
    back = read_rollout(tmp_path / "ep")
    assert back == r and back.ee_quat is None
    assert back.rows(0)[0].shape == (18, 2)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(2, 12), d=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_round_trip_is_bit_exact(tmp_path_factory, T, d, seed):
    r = make_rollout(T=T, d=d, seed=seed, layers=(0, 1))
    path = tmp_path_factory.mktemp("rt")
    write_rollout(r, path)
    assert read_rollout(path) == r


def test_wrong_magic_is_version_mismatch(tmp_path):
    write_rollout(make_rollout(), tmp_path)
    p = tmp_path / "traj.bin"
    p.write_bytes(b"NOTMAGIC" + p.read_bytes()[8:])
    with pytest.raises(FormatVersionMismatch):
        read_rollout(tmp_path)


def test_wrong_version_is_version_mismatch():
    blob = bytearray(binfmt.pack_tensors([np.zeros(3)]))
    blob[8] = 9
    with pytest.raises(FormatVersionMismatch):
        binfmt.unpack_tensors(bytes(blob))


def test_truncated_payload_reports_byte_counts():
    blob = binfmt.pack_tensors([np.arange(6.0).reshape(2, 3)])
    with pytest.raises(IoError, match=r"expected \d+ bytes, got \d+"):
        binfmt.unpack_tensors(blob[:-5])


def test_binary_layout_is_little_endian_float32():
    blob = binfmt.pack_tensors([np.array([[1.0, 2.0]])])
    assert blob[:8] == binfmt.TENSOR_MAGIC
    assert int.from_bytes(blob[8:16], "little") == binfmt.FORMAT_VERSION
    assert np.frombuffer(blob[-8:], "<f4").tolist() == [1.0, 2.0]


def test_batches_partition_with_partial_tail():
    rset = make_set(2, T=10, d=4)
    batches = activation_batches(rset, 0, 8, seed=3)
    assert [len(b.data) for b in batches] == [8, 8, 4]
    prov = [p for b in batches for p in b.provenance]
    assert sorted(prov) == sorted((f"ep{i}", t) for i in range(2) for t in range(10))
    data, provs = rset.stacked(0)
    lookup = dict(zip(provs, data))
    for b in batches:
        for row, p in zip(b.data, b.provenance):
            assert np.array_equal(row, lookup[p])


def test_batches_deterministic_and_large_batch():
    rset = make_set(2)
    a = activation_batches(rset, 0, 5, seed=1)
    b = activation_batches(rset, 0, 5, seed=1)
    assert all(x.provenance == y.provenance for x, y in zip(a, b))
    assert len(activation_batches(rset, 0, 40000, seed=0)) == 1


def test_unknown_layer():
    with pytest.raises(UnknownLayer):
        activation_batches(make_set(1), 7, 4, seed=0)

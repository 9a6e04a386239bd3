"""Streaming accumulation vs the batch merge, state traces, serialization."""

import numpy as np
import pytest

from negmerge import (
    MergeSpec,
    TaskVector,
    TensorMap,
    consensus_stream,
    merge_negmerge,
    schema_of,
)
from negmerge.consensus_stream import finalize, init, load_state, save_state, update
from negmerge.errors import NoVectorsAbsorbed, SchemaMismatch

from conftest import random_pool


def tv(*vals):
    return TaskVector(TensorMap({"w": np.array(vals, dtype=np.float64)}))


def test_finalize_without_updates_errors():
    state = init(schema_of(tv(1.0, 2.0).delta))
    with pytest.raises(NoVectorsAbsorbed):
        finalize(state)


def test_single_update_is_identity():
    tau = tv(1.5, 0.0, -2.25)
    state = update(init(schema_of(tau.delta)), tau)
    out = finalize(state)
    assert out.delta == tau.delta


def test_empty_tensor_schema():
    tau = TaskVector(TensorMap({"w": np.zeros(0)}))
    state = update(init(schema_of(tau.delta)), tau)
    assert finalize(state).delta["w"].size == 0


def test_hand_state_trace():
    state = init(schema_of(tv(0.0, 0.0, 0.0).delta))
    update(state, tv(1.0, -2.0, 0.0))
    np.testing.assert_array_equal(state.sign["w"], [1, -1, 0])
    np.testing.assert_array_equal(state.alive("w"), [True, True, False])

    update(state, tv(2.0, -1.0, 4.0))
    np.testing.assert_array_equal(state.alive("w"), [True, True, False])
    np.testing.assert_array_equal(state.total["w"][:2], [3.0, -3.0])

    update(state, tv(-1.0, -1.0, 1.0))
    np.testing.assert_array_equal(state.alive("w"), [False, True, False])

    out = finalize(state, "avg")
    np.testing.assert_array_equal(out.delta["w"], [0.0, -4.0 / 3.0, 0.0])


def test_schema_mismatch_on_update():
    state = init(schema_of(tv(1.0).delta))
    with pytest.raises(SchemaMismatch):
        update(state, TaskVector(TensorMap({"w": np.zeros(3)})))


def test_alive_set_monotone(rng):
    pool = random_pool(rng, 8)
    state = init(schema_of(pool[0].delta))
    prev = None
    for tau in pool:
        update(state, tau)
        alive = np.concatenate([state.alive(n) for n in state.schema])
        if prev is not None:
            assert np.all(alive <= prev)
        prev = alive


def test_streaming_equals_batch_bitwise(rng):
    for _ in range(100):
        n = int(rng.integers(1, 9))
        pool = random_pool(rng, n)
        for reduce in ("avg", "min_mag", "max_mag"):
            batch = merge_negmerge(pool, MergeSpec(reduce=reduce))
            state = init(schema_of(pool[0].delta))
            for tau in pool:
                update(state, tau)
            streamed = finalize(state, reduce)
            assert streamed.delta == batch.delta  # same fold order: bit-identical


def test_streaming_f32_pool(rng):
    pool = random_pool(rng, 5, dtype=np.float32)
    state = init(schema_of(pool[0].delta))
    for tau in pool:
        update(state, tau)
    assert finalize(state).delta == merge_negmerge(pool).delta


def test_state_serialization_resume(tmp_path, rng):
    pool = random_pool(rng, 6)
    state = init(schema_of(pool[0].delta))
    for tau in pool[:3]:
        update(state, tau)
    save_state(state, tmp_path / "state.bin")
    resumed = load_state(tmp_path / "state.bin")
    assert resumed.n == 3
    for tau in pool[3:]:
        update(state, tau)
        update(resumed, tau)
    assert finalize(resumed).delta == finalize(state).delta
    assert finalize(resumed).delta == merge_negmerge(pool).delta


def test_state_size_independent_of_n(rng):
    # structural memory bound: the state holds four arrays per tensor, no history
    pool = random_pool(rng, 8)
    state = init(schema_of(pool[0].delta))
    update(state, pool[0])
    arrays_before = sum(len(d) for d in (state.sign, state.total, state.min_mag, state.max_mag))
    sizes_before = [state.sign[n].size for n in state.schema]
    for tau in pool[1:]:
        update(state, tau)
    arrays_after = sum(len(d) for d in (state.sign, state.total, state.min_mag, state.max_mag))
    assert arrays_before == arrays_after
    assert [state.sign[n].size for n in state.schema] == sizes_before


def test_zero_in_first_vector_kills_element():
    state = init(schema_of(tv(0.0, 1.0).delta))
    update(state, tv(0.0, 1.0))
    update(state, tv(5.0, 1.0))  # index 0 stays dead despite the later non-zero
    out = finalize(state)
    np.testing.assert_array_equal(out.delta["w"], [0.0, 1.0])


def test_streaming_rejects_bad_reduce():
    state = update(init(schema_of(tv(1.0).delta)), tv(1.0))
    from negmerge.errors import InvalidSpec
    with pytest.raises(InvalidSpec):
        finalize(state, "min_signed")
